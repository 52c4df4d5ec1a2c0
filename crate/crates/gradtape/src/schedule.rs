/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup: usize) -> f64 {
    debug_assert!(warmup < total.max(1));
    let step = step.min(total);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_starts_at_zero_and_peaks() {
        assert_eq!(lr_schedule(0, 100, 1e-3, 10), 0.0);
        assert!((lr_schedule(10, 100, 1e-3, 10) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(5, 100, 1e-3, 10) - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn cosine_midpoint_is_half() {
        let (warmup, total) = (10, 110);
        let lr = lr_schedule((warmup + total) / 2, total, 2.0, warmup);
        assert!((lr - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decays_to_zero_at_total() {
        assert!(lr_schedule(100, 100, 1.0, 10).abs() < 1e-15);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        assert_eq!(lr_schedule(0, 50, 0.5, 0), 0.5);
    }
}
