use mmrl::eval::*;
use mmrl::worldgrid::{Split, TaskId};
use mmrl::Error;
use proptest::prelude::*;

/// Pearson correlation of the rank vectors, ranks from a quadratic count.
fn rank_oracle(xs: &[f64]) -> Vec<f64> {
    xs.iter()
        .map(|&x| {
            let below = xs.iter().filter(|&&y| y < x).count() as f64;
            let equal = xs.iter().filter(|&&y| y == x).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Rotates every vector by `theta` in each consecutive coordinate plane.
fn rotate(hs: &[Vec<f64>], theta: f64) -> Vec<Vec<f64>> {
    let (s, c) = theta.sin_cos();
    hs.iter()
        .map(|h| {
            let mut out = h.clone();
            for p in (0..h.len() - 1).step_by(2) {
                out[p] = c * h[p] - s * h[p + 1];
                out[p + 1] = s * h[p] + c * h[p + 1];
            }
            out
        })
        .collect()
}

#[test]
fn identical_sequences_are_fully_consistent() {
    let h: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
    assert_eq!(cycle_consistency(&h, &h).unwrap(), 100.0);
    assert!(cycle_consistency(&h, &h[..3]).is_err());
    assert!(cycle_consistency(&[], &[]).is_err());
}

#[test]
fn spearman_rejects_constant_input() {
    assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Undefined(_))));
    assert!(spearman(&[1.0], &[2.0]).is_err());
}

#[test]
fn expert_evaluation_ignores_thread_count() {
    for task in TaskId::ALL {
        let one = evaluate_agent(&ExpertAgent, task, Split::Test, 24, 5, 1).unwrap();
        let three = evaluate_agent(&ExpertAgent, task, Split::Test, 24, 5, 3).unwrap();
        assert_eq!(one, three);
        assert!(one.iter().all(|o| o.success));
        assert!(one.iter().enumerate().all(|(i, o)| o.index == i));
    }
    assert!(evaluate_agent(&ExpertAgent, TaskId::Corridor, Split::Test, 0, 5, 1).is_err());
}

#[test]
fn median_of_spearman_values() {
    let curves = vec![
        RewardCurve { level_seed: 0, rewards: vec![0.1, 0.2, 0.3], remaining: vec![] },
        RewardCurve { level_seed: 1, rewards: vec![0.3, 0.2, 0.1], remaining: vec![] },
        RewardCurve { level_seed: 2, rewards: vec![0.1, 0.3, 0.2], remaining: vec![] },
        RewardCurve { level_seed: 3, rewards: vec![0.5, 0.5, 0.5], remaining: vec![] },
    ];
    let (med, values, skipped) = median_time_reward_spearman(&curves).unwrap();
    assert_eq!(skipped, 1);
    assert_eq!(values.len(), 3);
    assert!((med - 0.5).abs() < 1e-12, "{med}");
}

fn vectors(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cycle_consistency_is_rotation_and_shift_invariant(
        (h1, h2) in (2usize..12).prop_flat_map(|n| (vectors(n, 6), vectors(n, 6))),
        theta in 0.0f64..std::f64::consts::TAU,
        shift in -5.0f64..5.0,
    ) {
        let base = cycle_consistency(&h1, &h2).unwrap();
        prop_assert!((0.0..=100.0).contains(&base));
        let moved = |hs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            rotate(hs, theta).into_iter().map(|h| h.into_iter().map(|x| x + shift).collect()).collect()
        };
        prop_assert_eq!(cycle_consistency(&moved(&h1), &moved(&h2)).unwrap(), base);
    }

    #[test]
    fn spearman_matches_rank_oracle(
        (xs, ys) in (2usize..30).prop_flat_map(|n| (
            prop::collection::vec(-3i32..3, n).prop_map(|v| v.into_iter().map(f64::from).collect::<Vec<_>>()),
            prop::collection::vec(-100.0f64..100.0, n),
        )),
    ) {
        let (rx, ry) = (rank_oracle(&xs), rank_oracle(&ys));
        prop_assert_eq!(&average_ranks(&xs), &rx);
        match spearman(&xs, &ys) {
            Ok(rho) => prop_assert!((rho - pearson(&rx, &ry)).abs() < 1e-9),
            Err(_) => prop_assert!(xs.iter().all(|&x| x == xs[0]) || ys.iter().all(|&y| y == ys[0])),
        }
    }

    #[test]
    fn spearman_ignores_monotone_transforms(
        (xs, ys) in (3usize..30).prop_flat_map(|n| (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )),
    ) {
        if let Ok(rho) = spearman(&xs, &ys) {
            let tx: Vec<f64> = xs.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let ty: Vec<f64> = ys.iter().map(|y| y.exp()).collect();
            prop_assert!((spearman(&tx, &ty).unwrap() - rho).abs() < 1e-12);
            let neg: Vec<f64> = ys.iter().map(|y| -y).collect();
            prop_assert!((spearman(&xs, &neg).unwrap() + rho).abs() < 1e-12);
            prop_assert!((spearman(&ys, &xs).unwrap() - rho).abs() < 1e-12);
        }
    }
}
