//! Scalar kernels shared by the forward and backward passes.

/// `c = beta·c + a·b` for an `[m, k]` by `[k, n]` product with arbitrary strides
/// on the operands; `c` is dense row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let max_offset = |rows: usize, cols: usize, (rs, cs): (isize, isize)| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    assert!(max_offset(m, k, a_strides) < a.len() as isize);
    assert!(max_offset(k, n, b_strides) < b.len() as isize);
    // SAFETY: the assertions above bound every strided access inside `a` and
    // `b`, and `c` holds at least m·n elements with unit column stride.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `e^x` by range reduction `x = n·ln2 + r`, `|r| ≤ ln2/2`, and a degree-13
/// Taylor polynomial (truncation error below 1e-17 relative). Straight-line
/// code so loops over slices vectorize.
#[inline(always)]
pub(crate) fn exp(x: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const MAGIC: f64 = 6_755_399_441_055_744.0; // 1.5·2^52
    let (lo, hi, nan) = (x < -708.0, x > 709.0, x.is_nan());
    let x = if nan { 0.0 } else { x.clamp(-708.0, 709.0) };
    let k = x * std::f64::consts::LOG2_E + MAGIC;
    let n = k - MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = (k.to_bits().wrapping_sub(MAGIC.to_bits())).wrapping_add(1023) << 52;
    let y = p * f64::from_bits(bits);
    if nan {
        f64::NAN
    } else if lo {
        0.0
    } else if hi {
        f64::INFINITY
    } else {
        y
    }
}

#[inline(always)]
fn tanh(u: f64) -> f64 {
    // 1 - 2/(e^{2u} + 1), written to stay finite for large |u|
    let e = exp(-2.0 * u.abs());
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

#[inline(always)]
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + tanh(u))
}

#[inline(always)]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[inline(always)]
fn softmax_impl(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    // separate passes: the map vectorizes, the ordered sum does not
    xs.iter_mut().for_each(|v| *v = exp(*v - m));
    for v in xs.iter() {
        s += *v;
    }
    xs.iter_mut().for_each(|v| *v /= s);
}

/// Runs `f` compiled for AVX2/FMA when the CPU has them. The same scalar
/// operations execute either way (no contraction into fused multiply-adds),
/// so results are bit-identical across the two paths.
macro_rules! dispatch {
    ($name:ident, $impl_fn:ident, ($($arg:ident: $ty:ty),*)) => {
        pub(crate) fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2,fma")]
                unsafe fn wide($($arg: $ty),*) {
                    $impl_fn($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
                    // SAFETY: the required CPU features were detected above.
                    return unsafe { wide($($arg),*) };
                }
            }
            $impl_fn($($arg),*)
        }
    };
}

dispatch!(softmax_in_place, softmax_impl, (xs: &mut [f64]));

#[inline(always)]
fn gelu_map_impl(x: &[f64], out: &mut [f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o = gelu(*v);
    }
}

#[inline(always)]
fn gelu_backward_impl(x: &[f64], g: &[f64], buf: &mut [f64]) {
    for ((b, v), gi) in buf.iter_mut().zip(x).zip(g) {
        *b += gi * gelu_grad(*v);
    }
}

dispatch!(gelu_map, gelu_map_impl, (x: &[f64], out: &mut [f64]));
dispatch!(gelu_backward, gelu_backward_impl, (x: &[f64], g: &[f64], buf: &mut [f64]));

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na.sqrt() * nb.sqrt()).max(1e-12);
    dot / denom
}

pub(crate) fn cosine_backward(
    a: &[f64],
    b: &[f64],
    d: usize,
    cos: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for r in 0..cos.len() {
        let (ar, br) = (&a[r * d..(r + 1) * d], &b[r * d..(r + 1) * d]);
        let na2: f64 = ar.iter().map(|v| v * v).sum();
        let nb2: f64 = br.iter().map(|v| v * v).sum();
        let denom = na2.sqrt() * nb2.sqrt();
        if denom < 1e-12 {
            continue;
        }
        let c = cos[r];
        for i in 0..d {
            ga[r * d + i] = g[r] * (br[i] / denom - c * ar[i] / na2);
            gb[r * d + i] = g[r] * (ar[i] / denom - c * br[i] / nb2);
        }
    }
    (ga, gb)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub width: usize,
    pub causal: bool,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Offset of element (row `i` of sequence `b`, head `h`, channel 0).
    fn at(&self, b: usize, i: usize, h: usize) -> usize {
        (b * self.seq + i) * self.width + h * self.head_dim()
    }

    fn keys_for(&self, i: usize) -> usize {
        if self.causal {
            i + 1
        } else {
            self.seq
        }
    }
}

/// Returns the attention output and the probability tensor `[batch, heads, seq, seq]`.
pub(crate) fn attention_forward(
    dims: &AttnDims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (t, dh, w) = (dims.seq, dims.head_dim(), dims.width as isize);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = vec![0.0; dims.batch * dims.heads * t * t];
    let mut head_out = vec![0.0; t * dh];
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let off = dims.at(b, 0, h);
            let p = &mut probs[(b * dims.heads + h) * t * t..][..t * t];
            gemm(t, dh, t, &q[off..], (w, 1), &k[off..], (1, w), p, 0.0);
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let nk = dims.keys_for(i);
                row[..nk].iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(&mut row[..nk]);
                row[nk..].iter_mut().for_each(|x| *x = 0.0);
            }
            gemm(t, t, dh, p, (t as isize, 1), &v[off..], (w, 1), &mut head_out, 0.0);
            for i in 0..t {
                let o = dims.at(b, i, h);
                out[o..o + dh].copy_from_slice(&head_out[i * dh..(i + 1) * dh]);
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    dims: &AttnDims,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t, dh, w) = (dims.seq, dims.head_dim(), dims.width as isize);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; t * t];
    let mut tmp = vec![0.0; t * dh];
    let scatter = |dst: &mut [f64], src: &[f64], b: usize, h: usize| {
        for i in 0..t {
            let o = dims.at(b, i, h);
            dst[o..o + dh].copy_from_slice(&src[i * dh..(i + 1) * dh]);
        }
    };
    for b in 0..dims.batch {
        for h in 0..dims.heads {
            let off = dims.at(b, 0, h);
            let p = &probs[(b * dims.heads + h) * t * t..][..t * t];
            // dV = Pᵀ·G
            gemm(t, t, dh, p, (1, t as isize), &g[off..], (w, 1), &mut tmp, 0.0);
            scatter(&mut dv, &tmp, b, h);
            // dP = G·Vᵀ, then the softmax Jacobian row by row
            gemm(t, dh, t, &g[off..], (w, 1), &v[off..], (1, w), &mut ds, 0.0);
            for i in 0..t {
                let (pr, dr) = (&p[i * t..(i + 1) * t], &mut ds[i * t..(i + 1) * t]);
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            gemm(t, t, dh, &ds, (t as isize, 1), &k[off..], (w, 1), &mut tmp, 0.0);
            scatter(&mut dq, &tmp, b, h);
            gemm(t, t, dh, &ds, (1, t as isize), &q[off..], (w, 1), &mut tmp, 0.0);
            scatter(&mut dk, &tmp, b, h);
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_std() {
        let mut worst: f64 = 0.0;
        let mut x = -700.0;
        while x < 700.0 {
            let (a, b) = (exp(x), x.exp());
            worst = worst.max(((a - b) / b).abs());
            x += 0.0137;
        }
        assert!(worst < 4e-16, "worst relative error {worst:e}");
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(f64::NEG_INFINITY), 0.0);
        assert_eq!(exp(710.0), f64::INFINITY);
        assert!(exp(f64::NAN).is_nan());
    }

    #[test]
    fn dispatched_paths_are_bit_identical() {
        let xs: Vec<f64> = (0..997).map(|i| ((i * 7919) % 1000) as f64 / 37.0 - 13.0).collect();
        let (mut a, mut b) = (xs.clone(), xs.clone());
        softmax_in_place(&mut a);
        softmax_impl(&mut b);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let (mut ga, mut gb) = (vec![0.0; xs.len()], vec![0.0; xs.len()]);
        gelu_map(&xs, &mut ga);
        gelu_map_impl(&xs, &mut gb);
        assert_eq!(ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let (mut da, mut db) = (vec![0.5; xs.len()], vec![0.5; xs.len()]);
        gelu_backward(&xs, &ga, &mut da);
        gelu_backward_impl(&xs, &ga, &mut db);
        assert_eq!(da.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), db.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn tanh_matches_std() {
        for i in -4000..4000 {
            let u = i as f64 * 0.005;
            assert!((tanh(u) - u.tanh()).abs() < 1e-15, "{u}");
        }
        assert_eq!(tanh(1e6), 1.0);
        assert_eq!(tanh(-1e6), -1.0);
    }
}
