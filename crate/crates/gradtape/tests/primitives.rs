use gradtape::{grad_check, GradError, Graph, Rng, Tensor, Var};
use proptest::prelude::*;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar through a fixed random projection so every
/// output coordinate contributes to the checked gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> gradtape::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = random(&mut Rng::new(seed, 99), &shape);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, point: Tensor, f: impl Fn(&mut Graph, Var) -> gradtape::Result<Var>) {
    let err = grad_check(f, &point, STEP).unwrap();
    assert!(err <= TOL, "{name}: relative error {err:e}");
}

#[test]
fn matmul_identity_padded() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let b = g.constant(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 0., 0.]).unwrap());
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 2]);
    assert_eq!(g.value(c).data(), &[1., 2., 4., 5.]);
}

#[test]
fn matmul_shape_mismatch_names_primitive() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 2]));
    match g.matmul(a, b) {
        Err(GradError::Shape { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(detail.contains("[2, 3]") && detail.contains("[2, 2]"), "{detail}");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 4]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.25; 4]);
}

#[test]
fn log_sum_exp_does_not_overflow() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]));
    let y = g.log_sum_exp(x);
    assert!((g.value(y).item() - (1000.0 + 2f64.ln())).abs() < 1e-12);
    let big = g.constant(Tensor::vector(vec![1e6, 1e6 - 1.0, -1e6]));
    let z = g.log_sum_exp(big);
    assert!(g.value(z).item().is_finite());
}

#[test]
fn backward_of_sum_of_squares() {
    let mut g = Graph::new();
    let w = g.input(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unreachable_parameter_gets_zero() {
    let mut store = gradtape::ParamStore::new();
    let used = store.add("used", Tensor::vector(vec![3.0]));
    store.add("unused", Tensor::vector(vec![5.0, 6.0]));
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let loss = g.sum(u);
    let grads = g.backward(loss).unwrap().for_store(&store);
    assert_eq!(grads[0].data(), &[1.0]);
    assert_eq!(grads[1].data(), &[0.0, 0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0);
    assert_eq!(g.backward(y).unwrap_err(), GradError::NonScalarLoss(vec![2]));
}

#[test]
fn cosine_gradient_vanishes_at_equal_vectors() {
    let v = Tensor::matrix(1, 3, vec![0.3, -1.2, 0.7]).unwrap();
    let mut g = Graph::new();
    let a = g.input(v.clone());
    let b = g.constant(v.clone());
    let c = g.cosine(a, b).unwrap();
    let loss = g.sum(c);
    let analytic = g.backward(loss).unwrap().wrt(a).unwrap();
    // central differences at the stated step
    for i in 0..3 {
        let f = |delta: f64| {
            let mut p = v.clone();
            p.data_mut()[i] += delta;
            let mut g = Graph::new();
            let a = g.constant(p);
            let b = g.constant(v.clone());
            let c = g.cosine(a, b).unwrap();
            g.value(c).item()
        };
        let numeric = (f(STEP) - f(-STEP)) / (2.0 * STEP);
        assert!(numeric.abs() < 1e-8);
        assert!(analytic.data()[i].abs() < 1e-12);
    }
}

#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = Rng::new(2024, 0);
    for trial in 0..5u64 {
        let s = 100 + trial;
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let c = random(&mut rng, &[3, 4]);
        let bt = random(&mut rng, &[5, 4]);
        let row = random(&mut rng, &[4]);

        let (b2, bt2, c2, row2) = (b.clone(), bt.clone(), c.clone(), row.clone());
        check("matmul", a.clone(), move |g, x| {
            let w = g.constant(b2.clone());
            let y = g.matmul(x, w)?;
            project(g, y, s)
        });
        check("matmul_t", a.clone(), move |g, x| {
            let w = g.constant(bt2.clone());
            let y = g.matmul_t(x, w)?;
            project(g, y, s)
        });
        let c3 = c2.clone();
        check("add", a.clone(), move |g, x| {
            let k = g.constant(c3.clone());
            let y = g.add(x, k)?;
            project(g, y, s)
        });
        let c3 = c2.clone();
        check("mul", a.clone(), move |g, x| {
            let k = g.constant(c3.clone());
            let y = g.mul(x, k)?;
            project(g, y, s)
        });
        check("add_row", row2.clone(), {
            let a = a.clone();
            move |g, x| {
                let m = g.constant(a.clone());
                let y = g.add_row(m, x)?;
                project(g, y, s)
            }
        });
        check("layer_norm", a.clone(), {
            let row = row2.clone();
            move |g, x| {
                let gain = g.constant(row.clone());
                let bias = g.constant(Tensor::zeros(&[4]));
                let y = g.layer_norm(x, gain, bias)?;
                project(g, y, s)
            }
        });
        check("layer_norm_gain", row2.clone(), {
            let a = a.clone();
            move |g, gain| {
                let x = g.constant(a.clone());
                let bias = g.constant(Tensor::zeros(&[4]));
                let y = g.layer_norm(x, gain, bias)?;
                project(g, y, s)
            }
        });
        check("softmax", a.clone(), move |g, x| {
            let y = g.softmax(x);
            project(g, y, s)
        });
        check("gelu", a.clone(), move |g, x| {
            let y = g.gelu(x);
            project(g, y, s)
        });
        check("gather", b.clone(), move |g, t| {
            let y = g.gather(t, &[2, 0, 2, 3])?;
            project(g, y, s)
        });
        check("concat_cols", a.clone(), {
            let c = c2.clone();
            move |g, x| {
                let k = g.constant(c.clone());
                let y = g.concat_cols(&[x, k, x])?;
                project(g, y, s)
            }
        });
        check("concat_rows", a.clone(), {
            let c = c2.clone();
            move |g, x| {
                let k = g.constant(c.clone());
                let y = g.concat_rows(&[k, x])?;
                project(g, y, s)
            }
        });
        check("mean_pool", b.clone(), move |g, x| {
            let y = g.mean_pool(x, 2)?;
            project(g, y, s)
        });
        check("log_sum_exp", a.clone(), move |g, x| {
            let y = g.log_sum_exp(x);
            project(g, y, s)
        });
        check("cross_entropy", a.clone(), move |g, x| g.cross_entropy(x, &[1, 3, 0]));
        check("squared_error", a.clone(), {
            let c = c2.clone();
            move |g, x| {
                let k = g.constant(c.clone());
                g.squared_error(x, k)
            }
        });
        check("cosine", a.clone(), {
            let c = c2.clone();
            move |g, x| {
                let k = g.constant(c.clone());
                let y = g.cosine(x, k)?;
                project(g, y, s)
            }
        });
        check("l2_normalize", a.clone(), move |g, x| {
            let y = g.l2_normalize(x);
            project(g, y, s)
        });
        check("exp_scale_mean", a.clone(), move |g, x| {
            let y = g.scale(x, 0.7);
            let y = g.add_scalar(y, 0.1);
            let y = g.exp(y);
            Ok(g.mean(y))
        });
        for causal in [false, true] {
            let qkv = random(&mut rng, &[6, 4]);
            let other = random(&mut rng, &[6, 4]);
            check("attention_q", qkv.clone(), {
                let o = other.clone();
                move |g, x| {
                    let k = g.constant(o.clone());
                    let y = g.attention(x, k, k, 2, 3, 2, causal)?;
                    project(g, y, s)
                }
            });
            check("attention_kv", qkv.clone(), {
                let o = other.clone();
                move |g, x| {
                    let q = g.constant(o.clone());
                    let y = g.attention(q, x, x, 2, 3, 2, causal)?;
                    project(g, y, s)
                }
            });
        }
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = Rng::new(5, 5);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, &[8, 6]));
        let w = g.input(random(&mut rng, &[6, 6]));
        let h = g.matmul(x, w).unwrap();
        let h = g.attention(h, h, h, 2, 4, 3, true).unwrap();
        let h = g.gelu(h);
        let loss = g.cross_entropy(h, &[0, 1, 2, 3, 4, 5, 0, 1]).unwrap();
        let gr = g.backward(loss).unwrap();
        (gr.wrt(x).unwrap(), gr.wrt(w).unwrap())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut rng = Rng::new(3, 1);
    let base = random(&mut rng, &[4, 4]);
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.attention(x, x, x, 1, 4, 2, true).unwrap();
        g.value(y).clone()
    };
    let mut perturbed = base.clone();
    for c in 0..4 {
        perturbed.data_mut()[3 * 4 + c] += 0.5;
    }
    let (y0, y1) = (run(&base), run(&perturbed));
    assert_eq!(&y0.data()[..12], &y1.data()[..12]);
    assert_ne!(&y0.data()[12..], &y1.data()[12..]);
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant(
        v in proptest::collection::vec(-5.0f64..5.0, 6),
        w in proptest::collection::vec(-5.0f64..5.0, 6),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        prop_assume!(w.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 6, v.clone()).unwrap());
        let scaled = g.constant(Tensor::matrix(1, 6, v.iter().map(|x| x * c).collect()).unwrap());
        let b = g.constant(Tensor::matrix(1, 6, w).unwrap());
        let c1 = g.cosine(a, b).unwrap();
        let c2 = g.cosine(scaled, b).unwrap();
        prop_assert!((g.value(c1).item() - g.value(c2).item()).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one(xs in proptest::collection::vec(-1e6f64..1e6, 1..12)) {
        let n = xs.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, n, xs.clone()).unwrap());
        let y = g.softmax(x);
        let s: f64 = g.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        let l = g.log_sum_exp(x);
        prop_assert!(g.value(l).item().is_finite());
    }
}
