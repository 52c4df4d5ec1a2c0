use std::sync::Arc;

use gradtape::{grad_check, grad_check_params, GradError, Graph, Tensor};
use mmrl::encoder::{EncoderBundle, EncoderConfig};
use mmrl::expert::generate_demos;
use mmrl::features::FeatureCache;
use mmrl::finetune::*;
use mmrl::worldgrid::*;
use proptest::prelude::*;

fn as_grad(e: mmrl::Error) -> GradError {
    GradError::Invalid(e.to_string())
}

/// `(1−γ)·mean(r0) + ln((1/N)·Σ exp(r_t + 1 − γ·r_{t+1}))` written out directly.
fn vip_oracle(r0: &[f64], rt: &[f64], rn: &[f64], gamma: f64) -> f64 {
    let first = (1.0 - gamma) * r0.iter().sum::<f64>() / r0.len() as f64;
    let mean_exp = rt.iter().zip(rn).map(|(a, b)| (a + 1.0 - gamma * b).exp()).sum::<f64>() / rt.len() as f64;
    first + mean_exp.ln()
}

fn scratch_cfg(epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        batch: 32,
        lr: 1e-3,
        scratch: true,
        ..FinetuneConfig::default()
    }
}

fn features(seed: u64, n: usize, d: usize) -> Vec<Arc<Vec<f64>>> {
    (0..n)
        .map(|i| Arc::new((0..d).map(|j| ((seed as usize * 31 + i * 17 + j * 7) % 23) as f64 / 23.0 - 0.5).collect()))
        .collect()
}

#[test]
fn idm_head_reads_three_embeddings() {
    assert_eq!(IdmHead::new(32, 64, 0).in_dim(), 96);
    assert_eq!(default_beta(TaskId::Corridor), 1.5);
    assert_eq!(default_beta(TaskId::CorridorBlueGem), 1.5);
    assert_eq!(default_beta(TaskId::MazeII), 2.0);
    assert_eq!(FinetuneConfig::default().gamma, 0.98);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let tiny = EncoderConfig {
        width: 8,
        blocks: 1,
        heads: 2,
        mlp_hidden: 8,
        adapter_hidden: 6,
        joint_dim: 5,
        alpha: 0.5,
    };
    let d = tiny.feature_dim();
    let mut bundle = EncoderBundle::new(tiny, 1).unwrap();
    // Break the zero-initialized second adapter layer so every path carries gradient.
    for id in bundle.adapter_params() {
        for (i, x) in bundle.params.get_mut(id).data_mut().iter_mut().enumerate() {
            *x += 0.05 * (((i * 13) % 7) as f64 / 7.0 - 0.5);
        }
    }
    bundle.freeze_towers();
    let head = IdmHead::new(5, 8, 2);
    let batch = FtBatch {
        initial: features(1, 2, d),
        current: features(2, 3, d),
        next: features(3, 3, d),
        actions: vec![0, 3, 1],
        text: features(4, 1, d)[0].to_vec(),
    };
    let vip = grad_check_params(&bundle.params, |g, store| {
        let mut b = bundle.clone();
        b.params = store.clone();
        vip_loss(g, &b, &batch, 0.98).map_err(as_grad)
    }, 1e-5)
    .unwrap();
    assert!(vip < 1e-4, "vip {vip}");
    let idm = grad_check_params(&head.params, |g, store| {
        let mut h = head.clone();
        h.params = store.clone();
        idm_loss(g, &bundle, &h, &batch).map_err(as_grad)
    }, 1e-5)
    .unwrap();
    assert!(idm < 1e-4, "idm {idm}");
}

#[test]
fn finetuning_touches_only_the_adapters() {
    let demos = generate_demos(TaskId::Corridor, Split::Train, 20, 3).unwrap();
    let bundle = EncoderBundle::new(EncoderConfig::default(), 4).unwrap();
    let cache = FeatureCache::new(&bundle);
    let instruction = instruction_for(TaskId::Corridor, Split::Train);

    assert!(finetune(&bundle, &cache, &demos.records, &instruction, &FinetuneConfig::default()).is_err());

    let (tuned, report) = finetune(&bundle, &cache, &demos.records, &instruction, &scratch_cfg(3)).unwrap();
    assert_eq!(tuned.tower_fingerprint(), bundle.tower_fingerprint());
    assert_ne!(tuned.fingerprint(), bundle.fingerprint());
    assert_eq!(report.fingerprint, tuned.fingerprint());
    assert_eq!(report.fingerprint_before, bundle.fingerprint());
    assert!(tuned.meta.finetuned);
    assert_eq!((report.train_trajectories, report.val_trajectories), (18, 2));
    assert_eq!(report.epochs.len(), 3);
    let best = report.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.selected_val_loss, best);
    assert_eq!(report.epochs[report.selected_epoch - 1].val_loss, best);

    let again = finetune(&bundle, &cache, &demos.records, &instruction, &scratch_cfg(3)).unwrap().0;
    assert_eq!(again.fingerprint(), tuned.fingerprint());
}

#[test]
fn zero_beta_reduces_to_vip_alone() {
    let demos = generate_demos(TaskId::MazeI, Split::Train, 10, 5).unwrap();
    let bundle = EncoderBundle::new(EncoderConfig::default(), 6).unwrap();
    let cache = FeatureCache::new(&bundle);
    let instruction = instruction_for(TaskId::MazeI, Split::Train);
    let vip_only = FinetuneConfig {
        idm: false,
        ..scratch_cfg(2)
    };
    let zero_beta = FinetuneConfig {
        beta: 0.0,
        ..scratch_cfg(2)
    };
    let a = finetune(&bundle, &cache, &demos.records, &instruction, &vip_only).unwrap().0;
    let b = finetune(&bundle, &cache, &demos.records, &instruction, &zero_beta).unwrap().0;
    assert_eq!(a.fingerprint(), b.fingerprint());
}

#[test]
fn invalid_configs_are_rejected() {
    let demos = generate_demos(TaskId::Corridor, Split::Train, 4, 1).unwrap();
    let bundle = EncoderBundle::new(EncoderConfig::default(), 0).unwrap();
    let cache = FeatureCache::new(&bundle);
    let i = instruction_for(TaskId::Corridor, Split::Train);
    for cfg in [
        FinetuneConfig { gamma: 1.0, ..scratch_cfg(1) },
        FinetuneConfig { vip: false, idm: false, ..scratch_cfg(1) },
        FinetuneConfig { beta: -1.0, ..scratch_cfg(1) },
        FinetuneConfig { epochs: 0, ..scratch_cfg(1) },
    ] {
        assert!(finetune(&bundle, &cache, &demos.records, &i, &cfg).is_err(), "{cfg:?}");
    }
    assert!(finetune(&bundle, &cache, &[], &i, &scratch_cfg(1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn vip_objective_matches_oracle_and_gradients(
        (r0, rt, rn) in (1usize..6).prop_flat_map(|n| (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )),
        gamma in 0.5f64..0.99,
    ) {
        let n = rt.len();
        let mut g = Graph::new();
        let (a, b, c) = (
            g.constant(Tensor::vector(r0.clone())),
            g.constant(Tensor::vector(rt.clone())),
            g.constant(Tensor::vector(rn.clone())),
        );
        let v = vip_objective(&mut g, a, b, c, gamma).unwrap();
        prop_assert!((g.value(v).item() - vip_oracle(&r0, &rt, &rn, gamma)).abs() < 1e-10);

        let point = Tensor::new(vec![3, n], [r0, rt, rn].concat()).unwrap();
        let err = grad_check(|g, x| {
            let rows: Vec<_> = (0..3).map(|i| g.gather(x, &[i])).collect::<Result<_, _>>()?;
            vip_objective(g, rows[0], rows[1], rows[2], gamma).map_err(as_grad)
        }, &point, 1e-5).unwrap();
        prop_assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn vip_prefers_rewards_that_rise(
        rewards in prop::collection::vec(-0.5f64..0.5, 3..10),
    ) {
        // The same transitions scored in increasing rather than decreasing
        // order never give a higher loss.
        let mut up = rewards.clone();
        up.sort_by(f64::total_cmp);
        let down: Vec<f64> = up.iter().rev().copied().collect();
        let loss = |r: &[f64]| vip_oracle(&r[..1], &r[..r.len() - 1], &r[1..], 0.98);
        prop_assert!(loss(&up) <= loss(&down) + 1e-12);
    }
}
