use std::sync::Arc;

use gradtape::{grad_check_params, GradError, Graph, Rng};
use mmrl::encoder::{EncoderBundle, EncoderConfig};
use mmrl::expert::generate_demos;
use mmrl::features::FeatureCache;
use mmrl::policy::*;
use mmrl::reward::{label_returns, RewardKind, RewardModel};
use mmrl::worldgrid::*;
use proptest::prelude::*;

fn meta() -> PolicyMeta {
    PolicyMeta {
        task: TaskId::Corridor,
        instruction: instruction_for(TaskId::Corridor, Split::Train),
        bundle_fingerprint: String::new(),
        tower_fingerprint: String::new(),
        reward_kind: Some(RewardKind::Text),
        norm_constant: Some(1.0),
        target_return: Some(1.0),
        quantile: 0.9,
        gamma: Some(1.0),
    }
}

fn tiny(kind: PolicyKind) -> PolicyConfig {
    PolicyConfig {
        kind,
        width: 8,
        blocks: 1,
        heads: 2,
        mlp_hidden: 8,
        obs_dim: 6,
        cond_dim: 3,
        ..PolicyConfig::default()
    }
}

fn window(cfg: &PolicyConfig, len: usize, seed: u64) -> Window {
    let mut rng = Rng::new(seed, 7);
    Window {
        features: (0..len)
            .map(|_| Arc::new((0..cfg.obs_dim).map(|_| rng.standard_normal()).collect()))
            .collect(),
        returns: (0..len).map(|_| rng.uniform()).collect(),
        actions: (0..len).map(|_| rng.below(4)).collect(),
        timesteps: (0..len).map(|t| t + 3).collect(),
        cond: Some(Arc::new((0..cfg.cond_dim).map(|_| rng.standard_normal()).collect())),
    }
}

fn logits(model: &PolicyModel, windows: &[&Window]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, windows).unwrap();
    let v = g.value(out.logits);
    (0..v.rows()).map(|r| v.row(r).to_vec()).collect()
}

fn kinds() -> impl Strategy<Value = PolicyKind> {
    prop::sample::select(vec![PolicyKind::ArpDt, PolicyKind::BcText, PolicyKind::BcGoal, PolicyKind::GcDt])
}

#[test]
fn loss_is_cross_entropy_plus_weighted_return_error() {
    let cfg = tiny(PolicyKind::ArpDt);
    let model = PolicyModel::new(cfg.clone(), meta()).unwrap();
    let (a, b) = (window(&cfg, 4, 1), window(&cfg, 2, 2));
    let windows = [&a, &b];
    let mut ce_sum = 0.0;
    let mut se_sum = 0.0;
    for w in windows {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &[w]).unwrap();
        let (lg, rp) = (g.value(out.logits).clone(), g.value(out.returns.unwrap()).clone());
        for s in 0..w.len() {
            let row = lg.row(s);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            ce_sum += lse - row[w.actions[s]];
            se_sum += (rp.data()[s] - w.returns[s]).powi(2);
        }
    }
    let steps = 6.0;
    for lambda in [0.0, 0.01, 0.5] {
        let mut g = Graph::new();
        let l = arp_loss(&mut g, &model, &windows, lambda).unwrap();
        let want = ce_sum / steps + lambda * se_sum / steps;
        assert!((g.value(l).item() - want).abs() < 1e-10, "λ={lambda}");
    }
    let bc = PolicyModel::new(tiny(PolicyKind::BcText), meta()).unwrap();
    let mut g = Graph::new();
    assert!(arp_loss(&mut g, &bc, &windows, 0.1).is_err());
}

#[test]
fn effective_lambda_follows_kind_and_switch() {
    assert_eq!(PolicyConfig::for_task(PolicyKind::ArpDt, TaskId::Corridor).effective_lambda(), 0.01);
    assert_eq!(PolicyConfig::for_task(PolicyKind::ArpDt, TaskId::MazeI).effective_lambda(), 0.001);
    assert_eq!(PolicyConfig::for_task(PolicyKind::BcText, TaskId::Corridor).effective_lambda(), 0.0);
    let off = PolicyConfig {
        return_prediction: false,
        ..PolicyConfig::default()
    };
    assert_eq!(off.effective_lambda(), 0.0);
    assert_eq!(PolicyConfig::default().context, 4);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for kind in [PolicyKind::ArpDt, PolicyKind::BcGoal] {
        let cfg = tiny(kind);
        let mut model = PolicyModel::new(cfg.clone(), meta()).unwrap();
        // Softmax ignores a shift shared by all keys, so key biases have an
        // exactly zero gradient and only finite-difference noise to compare.
        model.params.set_trainable_prefix("block0.key.bias", false);
        let (a, b) = (window(&cfg, 3, 4), window(&cfg, 3, 5));
        let lambda = if kind.uses_returns() { 0.3 } else { 0.0 };
        let err = grad_check_params(
            &model.params,
            |g, store| {
                let mut m = model.clone();
                m.params = store.clone();
                arp_loss(g, &m, &[&a, &b], lambda).map_err(|e| GradError::Invalid(e.to_string()))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let enc = EncoderConfig::default();
    let bundle = EncoderBundle::new(enc.clone(), 0).unwrap();
    let cache = FeatureCache::new(&bundle);
    let demos = generate_demos(TaskId::Corridor, Split::Train, 8, 2).unwrap();
    let instruction = instruction_for(TaskId::Corridor, Split::Train);
    let rm = RewardModel::new(&bundle, &cache, RewardKind::Text, &instruction).unwrap();
    let labeled = label_returns(&demos, &rm, 1.0, None).unwrap();
    let cfg = PolicyConfig {
        width: 16,
        blocks: 1,
        heads: 2,
        mlp_hidden: 16,
        epochs: 2,
        batch: 16,
        ..PolicyConfig::default()
    };
    let data = TrainingData::Labeled(&labeled);
    let (m1, r1) = train_policy(&cfg, &bundle, &cache, &data).unwrap();
    let (m2, _) = train_policy(&cfg, &bundle, &cache, &data).unwrap();
    assert_eq!(m1.fingerprint(), m2.fingerprint());
    assert_eq!(r1.epoch_loss.len(), 2);
    assert_eq!(r1.trajectories, 8);
    assert_eq!(r1.windows_per_epoch, demos.records.iter().map(|t| t.len()).sum::<usize>());
    let stats = labeled.stats();
    assert_eq!(m1.meta.target_return, Some(stats.quantile(0.9).unwrap()));
    assert_eq!(m1.meta.norm_constant, Some(labeled.meta.norm_constant));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.bin");
    m1.save(&path).unwrap();
    let back = PolicyModel::load(&path).unwrap();
    assert_eq!(back.fingerprint(), m1.fingerprint());
    assert_eq!(back.meta, m1.meta);

    let level = make_level(TaskId::Corridor, Split::Test, 3);
    let a = rollout(&m1, &bundle, &cache, &level, &RolloutOptions::default()).unwrap();
    let b = rollout(&back, &bundle, &cache, &level, &RolloutOptions::default()).unwrap();
    assert_eq!(a, b);
    // The remaining return drops by exactly the observed normalized reward.
    for pair in a.steps.windows(2) {
        assert!((pair[0].remaining_return - pair[0].reward - pair[1].remaining_return).abs() < 1e-12);
    }
    assert_eq!(a.steps[0].remaining_return, m1.meta.target_return.unwrap());

    let forced = vec![Action::Right; MAX_EPISODE_LEN];
    let opts = RolloutOptions {
        forced_actions: Some(&forced),
        record_hidden: true,
        target_return: Some(0.25),
        ..RolloutOptions::default()
    };
    let f = rollout(&m1, &bundle, &cache, &level, &opts).unwrap();
    assert_eq!(f.steps[0].remaining_return, 0.25);
    assert_eq!(f.hidden.len(), f.steps.len());
    assert!(f.steps.iter().all(|s| s.action == Action::Right));
    let goal = level.goal_object().unwrap().cell;
    assert_eq!(f.success, goal.row == 6);
    assert_eq!(f.steps.len(), if f.success { goal.col - 1 } else { MAX_EPISODE_LEN });

    let other = EncoderBundle::new(enc, 9).unwrap();
    let other_cache = FeatureCache::new(&other);
    assert!(rollout(&m1, &other, &other_cache, &level, &RolloutOptions::default()).is_err());
    assert!(train_policy(&cfg, &other, &other_cache, &data).is_err());
}

#[test]
fn baselines_train_from_plain_demonstrations() {
    let bundle = EncoderBundle::new(EncoderConfig::default(), 1).unwrap();
    let cache = FeatureCache::new(&bundle);
    let demos = generate_demos(TaskId::MazeII, Split::Train, 6, 2).unwrap();
    for kind in [PolicyKind::BcText, PolicyKind::BcGoal] {
        let cfg = PolicyConfig {
            kind,
            width: 16,
            blocks: 1,
            heads: 2,
            mlp_hidden: 16,
            epochs: 1,
            windows_per_trajectory: Some(3),
            ..PolicyConfig::default()
        };
        let data = TrainingData::Demos {
            task: TaskId::MazeII,
            trajectories: &demos.records,
            instruction: instruction_for(TaskId::MazeII, Split::Train),
        };
        let (m, r) = train_policy(&cfg, &bundle, &cache, &data).unwrap();
        assert_eq!(r.windows_per_epoch, 18);
        assert_eq!(m.meta.target_return, None);
        let level = make_level(TaskId::MazeII, Split::Test, 1);
        let run = rollout(&m, &bundle, &cache, &level, &RolloutOptions::default()).unwrap();
        assert!(run.steps.iter().all(|s| s.reward == 0.0));
        assert!(run.steps.len() <= MAX_EPISODE_LEN);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn later_steps_do_not_affect_earlier_logits(kind in kinds(), seed in any::<u64>(), cut in 0usize..4) {
        let cfg = tiny(kind);
        let model = PolicyModel::new(cfg.clone(), meta()).unwrap();
        let a = window(&cfg, 4, seed);
        let mut b = window(&cfg, 4, seed ^ 0xFFFF);
        for s in 0..cut {
            b.features[s] = Arc::clone(&a.features[s]);
            b.returns[s] = a.returns[s];
            b.actions[s] = a.actions[s];
        }
        // The action taken at the cut step is the prediction target there.
        b.features[cut] = Arc::clone(&a.features[cut]);
        b.returns[cut] = a.returns[cut];
        b.cond = a.cond.clone();
        let (la, lb) = (logits(&model, &[&a]), logits(&model, &[&b]));
        for s in 0..=cut {
            for (x, y) in la[s].iter().zip(&lb[s]) {
                prop_assert!((x - y).abs() < 1e-12, "step {} of {:?}", s, kind);
            }
        }
    }

    #[test]
    fn batch_order_does_not_matter(kind in kinds(), s1 in any::<u64>(), s2 in any::<u64>(), s3 in any::<u64>()) {
        let cfg = tiny(kind);
        let model = PolicyModel::new(cfg.clone(), meta()).unwrap();
        let ws = [window(&cfg, 3, s1), window(&cfg, 3, s2), window(&cfg, 3, s3)];
        let fwd = logits(&model, &[&ws[0], &ws[1], &ws[2]]);
        let rev = logits(&model, &[&ws[2], &ws[0], &ws[1]]);
        let alone = logits(&model, &[&ws[1]]);
        for s in 0..3 {
            for ((x, y), z) in fwd[3 + s].iter().zip(&rev[6 + s]).zip(&alone[s]) {
                prop_assert!((x - y).abs() < 1e-12 && (x - z).abs() < 1e-12);
            }
        }
    }
}
