//! Return-conditioned causal transformer policy, its text- and
//! goal-conditioned baselines, training and greedy rollout.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use gradtape::nn::{Block, LayerNorm, Linear};
use gradtape::{
    adamw_step, clip_grad_norm, lr_schedule, normal_init, Graph, OptimState, ParamId, ParamStore, Rng, Tensor, Var,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Header};
use crate::encoder::{argmax, stack, EncoderBundle};
use crate::error::{invalid, io_err, Error, Result};
use crate::expert::Trajectory;
use crate::features::FeatureCache;
use crate::reward::{goal_observation, target_return, LabeledDataset, RewardKind, RewardModel};
use crate::worldgrid::{step, Action, Cell, EnvState, Instruction, Level, TaskId, MAX_EPISODE_LEN};

/// Index of the action token standing in for an action not yet chosen.
pub const START_TOKEN: usize = Action::COUNT;
/// Brightness factors for augmentation; one is drawn per training window.
pub const BRIGHTNESS_FACTORS: [f64; 3] = [1.0, 0.85, 1.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Conditioned on the multimodal return.
    ArpDt,
    /// Conditioned on the instruction embedding.
    BcText,
    /// Conditioned on a goal-frame embedding.
    BcGoal,
    /// Conditioned on the return of goal-image rewards.
    GcDt,
}

impl PolicyKind {
    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::ArpDt => "arp_dt",
            PolicyKind::BcText => "bc_text",
            PolicyKind::BcGoal => "bc_goal",
            PolicyKind::GcDt => "gc_dt",
        }
    }

    pub fn uses_returns(self) -> bool {
        matches!(self, PolicyKind::ArpDt | PolicyKind::GcDt)
    }

    pub fn reward_kind(self) -> Option<RewardKind> {
        match self {
            PolicyKind::ArpDt => Some(RewardKind::Text),
            PolicyKind::GcDt => Some(RewardKind::GoalImage),
            _ => None,
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "arp_dt" => Ok(PolicyKind::ArpDt),
            "bc_text" => Ok(PolicyKind::BcText),
            "bc_goal" => Ok(PolicyKind::BcGoal),
            "gc_dt" => Ok(PolicyKind::GcDt),
            _ => Err(invalid(format!("unknown policy kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub context: usize,
    /// Multi-scale observation feature width.
    pub obs_dim: usize,
    /// Joint embedding width of the conditioning input.
    pub cond_dim: usize,
    pub lambda: f64,
    pub return_prediction: bool,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub augment: bool,
    /// Windows drawn per trajectory each epoch; `None` uses every window.
    pub windows_per_trajectory: Option<usize>,
    pub quantile: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::ArpDt,
            width: 64,
            blocks: 2,
            heads: 4,
            mlp_hidden: 128,
            context: 4,
            obs_dim: 96,
            cond_dim: 32,
            lambda: 0.01,
            return_prediction: true,
            epochs: 50,
            batch: 64,
            lr: 5e-4,
            weight_decay: 5e-5,
            augment: true,
            windows_per_trajectory: None,
            quantile: 0.9,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    /// Defaults with the return-loss weight for the task family.
    pub fn for_task(kind: PolicyKind, task: TaskId) -> Self {
        Self {
            kind,
            lambda: default_lambda(task),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(invalid(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.context == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(invalid("policy needs a positive context and a width divisible by the head count"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(invalid("policy training needs positive epochs and batch size"));
        }
        if !(self.quantile > 0.0 && self.quantile <= 1.0) {
            return Err(invalid(format!("quantile {} outside (0, 1]", self.quantile)));
        }
        Ok(())
    }

    /// Loss weight actually applied to the return head.
    pub fn effective_lambda(&self) -> f64 {
        if self.return_prediction && self.kind.uses_returns() {
            self.lambda
        } else {
            0.0
        }
    }
}

pub fn default_lambda(task: TaskId) -> f64 {
    if task.is_corridor() {
        0.01
    } else {
        0.001
    }
}

/// Training provenance stored in policy checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub task: TaskId,
    pub instruction: Instruction,
    /// Fingerprint of the bundle that produced rewards or conditioning.
    pub bundle_fingerprint: String,
    /// Fingerprint of the towers that produce observation features.
    pub tower_fingerprint: String,
    pub reward_kind: Option<RewardKind>,
    pub norm_constant: Option<f64>,
    pub target_return: Option<f64>,
    pub quantile: f64,
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug)]
struct Inputs {
    obs: Option<Linear>,
    ret: Option<Linear>,
    act: Option<ParamId>,
    cond: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub params: ParamStore,
    pub meta: PolicyMeta,
    inputs: Inputs,
    time: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    action_head: Linear,
    return_head: Option<Linear>,
}

/// One context window of consecutive steps from a single episode.
#[derive(Clone, Debug)]
pub struct Window {
    pub features: Vec<Arc<Vec<f64>>>,
    /// Normalized return-to-go at each step (unused by baselines).
    pub returns: Vec<f64>,
    /// Action token per step; [`START_TOKEN`] marks an action not yet taken.
    pub actions: Vec<usize>,
    pub timesteps: Vec<usize>,
    /// Conditioning embedding (baselines only).
    pub cond: Option<Arc<Vec<f64>>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Head outputs, one row per (window, step) in window-major order.
pub struct PolicyOutput {
    pub logits: Var,
    pub returns: Option<Var>,
    /// Final block output at the action-prediction position.
    pub hidden: Var,
}

impl PolicyModel {
    pub fn new(config: PolicyConfig, meta: PolicyMeta) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed, 0x9011C7);
        let mut store = ParamStore::new();
        let w = config.width;
        let inputs = if config.kind.uses_returns() {
            Inputs {
                obs: Some(Linear::new(&mut store, &mut rng, "embed.obs", config.obs_dim, w)),
                ret: Some(Linear::new(&mut store, &mut rng, "embed.return", 1, w)),
                act: Some(store.add("embed.action", normal_init(&mut rng, 0.02, &[Action::COUNT + 1, w]))),
                cond: None,
            }
        } else {
            Inputs {
                obs: None,
                ret: None,
                act: None,
                cond: Some(Linear::new(&mut store, &mut rng, "embed.step", config.obs_dim + config.cond_dim, w)),
            }
        };
        let time = store.add("embed.time", normal_init(&mut rng, 0.02, &[MAX_EPISODE_LEN + 1, w]));
        let blocks = (0..config.blocks)
            .map(|b| Block::new(&mut store, &mut rng, &format!("block{b}"), w, config.heads, config.mlp_hidden))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", w);
        let action_head = Linear::new(&mut store, &mut rng, "head.action", w, Action::COUNT);
        let return_head = config
            .kind
            .uses_returns()
            .then(|| Linear::new(&mut store, &mut rng, "head.return", w, 1));
        Ok(Self {
            config,
            params: store,
            meta,
            inputs,
            time,
            blocks,
            ln_f,
            action_head,
            return_head,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    /// Tokens per step in the transformer sequence.
    pub fn tokens_per_step(&self) -> usize {
        if self.config.kind.uses_returns() {
            3
        } else {
            1
        }
    }

    /// Runs a batch of equal-length windows through the transformer.
    pub fn forward(&self, g: &mut Graph, windows: &[&Window]) -> Result<PolicyOutput> {
        let b = windows.len();
        let l = windows.first().map_or(0, |w| w.len());
        if b == 0 || l == 0 {
            return Err(invalid("policy forward needs at least one non-empty window"));
        }
        if l > self.config.context {
            return Err(invalid(format!("window of {l} steps exceeds context length {}", self.config.context)));
        }
        for w in windows {
            if w.len() != l || w.actions.len() != l || w.timesteps.len() != l {
                return Err(invalid("windows in one batch must share a length"));
            }
            if w.timesteps.iter().any(|&t| t > MAX_EPISODE_LEN) || w.actions.iter().any(|&a| a > START_TOKEN) {
                return Err(invalid("timestep or action token out of range"));
            }
        }
        let n = b * l;
        let store = &self.params;
        let feats: Vec<Vec<f64>> = windows.iter().flat_map(|w| w.features.iter().map(|f| f.to_vec())).collect();
        let feats = g.constant(stack(&feats)?);
        let ts: Vec<usize> = windows.iter().flat_map(|w| w.timesteps.iter().copied()).collect();
        let time_table = g.param(store, self.time);
        let time = g.gather(time_table, &ts)?;
        let per = self.tokens_per_step();
        let (x, seq) = if self.config.kind.uses_returns() {
            let (Some(obs), Some(ret), Some(act)) = (&self.inputs.obs, &self.inputs.ret, self.inputs.act) else {
                unreachable!("return-conditioned inputs")
            };
            if windows.iter().any(|w| w.returns.len() != l) {
                return Err(invalid("return-conditioned windows need one return per step"));
            }
            let o = obs.forward(g, store, feats)?;
            let o = g.add(o, time)?;
            let rs: Vec<f64> = windows.iter().flat_map(|w| w.returns.iter().copied()).collect();
            let rs = g.constant(Tensor::new(vec![n, 1], rs)?);
            let r = ret.forward(g, store, rs)?;
            let r = g.add(r, time)?;
            let acts: Vec<usize> = windows.iter().flat_map(|w| w.actions.iter().copied()).collect();
            let table = g.param(store, act);
            let a = g.gather(table, &acts)?;
            let a = g.add(a, time)?;
            let stacked = g.concat_rows(&[o, r, a])?;
            // rows are (kind, window, step); reorder to (window, step, kind)
            let perm: Vec<usize> = (0..b)
                .flat_map(|wi| (0..l).flat_map(move |s| (0..3).map(move |k| k * n + wi * l + s)))
                .collect();
            (g.gather(stacked, &perm)?, 3 * l)
        } else {
            let Some(cond) = &self.inputs.cond else { unreachable!("baseline inputs") };
            let mut cs = Vec::with_capacity(n);
            for w in windows {
                let c = w.cond.as_ref().ok_or_else(|| invalid("baseline windows need a conditioning embedding"))?;
                cs.extend(std::iter::repeat_n(c.to_vec(), l));
            }
            let cs = g.constant(stack(&cs)?);
            let joined = g.concat_cols(&[feats, cs])?;
            let x = cond.forward(g, store, joined)?;
            (g.add(x, time)?, l)
        };
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, h, b, seq, true)?;
        }
        // the action head reads the return token of each step, or the only token
        let action_offset = usize::from(per == 3);
        let action_rows: Vec<usize> = (0..n).map(|i| i * per + action_offset).collect();
        let hidden = g.gather(h, &action_rows)?;
        let normed = self.ln_f.forward(g, store, h)?;
        let at_action = g.gather(normed, &action_rows)?;
        let logits = self.action_head.forward(g, store, at_action)?;
        let returns = match &self.return_head {
            Some(head) => {
                let obs_rows: Vec<usize> = (0..n).map(|i| i * per).collect();
                let at_obs = g.gather(normed, &obs_rows)?;
                Some(head.forward(g, store, at_obs)?)
            }
            None => None,
        };
        Ok(PolicyOutput { logits, returns, hidden })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            kind: format!("policy:{}", self.config.kind.name()),
            fingerprint: self.fingerprint(),
            layout: self.params.layout(),
            config: serde_json::to_value(&self.config).expect("plain struct"),
            meta: serde_json::to_value(&self.meta).expect("plain struct"),
        };
        checkpoint::save(path, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, flat) = checkpoint::load(path)?;
        if !header.kind.starts_with("policy:") {
            return Err(invalid(format!("{} holds a `{}` checkpoint, not a policy", path.display(), header.kind)));
        }
        let config: PolicyConfig = serde_json::from_value(header.config.clone()).map_err(|e| invalid(e.to_string()))?;
        let meta: PolicyMeta = serde_json::from_value(header.meta.clone()).map_err(|e| invalid(e.to_string()))?;
        let mut model = Self::new(config, meta)?;
        checkpoint::restore(&mut model.params, &header, &flat)?;
        let found = model.fingerprint();
        if found != header.fingerprint {
            return Err(Error::Fingerprint {
                expected: header.fingerprint,
                found,
            });
        }
        Ok(model)
    }
}

/// `CE(actions) + λ·MSE(returns)` summed over steps, plus the step count,
/// for one batch of equal-length windows. Targets are the windows' own
/// action tokens and returns.
fn window_loss_sum(g: &mut Graph, model: &PolicyModel, windows: &[&Window], lambda: f64) -> Result<(Var, usize)> {
    let out = model.forward(g, windows)?;
    let targets: Vec<usize> = windows.iter().flat_map(|w| w.actions.iter().copied()).collect();
    if targets.iter().any(|&a| a >= Action::COUNT) {
        return Err(invalid("training windows need a taken action at every step"));
    }
    let n = targets.len();
    let ce = g.cross_entropy(out.logits, &targets)?;
    let mut loss = ce;
    if lambda > 0.0 {
        let pred = out.returns.ok_or_else(|| invalid("return loss needs a return-conditioned policy"))?;
        let rs: Vec<f64> = windows.iter().flat_map(|w| w.returns.iter().copied()).collect();
        let target = g.constant(Tensor::new(vec![n, 1], rs)?);
        let mse = g.squared_error(pred, target)?;
        let weighted = g.scale(mse, lambda);
        loss = g.add(ce, weighted)?;
    }
    Ok((g.scale(loss, n as f64), n))
}

/// Mean over all steps of `CE + λ·squared return error`. Windows may differ
/// in length; equal lengths are batched together.
pub fn arp_loss(g: &mut Graph, model: &PolicyModel, windows: &[&Window], lambda: f64) -> Result<Var> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(invalid(format!("lambda {lambda} must be non-negative")));
    }
    if windows.is_empty() {
        return Err(invalid("policy loss needs at least one window"));
    }
    let mut groups: BTreeMap<usize, Vec<&Window>> = BTreeMap::new();
    for w in windows {
        groups.entry(w.len()).or_default().push(w);
    }
    let mut total: Option<Var> = None;
    let mut steps = 0;
    for ws in groups.values() {
        let (s, n) = window_loss_sum(g, model, ws, lambda)?;
        steps += n;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / steps as f64))
}

/// Data a policy trains on: labeled demonstrations for return-conditioned
/// kinds, plain demonstrations plus an instruction for baselines.
pub enum TrainingData<'a> {
    Labeled(&'a LabeledDataset),
    Demos {
        task: TaskId,
        trajectories: &'a [Trajectory],
        instruction: Instruction,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub kind: PolicyKind,
    pub trajectories: usize,
    pub windows_per_epoch: usize,
    pub steps: usize,
    pub epoch_loss: Vec<f64>,
    pub initial_loss: f64,
    pub fingerprint: String,
}

impl PolicyReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let json = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
    std::fs::write(path, json + "\n").map_err(io_err(path))
}

struct Episode {
    level: Arc<Level>,
    cells: Vec<Cell>,
    actions: Vec<usize>,
    returns: Vec<f64>,
    cond: Option<Arc<Vec<f64>>>,
}

/// Conditioning embedding for a baseline on `level`.
pub fn conditioning(kind: PolicyKind, bundle: &EncoderBundle, level: &Level, instruction: &Instruction) -> Result<Option<Vec<f64>>> {
    Ok(match kind {
        PolicyKind::BcText => Some(bundle.encode_text(instruction)?),
        PolicyKind::BcGoal => Some(bundle.encode_image(&goal_observation(level)?)?),
        PolicyKind::ArpDt | PolicyKind::GcDt => None,
    })
}

/// Trains a policy from scratch. Return-conditioned kinds require a labeled
/// dataset produced by `bundle`; baselines embed their conditioning with it.
pub fn train_policy(
    cfg: &PolicyConfig,
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    data: &TrainingData,
) -> Result<(PolicyModel, PolicyReport)> {
    cfg.validate()?;
    cache.check(bundle)?;
    if cfg.obs_dim != bundle.config.feature_dim() || cfg.cond_dim != bundle.config.joint_dim {
        return Err(invalid("policy input widths do not match the encoder bundle"));
    }
    let (task, trajectories, instruction, labels) = match data {
        TrainingData::Labeled(ds) => {
            if ds.meta.encoder_fingerprint != bundle.fingerprint() {
                return Err(Error::Fingerprint {
                    expected: bundle.fingerprint(),
                    found: ds.meta.encoder_fingerprint.clone(),
                });
            }
            if cfg.kind.uses_returns() && cfg.kind.reward_kind() != Some(ds.meta.reward_kind) {
                return Err(invalid(format!(
                    "{} needs {:?} rewards, dataset holds {:?}",
                    cfg.kind.name(),
                    cfg.kind.reward_kind(),
                    ds.meta.reward_kind
                )));
            }
            let trajs: Vec<&Trajectory> = ds.records.iter().map(|r| &r.base).collect();
            (ds.meta.task, trajs, ds.meta.instruction.clone(), Some(*ds))
        }
        TrainingData::Demos {
            task,
            trajectories,
            instruction,
        } => {
            if cfg.kind.uses_returns() {
                return Err(invalid(format!("{} needs a return-labeled dataset", cfg.kind.name())));
            }
            (*task, trajectories.iter().collect(), instruction.clone(), None)
        }
    };
    if trajectories.is_empty() || trajectories.iter().all(|t| t.is_empty()) {
        return Err(invalid("policy training needs at least one non-empty trajectory"));
    }
    let (target, norm_constant, gamma) = match labels {
        Some(ds) if cfg.kind.uses_returns() => (
            Some(target_return(&ds.stats(), cfg.quantile)?),
            Some(ds.meta.norm_constant),
            Some(ds.meta.gamma),
        ),
        _ => (None, None, None),
    };
    let meta = PolicyMeta {
        task,
        instruction: instruction.clone(),
        bundle_fingerprint: bundle.fingerprint(),
        tower_fingerprint: bundle.tower_fingerprint(),
        reward_kind: cfg.kind.reward_kind(),
        norm_constant,
        target_return: target,
        quantile: cfg.quantile,
        gamma,
    };
    let mut model = PolicyModel::new(cfg.clone(), meta)?;

    let mut episodes = Vec::with_capacity(trajectories.len());
    for (i, t) in trajectories.iter().enumerate() {
        if t.is_empty() {
            continue;
        }
        let cells = t.replay()?.cells[..t.len()].to_vec();
        let cond = conditioning(cfg.kind, bundle, &t.level, &instruction)?.map(Arc::new);
        episodes.push(Episode {
            level: Arc::new(t.level.clone()),
            cells,
            actions: t.actions.iter().map(|a| a.index()).collect(),
            returns: labels.map_or_else(|| vec![0.0; t.len()], |ds| ds.records[i].returns.clone()),
            cond,
        });
    }
    let factors: &[f64] = if cfg.augment && task.is_corridor() {
        &BRIGHTNESS_FACTORS
    } else {
        &BRIGHTNESS_FACTORS[..1]
    };
    for &f in factors {
        let items: Vec<(&Level, Vec<Cell>)> = episodes.iter().map(|e| (&*e.level, e.cells.clone())).collect();
        cache.prefetch(bundle, &items, f)?;
    }
    let frames = |e: &Episode, lo: usize, hi: usize, f: f64| cache.frames(bundle, &e.level, &e.cells[lo..hi], f);
    let make_window = |e: &Episode, end: usize, f: f64| -> Result<Window> {
        let lo = end.saturating_sub(cfg.context);
        Ok(Window {
            features: frames(e, lo, end, f)?,
            returns: e.returns[lo..end].to_vec(),
            actions: e.actions[lo..end].to_vec(),
            timesteps: (lo..end).collect(),
            cond: e.cond.clone(),
        })
    };

    let lambda = cfg.effective_lambda();
    let mut rng = Rng::new(cfg.seed, 0x7A41);
    let all_ends: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(i, e)| (1..=e.actions.len()).map(move |end| (i, end)))
        .collect();
    let per_epoch = match cfg.windows_per_trajectory {
        Some(k) => k * episodes.len(),
        None => all_ends.len(),
    };
    let total = cfg.epochs * per_epoch.div_ceil(cfg.batch);
    let warmup = (total / 20).min(total.saturating_sub(1));
    let mut opt = OptimState::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut initial_loss = f64::NAN;
    let mut step_no = 0;
    for epoch in 0..cfg.epochs {
        let mut picks: Vec<(usize, usize)> = match cfg.windows_per_trajectory {
            Some(k) => (0..episodes.len())
                .flat_map(|i| std::iter::repeat_n(i, k))
                .map(|i| (i, 1 + rng.below(episodes[i].actions.len())))
                .collect(),
            None => all_ends.clone(),
        };
        rng.shuffle(&mut picks);
        let mut sum = 0.0;
        let mut count = 0;
        for (bi, chunk) in picks.chunks(cfg.batch).enumerate() {
            let windows: Vec<Window> = chunk
                .iter()
                .map(|&(i, end)| make_window(&episodes[i], end, factors[rng.below(factors.len())]))
                .collect::<Result<_>>()?;
            let refs: Vec<&Window> = windows.iter().collect();
            let mut g = Graph::new();
            let loss = arp_loss(&mut g, &model, &refs, lambda)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            if initial_loss.is_nan() {
                initial_loss = lv;
            }
            let mut grads = g.backward(loss)?.for_store(&model.params);
            clip_grad_norm(&mut grads, 1.0);
            opt.lr = lr_schedule(step_no, total, cfg.lr, warmup);
            adamw_step(&mut model.params, &grads, &mut opt)?;
            step_no += 1;
            sum += lv;
            count += 1;
        }
        epoch_loss.push(sum / count as f64);
    }
    let report = PolicyReport {
        kind: cfg.kind,
        trajectories: episodes.len(),
        windows_per_epoch: per_epoch,
        steps: step_no,
        epoch_loss,
        initial_loss,
        fingerprint: model.fingerprint(),
    };
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutStep {
    pub cell: Cell,
    /// Normalized reward `r_t / C` (zero for baselines).
    pub reward: f64,
    /// Remaining target return `R_t` fed to the policy (zero for baselines).
    pub remaining_return: f64,
    pub action: Action,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub level_seed: u64,
    pub steps: Vec<RolloutStep>,
    pub success: bool,
    /// Hidden state at the action position per step, when requested.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub hidden: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct RolloutOptions<'a> {
    /// Overrides the instruction used for rewards or conditioning.
    pub instruction: Option<&'a Instruction>,
    /// Overrides the initial target return.
    pub target_return: Option<f64>,
    /// Executes these actions instead of the policy's choices.
    pub forced_actions: Option<&'a [Action]>,
    pub record_hidden: bool,
}

/// Greedy episode on `level`. Return-conditioned policies decrement the
/// target return by each observed normalized reward.
pub fn rollout(
    model: &PolicyModel,
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    level: &Level,
    opts: &RolloutOptions,
) -> Result<RolloutRecord> {
    cache.check(bundle)?;
    if bundle.tower_fingerprint() != model.meta.tower_fingerprint {
        return Err(Error::Fingerprint {
            expected: model.meta.tower_fingerprint.clone(),
            found: bundle.tower_fingerprint(),
        });
    }
    let kind = model.config.kind;
    let instruction = opts.instruction.unwrap_or(&model.meta.instruction);
    let reward_model = match model.meta.reward_kind {
        Some(rk) if kind.uses_returns() => Some(RewardModel::new(bundle, cache, rk, instruction)?),
        _ => None,
    };
    let (c, mut remaining) = if kind.uses_returns() {
        let c = model
            .meta
            .norm_constant
            .ok_or_else(|| invalid("return-conditioned rollout needs the training normalization constant"))?;
        let target = opts
            .target_return
            .or(model.meta.target_return)
            .ok_or_else(|| invalid("return-conditioned rollout needs a target return"))?;
        (c, target)
    } else {
        (1.0, 0.0)
    };
    let cond = conditioning(kind, bundle, level, instruction)?.map(Arc::new);
    let level_arc = Arc::new(level.clone());
    let mut state = EnvState::new(Arc::clone(&level_arc));
    let mut context: Vec<(Arc<Vec<f64>>, f64, usize, usize)> = Vec::new();
    let mut steps = Vec::new();
    let mut hidden = Vec::new();
    while !state.done {
        let t = state.t;
        let cell = state.agent;
        let feature = cache.frames(bundle, level, &[cell], 1.0)?.remove(0);
        let reward = match &reward_model {
            Some(rm) => rm.rewards(level, &[cell])?[0] / c,
            None => 0.0,
        };
        context.push((feature, remaining, START_TOKEN, t));
        if context.len() > model.config.context {
            context.remove(0);
        }
        let window = Window {
            features: context.iter().map(|s| Arc::clone(&s.0)).collect(),
            returns: context.iter().map(|s| s.1).collect(),
            actions: context.iter().map(|s| s.2).collect(),
            timesteps: context.iter().map(|s| s.3).collect(),
            cond: cond.clone(),
        };
        let mut g = Graph::new();
        let out = model.forward(&mut g, &[&window])?;
        let logits = g.value(out.logits).row(window.len() - 1).to_vec();
        if opts.record_hidden {
            hidden.push(g.value(out.hidden).row(window.len() - 1).to_vec());
        }
        let action = match opts.forced_actions {
            Some(forced) => *forced
                .get(steps.len())
                .ok_or_else(|| invalid("forced action list ended before the episode"))?,
            None => Action::from_index(argmax(logits.iter().copied())).expect("four logits"),
        };
        context.last_mut().expect("just pushed").2 = action.index();
        steps.push(RolloutStep {
            cell,
            reward,
            remaining_return: remaining,
            action,
            logits,
        });
        state = step(&state, action)?;
        remaining -= reward;
    }
    Ok(RolloutRecord {
        level_seed: level.level_seed,
        steps,
        success: state.succeeded,
        hidden,
    })
}
