//! Adapter fine-tuning with a temporal-smoothness (VIP) objective and an
//! inverse-dynamics (IDM) objective, `L = L_VIP + β·L_IDM`.

use std::path::Path;
use std::sync::Arc;

use gradtape::nn::Mlp;
use gradtape::{adamw_step, clip_grad_norm, lr_schedule, Graph, OptimState, ParamStore, Rng, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{stack, EncoderBundle, Modality};
use crate::error::{invalid, io_err, Error, Result};
use crate::expert::{split_indices, Trajectory};
use crate::features::FeatureCache;
use crate::worldgrid::{Action, Cell, Instruction, Level, TaskId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub beta: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub vip: bool,
    pub idm: bool,
    pub idm_hidden: usize,
    /// Allow fine-tuning a bundle whose towers were never pre-trained.
    pub scratch: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            beta: 1.5,
            gamma: 0.98,
            epochs: 20,
            batch: 64,
            lr: 1e-4,
            weight_decay: 1e-3,
            vip: true,
            idm: true,
            idm_hidden: 64,
            scratch: false,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    /// Defaults with the IDM weight for the task family.
    pub fn for_task(task: TaskId) -> Self {
        Self {
            beta: default_beta(task),
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid(format!("fine-tuning gamma {} outside (0, 1)", self.gamma)));
        }
        if !(self.vip || self.idm) {
            return Err(invalid("fine-tuning needs at least one of the VIP and IDM objectives"));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(invalid(format!("beta {} must be non-negative", self.beta)));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(invalid("fine-tuning needs positive epochs and batch size"));
        }
        Ok(())
    }
}

pub fn default_beta(task: TaskId) -> f64 {
    if task.is_corridor() {
        1.5
    } else {
        2.0
    }
}

/// Two-layer action classifier over `(z(o_t), z(o_{t+1}), z(x))`.
#[derive(Clone, Debug)]
pub struct IdmHead {
    pub params: ParamStore,
    mlp: Mlp,
}

impl IdmHead {
    pub fn new(joint_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed, 0x1D3);
        let mlp = Mlp::new(&mut params, &mut rng, "idm", 3 * joint_dim, hidden, Action::ALL.len());
        Self { params, mlp }
    }

    pub fn in_dim(&self) -> usize {
        self.mlp.fc1.in_dim
    }

    /// Logits `[N, 4]` from the three embedding blocks, each `[N, d_e]`.
    pub fn forward(&self, g: &mut Graph, z_t: Var, z_next: Var, z_text: Var) -> Result<Var> {
        let x = g.concat_cols(&[z_t, z_next, z_text])?;
        Ok(self.mlp.forward(g, &self.params, x)?)
    }
}

/// Frozen multi-scale features for one optimization batch.
#[derive(Clone, Debug)]
pub struct FtBatch {
    /// First frames `o_1` of the trajectories the transitions come from.
    pub initial: Vec<Arc<Vec<f64>>>,
    pub current: Vec<Arc<Vec<f64>>>,
    pub next: Vec<Arc<Vec<f64>>>,
    pub actions: Vec<usize>,
    /// Text-tower multi-scale features of the instruction.
    pub text: Vec<f64>,
}

/// Joint embeddings and rewards of a batch on a graph.
pub struct Embedded {
    pub r_init: Var,
    pub r_t: Var,
    pub r_next: Var,
    pub z_t: Var,
    pub z_next: Var,
    pub z_text: Var,
}

fn rows_of(g: &mut Graph, x: Var, start: usize, n: usize) -> Result<Var> {
    let idx: Vec<usize> = (start..start + n).collect();
    Ok(g.gather(x, &idx)?)
}

/// Runs the vision and text adapters over a batch and scores every frame.
pub fn embed_batch(g: &mut Graph, bundle: &EncoderBundle, batch: &FtBatch) -> Result<Embedded> {
    let (n0, n) = (batch.initial.len(), batch.current.len());
    if n0 == 0 || n == 0 || batch.next.len() != n || batch.actions.len() != n {
        return Err(invalid("fine-tuning batch needs initial frames and matching transitions"));
    }
    let all: Vec<Vec<f64>> = batch
        .initial
        .iter()
        .chain(&batch.current)
        .chain(&batch.next)
        .map(|f| f.to_vec())
        .collect();
    let fv = g.constant(stack(&all)?);
    let zv = bundle.joint(g, Modality::Vision, fv)?;
    let ft = g.constant(Tensor::new(vec![1, batch.text.len()], batch.text.clone())?);
    let zx = bundle.joint(g, Modality::Text, ft)?;
    let z_init = rows_of(g, zv, 0, n0)?;
    let z_t = rows_of(g, zv, n0, n)?;
    let z_next = rows_of(g, zv, n0 + n, n)?;
    let x_init = g.gather(zx, &vec![0; n0])?;
    let z_text = g.gather(zx, &vec![0; n])?;
    Ok(Embedded {
        r_init: g.cosine(z_init, x_init)?,
        r_t: g.cosine(z_t, z_text)?,
        r_next: g.cosine(z_next, z_text)?,
        z_t,
        z_next,
        z_text,
    })
}

/// `(1−γ)·mean r(o_1) + log mean exp(r_t + 1 − γ·r_{t+1})` over reward vectors.
pub fn vip_objective(g: &mut Graph, r_init: Var, r_t: Var, r_next: Var, gamma: f64) -> Result<Var> {
    let n = g.value(r_t).len();
    if g.value(r_init).is_empty() || n == 0 {
        return Err(invalid("VIP loss needs initial frames and transitions"));
    }
    let first = g.mean(r_init);
    let first = g.scale(first, 1.0 - gamma);
    let discounted = g.scale(r_next, gamma);
    let diff = g.sub(r_t, discounted)?;
    let exponent = g.add_scalar(diff, 1.0);
    let lse = g.log_sum_exp(exponent);
    let lse = g.sum(lse);
    let lme = g.add_scalar(lse, -(n as f64).ln());
    Ok(g.add(first, lme)?)
}

pub fn vip_loss(g: &mut Graph, bundle: &EncoderBundle, batch: &FtBatch, gamma: f64) -> Result<Var> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("fine-tuning gamma {gamma} outside (0, 1)")));
    }
    let e = embed_batch(g, bundle, batch)?;
    vip_objective(g, e.r_init, e.r_t, e.r_next, gamma)
}

pub fn idm_loss(g: &mut Graph, bundle: &EncoderBundle, head: &IdmHead, batch: &FtBatch) -> Result<Var> {
    let e = embed_batch(g, bundle, batch)?;
    idm_objective(g, head, &e, &batch.actions)
}

/// Mean cross-entropy of the head's logits against the expert actions.
pub fn idm_objective(g: &mut Graph, head: &IdmHead, e: &Embedded, actions: &[usize]) -> Result<Var> {
    if actions.is_empty() {
        return Err(invalid("IDM loss needs at least one transition"));
    }
    let logits = head.forward(g, e.z_t, e.z_next, e.z_text)?;
    Ok(g.cross_entropy(logits, actions)?)
}

struct LossParts {
    total: Var,
    vip: Option<f64>,
    idm: Option<f64>,
}

fn combined_loss(
    g: &mut Graph,
    bundle: &EncoderBundle,
    head: &IdmHead,
    batch: &FtBatch,
    cfg: &FinetuneConfig,
) -> Result<LossParts> {
    let e = embed_batch(g, bundle, batch)?;
    let vip = if cfg.vip {
        Some(vip_objective(g, e.r_init, e.r_t, e.r_next, cfg.gamma)?)
    } else {
        None
    };
    let idm = if cfg.idm {
        Some(idm_objective(g, head, &e, &batch.actions)?)
    } else {
        None
    };
    let total = match (vip, idm) {
        (Some(v), Some(i)) => {
            let weighted = g.scale(i, cfg.beta);
            g.add(v, weighted)?
        }
        (Some(v), None) => v,
        (None, Some(i)) => g.scale(i, cfg.beta),
        (None, None) => unreachable!("validated"),
    };
    Ok(LossParts {
        total,
        vip: vip.map(|v| g.value(v).item()),
        idm: idm.map(|v| g.value(v).item()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_vip: Option<f64>,
    pub val_idm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub config: FinetuneConfig,
    pub instruction: String,
    pub train_trajectories: usize,
    pub val_trajectories: usize,
    pub train_transitions: usize,
    pub val_transitions: usize,
    pub epochs: Vec<FtEpoch>,
    /// 1-based epoch whose snapshot was kept.
    pub selected_epoch: usize,
    pub selected_val_loss: f64,
    pub fingerprint_before: String,
    pub fingerprint: String,
}

impl FinetuneReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let json = serde_json::to_string_pretty(self).map_err(|e| invalid(e.to_string()))?;
        std::fs::write(path, json + "\n").map_err(io_err(path))
    }
}

/// Per-trajectory frame features `o_0 … o_{T+1}` and expert actions.
struct Episode {
    frames: Vec<Arc<Vec<f64>>>,
    actions: Vec<usize>,
}

fn episodes(bundle: &EncoderBundle, cache: &FeatureCache, trajs: &[&Trajectory]) -> Result<Vec<Episode>> {
    let cells: Vec<(&Level, Vec<Cell>)> = trajs
        .iter()
        .map(|t| Ok((&t.level, t.replay()?.cells)))
        .collect::<Result<_>>()?;
    cache.prefetch(bundle, &cells, 1.0)?;
    cells
        .iter()
        .zip(trajs)
        .map(|((level, cells), t)| {
            Ok(Episode {
                frames: cache.frames(bundle, level, cells, 1.0)?,
                actions: t.actions.iter().map(|a| a.index()).collect(),
            })
        })
        .collect()
}

fn assemble(eps: &[Episode], transitions: &[(usize, usize)], text: &[f64]) -> FtBatch {
    FtBatch {
        initial: transitions.iter().map(|&(e, _)| Arc::clone(&eps[e].frames[0])).collect(),
        current: transitions.iter().map(|&(e, t)| Arc::clone(&eps[e].frames[t])).collect(),
        next: transitions.iter().map(|&(e, t)| Arc::clone(&eps[e].frames[t + 1])).collect(),
        actions: transitions.iter().map(|&(e, t)| eps[e].actions[t]).collect(),
        text: text.to_vec(),
    }
}

fn all_transitions(eps: &[Episode]) -> Vec<(usize, usize)> {
    eps.iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.actions.len()).map(move |t| (e, t)))
        .collect()
}

/// Fine-tunes the adapters on expert transitions. The first 90% of the
/// trajectories train, the rest validate; the returned bundle holds the
/// adapter snapshot with the lowest validation loss over all epochs. Tower
/// parameters are never modified and the IDM head is discarded.
pub fn finetune(
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    trajectories: &[Trajectory],
    instruction: &Instruction,
    cfg: &FinetuneConfig,
) -> Result<(EncoderBundle, FinetuneReport)> {
    cfg.validate()?;
    if trajectories.is_empty() || trajectories.iter().all(Trajectory::is_empty) {
        return Err(invalid("fine-tuning needs at least one non-empty demonstration"));
    }
    if !bundle.meta.pretrained && !cfg.scratch {
        return Err(invalid("bundle is not pre-trained; set `scratch` to fine-tune random towers"));
    }
    cache.check(bundle)?;
    let mut work = bundle.clone();
    work.freeze_towers();
    let towers_before = work.tower_fingerprint();
    let mut head = IdmHead::new(work.config.joint_dim, cfg.idm_hidden, cfg.seed);

    let text = {
        let mut g = Graph::new();
        let f = work.text_features(&mut g, &[&instruction.token_ids])?;
        g.value(f).data().to_vec()
    };
    let (train_idx, val_idx) = split_indices(trajectories.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| &trajectories[i]).collect::<Vec<_>>();
    let train_eps = episodes(&work, cache, &pick(&train_idx))?;
    let val_eps = episodes(&work, cache, &pick(&val_idx))?;
    let mut train_tr = all_transitions(&train_eps);
    let val_tr = all_transitions(&val_eps);
    if train_tr.is_empty() || val_tr.is_empty() {
        return Err(invalid("fine-tuning split left no transitions to train or validate on"));
    }
    let val_batch = assemble(&val_eps, &val_tr, &text);

    let mut opt_enc = OptimState::new(&work.params, cfg.lr, cfg.weight_decay);
    let mut opt_head = OptimState::new(&head.params, cfg.lr, cfg.weight_decay);
    let mut rng = Rng::new(cfg.seed, 0xF17E);
    let total = cfg.epochs * train_tr.len().div_ceil(cfg.batch);
    let warmup = (total / 20).min(total.saturating_sub(1));
    let n_enc = work.params.len();
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut train_tr);
        let mut sum = 0.0;
        let mut count = 0;
        for (bi, chunk) in train_tr.chunks(cfg.batch).enumerate() {
            let batch = assemble(&train_eps, chunk, &text);
            let mut g = Graph::new();
            let parts = combined_loss(&mut g, &work, &head, &batch, cfg)?;
            let lv = g.value(parts.total).item();
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = g.backward(parts.total)?;
            let mut all = grads.for_store(&work.params);
            all.extend(grads.for_store(&head.params));
            clip_grad_norm(&mut all, 1.0);
            let head_grads = all.split_off(n_enc);
            let lr = lr_schedule(step, total, cfg.lr, warmup);
            opt_enc.lr = lr;
            opt_head.lr = lr;
            adamw_step(&mut work.params, &all, &mut opt_enc)?;
            adamw_step(&mut head.params, &head_grads, &mut opt_head)?;
            step += 1;
            sum += lv;
            count += 1;
        }
        let mut g = Graph::new();
        let val = combined_loss(&mut g, &work, &head, &val_batch, cfg)?;
        let val_loss = g.value(val.total).item();
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        epochs.push(FtEpoch {
            epoch: epoch + 1,
            train_loss: sum / count as f64,
            val_loss,
            val_vip: val.vip,
            val_idm: val.idm,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch + 1, work.params.clone()));
        }
    }
    let (selected_val_loss, selected_epoch, params) = best.expect("at least one epoch");
    work.params = params;
    work.params.set_all_trainable(true);
    debug_assert_eq!(work.tower_fingerprint(), towers_before);
    work.meta.finetuned = true;
    let report = FinetuneReport {
        config: cfg.clone(),
        instruction: instruction.text.clone(),
        train_trajectories: train_idx.len(),
        val_trajectories: val_idx.len(),
        train_transitions: train_tr.len(),
        val_transitions: val_tr.len(),
        epochs,
        selected_epoch,
        selected_val_loss,
        fingerprint_before: bundle.fingerprint(),
        fingerprint: work.fingerprint(),
    };
    Ok((work, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn vip_scalar_example() {
        let mut g = Graph::new();
        let (a, b, c) = (vec_var(&mut g, &[0.5]), vec_var(&mut g, &[0.5]), vec_var(&mut g, &[0.6]));
        let l = vip_objective(&mut g, a, b, c, 0.98).unwrap();
        assert!((g.value(l).item() - 0.922).abs() < 1e-12);
    }

    #[test]
    fn vip_gamma_one_limit() {
        let mut g = Graph::new();
        let (a, b, c) = (vec_var(&mut g, &[0.3]), vec_var(&mut g, &[0.7]), vec_var(&mut g, &[0.7]));
        let l = vip_objective(&mut g, a, b, c, 1.0).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn idm_head_shape() {
        let head = IdmHead::new(32, 64, 0);
        assert_eq!(head.in_dim(), 96);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 32]));
        let logits = head.forward(&mut g, z, z, z).unwrap();
        assert_eq!(g.value(logits).shape(), &[3, 4]);
    }

    #[test]
    fn beta_defaults_by_family() {
        assert_eq!(default_beta(TaskId::Corridor), 1.5);
        assert_eq!(default_beta(TaskId::CorridorBlueGem), 1.5);
        assert_eq!(default_beta(TaskId::MazeII), 2.0);
    }
}
