//! Multimodal and goal-image rewards, return labeling, normalization and
//! target-return statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{cosine, EncoderBundle, Modality};
use crate::error::{invalid, Error, Result};
use crate::expert::{DemoDataset, Trajectory};
use crate::features::FeatureCache;
use crate::jsonl::{self, Meta, SCHEMA_VERSION};
use crate::worldgrid::{render, Cell, Instruction, Level, Observation, Split, TaskId};

/// `cos(f_vis(o), f_txt(x))`.
pub fn multimodal_reward(bundle: &EncoderBundle, obs: &Observation, instruction: &Instruction) -> Result<f64> {
    Ok(cosine(&bundle.encode_image(obs)?, &bundle.encode_text(instruction)?))
}

/// `cos(f_vis(o), f_vis(goal))`.
pub fn goal_image_reward(bundle: &EncoderBundle, obs: &Observation, goal: &Observation) -> Result<f64> {
    let z = bundle.encode_images(&[obs, goal])?;
    Ok(cosine(&z[0], &z[1]))
}

/// Unnormalized returns `R_t = r_t + γ·R_{t+1}`, `R_{T+1} = 0`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `max(1, ceil(max |R_0|))` over the given reward sequences.
pub fn default_norm_constant(reward_seqs: &[Vec<f64>], gamma: f64) -> Result<f64> {
    if reward_seqs.is_empty() {
        return Err(invalid("normalization needs at least one reward sequence"));
    }
    let max_r0 = reward_seqs
        .iter()
        .map(|r| discounted_returns(r, gamma).first().copied().unwrap_or(0.0).abs())
        .fold(0.0, f64::max);
    Ok(max_r0.ceil().max(1.0))
}

/// Which similarity produced the rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Observation against the text instruction.
    Text,
    /// Observation against a frame of the agent standing on the goal.
    GoalImage,
}

/// Frame with the agent on the goal object; the goal image for goal-conditioned variants.
pub fn goal_observation(level: &Level) -> Result<Observation> {
    let goal = level.goal_object().ok_or_else(|| Error::Unsolvable(level.label()))?;
    Ok(render(level, goal.cell))
}

/// Computes rewards from cached features. Construct once per (bundle,
/// instruction) and reuse across trajectories.
pub struct RewardModel<'a> {
    pub bundle: &'a EncoderBundle,
    pub cache: &'a FeatureCache,
    pub kind: RewardKind,
    pub instruction: Instruction,
    text: Vec<f64>,
}

impl<'a> RewardModel<'a> {
    pub fn new(
        bundle: &'a EncoderBundle,
        cache: &'a FeatureCache,
        kind: RewardKind,
        instruction: &Instruction,
    ) -> Result<Self> {
        cache.check(bundle)?;
        Ok(Self {
            bundle,
            cache,
            kind,
            instruction: instruction.clone(),
            text: bundle.encode_text(instruction)?,
        })
    }

    pub fn instruction_embedding(&self) -> &[f64] {
        &self.text
    }

    /// Joint vision embeddings for the agent at `cells`.
    pub fn embeddings(&self, level: &Level, cells: &[Cell], brightness: f64) -> Result<Vec<Vec<f64>>> {
        let feats: Vec<Vec<f64>> = self
            .cache
            .frames(self.bundle, level, cells, brightness)?
            .iter()
            .map(|f| f.to_vec())
            .collect();
        self.bundle.joint_from_features(Modality::Vision, &feats)
    }

    /// Rewards for the agent at each of `cells`.
    pub fn rewards(&self, level: &Level, cells: &[Cell]) -> Result<Vec<f64>> {
        let z = self.embeddings(level, cells, 1.0)?;
        let anchor = match self.kind {
            RewardKind::Text => self.text.clone(),
            RewardKind::GoalImage => {
                let goal = level.goal_object().ok_or_else(|| Error::Unsolvable(level.label()))?.cell;
                self.embeddings(level, &[goal], 1.0)?.remove(0)
            }
        };
        Ok(z.iter().map(|v| cosine(v, &anchor)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTrajectory {
    #[serde(flatten)]
    pub base: Trajectory,
    pub rewards: Vec<f64>,
    /// Normalized returns `R_t / C`.
    pub returns: Vec<f64>,
    pub norm_constant: f64,
    pub encoder_fingerprint: String,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledMeta {
    pub schema_version: u32,
    pub task: TaskId,
    pub split: Split,
    pub seed: u64,
    pub count: usize,
    pub gamma: f64,
    pub norm_constant: f64,
    pub encoder_fingerprint: String,
    pub reward_kind: RewardKind,
    pub instruction: Instruction,
}

impl Meta for LabeledMeta {
    fn schema_version(&self) -> u32 {
        self.schema_version
    }

    fn count(&self) -> usize {
        self.count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub meta: LabeledMeta,
    pub records: Vec<LabeledTrajectory>,
}

impl LabeledDataset {
    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write(path, &self.meta, &self.records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, records): (LabeledMeta, Vec<LabeledTrajectory>) = jsonl::read(path)?;
        let ds = Self { meta, records };
        ds.check_consistent()?;
        Ok(ds)
    }

    fn check_consistent(&self) -> Result<()> {
        for r in &self.records {
            if r.encoder_fingerprint != self.meta.encoder_fingerprint {
                return Err(Error::Fingerprint {
                    expected: self.meta.encoder_fingerprint.clone(),
                    found: r.encoder_fingerprint.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> ReturnStats {
        ReturnStats::new(self.records.iter().filter_map(|r| r.returns.first().copied()).collect())
    }
}

/// Sorted normalized initial returns with a nearest-rank quantile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReturnStats {
    pub sorted: Vec<f64>,
}

impl ReturnStats {
    pub fn new(mut values: Vec<f64>) -> Self {
        values.sort_by(f64::total_cmp);
        Self { sorted: values }
    }

    /// The `⌈q·n⌉`-th smallest value.
    pub fn quantile(&self, q: f64) -> Result<f64> {
        target_return(self, q)
    }
}

pub fn target_return(stats: &ReturnStats, q: f64) -> Result<f64> {
    if stats.sorted.is_empty() {
        return Err(invalid("target return needs at least one labeled trajectory"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid(format!("quantile {q} outside (0, 1]")));
    }
    let n = stats.sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    Ok(stats.sorted[rank - 1])
}

/// Builds a labeled record from raw rewards.
pub fn label_trajectory(
    base: Trajectory,
    rewards: Vec<f64>,
    gamma: f64,
    norm_constant: f64,
    encoder_fingerprint: &str,
) -> LabeledTrajectory {
    let returns = discounted_returns(&rewards, gamma).into_iter().map(|r| r / norm_constant).collect();
    LabeledTrajectory {
        base,
        rewards,
        returns,
        norm_constant,
        encoder_fingerprint: encoder_fingerprint.to_string(),
        gamma,
    }
}

/// Replays every demonstration, scores each frame and attaches normalized
/// returns. When `norm_constant` is `None` it is derived from this dataset.
pub fn label_returns(
    dataset: &DemoDataset,
    model: &RewardModel,
    gamma: f64,
    norm_constant: Option<f64>,
) -> Result<LabeledDataset> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("gamma {gamma} outside (0, 1]")));
    }
    if let Some(c) = norm_constant {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("normalization constant {c} must be positive")));
        }
    }
    let items: Vec<(&Level, Vec<Cell>)> = dataset
        .records
        .iter()
        .map(|t| Ok((&t.level, t.replay()?.cells[..t.len()].to_vec())))
        .collect::<Result<_>>()?;
    model.cache.prefetch(model.bundle, &items, 1.0)?;
    let rewards: Vec<Vec<f64>> = items
        .iter()
        .map(|(level, cells)| model.rewards(level, cells))
        .collect::<Result<_>>()?;
    let c = match norm_constant {
        Some(c) => c,
        None => default_norm_constant(&rewards, gamma)?,
    };
    let fp = model.bundle.fingerprint();
    let records = dataset
        .records
        .iter()
        .zip(rewards)
        .map(|(t, r)| label_trajectory(t.clone(), r, gamma, c, &fp))
        .collect();
    Ok(LabeledDataset {
        meta: LabeledMeta {
            schema_version: SCHEMA_VERSION,
            task: dataset.meta.task,
            split: dataset.meta.split,
            seed: dataset.meta.seed,
            count: dataset.records.len(),
            gamma,
            norm_constant: c,
            encoder_fingerprint: fp,
            reward_kind: model.kind,
            instruction: model.instruction.clone(),
        },
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_sums() {
        let r = discounted_returns(&[0.2, 0.3, 0.5], 1.0);
        assert!((r[0] - 1.0).abs() < 1e-12 && (r[1] - 0.8).abs() < 1e-12 && r[2] == 0.5);
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 0.5), vec![1.75, 1.5, 1.0]);
    }

    #[test]
    fn ceiling_rule() {
        let r = vec![vec![37.2 / 4.0; 4]];
        assert_eq!(default_norm_constant(&r, 1.0).unwrap(), 38.0);
        assert_eq!(default_norm_constant(&[vec![0.1]], 1.0).unwrap(), 1.0);
    }

    #[test]
    fn nearest_rank() {
        let s = ReturnStats::new((1..=10).map(f64::from).collect());
        assert_eq!(target_return(&s, 0.9).unwrap(), 9.0);
        assert_eq!(target_return(&s, 1.0).unwrap(), 10.0);
        let one = ReturnStats::new(vec![3.5]);
        assert_eq!(target_return(&one, 0.01).unwrap(), 3.5);
        assert!(target_return(&ReturnStats::new(vec![]), 0.5).is_err());
    }
}
