//! Success-rate evaluation, cycle consistency of hidden states, rank
//! correlation and reward-curve export.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderBundle;
use crate::error::{invalid, io_err, Error, Result};
use crate::expert::{level_seeds, solve, Trajectory};
use crate::features::FeatureCache;
use crate::policy::{rollout, write_json, PolicyModel, RolloutOptions, RolloutRecord};
use crate::reward::{discounted_returns, default_norm_constant, RewardKind, RewardModel};
use crate::worldgrid::{make_level, step, Cell, EnvState, Instruction, Level, Split, TaskId};

/// Anything that can play one episode on a level.
pub trait Agent: Sync {
    fn play(&self, level: &Level) -> Result<EpisodeSummary>;
}

/// Outcome summary of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub success: bool,
    pub length: usize,
}

/// The scripted shortest-path expert.
pub struct ExpertAgent;

impl Agent for ExpertAgent {
    fn play(&self, level: &Level) -> Result<EpisodeSummary> {
        let actions = solve(level)?;
        let mut state = EnvState::new(std::sync::Arc::new(level.clone()));
        for &a in &actions {
            state = step(&state, a)?;
        }
        Ok(EpisodeSummary {
            success: state.succeeded,
            length: actions.len(),
        })
    }
}

/// A trained policy with the bundle and cache it reads from.
pub struct PolicyAgent<'a> {
    pub model: &'a PolicyModel,
    pub bundle: &'a EncoderBundle,
    pub cache: &'a FeatureCache,
    pub instruction: Option<&'a Instruction>,
}

impl PolicyAgent<'_> {
    pub fn rollout(&self, level: &Level) -> Result<RolloutRecord> {
        let opts = RolloutOptions {
            instruction: self.instruction,
            ..RolloutOptions::default()
        };
        rollout(self.model, self.bundle, self.cache, level, &opts)
    }
}

impl Agent for PolicyAgent<'_> {
    fn play(&self, level: &Level) -> Result<EpisodeSummary> {
        let r = self.rollout(level)?;
        Ok(EpisodeSummary {
            success: r.success,
            length: r.steps.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub index: usize,
    pub level_seed: u64,
    pub success: bool,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskId,
    pub split: Split,
    pub episodes: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub expert_success_rate: f64,
    pub expert_normalized_score: f64,
    pub instruction: String,
    pub policy_fingerprint: String,
    pub bundle_fingerprint: String,
    pub outcomes: Vec<EpisodeOutcome>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_hash: Option<String>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }
}

/// Runs `f` on a pool of `threads` workers (0 lets the pool decide).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(e.to_string()))?;
    Ok(pool.install(f))
}

/// Plays `n` episodes on distinct levels derived from `seed`, in parallel,
/// returning outcomes in episode order.
pub fn evaluate_agent(
    agent: &dyn Agent,
    task: TaskId,
    split: Split,
    n: usize,
    seed: u64,
    threads: usize,
) -> Result<Vec<EpisodeOutcome>> {
    if n == 0 {
        return Err(invalid("evaluation needs at least one episode"));
    }
    let seeds = level_seeds(seed, split, n);
    with_threads(threads, || {
        seeds
            .par_iter()
            .enumerate()
            .map(|(index, &s)| {
                let level = make_level(task, split, s);
                let r = agent.play(&level)?;
                Ok(EpisodeOutcome {
                    index,
                    level_seed: s,
                    success: r.success,
                    length: r.length,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?
}

fn rate(outcomes: &[EpisodeOutcome]) -> f64 {
    outcomes.iter().filter(|o| o.success).count() as f64 / outcomes.len() as f64
}

/// Success rate of a trained policy, alongside the scripted expert on the
/// same levels. The bundle must be the one the policy was trained against.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &PolicyModel,
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    task: TaskId,
    split: Split,
    n: usize,
    seed: u64,
    threads: usize,
    instruction: Option<&Instruction>,
) -> Result<EvalReport> {
    if bundle.fingerprint() != model.meta.bundle_fingerprint {
        return Err(Error::Fingerprint {
            expected: model.meta.bundle_fingerprint.clone(),
            found: bundle.fingerprint(),
        });
    }
    let instruction = instruction.cloned().unwrap_or_else(|| model.meta.instruction.clone());
    let agent = PolicyAgent {
        model,
        bundle,
        cache,
        instruction: Some(&instruction),
    };
    let outcomes = evaluate_agent(&agent, task, split, n, seed, threads)?;
    let expert = evaluate_agent(&ExpertAgent, task, split, n, seed, threads)?;
    let success_rate = rate(&outcomes);
    let expert_success_rate = rate(&expert);
    Ok(EvalReport {
        task,
        split,
        episodes: n,
        seed,
        success_rate,
        expert_success_rate,
        expert_normalized_score: success_rate / expert_success_rate,
        instruction: instruction.text.clone(),
        policy_fingerprint: model.fingerprint(),
        bundle_fingerprint: bundle.fingerprint(),
        outcomes,
        config_hash: None,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(from: &[f64], among: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, h) in among.iter().enumerate() {
        let d = sq_dist(from, h);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Percentage of indices `i` whose nearest neighbour `j` in `h2` maps back
/// to a nearest neighbour `k` in `h1` with `|i − k| ≤ 1`. Ties go to the
/// lowest index.
pub fn cycle_consistency(h1: &[Vec<f64>], h2: &[Vec<f64>]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(invalid(format!("sequence lengths differ: {} vs {}", h1.len(), h2.len())));
    }
    if h1.is_empty() {
        return Err(invalid("cycle consistency needs at least one element"));
    }
    let consistent = (0..h1.len())
        .filter(|&i| {
            let j = nearest(&h1[i], h2);
            let k = nearest(&h2[j], h1);
            i.abs_diff(k) <= 1
        })
        .count();
    Ok(100.0 * consistent as f64 / h1.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairType {
    SuccSucc,
    FailFail,
    SuccFail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CyclePair {
    pub level_seeds: (u64, u64),
    pub length: usize,
    /// Whether one member was shorter than the window.
    pub truncated: bool,
    pub percentage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub pair_type: PairType,
    pub window: usize,
    pub requested_levels: usize,
    pub pairs: Vec<CyclePair>,
    /// Mean percentage over pairs; `None` without any pair.
    pub percentage: Option<f64>,
    pub partial: bool,
}

/// Hidden states of the last `window` steps of a rollout.
fn tail(hidden: &[Vec<f64>], window: usize) -> &[Vec<f64>] {
    &hidden[hidden.len().saturating_sub(window)..]
}

fn pair(a: (&[Vec<f64>], u64), b: (&[Vec<f64>], u64), window: usize) -> Result<CyclePair> {
    let (ha, hb) = (tail(a.0, window), tail(b.0, window));
    let n = ha.len().min(hb.len());
    Ok(CyclePair {
        level_seeds: (a.1, b.1),
        length: n,
        truncated: n < window,
        percentage: cycle_consistency(&ha[ha.len() - n..], &hb[hb.len() - n..])?,
    })
}

fn report(pair_type: PairType, window: usize, requested: usize, pairs: Vec<CyclePair>) -> CycleReport {
    let percentage = (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.percentage).sum::<f64>() / pairs.len() as f64);
    CycleReport {
        pair_type,
        window,
        requested_levels: requested,
        partial: pairs.len() < requested,
        pairs,
        percentage,
    }
}

/// Records the policy's hidden states on up to `n_levels` test levels where
/// it fails, together with the expert's successful action sequence on the
/// same level fed through the policy. Returns
/// `(level seed, success hidden states, failure hidden states)`.
#[allow(clippy::type_complexity)]
pub fn harvest_failures(
    model: &PolicyModel,
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    task: TaskId,
    n_levels: usize,
    seed: u64,
    max_attempts: usize,
) -> Result<Vec<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>> {
    let mut found = Vec::new();
    for s in level_seeds(seed, Split::Test, max_attempts) {
        if found.len() == n_levels {
            break;
        }
        let level = make_level(task, Split::Test, s);
        let mut opts = RolloutOptions {
            record_hidden: true,
            ..RolloutOptions::default()
        };
        let own = rollout(model, bundle, cache, &level, &opts)?;
        if own.success {
            continue;
        }
        let expert = solve(&level)?;
        opts.forced_actions = Some(&expert);
        let forced = rollout(model, bundle, cache, &level, &opts)?;
        found.push((s, forced.hidden, own.hidden));
    }
    Ok(found)
}

/// Cycle consistency over the last `window` steps for the three pair types:
/// successful episodes on neighbouring levels, failed episodes on
/// neighbouring levels, and a success and failure on the same level.
pub fn cycle_suite(
    model: &PolicyModel,
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    task: TaskId,
    n_levels: usize,
    seed: u64,
    window: usize,
) -> Result<[CycleReport; 3]> {
    if n_levels == 0 || window == 0 {
        return Err(invalid("cycle suite needs at least one level and a positive window"));
    }
    let found = harvest_failures(model, bundle, cache, task, n_levels, seed, 20 * n_levels)?;
    let m = found.len();
    let cross = |pick: &dyn Fn(&(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)) -> &[Vec<f64>]| -> Result<Vec<CyclePair>> {
        if m < 2 {
            return Ok(Vec::new());
        }
        (0..m)
            .map(|i| {
                let (a, b) = (&found[i], &found[(i + 1) % m]);
                pair((pick(a), a.0), (pick(b), b.0), window)
            })
            .collect()
    };
    let succ_succ = cross(&|f| &f.1)?;
    let fail_fail = cross(&|f| &f.2)?;
    let succ_fail = found
        .iter()
        .map(|f| pair((&f.1, f.0), (&f.2, f.0), window))
        .collect::<Result<Vec<_>>>()?;
    Ok([
        report(PairType::SuccSucc, window, n_levels, succ_succ),
        report(PairType::FailFail, window, n_levels, fail_fail),
        report(PairType::SuccFail, window, n_levels, succ_fail),
    ])
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(invalid("spearman needs two sequences of equal length ≥ 2"));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("rank correlation of a constant sequence"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Per-step rewards and normalized remaining returns of one trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardCurve {
    pub level_seed: u64,
    pub rewards: Vec<f64>,
    pub remaining: Vec<f64>,
}

/// Reward curves for `trajectories` under `instruction`, one value per
/// observation before each action. Returns the curves and the constant used
/// to normalize the remaining returns (derived from these curves unless
/// given).
pub fn reward_curves(
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    trajectories: &[Trajectory],
    instruction: &Instruction,
    kind: RewardKind,
    norm_constant: Option<f64>,
) -> Result<(Vec<RewardCurve>, f64)> {
    let model = RewardModel::new(bundle, cache, kind, instruction)?;
    let cells: Vec<(&Level, Vec<Cell>)> = trajectories
        .iter()
        .map(|t| Ok((&t.level, t.replay()?.cells[..t.len()].to_vec())))
        .collect::<Result<_>>()?;
    cache.prefetch(bundle, &cells, 1.0)?;
    let rewards: Vec<Vec<f64>> = cells
        .iter()
        .map(|(level, cs)| model.rewards(level, cs))
        .collect::<Result<_>>()?;
    let c = match norm_constant {
        Some(c) => c,
        None => default_norm_constant(&rewards, 1.0)?,
    };
    let curves = trajectories
        .iter()
        .zip(rewards)
        .map(|(t, r)| RewardCurve {
            level_seed: t.level.level_seed,
            remaining: discounted_returns(&r, 1.0).into_iter().map(|v| v / c).collect(),
            rewards: r,
        })
        .collect();
    Ok((curves, c))
}

/// Writes `trajectory_id,t,reward,normalized_remaining_return`, one row per step.
pub fn write_reward_curves(path: &Path, curves: &[RewardCurve]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["trajectory_id", "t", "reward", "normalized_remaining_return"])
        .map_err(|e| csv_err(path, e))?;
    for (id, c) in curves.iter().enumerate() {
        for (t, (r, rem)) in c.rewards.iter().zip(&c.remaining).enumerate() {
            w.write_record([id.to_string(), t.to_string(), r.to_string(), rem.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    invalid(format!("{}: {e}", path.display()))
}

pub fn export_reward_curves(
    bundle: &EncoderBundle,
    cache: &FeatureCache,
    trajectories: &[Trajectory],
    instruction: &Instruction,
    path: &Path,
) -> Result<Vec<RewardCurve>> {
    let (curves, _) = reward_curves(bundle, cache, trajectories, instruction, RewardKind::Text, None)?;
    write_reward_curves(path, &curves)?;
    Ok(curves)
}

/// Spearman ρ between timestep and reward for each curve, skipping curves
/// where it is undefined; the median over the rest and the skipped count.
pub fn median_time_reward_spearman(curves: &[RewardCurve]) -> Result<(f64, Vec<f64>, usize)> {
    let mut rhos = Vec::new();
    let mut skipped = 0;
    for c in curves {
        let ts: Vec<f64> = (0..c.rewards.len()).map(|t| t as f64).collect();
        match spearman(&ts, &c.rewards) {
            Ok(r) => rhos.push(r),
            Err(Error::Undefined(_) | Error::Invalid(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if rhos.is_empty() {
        return Err(Error::Undefined("no curve with a defined rank correlation"));
    }
    Ok((median(&rhos), rhos, skipped))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn cycle_examples() {
        assert_eq!(cycle_consistency(&seq(&[0.0, 1.0, 2.0]), &seq(&[0.0, 1.0, 2.0])).unwrap(), 100.0);
        let p = cycle_consistency(&seq(&[0.0, 1.0, 2.0]), &seq(&[2.0, 2.0, 2.0])).unwrap();
        assert!((p - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(cycle_consistency(&seq(&[5.0]), &seq(&[-3.0])).unwrap(), 100.0);
        assert!(cycle_consistency(&seq(&[1.0]), &seq(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[2.0, 4.0, 9.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((spearman(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(spearman(&[1.0, 2.0], &[4.0, 4.0]), Err(Error::Undefined(_))));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
