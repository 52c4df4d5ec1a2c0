//! End-to-end runs: demonstrations, encoder, fine-tuning, labeling, policy
//! training and evaluation, with intermediate artifacts memoized so that
//! ablation cells and seeds can share them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AblationGrid, BundleMode, RunConfig, TextMode};
use crate::encoder::{caption_corpus, EncoderBundle};
use crate::error::{invalid, io_err, Result};
use crate::eval::{csv_err, evaluate, EvalReport};
use crate::expert::{generate_demos, DemoDataset};
use crate::features::FeatureCache;
use crate::finetune::finetune;
use crate::policy::{train_policy, PolicyModel, TrainingData};
use crate::reward::{label_returns, LabeledDataset, RewardModel};
use crate::worldgrid::Split;

fn key<T: Serialize>(parts: &T) -> String {
    serde_json::to_string(parts).expect("keys serialize")
}

fn short_hash(k: &str) -> String {
    hex::encode(&Sha256::digest(k.as_bytes())[..8])
}

/// Memo of artifacts shared between runs in one process. With a store
/// directory, encoder bundles and policies are also saved there and reused
/// by later processes.
#[derive(Default)]
pub struct Workspace {
    pub threads: usize,
    store: Option<PathBuf>,
    demos: HashMap<String, Arc<DemoDataset>>,
    bundles: HashMap<String, Arc<EncoderBundle>>,
    caches: HashMap<String, Arc<FeatureCache>>,
    labeled: HashMap<String, Arc<LabeledDataset>>,
    policies: HashMap<String, Arc<PolicyModel>>,
}

/// Outcome of one full run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub config_hash: String,
    pub norm_constant: f64,
    pub target_return: f64,
    pub bundle_fingerprint: String,
    pub policy_fingerprint: String,
    pub train: EvalReport,
    pub test: EvalReport,
}

impl Workspace {
    pub fn new(threads: usize) -> Self {
        Self {
            threads,
            ..Self::default()
        }
    }

    pub fn with_store(threads: usize, dir: impl Into<PathBuf>) -> Self {
        Self {
            threads,
            store: Some(dir.into()),
            ..Self::default()
        }
    }

    fn stored_bundle(&self, k: &str, make: impl FnOnce() -> Result<EncoderBundle>) -> Result<EncoderBundle> {
        let Some(dir) = &self.store else { return make() };
        let path = dir.join(format!("encoder-{}.bin", short_hash(k)));
        if path.exists() {
            return EncoderBundle::load(&path);
        }
        let b = make()?;
        b.save(&path)?;
        Ok(b)
    }

    fn stored_policy(&self, k: &str, make: impl FnOnce() -> Result<PolicyModel>) -> Result<PolicyModel> {
        let Some(dir) = &self.store else { return make() };
        let path = dir.join(format!("policy-{}.bin", short_hash(k)));
        if path.exists() {
            return PolicyModel::load(&path);
        }
        let m = make()?;
        m.save(&path)?;
        Ok(m)
    }

    /// The training demonstrations named by `cfg.demos`.
    pub fn demos(&mut self, cfg: &RunConfig) -> Result<Arc<DemoDataset>> {
        let k = key(&(cfg.task, &cfg.demos));
        if let Some(d) = self.demos.get(&k) {
            return Ok(Arc::clone(d));
        }
        let d = Arc::new(generate_demos(cfg.task, cfg.demos.split, cfg.demos.n, cfg.demos.seed)?);
        self.demos.insert(k, Arc::clone(&d));
        Ok(d)
    }

    /// Pre-trained towers, or random ones when pre-training is off.
    pub fn base_bundle(&mut self, cfg: &RunConfig) -> Result<Arc<EncoderBundle>> {
        let k = key(&("base", &cfg.encoder));
        if let Some(b) = self.bundles.get(&k) {
            return Ok(Arc::clone(b));
        }
        let b = self.stored_bundle(&k, || {
            let mut b = EncoderBundle::new(cfg.encoder.model.clone(), cfg.encoder.seed)?;
            if cfg.encoder.pretrained {
                let pairs = caption_corpus(cfg.encoder.pretrain.pairs, cfg.encoder.pretrain.seed);
                b.pretrain_contrastive(&pairs, &cfg.encoder.pretrain)?;
            }
            Ok(b)
        })?;
        let b = Arc::new(b);
        self.bundles.insert(k, Arc::clone(&b));
        Ok(b)
    }

    /// Feature cache for the towers of `bundle`.
    pub fn cache(&mut self, bundle: &EncoderBundle) -> Arc<FeatureCache> {
        Arc::clone(
            self.caches
                .entry(bundle.tower_fingerprint())
                .or_insert_with(|| Arc::new(FeatureCache::new(bundle))),
        )
    }

    /// The bundle used for rewards: the base bundle when frozen or when
    /// both fine-tuning objectives are off, otherwise the fine-tuned one.
    pub fn reward_bundle(&mut self, cfg: &RunConfig) -> Result<Arc<EncoderBundle>> {
        let base = self.base_bundle(cfg)?;
        let tuned = cfg.label.bundle == BundleMode::Finetuned && (cfg.finetune.vip || cfg.finetune.idm);
        if !tuned {
            return Ok(base);
        }
        let mut ft_cfg = cfg.finetune.clone();
        ft_cfg.scratch |= !cfg.encoder.pretrained;
        let instruction = cfg.train_instruction();
        let k = key(&("ft", base.fingerprint(), &ft_cfg, &instruction.text, cfg.task, &cfg.demos));
        if let Some(b) = self.bundles.get(&k) {
            return Ok(Arc::clone(b));
        }
        let demos = self.demos(cfg)?;
        let cache = self.cache(&base);
        let b = self.stored_bundle(&k, || Ok(finetune(&base, &cache, &demos.records, &instruction, &ft_cfg)?.0))?;
        let b = Arc::new(b);
        self.bundles.insert(k, Arc::clone(&b));
        Ok(b)
    }

    /// Demonstrations labeled with returns under the reward bundle.
    pub fn labeled(&mut self, cfg: &RunConfig) -> Result<Arc<LabeledDataset>> {
        let bundle = self.reward_bundle(cfg)?;
        let instruction = cfg.train_instruction();
        let k = key(&(bundle.fingerprint(), &cfg.label, &instruction.text, cfg.task, &cfg.demos));
        if let Some(l) = self.labeled.get(&k) {
            return Ok(Arc::clone(l));
        }
        let demos = self.demos(cfg)?;
        let cache = self.cache(&bundle);
        let model = RewardModel::new(&bundle, &cache, cfg.label.reward, &instruction)?;
        let l = Arc::new(label_returns(&demos, &model, cfg.label.gamma, None)?);
        self.labeled.insert(k, Arc::clone(&l));
        Ok(l)
    }

    /// Trains the configured policy (memoized on the full configuration).
    pub fn policy(&mut self, cfg: &RunConfig) -> Result<Arc<PolicyModel>> {
        let k = cfg.hash();
        if let Some(p) = self.policies.get(&k) {
            return Ok(Arc::clone(p));
        }
        let bundle = self.reward_bundle(cfg)?;
        let cache = self.cache(&bundle);
        let labeled = if cfg.policy.kind.uses_returns() {
            Some(self.labeled(cfg)?)
        } else {
            None
        };
        let demos = self.demos(cfg)?;
        let model = self.stored_policy(&k, || {
            let data = match &labeled {
                Some(l) => TrainingData::Labeled(l),
                None => TrainingData::Demos {
                    task: cfg.task,
                    trajectories: &demos.records,
                    instruction: cfg.train_instruction(),
                },
            };
            Ok(train_policy(&cfg.policy, &bundle, &cache, &data)?.0)
        })?;
        let p = Arc::new(model);
        self.policies.insert(k, Arc::clone(&p));
        Ok(p)
    }

    /// Runs every stage and evaluates on both splits.
    pub fn run_cell(&mut self, cfg: &RunConfig) -> Result<CellResult> {
        let model = self.policy(cfg)?;
        let bundle = self.reward_bundle(cfg)?;
        let cache = self.cache(&bundle);
        let hash = cfg.hash();
        let eval_on = |split: Split| -> Result<EvalReport> {
            let instruction = cfg.label.text.instruction(cfg.task, split);
            let mut r = evaluate(
                &model,
                &bundle,
                &cache,
                cfg.task,
                split,
                cfg.eval.episodes,
                cfg.eval.seed,
                self.threads,
                Some(&instruction),
            )?;
            r.config_hash = Some(hash.clone());
            Ok(r)
        };
        let train = eval_on(Split::Train)?;
        let test = eval_on(cfg.eval.split)?;
        Ok(CellResult {
            config_hash: hash.clone(),
            norm_constant: model.meta.norm_constant.unwrap_or(1.0),
            target_return: model.meta.target_return.unwrap_or(0.0),
            bundle_fingerprint: bundle.fingerprint(),
            policy_fingerprint: model.fingerprint(),
            train,
            test,
        })
    }
}

/// Axis values of one ablation cell, as `(axis, value)` pairs.
pub type CellLabel = Vec<(String, String)>;

/// Expands the non-empty axes of `grid` over `base`.
pub fn expand_grid(grid: &AblationGrid, base: &RunConfig) -> Vec<(CellLabel, RunConfig)> {
    let mut cells: Vec<(CellLabel, RunConfig)> = vec![(Vec::new(), base.clone())];
    fn axis<T: Clone + ToString>(
        cells: Vec<(CellLabel, RunConfig)>,
        name: &str,
        values: &[T],
        apply: impl Fn(&mut RunConfig, &T),
    ) -> Vec<(CellLabel, RunConfig)> {
        if values.is_empty() {
            return cells;
        }
        let mut out = Vec::with_capacity(cells.len() * values.len());
        for (label, cfg) in cells {
            for v in values {
                let mut c = cfg.clone();
                apply(&mut c, v);
                let mut l = label.clone();
                l.push((name.to_string(), v.to_string()));
                out.push((l, c));
            }
        }
        out
    }
    cells = axis(cells, "pretrain", &grid.pretrain, |c, &v| {
        c.encoder.pretrained = v;
        c.finetune.scratch = !v;
    });
    cells = axis(cells, "vip", &grid.vip, |c, &v| c.finetune.vip = v);
    cells = axis(cells, "idm", &grid.idm, |c, &v| c.finetune.idm = v);
    cells = axis(cells, "return_prediction", &grid.return_prediction, |c, &v| {
        c.policy.return_prediction = v
    });
    cells = axis(cells, "lambda", &grid.lambda, |c, &v| c.policy.lambda = v);
    let texts: Vec<TextName> = grid.text.iter().map(|&t| TextName(t)).collect();
    cells = axis(cells, "text", &texts, |c, t| c.label.text = t.0);
    let bundles: Vec<BundleName> = grid.bundle.iter().map(|&b| BundleName(b)).collect();
    cells = axis(cells, "bundle", &bundles, |c, b| c.label.bundle = b.0);
    cells
}

#[derive(Clone, Copy)]
struct TextName(TextMode);

impl std::fmt::Display for TextName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            TextMode::Instructive => "instructive",
            TextMode::Random => "random",
        })
    }
}

#[derive(Clone, Copy)]
struct BundleName(BundleMode);

impl std::fmt::Display for BundleName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self.0 {
            BundleMode::Frozen => "frozen",
            BundleMode::Finetuned => "finetuned",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: CellLabel,
    pub config_hash: String,
    /// Error text when the cell failed.
    pub error: Option<String>,
    pub result: Option<CellResult>,
}

impl AblationRow {
    pub fn test_success(&self) -> Option<f64> {
        self.result.as_ref().map(|r| r.test.success_rate)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_config_hash: String,
    pub axes: Vec<String>,
    pub rows: Vec<AblationRow>,
}

/// Runs every cell of `grid`; a failing cell is recorded and the grid continues.
pub fn run_ablation(ws: &mut Workspace, grid: &AblationGrid, base: &RunConfig) -> AblationReport {
    let cells = expand_grid(grid, base);
    let axes = cells
        .first()
        .map(|(l, _)| l.iter().map(|(a, _)| a.clone()).collect())
        .unwrap_or_default();
    let rows = cells
        .into_iter()
        .map(|(cell, cfg)| {
            let config_hash = cfg.hash();
            match ws.run_cell(&cfg) {
                Ok(r) => AblationRow {
                    cell,
                    config_hash,
                    error: None,
                    result: Some(r),
                },
                Err(e) => AblationRow {
                    cell,
                    config_hash,
                    error: Some(e.to_string()),
                    result: None,
                },
            }
        })
        .collect();
    AblationReport {
        base_config_hash: base.hash(),
        axes,
        rows,
    }
}

impl AblationReport {
    pub fn csv_header(&self) -> Vec<String> {
        let mut h = self.axes.clone();
        h.extend(
            [
                "train_success",
                "test_success",
                "test_expert_normalized",
                "norm_constant",
                "target_return",
                "config_hash",
                "error",
            ]
            .map(String::from),
        );
        h
    }

    /// Writes `ablation.csv`, `ablation.json` and `summary.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("ablation.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(self.csv_header()).map_err(|e| csv_err(&path, e))?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.cell.iter().map(|(_, v)| v.clone()).collect();
            match &row.result {
                Some(r) => rec.extend([
                    r.train.success_rate.to_string(),
                    r.test.success_rate.to_string(),
                    r.test.expert_normalized_score.to_string(),
                    r.norm_constant.to_string(),
                    r.target_return.to_string(),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), 5)),
            }
            rec.push(row.config_hash.clone());
            rec.push(row.error.clone().unwrap_or_default());
            w.write_record(&rec).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(io_err(&path))?;
        crate::policy::write_json(&dir.join("ablation.json"), self)?;
        let summary = dir.join("summary.txt");
        std::fs::write(&summary, self.summary()).map_err(io_err(&summary))
    }

    /// Fixed-width text table.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let cell: Vec<String> = row.cell.iter().map(|(a, v)| format!("{a}={v}")).collect();
            let cell = if cell.is_empty() { "base".to_string() } else { cell.join(" ") };
            let line = match (&row.result, &row.error) {
                (Some(r), _) => format!(
                    "{cell:<48} train {:>6.2}%  test {:>6.2}%\n",
                    100.0 * r.train.success_rate,
                    100.0 * r.test.success_rate
                ),
                (None, Some(e)) => format!("{cell:<48} failed: {e}\n"),
                (None, None) => format!("{cell:<48} no result\n"),
            };
            out.push_str(&line);
        }
        out
    }
}

/// Parses a grid given either as a preset name or a TOML file path.
pub fn load_grid(spec: &str) -> Result<AblationGrid> {
    if let Ok(g) = AblationGrid::preset(spec) {
        return Ok(g);
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}
