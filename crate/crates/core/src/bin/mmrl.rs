use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mmrl::config::{AblationGrid, BundleMode, RunConfig};
use mmrl::encoder::{caption_corpus, EncoderBundle};
use mmrl::eval::{cycle_suite, evaluate, export_reward_curves, with_threads, CycleReport};
use mmrl::expert::{generate_demos, DemoDataset};
use mmrl::features::FeatureCache;
use mmrl::finetune::finetune;
use mmrl::pipeline::{load_grid, run_ablation, Workspace};
use mmrl::policy::{train_policy, PolicyModel, TrainingData};
use mmrl::reward::{label_returns, LabeledDataset, RewardModel};

#[derive(Parser)]
#[command(name = "mmrl", version, about = "Multimodal-reward imitation learning on procedural gridworlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration; missing keys take the task's defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set policy.lambda=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    task: Option<String>,
    /// Worker threads for parallel stages (0 = all cores). Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted-expert demonstrations.
    GenDemos {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Contrastively pre-train the encoder towers on captioned frames.
    PretrainEncoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Skip pre-training and save the randomly initialized bundle.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the adapters on demonstrations.
    FinetuneEncoder {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label demonstrations with multimodal rewards and normalized returns.
    LabelReturns {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy (kind from `policy.kind`).
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        /// Labeled data for return-conditioned kinds, demonstrations otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Success rate of a trained policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cycle consistency of the policy's hidden states.
    Cycle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        levels: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-step reward curves as CSV.
    Curves {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        encoder: Option<PathBuf>,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid end to end.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Preset (`vip-idm`, `return-prediction`, `lambda`, `random-text`,
        /// `pretrain`) or a TOML grid file. Defaults to the config's grid.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common, extra: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(t) = &common.task {
        overrides.push(("task".to_string(), t.clone()));
    }
    for s in &common.set {
        let (k, v) = s.split_once('=').with_context(|| format!("`--set {s}` is not KEY=VALUE"))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    // Named flags win over `--set`.
    overrides.extend(extra.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Ok(RunConfig::resolve(common.config.as_deref(), &overrides)?)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| format!("{:?}", p.display().to_string()))
}

fn num<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

/// Writes the resolved snapshot beside `artifact` and returns its hash.
fn snapshot(cfg: &RunConfig, artifact: &Path) -> Result<String> {
    let dir = artifact.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    Ok(cfg.write_snapshot(dir)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| dir.display().to_string())?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| path.display().to_string())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}

fn load_bundle(path: &Path) -> Result<EncoderBundle> {
    EncoderBundle::load(path).with_context(|| format!("loading encoder bundle {}", path.display()))
}

/// The bundle that scores rewards under `label.bundle`.
fn reward_bundle_path(cfg: &RunConfig) -> &Path {
    match cfg.label.bundle {
        BundleMode::Frozen => &cfg.paths.encoder,
        BundleMode::Finetuned => &cfg.paths.finetuned,
    }
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    config_hash: String,
    #[serde(flatten)]
    report: &'a T,
}

#[derive(Serialize)]
struct CycleFile<'a> {
    config_hash: String,
    task: mmrl::worldgrid::TaskId,
    seed: u64,
    reports: &'a [CycleReport],
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenDemos {
            common,
            split,
            n,
            seed,
            out,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("demos.split", split),
                    ("demos.n", num(n)),
                    ("demos.seed", num(seed)),
                    ("paths.demos", path_flag(&out)),
                ],
            )?;
            let ds = generate_demos(cfg.task, cfg.demos.split, cfg.demos.n, cfg.demos.seed)?;
            ds.save(&cfg.paths.demos)?;
            let hash = snapshot(&cfg, &cfg.paths.demos)?;
            println!("wrote {} trajectories to {} (config {hash})", ds.records.len(), cfg.paths.demos.display());
        }
        Command::PretrainEncoder {
            common,
            pairs,
            epochs,
            scratch,
            out,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("encoder.pretrain.pairs", num(pairs)),
                    ("encoder.pretrain.epochs", num(epochs)),
                    ("encoder.pretrained", scratch.then(|| "false".to_string())),
                    ("paths.encoder", path_flag(&out)),
                ],
            )?;
            let mut bundle = EncoderBundle::new(cfg.encoder.model.clone(), cfg.encoder.seed)?;
            let path = &cfg.paths.encoder;
            if cfg.encoder.pretrained {
                let corpus = caption_corpus(cfg.encoder.pretrain.pairs, cfg.encoder.pretrain.seed);
                let report = bundle.pretrain_contrastive(&corpus, &cfg.encoder.pretrain)?;
                let hash = cfg.hash();
                write_json(&sibling(path, "pretrain.json"), &Stamped { config_hash: hash, report: &report })?;
            }
            bundle.save(path)?;
            let hash = snapshot(&cfg, path)?;
            println!("wrote encoder {} ({}; config {hash})", path.display(), bundle.fingerprint());
        }
        Command::FinetuneEncoder {
            common,
            encoder,
            demos,
            out,
        } => {
            let cfg = resolve(
                &common,
                vec![
                    ("paths.encoder", path_flag(&encoder)),
                    ("paths.demos", path_flag(&demos)),
                    ("paths.finetuned", path_flag(&out)),
                ],
            )?;
            let bundle = load_bundle(&cfg.paths.encoder)?;
            let ds = DemoDataset::load(&cfg.paths.demos)?;
            let cache = FeatureCache::new(&bundle);
            let instruction = cfg.train_instruction();
            let (tuned, report) = finetune(&bundle, &cache, &ds.records, &instruction, &cfg.finetune)?;
            let path = &cfg.paths.finetuned;
            tuned.save(path)?;
            let hash = snapshot(&cfg, path)?;
            write_json(&sibling(path, "finetune.json"), &Stamped { config_hash: hash.clone(), report: &report })?;
            println!(
                "wrote fine-tuned encoder {} (epoch {} kept, validation loss {:.4}; config {hash})",
                path.display(),
                report.selected_epoch,
                report.selected_val_loss
            );
        }
        Command::LabelReturns {
            common,
            encoder,
            demos,
            out,
        } => {
            let mut cfg = resolve(
                &common,
                vec![("paths.demos", path_flag(&demos)), ("paths.labeled", path_flag(&out))],
            )?;
            if let Some(e) = encoder {
                cfg.paths.finetuned = e.clone();
                cfg.paths.encoder = e;
            }
            let bundle = load_bundle(reward_bundle_path(&cfg))?;
            let ds = DemoDataset::load(&cfg.paths.demos)?;
            let cache = FeatureCache::new(&bundle);
            let model = RewardModel::new(&bundle, &cache, cfg.label.reward, &cfg.train_instruction())?;
            let labeled = label_returns(&ds, &model, cfg.label.gamma, None)?;
            labeled.save(&cfg.paths.labeled)?;
            let hash = snapshot(&cfg, &cfg.paths.labeled)?;
            println!(
                "wrote {} labeled trajectories to {} (C = {}; config {hash})",
                labeled.records.len(),
                cfg.paths.labeled.display(),
                labeled.meta.norm_constant
            );
        }
        Command::TrainPolicy {
            common,
            kind,
            encoder,
            data,
            out,
        } => {
            let mut cfg = resolve(&common, vec![("policy.kind", kind), ("paths.policy", path_flag(&out))])?;
            if let Some(e) = encoder {
                cfg.paths.finetuned = e.clone();
                cfg.paths.encoder = e;
            }
            let bundle = load_bundle(reward_bundle_path(&cfg))?;
            let cache = FeatureCache::new(&bundle);
            let (model, report) = if cfg.policy.kind.uses_returns() {
                let path = data.unwrap_or_else(|| cfg.paths.labeled.clone());
                let labeled = LabeledDataset::load(&path)?;
                train_policy(&cfg.policy, &bundle, &cache, &TrainingData::Labeled(&labeled))?
            } else {
                let path = data.unwrap_or_else(|| cfg.paths.demos.clone());
                let ds = DemoDataset::load(&path)?;
                let training = TrainingData::Demos {
                    task: cfg.task,
                    trajectories: &ds.records,
                    instruction: cfg.train_instruction(),
                };
                train_policy(&cfg.policy, &bundle, &cache, &training)?
            };
            let path = &cfg.paths.policy;
            model.save(path)?;
            let hash = snapshot(&cfg, path)?;
            write_json(&sibling(path, "training.json"), &Stamped { config_hash: hash.clone(), report: &report })?;
            println!(
                "wrote {} policy {} (final loss {:.4}; config {hash})",
                cfg.policy.kind.name(),
                path.display(),
                report.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Evaluate {
            common,
            policy,
            encoder,
            split,
            episodes,
            seed,
            out,
        } => {
            let mut cfg = resolve(
                &common,
                vec![
                    ("paths.policy", path_flag(&policy)),
                    ("eval.split", split),
                    ("eval.episodes", num(episodes)),
                    ("eval.seed", num(seed)),
                    ("paths.report", path_flag(&out)),
                ],
            )?;
            if let Some(e) = encoder {
                cfg.paths.finetuned = e.clone();
                cfg.paths.encoder = e;
            }
            if cfg.eval.episodes == 0 {
                bail!("evaluation needs at least one episode");
            }
            let model = PolicyModel::load(&cfg.paths.policy)?;
            let bundle = load_bundle(reward_bundle_path(&cfg))?;
            let cache = FeatureCache::new(&bundle);
            let instruction = cfg.eval_instruction();
            let mut report = evaluate(
                &model,
                &bundle,
                &cache,
                cfg.task,
                cfg.eval.split,
                cfg.eval.episodes,
                cfg.eval.seed,
                common.threads,
                Some(&instruction),
            )?;
            let hash = snapshot(&cfg, &cfg.paths.report)?;
            report.config_hash = Some(hash.clone());
            report.save(&cfg.paths.report)?;
            println!(
                "{} {}: success {:.2}% over {} episodes (expert-normalized {:.3}; config {hash})",
                cfg.task,
                cfg.eval.split,
                100.0 * report.success_rate,
                report.episodes,
                report.expert_normalized_score
            );
        }
        Command::Cycle {
            common,
            policy,
            encoder,
            levels,
            window,
            out,
        } => {
            let mut cfg = resolve(
                &common,
                vec![
                    ("paths.policy", path_flag(&policy)),
                    ("eval.cycle_levels", num(levels)),
                    ("eval.cycle_window", num(window)),
                    ("paths.cycle", path_flag(&out)),
                ],
            )?;
            if let Some(e) = encoder {
                cfg.paths.finetuned = e.clone();
                cfg.paths.encoder = e;
            }
            let model = PolicyModel::load(&cfg.paths.policy)?;
            let bundle = load_bundle(reward_bundle_path(&cfg))?;
            let cache = FeatureCache::new(&bundle);
            let reports = cycle_suite(
                &model,
                &bundle,
                &cache,
                cfg.task,
                cfg.eval.cycle_levels,
                cfg.eval.seed,
                cfg.eval.cycle_window,
            )?;
            let hash = snapshot(&cfg, &cfg.paths.cycle)?;
            let file = CycleFile {
                config_hash: hash.clone(),
                task: cfg.task,
                seed: cfg.eval.seed,
                reports: &reports,
            };
            write_json(&cfg.paths.cycle, &file)?;
            for r in &reports {
                let pct = r.percentage.map_or("n/a".to_string(), |p| format!("{p:.2}%"));
                let partial = if r.partial { " (partial)" } else { "" };
                println!("{:?}: {pct} over {} pairs{partial}", r.pair_type, r.pairs.len());
            }
        }
        Command::Curves {
            common,
            encoder,
            demos,
            out,
        } => {
            let mut cfg = resolve(
                &common,
                vec![("paths.demos", path_flag(&demos)), ("paths.curves", path_flag(&out))],
            )?;
            if let Some(e) = encoder {
                cfg.paths.finetuned = e.clone();
                cfg.paths.encoder = e;
            }
            let bundle = load_bundle(reward_bundle_path(&cfg))?;
            let ds = DemoDataset::load(&cfg.paths.demos)?;
            let cache = FeatureCache::new(&bundle);
            let curves = export_reward_curves(&bundle, &cache, &ds.records, &cfg.train_instruction(), &cfg.paths.curves)?;
            let hash = snapshot(&cfg, &cfg.paths.curves)?;
            println!("wrote {} curves to {} (config {hash})", curves.len(), cfg.paths.curves.display());
        }
        Command::Ablate { common, grid, out } => {
            let cfg = resolve(&common, vec![("paths.ablation", path_flag(&out))])?;
            let grid: AblationGrid = match grid {
                Some(g) => load_grid(&g)?,
                None if !cfg.ablation.is_empty() => cfg.ablation.clone(),
                None => bail!("no ablation grid: pass --grid or set [ablation] in the config"),
            };
            let dir = &cfg.paths.ablation;
            // Trained artifacts are kept so an interrupted grid resumes.
            let mut ws = Workspace::with_store(common.threads, dir.join("artifacts"));
            let report = run_ablation(&mut ws, &grid, &cfg);
            report.save(dir)?;
            cfg.write_snapshot(dir)?;
            print!("{}", report.summary());
        }
    }
    Ok(())
}

fn threads_of(command: &Command) -> usize {
    match command {
        Command::GenDemos { common, .. }
        | Command::PretrainEncoder { common, .. }
        | Command::FinetuneEncoder { common, .. }
        | Command::LabelReturns { common, .. }
        | Command::TrainPolicy { common, .. }
        | Command::Evaluate { common, .. }
        | Command::Cycle { common, .. }
        | Command::Curves { common, .. }
        | Command::Ablate { common, .. } => common.threads,
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = threads_of(&cli.command);
    with_threads(threads, || run(cli.command))?
}
