//! Run configuration: TOML on disk, a canonical sorted-key form, and the
//! hash of that form that identifies a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderConfig, PretrainConfig};
use crate::error::{invalid, io_err, Result};
use crate::finetune::FinetuneConfig;
use crate::policy::{PolicyConfig, PolicyKind};
use crate::reward::RewardKind;
use crate::worldgrid::{Instruction, Split, TaskId, RANDOM_TEXT};

/// Snapshot written beside every artifact.
pub const SNAPSHOT_NAME: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// The task's own instruction.
    Instructive,
    /// An unrelated sentence in place of the instruction.
    Random,
}

impl TextMode {
    pub fn instruction(self, task: TaskId, split: Split) -> Instruction {
        match self {
            TextMode::Instructive => crate::worldgrid::instruction_for(task, split),
            TextMode::Random => Instruction::new(RANDOM_TEXT),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleMode {
    Frozen,
    Finetuned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub demos: PathBuf,
    pub encoder: PathBuf,
    pub finetuned: PathBuf,
    pub labeled: PathBuf,
    pub policy: PathBuf,
    pub report: PathBuf,
    pub cycle: PathBuf,
    pub curves: PathBuf,
    pub ablation: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        let p = |s: &str| PathBuf::from("runs").join(s);
        Self {
            demos: p("demos/demos.jsonl"),
            encoder: p("encoder/encoder.bin"),
            finetuned: p("finetuned/encoder.bin"),
            labeled: p("labeled/labeled.jsonl"),
            policy: p("policy/policy.bin"),
            report: p("eval/report.json"),
            cycle: p("cycle/cycle.json"),
            curves: p("curves/curves.csv"),
            ablation: p("ablation"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    pub split: Split,
    pub n: usize,
    pub seed: u64,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self {
            split: Split::Train,
            n: 500,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub model: EncoderConfig,
    pub pretrain: PretrainConfig,
    /// Pre-train the towers; when off they stay at their random initialization.
    pub pretrained: bool,
    pub seed: u64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            model: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            pretrained: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelSection {
    pub gamma: f64,
    pub reward: RewardKind,
    pub text: TextMode,
    pub bundle: BundleMode,
}

impl Default for LabelSection {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            reward: RewardKind::Text,
            text: TextMode::Instructive,
            bundle: BundleMode::Finetuned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    pub episodes: usize,
    pub seed: u64,
    pub cycle_levels: usize,
    pub cycle_window: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            episodes: 100,
            seed: 7,
            cycle_levels: 10,
            cycle_window: 10,
        }
    }
}

/// Ablation axes; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub pretrain: Vec<bool>,
    pub vip: Vec<bool>,
    pub idm: Vec<bool>,
    pub return_prediction: Vec<bool>,
    pub lambda: Vec<f64>,
    pub text: Vec<TextMode>,
    pub bundle: Vec<BundleMode>,
}

impl AblationGrid {
    /// Named grids: `vip-idm`, `return-prediction`, `lambda`, `random-text`.
    pub fn preset(name: &str) -> Result<Self> {
        let g = Self::default();
        Ok(match name {
            "vip-idm" => Self {
                vip: vec![true, false],
                idm: vec![true, false],
                ..g
            },
            "return-prediction" => Self {
                return_prediction: vec![true, false],
                ..g
            },
            "lambda" => Self {
                lambda: vec![0.001, 0.01, 0.1, 1.0],
                ..g
            },
            "random-text" => Self {
                text: vec![TextMode::Instructive, TextMode::Random],
                ..g
            },
            "pretrain" => Self {
                pretrain: vec![true, false],
                ..g
            },
            other => return Err(invalid(format!("unknown ablation grid `{other}`"))),
        })
    }

    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: TaskId,
    pub paths: PathsSection,
    pub demos: DemoSection,
    pub encoder: EncoderSection,
    pub finetune: FinetuneConfig,
    pub label: LabelSection,
    pub policy: PolicyConfig,
    pub eval: EvalSection,
    pub ablation: AblationGrid,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_task(TaskId::Corridor)
    }
}

impl RunConfig {
    /// Defaults with task-family weights for the fine-tuning and policy losses.
    pub fn for_task(task: TaskId) -> Self {
        Self {
            task,
            paths: PathsSection::default(),
            demos: DemoSection {
                n: if task.is_corridor() { 500 } else { 1000 },
                ..DemoSection::default()
            },
            encoder: EncoderSection::default(),
            finetune: FinetuneConfig::for_task(task),
            label: LabelSection::default(),
            policy: PolicyConfig::for_task(PolicyKind::ArpDt, task),
            eval: EvalSection::default(),
            ablation: AblationGrid::default(),
        }
    }

    /// Parses a possibly partial file. Missing keys take the defaults of
    /// the file's task, so a Maze file gets Maze loss weights.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| invalid(format!("config: {e}")))?;
        Self::from_table(user)
    }

    fn from_table(user: toml::Table) -> Result<Self> {
        let task = match user.get("task") {
            Some(v) => v.clone().try_into().map_err(|e| invalid(format!("config: task: {e}")))?,
            None => TaskId::Corridor,
        };
        let mut merged = toml::Value::try_from(Self::for_task(task)).expect("config serializes to TOML");
        overlay(&mut merged, toml::Value::Table(user));
        merged.try_into().map_err(|e| invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::resolve(Some(path), &[])
    }

    /// Reads `file` (if any) and applies `overrides`, each a dotted key such
    /// as `policy.lambda` with a TOML value; bare words are taken as strings.
    /// Overrides win over the file, the file over the task defaults.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut user = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(io_err(path))?;
                toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, raw) in overrides {
            set_dotted(&mut user, k, parse_value(raw))?;
        }
        Self::from_table(user)
    }

    /// TOML with every table's keys in sorted order.
    pub fn canonical(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes to TOML");
        toml::to_string(&sorted(value)).expect("TOML value serializes")
    }

    /// Hex SHA-256 of the canonical form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    /// Writes the canonical snapshot into `dir` and returns its hash.
    pub fn write_snapshot(&self, dir: &Path) -> Result<String> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.canonical()).map_err(io_err(&path))?;
        Ok(self.hash())
    }

    /// The instruction used for labeling and fine-tuning.
    pub fn train_instruction(&self) -> Instruction {
        self.label.text.instruction(self.task, Split::Train)
    }

    /// The instruction given to the policy at evaluation time.
    pub fn eval_instruction(&self) -> Instruction {
        self.label.text.instruction(self.task, self.eval.split)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| invalid(format!("empty key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let slot = cur.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| invalid(format!("`{p}` in `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively replaces entries of `base` with those of `top`.
fn overlay(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn sorted(v: toml::Value) -> toml::Value {
    match v {
        toml::Value::Table(t) => {
            let mut entries: Vec<(String, toml::Value)> = t.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            toml::Value::Table(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        toml::Value::Array(a) => toml::Value::Array(a.into_iter().map(sorted).collect()),
        other => other,
    }
}
