//! Run configuration: a TOML document whose sections map onto the core
//! config types, with CLI flags applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xlkd::codemix::MixPolicy;
use xlkd::data::SynthSpec;
use xlkd::distill::DistillationConfig;
use xlkd::eval::{default_question_rules, QuestionRule};
use xlkd::train::TrainConfig;
use xlkd::vocab::TargetMode;
use xlkd::{Error, Result};

pub const OUT_ENV: &str = "XLKD_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Encoder shape shared by teacher and student; vocabulary and class
/// counts come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    #[serde(default)]
    pub intermediate_size: Option<usize>,
    pub feature_dim: usize,
    pub max_text_tokens: usize,
    pub max_image_tokens: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    /// Initialization seed of the student.
    pub seed: u64,
    /// Initialization seed of a teacher built without a checkpoint.
    pub teacher_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden_size: 32,
            num_layers: 4,
            num_heads: 2,
            intermediate_size: None,
            feature_dim: 16,
            max_text_tokens: 32,
            max_image_tokens: 8,
            dropout: 0.3,
            attention_dropout: 0.1,
            seed: 12,
            teacher_seed: 11,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize, num_classes: usize) -> xlkd::model::ModelConfig {
        let mut c = xlkd::model::ModelConfig::new(
            self.hidden_size,
            self.num_layers,
            self.num_heads,
            self.feature_dim,
            vocab_size,
            num_classes,
        );
        c.intermediate_size = self.intermediate_size;
        c.max_text_tokens = self.max_text_tokens;
        c.max_image_tokens = self.max_image_tokens;
        c.dropout = self.dropout;
        c.attention_dropout = self.attention_dropout;
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodeMixSection {
    pub ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub policy: MixPolicy,
    /// Also feed the plain translated question to the student.
    #[serde(default)]
    pub with_plain: bool,
}

impl Default for CodeMixSection {
    fn default() -> Self {
        Self {
            ratio: 0.15,
            seed: 0,
            policy: MixPolicy::default(),
            with_plain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub mode: TargetMode,
    /// Number of answer classes kept by `vocab`.
    pub classes: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            mode: TargetMode::Single,
            classes: 3000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub question_rules: Vec<QuestionRule>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            question_rules: default_question_rules(),
        }
    }
}

/// One training schedule: a named preset, or explicit stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Schedule {
    Preset { preset: String },
    Explicit(TrainConfig),
}

impl Schedule {
    pub fn resolve(&self) -> Result<TrainConfig> {
        match self {
            Schedule::Preset { preset } => TrainConfig::preset(preset),
            Schedule::Explicit(c) => Ok(c.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub kd: Schedule,
    pub finetune: Schedule,
    pub aug: Schedule,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = |s: &str| Schedule::Preset { preset: s.into() };
        Self {
            kd: p("desk-kd"),
            finetune: p("desk-finetune"),
            aug: p("desk-aug"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub precision: Precision,
    pub model: ModelSection,
    pub distill: DistillationConfig,
    pub codemix: CodeMixSection,
    pub train: TrainSection,
    pub task: TaskSection,
    pub eval: EvalSection,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Distillation layers for a model of `num_layers` layers: the
    /// configured set, or every quarter of the depth when the default set
    /// does not fit.
    pub fn distill_for(&self, num_layers: usize) -> DistillationConfig {
        let mut d = self.distill.clone();
        if d.layers == DistillationConfig::default().layers && d.layers.iter().any(|&m| m > num_layers) {
            d.layers = (1..4).map(|q| q * num_layers / 4).filter(|&m| m >= 1).collect();
            d.layers.dedup();
        }
        d
    }
}

/// Output root: `--out`, else `$XLKD_OUT`, else `./xlkd-out`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("xlkd-out"))
}
