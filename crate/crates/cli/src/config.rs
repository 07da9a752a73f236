//! Experiment configuration files (TOML).
//!
//! Every table rejects unknown keys. Only `[model]` with `n_layers`,
//! `d_model` and `vocab_size` is required; everything else has a default.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uniattn_core::model::{ModelConfig, Positional, VariantSpec};
use uniattn_core::training::{Stage, TrainConfig};
use uniattn_core::uniattn::{plan_adaptive, plan_fixed, SuperblockPlan};

use crate::error::{CliError, Result};

/// Environment variable that replaces the config's `seed`.
pub const SEED_ENV: &str = "UNIATTN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Checkpoint to start from; seed-initialized weights when absent.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub model: ModelSection,
    #[serde(default)]
    pub variant: VariantSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub compare: CompareSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub n_heads: Option<usize>,
    pub n_kv_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_seq: Option<usize>,
    pub norm_eps: Option<f64>,
    pub positional: Option<Positional>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Baseline,
    Uniattn,
    Cla,
    Llmdrop,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::Uniattn => "uniattn",
            VariantKind::Cla => "cla",
            VariantKind::Llmdrop => "llmdrop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSection {
    #[serde(default = "default_kind")]
    pub kind: VariantKind,
    /// UniAttn only: add `W_c` on the residual path of reusing layers.
    #[serde(default = "yes")]
    pub compensated: bool,
    pub plan: Option<PlanSection>,
    /// LLMDrop: explicit 1-based layers to bypass.
    pub dropped: Option<Vec<usize>>,
    /// LLMDrop: bypass this many layers, chosen by MHA input-output similarity.
    /// With neither key, half the plan's reusing-layer count is used.
    pub drop_count: Option<usize>,
}

fn default_kind() -> VariantKind {
    VariantKind::Baseline
}

fn yes() -> bool {
    true
}

impl Default for VariantSection {
    fn default() -> Self {
        Self { kind: VariantKind::Baseline, compensated: true, plan: None, dropped: None, drop_count: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlanMode {
    /// Blocks of `size` layers from `start` upward.
    Fixed,
    /// `budget` reusing layers picked from the Baseline similarity profile.
    Adaptive,
    /// Literal `groups = [[start, end], ...]`.
    Explicit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub mode: PlanMode,
    pub start: Option<usize>,
    pub size: Option<usize>,
    pub budget: Option<usize>,
    pub groups: Option<Vec<(usize, usize)>>,
}

impl PlanSection {
    /// Builds the plan; `similarity` is called only in adaptive mode.
    pub fn resolve(
        &self,
        n_layers: usize,
        similarity: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<SuperblockPlan> {
        let need = |v: Option<usize>, key: &str| {
            v.ok_or_else(|| CliError::Config(format!("variant.plan: mode {:?} needs `{key}`", self.mode)))
        };
        let plan = match self.mode {
            PlanMode::Fixed => plan_fixed(n_layers, need(self.start, "start")?, need(self.size, "size")?)?,
            PlanMode::Adaptive => plan_adaptive(&similarity()?, need(self.budget, "budget")?)?,
            PlanMode::Explicit => SuperblockPlan::new(
                self.groups.clone().ok_or_else(|| CliError::Config("variant.plan: mode explicit needs `groups`".into()))?,
            )?,
        };
        plan.validate_for(n_layers)?;
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    /// Sparse Markov chain; learnable.
    Markov,
    /// Uniform random tokens.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub sequences: usize,
    pub seq_len: usize,
    /// Held-out sequences from the same source, used for evaluation losses.
    pub eval_sequences: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { kind: DataKind::Markov, sequences: 64, seq_len: 32, eval_sequences: 16 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitChoice {
    ClosedForm,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    /// Leading training sequences used for calibration; all of them when absent.
    pub sequences: Option<usize>,
    pub v: usize,
    /// How `W_c` is initialized when a command needs one and the checkpoint has none.
    pub init: InitChoice,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { sequences: None, v: 1, init: InitChoice::ClosedForm }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub patience: usize,
    /// Batch-shuffling seed; the experiment seed when absent.
    pub seed: Option<u64>,
}

impl Default for StageSection {
    fn default() -> Self {
        Self { learning_rate: 0.1, steps: 50, batch_size: 32, ema_decay: 0.9, patience: 20, seed: None }
    }
}

impl StageSection {
    pub fn train_config(&self, stage: Stage, default_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            stage,
            ema_decay: self.ema_decay,
            patience: self.patience,
            seed: self.seed.unwrap_or(default_seed),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub stage1: StageSection,
    pub stage2: StageSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub variants: Vec<VariantKind>,
    /// Sequence lengths for the cost model; the data length when empty.
    pub seq_lens: Vec<usize>,
    /// Stage-2 steps run on each variant before its eval loss is taken.
    pub train_steps: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            variants: vec![VariantKind::Baseline, VariantKind::Uniattn, VariantKind::Cla, VariantKind::Llmdrop],
            seq_lens: Vec::new(),
            train_steps: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))
    }

    /// Reads and validates `path`, then applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing(path.to_path_buf()),
            _ => CliError::io(path, e),
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(seed) = seed_override()? {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        let d = &self.data;
        if d.sequences == 0 || d.seq_len < 2 {
            return Err(CliError::Config("data needs at least one sequence of two or more tokens".into()));
        }
        if self.calibration.v == 0 {
            return Err(CliError::Config("calibration.v must be at least 1".into()));
        }
        if self.calibration.sequences.is_some_and(|n| n == 0 || n > d.sequences) {
            return Err(CliError::Config(format!("calibration.sequences must be in 1..={}", d.sequences)));
        }
        match self.variant.kind {
            VariantKind::Uniattn | VariantKind::Cla if self.variant.plan.is_none() => {
                Err(CliError::Config(format!("variant {} needs a [variant.plan] table", self.variant.kind.name())))
            }
            VariantKind::Llmdrop if self.variant.dropped.is_some() && self.variant.drop_count.is_some() => {
                Err(CliError::Config("variant llmdrop takes `dropped` or `drop_count`, not both".into()))
            }
            VariantKind::Llmdrop if self.variant.dropped.is_none() && self.variant.drop_count.is_none() && self.variant.plan.is_none() => {
                Err(CliError::Config("variant llmdrop needs `dropped`, `drop_count` or a [variant.plan] table".into()))
            }
            _ => Ok(()),
        }
    }

    /// Baseline model config described by `[model]`.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::toy(m.n_layers, m.d_model, m.vocab_size);
        if let Some(h) = m.n_heads {
            if h == 0 || !m.d_model.is_multiple_of(h) {
                return Err(CliError::Config(format!("n_heads {h} does not divide d_model {}", m.d_model)));
            }
            cfg.n_heads = h;
            cfg.n_kv_heads = h;
            cfg.d_head = m.d_model / h;
        }
        if let Some(kv) = m.n_kv_heads {
            cfg.n_kv_heads = kv;
        }
        if let Some(f) = m.d_ff {
            cfg.d_ff = f;
        }
        if let Some(s) = m.max_seq {
            cfg.max_seq = s;
        }
        if let Some(e) = m.norm_eps {
            cfg.norm_eps = e;
        }
        if let Some(p) = m.positional {
            cfg.positional = p;
        }
        cfg.validate()?;
        if self.data.seq_len > cfg.max_seq {
            return Err(CliError::Config(format!(
                "data.seq_len {} exceeds model max_seq {}",
                self.data.seq_len, cfg.max_seq
            )));
        }
        Ok(cfg)
    }

    /// The configured variant. `similarity` yields the Baseline similarity
    /// profile for adaptive plans, `io_similarity` the MHA input-output
    /// similarity for similarity-selected drops.
    pub fn variant_spec(
        &self,
        kind: VariantKind,
        similarity: impl FnOnce() -> Result<Vec<f64>>,
        io_similarity: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<VariantSpec> {
        let n = self.model.n_layers;
        let plan = || {
            self.variant
                .plan
                .as_ref()
                .ok_or_else(|| CliError::Config(format!("variant {} needs a [variant.plan] table", kind.name())))
        };
        Ok(match kind {
            VariantKind::Baseline => VariantSpec::Baseline,
            VariantKind::Uniattn => {
                VariantSpec::UniAttn { plan: plan()?.resolve(n, similarity)?, compensated: self.variant.compensated }
            }
            VariantKind::Cla => VariantSpec::Cla { plan: plan()?.resolve(n, similarity)? },
            VariantKind::Llmdrop => {
                let dropped: BTreeSet<usize> = match (&self.variant.dropped, self.variant.drop_count) {
                    (Some(d), _) => d.iter().copied().collect(),
                    (None, Some(k)) => uniattn_core::model::select_dropped(&io_similarity()?, k)?,
                    // Same KV budget as the UniAttn plan: one dropped layer per two reusing layers.
                    (None, None) => {
                        let reuse = plan()?.resolve(n, similarity)?.reuse_count();
                        uniattn_core::model::select_dropped(&io_similarity()?, reuse / 2)?
                    }
                };
                VariantSpec::LlmDrop { dropped }
            }
        })
    }
}

fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}
