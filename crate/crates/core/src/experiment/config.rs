use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PromptTemplate, ToySpec};
use crate::dpsgd::TrainSettings;
use crate::error::{Error, Result};
use crate::eval::ClassifierConfig;
use crate::model::{ArConfig, DiffusionConfig, LossWeights, PositionalEncoding, SamplingConfig};
use crate::privacy::{default_delta, epsilon_serde};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Autoregressive,
    Diffusion,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Autoregressive => "autoregressive",
            Self::Diffusion => "diffusion",
        }
    }
}

/// `"auto"` or an explicit δ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeltaSpec {
    Value(f64),
    Keyword(String),
}

impl Default for DeltaSpec {
    fn default() -> Self {
        Self::Keyword("auto".into())
    }
}

impl DeltaSpec {
    pub fn resolve(&self, train_size: usize) -> Result<f64> {
        match self {
            Self::Value(v) => Ok(*v),
            Self::Keyword(k) if k.eq_ignore_ascii_case("auto") => default_delta(train_size),
            Self::Keyword(k) => Err(Error::Config(format!(
                "delta must be \"auto\" or a number, got {k:?}"
            ))),
        }
    }
}

/// A builtin template name, a JSON template path, or an inline template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TemplateSource {
    Named(String),
    Inline(PromptTemplate),
}

impl TemplateSource {
    pub fn resolve(&self, base_dir: &Path) -> Result<PromptTemplate> {
        match self {
            Self::Inline(t) => {
                t.validate()?;
                Ok(t.clone())
            }
            Self::Named(name) => match PromptTemplate::builtin(name) {
                Some(t) => Ok(t),
                None => PromptTemplate::load(base_dir.join(name)),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub name: Option<String>,
    /// JSONL corpus; relative paths resolve against the config file.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub toy: Option<ToySpec>,
    /// Seed of the toy generator.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub template: Option<TemplateSource>,
    #[serde(default = "default_split")]
    pub split: Vec<f64>,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub balance: bool,
}

fn default_split() -> Vec<f64> {
    vec![0.8, 0.1, 0.1]
}

impl DataConfig {
    pub fn display_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match (&self.path, &self.toy) {
            (Some(p), _) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            (None, Some(_)) => "toy".into(),
            (None, None) => "unnamed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArSettings {
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_sequence_length: usize,
    pub ff_mult: usize,
    pub mask_instruction: bool,
    pub positional: PositionalEncoding,
}

impl Default for ArSettings {
    fn default() -> Self {
        let c = ArConfig::small(0);
        Self {
            embedding_dim: c.embedding_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            max_sequence_length: c.max_sequence_length,
            ff_mult: c.ff_mult,
            mask_instruction: c.mask_instruction,
            positional: c.positional,
        }
    }
}

impl ArSettings {
    pub fn model_config(&self, vocab_size: usize) -> ArConfig {
        ArConfig {
            vocab_size,
            embedding_dim: self.embedding_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            max_sequence_length: self.max_sequence_length,
            ff_mult: self.ff_mult,
            mask_instruction: self.mask_instruction,
            positional: self.positional,
        }
    }
}

/// Public corpus for span pretraining: a JSONL file or a toy spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicCorpusConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub toy: Option<ToySpec>,
    #[serde(default = "default_public_seed")]
    pub seed: u64,
    /// Metadata flag; pretraining refuses corpora marked private.
    #[serde(default)]
    pub private: bool,
}

fn default_public_seed() -> u64 {
    1_000_003
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub corpus: PublicCorpusConfig,
    #[serde(default = "default_span_fraction")]
    pub span_fraction: f64,
    #[serde(default)]
    pub training: TrainSettings,
}

fn default_span_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSettings {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub max_sequence_length: usize,
    pub target_length: usize,
    pub diffusion_steps: usize,
    pub schedule_offset: f64,
    pub self_conditioning: bool,
    pub clamp: bool,
    pub loss_weights: LossWeights,
    pub pretrain: Option<PretrainConfig>,
}

impl Default for DiffusionSettings {
    fn default() -> Self {
        let c = DiffusionConfig::small(0);
        Self {
            embedding_dim: c.embedding_dim,
            hidden_dim: c.hidden_dim,
            num_layers: c.num_layers,
            num_heads: c.num_heads,
            max_sequence_length: c.max_sequence_length,
            target_length: c.target_length,
            diffusion_steps: c.diffusion_steps,
            schedule_offset: c.schedule_offset,
            self_conditioning: c.self_conditioning,
            clamp: c.clamp,
            loss_weights: c.loss_weights,
            pretrain: None,
        }
    }
}

impl DiffusionSettings {
    pub fn model_config(&self, vocab_size: usize) -> DiffusionConfig {
        DiffusionConfig {
            vocab_size,
            embedding_dim: self.embedding_dim,
            hidden_dim: self.hidden_dim,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            max_sequence_length: self.max_sequence_length,
            target_length: self.target_length,
            diffusion_steps: self.diffusion_steps,
            schedule_offset: self.schedule_offset,
            self_conditioning: self.self_conditioning,
            clamp: self.clamp,
            loss_weights: self.loss_weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub n_per_label: usize,
    pub decoding: SamplingConfig,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self {
            n_per_label: 500,
            decoding: SamplingConfig::default(),
        }
    }
}

/// Non-private language model used only to score synthetic text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceSettings {
    pub enabled: bool,
    pub model: ArSettings,
    pub training: TrainSettings,
    /// Size of the held-out toy corpus per label (toy data only).
    pub n_per_label: usize,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            model: ArSettings::default(),
            training: TrainSettings {
                expected_lot_size: 32.0,
                epochs: 3,
                learning_rate: 0.3,
                ..TrainSettings::default()
            },
            n_per_label: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub model: ModelKind,
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    #[serde(default)]
    pub delta: DeltaSpec,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Abort instead of warning when an author contributes several records.
    #[serde(default)]
    pub require_unique_authors: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainSettings,
    #[serde(default)]
    pub autoregressive: ArSettings,
    #[serde(default)]
    pub diffusion: DiffusionSettings,
    #[serde(default)]
    pub generation: GenerationSettings,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub reference: ReferenceSettings,
    /// Directory relative paths resolve against; not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config; relative paths inside resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Config(format!(
                "epsilon must be positive or \"inf\", got {}",
                self.epsilon
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.data.path.is_some() == self.data.toy.is_some() {
            return Err(Error::Config(
                "data needs exactly one of `path` or `toy`".into(),
            ));
        }
        if self.data.split.len() != 3 {
            return Err(Error::Config(
                "data.split needs three ratios (train, validation, test); validation drives classifier selection"
                    .into(),
            ));
        }
        if let DeltaSpec::Keyword(k) = &self.delta {
            if !k.eq_ignore_ascii_case("auto") {
                return Err(Error::Config(format!(
                    "delta must be \"auto\" or a number, got {k:?}"
                )));
            }
        }
        if let Some(p) = &self.diffusion.pretrain {
            if p.corpus.path.is_some() == p.corpus.toy.is_some() {
                return Err(Error::Config(
                    "pretraining corpus needs exactly one of `path` or `toy`".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_toy_config() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            model = "autoregressive"
            epsilon = "inf"
            [data.toy]
            labels = ["positive", "negative"]
            vocab_per_label = 12
            shared_vocab = 12
            length_range = [4, 8]
            n_per_label = 100
            author_policy = { kind = "unique" }
            grammar = { kind = "mixed", label_fraction = 0.5 }
            "#,
        )
        .unwrap();
        assert!(cfg.epsilon.is_infinite());
        assert_eq!(cfg.delta.resolve(2000).unwrap(), 5e-5);
        assert_eq!(cfg.seeds, vec![0, 1, 2]);
        assert_eq!(cfg.training, TrainSettings::default());
    }

    #[test]
    fn rejects_bad_delta_and_missing_data() {
        let base = r#"
            model = "diffusion"
            epsilon = 8
            [data]
            path = "x.jsonl"
        "#;
        assert!(ExperimentConfig::from_toml(base).is_ok());
        assert!(ExperimentConfig::from_toml(
            &base.replace("epsilon = 8", "epsilon = 8\ndelta = \"soon\"")
        )
        .is_err());
        assert!(ExperimentConfig::from_toml(&base.replace("path = \"x.jsonl\"", "")).is_err());
        assert!(ExperimentConfig::from_toml(
            &base.replace("epsilon = 8", "epsilon = 8\nbogus = 1")
        )
        .is_err());
    }
}
