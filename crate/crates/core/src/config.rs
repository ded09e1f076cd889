//! The run configuration: a TOML file with one section per concern and
//! `CONVS2S_<SECTION>_<KEY>` environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::features::FeatureLayout;
use crate::inference::{ConvertOptions, ForwardAttentionConfig, OutputSource};
use crate::kernel::NormMode;
use crate::losses::LossWeights;
use crate::model::{Mode, ModelConfig};
use crate::trainer::{config_hash, TrainConfig};
use crate::{Error, Result};

pub const ENV_PREFIX: &str = "CONVS2S_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub n_mcc: usize,
    pub reduction: usize,
    pub frame_period_ms: f64,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            n_mcc: 28,
            reduction: 3,
            frame_period_ms: 8.0,
        }
    }
}

impl FeatureSection {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout { n_mcc: self.n_mcc }
    }

    /// Channels of one stacked model frame.
    pub fn model_dim(&self) -> usize {
        self.layout().dim() * self.reduction
    }
}

/// Model widths; feature width and speaker count come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub mode: Mode,
    pub hidden: usize,
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub norm: NormMode,
    pub groups: usize,
    pub blocks_per_group: usize,
    pub kernel_causal: usize,
    pub kernel_noncausal: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::for_mode(Mode::Pairwise)
    }
}

impl ModelSection {
    pub fn for_mode(mode: Mode) -> Self {
        let c = ModelConfig::desk(mode, 1, 1);
        ModelSection {
            mode,
            hidden: c.hidden,
            attn_dim: c.attn_dim,
            embed_dim: c.embed_dim,
            norm: c.norm,
            groups: c.groups,
            blocks_per_group: c.blocks_per_group,
            kernel_causal: c.kernel_causal,
            kernel_noncausal: c.kernel_noncausal,
            dropout: c.dropout,
            seed: 0,
        }
    }

    pub fn resolve(&self, feat_dim: usize, n_speakers: usize) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            feat_dim,
            hidden: self.hidden,
            attn_dim: self.attn_dim,
            embed_dim: self.embed_dim,
            n_speakers,
            norm: self.norm,
            groups: self.groups,
            blocks_per_group: self.blocks_per_group,
            kernel_causal: self.kernel_causal,
            kernel_noncausal: self.kernel_noncausal,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceSection {
    pub forward_attention: bool,
    pub back_ms: f64,
    pub ahead_ms: f64,
    pub output: OutputSource,
    /// 0 picks the length-dependent default.
    pub max_steps: usize,
    pub stop_patience: usize,
    pub moment_match: bool,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            forward_attention: false,
            back_ms: 160.0,
            ahead_ms: 320.0,
            output: OutputSource::Reconstructor,
            max_steps: 0,
            stop_patience: 5,
            moment_match: true,
        }
    }
}

impl InferenceSection {
    pub fn options(&self, reduced_period_ms: f64) -> Result<ConvertOptions> {
        Ok(ConvertOptions {
            max_steps: (self.max_steps > 0).then_some(self.max_steps),
            forward: if self.forward_attention {
                Some(ForwardAttentionConfig::from_ms(self.back_ms, self.ahead_ms, reduced_period_ms)?)
            } else {
                None
            },
            output: self.output,
            stop_patience: self.stop_patience,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    pub manifest: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

/// Speakers of a pairwise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairSection {
    pub source: String,
    pub target: String,
}

impl Default for PairSection {
    fn default() -> Self {
        PairSection {
            source: "spk0".into(),
            target: "spk1".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: FeatureSection,
    pub model: ModelSection,
    pub losses: LossWeights,
    pub train: TrainConfig,
    pub inference: InferenceSection,
    pub pair: PairSection,
    pub split: SplitSection,
    pub paths: PathSection,
}

/// The parts of a run that determine trained parameters. The iteration
/// count is left out so that a run can be resumed and extended.
#[derive(Serialize)]
struct TrainingIdentity<'a> {
    features: &'a FeatureSection,
    model: &'a ModelSection,
    losses: &'a LossWeights,
    optimizer: (usize, f64, f64, f64, f64, f64, u64),
    pair: &'a PairSection,
    split: &'a SplitSection,
}

impl RunConfig {
    pub fn for_mode(mode: Mode) -> Self {
        RunConfig {
            model: ModelSection::for_mode(mode),
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::format(path, m),
            e => e,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// Applies `CONVS2S_<SECTION>_<KEY>=value` pairs. Values are read as TOML
    /// literals and fall back to plain strings.
    pub fn with_overrides<I>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let table = value.as_table_mut().expect("config serialises to a table");
        let mut touched = false;
        for (name, raw) in vars {
            let Some(rest) = name.strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let (section, key) = rest
                .split_once('_')
                .ok_or_else(|| Error::InvalidArgument(format!("override {name} names no key")))?;
            let sec = table
                .get_mut(section)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::InvalidArgument(format!("override {name}: no section {section}")))?;
            if !sec.contains_key(key) {
                return Err(Error::InvalidArgument(format!("override {name}: no key {key} in [{section}]")));
            }
            let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw.clone()));
            sec.insert(key.to_string(), parsed);
            touched = true;
        }
        if !touched {
            return Ok(self.clone());
        }
        let c: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidArgument(format!("override: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn with_env(&self) -> Result<Self> {
        self.with_overrides(std::env::vars())
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.reduction == 0 || self.features.n_mcc == 0 || !(self.features.frame_period_ms > 0.0) {
            return Err(Error::InvalidArgument("feature settings must be positive".into()));
        }
        self.losses.validate()?;
        self.train_config().validate()?;
        self.model.resolve(self.features.model_dim(), 2).validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: self.losses.clone(),
            ..self.train.clone()
        }
    }

    /// Hash of everything that shapes trained parameters.
    pub fn training_hash(&self) -> [u8; 32] {
        let t = &self.train;
        let id = TrainingIdentity {
            features: &self.features,
            model: &self.model,
            losses: &self.losses,
            optimizer: (t.batch_size, t.lr, t.beta1, t.beta2, t.eps, t.clip_norm, t.seed),
            pair: &self.pair,
            split: &self.split,
        };
        config_hash(&toml::to_string(&id).expect("identity serialises"))
    }

    pub fn reduced_period_ms(&self) -> f64 {
        self.features.frame_period_ms * self.features.reduction as f64
    }
}
