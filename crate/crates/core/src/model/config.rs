use serde::{Deserialize, Serialize};

use crate::kernel::NormMode;
use crate::{Error, Result};

/// Which of the conversion set-ups the networks are built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One source and one target speaker, no speaker inputs.
    Pairwise,
    /// Every network is conditioned on a speaker index.
    #[serde(rename = "many2many")]
    ManyToMany,
    /// Like many-to-many, but the source encoder never sees the source speaker.
    #[serde(rename = "any2many")]
    AnyToMany,
    /// Many-to-many with a causal source encoder and reconstructor.
    Realtime,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pairwise" => Ok(Mode::Pairwise),
            "many2many" => Ok(Mode::ManyToMany),
            "any2many" => Ok(Mode::AnyToMany),
            "realtime" => Ok(Mode::Realtime),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Pairwise => "pairwise",
            Mode::ManyToMany => "many2many",
            Mode::AnyToMany => "any2many",
            Mode::Realtime => "realtime",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    /// Channels of the (stacked) feature frames the model reads and writes.
    pub feat_dim: usize,
    /// Width of the hidden layers.
    pub hidden: usize,
    /// Width D′ of keys, values and queries.
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub n_speakers: usize,
    pub norm: NormMode,
    pub groups: usize,
    pub blocks_per_group: usize,
    pub kernel_causal: usize,
    pub kernel_noncausal: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(Mode::Pairwise, 93, 2)
    }
}

impl ModelConfig {
    /// Reduced-width defaults: 64 channels for pairwise, 96 otherwise.
    pub fn desk(mode: Mode, feat_dim: usize, n_speakers: usize) -> Self {
        let (hidden, norm) = match mode {
            Mode::Pairwise => (64, NormMode::Batch),
            _ => (96, NormMode::ConditionalBatch),
        };
        ModelConfig {
            mode,
            feat_dim,
            hidden,
            attn_dim: hidden,
            embed_dim: 32,
            n_speakers,
            norm,
            groups: 3,
            blocks_per_group: 4,
            kernel_causal: 3,
            kernel_noncausal: 5,
            dropout: 0.1,
        }
    }

    /// Full-width layout: 256 channels pairwise, 512 otherwise.
    pub fn full(mode: Mode, feat_dim: usize, n_speakers: usize) -> Self {
        let mut c = Self::desk(mode, feat_dim, n_speakers);
        c.hidden = if mode == Mode::Pairwise { 256 } else { 512 };
        c.attn_dim = c.hidden;
        c
    }

    pub fn with_width(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self.attn_dim = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.feat_dim == 0 || self.hidden == 0 || self.attn_dim == 0 {
            return Err(Error::InvalidArgument("model widths must be positive".into()));
        }
        if self.kernel_noncausal % 2 == 0 {
            return Err(Error::InvalidArgument(
                "non-causal kernel size must be odd".into(),
            ));
        }
        if self.mode != Mode::Pairwise && self.n_speakers == 0 {
            return Err(Error::InvalidArgument(
                "speaker-conditioned modes need at least one speaker".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}
