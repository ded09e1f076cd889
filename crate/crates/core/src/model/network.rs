use rand::Rng;

use super::config::{Mode, ModelConfig};
use super::Pass;
use crate::kernel::{init_conv, GluBlockParams, NormMode, NormParams, ParamId, ParamStore, Tape, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    SourceEncoder,
    TargetEncoder,
    TargetDecoder,
    TargetReconstructor,
}

impl NetKind {
    pub fn name(self) -> &'static str {
        match self {
            NetKind::SourceEncoder => "src_enc",
            NetKind::TargetEncoder => "trg_enc",
            NetKind::TargetDecoder => "trg_dec",
            NetKind::TargetReconstructor => "trg_rec",
        }
    }

    /// Whether the network takes a speaker index in the given mode.
    pub fn conditioned(self, mode: Mode) -> bool {
        match mode {
            Mode::Pairwise => false,
            Mode::AnyToMany => self != NetKind::SourceEncoder,
            Mode::ManyToMany | Mode::Realtime => true,
        }
    }

    pub fn causal(self, mode: Mode) -> bool {
        match self {
            NetKind::TargetEncoder | NetKind::TargetDecoder => true,
            NetKind::SourceEncoder | NetKind::TargetReconstructor => mode == Mode::Realtime,
        }
    }
}

/// One entry of a layer chain.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Dropout,
    /// Appends the broadcast speaker embedding along the channel axis.
    AppendEmbedding { width: usize },
    Conv { input: usize, output: usize, kernel: usize, causal: bool },
    Norm { channels: usize, mode: NormMode },
    Glu { input: usize, output: usize, kernel: usize, dilation: usize, causal: bool, mode: NormMode },
}

/// Architecture of one network as an ordered chain of layers.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(kind: NetKind, cfg: &ModelConfig) -> Self {
        let conditioned = kind.conditioned(cfg.mode);
        let causal = kind.causal(cfg.mode);
        let emb = if conditioned { cfg.embed_dim } else { 0 };
        let mode = if conditioned {
            cfg.norm
        } else {
            match cfg.norm {
                NormMode::ConditionalBatch => NormMode::Batch,
                NormMode::ConditionalInstance => NormMode::Instance,
                m => m,
            }
        };
        let (input, output) = match kind {
            NetKind::SourceEncoder => (cfg.feat_dim, 2 * cfg.attn_dim),
            NetKind::TargetEncoder => (cfg.feat_dim, cfg.attn_dim),
            NetKind::TargetDecoder | NetKind::TargetReconstructor => (cfg.attn_dim, cfg.feat_dim),
        };
        let kernel = if causal { cfg.kernel_causal } else { cfg.kernel_noncausal };
        let h = cfg.hidden;
        let mut layers = vec![LayerSpec::Dropout];
        let append = |layers: &mut Vec<LayerSpec>| {
            if emb > 0 {
                layers.push(LayerSpec::AppendEmbedding { width: emb });
            }
        };
        append(&mut layers);
        layers.push(LayerSpec::Conv { input: input + emb, output: h, kernel: 1, causal });
        layers.push(LayerSpec::Norm { channels: h, mode });
        for _ in 0..cfg.groups {
            let mut dilation = 1;
            for _ in 0..cfg.blocks_per_group {
                append(&mut layers);
                layers.push(LayerSpec::Glu {
                    input: h + emb,
                    output: h,
                    kernel,
                    dilation,
                    causal,
                    mode,
                });
                dilation *= 3;
            }
        }
        append(&mut layers);
        layers.push(LayerSpec::Conv { input: h + emb, output, kernel: 1, causal });
        NetworkSpec {
            kind,
            in_channels: input,
            layers,
        }
    }

    /// Walks the chain, checking that every layer accepts its predecessor's
    /// width, and returns the output width.
    pub fn out_channels(&self) -> Result<usize> {
        let mut c = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            let mismatch = |want: usize| {
                Error::Shape(format!(
                    "{} layer {i} expects {want} channels, chain provides {c}",
                    self.kind.name()
                ))
            };
            match *l {
                LayerSpec::Dropout => {}
                LayerSpec::AppendEmbedding { width } => c += width,
                LayerSpec::Conv { input, output, .. } | LayerSpec::Glu { input, output, .. } => {
                    if input != c {
                        return Err(mismatch(input));
                    }
                    c = output;
                }
                LayerSpec::Norm { channels, .. } => {
                    if channels != c {
                        return Err(mismatch(channels));
                    }
                }
            }
        }
        Ok(c)
    }

    /// Learnable scalars in the chain for `speakers` speakers.
    pub fn param_count(&self, speakers: usize) -> usize {
        let norm = |channels: usize, mode: NormMode| match mode {
            NormMode::Off => 0,
            m if m.is_conditional() => 2 * channels * speakers,
            _ => 2 * channels,
        };
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Dropout | LayerSpec::AppendEmbedding { .. } => 0,
                LayerSpec::Conv { input, output, kernel, .. } => output * input * kernel + output,
                LayerSpec::Norm { channels, mode } => norm(channels, mode),
                LayerSpec::Glu { input, output, kernel, mode, .. } => {
                    2 * (output * input * kernel + output) + 2 * norm(output, mode)
                }
            })
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Dropout,
    AppendEmbedding,
    Conv { weight: ParamId, bias: ParamId, causal: bool },
    Norm(NormParams),
    Glu(GluBlockParams),
}

/// A materialised network.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub(crate) layers: Vec<Layer>,
    dropout: Real,
}

impl Network {
    pub fn build<R: Rng>(
        spec: NetworkSpec,
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        spec.out_channels()?;
        let prefix = spec.kind.name();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let name = format!("{prefix}.{i}");
            layers.push(match *l {
                LayerSpec::Dropout => Layer::Dropout,
                LayerSpec::AppendEmbedding { .. } => Layer::AppendEmbedding,
                LayerSpec::Conv { input, output, kernel, causal } => {
                    let (weight, bias) = init_conv(store, &name, output, input, kernel, rng);
                    Layer::Conv { weight, bias, causal }
                }
                LayerSpec::Norm { channels, mode } => {
                    Layer::Norm(NormParams::new(store, &name, channels, mode, cfg.n_speakers))
                }
                LayerSpec::Glu { input, output, kernel, dilation, causal, mode } => {
                    Layer::Glu(GluBlockParams::new(
                        store,
                        &name,
                        input,
                        output,
                        kernel,
                        dilation,
                        causal,
                        mode,
                        cfg.n_speakers,
                        rng,
                    )?)
                }
            });
        }
        Ok(Network {
            spec,
            layers,
            dropout: cfg.dropout as Real,
        })
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut NormParams> {
        self.layers.iter_mut().flat_map(|l| {
            let v: Vec<&mut NormParams> = match l {
                Layer::Norm(p) => vec![p],
                Layer::Glu(g) => vec![&mut g.norm1, &mut g.norm2],
                _ => vec![],
            };
            v
        })
    }

    pub fn is_causal(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Conv { causal, .. } => *causal,
            Layer::Glu(g) => g.causal,
            _ => true,
        })
    }

    /// Runs the chain on `x: b×c×n`. `embedding` is the `b×e` speaker
    /// embedding for conditioned networks; `lens` marks valid frames.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        speakers: Option<&[usize]>,
        embedding: Option<Var>,
        pass: &mut Pass,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        let (_, c, n) = tape.value(x).dims3()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {c}",
                self.spec.kind.name(),
                self.spec.in_channels
            )));
        }
        let masked = |tape: &mut Tape, v: Var| match lens {
            Some(l) => tape.mask_time(v, l),
            None => Ok(v),
        };
        let emb = match embedding {
            Some(e) => {
                let e = tape.broadcast_time(e, n)?;
                Some(masked(tape, e)?)
            }
            None => None,
        };
        let mut h = masked(tape, x)?;
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dropout => {
                    if pass.training {
                        tape.dropout(h, self.dropout, &mut pass.rng)?
                    } else {
                        h
                    }
                }
                Layer::AppendEmbedding => {
                    let e = emb.ok_or_else(|| {
                        Error::Mode(format!(
                            "{} needs a speaker embedding",
                            self.spec.kind.name()
                        ))
                    })?;
                    tape.concat_channels(&[h, e])?
                }
                Layer::Conv { weight, bias, causal } => {
                    let w = tape.param(store, *weight)?;
                    let b = tape.param(store, *bias)?;
                    let y = tape.conv1d(h, w, Some(b), 1, *causal)?;
                    masked(tape, y)?
                }
                Layer::Norm(p) => tape.norm_layer(store, p, h, speakers, pass.training, lens)?,
                Layer::Glu(p) => tape.glu_block(store, p, h, speakers, pass.training, lens)?,
            };
        }
        Ok(h)
    }
}
