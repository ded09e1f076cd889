//! The four networks, attention and time warping.

mod config;
mod network;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Mode, ModelConfig};
pub use network::{LayerSpec, NetKind, Network, NetworkSpec};

use crate::kernel::{NormParams, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Real, Result};

/// Per-forward state: training flag and the dropout stream.
#[derive(Clone, Debug)]
pub struct Pass {
    pub training: bool,
    pub(crate) rng: ChaCha8Rng,
}

impl Pass {
    pub fn train(rng: ChaCha8Rng) -> Self {
        Pass { training: true, rng }
    }

    pub fn eval() -> Self {
        Pass {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

/// Frame lengths of the source and target streams of a batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct Lens<'a> {
    pub src: Option<&'a [usize]>,
    pub trg: Option<&'a [usize]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub src_enc: Network,
    pub trg_enc: Network,
    pub trg_dec: Network,
    pub trg_rec: Network,
    /// K × embedding-width table, absent in pairwise mode.
    pub embedding: Option<ParamId>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = if config.mode == Mode::Pairwise {
            None
        } else {
            use rand_distr::{Distribution, Normal};
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let data = (0..config.n_speakers * config.embed_dim)
                .map(|_| 0.01 * normal.sample(&mut rng) as Real)
                .collect();
            let table = Tensor::from_vec(&[config.n_speakers, config.embed_dim], data)?;
            Some(store.add("speaker_embedding", table))
        };
        let mut build = |kind| Network::build(NetworkSpec::new(kind, &config), &config, &mut store, &mut rng);
        let src_enc = build(NetKind::SourceEncoder)?;
        let trg_enc = build(NetKind::TargetEncoder)?;
        let trg_dec = build(NetKind::TargetDecoder)?;
        let trg_rec = build(NetKind::TargetReconstructor)?;
        Ok(Model {
            config,
            store,
            src_enc,
            trg_enc,
            trg_dec,
            trg_rec,
            embedding,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Scalar count predicted from the layer chains plus the embedding table.
    pub fn param_count(&self) -> usize {
        let k = self.config.n_speakers;
        let emb = self.embedding.map_or(0, |_| k * self.config.embed_dim);
        emb + [&self.src_enc, &self.trg_enc, &self.trg_dec, &self.trg_rec]
            .iter()
            .map(|n| n.spec.param_count(k))
            .sum::<usize>()
    }

    fn network(&mut self, kind: NetKind) -> &mut Network {
        match kind {
            NetKind::SourceEncoder => &mut self.src_enc,
            NetKind::TargetEncoder => &mut self.trg_enc,
            NetKind::TargetDecoder => &mut self.trg_dec,
            NetKind::TargetReconstructor => &mut self.trg_rec,
        }
    }

    fn run(
        &mut self,
        kind: NetKind,
        tape: &mut Tape,
        x: Var,
        speakers: Option<&[usize]>,
        pass: &mut Pass,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        let mode = self.config.mode;
        let conditioned = kind.conditioned(mode);
        let embedding = match (conditioned, speakers) {
            (true, None) => {
                return Err(Error::Mode(format!(
                    "{} needs a speaker index in {mode} mode",
                    kind.name()
                )))
            }
            (false, Some(_)) => {
                return Err(Error::Mode(format!(
                    "{} takes no speaker index in {mode} mode",
                    kind.name()
                )))
            }
            (true, Some(k)) => {
                let (b, _, _) = tape.value(x).dims3()?;
                if k.len() != b {
                    return Err(Error::Shape(format!(
                        "{} speaker indices for a batch of {b}",
                        k.len()
                    )));
                }
                let id = self.embedding.expect("conditioned modes own an embedding table");
                let table = tape.param(&self.store, id)?;
                Some(tape.gather_rows(table, k)?)
            }
            (false, None) => None,
        };
        let speakers = if conditioned { speakers } else { None };
        let store = &self.store;
        let net = match kind {
            NetKind::SourceEncoder => &mut self.src_enc,
            NetKind::TargetEncoder => &mut self.trg_enc,
            NetKind::TargetDecoder => &mut self.trg_dec,
            NetKind::TargetReconstructor => &mut self.trg_rec,
        };
        net.forward(tape, store, x, speakers, embedding, pass, lens)
    }

    /// Source encoder: returns keys and values, each `b × D′ × n`.
    pub fn src_encode(
        &mut self,
        tape: &mut Tape,
        x: Var,
        speakers: Option<&[usize]>,
        pass: &mut Pass,
        lens: Option<&[usize]>,
    ) -> Result<(Var, Var)> {
        let kv = self.run(NetKind::SourceEncoder, tape, x, speakers, pass, lens)?;
        let d = self.config.attn_dim;
        Ok((tape.slice_channels(kv, 0, d)?, tape.slice_channels(kv, d, d)?))
    }

    pub fn trg_encode(
        &mut self,
        tape: &mut Tape,
        y: Var,
        speakers: Option<&[usize]>,
        pass: &mut Pass,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        self.run(NetKind::TargetEncoder, tape, y, speakers, pass, lens)
    }

    pub fn trg_decode(
        &mut self,
        tape: &mut Tape,
        r: Var,
        speakers: Option<&[usize]>,
        pass: &mut Pass,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        self.run(NetKind::TargetDecoder, tape, r, speakers, pass, lens)
    }

    pub fn trg_reconstruct(
        &mut self,
        tape: &mut Tape,
        r: Var,
        speakers: Option<&[usize]>,
        pass: &mut Pass,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        self.run(NetKind::TargetReconstructor, tape, r, speakers, pass, lens)
    }

    /// Passes `speakers` through when `kind` is conditioned in this mode.
    pub fn condition<'a>(&self, kind: NetKind, speakers: &'a [usize]) -> Option<&'a [usize]> {
        kind.conditioned(self.config.mode).then_some(speakers)
    }

    /// Every normalisation layer, in a fixed order.
    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut NormParams> {
        [&mut self.src_enc, &mut self.trg_enc, &mut self.trg_dec, &mut self.trg_rec]
            .into_iter()
            .flat_map(|n| n.norms_mut())
    }

    pub fn is_causal(&mut self, kind: NetKind) -> bool {
        self.network(kind).is_causal()
    }
}

/// Column softmax of `KᵀQ/√D′`, giving a `b × N × M` attention matrix.
pub fn attend(tape: &mut Tape, keys: Var, queries: Var, lens: Lens<'_>) -> Result<Var> {
    let (bk, dk, _) = tape.value(keys).dims3()?;
    let (bq, dq, _) = tape.value(queries).dims3()?;
    if bk != bq || dk != dq {
        return Err(Error::Shape(format!(
            "keys {bk}×{dk} and queries {bq}×{dq} disagree"
        )));
    }
    let logits = tape.bmm(keys, queries, true, false)?;
    let logits = tape.scale(logits, 1.0 / (dk as Real).sqrt())?;
    let mask = match (lens.src, lens.trg) {
        (Some(s), Some(t)) => Some((s, t)),
        (None, None) => None,
        _ => {
            return Err(Error::InvalidArgument(
                "attention masking needs both source and target lengths".into(),
            ))
        }
    };
    tape.softmax_columns(logits, mask)
}

/// `R = VA`: each output column is the attention-weighted mix of values.
pub fn warp(tape: &mut Tape, values: Var, attention: Var) -> Result<Var> {
    let (bv, _, n) = tape.value(values).dims3()?;
    let (ba, na, _) = tape.value(attention).dims3()?;
    if bv != ba || n != na {
        return Err(Error::Shape(format!(
            "values of length {n} cannot be warped by a {na}-row attention matrix"
        )));
    }
    tape.bmm(values, attention, false, false)
}
