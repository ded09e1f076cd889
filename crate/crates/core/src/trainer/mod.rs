//! Mini-batching, optimisation, the training loop and checkpoints.

mod adam;
mod batch;
mod checkpoint;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use batch::{make_batch, sample_items, Batch, BatchItem, ParallelSet};
pub use checkpoint::{config_hash, hex, Checkpoint, SavedParam};

use crate::kernel::{Tape, Var};
use crate::losses::{total_loss, LossBreakdown, LossInputs, LossWeights};
use crate::model::{attend, warp, Lens, Model, NetKind, Pass};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Filled from the `[losses]` section of a run configuration.
    #[serde(skip)]
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            iterations: 2000,
            lr: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            checkpoint_every: 500,
            log_every: 100,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("Adam decays must lie in [0, 1) and eps be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::InvalidArgument("clip norm must be positive".into()));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Tape nodes of one teacher-forced pass.
pub struct BatchForward {
    pub loss: Var,
    pub attention: Var,
    pub decoded: Var,
    pub reconstructed: Var,
    pub breakdown: LossBreakdown,
}

/// Runs all four networks on a batch with teacher forcing and builds the
/// weighted objective.
pub fn batch_forward(
    model: &mut Model,
    tape: &mut Tape,
    batch: &Batch,
    pass: &mut Pass,
    weights: &LossWeights,
    channel_weights: &[Real],
) -> Result<BatchForward> {
    let src = tape.input(batch.src.clone())?;
    let trg = tape.input(batch.trg_in.clone())?;
    let sk = model.condition(NetKind::SourceEncoder, &batch.src_speakers);
    let tk = model.condition(NetKind::TargetEncoder, &batch.trg_speakers);
    let (keys, values) = model.src_encode(tape, src, sk, pass, Some(&batch.src_lens))?;
    let queries = model.trg_encode(tape, trg, tk, pass, Some(&batch.trg_lens))?;
    let lens = Lens {
        src: Some(&batch.src_lens),
        trg: Some(&batch.trg_lens),
    };
    let attention = attend(tape, keys, queries, lens)?;
    let r = warp(tape, values, attention)?;
    let r = tape.mask_time(r, &batch.trg_lens)?;
    let decoded = model.trg_decode(tape, r, tk, pass, Some(&batch.trg_lens))?;
    let reconstructed = model.trg_reconstruct(tape, r, tk, pass, Some(&batch.trg_lens))?;
    let item_weights: Vec<Real> = if model.mode() == crate::model::Mode::Pairwise {
        vec![1.0; batch.size()]
    } else {
        batch
            .src_speakers
            .iter()
            .zip(&batch.trg_speakers)
            .map(|(a, b)| weights.item_weight(a == b))
            .collect()
    };
    let inputs = LossInputs {
        attention,
        decoded,
        reconstructed,
        target: &batch.target,
        src_lens: &batch.src_lens,
        trg_lens: &batch.trg_lens,
        item_weights: &item_weights,
        channel_weights,
    };
    let (loss, breakdown) = total_loss(tape, &inputs, weights)?;
    Ok(BatchForward {
        loss,
        attention,
        decoded,
        reconstructed,
        breakdown,
    })
}

/// Per-iteration log entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: u64,
    pub loss: LossBreakdown,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub iteration: u64,
    pub history: Vec<StepRecord>,
    /// Speaker pair used in pairwise mode.
    pub pair: (usize, usize),
    pub channel_weights: Vec<Real>,
    pub config_hash: [u8; 32],
}

impl Trainer {
    pub fn new(
        model: Model,
        config: TrainConfig,
        channel_weights: Vec<Real>,
        config_hash: [u8; 32],
    ) -> Result<Self> {
        config.validate()?;
        if channel_weights.len() != model.config.feat_dim {
            return Err(Error::Shape(format!(
                "{} channel weights for {} model channels",
                channel_weights.len(),
                model.config.feat_dim
            )));
        }
        let adam = Adam::new(config.adam(), &model.store);
        Ok(Trainer {
            model,
            config,
            adam,
            iteration: 0,
            history: Vec::new(),
            pair: (0, 1),
            channel_weights,
            config_hash,
        })
    }

    /// Generator for iteration `it`: one stream per iteration so resuming
    /// needs no saved generator state.
    fn rng(&self, it: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(it);
        rng
    }

    /// One optimisation step. Parameters are untouched when it fails.
    pub fn step(&mut self, set: &ParallelSet) -> Result<StepRecord> {
        let it = self.iteration;
        let mut rng = self.rng(it);
        let items = sample_items(set, self.model.mode(), self.pair, self.config.batch_size, &mut rng)?;
        let batch = make_batch(set, &items)?;
        let mut tape = Tape::new();
        let mut pass = Pass::train(rng);
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { iteration: it as usize },
            e => e,
        };
        // running statistics are only committed once the step succeeds
        let saved: Vec<_> = self.model.norms_mut().map(|n| n.running.clone()).collect();
        let restore = |model: &mut Model| {
            for (n, s) in model.norms_mut().zip(&saved) {
                n.running = s.clone();
            }
        };
        let out = batch_forward(
            &mut self.model,
            &mut tape,
            &batch,
            &mut pass,
            &self.config.weights,
            &self.channel_weights,
        );
        let out = match out {
            Ok(o) => o,
            Err(e) => {
                restore(&mut self.model);
                return Err(diverged(e));
            }
        };
        let result = (|| {
            let grads = tape.backward(out.loss)?;
            self.model.store.zero_grad();
            grads.accumulate_into(&mut self.model.store)?;
            let norm = clip_grad_norm(&mut self.model.store, self.config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient norm".into()));
            }
            self.adam.apply(&mut self.model.store)?;
            Ok(norm)
        })();
        self.model.store.zero_grad();
        let grad_norm = match result {
            Ok(n) => n,
            Err(e) => {
                restore(&mut self.model);
                return Err(diverged(e));
            }
        };
        let record = StepRecord {
            iteration: it,
            loss: out.breakdown,
            grad_norm,
        };
        self.iteration += 1;
        self.history.push(record);
        Ok(record)
    }

    /// Trains until `config.iterations`, checkpointing into `dir` when given.
    /// On divergence the last good state is saved before the error returns.
    pub fn train(&mut self, set: &ParallelSet, dir: Option<&Path>) -> Result<()> {
        while self.iteration < self.config.iterations {
            match self.step(set) {
                Ok(rec) => {
                    if self.config.log_every > 0 && rec.iteration % self.config.log_every == 0 {
                        log::info!(
                            "iter {} loss {:.5} dec {:.5} rec {:.5} dal {:.6} oal {:.6}",
                            rec.iteration,
                            rec.loss.total,
                            rec.loss.dec,
                            rec.loss.rec,
                            rec.loss.dal,
                            rec.loss.oal
                        );
                    }
                }
                Err(e @ Error::Diverged { .. }) => {
                    if let Some(d) = dir {
                        self.checkpoint().save(&d.join("last_good.ckpt"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let Some(d) = dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration % every == 0 {
                    self.checkpoint().save(&d.join(format!("iter_{:06}.ckpt", self.iteration)))?;
                }
            }
        }
        if let Some(d) = dir {
            self.checkpoint().save(&d.join("final.ckpt"))?;
        }
        Ok(())
    }

    pub fn checkpoint(&mut self) -> Checkpoint {
        let params = self
            .model
            .store
            .iter()
            .zip(self.adam.first.iter().zip(&self.adam.second))
            .map(|((_, p), (m, v))| SavedParam {
                name: p.name.clone(),
                value: p.value.clone(),
                first: m.clone(),
                second: v.clone(),
            })
            .collect();
        Checkpoint {
            config_hash: self.config_hash,
            iteration: self.iteration,
            adam_step: self.adam.step,
            params,
            running: self.model.norms_mut().map(|n| n.running.clone()).collect(),
        }
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        restore_model(&mut self.model, ck)?;
        self.adam.step = ck.adam_step;
        self.adam.first = ck.params.iter().map(|p| p.first.clone()).collect();
        self.adam.second = ck.params.iter().map(|p| p.second.clone()).collect();
        self.iteration = ck.iteration;
        self.history.retain(|r| r.iteration < ck.iteration);
        Ok(())
    }
}

/// Loads parameters and running statistics into a model of matching layout.
pub fn restore_model(model: &mut Model, ck: &Checkpoint) -> Result<()> {
    if ck.params.len() != model.store.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} parameters, model has {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    for (p, saved) in model.store.iter_mut().zip(&ck.params) {
        if p.name != saved.name || p.value.shape() != saved.value.shape() {
            return Err(Error::Shape(format!(
                "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                saved.name,
                saved.value.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    let norms = model.norms_mut().count();
    if norms != ck.running.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} norm layers, model has {norms}",
            ck.running.len()
        )));
    }
    for (p, saved) in model.store.iter_mut().zip(&ck.params) {
        p.value = saved.value.clone();
    }
    for (n, r) in model.norms_mut().zip(&ck.running) {
        n.running = r.clone();
    }
    Ok(())
}
