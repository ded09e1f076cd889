//! Batch / instance normalisation with optional speaker-conditioned affine
//! parameters.

use serde::{Deserialize, Serialize};

use super::tape::{Op, Tape, Var};
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Real, Result};

/// Lower bound on every standard deviation used as a denominator.
pub const NORM_EPS: Real = 1e-5;
/// Weight of the newest batch in the running-statistics average.
pub const RUNNING_MOMENTUM: Real = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    Batch,
    ConditionalBatch,
    Instance,
    ConditionalInstance,
    /// No normalisation; the layer is the identity.
    Off,
}

impl NormMode {
    pub fn is_conditional(self) -> bool {
        matches!(self, NormMode::ConditionalBatch | NormMode::ConditionalInstance)
    }

    fn per_instance(self) -> bool {
        matches!(self, NormMode::Instance | NormMode::ConditionalInstance)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Real>,
    pub var: Vec<Real>,
}

/// Parameters of one normalisation layer. For conditional modes `gamma` and
/// `beta` hold one row per speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub mode: NormMode,
    /// `None` until statistics have been seeded or observed.
    pub running: Option<RunningStats>,
}

impl NormParams {
    /// Registers γ = 1, β = 0 (one row per speaker when conditional) and seeds
    /// the running statistics at mean 0, variance 1.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        mode: NormMode,
        speakers: usize,
    ) -> Self {
        let rows = if mode.is_conditional() { speakers.max(1) } else { 1 };
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[rows, channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[rows, channels]));
        NormParams {
            gamma,
            beta,
            channels,
            mode,
            running: Some(RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            }),
        }
    }
}

pub(crate) struct NormSaved {
    pub x: Var,
    pub gamma: Var,
    pub beta: Var,
    rows: Vec<usize>,
    lens: Vec<usize>,
    per_instance: bool,
    from_input: bool,
    xhat: Tensor,
    inv_std: Vec<Real>,
    /// Groups whose deviation hit the floor; their scale is a constant.
    floored: Vec<bool>,
}

/// Where the normalising statistics come from.
pub enum Statistics<'a> {
    /// Mean and variance of the input itself (training mode).
    FromInput,
    /// Fixed per-channel statistics (inference with running averages).
    Fixed { mean: &'a [Real], var: &'a [Real] },
}

impl Tape {
    /// Normalises `x: b×c×n` per channel (or per item and channel when
    /// `per_instance`), then applies `gamma[rows[b]]`, `beta[rows[b]]`.
    ///
    /// Time steps at or beyond `lens[b]` are excluded from the statistics and
    /// produce zeros. Returns the batch mean and (biased) variance when they
    /// were computed from the input in batch mode.
    #[allow(clippy::too_many_arguments)]
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        rows: &[usize],
        per_instance: bool,
        stats: Statistics<'_>,
        lens: Option<&[usize]>,
    ) -> Result<(Var, Option<RunningStats>)> {
        let (b, c, n) = self.value(x).dims3()?;
        let gshape = self.value(gamma).shape().to_vec();
        if gshape.len() != 2 || gshape[1] != c || self.value(beta).shape() != gshape.as_slice() {
            return Err(Error::Shape(format!(
                "norm parameters {gshape:?} for {c} channels"
            )));
        }
        if rows.len() != b || rows.iter().any(|&r| r >= gshape[0]) {
            return Err(Error::UnknownSpeaker(format!(
                "norm rows {rows:?} for table of {}",
                gshape[0]
            )));
        }
        let lens: Vec<usize> = match lens {
            Some(l) if l.len() == b => l.iter().map(|&v| v.min(n)).collect(),
            Some(_) => return Err(Error::Shape("norm: length count".into())),
            None => vec![n; b],
        };
        let xd = self.value(x).data();
        let groups = if per_instance { b * c } else { c };
        let mut mean = vec![0.0; groups];
        let mut var = vec![0.0; groups];
        let from_input = matches!(stats, Statistics::FromInput) || per_instance;
        if from_input {
            let mut count = vec![0usize; groups];
            for bi in 0..b {
                for ch in 0..c {
                    let gi = if per_instance { bi * c + ch } else { ch };
                    let row = &xd[(bi * c + ch) * n..(bi * c + ch) * n + lens[bi]];
                    mean[gi] += row.iter().sum::<Real>();
                    count[gi] += row.len();
                }
            }
            if count.iter().any(|&k| k == 0) {
                return Err(Error::Shape("norm: no valid frames".into()));
            }
            for (m, &k) in mean.iter_mut().zip(&count) {
                *m /= k as Real;
            }
            for bi in 0..b {
                for ch in 0..c {
                    let gi = if per_instance { bi * c + ch } else { ch };
                    let row = &xd[(bi * c + ch) * n..(bi * c + ch) * n + lens[bi]];
                    var[gi] += row.iter().map(|v| (v - mean[gi]).powi(2)).sum::<Real>();
                }
            }
            for (v, &k) in var.iter_mut().zip(&count) {
                *v /= k as Real;
            }
        } else if let Statistics::Fixed { mean: m, var: v } = stats {
            if m.len() != c || v.len() != c {
                return Err(Error::Shape("norm: running statistics length".into()));
            }
            if v.iter().any(|&s| s <= 0.0) {
                return Err(Error::InvalidArgument("running variance must be positive".into()));
            }
            mean.copy_from_slice(m);
            var.copy_from_slice(v);
        }
        let floored: Vec<bool> = var.iter().map(|v| v.sqrt() < NORM_EPS).collect();
        let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / v.sqrt().max(NORM_EPS)).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = Tensor::zeros(&[b, c, n]);
        let mut out = Tensor::zeros(&[b, c, n]);
        for bi in 0..b {
            for ch in 0..c {
                let gi = if per_instance { bi * c + ch } else { ch };
                let (gm, bt) = (gd[rows[bi] * c + ch], bd[rows[bi] * c + ch]);
                let base = (bi * c + ch) * n;
                for t in 0..lens[bi] {
                    let h = (xd[base + t] - mean[gi]) * inv_std[gi];
                    xhat.data_mut()[base + t] = h;
                    out.data_mut()[base + t] = gm * h + bt;
                }
            }
        }
        let batch_stats = (from_input && !per_instance).then(|| RunningStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let saved = NormSaved {
            x,
            gamma,
            beta,
            rows: rows.to_vec(),
            lens,
            per_instance,
            from_input,
            xhat,
            inv_std,
            floored,
        };
        let y = self.push(out, Op::Norm(Box::new(saved)), rg)?;
        Ok((y, batch_stats))
    }

    /// Applies a normalisation layer. `speakers` selects the affine row per
    /// batch item and is required exactly when the mode is conditional. In
    /// training mode batch statistics are used and folded into the running
    /// averages; otherwise the running averages are used.
    pub fn norm_layer(
        &mut self,
        store: &ParamStore,
        p: &mut NormParams,
        x: Var,
        speakers: Option<&[usize]>,
        training: bool,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        if p.mode == NormMode::Off {
            return Ok(x);
        }
        let (b, c, _) = self.value(x).dims3()?;
        if c != p.channels {
            return Err(Error::Shape(format!(
                "norm layer for {} channels got {c}",
                p.channels
            )));
        }
        let rows: Vec<usize> = match (p.mode.is_conditional(), speakers) {
            (true, Some(s)) => s.to_vec(),
            (true, None) => {
                return Err(Error::Mode(
                    "conditional normalisation needs a speaker index".into(),
                ))
            }
            (false, _) => vec![0; b],
        };
        let gamma = self.param(store, p.gamma)?;
        let beta = self.param(store, p.beta)?;
        let per_instance = p.mode.per_instance();
        if training || per_instance {
            let (y, stats) =
                self.normalize(x, gamma, beta, &rows, per_instance, Statistics::FromInput, lens)?;
            if training {
                if let Some(batch) = stats {
                    let running = p.running.get_or_insert_with(|| RunningStats {
                        mean: vec![0.0; c],
                        var: vec![1.0; c],
                    });
                    for ch in 0..c {
                        running.mean[ch] = (1.0 - RUNNING_MOMENTUM) * running.mean[ch]
                            + RUNNING_MOMENTUM * batch.mean[ch];
                        running.var[ch] = (1.0 - RUNNING_MOMENTUM) * running.var[ch]
                            + RUNNING_MOMENTUM * batch.var[ch];
                    }
                }
            }
            Ok(y)
        } else {
            let running = p.running.as_ref().ok_or_else(|| {
                Error::Mode("normalisation in eval mode before any statistics".into())
            })?;
            let (mean, var) = (running.mean.clone(), running.var.clone());
            let (y, _) = self.normalize(
                x,
                gamma,
                beta,
                &rows,
                false,
                Statistics::Fixed {
                    mean: &mean,
                    var: &var,
                },
                lens,
            )?;
            Ok(y)
        }
    }
}

pub(crate) fn norm_backward(
    s: &NormSaved,
    gamma: &Tensor,
    g: &Tensor,
    dx: Option<&mut Tensor>,
    mut dgamma: Option<&mut Tensor>,
    mut dbeta: Option<&mut Tensor>,
) {
    let (b, c, n) = (s.xhat.shape()[0], s.xhat.shape()[1], s.xhat.shape()[2]);
    let gd = g.data();
    let xh = s.xhat.data();
    let gm = gamma.data();
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * n;
            let pi = s.rows[bi] * c + ch;
            let l = s.lens[bi];
            if let Some(db) = dbeta.as_deref_mut() {
                db.data_mut()[pi] += gd[base..base + l].iter().sum::<Real>();
            }
            if let Some(dg) = dgamma.as_deref_mut() {
                dg.data_mut()[pi] += (0..l).map(|t| gd[base + t] * xh[base + t]).sum::<Real>();
            }
        }
    }
    let Some(dx) = dx else { return };
    let groups = if s.per_instance { b * c } else { c };
    let mut mean_d = vec![0.0; groups];
    let mut mean_dx = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    if s.from_input {
        for bi in 0..b {
            for ch in 0..c {
                let gi = if s.per_instance { bi * c + ch } else { ch };
                let base = (bi * c + ch) * n;
                let gmv = gm[s.rows[bi] * c + ch];
                for t in 0..s.lens[bi] {
                    let d = gd[base + t] * gmv;
                    mean_d[gi] += d;
                    mean_dx[gi] += d * xh[base + t];
                }
                count[gi] += s.lens[bi];
            }
        }
        for gi in 0..groups {
            mean_d[gi] /= count[gi] as Real;
            mean_dx[gi] /= count[gi] as Real;
        }
    }
    let dxd = dx.data_mut();
    for bi in 0..b {
        for ch in 0..c {
            let gi = if s.per_instance { bi * c + ch } else { ch };
            let base = (bi * c + ch) * n;
            let gmv = gm[s.rows[bi] * c + ch];
            for t in 0..s.lens[bi] {
                let d = gd[base + t] * gmv;
                dxd[base + t] += if s.from_input && s.floored[gi] {
                    s.inv_std[gi] * (d - mean_d[gi])
                } else if s.from_input {
                    s.inv_std[gi] * (d - mean_d[gi] - xh[base + t] * mean_dx[gi])
                } else {
                    s.inv_std[gi] * d
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardised_input_passes_through() {
        // each channel: values ±1 → mean 0, population std 1
        let data: Vec<Real> = (0..2 * 3 * 4)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        let x = Tensor::from_vec(&[2, 3, 4], data).unwrap();
        let mut store = ParamStore::new();
        let mut p = NormParams::new(&mut store, "bn", 3, NormMode::Batch, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let y = tape.norm_layer(&store, &mut p, xv, None, true, None).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn conditional_shift_per_speaker() {
        let mut store = ParamStore::new();
        let mut p = NormParams::new(&mut store, "cbn", 2, NormMode::ConditionalBatch, 2);
        store.get_mut(p.beta).value.data_mut()[2..4].fill(5.0);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[2, 2, 3])).unwrap();
        let y = tape
            .norm_layer(&store, &mut p, xv, Some(&[0, 1]), true, None)
            .unwrap();
        let yv = tape.value(y).data();
        for i in 0..6 {
            assert_eq!(yv[6 + i] - yv[i], 5.0);
        }
    }

    #[test]
    fn conditional_requires_speaker() {
        let mut store = ParamStore::new();
        let mut p = NormParams::new(&mut store, "cbn", 2, NormMode::ConditionalBatch, 2);
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 2, 3])).unwrap();
        assert!(matches!(
            tape.norm_layer(&store, &mut p, xv, None, true, None),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn eval_without_statistics_is_an_error() {
        let mut store = ParamStore::new();
        let mut p = NormParams::new(&mut store, "bn", 2, NormMode::Batch, 1);
        p.running = None;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(&[1, 2, 3])).unwrap();
        assert!(tape.norm_layer(&store, &mut p, xv, None, false, None).is_err());
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec(
            &[2, 1, 5],
            (0..10).map(|_| rng.random_range(2.0..4.0)).collect(),
        )
        .unwrap();
        let m: Real = x.data().iter().sum::<Real>() / 10.0;
        let mut store = ParamStore::new();
        let mut p = NormParams::new(&mut store, "bn", 1, NormMode::Batch, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        tape.norm_layer(&store, &mut p, xv, None, true, None).unwrap();
        let r = p.running.unwrap();
        assert!((r.mean[0] - 0.1 * m).abs() < 1e-12);
    }

    #[test]
    fn padded_frames_are_ignored() {
        let full = Tensor::from_vec(&[1, 1, 5], vec![1.0, 2.0, 3.0, 100.0, -50.0]).unwrap();
        let mut store = ParamStore::new();
        let mut p = NormParams::new(&mut store, "bn", 1, NormMode::Batch, 1);
        let mut tape = Tape::new();
        let xv = tape.constant(full).unwrap();
        let y = tape
            .norm_layer(&store, &mut p, xv, None, true, Some(&[3]))
            .unwrap();
        let yv = tape.value(y).data();
        assert!((yv[0] + yv[2]).abs() < 1e-12);
        assert_eq!(yv[1], 0.0);
        assert_eq!(&yv[3..], &[0.0, 0.0]);
    }
}
