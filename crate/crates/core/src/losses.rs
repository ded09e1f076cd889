//! Training objectives: decoder, context preservation, attention guidance
//! and their weighted combination.

use serde::{Deserialize, Serialize};

use crate::kernel::{stacked_channel_weights, Tape, Tensor, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Context preservation (reconstructor) weight.
    pub rec: f64,
    /// Diagonal attention weight.
    pub dal: f64,
    /// Orthogonal attention weight.
    pub oal: f64,
    /// Weight of same-speaker pairs.
    pub iml: f64,
    /// Width of the diagonal band.
    pub nu: f64,
    /// Width of the orthogonality band.
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            rec: 1.0,
            dal: 2000.0,
            oal: 2000.0,
            iml: 1.0,
            nu: 0.3,
            rho: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rec, self.dal, self.oal, self.iml, self.nu, self.rho];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("loss weights must be finite and non-negative".into()));
        }
        if self.nu <= 0.0 || self.rho <= 0.0 {
            return Err(Error::InvalidArgument("band widths must be positive".into()));
        }
        Ok(())
    }

    /// Weight of one batch item given whether source and target speaker coincide.
    pub fn item_weight(&self, same_speaker: bool) -> Real {
        if same_speaker {
            self.iml as Real
        } else {
            1.0
        }
    }
}

/// `1 − exp(−(n/N − m/M)² / 2ν²)` with 1-based `n` and `m`.
pub fn guided_weight(n: usize, rows: usize, m: usize, cols: usize, nu: f64) -> Real {
    let d = n as f64 / rows as f64 - m as f64 / cols as f64;
    (1.0 - (-d * d / (2.0 * nu * nu)).exp()) as Real
}

/// Row-major `N × M` guide matrix.
pub fn guided_weight_matrix(rows: usize, cols: usize, nu: f64) -> Vec<Real> {
    let mut w = Vec::with_capacity(rows * cols);
    for n in 1..=rows {
        for m in 1..=cols {
            w.push(guided_weight(n, rows, m, cols, nu));
        }
    }
    w
}

fn check_items(what: &str, b: usize, lens: &[&[usize]], weights: &[Real]) -> Result<()> {
    if weights.len() != b || lens.iter().any(|l| l.len() != b) {
        return Err(Error::Shape(format!("{what}: per-item metadata does not match batch of {b}")));
    }
    Ok(())
}

/// Mean over items of `wᵦ · ‖W(ν) ⊙ A‖₁ / (N·M)` on `b × N × M` attention,
/// restricted to each item's true lengths.
pub fn dal(
    tape: &mut Tape,
    attention: Var,
    src_lens: &[usize],
    trg_lens: &[usize],
    nu: f64,
    item_weights: &[Real],
) -> Result<Var> {
    let (b, n, m) = tape.value(attention).dims3()?;
    check_items("dal", b, &[src_lens, trg_lens], item_weights)?;
    let mut w = Tensor::zeros(&[b, n, m]);
    for bi in 0..b {
        let (ni, mi) = (src_lens[bi], trg_lens[bi]);
        if ni > n || mi > m || ni == 0 || mi == 0 {
            return Err(Error::Shape(format!("dal: lengths {ni}×{mi} exceed {n}×{m}")));
        }
        let scale = item_weights[bi] / (b * ni * mi) as Real;
        let guide = guided_weight_matrix(ni, mi, nu);
        let out = w.batch_item_mut(bi);
        for row in 0..ni {
            for col in 0..mi {
                out[row * m + col] = scale * guide[row * mi + col];
            }
        }
    }
    tape.weighted_sum(attention, w)
}

/// Mean over items of `wᵦ · ‖W_{N×N}(ρ) ⊙ AAᵀ‖₁ / N²`.
pub fn oal(
    tape: &mut Tape,
    attention: Var,
    src_lens: &[usize],
    rho: f64,
    item_weights: &[Real],
) -> Result<Var> {
    let (b, n, _) = tape.value(attention).dims3()?;
    check_items("oal", b, &[src_lens], item_weights)?;
    let gram = tape.bmm(attention, attention, false, true)?;
    let mut w = Tensor::zeros(&[b, n, n]);
    for bi in 0..b {
        let ni = src_lens[bi];
        if ni > n || ni == 0 {
            return Err(Error::Shape(format!("oal: length {ni} exceeds {n}")));
        }
        let scale = item_weights[bi] / (b * ni * ni) as Real;
        let guide = guided_weight_matrix(ni, ni, rho);
        let out = w.batch_item_mut(bi);
        for row in 0..ni {
            for col in 0..ni {
                out[row * n + col] = scale * guide[row * ni + col];
            }
        }
    }
    tape.weighted_sum(gram, w)
}

/// Weighted L1 of `prediction` against `target` shifted left by `shift`
/// frames, over the first `lens[b] − shift` frames, normalised by `lens[b]`.
fn framewise_l1(
    tape: &mut Tape,
    prediction: Var,
    target: &Tensor,
    lens: &[usize],
    shift: usize,
    channel_weights: &[Real],
    item_weights: &[Real],
) -> Result<Var> {
    let (b, c, m) = tape.value(prediction).dims3()?;
    if target.shape() != [b, c, m] {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            [b, c, m],
            target.shape()
        )));
    }
    if channel_weights.len() != c {
        return Err(Error::Shape(format!("{} channel weights for {c} channels", channel_weights.len())));
    }
    check_items("l1", b, &[lens], item_weights)?;
    let mut shifted = Tensor::zeros(&[b, c, m]);
    let mut w = Tensor::zeros(&[b, c, m]);
    for bi in 0..b {
        let len = lens[bi];
        if len > m || len == 0 {
            return Err(Error::Shape(format!("length {len} exceeds {m}")));
        }
        let scale = item_weights[bi] / (b * len) as Real;
        let src = target.batch_item(bi);
        let used = len.saturating_sub(shift);
        let dst = shifted.batch_item_mut(bi);
        for ch in 0..c {
            dst[ch * m..ch * m + used].copy_from_slice(&src[ch * m + shift..ch * m + shift + used]);
        }
        let wi = w.batch_item_mut(bi);
        for ch in 0..c {
            wi[ch * m..ch * m + used].fill(scale * channel_weights[ch]);
        }
    }
    let t = tape.constant(shifted)?;
    tape.weighted_abs_diff(prediction, t, w)
}

/// Decoder loss: output frame `m` predicts target frame `m + 1`.
pub fn dec_loss(
    tape: &mut Tape,
    decoded: Var,
    target: &Tensor,
    trg_lens: &[usize],
    channel_weights: &[Real],
    item_weights: &[Real],
) -> Result<Var> {
    framewise_l1(tape, decoded, target, trg_lens, 1, channel_weights, item_weights)
}

/// Context preservation loss: reconstructor output against the target in place.
pub fn rec_loss(
    tape: &mut Tape,
    reconstructed: Var,
    target: &Tensor,
    trg_lens: &[usize],
    channel_weights: &[Real],
    item_weights: &[Real],
) -> Result<Var> {
    framewise_l1(tape, reconstructed, target, trg_lens, 0, channel_weights, item_weights)
}

/// Per-channel weights for stacked features from per-feature weights.
pub fn channel_weights(feature_weights: &[Real], r: usize) -> Vec<Real> {
    stacked_channel_weights(feature_weights, r)
}

/// Model outputs and targets of one batch.
pub struct LossInputs<'a> {
    /// `b × N × M` attention.
    pub attention: Var,
    pub decoded: Var,
    pub reconstructed: Var,
    /// Target stream with the leading zero frame, `b × D × M`.
    pub target: &'a Tensor,
    pub src_lens: &'a [usize],
    /// Target lengths counting the leading zero frame.
    pub trg_lens: &'a [usize],
    pub item_weights: &'a [Real],
    pub channel_weights: &'a [Real],
}

/// Term values averaged over the batch with item weights applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub dec: f64,
    pub rec: f64,
    pub dal: f64,
    pub oal: f64,
}

pub fn total_loss(
    tape: &mut Tape,
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let LossInputs { attention, decoded, reconstructed, target, src_lens, trg_lens, item_weights, channel_weights } = *inputs;
    let dec = dec_loss(tape, decoded, target, trg_lens, channel_weights, item_weights)?;
    let rec = rec_loss(tape, reconstructed, target, trg_lens, channel_weights, item_weights)?;
    let d = dal(tape, attention, src_lens, trg_lens, weights.nu, item_weights)?;
    let o = oal(tape, attention, src_lens, weights.rho, item_weights)?;
    let terms = [
        dec,
        tape.scale(rec, weights.rec as Real)?,
        tape.scale(d, weights.dal as Real)?,
        tape.scale(o, weights.oal as Real)?,
    ];
    let total = tape.sum_scalars(&terms)?;
    let v = |tape: &Tape, x: Var| tape.value(x).item() as f64;
    let breakdown = LossBreakdown {
        total: v(tape, total),
        dec: v(tape, dec),
        rec: v(tape, rec),
        dal: v(tape, d),
        oal: v(tape, o),
    };
    Ok((total, breakdown))
}
