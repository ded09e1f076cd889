//! Reverse-mode differentiable kernel: tensors, the operation tape and the
//! primitives the conversion networks are built from.

mod attention;
mod conv;
mod gemm;
mod glu;
pub mod gradcheck;
mod norm;
mod params;
mod tape;
mod tensor;

pub use conv::conv_padding;
pub use glu::{init_conv, GluBlockParams};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckOptions};
pub use norm::{NormMode, NormParams, RunningStats, Statistics, NORM_EPS, RUNNING_MOMENTUM};
pub use params::{DiffTensor, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::{Error, Real, Result};

/// Per-channel weights for [`weighted_l1`] on a `b × (F·r) × n` tensor whose
/// channels stack `r` frames of `F` features (`alphas.len() == F`).
pub fn stacked_channel_weights(alphas: &[Real], r: usize) -> Vec<Real> {
    (0..alphas.len() * r)
        .map(|c| alphas[c % alphas.len()] / r as Real)
        .collect()
}

/// `Σₙ (1/r) Σⱼ Σᵢ αᵢ |a − b|` over every frame of every batch item.
pub fn weighted_l1(tape: &mut Tape, a: Var, b: Var, alphas: &[Real], r: usize) -> Result<Var> {
    let (bn, c, n) = tape.value(a).dims3()?;
    if r == 0 || c != alphas.len() * r {
        return Err(Error::Shape(format!(
            "weighted_l1: {c} channels for {} features × r={r}",
            alphas.len()
        )));
    }
    let per_channel = stacked_channel_weights(alphas, r);
    let mut w = Tensor::zeros(&[bn, c, n]);
    for bi in 0..bn {
        for (ch, &wc) in per_channel.iter().enumerate() {
            let row = (bi * c + ch) * n;
            w.data_mut()[row..row + n].fill(wc);
        }
    }
    tape.weighted_abs_diff(a, b, w)
}
