use rand::Rng;

use super::norm::{NormMode, NormParams};
use super::tape::{Tape, Var};
use super::{ParamId, ParamStore, Tensor};
use crate::{Error, Real, Result};

/// Uniform weights in `±1/√(fan_in·κ)`; zero bias.
pub fn init_conv<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
    let w: Vec<Real> = (0..out_channels * in_channels * kernel)
        .map(|_| rng.random_range(-bound..bound) as Real)
        .collect();
    let w = store.add(
        format!("{name}.weight"),
        Tensor::from_vec(&[out_channels, in_channels, kernel], w).expect("conv weight shape"),
    );
    let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]));
    (w, b)
}

/// Residual gated block `B₁(L₁(x)) ⊙ σ(B₂(L₂(x))) + x[..o]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GluBlockParams {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub kernel: usize,
    pub dilation: usize,
    pub causal: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GluBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        causal: bool,
        norm: NormMode,
        speakers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if out_channels > in_channels {
            return Err(Error::InvalidArgument(format!(
                "residual block cannot widen {in_channels} → {out_channels}"
            )));
        }
        if !causal && kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "non-causal block needs an odd kernel, got {kernel}"
            )));
        }
        let (conv1_weight, conv1_bias) =
            init_conv(store, &format!("{name}.conv1"), out_channels, in_channels, kernel, rng);
        let (conv2_weight, conv2_bias) =
            init_conv(store, &format!("{name}.conv2"), out_channels, in_channels, kernel, rng);
        Ok(GluBlockParams {
            conv1_weight,
            conv1_bias,
            conv2_weight,
            conv2_bias,
            norm1: NormParams::new(store, &format!("{name}.norm1"), out_channels, norm, speakers),
            norm2: NormParams::new(store, &format!("{name}.norm2"), out_channels, norm, speakers),
            kernel,
            dilation,
            causal,
            in_channels,
            out_channels,
        })
    }

    pub fn param_count(&self) -> usize {
        let conv = self.out_channels * self.in_channels * self.kernel + self.out_channels;
        let rows = |n: &NormParams| if n.mode == NormMode::Off { 0 } else { 2 * n.channels };
        2 * conv + rows(&self.norm1) + rows(&self.norm2)
    }
}

impl Tape {
    /// Applies one gated residual block. `speakers` must be given exactly when
    /// the block's normalisation is conditional.
    pub fn glu_block(
        &mut self,
        store: &ParamStore,
        p: &mut GluBlockParams,
        x: Var,
        speakers: Option<&[usize]>,
        training: bool,
        lens: Option<&[usize]>,
    ) -> Result<Var> {
        let (_, c, _) = self.value(x).dims3()?;
        if c != p.in_channels {
            return Err(Error::Shape(format!(
                "gated block expects {} channels, got {c}",
                p.in_channels
            )));
        }
        if p.norm1.mode.is_conditional() && speakers.is_none() {
            return Err(Error::Mode("conditional block without a speaker index".into()));
        }
        let w1 = self.param(store, p.conv1_weight)?;
        let b1 = self.param(store, p.conv1_bias)?;
        let w2 = self.param(store, p.conv2_weight)?;
        let b2 = self.param(store, p.conv2_bias)?;
        let lin = self.conv1d(x, w1, Some(b1), p.dilation, p.causal)?;
        let lin = self.norm_layer(store, &mut p.norm1, lin, speakers, training, lens)?;
        let gate = self.conv1d(x, w2, Some(b2), p.dilation, p.causal)?;
        let gate = self.norm_layer(store, &mut p.norm2, gate, speakers, training, lens)?;
        let gate = self.sigmoid(gate)?;
        let gated = self.mul(lin, gate)?;
        let skip = if p.out_channels == c {
            x
        } else {
            self.slice_channels(x, 0, p.out_channels)?
        };
        let y = self.add(gated, skip)?;
        match lens {
            Some(l) => self.mask_time(y, l),
            None => Ok(y),
        }
    }
}
