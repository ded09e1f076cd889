//! Dilated 1-d convolution over batch × channel × time tensors.
//!
//! Each kernel tap is one strided matrix product between the `o × i` weight
//! slice and a time-shifted window of the input, so no im2col buffer is built.

use super::gemm::{gemm, View};
use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::{Error, Result};

/// Left padding applied before a length-preserving convolution.
///
/// Causal: `δ(κ−1)` zeros on the left (equivalently pad both sides and drop the
/// trailing `δ(κ−1)` outputs). Non-causal: `δ(κ−1)/2` on each side, odd κ only.
pub fn conv_padding(kernel: usize, dilation: usize, causal: bool) -> Result<usize> {
    if kernel == 0 || dilation == 0 {
        return Err(Error::InvalidArgument(
            "kernel size and dilation must be positive".into(),
        ));
    }
    let span = dilation * (kernel - 1);
    if causal {
        Ok(span)
    } else if kernel % 2 == 1 {
        Ok(span / 2)
    } else {
        Err(Error::InvalidArgument(format!(
            "non-causal convolution needs an odd kernel, got {kernel}"
        )))
    }
}

/// Valid output range `[t0, t1)` for a tap reading input at `t + shift`.
fn tap_range(n: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = (n as isize - shift).clamp(0, n as isize) as usize;
    (t0.min(t1), t1)
}

impl Tape {
    /// `x: b×i×n`, `w: o×i×κ`, `bias: o` → `b×o×n`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
        causal: bool,
    ) -> Result<Var> {
        let (b, i, n) = self.value(x).dims3()?;
        let (o, wi, k) = match self.value(w).shape() {
            &[o, wi, k] => (o, wi, k),
            s => return Err(Error::Shape(format!("conv weight must be 3-d, got {s:?}"))),
        };
        if wi != i {
            return Err(Error::Shape(format!(
                "conv1d: input has {i} channels, weight expects {wi}"
            )));
        }
        if n == 0 {
            return Err(Error::Shape("conv1d: zero-length input".into()));
        }
        if let Some(bv) = bias {
            if self.value(bv).shape() != [o] {
                return Err(Error::Shape(format!(
                    "conv1d: bias shape {:?}, expected [{o}]",
                    self.value(bv).shape()
                )));
            }
        }
        if x == w || Some(x) == bias || Some(w) == bias {
            return Err(Error::InvalidArgument("conv1d operands must be distinct".into()));
        }
        let pad_left = conv_padding(k, dilation, causal)?;
        let mut out = Tensor::zeros(&[b, o, n]);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for bi in 0..b {
                let xo = bi * i * n;
                let oo = bi * o * n;
                if let Some(bv) = bias {
                    let bias = self.value(bv).data();
                    for oc in 0..o {
                        od[oo + oc * n..oo + (oc + 1) * n].fill(bias[oc]);
                    }
                }
                for tap in 0..k {
                    let shift = (tap * dilation) as isize - pad_left as isize;
                    let (t0, t1) = tap_range(n, shift);
                    if t1 <= t0 {
                        continue;
                    }
                    let len = t1 - t0;
                    let wv_view = View {
                        offset: tap,
                        rows: o,
                        cols: i,
                        row_stride: i * k,
                        col_stride: k,
                    };
                    let xv_view = View {
                        offset: xo + (t0 as isize + shift) as usize,
                        rows: i,
                        cols: len,
                        row_stride: n,
                        col_stride: 1,
                    };
                    let ov = View {
                        offset: oo + t0,
                        rows: o,
                        cols: len,
                        row_stride: n,
                        col_stride: 1,
                    };
                    gemm(1.0, wv, wv_view, xv, xv_view, 1.0, od, ov);
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || bias.is_some_and(|bv| self.requires_grad(bv));
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
                pad_left,
            },
            rg,
        )
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    dilation: usize,
    pad_left: usize,
    mut dx: Option<&mut Tensor>,
    mut dw: Option<&mut Tensor>,
    db: Option<&mut Tensor>,
) {
    let (b, i, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let gd = g.data();
    if let Some(db) = db {
        let dbd = db.data_mut();
        for bi in 0..b {
            for oc in 0..o {
                let row = (bi * o + oc) * n;
                dbd[oc] += gd[row..row + n].iter().sum::<crate::Real>();
            }
        }
    }
    for bi in 0..b {
        let xo = bi * i * n;
        let oo = bi * o * n;
        for tap in 0..k {
            let shift = (tap * dilation) as isize - pad_left as isize;
            let (t0, t1) = tap_range(n, shift);
            if t1 <= t0 {
                continue;
            }
            let len = t1 - t0;
            let w_view = View {
                offset: tap,
                rows: o,
                cols: i,
                row_stride: i * k,
                col_stride: k,
            };
            let x_view = View {
                offset: xo + (t0 as isize + shift) as usize,
                rows: i,
                cols: len,
                row_stride: n,
                col_stride: 1,
            };
            let g_view = View {
                offset: oo + t0,
                rows: o,
                cols: len,
                row_stride: n,
                col_stride: 1,
            };
            if let Some(dw) = dw.as_deref_mut() {
                // dW_tap += G · Xᵀ
                gemm(1.0, gd, g_view, x.data(), x_view.t(), 1.0, dw.data_mut(), w_view);
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dX_window += W_tapᵀ · G
                gemm(1.0, w.data(), w_view.t(), gd, g_view, 1.0, dx.data_mut(), x_view);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Real;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct O(n·κ) sliding-window sum.
    fn reference(x: &Tensor, w: &Tensor, bias: &[Real], dil: usize, causal: bool) -> Tensor {
        let (b, i, n) = x.dims3().unwrap();
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let pad = conv_padding(k, dil, causal).unwrap() as isize;
        let mut out = Tensor::zeros(&[b, o, n]);
        for bi in 0..b {
            for oc in 0..o {
                for t in 0..n {
                    let mut acc = bias[oc];
                    for ic in 0..i {
                        for tap in 0..k {
                            let src = t as isize + (tap * dil) as isize - pad;
                            if src >= 0 && (src as usize) < n {
                                acc += w.data()[(oc * i + ic) * k + tap]
                                    * x.data()[(bi * i + ic) * n + src as usize];
                            }
                        }
                    }
                    out.data_mut()[(bi * o + oc) * n + t] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[2, 3, 7], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let wv = tape.constant(w).unwrap();
        let y = tape.conv1d(xv, wv, None, 1, true).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn causal_impulse_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor::zeros(&[1, 2, 12]);
        x.data_mut()[5] = 1.0;
        x.data_mut()[12 + 5] = -0.5;
        let w = random(&[3, 2, 3], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let wv = tape.constant(w).unwrap();
        let y = tape.conv1d(xv, wv, None, 1, true).unwrap();
        let yv = tape.value(y);
        for oc in 0..3 {
            for t in 0..12 {
                let v = yv.data()[oc * 12 + t];
                if !(5..=7).contains(&t) {
                    assert_eq!(v, 0.0, "t={t}");
                }
            }
        }
    }

    #[test]
    fn matches_reference_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, dil, causal) in &[(3, 2, true), (5, 3, false), (3, 9, true), (1, 1, false), (5, 27, false)] {
            let x = random(&[2, 4, 11], &mut rng);
            let w = random(&[3, 4, k], &mut rng);
            let bias: Vec<Real> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let want = reference(&x, &w, &bias, dil, causal);
            let mut tape = Tape::new();
            let xv = tape.constant(x).unwrap();
            let wv = tape.constant(w).unwrap();
            let bv = tape.constant(Tensor::from_vec(&[3], bias).unwrap()).unwrap();
            let y = tape.conv1d(xv, wv, Some(bv), dil, causal).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 0])).unwrap();
        let w = tape.constant(Tensor::zeros(&[1, 2, 3])).unwrap();
        assert!(tape.conv1d(x, w, None, 1, true).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 3, 4])).unwrap();
        assert!(tape.conv1d(x, w, None, 1, true).is_err());
        let x = tape.constant(Tensor::zeros(&[1, 2, 4])).unwrap();
        let w4 = tape.constant(Tensor::zeros(&[1, 2, 4])).unwrap();
        assert!(tape.conv1d(x, w4, None, 1, false).is_err());
    }
}
