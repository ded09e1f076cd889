//! Batched matrix products and the column softmax used for attention.

use super::gemm::{gemm, View};
use super::tape::{Op, Tape, Var};
use super::Tensor;
use crate::{Error, Real, Result};

fn item_view(t: &Tensor, bi: usize, trans: bool) -> View {
    let (p, q) = (t.shape()[1], t.shape()[2]);
    let v = View::dense(bi * p * q, p, q);
    if trans {
        v.t()
    } else {
        v
    }
}

impl Tape {
    /// Per batch item `op(a)·op(b)` where `op` optionally transposes.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ab, _, _) = self.value(a).dims3()?;
        let (bb, _, _) = self.value(b).dims3()?;
        if ab != bb {
            return Err(Error::Shape(format!("bmm batch {ab} vs {bb}")));
        }
        let av = item_view(self.value(a), 0, ta);
        let bv = item_view(self.value(b), 0, tb);
        if av.cols != bv.rows {
            return Err(Error::Shape(format!(
                "bmm inner dimension {} vs {}",
                av.cols, bv.rows
            )));
        }
        let (rows, cols) = (av.rows, bv.cols);
        let mut out = Tensor::zeros(&[ab, rows, cols]);
        for bi in 0..ab {
            gemm(
                1.0,
                self.value(a).data(),
                item_view(self.value(a), bi, ta),
                self.value(b).data(),
                item_view(self.value(b), bi, tb),
                0.0,
                out.data_mut(),
                View::dense(bi * rows * cols, rows, cols),
            );
        }
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(out, Op::Bmm { a, b, ta, tb }, rg)
    }

    /// Softmax over the first (source) axis of each `n × m` item, i.e. every
    /// column sums to one. With `lens = (source, target)` entries at rows
    /// `≥ source[b]` or columns `≥ target[b]` are exactly zero.
    pub fn softmax_columns(&mut self, x: Var, lens: Option<(&[usize], &[usize])>) -> Result<Var> {
        let (b, n, m) = self.value(x).dims3()?;
        if let Some((s, t)) = lens {
            if s.len() != b || t.len() != b {
                return Err(Error::Shape("softmax_columns: length count".into()));
            }
        }
        let xd = self.value(x).data();
        if xd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_columns input".into()));
        }
        let mut out = Tensor::zeros(&[b, n, m]);
        let od = out.data_mut();
        for bi in 0..b {
            let (nv, mv) = match lens {
                Some((s, t)) => (s[bi].min(n), t[bi].min(m)),
                None => (n, m),
            };
            if nv == 0 {
                continue;
            }
            let base = bi * n * m;
            for col in 0..mv {
                let mut mx = Real::NEG_INFINITY;
                for row in 0..nv {
                    mx = mx.max(xd[base + row * m + col]);
                }
                let mut z = 0.0;
                for row in 0..nv {
                    let e = (xd[base + row * m + col] - mx).exp();
                    od[base + row * m + col] = e;
                    z += e;
                }
                for row in 0..nv {
                    od[base + row * m + col] /= z;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push(out, Op::Softmax { x }, rg)
    }
}

pub(crate) fn bmm_backward_a(b: &Tensor, g: &Tensor, ta: bool, tb: bool, da: &mut Tensor) {
    let batch = g.shape()[0];
    let (gr, gc) = (g.shape()[1], g.shape()[2]);
    for bi in 0..batch {
        // d op(a) = G · op(b)ᵀ
        let target = item_view(da, bi, ta);
        gemm(
            1.0,
            g.data(),
            View::dense(bi * gr * gc, gr, gc),
            b.data(),
            item_view(b, bi, tb).t(),
            1.0,
            da.data_mut(),
            target,
        );
    }
}

pub(crate) fn bmm_backward_b(a: &Tensor, g: &Tensor, ta: bool, tb: bool, db: &mut Tensor) {
    let batch = g.shape()[0];
    let (gr, gc) = (g.shape()[1], g.shape()[2]);
    for bi in 0..batch {
        // d op(b) = op(a)ᵀ · G
        let target = item_view(db, bi, tb);
        gemm(
            1.0,
            a.data(),
            item_view(a, bi, ta).t(),
            g.data(),
            View::dense(bi * gr * gc, gr, gc),
            1.0,
            db.data_mut(),
            target,
        );
    }
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, dx: &mut Tensor) {
    let (b, n, m) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let (yd, gd) = (y.data(), g.data());
    let dd = dx.data_mut();
    for bi in 0..b {
        let base = bi * n * m;
        for col in 0..m {
            let dot: Real = (0..n)
                .map(|row| yd[base + row * m + col] * gd[base + row * m + col])
                .sum();
            for row in 0..n {
                let i = base + row * m + col;
                dd[i] += yd[i] * (gd[i] - dot);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn softmax_of(data: Vec<Real>, n: usize, m: usize) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[1, n, m], data).unwrap()).unwrap();
        let y = tape.softmax_columns(x, None).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn constant_column_is_uniform() {
        let y = softmax_of(vec![2.5; 4], 4, 1);
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn closed_form_two_entries() {
        let y = softmax_of(vec![0.0, (3.0 as Real).ln()], 2, 1);
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let base = vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4];
        let shifted: Vec<Real> = base
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 2 == 0 { v + 17.0 } else { v - 3.0 })
            .collect();
        let (a, b) = (softmax_of(base, 3, 2), softmax_of(shifted, 3, 2));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn masked_entries_are_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        let y = tape.softmax_columns(x, Some((&[2], &[2]))).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v, &[0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bmm_transposes_match_loops() {
        let mut tape = Tape::new();
        let a = Tensor::from_vec(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        let av = tape.constant(a.clone()).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        let c = tape.bmm(av, bv, true, false).unwrap(); // aᵀ b: 3×2
        let cv = tape.value(c);
        assert_eq!(cv.shape(), &[1, 3, 2]);
        for i in 0..3 {
            for j in 0..2 {
                let want: Real = (0..2).map(|k| a.data()[k * 3 + i] * b.data()[k * 2 + j]).sum();
                assert_eq!(cv.data()[i * 2 + j], want);
            }
        }
    }
}
