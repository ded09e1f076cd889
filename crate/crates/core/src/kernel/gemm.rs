//! Strided matrix product used by the convolution and attention kernels.

use crate::Real;

/// A strided view into a flat buffer describing an `rows × cols` matrix.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        View {
            offset,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c ← beta·c + alpha·(a · b)`.
pub(crate) fn gemm(
    alpha: Real,
    a: &[Real],
    av: View,
    b: &[Real],
    bv: View,
    beta: Real,
    c: &mut [Real],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm row count");
    assert_eq!(bv.cols, cv.cols, "gemm column count");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    if av.cols == 0 {
        // Empty inner dimension: only the beta scaling applies.
        for r in 0..cv.rows {
            for col in 0..cv.cols {
                let i = cv.offset + r * cv.row_stride + col * cv.col_stride;
                c[i] *= beta;
            }
        }
        return;
    }
    assert!(av.last_index() < a.len(), "gemm: a view out of bounds");
    assert!(bv.last_index() < b.len(), "gemm: b view out of bounds");
    assert!(cv.last_index() < c.len(), "gemm: c view out of bounds");
    // SAFETY: every view was bounds-checked above, and `c` is a unique borrow
    // distinct from `a` and `b`.
    unsafe {
        #[cfg(not(feature = "f32"))]
        let kernel = matrixmultiply::dgemm;
        #[cfg(feature = "f32")]
        let kernel = matrixmultiply::sgemm;
        kernel(
            cv.rows,
            av.cols,
            cv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposes() {
        let a: Vec<Real> = (0..6).map(|v| v as Real).collect(); // 2×3
        let b: Vec<Real> = (0..12).map(|v| (v as Real) * 0.5).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm(
            1.0,
            &a,
            View::dense(0, 2, 3),
            &b,
            View::dense(0, 3, 4),
            0.0,
            &mut c,
            View::dense(0, 2, 4),
        );
        for i in 0..2 {
            for j in 0..4 {
                let want: Real = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (aᵀ)ᵀ via a transposed view of a 3×2 buffer
        let mut c2 = vec![0.0; 8];
        let at: Vec<Real> = vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0];
        gemm(
            1.0,
            &at,
            View::dense(0, 3, 2).t(),
            &b,
            View::dense(0, 3, 4),
            0.0,
            &mut c2,
            View::dense(0, 2, 4),
        );
        assert_eq!(c, c2);
    }
}
