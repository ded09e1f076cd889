use crate::{Error, Real, Result};

/// Dense row-major array. Activations are laid out batch × channel × time.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of a 3-d tensor as (batch, channels, time).
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, n] => Ok((b, c, n)),
            other => Err(Error::Shape(format!("expected a 3-d tensor, got {other:?}"))),
        }
    }

    pub fn item(&self) -> Real {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Item `b` of a batch-major tensor as a flat slice.
    pub fn batch_item(&self, b: usize) -> &[Real] {
        let stride = self.data.len() / self.shape[0];
        &self.data[b * stride..(b + 1) * stride]
    }

    pub fn batch_item_mut(&mut self, b: usize) -> &mut [Real] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[b * stride..(b + 1) * stride]
    }

    /// Columns `start..start + len` along the last (time) axis of a 3-d tensor.
    pub fn slice_time(&self, start: usize, len: usize) -> Result<Tensor> {
        let (b, c, n) = self.dims3()?;
        if start + len > n {
            return Err(Error::Shape(format!(
                "time slice {start}..{} out of range {n}",
                start + len
            )));
        }
        let mut out = Tensor::zeros(&[b, c, len]);
        for row in 0..b * c {
            out.data[row * len..(row + 1) * len]
                .copy_from_slice(&self.data[row * n + start..row * n + start + len]);
        }
        Ok(out)
    }

    /// Concatenates 3-d tensors along the time axis.
    pub fn concat_time(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (b, c, _) = first.dims3()?;
        let mut total = 0;
        for p in parts {
            let (pb, pc, pn) = p.dims3()?;
            if pb != b || pc != c {
                return Err(Error::Shape("concat_time: batch/channel mismatch".into()));
            }
            total += pn;
        }
        let mut out = Tensor::zeros(&[b, c, total]);
        for row in 0..b * c {
            let mut off = 0;
            for p in parts {
                let pn = p.shape[2];
                out.data[row * total + off..row * total + off + pn]
                    .copy_from_slice(&p.data[row * pn..(row + 1) * pn]);
                off += pn;
            }
        }
        Ok(out)
    }
}
