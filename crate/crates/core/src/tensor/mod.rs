//! Dense f64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! [`Tensor`] is a plain value: a shape plus row-major data. Differentiable
//! computations are recorded on a [`Graph`], which hands out [`Var`] handles
//! and produces [`Gradients`] for every tracked leaf on `backward`.
//!
//! Image-like tensors use channels-first layout `[batch, channels, height, width]`.

mod conv;
mod grad;
mod gradcheck;
mod resize;

pub use conv::ConvGeometry;
pub use grad::{Gradients, Graph, Var};
pub use gradcheck::{gradcheck, gradcheck_entries, gradcheck_smooth, GradcheckReport};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "data",
                format!("shape {:?} holds {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(f).collect(),
        }
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::dim(
                "rank",
                format!("expected [B,C,H,W], got {:?}", self.shape),
            )),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::dim(
                "shape",
                format!("cannot reshape {:?} into {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Channels `[start, start + count)` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if start + count > c {
            return Err(Error::dim(
                "channels",
                format!("slice {}..{} out of {} channels", start, start + count, c),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * count * plane);
        for bi in 0..b {
            let base = (bi * c + start) * plane;
            data.extend_from_slice(&self.data[base..base + count * plane]);
        }
        Tensor::new([b, count, h, w], data)
    }

    /// Channel-wise concatenation of rank-4 tensors sharing batch and spatial extents.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (b, _, h, w) = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pb, pc, ph, pw) = p.dims4()?;
            if pb != b {
                return Err(Error::dim("batch", format!("{} vs {}", pb, b)));
            }
            if ph != h || pw != w {
                return Err(Error::dim(
                    "spatial",
                    format!("{}x{} vs {}x{}", ph, pw, h, w),
                ));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for p in parts {
                let pc = p.shape[1];
                let base = bi * pc * plane;
                data.extend_from_slice(&p.data[base..base + pc * plane]);
            }
        }
        Tensor::new([b, total, h, w], data)
    }

    /// Batch element `index` kept as a batch of one.
    pub fn batch_item(&self, index: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if index >= b {
            return Err(Error::dim("batch", format!("index {} of {}", index, b)));
        }
        let n = c * h * w;
        Tensor::new([1, c, h, w], self.data[index * n..(index + 1) * n].to_vec())
    }

    /// Stacks same-shaped `[1,C,H,W]` (or `[C,H,W]`) tensors along the batch axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let inner: Vec<usize> = match first.shape.len() {
            4 if first.shape[0] == 1 => first.shape[1..].to_vec(),
            3 => first.shape.clone(),
            _ => {
                return Err(Error::dim(
                    "rank",
                    format!("cannot stack shape {:?}", first.shape),
                ))
            }
        };
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.len() != first.len() || t.shape.iter().product::<usize>() != first.len() {
                return Err(Error::dim("shape", "stack of mismatched tensors"));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}
