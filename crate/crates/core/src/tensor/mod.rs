//! Dense `f64` tensors and the reverse-mode tape used to train the client models.
//!
//! Tensors are row-major with at most four axes. Image batches use the
//! `[batch, channels, height, width]` layout and convolution weights use
//! `[out_channels, in_channels, 3, 3]`, so a client's weights are always the
//! leading corner block of the corresponding global tensor.

mod conv;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tape;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use layers::{BnStats, Layer, LayerKind, Mode};
pub use loss::softmax_xent;
pub use optim::{sgd_momentum_step, SgdParam};
pub use tape::{Gradients, Tape, Var};

pub const MAX_AXES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "dims {dims:?} hold {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Panics on invalid dims; meant for shapes that are known valid by construction.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        check_dims(dims).expect("invalid tensor dims");
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self::from_fn(dims, |_| normal.sample(rng))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", dims, &self.dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.dims, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.dims, index);
        self.data[i] = value;
    }

    /// Copy of the leading block `self[..sub[0], ..sub[1], ...]`.
    pub fn corner(&self, sub: &[usize]) -> Result<Tensor> {
        check_corner(&self.dims, sub)?;
        let mut out = Vec::with_capacity(sub.iter().product());
        for_each_corner_run(&self.dims, sub, |outer, _, len| {
            out.extend_from_slice(&self.data[outer..outer + len]);
        });
        Tensor::new(sub.to_vec(), out)
    }

    /// Overwrites the leading block of `self` with `block`.
    pub fn set_corner(&mut self, block: &Tensor) -> Result<()> {
        check_corner(&self.dims, &block.dims)?;
        let dims = self.dims.clone();
        for_each_corner_run(&dims, &block.dims, |outer, inner, len| {
            self.data[outer..outer + len].copy_from_slice(&block.data[inner..inner + len]);
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_AXES {
        return Err(Error::InvalidTensor(format!(
            "tensors have 1 to {MAX_AXES} axes, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidTensor(format!("zero-length axis in {dims:?}")));
    }
    Ok(())
}

fn check_corner(outer: &[usize], sub: &[usize]) -> Result<()> {
    if outer.len() != sub.len() || outer.iter().zip(sub).any(|(o, s)| s > o || *s == 0) {
        return Err(Error::shape("corner slice", outer, sub));
    }
    Ok(())
}

fn flat_index(dims: &[usize], index: &[usize]) -> usize {
    assert_eq!(dims.len(), index.len(), "index rank mismatch");
    index.iter().zip(dims).fold(0, |acc, (&i, &d)| {
        assert!(i < d, "index {index:?} out of bounds for {dims:?}");
        acc * d + i
    })
}

/// Visits the leading `sub` block of a row-major tensor with dims `outer` as
/// contiguous runs along the last axis: `f(outer_offset, sub_offset, run_len)`.
pub(crate) fn for_each_corner_run(outer: &[usize], sub: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = outer.len();
    let run = sub[rank - 1];
    let rows: usize = sub[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    for row in 0..rows {
        let mut off = 0;
        for (axis, &i) in idx.iter().enumerate() {
            off = off * outer[axis] + i;
        }
        f(off * outer[rank - 1], row * run, run);
        // odometer increment over the leading axes
        for axis in (0..rank - 1).rev() {
            idx[axis] += 1;
            if idx[axis] < sub[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_dims() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1, 1], vec![1.0]).is_err());
    }

    #[test]
    fn corner_of_matrix() {
        let t = Tensor::from_fn(&[4, 4], |i| i as f64);
        let c = t.corner(&[2, 2]).unwrap();
        assert_eq!(c.data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.corner(&[4, 4]).unwrap(), t);
        assert!(t.corner(&[5, 1]).is_err());
    }

    #[test]
    fn set_corner_writes_block_only() {
        let mut t = Tensor::zeros(&[3, 2, 2]);
        let block = Tensor::full(&[2, 1, 2], 7.0);
        t.set_corner(&block).unwrap();
        assert_eq!(t.get(&[1, 0, 1]), 7.0);
        assert_eq!(t.get(&[1, 1, 0]), 0.0);
        assert_eq!(t.get(&[2, 0, 0]), 0.0);
    }
}
