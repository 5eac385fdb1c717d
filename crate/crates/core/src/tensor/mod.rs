//! Dense tensors, FFTs, resampling, convolution and file formats.

pub mod container;
pub mod conv;
pub mod fft;
pub mod io;
pub mod resize;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

pub use conv::conv2d;
pub use fft::{fft2, ifft2};
pub use io::{load_image, save_image, Image};
pub use resize::bicubic_resize;

/// Dense row-major `f64` array. Four-dimensional tensors use the
/// `B × H × W × C` layout throughout the crate.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_extents(shape)?;
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                n
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e >= 1),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let mut data = data;
        data.resize(n, 0.0);
        Tensor {
            shape: vec![n],
            data,
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
        t
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.random_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Interpret as `B × H × W × C`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, h, w, c] => Ok((b, h, w, c)),
            s => Err(Error::shape(format!("expected B×H×W×C tensor, got {s:?}"))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_extents(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Concatenate two `B×H×W×C` tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (b, h, w, c1) = self.dims4()?;
        let (b2, h2, w2, c2) = other.dims4()?;
        if (b, h, w) != (b2, h2, w2) {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        let c = c1 + c2;
        let mut data = Vec::with_capacity(b * h * w * c);
        for p in 0..b * h * w {
            data.extend_from_slice(&self.data[p * c1..(p + 1) * c1]);
            data.extend_from_slice(&other.data[p * c2..(p + 1) * c2]);
        }
        Tensor::new(&[b, h, w, c], data)
    }

    /// Split the channel axis at `c1`; inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, c1: usize) -> Result<(Tensor, Tensor)> {
        let (b, h, w, c) = self.dims4()?;
        if c1 == 0 || c1 >= c {
            return Err(Error::shape(format!("cannot split {c} channels at {c1}")));
        }
        let c2 = c - c1;
        let mut a = Vec::with_capacity(b * h * w * c1);
        let mut z = Vec::with_capacity(b * h * w * c2);
        for p in 0..b * h * w {
            a.extend_from_slice(&self.data[p * c..p * c + c1]);
            z.extend_from_slice(&self.data[p * c + c1..(p + 1) * c]);
        }
        Ok((Tensor::new(&[b, h, w, c1], a)?, Tensor::new(&[b, h, w, c2], z)?))
    }

    /// Item `i` of the leading batch axis, keeping a batch extent of one.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let b = self.shape[0];
        if i >= b {
            return Err(Error::shape(format!("batch index {i} out of range {b}")));
        }
        let per = self.data.len() / b;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(&shape, self.data[i * per..(i + 1) * per].to_vec())
    }

    /// Stack equally shaped tensors with leading extent 1 along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        let mut shape = first.shape.clone();
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::shape("stack_batch requires equal shapes"));
            }
            data.extend_from_slice(&t.data);
        }
        shape[0] *= items.len();
        Tensor::new(&shape, data)
    }
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "all extents must be >= 1 and rank >= 1, got {shape:?}"
        )));
    }
    Ok(())
}

/// Complex counterpart of [`Tensor`] with split real and imaginary storage.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    shape: Vec<usize>,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        check_extents(shape)?;
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::shape(format!(
                "re/im lengths {}/{} do not match shape {:?}",
                re.len(),
                im.len(),
                shape
            )));
        }
        Ok(ComplexTensor {
            shape: shape.to_vec(),
            re,
            im,
        })
    }

    pub fn from_real(t: &Tensor) -> Self {
        ComplexTensor {
            shape: t.shape.clone(),
            re: t.data.clone(),
            im: vec![0.0; t.data.len()],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn re_mut(&mut self) -> &mut [f64] {
        &mut self.re
    }

    pub fn im_mut(&mut self) -> &mut [f64] {
        &mut self.im
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn real_part(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.re.clone(),
        }
    }

    pub fn max_abs_imag(&self) -> f64 {
        self.im.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent_and_bad_length() {
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::new(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(&[1, 1, 2, 1], vec![9., 8.]).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.data(), &[1., 2., 9., 3., 4., 8.]);
        let (a2, b2) = c.split_channels(2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn batch_item_and_stack_roundtrip() {
        let t = Tensor::new(&[2, 1, 1, 2], vec![1., 2., 3., 4.]).unwrap();
        let items = vec![t.batch_item(0).unwrap(), t.batch_item(1).unwrap()];
        assert_eq!(Tensor::stack_batch(&items).unwrap(), t);
    }
}
