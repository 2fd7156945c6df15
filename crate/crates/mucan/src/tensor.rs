//! Dense row-major tensor and the 3-D feature map wrapper.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;

/// N-dimensional dense array of real scalars, row-major.
///
/// Invariants: `data.len()` equals the product of the extents, and every
/// extent is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform values in [-range, range], one PRNG draw per element.
    pub fn random_uniform(shape: &[usize], range: f64, rng: &mut SplitMix64) -> Self {
        Tensor::from_fn(shape, |_| S::from_f64(rng.uniform(-range, range)))
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// True when the tensor holds exactly one element.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<S> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major offset of a rank-3 index. Callers guarantee bounds.
    #[inline(always)]
    pub fn offset3(&self, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.rank(), 3);
        (c * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline(always)]
    pub fn at3(&self, c: usize, h: usize, w: usize) -> S {
        self.data[self.offset3(c, h, w)]
    }

    #[inline(always)]
    pub fn set3(&mut self, c: usize, h: usize, w: usize, v: S) {
        let off = self.offset3(c, h, w);
        self.data[off] = v;
    }

    /// Contiguous row `h` of channel plane `c` in a rank-3 tensor.
    #[inline(always)]
    pub fn row3(&self, c: usize, h: usize) -> &[S] {
        let w = self.shape[2];
        let start = (c * self.shape[1] + h) * w;
        &self.data[start..start + w]
    }

    pub fn map(&self, mut f: impl FnMut(S) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Cast every element through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| T::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::shape(format!(
                "{what}: expected rank {rank}, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// Rank-3 tensor (channels, height, width) with pyramid-level and
/// frame-offset metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<S: Scalar> {
    tensor: Tensor<S>,
    level: usize,
    frame_time: i32,
}

impl<S: Scalar> FeatureMap<S> {
    pub fn new(tensor: Tensor<S>, level: usize, frame_time: i32) -> Result<Self> {
        tensor.expect_rank(3, "feature map")?;
        Ok(FeatureMap {
            tensor,
            level,
            frame_time,
        })
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.tensor
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn frame_time(&self) -> i32 {
        self.frame_time
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    /// Same metadata, new payload.
    pub fn with_tensor(&self, tensor: Tensor<S>) -> Result<Self> {
        FeatureMap::new(tensor, self.level, self.frame_time)
    }

    // Convenience wrappers over the tensor kernels; level and frame-time
    // metadata carry through unchanged.

    pub fn conv2d(
        &self,
        kernel: &Tensor<S>,
        bias: &Tensor<S>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        self.with_tensor(crate::ops::conv2d(&self.tensor, kernel, bias, stride, padding)?)
    }

    pub fn leaky_relu(&self, slope: S) -> Self {
        FeatureMap {
            tensor: crate::ops::leaky_relu(&self.tensor, slope),
            level: self.level,
            frame_time: self.frame_time,
        }
    }

    pub fn residual_block(
        &self,
        w1: &Tensor<S>,
        b1: &Tensor<S>,
        w2: &Tensor<S>,
        b2: &Tensor<S>,
        slope: S,
    ) -> Result<Self> {
        self.with_tensor(crate::ops::residual_block(&self.tensor, w1, b1, w2, b2, slope)?)
    }

    pub fn avg_pool2(&self) -> Result<Self> {
        self.with_tensor(crate::ops::avg_pool2(&self.tensor)?)
    }

    pub fn pixel_shuffle(&self, r: usize) -> Result<Self> {
        self.with_tensor(crate::ops::pixel_shuffle(&self.tensor, r)?)
    }

    pub fn bilinear_upsample2(&self) -> Result<Self> {
        self.with_tensor(crate::ops::bilinear_upsample2(&self.tensor)?)
    }

    /// Channel concatenation; metadata comes from the first map.
    pub fn concat_channels(maps: &[&FeatureMap<S>]) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::contract("concat_channels: empty input list"));
        }
        let tensors: Vec<&Tensor<S>> = maps.iter().map(|m| &m.tensor).collect();
        maps[0].with_tensor(crate::ops::concat_channels(&tensors)?)
    }
}
