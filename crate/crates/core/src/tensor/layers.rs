use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor, TensorError, Result};

/// Weights of a (possibly strided) 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `[out_ch, in_ch, kh, kw]`
    pub kernel: Tensor<T>,
    /// `[out_ch]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    /// Square kernel with "same" zero padding and stride 1.
    pub fn same(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let shape = kernel.shape();
        if shape.len() != 4 || shape[2] != shape[3] || shape[2] % 2 == 0 {
            return Err(TensorError::Argument {
                op: "ConvParams::same",
                detail: format!("needs an odd square kernel, got {shape:?}"),
            });
        }
        if bias.shape() != [shape[0]] {
            return Err(TensorError::Shape {
                op: "ConvParams::same",
                detail: format!("bias {:?} for {} output channels", bias.shape(), shape[0]),
            });
        }
        let padding = shape[2] / 2;
        Ok(Self {
            kernel,
            bias,
            stride: 1,
            padding,
        })
    }

    /// Centred normal kernel with standard deviation `2 / fan_in`, zero bias,
    /// same padding.
    pub fn scaled_normal<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, k: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * k * k;
        let kernel = normal_tensor(&[out_ch, in_ch, k, k], 2.0 / fan_in as f64, rng);
        Self {
            kernel,
            bias: Tensor::zeros(&[out_ch]),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }
}

pub(crate) fn normal_tensor<T: Scalar, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite positive std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| T::of(dist.sample(rng)))
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Affine parameters plus running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub training: bool,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: 0.1,
            epsilon: 1e-5,
            training: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds one batch's statistics into the running estimates.
    /// `var` is the population variance over `count` samples; the running
    /// estimate stores the unbiased value.
    pub(crate) fn update_running(&mut self, mean: &[T], var: &[T], count: usize) {
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        let unbias = T::of(count as f64 / (count as f64 - 1.0).max(1.0));
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = keep * *r + m * b;
        }
        let floor = T::of(self.epsilon);
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(var) {
            *r = (keep * *r + m * b * unbias).max(floor);
        }
    }
}
