//! The base CNN:
//!
//! ```text
//! input [n, e, e, 1]
//!   -> conv k×k, conv1_filters, stride 1 -> ReLU -> max-pool 2×2
//!   -> conv k×k, conv2_filters, stride 1 -> ReLU -> max-pool 2×2
//!   -> flatten (row-major over [h, w, channel])
//!   -> fc hidden_units -> ReLU -> dropout
//!   -> fc classes            (raw scores, no softmax)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, dense_backward, dense_forward, dropout_backward, dropout_forward,
    maxpool2d_backward, maxpool2d_forward, relu_backward, relu_forward, Conv2dCache, Conv2dParams, DenseCache,
    DenseParams, DropoutCache, DropoutSpec, MaxPoolCache, Mode, Padding, ReluCache,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STDDEV: f64 = 0.1;
pub const INIT_TRUNCATION: f64 = 2.0;
pub const INIT_BIAS: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_extent: usize,
    pub kernel_size: usize,
    pub conv1_filters: usize,
    pub conv2_filters: usize,
    pub hidden_units: usize,
    pub classes: usize,
    pub pool_size: usize,
    pub pool_stride: usize,
    pub padding: Padding,
    pub dropout_p: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_extent: 28,
            kernel_size: 5,
            conv1_filters: 32,
            conv2_filters: 64,
            hidden_units: 1024,
            classes: 10,
            pool_size: 2,
            pool_stride: 2,
            padding: Padding::Same,
            dropout_p: 0.5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_extent", self.input_extent),
            ("kernel_size", self.kernel_size),
            ("conv1_filters", self.conv1_filters),
            ("conv2_filters", self.conv2_filters),
            ("hidden_units", self.hidden_units),
            ("classes", self.classes),
            ("pool_size", self.pool_size),
            ("pool_stride", self.pool_stride),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        DropoutSpec::new(self.dropout_p, Mode::Train).map_err(|e| Error::Config(e.to_string()))?;
        self.flat_features().map(|_| ())
    }

    fn conv_extent(&self, extent: usize) -> Result<usize> {
        match self.padding {
            Padding::Same => Ok(extent),
            Padding::Valid => extent
                .checked_sub(self.kernel_size)
                .map(|e| e + 1)
                .ok_or_else(|| Error::Config(format!("{extent}px does not fit a {}px kernel", self.kernel_size))),
        }
    }

    fn pool_extent(&self, extent: usize) -> Result<usize> {
        extent
            .checked_sub(self.pool_size)
            .map(|e| e / self.pool_stride + 1)
            .ok_or_else(|| Error::Config(format!("{extent}px does not fit a {}px pool", self.pool_size)))
    }

    /// Spatial extent after the second pooling layer.
    pub fn pooled_extent(&self) -> Result<usize> {
        let e = self.pool_extent(self.conv_extent(self.input_extent)?)?;
        self.pool_extent(self.conv_extent(e)?)
    }

    /// Input width of the first fully-connected layer.
    pub fn flat_features(&self) -> Result<usize> {
        let e = self.pooled_extent()?;
        Ok(e * e * self.conv2_filters)
    }
}

/// Read/write access to a fixed, ordered list of named tensors.
pub trait ParamSet {
    fn params(&self) -> Vec<(&str, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor)>;
}

pub const PARAM_NAMES: [&str; 8] =
    ["conv1.kernels", "conv1.bias", "conv2.kernels", "conv2.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ArchConfig,
    pub conv1: Conv2dParams,
    pub conv2: Conv2dParams,
    pub fc1: DenseParams,
    /// The classification head; for the SVM heads this holds `w` and `b`.
    pub fc2: DenseParams,
}

impl ModelParams {
    /// Truncated-normal weights (mean 0, stddev 0.1, redrawn beyond 2σ) and
    /// constant 0.1 biases. Tensors are drawn in `PARAM_NAMES` order.
    pub fn init(arch: ArchConfig, rng: &mut Rng) -> Result<Self> {
        Self::build(arch, |dims| Tensor::random_normal(dims, 0.0, INIT_STDDEV, Some(INIT_TRUNCATION), rng), INIT_BIAS)
    }

    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        Self::build(arch, Tensor::zeros, 0.0)
    }

    fn build(arch: ArchConfig, mut weights: impl FnMut(&[usize]) -> Result<Tensor>, bias: f64) -> Result<Self> {
        arch.validate()?;
        let k = arch.kernel_size;
        let conv1 = Conv2dParams::new(
            weights(&[k, k, 1, arch.conv1_filters])?,
            Tensor::full(&[arch.conv1_filters], bias)?,
            1,
            arch.padding,
        )?;
        let conv2 = Conv2dParams::new(
            weights(&[k, k, arch.conv1_filters, arch.conv2_filters])?,
            Tensor::full(&[arch.conv2_filters], bias)?,
            1,
            arch.padding,
        )?;
        let fc1 = DenseParams::new(
            weights(&[arch.flat_features()?, arch.hidden_units])?,
            Tensor::full(&[arch.hidden_units], bias)?,
        )?;
        let fc2 = DenseParams::new(weights(&[arch.hidden_units, arch.classes])?, Tensor::full(&[arch.classes], bias)?)?;
        Ok(ModelParams { arch, conv1, conv2, fc1, fc2 })
    }

    /// Rebuilds a model from tensors in `PARAM_NAMES` order, checking every
    /// shape against `arch`.
    pub fn from_tensors(arch: ArchConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        if tensors.len() != PARAM_NAMES.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                PARAM_NAMES.len(),
                tensors.len()
            )));
        }
        for ((name, slot), t) in model.params_mut().into_iter().zip(tensors) {
            if slot.dims() != t.dims() {
                return Err(Error::Shape(format!("{name}: expected {:?}, got {:?}", slot.shape(), t.shape())));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }
}

impl ParamSet for ModelParams {
    fn params(&self) -> Vec<(&str, &Tensor)> {
        PARAM_NAMES
            .into_iter()
            .zip([
                &self.conv1.kernels,
                &self.conv1.bias,
                &self.conv2.kernels,
                &self.conv2.bias,
                &self.fc1.weight,
                &self.fc1.bias,
                &self.fc2.weight,
                &self.fc2.bias,
            ])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        PARAM_NAMES
            .into_iter()
            .zip([
                &mut self.conv1.kernels,
                &mut self.conv1.bias,
                &mut self.conv2.kernels,
                &mut self.conv2.bias,
                &mut self.fc1.weight,
                &mut self.fc1.bias,
                &mut self.fc2.weight,
                &mut self.fc2.bias,
            ])
            .collect()
    }
}

/// Gradients of a loss with respect to every tensor of a [`ModelParams`],
/// under the same names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub conv1_kernels: Tensor,
    pub conv1_bias: Tensor,
    pub conv2_kernels: Tensor,
    pub conv2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl ParamSet for ModelGrads {
    fn params(&self) -> Vec<(&str, &Tensor)> {
        PARAM_NAMES
            .into_iter()
            .zip([
                &self.conv1_kernels,
                &self.conv1_bias,
                &self.conv2_kernels,
                &self.conv2_bias,
                &self.fc1_weight,
                &self.fc1_bias,
                &self.fc2_weight,
                &self.fc2_bias,
            ])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut Tensor)> {
        PARAM_NAMES
            .into_iter()
            .zip([
                &mut self.conv1_kernels,
                &mut self.conv1_bias,
                &mut self.conv2_kernels,
                &mut self.conv2_bias,
                &mut self.fc1_weight,
                &mut self.fc1_bias,
                &mut self.fc2_weight,
                &mut self.fc2_bias,
            ])
            .collect()
    }
}

#[derive(Debug)]
pub struct ForwardCache {
    conv1: Conv2dCache,
    relu1: ReluCache,
    pool1: MaxPoolCache,
    conv2: Conv2dCache,
    relu2: ReluCache,
    pool2: MaxPoolCache,
    pooled_dims: Vec<usize>,
    fc1: DenseCache,
    relu3: ReluCache,
    dropout: DropoutCache,
    fc2: DenseCache,
}

/// Runs the network and returns raw class scores `[n, classes]`.
///
/// `rng` is only drawn from in train mode (dropout masks).
pub fn cnn_forward(batch: &Tensor, model: &ModelParams, mode: Mode, rng: &mut Rng) -> Result<(Tensor, ForwardCache)> {
    let arch = &model.arch;
    let e = arch.input_extent;
    let n = match *batch.dims() {
        [n, h, w, 1] if h == e && w == e => n,
        _ => return Err(Error::Shape(format!("expected a [n, {e}, {e}, 1] batch, got {:?}", batch.shape()))),
    };
    let (x, conv1) = conv2d_forward(batch, &model.conv1)?;
    let (x, relu1) = relu_forward(&x);
    let (x, pool1) = maxpool2d_forward(&x, arch.pool_size, arch.pool_stride)?;
    let (x, conv2) = conv2d_forward(&x, &model.conv2)?;
    let (x, relu2) = relu_forward(&x);
    let (x, pool2) = maxpool2d_forward(&x, arch.pool_size, arch.pool_stride)?;
    let pooled_dims = x.dims().to_vec();
    let flat = x.len() / n;
    let x = x.reshape(&[n, flat])?;
    let (x, fc1) = dense_forward(&x, &model.fc1)?;
    let (x, relu3) = relu_forward(&x);
    let (x, dropout) = dropout_forward(&x, DropoutSpec::new(arch.dropout_p, mode)?, rng);
    let (scores, fc2) = dense_forward(&x, &model.fc2)?;
    let cache = ForwardCache { conv1, relu1, pool1, conv2, relu2, pool2, pooled_dims, fc1, relu3, dropout, fc2 };
    Ok((scores, cache))
}

/// Eval-mode scores without keeping a cache around.
pub fn cnn_scores(batch: &Tensor, model: &ModelParams) -> Result<Tensor> {
    cnn_forward(batch, model, Mode::Eval, &mut Rng::new(0)).map(|(scores, _)| scores)
}

/// Backpropagates `grad_scores` through a train-mode forward pass.
pub fn cnn_backward(grad_scores: &Tensor, cache: ForwardCache, model: &ModelParams) -> Result<ModelGrads> {
    let fc2 = dense_backward(grad_scores, cache.fc2, &model.fc2)?;
    let g = dropout_backward(&fc2.input, cache.dropout)?;
    let g = relu_backward(&g, cache.relu3)?;
    let fc1 = dense_backward(&g, cache.fc1, &model.fc1)?;
    let g = fc1.input.reshape(&cache.pooled_dims)?;
    let g = maxpool2d_backward(&g, cache.pool2)?;
    let g = relu_backward(&g, cache.relu2)?;
    let conv2 = conv2d_backward(&g, cache.conv2, &model.conv2)?;
    let g = maxpool2d_backward(&conv2.input, cache.pool1)?;
    let g = relu_backward(&g, cache.relu1)?;
    let conv1 = conv2d_backward(&g, cache.conv1, &model.conv1)?;
    Ok(ModelGrads {
        conv1_kernels: conv1.kernels,
        conv1_bias: conv1.bias,
        conv2_kernels: conv2.kernels,
        conv2_bias: conv2.bias,
        fc1_weight: fc1.weight,
        fc1_bias: fc1.bias,
        fc2_weight: fc2.weight,
        fc2_bias: fc2.bias,
    })
}
