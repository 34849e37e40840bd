//! Forward and backward passes for the layers of the base CNN.
//!
//! Activations are NHWC: `[batch, height, width, channels]`. Every
//! `*_forward` returns the output together with a cache that the matching
//! `*_backward` consumes by value, so a cache can feed at most one backward
//! pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm_nn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Zero-pad so the output extent is `ceil(input / stride)`. When the
    /// total padding is odd the extra row/column goes to the bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

fn nhwc(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *t.dims() {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::Shape(format!("{what}: expected [batch, height, width, channels], got {:?}", t.shape()))),
    }
}

fn expect_dims(t: &Tensor, dims: &[usize], what: &str) -> Result<()> {
    if t.dims() != dims {
        return Err(Error::Shape(format!("{what}: expected shape {dims:?}, got {:?}", t.shape())));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams {
    /// `[kh, kw, in_ch, out_ch]`
    pub kernels: Tensor,
    /// `[out_ch]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2dParams {
    pub fn new(kernels: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let params = Conv2dParams { kernels, bias, stride, padding };
        params.kernel_dims()?;
        Ok(params)
    }

    /// `[kh, kw, in_ch, out_ch]`, validated against the bias and stride.
    pub fn kernel_dims(&self) -> Result<[usize; 4]> {
        let dims = match *self.kernels.dims() {
            [kh, kw, ci, co] => [kh, kw, ci, co],
            _ => {
                return Err(Error::Shape(format!(
                    "conv kernels must be [kh, kw, in_ch, out_ch], got {:?}",
                    self.kernels.shape()
                )))
            }
        };
        expect_dims(&self.bias, &[dims[3]], "conv bias")?;
        if self.stride == 0 {
            return Err(Error::Argument("conv stride must be >= 1".into()));
        }
        Ok(dims)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: [usize; 4], kernel: [usize; 4], stride: usize, padding: Padding) -> Result<Self> {
        let [n, h, w, cin] = input;
        let [kh, kw, kcin, cout] = kernel;
        if cin != kcin {
            return Err(Error::Shape(format!("conv2d: input has {cin} channels, kernels expect {kcin}")));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
                let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, pad_h / 2, pad_w / 2)
            }
            Padding::Valid => {
                if h < kh || w < kw {
                    return Err(Error::Shape(format!("conv2d: {h}x{w} input is smaller than the {kh}x{kw} kernel")));
                }
                ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0)
            }
        };
        Ok(ConvGeometry { n, h, w, cin, kh, kw, cout, stride, pad_top, pad_left, oh, ow })
    }

    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn output_dims(&self) -> [usize; 4] {
        [self.n, self.oh, self.ow, self.cout]
    }

    /// Input pixel feeding kernel tap `(di, dj)` at output `(oy, ox)`, if it
    /// is not padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, di: usize, dj: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + di).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + dj).checked_sub(self.pad_left)?;
        (iy < self.h && ix < self.w).then_some((iy, ix))
    }

    /// Visits every (patch row, patch column offset, input offset) triple
    /// whose input pixel is inside the image. Each visit covers `cin`
    /// contiguous values on both sides.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let patch = self.patch_len();
        for b in 0..self.n {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    for di in 0..self.kh {
                        for dj in 0..self.kw {
                            if let Some((iy, ix)) = self.source(oy, ox, di, dj) {
                                let col = row * patch + (di * self.kw + dj) * self.cin;
                                let src = ((b * self.h + iy) * self.w + ix) * self.cin;
                                f(col, src);
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.rows() * self.patch_len()];
        let cin = self.cin;
        self.for_each_tap(|col, src| {
            cols[col..col + cin].copy_from_slice(&input[src..src + cin]);
        });
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let mut image = vec![0.0; self.n * self.h * self.w * self.cin];
        let cin = self.cin;
        self.for_each_tap(|col, src| {
            for (dst, &g) in image[src..src + cin].iter_mut().zip(&cols[col..col + cin]) {
                *dst += g;
            }
        });
        image
    }
}

#[derive(Debug)]
pub struct Conv2dCache {
    geometry: ConvGeometry,
    padding: Padding,
    /// `[n·oh·ow, kh·kw·in_ch]` patch matrix of the forward input.
    cols: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// `out[b,i,j,o] = bias[o] + Σ_{di,dj,ci} in[b, i·s+di, j·s+dj, ci] · k[di,dj,ci,o]`
/// over the zero-padded input.
///
/// The sum runs channel-innermost, then kernel column, then kernel row,
/// starting from `0.0`, and the bias is added last.
pub fn conv2d_forward(input: &Tensor, params: &Conv2dParams) -> Result<(Tensor, Conv2dCache)> {
    let kernel = params.kernel_dims()?;
    let geometry = ConvGeometry::new(nhwc(input, "conv2d input")?, kernel, params.stride, params.padding)?;
    let cols = geometry.im2col(input.data());
    let (rows, patch, cout) = (geometry.rows(), geometry.patch_len(), geometry.cout);
    let mut out = vec![0.0; rows * cout];
    gemm_nn(&cols, params.kernels.data(), &mut out, rows, patch, cout);
    for row in out.chunks_exact_mut(cout) {
        for (v, &b) in row.iter_mut().zip(params.bias.data()) {
            *v += b;
        }
    }
    let out = Tensor::from_vec(&geometry.output_dims(), out)?;
    let cache = Conv2dCache { geometry, padding: params.padding, cols: Tensor::from_vec(&[rows, patch], cols)? };
    Ok((out, cache))
}

pub fn conv2d_backward(grad_out: &Tensor, cache: Conv2dCache, params: &Conv2dParams) -> Result<Conv2dGrads> {
    let g = cache.geometry;
    let kernel = params.kernel_dims()?;
    if kernel != [g.kh, g.kw, g.cin, g.cout] || params.stride != g.stride || params.padding != cache.padding {
        return Err(Error::State(format!(
            "conv2d cache was built for kernels {:?} stride {} {:?}, got {:?} stride {} {:?}",
            [g.kh, g.kw, g.cin, g.cout],
            g.stride,
            cache.padding,
            kernel,
            params.stride,
            params.padding
        )));
    }
    expect_dims(grad_out, &g.output_dims(), "conv2d grad_out")?;

    let (rows, patch, cout) = (g.rows(), g.patch_len(), g.cout);
    let grad_mat = Tensor::from_vec(&[rows, cout], grad_out.data().to_vec())?;

    let mut grad_bias = vec![0.0; cout];
    for row in grad_mat.data().chunks_exact(cout) {
        for (acc, &v) in grad_bias.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let grad_kernels = cache.cols.transpose_matmul(&grad_mat)?.reshape(params.kernels.dims())?;
    let kernel_mat = Tensor::from_vec(&[patch, cout], params.kernels.data().to_vec())?;
    let grad_cols = grad_mat.matmul_transpose(&kernel_mat)?;
    let grad_input = Tensor::from_vec(&[g.n, g.h, g.w, g.cin], g.col2im(grad_cols.data()))?;

    Ok(Conv2dGrads { input: grad_input, kernels: grad_kernels, bias: Tensor::from_vec(&[cout], grad_bias)? })
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ReluCache {
    active: Vec<bool>,
    dims: Vec<usize>,
}

pub fn relu_forward(x: &Tensor) -> (Tensor, ReluCache) {
    let out = x.map_unary(|v| if v > 0.0 { v } else { 0.0 });
    let cache = ReluCache { active: x.data().iter().map(|&v| v > 0.0).collect(), dims: x.dims().to_vec() };
    (out, cache)
}

/// Subgradient 0 at exactly zero input.
pub fn relu_backward(grad_out: &Tensor, cache: ReluCache) -> Result<Tensor> {
    expect_dims(grad_out, &cache.dims, "relu grad_out")?;
    let data = grad_out.data().iter().zip(&cache.active).map(|(&g, &on)| if on { g } else { 0.0 }).collect();
    Tensor::from_vec(&cache.dims, data)
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct MaxPoolCache {
    input_dims: [usize; 4],
    output_dims: [usize; 4],
    /// Flat input index of the maximum for every output element.
    argmax: Vec<usize>,
}

/// Square `pool × pool` max-pooling without padding. Output extent is
/// `(h - pool) / stride + 1`; ties resolve to the first maximum in row-major
/// window order.
pub fn maxpool2d_forward(input: &Tensor, pool: usize, stride: usize) -> Result<(Tensor, MaxPoolCache)> {
    let [n, h, w, c] = nhwc(input, "maxpool2d input")?;
    if pool == 0 || stride == 0 {
        return Err(Error::Argument("pool size and stride must be >= 1".into()));
    }
    if h < pool || w < pool {
        return Err(Error::Shape(format!("maxpool2d: {pool}x{pool} window does not fit a {h}x{w} input")));
    }
    let (oh, ow) = ((h - pool) / stride + 1, (w - pool) / stride + 1);
    let x = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = ((b * h + oy * stride) * w + ox * stride) * c + ch;
                    let mut best = x[best_idx];
                    for di in 0..pool {
                        for dj in 0..pool {
                            let idx = ((b * h + oy * stride + di) * w + ox * stride + dj) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    let output_dims = [n, oh, ow, c];
    Ok((Tensor::from_vec(&output_dims, out)?, MaxPoolCache { input_dims: [n, h, w, c], output_dims, argmax }))
}

/// Routes each output gradient to its argmax; overlapping windows add up.
pub fn maxpool2d_backward(grad_out: &Tensor, cache: MaxPoolCache) -> Result<Tensor> {
    expect_dims(grad_out, &cache.output_dims, "maxpool2d grad_out")?;
    let mut grad = vec![0.0; cache.input_dims.iter().product()];
    for (&g, &idx) in grad_out.data().iter().zip(&cache.argmax) {
        grad[idx] += g;
    }
    Tensor::from_vec(&cache.input_dims, grad)
}

// ---------------------------------------------------------------------------
// Fully connected
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `[in_features, out_features]`
    pub weight: Tensor,
    /// `[out_features]`
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let params = DenseParams { weight, bias };
        params.features()?;
        Ok(params)
    }

    /// `(in_features, out_features)`
    pub fn features(&self) -> Result<(usize, usize)> {
        match *self.weight.dims() {
            [fin, fout] => {
                expect_dims(&self.bias, &[fout], "dense bias")?;
                Ok((fin, fout))
            }
            _ => Err(Error::Shape(format!("dense weight must be [in, out], got {:?}", self.weight.shape()))),
        }
    }
}

#[derive(Debug)]
pub struct DenseCache {
    input: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `x · W + b`, bias broadcast over rows.
pub fn dense_forward(x: &Tensor, params: &DenseParams) -> Result<(Tensor, DenseCache)> {
    let (fin, fout) = params.features()?;
    match *x.dims() {
        [_, f] if f == fin => {}
        _ => return Err(Error::Shape(format!("dense: input {:?} does not match {fin} input features", x.shape()))),
    }
    let mut out = x.matmul(&params.weight)?;
    for row in out.data_mut().chunks_exact_mut(fout) {
        for (v, &b) in row.iter_mut().zip(params.bias.data()) {
            *v += b;
        }
    }
    Ok((out, DenseCache { input: x.clone() }))
}

pub fn dense_backward(grad_out: &Tensor, cache: DenseCache, params: &DenseParams) -> Result<DenseGrads> {
    let (fin, fout) = params.features()?;
    let n = cache.input.dims()[0];
    if cache.input.dims()[1] != fin {
        return Err(Error::State(format!("dense cache holds {} features, params expect {fin}", cache.input.dims()[1])));
    }
    expect_dims(grad_out, &[n, fout], "dense grad_out")?;
    let grad_input = grad_out.matmul_transpose(&params.weight)?;
    let grad_weight = cache.input.transpose_matmul(grad_out)?;
    let mut grad_bias = vec![0.0; fout];
    for row in grad_out.data().chunks_exact(fout) {
        for (acc, &g) in grad_bias.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads { input: grad_input, weight: grad_weight, bias: Tensor::from_vec(&[fout], grad_bias)? })
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutSpec {
    drop_prob: f64,
    pub mode: Mode,
}

impl DropoutSpec {
    pub fn new(drop_prob: f64, mode: Mode) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_prob) {
            return Err(Error::Argument(format!("dropout probability must lie in [0, 1), got {drop_prob}")));
        }
        Ok(DropoutSpec { drop_prob, mode })
    }

    pub fn drop_prob(&self) -> f64 {
        self.drop_prob
    }
}

#[derive(Debug)]
pub struct DropoutCache {
    dims: Vec<usize>,
    /// `mask / (1 - p)` per element; `None` for an eval-mode pass.
    scaled_mask: Option<Vec<f64>>,
}

/// Inverted dropout: in train mode each element survives with probability
/// `1 - p` and is scaled by `1 / (1 - p)`; eval mode is the identity.
pub fn dropout_forward(x: &Tensor, spec: DropoutSpec, rng: &mut Rng) -> (Tensor, DropoutCache) {
    match spec.mode {
        Mode::Eval => (x.clone(), DropoutCache { dims: x.dims().to_vec(), scaled_mask: None }),
        Mode::Train => {
            let keep_scale = 1.0 / (1.0 - spec.drop_prob);
            let mask: Vec<f64> =
                (0..x.len()).map(|_| if rng.uniform() >= spec.drop_prob { keep_scale } else { 0.0 }).collect();
            let out: Vec<f64> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (
                Tensor::from_vec(x.dims(), out).expect("mask has the input's length"),
                DropoutCache { dims: x.dims().to_vec(), scaled_mask: Some(mask) },
            )
        }
    }
}

pub fn dropout_backward(grad_out: &Tensor, cache: DropoutCache) -> Result<Tensor> {
    let mask =
        cache.scaled_mask.ok_or_else(|| Error::State("dropout backward needs a train-mode forward cache".into()))?;
    expect_dims(grad_out, &cache.dims, "dropout grad_out")?;
    let data = grad_out.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
    Tensor::from_vec(&cache.dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(dims, data.to_vec()).unwrap()
    }

    fn randn(dims: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::random_normal(dims, 0.0, 1.0, None, rng).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Central difference of `f` along every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let eps = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += eps;
                let mut minus = x.clone();
                minus.data_mut()[i] -= eps;
                (f(&plus) - f(&minus)) / (2.0 * eps)
            })
            .collect()
    }

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Direct summation in the documented order.
    fn conv_reference(input: &Tensor, p: &Conv2dParams) -> Tensor {
        let [n, h, w, cin] = nhwc(input, "").unwrap();
        let [kh, kw, _, cout] = p.kernel_dims().unwrap();
        let s = p.stride;
        let (oh, ow, pt, pl) = match p.padding {
            Padding::Same => {
                let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
                let ph = ((oh - 1) * s + kh).saturating_sub(h);
                let pw = ((ow - 1) * s + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
            Padding::Valid => ((h - kh) / s + 1, (w - kw) / s + 1, 0, 0),
        };
        let mut out = Tensor::zeros(&[n, oh, ow, cout]).unwrap();
        for b in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    for o in 0..cout {
                        let mut acc = 0.0;
                        for di in 0..kh {
                            for dj in 0..kw {
                                for ci in 0..cin {
                                    let y = (i * s + di) as isize - pt as isize;
                                    let x = (j * s + dj) as isize - pl as isize;
                                    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                        continue;
                                    }
                                    let v = input.get(&[b, y as usize, x as usize, ci]).unwrap();
                                    acc += v * p.kernels.get(&[di, dj, ci, o]).unwrap();
                                }
                            }
                        }
                        let idx = out.shape().flat_index(&[b, i, j, o]).unwrap();
                        out.data_mut()[idx] = p.bias.data()[o] + acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = Rng::new(1);
        let x = randn(&[2, 3, 4, 1], &mut rng);
        let p = Conv2dParams::new(t(&[1, 1, 1, 1], &[1.0]), t(&[1], &[0.0]), 1, Padding::Same).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernels_give_zeros() {
        let mut rng = Rng::new(2);
        let x = randn(&[1, 5, 5, 2], &mut rng);
        let p =
            Conv2dParams::new(Tensor::zeros(&[3, 3, 2, 4]).unwrap(), Tensor::zeros(&[4]).unwrap(), 1, Padding::Same)
                .unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y, Tensor::zeros(&[1, 5, 5, 4]).unwrap());
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = Rng::new(3);
        let x = randn(&[1, 4, 4, 1], &mut rng);
        let p = Conv2dParams::new(randn(&[3, 3, 1, 2], &mut rng), randn(&[2], &mut rng), 1, Padding::Same).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y, conv_reference(&x, &p));
    }

    #[test]
    fn conv_same_padding_extent_with_stride() {
        let mut rng = Rng::new(4);
        let x = randn(&[1, 7, 5, 2], &mut rng);
        let p = Conv2dParams::new(randn(&[3, 2, 2, 3], &mut rng), randn(&[3], &mut rng), 2, Padding::Same).unwrap();
        let (y, _) = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.dims(), &[1, 4, 3, 3]);
        assert_eq!(y, conv_reference(&x, &p));
    }

    #[test]
    fn conv_errors() {
        let p =
            Conv2dParams::new(Tensor::zeros(&[3, 3, 2, 1]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Valid)
                .unwrap();
        let wrong_channels = Tensor::zeros(&[1, 4, 4, 3]).unwrap();
        assert!(matches!(conv2d_forward(&wrong_channels, &p), Err(Error::Shape(_))));
        let too_small = Tensor::zeros(&[1, 2, 4, 2]).unwrap();
        assert!(matches!(conv2d_forward(&too_small, &p), Err(Error::Shape(_))));

        let x = Tensor::zeros(&[1, 4, 4, 2]).unwrap();
        let (y, cache) = conv2d_forward(&x, &p).unwrap();
        let other =
            Conv2dParams::new(Tensor::zeros(&[1, 1, 2, 1]).unwrap(), Tensor::zeros(&[1]).unwrap(), 1, Padding::Valid)
                .unwrap();
        assert!(matches!(conv2d_backward(&y, cache, &other), Err(Error::State(_))));
    }

    #[test]
    fn conv_backward_zero_and_scalar() {
        let mut rng = Rng::new(5);
        let x = randn(&[2, 4, 4, 2], &mut rng);
        let p = Conv2dParams::new(randn(&[3, 3, 2, 2], &mut rng), randn(&[2], &mut rng), 1, Padding::Same).unwrap();
        let (y, cache) = conv2d_forward(&x, &p).unwrap();
        let g = conv2d_backward(&Tensor::zeros(y.dims()).unwrap(), cache, &p).unwrap();
        assert_eq!(g.input.sum_of_squares() + g.kernels.sum_of_squares() + g.bias.sum_of_squares(), 0.0);

        let x = t(&[1, 1, 1, 1], &[1.5]);
        let p = Conv2dParams::new(t(&[1, 1, 1, 1], &[-2.0]), t(&[1], &[0.0]), 1, Padding::Same).unwrap();
        let (_, cache) = conv2d_forward(&x, &p).unwrap();
        let g = conv2d_backward(&t(&[1, 1, 1, 1], &[0.7]), cache, &p).unwrap();
        assert!((g.kernels.data()[0] - 0.7 * 1.5).abs() < 1e-15);
        assert!((g.input.data()[0] - 0.7 * -2.0).abs() < 1e-15);
        assert_eq!(g.bias.data(), &[0.7]);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = Rng::new(6);
        for &(stride, padding) in &[(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid)] {
            let x = randn(&[2, 5, 4, 2], &mut rng);
            let p = Conv2dParams::new(randn(&[3, 2, 2, 3], &mut rng), randn(&[3], &mut rng), stride, padding).unwrap();
            let (y, cache) = conv2d_forward(&x, &p).unwrap();
            let proj = randn(y.dims(), &mut rng);
            let g = conv2d_backward(&proj, cache, &p).unwrap();

            let num_x = numeric_grad(&x, |xx| dot(&conv2d_forward(xx, &p).unwrap().0, &proj));
            for (a, n) in g.input.data().iter().zip(&num_x) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
            let num_k = numeric_grad(&p.kernels, |k| {
                let q = Conv2dParams { kernels: k.clone(), ..p.clone() };
                dot(&conv2d_forward(&x, &q).unwrap().0, &proj)
            });
            for (a, n) in g.kernels.data().iter().zip(&num_k) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
            let num_b = numeric_grad(&p.bias, |b| {
                let q = Conv2dParams { bias: b.clone(), ..p.clone() };
                dot(&conv2d_forward(&x, &q).unwrap().0, &proj)
            });
            for (a, n) in g.bias.data().iter().zip(&num_b) {
                assert!(rel_err(*a, *n) < 1e-4, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn relu_examples() {
        let (y, _) = relu_forward(&t(&[3], &[-3.0, 0.0, 5.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 5.0]);
        let neg = t(&[2, 2], &[-1.0, -0.5, -7.0, -1e-9]);
        assert_eq!(relu_forward(&neg).0, Tensor::zeros(&[2, 2]).unwrap());
        let pos = t(&[3], &[0.1, 2.0, 9.0]);
        assert_eq!(relu_forward(&pos).0, pos);
    }

    #[test]
    fn relu_backward_routing() {
        let g = t(&[3], &[1.0, 2.0, 3.0]);
        let (_, cache) = relu_forward(&t(&[3], &[1.0, 2.0, 0.5]));
        assert_eq!(relu_backward(&g, cache).unwrap(), g);
        let (_, cache) = relu_forward(&t(&[3], &[-1.0, -2.0, -0.5]));
        assert_eq!(relu_backward(&g, cache).unwrap(), Tensor::zeros(&[3]).unwrap());
        let (_, cache) = relu_forward(&t(&[3], &[0.0, 1.0, -1.0]));
        assert_eq!(relu_backward(&g, cache).unwrap().data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn maxpool_examples() {
        let c = Tensor::full(&[1, 4, 4, 2], 3.25).unwrap();
        let (y, _) = maxpool2d_forward(&c, 2, 2).unwrap();
        assert_eq!(y, Tensor::full(&[1, 2, 2, 2], 3.25).unwrap());

        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let (y, cache) = maxpool2d_forward(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let g = maxpool2d_backward(&t(&[1, 1, 1, 1], &[0.5]), cache).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 0.5]);

        let ramp = Tensor::from_vec(&[1, 4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let (y, _) = maxpool2d_forward(&ramp, 2, 2).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let (y, _) = maxpool2d_forward(&ramp, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 3, 3, 1]);
        assert_eq!(y.data(), &[5.0, 6.0, 7.0, 9.0, 10.0, 11.0, 13.0, 14.0, 15.0]);
    }

    #[test]
    fn maxpool_ties_pick_first_and_overlaps_accumulate() {
        let x = Tensor::full(&[1, 3, 3, 1], 1.0).unwrap();
        let (_, cache) = maxpool2d_forward(&x, 2, 1).unwrap();
        let g = maxpool2d_backward(&Tensor::full(&[1, 2, 2, 1], 1.0).unwrap(), cache).unwrap();
        // Every window's first element in row-major order wins.
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

        let x = t(&[1, 3, 3, 1], &[0.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 0.0]);
        let (_, cache) = maxpool2d_forward(&x, 2, 1).unwrap();
        let g = maxpool2d_backward(&Tensor::full(&[1, 2, 2, 1], 1.0).unwrap(), cache).unwrap();
        assert_eq!(g.data()[4], 4.0);
    }

    #[test]
    fn maxpool_errors_and_zero_grad() {
        let x = Tensor::zeros(&[1, 1, 4, 1]).unwrap();
        assert!(matches!(maxpool2d_forward(&x, 2, 2), Err(Error::Shape(_))));
        let x = Tensor::full(&[1, 4, 4, 1], 2.0).unwrap();
        let (y, cache) = maxpool2d_forward(&x, 2, 2).unwrap();
        let g = maxpool2d_backward(&Tensor::zeros(y.dims()).unwrap(), cache).unwrap();
        assert_eq!(g, Tensor::zeros(&[1, 4, 4, 1]).unwrap());
    }

    #[test]
    fn dense_examples() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let p = DenseParams::new(t(&[2, 1], &[1.0, 1.0]), t(&[1], &[0.5])).unwrap();
        assert_eq!(dense_forward(&x, &p).unwrap().0.data(), &[3.5]);

        let id = DenseParams::new(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), Tensor::zeros(&[2]).unwrap()).unwrap();
        let x = t(&[3, 2], &[1.0, -2.0, 3.0, 4.5, 0.0, 7.0]);
        assert_eq!(dense_forward(&x, &id).unwrap().0, x);

        let bad = Tensor::zeros(&[3, 3]).unwrap();
        assert!(matches!(dense_forward(&bad, &id), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_backward_scalar_and_zero() {
        let p = DenseParams::new(t(&[1, 1], &[3.0]), t(&[1], &[1.0])).unwrap();
        let (_, cache) = dense_forward(&t(&[1, 1], &[2.0]), &p).unwrap();
        let g = dense_backward(&t(&[1, 1], &[0.5]), cache, &p).unwrap();
        assert_eq!(g.input.data(), &[1.5]);
        assert_eq!(g.weight.data(), &[1.0]);
        assert_eq!(g.bias.data(), &[0.5]);

        let mut rng = Rng::new(7);
        let p = DenseParams::new(randn(&[4, 2], &mut rng), randn(&[2], &mut rng)).unwrap();
        let (_, cache) = dense_forward(&randn(&[3, 4], &mut rng), &p).unwrap();
        let g = dense_backward(&Tensor::zeros(&[3, 2]).unwrap(), cache, &p).unwrap();
        assert_eq!(g.input.sum_of_squares() + g.weight.sum_of_squares() + g.bias.sum_of_squares(), 0.0);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let x = randn(&[3, 4], &mut rng);
        let p = DenseParams::new(randn(&[4, 2], &mut rng), randn(&[2], &mut rng)).unwrap();
        let proj = randn(&[3, 2], &mut rng);
        let (_, cache) = dense_forward(&x, &p).unwrap();
        let g = dense_backward(&proj, cache, &p).unwrap();
        let num = numeric_grad(&x, |xx| dot(&dense_forward(xx, &p).unwrap().0, &proj));
        for (a, n) in g.input.data().iter().zip(&num) {
            assert!(rel_err(*a, *n) < 1e-4);
        }
        let num = numeric_grad(&p.weight, |w| {
            let q = DenseParams { weight: w.clone(), bias: p.bias.clone() };
            dot(&dense_forward(&x, &q).unwrap().0, &proj)
        });
        for (a, n) in g.weight.data().iter().zip(&num) {
            assert!(rel_err(*a, *n) < 1e-4);
        }
    }

    #[test]
    fn dropout_eval_and_p_zero_are_identity() {
        let mut rng = Rng::new(9);
        let x = randn(&[4, 5], &mut rng);
        let (y, cache) = dropout_forward(&x, DropoutSpec::new(0.5, Mode::Eval).unwrap(), &mut rng);
        assert_eq!(y, x);
        assert!(matches!(dropout_backward(&x, cache), Err(Error::State(_))));

        let (y, cache) = dropout_forward(&x, DropoutSpec::new(0.0, Mode::Train).unwrap(), &mut rng);
        assert_eq!(y, x);
        let g = randn(&[4, 5], &mut rng);
        assert_eq!(dropout_backward(&g, cache).unwrap(), g);
    }

    #[test]
    fn dropout_rejects_bad_probability() {
        assert!(DropoutSpec::new(1.0, Mode::Train).is_err());
        assert!(DropoutSpec::new(-0.1, Mode::Train).is_err());
    }

    #[test]
    fn dropout_backward_zeroes_dropped_units() {
        let mut rng = Rng::new(10);
        let x = Tensor::full(&[1, 64], 1.0).unwrap();
        let (y, cache) = dropout_forward(&x, DropoutSpec::new(0.5, Mode::Train).unwrap(), &mut rng);
        let g = dropout_backward(&Tensor::full(&[1, 64], 1.0).unwrap(), cache).unwrap();
        for (yv, gv) in y.data().iter().zip(g.data()) {
            assert!(*yv == 0.0 && *gv == 0.0 || *yv == 2.0 && *gv == 2.0);
        }
        assert!(y.data().contains(&0.0) && y.data().contains(&2.0));
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = Rng::new(11);
        let x = Tensor::full(&[1, 10], 1.7).unwrap();
        let spec = DropoutSpec::new(0.5, Mode::Train).unwrap();
        let passes = 10_000;
        let mut total = 0.0;
        for _ in 0..passes {
            total += dropout_forward(&x, spec, &mut rng).0.sum();
        }
        let mean = total / (passes * x.len()) as f64;
        assert!((mean - 1.7).abs() < 0.02 * 1.7, "{mean}");
    }
}
