//! Reference implementations shared by the integration tests. None of them
//! call into the code they are used to check.

#![allow(dead_code)]

use std::path::PathBuf;

use cnn_svm::dataset::{dataset_available, DatasetName};
use cnn_svm::layers::Padding;
use cnn_svm::Tensor;

pub const FD_EPSILON: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error. Central differences at
/// `FD_EPSILON` carry absolute rounding noise of roughly 1e-10 for losses of
/// order one, so components below this size cannot be compared at
/// `FD_TOLERANCE` relative precision.
pub const FD_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_EPSILON;
            let up = f(&probe);
            probe[i] = orig - FD_EPSILON;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_EPSILON)
        })
        .collect()
}

/// Largest relative error between `analytic` and the central-difference
/// gradient of `f` at `x`.
pub fn max_gradient_error(x: &[f64], analytic: &[f64], f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    numeric_gradient(x, f).into_iter().zip(analytic).map(|(n, &a)| relative_error(a, n)).fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct NHWC convolution with kernels `[kh, kw, in, out]`. Each output
/// sums channel-innermost, then kernel column, then kernel row, starting
/// from 0.0, and adds the bias last.
pub fn conv_reference(x: &Tensor, k: &Tensor, bias: &[f64], stride: usize, padding: Padding) -> Tensor {
    let &[n, h, w, cin] = x.dims() else { panic!("input rank") };
    let &[kh, kw, kcin, cout] = k.dims() else { panic!("kernel rank") };
    assert_eq!(cin, kcin);
    let (oh, ow, pad_top, pad_left) = match padding {
        Padding::Same => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let pad_h = ((oh - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((ow - 1) * stride + kw).saturating_sub(w);
            (oh, ow, pad_h / 2, pad_w / 2)
        }
        Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
    };
    let xd = x.data();
    let kd = k.data();
    let mut out = Vec::with_capacity(n * oh * ow * cout);
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut sum = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad_top as isize;
                            let ix = (ox * stride + kx) as isize - pad_left as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            for ci in 0..cin {
                                sum += xd[((b * h + iy) * w + ix) * cin + ci]
                                    * kd[((ky * kw + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out.push(sum + bias[co]);
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, cout], out).unwrap()
}

/// Textbook Adam on a scalar. Returns θ after every step.
pub fn scalar_adam(theta0: f64, steps: usize, lr: f64, grad: impl Fn(f64) -> f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut theta, mut m, mut v) = (theta0, 0.0, 0.0);
    let mut trace = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = grad(theta);
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let v_hat = v / (1.0 - b2.powi(t as i32));
        theta -= lr * m_hat / (v_hat.sqrt() + eps);
        trace.push(theta);
    }
    trace
}

/// Where the datasets live: `$CNN_SVM_DATA_DIR`, else `<workspace>/data`.
pub fn data_dir() -> PathBuf {
    std::env::var_os("CNN_SVM_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

pub fn have(dataset: DatasetName) -> bool {
    dataset_available(&data_dir(), dataset)
}

/// Absent datasets are skipped unless this is set.
pub fn data_required() -> bool {
    std::env::var_os("CNN_SVM_REQUIRE_DATA").is_some_and(|v| v != "0")
}
