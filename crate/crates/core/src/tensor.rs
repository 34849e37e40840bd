//! Dense row-major tensors of `f64`.
//!
//! A [`Tensor`] owns a flat buffer whose length always equals the element
//! count of its [`Shape`]. Operations allocate fresh outputs and leave their
//! inputs untouched.
//!
//! The matrix products accumulate each output element strictly in ascending
//! order of the contraction index, starting from `0.0`. Convolution relies on
//! this to reproduce a direct nested-loop summation bit for bit.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Largest element count we allow, in `f64`s addressable by a slice.
const MAX_ELEMENTS: usize = isize::MAX as usize / std::mem::size_of::<f64>();

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape {
    dims: Vec<usize>,
    numel: usize,
}

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("a shape needs at least one extent".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("extent {pos} of {dims:?} is zero; every extent must be >= 1")));
        }
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Size(format!("element count of {dims:?} overflows")))?;
        Ok(Shape { dims: dims.to_vec(), numel })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.numel
    }

    /// Row-major strides: the stride of axis `k` is the product of the
    /// extents after it.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for k in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }

    pub fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        if coords.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "coordinate {coords:?} has rank {}, shape {:?} has rank {}",
                coords.len(),
                self.dims,
                self.dims.len()
            )));
        }
        let mut flat = 0;
        for ((&c, &d), s) in coords.iter().zip(&self.dims).zip(self.strides()) {
            if c >= d {
                return Err(Error::Shape(format!("coordinate {coords:?} out of bounds for {:?}", self.dims)));
            }
            flat += c * s;
        }
        Ok(flat)
    }

    pub fn coords(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.numel {
            return Err(Error::Shape(format!("flat index {flat} out of bounds for {:?}", self.dims)));
        }
        let mut coords = vec![0; self.dims.len()];
        for (k, s) in self.strides().into_iter().enumerate() {
            coords[k] = flat / s;
            flat %= s;
        }
        Ok(coords)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.dims)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!(
                "{} values cannot fill shape {:?} ({} elements)",
                data.len(),
                dims,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Samples i.i.d. normal values. With `truncate_at = Some(k)` any draw
    /// farther than `k` standard deviations from the mean is redrawn.
    pub fn random_normal(
        dims: &[usize],
        mean: f64,
        stddev: f64,
        truncate_at: Option<f64>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if !(stddev > 0.0 && stddev.is_finite()) {
            return Err(Error::Argument(format!("stddev must be positive and finite, got {stddev}")));
        }
        if let Some(k) = truncate_at {
            if k.is_nan() || k <= 0.0 {
                return Err(Error::Argument(format!("truncation bound must be positive, got {k}")));
            }
        }
        let shape = Shape::new(dims)?;
        let data = (0..shape.numel())
            .map(|_| loop {
                let z = rng.normal();
                match truncate_at {
                    Some(k) if z.abs() > k => continue,
                    _ => break mean + stddev * z,
                }
            })
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn get(&self, coords: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.flat_index(coords)?])
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::from_vec(dims, self.data)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map_unary(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map_unary(|x| x * k)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{what}: shapes {:?} and {:?} differ", self.shape, other.shape)));
        }
        Ok(())
    }

    fn matrix_dims(&self, what: &str) -> Result<(usize, usize)> {
        match *self.dims() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Shape(format!("{what}: expected a rank-2 tensor, got {:?}", self.shape))),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (rows, cols) = self.matrix_dims("transpose")?;
        const BLOCK: usize = 32;
        let mut out = vec![0.0; rows * cols];
        for r0 in (0..rows).step_by(BLOCK) {
            for c0 in (0..cols).step_by(BLOCK) {
                for r in r0..(r0 + BLOCK).min(rows) {
                    for c in c0..(c0 + BLOCK).min(cols) {
                        out[c * rows + r] = self.data[r * cols + c];
                    }
                }
            }
        }
        Tensor::from_vec(&[cols, rows], out)
    }

    /// `self · other` for `[m, k] · [k, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul lhs")?;
        let (k2, n) = other.matrix_dims("matmul rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul: inner extents differ ({:?} · {:?})", self.shape, other.shape)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.data, &mut out, m, k, n);
        Tensor::from_vec(&[m, n], out)
    }

    /// `selfᵀ · other` for `[r, m]ᵀ · [r, n]`.
    pub fn transpose_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (r, m) = self.matrix_dims("transpose_matmul lhs")?;
        let (r2, n) = other.matrix_dims("transpose_matmul rhs")?;
        if r != r2 {
            return Err(Error::Shape(format!(
                "transpose_matmul: row counts differ ({:?}ᵀ · {:?})",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.transpose()?.data, &other.data, &mut out, m, r, n);
        Tensor::from_vec(&[m, n], out)
    }

    /// `self · otherᵀ` for `[m, k] · [n, k]ᵀ`.
    pub fn matmul_transpose(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul_transpose lhs")?;
        let (n, k2) = other.matrix_dims("matmul_transpose rhs")?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul_transpose: column counts differ ({:?} · {:?}ᵀ)",
                self.shape, other.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.data, &other.transpose()?.data, &mut out, m, k, n);
        Tensor::from_vec(&[m, n], out)
    }
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c += a · b` with row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
///
/// For every output element the products are added in ascending `t`, so the
/// result equals a plain triple loop bit for bit. Rows of `a` are processed
/// four at a time to reuse each row of `b`. A `t` whose `a` entries are all
/// zero is skipped; for finite `b` that cannot change the result, since
/// adding a signed zero to a running sum that started at `+0.0` leaves it
/// bit-identical.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let blocked = m - m % 4;
    for i in (0..blocked).step_by(4) {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let a_rows = &a[i * k..(i + 4) * k];
        for t in 0..k {
            let (a0, a1, a2, a3) = (a_rows[t], a_rows[k + t], a_rows[2 * k + t], a_rows[3 * k + t]);
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            let (c0, c1, c2, c3) = (&mut c0[..n], &mut c1[..n], &mut c2[..n], &mut c3[..n]);
            for j in 0..n {
                let bv = b_row[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for i in blocked..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            axpy(av, &b[t * n..(t + 1) * n], c_row);
        }
    }
}
