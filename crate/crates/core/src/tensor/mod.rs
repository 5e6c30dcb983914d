//! Dense rank-≤4 tensors of `f64` in row-major layout.
//!
//! Image-shaped data uses the `N×C×H×W` convention throughout the crate.

mod io;

pub use io::{read_tensor, write_tensor, DType, TENSOR_MAGIC};

use std::fmt;

use crate::error::{DpaError, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(DpaError::shape(format!(
            "rank {} exceeds maximum rank {MAX_RANK}",
            shape.len()
        )));
    }
    if shape.contains(&0) {
        return Err(DpaError::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DpaError::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        check_shape(shape)?;
        let numel = shape.iter().product();
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len().max(1)],
            data: if values.is_empty() {
                vec![0.0]
            } else {
                values.to_vec()
            },
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extent of a dimension, or 1 when the tensor has lower rank.
    pub fn dim(&self, axis: usize) -> usize {
        self.shape.get(axis).copied().unwrap_or(1)
    }

    /// Extents padded on the right with ones to rank 4.
    pub fn dims4(&self) -> [usize; 4] {
        let mut out = [1; 4];
        out[..self.shape.len()].copy_from_slice(&self.shape);
        out
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Element at a multi-index given in the tensor's own rank.
    pub fn at(&self, index: &[usize]) -> f64 {
        let strides = strides_of(&self.shape);
        let offset: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        self.data[offset]
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Decomposition of the shape around `axis` into `(outer, len, inner)` so that
    /// element `(o, i, j)` lives at `o * len * inner + i * inner + j`.
    pub fn axis_layout(&self, axis: usize) -> (usize, usize, usize) {
        axis_layout(&self.shape, axis)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(DpaError::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when viewed at the (higher or equal) rank of `target`,
/// with zero stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> [usize; MAX_RANK] {
    let own = strides_of(shape);
    let offset = target.len() - shape.len();
    let mut out = [0; MAX_RANK];
    for (i, &d) in shape.iter().enumerate() {
        if d != 1 || target[i + offset] == 1 {
            out[i + offset + MAX_RANK - target.len()] = own[i];
        }
    }
    out
}

fn padded(shape: &[usize]) -> [usize; MAX_RANK] {
    let mut out = [1; MAX_RANK];
    out[MAX_RANK - shape.len()..].copy_from_slice(shape);
    out
}

/// Elementwise binary map with broadcasting.
pub fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let d = padded(&shape);
    let mut data = Vec::with_capacity(shape.iter().product());
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..d[3] {
                    data.push(f(a.data[base_a + i3 * sa[3]], b.data[base_b + i3 * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Sums `grad` down to `shape`, undoing a broadcast from `shape` to `grad.shape()`.
pub fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let target = grad.shape.clone();
    let s = broadcast_strides(shape, &target);
    let d = padded(&target);
    let mut out = vec![0.0; shape.iter().product()];
    let mut k = 0;
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                let base = i0 * s[0] + i1 * s[1] + i2 * s[2];
                for i3 in 0..d[3] {
                    out[base + i3 * s[3]] += grad.data[k];
                    k += 1;
                }
            }
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

/// Materializes `t` broadcast to `shape`.
pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let out = broadcast_shape(&t.shape, shape)?;
    if out != shape {
        return Err(DpaError::shape(format!(
            "cannot broadcast {:?} to {shape:?}",
            t.shape
        )));
    }
    let zeros = Tensor::zeros(shape)?;
    zip_broadcast(t, &zeros, |x, _| x)
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(DpaError::shape(format!(
            "invalid permutation {perm:?} for rank {rank}"
        )));
    }
    let in_strides = strides_of(&t.shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape[p]).collect();
    let mut s = [0; MAX_RANK];
    let off = MAX_RANK - rank;
    for (i, &p) in perm.iter().enumerate() {
        s[off + i] = in_strides[p];
    }
    let d = padded(&out_shape);
    let mut data = Vec::with_capacity(t.numel());
    for i0 in 0..d[0] {
        for i1 in 0..d[1] {
            for i2 in 0..d[2] {
                for i3 in 0..d[3] {
                    data.push(t.data[i0 * s[0] + i1 * s[1] + i2 * s[2] + i3 * s[3]]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, data))
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
