//! Primitive catalog: broadcasting arithmetic, unary maps, reductions,
//! shape manipulation, softmax and matrix multiply.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::tape::{Backward, Tape, Var};
use crate::error::{DpaError, Result};
use crate::tensor::{
    broadcast_to, inverse_permutation, permute, reduce_to_shape, zip_broadcast, Tensor,
};

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct Binary(BinaryKind);

impl Backward for Binary {
    fn name(&self) -> &'static str {
        match self.0 {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ga, gb) = match self.0 {
            BinaryKind::Add => (grad.clone(), grad.clone()),
            BinaryKind::Sub => (grad.clone(), grad.map(|g| -g)),
            BinaryKind::Mul => (
                zip_broadcast(grad, b, |g, y| g * y)?,
                zip_broadcast(grad, a, |g, x| g * x)?,
            ),
            BinaryKind::Div => {
                let ga = zip_broadcast(grad, b, |g, y| g / y)?;
                let q = zip_broadcast(a, b, |x, y| -x / (y * y))?;
                (ga, zip_broadcast(grad, &q, |g, d| g * d)?)
            }
        };
        Ok(vec![
            Some(reduce_to_shape(&ga, a.shape())),
            Some(reduce_to_shape(&gb, b.shape())),
        ])
    }
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Pow(f64),
    ClampMin(f64),
    Scale(f64),
    AddScalar,
}

struct Unary(UnaryKind);

impl Backward for Unary {
    fn name(&self) -> &'static str {
        match self.0 {
            UnaryKind::Neg => "neg",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Relu => "relu",
            UnaryKind::Pow(_) => "pow",
            UnaryKind::ClampMin(_) => "clamp_min",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::AddScalar => "add_scalar",
        }
    }

    fn backward(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let g = grad.data();
        let data: Vec<f64> = match self.0 {
            UnaryKind::Neg => g.iter().map(|v| -v).collect(),
            UnaryKind::Exp => g.iter().zip(out.data()).map(|(g, y)| g * y).collect(),
            UnaryKind::Log => g.iter().zip(x.data()).map(|(g, x)| g / x).collect(),
            UnaryKind::Sigmoid => g
                .iter()
                .zip(out.data())
                .map(|(g, y)| g * y * (1.0 - y))
                .collect(),
            UnaryKind::Relu => g
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            UnaryKind::Pow(p) => g
                .iter()
                .zip(x.data())
                .map(|(g, x)| g * p * x.powf(p - 1.0))
                .collect(),
            UnaryKind::ClampMin(floor) => g
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| if x >= floor { g } else { 0.0 })
                .collect(),
            UnaryKind::Scale(c) => g.iter().map(|v| v * c).collect(),
            UnaryKind::AddScalar => g.to_vec(),
        };
        Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), data))])
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct SumBack {
    input_shape: Vec<usize>,
    keep_shape: Vec<usize>,
    scale: f64,
    name: &'static str,
}

impl Backward for SumBack {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let g = Tensor::from_parts(self.keep_shape.clone(), grad.data().to_vec());
        let mut full = broadcast_to(&g, &self.input_shape)?;
        if self.scale != 1.0 {
            full.data_mut().iter_mut().for_each(|v| *v *= self.scale);
        }
        Ok(vec![Some(full)])
    }
}

struct ExtremumBack {
    input_shape: Vec<usize>,
    /// Flat input index that produced each output element.
    arg: Vec<usize>,
    name: &'static str,
}

impl Backward for ExtremumBack {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut out = vec![0.0; self.input_shape.iter().product()];
        for (&i, &g) in self.arg.iter().zip(grad.data()) {
            out[i] += g;
        }
        Ok(vec![Some(Tensor::from_parts(self.input_shape.clone(), out))])
    }
}

struct ReshapeBack {
    input_shape: Vec<usize>,
}

impl Backward for ReshapeBack {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.reshape(&self.input_shape)?)])
    }
}

struct PermuteBack {
    perm: Vec<usize>,
}

impl Backward for PermuteBack {
    fn name(&self) -> &'static str {
        "permute"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(permute(grad, &inverse_permutation(&self.perm))?)])
    }
}

struct ConcatBack {
    axis: usize,
    sizes: Vec<usize>,
}

impl Backward for ConcatBack {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(self.sizes.len());
        for &len in &self.sizes {
            out.push(Some(narrow_tensor(grad, self.axis, start, len)?));
            start += len;
        }
        Ok(out)
    }
}

struct NarrowBack {
    axis: usize,
    start: usize,
    input_shape: Vec<usize>,
}

impl Backward for NarrowBack {
    fn name(&self) -> &'static str {
        "narrow"
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (outer, len, inner) = crate::tensor::axis_layout(&self.input_shape, self.axis);
        let glen = grad.shape()[self.axis];
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &grad.data()[o * glen * inner..(o + 1) * glen * inner];
            let dst = o * len * inner + self.start * inner;
            out[dst..dst + glen * inner].copy_from_slice(src);
        }
        Ok(vec![Some(Tensor::from_parts(self.input_shape.clone(), out))])
    }
}

struct SoftmaxBack {
    axis: usize,
    log: bool,
}

impl Backward for SoftmaxBack {
    fn name(&self) -> &'static str {
        if self.log {
            "log_softmax"
        } else {
            "softmax"
        }
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (outer, len, inner) = out.axis_layout(self.axis);
        let y = out.data();
        let g = grad.data();
        let mut dx = vec![0.0; y.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| o * len * inner + i * inner + j;
                if self.log {
                    let gsum: f64 = (0..len).map(|i| g[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = g[idx(i)] - y[idx(i)].exp() * gsum;
                    }
                } else {
                    let dot: f64 = (0..len).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..len {
                        dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(out.shape().to_vec(), dx))])
    }
}

struct MatMulBack;

impl Backward for MatMulBack {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut ga = vec![0.0; m * k];
        gemm_nt(m, n, k, grad.data(), b.data(), &mut ga);
        let mut gb = vec![0.0; k * n];
        gemm_tn(k, m, n, a.data(), grad.data(), &mut gb);
        Ok(vec![
            Some(Tensor::from_parts(vec![m, k], ga)),
            Some(Tensor::from_parts(vec![k, n], gb)),
        ])
    }
}

pub(crate) fn matmul_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(DpaError::shape(format!(
            "matmul needs (m×k)·(k×n), got {:?}·{:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub(crate) fn narrow_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
        return Err(DpaError::shape(format!(
            "narrow({axis}, {start}, {len}) out of bounds for {:?}",
            t.shape()
        )));
    }
    let (outer, full, inner) = t.axis_layout(axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

fn softmax_tensor(x: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = x.axis_layout(axis);
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| o * len * inner + i * inner + j;
            let max = (0..len).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..len).map(|i| (d[idx(i)] - max).exp()).sum();
            if log {
                let lse = sum.ln();
                for i in 0..len {
                    out[idx(i)] = d[idx(i)] - max - lse;
                }
            } else {
                for i in 0..len {
                    out[idx(i)] = (d[idx(i)] - max).exp() / sum;
                }
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(DpaError::shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl Tape {
    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match kind {
            BinaryKind::Add => zip_broadcast(&va, &vb, |x, y| x + y)?,
            BinaryKind::Sub => zip_broadcast(&va, &vb, |x, y| x - y)?,
            BinaryKind::Mul => zip_broadcast(&va, &vb, |x, y| x * y)?,
            BinaryKind::Div => zip_broadcast(&va, &vb, |x, y| x / y)?,
        };
        self.record(Binary(kind), &[a, b], out)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&self, kind: UnaryKind, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = match kind {
            UnaryKind::Neg => v.map(|x| -x),
            UnaryKind::Exp => v.map(f64::exp),
            UnaryKind::Log => v.map(f64::ln),
            UnaryKind::Sigmoid => v.map(sigmoid_scalar),
            UnaryKind::Relu => v.map(|x| if x > 0.0 { x } else { 0.0 }),
            UnaryKind::Pow(p) => v.map(|x| x.powf(p)),
            UnaryKind::ClampMin(f) => v.map(|x| x.max(f)),
            UnaryKind::Scale(c) => v.map(|x| x * c),
            UnaryKind::AddScalar => unreachable!("add_scalar carries its operand separately"),
        };
        self.record(Unary(kind), &[x], out)
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    /// Rectifier; the gradient at exactly zero is zero.
    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn pow(&self, x: Var, exponent: f64) -> Result<Var> {
        self.unary(UnaryKind::Pow(exponent), x)
    }

    pub fn clamp_min(&self, x: Var, floor: f64) -> Result<Var> {
        self.unary(UnaryKind::ClampMin(floor), x)
    }

    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        self.unary(UnaryKind::Scale(factor), x)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.record(Unary(UnaryKind::AddScalar), &[x], out)
    }

    fn reduce_sum(&self, x: Var, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var> {
        let v = self.value(x);
        for &a in axes {
            check_axis(v.shape(), a)?;
        }
        let mut keep_shape = v.shape().to_vec();
        for &a in axes {
            keep_shape[a] = 1;
        }
        let count: usize = axes
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .map(|&a| v.shape()[a])
            .product();
        let mut out = reduce_to_shape(&v, &keep_shape);
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        if mean {
            out.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            v.shape()
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let out = Tensor::from_parts(out_shape, out.into_data());
        let back = SumBack {
            input_shape: v.shape().to_vec(),
            keep_shape,
            scale,
            name: if mean { "mean" } else { "sum" },
        };
        self.record(back, &[x], out)
    }

    pub fn sum(&self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce_sum(x, axes, keepdim, false)
    }

    pub fn mean(&self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce_sum(x, axes, keepdim, true)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        let axes: Vec<usize> = (0..rank).collect();
        self.sum(x, &axes, false)
    }

    fn extremum(&self, x: Var, axis: usize, keepdim: bool, is_max: bool) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let (outer, len, inner) = v.axis_layout(axis);
        let d = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = o * len * inner + j;
                for i in 1..len {
                    let idx = o * len * inner + i * inner + j;
                    let better = if is_max { d[idx] > d[best] } else { d[idx] < d[best] };
                    if better {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
        let mut shape = v.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let back = ExtremumBack {
            input_shape: v.shape().to_vec(),
            arg,
            name: if is_max { "max" } else { "min" },
        };
        self.record(back, &[x], Tensor::from_parts(shape, out))
    }

    /// Maximum along one axis; ties resolve to the first index.
    pub fn max(&self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.extremum(x, axis, keepdim, true)
    }

    /// Minimum along one axis; ties resolve to the first index.
    pub fn min(&self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.extremum(x, axis, keepdim, false)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let out = v.reshape(shape)?;
        self.record(
            ReshapeBack {
                input_shape: v.shape().to_vec(),
            },
            &[x],
            out,
        )
    }

    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = permute(&self.value(x), perm)?;
        self.record(PermuteBack { perm: perm.to_vec() }, &[x], out)
    }

    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<_> = xs.iter().map(|&x| self.value(x)).collect();
        let first = values
            .first()
            .ok_or_else(|| DpaError::shape("concat of zero tensors"))?;
        check_axis(first.shape(), axis)?;
        for v in &values {
            let same = v.rank() == first.rank()
                && v.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(DpaError::shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape(),
                    v.shape()
                )));
            }
        }
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let (outer, _, inner) = first.axis_layout(axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&sizes) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        self.record(ConcatBack { axis, sizes }, xs, Tensor::from_parts(shape, data))
    }

    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let out = narrow_tensor(&v, axis, start, len)?;
        self.record(
            NarrowBack {
                axis,
                start,
                input_shape: v.shape().to_vec(),
            },
            &[x],
            out,
        )
    }

    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let out = softmax_tensor(&v, axis, false);
        self.record(SoftmaxBack { axis, log: false }, &[x], out)
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        check_axis(v.shape(), axis)?;
        let out = softmax_tensor(&v, axis, true);
        self.record(SoftmaxBack { axis, log: true }, &[x], out)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_tensor(&self.value(a), &self.value(b))?;
        self.record(MatMulBack, &[a, b], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.value(tape.sigmoid(x).unwrap()).item(), 0.5);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.value(tape.softmax(x, 0).unwrap());
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data()[0] - 0.09003).abs() < 5e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]), true);
        let loss = tape.sum_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_square_sum() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]).unwrap(), true);
        let loss = tape.sum_all(tape.sigmoid(x).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let y = tape.exp(x).unwrap();
        assert!(matches!(tape.backward(y), Err(DpaError::NotScalarLoss(_))));
    }

    #[test]
    fn relu_gradient_is_zero_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let loss = tape.sum_all(tape.relu(x).unwrap()).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(x), Err(DpaError::NonFiniteValue { .. })));
    }

    #[test]
    fn unreachable_leaves_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let unused = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let _ = tape.exp(unused).unwrap();
        let loss = tape.sum_all(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn reductions_over_named_axes() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 5.0, 3.0, 4.0, 2.0, 6.0]));
        assert_eq!(tape.value(tape.sum(x, &[1], false).unwrap()).data(), &[9.0, 12.0]);
        assert_eq!(tape.value(tape.mean(x, &[0], true).unwrap()).shape(), &[1, 3]);
        assert_eq!(tape.value(tape.max(x, 1, false).unwrap()).data(), &[5.0, 6.0]);
        assert_eq!(tape.value(tape.min(x, 0, false).unwrap()).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_then_narrow() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let n = tape.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(*tape.value(n), *tape.value(b));
    }
}
