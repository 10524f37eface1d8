//! Forward and backward kernels for every recorded operation.

use std::f64::consts::PI;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Operation kinds understood by the tape.
///
/// Axis arguments index into the shape of the (first) input. "Last axis" ops
/// act on the trailing dimension. Elementwise binary ops broadcast the input
/// whose shape is a suffix of the other's across the leading dimensions.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// `[.., k] x [k, m] -> [.., m]`
    MatMul,
    /// `x [.., in], w [out, in], b [out] -> x w^T + b`
    Linear,
    Add,
    Sub,
    Mul,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    Square,
    Sum {
        axis: usize,
    },
    Mean {
        axis: usize,
    },
    SumAll,
    MeanAll,
    /// Concatenate along the last axis.
    Concat,
    Stack {
        axis: usize,
    },
    Select {
        axis: usize,
        index: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Rows of the leading axis, in the given order (repeats allowed).
    Gather {
        indices: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    LogSoftmax,
    LogSumExp,
    /// Euclidean norm over the last axis.
    L2Norm,
    /// Identity forward; multiplies the gradient by `-beta` on the way back.
    Grl {
        beta: f64,
    },
    /// `z [m, d], mean [k, d], logvar [k, d] -> [m, k]` holding
    /// `ln N(z_i; mean_j, diag(exp(logvar_j)))`.
    GaussianLogDensity,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Linear => "linear",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Square => "square",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SumAll => "sum_all",
            Op::MeanAll => "mean_all",
            Op::Concat => "concat",
            Op::Stack { .. } => "stack",
            Op::Select { .. } => "select",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Reshape { .. } => "reshape",
            Op::LogSoftmax => "log_softmax",
            Op::LogSumExp => "logsumexp",
            Op::L2Norm => "l2_norm",
            Op::Grl { .. } => "grl",
            Op::GaussianLogDensity => "gaussian_log_density",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Concat | Op::Stack { .. } => None,
            Op::Linear | Op::GaussianLogDensity => Some(3),
            Op::MatMul | Op::Add | Op::Sub | Op::Mul => Some(2),
            _ => Some(1),
        }
    }

    /// Evaluates the operation on concrete inputs.
    pub fn forward<F: Real>(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
        match self.arity() {
            Some(n) if n != inputs.len() => {
                return Err(Error::invalid(
                    self.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ))
            }
            None if inputs.is_empty() => return Err(Error::invalid(self.name(), "no inputs")),
            _ => {}
        }
        let out = match self {
            Op::MatMul => matmul(inputs[0], inputs[1])?,
            Op::Linear => linear(inputs[0], inputs[1], inputs[2])?,
            Op::Add => binary(self.name(), inputs[0], inputs[1], |a, b| a + b)?,
            Op::Sub => binary(self.name(), inputs[0], inputs[1], |a, b| a - b)?,
            Op::Mul => binary(self.name(), inputs[0], inputs[1], |a, b| a * b)?,
            Op::Neg => unary(inputs[0], |x| -x),
            Op::Scale(c) => {
                let c = F::c(*c);
                unary(inputs[0], |x| x * c)
            }
            Op::AddScalar(c) => {
                let c = F::c(*c);
                unary(inputs[0], |x| x + c)
            }
            Op::Exp => unary(inputs[0], |x| x.exp()),
            Op::Log => {
                if cfg!(debug_assertions) {
                    if let Some(&bad) = inputs[0].data().iter().find(|&&x| x <= F::zero()) {
                        return Err(Error::NonPositiveLog(bad.f64()));
                    }
                }
                unary(inputs[0], |x| x.ln())
            }
            Op::Tanh => unary(inputs[0], |x| x.tanh()),
            Op::Sigmoid => unary(inputs[0], sigmoid),
            Op::Relu => unary(inputs[0], |x| if x > F::zero() { x } else { F::zero() }),
            Op::Square => unary(inputs[0], |x| x * x),
            Op::Sum { axis } => reduce_axis(self.name(), inputs[0], *axis, false)?,
            Op::Mean { axis } => reduce_axis(self.name(), inputs[0], *axis, true)?,
            Op::SumAll => Tensor::scalar(inputs[0].data().iter().copied().sum()),
            Op::MeanAll => {
                let n = F::c(inputs[0].numel() as f64);
                Tensor::scalar(inputs[0].data().iter().copied().sum::<F>() / n)
            }
            Op::Concat => concat(inputs)?,
            Op::Stack { axis } => stack(inputs, *axis)?,
            Op::Select { axis, index } => select(inputs[0], *axis, *index)?,
            Op::Slice { axis, start, len } => slice(inputs[0], *axis, *start, *len)?,
            Op::Gather { indices } => gather(inputs[0], indices)?,
            Op::Reshape { shape } => inputs[0].clone().reshape(shape)?,
            Op::LogSoftmax => log_softmax(inputs[0])?,
            Op::LogSumExp => logsumexp(inputs[0])?,
            Op::L2Norm => l2_norm(inputs[0])?,
            Op::Grl { .. } => inputs[0].clone(),
            Op::GaussianLogDensity => gaussian_log_density(inputs[0], inputs[1], inputs[2])?,
        };
        if cfg!(debug_assertions) && inputs.iter().all(|t| t.is_finite()) && !out.is_finite() {
            return Err(Error::invalid(
                self.name(),
                "non-finite output from finite inputs",
            ));
        }
        Ok(out)
    }

    /// Vector-Jacobian product: gradients for each input given the upstream
    /// gradient of the output. Inputs whose `needs` flag is false get `None`.
    pub fn backward<F: Real>(
        &self,
        inputs: &[&Tensor<F>],
        out: &Tensor<F>,
        grad: &Tensor<F>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<F>>> {
        let g = grad.data();
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::MatMul => matmul_backward(inputs[0], inputs[1], grad, want(0), want(1)),
            Op::Linear => linear_backward(inputs[0], inputs[1], grad, [want(0), want(1), want(2)]),
            Op::Add => binary_backward(inputs[0], inputs[1], grad, |_, _| (F::one(), F::one())),
            Op::Sub => binary_backward(inputs[0], inputs[1], grad, |_, _| (F::one(), -F::one())),
            Op::Mul => binary_backward(inputs[0], inputs[1], grad, |a, b| (b, a)),
            Op::Neg => vec![Some(map_grad(grad, inputs[0], |g, _| -g))],
            Op::Scale(c) => {
                let c = F::c(*c);
                vec![Some(map_grad(grad, inputs[0], |g, _| g * c))]
            }
            Op::AddScalar(_) | Op::Reshape { .. } => {
                vec![Some(
                    Tensor::new(inputs[0].shape().to_vec(), g.to_vec()).expect("same numel"),
                )]
            }
            Op::Exp => vec![Some(zip_grad(grad, out, inputs[0], |g, y| g * y))],
            Op::Log => vec![Some(map_grad(grad, inputs[0], |g, x| g / x))],
            Op::Tanh => vec![Some(zip_grad(grad, out, inputs[0], |g, y| {
                g * (F::one() - y * y)
            }))],
            Op::Sigmoid => vec![Some(zip_grad(grad, out, inputs[0], |g, y| {
                g * y * (F::one() - y)
            }))],
            Op::Relu => vec![Some(map_grad(grad, inputs[0], |g, x| {
                if x > F::zero() {
                    g
                } else {
                    F::zero()
                }
            }))],
            Op::Square => vec![Some(map_grad(grad, inputs[0], |g, x| g * (x + x)))],
            Op::Sum { axis } => vec![Some(reduce_axis_backward(inputs[0], *axis, grad, false))],
            Op::Mean { axis } => vec![Some(reduce_axis_backward(inputs[0], *axis, grad, true))],
            Op::SumAll => vec![Some(Tensor::full(inputs[0].shape(), g[0]))],
            Op::MeanAll => {
                let n = F::c(inputs[0].numel() as f64);
                vec![Some(Tensor::full(inputs[0].shape(), g[0] / n))]
            }
            Op::Concat => concat_backward(inputs, grad),
            Op::Stack { axis } => stack_backward(inputs, *axis, grad),
            Op::Select { axis, index } => {
                vec![Some(select_backward(inputs[0], *axis, *index, grad))]
            }
            Op::Slice { axis, start, len } => {
                vec![Some(slice_backward(inputs[0], *axis, *start, *len, grad))]
            }
            Op::Gather { indices } => vec![Some(gather_backward(inputs[0], indices, grad))],
            Op::LogSoftmax => vec![Some(log_softmax_backward(out, grad))],
            Op::LogSumExp => vec![Some(logsumexp_backward(inputs[0], out, grad))],
            Op::L2Norm => vec![Some(l2_norm_backward(inputs[0], out, grad))],
            Op::Grl { beta } => {
                let s = F::c(-*beta);
                vec![Some(map_grad(grad, inputs[0], |g, _| g * s))]
            }
            Op::GaussianLogDensity => {
                gaussian_log_density_backward(inputs, grad, [want(0), want(1), want(2)])
            }
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes;
/// the summation order is fixed, so results stay deterministic.
#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        let (x, y): (&[F; 8], &[F; 8]) =
            (x.try_into().expect("chunk"), y.try_into().expect("chunk"));
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

fn unary<F: Real>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn map_grad<F: Real>(grad: &Tensor<F>, x: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let data = grad
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| f(g, v))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn zip_grad<F: Real>(
    grad: &Tensor<F>,
    out: &Tensor<F>,
    x: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Tensor<F> {
    let data = grad
        .data()
        .iter()
        .zip(out.data())
        .map(|(&g, &y)| f(g, y))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn binary<F: Real>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    let shape = if is_suffix(b.shape(), a.shape()) {
        a.shape()
    } else if is_suffix(a.shape(), b.shape()) {
        b.shape()
    } else {
        return Err(Error::shape(op, a.shape(), b.shape()));
    };
    let n = shape.iter().product::<usize>();
    let (ad, bd) = (a.data(), b.data());
    let (na, nb) = (ad.len(), bd.len());
    let data = if na == n && nb == n {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else {
        (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
    };
    Tensor::new(shape.to_vec(), data)
}

/// `df` returns the partial derivatives with respect to (lhs, rhs).
fn binary_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad: &Tensor<F>,
    df: impl Fn(F, F) -> (F, F),
) -> Vec<Option<Tensor<F>>> {
    let (ad, bd, g) = (a.data(), b.data(), grad.data());
    let (na, nb) = (ad.len(), bd.len());
    let mut ga = vec![F::zero(); na];
    let mut gb = vec![F::zero(); nb];
    for (i, &gi) in g.iter().enumerate() {
        let (da, db) = df(ad[i % na], bd[i % nb]);
        ga[i % na] += gi * da;
        gb[i % nb] += gi * db;
    }
    vec![
        Some(Tensor::new(a.shape().to_vec(), ga).expect("shape")),
        Some(Tensor::new(b.shape().to_vec(), gb).expect("shape")),
    ]
}

fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.is_empty() || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
        return Err(Error::shape("matmul", ash, bsh));
    }
    let (k, m) = (bsh[0], bsh[1]);
    let n = a.numel() / k;
    let mut out = vec![F::zero(); n * m];
    let bd = b.data();
    for (arow, orow) in a.data().chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        for (p, &ap) in arow.iter().enumerate() {
            axpy(ap, &bd[p * m..(p + 1) * m], orow);
        }
    }
    let mut shape = ash.to_vec();
    *shape.last_mut().unwrap() = m;
    Tensor::new(shape, out)
}

fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    grad: &Tensor<F>,
    need_a: bool,
    need_b: bool,
) -> Vec<Option<Tensor<F>>> {
    let (k, m) = (b.shape()[0], b.shape()[1]);
    let bd = b.data();
    let ga = need_a.then(|| {
        let mut ga = vec![F::zero(); a.numel()];
        for (grow, garow) in grad.data().chunks_exact(m).zip(ga.chunks_exact_mut(k)) {
            for (p, v) in garow.iter_mut().enumerate() {
                *v = dot(grow, &bd[p * m..(p + 1) * m]);
            }
        }
        Tensor::new(a.shape().to_vec(), ga).expect("shape")
    });
    let gb = need_b.then(|| {
        let mut gb = vec![F::zero(); k * m];
        for (arow, grow) in a.data().chunks_exact(k).zip(grad.data().chunks_exact(m)) {
            for (p, &ap) in arow.iter().enumerate() {
                axpy(ap, grow, &mut gb[p * m..(p + 1) * m]);
            }
        }
        Tensor::new(b.shape().to_vec(), gb).expect("shape")
    });
    vec![ga, gb]
}

fn linear<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[1] {
        return Err(Error::shape("linear", xs, ws));
    }
    let (out_dim, in_dim) = (ws[0], ws[1]);
    if b.shape() != [out_dim] {
        return Err(Error::shape("linear", ws, b.shape()));
    }
    let n = x.numel() / in_dim;
    let mut out = vec![F::zero(); n * out_dim];
    let (wd, bd) = (w.data(), b.data());
    for (xrow, orow) in x
        .data()
        .chunks_exact(in_dim)
        .zip(out.chunks_exact_mut(out_dim))
    {
        for (o, v) in orow.iter_mut().enumerate() {
            *v = dot(xrow, &wd[o * in_dim..(o + 1) * in_dim]) + bd[o];
        }
    }
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = out_dim;
    Tensor::new(shape, out)
}

fn linear_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    grad: &Tensor<F>,
    need: [bool; 3],
) -> Vec<Option<Tensor<F>>> {
    let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
    let wd = w.data();
    let g = grad.data();
    let gx = need[0].then(|| {
        let mut gx = vec![F::zero(); x.numel()];
        for (grow, gxrow) in g.chunks_exact(out_dim).zip(gx.chunks_exact_mut(in_dim)) {
            for (o, &go) in grow.iter().enumerate() {
                if go != F::zero() {
                    axpy(go, &wd[o * in_dim..(o + 1) * in_dim], gxrow);
                }
            }
        }
        Tensor::new(x.shape().to_vec(), gx).expect("shape")
    });
    let gw = need[1].then(|| {
        let mut gw = vec![F::zero(); out_dim * in_dim];
        for (xrow, grow) in x.data().chunks_exact(in_dim).zip(g.chunks_exact(out_dim)) {
            for (o, &go) in grow.iter().enumerate() {
                if go != F::zero() {
                    axpy(go, xrow, &mut gw[o * in_dim..(o + 1) * in_dim]);
                }
            }
        }
        Tensor::new(w.shape().to_vec(), gw).expect("shape")
    });
    let gb = need[2].then(|| {
        let mut gb = vec![F::zero(); out_dim];
        for grow in g.chunks_exact(out_dim) {
            axpy(F::one(), grow, &mut gb);
        }
        Tensor::new(vec![out_dim], gb).expect("shape")
    });
    vec![gx, gw, gb]
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::invalid(
            op,
            format!("axis {axis} out of range for shape {shape:?}"),
        ));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn reduce_axis<F: Real>(
    op: &'static str,
    x: &Tensor<F>,
    axis: usize,
    mean: bool,
) -> Result<Tensor<F>> {
    let (outer, len, inner) = split_axis(op, x.shape(), axis)?;
    let mut out = vec![F::zero(); outer * inner];
    let d = x.data();
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let base = (o * len + l) * inner;
            axpy(F::one(), &d[base..base + inner], dst);
        }
    }
    if mean {
        let s = F::one() / F::c(len as f64);
        out.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(without_axis(x.shape(), axis), out)
}

fn reduce_axis_backward<F: Real>(
    x: &Tensor<F>,
    axis: usize,
    grad: &Tensor<F>,
    mean: bool,
) -> Tensor<F> {
    let (outer, len, inner) = split_axis("sum", x.shape(), axis).expect("validated in forward");
    let scale = if mean {
        F::one() / F::c(len as f64)
    } else {
        F::one()
    };
    let g = grad.data();
    let mut gx = vec![F::zero(); x.numel()];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            axpy(
                scale,
                &g[o * inner..(o + 1) * inner],
                &mut gx[base..base + inner],
            );
        }
    }
    Tensor::new(x.shape().to_vec(), gx).expect("shape")
}

fn concat<F: Real>(inputs: &[&Tensor<F>]) -> Result<Tensor<F>> {
    let first = inputs[0].shape();
    if first.is_empty() {
        return Err(Error::invalid("concat", "cannot concatenate scalars"));
    }
    let lead = &first[..first.len() - 1];
    for t in inputs {
        let s = t.shape();
        if s.len() != first.len() || &s[..s.len() - 1] != lead {
            return Err(Error::shape("concat", first, s));
        }
    }
    let widths: Vec<usize> = inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = inputs[0].numel() / widths[0];
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (t, &w) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = first.to_vec();
    *shape.last_mut().unwrap() = total;
    Tensor::new(shape, out)
}

fn concat_backward<F: Real>(inputs: &[&Tensor<F>], grad: &Tensor<F>) -> Vec<Option<Tensor<F>>> {
    let widths: Vec<usize> = inputs.iter().map(|t| *t.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = grad.numel() / total;
    let g = grad.data();
    let mut parts: Vec<Vec<F>> = widths
        .iter()
        .map(|w| Vec::with_capacity(rows * w))
        .collect();
    for r in 0..rows {
        let mut off = r * total;
        for (p, &w) in parts.iter_mut().zip(&widths) {
            p.extend_from_slice(&g[off..off + w]);
            off += w;
        }
    }
    parts
        .into_iter()
        .zip(inputs)
        .map(|(p, t)| Some(Tensor::new(t.shape().to_vec(), p).expect("shape")))
        .collect()
}

fn stack<F: Real>(inputs: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = inputs[0].shape();
    if axis > first.len() {
        return Err(Error::invalid(
            "stack",
            format!("axis {axis} out of range for shape {first:?}"),
        ));
    }
    for t in inputs {
        if t.shape() != first {
            return Err(Error::shape("stack", first, t.shape()));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis..].iter().product();
    let mut out = Vec::with_capacity(outer * inner * inputs.len());
    for o in 0..outer {
        for t in inputs {
            out.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
        }
    }
    let mut shape = first.to_vec();
    shape.insert(axis, inputs.len());
    Tensor::new(shape, out)
}

fn stack_backward<F: Real>(
    inputs: &[&Tensor<F>],
    axis: usize,
    grad: &Tensor<F>,
) -> Vec<Option<Tensor<F>>> {
    let first = inputs[0].shape();
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis..].iter().product();
    let k = inputs.len();
    let g = grad.data();
    (0..k)
        .map(|j| {
            let mut part = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                let base = (o * k + j) * inner;
                part.extend_from_slice(&g[base..base + inner]);
            }
            Some(Tensor::new(first.to_vec(), part).expect("shape"))
        })
        .collect()
}

fn select<F: Real>(x: &Tensor<F>, axis: usize, index: usize) -> Result<Tensor<F>> {
    let (outer, len, inner) = split_axis("select", x.shape(), axis)?;
    if index >= len {
        return Err(Error::invalid(
            "select",
            format!("index {index} out of range {len}"),
        ));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = (o * len + index) * inner;
        out.extend_from_slice(&d[base..base + inner]);
    }
    Tensor::new(without_axis(x.shape(), axis), out)
}

fn select_backward<F: Real>(
    x: &Tensor<F>,
    axis: usize,
    index: usize,
    grad: &Tensor<F>,
) -> Tensor<F> {
    let (outer, len, inner) = split_axis("select", x.shape(), axis).expect("validated in forward");
    let g = grad.data();
    let mut gx = vec![F::zero(); x.numel()];
    for o in 0..outer {
        let base = (o * len + index) * inner;
        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
    }
    Tensor::new(x.shape().to_vec(), gx).expect("shape")
}

fn slice<F: Real>(x: &Tensor<F>, axis: usize, start: usize, len: usize) -> Result<Tensor<F>> {
    let (outer, full, inner) = split_axis("slice", x.shape(), axis)?;
    if len == 0 || start + len > full {
        return Err(Error::invalid(
            "slice",
            format!("range {start}..{} out of 0..{full}", start + len),
        ));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&d[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

fn slice_backward<F: Real>(
    x: &Tensor<F>,
    axis: usize,
    start: usize,
    len: usize,
    grad: &Tensor<F>,
) -> Tensor<F> {
    let (outer, full, inner) = split_axis("slice", x.shape(), axis).expect("validated in forward");
    let g = grad.data();
    let mut gx = vec![F::zero(); x.numel()];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::new(x.shape().to_vec(), gx).expect("shape")
}

fn gather<F: Real>(x: &Tensor<F>, indices: &[usize]) -> Result<Tensor<F>> {
    let (_, rows, inner) = split_axis("gather", x.shape(), 0)?;
    if indices.is_empty() {
        return Err(Error::invalid("gather", "empty index list"));
    }
    let mut out = Vec::with_capacity(indices.len() * inner);
    for &i in indices {
        if i >= rows {
            return Err(Error::invalid(
                "gather",
                format!("row {i} out of range {rows}"),
            ));
        }
        out.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, out)
}

fn gather_backward<F: Real>(x: &Tensor<F>, indices: &[usize], grad: &Tensor<F>) -> Tensor<F> {
    let inner = x.numel() / x.shape()[0];
    let g = grad.data();
    let mut gx = vec![F::zero(); x.numel()];
    for (r, &i) in indices.iter().enumerate() {
        axpy(
            F::one(),
            &g[r * inner..(r + 1) * inner],
            &mut gx[i * inner..(i + 1) * inner],
        );
    }
    Tensor::new(x.shape().to_vec(), gx).expect("shape")
}

fn last_dim(op: &'static str, x: &Tensor<impl Real>) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::invalid(op, "needs at least one axis"))
}

fn row_logsumexp<F: Real>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    if m == F::neg_infinity() {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln()
}

fn log_softmax<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let c = last_dim("log_softmax", x)?;
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(c) {
        let lse = row_logsumexp(row);
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn log_softmax_backward<F: Real>(out: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let c = *out.shape().last().unwrap();
    let mut gx = Vec::with_capacity(out.numel());
    for (orow, grow) in out.data().chunks_exact(c).zip(grad.data().chunks_exact(c)) {
        let gsum: F = grow.iter().copied().sum();
        gx.extend(orow.iter().zip(grow).map(|(&y, &g)| g - y.exp() * gsum));
    }
    Tensor::new(out.shape().to_vec(), gx).expect("shape")
}

fn logsumexp<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let c = last_dim("logsumexp", x)?;
    let out = x.data().chunks_exact(c).map(row_logsumexp).collect();
    Tensor::new(x.shape()[..x.shape().len() - 1].to_vec(), out)
}

fn logsumexp_backward<F: Real>(x: &Tensor<F>, out: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let c = *x.shape().last().unwrap();
    let mut gx = Vec::with_capacity(x.numel());
    for ((row, &lse), &g) in x.data().chunks_exact(c).zip(out.data()).zip(grad.data()) {
        gx.extend(row.iter().map(|&v| g * (v - lse).exp()));
    }
    Tensor::new(x.shape().to_vec(), gx).expect("shape")
}

fn l2_norm<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let c = last_dim("l2_norm", x)?;
    let out = x.data().chunks_exact(c).map(|r| dot(r, r).sqrt()).collect();
    Tensor::new(x.shape()[..x.shape().len() - 1].to_vec(), out)
}

/// Uses the zero subgradient at the origin.
fn l2_norm_backward<F: Real>(x: &Tensor<F>, out: &Tensor<F>, grad: &Tensor<F>) -> Tensor<F> {
    let c = *x.shape().last().unwrap();
    let mut gx = Vec::with_capacity(x.numel());
    for ((row, &n), &g) in x.data().chunks_exact(c).zip(out.data()).zip(grad.data()) {
        if n > F::zero() {
            gx.extend(row.iter().map(|&v| g * v / n));
        } else {
            gx.extend(std::iter::repeat_n(F::zero(), c));
        }
    }
    Tensor::new(x.shape().to_vec(), gx).expect("shape")
}

fn gaussian_log_density<F: Real>(
    z: &Tensor<F>,
    mean: &Tensor<F>,
    logvar: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (zs, ms) = (z.shape(), mean.shape());
    if zs.len() != 2 || ms.len() != 2 || zs[1] != ms[1] {
        return Err(Error::shape("gaussian_log_density", zs, ms));
    }
    if logvar.shape() != ms {
        return Err(Error::shape("gaussian_log_density", ms, logvar.shape()));
    }
    let (m, k, d) = (zs[0], ms[0], zs[1]);
    let half_log_2pi = F::c(0.5 * (2.0 * PI).ln());
    let half = F::c(0.5);
    let precision: Vec<F> = logvar.data().iter().map(|&lv| (-lv).exp()).collect();
    // Per-component normalizer: -1/2 sum(logvar) - d/2 ln 2pi.
    let norm: Vec<F> = logvar
        .data()
        .chunks_exact(d)
        .map(|lv| -half * lv.iter().copied().sum::<F>() - F::c(d as f64) * half_log_2pi)
        .collect();
    let mut out = Vec::with_capacity(m * k);
    for zi in z.data().chunks_exact(d) {
        for j in 0..k {
            let mu = &mean.data()[j * d..(j + 1) * d];
            let pr = &precision[j * d..(j + 1) * d];
            let mut q = F::zero();
            for ((&zv, &mv), &p) in zi.iter().zip(mu).zip(pr) {
                let diff = zv - mv;
                q += diff * diff * p;
            }
            out.push(norm[j] - half * q);
        }
    }
    Tensor::new(vec![m, k], out)
}

fn gaussian_log_density_backward<F: Real>(
    inputs: &[&Tensor<F>],
    grad: &Tensor<F>,
    need: [bool; 3],
) -> Vec<Option<Tensor<F>>> {
    let (z, mean, logvar) = (inputs[0], inputs[1], inputs[2]);
    let (m, k, d) = (z.shape()[0], mean.shape()[0], z.shape()[1]);
    let half = F::c(0.5);
    let precision: Vec<F> = logvar.data().iter().map(|&lv| (-lv).exp()).collect();
    let g = grad.data();
    let mut gz = vec![F::zero(); m * d];
    let mut gm = vec![F::zero(); k * d];
    let mut gl = vec![F::zero(); k * d];
    for i in 0..m {
        let zi = &z.data()[i * d..(i + 1) * d];
        for j in 0..k {
            let gij = g[i * k + j];
            if gij == F::zero() {
                continue;
            }
            for c in 0..d {
                let p = precision[j * d + c];
                let diff = zi[c] - mean.data()[j * d + c];
                let dz = -diff * p;
                gz[i * d + c] += gij * dz;
                gm[j * d + c] -= gij * dz;
                gl[j * d + c] += gij * (half * diff * diff * p - half);
            }
        }
    }
    vec![
        need[0].then(|| Tensor::new(z.shape().to_vec(), gz).expect("shape")),
        need[1].then(|| Tensor::new(mean.shape().to_vec(), gm).expect("shape")),
        need[2].then(|| Tensor::new(logvar.shape().to_vec(), gl).expect("shape")),
    ]
}
