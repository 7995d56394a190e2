//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every differentiable operation of one forward pass in
//! execution order, so node indices are already a topological order. Calling
//! [`Var::backward`] walks the tape once in reverse and returns the gradient of
//! every requires-grad leaf. A tape can be differentiated only once; build a
//! fresh tape for the next forward pass.
//!
//! ```
//! use ftx_core::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
//! let loss = x.mul(&x).unwrap().sum_all();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectral::{self, twiddle};
use crate::tensor::{axis_split, matmul_nt_into, matmul_tn_into, Tensor};

/// `sqrt(2/π)` used by the tanh approximation of GELU.
pub const GELU_COEFF: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;
/// Moduli below this are treated as zero by the spectral ops.
const SPECTRAL_FLOOR: f64 = 1e-12;

#[derive(Clone)]
pub struct Tape<S> {
    inner: Rc<RefCell<Inner<S>>>,
}

struct Inner<S> {
    nodes: Vec<Node<S>>,
    consumed: bool,
}

struct Node<S> {
    op: Op<S>,
    requires_grad: bool,
    value: Rc<Tensor<S>>,
}

/// Spectrum of each channel of a `[n, channels]` signal, channel-major.
struct Spectra<S> {
    re: Vec<S>,
    im: Vec<S>,
}

enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    Expand(usize),
    Sum { src: usize, axis: usize },
    Mean { src: usize, axis: usize },
    SumAll(usize),
    Softmax { src: usize, axis: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    Mse(usize, usize),
    Mae(usize, usize),
    Amplitude { src: usize, spectra: Rc<Spectra<S>> },
    PhaseReconstruct {
        filtered: usize,
        src: usize,
        spectra: Rc<Spectra<S>>,
    },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone)]
pub struct Var<S> {
    tape: Tape<S>,
    id: usize,
    requires_grad: bool,
    value: Rc<Tensor<S>>,
}

impl<S: Scalar> std::fmt::Debug for Var<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner {
                nodes: Vec::new(),
                consumed: false,
            })),
        }
    }

    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<S> {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor<S>) -> Var<S> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        self.leaf(value, false)
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn push(&self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Var<S> {
        let value = Rc::new(value);
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            requires_grad,
            value: Rc::clone(&value),
        });
        Var {
            tape: self.clone(),
            id,
            requires_grad,
            value,
        }
    }

    fn same(&self, other: &Tape<S>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Gradients of one backward pass, keyed by leaf.
pub struct Gradients<S> {
    by_leaf: HashMap<usize, Tensor<S>>,
    shapes: HashMap<usize, Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a requires-grad leaf (zeros when the loss does not depend
    /// on it); `None` for constants and interior nodes.
    pub fn get(&self, var: &Var<S>) -> Option<Tensor<S>> {
        if let Some(g) = self.by_leaf.get(&var.id) {
            return Some(g.clone());
        }
        self.shapes
            .get(&var.id)
            .map(|shape| Tensor::zeros(shape.clone()))
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

impl<S: Scalar> Var<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn item(&self) -> Result<S> {
        self.value.item()
    }

    fn check_tape(&self, other: &Var<S>) -> Result<()> {
        if self.tape.same(&other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignTape)
        }
    }

    fn unary(&self, op: Op<S>, value: Tensor<S>) -> Var<S> {
        self.tape.push(op, value, self.requires_grad)
    }

    fn binary(&self, other: &Var<S>, op: Op<S>, value: Tensor<S>) -> Var<S> {
        self.tape
            .push(op, value, self.requires_grad || other.requires_grad)
    }

    fn zip_same(
        &self,
        other: &Var<S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>> {
        self.check_tape(other)?;
        if self.shape() != other.shape() {
            return Err(shape_err(name, self.shape(), other.shape()));
        }
        let data = self
            .value
            .data()
            .iter()
            .zip(other.value.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape(), data)
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.shape().len() {
            return Err(Error::Axis {
                op,
                axis,
                shape: self.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Var<S>) -> Result<Var<S>> {
        self.check_tape(other)?;
        let out = self.value.matmul(&other.value)?;
        Ok(self.binary(other, Op::MatMul(self.id, other.id), out))
    }

    pub fn add(&self, other: &Var<S>) -> Result<Var<S>> {
        let out = self.zip_same(other, "add", |a, b| a + b)?;
        Ok(self.binary(other, Op::Add(self.id, other.id), out))
    }

    /// Adds a bias of shape `[n]` or `[1, n]` to every row of a `[m, n]` matrix.
    pub fn add_row(&self, bias: &Var<S>) -> Result<Var<S>> {
        self.check_tape(bias)?;
        let (m, n) = self.value.dims2()?;
        if bias.value.len() != n || bias.shape().iter().rev().skip(1).any(|&d| d != 1) {
            return Err(shape_err("add_row", self.shape(), bias.shape()));
        }
        let b = bias.value.data();
        let mut data = self.value.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
        }
        let out = Tensor::new([m, n], data)?;
        Ok(self.binary(bias, Op::AddRow(self.id, bias.id), out))
    }

    pub fn sub(&self, other: &Var<S>) -> Result<Var<S>> {
        let out = self.zip_same(other, "sub", |a, b| a - b)?;
        Ok(self.binary(other, Op::Sub(self.id, other.id), out))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<S>) -> Result<Var<S>> {
        let out = self.zip_same(other, "mul", |a, b| a * b)?;
        Ok(self.binary(other, Op::Mul(self.id, other.id), out))
    }

    pub fn scale(&self, factor: S) -> Var<S> {
        let out = self.value.map(|x| x * factor);
        self.unary(Op::Scale(self.id, factor), out)
    }

    /// Subgradient at zero is zero.
    pub fn relu(&self) -> Var<S> {
        let out = self.value.map(|x| x.max(S::zero()));
        self.unary(Op::Relu(self.id), out)
    }

    pub fn gelu(&self) -> Var<S> {
        let out = self.value.map(gelu);
        self.unary(Op::Gelu(self.id), out)
    }

    pub fn sigmoid(&self) -> Var<S> {
        let out = self.value.map(sigmoid);
        self.unary(Op::Sigmoid(self.id), out)
    }

    pub fn concat(parts: &[&Var<S>], axis: usize) -> Result<Var<S>> {
        let first = *parts.first().ok_or(Error::EmptySequence)?;
        first.check_axis("concat", axis)?;
        let rank = first.shape().len();
        for p in parts {
            first.check_tape(p)?;
            let ok = p.shape().len() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| p.requires_grad);
        Ok(first.tape.push(
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
            out,
            rg,
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<S>> {
        self.check_axis("slice", axis)?;
        if start + len > self.shape()[axis] {
            return Err(Error::Axis {
                op: "slice",
                axis,
                shape: self.shape().to_vec(),
            });
        }
        let (outer, dim, inner) = axis_split(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.value.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.unary(
            Op::Slice {
                src: self.id,
                axis,
                start,
            },
            out,
        ))
    }

    pub fn transpose(&self) -> Result<Var<S>> {
        let out = self.value.transpose()?;
        Ok(self.unary(Op::Transpose(self.id), out))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<S>> {
        let out = self.value.reshape(shape)?;
        Ok(self.unary(Op::Reshape(self.id), out))
    }

    /// Repeats a `[n]` or `[1, n]` row into a `[rows, n]` matrix.
    pub fn expand(&self, rows: usize) -> Result<Var<S>> {
        let n = self.value.len();
        if self.shape().len() > 2 || (self.shape().len() == 2 && self.shape()[0] != 1) {
            return Err(shape_err("expand", self.shape(), &[rows, n]));
        }
        let data = self.value.data().repeat(rows);
        let out = Tensor::new([rows, n], data)?;
        Ok(self.unary(Op::Expand(self.id), out))
    }

    fn reduce(&self, op: &'static str, axis: usize, mean: bool) -> Result<Tensor<S>> {
        self.check_axis(op, axis)?;
        let (outer, dim, inner) = axis_split(self.shape(), axis);
        if mean && dim == 0 {
            return Err(Error::EmptyAxis {
                op,
                shape: self.shape().to_vec(),
            });
        }
        let x = self.value.data();
        let mut data = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..dim {
                for i in 0..inner {
                    data[o * inner + i] += x[(o * dim + a) * inner + i];
                }
            }
        }
        if mean {
            let inv = S::one() / S::of(dim as f64);
            data.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Tensor::new(shape, data)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum(&self, axis: usize) -> Result<Var<S>> {
        let out = self.reduce("sum", axis, false)?;
        Ok(self.unary(Op::Sum { src: self.id, axis }, out))
    }

    pub fn mean(&self, axis: usize) -> Result<Var<S>> {
        let out = self.reduce("mean", axis, true)?;
        Ok(self.unary(Op::Mean { src: self.id, axis }, out))
    }

    pub fn sum_all(&self) -> Var<S> {
        let out = Tensor::scalar(self.value.sum());
        self.unary(Op::SumAll(self.id), out)
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&self, axis: usize) -> Result<Var<S>> {
        self.check_axis("softmax", axis)?;
        let (outer, dim, inner) = axis_split(self.shape(), axis);
        if dim == 0 {
            return Err(Error::EmptyAxis {
                op: "softmax",
                shape: self.shape().to_vec(),
            });
        }
        let x = self.value.data();
        let mut data = vec![S::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| (o * dim + a) * inner + i;
                let max = (0..dim).map(|a| x[idx(a)]).fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for a in 0..dim {
                    let e = (x[idx(a)] - max).exp();
                    data[idx(a)] = e;
                    total += e;
                }
                for a in 0..dim {
                    data[idx(a)] /= total;
                }
            }
        }
        let out = Tensor::new(self.shape(), data)?;
        Ok(self.unary(Op::Softmax { src: self.id, axis }, out))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// `gain` and `bias` (both of the last-axis length).
    pub fn layernorm(&self, gain: &Var<S>, bias: &Var<S>, eps: S) -> Result<Var<S>> {
        self.check_tape(gain)?;
        self.check_tape(bias)?;
        let n = *self.shape().last().ok_or_else(|| Error::EmptyAxis {
            op: "layernorm",
            shape: vec![],
        })?;
        if n == 0 {
            return Err(Error::EmptyAxis {
                op: "layernorm",
                shape: self.shape().to_vec(),
            });
        }
        if gain.value.len() != n || bias.value.len() != n {
            return Err(shape_err("layernorm", self.shape(), gain.shape()));
        }
        if eps <= S::zero() {
            return Err(Error::Config("layernorm eps must be positive".into()));
        }
        let inv_n = S::one() / S::of(n as f64);
        let (g, b) = (gain.value.data(), bias.value.data());
        let x = self.value.data();
        let mut xhat = vec![S::zero(); x.len()];
        let mut out = vec![S::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / n);
        for (s, row) in x.chunks(n).enumerate() {
            let mu = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() * inv_n;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[s * n + j] = h;
                out[s * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.shape(), out)?;
        let rg = self.requires_grad || gain.requires_grad || bias.requires_grad;
        Ok(self.tape.push(
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            out,
            rg,
        ))
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&self, target: &Var<S>) -> Result<Var<S>> {
        let d = self.zip_same(target, "mse", |a, b| (a - b) * (a - b))?;
        if d.is_empty() {
            return Err(Error::EmptySequence);
        }
        let out = Tensor::scalar(d.sum() / S::of(d.len() as f64));
        Ok(self.binary(target, Op::Mse(self.id, target.id), out))
    }

    /// Mean absolute difference, as a scalar.
    pub fn mae(&self, target: &Var<S>) -> Result<Var<S>> {
        let d = self.zip_same(target, "mae", |a, b| (a - b).abs())?;
        if d.is_empty() {
            return Err(Error::EmptySequence);
        }
        let out = Tensor::scalar(d.sum() / S::of(d.len() as f64));
        Ok(self.binary(target, Op::Mae(self.id, target.id), out))
    }

    /// Per-channel amplitude spectrum of a `[n, channels]` signal, taken
    /// along axis 0. The spectra are retained so that
    /// [`Var::reconstruct_with_phase`] can reuse their phase.
    pub fn amplitude_spectrum(&self) -> Result<Var<S>> {
        let (n, ch) = self.value.dims2()?;
        let cols = self.value.transpose()?;
        let mut re = Vec::with_capacity(n * ch);
        let mut im = Vec::with_capacity(n * ch);
        let mut amp = vec![S::zero(); n * ch];
        for (c, col) in cols.data().chunks(n.max(1)).enumerate().take(ch) {
            let spec = spectral::dft_forward(col)?;
            let (a, _) = spectral::amplitude_phase(&spec);
            for (k, v) in a.into_iter().enumerate() {
                amp[k * ch + c] = v;
            }
            re.extend(spec.re);
            im.extend(spec.im);
        }
        let out = Tensor::new([n, ch], amp)?;
        let spectra = Rc::new(Spectra { re, im });
        Ok(self.unary(
            Op::Amplitude {
                src: self.id,
                spectra,
            },
            out,
        ))
    }

    /// Inverse transform of `filtered · e^{iφ}`, real part, where `φ` is the
    /// phase of the signal `self` was computed from. `self` must be the output
    /// of [`Var::amplitude_spectrum`].
    pub fn reconstruct_with_phase(&self, filtered: &Var<S>) -> Result<Var<S>> {
        self.check_tape(filtered)?;
        let (src, spectra) = {
            let inner = self.tape.inner.borrow();
            match &inner.nodes[self.id].op {
                Op::Amplitude { src, spectra } => (*src, Rc::clone(spectra)),
                _ => {
                    return Err(Error::Config(
                        "reconstruct_with_phase needs an amplitude_spectrum output".into(),
                    ))
                }
            }
        };
        if filtered.shape() != self.shape() {
            return Err(shape_err(
                "reconstruct_with_phase",
                self.shape(),
                filtered.shape(),
            ));
        }
        let (n, ch) = self.value.dims2()?;
        let f = filtered.value.data();
        let mut out = vec![S::zero(); n * ch];
        for c in 0..ch {
            let spec = spectral::ComplexSpectrum {
                re: spectra.re[c * n..(c + 1) * n].to_vec(),
                im: spectra.im[c * n..(c + 1) * n].to_vec(),
            };
            let (_, phase) = spectral::amplitude_phase(&spec);
            let amp: Vec<S> = (0..n).map(|k| f[k * ch + c]).collect();
            for (t, v) in spectral::reconstruct(&amp, &phase)?.into_iter().enumerate() {
                out[t * ch + c] = v;
            }
        }
        let out = Tensor::new([n, ch], out)?;
        let src_rg = self.tape.inner.borrow().nodes[src].requires_grad;
        Ok(self.tape.push(
            Op::PhaseReconstruct {
                filtered: filtered.id,
                src,
                spectra,
            },
            out,
            filtered.requires_grad || src_rg,
        ))
    }

    /// Reverse pass from a scalar loss. Errors if the tape was already
    /// differentiated.
    pub fn backward(&self) -> Result<Gradients<S>> {
        if self.value.len() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        let mut inner = self.tape.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.id + 1];
        grads[self.id] = Some(vec![S::one()]);
        let mut by_leaf = HashMap::new();
        for id in (0..=self.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                by_leaf.insert(id, Tensor::new(node.value.shape(), g)?);
                continue;
            }
            propagate(nodes, node, &g, &mut grads)?;
        }
        let shapes = nodes
            .iter()
            .enumerate()
            .take(self.id + 1)
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| (i, n.value.shape().to_vec()))
            .collect();
        Ok(Gradients { by_leaf, shapes })
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let k = S::of(GELU_COEFF);
    let half = S::of(0.5);
    half * x * (S::one() + (k * (x + S::of(GELU_CUBIC) * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = S::of(GELU_COEFF);
    let c = S::of(GELU_CUBIC);
    let half = S::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + S::of(3.0) * c * x * x)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn accumulate<S: Scalar>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    contribution: Vec<S>,
) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contribution),
    }
}

fn propagate<S: Scalar>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) -> Result<()> {
    let val = |id: usize| -> &Tensor<S> { &nodes[id].value };
    let wants = |id: usize| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2()?;
            let n = val(b).shape()[1];
            if wants(a) {
                // dA = dC · Bᵀ
                let mut ga = vec![S::zero(); m * k];
                matmul_nt_into(g, val(b).data(), &mut ga, m, n, k);
                accumulate(nodes, grads, a, ga);
            }
            if wants(b) {
                // dB = Aᵀ · dC
                let mut gb = vec![S::zero(); k * n];
                matmul_tn_into(val(a).data(), g, &mut gb, m, k, n);
                accumulate(nodes, grads, b, gb);
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, b, g.to_vec());
        }
        &Op::AddRow(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            let n = val(b).len();
            let mut gb = vec![S::zero(); n];
            for row in g.chunks(n) {
                gb.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
            }
            accumulate(nodes, grads, b, gb);
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.to_vec());
            accumulate(nodes, grads, b, g.iter().map(|&v| -v).collect());
        }
        &Op::Mul(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            accumulate(nodes, grads, a, g.iter().zip(vb).map(|(&u, &w)| u * w).collect());
            accumulate(nodes, grads, b, g.iter().zip(va).map(|(&u, &w)| u * w).collect());
        }
        &Op::Scale(a, f) => accumulate(nodes, grads, a, g.iter().map(|&v| v * f).collect()),
        &Op::Relu(a) => {
            let x = val(a).data();
            let ga = g
                .iter()
                .zip(x)
                .map(|(&u, &v)| if v > S::zero() { u } else { S::zero() })
                .collect();
            accumulate(nodes, grads, a, ga);
        }
        &Op::Gelu(a) => {
            let x = val(a).data();
            accumulate(nodes, grads, a, g.iter().zip(x).map(|(&u, &v)| u * gelu_grad(v)).collect());
        }
        &Op::Sigmoid(a) => {
            let y = node.value.data();
            let ga = g
                .iter()
                .zip(y)
                .map(|(&u, &s)| u * s * (S::one() - s))
                .collect();
            accumulate(nodes, grads, a, ga);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(node.value.shape(), *axis);
            let mut offset = 0;
            let total: usize = node.value.shape()[*axis] * inner;
            for &p in parts {
                let chunk = val(p).shape()[*axis] * inner;
                if wants(p) {
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let base = o * total + offset;
                        gp.extend_from_slice(&g[base..base + chunk]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += chunk;
            }
        }
        &Op::Slice { src, axis, start } => {
            let (outer, dim, inner) = axis_split(val(src).shape(), axis);
            let len = node.value.shape()[axis];
            let mut gs = vec![S::zero(); val(src).len()];
            for o in 0..outer {
                let base = o * dim * inner + start * inner;
                gs[base..base + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, src, gs);
        }
        &Op::Transpose(a) => {
            let gt = Tensor::new(node.value.shape(), g.to_vec())?.transpose()?;
            accumulate(nodes, grads, a, gt.into_data());
        }
        &Op::Reshape(a) => accumulate(nodes, grads, a, g.to_vec()),
        &Op::Expand(a) => {
            let n = val(a).len();
            let mut ga = vec![S::zero(); n];
            for row in g.chunks(n) {
                ga.iter_mut().zip(row).for_each(|(s, &v)| *s += v);
            }
            accumulate(nodes, grads, a, ga);
        }
        &Op::Sum { src, axis } | &Op::Mean { src, axis } => {
            let (outer, dim, inner) = axis_split(val(src).shape(), axis);
            let f = if matches!(node.op, Op::Mean { .. }) {
                S::one() / S::of(dim as f64)
            } else {
                S::one()
            };
            let mut gs = vec![S::zero(); val(src).len()];
            for o in 0..outer {
                for a in 0..dim {
                    for i in 0..inner {
                        gs[(o * dim + a) * inner + i] = g[o * inner + i] * f;
                    }
                }
            }
            accumulate(nodes, grads, src, gs);
        }
        &Op::SumAll(a) => accumulate(nodes, grads, a, vec![g[0]; val(a).len()]),
        &Op::Softmax { src, axis } => {
            let (outer, dim, inner) = axis_split(node.value.shape(), axis);
            let y = node.value.data();
            let mut gs = vec![S::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| (o * dim + a) * inner + i;
                    let dot: S = (0..dim).map(|a| g[idx(a)] * y[idx(a)]).sum();
                    for a in 0..dim {
                        gs[idx(a)] = y[idx(a)] * (g[idx(a)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, src, gs);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let n = val(*gain).len();
            let gv = val(*gain).data();
            let inv_n = S::one() / S::of(n as f64);
            let mut gx = vec![S::zero(); xhat.len()];
            let mut gg = vec![S::zero(); n];
            let mut gb = vec![S::zero(); n];
            for (s, &is) in inv_std.iter().enumerate() {
                let row = s * n..(s + 1) * n;
                let (gr, hr) = (&g[row.clone()], &xhat[row]);
                let mut mean_dh = S::zero();
                let mut mean_dh_h = S::zero();
                for j in 0..n {
                    let dh = gr[j] * gv[j];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                }
                mean_dh *= inv_n;
                mean_dh_h *= inv_n;
                for j in 0..n {
                    gx[s * n + j] = is * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dh_h);
                }
            }
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *gain, gg);
            accumulate(nodes, grads, *bias, gb);
        }
        &Op::Mse(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            let f = S::of(2.0) * g[0] / S::of(va.len() as f64);
            let ga: Vec<S> = va.iter().zip(vb).map(|(&p, &q)| f * (p - q)).collect();
            accumulate(nodes, grads, b, ga.iter().map(|&v| -v).collect());
            accumulate(nodes, grads, a, ga);
        }
        &Op::Mae(a, b) => {
            let (va, vb) = (val(a).data(), val(b).data());
            let f = g[0] / S::of(va.len() as f64);
            let ga: Vec<S> = va
                .iter()
                .zip(vb)
                .map(|(&p, &q)| {
                    if p > q {
                        f
                    } else if p < q {
                        -f
                    } else {
                        S::zero()
                    }
                })
                .collect();
            accumulate(nodes, grads, b, ga.iter().map(|&v| -v).collect());
            accumulate(nodes, grads, a, ga);
        }
        Op::Amplitude { src, spectra } => {
            let (n, ch) = node.value.dims2()?;
            let amp = node.value.data();
            let floor = S::of(SPECTRAL_FLOOR);
            let mut gs = vec![S::zero(); n * ch];
            for c in 0..ch {
                for k in 0..n {
                    let a = amp[k * ch + c];
                    if a < floor {
                        continue;
                    }
                    let (re, im) = (spectra.re[c * n + k], spectra.im[c * n + k]);
                    let up = g[k * ch + c] / a;
                    for t in 0..n {
                        let (cos, sin) = twiddle::<S>(k, t, n);
                        // re_k = Σ u_t cos, im_k = -Σ u_t sin
                        gs[t * ch + c] += up * (re * cos - im * sin);
                    }
                }
            }
            accumulate(nodes, grads, *src, gs);
        }
        Op::PhaseReconstruct {
            filtered,
            src,
            spectra,
        } => {
            let (n, ch) = node.value.dims2()?;
            let f = val(*filtered).data();
            let floor = S::of(SPECTRAL_FLOOR);
            let inv_n = S::one() / S::of(n as f64);
            let mut gf = vec![S::zero(); n * ch];
            let mut gs = vec![S::zero(); n * ch];
            for c in 0..ch {
                for k in 0..n {
                    let (re, im) = (spectra.re[c * n + k], spectra.im[c * n + k]);
                    let r = re.hypot(im);
                    let (er, ei) = if r < floor {
                        (S::one(), S::zero())
                    } else {
                        (re / r, im / r)
                    };
                    // y_t = (1/n) Σ_k F_k (e_re cos θ - e_im sin θ)
                    let mut dre = S::zero();
                    let mut dim = S::zero();
                    for t in 0..n {
                        let (cos, sin) = twiddle::<S>(k, t, n);
                        let gt = g[t * ch + c] * inv_n;
                        dre += gt * cos;
                        dim -= gt * sin;
                    }
                    gf[k * ch + c] = dre * er + dim * ei;
                    if r < floor {
                        continue;
                    }
                    // chain through the unit phasor (re, im) / r
                    let fk = f[k * ch + c];
                    let (ge_re, ge_im) = (fk * dre, fk * dim);
                    let r3 = r * r * r;
                    let g_re = (ge_re * im * im - ge_im * re * im) / r3;
                    let g_im = (ge_im * re * re - ge_re * re * im) / r3;
                    for t in 0..n {
                        let (cos, sin) = twiddle::<S>(k, t, n);
                        gs[t * ch + c] += g_re * cos - g_im * sin;
                    }
                }
            }
            accumulate(nodes, grads, *filtered, gf);
            accumulate(nodes, grads, *src, gs);
        }
    }
    Ok(())
}
