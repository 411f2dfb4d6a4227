//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles.
//! [`Graph::backward`] walks the tape once, in reverse creation order,
//! and returns the gradient of a scalar loss with respect to every
//! parameter leaf. Node ids grow monotonically, so creation order is a
//! valid topological order.
//!
//! ```
//! use npi_core::tensor::{Graph, Tensor};
//!
//! let g = Graph::<f64>::new();
//! let w = g.param(&Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
//! let x = g.constant(&Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
//! let loss = g.sum(g.matmul(w, x).unwrap());
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(g.value(loss).data(), &[-2.0]);
//! assert_eq!(grads.get(w).unwrap().data(), &[2.0, 3.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = a' b' (+ c)`, row-major, where `'` is an optional transpose.
    /// `a'` is `m x k`, `b'` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).unwrap()
    }

    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).unwrap()
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Logical (rows x cols); stored transposed means stored (cols x rows).
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slices are at least as long as the strided
                // extents asserted above, and `c` does not alias `a` or `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(Scalar::to_f64(*v))).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, batched: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    Conv1d { x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize },
    Slice { a: Var, axis: usize, start: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Transpose { a: Var, d0: usize, d1: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// A differentiation tape. Confined to one thread; build a fresh graph for
/// every forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    record: bool,
    consumed: Cell<bool>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a parameter leaf; zeros when the loss does not reach it.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if !self.trainable.get(v.0).copied().unwrap_or(false) {
            return Err(Error::Graph(format!(
                "node {} is detached and has no gradient",
                v.0
            )));
        }
        let shape = self.shapes[v.0].clone();
        Ok(match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        })
    }
}

/// `shape = outer x axis x inner` split around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
            consumed: Cell::new(false),
        }
    }

    /// A graph that evaluates values only; `backward` is refused.
    pub fn no_grad() -> Self {
        Self {
            record: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let (op, needs_grad) = if self.record && needs_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    /// Non-trainable leaf; gradients are never reported for it.
    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn constant_owned(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape.clone()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    /// Matrix product over the last two axes. `a` is `(..., m, k)`; `b` is
    /// either a shared `(k, n)` matrix or `(..., k, n)` with the same
    /// leading axes as `a`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a b^T` with `b` stored as `(n, k)` or `(..., n, k)`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (&av.shape, &bv.shape);
            if sa.len() < 2 || sb.len() < 2 {
                return Err(self.shape_err("matmul", a, b));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (bk, n) = if trans_b {
                (sb[sb.len() - 1], sb[sb.len() - 2])
            } else {
                (sb[sb.len() - 2], sb[sb.len() - 1])
            };
            if k != bk {
                drop(nodes);
                return Err(self.shape_err("matmul", a, b));
            }
            let batched = sb.len() > 2;
            let lead = &sa[..sa.len() - 2];
            if batched && sb[..sb.len() - 2] != *lead {
                drop(nodes);
                return Err(self.shape_err("matmul", a, b));
            }
            let mut shape = lead.to_vec();
            shape.extend([m, n]);
            let mut out = Tensor::zeros(&shape);
            if batched {
                let batches: usize = lead.iter().product();
                for i in 0..batches {
                    T::gemm(
                        m,
                        k,
                        n,
                        &av.data[i * m * k..],
                        false,
                        &bv.data[i * k * n..],
                        trans_b,
                        &mut out.data[i * m * n..],
                        false,
                    );
                }
            } else {
                let rows = av.numel() / k.max(1);
                if k == 0 {
                    return Ok(self.push(out, Op::Leaf, false));
                }
                T::gemm(rows, k, n, &av.data, false, &bv.data, trans_b, &mut out.data, false);
            }
            (out, batched)
        };
        let (value, batched) = out;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                trans_b,
                batched,
            },
            self.needs(&[a, b]),
        ))
    }

    fn broadcast_binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let nodes = self.nodes.borrow();
        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
        if !is_suffix(&av.shape, &bv.shape) || bv.numel() == 0 {
            drop(nodes);
            return Err(self.shape_err(name, a, b));
        }
        let len = bv.numel();
        let data = av
            .data
            .chunks(len)
            .flat_map(|chunk| chunk.iter().zip(&bv.data).map(|(x, y)| f(*x, *y)))
            .collect();
        Ok(Tensor {
            shape: av.shape.clone(),
            data,
        })
    }

    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, self.needs(&[a, b])))
    }

    /// Elementwise `a - b` for equal shapes.
    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", a, b));
        }
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, self.needs(&[a, b])))
    }

    /// `a * b` elementwise, with `b` broadcast over the leading axes of `a`.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, self.needs(&[a, b])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x * T::from_f64(c));
        self.push(value, Op::Scale { a, c }, self.needs(&[a]))
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.0].value;
        Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn tanh(&self, a: Var) -> Var {
        let value = self.map(a, |x| x.tanh());
        self.push(value, Op::Tanh(a), self.needs(&[a]))
    }

    /// Logistic function `1 / (1 + e^-x)`.
    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.map(a, logistic);
        self.push(value, Op::Sigmoid(a), self.needs(&[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let last = *av.shape.last().unwrap_or(&1);
            let mut data = av.data.clone();
            for row in data.chunks_mut(last.max(1)) {
                let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
                let mut total = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                row.iter_mut().for_each(|v| *v = *v / total);
            }
            Tensor {
                shape: av.shape.clone(),
                data,
            }
        };
        self.push(value, Op::Softmax(a), self.needs(&[a]))
    }

    /// Temporal convolution. `x` is `(batch, c_in, time)`, `w` is
    /// `(c_out, c_in, kernel)` and `bias`, if present, `(c_out)`. Zero
    /// padding of `pad` steps is applied on both ends.
    pub fn conv1d(
        &self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            if xv.shape.len() != 3 || wv.shape.len() != 3 || xv.shape[1] != wv.shape[1] {
                drop(nodes);
                return Err(self.shape_err("conv1d", x, w));
            }
            if stride == 0 {
                return Err(Error::invalid("conv1d stride must be >= 1"));
            }
            let (batch, c_in, time) = (xv.shape[0], xv.shape[1], xv.shape[2]);
            let (c_out, kernel) = (wv.shape[0], wv.shape[2]);
            if time + 2 * pad < kernel {
                drop(nodes);
                return Err(self.shape_err("conv1d", x, w));
            }
            let t_out = (time + 2 * pad - kernel) / stride + 1;
            let bias_data = match bias {
                Some(b) => {
                    let bv = &nodes[b.0].value;
                    if bv.shape != [c_out] {
                        drop(nodes);
                        return Err(self.shape_err("conv1d bias", b, w));
                    }
                    Some(bv.data.clone())
                }
                None => None,
            };
            let geom = ConvGeom {
                c_in,
                time,
                kernel,
                stride,
                pad,
                t_out,
            };
            let mut out = Tensor::zeros(&[batch, c_out, t_out]);
            let mut cols = vec![T::zero(); c_in * kernel * t_out];
            for b in 0..batch {
                geom.im2col(&xv.data[b * c_in * time..(b + 1) * c_in * time], &mut cols);
                let dst = &mut out.data[b * c_out * t_out..(b + 1) * c_out * t_out];
                T::gemm(c_out, c_in * kernel, t_out, &wv.data, false, &cols, false, dst, false);
                if let Some(bd) = &bias_data {
                    for (row, bias) in dst.chunks_mut(t_out).zip(bd) {
                        row.iter_mut().for_each(|v| *v = *v + *bias);
                    }
                }
            }
            out
        };
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            self.needs(&parents),
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if axis >= av.shape.len() || start + len > av.shape[axis] {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: av.shape.clone(),
                    rhs: vec![axis, start, len],
                });
            }
            let (outer, alen, inner) = split_axis(&av.shape, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * alen * inner + start * inner;
                data.extend_from_slice(&av.data[base..base + len * inner]);
            }
            let mut shape = av.shape.clone();
            shape[axis] = len;
            Tensor { shape, data }
        };
        Ok(self.push(value, Op::Slice { a, axis, start }, self.needs(&[a])))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let first = match parts.first() {
                Some(p) => &nodes[p.0].value.shape,
                None => return Err(Error::invalid("concat of nothing")),
            };
            if axis >= first.len() {
                return Err(Error::invalid(format!("concat axis {axis} out of range")));
            }
            let mut total = 0;
            for p in parts {
                let s = &nodes[p.0].value.shape;
                let same = s.len() == first.len()
                    && s.iter()
                        .zip(first)
                        .enumerate()
                        .all(|(i, (x, y))| i == axis || x == y);
                if !same {
                    return Err(Error::Shape {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.clone(),
                    });
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let pv = &nodes[p.0].value;
                    let chunk = pv.shape[axis] * inner;
                    data.extend_from_slice(&pv.data[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor { shape, data }
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            self.needs(parts),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if d0 >= av.shape.len() || d1 >= av.shape.len() {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: av.shape.clone(),
                    rhs: vec![d0, d1],
                });
            }
            swap_axes(av, d0, d1)
        };
        Ok(self.push(value, Op::Transpose { a, d0, d1 }, self.needs(&[a])))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            if shape.iter().product::<usize>() != av.numel() {
                return Err(Error::Shape {
                    op: "reshape",
                    lhs: av.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            Tensor {
                shape: shape.to_vec(),
                data: av.data.clone(),
            }
        };
        Ok(self.push(value, Op::Reshape(a), self.needs(&[a])))
    }

    pub fn sum(&self, a: Var) -> Var {
        let total = self.nodes.borrow()[a.0].value.data.iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), self.needs(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let mean = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.0].value.data;
            d.iter().copied().sum::<T>() / T::from_f64(d.len() as f64)
        };
        self.push(Tensor::scalar(mean), Op::Mean(a), self.needs(&[a]))
    }

    /// Mean squared error over all entries.
    pub fn mse(&self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.shape_err("mse", pred, target));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let (p, t) = (&nodes[pred.0].value.data, &nodes[target.0].value.data);
            let total: T = p.iter().zip(t).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
            total / T::from_f64(p.len() as f64)
        };
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse { pred, target },
            self.needs(&[pred, target]),
        ))
    }

    /// Reverse sweep from a scalar `loss`. A graph supports one backward
    /// pass only.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.record {
            return Err(Error::Graph("graph was built without gradient recording".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                nodes[loss.0].value.shape
            )));
        }
        if self.consumed.replace(true) {
            return Err(Error::Graph("backward already ran on this graph".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            shapes: nodes.iter().map(|n| n.value.shape.clone()).collect(),
            trainable: nodes
                .iter()
                .map(|n| n.needs_grad && matches!(n.op, Op::Leaf))
                .collect(),
            grads,
        })
    }
}

#[inline]
fn logistic<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn swap_axes<T: Scalar>(t: &Tensor<T>, d0: usize, d1: usize) -> Tensor<T> {
    let mut shape = t.shape.clone();
    shape.swap(d0, d1);
    if d0 == d1 {
        return t.clone();
    }
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * t.shape[i + 1];
    }
    let mut src_strides = in_strides.clone();
    src_strides.swap(d0, d1);
    let mut data = Vec::with_capacity(t.numel());
    let mut idx = vec![0usize; rank];
    for _ in 0..t.numel() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        data.push(t.data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor { shape, data }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    time: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
}

impl ConvGeom {
    /// Source time index of output step `t` under kernel tap `k`.
    #[inline]
    fn source(&self, t: usize, k: usize) -> Option<usize> {
        (t * self.stride + k)
            .checked_sub(self.pad)
            .filter(|s| *s < self.time)
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        for c in 0..self.c_in {
            for k in 0..self.kernel {
                let row = &mut cols[(c * self.kernel + k) * self.t_out..][..self.t_out];
                for (t, dst) in row.iter_mut().enumerate() {
                    *dst = match self.source(t, k) {
                        Some(s) => x[c * self.time + s],
                        None => T::zero(),
                    };
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], gx: &mut [T]) {
        for c in 0..self.c_in {
            for k in 0..self.kernel {
                let row = &cols[(c * self.kernel + k) * self.t_out..][..self.t_out];
                for (t, v) in row.iter().enumerate() {
                    if let Some(s) = self.source(t, k) {
                        gx[c * self.time + s] = gx[c * self.time + s] + *v;
                    }
                }
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, delta: Vec<T>) {
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(x, d)| *x = *x + d),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let needs = |v: &Var| nodes[v.0].needs_grad;
    let val = |v: &Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            trans_b,
            batched,
        } => {
            let (av, bv) = (val(a), val(b));
            let sa = &av.shape;
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let n = *node.value.shape.last().unwrap();
            if *batched {
                let batches = av.numel() / (m * k).max(1);
                if needs(a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for i in 0..batches {
                        // ga = g b'^T ; b' = b or b^T
                        T::gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bv.data[i * k * n..],
                            !*trans_b,
                            &mut ga[i * m * k..],
                            false,
                        );
                    }
                    accumulate(grads, a.0, ga);
                }
                if needs(b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    for i in 0..batches {
                        if *trans_b {
                            // b stored (n, k): gb = g^T a
                            T::gemm(n, m, k, &g[i * m * n..], true, &av.data[i * m * k..], false, &mut gb[i * k * n..], false);
                        } else {
                            T::gemm(k, m, n, &av.data[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], false);
                        }
                    }
                    accumulate(grads, b.0, gb);
                }
            } else {
                let rows = av.numel() / k.max(1);
                if needs(a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    T::gemm(rows, n, k, g, false, &bv.data, !*trans_b, &mut ga, false);
                    accumulate(grads, a.0, ga);
                }
                if needs(b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    if *trans_b {
                        T::gemm(n, rows, k, g, true, &av.data, false, &mut gb, false);
                    } else {
                        T::gemm(k, rows, n, &av.data, true, g, false, &mut gb, false);
                    }
                    accumulate(grads, b.0, gb);
                }
            }
        }
        Op::Add { a, b } => {
            if needs(a) {
                accumulate(grads, a.0, g.to_vec());
            }
            if needs(b) {
                let len = val(b).numel();
                let mut gb = vec![T::zero(); len];
                for chunk in g.chunks(len) {
                    gb.iter_mut().zip(chunk).for_each(|(x, y)| *x = *x + *y);
                }
                accumulate(grads, b.0, gb);
            }
        }
        Op::Sub { a, b } => {
            if needs(a) {
                accumulate(grads, a.0, g.to_vec());
            }
            if needs(b) {
                accumulate(grads, b.0, g.iter().map(|x| -*x).collect());
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let len = bv.numel();
            if needs(a) {
                let ga = g
                    .chunks(len)
                    .flat_map(|chunk| chunk.iter().zip(&bv.data).map(|(x, y)| *x * *y))
                    .collect();
                accumulate(grads, a.0, ga);
            }
            if needs(b) {
                let mut gb = vec![T::zero(); len];
                for (gc, ac) in g.chunks(len).zip(av.data.chunks(len)) {
                    for ((dst, x), y) in gb.iter_mut().zip(gc).zip(ac) {
                        *dst = *dst + *x * *y;
                    }
                }
                accumulate(grads, b.0, gb);
            }
        }
        Op::Scale { a, c } => {
            let c = T::from_f64(*c);
            accumulate(grads, a.0, g.iter().map(|x| *x * c).collect());
        }
        Op::Tanh(a) => {
            let ga = g
                .iter()
                .zip(&node.value.data)
                .map(|(x, y)| *x * (T::one() - *y * *y))
                .collect();
            accumulate(grads, a.0, ga);
        }
        Op::Sigmoid(a) => {
            let ga = g
                .iter()
                .zip(&node.value.data)
                .map(|(x, y)| *x * *y * (T::one() - *y))
                .collect();
            accumulate(grads, a.0, ga);
        }
        Op::Softmax(a) => {
            let last = *node.value.shape.last().unwrap_or(&1);
            let mut ga = Vec::with_capacity(g.len());
            for (gr, yr) in g.chunks(last.max(1)).zip(node.value.data.chunks(last.max(1))) {
                let dot: T = gr.iter().zip(yr).map(|(x, y)| *x * *y).sum();
                ga.extend(gr.iter().zip(yr).map(|(x, y)| *y * (*x - dot)));
            }
            accumulate(grads, a.0, ga);
        }
        Op::Conv1d {
            x,
            w,
            bias,
            stride,
            pad,
        } => {
            let (xv, wv) = (val(x), val(w));
            let (batch, c_in, time) = (xv.shape[0], xv.shape[1], xv.shape[2]);
            let (c_out, kernel) = (wv.shape[0], wv.shape[2]);
            let t_out = node.value.shape[2];
            let geom = ConvGeom {
                c_in,
                time,
                kernel,
                stride: *stride,
                pad: *pad,
                t_out,
            };
            let ck = c_in * kernel;
            let mut cols = vec![T::zero(); ck * t_out];
            let mut gw = needs(w).then(|| vec![T::zero(); wv.numel()]);
            let mut gx = needs(x).then(|| vec![T::zero(); xv.numel()]);
            for b in 0..batch {
                let gb = &g[b * c_out * t_out..(b + 1) * c_out * t_out];
                if let Some(gw) = gw.as_mut() {
                    geom.im2col(&xv.data[b * c_in * time..(b + 1) * c_in * time], &mut cols);
                    T::gemm(c_out, t_out, ck, gb, false, &cols, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    T::gemm(ck, c_out, t_out, &wv.data, true, gb, false, &mut cols, false);
                    geom.col2im(&cols, &mut gx[b * c_in * time..(b + 1) * c_in * time]);
                }
            }
            if let Some(gw) = gw {
                accumulate(grads, w.0, gw);
            }
            if let Some(gx) = gx {
                accumulate(grads, x.0, gx);
            }
            if let Some(bias) = bias.filter(|b| needs(b)) {
                let mut gbias = vec![T::zero(); c_out];
                for (i, row) in g.chunks(t_out).enumerate() {
                    gbias[i % c_out] = gbias[i % c_out] + row.iter().copied().sum();
                }
                accumulate(grads, bias.0, gbias);
            }
        }
        Op::Slice { a, axis, start } => {
            let av = val(a);
            let (outer, alen, inner) = split_axis(&av.shape, *axis);
            let len = node.value.shape[*axis];
            let mut ga = vec![T::zero(); av.numel()];
            for o in 0..outer {
                let base = o * alen * inner + start * inner;
                ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(grads, a.0, ga);
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(&node.value.shape, *axis);
            let mut offset = 0;
            let mut pieces: Vec<Vec<T>> = parts
                .iter()
                .map(|p| Vec::with_capacity(val(p).numel()))
                .collect();
            for _ in 0..outer {
                for (p, piece) in parts.iter().zip(pieces.iter_mut()) {
                    let chunk = val(p).shape[*axis] * inner;
                    piece.extend_from_slice(&g[offset..offset + chunk]);
                    offset += chunk;
                }
            }
            for (p, piece) in parts.iter().zip(pieces) {
                if needs(p) {
                    accumulate(grads, p.0, piece);
                }
            }
        }
        Op::Transpose { a, d0, d1 } => {
            let gt = Tensor {
                shape: node.value.shape.clone(),
                data: g.to_vec(),
            };
            accumulate(grads, a.0, swap_axes(&gt, *d0, *d1).data);
        }
        Op::Reshape(a) => accumulate(grads, a.0, g.to_vec()),
        Op::Sum(a) => accumulate(grads, a.0, vec![g[0]; val(a).numel()]),
        Op::Mean(a) => {
            let len = val(a).numel();
            accumulate(grads, a.0, vec![g[0] / T::from_f64(len as f64); len]);
        }
        Op::Mse { pred, target } => {
            let (p, t) = (&val(pred).data, &val(target).data);
            let scale = g[0] * T::from_f64(2.0 / p.len() as f64);
            let diff: Vec<T> = p.iter().zip(t).map(|(x, y)| (*x - *y) * scale).collect();
            if needs(target) {
                accumulate(grads, target.0, diff.iter().map(|d| -*d).collect());
            }
            if needs(pred) {
                accumulate(grads, pred.0, diff);
            }
        }
    }
}
