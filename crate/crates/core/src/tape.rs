//! Reverse-mode tape.
//!
//! Each call on [`Tape`] evaluates one kernel from [`crate::ops`] eagerly and
//! appends a node. [`Tape::backward`] walks the nodes in exact reverse order
//! without mutating the tape, so the same tape can be replayed any number of
//! times.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::ops::{self, Activation, NormCache, NormMode, RunningStats};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse op family, used to name ops in gradient reports and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    Exp,
    Log,
    Sqrt,
    Square,
    Atan,
    Activation,
    Clamp,
    Minimum,
    Maximum,
    SoftmaxRows,
    LayerNorm,
    BatchNorm,
    L2Normalize,
    GlobalAvgPool,
    Conv2d,
    Sum,
    Mean,
    View,
    SliceCols,
    ConcatCols,
    Gather,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale => "scale",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Atan => "atan",
            OpKind::Activation => "activation",
            OpKind::Clamp => "clamp",
            OpKind::Minimum => "minimum",
            OpKind::Maximum => "maximum",
            OpKind::SoftmaxRows => "softmax_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::BatchNorm => "batch_norm",
            OpKind::L2Normalize => "l2_normalize_rows",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Conv2d => "conv2d",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::View => "view",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Gather => "gather",
        };
        f.write_str(s)
    }
}

impl OpKind {
    pub const ALL: [OpKind; 30] = {
        use OpKind::*;
        [
            Leaf,
            MatMul,
            Transpose,
            Reshape,
            Add,
            Sub,
            Mul,
            Div,
            Scale,
            Exp,
            Log,
            Sqrt,
            Square,
            Atan,
            Activation,
            Clamp,
            Minimum,
            Maximum,
            SoftmaxRows,
            LayerNorm,
            BatchNorm,
            L2Normalize,
            GlobalAvgPool,
            Conv2d,
            Sum,
            Mean,
            View,
            SliceCols,
            ConcatCols,
            Gather,
        ]
    };
}

impl std::str::FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| TensorError::Config(format!("unknown op '{s}'")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Atan(Var),
    Act(Var, Activation),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: NormCache,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mode: NormMode,
        cache: NormCache,
    },
    L2Normalize(Var, f64),
    GlobalAvgPool(Var),
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Sum(Var),
    Mean(Var),
    View {
        src: Var,
        offset: usize,
    },
    SliceCols {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        src: Var,
        indices: Vec<usize>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Square(_) => OpKind::Square,
            Op::Atan(_) => OpKind::Atan,
            Op::Act(..) => OpKind::Activation,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Minimum(..) => OpKind::Minimum,
            Op::Maximum(..) => OpKind::Maximum,
            Op::Softmax(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::GlobalAvgPool(_) => OpKind::GlobalAvgPool,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::View { .. } => OpKind::View,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::Gather { .. } => OpKind::Gather,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by one backward replay, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// `None` when the variable does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when it does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Flips the sign of every backward pass through ops of `kind`. Only
    /// useful for checking that gradient verification notices a broken op.
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(kind),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kinds(&self) -> impl Iterator<Item = OpKind> + '_ {
        self.nodes.iter().map(|n| n.op.kind())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Batch statistics recorded by a train-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                mode: NormMode::Train,
                cache,
                ..
            } => Some((&cache.mean, &cache.var)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = ops::transpose(self.value(a))?;
        Ok(self.push(y, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        Ok(self.push(y, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).map(|v| v * c);
        self.push(y, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::exp);
        self.push(y, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::ln);
        self.push(y, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::sqrt);
        self.push(y, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v * v);
        self.push(y, Op::Square(a))
    }

    pub fn atan(&mut self, a: Var) -> Var {
        let y = self.value(a).map(f64::atan);
        self.push(y, Op::Atan(a))
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Var {
        let y = ops::activation(kind, self.value(a));
        self.push(y, Op::Act(a, kind))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let y = self.value(a).map(|v| v.clamp(lo, hi));
        self.push(y, Op::Clamp(a, lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary("minimum", self.value(a), self.value(b), f64::min)?;
        Ok(self.push(y, Op::Minimum(a, b)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::broadcast_binary("maximum", self.value(a), self.value(b), f64::max)?;
        Ok(self.push(y, Op::Maximum(a, b)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let y = ops::softmax_rows(self.value(a));
        self.push(y, Op::Softmax(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (y, cache) = ops::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
        ))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running: Option<&RunningStats>,
        mode: NormMode,
        eps: f64,
    ) -> Result<Var> {
        let (y, cache) = ops::batch_norm(
            self.value(x),
            self.value(gain),
            self.value(bias),
            running,
            mode,
            eps,
        )?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gain,
                bias,
                mode,
                cache,
            },
        ))
    }

    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let y = ops::l2_normalize_rows(self.value(a), eps);
        self.push(y, Op::L2Normalize(a, eps))
    }

    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(a))?;
        Ok(self.push(y, Op::GlobalAvgPool(a)))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let y = Tensor::scalar(self.value(a).sum());
        self.push(y, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let y = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(y, Op::Mean(a))
    }

    /// Contiguous flat window of `src` starting at `offset`, reshaped to `shape`.
    pub fn view(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let s = self.value(src);
        if offset + n > s.len() || n == 0 {
            return Err(TensorError::dim("view", s.shape(), shape));
        }
        let y = Tensor::new(shape.to_vec(), s.data()[offset..offset + n].to_vec())?;
        Ok(self.push(y, Op::View { src, offset }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(src);
        if s.ndim() != 2 || start >= end || end > s.shape()[1] {
            return Err(TensorError::dim("slice_cols", s.shape(), &[start, end]));
        }
        let (m, n) = (s.shape()[0], s.shape()[1]);
        let data = (0..m)
            .flat_map(|i| s.data()[i * n + start..i * n + end].iter().copied())
            .collect();
        let y = Tensor::from_parts(vec![m, end - start], data);
        Ok(self.push(y, Op::SliceCols { src, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Config("concat_cols: no inputs".into()))?;
        let m = self.shape(*first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != m {
                return Err(TensorError::dim("concat_cols", self.shape(*first), s));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[1];
                data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
        }
        let y = Tensor::from_parts(vec![m, total], data);
        Ok(self.push(y, Op::ConcatCols(parts.to_vec())))
    }

    /// 1-D tensor of the flat elements at `indices`.
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        let s = self.value(src);
        if indices.is_empty() || indices.iter().any(|&i| i >= s.len()) {
            return Err(TensorError::Config(format!(
                "gather: index out of range for {:?}",
                s.shape()
            )));
        }
        let y = Tensor::from_vec(indices.iter().map(|&i| s.data()[i]).collect());
        Ok(self.push(
            y,
            Op::Gather {
                src,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Backward seeded with ones, i.e. the gradient of the sum of `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let seed = Tensor::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Backward from `root` seeded with `seed`. Nodes after `root` are ignored.
    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Grads> {
        if seed.shape() != self.shape(root) {
            return Err(TensorError::dim(
                "backward seed",
                seed.shape(),
                self.shape(root),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut contribs = self.node_backward(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in contribs.iter_mut() {
                    *t = t.map(|v| -v);
                }
            }
            for (v, t) in contribs {
                debug_assert_eq!(t.shape(), self.shape(v));
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let unary = |a: Var, f: &dyn Fn(f64, f64) -> f64| -> Result<Vec<(Var, Tensor)>> {
            Ok(vec![(a, val(a).zip_map(g, f)?)])
        };
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, ops::transpose(g)?)],
            Op::Reshape(a) => vec![(*a, g.reshape(self.shape(*a))?)],
            Op::Add(a, b) => vec![
                (*a, ops::reduce_to_shape(g, self.shape(*a))),
                (*b, ops::reduce_to_shape(g, self.shape(*b))),
            ],
            Op::Sub(a, b) => vec![
                (*a, ops::reduce_to_shape(g, self.shape(*a))),
                (*b, ops::reduce_to_shape(&g.map(|v| -v), self.shape(*b))),
            ],
            Op::Mul(a, b) => {
                let (av, bv) = ops::broadcast_pair(val(*a), val(*b))?;
                let da = g.zip_map(&bv, |x, y| x * y)?;
                let db = g.zip_map(&av, |x, y| x * y)?;
                vec![
                    (*a, ops::reduce_to_shape(&da, self.shape(*a))),
                    (*b, ops::reduce_to_shape(&db, self.shape(*b))),
                ]
            }
            Op::Div(a, b) => {
                let (av, bv) = ops::broadcast_pair(val(*a), val(*b))?;
                let da = g.zip_map(&bv, |x, y| x / y)?;
                let q = av.zip_map(&bv, |x, y| -x / (y * y))?;
                let db = g.zip_map(&q, |x, y| x * y)?;
                vec![
                    (*a, ops::reduce_to_shape(&da, self.shape(*a))),
                    (*b, ops::reduce_to_shape(&db, self.shape(*b))),
                ]
            }
            Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
            Op::Exp(a) => vec![(*a, node.value.zip_map(g, |y, d| y * d)?)],
            Op::Log(a) => unary(*a, &|x, d| d / x)?,
            Op::Sqrt(a) => vec![(*a, node.value.zip_map(g, |y, d| d * 0.5 / y)?)],
            Op::Square(a) => unary(*a, &|x, d| 2.0 * x * d)?,
            Op::Atan(a) => unary(*a, &|x, d| d / (1.0 + x * x))?,
            Op::Act(a, kind) => vec![(*a, ops::activation_backward(*kind, val(*a), g)?)],
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                unary(*a, &|x, d| if x >= lo && x <= hi { d } else { 0.0 })?
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = ops::broadcast_pair(val(*a), val(*b))?;
                let pick_a = av.zip_map(&bv, |x, y| {
                    let take = if is_min { x <= y } else { x >= y };
                    if take {
                        1.0
                    } else {
                        0.0
                    }
                })?;
                let da = g.zip_map(&pick_a, |d, p| d * p)?;
                let db = g.zip_map(&pick_a, |d, p| d * (1.0 - p))?;
                vec![
                    (*a, ops::reduce_to_shape(&da, self.shape(*a))),
                    (*b, ops::reduce_to_shape(&db, self.shape(*b))),
                ]
            }
            Op::Softmax(a) => vec![(*a, ops::softmax_rows_backward(&node.value, g)?)],
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let (dx, dg, db) = ops::layer_norm_backward(cache, val(*gain), g)?;
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                mode,
                cache,
            } => {
                let (dx, dg, db) = ops::batch_norm_backward(cache, val(*gain), *mode, g)?;
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::L2Normalize(a, eps) => {
                vec![(*a, ops::l2_normalize_rows_backward(val(*a), *eps, g)?)]
            }
            Op::GlobalAvgPool(a) => vec![(*a, ops::global_avg_pool_backward(self.shape(*a), g))],
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (dx, dk, db) = ops::conv2d_backward(val(*x), val(*kernel), *stride, *pad, g)?;
                let mut out = vec![(*x, dx), (*kernel, dk)];
                if let Some(b) = bias {
                    out.push((*b, db));
                }
                out
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.shape(*a), g.data()[0]))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(self.shape(*a), g.data()[0] / n))]
            }
            Op::View { src, offset } => {
                let mut d = Tensor::zeros(self.shape(*src));
                d.data_mut()[*offset..*offset + g.len()].copy_from_slice(g.data());
                vec![(*src, d)]
            }
            Op::SliceCols { src, start } => {
                let s = self.shape(*src);
                let (m, n) = (s[0], s[1]);
                let w = g.shape()[1];
                let mut d = Tensor::zeros(s);
                for i in 0..m {
                    d.data_mut()[i * n + start..i * n + start + w]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                vec![(*src, d)]
            }
            Op::ConcatCols(parts) => {
                let m = g.shape()[0];
                let total = g.shape()[1];
                let mut off = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.shape(p)[1];
                    let data = (0..m)
                        .flat_map(|i| {
                            g.data()[i * total + off..i * total + off + w]
                                .iter()
                                .copied()
                        })
                        .collect();
                    out.push((p, Tensor::from_parts(vec![m, w], data)));
                    off += w;
                }
                out
            }
            Op::Gather { src, indices } => {
                let mut d = Tensor::zeros(self.shape(*src));
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                vec![(*src, d)]
            }
        })
    }
}
