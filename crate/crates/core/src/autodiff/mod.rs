//! Reverse-mode differentiation over a recorded graph of tensor primitives.
//!
//! A [`Graph`] is built once per forward pass. Parameters are borrowed from a
//! [`ParamStore`] (no copies); every primitive application appends a node, so
//! node order is a topological order and [`Graph::backward`] simply walks the
//! nodes in reverse, visiting each once.

mod gradcheck;
pub(crate) mod kernels;

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

pub use gradcheck::{finite_diff_check, param_diff_check};

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{invalid, mismatch, Tensor, TensorError};
use kernels::ConvGeom;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Primitive identifiers, parseable from their snake-case names.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Add,
    Sub,
    Mul,
    Scale,
    MatMul,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    BatchNorm,
    Concat,
    Permute,
    Reshape,
    Mean,
    Sum,
    Conv1d,
    Conv2d,
    MaxPool2d,
    MaxUnpool2d,
    Bce,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 20] = [
        PrimitiveKind::Add,
        PrimitiveKind::Sub,
        PrimitiveKind::Mul,
        PrimitiveKind::Scale,
        PrimitiveKind::MatMul,
        PrimitiveKind::Relu,
        PrimitiveKind::Sigmoid,
        PrimitiveKind::Softmax,
        PrimitiveKind::LayerNorm,
        PrimitiveKind::BatchNorm,
        PrimitiveKind::Concat,
        PrimitiveKind::Permute,
        PrimitiveKind::Reshape,
        PrimitiveKind::Mean,
        PrimitiveKind::Sum,
        PrimitiveKind::Conv1d,
        PrimitiveKind::Conv2d,
        PrimitiveKind::MaxPool2d,
        PrimitiveKind::MaxUnpool2d,
        PrimitiveKind::Bce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Add => "add",
            PrimitiveKind::Sub => "sub",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::MatMul => "matmul",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::LayerNorm => "layer_norm",
            PrimitiveKind::BatchNorm => "batch_norm",
            PrimitiveKind::Concat => "concat",
            PrimitiveKind::Permute => "permute",
            PrimitiveKind::Reshape => "reshape",
            PrimitiveKind::Mean => "mean",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Conv1d => "conv1d",
            PrimitiveKind::Conv2d => "conv2d",
            PrimitiveKind::MaxPool2d => "max_pool2d",
            PrimitiveKind::MaxUnpool2d => "max_unpool2d",
            PrimitiveKind::Bce => "bce",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownPrimitive(s.to_string()))
    }
}

/// Loose attribute bag used by [`Primitive::from_kind`].
#[derive(Clone, Debug, Default)]
pub struct Attrs {
    pub factor: Option<f64>,
    pub eps: Option<f64>,
    pub clamp: Option<f64>,
    pub training: Option<bool>,
    pub axis: Option<usize>,
    pub perm: Option<Vec<usize>>,
    pub shape: Option<Vec<usize>>,
    pub padding: Option<Vec<usize>>,
    pub kernel: Option<Vec<usize>>,
}

pub const DEFAULT_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_BCE_CLAMP: f64 = 1e-7;

/// A primitive together with its attributes.
///
/// Input conventions:
/// - `Add(a, b)`: `b` has `a`'s shape or a suffix of it.
/// - `MatMul(a, b)`: `a` is `(..., m, k)`; `b` is `(k, n)` or `(..., k, n)`.
/// - `LayerNorm(x, gamma, beta)` normalizes the last axis.
/// - `BatchNorm(x, gamma, beta)` in training mode, plus `(running_mean,
///   running_var)` in inference mode; channels are axis 1.
/// - `Conv1d(x, w, b)`: `(B, Cin, T)`, `(Cout, Cin, K)`, `(Cout)`.
/// - `Conv2d(x, w, b)`: `(B, Cin, H, W)`, `(Cout, Cin, KH, KW)`, `(Cout)`.
/// - `MaxUnpool2d(x, pooled)`: `pooled` is the output of the matching pool.
/// - `Bce(pred, target)`: mean binary cross entropy; no gradient to target.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale { factor: f64 },
    MatMul,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm { eps: f64 },
    BatchNorm { eps: f64, training: bool },
    Concat { axis: usize },
    Permute { perm: Vec<usize> },
    Reshape { shape: Vec<usize> },
    Mean,
    Sum,
    Conv1d { padding: usize },
    Conv2d { padding: [usize; 2] },
    MaxPool2d { kernel: [usize; 2] },
    MaxUnpool2d { kernel: [usize; 2] },
    Bce { clamp: f64 },
}

fn pair(name: &'static str, attr: &'static str, v: &Option<Vec<usize>>) -> Result<[usize; 2], TensorError> {
    match v.as_deref() {
        Some([a, b]) => Ok([*a, *b]),
        Some(other) => Err(invalid(name, format!("`{attr}` needs two values, got {other:?}"))),
        None => Err(TensorError::MissingAttr { primitive: name, attr }),
    }
}

impl Primitive {
    pub fn from_kind(kind: PrimitiveKind, attrs: &Attrs) -> Result<Self, TensorError> {
        let name = kind.name();
        let missing = |attr| TensorError::MissingAttr { primitive: name, attr };
        Ok(match kind {
            PrimitiveKind::Add => Primitive::Add,
            PrimitiveKind::Sub => Primitive::Sub,
            PrimitiveKind::Mul => Primitive::Mul,
            PrimitiveKind::Scale => Primitive::Scale {
                factor: attrs.factor.ok_or_else(|| missing("factor"))?,
            },
            PrimitiveKind::MatMul => Primitive::MatMul,
            PrimitiveKind::Relu => Primitive::Relu,
            PrimitiveKind::Sigmoid => Primitive::Sigmoid,
            PrimitiveKind::Softmax => Primitive::Softmax,
            PrimitiveKind::LayerNorm => Primitive::LayerNorm {
                eps: attrs.eps.unwrap_or(DEFAULT_NORM_EPS),
            },
            PrimitiveKind::BatchNorm => Primitive::BatchNorm {
                eps: attrs.eps.unwrap_or(DEFAULT_NORM_EPS),
                training: attrs.training.ok_or_else(|| missing("training"))?,
            },
            PrimitiveKind::Concat => Primitive::Concat {
                axis: attrs.axis.ok_or_else(|| missing("axis"))?,
            },
            PrimitiveKind::Permute => Primitive::Permute {
                perm: attrs.perm.clone().ok_or_else(|| missing("perm"))?,
            },
            PrimitiveKind::Reshape => Primitive::Reshape {
                shape: attrs.shape.clone().ok_or_else(|| missing("shape"))?,
            },
            PrimitiveKind::Mean => Primitive::Mean,
            PrimitiveKind::Sum => Primitive::Sum,
            PrimitiveKind::Conv1d => match attrs.padding.as_deref() {
                Some([p]) => Primitive::Conv1d { padding: *p },
                Some(other) => return Err(invalid(name, format!("`padding` needs one value, got {other:?}"))),
                None => return Err(missing("padding")),
            },
            PrimitiveKind::Conv2d => Primitive::Conv2d {
                padding: pair(name, "padding", &attrs.padding)?,
            },
            PrimitiveKind::MaxPool2d => Primitive::MaxPool2d {
                kernel: pair(name, "kernel", &attrs.kernel)?,
            },
            PrimitiveKind::MaxUnpool2d => Primitive::MaxUnpool2d {
                kernel: pair(name, "kernel", &attrs.kernel)?,
            },
            PrimitiveKind::Bce => Primitive::Bce {
                clamp: attrs.clamp.unwrap_or(DEFAULT_BCE_CLAMP),
            },
        })
    }

    pub fn kind(&self) -> PrimitiveKind {
        match self {
            Primitive::Add => PrimitiveKind::Add,
            Primitive::Sub => PrimitiveKind::Sub,
            Primitive::Mul => PrimitiveKind::Mul,
            Primitive::Scale { .. } => PrimitiveKind::Scale,
            Primitive::MatMul => PrimitiveKind::MatMul,
            Primitive::Relu => PrimitiveKind::Relu,
            Primitive::Sigmoid => PrimitiveKind::Sigmoid,
            Primitive::Softmax => PrimitiveKind::Softmax,
            Primitive::LayerNorm { .. } => PrimitiveKind::LayerNorm,
            Primitive::BatchNorm { .. } => PrimitiveKind::BatchNorm,
            Primitive::Concat { .. } => PrimitiveKind::Concat,
            Primitive::Permute { .. } => PrimitiveKind::Permute,
            Primitive::Reshape { .. } => PrimitiveKind::Reshape,
            Primitive::Mean => PrimitiveKind::Mean,
            Primitive::Sum => PrimitiveKind::Sum,
            Primitive::Conv1d { .. } => PrimitiveKind::Conv1d,
            Primitive::Conv2d { .. } => PrimitiveKind::Conv2d,
            Primitive::MaxPool2d { .. } => PrimitiveKind::MaxPool2d,
            Primitive::MaxUnpool2d { .. } => PrimitiveKind::MaxUnpool2d,
            Primitive::Bce { .. } => PrimitiveKind::Bce,
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul | Primitive::Bce { .. } => n == 2,
            Primitive::MaxUnpool2d { .. } => n == 2,
            Primitive::LayerNorm { .. } | Primitive::Conv1d { .. } | Primitive::Conv2d { .. } => n == 3,
            Primitive::BatchNorm { training, .. } => n == if *training { 3 } else { 5 },
            Primitive::Concat { .. } => n >= 1,
            _ => n == 1,
        }
    }
}

enum Saved<S> {
    None,
    PoolIndices(Vec<usize>),
    Norm(kernels::NormSaved<S>),
    BatchNorm(kernels::BatchNormSaved<S>),
    Conv(ConvGeom),
}

enum NodeKind<S> {
    Constant,
    Leaf,
    Param(ParamId),
    Op {
        prim: Primitive,
        inputs: Vec<usize>,
        saved: Saved<S>,
    },
}

struct Node<'p, S: Scalar> {
    value: Cow<'p, Tensor<S>>,
    kind: NodeKind<S>,
    needs_grad: bool,
}

/// Records primitive applications for one forward pass.
pub struct Graph<'p, S: Scalar = f64> {
    nodes: Vec<Node<'p, S>>,
    tracking: bool,
}

impl<'p, S: Scalar> Default for Graph<'p, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            tracking: true,
        }
    }

    /// Inference-only graph: values are computed, nothing is differentiable.
    pub fn no_grad() -> Self {
        Graph {
            nodes: Vec::new(),
            tracking: false,
        }
    }

    pub fn is_tracking(&self) -> bool {
        self.tracking
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Tensor<S>>, kind: NodeKind<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            kind,
            needs_grad: needs_grad && self.tracking,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), NodeKind::Constant, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor<S>) -> Var {
        self.push(Cow::Borrowed(t), NodeKind::Constant, false)
    }

    /// A differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<S>) -> Var {
        self.push(Cow::Owned(t), NodeKind::Leaf, true)
    }

    pub fn param(&mut self, store: &'p ParamStore<S>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        if trainable {
            self.push(Cow::Borrowed(store.get(id)), NodeKind::Param(id), true)
        } else {
            self.push(Cow::Borrowed(store.get(id)), NodeKind::Constant, false)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch mean and unbiased variance recorded by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[S], &[S])> {
        match &self.nodes[v.0].kind {
            NodeKind::Op {
                saved: Saved::BatchNorm(b),
                ..
            } => Some((&b.batch_mean, &b.batch_var)),
            _ => None,
        }
    }

    /// Applies `prim` to `inputs`, recording the node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        let name = prim.kind().name();
        if !prim.arity_ok(inputs.len()) {
            return Err(invalid(name, format!("wrong number of inputs: {}", inputs.len())));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(invalid(name, format!("input {bad:?} is not in this graph")));
        }
        let (value, saved) = self.forward(&prim, inputs)?;
        let needs_grad = match prim {
            Primitive::Bce { .. } | Primitive::MaxUnpool2d { .. } => self.nodes[inputs[0].0].needs_grad,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let saved = if self.tracking || matches!(saved, Saved::PoolIndices(_) | Saved::BatchNorm(_)) {
            saved
        } else {
            Saved::None
        };
        let kind = NodeKind::Op {
            prim,
            inputs: inputs.iter().map(|v| v.0).collect(),
            saved,
        };
        Ok(self.push(Cow::Owned(value), kind, needs_grad))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<(Tensor<S>, Saved<S>), TensorError> {
        let x = |i: usize| -> &Tensor<S> { &self.nodes[inputs[i].0].value };
        let plain = |t: Tensor<S>| (t, Saved::None);
        Ok(match prim {
            Primitive::Add => plain(kernels::add(x(0), x(1))?),
            Primitive::Sub => plain(kernels::zip_same("sub", x(0), x(1), |a, b| a - b)?),
            Primitive::Mul => plain(kernels::zip_same("mul", x(0), x(1), |a, b| a * b)?),
            Primitive::Scale { factor } => {
                let f = S::lit(*factor);
                plain(x(0).map(|v| v * f))
            }
            Primitive::MatMul => plain(kernels::matmul(x(0), x(1))?),
            Primitive::Relu => plain(x(0).map(|v| v.max(S::zero()))),
            Primitive::Sigmoid => plain(x(0).map(kernels::sigmoid)),
            Primitive::Softmax => plain(kernels::softmax_last(x(0))?),
            Primitive::LayerNorm { eps } => {
                let (t, s) = kernels::layer_norm(x(0), x(1), x(2), *eps)?;
                (t, Saved::Norm(s))
            }
            Primitive::BatchNorm { eps, training } => {
                if *training {
                    let (t, s) = kernels::batch_norm_train(x(0), x(1), x(2), *eps)?;
                    (t, Saved::BatchNorm(s))
                } else {
                    let (t, s) = kernels::batch_norm_eval(x(0), x(1), x(2), x(3), x(4), *eps)?;
                    (t, Saved::Norm(s))
                }
            }
            Primitive::Concat { axis } => {
                let ts: Vec<&Tensor<S>> = (0..inputs.len()).map(x).collect();
                plain(kernels::concat(&ts, *axis)?)
            }
            Primitive::Permute { perm } => plain(kernels::permute(x(0), perm)?),
            Primitive::Reshape { shape } => {
                let n: usize = shape.iter().product();
                if n != x(0).len() || shape.contains(&0) {
                    return Err(mismatch("reshape", x(0).shape(), shape));
                }
                plain(Tensor::new(shape.clone(), x(0).data().to_vec())?)
            }
            Primitive::Mean => {
                let t = x(0);
                plain(Tensor::scalar(t.sum() / S::from_usize_lossy(t.len())))
            }
            Primitive::Sum => plain(Tensor::scalar(x(0).sum())),
            Primitive::Conv1d { padding } => {
                let (xs, ws) = (x(0).shape(), x(1).shape());
                if xs.len() != 3 || ws.len() != 3 {
                    return Err(mismatch("conv1d", xs, ws));
                }
                let geom = kernels::conv_geom(
                    "conv1d",
                    &[xs[0], xs[1], 1, xs[2]],
                    &[ws[0], ws[1], 1, ws[2]],
                    x(2).shape(),
                    [0, *padding],
                )?;
                let out = kernels::conv_forward(&geom, x(0).data(), x(1).data(), x(2).data());
                (Tensor::new(vec![geom.batch, geom.cout, geom.ow], out)?, Saved::Conv(geom))
            }
            Primitive::Conv2d { padding } => {
                let (xs, ws) = (x(0).shape(), x(1).shape());
                if xs.len() != 4 || ws.len() != 4 {
                    return Err(mismatch("conv2d", xs, ws));
                }
                let geom = kernels::conv_geom(
                    "conv2d",
                    &[xs[0], xs[1], xs[2], xs[3]],
                    &[ws[0], ws[1], ws[2], ws[3]],
                    x(2).shape(),
                    *padding,
                )?;
                let out = kernels::conv_forward(&geom, x(0).data(), x(1).data(), x(2).data());
                (
                    Tensor::new(vec![geom.batch, geom.cout, geom.oh, geom.ow], out)?,
                    Saved::Conv(geom),
                )
            }
            Primitive::MaxPool2d { kernel } => {
                let (t, idx) = kernels::max_pool2d(x(0), *kernel)?;
                (t, Saved::PoolIndices(idx))
            }
            Primitive::MaxUnpool2d { kernel } => {
                let pooled = &self.nodes[inputs[1].0];
                let (indices, pool_in) = match &pooled.kind {
                    NodeKind::Op {
                        prim: Primitive::MaxPool2d { kernel: k },
                        inputs: pin,
                        saved: Saved::PoolIndices(idx),
                    } if k == kernel => (idx, pin[0]),
                    _ => {
                        return Err(invalid(
                            "max_unpool2d",
                            "second input must be a max_pool2d output with the same kernel",
                        ))
                    }
                };
                if x(0).shape() != pooled.value.shape() {
                    return Err(mismatch("max_unpool2d", x(0).shape(), pooled.value.shape()));
                }
                let out_shape = self.nodes[pool_in].value.shape().to_vec();
                plain(kernels::max_unpool2d(x(0), indices, &out_shape))
            }
            Primitive::Bce { clamp } => plain(kernels::bce(x(0), x(1), *clamp)?),
        })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TensorError> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.tracking {
            return Err(invalid("backward", "graph was built without gradient tracking"));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), S::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let NodeKind::Op { prim, inputs, saved } = &node.kind else {
                continue;
            };
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.op_backward(prim, inputs, saved, &node.value, &g);
            for (slot, contrib) in inputs.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                if !self.nodes[*slot].needs_grad {
                    continue;
                }
                match &mut grads[*slot] {
                    Some(acc) => acc.add_assign(&c),
                    empty => *empty = Some(c),
                }
            }
        }
        let mut leaves = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let key = match node.kind {
                NodeKind::Leaf => LeafKey::Leaf(i),
                NodeKind::Param(id) => LeafKey::Param(id),
                _ => continue,
            };
            let g = grads[i]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
            leaves.push((i, key, g));
        }
        Ok(Gradients { leaves })
    }

    fn op_backward(
        &self,
        prim: &Primitive,
        inputs: &[usize],
        saved: &Saved<S>,
        out: &Tensor<S>,
        g: &Tensor<S>,
    ) -> Vec<Option<Tensor<S>>> {
        let x = |i: usize| -> &Tensor<S> { &self.nodes[inputs[i]].value };
        let wants = |i: usize| self.nodes[inputs[i]].needs_grad;
        match prim {
            Primitive::Add => {
                let gb = wants(1).then(|| kernels::reduce_to_suffix(g, x(1).shape()));
                vec![Some(g.clone()), gb]
            }
            Primitive::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Primitive::Mul => {
                let ga = kernels::zip_same("mul", g, x(1), |a, b| a * b).expect("shape");
                let gb = kernels::zip_same("mul", g, x(0), |a, b| a * b).expect("shape");
                vec![Some(ga), Some(gb)]
            }
            Primitive::Scale { factor } => {
                let f = S::lit(*factor);
                vec![Some(g.map(|v| v * f))]
            }
            Primitive::MatMul => {
                let (ga, gb) = kernels::matmul_backward(x(0), x(1), g);
                vec![Some(ga), Some(gb)]
            }
            Primitive::Relu => {
                let gx = kernels::zip_same("relu", g, out, |gv, y| if y > S::zero() { gv } else { S::zero() })
                    .expect("shape");
                vec![Some(gx)]
            }
            Primitive::Sigmoid => {
                let gx = kernels::zip_same("sigmoid", g, out, |gv, y| gv * y * (S::one() - y)).expect("shape");
                vec![Some(gx)]
            }
            Primitive::Softmax => vec![Some(kernels::softmax_backward(out, g))],
            Primitive::LayerNorm { .. } => {
                let Saved::Norm(s) = saved else { unreachable!("layer_norm saves stats") };
                let (gx, gg, gb) = kernels::layer_norm_backward(s, x(1), g);
                vec![Some(gx), Some(gg), Some(gb)]
            }
            Primitive::BatchNorm { training, .. } => {
                let norm = match saved {
                    Saved::BatchNorm(b) => &b.norm,
                    Saved::Norm(n) => n,
                    _ => unreachable!("batch_norm saves stats"),
                };
                let (gx, gg, gb) = kernels::batch_norm_backward(norm, x(1), g, *training);
                let mut v = vec![Some(gx), Some(gg), Some(gb)];
                if !training {
                    v.extend([None, None]);
                }
                v
            }
            Primitive::Concat { axis } => {
                let shapes: Vec<Vec<usize>> = inputs.iter().map(|&i| self.nodes[i].value.shape().to_vec()).collect();
                kernels::concat_backward(&shapes, *axis, g).into_iter().map(Some).collect()
            }
            Primitive::Permute { perm } => {
                let inv = kernels::inverse_perm(perm);
                vec![Some(kernels::permute(g, &inv).expect("valid perm"))]
            }
            Primitive::Reshape { .. } => {
                vec![Some(Tensor::new(x(0).shape().to_vec(), g.data().to_vec()).expect("shape"))]
            }
            Primitive::Mean => {
                let n = S::from_usize_lossy(x(0).len());
                vec![Some(Tensor::full(x(0).shape().to_vec(), g.item() / n))]
            }
            Primitive::Sum => vec![Some(Tensor::full(x(0).shape().to_vec(), g.item()))],
            Primitive::Conv1d { .. } | Primitive::Conv2d { .. } => {
                let Saved::Conv(geom) = saved else { unreachable!("conv saves geometry") };
                let (gx, gw, gb) = kernels::conv_backward(geom, x(0).data(), x(1).data(), g.data());
                vec![
                    Some(Tensor::new(x(0).shape().to_vec(), gx).expect("shape")),
                    Some(Tensor::new(x(1).shape().to_vec(), gw).expect("shape")),
                    Some(Tensor::new(x(2).shape().to_vec(), gb).expect("shape")),
                ]
            }
            Primitive::MaxPool2d { .. } => {
                let Saved::PoolIndices(idx) = saved else { unreachable!("pool saves indices") };
                let mut gx = Tensor::zeros(x(0).shape().to_vec());
                let d = gx.data_mut();
                for (&gv, &i) in g.data().iter().zip(idx) {
                    d[i] = d[i] + gv;
                }
                vec![Some(gx)]
            }
            Primitive::MaxUnpool2d { .. } => {
                let pooled = &self.nodes[inputs[1]];
                let NodeKind::Op {
                    saved: Saved::PoolIndices(idx),
                    ..
                } = &pooled.kind
                else {
                    unreachable!("validated in forward")
                };
                let data = idx.iter().map(|&i| g.data()[i]).collect();
                vec![Some(Tensor::new(x(0).shape().to_vec(), data).expect("shape")), None]
            }
            Primitive::Bce { clamp } => {
                vec![Some(kernels::bce_backward(x(0), x(1), *clamp, g.item())), None]
            }
        }
    }

    // ── convenience wrappers ────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale { factor }, &[a])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Softmax, &[a])
    }
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::LayerNorm { eps: DEFAULT_NORM_EPS }, &[x, gamma, beta])
    }
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Concat { axis }, xs)
    }
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        self.apply(Primitive::Permute { perm: perm.to_vec() }, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.apply(Primitive::Reshape { shape: shape.to_vec() }, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mean, &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sum, &[x])
    }
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var, TensorError> {
        self.apply(Primitive::Conv1d { padding }, &[x, w, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: [usize; 2]) -> Result<Var, TensorError> {
        self.apply(Primitive::Conv2d { padding }, &[x, w, b])
    }
    pub fn max_pool2d(&mut self, x: Var, kernel: [usize; 2]) -> Result<Var, TensorError> {
        self.apply(Primitive::MaxPool2d { kernel }, &[x])
    }
    pub fn max_unpool2d(&mut self, x: Var, pooled: Var, kernel: [usize; 2]) -> Result<Var, TensorError> {
        self.apply(Primitive::MaxUnpool2d { kernel }, &[x, pooled])
    }
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Bce { clamp: DEFAULT_BCE_CLAMP }, &[pred, target])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKey {
    Leaf(usize),
    Param(ParamId),
}

/// Gradients of the loss w.r.t. every differentiable leaf of a graph.
pub struct Gradients<S: Scalar = f64> {
    leaves: Vec<(usize, LeafKey, Tensor<S>)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a [`Graph::leaf`] or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.leaves.iter().find(|(i, _, _)| *i == v.0).map(|(_, _, g)| g)
    }

    /// One gradient per store entry, in store order; parameters that did not
    /// take part in the graph (and buffers) get zeros.
    pub fn for_params(&self, store: &ParamStore<S>) -> GradTable<S> {
        let mut table: Vec<Tensor<S>> = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        for (_, key, g) in &self.leaves {
            if let LeafKey::Param(id) = key {
                table[id.index()].add_assign(g);
            }
        }
        GradTable { grads: table }
    }
}

/// Per-parameter gradients keyed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct GradTable<S: Scalar = f64> {
    grads: Vec<Tensor<S>>,
}

impl<S: Scalar> GradTable<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        GradTable {
            grads: store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.index()]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn accumulate(&mut self, other: &GradTable<S>) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }
}
