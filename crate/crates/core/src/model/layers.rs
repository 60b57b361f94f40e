//! Parameterized building blocks. Each holds only parameter ids; values live
//! in the model's [`ParamStore`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Primitive, Var, DEFAULT_NORM_EPS};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub const BN_MOMENTUM: f64 = 0.9;

type Res<T> = Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics updated afterwards.
    Train,
    Eval,
}

/// Values recorded during a forward pass.
#[derive(Debug, Default)]
pub struct Trace {
    /// `(batch norm output, running mean id, running var id)`.
    pub batch_norms: Vec<(Var, ParamId, ParamId)>,
    /// Attention weights `(B, h, T, T)` per transformer block, in order.
    pub attention: Vec<Var>,
}

/// Kaiming-uniform fan-in initialization; bound `sqrt(6 / fan_in)`.
pub(crate) fn kaiming<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| S::lit(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), kaiming(rng, vec![input, output], input)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![output])),
            input,
            output,
        }
    }

    /// `x (..., input) -> (..., output)`.
    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, x: Var) -> Res<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(vec![width], S::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(vec![width])),
        }
    }

    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, x: Var) -> Res<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Conv2d, optionally followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<[ParamId; 4]>,
    pub padding: [usize; 2],
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 2],
        padding: [usize; 2],
        normalized: bool,
    ) -> Self {
        let fan_in = cin * kernel[0] * kernel[1];
        let weight = store.add(
            format!("{name}.weight"),
            kaiming(rng, vec![cout, cin, kernel[0], kernel[1]], fan_in),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        let norm = normalized.then(|| {
            [
                store.add(format!("{name}.bn.gamma"), Tensor::full(vec![cout], S::one())),
                store.add(format!("{name}.bn.beta"), Tensor::zeros(vec![cout])),
                store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros(vec![cout])),
                store.add_buffer(format!("{name}.bn.running_var"), Tensor::full(vec![cout], S::one())),
            ]
        });
        ConvBlock {
            weight,
            bias,
            norm,
            padding,
        }
    }

    pub fn forward<'p, S: Scalar>(
        &self,
        g: &mut Graph<'p, S>,
        store: &'p ParamStore<S>,
        x: Var,
        mode: Mode,
        trace: &mut Trace,
    ) -> Res<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, b, self.padding)?;
        let Some([gamma, beta, mean, var]) = self.norm else {
            return Ok(y);
        };
        let gv = g.param(store, gamma);
        let bv = g.param(store, beta);
        let y = match mode {
            Mode::Train => {
                let y = g.apply(
                    Primitive::BatchNorm {
                        eps: DEFAULT_NORM_EPS,
                        training: true,
                    },
                    &[y, gv, bv],
                )?;
                trace.batch_norms.push((y, mean, var));
                y
            }
            Mode::Eval => {
                let mv = g.param(store, mean);
                let vv = g.param(store, var);
                g.apply(
                    Primitive::BatchNorm {
                        eps: DEFAULT_NORM_EPS,
                        training: false,
                    },
                    &[y, gv, bv, mv, vv],
                )?
            }
        };
        g.relu(y)
    }
}

/// Owned batch statistics pulled out of a finished training graph.
pub type RunningUpdate<S> = Vec<(ParamId, ParamId, Vec<S>, Vec<S>)>;

pub fn collect_running_updates<S: Scalar>(g: &Graph<'_, S>, trace: &Trace) -> RunningUpdate<S> {
    trace
        .batch_norms
        .iter()
        .filter_map(|&(v, m, var)| g.batch_stats(v).map(|(bm, bv)| (m, var, bm.to_vec(), bv.to_vec())))
        .collect()
}

/// `running = momentum * running + (1 - momentum) * batch`.
pub fn apply_running_updates<S: Scalar>(store: &mut ParamStore<S>, updates: &RunningUpdate<S>) {
    let keep = S::lit(BN_MOMENTUM);
    let take = S::lit(1.0 - BN_MOMENTUM);
    for (mean_id, var_id, bm, bv) in updates {
        for (r, &b) in store.get_mut(*mean_id).data_mut().iter_mut().zip(bm) {
            *r = keep * *r + take * b;
        }
        for (r, &b) in store.get_mut(*var_id).data_mut().iter_mut().zip(bv) {
            *r = keep * *r + take * b;
        }
    }
}

/// Sinusoidal absolute positional encoding `(T, d)`.
pub fn positional_encoding<S: Scalar>(frames: usize, d: usize) -> Tensor<S> {
    Tensor::from_fn(vec![frames, d], |idx| {
        let (t, i) = ((idx / d) as f64, idx % d);
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        S::lit(if i % 2 == 0 { (t / rate).sin() } else { (t / rate).cos() })
    })
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub d_model: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_model: usize,
        heads: usize,
        ff_width: usize,
    ) -> Self {
        TransformerBlock {
            heads,
            d_model,
            query: Linear::new(store, rng, &format!("{name}.attn.query"), d_model, d_model),
            key: Linear::new(store, rng, &format!("{name}.attn.key"), d_model, d_model),
            value: Linear::new(store, rng, &format!("{name}.attn.value"), d_model, d_model),
            out: Linear::new(store, rng, &format!("{name}.attn.out"), d_model, d_model),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d_model, ff_width),
            ff2: Linear::new(store, rng, &format!("{name}.ff2"), ff_width, d_model),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
        }
    }

    /// `x (B, T, d) -> (B, T, d)`; pushes the attention weights to `trace`.
    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, x: Var, trace: &mut Trace) -> Res<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return Err(TensorError::ShapeMismatch {
                primitive: "transformer_block",
                lhs: shape,
                rhs: vec![self.d_model],
            });
        }
        let (b, t, d, h) = (shape[0], shape[1], self.d_model, self.heads);
        let dh = d / h;
        let split = |g: &mut Graph<'p, S>, v: Var, perm: &[usize]| -> Res<Var> {
            let r = g.reshape(v, &[b, t, h, dh])?;
            g.permute(r, perm)
        };
        let q = self.query.forward(g, store, x)?;
        let k = self.key.forward(g, store, x)?;
        let v = self.value.forward(g, store, x)?;
        let q = split(g, q, &[0, 2, 1, 3])?;
        let kt = split(g, k, &[0, 2, 3, 1])?;
        let v = split(g, v, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        trace.attention.push(weights);
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, t, d])?;
        let attn = self.out.forward(g, store, ctx)?;
        let x1 = g.add(x, attn)?;
        let x1 = self.norm1.forward(g, store, x1)?;
        let f = self.ff1.forward(g, store, x1)?;
        let f = g.relu(f)?;
        let f = self.ff2.forward(g, store, f)?;
        let x2 = g.add(x1, f)?;
        self.norm2.forward(g, store, x2)
    }
}
