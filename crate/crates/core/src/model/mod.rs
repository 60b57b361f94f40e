//! The tone-octave network: paired encoders over CFP and TCFP, transformer
//! tone and octave decoders, a time-axis convolutional fusion head, and the
//! three-term BCE loss.
//!
//! All tensors are batched: features are `(B, 3, F, T)`, encoder salience is
//! `(B, F+1, T)`, decoder maps are `(B, P, T)` and `(B, O, T)`.

pub mod config;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, Var};
use crate::params::{CheckpointError, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

pub use config::{BackboneKind, ModelConfig, OutputActivation, Preset, Variant};
pub use layers::{Mode, Trace};
use layers::{ConvBlock, Linear, TransformerBlock};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config: {0}")]
    Config(String),
    #[error("input shape {actual:?} does not match expected {expected:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

type Res<T> = Result<T, ModelError>;

/// Parameter-name prefixes of the five groups.
pub const GROUP_ENCODER_CFP: &str = "encoder_cfp";
pub const GROUP_ENCODER_TCFP: &str = "encoder_tcfp";
/// Second encoder of the variants that feed CFP to both branches.
pub const GROUP_ENCODER_CFP2: &str = "encoder_cfp2";
pub const GROUP_TONE: &str = "tone_decoder";
pub const GROUP_OCTAVE: &str = "octave_decoder";
pub const GROUP_FUSION: &str = "fusion";

#[derive(Clone, Debug)]
enum BackboneLayers {
    Mlp(Vec<Linear>),
    ConvEncDec {
        down: [ConvBlock; 3],
        bottleneck: ConvBlock,
        voicing: ConvBlock,
        up: [ConvBlock; 3],
    },
}

/// Maps `(B, 3, F, T)` features to a `(B, F+1, T)` sigmoid salience map,
/// row 0 being non-melody.
#[derive(Clone, Debug)]
pub struct Backbone {
    bins: usize,
    pools: [usize; 3],
    layers: BackboneLayers,
}

impl Backbone {
    fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let f = cfg.bins;
        let layers = match cfg.backbone {
            BackboneKind::Mlp => {
                let mut widths = vec![3 * f];
                widths.extend(&cfg.mlp_hidden);
                widths.push(f + 1);
                BackboneLayers::Mlp(
                    widths
                        .windows(2)
                        .enumerate()
                        .map(|(i, w)| Linear::new(store, rng, &format!("{name}.fc{i}"), w[0], w[1]))
                        .collect(),
                )
            }
            BackboneKind::ConvEncDec => {
                let [c1, c2, c3] = cfg.conv_channels;
                let k = cfg.conv_kernel;
                let pad = [k / 2, k / 2];
                let mut block = |n: &str, cin, cout, kernel, padding, norm| {
                    ConvBlock::new(store, rng, &format!("{name}.{n}"), cin, cout, kernel, padding, norm)
                };
                let down = [
                    block("down0", 3, c1, [k, k], pad, true),
                    block("down1", c1, c2, [k, k], pad, true),
                    block("down2", c2, c3, [k, k], pad, true),
                ];
                let bottleneck = block("bottleneck", c3, c3, [k, k], pad, true);
                let bottom = f / cfg.pool_kernels.iter().product::<usize>();
                let voicing = block("voicing", c3, 1, [bottom, k], [0, k / 2], false);
                let up = [
                    block("up2", c3, c2, [k, k], pad, true),
                    block("up1", c2, c1, [k, k], pad, true),
                    block("up0", c1, 1, [k, k], pad, false),
                ];
                BackboneLayers::ConvEncDec {
                    down,
                    bottleneck,
                    voicing,
                    up,
                }
            }
        };
        Backbone {
            bins: f,
            pools: cfg.pool_kernels,
            layers,
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
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != self.bins {
            return Err(ModelError::Shape {
                expected: vec![shape.first().copied().unwrap_or(1), 3, self.bins, shape.last().copied().unwrap_or(1)],
                actual: shape,
            });
        }
        let (b, f, t) = (shape[0], shape[2], shape[3]);
        let logits = match &self.layers {
            BackboneLayers::Mlp(fcs) => {
                let h = g.permute(x, &[0, 3, 1, 2])?;
                let mut h = g.reshape(h, &[b, t, 3 * f])?;
                for (i, fc) in fcs.iter().enumerate() {
                    h = fc.forward(g, store, h)?;
                    if i + 1 < fcs.len() {
                        h = g.relu(h)?;
                    }
                }
                g.permute(h, &[0, 2, 1])?
            }
            BackboneLayers::ConvEncDec {
                down,
                bottleneck,
                voicing,
                up,
            } => {
                let mut h = x;
                let mut pooled = Vec::with_capacity(3);
                for (blk, &p) in down.iter().zip(&self.pools) {
                    h = blk.forward(g, store, h, mode, trace)?;
                    h = g.max_pool2d(h, [p, 1])?;
                    pooled.push(h);
                }
                h = bottleneck.forward(g, store, h, mode, trace)?;
                let nm = voicing.forward(g, store, h, mode, trace)?;
                for (i, blk) in up.iter().enumerate() {
                    let level = 2 - i;
                    h = g.max_unpool2d(h, pooled[level], [self.pools[level], 1])?;
                    h = blk.forward(g, store, h, mode, trace)?;
                }
                let s = g.concat(&[nm, h], 2)?;
                g.reshape(s, &[b, f + 1, t])?
            }
        };
        Ok(g.sigmoid(logits)?)
    }
}

/// Input projection, positional encoding, transformer stack and a per-frame
/// classifier. Output `(B, classes, T)`.
#[derive(Clone, Debug)]
pub struct Decoder {
    input: Linear,
    blocks: Vec<TransformerBlock>,
    head: Linear,
    positional: bool,
    activation: OutputActivation,
}

impl Decoder {
    fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig, classes: usize) -> Self {
        let d = cfg.d_model;
        Decoder {
            input: Linear::new(store, rng, &format!("{name}.input"), cfg.combined_width(), d),
            blocks: (0..cfg.layers)
                .map(|i| TransformerBlock::new(store, rng, &format!("{name}.block{i}"), d, cfg.heads, cfg.ff_width))
                .collect(),
            head: Linear::new(store, rng, &format!("{name}.head"), d, classes),
            positional: cfg.positional_encoding,
            activation: cfg.output_activation,
        }
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    /// `combined (B, T, 2F+2) -> (B, classes, T)`.
    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, combined: Var, trace: &mut Trace) -> Res<Var> {
        let shape = g.shape(combined).to_vec();
        if shape.len() != 3 || shape[2] != self.input.input {
            return Err(ModelError::Shape {
                expected: vec![shape.first().copied().unwrap_or(1), shape.get(1).copied().unwrap_or(1), self.input.input],
                actual: shape,
            });
        }
        let mut h = self.input.forward(g, store, combined)?;
        if self.positional {
            let pe = g.constant(layers::positional_encoding(shape[1], self.input.output));
            h = g.add(h, pe)?;
        }
        for blk in &self.blocks {
            h = blk.forward(g, store, h, trace)?;
        }
        let y = self.head.forward(g, store, h)?;
        let y = match self.activation {
            OutputActivation::Sigmoid => g.sigmoid(y)?,
            OutputActivation::Softmax => g.softmax(y)?,
        };
        Ok(g.permute(y, &[0, 2, 1])?)
    }
}

/// Time-axis convolution over the stacked maps, `(B, C, T) -> (B, F+1, T)`.
#[derive(Clone, Debug)]
pub struct Fusion {
    weight: crate::params::ParamId,
    bias: crate::params::ParamId,
    channels: usize,
    padding: usize,
}

impl Fusion {
    fn new<S: Scalar>(store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let c = cfg.fusion_channels();
        let k = cfg.fusion_kernel;
        Fusion {
            weight: store.add(
                format!("{GROUP_FUSION}.conv.weight"),
                layers::kaiming(rng, vec![cfg.bins + 1, c, k], c * k),
            ),
            bias: store.add(format!("{GROUP_FUSION}.conv.bias"), Tensor::zeros(vec![cfg.bins + 1])),
            channels: c,
            padding: k / 2,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward<'p, S: Scalar>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, stacked: Var) -> Res<Var> {
        let shape = g.shape(stacked).to_vec();
        if shape.len() != 3 || shape[1] != self.channels {
            return Err(ModelError::Shape {
                expected: vec![shape.first().copied().unwrap_or(1), self.channels, shape.last().copied().unwrap_or(1)],
                actual: shape,
            });
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv1d(stacked, w, b, self.padding)?;
        Ok(g.sigmoid(y)?)
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub tone: Option<Var>,
    pub octave: Option<Var>,
    pub final_map: Var,
    /// `(B, T, 2F+2)` for dual-encoder variants.
    pub combined: Option<Var>,
}

/// Plain-tensor predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S: Scalar = f64> {
    pub tone: Option<Tensor<S>>,
    pub octave: Option<Tensor<S>>,
    pub final_map: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct TONet<S: Scalar = f64> {
    config: ModelConfig,
    params: ParamStore<S>,
    encoder_a: Backbone,
    encoder_b: Option<Backbone>,
    tone: Option<Decoder>,
    octave: Option<Decoder>,
    fusion: Option<Fusion>,
}

impl<S: Scalar> TONet<S> {
    /// Builds the model and initializes parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Res<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let v = config.variant;
        let encoder_a = Backbone::new(&mut params, &mut rng, GROUP_ENCODER_CFP, &config);
        let encoder_b = v.dual_encoder().then(|| {
            let name = if v.uses_tcfp() { GROUP_ENCODER_TCFP } else { GROUP_ENCODER_CFP2 };
            Backbone::new(&mut params, &mut rng, name, &config)
        });
        let (tone, octave) = if v.has_decoders() {
            (
                Some(Decoder::new(&mut params, &mut rng, GROUP_TONE, &config, config.tones)),
                Some(Decoder::new(&mut params, &mut rng, GROUP_OCTAVE, &config, config.octaves)),
            )
        } else {
            (None, None)
        };
        let fusion = v.dual_encoder().then(|| Fusion::new(&mut params, &mut rng, &config));
        Ok(TONet {
            config,
            params,
            encoder_a,
            encoder_b,
            tone,
            octave,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn tone_decoder(&self) -> Option<&Decoder> {
        self.tone.as_ref()
    }

    pub fn octave_decoder(&self) -> Option<&Decoder> {
        self.octave.as_ref()
    }

    pub fn fusion(&self) -> Option<&Fusion> {
        self.fusion.as_ref()
    }

    fn check_input(&self, g: &Graph<'_, S>, x: Var) -> Res<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 3 || s[2] != self.config.bins {
            return Err(ModelError::Shape {
                expected: vec![s.first().copied().unwrap_or(1), 3, self.config.bins, s.last().copied().unwrap_or(1)],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Runs both encoders and concatenates their transposed outputs into
    /// `(B, T, 2F+2)`; the first encoder's features come first.
    pub fn encode_pair<'p>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, first: Var, second: Var, mode: Mode, trace: &mut Trace) -> Res<Var> {
        self.check_input(g, first)?;
        self.check_input(g, second)?;
        if g.shape(first) != g.shape(second) {
            return Err(ModelError::Shape {
                expected: g.shape(first).to_vec(),
                actual: g.shape(second).to_vec(),
            });
        }
        let enc_b = self
            .encoder_b
            .as_ref()
            .ok_or_else(|| ModelError::Config("single-encoder variant has no encoder pair".into()))?;
        let a = self.encoder_a.forward(g, store, first, mode, trace)?;
        let b = enc_b.forward(g, store, second, mode, trace)?;
        let a = g.permute(a, &[0, 2, 1])?;
        let b = g.permute(b, &[0, 2, 1])?;
        Ok(g.concat(&[a, b], 2)?)
    }

    /// `(B, T, 2F+2) -> ((B, P, T), (B, O, T))`.
    pub fn decode_tone_octave<'p>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, combined: Var, trace: &mut Trace) -> Res<(Var, Var)> {
        match (&self.tone, &self.octave) {
            (Some(t), Some(o)) => {
                let tone = t.forward(g, store, combined, trace)?;
                let octave = o.forward(g, store, combined, trace)?;
                Ok((tone, octave))
            }
            _ => Err(ModelError::Config(format!("variant `{}` has no decoders", self.config.variant))),
        }
    }

    /// Stacks `[tone; octave; combined^T]` along channels and fuses to
    /// `(B, F+1, T)`. Without decoders only the combined map is fused.
    pub fn fuse<'p>(&self, g: &mut Graph<'p, S>, store: &'p ParamStore<S>, combined: Var, maps: Option<(Var, Var)>) -> Res<Var> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| ModelError::Config("single-encoder variant has no fusion head".into()))?;
        let c = g.permute(combined, &[0, 2, 1])?;
        let stacked = match maps {
            Some((tone, octave)) => {
                let t = g.shape(c)[2];
                for m in [tone, octave] {
                    if g.shape(m).len() != 3 || g.shape(m)[2] != t {
                        return Err(ModelError::Shape {
                            expected: vec![g.shape(c)[0], g.shape(m).get(1).copied().unwrap_or(1), t],
                            actual: g.shape(m).to_vec(),
                        });
                    }
                }
                g.concat(&[tone, octave, c], 1)?
            }
            None => c,
        };
        fusion.forward(g, store, stacked)
    }

    /// Full forward pass. `tcfp` is only read by variants with a TCFP branch.
    pub fn forward<'p>(&'p self, g: &mut Graph<'p, S>, cfp: Var, tcfp: Var, mode: Mode, trace: &mut Trace) -> Res<Outputs> {
        self.forward_with(g, &self.params, cfp, tcfp, mode, trace)
    }

    /// [`TONet::forward`] reading parameters from `store`, which must extend
    /// this model's own store (same ids for the model's parameters).
    pub fn forward_with<'p>(
        &self,
        g: &mut Graph<'p, S>,
        store: &'p ParamStore<S>,
        cfp: Var,
        tcfp: Var,
        mode: Mode,
        trace: &mut Trace,
    ) -> Res<Outputs> {
        self.check_input(g, cfp)?;
        let v = self.config.variant;
        if !v.dual_encoder() {
            let final_map = self.encoder_a.forward(g, store, cfp, mode, trace)?;
            return Ok(Outputs {
                tone: None,
                octave: None,
                final_map,
                combined: None,
            });
        }
        let second = if v.uses_tcfp() { tcfp } else { cfp };
        let combined = self.encode_pair(g, store, cfp, second, mode, trace)?;
        let maps = if v.has_decoders() {
            Some(self.decode_tone_octave(g, store, combined, trace)?)
        } else {
            None
        };
        let final_map = self.fuse(g, store, combined, maps)?;
        Ok(Outputs {
            tone: maps.map(|m| m.0),
            octave: maps.map(|m| m.1),
            final_map,
            combined: Some(combined),
        })
    }

    /// Inference on batched tensors `(B, 3, F, T)` without gradient tracking.
    pub fn predict(&self, cfp: &Tensor<S>, tcfp: &Tensor<S>) -> Res<Prediction<S>> {
        let mut g = Graph::no_grad();
        let c = g.constant_ref(cfp);
        let t = g.constant_ref(tcfp);
        let mut trace = Trace::default();
        let out = self.forward(&mut g, c, t, Mode::Eval, &mut trace)?;
        Ok(Prediction {
            tone: out.tone.map(|v| g.value(v).clone()),
            octave: out.octave.map(|v| g.value(v).clone()),
            final_map: g.value(out.final_map).clone(),
        })
    }
}

/// Targets as graph constants, `(B, rows, T)` each.
#[derive(Clone, Copy, Debug)]
pub struct TargetVars {
    pub tone: Var,
    pub octave: Var,
    pub final_map: Var,
}

/// Sum of mean-reduced BCE terms over whichever outputs the variant has.
pub fn total_loss<S: Scalar>(g: &mut Graph<'_, S>, out: &Outputs, targets: &TargetVars) -> Result<Var, TensorError> {
    let mut loss = g.bce(out.final_map, targets.final_map)?;
    if let Some(t) = out.tone {
        let l = g.bce(t, targets.tone)?;
        loss = g.add(loss, l)?;
    }
    if let Some(o) = out.octave {
        let l = g.bce(o, targets.octave)?;
        loss = g.add(loss, l)?;
    }
    Ok(loss)
}

/// Loss on plain tensors; same terms as [`total_loss`].
pub fn loss_value<S: Scalar>(
    tone: Option<&Tensor<S>>,
    octave: Option<&Tensor<S>>,
    final_map: &Tensor<S>,
    targets: (&Tensor<S>, &Tensor<S>, &Tensor<S>),
) -> Result<f64, TensorError> {
    let mut g: Graph<'_, S> = Graph::no_grad();
    let out = Outputs {
        tone: tone.map(|t| g.constant(t.clone())),
        octave: octave.map(|o| g.constant(o.clone())),
        final_map: g.constant(final_map.clone()),
        combined: None,
    };
    let tv = TargetVars {
        tone: g.constant(targets.0.clone()),
        octave: g.constant(targets.1.clone()),
        final_map: g.constant(targets.2.clone()),
    };
    let l = total_loss(&mut g, &out, &tv)?;
    Ok(g.value(l).item().to_f64_lossy())
}
