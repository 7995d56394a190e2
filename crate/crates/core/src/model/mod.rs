//! The forecasting network.
//!
//! Endogenous history is cut into non-overlapping patches, each linearly
//! embedded into a token, with a learnable global token prepended. Every
//! exogenous variable becomes one variable token. Each layer then runs
//!
//! 1. multi-head self-attention over the endogenous tokens (residual),
//! 2. cross-attention with endogenous queries and exogenous keys/values
//!    (residual, skipped when there are no exogenous variables),
//! 3. the frequency branch on the patch tokens: projection, per-channel DFT
//!    along the token axis, `relu(W_f · A + b_f)` on the amplitude spectrum,
//!    inverse transform with the original phase, projection back,
//! 4. time/frequency fusion,
//! 5. `z + FFN(LayerNorm(z))`.
//!
//! The head flattens all final tokens and maps them to the next-step
//! endogenous vector.

mod checkpoint;
mod config;
mod params;

use std::cell::Cell;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ExoAggregation, Fusion, ModelConfig, RobustObjective};
pub use params::{Bound, ParamId, ParamStore};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use params::{rng_for, Init};

const LAYERNORM_EPS: f64 = 1e-5;

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of full forward passes run on the current thread.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(Cell::get)
}

#[derive(Clone, Debug, PartialEq)]
struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct FreqIds {
    pre_w: ParamId,
    pre_b: ParamId,
    filter_w: ParamId,
    filter_b: ParamId,
    post_w: ParamId,
    post_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
enum FuseIds {
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Gate {
        w: ParamId,
        b: ParamId,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    self_attn: AttnIds,
    cross_attn: Option<AttnIds>,
    freq: Option<FreqIds>,
    fuse: Option<FuseIds>,
    ln_gain: ParamId,
    ln_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    global: ParamId,
    exo: Option<ExoIds>,
    layers: Vec<LayerIds>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct ExoIds {
    theta: ParamId,
    bias: ParamId,
    score: Option<ParamId>,
}

/// Full parameter set plus the configuration that shaped it.
#[derive(Clone, Debug, PartialEq)]
pub struct FTimeXer<S> {
    config: ModelConfig,
    seed: u64,
    params: ParamStore<S>,
    layout: Layout,
}

/// Attention output plus the per-head weight matrices (rows sum to one).
pub struct Attended<S> {
    pub output: Var<S>,
    pub weights: Vec<Tensor<S>>,
}

impl<S: Scalar> FTimeXer<S> {
    /// Builds and initializes a model deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed);
        let mut params = ParamStore::default();
        let c = &config;
        let (d, p) = (c.d_model, c.patches());
        let mut reg = |name: String, shape: &[usize], init: Init| {
            params.register(name, shape, init, &mut rng)
        };

        let patch_w = reg("embed.patch_w".into(), &[c.patch_len * c.d_endo, d], Init::Uniform);
        let patch_b = reg("embed.patch_b".into(), &[d], Init::Zeros);
        let global = reg("embed.global_token".into(), &[1, d], Init::Zeros);
        let exo = (c.d_exo > 0).then(|| ExoIds {
            theta: reg("embed.exo_theta".into(), &[c.d_exo, d], Init::Uniform),
            bias: reg("embed.exo_bias".into(), &[d], Init::Zeros),
            score: (c.exo_agg == ExoAggregation::AttentionPool)
                .then(|| reg("embed.exo_pool_score".into(), &[c.lookback], Init::Zeros)),
        });

        let attn = |prefix: String, reg: &mut dyn FnMut(String, &[usize], Init) -> ParamId| {
            AttnIds {
                wq: reg(format!("{prefix}.wq"), &[d, d], Init::Uniform),
                wk: reg(format!("{prefix}.wk"), &[d, d], Init::Uniform),
                wv: reg(format!("{prefix}.wv"), &[d, d], Init::Uniform),
                wo: reg(format!("{prefix}.wo"), &[d, d], Init::Uniform),
            }
        };

        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            let self_attn = attn(name("self_attn"), &mut reg);
            let cross_attn = (c.d_exo > 0).then(|| attn(name("cross_attn"), &mut reg));
            let freq = c.freq_branch.then(|| FreqIds {
                pre_w: reg(name("freq.pre_w"), &[d, d], Init::Uniform),
                pre_b: reg(name("freq.pre_b"), &[d], Init::Zeros),
                filter_w: reg(name("freq.filter_w"), &[p, p], Init::Uniform),
                filter_b: reg(name("freq.filter_b"), &[p, 1], Init::Zeros),
                post_w: reg(name("freq.post_w"), &[d, d], Init::Uniform),
                post_b: reg(name("freq.post_b"), &[d], Init::Zeros),
            });
            let fuse = c.freq_branch.then(|| match c.fusion {
                Fusion::ConcatMlp => FuseIds::Mlp {
                    w1: reg(name("fuse.w1"), &[2 * d, d], Init::Uniform),
                    b1: reg(name("fuse.b1"), &[d], Init::Zeros),
                    w2: reg(name("fuse.w2"), &[d, d], Init::Uniform),
                    b2: reg(name("fuse.b2"), &[d], Init::Zeros),
                },
                Fusion::SigmoidGate => FuseIds::Gate {
                    w: reg(name("fuse.gate_w"), &[2 * d, d], Init::Uniform),
                    b: reg(name("fuse.gate_b"), &[d], Init::Zeros),
                },
            });
            layers.push(LayerIds {
                self_attn,
                cross_attn,
                freq,
                fuse,
                ln_gain: reg(name("ffn.ln_gain"), &[d], Init::Ones),
                ln_bias: reg(name("ffn.ln_bias"), &[d], Init::Zeros),
                ffn_w1: reg(name("ffn.w1"), &[d, 4 * d], Init::Uniform),
                ffn_b1: reg(name("ffn.b1"), &[4 * d], Init::Zeros),
                ffn_w2: reg(name("ffn.w2"), &[4 * d, d], Init::Uniform),
                ffn_b2: reg(name("ffn.b2"), &[d], Init::Zeros),
            });
        }
        let head_w = reg("head.w".into(), &[c.tokens() * d, c.d_endo], Init::Uniform);
        let head_b = reg("head.b".into(), &[c.d_endo], Init::Zeros);

        let layout = Layout {
            patch_w,
            patch_b,
            global,
            exo,
            layers,
            head_w,
            head_b,
        };
        Ok(Self {
            config,
            seed,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn bind(&self, tape: &Tape<S>, trainable: bool) -> Bound<S> {
        self.params.bind(tape, trainable)
    }

    fn check_inputs(&self, x_endo: &Tensor<S>, x_exo: &Tensor<S>) -> Result<()> {
        let c = &self.config;
        if x_endo.shape() != [c.lookback, c.d_endo] {
            return Err(Error::InputShape {
                name: "x_endo",
                got: x_endo.shape().to_vec(),
                expected: vec![c.lookback, c.d_endo],
            });
        }
        let exo_ok = x_exo.shape() == [c.lookback, c.d_exo] || (c.d_exo == 0 && x_exo.is_empty());
        if !exo_ok {
            return Err(Error::InputShape {
                name: "x_exo",
                got: x_exo.shape().to_vec(),
                expected: vec![c.lookback, c.d_exo],
            });
        }
        Ok(())
    }

    /// `[global; patch tokens]`, shape `(1 + patches) × d_model`.
    pub fn embed_endogenous(&self, b: &Bound<S>, x_endo: &Tensor<S>) -> Result<Var<S>> {
        let c = &self.config;
        let flat = x_endo.reshape([c.patches(), c.patch_len * c.d_endo])?;
        let patches = b
            .tape()
            .constant(flat)
            .matmul(b.var(self.layout.patch_w))?
            .add_row(b.var(self.layout.patch_b))?;
        Var::concat(&[b.var(self.layout.global), &patches], 0)
    }

    /// One token per exogenous variable, shape `d_exo × d_model`; `None`
    /// when the model has no exogenous inputs.
    pub fn embed_exogenous(&self, b: &Bound<S>, x_exo: &Tensor<S>) -> Result<Option<Var<S>>> {
        let Some(ids) = &self.layout.exo else {
            return Ok(None);
        };
        let c = &self.config;
        let columns = x_exo.transpose()?;
        let pool = match ids.score {
            Some(score) => Some(b.var(score).softmax(0)?.reshape([1, c.lookback])?),
            None => None,
        };
        let mut tokens = Vec::with_capacity(c.d_exo);
        for j in 0..c.d_exo {
            let col = Tensor::new(
                [c.lookback, 1],
                columns.data()[j * c.lookback..(j + 1) * c.lookback].to_vec(),
            )?;
            let steps = b
                .tape()
                .constant(col)
                .matmul(&b.var(ids.theta).slice(0, j, 1)?)?
                .add_row(b.var(ids.bias))?;
            let token = match &pool {
                Some(w) => w.matmul(&steps)?,
                None => steps.mean(0)?.reshape([1, c.d_model])?,
            };
            tokens.push(token);
        }
        let refs: Vec<&Var<S>> = tokens.iter().collect();
        Var::concat(&refs, 0).map(Some)
    }

    fn attend(&self, b: &Bound<S>, ids: &AttnIds, queries: &Var<S>, keys: &Var<S>) -> Result<Attended<S>> {
        multi_head_attention(
            queries,
            keys,
            [b.var(ids.wq), b.var(ids.wk), b.var(ids.wv), b.var(ids.wo)],
            self.config.heads,
        )
    }

    /// `z + SelfAttn(z)` over every endogenous token, global token included.
    pub fn temporal_self_attention(&self, b: &Bound<S>, layer: usize, z: &Var<S>) -> Result<Attended<S>> {
        let a = self.attend(b, &self.layout.layers[layer].self_attn, z, z)?;
        Ok(Attended {
            output: z.add(&a.output)?,
            weights: a.weights,
        })
    }

    /// `z + CrossAttn(z, exo)`; identity when there are no exogenous tokens.
    pub fn cross_attention(
        &self,
        b: &Bound<S>,
        layer: usize,
        z: &Var<S>,
        exo: Option<&Var<S>>,
    ) -> Result<Attended<S>> {
        match (exo, &self.layout.layers[layer].cross_attn) {
            (Some(exo), Some(ids)) => {
                let a = self.attend(b, ids, z, exo)?;
                Ok(Attended {
                    output: z.add(&a.output)?,
                    weights: a.weights,
                })
            }
            _ => Ok(Attended {
                output: z.clone(),
                weights: Vec::new(),
            }),
        }
    }

    /// Frequency path on the patch tokens; the global token row passes
    /// through unchanged. Returns `z` itself when the branch is disabled.
    pub fn frequency_branch(&self, b: &Bound<S>, layer: usize, z: &Var<S>) -> Result<Var<S>> {
        let Some(ids) = &self.layout.layers[layer].freq else {
            return Ok(z.clone());
        };
        let (p, d) = (self.config.patches(), self.config.d_model);
        let global = z.slice(0, 0, 1)?;
        let signal = z
            .slice(0, 1, p)?
            .matmul(b.var(ids.pre_w))?
            .add_row(b.var(ids.pre_b))?;
        let amplitude = signal.amplitude_spectrum()?;
        let bias = b
            .var(ids.filter_b)
            .matmul(&b.tape().constant(Tensor::ones([1, d])))?;
        let filtered = b
            .var(ids.filter_w)
            .matmul(&amplitude)?
            .add(&bias)?
            .relu();
        let out = amplitude
            .reconstruct_with_phase(&filtered)?
            .matmul(b.var(ids.post_w))?
            .add_row(b.var(ids.post_b))?;
        Var::concat(&[&global, &out], 0)
    }

    /// Combines the attention path with the frequency path; passes `z_time`
    /// through when the frequency branch is disabled.
    pub fn fuse(&self, b: &Bound<S>, layer: usize, z_time: &Var<S>, z_freq: &Var<S>) -> Result<Var<S>> {
        let Some(ids) = &self.layout.layers[layer].fuse else {
            return Ok(z_time.clone());
        };
        let joined = Var::concat(&[z_time, z_freq], 1)?;
        match *ids {
            FuseIds::Mlp { w1, b1, w2, b2 } => joined
                .matmul(b.var(w1))?
                .add_row(b.var(b1))?
                .gelu()
                .matmul(b.var(w2))?
                .add_row(b.var(b2)),
            FuseIds::Gate { w, b: bias } => {
                let gate = joined.matmul(b.var(w))?.add_row(b.var(bias))?.sigmoid();
                gate.mul(&z_time.sub(z_freq)?)?.add(z_freq)
            }
        }
    }

    /// `z + W2 · gelu(W1 · LayerNorm(z) + b1) + b2`.
    pub fn ffn_block(&self, b: &Bound<S>, layer: usize, z: &Var<S>) -> Result<Var<S>> {
        let ids = &self.layout.layers[layer];
        let h = z
            .layernorm(b.var(ids.ln_gain), b.var(ids.ln_bias), S::of(LAYERNORM_EPS))?
            .matmul(b.var(ids.ffn_w1))?
            .add_row(b.var(ids.ffn_b1))?
            .gelu()
            .matmul(b.var(ids.ffn_w2))?
            .add_row(b.var(ids.ffn_b2))?;
        z.add(&h)
    }

    /// Runs every layer stage, returning the final token matrix.
    pub fn encode(&self, b: &Bound<S>, x_endo: &Tensor<S>, x_exo: &Tensor<S>) -> Result<Var<S>> {
        self.check_inputs(x_endo, x_exo)?;
        let mut z = self.embed_endogenous(b, x_endo)?;
        let exo = self.embed_exogenous(b, x_exo)?;
        for layer in 0..self.config.layers {
            let z_self = self.temporal_self_attention(b, layer, &z)?.output;
            let z_time = self.cross_attention(b, layer, &z_self, exo.as_ref())?.output;
            let z_fused = if self.config.freq_branch {
                let z_freq = self.frequency_branch(b, layer, &z_time)?;
                self.fuse(b, layer, &z_time, &z_freq)?
            } else {
                z_time
            };
            z = self.ffn_block(b, layer, &z_fused)?;
        }
        Ok(z)
    }

    /// Next-step prediction of shape `[d_endo]`.
    pub fn forward(&self, b: &Bound<S>, x_endo: &Tensor<S>, x_exo: &Tensor<S>) -> Result<Var<S>> {
        FORWARD_CALLS.with(|c| c.set(c.get() + 1));
        let z = self.encode(b, x_endo, x_exo)?;
        let c = &self.config;
        z.reshape([1, c.tokens() * c.d_model])?
            .matmul(b.var(self.layout.head_w))?
            .add_row(b.var(self.layout.head_b))?
            .reshape([c.d_endo])
    }

    /// Forward pass on a private tape with frozen parameters.
    pub fn predict(&self, x_endo: &Tensor<S>, x_exo: &Tensor<S>) -> Result<Vec<S>> {
        let tape = Tape::new();
        let b = self.bind(&tape, false);
        Ok(self.forward(&b, x_endo, x_exo)?.value().data().to_vec())
    }
}

/// Scaled dot-product attention with `heads` heads over column blocks of the
/// projections, followed by the output projection.
pub fn multi_head_attention<S: Scalar>(
    queries: &Var<S>,
    keys: &Var<S>,
    [wq, wk, wv, wo]: [&Var<S>; 4],
    heads: usize,
) -> Result<Attended<S>> {
    let q = queries.matmul(wq)?;
    let k = keys.matmul(wk)?;
    let v = keys.matmul(wv)?;
    let d = q.shape()[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice(1, h * dh, dh)?;
        let kh = k.slice(1, h * dh, dh)?;
        let vh = v.slice(1, h * dh, dh)?;
        let w = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
        outs.push(w.matmul(&vh)?);
        weights.push(w.value().clone());
    }
    let refs: Vec<&Var<S>> = outs.iter().collect();
    let output = Var::concat(&refs, 1)?.matmul(wo)?;
    Ok(Attended { output, weights })
}
