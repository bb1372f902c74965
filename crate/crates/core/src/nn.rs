//! Transformer building blocks shared by both generators.
//!
//! Layers are pre-norm. Every stack ends with a final layer norm so that a
//! stack whose residual branches output zero reduces to that norm.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::{Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
}

impl StackConfig {
    pub fn new(n_layers: usize, model_dim: usize, n_heads: usize, ff_dim: usize) -> Result<Self> {
        let c = Self {
            n_layers,
            model_dim,
            n_heads,
            ff_dim,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidArgument("zero-sized stack".into()));
        }
        Ok(())
    }
}

impl Default for StackConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            model_dim: 64,
            n_heads: 4,
            ff_dim: 128,
        }
    }
}

/// Sinusoidal table: `PE[t, 2i] = sin(t / 10000^(2i/d))`, `PE[t, 2i+1] = cos(..)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs even dim, got {dim}"
        )));
    }
    if len == 0 {
        return Err(Error::InvalidArgument(
            "positional encoding needs length >= 1".into(),
        ));
    }
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + 2 * i] = angle.sin();
            data[t * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::matrix(len, dim, data)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(format!("{name}.w"), &[in_dim, out_dim], bound, rng)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]))?;
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    /// `[m, in] -> [m, out]`; a `[in]` vector maps to `[out]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w)?;
        let b = g.param(self.b)?;
        let is_vec = g.value(x).rank() <= 1;
        let y = g.tape.matmul(x, w)?;
        let y = g.tape.add(y, b)?;
        if is_vec {
            g.tape.reshape(y, &[self.out_dim])
        } else {
            Ok(y)
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain)?;
        let bias = g.param(self.bias)?;
        g.tape.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query `i` attends keys `0..=i`.
    Causal,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            n_heads,
        })
    }

    pub fn forward(&self, g: &mut Graph, query: Var, context: Var, mask: Mask) -> Result<Var> {
        let dim = self.q.out_dim;
        let dh = dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = g.tape.slice_cols(q, h * dh, dh)?;
            let kh = g.tape.slice_cols(k, h * dh, dh)?;
            let vh = g.tape.slice_cols(v, h * dh, dh)?;
            let scores = g.tape.matmul_nt(qh, kh)?;
            let scores = g.tape.scale(scores, scale)?;
            let p = match mask {
                Mask::None => g.tape.softmax(scores)?,
                Mask::Causal => g.tape.causal_softmax(scores)?,
            };
            heads.push(g.tape.matmul(p, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.tape.concat_cols(&heads)?
        };
        self.out.forward(g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.tape.relu(h)?;
        self.down.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub config: StackConfig,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl EncoderStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: StackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(EncoderLayer {
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d)?,
                    attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.attn"),
                        d,
                        config.n_heads,
                        rng,
                    )?,
                    norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ff_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d)?;
        Ok(Self {
            config,
            layers,
            final_norm,
        })
    }

    /// `[T, d] -> [T, d]`.
    pub fn encode(&self, g: &mut Graph, x: Var, mask: Mask) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let n = layer.norm_attn.forward(g, h)?;
            let a = layer.attn.forward(g, n, n, mask)?;
            h = g.tape.add(h, a)?;
            let n = layer.norm_ff.forward(g, h)?;
            let f = layer.ff.forward(g, n)?;
            h = g.tape.add(h, f)?;
        }
        self.final_norm.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Causal self-attention plus time-aligned cross-attention: output row `t`
/// sees input rows `0..=t` and memory rows `0..=t`.
#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub config: StackConfig,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
}

impl DecoderStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        config: StackConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let layers = (0..config.n_layers)
            .map(|i| {
                let p = format!("{name}.layer{i}");
                Ok(DecoderLayer {
                    norm_self: LayerNorm::new(store, &format!("{p}.norm_self"), d)?,
                    self_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.self_attn"),
                        d,
                        config.n_heads,
                        rng,
                    )?,
                    norm_cross: LayerNorm::new(store, &format!("{p}.norm_cross"), d)?,
                    cross_attn: MultiHeadAttention::new(
                        store,
                        &format!("{p}.cross_attn"),
                        d,
                        config.n_heads,
                        rng,
                    )?,
                    norm_ff: LayerNorm::new(store, &format!("{p}.norm_ff"), d)?,
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, config.ff_dim, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(store, &format!("{name}.final_norm"), d)?;
        Ok(Self {
            config,
            layers,
            final_norm,
        })
    }

    /// `inputs: [t, d]`, `memory: [T, d]` with `t <= T`; returns `[t, d]`.
    pub fn decode(&self, g: &mut Graph, inputs: Var, memory: Var) -> Result<Var> {
        let t = g.value(inputs).rows();
        let avail = g.value(memory).rows();
        if t > avail {
            return Err(Error::InvalidArgument(format!(
                "decoder position {t} exceeds audio length {avail}"
            )));
        }
        let mut h = inputs;
        for layer in &self.layers {
            let n = layer.norm_self.forward(g, h)?;
            let a = layer.self_attn.forward(g, n, n, Mask::Causal)?;
            h = g.tape.add(h, a)?;
            let n = layer.norm_cross.forward(g, h)?;
            let c = layer.cross_attn.forward(g, n, memory, Mask::Causal)?;
            h = g.tape.add(h, c)?;
            let n = layer.norm_ff.forward(g, h)?;
            let f = layer.ff.forward(g, n)?;
            h = g.tape.add(h, f)?;
        }
        self.final_norm.forward(g, h)
    }

    /// Output for the last of the `t` given positions, `[d]`.
    pub fn decode_step(&self, g: &mut Graph, prev: Var, memory: Var) -> Result<Var> {
        let t = g.value(prev).rows();
        if t == 0 {
            return Err(Error::InvalidArgument("decode_step needs t >= 1".into()));
        }
        let out = self.decode(g, prev, memory)?;
        let last = g.tape.slice_rows(out, t - 1, 1)?;
        let d = self.config.model_dim;
        g.tape.reshape(last, &[d])
    }
}
