use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::SplitMix64;

use super::params::{Binding, ParamGroup, ParamId, ParamStore};

/// Additive mask value for keys that must not be attended.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        input: usize,
        output: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let weight = store.add_normal(format!("{name}.weight"), group, &[input, output], input, rng);
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[output]));
        Self { weight, bias }
    }

    /// `x[m×in] · W + b`
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let x = if tape.shape(x).len() == 1 {
            let n = tape.shape(x)[0];
            tape.reshape(x, &[1, n])?
        } else {
            x
        };
        let y = tape.matmul(x, p.var(self.weight))?;
        tape.add_row(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(&[dim], S::one()));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gain), p.var(self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
}

/// Multi-head attention. Each head owns `d×d_k` query/key/value maps and a
/// `d_k×d` slice of the output projection, so concatenating heads and
/// projecting equals summing the per-head projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<Head>,
    pub output_bias: ParamId,
    pub key_dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        num_heads: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let key_dim = dim / num_heads;
        let heads = (0..num_heads)
            .map(|h| Head {
                query: store.add_normal(format!("{name}.h{h}.query"), group, &[dim, key_dim], dim, rng),
                key: store.add_normal(format!("{name}.h{h}.key"), group, &[dim, key_dim], dim, rng),
                value: store.add_normal(format!("{name}.h{h}.value"), group, &[dim, key_dim], dim, rng),
                output: store.add_normal(format!("{name}.h{h}.output"), group, &[key_dim, dim], dim, rng),
            })
            .collect();
        let output_bias = store.add(format!("{name}.output_bias"), group, Tensor::zeros(&[dim]));
        Self {
            heads,
            output_bias,
            key_dim,
        }
    }

    /// Attention probabilities of one head, `softmax(Q Kᵀ / sqrt(d_k))`.
    pub fn head_weights<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        head: usize,
        queries_from: Var,
        keys_values_from: Var,
        key_mask: Option<Var>,
    ) -> Result<Var> {
        let h = &self.heads[head];
        let q = tape.matmul(queries_from, p.var(h.query))?;
        let k = tape.matmul(keys_values_from, p.var(h.key))?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = match key_mask {
            Some(mask) => tape.add(scores, mask)?,
            None => scores,
        };
        tape.row_softmax(scores, S::of((self.key_dim as f64).sqrt()))
    }

    /// Queries from `queries_from`, keys and values from `keys_values_from`.
    /// Returns the output-projected attention, without residual.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        queries_from: Var,
        keys_values_from: Var,
        key_mask: Option<Var>,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for (hi, h) in self.heads.iter().enumerate() {
            let attn = self.head_weights(tape, p, hi, queries_from, keys_values_from, key_mask)?;
            let v = tape.matmul(keys_values_from, p.var(h.value))?;
            let ctx = tape.matmul(attn, v)?;
            let out = tape.matmul(ctx, p.var(h.output))?;
            total = Some(match total {
                Some(t) => tape.add(t, out)?,
                None => out,
            });
        }
        tape.add_row(total.expect("at least one head"), p.var(self.output_bias))
    }
}

/// Additive `[queries × keys]` mask: zero for the first `valid` keys,
/// a large negative value for the rest.
pub fn key_mask<S: Scalar>(tape: &mut Tape<S>, queries: usize, keys: usize, valid: usize) -> Option<Var> {
    if valid >= keys {
        return None;
    }
    let mut data = vec![S::zero(); queries * keys];
    for row in data.chunks_mut(keys) {
        for v in &mut row[valid..] {
            *v = S::of(MASKED);
        }
    }
    Some(tape.constant(Tensor::from_parts(vec![queries, keys], data)))
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.inner"), group, dim, hidden, rng),
            outer: Linear::new(store, &format!("{name}.outer"), group, hidden, dim, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, p, x)?;
        let h = tape.gelu(h)?;
        self.outer.forward(tape, p, h)
    }
}

/// Post-norm transformer block: `x = LN(x + MHA(x)); x = LN(x + FF(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub feed_forward: FeedForward,
    pub feed_forward_norm: LayerNorm,
}

impl TransformerBlock {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ff_dim: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), group, dim, heads, rng),
            attention_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), group, dim),
            feed_forward: FeedForward::new(store, &format!("{name}.ff"), group, dim, ff_dim, rng),
            feed_forward_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), group, dim),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        x: Var,
        key_mask: Option<Var>,
    ) -> Result<Var> {
        let a = self.attention.forward(tape, p, x, x, key_mask)?;
        let x = tape.add(x, a)?;
        let x = self.attention_norm.forward(tape, p, x)?;
        let f = self.feed_forward.forward(tape, p, x)?;
        let x = tape.add(x, f)?;
        self.feed_forward_norm.forward(tape, p, x)
    }
}

/// Fixed sinusoidal position table `[positions × dim]`.
pub fn sinusoidal_positions<S: Scalar>(positions: usize, dim: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); positions * dim];
    for pos in 0..positions {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            data[pos * dim + i] = S::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_parts(vec![positions, dim], data)
}
