use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::config::LanguageEncoderConfig;
use super::layers::{key_mask, sinusoidal_positions, TransformerBlock};
use super::params::{Binding, ParamGroup, ParamId, ParamStore};
use super::vision::EncodedSequence;

/// A body framed as `[CLS] body… [SEP] [PAD]…`, exactly `max_len` long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramedTokens {
    pub ids: Vec<usize>,
    /// Number of non-padding positions (CLS, body, SEP).
    pub valid: usize,
}

/// Truncate the body to `max_len - 2` tokens, add CLS/SEP, pad to `max_len`.
pub fn frame_tokens(body: &[u32], config: &LanguageEncoderConfig) -> Result<FramedTokens> {
    if let Some(&bad) = body.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of size {}",
            config.vocab_size
        )));
    }
    let n = config.max_len;
    let kept = body.len().min(n - 2);
    let mut ids = Vec::with_capacity(n);
    ids.push(config.cls_id as usize);
    ids.extend(body[..kept].iter().map(|&t| t as usize));
    ids.push(config.sep_id as usize);
    let valid = ids.len();
    ids.resize(n, config.pad_id as usize);
    Ok(FramedTokens { ids, valid })
}

#[derive(Debug, Clone)]
pub struct LanguageEncoder {
    pub config: LanguageEncoderConfig,
    pub token_embedding: ParamId,
    pub blocks: Vec<TransformerBlock>,
}

impl LanguageEncoder {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: &LanguageEncoderConfig, rng: &mut SplitMix64) -> Self {
        let g = ParamGroup::Language;
        let token_embedding = store.add_normal(
            "language.token_embedding",
            g,
            &[config.vocab_size, config.hidden_dim],
            config.hidden_dim,
            rng,
        );
        let blocks = (0..config.num_layers)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    &format!("language.block{i}"),
                    g,
                    config.hidden_dim,
                    config.num_heads,
                    config.ff_dim,
                    rng,
                )
            })
            .collect();
        Self {
            config: config.clone(),
            token_embedding,
            blocks,
        }
    }

    pub fn positions<S: Scalar>(&self) -> Tensor<S> {
        sinusoidal_positions(self.config.max_len, self.config.hidden_dim)
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        body: &[u32],
        positions: Var,
    ) -> Result<EncodedSequence> {
        let framed = frame_tokens(body, &self.config)?;
        self.forward_framed(tape, p, &framed, positions)
    }

    /// Encode an already framed sequence. Positions at or beyond
    /// `framed.valid` are masked out of attention, so their ids never
    /// influence the non-padding outputs.
    pub fn forward_framed<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        framed: &FramedTokens,
        positions: Var,
    ) -> Result<EncodedSequence> {
        let n = self.config.max_len;
        if framed.ids.len() != n || framed.valid == 0 || framed.valid > n {
            return Err(Error::Shape {
                op: "encode_language",
                lhs: vec![framed.ids.len(), framed.valid],
                rhs: vec![n],
            });
        }
        let x = tape.embedding_lookup(p.var(self.token_embedding), &framed.ids)?;
        let mut x = tape.add(x, positions)?;
        let mask = key_mask(tape, n, n, framed.valid);
        for block in &self.blocks {
            x = block.forward(tape, p, x, mask)?;
        }
        let pooled = tape.select_rows(x, &[0])?;
        let pooled = tape.reshape(pooled, &[self.config.hidden_dim])?;
        Ok(EncodedSequence {
            sequence: x,
            pooled,
            len: n,
            valid: framed.valid,
        })
    }
}
