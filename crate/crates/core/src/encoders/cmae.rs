//! Cross-modal attention encoder.
//!
//! Each layer first lets every branch attend to the other modality
//! (queries from the branch, keys and values from the partner), then runs
//! a self-attention sub-layer and a feed-forward sub-layer per branch.
//! Every sub-layer is wrapped as `LN(x + sublayer(x))`.

use crate::autodiff::{Scalar, Tape, Var};
use crate::document::Modality;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::config::CmaeConfig;
use super::layers::{key_mask, LayerNorm, MultiHeadAttention, TransformerBlock};
use super::params::{Binding, ParamGroup, ParamStore};
use super::vision::EncodedSequence;

#[derive(Debug, Clone)]
pub struct CmaeBranch {
    pub cross: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    /// Self-attention and feed-forward sub-layers.
    pub inner: TransformerBlock,
}

impl CmaeBranch {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, config: &CmaeConfig, rng: &mut SplitMix64) -> Self {
        let g = ParamGroup::Cmae;
        let d = config.hidden_dim;
        Self {
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), g, d, config.num_heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), g, d),
            inner: TransformerBlock::new(store, &format!("{name}.self"), g, d, config.num_heads, config.ff_dim, rng),
        }
    }

    /// `LN(q + CrossAtt(q ← kv))`
    pub fn cross_attention<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        queries_from: Var,
        keys_values_from: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let a = self.cross.forward(tape, p, queries_from, keys_values_from, mask)?;
        let x = tape.add(queries_from, a)?;
        self.cross_norm.forward(tape, p, x)
    }

    pub fn self_attention<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, x: Var, mask: Option<Var>) -> Result<Var> {
        self.inner.forward(tape, p, x, mask)
    }
}

#[derive(Debug, Clone)]
pub struct CmaeLayer {
    pub vision: CmaeBranch,
    /// `None` when both branches share the vision weights.
    pub language: Option<CmaeBranch>,
}

impl CmaeLayer {
    pub fn branch(&self, modality: Modality) -> &CmaeBranch {
        match (modality, &self.language) {
            (Modality::Language, Some(lang)) => lang,
            _ => &self.vision,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Cmae {
    pub config: CmaeConfig,
    pub layers: Vec<CmaeLayer>,
}

/// Pooled and L2-normalized branch outputs.
#[derive(Debug, Clone, Copy)]
pub struct FusedPair {
    pub vision: Var,
    pub language: Var,
}

fn pool_valid<S: Scalar>(tape: &mut Tape<S>, seq: Var, len: usize, valid: usize) -> Result<Var> {
    let x = if valid < len {
        let rows: Vec<usize> = (0..valid).collect();
        tape.select_rows(seq, &rows)?
    } else {
        seq
    };
    let pooled = tape.mean_pool(x)?;
    tape.l2_normalize(pooled)
}

impl Cmae {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: &CmaeConfig, rng: &mut SplitMix64) -> Self {
        let layers = (0..config.num_layers)
            .map(|i| {
                let vision = CmaeBranch::new(store, &format!("cmae.layer{i}.vision"), config, rng);
                let language = (!config.shared_parameters)
                    .then(|| CmaeBranch::new(store, &format!("cmae.layer{i}.language"), config, rng));
                CmaeLayer { vision, language }
            })
            .collect();
        Self {
            config: config.clone(),
            layers,
        }
    }

    fn check(&self, tape: &Tape<impl Scalar>, seq: &EncodedSequence) -> Result<()> {
        let shape = tape.shape(seq.sequence);
        if shape.len() != 2 || shape[1] != self.config.hidden_dim {
            return Err(Error::Shape {
                op: "cmae_forward",
                lhs: shape.to_vec(),
                rhs: vec![seq.len, self.config.hidden_dim],
            });
        }
        Ok(())
    }

    /// Cross-modal forward over both branches.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        vision: &EncodedSequence,
        language: &EncodedSequence,
    ) -> Result<FusedPair> {
        self.check(tape, vision)?;
        self.check(tape, language)?;
        let (nv, nt) = (vision.len, language.len);
        // keys from the vision branch are always valid
        let lang_keys_for_vision = key_mask(tape, nv, nt, language.valid);
        let lang_keys_for_lang = key_mask(tape, nt, nt, language.valid);
        let mut v = vision.sequence;
        let mut t = language.sequence;
        for layer in &self.layers {
            let vb = layer.branch(Modality::Vision);
            let tb = layer.branch(Modality::Language);
            let t_cross = tb.cross_attention(tape, p, t, v, None)?;
            let v_cross = vb.cross_attention(tape, p, v, t, lang_keys_for_vision)?;
            v = vb.self_attention(tape, p, v_cross, None)?;
            t = tb.self_attention(tape, p, t_cross, lang_keys_for_lang)?;
        }
        Ok(FusedPair {
            vision: pool_valid(tape, v, nv, vision.valid)?,
            language: pool_valid(tape, t, nt, language.valid)?,
        })
    }

    /// Single-modality forward: the cross-attention sub-layer attends to
    /// the branch's own sequence, i.e. it degenerates to self-attention.
    pub fn forward_single<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Binding,
        seq: &EncodedSequence,
        modality: Modality,
    ) -> Result<Var> {
        self.check(tape, seq)?;
        let mask = key_mask(tape, seq.len, seq.len, seq.valid);
        let mut x = seq.sequence;
        for layer in &self.layers {
            let b = layer.branch(modality);
            let c = b.cross_attention(tape, p, x, x, mask)?;
            x = b.self_attention(tape, p, c, mask)?;
        }
        pool_valid(tape, x, seq.len, seq.valid)
    }
}
