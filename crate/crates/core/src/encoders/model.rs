use std::sync::Arc;

use crate::autodiff::{Scalar, Tape, Var};
use crate::document::{normalize, DocumentImage, DocumentPair, EmbeddingRecord, Modality};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

use super::cmae::{Cmae, FusedPair};
use super::config::ModelConfig;
use super::language::LanguageEncoder;
use super::layers::Linear;
use super::params::{Binding, ParamGroup, ParamStore};
use super::vision::{EncodedSequence, VisionEncoder};

/// One-hidden-layer MLP with a GELU in between.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub hidden: Linear,
    pub output: Linear,
}

impl ProjectionHead {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, input: usize, hidden: usize, output: usize, rng: &mut SplitMix64) -> Self {
        let g = ParamGroup::Projection;
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), g, input, hidden, rng),
            output: Linear::new(store, &format!("{name}.output"), g, hidden, output, rng),
        }
    }

    /// Returns the L2-normalized `[out]` projection of a pooled vector.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Binding, pooled: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, pooled)?;
        let h = tape.gelu(h)?;
        let z = self.output.forward(tape, p, h)?;
        let n = tape.shape(z)[1];
        let z = tape.reshape(z, &[n])?;
        tape.l2_normalize(z)
    }
}

/// How a single modality is embedded when its partner is unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnimodalPath {
    /// Projection-head output; the CMAE is bypassed.
    Projection,
    /// CMAE branch run on its own sequence (cross-attention to itself).
    CmaeSelf,
}

impl std::str::FromStr for UnimodalPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Self::Projection),
            "cmae_self" => Ok(Self::CmaeSelf),
            other => Err(Error::Config(format!("unknown unimodal path '{other}'"))),
        }
    }
}

impl std::fmt::Display for UnimodalPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Projection => "projection",
            Self::CmaeSelf => "cmae_self",
        })
    }
}

/// Selects which network outputs serve as document embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbedSpec {
    pub use_cmae: bool,
    pub unimodal_path: UnimodalPath,
}

impl Default for EmbedSpec {
    fn default() -> Self {
        Self {
            use_cmae: true,
            unimodal_path: UnimodalPath::Projection,
        }
    }
}

#[derive(Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub vision: VisionEncoder,
    pub language: LanguageEncoder,
    pub vision_projection: ProjectionHead,
    pub language_projection: ProjectionHead,
    pub cmae: Cmae,
    pub cluster_vision: Linear,
    pub cluster_language: Linear,
}

/// Parameters bound to a tape, plus the fixed positional tables.
#[derive(Debug, Clone)]
pub struct Bound {
    pub params: Binding,
    vision_positions: Var,
    language_positions: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PairOutputs {
    pub vision: EncodedSequence,
    pub language: EncodedSequence,
    pub projected_vision: Var,
    pub projected_language: Var,
    pub fused: Option<FusedPair>,
}

/// Per-batch outputs stacked row-wise (`M` rows each).
#[derive(Debug, Clone, Copy)]
pub struct BatchOutputs {
    pub projected_vision: Var,
    pub projected_language: Var,
    pub fused_vision: Option<Var>,
    pub fused_language: Option<Var>,
}

/// Dual encoder with projection heads, the cross-modal attention encoder
/// and the clustering heads, over one parameter store.
#[derive(Debug, Clone)]
pub struct GlobalDocModel<S> {
    arch: Arc<Architecture>,
    params: ParamStore<S>,
}

impl<S: Scalar> GlobalDocModel<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::derive(config.init_seed, 0x696e_6974);
        let mut store = ParamStore::default();
        let vision = VisionEncoder::new(&mut store, &config.vision, &mut rng);
        let language = LanguageEncoder::new(&mut store, &config.language, &mut rng);
        let p = &config.projection;
        let vision_projection =
            ProjectionHead::new(&mut store, "projection.vision", config.vision.hidden_dim, p.hidden_dim, p.output_dim, &mut rng);
        let language_projection =
            ProjectionHead::new(&mut store, "projection.language", config.language.hidden_dim, p.hidden_dim, p.output_dim, &mut rng);
        let cmae = Cmae::new(&mut store, &config.cmae, &mut rng);
        let cin = config.cluster_input_dim();
        let cluster_vision = Linear::new(&mut store, "cluster.vision", ParamGroup::Cluster, cin, config.num_clusters, &mut rng);
        let cluster_language =
            Linear::new(&mut store, "cluster.language", ParamGroup::Cluster, cin, config.num_clusters, &mut rng);
        Ok(Self {
            arch: Arc::new(Architecture {
                config,
                vision,
                language,
                vision_projection,
                language_projection,
                cmae,
                cluster_vision,
                cluster_language,
            }),
            params: store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> GlobalDocModel<T> {
        GlobalDocModel {
            arch: Arc::clone(&self.arch),
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: impl Fn(ParamGroup) -> bool) -> Bound {
        let params = self.params.bind(tape, trainable);
        let vision_positions = tape.constant(self.arch.vision.positions());
        let language_positions = tape.constant(self.arch.language.positions());
        Bound {
            params,
            vision_positions,
            language_positions,
        }
    }

    /// Bind with caller-provided variables, one per parameter in store
    /// order (used to differentiate with respect to external leaves).
    pub fn bind_vars(&self, tape: &mut Tape<S>, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter variables, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        for (id, &v) in self.params.ids().zip(vars) {
            if tape.shape(v) != self.params.get(id).shape() {
                return Err(Error::Shape {
                    op: "bind_vars",
                    lhs: self.params.get(id).shape().to_vec(),
                    rhs: tape.shape(v).to_vec(),
                });
            }
        }
        let vision_positions = tape.constant(self.arch.vision.positions());
        let language_positions = tape.constant(self.arch.language.positions());
        Ok(Bound {
            params: Binding::from_vars(vars.to_vec()),
            vision_positions,
            language_positions,
        })
    }

    pub fn encode_vision(&self, tape: &mut Tape<S>, b: &Bound, image: &DocumentImage) -> Result<EncodedSequence> {
        self.arch.vision.forward(tape, &b.params, image, b.vision_positions)
    }

    pub fn encode_language(&self, tape: &mut Tape<S>, b: &Bound, tokens: &[u32]) -> Result<EncodedSequence> {
        self.arch.language.forward(tape, &b.params, tokens, b.language_positions)
    }

    pub fn encode_language_framed(
        &self,
        tape: &mut Tape<S>,
        b: &Bound,
        framed: &super::language::FramedTokens,
    ) -> Result<EncodedSequence> {
        self.arch.language.forward_framed(tape, &b.params, framed, b.language_positions)
    }

    pub fn project(&self, tape: &mut Tape<S>, b: &Bound, pooled: Var, modality: Modality) -> Result<Var> {
        match modality {
            Modality::Vision => self.arch.vision_projection.forward(tape, &b.params, pooled),
            Modality::Language => self.arch.language_projection.forward(tape, &b.params, pooled),
            Modality::Multimodal => Err(Error::InvalidArgument("projection needs a single modality".into())),
        }
    }

    pub fn cmae_forward(&self, tape: &mut Tape<S>, b: &Bound, v: &EncodedSequence, t: &EncodedSequence) -> Result<FusedPair> {
        self.arch.cmae.forward(tape, &b.params, v, t)
    }

    pub fn forward_pair(&self, tape: &mut Tape<S>, b: &Bound, pair: &DocumentPair, use_cmae: bool) -> Result<PairOutputs> {
        let vision = self.encode_vision(tape, b, &pair.image)?;
        let language = self.encode_language(tape, b, &pair.tokens)?;
        let projected_vision = self.project(tape, b, vision.pooled, Modality::Vision)?;
        let projected_language = self.project(tape, b, language.pooled, Modality::Language)?;
        let fused = if use_cmae {
            Some(self.cmae_forward(tape, b, &vision, &language)?)
        } else {
            None
        };
        Ok(PairOutputs {
            vision,
            language,
            projected_vision,
            projected_language,
            fused,
        })
    }

    pub fn forward_batch(&self, tape: &mut Tape<S>, b: &Bound, pairs: &[&DocumentPair], use_cmae: bool) -> Result<BatchOutputs> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut pv = Vec::with_capacity(pairs.len());
        let mut pt = Vec::with_capacity(pairs.len());
        let mut fv = Vec::new();
        let mut ft = Vec::new();
        for pair in pairs {
            let out = self.forward_pair(tape, b, pair, use_cmae)?;
            pv.push(out.projected_vision);
            pt.push(out.projected_language);
            if let Some(f) = out.fused {
                fv.push(f.vision);
                ft.push(f.language);
            }
        }
        Ok(BatchOutputs {
            projected_vision: tape.concat_rows(&pv)?,
            projected_language: tape.concat_rows(&pt)?,
            fused_vision: if use_cmae { Some(tape.concat_rows(&fv)?) } else { None },
            fused_language: if use_cmae { Some(tape.concat_rows(&ft)?) } else { None },
        })
    }

    /// Embedding of one modality of `pair` without its partner.
    pub fn forward_unimodal(
        &self,
        tape: &mut Tape<S>,
        b: &Bound,
        pair: &DocumentPair,
        modality: Modality,
        spec: EmbedSpec,
    ) -> Result<Var> {
        let seq = match modality {
            Modality::Vision => self.encode_vision(tape, b, &pair.image)?,
            Modality::Language => self.encode_language(tape, b, &pair.tokens)?,
            Modality::Multimodal => {
                return Err(Error::InvalidArgument("unimodal embedding needs a single modality".into()))
            }
        };
        if spec.use_cmae && spec.unimodal_path == UnimodalPath::CmaeSelf {
            self.arch.cmae.forward_single(tape, &b.params, &seq, modality)
        } else {
            self.project(tape, b, seq.pooled, modality)
        }
    }

    /// Document embedding for `modality`; the multimodal embedding is the
    /// renormalized mean of the pair's vision and language embeddings.
    pub fn forward_embedding(
        &self,
        tape: &mut Tape<S>,
        b: &Bound,
        pair: &DocumentPair,
        modality: Modality,
        spec: EmbedSpec,
    ) -> Result<Var> {
        match modality {
            Modality::Multimodal => {
                let out = self.forward_pair(tape, b, pair, spec.use_cmae)?;
                let (zv, zt) = match out.fused {
                    Some(f) => (f.vision, f.language),
                    None => (out.projected_vision, out.projected_language),
                };
                let s = tape.add(zv, zt)?;
                tape.l2_normalize(s)
            }
            single => self.forward_unimodal(tape, b, pair, single, spec),
        }
    }

    /// Soft cluster assignments `softmax(features · W + b)` per row.
    pub fn cluster_assignments(&self, tape: &mut Tape<S>, b: &Bound, features: Var, modality: Modality) -> Result<Var> {
        let head = match modality {
            Modality::Vision => &self.arch.cluster_vision,
            Modality::Language => &self.arch.cluster_language,
            Modality::Multimodal => return Err(Error::InvalidArgument("cluster heads are per modality".into())),
        };
        let logits = head.forward(tape, &b.params, features)?;
        tape.row_softmax(logits, S::one())
    }

    /// Both embeddings of a pair, computed without gradient tracking. With
    /// `use_cmae` they are the fused CMAE outputs, otherwise the
    /// projection-head outputs.
    pub fn embed_pair(&self, pair: &DocumentPair, use_cmae: bool) -> Result<(EmbeddingRecord, EmbeddingRecord)> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let out = self.forward_pair(&mut tape, &b, pair, use_cmae)?;
        let (zv, zt) = match out.fused {
            Some(f) => (f.vision, f.language),
            None => (out.projected_vision, out.projected_language),
        };
        let record = |v: Var, modality| -> Result<EmbeddingRecord> {
            Ok(EmbeddingRecord {
                vector: to_f32_unit(tape.value(v).data())?,
                modality,
                label: Some(pair.label),
                doc_id: pair.doc_id.clone(),
            })
        };
        Ok((record(zv, Modality::Vision)?, record(zt, Modality::Language)?))
    }

    pub fn embed(&self, pair: &DocumentPair, modality: Modality, spec: EmbedSpec) -> Result<EmbeddingRecord> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let v = self.forward_embedding(&mut tape, &b, pair, modality, spec)?;
        Ok(EmbeddingRecord {
            vector: to_f32_unit(tape.value(v).data())?,
            modality,
            label: Some(pair.label),
            doc_id: pair.doc_id.clone(),
        })
    }
}

/// Round a unit vector to `f32`, renormalizing so the stored vector is unit
/// to within `f32` precision.
fn to_f32_unit<S: Scalar>(data: &[S]) -> Result<Vec<f32>> {
    let v: Vec<f32> = data.iter().map(|x| x.as_f64() as f32).collect();
    normalize(&v)
}
