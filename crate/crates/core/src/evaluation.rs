//! Downstream evaluation: episodic few-shot classification with class
//! prototypes, content-based retrieval with Recall@K, a linear probe, and
//! the embedding export format.
//!
//! Embedding export layout (little-endian):
//!
//! ```text
//! "GEMB" | u32 version | u32 count | u32 dim | u8 modality | [u8; 32] model digest
//! count × dim f32 rows
//! count × u32 labels            (u32::MAX = unlabeled)
//! count × (u32 len, UTF-8 doc_id)
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::document::{DocumentPair, EmbeddingRecord, Modality};
use crate::encoders::{EmbedSpec, GlobalDocModel, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::parallel;
use crate::rng::SplitMix64;
use crate::trainer::AdamW;

pub const EXPORT_MAGIC: [u8; 4] = *b"GEMB";
pub const EXPORT_VERSION: u32 = 1;
pub const DISTANCE_FLOOR: f64 = 1e-12;
pub const CI_Z: f64 = 1.96;
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceKind {
    SquaredEuclidean,
    Euclidean,
}

impl std::str::FromStr for DistanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" | "squared_euclidean" => Ok(Self::SquaredEuclidean),
            "euclidean" => Ok(Self::Euclidean),
            other => Err(Error::Config(format!("unknown distance '{other}'"))),
        }
    }
}

impl std::fmt::Display for DistanceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SquaredEuclidean => "squared_euclidean",
            Self::Euclidean => "euclidean",
        })
    }
}

/// Episode loss used by [`meta_finetune`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetaLoss {
    /// `d(q, c_y) + log Σ_k d(q, c_k)` with distances floored.
    AsPrinted,
    /// `d(q, c_y) + log Σ_k exp(−d(q, c_k))`.
    LogSumExp,
}

impl std::str::FromStr for MetaLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_printed" => Ok(Self::AsPrinted),
            "logsumexp" => Ok(Self::LogSumExp),
            other => Err(Error::Config(format!("unknown meta loss '{other}'"))),
        }
    }
}

impl std::fmt::Display for MetaLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AsPrinted => "as_printed",
            Self::LogSumExp => "logsumexp",
        })
    }
}

fn distance(a: &[f64], b: &[f64], kind: DistanceKind) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match kind {
        DistanceKind::SquaredEuclidean => sq,
        DistanceKind::Euclidean => sq.sqrt(),
    }
}

/// Class centroids of `embeddings`; `labels[i] < way` and every class must
/// occur.
pub fn compute_prototypes(embeddings: &[&[f32]], labels: &[usize], way: usize) -> Result<Vec<Vec<f64>>> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::InvalidArgument("support embeddings and labels must be non-empty and aligned".into()));
    }
    let dim = embeddings[0].len();
    let mut sums = vec![vec![0.0f64; dim]; way];
    let mut counts = vec![0usize; way];
    for (e, &l) in embeddings.iter().zip(labels) {
        if l >= way || e.len() != dim {
            return Err(Error::InvalidArgument(format!("support label {l} or dimension {} invalid", e.len())));
        }
        counts[l] += 1;
        for (s, &x) in sums[l].iter_mut().zip(e.iter()) {
            *s += x as f64;
        }
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!("class {k} has no support sample")));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for x in s.iter_mut() {
            *x /= c as f64;
        }
    }
    Ok(sums)
}

/// `softmax_k(−d(q, c_k))`.
pub fn classify_query(query: &[f32], prototypes: &[Vec<f64>], kind: DistanceKind) -> Vec<f64> {
    let q: Vec<f64> = query.iter().map(|&x| x as f64).collect();
    let neg: Vec<f64> = prototypes.iter().map(|c| -distance(&q, c, kind)).collect();
    let max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = neg.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub seed: u64,
    pub distance: DistanceKind,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            way: 5,
            shot: 1,
            queries_per_class: 15,
            episodes: 600,
            seed: 0,
            distance: DistanceKind::SquaredEuclidean,
        }
    }
}

/// One K-way C-shot task. Indices refer to the pool the episode was drawn
/// from; labels are relabeled to `0..way` in the order of `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub classes: Vec<u32>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
}

/// Draw an episode over `classes` from a pool with labels `pool_labels`.
pub fn sample_episode(
    pool_labels: &[u32],
    classes: &[u32],
    way: usize,
    shot: usize,
    queries: usize,
    rng: &mut SplitMix64,
) -> Result<Episode> {
    if way < 2 || classes.len() < way {
        return Err(Error::InvalidArgument(format!("{}-way episode needs at least {way} classes, have {}", way, classes.len())));
    }
    if shot == 0 || queries == 0 {
        return Err(Error::InvalidArgument("shot and queries must be positive".into()));
    }
    let picked: Vec<u32> = rng.sample_indices(classes.len(), way).into_iter().map(|i| classes[i]).collect();
    let mut ep = Episode {
        classes: picked.clone(),
        support: Vec::new(),
        support_labels: Vec::new(),
        query: Vec::new(),
        query_labels: Vec::new(),
    };
    for (k, &c) in picked.iter().enumerate() {
        let members: Vec<usize> = pool_labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(i, _)| i).collect();
        if members.len() < shot + queries {
            return Err(Error::InvalidArgument(format!(
                "class {c} has {} samples, episode needs {}",
                members.len(),
                shot + queries
            )));
        }
        let chosen = rng.sample_indices(members.len(), shot + queries);
        for (j, &m) in chosen.iter().enumerate() {
            if j < shot {
                ep.support.push(members[m]);
                ep.support_labels.push(k);
            } else {
                ep.query.push(members[m]);
                ep.query_labels.push(k);
            }
        }
    }
    Ok(ep)
}

/// Mean episode accuracy with a 95% normal-approximation interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotResult {
    pub mean: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

impl FewShotResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = if accuracies.len() > 1 {
            accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            ci95: CI_Z * (var / n).sqrt(),
            accuracies,
        }
    }
}

/// Accuracy of nearest-prototype classification on one episode.
pub fn episode_accuracy(embeddings: &[Vec<f32>], episode: &Episode, way: usize, kind: DistanceKind) -> Result<f64> {
    let support: Vec<&[f32]> = episode.support.iter().map(|&i| embeddings[i].as_slice()).collect();
    let protos = compute_prototypes(&support, &episode.support_labels, way)?;
    let correct = episode
        .query
        .iter()
        .zip(&episode.query_labels)
        .filter(|(&q, &y)| argmax(&classify_query(&embeddings[q], &protos, kind)) == y)
        .count();
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Few-shot evaluation over precomputed embeddings of a pool; episodes
/// draw only from `classes`.
pub fn run_fewshot_episodes(embeddings: &[Vec<f32>], labels: &[u32], classes: &[u32], cfg: &EpisodeConfig) -> Result<FewShotResult> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidArgument("embeddings and labels differ in length".into()));
    }
    if cfg.episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be positive".into()));
    }
    let mut rng = SplitMix64::derive(cfg.seed, 0x6570_6973);
    let mut accs = Vec::with_capacity(cfg.episodes);
    for _ in 0..cfg.episodes {
        let ep = sample_episode(labels, classes, cfg.way, cfg.shot, cfg.queries_per_class, &mut rng)?;
        accs.push(episode_accuracy(embeddings, &ep, cfg.way, cfg.distance)?);
    }
    Ok(FewShotResult::from_accuracies(accs))
}

/// Embed every document for `modality` with frozen weights.
pub fn embed_documents<S: Scalar>(
    model: &GlobalDocModel<S>,
    docs: &[DocumentPair],
    modality: Modality,
    spec: EmbedSpec,
) -> Result<Vec<EmbeddingRecord>> {
    parallel::map(docs, |d| model.embed(d, modality, spec))
}

pub fn run_fewshot_eval<S: Scalar>(
    model: &GlobalDocModel<S>,
    docs: &[DocumentPair],
    classes: &[u32],
    modality: Modality,
    spec: EmbedSpec,
    cfg: &EpisodeConfig,
) -> Result<FewShotResult> {
    let pool: Vec<DocumentPair> = docs.iter().filter(|d| classes.contains(&d.label)).cloned().collect();
    let records = embed_documents(model, &pool, modality, spec)?;
    let vectors: Vec<Vec<f32>> = records.into_iter().map(|r| r.vector).collect();
    let labels: Vec<u32> = pool.iter().map(|d| d.label).collect();
    run_fewshot_episodes(&vectors, &labels, classes, cfg)
}

/// Episode loss on the tape. `support` is `[S × d]`, `query` `[Q × d]`;
/// labels index `0..way`.
pub fn meta_episode_loss<S: Scalar>(
    tape: &mut Tape<S>,
    support: Var,
    support_labels: &[usize],
    query: Var,
    query_labels: &[usize],
    way: usize,
    kind: DistanceKind,
    loss: MetaLoss,
) -> Result<Var> {
    let mut protos = Vec::with_capacity(way);
    for k in 0..way {
        let rows: Vec<usize> = support_labels.iter().enumerate().filter(|(_, &l)| l == k).map(|(i, _)| i).collect();
        if rows.is_empty() {
            return Err(Error::InvalidArgument(format!("class {k} has no support sample")));
        }
        let sel = tape.select_rows(support, &rows)?;
        protos.push(tape.mean_pool(sel)?);
    }
    let c = tape.concat_rows(&protos)?;
    let cross = tape.matmul_nt(query, c)?;
    let cross = tape.scale(cross, S::of(-2.0))?;
    let qq = tape.row_dot(query, query)?;
    let cc = tape.row_dot(c, c)?;
    let d = tape.add_col(cross, qq)?;
    let d = tape.add_row(d, cc)?;
    let d = tape.clamp_min(d, S::of(DISTANCE_FLOOR))?;
    let d = match kind {
        DistanceKind::SquaredEuclidean => d,
        DistanceKind::Euclidean => tape.sqrt(d)?,
    };
    let q = query_labels.len();
    let mut onehot = Tensor::zeros(&[q, way]);
    for (i, &y) in query_labels.iter().enumerate() {
        if y >= way {
            return Err(Error::InvalidArgument(format!("query label {y} outside way {way}")));
        }
        onehot.data_mut()[i * way + y] = S::one();
    }
    let onehot = tape.constant(onehot);
    let own = tape.mul(d, onehot)?;
    let own = tape.row_sum(own)?;
    let second = match loss {
        MetaLoss::AsPrinted => {
            let total = tape.row_sum(d)?;
            tape.log(total, S::of(DISTANCE_FLOOR))?
        }
        MetaLoss::LogSumExp => {
            let neg = tape.neg(d)?;
            tape.row_logsumexp(neg, S::one())?
        }
    };
    let per_query = tape.add(own, second)?;
    tape.mean(per_query)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaConfig {
    pub episode: EpisodeConfig,
    pub steps: usize,
    pub lr: f64,
    pub loss: MetaLoss,
    pub modality: Modality,
    pub spec: EmbedSpec,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            episode: EpisodeConfig {
                queries_per_class: 5,
                ..EpisodeConfig::default()
            },
            steps: 50,
            lr: 1e-4,
            loss: MetaLoss::AsPrinted,
            modality: Modality::Multimodal,
            spec: EmbedSpec::default(),
        }
    }
}

fn embed_rows<S: Scalar>(
    model: &GlobalDocModel<S>,
    tape: &mut Tape<S>,
    bound: &crate::encoders::Bound,
    docs: &[&DocumentPair],
    modality: Modality,
    spec: EmbedSpec,
) -> Result<Var> {
    let rows = docs
        .iter()
        .map(|d| model.forward_embedding(tape, bound, d, modality, spec))
        .collect::<Result<Vec<_>>>()?;
    tape.concat_rows(&rows)
}

/// Episodic fine-tuning on `classes` of `docs` (the base split). Cluster
/// heads stay fixed. Returns the per-step losses.
pub fn meta_finetune(model: &mut GlobalDocModel<f32>, docs: &[DocumentPair], classes: &[u32], cfg: &MetaConfig) -> Result<Vec<f64>> {
    if classes.len() < cfg.episode.way {
        return Err(Error::InvalidArgument(format!(
            "base split has {} classes, fewer than way {}",
            classes.len(),
            cfg.episode.way
        )));
    }
    let labels: Vec<u32> = docs.iter().map(|d| d.label).collect();
    let mut rng = SplitMix64::derive(cfg.episode.seed, 0x6d65_7461);
    let mut opt = AdamW::new(model.params(), 0.0);
    let trainable = |g: ParamGroup| g != ParamGroup::Cluster;
    let mut losses = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let e = &cfg.episode;
        let ep = sample_episode(&labels, classes, e.way, e.shot, e.queries_per_class, &mut rng)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, trainable);
        let sdocs: Vec<&DocumentPair> = ep.support.iter().map(|&i| &docs[i]).collect();
        let qdocs: Vec<&DocumentPair> = ep.query.iter().map(|&i| &docs[i]).collect();
        let s = embed_rows(model, &mut tape, &bound, &sdocs, cfg.modality, cfg.spec)?;
        let q = embed_rows(model, &mut tape, &bound, &qdocs, cfg.modality, cfg.spec)?;
        let loss = meta_episode_loss(&mut tape, s, &ep.support_labels, q, &ep.query_labels, e.way, e.distance, cfg.loss)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite("meta loss"));
        }
        tape.backward(loss)?;
        let grads: Vec<(ParamId, Tensor<f32>)> = model
            .params()
            .ids()
            .filter(|&id| trainable(model.params().group(id)))
            .filter_map(|id| tape.grad(bound.params.var(id)).map(|g| (id, g.clone())))
            .collect();
        if grads.iter().any(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite("meta gradient"));
        }
        opt.step(model.params_mut(), &grads, cfg.lr)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Unit embeddings of a document collection for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub modality: Modality,
    pub vectors: Vec<Vec<f32>>,
    pub labels: Vec<Option<u32>>,
    pub doc_ids: Vec<String>,
    pub model_digest: [u8; 32],
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn from_records(records: Vec<EmbeddingRecord>, modality: Modality, model_digest: [u8; 32]) -> Result<Self> {
        let mut index = Self {
            modality,
            vectors: Vec::with_capacity(records.len()),
            labels: Vec::with_capacity(records.len()),
            doc_ids: Vec::with_capacity(records.len()),
            model_digest,
        };
        for r in records {
            if r.modality != modality {
                return Err(Error::InvalidArgument(format!("record {} has modality {}, index {modality}", r.doc_id, r.modality)));
            }
            index.vectors.push(r.vector);
            index.labels.push(r.label);
            index.doc_ids.push(r.doc_id);
        }
        Ok(index)
    }
}

pub fn build_index<S: Scalar>(model: &GlobalDocModel<S>, docs: &[DocumentPair], modality: Modality, spec: EmbedSpec) -> Result<RetrievalIndex> {
    let records = embed_documents(model, docs, modality, spec)?;
    RetrievalIndex::from_records(records, modality, model.config().digest())
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Top-`top_k` index positions by descending inner product, ties by
/// doc_id. Entries whose doc_id equals `exclude_doc` are skipped.
pub fn retrieve(index: &RetrievalIndex, query: &[f32], top_k: usize, exclude_doc: Option<&str>) -> Result<Vec<usize>> {
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(index.len());
    for (i, v) in index.vectors.iter().enumerate() {
        if exclude_doc == Some(index.doc_ids[i].as_str()) {
            continue;
        }
        if v.len() != query.len() {
            return Err(Error::Shape {
                op: "retrieve",
                lhs: vec![v.len()],
                rhs: vec![query.len()],
            });
        }
        scored.push((dot64(v, query), i));
    }
    if top_k == 0 || top_k > scored.len() {
        return Err(Error::InvalidArgument(format!("top_k {top_k} exceeds the {} candidates", scored.len())));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| index.doc_ids[a.1].cmp(&index.doc_ids[b.1])));
    Ok(scored.into_iter().take(top_k).map(|(_, i)| i).collect())
}

/// Per-K hit indicators: whether any of the first K labels equals the
/// query label.
pub fn recall_at_k(ranked_labels: &[Option<u32>], query_label: u32, ks: &[usize]) -> Result<Vec<bool>> {
    if ranked_labels.is_empty() {
        return Err(Error::InvalidArgument("empty ranking".into()));
    }
    let first_hit = ranked_labels.iter().position(|&l| l == Some(query_label));
    Ok(ks.iter().map(|&k| first_hit.is_some_and(|p| p < k)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub queries: usize,
}

/// R@K of every query in `queries` against `index`, excluding each query's
/// own doc_id from the ranking.
pub fn evaluate_retrieval(queries: &RetrievalIndex, index: &RetrievalIndex, ks: &[usize]) -> Result<RecallTable> {
    let max_k = *ks.iter().max().ok_or_else(|| Error::InvalidArgument("no K values".into()))?;
    let positions: Vec<usize> = (0..queries.len()).collect();
    let hits = parallel::map(&positions, |&qi| -> Result<Vec<bool>> {
        let label = queries.labels[qi].ok_or_else(|| Error::InvalidArgument(format!("query {} is unlabeled", queries.doc_ids[qi])))?;
        let exclude = Some(queries.doc_ids[qi].as_str());
        let available = index.len() - usize::from(index.doc_ids.iter().any(|d| Some(d.as_str()) == exclude));
        let ranked = retrieve(index, &queries.vectors[qi], max_k.min(available), exclude)?;
        let labels: Vec<Option<u32>> = ranked.iter().map(|&i| index.labels[i]).collect();
        recall_at_k(&labels, label, ks)
    })?;
    if hits.is_empty() {
        return Err(Error::InvalidArgument("no retrieval queries".into()));
    }
    let recall = (0..ks.len())
        .map(|j| hits.iter().filter(|h| h[j]).count() as f64 / hits.len() as f64)
        .collect();
    Ok(RecallTable {
        ks: ks.to_vec(),
        recall,
        queries: hits.len(),
    })
}

/// Top-1 accuracy of a softmax-regression classifier trained on frozen
/// `train` embeddings and scored on `test`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

pub fn linear_probe(
    train: &[Vec<f32>],
    train_labels: &[u32],
    test: &[Vec<f32>],
    test_labels: &[u32],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let classes: BTreeSet<u32> = train_labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidArgument("linear probe needs at least two classes".into()));
    }
    if train.is_empty() || test.is_empty() || train.len() != train_labels.len() || test.len() != test_labels.len() {
        return Err(Error::InvalidArgument("probe splits must be non-empty and aligned".into()));
    }
    let classes: Vec<u32> = classes.into_iter().collect();
    let c = classes.len();
    let d = train[0].len();
    let x = Tensor::from_rows(&train.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect::<Vec<Vec<f64>>>())?;
    let mut y = Tensor::<f64>::zeros(&[train.len(), c]);
    for (i, l) in train_labels.iter().enumerate() {
        let k = classes.binary_search(l).expect("label from class set");
        y.data_mut()[i * c + k] = 1.0;
    }
    let mut rng = SplitMix64::derive(cfg.seed, 0x7072_6f62);
    let mut store = ParamStore::<f64>::default();
    let w = store.add_normal("probe.weight", ParamGroup::Projection, &[d, c], d, &mut rng);
    let b = store.add("probe.bias", ParamGroup::Projection, Tensor::zeros(&[c]));
    let mut opt = AdamW::new(&store, 0.0);
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape, |_| true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let logits = tape.matmul(xv, bind.var(w))?;
        let logits = tape.add_row(logits, bind.var(b))?;
        let p = tape.row_softmax(logits, 1.0)?;
        let loss = tape.cross_entropy(p, yv)?;
        tape.backward(loss)?;
        let grads = [w, b].map(|id| (id, tape.grad(bind.var(id)).expect("trainable").clone()));
        opt.step(&mut store, &grads, cfg.lr)?;
    }
    let (wt, bt) = (store.get(w), store.get(b));
    let correct = test
        .iter()
        .zip(test_labels)
        .filter(|(row, label)| {
            let scores: Vec<f64> = (0..c)
                .map(|k| bt.data()[k] + row.iter().enumerate().map(|(j, &v)| v as f64 * wt.data()[j * c + k]).sum::<f64>())
                .collect();
            classes[argmax(&scores)] == **label
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Serialize an index in the export format.
pub fn export_bytes(index: &RetrievalIndex) -> Result<Vec<u8>> {
    let dim = index.dim();
    let mut out = Vec::new();
    out.extend_from_slice(&EXPORT_MAGIC);
    out.extend_from_slice(&EXPORT_VERSION.to_le_bytes());
    let u = |v: usize| u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} exceeds u32")));
    out.extend_from_slice(&u(index.len())?.to_le_bytes());
    out.extend_from_slice(&u(dim)?.to_le_bytes());
    out.push(index.modality.code());
    out.extend_from_slice(&index.model_digest);
    for v in &index.vectors {
        if v.len() != dim {
            return Err(Error::Shape {
                op: "export",
                lhs: vec![dim],
                rhs: vec![v.len()],
            });
        }
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for l in &index.labels {
        out.extend_from_slice(&l.unwrap_or(u32::MAX).to_le_bytes());
    }
    for id in &index.doc_ids {
        out.extend_from_slice(&u(id.len())?.to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::data(self.origin, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn import_bytes(bytes: &[u8], origin: &Path) -> Result<RetrievalIndex> {
    let mut r = Cursor { bytes, pos: 0, origin };
    if r.take(4)? != EXPORT_MAGIC {
        return Err(Error::data(origin, "bad magic"));
    }
    let version = r.u32()?;
    if version != EXPORT_VERSION {
        return Err(Error::data(origin, format!("unsupported export version {version}")));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let modality = Modality::from_code(r.take(1)?[0]).ok_or_else(|| Error::data(origin, "unknown modality code"))?;
    let model_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let row_bytes = dim.checked_mul(4).ok_or_else(|| Error::data(origin, "dimension overflow"))?;
    let mut vectors = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let raw = r.take(row_bytes)?;
        vectors.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    let mut labels = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let l = r.u32()?;
        labels.push((l != u32::MAX).then_some(l));
    }
    let mut doc_ids = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let s = std::str::from_utf8(r.take(n)?).map_err(|_| Error::data(origin, "doc_id is not UTF-8"))?;
        doc_ids.push(s.to_string());
    }
    if r.pos != bytes.len() {
        return Err(Error::data(origin, "trailing bytes"));
    }
    Ok(RetrievalIndex {
        modality,
        vectors,
        labels,
        doc_ids,
        model_digest,
    })
}

pub fn write_embeddings(path: &Path, index: &RetrievalIndex) -> Result<()> {
    fs::write(path, export_bytes(index)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<RetrievalIndex> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    import_bytes(&bytes, path)
}

/// Retrieval results keyed by (query modality, index modality).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalReport {
    pub rows: Vec<(Modality, Modality, RecallTable)>,
}

impl RetrievalReport {
    pub fn get(&self, query: Modality, index: Modality) -> Option<&RecallTable> {
        self.rows.iter().find(|(q, i, _)| *q == query && *i == index).map(|(_, _, t)| t)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("query index queries");
        if let Some((_, _, t)) = self.rows.first() {
            for k in &t.ks {
                let _ = write!(s, " R@{k}");
            }
        }
        s.push('\n');
        for (q, i, t) in &self.rows {
            let _ = write!(s, "{} {} {}", q.short(), i.short(), t.queries);
            for r in &t.recall {
                let _ = write!(s, " {:.4}", r);
            }
            s.push('\n');
        }
        s
    }
}

/// Uni-modal (V→V, L→L) and cross-modal (V→L, L→V) retrieval over `docs`.
pub fn retrieval_report<S: Scalar>(model: &GlobalDocModel<S>, docs: &[DocumentPair], spec: EmbedSpec, ks: &[usize]) -> Result<RetrievalReport> {
    let v = build_index(model, docs, Modality::Vision, spec)?;
    let t = build_index(model, docs, Modality::Language, spec)?;
    let mut report = RetrievalReport::default();
    for (q, i) in [(&v, &v), (&t, &t), (&v, &t), (&t, &v)] {
        report.rows.push((q.modality, i.modality, evaluate_retrieval(q, i, ks)?));
    }
    Ok(report)
}

/// Few-shot results per embedding modality.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FewShotReport {
    pub way: usize,
    pub shot: usize,
    pub rows: Vec<(Modality, FewShotResult)>,
}

impl FewShotReport {
    pub fn get(&self, modality: Modality) -> Option<&FewShotResult> {
        self.rows.iter().find(|(m, _)| *m == modality).map(|(_, r)| r)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("modality way shot episodes accuracy ci95\n");
        for (m, r) in &self.rows {
            let _ = writeln!(s, "{} {} {} {} {:.4} {:.4}", m.short(), self.way, self.shot, r.accuracies.len(), r.mean, r.ci95);
        }
        s
    }
}

pub fn fewshot_report<S: Scalar>(
    model: &GlobalDocModel<S>,
    docs: &[DocumentPair],
    classes: &[u32],
    spec: EmbedSpec,
    cfg: &EpisodeConfig,
) -> Result<FewShotReport> {
    let mut report = FewShotReport {
        way: cfg.way,
        shot: cfg.shot,
        rows: Vec::new(),
    };
    for m in [Modality::Vision, Modality::Language, Modality::Multimodal] {
        report.rows.push((m, run_fewshot_eval(model, docs, classes, m, spec, cfg)?));
    }
    Ok(report)
}
