//! Checks behind the acceptance criteria. Each returns an [`Outcome`] so
//! the focused suites and the acceptance runner share one definition.

use std::time::{Duration, Instant};

use globaldoc::autodiff::{Tape, Tensor};
use globaldoc::certify::{certify_all, CERTIFY_TOLERANCE};
use globaldoc::datagen::{generate, Corpus};
use globaldoc::encoders::{EmbedSpec, GlobalDocModel, ModelConfig, UnimodalPath};
use globaldoc::evaluation::{
    classify_query, evaluate_retrieval, export_bytes, fewshot_report, import_bytes, meta_finetune, recall_at_k,
    retrieval_report, retrieve, sample_episode, DistanceKind, EpisodeConfig, FewShotReport, MetaConfig,
    RetrievalIndex, RetrievalReport, DEFAULT_KS,
};
use globaldoc::objectives::{self, EntropySign, ObjectiveConfig, Setting, UnifyTarget};
use globaldoc::queue::SupportQueue;
use globaldoc::rng::SplitMix64;
use globaldoc::trainer::{StepMetrics, TrainConfig, Trainer};
use globaldoc::{DocumentImage, DocumentPair, Modality};

use super::*;

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

/// Certify every objective and the S3 total through the model, in `f64`.
pub fn gradient_certification() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    let mut count = 0;
    for seed in 0..2 {
        for cert in certify_all(Setting::S3, 8, seed, None).expect("certification runs") {
            count += 1;
            worst = worst.max(cert.report.max_error());
            if !cert.report.passed() {
                failed.push(format!("{}(seed {seed})", cert.name));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failed.is_empty() && worst <= CERTIFY_TOLERANCE && elapsed < Duration::from_secs(60);
    Outcome::new(
        pass,
        format!("{count} certificates, max rel err {worst:.2e} (tol 1e-4), {:.1}s (limit 60s){}", elapsed.as_secs_f64(), fmt_failed(&failed)),
    )
}

fn fmt_failed(failed: &[String]) -> String {
    if failed.is_empty() {
        String::new()
    } else {
        format!(", failed: {}", failed.join(" "))
    }
}

/// Largest relative error between library and oracle losses over `fixtures`
/// seeded fixtures.
pub fn loss_oracle_error(fixtures: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..fixtures {
        let mut rng = SplitMix64::derive(seed, 0x6f72_6163);
        let m = 2 + rng.below(7);
        let d = 2 + rng.below(15);
        let [v, t, nv, nt] = [0; 4].map(|_| unit_rows(&mut rng, m, d));
        let tau = [0.07, 0.1, 0.5, 1.0][rng.below(4)];
        for nn_den in [false, true] {
            let cfg = ObjectiveConfig {
                temperature: tau,
                nn_in_denominator: nn_den,
                ..ObjectiveConfig::default()
            };
            let mut tape = Tape::<f64>::new();
            let [a, b, c, e] = [&v, &t, &nv, &nt].map(|x| tape.constant(tensor(x)));
            let inter = objectives::l2m_inter(&mut tape, a, b, c, e, &cfg).unwrap();
            let intra = objectives::l2m_intra(&mut tape, a, b, c, e, &cfg).unwrap();
            worst = worst.max(relative_error(tape.value(inter).item(), super::l2m_inter(&v, &t, &nv, &nt, tau, nn_den)));
            worst = worst.max(relative_error(tape.value(intra).item(), super::l2m_intra(&v, &t, &nv, &nt, tau, nn_den)));
        }
        let temperature = [0.1, 0.5, 1.0, 2.0][rng.below(4)];
        for (target, soft) in [(UnifyTarget::Hard, false), (UnifyTarget::Soft, true)] {
            let mut tape = Tape::<f64>::new();
            let (a, b) = (tape.constant(tensor(&v)), tape.constant(tensor(&t)));
            let out = objectives::l2u_loss(&mut tape, a, b, target, temperature).unwrap();
            worst = worst.max(relative_error(tape.value(out).item(), l2u(&v, &t, soft, temperature)));
        }
        let c = 2 + rng.below(7);
        let k = 1 + rng.below(4);
        let anchors = distribution_rows(&mut rng, m, c);
        let neighbors = distribution_rows(&mut rng, m * k, c);
        let lambda = 0.5 + 3.0 * rng.next_f64();
        let (cons, plogp) = l2r_parts(&anchors, &neighbors, k);
        for (sign, s) in [(EntropySign::MaximizeEntropy, 1.0), (EntropySign::MinimizeEntropy, -1.0)] {
            let mut tape = Tape::<f64>::new();
            let (a, n) = (tape.constant(tensor(&anchors)), tape.constant(tensor(&neighbors)));
            let r = objectives::l2r_loss(&mut tape, a, n, k, lambda, sign).unwrap();
            worst = worst.max(relative_error(tape.value(r.consistency).item(), cons));
            worst = worst.max(relative_error(tape.value(r.entropy).item(), s * lambda * plogp));
            worst = worst.max(relative_error(tape.value(r.total).item(), cons + s * lambda * plogp));
        }
    }
    worst
}

/// Fixtures on which `nearest_neighbor` disagrees with the exhaustive scan.
pub fn nearest_neighbor_mismatches(fixtures: u64) -> usize {
    let mut bad = 0;
    for seed in 0..fixtures {
        let mut rng = SplitMix64::derive(seed, 0x6e6e);
        let d = 2 + rng.below(8);
        let capacity = 1 + rng.below(24);
        let mut queue = SupportQueue::new(capacity, Modality::Vision).unwrap();
        let batches = 1 + rng.below(4);
        for _ in 0..batches {
            let n = rng.below(12);
            queue.enqueue_batch(&palette_unit_vectors(&mut rng, n, d, 4), None).unwrap();
        }
        if queue.is_empty() {
            queue.enqueue_batch(&palette_unit_vectors(&mut rng, 1, d, 1), None).unwrap();
        }
        let query: Vec<f32> = if rng.bernoulli(0.3) {
            queue.entries().nth(rng.below(queue.len())).unwrap().vector.clone()
        } else {
            palette_unit_vectors(&mut rng, 1, d, 1).remove(0)
        };
        if queue.nearest_neighbor(&query).unwrap().sequence != nearest_sequence(&queue, &query) {
            bad += 1;
        }
    }
    bad
}

/// Fixtures on which `retrieve` disagrees with the exhaustive ranking.
pub fn retrieval_mismatches(fixtures: u64) -> usize {
    let mut bad = 0;
    for seed in 0..fixtures {
        let mut rng = SplitMix64::derive(seed, 0x7265_7472);
        let n = 2 + rng.below(30);
        let d = 2 + rng.below(6);
        let index = random_index(&mut rng, n, d, 4);
        let (query, exclude) = if rng.bernoulli(0.5) {
            let q = rng.below(n);
            (index.vectors[q].clone(), Some(index.doc_ids[q].clone()))
        } else {
            (palette_unit_vectors(&mut rng, 1, index.dim(), 1).remove(0), None)
        };
        let available = n - usize::from(exclude.is_some());
        let k = 1 + rng.below(available);
        let got = retrieve(&index, &query, k, exclude.as_deref()).unwrap();
        if got != ranking(&index, &query, k, exclude.as_deref()) {
            bad += 1;
        }
    }
    bad
}

pub fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let loss = loss_oracle_error(50);
    let nn = nearest_neighbor_mismatches(200);
    let ret = retrieval_mismatches(200);
    let elapsed = start.elapsed();
    Outcome::new(
        loss <= 1e-8 && nn == 0 && ret == 0 && elapsed < Duration::from_secs(30),
        format!(
            "losses max rel err {loss:.2e} over 50 fixtures (tol 1e-8); nearest_neighbor {nn}/200 mismatches; retrieve {ret}/200 mismatches; {:.1}s (limit 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn basis(n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// `(orthonormal L2U error, uniform entropy error, equidistant prototype error)`.
pub fn closed_form_errors() -> (f64, f64, f64) {
    let mut l2u_err = 0.0f64;
    for m in [2usize, 3, 4, 8] {
        let z = basis(m, m);
        let mut tape = Tape::<f64>::new();
        let (a, b) = (tape.constant(tensor(&z)), tape.constant(tensor(&z)));
        let out = objectives::l2u_loss(&mut tape, a, b, UnifyTarget::Hard, 1.0).unwrap();
        // Each direction contributes −ln(e / (e + (M − 1))) per sample.
        let want = 2.0 * (1.0 + (m as f64 - 1.0) * (-1.0f64).exp()).ln();
        l2u_err = l2u_err.max((tape.value(out).item() - want).abs());
    }
    let mut entropy_err = 0.0f64;
    for c in [2usize, 3, 5, 16] {
        for lambda in [1.0, 2.0, 5.0] {
            for sign in [EntropySign::MaximizeEntropy, EntropySign::MinimizeEntropy] {
                let uniform = vec![vec![1.0 / c as f64; c]; 4];
                let mut tape = Tape::<f64>::new();
                let a = tape.constant(tensor(&uniform));
                let n = tape.constant(tensor(&uniform));
                let r = objectives::l2r_loss(&mut tape, a, n, 1, lambda, sign).unwrap();
                let got = tape.value(r.entropy).item().abs();
                entropy_err = entropy_err.max((got - lambda * (c as f64).ln()).abs());
            }
        }
    }
    let mut proto_err = 0.0f64;
    for k in [2usize, 3, 5, 10] {
        let protos = basis(k, k);
        let centered = vec![1.0 / (k as f32).sqrt(); k];
        for query in [vec![0.0f32; k], centered] {
            for kind in [DistanceKind::SquaredEuclidean, DistanceKind::Euclidean] {
                for p in classify_query(&query, &protos, kind) {
                    proto_err = proto_err.max((p - 1.0 / k as f64).abs());
                }
            }
        }
    }
    (l2u_err, entropy_err, proto_err)
}

pub fn closed_forms() -> Outcome {
    let (a, b, c) = closed_form_errors();
    Outcome::new(
        a <= 1e-10 && b <= 1e-10 && c <= 1e-10,
        format!("orthonormal L2U err {a:.1e}; uniform entropy |term| − λ·ln C err {b:.1e}; equidistant prototypes err {c:.1e} (tol 1e-10)"),
    )
}

/// Random document matching `model`'s geometry.
pub fn random_document(rng: &mut SplitMix64, config: &ModelConfig, id: usize) -> DocumentPair {
    let v = &config.vision;
    let pixels = (0..v.image_height * v.image_width * v.channels).map(|_| rng.next_f64() as f32).collect();
    let len = 1 + rng.below(config.language.max_len + 3);
    let first = globaldoc::datagen::FIRST_BODY_TOKEN as usize;
    DocumentPair {
        doc_id: format!("doc-{id:06}"),
        image: DocumentImage::new(v.image_height, v.image_width, v.channels, pixels).unwrap(),
        tokens: (0..len).map(|_| (first + rng.below(config.language.vocab_size - first)) as u32).collect(),
        label: rng.below(4) as u32,
    }
}

/// Violation counts per invariant over `instances` random instances each.
pub fn invariant_violations(instances: u64) -> Vec<(&'static str, usize)> {
    let mut out = Vec::new();

    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = SplitMix64::derive(seed, 0x726b);
        let n = 12 + rng.below(20);
        let d = 3 + rng.below(5);
        let index = random_index(&mut rng, n, d, 3);
        let ks: Vec<usize> = (1..=10).collect();
        let q = rng.below(n);
        let ranked = retrieve(&index, &index.vectors[q], 10, Some(&index.doc_ids[q])).unwrap();
        let labels: Vec<Option<u32>> = ranked.iter().map(|&i| index.labels[i]).collect();
        let hits = recall_at_k(&labels, index.labels[q].unwrap(), &ks).unwrap();
        let table = evaluate_retrieval(&index, &index, &ks).unwrap();
        if hits.windows(2).any(|w| w[0] && !w[1]) || table.recall.windows(2).any(|w| w[0] > w[1]) {
            bad += 1;
        }
    }
    out.push(("R@K monotonicity", bad));

    let config = ModelConfig::tiny(8);
    let model = GlobalDocModel::<f32>::new(config.clone()).unwrap();
    let mut bad = 0;
    let modalities = [Modality::Vision, Modality::Language, Modality::Multimodal];
    for seed in 0..instances {
        let mut rng = SplitMix64::derive(seed, 0x756e);
        let modality = modalities[rng.below(3)];
        let spec = EmbedSpec {
            use_cmae: rng.bernoulli(0.5),
            unimodal_path: if rng.bernoulli(0.5) { UnimodalPath::Projection } else { UnimodalPath::CmaeSelf },
        };
        let docs: Vec<DocumentPair> = (0..1 + rng.below(3)).map(|i| random_document(&mut rng, &config, i)).collect();
        let records = docs.iter().map(|d| model.embed(d, modality, spec).unwrap()).collect();
        let index = RetrievalIndex::from_records(records, modality, config.digest()).unwrap();
        let back = import_bytes(&export_bytes(&index).unwrap(), std::path::Path::new("mem")).unwrap();
        let unit = back.vectors.iter().all(|v| {
            let n: f64 = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            (n - 1.0).abs() <= 1e-5
        });
        if back != index || !unit {
            bad += 1;
        }
    }
    out.push(("unit-norm exports", bad));

    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = SplitMix64::derive(seed, 0x6669);
        let capacity = 1 + rng.below(16);
        let mut queue = SupportQueue::new(capacity, Modality::Language).unwrap();
        let mut reference: Vec<(u64, Vec<f32>)> = Vec::new();
        let mut seq = 0u64;
        for _ in 0..1 + rng.below(6) {
            let n = rng.below(10);
            let batch = palette_unit_vectors(&mut rng, n, 3, 8);
            queue.enqueue_batch(&batch, None).unwrap();
            for v in batch {
                reference.push((seq, v));
                seq += 1;
            }
            let keep = reference.len().saturating_sub(capacity);
            let expected = &reference[keep..];
            let got: Vec<(u64, Vec<f32>)> = queue.entries().map(|e| (e.sequence, e.vector.clone())).collect();
            if got != expected || queue.len() > capacity {
                bad += 1;
                break;
            }
        }
    }
    out.push(("FIFO semantics", bad));

    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = SplitMix64::derive(seed, 0x7061);
        let doc = random_document(&mut rng, &config, 0);
        let lc = &config.language;
        let framed = globaldoc::encoders::frame_tokens(&doc.tokens, lc).unwrap();
        let mut noisy = framed.clone();
        for id in noisy.ids[framed.valid..].iter_mut() {
            *id = rng.below(lc.vocab_size);
        }
        let pooled = |f: &globaldoc::encoders::FramedTokens| {
            let mut tape = Tape::<f64>::new();
            let m64 = model.cast::<f64>();
            let b = m64.bind(&mut tape, |_| false);
            let enc = m64.encode_language_framed(&mut tape, &b, f).unwrap();
            tape.value(enc.pooled).clone()
        };
        let truncated = &doc.tokens[..doc.tokens.len().min(lc.max_len - 2)];
        let same_truncation = globaldoc::encoders::frame_tokens(truncated, lc).unwrap() == framed;
        if pooled(&framed) != pooled(&noisy) || !same_truncation {
            bad += 1;
        }
    }
    out.push(("padding invariance", bad));

    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = SplitMix64::derive(seed, 0x736d);
        let (m, c) = (1 + rng.below(8), 1 + rng.below(12));
        let scale = [1e-3, 1.0, 30.0, 300.0][rng.below(4)];
        let logits: Vec<Vec<f64>> = (0..m).map(|_| (0..c).map(|_| scale * rng.normal()).collect()).collect();
        let temperature = [0.05, 0.07, 1.0, 4.0][rng.below(4)];
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(tensor(&logits));
        let p = tape.row_softmax(x, temperature).unwrap();
        let rows = tape.value(p).clone();
        let mut ok = (0..m).all(|i| (rows.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let query: Vec<f32> = (0..c).map(|_| (scale * rng.normal()) as f32).collect();
        let protos: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|x| x / scale).collect()).collect();
        ok &= (classify_query(&query, &protos, DistanceKind::SquaredEuclidean).iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        if !ok {
            bad += 1;
        }
    }
    out.push(("softmax row sums", bad));

    let mut bad = 0;
    for seed in 0..instances {
        let mut rng = SplitMix64::derive(seed, 0x6570);
        let classes = 3 + rng.below(6);
        let pool: Vec<u32> = (0..classes * (4 + rng.below(6))).map(|i| (i % classes) as u32).collect();
        let doc_ids: Vec<String> = (0..pool.len()).map(|i| format!("doc-{i:06}")).collect();
        let cls: Vec<u32> = (0..classes as u32).collect();
        let way = 2 + rng.below(classes - 1);
        let ep = sample_episode(&pool, &cls, way, 1 + rng.below(2), 1 + rng.below(2), &mut rng).unwrap();
        let support: std::collections::BTreeSet<&str> = ep.support.iter().map(|&i| doc_ids[i].as_str()).collect();
        let query: std::collections::BTreeSet<&str> = ep.query.iter().map(|&i| doc_ids[i].as_str()).collect();
        let labels_ok = ep.support.iter().zip(&ep.support_labels).chain(ep.query.iter().zip(&ep.query_labels)).all(|(&i, &l)| pool[i] == ep.classes[l]);
        if support.len() != ep.support.len() || query.len() != ep.query.len() || !support.is_disjoint(&query) || !labels_ok {
            bad += 1;
        }
    }
    out.push(("episode doc_id disjointness", bad));
    out
}

pub fn invariants() -> Outcome {
    let counts = invariant_violations(100);
    let pass = counts.iter().all(|(_, n)| *n == 0);
    let detail = counts.iter().map(|(name, n)| format!("{name} {n}/100")).collect::<Vec<_>>().join("; ");
    Outcome::new(pass, format!("violations: {detail}"))
}

/// Outputs of one retrieval-pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRun {
    pub metrics: Vec<StepMetrics>,
    pub report: RetrievalReport,
    pub seconds: f64,
}

pub fn retrieval_corpus() -> Corpus {
    generate(&e2e_corpus(4, 200)).unwrap()
}

pub fn retrieval_run(corpus: &Corpus, setting: Setting) -> RetrievalRun {
    let start = Instant::now();
    let model = GlobalDocModel::<f32>::new(e2e_model(4)).unwrap();
    let cfg = TrainConfig {
        setting,
        batch_size: 16,
        total_steps: 2000,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, model).unwrap();
    trainer.train(&corpus.train, None).unwrap();
    let spec = EmbedSpec {
        use_cmae: setting.uses_cmae(),
        unimodal_path: UnimodalPath::Projection,
    };
    let report = retrieval_report(&trainer.model, &corpus.test, spec, &DEFAULT_KS).unwrap();
    RetrievalRun {
        metrics: trainer.history,
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn r1(report: &RetrievalReport, q: Modality, i: Modality) -> f64 {
    report.get(q, i).expect("report row").recall[0]
}

/// `(outcome, the clause that is known to be unattainable failed)`.
pub fn s2_retrieval(s2: &RetrievalRun, s1: &RetrievalRun) -> (Outcome, bool) {
    use Modality::{Language as L, Vision as V};
    let (vl, lv) = (r1(&s2.report, V, L), r1(&s2.report, L, V));
    let (vv, ll) = (r1(&s2.report, V, V), r1(&s2.report, L, L));
    let s1_cross = r1(&s1.report, V, L).max(r1(&s1.report, L, V));
    let gap = vl.min(lv) - s1_cross;
    let main = vl >= 0.90 && lv >= 0.90 && vv >= 0.95 && ll >= 0.95 && s2.seconds <= 600.0;
    let gap_ok = gap >= 0.3;
    let detail = format!(
        "S2 R@1 V->L {vl:.3} L->V {lv:.3} (>= 0.90), V->V {vv:.3} L->L {ll:.3} (>= 0.95), {:.0}s (limit 600s); S1 cross-modal R@1 {s1_cross:.3}, gap {gap:.3} (>= 0.3){}",
        s2.seconds,
        if gap_ok { "" } else { " [S1 gap clause not met]" }
    );
    (Outcome::new(main && gap_ok, detail), main && !gap_ok)
}

/// Outputs of one few-shot run: untrained, trained and meta-finetuned reports.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotRun {
    pub metrics: Vec<StepMetrics>,
    pub untrained: FewShotReport,
    pub trained: FewShotReport,
    pub meta: FewShotReport,
    pub meta_losses: Vec<f64>,
}

pub const BASE_CLASSES: [u32; 3] = [0, 1, 2];
pub const NOVEL_CLASSES: [u32; 3] = [3, 4, 5];

pub fn fewshot_run() -> FewShotRun {
    let corpus = generate(&e2e_corpus(6, 200)).unwrap();
    let untrained_model = GlobalDocModel::<f32>::new(e2e_model(6)).unwrap();
    let spec = EmbedSpec::default();
    let episode = EpisodeConfig {
        way: 3,
        shot: 1,
        episodes: 600,
        ..EpisodeConfig::default()
    };
    let untrained = fewshot_report(&untrained_model, &corpus.test, &NOVEL_CLASSES, spec, &episode).unwrap();
    let cfg = TrainConfig {
        setting: Setting::S3,
        total_steps: 2000,
        stage2_start_step: 1500,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(cfg, untrained_model).unwrap();
    trainer.train(&corpus.train, None).unwrap();
    let trained = fewshot_report(&trainer.model, &corpus.test, &NOVEL_CLASSES, spec, &episode).unwrap();
    let mut model = trainer.model.clone();
    let meta_cfg = MetaConfig {
        steps: 50,
        lr: 1e-4,
        episode: EpisodeConfig {
            way: 3,
            queries_per_class: 5,
            ..EpisodeConfig::default()
        },
        ..MetaConfig::default()
    };
    let meta_losses = meta_finetune(&mut model, &corpus.train, &BASE_CLASSES, &meta_cfg).unwrap();
    let meta = fewshot_report(&model, &corpus.test, &NOVEL_CLASSES, spec, &episode).unwrap();
    FewShotRun {
        metrics: trainer.history,
        untrained,
        trained,
        meta,
        meta_losses,
    }
}

pub fn fewshot(run: &FewShotRun) -> Outcome {
    let get = |r: &FewShotReport| r.get(Modality::Multimodal).expect("multimodal row").clone();
    let (u, t, m) = (get(&run.untrained), get(&run.trained), get(&run.meta));
    let margin = 3.0 * u.ci95.max(t.ci95);
    let pass = t.mean >= 0.80 && t.mean >= u.mean + margin && m.mean >= t.mean;
    Outcome::new(
        pass,
        format!(
            "3-way 1-shot, 600 episodes, novel classes {NOVEL_CLASSES:?}: trained {:.4} ± {:.4} (>= 0.80); untrained {:.4} ± {:.4}, required >= {:.4}; meta-finetuned {:.4} (>= trained)",
            t.mean,
            t.ci95,
            u.mean,
            u.ci95,
            u.mean + margin,
            m.mean
        ),
    )
}

pub fn determinism(a: (&RetrievalRun, &FewShotRun), b: (&RetrievalRun, &FewShotRun)) -> Outcome {
    let metrics_equal = a.0.metrics == b.0.metrics && a.1.metrics == b.1.metrics;
    let lines_equal = |x: &[StepMetrics], y: &[StepMetrics]| x.iter().map(StepMetrics::to_line).eq(y.iter().map(StepMetrics::to_line));
    let text_equal = lines_equal(&a.0.metrics, &b.0.metrics) && lines_equal(&a.1.metrics, &b.1.metrics);
    let reports_equal = a.0.report == b.0.report
        && a.0.report.to_text() == b.0.report.to_text()
        && a.1.untrained == b.1.untrained
        && a.1.trained == b.1.trained
        && a.1.meta == b.1.meta
        && a.1.meta_losses == b.1.meta_losses
        && a.1.meta.to_text() == b.1.meta.to_text();
    Outcome::new(
        metrics_equal && text_equal && reports_equal,
        format!(
            "repeated S2 and S3 runs: metrics bit-identical {}, metrics text identical {text_equal}, reports identical {reports_equal}",
            metrics_equal
        ),
    )
}
