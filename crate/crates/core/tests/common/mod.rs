//! Shared fixtures and brute-force oracles. The oracles are written with
//! plain loops over `f64` and deliberately avoid the library's tape and
//! search code paths.

#![allow(dead_code)]

pub mod criteria;

use globaldoc::datagen::GeneratorConfig;
use globaldoc::encoders::ModelConfig;
use globaldoc::evaluation::RetrievalIndex;
use globaldoc::queue::SupportQueue;
use globaldoc::rng::SplitMix64;
use globaldoc::Modality;

pub const FLOOR: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit_rows(rng: &mut SplitMix64, m: usize, d: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Rows that are probability distributions, away from zero.
pub fn distribution_rows(rng: &mut SplitMix64, m: usize, c: usize) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            let e: Vec<f64> = (0..c).map(|_| (1.5 * rng.normal()).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|x| x / z).collect()
        })
        .collect()
}

pub fn relative_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(FLOOR)
}

fn log_softmax_entry(row: &[f64], j: usize) -> f64 {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    row[j] - z.ln()
}

/// `(1/M) Σ_i [ln Σ_k exp(⟨a_i, p_k⟩/τ) − ⟨n_i, p_i⟩/τ]`.
fn contrast(numerator: &[Vec<f64>], anchor: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> f64 {
    let m = anchor.len();
    let mut total = 0.0;
    for i in 0..m {
        let mut z = 0.0;
        for p in positives {
            z += (dot(&anchor[i], p) / tau).exp();
        }
        total += z.ln() - dot(&numerator[i], &positives[i]) / tau;
    }
    total / m as f64
}

pub fn l2m_inter(v: &[Vec<f64>], t: &[Vec<f64>], nv: &[Vec<f64>], nt: &[Vec<f64>], tau: f64, nn_den: bool) -> f64 {
    let (dv, dt) = if nn_den { (nv, nt) } else { (v, t) };
    contrast(nv, dv, t, tau) + contrast(nt, dt, v, tau)
}

pub fn l2m_intra(v: &[Vec<f64>], t: &[Vec<f64>], nv: &[Vec<f64>], nt: &[Vec<f64>], tau: f64, nn_den: bool) -> f64 {
    let (dv, dt) = if nn_den { (nv, nt) } else { (v, t) };
    contrast(nv, dv, v, tau) + contrast(nt, dt, t, tau)
}

pub fn l2u(v: &[Vec<f64>], t: &[Vec<f64>], soft: bool, temperature: f64) -> f64 {
    let m = v.len();
    let sim = |a: &[Vec<f64>], b: &[Vec<f64>], i: usize| -> Vec<f64> { b.iter().map(|y| dot(&a[i], y) / temperature).collect() };
    let mut total = 0.0;
    for i in 0..m {
        let vt = sim(v, t, i);
        let tv = sim(t, v, i);
        let weights: Vec<f64> = if soft {
            let logits: Vec<f64> = (0..m).map(|j| 0.5 * (dot(&v[i], &v[j]) + dot(&t[i], &t[j])) / temperature).collect();
            let z: f64 = logits.iter().map(|x| x.exp()).sum();
            logits.iter().map(|x| x.exp() / z).collect()
        } else {
            (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
        };
        for j in 0..m {
            total += weights[j] * (log_softmax_entry(&vt, j) + log_softmax_entry(&tv, j));
        }
    }
    -total / m as f64
}

/// `(consistency, Σ_c p̄_c ln p̄_c)`.
pub fn l2r_parts(anchors: &[Vec<f64>], neighbors: &[Vec<f64>], k: usize) -> (f64, f64) {
    let m = anchors.len();
    let c = anchors[0].len();
    let mut consistency = 0.0;
    for i in 0..m {
        for j in 0..k {
            consistency -= dot(&anchors[i], &neighbors[i * k + j]).max(FLOOR).ln();
        }
    }
    let mut plogp = 0.0;
    for col in 0..c {
        let p = anchors.iter().map(|r| r[col]).sum::<f64>() / m as f64;
        plogp += p * p.max(FLOOR).ln();
    }
    (consistency / m as f64, plogp)
}

/// Exhaustive nearest queue entry: smallest squared distance, oldest on
/// ties. Returns its sequence number.
pub fn nearest_sequence(queue: &SupportQueue, query: &[f32]) -> u64 {
    let mut best: Option<(f64, u64)> = None;
    for e in queue.entries() {
        let d: f64 = e.vector.iter().zip(query).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        let better = match best {
            None => true,
            Some((bd, bs)) => d < bd || (d == bd && e.sequence < bs),
        };
        if better {
            best = Some((d, e.sequence));
        }
    }
    best.expect("non-empty queue").1
}

/// Exhaustive ranking: repeatedly pick the remaining candidate with the
/// largest inner product, smallest doc_id on ties.
pub fn ranking(index: &RetrievalIndex, query: &[f32], top_k: usize, exclude: Option<&str>) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..index.len()).filter(|&i| Some(index.doc_ids[i].as_str()) != exclude).collect();
    let score = |i: usize| -> f64 { index.vectors[i].iter().zip(query).map(|(&a, &b)| a as f64 * b as f64).sum() };
    let mut out = Vec::new();
    while out.len() < top_k && !remaining.is_empty() {
        let mut best = 0;
        for pos in 1..remaining.len() {
            let (a, b) = (remaining[pos], remaining[best]);
            if score(a) > score(b) || (score(a) == score(b) && index.doc_ids[a] < index.doc_ids[b]) {
                best = pos;
            }
        }
        out.push(remaining.remove(best));
    }
    out
}

/// Vectors drawn from a small palette so that exact ties are common.
pub fn palette_unit_vectors(rng: &mut SplitMix64, n: usize, d: usize, palette: usize) -> Vec<Vec<f32>> {
    let colors: Vec<Vec<f32>> = unit_rows(rng, palette, d)
        .into_iter()
        .map(|r| globaldoc::document::normalize(&r.iter().map(|&x| x as f32).collect::<Vec<_>>()).unwrap())
        .collect();
    (0..n).map(|_| colors[rng.below(palette)].clone()).collect()
}

pub fn random_index(rng: &mut SplitMix64, n: usize, d: usize, classes: u32) -> RetrievalIndex {
    let vectors = palette_unit_vectors(rng, n, d, (n / 2).max(2));
    let mut ids: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut ids);
    RetrievalIndex {
        modality: Modality::Vision,
        labels: (0..n).map(|_| Some(rng.below(classes as usize) as u32)).collect(),
        doc_ids: ids.into_iter().map(|i| format!("doc-{i:04}")).collect(),
        vectors,
        model_digest: [7; 32],
    }
}

/// Small model geometry used by the end-to-end suites.
pub fn e2e_model(clusters: usize) -> ModelConfig {
    let mut m = ModelConfig::tiny(32);
    m.vision.image_height = 16;
    m.vision.image_width = 16;
    m.vision.ff_dim = 64;
    m.language.vocab_size = 32;
    m.language.max_len = 16;
    m.language.ff_dim = 64;
    m.cmae.ff_dim = 64;
    m.num_clusters = clusters;
    m
}

pub fn e2e_corpus(classes: usize, per_class: usize) -> GeneratorConfig {
    GeneratorConfig {
        num_categories: classes,
        per_class,
        image_size: 16,
        vocab_size: 32,
        min_body_len: 6,
        max_body_len: 12,
        ..GeneratorConfig::default()
    }
}
