//! Gradient certification of the pretext objectives, individually and
//! composed through the full model.

use crate::autodiff::{gradcheck, GradcheckOptions, GradcheckReport, Tape, Tensor, Var};
use crate::datagen::{generate, GeneratorConfig};
use crate::document::{DocumentPair, Modality};
use crate::encoders::{GlobalDocModel, ModelConfig};
use crate::error::{Error, Result};
use crate::objectives::{
    l2m_inter, l2m_intra, l2r_loss, l2u_loss, total_loss, LossInputs, ObjectiveConfig, ReorganizeInputs, Setting,
    UnifyTarget,
};
use crate::queue::SupportQueue;
use crate::rng::SplitMix64;

/// Relative tolerance used for certification.
pub const CERTIFY_TOLERANCE: f64 = 1e-4;
const BATCH: usize = 4;
const QUEUE: usize = 32;
const CLUSTERS: usize = 3;
const NEIGHBORS: usize = 2;

#[derive(Debug, Clone)]
pub struct Certificate {
    pub name: &'static str,
    pub report: GradcheckReport,
}

impl Certificate {
    pub fn line(&self) -> String {
        format!(
            "{:<14} {} max_rel_err={:.3e} coords={}",
            self.name,
            if self.report.passed() { "PASS" } else { "FAIL" },
            self.report.max_error(),
            self.report.coordinates_checked
        )
    }
}

fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.normal()).collect()).expect("positive dims")
}

fn unit_rows(rng: &mut SplitMix64, rows: usize, cols: usize) -> Vec<Vec<f32>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f32> = (0..cols).map(|_| rng.normal() as f32).collect();
            crate::document::normalize(&v).expect("non-degenerate draw")
        })
        .collect()
}

/// Nearest queue entries of the row-normalized `z`, as a fixed `f64` matrix.
fn fixed_neighbors(queue: &SupportQueue, z: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(z.clone());
    let n = tape.l2_normalize(v)?;
    let (nn, _) = crate::objectives::neighbor_targets(&mut tape, queue, n)?;
    Ok(tape.value(nn).clone())
}

/// Loss-level certificates on seeded `M = 4` fixtures of width `dim`.
pub fn certify_losses(dim: usize, seed: u64, opts: &GradcheckOptions) -> Result<Vec<Certificate>> {
    let mut rng = SplitMix64::derive(seed, 0x6365_7274);
    let zv = random_matrix(&mut rng, BATCH, dim);
    let zt = random_matrix(&mut rng, BATCH, dim);
    let mut qv = SupportQueue::new(QUEUE, Modality::Vision)?;
    let mut qt = SupportQueue::new(QUEUE, Modality::Language)?;
    qv.enqueue_batch(&unit_rows(&mut rng, QUEUE, dim), None)?;
    qt.enqueue_batch(&unit_rows(&mut rng, QUEUE, dim), None)?;
    let nv = fixed_neighbors(&qv, &zv)?;
    let nt = fixed_neighbors(&qt, &zt)?;
    let cfg = ObjectiveConfig::default();
    let leaves = [zv, zt];

    type LossFn<'a> = Box<dyn Fn(&mut Tape<f64>, Var, Var, Var, Var) -> Result<Var> + 'a>;
    let cases: Vec<(&'static str, LossFn)> = vec![
        ("l2m_inter", Box::new(|t, v, u, a, b| l2m_inter(t, v, u, a, b, &cfg))),
        ("l2m_intra", Box::new(|t, v, u, a, b| l2m_intra(t, v, u, a, b, &cfg))),
        ("l2u_hard", Box::new(|t, v, u, _, _| l2u_loss(t, v, u, UnifyTarget::Hard, 1.0))),
        ("l2u_soft", Box::new(|t, v, u, _, _| l2u_loss(t, v, u, UnifyTarget::Soft, 1.0))),
    ];
    let mut out = Vec::new();
    for (name, loss) in cases {
        let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
            let v = tape.l2_normalize(vars[0])?;
            let u = tape.l2_normalize(vars[1])?;
            let a = tape.constant(nv.clone());
            let b = tape.constant(nt.clone());
            loss(tape, v, u, a, b)
        };
        out.push(Certificate {
            name,
            report: gradcheck(f, &leaves, opts)?,
        });
    }

    let anchors = random_matrix(&mut rng, BATCH, CLUSTERS);
    let neighbors = random_matrix(&mut rng, BATCH * NEIGHBORS, CLUSTERS);
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let a = tape.row_softmax(vars[0], 1.0)?;
        let n = tape.row_softmax(vars[1], 1.0)?;
        Ok(l2r_loss(tape, a, n, NEIGHBORS, cfg.lambda, cfg.entropy_sign)?.total)
    };
    out.push(Certificate {
        name: "l2r",
        report: gradcheck(f, &[anchors, neighbors], opts)?,
    });
    Ok(out)
}

/// Documents shaped for `model`'s tiny geometry.
fn tiny_documents(model: &ModelConfig, seed: u64) -> Result<Vec<DocumentPair>> {
    let gen = GeneratorConfig {
        seed,
        num_categories: 2,
        per_class: BATCH,
        image_size: model.vision.image_height,
        channels: model.vision.channels,
        vocab_size: model.language.vocab_size,
        min_body_len: 2,
        max_body_len: model.language.max_len.saturating_sub(2).max(2),
        test_fraction: 0.0,
        ..GeneratorConfig::default()
    };
    let mut docs = generate(&gen)?.train;
    docs.truncate(BATCH);
    Ok(docs)
}

/// Certificate of the combined objective of `setting`, differentiated with
/// respect to every model parameter through the encoders, CMAE and heads.
/// Support queues are empty (NN(x) = x) so the objective is smooth.
pub fn certify_model(setting: Setting, dim: usize, seed: u64, opts: &GradcheckOptions) -> Result<Certificate> {
    if dim == 0 || dim > 16 {
        return Err(Error::Config(format!("certification dim must lie in 1..=16, got {dim}")));
    }
    let config = ModelConfig {
        init_seed: seed,
        num_clusters: CLUSTERS,
        ..ModelConfig::tiny(dim)
    };
    let model = GlobalDocModel::<f64>::new(config.clone())?;
    let docs = tiny_documents(&config, seed)?;
    let pairs: Vec<&DocumentPair> = docs.iter().collect();
    let mut rng = SplitMix64::derive(seed, 0x6e62_7273);
    let feat = config.cluster_input_dim();
    let nbr_features = |rng: &mut SplitMix64| -> Tensor<f64> {
        let rows: Vec<Vec<f64>> = unit_rows(rng, BATCH * NEIGHBORS, feat)
            .into_iter()
            .map(|r| r.into_iter().map(f64::from).collect())
            .collect();
        Tensor::from_rows(&rows).expect("rectangular")
    };
    let (nbr_v, nbr_t) = (nbr_features(&mut rng), nbr_features(&mut rng));
    let empty_v = SupportQueue::new(1, Modality::Vision)?;
    let empty_t = SupportQueue::new(1, Modality::Language)?;
    let obj = ObjectiveConfig::default();
    let leaves: Vec<Tensor<f64>> = model.params().ids().map(|id| model.params().get(id).clone()).collect();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let b = model.bind_vars(tape, vars)?;
        let out = model.forward_batch(tape, &b, &pairs, setting.uses_cmae())?;
        let (nn_v, _) = crate::objectives::neighbor_targets(tape, &empty_v, out.projected_vision)?;
        let (nn_t, _) = crate::objectives::neighbor_targets(tape, &empty_t, out.projected_language)?;
        let reorganize = if setting == Setting::S3 {
            let (fv, ft) = match config.cluster_input {
                crate::encoders::FeatureSource::Fused => (out.fused_vision.unwrap(), out.fused_language.unwrap()),
                crate::encoders::FeatureSource::Projection => (out.projected_vision, out.projected_language),
            };
            let nv = tape.constant(nbr_v.clone());
            let nt = tape.constant(nbr_t.clone());
            Some(ReorganizeInputs {
                vision_anchors: model.cluster_assignments(tape, &b, fv, Modality::Vision)?,
                vision_neighbors: model.cluster_assignments(tape, &b, nv, Modality::Vision)?,
                language_anchors: model.cluster_assignments(tape, &b, ft, Modality::Language)?,
                language_neighbors: model.cluster_assignments(tape, &b, nt, Modality::Language)?,
                k: NEIGHBORS,
            })
        } else {
            None
        };
        let inputs = LossInputs {
            l2m_vision: out.projected_vision,
            l2m_language: out.projected_language,
            nn_vision: nn_v,
            nn_language: nn_t,
            l2u_vision: out.fused_vision,
            l2u_language: out.fused_language,
            reorganize,
        };
        Ok(total_loss(tape, &obj, setting.switches(), &inputs)?.total)
    };
    Ok(Certificate {
        name: match setting {
            Setting::S1 => "total_S1",
            Setting::S2 => "total_S2",
            Setting::S3 => "total_S3",
        },
        report: gradcheck(f, &leaves, opts)?,
    })
}

/// Every loss certificate plus the model-level one for `setting`.
pub fn certify_all(setting: Setting, dim: usize, seed: u64, max_coords_per_leaf: Option<usize>) -> Result<Vec<Certificate>> {
    let opts = GradcheckOptions {
        max_coords_per_leaf,
        ..GradcheckOptions::with_tolerance(CERTIFY_TOLERANCE)
    };
    let mut out = certify_losses(dim, seed, &opts)?;
    out.push(certify_model(setting, dim, seed, &opts)?);
    Ok(out)
}
