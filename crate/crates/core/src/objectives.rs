//! Pretext objectives: learning-to-mine (nearest-neighbor contrastive, in
//! inter- and intra-modal form), learning-to-unify (batch matching) and
//! learning-to-reorganize (neighbor-consistent soft clustering).
//!
//! All losses are built on the tape so they can be differentiated and
//! certified. Embedding inputs are `[M × d]` matrices of unit rows, row `i`
//! of the vision matrix paired with row `i` of the language matrix.

use crate::autodiff::{Scalar, Tape, Tensor, Var};
use crate::encoders::FeatureSource;
use crate::error::{Error, Result};
use crate::queue::SupportQueue;

/// Floor inside `log⟨Φ(i), Φ(k)⟩`.
pub const ASSIGNMENT_LOG_FLOOR: f64 = 1e-12;
const DISTRIBUTION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    /// L2M only.
    S1,
    /// L2M + L2U.
    S2,
    /// L2M + L2U + L2R.
    S3,
}

impl Setting {
    pub fn switches(self) -> LossSwitches {
        match self {
            Setting::S1 => LossSwitches { l2m: true, l2u: false, l2r: false },
            Setting::S2 => LossSwitches { l2m: true, l2u: true, l2r: false },
            Setting::S3 => LossSwitches { l2m: true, l2u: true, l2r: true },
        }
    }

    /// The cross-modal attention encoder is part of S2 and S3.
    pub fn uses_cmae(self) -> bool {
        !matches!(self, Setting::S1)
    }
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "S1" => Ok(Setting::S1),
            "S2" => Ok(Setting::S2),
            "S3" => Ok(Setting::S3),
            other => Err(Error::Config(format!("unknown setting '{other}' (expected S1, S2 or S3)"))),
        }
    }
}

impl std::fmt::Display for Setting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Setting::S1 => "S1",
            Setting::S2 => "S2",
            Setting::S3 => "S3",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSwitches {
    pub l2m: bool,
    pub l2u: bool,
    pub l2r: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnifyTarget {
    /// Diagonal pairs are the positives.
    Hard,
    /// Row-softmax of the mean of the intra-modal similarity matrices.
    Soft,
}

impl std::str::FromStr for UnifyTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(Self::Hard),
            "soft" => Ok(Self::Soft),
            other => Err(Error::Config(format!("unknown l2u target '{other}'"))),
        }
    }
}

impl std::fmt::Display for UnifyTarget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Hard => "hard",
            Self::Soft => "soft",
        })
    }
}

/// Sign of the cluster-marginal regularizer `λ Σ_c Φ'_c log Φ'_c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntropySign {
    /// Add `+λ Σ Φ' log Φ'` (= −λ·entropy); minimizing it spreads the
    /// batch over clusters.
    MaximizeEntropy,
    /// Add `−λ Σ Φ' log Φ'`; minimizing it concentrates the batch.
    MinimizeEntropy,
}

impl std::str::FromStr for EntropySign {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "maximize" | "maximize_entropy" => Ok(Self::MaximizeEntropy),
            "minimize" | "minimize_entropy" => Ok(Self::MinimizeEntropy),
            other => Err(Error::Config(format!("unknown entropy sign '{other}'"))),
        }
    }
}

impl std::fmt::Display for EntropySign {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MaximizeEntropy => "maximize",
            Self::MinimizeEntropy => "minimize",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Contrastive temperature for L2M (paper value 0.07).
    pub temperature: f64,
    /// Use the mined neighbor, not the anchor, in the L2M denominators.
    pub nn_in_denominator: bool,
    pub l2m_input: FeatureSource,
    pub l2u_input: FeatureSource,
    pub l2u_target: UnifyTarget,
    /// Divides the L2U similarities; 1 leaves them unscaled.
    pub l2u_temperature: f64,
    pub lambda: f64,
    pub entropy_sign: EntropySign,
    pub k_mine: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            nn_in_denominator: false,
            l2m_input: FeatureSource::Projection,
            l2u_input: FeatureSource::Fused,
            l2u_target: UnifyTarget::Hard,
            l2u_temperature: 1.0,
            lambda: 2.0,
            entropy_sign: EntropySign::MaximizeEntropy,
            k_mine: 5,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.l2u_temperature > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.k_mine == 0 {
            return Err(Error::Config("k_mine must be positive".into()));
        }
        Ok(())
    }
}

fn batch_dims<S: Scalar>(tape: &Tape<S>, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    Ok((sa[0], sa[1]))
}

/// Nearest queue entry for every row of `anchors`, as a constant matrix.
/// With an empty queue the anchors themselves are returned (NN(x) = x) and
/// the flag is set.
pub fn neighbor_targets<S: Scalar>(tape: &mut Tape<S>, queue: &SupportQueue, anchors: Var) -> Result<(Var, bool)> {
    if queue.is_empty() {
        return Ok((anchors, true));
    }
    let values = tape.value(anchors).clone();
    let (m, d) = values.rows_cols();
    let mut data = Vec::with_capacity(m * d);
    for i in 0..m {
        let query: Vec<f32> = values.row(i).iter().map(|x| x.as_f64() as f32).collect();
        let nn = queue.nearest_neighbor(&query)?;
        data.extend(nn.vector.iter().map(|&x| S::of(x as f64)));
    }
    Ok((tape.constant(Tensor::new(vec![m, d], data)?), false))
}

/// `(1/M) Σ_i −log [exp(⟨n_i, p_i⟩/τ) / Σ_k exp(⟨a_i, p_k⟩/τ)]` where `a`
/// is the denominator anchor, `n` the numerator neighbor and `p` the
/// positives.
fn neighbor_contrast<S: Scalar>(tape: &mut Tape<S>, numerator: Var, denominator_anchor: Var, positives: Var, tau: S) -> Result<Var> {
    let sims = tape.matmul_nt(denominator_anchor, positives)?;
    let lse = tape.row_logsumexp(sims, tau)?;
    let num = tape.row_dot(numerator, positives)?;
    let num = tape.scale(num, S::one() / tau)?;
    let per_sample = tape.sub(lse, num)?;
    tape.mean(per_sample)
}

/// Inter-modal L2M: vision neighbors against paired text, and text
/// neighbors against paired images.
pub fn l2m_inter<S: Scalar>(
    tape: &mut Tape<S>,
    vision: Var,
    language: Var,
    nn_vision: Var,
    nn_language: Var,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    batch_dims(tape, vision, language, "l2m_inter")?;
    batch_dims(tape, vision, nn_vision, "l2m_inter")?;
    batch_dims(tape, language, nn_language, "l2m_inter")?;
    let tau = S::of(cfg.temperature);
    let (den_v, den_t) = if cfg.nn_in_denominator { (nn_vision, nn_language) } else { (vision, language) };
    let a = neighbor_contrast(tape, nn_vision, den_v, language, tau)?;
    let b = neighbor_contrast(tape, nn_language, den_t, vision, tau)?;
    tape.add(a, b)
}

/// Intra-modal L2M: each modality's neighbor against its own positives.
pub fn l2m_intra<S: Scalar>(
    tape: &mut Tape<S>,
    vision: Var,
    language: Var,
    nn_vision: Var,
    nn_language: Var,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    batch_dims(tape, vision, language, "l2m_intra")?;
    batch_dims(tape, vision, nn_vision, "l2m_intra")?;
    batch_dims(tape, language, nn_language, "l2m_intra")?;
    let tau = S::of(cfg.temperature);
    let (den_v, den_t) = if cfg.nn_in_denominator { (nn_vision, nn_language) } else { (vision, language) };
    let a = neighbor_contrast(tape, nn_vision, den_v, vision, tau)?;
    let b = neighbor_contrast(tape, nn_language, den_t, language, tau)?;
    tape.add(a, b)
}

/// L2U: `−(1/M) Σ_i [log P(v_i, t_i) + log P(t_i, v_i)]` with
/// `P(x_i, y_j) = softmax_j ⟨x_i, y_j⟩`, or its soft-target
/// cross-entropy generalization.
pub fn l2u_loss<S: Scalar>(tape: &mut Tape<S>, vision: Var, language: Var, target: UnifyTarget, temperature: f64) -> Result<Var> {
    let (m, _) = batch_dims(tape, vision, language, "l2u_loss")?;
    if m < 2 {
        return Err(Error::InvalidArgument(format!("l2u needs at least two pairs, got {m}")));
    }
    let t = S::of(temperature);
    let s_vt = tape.matmul_nt(vision, language)?;
    let s_tv = tape.matmul_nt(language, vision)?;
    let log_p_vt = tape.row_log_softmax(s_vt, t)?;
    let log_p_tv = tape.row_log_softmax(s_tv, t)?;
    let weights = match target {
        UnifyTarget::Hard => tape.constant(Tensor::identity(m)),
        UnifyTarget::Soft => {
            let vv = tape.matmul_nt(vision, vision)?;
            let tt = tape.matmul_nt(language, language)?;
            let avg = tape.add(vv, tt)?;
            let avg = tape.scale(avg, S::of(0.5))?;
            tape.row_softmax(avg, t)?
        }
    };
    let both = tape.add(log_p_vt, log_p_tv)?;
    let weighted = tape.mul(weights, both)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -S::one() / S::of(m as f64))
}

fn check_distributions<S: Scalar>(tape: &Tape<S>, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    let (m, _) = t.rows_cols();
    for i in 0..m {
        let row = t.row(i);
        let s: f64 = row.iter().map(|x| x.as_f64()).sum();
        if row.iter().any(|&x| x < S::zero() || !x.is_finite()) || (s - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::InvalidArgument(format!("{what} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// Components of the L2R loss for one modality.
#[derive(Debug, Clone, Copy)]
pub struct ReorganizeTerms {
    pub consistency: Var,
    pub entropy: Var,
    pub total: Var,
}

/// L2R for one modality.
///
/// `anchors` is `[M × C]`; `neighbors` is `[M·K × C]` with rows
/// `i·K .. (i+1)·K` holding the assignments of sample `i`'s mined
/// neighbors.
pub fn l2r_loss<S: Scalar>(
    tape: &mut Tape<S>,
    anchors: Var,
    neighbors: Var,
    k: usize,
    lambda: f64,
    sign: EntropySign,
) -> Result<ReorganizeTerms> {
    check_distributions(tape, anchors, "anchor assignment")?;
    check_distributions(tape, neighbors, "neighbor assignment")?;
    let (m, c) = tape.value(anchors).rows_cols();
    let (mk, c2) = tape.value(neighbors).rows_cols();
    if k == 0 || c != c2 || mk != m * k {
        return Err(Error::Shape {
            op: "l2r_loss",
            lhs: vec![m, c, k],
            rhs: vec![mk, c2],
        });
    }
    let repeat: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let expanded = tape.select_rows(anchors, &repeat)?;
    let agreement = tape.row_dot(expanded, neighbors)?;
    let logs = tape.log(agreement, S::of(ASSIGNMENT_LOG_FLOOR))?;
    let total_log = tape.sum(logs)?;
    let consistency = tape.scale(total_log, -S::one() / S::of(m as f64))?;

    let marginal = tape.mean_pool(anchors)?;
    let log_marginal = tape.log(marginal, S::of(ASSIGNMENT_LOG_FLOOR))?;
    let plogp = tape.mul(marginal, log_marginal)?;
    let plogp = tape.sum(plogp)?;
    let signed = match sign {
        EntropySign::MaximizeEntropy => lambda,
        EntropySign::MinimizeEntropy => -lambda,
    };
    let entropy = tape.scale(plogp, S::of(signed))?;
    let total = tape.add(consistency, entropy)?;
    Ok(ReorganizeTerms {
        consistency,
        entropy,
        total,
    })
}

/// Inputs to the clustering objective for both modalities.
#[derive(Debug, Clone, Copy)]
pub struct ReorganizeInputs {
    pub vision_anchors: Var,
    pub vision_neighbors: Var,
    pub language_anchors: Var,
    pub language_neighbors: Var,
    pub k: usize,
}

/// Everything the combined objective may consume.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    /// L2M embeddings and their neighbor targets.
    pub l2m_vision: Var,
    pub l2m_language: Var,
    pub nn_vision: Var,
    pub nn_language: Var,
    /// L2U embeddings.
    pub l2u_vision: Option<Var>,
    pub l2u_language: Option<Var>,
    pub reorganize: Option<ReorganizeInputs>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub l2m_inter: Option<Var>,
    pub l2m_intra: Option<Var>,
    pub l2u: Option<Var>,
    pub l2r_vision: Option<Var>,
    pub l2r_language: Option<Var>,
}

impl LossBreakdown {
    /// Term values in metrics order (disabled terms are 0).
    pub fn values<S: Scalar>(&self, tape: &Tape<S>) -> LossValues {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
        let l2m_inter = get(self.l2m_inter);
        let l2m_intra = get(self.l2m_intra);
        let l2u = get(self.l2u);
        let l2r_vision = get(self.l2r_vision);
        let l2r_language = get(self.l2r_language);
        LossValues {
            total: l2m_inter + l2m_intra + l2u + l2r_vision + l2r_language,
            l2m_inter,
            l2m_intra,
            l2u,
            l2r_vision,
            l2r_language,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValues {
    pub total: f64,
    pub l2m_inter: f64,
    pub l2m_intra: f64,
    pub l2u: f64,
    pub l2r_vision: f64,
    pub l2r_language: f64,
}

/// Sum of the enabled objectives.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, cfg: &ObjectiveConfig, switches: LossSwitches, inputs: &LossInputs) -> Result<LossBreakdown> {
    if !(switches.l2m || switches.l2u || switches.l2r) {
        return Err(Error::Config("no objective enabled".into()));
    }
    let mut terms = Vec::new();
    let mut out = LossBreakdown {
        total: inputs.l2m_vision,
        l2m_inter: None,
        l2m_intra: None,
        l2u: None,
        l2r_vision: None,
        l2r_language: None,
    };
    if switches.l2m {
        let inter = l2m_inter(tape, inputs.l2m_vision, inputs.l2m_language, inputs.nn_vision, inputs.nn_language, cfg)?;
        let intra = l2m_intra(tape, inputs.l2m_vision, inputs.l2m_language, inputs.nn_vision, inputs.nn_language, cfg)?;
        out.l2m_inter = Some(inter);
        out.l2m_intra = Some(intra);
        terms.extend([inter, intra]);
    }
    if switches.l2u {
        let (Some(v), Some(t)) = (inputs.l2u_vision, inputs.l2u_language) else {
            return Err(Error::Config("l2u enabled without unification embeddings".into()));
        };
        let u = l2u_loss(tape, v, t, cfg.l2u_target, cfg.l2u_temperature)?;
        out.l2u = Some(u);
        terms.push(u);
    }
    if switches.l2r {
        let r = inputs
            .reorganize
            .ok_or_else(|| Error::Staging("l2r requested before neighbor tables were mined".into()))?;
        let rv = l2r_loss(tape, r.vision_anchors, r.vision_neighbors, r.k, cfg.lambda, cfg.entropy_sign)?;
        let rt = l2r_loss(tape, r.language_anchors, r.language_neighbors, r.k, cfg.lambda, cfg.entropy_sign)?;
        out.l2r_vision = Some(rv.total);
        out.l2r_language = Some(rt.total);
        terms.extend([rv.total, rt.total]);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    out.total = total;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn orthonormal2(tape: &mut Tape<f64>) -> Var {
        tape.param(Tensor::identity(2))
    }

    fn unit_cfg() -> ObjectiveConfig {
        ObjectiveConfig {
            temperature: 1.0,
            ..ObjectiveConfig::default()
        }
    }

    #[test]
    fn inter_closed_form_in_fallback_mode() {
        let mut g = Tape::new();
        let v = orthonormal2(&mut g);
        let t = orthonormal2(&mut g);
        let loss = l2m_inter(&mut g, v, t, v, t, &unit_cfg()).unwrap();
        let e = std::f64::consts::E;
        let expected = 2.0 * -(e / (e + 1.0)).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_pair_l2m_is_zero() {
        let mut g = Tape::<f64>::new();
        let v = g.param(Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap());
        let inter = l2m_inter(&mut g, v, v, v, v, &unit_cfg()).unwrap();
        let intra = l2m_intra(&mut g, v, v, v, v, &unit_cfg()).unwrap();
        assert!(g.value(inter).item().abs() < 1e-15);
        assert!(g.value(intra).item().abs() < 1e-15);
    }

    #[test]
    fn intra_closed_form_in_fallback_mode() {
        let mut g = Tape::new();
        let v = orthonormal2(&mut g);
        let t = orthonormal2(&mut g);
        let loss = l2m_intra(&mut g, v, t, v, t, &unit_cfg()).unwrap();
        let e = std::f64::consts::E;
        let per_term = -(e / (e + 1.0)).ln();
        assert!((g.value(loss).item() - 2.0 * per_term).abs() < 1e-12);
    }

    #[test]
    fn l2u_hard_closed_form() {
        let mut g = Tape::new();
        let v = orthonormal2(&mut g);
        let t = orthonormal2(&mut g);
        let loss = l2u_loss(&mut g, v, t, UnifyTarget::Hard, 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((g.value(loss).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn l2u_refuses_single_pair() {
        let mut g = Tape::new();
        let v = g.param(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(l2u_loss(&mut g, v, v, UnifyTarget::Hard, 1.0).is_err());
    }

    #[test]
    fn l2u_decreases_with_diagonal_margin() {
        // diagonal similarity 1, off-diagonal similarity s; loss falls as s drops
        let loss_at = |s: f64, m: usize| {
            let mut g = Tape::<f64>::new();
            let mut rows = vec![vec![s; m]; m];
            for (i, r) in rows.iter_mut().enumerate() {
                r[i] = 1.0;
            }
            // feed the similarity matrix directly: vision = sims, language = I
            let v = g.param(Tensor::from_rows(&rows).unwrap());
            let t = g.param(Tensor::identity(m));
            let l = l2u_loss(&mut g, v, t, UnifyTarget::Hard, 1.0).unwrap();
            g.value(l).item()
        };
        let mut prev = f64::INFINITY;
        for s in [0.5, 0.0, -0.5, -1.0] {
            let l = loss_at(s, 64);
            assert!(l < prev);
            prev = l;
        }
        // scaled-up margin drives the loss to zero
        let mut g = Tape::<f64>::new();
        let v = g.param(Tensor::identity(8));
        let l = l2u_loss(&mut g, v, v, UnifyTarget::Hard, 0.01).unwrap();
        assert!(g.value(l).item() < 1e-10);
    }

    #[test]
    fn l2r_closed_forms() {
        let mut g = Tape::new();
        let c = 4;
        let uniform = g.param(Tensor::full(&[3, c], 0.25));
        let neighbors = g.param(Tensor::full(&[6, c], 0.25));
        let r = l2r_loss(&mut g, uniform, neighbors, 2, 2.0, EntropySign::MaximizeEntropy).unwrap();
        let magnitude = 2.0 * (c as f64).ln();
        assert!((g.value(r.entropy).item() + magnitude).abs() < 1e-12);
        let r2 = l2r_loss(&mut g, uniform, neighbors, 2, 2.0, EntropySign::MinimizeEntropy).unwrap();
        assert!((g.value(r2.entropy).item() - magnitude).abs() < 1e-12);

        let onehot = g.param(Tensor::from_rows(&vec![vec![0.0, 1.0, 0.0, 0.0]; 2]).unwrap());
        let nb = g.param(Tensor::from_rows(&vec![vec![0.0, 1.0, 0.0, 0.0]; 4]).unwrap());
        let r = l2r_loss(&mut g, onehot, nb, 2, 1.0, EntropySign::MaximizeEntropy).unwrap();
        assert_eq!(g.value(r.consistency).item(), 0.0);
    }

    #[test]
    fn l2r_rejects_invalid_rows() {
        let mut g = Tape::new();
        let bad = g.param(Tensor::from_rows(&[vec![0.5, 0.6]]).unwrap());
        let ok = g.param(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        assert!(l2r_loss(&mut g, bad, ok, 1, 1.0, EntropySign::MaximizeEntropy).is_err());
    }

    #[test]
    fn total_loss_staging_and_sums() {
        let mut g = Tape::new();
        let v = orthonormal2(&mut g);
        let t = orthonormal2(&mut g);
        let cfg = unit_cfg();
        let inputs = LossInputs {
            l2m_vision: v,
            l2m_language: t,
            nn_vision: v,
            nn_language: t,
            l2u_vision: Some(v),
            l2u_language: Some(t),
            reorganize: None,
        };
        let s1 = total_loss(&mut g, &cfg, Setting::S1.switches(), &inputs).unwrap();
        let vals = s1.values(&g);
        assert_eq!(g.value(s1.total).item(), vals.l2m_inter + vals.l2m_intra);
        assert!(matches!(
            total_loss(&mut g, &cfg, Setting::S3.switches(), &inputs),
            Err(Error::Staging(_))
        ));
        let none = LossSwitches { l2m: false, l2u: false, l2r: false };
        assert!(total_loss(&mut g, &cfg, none, &inputs).is_err());
    }
}
