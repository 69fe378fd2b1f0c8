//! Finite-difference certification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub scale_floor: f64,
    /// Check at most this many coordinates per leaf (sampled with a fixed
    /// seed). `None` checks all.
    pub max_coords_per_leaf: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-5,
            scale_floor: 1e-4,
            max_coords_per_leaf: None,
        }
    }
}

impl GradcheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Max relative error per leaf, in leaf order.
    pub per_leaf: Vec<f64>,
    pub coordinates_checked: usize,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_leaf.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.per_leaf.iter().all(|&e| e <= self.tolerance)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            Ok(self)
        } else {
            Err(Error::GradcheckFailed {
                max_error: self.max_error(),
                tolerance: self.tolerance,
            })
        }
    }
}

fn evaluate<F>(f: &F, leaves: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_output(&tape, out)
}

fn scalar_output(tape: &Tape<f64>, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compare the tape's analytic gradient of `f` against central finite
/// differences, leaf by leaf. `f` is rebuilt from scratch for every
/// perturbed evaluation.
pub fn gradcheck<F>(f: F, leaves: &[Tensor<f64>], options: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_output(&tape, out)?;
    tape.backward(out)?;

    let mut rng = SplitMix64::new(0x6772_6164);
    let mut per_leaf = Vec::with_capacity(leaves.len());
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = tape.grad(*var).expect("leaf gradient").clone();
        let n = leaves[li].len();
        let coords: Vec<usize> = match options.max_coords_per_leaf {
            Some(cap) if cap < n => rng.sample_indices(n, cap),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for c in coords {
            let original = work[li].data()[c];
            work[li].data_mut()[c] = original + options.step;
            let plus = evaluate(&f, &work)?;
            work[li].data_mut()[c] = original - options.step;
            let minus = evaluate(&f, &work)?;
            work[li].data_mut()[c] = original;
            let numeric = (plus - minus) / (2.0 * options.step);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(options.scale_floor);
            let err = (a - numeric).abs() / denom;
            if !err.is_finite() {
                return Err(Error::NonFinite("gradcheck"));
            }
            worst = worst.max(err);
            checked += 1;
        }
        per_leaf.push(worst);
    }
    Ok(GradcheckReport {
        per_leaf,
        coordinates_checked: checked,
        tolerance: options.tolerance,
    })
}
