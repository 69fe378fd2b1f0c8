//! Every tape primitive against central finite differences, 20 seeds each.

use globaldoc::autodiff::{gradcheck, GradcheckOptions, Tape, Tensor, Var};
use globaldoc::rng::SplitMix64;
use globaldoc::Result;

const SEEDS: u64 = 20;

fn random(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn positive(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    random(rng, shape).map(|x| 0.5 + x.abs())
}

/// Reduce `out` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn weighted(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = SplitMix64::derive(seed, 0x77);
    let w = random(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn check<F>(name: &str, leaves: impl Fn(&mut SplitMix64) -> Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = SplitMix64::derive(seed, 0x6763);
        let inputs = leaves(&mut rng);
        let report = gradcheck(|t: &mut Tape<f64>, v: &[Var]| {
            let out = f(t, v)?;
            weighted(t, out, seed)
        }, &inputs, &GradcheckOptions::with_tolerance(1e-6))
        .unwrap();
        assert!(report.passed(), "{name} seed {seed}: max rel err {:e}", report.max_error());
    }
}

#[test]
fn linear_algebra() {
    check("matmul", |r| vec![random(r, &[3, 4]), random(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", |r| vec![random(r, &[3, 4]), random(r, &[5, 4])], |t, v| t.matmul_nt(v[0], v[1]));
    check("transpose", |r| vec![random(r, &[3, 4])], |t, v| t.transpose(v[0]));
    check("row_dot", |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |t, v| t.row_dot(v[0], v[1]));
    check("reshape", |r| vec![random(r, &[3, 4])], |t, v| t.reshape(v[0], &[2, 6]));
}

#[test]
fn elementwise() {
    check("add", |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |t, v| t.add(v[0], v[1]));
    check("sub", |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |t, v| t.sub(v[0], v[1]));
    check("mul", |r| vec![random(r, &[3, 4]), random(r, &[3, 4])], |t, v| t.mul(v[0], v[1]));
    check("add_row", |r| vec![random(r, &[3, 4]), random(r, &[4])], |t, v| t.add_row(v[0], v[1]));
    check("add_col", |r| vec![random(r, &[3, 4]), random(r, &[3])], |t, v| t.add_col(v[0], v[1]));
    check("scale", |r| vec![random(r, &[3, 4])], |t, v| t.scale(v[0], -1.7));
    check("shift", |r| vec![random(r, &[3, 4])], |t, v| t.shift(v[0], 0.3));
    check("neg", |r| vec![random(r, &[3, 4])], |t, v| t.neg(v[0]));
    check("gelu", |r| vec![random(r, &[3, 4])], |t, v| t.gelu(v[0]));
    check("exp", |r| vec![random(r, &[3, 4])], |t, v| t.exp(v[0]));
    check("log", |r| vec![positive(r, &[3, 4])], |t, v| t.log(v[0], 1e-12));
    check("sqrt", |r| vec![positive(r, &[3, 4])], |t, v| t.sqrt(v[0]));
    check("clamp_min", |r| vec![positive(r, &[3, 4])], |t, v| t.clamp_min(v[0], 0.1));
}

#[test]
fn reductions_and_normalization() {
    check("row_softmax", |r| vec![random(r, &[3, 5])], |t, v| t.row_softmax(v[0], 0.7));
    check("row_log_softmax", |r| vec![random(r, &[3, 5])], |t, v| t.row_log_softmax(v[0], 0.07));
    check("row_logsumexp", |r| vec![random(r, &[3, 5])], |t, v| t.row_logsumexp(v[0], 0.5));
    check("l2_normalize", |r| vec![random(r, &[3, 5])], |t, v| t.l2_normalize(v[0]));
    check("layer_norm", |r| vec![random(r, &[3, 5]), random(r, &[5]), random(r, &[5])], |t, v| t.layer_norm(v[0], v[1], v[2]));
    check("mean_pool", |r| vec![random(r, &[4, 3])], |t, v| t.mean_pool(v[0]));
    check("row_sum", |r| vec![random(r, &[4, 3])], |t, v| t.row_sum(v[0]));
    check("mean", |r| vec![random(r, &[4, 3])], |t, v| {
        let m = t.mean(v[0])?;
        t.reshape(m, &[1])
    });
    check("cross_entropy", |r| vec![random(r, &[3, 4])], |t, v| {
        let p = t.row_softmax(v[0], 1.0)?;
        let target = t.constant(Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 0.0, 0.0, 0.0], vec![0.25; 4]]).unwrap());
        let ce = t.cross_entropy(p, target)?;
        t.reshape(ce, &[1])
    });
}

#[test]
fn indexing() {
    check("embedding_lookup", |r| vec![random(r, &[6, 3])], |t, v| t.embedding_lookup(v[0], &[0, 5, 2, 5]));
    check("select_rows", |r| vec![random(r, &[5, 3])], |t, v| t.select_rows(v[0], &[4, 0, 0, 2]));
    check("concat_rows", |r| vec![random(r, &[2, 3]), random(r, &[3, 3])], |t, v| t.concat_rows(&[v[0], v[1], v[0]]));
}
