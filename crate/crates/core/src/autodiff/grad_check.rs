use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(input index, flat element index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
    /// Set when a gradient came out NaN/Inf.
    pub non_finite_at: Option<(usize, usize)>,
    /// Coordinates excluded because the step crossed a non-differentiable
    /// point (ReLU kink, top-K switch): the one-sided differences disagree
    /// and a 100x smaller step agrees with the analytic gradient.
    pub kinks: usize,
}

/// Denominator floor for the relative error so that near-zero gradients are
/// compared absolutely.
const REL_FLOOR: f64 = 1e-3;

/// Check every element of every input. See [`grad_check_sampled`].
pub fn grad_check(
    inputs: &[Tensor<f64>],
    tol: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check_sampled(inputs, tol, None, 0, f)
}

/// Compare the tape gradient of the scalar `f(inputs)` against central
/// differences with step `1e-5 · max(1, |x|)`. With `per_input = Some(n)`,
/// at most `n` randomly chosen coordinates of each input are perturbed.
pub fn grad_check_sampled(
    inputs: &[Tensor<f64>],
    tol: f64,
    per_input: Option<usize>,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf_owned(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf_owned(x.clone())).collect();
    let y = f(&mut tape, &vars)?;
    let grads = tape.backward(y);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        passed: true,
        non_finite_at: None,
        kinks: 0,
    };
    let f0 = eval(inputs)?;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let n = inputs[i].len();
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let coords: Vec<usize> = match per_input {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = inputs[i].data()[j];
            let h = 1e-5 * x0.abs().max(1.0);
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[j];
            report.checked += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.passed = false;
                report.non_finite_at.get_or_insert((i, j));
                continue;
            }
            let rel_err = |n: f64| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR);
            let mut rel = rel_err(numeric);
            if rel > tol {
                let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
                let one_sided_gap = (fwd - bwd).abs() / fwd.abs().max(bwd.abs()).max(REL_FLOOR);
                let small = h / 100.0;
                work[i].data_mut()[j] = x0 + small;
                let sp = eval(&work)?;
                work[i].data_mut()[j] = x0 - small;
                let sm = eval(&work)?;
                work[i].data_mut()[j] = x0;
                if one_sided_gap > tol && rel_err((sp - sm) / (2.0 * small)) <= tol {
                    report.kinks += 1;
                    rel = 0.0;
                }
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j));
            }
        }
    }
    if report.max_rel_err > tol {
        report.passed = false;
    }
    Ok(report)
}
