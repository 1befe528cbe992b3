//! The joint objective `L = λ·CTC + (1 − λ)·(α·AED_r2l + (1 − α)·AED_l2r)`
//! and nothing else.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{decoder_target, Direction, ForwardOutput};
use crate::tensor::{Scalar, Tensor};

pub const LABEL_SMOOTHING: f64 = 0.1;

pub const LABEL_CTC: &str = "l_ctc";
pub const LABEL_L2R: &str = "l_aed_l2r";
pub const LABEL_R2L: &str = "l_aed_r2l";
pub const LABEL_TOTAL: &str = "l_total";

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn reverse_labels(labels: &[usize]) -> Vec<usize> {
    labels.iter().rev().copied().collect()
}

/// Frames needed to emit `labels`: one per label plus a blank between
/// each pair of equal neighbours.
pub fn min_ctc_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood by forward-backward in log space. Returns
/// the loss and its gradient with respect to `log_probs` (`[T', V]`,
/// already log-softmaxed, blank at `blank`). Computed in 64-bit.
pub fn ctc_forward_backward<F: Scalar>(
    log_probs: &Tensor<F>,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Tensor<F>)> {
    if log_probs.shape().len() != 2 {
        return Err(Error::shape(format!("CTC needs [T, V] log-probs, got {:?}", log_probs.shape())));
    }
    let (frames, vocab) = (log_probs.rows(), log_probs.cols());
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, vocab });
    }
    if labels.contains(&blank) {
        return Err(Error::config("CTC labels must not contain the blank id"));
    }
    let needed = min_ctc_frames(labels);
    if frames < needed.max(1) {
        return Err(Error::NoValidAlignment {
            labels: labels.len(),
            repeats: needed - labels.len(),
            needed,
            frames,
        });
    }

    let lp = |t: usize, k: usize| log_probs.row(t)[k].to_f64().unwrap();
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; s_len]; frames];
    alpha[0][0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[0][1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + lp(t, ext[s]);
        }
    }

    let mut beta = vec![vec![ninf; s_len]; frames];
    let last = frames - 1;
    beta[last][s_len - 1] = lp(last, ext[s_len - 1]);
    if s_len > 1 {
        beta[last][s_len - 2] = lp(last, ext[s_len - 2]);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + lp(t, ext[s]);
        }
    }

    let mut log_p = alpha[last][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[last][s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NoValidAlignment {
            labels: labels.len(),
            repeats: needed - labels.len(),
            needed,
            frames,
        });
    }

    // d(−log P)/d log_probs[t, k] = −(posterior occupancy of k at t)
    let mut grad = Tensor::zeros(&[frames, vocab]);
    for t in 0..frames {
        let mut occ = vec![ninf; vocab];
        for s in 0..s_len {
            let k = ext[s];
            occ[k] = log_add(occ[k], alpha[t][s] + beta[t][s] - lp(t, k));
        }
        for (k, o) in occ.into_iter().enumerate() {
            if o > ninf {
                grad.row_mut(t)[k] = F::of(-(o - log_p).exp());
            }
        }
    }
    Ok((-log_p, grad))
}

/// CTC loss of `log_probs` on the tape.
pub fn ctc_loss<F: Scalar>(t: &mut Tape<F>, log_probs: Var, labels: &[usize], blank: usize) -> Result<Var> {
    let (loss, grad) = ctc_forward_backward(t.value(log_probs), labels, blank)?;
    Ok(t.custom(&[log_probs], Tensor::scalar(F::of(loss)), move |g, _| {
        let k = g.data()[0];
        vec![Some(grad.map(|v| v * k))]
    }))
}

/// Smoothed target distribution: `1 − ε` on the target, `ε/(V − 1)`
/// spread over the other classes.
pub fn smoothed_targets<F: Scalar>(target: &[usize], vocab: usize, eps: f64) -> Tensor<F> {
    let off = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
    let mut q = Tensor::full(&[target.len(), vocab], F::of(off));
    for (r, &y) in target.iter().enumerate() {
        q.row_mut(r)[y] = F::of(1.0 - eps);
    }
    q
}

/// Mean token cross-entropy of `logits [U + 1, V]` against `target`
/// (labels + `<eos>`) with label smoothing `eps`.
pub fn aed_ce_loss<F: Scalar>(t: &mut Tape<F>, logits: Var, target: &[usize], eps: f64) -> Result<Var> {
    let (rows, vocab) = (t.value(logits).rows(), t.value(logits).cols());
    if rows != target.len() {
        return Err(Error::shape(format!("{rows} logit rows for {} targets", target.len())));
    }
    if let Some(&bad) = target.iter().find(|&&y| y >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, vocab });
    }
    let mut q = smoothed_targets::<F>(target, vocab, eps);
    q.scale_assign(F::of(-1.0 / rows as f64));
    let lp = t.log_softmax(logits);
    Ok(t.weighted_sum(lp, q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.3, alpha: 0.3 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        for (name, v) in [("lambda", lambda), ("alpha", alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        Ok(Self { lambda, alpha })
    }

    /// `(c_ctc, c_l2r, c_r2l)`, the coefficient of each component.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let aed = 1.0 - self.lambda;
        (self.lambda, aed * (1.0 - self.alpha), aed * self.alpha)
    }

    fn total<F: Scalar>(&self, ctc: F, l2r: F, r2l: F) -> F {
        let (lambda, alpha) = (F::of(self.lambda), F::of(self.alpha));
        lambda * ctc + (F::one() - lambda) * (alpha * r2l + (F::one() - alpha) * l2r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ctc: f64,
    pub l_aed_l2r: f64,
    pub l_aed_r2l: f64,
    pub l_total: f64,
}

pub fn combined_loss(l_ctc: f64, l_aed_l2r: f64, l_aed_r2l: f64, weights: LossWeights) -> Result<LossBreakdown> {
    let w = LossWeights::new(weights.lambda, weights.alpha)?;
    Ok(LossBreakdown { l_ctc, l_aed_l2r, l_aed_r2l, l_total: w.total(l_ctc, l_aed_l2r, l_aed_r2l) })
}

/// The three loss nodes and their combination on one tape.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub ctc: Var,
    pub l2r: Var,
    pub r2l: Var,
    pub total: Var,
}

impl Objective {
    pub fn breakdown<F: Scalar>(&self, t: &Tape<F>) -> LossBreakdown {
        let v = |x: Var| t.value(x).data()[0].to_f64().unwrap();
        LossBreakdown { l_ctc: v(self.ctc), l_aed_l2r: v(self.l2r), l_aed_r2l: v(self.r2l), l_total: v(self.total) }
    }
}

/// Combine the three component nodes; this is the only aggregation of loss
/// terms in the training graph.
pub fn combine<F: Scalar>(t: &mut Tape<F>, ctc: Var, l2r: Var, r2l: Var, weights: LossWeights) -> Result<Objective> {
    let w = LossWeights::new(weights.lambda, weights.alpha)?;
    let s = |t: &Tape<F>, v: Var| {
        let x = t.value(v);
        if x.len() == 1 { Ok(x.data()[0]) } else { Err(Error::shape("loss components must be scalars")) }
    };
    let total = w.total(s(t, ctc)?, s(t, l2r)?, s(t, r2l)?);
    let (c_ctc, c_l2r, c_r2l) = w.coefficients();
    let out = t.custom(&[ctc, l2r, r2l], Tensor::scalar(total), move |g, _| {
        let k = g.data()[0];
        [c_ctc, c_l2r, c_r2l]
            .map(|c| Some(Tensor::scalar(F::of(c) * k)))
            .into_iter()
            .collect()
    });
    t.label(ctc, LABEL_CTC);
    t.label(l2r, LABEL_L2R);
    t.label(r2l, LABEL_R2L);
    t.label(out, LABEL_TOTAL);
    Ok(Objective { ctc, l2r, r2l, total: out })
}

/// Build the full training objective from a forward pass with labels.
pub fn objective<F: Scalar>(
    t: &mut Tape<F>,
    out: &ForwardOutput,
    labels: &[usize],
    blank: usize,
    eos: usize,
    weights: LossWeights,
) -> Result<Objective> {
    let (Some(l2r_logits), Some(r2l_logits)) = (out.l2r_logits, out.r2l_logits) else {
        return Err(Error::config("objective needs decoder logits; run the forward pass with labels"));
    };
    let lp = t.log_softmax(out.ctc_logits);
    let ctc = ctc_loss(t, lp, labels, blank)?;
    let l2r = aed_ce_loss(t, l2r_logits, &decoder_target(labels, Direction::L2r, eos), LABEL_SMOOTHING)?;
    let r2l = aed_ce_loss(t, r2l_logits, &decoder_target(labels, Direction::R2l, eos), LABEL_SMOOTHING)?;
    combine(t, ctc, l2r, r2l, weights)
}

/// Check that the objective is exactly the three components: the total's
/// direct inputs are the CTC, l2r and r2l nodes, and no other labelled
/// loss term feeds it.
pub fn verify_objective_structure<F: Scalar>(t: &Tape<F>, obj: &Objective) -> Result<()> {
    let parents = t.parents(obj.total);
    let want = [obj.ctc, obj.l2r, obj.r2l];
    let grad_inputs: Vec<Var> = want.iter().copied().filter(|&v| t.requires_grad(v)).collect();
    if parents != grad_inputs {
        return Err(Error::config(format!(
            "objective combines {} inputs, expected the {} loss components",
            parents.len(),
            grad_inputs.len()
        )));
    }
    let mut labels = t.labeled_ancestors(obj.total);
    labels.sort_unstable();
    let mut expected = vec![LABEL_CTC, LABEL_L2R, LABEL_R2L, LABEL_TOTAL];
    expected.sort_unstable();
    if labels != expected {
        return Err(Error::config(format!("objective terms {labels:?}, expected {expected:?}")));
    }
    Ok(())
}
