//! Sparse mixture-of-experts FFN: a bias-free linear router picks the top-K
//! experts per frame and mixes their outputs with softmax weights
//! renormalised over the selected logits. There is no balancing loss, no
//! router noise and no capacity limit; every frame is routed.


use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::FeedForward;
use crate::params::{Bound, ParamBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// Per-frame expert choice. `indices[t]` lists the K selected experts from
/// highest to lowest logit; `gates[t]` are their mixing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub num_experts: usize,
    pub k: usize,
    pub indices: Vec<Vec<usize>>,
    pub gates: Vec<Vec<f64>>,
}

impl RoutingDecision {
    pub fn frames(&self) -> usize {
        self.indices.len()
    }
}

fn select_topk<F: Scalar>(row: &[F], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal logits
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    order.truncate(k);
    order
}

fn softmax_of<F: Scalar>(vals: &[F]) -> Vec<F> {
    let max = vals.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = vals.iter().map(|&v| (v - max).exp()).collect();
    let z: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Pick the K largest logits of every frame (ties → lower expert index) and
/// renormalise a softmax over just those K.
pub fn route_topk<F: Scalar>(logits: &Tensor<F>, k: usize) -> Result<RoutingDecision> {
    let e = logits.cols();
    if k == 0 || k > e {
        return Err(Error::config(format!("top-k {k} must be in 1..={e}")));
    }
    let mut indices = Vec::with_capacity(logits.rows());
    let mut gates = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let idx = select_topk(row, k);
        let sel: Vec<F> = idx.iter().map(|&i| row[i]).collect();
        gates.push(softmax_of(&sel).into_iter().map(|g| g.to_f64().unwrap()).collect());
        indices.push(idx);
    }
    Ok(RoutingDecision {
        num_experts: e,
        k,
        indices,
        gates,
    })
}

/// Differentiable top-K gating: returns gates `[T, K]` whose gradient flows
/// back into the selected logits only.
pub fn topk_gates<F: Scalar>(t: &mut Tape<F>, logits: Var, k: usize) -> Result<(Var, RoutingDecision)> {
    let lv = t.value(logits);
    let (rows, e) = (lv.rows(), lv.cols());
    let decision = route_topk(lv, k)?;
    let mut gate_vals = Vec::with_capacity(rows * k);
    for r in 0..rows {
        let sel: Vec<F> = decision.indices[r].iter().map(|&i| lv.row(r)[i]).collect();
        gate_vals.extend(softmax_of(&sel));
    }
    let gates = Tensor::new(vec![rows, k], gate_vals).unwrap();
    let chosen = decision.indices.clone();
    let in_shape = lv.shape().to_vec();
    let out = t.custom(&[logits], gates.clone(), move |g, _| {
        let mut gl = Tensor::zeros(&in_shape);
        for r in 0..rows {
            let p = gates.row(r);
            let gr = g.row(r);
            let dot: F = p.iter().zip(gr).map(|(&p, &g)| p * g).sum();
            for (s, &expert) in chosen[r].iter().enumerate() {
                gl.data_mut()[r * e + expert] += p[s] * (gr[s] - dot);
            }
        }
        vec![Some(gl)]
    });
    Ok((out, decision))
}

#[derive(Debug, Clone)]
pub struct MoeLayer {
    pub router: ParamId,
    pub experts: Vec<FeedForward>,
    pub k: usize,
}

impl MoeLayer {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<'_, F>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        num_experts: usize,
        k: usize,
    ) -> Result<Self> {
        if k == 0 || k > num_experts {
            return Err(Error::config(format!(
                "top-k {k} must be in 1..={num_experts}"
            )));
        }
        let router = pb.weight(&format!("{prefix}.router.W_r"), d_model, num_experts)?;
        let experts = (0..num_experts)
            .map(|e| FeedForward::new(pb, &format!("{prefix}.expert{e}"), d_model, d_ff))
            .collect::<Result<_>>()?;
        Ok(Self { router, experts, k })
    }

    pub fn num_params(d_model: usize, d_ff: usize, num_experts: usize) -> usize {
        num_experts * FeedForward::num_params(d_model, d_ff) + d_model * num_experts
    }

    /// `y_t = Σ_{k ∈ topK(t)} gate_k · expert_k(x_t)`. Only the selected
    /// experts are evaluated, each on the rows routed to it.
    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> Result<(Var, RoutingDecision)> {
        let rows = t.value(x).rows();
        let logits = t.matmul(x, p[self.router]);
        let (gates, decision) = topk_gates(t, logits, self.k)?;

        let mut routed: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.experts.len()];
        for (frame, experts) in decision.indices.iter().enumerate() {
            for (slot, &e) in experts.iter().enumerate() {
                routed[e].push((frame, slot));
            }
        }

        let mut parts = Vec::new();
        for (expert, pairs) in self.experts.iter().zip(&routed) {
            if pairs.is_empty() {
                continue;
            }
            let frames: Vec<usize> = pairs.iter().map(|&(f, _)| f).collect();
            let gate_idx: Vec<usize> = pairs.iter().map(|&(f, s)| f * self.k + s).collect();
            let xe = t.gather_rows(x, frames.clone());
            let ye = expert.forward(t, p, xe);
            parts.push((ye, frames, gate_idx));
        }
        let out = t.gated_scatter_add(gates, parts, [rows, t.value(x).cols()]);
        Ok((out, decision))
    }
}

/// A feed-forward position: a plain FFN in dense models, an MoE layer
/// otherwise.
#[derive(Debug, Clone)]
pub enum FfnSlot {
    Dense(FeedForward),
    Moe(MoeLayer),
}

impl FfnSlot {
    pub fn new<F: Scalar>(
        pb: &mut ParamBuilder<'_, F>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        num_experts: usize,
        k: usize,
    ) -> Result<Self> {
        if num_experts == 0 {
            Ok(Self::Dense(FeedForward::new(pb, prefix, d_model, d_ff)?))
        } else {
            Ok(Self::Moe(MoeLayer::new(pb, prefix, d_model, d_ff, num_experts, k)?))
        }
    }

    pub fn num_params(d_model: usize, d_ff: usize, num_experts: usize) -> usize {
        if num_experts == 0 {
            FeedForward::num_params(d_model, d_ff)
        } else {
            MoeLayer::num_params(d_model, d_ff, num_experts)
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        x: Var,
    ) -> Result<(Var, Option<RoutingDecision>)> {
        match self {
            Self::Dense(ffn) => Ok((ffn.forward(t, p, x), None)),
            Self::Moe(moe) => {
                let (y, d) = moe.forward(t, p, x)?;
                Ok((y, Some(d)))
            }
        }
    }
}

/// Routing counts per expert over a batch of decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertLoadHistogram {
    pub counts: Vec<usize>,
    /// Routed `(frame, slot)` pairs; equals frames × K.
    pub total: usize,
    pub max: usize,
    pub min: usize,
    pub mean: f64,
    pub unused_fraction: f64,
}

impl std::fmt::Display for ExpertLoadHistogram {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let counts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        write!(
            f,
            "load=[{}] max={} min={} mean={:.1} unused={:.3}",
            counts.join(","),
            self.max,
            self.min,
            self.mean,
            self.unused_fraction
        )
    }
}

pub fn expert_load_stats(decisions: &[RoutingDecision]) -> Result<ExpertLoadHistogram> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::config("expert_load_stats needs at least one decision"))?;
    let mut counts = vec![0usize; first.num_experts];
    for d in decisions {
        if d.num_experts != counts.len() {
            return Err(Error::shape("decisions disagree on the expert count"));
        }
        for &e in d.indices.iter().flatten() {
            counts[e] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    Ok(ExpertLoadHistogram {
        max: counts.iter().copied().max().unwrap_or(0),
        min: counts.iter().copied().min().unwrap_or(0),
        mean: total as f64 / counts.len() as f64,
        unused_fraction: counts.iter().filter(|&&c| c == 0).count() as f64 / counts.len() as f64,
        counts,
        total,
    })
}
