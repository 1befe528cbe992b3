//! First-pass CTC decoding (greedy, prefix beam search), second-pass
//! attention rescoring, offline and streaming drivers.

mod stream;
mod wer;

use std::collections::HashMap;
use std::time::Instant;

pub use stream::StreamState;
pub use wer::{edit_counts, wer_report, EditCounts, SetStats, WerReport};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::log_add;
use crate::model::{decoder_target, Direction, Model, Routes};
use crate::params::Bound;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BEAM: usize = 10;

/// Per-frame argmax (ties → lower id), merge repeats, drop blanks.
pub fn ctc_greedy<F: Scalar>(log_probs: &Tensor<F>, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for k in log_probs.argmax_rows() {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub ctc_log_prob: f64,
}

/// Ranked first-pass hypotheses, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct NBestList {
    pub hypotheses: Vec<Hypothesis>,
    pub beam: usize,
}

impl NBestList {
    pub fn best(&self) -> Option<&Hypothesis> {
        self.hypotheses.first()
    }
}

/// Incremental CTC prefix beam search. Each prefix carries the log
/// probabilities of its alignments ending in blank and in a non-blank.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixBeam {
    beam: usize,
    blank: usize,
    prefixes: Vec<(Vec<usize>, f64, f64)>,
}

fn rank_order(a: &(Vec<usize>, f64, f64), b: &(Vec<usize>, f64, f64)) -> std::cmp::Ordering {
    let (sa, sb) = (log_add(a.1, a.2), log_add(b.1, b.2));
    sb.total_cmp(&sa).then_with(|| a.0.cmp(&b.0))
}

impl PrefixBeam {
    pub fn new(beam: usize, blank: usize) -> Result<Self> {
        if beam == 0 {
            return Err(Error::config("beam size must be at least 1"));
        }
        Ok(Self { beam, blank, prefixes: vec![(Vec::new(), 0.0, f64::NEG_INFINITY)] })
    }

    /// Extend every prefix by one frame of log-probabilities.
    pub fn step(&mut self, frame: &[f64]) {
        let ninf = f64::NEG_INFINITY;
        let mut next: HashMap<Vec<usize>, (f64, f64)> = HashMap::new();
        for (prefix, pb, pnb) in &self.prefixes {
            let total = log_add(*pb, *pnb);
            for (k, &lp) in frame.iter().enumerate() {
                if k == self.blank {
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.0 = log_add(e.0, total + lp);
                } else if prefix.last() == Some(&k) {
                    // repeat without a blank collapses into the same prefix
                    let e = next.entry(prefix.clone()).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pnb + lp);
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, pb + lp);
                } else {
                    let mut ext = prefix.clone();
                    ext.push(k);
                    let e = next.entry(ext).or_insert((ninf, ninf));
                    e.1 = log_add(e.1, total + lp);
                }
            }
        }
        let mut ranked: Vec<(Vec<usize>, f64, f64)> = next
            .into_iter()
            .filter(|(_, (b, nb))| log_add(*b, *nb) > f64::NEG_INFINITY)
            .map(|(p, (b, nb))| (p, b, nb))
            .collect();
        ranked.sort_by(rank_order);
        ranked.truncate(self.beam);
        self.prefixes = ranked;
    }

    pub fn advance<F: Scalar>(&mut self, log_probs: &Tensor<F>) {
        for r in 0..log_probs.rows() {
            let frame: Vec<f64> = log_probs.row(r).iter().map(|v| v.to_f64().unwrap()).collect();
            self.step(&frame);
        }
    }

    pub fn best_prefix(&self) -> &[usize] {
        &self.prefixes[0].0
    }

    pub fn nbest(&self) -> NBestList {
        NBestList {
            hypotheses: self
                .prefixes
                .iter()
                .map(|(p, b, nb)| Hypothesis { tokens: p.clone(), ctc_log_prob: log_add(*b, *nb) })
                .collect(),
            beam: self.beam,
        }
    }
}

pub fn ctc_prefix_beam<F: Scalar>(log_probs: &Tensor<F>, beam: usize, blank: usize) -> Result<NBestList> {
    let mut search = PrefixBeam::new(beam, blank)?;
    search.advance(log_probs);
    Ok(search.nbest())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RescoreWeights {
    pub ctc_weight: f64,
    pub reverse_weight: f64,
}

impl Default for RescoreWeights {
    fn default() -> Self {
        Self { ctc_weight: 0.5, reverse_weight: 0.3 }
    }
}

impl RescoreWeights {
    pub fn new(ctc_weight: f64, reverse_weight: f64) -> Result<Self> {
        if !(ctc_weight >= 0.0) || !(0.0..=1.0).contains(&reverse_weight) {
            return Err(Error::config(format!(
                "rescoring weights need w_c >= 0 and beta in [0, 1], got {ctc_weight}, {reverse_weight}"
            )));
        }
        Ok(Self { ctc_weight, reverse_weight })
    }
}

/// Teacher-forced `log P(hyp + <eos>)` under one decoder.
pub fn decoder_log_likelihood<F: Scalar>(
    model: &Model<F>,
    enc_out: &Tensor<F>,
    hyp: &[usize],
    dir: Direction,
) -> Result<f64> {
    let mut t = Tape::no_grad();
    let p = model.params.bind(&mut t);
    let enc = t.constant(enc_out.clone());
    Ok(batch_log_likelihoods(model, &mut t, &p, enc, &[hyp], dir)?[0])
}

/// `log P(hyp + <eos>)` of every hypothesis, decoded as one batch.
fn batch_log_likelihoods<F: Scalar>(
    model: &Model<F>,
    t: &mut Tape<F>,
    p: &Bound,
    enc: Var,
    hyps: &[&[usize]],
    dir: Direction,
) -> Result<Vec<f64>> {
    let logits = model.arch.decode_batch(t, p, enc, hyps, dir, &mut Routes::new())?;
    let lp = t.log_softmax(logits);
    let lp = t.value(lp);
    let eos = model.config().sos_eos();
    let mut row = 0;
    Ok(hyps
        .iter()
        .map(|h| {
            let target = decoder_target(h, dir, eos);
            let s = target.iter().enumerate().map(|(u, &y)| lp.row(row + u)[y].to_f64().unwrap()).sum();
            row += target.len();
            s
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescoredHypothesis {
    pub tokens: Vec<usize>,
    pub ctc_log_prob: f64,
    pub l2r_log_prob: f64,
    pub r2l_log_prob: f64,
    pub score: f64,
}

/// Score every hypothesis with
/// `(1 − β)·log P_l2r + β·log P_r2l + w_c·log P_ctc` and return the index
/// of the best (earliest rank on ties) with all scores.
pub fn attention_rescore<F: Scalar>(
    model: &Model<F>,
    nbest: &NBestList,
    enc_out: &Tensor<F>,
    weights: RescoreWeights,
) -> Result<(usize, Vec<RescoredHypothesis>)> {
    if nbest.hypotheses.is_empty() {
        return Err(Error::config("cannot rescore an empty n-best list"));
    }
    let beta = weights.reverse_weight;
    let mut scored: Vec<RescoredHypothesis> = Vec::with_capacity(nbest.hypotheses.len());
    let mut best = 0;
    let mut t = Tape::no_grad();
    let p = model.params.bind(&mut t);
    let enc = t.constant(enc_out.clone());
    let hyps: Vec<&[usize]> = nbest.hypotheses.iter().map(|h| h.tokens.as_slice()).collect();
    let l2r_all = batch_log_likelihoods(model, &mut t, &p, enc, &hyps, Direction::L2r)?;
    let r2l_all = batch_log_likelihoods(model, &mut t, &p, enc, &hyps, Direction::R2l)?;
    for (i, h) in nbest.hypotheses.iter().enumerate() {
        let (l2r, r2l) = (l2r_all[i], r2l_all[i]);
        let score = (1.0 - beta) * l2r + beta * r2l + weights.ctc_weight * h.ctc_log_prob;
        if i > 0 && score > scored[best].score {
            best = i;
        }
        scored.push(RescoredHypothesis {
            tokens: h.tokens.clone(),
            ctc_log_prob: h.ctc_log_prob,
            l2r_log_prob: l2r,
            r2l_log_prob: r2l,
            score,
        });
    }
    Ok((best, scored))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Rescore { beam: usize, weights: RescoreWeights },
}

impl Default for DecodeMode {
    fn default() -> Self {
        Self::Rescore { beam: DEFAULT_BEAM, weights: RescoreWeights::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    pub nbest: Option<NBestList>,
    /// Encoder + CTC search time.
    pub first_pass_secs: f64,
    /// Attention rescoring time.
    pub second_pass_secs: f64,
}

/// Encoder output and CTC log-probabilities of a whole utterance under a
/// chunk mask (`None` = full context).
pub fn encode_offline<F: Scalar>(
    model: &Model<F>,
    feats: &Tensor<F>,
    chunk: Option<usize>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let mut t = Tape::no_grad();
    let p = model.params.bind(&mut t);
    let out = model.arch.forward(&mut t, &p, feats, None, chunk)?;
    let lp = t.log_softmax(out.ctc_logits);
    Ok((t.value(out.encoder_out).clone(), t.value(lp).clone()))
}

/// Non-streaming two-pass (or greedy) decode of normalised features.
pub fn decode_offline<F: Scalar>(
    model: &Model<F>,
    feats: &Tensor<F>,
    chunk: Option<usize>,
    mode: DecodeMode,
) -> Result<DecodeResult> {
    let start = Instant::now();
    let (enc, lp) = encode_offline(model, feats, chunk)?;
    let blank = model.config().blank();
    match mode {
        DecodeMode::Greedy => Ok(DecodeResult {
            tokens: ctc_greedy(&lp, blank),
            nbest: None,
            first_pass_secs: start.elapsed().as_secs_f64(),
            second_pass_secs: 0.0,
        }),
        DecodeMode::Rescore { beam, weights } => {
            let nbest = ctc_prefix_beam(&lp, beam, blank)?;
            let first = start.elapsed().as_secs_f64();
            let second = Instant::now();
            let (best, scored) = attention_rescore(model, &nbest, &enc, weights)?;
            Ok(DecodeResult {
                tokens: scored[best].tokens.clone(),
                nbest: Some(nbest),
                first_pass_secs: first,
                second_pass_secs: second.elapsed().as_secs_f64(),
            })
        }
    }
}

/// One decode output line: `utt_id<TAB>token ids`.
pub fn format_decode_line(utt_id: &str, tokens: &[usize]) -> String {
    let toks: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    format!("{utt_id}\t{}", toks.join(" "))
}

pub fn parse_decode_line(line: &str) -> Result<(String, Vec<usize>)> {
    let parse_err = |msg: String| Error::Parse { location: "decode output".into(), msg };
    let (id, toks) = line.split_once('\t').ok_or_else(|| parse_err(format!("missing tab: {line:?}")))?;
    let tokens = toks
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| parse_err(format!("bad token {t:?}"))))
        .collect::<Result<_>>()?;
    Ok((id.to_string(), tokens))
}

#[cfg(test)]
mod tests;
