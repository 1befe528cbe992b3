//! Checkpoint persistence, the closed-form parameter counter and the
//! real-time-factor benchmark.

mod checkpoint;

use std::fmt;
use std::time::Instant;

pub use checkpoint::{
    checkpoint_config, load_checkpoint, load_cmvn, load_codebook, read_tensors, save_checkpoint, save_cmvn,
    save_codebook, write_tensors, CONFIG_FILE, MANIFEST,
};

use crate::decoding::{decode_offline, DecodeMode};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Subsampling};
use crate::moe::FfnSlot;
use crate::nn::{ConvModule, FeedForward, MultiHeadAttention};
use crate::tensor::{Scalar, Tensor};

/// Parameter totals per module, computed without allocating tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub subsampling: usize,
    /// Encoder layers excluding their FFN/MoE slots.
    pub encoder: usize,
    /// Decoder layers (both directions) excluding their FFN/MoE slots.
    pub decoders: usize,
    /// All FFN/MoE slots, encoder and decoders.
    pub ffn_slots: usize,
    /// Decoder token embeddings.
    pub embeddings: usize,
    /// CTC head and both decoder output projections.
    pub heads: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn breakdown(&self) -> [(&'static str, usize); 6] {
        [
            ("subsampling", self.subsampling),
            ("encoder", self.encoder),
            ("decoders", self.decoders),
            ("ffn_slots", self.ffn_slots),
            ("embeddings", self.embeddings),
            ("heads", self.heads),
        ]
    }
}

impl fmt::Display for ParamCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, n) in self.breakdown() {
            writeln!(f, "{name:<12} {n:>14}")?;
        }
        write!(f, "{:<12} {:>14}", "total", self.total)
    }
}

/// Number of FFN slots: two per encoder layer, one per decoder layer in
/// each direction.
pub fn ffn_slot_count(c: &ModelConfig) -> usize {
    2 * c.m_layers + 2 * c.n_dec_layers
}

pub fn count_params(c: &ModelConfig) -> Result<ParamCount> {
    c.validate()?;
    let (d, v) = (c.d_att, c.vocab);
    let norm = 2 * d;
    let enc_layer = MultiHeadAttention::num_params(d, true) + ConvModule::num_params(d, c.cnn_kernel) + 5 * norm;
    let dec_layer = 2 * MultiHeadAttention::num_params(d, false) + 3 * norm;
    let linear_out = d * v + v;
    let mut pc = ParamCount {
        subsampling: Subsampling::num_params(d, c.feat_dim),
        encoder: c.m_layers * enc_layer,
        decoders: 2 * (c.n_dec_layers * dec_layer + norm),
        ffn_slots: ffn_slot_count(c) * FfnSlot::num_params(d, c.d_ff, c.num_experts),
        embeddings: 2 * v * d,
        heads: 3 * linear_out,
        total: 0,
    };
    pc.total = pc.breakdown().iter().map(|(_, n)| n).sum();
    Ok(pc)
}

/// `count(MoE) − count(dense)` for the same dimensions:
/// slots × ((E − 1)·FFN + router).
pub fn moe_param_delta(c: &ModelConfig) -> usize {
    if c.num_experts == 0 {
        return 0;
    }
    ffn_slot_count(c) * ((c.num_experts - 1) * FeedForward::num_params(c.d_att, c.d_ff) + c.d_att * c.num_experts)
}

/// Frame shift of the features, used to convert frames to audio time.
pub const FRAME_SECONDS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct RtfResult {
    pub mode: &'static str,
    pub model_tag: String,
    pub audio_seconds: f64,
    /// Median wall time over the timed runs.
    pub wall_seconds: f64,
    pub first_pass_seconds: f64,
    pub second_pass_seconds: f64,
    pub rtf: f64,
    pub workers: usize,
    pub runs: usize,
}

impl fmt::Display for RtfResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "model={} mode={} workers={} runs={} audio_s={:.2} wall_s={:.4} first_pass_s={:.4} second_pass_s={:.4} rtf={:.5}",
            self.model_tag,
            self.mode,
            self.workers,
            self.runs,
            self.audio_seconds,
            self.wall_seconds,
            self.first_pass_seconds,
            self.second_pass_seconds,
            self.rtf
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) }
}

/// Decode every utterance sequentially with batch 1 and report the median
/// over `runs` timed passes; one untimed warm-up decode precedes them.
pub fn bench_rtf<F: Scalar>(
    model: &Model<F>,
    model_tag: &str,
    utterances: &[Tensor<F>],
    mode: DecodeMode,
    chunk: Option<usize>,
    runs: usize,
    workers: usize,
) -> Result<RtfResult> {
    if workers != 1 {
        return Err(Error::config(format!("comparison benchmarks require --workers 1, got {workers}")));
    }
    if utterances.is_empty() || runs == 0 {
        return Err(Error::config("benchmark needs at least one utterance and one run"));
    }
    decode_offline(model, &utterances[0], chunk, mode)?;
    let (mut walls, mut firsts, mut seconds) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..runs {
        let (mut first, mut second) = (0.0, 0.0);
        let start = Instant::now();
        for u in utterances {
            let r = decode_offline(model, u, chunk, mode)?;
            first += r.first_pass_secs;
            second += r.second_pass_secs;
        }
        walls.push(start.elapsed().as_secs_f64());
        firsts.push(first);
        seconds.push(second);
    }
    let audio_seconds = utterances.iter().map(|u| u.rows()).sum::<usize>() as f64 * FRAME_SECONDS;
    let wall_seconds = median(walls);
    Ok(RtfResult {
        mode: match mode {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Rescore { .. } => "rescoring",
        },
        model_tag: model_tag.to_string(),
        audio_seconds,
        wall_seconds,
        first_pass_seconds: median(firsts),
        second_pass_seconds: median(seconds),
        rtf: wall_seconds / audio_seconds,
        workers,
        runs,
    })
}
