use std::time::Instant;

use super::{attention_rescore, DecodeMode, DecodeResult, PrefixBeam};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{EncoderCache, Model, Routes, SUBSAMPLE_FACTOR};
use crate::tensor::{Scalar, Tensor};

/// Raw frames the subsampling front needs beyond its stride to emit one
/// output frame.
const RECEPTIVE_EXTRA: usize = 7;

/// Single-owner state of one live stream.
///
/// Raw feature frames are buffered until they complete new subsampled
/// frames; subsampled frames are buffered until a chunk of `C` is ready,
/// which is then pushed through the cached encoder and the CTC beam.
pub struct StreamState<'m, F: Scalar> {
    model: &'m Model<F>,
    mode: DecodeMode,
    raw: Vec<F>,
    pending: Vec<F>,
    cache: EncoderCache<F>,
    beam: PrefixBeam,
    greedy: Vec<usize>,
    greedy_prev: Option<usize>,
    enc_rows: Vec<F>,
    first_pass_secs: f64,
    finalized: bool,
}

impl<'m, F: Scalar> StreamState<'m, F> {
    pub fn new(model: &'m Model<F>, chunk: usize, mode: DecodeMode) -> Result<Self> {
        if chunk == 0 {
            return Err(Error::config("stream chunk size must be at least 1"));
        }
        let width = match mode {
            DecodeMode::Greedy => 1,
            DecodeMode::Rescore { beam, .. } => beam,
        };
        Ok(Self {
            model,
            mode,
            raw: Vec::new(),
            pending: Vec::new(),
            cache: EncoderCache::new(model.config(), chunk),
            beam: PrefixBeam::new(width, model.config().blank())?,
            greedy: Vec::new(),
            greedy_prev: None,
            enc_rows: Vec::new(),
            first_pass_secs: 0.0,
            finalized: false,
        })
    }

    pub fn chunk(&self) -> usize {
        self.cache.chunk
    }

    /// Subsampled frames already through the encoder.
    pub fn encoded_frames(&self) -> usize {
        self.cache.frames
    }

    pub fn buffered_raw_frames(&self) -> usize {
        self.raw.len() / self.model.config().feat_dim
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Current best hypothesis.
    pub fn partial(&self) -> Vec<usize> {
        match self.mode {
            DecodeMode::Greedy => self.greedy.clone(),
            DecodeMode::Rescore { .. } => self.beam.best_prefix().to_vec(),
        }
    }

    /// Append feature frames `[n, feat_dim]` and process every complete
    /// chunk. Returns the updated partial transcript.
    pub fn push(&mut self, frames: &Tensor<F>) -> Result<Vec<usize>> {
        if self.finalized {
            return Err(Error::Stream("push after finalize".into()));
        }
        let fd = self.model.config().feat_dim;
        if frames.rows() > 0 && frames.cols() != fd {
            return Err(Error::shape(format!("stream frames have {} dims, model expects {fd}", frames.cols())));
        }
        let start = Instant::now();
        self.raw.extend_from_slice(frames.data());
        self.subsample_ready()?;
        let d = self.model.config().d_att;
        while self.pending.len() / d >= self.cache.chunk {
            let rest = self.pending.split_off(self.cache.chunk * d);
            let chunk = std::mem::replace(&mut self.pending, rest);
            self.encode(chunk)?;
        }
        self.first_pass_secs += start.elapsed().as_secs_f64();
        Ok(self.partial())
    }

    /// Flush the last short chunk, rescore the n-best and close the stream.
    pub fn finalize(&mut self) -> Result<DecodeResult> {
        if self.finalized {
            return Err(Error::Stream("stream already finalized".into()));
        }
        self.finalized = true;
        let start = Instant::now();
        if !self.pending.is_empty() {
            let chunk = std::mem::take(&mut self.pending);
            self.encode(chunk)?;
        }
        self.raw.clear();
        let first_pass_secs = self.first_pass_secs + start.elapsed().as_secs_f64();
        let empty = |nbest| DecodeResult { tokens: Vec::new(), nbest, first_pass_secs, second_pass_secs: 0.0 };
        match self.mode {
            DecodeMode::Greedy => Ok(DecodeResult { tokens: self.greedy.clone(), ..empty(None) }),
            DecodeMode::Rescore { weights, .. } => {
                let nbest = self.beam.nbest();
                if self.cache.frames == 0 {
                    return Ok(empty(Some(nbest)));
                }
                let second = Instant::now();
                let d = self.model.config().d_att;
                let enc = Tensor::new(vec![self.cache.frames, d], std::mem::take(&mut self.enc_rows))?;
                let (best, scored) = attention_rescore(self.model, &nbest, &enc, weights)?;
                Ok(DecodeResult {
                    tokens: scored[best].tokens.clone(),
                    nbest: Some(nbest),
                    first_pass_secs,
                    second_pass_secs: second.elapsed().as_secs_f64(),
                })
            }
        }
    }

    /// Subsample every output frame whose receptive field is complete.
    /// Output frame `j` reads raw frames `8j .. 8j + 15`, so the raw buffer
    /// always starts at `8 * produced`.
    fn subsample_ready(&mut self) -> Result<()> {
        let fd = self.model.config().feat_dim;
        let avail = self.raw.len() / fd;
        if avail < SUBSAMPLE_FACTOR + RECEPTIVE_EXTRA {
            return Ok(());
        }
        let new = (avail - RECEPTIVE_EXTRA) / SUBSAMPLE_FACTOR;
        let used = new * SUBSAMPLE_FACTOR + RECEPTIVE_EXTRA;
        let window = Tensor::new(vec![used, fd], self.raw[..used * fd].to_vec())?;
        let mut t = Tape::no_grad();
        let p = self.model.params.bind(&mut t);
        let x = t.constant(window);
        let y = self.model.arch.subsample(&mut t, &p, x)?;
        debug_assert_eq!(t.value(y).rows(), new);
        self.pending.extend_from_slice(t.value(y).data());
        self.raw.drain(..new * SUBSAMPLE_FACTOR * fd);
        Ok(())
    }

    fn encode(&mut self, rows: Vec<F>) -> Result<()> {
        let d = self.model.config().d_att;
        let chunk = Tensor::new(vec![rows.len() / d, d], rows)?;
        let mut t = Tape::no_grad();
        let p = self.model.params.bind(&mut t);
        let x = t.constant(chunk);
        let enc = self.model.arch.encode_chunk(&mut t, &p, x, &mut self.cache, &mut Routes::new())?;
        let logits = self.model.arch.ctc_logits(&mut t, &p, enc);
        let lp = t.log_softmax(logits);
        self.enc_rows.extend_from_slice(t.value(enc).data());
        let lp = t.value(lp);
        match self.mode {
            DecodeMode::Greedy => {
                let blank = self.model.config().blank();
                for k in lp.argmax_rows() {
                    if Some(k) != self.greedy_prev && k != blank {
                        self.greedy.push(k);
                    }
                    self.greedy_prev = Some(k);
                }
            }
            DecodeMode::Rescore { .. } => self.beam.advance(lp),
        }
        Ok(())
    }
}
