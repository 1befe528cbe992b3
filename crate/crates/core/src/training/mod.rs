//! Toy-scale training: Adam with inverse-square-root warmup, gradient
//! clipping, full or dynamic chunk masks, and the two-stage pipeline
//! (full-chunk pretraining, then dynamic-chunk fine-tuning from its
//! checkpoint).

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{load_checkpoint, save_checkpoint};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::frontend::{apply_cmvn, load_features, CmvnStats, ManifestEntry, SyntheticCodebook};
use crate::losses::{objective, verify_objective_structure, LossBreakdown, LossWeights};
use crate::model::{subsampled_len, ChunkPolicy, Model, ModelConfig};
use crate::moe::{expert_load_stats, ExpertLoadHistogram, RoutingDecision};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// `lr(s) = peak · min(s / warmup, sqrt(warmup / s))` for update `s ≥ 1`:
/// linear warmup to the peak, then inverse square-root decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak_lr * (s / w).min((w / s).sqrt())
    }
}

/// First and second moments per parameter, in store order.
#[derive(Debug, Clone)]
pub struct AdamState<F: Scalar> {
    pub step: usize,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One Adam step on the accumulated gradients of `params`.
pub fn optimizer_update<F: Scalar>(params: &mut ParamStore<F>, state: &mut AdamState<F>, lr: f64, cfg: AdamConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(format!("optimizer holds {} moments for {} parameters", state.m.len(), params.len())));
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if m.shape() != p.grad.shape() {
            return Err(Error::shape(format!("optimizer moment shape mismatch for {}", p.name)));
        }
        let value = Arc::make_mut(&mut p.value);
        let g = p.grad.data();
        for (((x, &gi), mi), vi) in value.data_mut().iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            let gi = gi.to_f64().unwrap();
            let m1 = cfg.beta1 * mi.to_f64().unwrap() + (1.0 - cfg.beta1) * gi;
            let v1 = cfg.beta2 * vi.to_f64().unwrap() + (1.0 - cfg.beta2) * gi * gi;
            *mi = F::of(m1);
            *vi = F::of(v1);
            let step = lr * (m1 / c1) / ((v1 / c2).sqrt() + cfg.eps);
            *x = F::of(x.to_f64().unwrap() - step);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    Full,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// 1 = full-chunk pretraining, 2 = dynamic-chunk fine-tuning.
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Stage-1 checkpoint that initialises stage 2.
    pub checkpoint_in: Option<PathBuf>,
    /// Save a checkpoint under this directory every `checkpoint_every` steps.
    pub checkpoint_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub clip_norm: f64,
    /// Divergence threshold relative to the first step's loss.
    pub divergence_factor: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 1000,
            batch_size: 8,
            peak_lr: 1e-3,
            warmup: 500,
            seed: 0,
            checkpoint_in: None,
            checkpoint_dir: None,
            checkpoint_every: 0,
            clip_norm: 5.0,
            divergence_factor: 10.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.stage {
            1 => {}
            2 if self.checkpoint_in.is_none() => {
                return Err(Error::config("stage 2 needs a stage-1 checkpoint (checkpoint_in)"))
            }
            2 => {}
            s => return Err(Error::config(format!("stage must be 1 or 2, got {s}"))),
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.peak_lr >= 0.0) || !(self.clip_norm > 0.0) || !(self.divergence_factor > 1.0) {
            return Err(Error::config("need peak_lr >= 0, clip_norm > 0 and divergence_factor > 1"));
        }
        Ok(())
    }

    pub fn chunk_mode(&self) -> ChunkMode {
        if self.stage == 1 { ChunkMode::Full } else { ChunkMode::Dynamic }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak_lr: self.peak_lr, warmup: self.warmup }
    }
}

/// One training utterance: normalised features and vocabulary ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub feats: Tensor<f32>,
    pub tokens: Vec<usize>,
}

/// Load and normalise the features of every manifest entry.
pub fn load_examples(
    entries: &[ManifestEntry],
    codebook: Option<&SyntheticCodebook>,
    cmvn: Option<&CmvnStats>,
) -> Result<Vec<Example>> {
    entries
        .iter()
        .map(|e| {
            let raw = load_features(e, codebook)?;
            let feats = match cmvn {
                Some(s) => apply_cmvn(&raw, s)?.data,
                None => raw.data,
            };
            Ok(Example { id: e.id.clone(), feats, tokens: e.tokens.clone() })
        })
        .collect()
}

/// Length-bucketed batches: sort by frame count, cut into batches, then
/// shuffle the batch order with a per-epoch seed.
pub fn make_batches(examples: &[Example], batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].feats.rows(), i));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    batches.shuffle(&mut rng);
    batches
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub step: usize,
    pub losses: LossBreakdown,
    /// Global gradient norm before clipping.
    pub gnorm: f64,
    pub lr: f64,
    pub sec_per_step: f64,
    /// Subsampled chunk size used for the batch (`None` = full context).
    pub chunk: Option<usize>,
    /// Expert usage over every MoE slot in the batch; never used in the loss.
    pub expert_load: Option<ExpertLoadHistogram>,
}

impl fmt::Display for TrainMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.losses;
        write!(
            f,
            "step={} l_total={:.6} l_ctc={:.6} l_l2r={:.6} l_r2l={:.6} gnorm={:.6} lr={:.8} sec_per_step={:.4}",
            self.step, l.l_total, l.l_ctc, l.l_aed_l2r, l.l_aed_r2l, self.gnorm, self.lr, self.sec_per_step
        )
    }
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let s = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_ctc: s(|b| b.l_ctc),
        l_aed_l2r: s(|b| b.l_aed_l2r),
        l_aed_r2l: s(|b| b.l_aed_r2l),
        l_total: s(|b| b.l_total),
    }
}

pub fn loss_weights(config: &ModelConfig) -> Result<LossWeights> {
    LossWeights::new(config.lambda, config.alpha)
}

/// Mean loss over `data` without gradients, under chunk size `chunk`
/// (`None` = full context).
pub fn evaluate<F: Scalar>(model: &Model<F>, data: &[Example], chunk: Option<usize>) -> Result<LossBreakdown> {
    let cfg = model.config();
    let weights = loss_weights(cfg)?;
    let mut parts = Vec::with_capacity(data.len());
    for ex in data {
        let mut t = Tape::no_grad();
        let p = model.params.bind(&mut t);
        let out = model.arch.forward(&mut t, &p, &ex.feats.cast(), Some(&ex.tokens), chunk)?;
        let obj = objective(&mut t, &out, &ex.tokens, cfg.blank(), cfg.sos_eos(), weights)?;
        parts.push(obj.breakdown(&t));
    }
    Ok(mean_breakdown(&parts))
}

/// Single owner of a model and its optimizer state.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamState<f32>,
    pub cfg: TrainConfig,
    policy: ChunkPolicy,
    rng: ChaCha8Rng,
    weights: LossWeights,
    initial_loss: Option<f64>,
    last_checkpoint: Option<PathBuf>,
}

impl Trainer {
    /// Stage 1 starts from a fresh seeded model; stage 2 loads
    /// `checkpoint_in` verbatim.
    pub fn from_config(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = match &cfg.checkpoint_in {
            Some(path) => load_checkpoint::<f32>(path, model_cfg)?.0,
            None => Model::new(model_cfg, cfg.seed)?,
        };
        Self::new(model, cfg)
    }

    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = model.config();
        let policy = match cfg.chunk_mode() {
            ChunkMode::Full => ChunkPolicy::Full,
            ChunkMode::Dynamic => ChunkPolicy::Dynamic { p_full: mc.p_full_chunk, cap: mc.chunk_cap },
        };
        Ok(Self {
            opt: AdamState::new(&model.params),
            weights: loss_weights(mc)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed)),
            last_checkpoint: cfg.checkpoint_in.clone(),
            initial_loss: None,
            policy,
            model,
            cfg,
        })
    }

    pub fn step_count(&self) -> usize {
        self.opt.step
    }

    pub fn last_checkpoint(&self) -> Option<&Path> {
        self.last_checkpoint.as_deref()
    }

    fn diverged(&self, reason: String) -> Error {
        let ckpt = match &self.last_checkpoint {
            Some(p) => p.display().to_string(),
            None => "none".into(),
        };
        Error::Diverged { step: self.opt.step + 1, reason: format!("{reason}; last good checkpoint: {ckpt}") }
    }

    /// Forward, objective, backward for every utterance of the batch,
    /// gradient averaging and clipping, then one optimizer update.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<TrainMetrics> {
        if batch.is_empty() {
            return Err(Error::config("empty batch"));
        }
        let start = Instant::now();
        let mc = self.model.config().clone();
        let t_max = batch
            .iter()
            .map(|e| subsampled_len(e.feats.rows()).ok_or(Error::TooShortAfterSubsampling { frames: e.feats.rows() }))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap();
        let mask = self.policy.resolve(t_max, &mut self.rng);
        let chunk = (!mask.is_full()).then_some(mask.chunk);
        self.model.params.zero_grads();
        let scale = 1.0 / batch.len() as f32;
        let mut parts = Vec::with_capacity(batch.len());
        let mut decisions: Vec<RoutingDecision> = Vec::new();
        for ex in batch {
            let mut t = Tape::new();
            let p = self.model.params.bind(&mut t);
            let out = self.model.arch.forward(&mut t, &p, &ex.feats, Some(&ex.tokens), chunk)?;
            let obj = objective(&mut t, &out, &ex.tokens, mc.blank(), mc.sos_eos(), self.weights)?;
            verify_objective_structure(&t, &obj)?;
            let b = obj.breakdown(&t);
            if !b.l_total.is_finite() {
                return Err(self.diverged(format!("non-finite loss on {}", ex.id)));
            }
            parts.push(b);
            decisions.extend(out.routes.into_iter().map(|(_, d)| d));
            let mut grads = t.backward(obj.total);
            self.model.params.accumulate_grads(&p, &mut grads, scale);
        }
        let losses = mean_breakdown(&parts);
        let first = *self.initial_loss.get_or_insert(losses.l_total);
        if losses.l_total > self.cfg.divergence_factor * first {
            return Err(self.diverged(format!(
                "loss {:.4} exceeds {}x the initial loss {first:.4}",
                losses.l_total, self.cfg.divergence_factor
            )));
        }
        let gnorm = self.model.params.grad_norm() as f64;
        if !gnorm.is_finite() {
            return Err(self.diverged("non-finite gradient norm".into()));
        }
        if gnorm > self.cfg.clip_norm {
            let k = (self.cfg.clip_norm / gnorm) as f32;
            for p in self.model.params.iter_mut() {
                p.grad.scale_assign(k);
            }
        }
        let lr = self.cfg.schedule().lr(self.opt.step + 1);
        optimizer_update(&mut self.model.params, &mut self.opt, lr, self.cfg.adam)?;
        let expert_load = if decisions.is_empty() { None } else { Some(expert_load_stats(&decisions)?) };
        Ok(TrainMetrics {
            step: self.opt.step,
            losses,
            gnorm,
            lr,
            sec_per_step: start.elapsed().as_secs_f64(),
            chunk,
            expert_load,
        })
    }

    /// Run `cfg.steps` updates over bucketed, per-epoch shuffled batches.
    pub fn train(&mut self, data: &[Example], on_step: &mut dyn FnMut(&TrainMetrics)) -> Result<()> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let mut epoch = 0u64;
        while self.opt.step < self.cfg.steps {
            for idx in make_batches(data, self.cfg.batch_size, self.cfg.seed, epoch) {
                if self.opt.step >= self.cfg.steps {
                    break;
                }
                let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
                let m = self.train_step(&batch)?;
                on_step(&m);
                if let Some(dir) = &self.cfg.checkpoint_dir {
                    if self.cfg.checkpoint_every > 0 && m.step % self.cfg.checkpoint_every == 0 {
                        let path = dir.join(format!("step{}", m.step));
                        save_checkpoint(&self.model, None, &path)?;
                        self.last_checkpoint = Some(path);
                    }
                }
            }
            epoch += 1;
        }
        Ok(())
    }
}

/// Outcome of [`run_two_stage`].
pub struct TwoStageOutcome {
    pub ckpt_stage1: PathBuf,
    pub ckpt_stage2: PathBuf,
    /// Full-chunk validation loss of the final stage-1 model.
    pub stage1_final_valid: LossBreakdown,
    /// Full-chunk validation loss of the stage-2 model at step 0, loaded
    /// from the stage-1 checkpoint.
    pub stage2_initial_valid: LossBreakdown,
    pub model: Model<f32>,
}

/// Stage 1 trains with full-chunk masks and is checkpointed to
/// `out_dir/stage1`; stage 2 loads that checkpoint verbatim, trains with
/// dynamic chunks and is saved to `out_dir/stage2`.
#[allow(clippy::too_many_arguments)]
pub fn run_two_stage(
    model_cfg: &ModelConfig,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    train: &[Example],
    valid: &[Example],
    cmvn: Option<&CmvnStats>,
    out_dir: &Path,
    on_step: &mut dyn FnMut(u8, &TrainMetrics),
) -> Result<TwoStageOutcome> {
    if stage1.stage != 1 || stage2.stage != 2 {
        return Err(Error::config("run_two_stage needs a stage-1 and a stage-2 configuration"));
    }
    let ckpt_stage1 = out_dir.join("stage1");
    let ckpt_stage2 = out_dir.join("stage2");

    let mut t1 = Trainer::from_config(model_cfg, TrainConfig { checkpoint_in: None, ..stage1.clone() })?;
    t1.train(train, &mut |m| on_step(1, m))?;
    save_checkpoint(&t1.model, cmvn, &ckpt_stage1)?;
    let stage1_final_valid = evaluate(&t1.model, valid, None)?;
    drop(t1);

    let cfg2 = TrainConfig { checkpoint_in: Some(ckpt_stage1.clone()), ..stage2.clone() };
    let mut t2 = Trainer::from_config(model_cfg, cfg2)?;
    let stage2_initial_valid = evaluate(&t2.model, valid, None)?;
    t2.train(train, &mut |m| on_step(2, m))?;
    save_checkpoint(&t2.model, cmvn, &ckpt_stage2)?;
    Ok(TwoStageOutcome { ckpt_stage1, ckpt_stage2, stage1_final_valid, stage2_initial_valid, model: t2.model })
}

/// Synthetic corpus manifest: `n` utterances of `U ~ U[min_len, max_len]`
/// tokens drawn uniformly from ids `1..=v_toy`, each with its own noise seed.
pub fn synth_manifest(prefix: &str, n: usize, v_toy: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<ManifestEntry>> {
    if v_toy == 0 || min_len == 0 || min_len > max_len {
        return Err(Error::config("synthetic corpus needs V_toy >= 1 and 1 <= min_len <= max_len"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let u = rng.gen_range(min_len..=max_len);
            ManifestEntry {
                id: format!("{prefix}{i:05}"),
                source: crate::frontend::AudioSource::Synth(rng.gen()),
                tokens: (0..u).map(|_| rng.gen_range(1..=v_toy)).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests;
