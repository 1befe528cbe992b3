use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use u2moe::artifacts::{
    bench_rtf, checkpoint_config, count_params, load_checkpoint, load_cmvn, load_codebook, save_checkpoint,
    save_cmvn, save_codebook,
};
use u2moe::decoding::{decode_offline, format_decode_line, parse_decode_line, wer_report, DecodeMode, RescoreWeights, StreamState};
use u2moe::frontend::{
    apply_cmvn, estimate_cmvn, load_features, read_manifest, write_manifest, CmvnStats, ManifestEntry,
    SyntheticCodebook,
};
use u2moe::model::{Model, ModelConfig};
use u2moe::training::{load_examples, run_two_stage, synth_manifest, TrainConfig, TrainMetrics, Trainer};
use u2moe::Tensor;

use crate::{
    BenchArgs, Cli, CmvnArgs, Command, DataArgs, DecodeArgs, Mode, ScoreArgs, SearchArgs, StreamArgs, SynthArgs,
    TrainArgs, UsageError,
};

pub fn run(cli: &Cli) -> Result<()> {
    if cli.workers == 0 {
        bail!(UsageError("--workers must be at least 1".into()));
    }
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Decode(a) => decode(cli, a),
        Command::StreamDecode(a) => stream_decode(cli, a),
        Command::Score(a) => score(a),
        Command::BenchRtf(a) => bench(cli, a),
        Command::CountParams => {
            let cfg = model_config(cli, None, "dense-225m")?;
            println!("{}", count_params(&cfg)?);
            Ok(())
        }
        Command::Cmvn(a) => cmvn(a),
        Command::SynthCorpus(a) => synth_corpus(cli, a),
    }
}

/// `--config` file, else `--preset`, else the configuration stored with
/// `checkpoint`, else the named fallback preset.
fn model_config(cli: &Cli, checkpoint: Option<&Path>, fallback: &str) -> Result<ModelConfig> {
    if let Some(path) = &cli.config {
        return ModelConfig::from_file(path).with_context(|| format!("reading config {}", path.display()));
    }
    if let Some(name) = &cli.preset {
        return ModelConfig::by_name(name).ok_or_else(|| UsageError(format!("unknown preset {name}")).into());
    }
    if let Some(dir) = checkpoint {
        return Ok(checkpoint_config(dir)?);
    }
    Ok(ModelConfig::by_name(fallback).expect("fallback preset exists"))
}

fn codebook(data: &DataArgs) -> Result<Option<SyntheticCodebook>> {
    data.codebook
        .as_deref()
        .map(|p| load_codebook(p).with_context(|| format!("loading codebook {}", p.display())))
        .transpose()
}

fn manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    read_manifest(path).with_context(|| format!("reading manifest {}", path.display()))
}

/// Normalised features of every entry, in manifest order.
fn features(entries: &[ManifestEntry], cb: Option<&SyntheticCodebook>, cmvn: Option<&CmvnStats>) -> Result<Vec<Tensor<f32>>> {
    entries
        .iter()
        .map(|e| {
            let raw = load_features(e, cb).with_context(|| format!("utterance {}", e.id))?;
            Ok(match cmvn {
                Some(s) => apply_cmvn(&raw, s)?.data,
                None => raw.data,
            })
        })
        .collect()
}

fn decode_mode(s: &SearchArgs) -> Result<DecodeMode> {
    Ok(match s.mode {
        Mode::Greedy => DecodeMode::Greedy,
        Mode::Rescore => {
            if s.beam == 0 {
                bail!(UsageError("--beam must be at least 1".into()));
            }
            let weights = RescoreWeights::new(s.ctc_weight, s.reverse_weight).map_err(|e| UsageError(e.to_string()))?;
            DecodeMode::Rescore { beam: s.beam, weights }
        }
    })
}

fn emit(out: Option<&Path>, lines: &[String]) -> Result<()> {
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// Apply `f` to every item on `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let per = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(per).map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<R>>>())).collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked")?);
        }
        Ok(out)
    })
}

fn log_metrics(stage: u8, m: &TrainMetrics, log_every: usize, expert_every: usize) {
    if log_every > 0 && (m.step % log_every == 0 || m.step == 1) {
        let chunk = m.chunk.map_or("full".to_string(), |c| c.to_string());
        println!("stage={stage} {m} chunk={chunk}");
    }
    if let Some(h) = &m.expert_load {
        if expert_every > 0 && m.step % expert_every == 0 {
            println!("stage={stage} step={} expert_{h}", m.step);
        }
    }
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    if a.stage == 2 && !a.two_stage && a.checkpoint_in.is_none() {
        bail!(UsageError("stage 2 needs --checkpoint-in (a stage-1 checkpoint)".into()));
    }
    let cfg = model_config(cli, a.checkpoint_in.as_deref(), "toy-dense")?;
    let cb = codebook(&a.data)?;
    let train_entries = manifest(&a.data.manifest)?;
    let cmvn = match &a.cmvn {
        Some(p) => load_cmvn(p).with_context(|| format!("loading cmvn {}", p.display()))?,
        None => {
            let raw = train_entries.iter().map(|e| load_features(e, cb.as_ref())).collect::<Result<Vec<_>, _>>()?;
            estimate_cmvn(&raw)?
        }
    };
    let train = load_examples(&train_entries, cb.as_ref(), Some(&cmvn))?;
    let valid = match &a.valid {
        Some(p) => load_examples(&manifest(p)?, cb.as_ref(), Some(&cmvn))?,
        None => Vec::new(),
    };
    let base = TrainConfig {
        stage: a.stage,
        steps: a.steps,
        batch_size: a.batch_size,
        peak_lr: a.lr,
        warmup: a.warmup,
        seed: cli.seed,
        checkpoint_in: a.checkpoint_in.clone(),
        checkpoint_dir: (a.checkpoint_every > 0).then(|| a.out.join("periodic")),
        checkpoint_every: a.checkpoint_every,
        ..TrainConfig::default()
    };
    let (log_every, expert_every) = (a.log_every, a.expert_log_every);

    if a.two_stage {
        let s1 = TrainConfig { stage: 1, checkpoint_in: None, ..base.clone() };
        let s2 = TrainConfig { stage: 2, steps: a.stage2_steps.unwrap_or(a.steps), ..base };
        let valid_set = if valid.is_empty() { &train } else { &valid };
        let outcome = run_two_stage(&cfg, &s1, &s2, &train, valid_set, Some(&cmvn), &a.out, &mut |stage, m| {
            log_metrics(stage, m, log_every, expert_every)
        })?;
        println!("stage1_final_valid l_total={:.6}", outcome.stage1_final_valid.l_total);
        println!("stage2_initial_valid l_total={:.6}", outcome.stage2_initial_valid.l_total);
        println!("checkpoint stage1={} stage2={}", outcome.ckpt_stage1.display(), outcome.ckpt_stage2.display());
        return Ok(());
    }

    let stage = a.stage;
    let mut trainer = Trainer::from_config(&cfg, base)?;
    trainer.train(&train, &mut |m| log_metrics(stage, m, log_every, expert_every))?;
    save_checkpoint(&trainer.model, Some(&cmvn), &a.out)?;
    if !valid.is_empty() {
        let l = u2moe::training::evaluate(&trainer.model, &valid, None)?;
        println!("valid l_total={:.6} l_ctc={:.6} l_l2r={:.6} l_r2l={:.6}", l.l_total, l.l_ctc, l.l_aed_l2r, l.l_aed_r2l);
    }
    println!("checkpoint {}", a.out.display());
    Ok(())
}

fn load_model(cli: &Cli, dir: &Path) -> Result<(Model<f32>, Option<CmvnStats>)> {
    let cfg = model_config(cli, Some(dir), "toy-dense")?;
    load_checkpoint::<f32>(dir, &cfg).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn decode(cli: &Cli, a: &DecodeArgs) -> Result<()> {
    let mode = decode_mode(&a.search)?;
    if a.chunk == Some(0) {
        bail!(UsageError("--chunk must be at least 1".into()));
    }
    let (model, cmvn) = load_model(cli, &a.checkpoint)?;
    let entries = manifest(&a.data.manifest)?;
    let feats = features(&entries, codebook(&a.data)?.as_ref(), cmvn.as_ref())?;
    let jobs: Vec<(&ManifestEntry, &Tensor<f32>)> = entries.iter().zip(&feats).collect();
    let lines = parallel_map(&jobs, cli.workers, |(e, x)| {
        let r = decode_offline(&model, x, a.chunk, mode).with_context(|| format!("decoding {}", e.id))?;
        Ok(format_decode_line(&e.id, &r.tokens))
    })?;
    emit(a.out.as_deref(), &lines)
}

fn stream_decode(cli: &Cli, a: &StreamArgs) -> Result<()> {
    let mode = decode_mode(&a.search)?;
    if a.chunk == 0 || a.push_frames == 0 {
        bail!(UsageError("--chunk and --push-frames must be at least 1".into()));
    }
    let (model, cmvn) = load_model(cli, &a.checkpoint)?;
    let entries = manifest(&a.data.manifest)?;
    let feats = features(&entries, codebook(&a.data)?.as_ref(), cmvn.as_ref())?;
    let jobs: Vec<(&ManifestEntry, &Tensor<f32>)> = entries.iter().zip(&feats).collect();
    let lines = parallel_map(&jobs, cli.workers, |(e, x)| {
        let mut st = StreamState::new(&model, a.chunk, mode)?;
        let mut shown = Vec::new();
        let mut start = 0;
        while start < x.rows() {
            let end = (start + a.push_frames).min(x.rows());
            let partial = st.push(&x.slice_rows(start, end))?;
            if a.partials && partial != shown {
                eprintln!("{}", format_decode_line(&format!("{} partial@{end}", e.id), &partial));
                shown = partial;
            }
            start = end;
        }
        let r = st.finalize().with_context(|| format!("decoding {}", e.id))?;
        Ok(format_decode_line(&e.id, &r.tokens))
    })?;
    emit(a.out.as_deref(), &lines)
}

/// Reference lines may be decode output (`id<TAB>tokens`) or manifest lines
/// (`id<TAB>source<TAB>tokens`).
fn read_transcripts(path: &Path) -> Result<Vec<(String, Vec<usize>)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            if l.matches('\t').count() == 2 {
                let e: ManifestEntry = l.parse()?;
                Ok((e.id, e.tokens))
            } else {
                Ok(parse_decode_line(l)?)
            }
        })
        .collect::<Result<_>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn score(a: &ScoreArgs) -> Result<()> {
    if a.refs.len() != a.hyps.len() {
        bail!(UsageError(format!("got {} --ref but {} --hyp files; pass one --hyp per --ref", a.refs.len(), a.hyps.len())));
    }
    let mut sets = Vec::new();
    for (r, h) in a.refs.iter().zip(&a.hyps) {
        let refs = read_transcripts(r)?;
        let mut hyps: HashMap<String, Vec<usize>> = read_transcripts(h)?.into_iter().collect();
        let mut pairs = Vec::with_capacity(refs.len());
        for (id, reference) in refs {
            let hyp = hyps.remove(&id).unwrap_or_else(|| {
                eprintln!("warning: no hypothesis for {id}; scored as empty");
                Vec::new()
            });
            pairs.push((reference, hyp));
        }
        if !hyps.is_empty() {
            eprintln!("warning: {} hypotheses in {} have no reference and are ignored", hyps.len(), h.display());
        }
        let name = h.file_stem().map_or_else(|| h.display().to_string(), |s| s.to_string_lossy().into_owned());
        sets.push((name, pairs));
    }
    println!("{}", wer_report(&sets)?);
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    if cli.workers != 1 {
        bail!(UsageError(format!("comparison benchmarks require `--workers 1`, got {}", cli.workers)));
    }
    let mode = decode_mode(&a.search)?;
    let (model, cmvn) = match &a.checkpoint {
        Some(dir) => load_model(cli, dir)?,
        None => (Model::<f32>::new(&model_config(cli, None, "toy-dense")?, cli.seed)?, None),
    };
    let entries = manifest(&a.data.manifest)?;
    let feats = features(&entries, codebook(&a.data)?.as_ref(), cmvn.as_ref())?;
    let r = bench_rtf(&model, &a.tag, &feats, mode, a.chunk, a.runs, cli.workers)?;
    println!("{r}");
    Ok(())
}

fn cmvn(a: &CmvnArgs) -> Result<()> {
    let cb = codebook(&a.data)?;
    let raw = manifest(&a.data.manifest)?
        .iter()
        .map(|e| load_features(e, cb.as_ref()))
        .collect::<Result<Vec<_>, _>>()?;
    let stats = estimate_cmvn(&raw)?;
    save_cmvn(&stats, &a.out)?;
    println!("cmvn frames={} dim={} -> {}", stats.frame_count, stats.mean.len(), a.out.display());
    Ok(())
}

fn synth_corpus(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let cb = SyntheticCodebook::generate(a.v_toy, a.frames_per_token, a.dim, a.noise, cli.seed)
        .map_err(|e| UsageError(e.to_string()))?;
    fs::create_dir_all(&a.out)?;
    let cb_dir: PathBuf = a.out.join("codebook");
    save_codebook(&cb, &cb_dir)?;
    let train = synth_manifest("train", a.train, a.v_toy, a.min_len, a.max_len, cli.seed.wrapping_add(1))
        .map_err(|e| UsageError(e.to_string()))?;
    let valid = synth_manifest("valid", a.valid, a.v_toy, a.min_len, a.max_len, cli.seed.wrapping_add(2))?;
    write_manifest(&a.out.join("train.tsv"), &train)?;
    write_manifest(&a.out.join("valid.tsv"), &valid)?;
    println!(
        "codebook={} train={} ({} utts) valid={} ({} utts) min_prototype_distance={:.3}",
        cb_dir.display(),
        a.out.join("train.tsv").display(),
        train.len(),
        a.out.join("valid.tsv").display(),
        valid.len(),
        cb.min_pairwise_distance()
    );
    Ok(())
}
