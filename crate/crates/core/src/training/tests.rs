use proptest::prelude::*;

use super::*;
use crate::params::ParamId;

fn tiny(e: usize) -> ModelConfig {
    ModelConfig {
        m_layers: 2,
        n_dec_layers: 1,
        d_att: 16,
        d_ff: 32,
        num_experts: e,
        topk: 2,
        vocab: 6,
        feat_dim: 20,
        ..ModelConfig::default()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<Example> {
    let cb = SyntheticCodebook::generate(4, 16, 20, 0.1, 7).unwrap();
    let entries = synth_manifest("u", n, 4, 2, 4, seed).unwrap();
    load_examples(&entries, Some(&cb), None).unwrap()
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 2, peak_lr: 3e-3, warmup: 20, ..TrainConfig::default() }
}

#[test]
fn adam_first_step_by_hand() {
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("x", Tensor::scalar(1.0)).unwrap();
    store.get_mut(id).grad = Tensor::scalar(0.5);
    let mut st = AdamState::new(&store);
    optimizer_update(&mut store, &mut st, 0.1, AdamConfig::default()).unwrap();
    // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
    let want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-9);
    assert!((store.get(id).value.data()[0] - want).abs() < 1e-15);
    assert!((st.m[0].data()[0] - 0.05).abs() < 1e-15);
    assert!((st.v[0].data()[0] - 0.02 * 0.25).abs() < 1e-15);

    // zero gradient: moments decay geometrically
    store.get_mut(id).grad = Tensor::scalar(0.0);
    optimizer_update(&mut store, &mut st, 0.0, AdamConfig::default()).unwrap();
    assert!((st.m[0].data()[0] - 0.9 * 0.05).abs() < 1e-15);
    assert!((st.v[0].data()[0] - 0.98 * 0.005).abs() < 1e-15);
}

#[test]
fn zero_gradient_from_fresh_state_changes_nothing() {
    let mut store = ParamStore::<f32>::new();
    store.insert("w", Tensor::full(&[3, 2], 0.7)).unwrap();
    let before = store.get(ParamId(0)).value.clone();
    let mut st = AdamState::new(&store);
    optimizer_update(&mut store, &mut st, 1.0, AdamConfig::default()).unwrap();
    assert_eq!(store.get(ParamId(0)).value.data(), before.data());
}

proptest! {
    #[test]
    fn warmup_is_linear(peak in 1e-4f64..1.0, warmup in 2usize..1000, s in 1usize..1000) {
        let sch = LrSchedule { peak_lr: peak, warmup };
        let s = s.min(warmup);
        prop_assert!((sch.lr(s) - peak * s as f64 / warmup as f64).abs() <= 1e-12 * peak);
        prop_assert!(sch.lr(warmup + 1) < sch.lr(warmup));
    }
}

#[test]
fn stage_two_needs_a_checkpoint() {
    let c = TrainConfig { stage: 2, ..cfg(1) };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    assert!(Trainer::from_config(&tiny(0), c).is_err());
    assert!(TrainConfig { stage: 3, ..cfg(1) }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..cfg(1) }.validate().is_err());
}

#[test]
fn batches_are_bucketed_and_reproducible() {
    let data = corpus(11, 1);
    let a = make_batches(&data, 3, 5, 0);
    assert_eq!(a, make_batches(&data, 3, 5, 0));
    assert_ne!(a, make_batches(&data, 3, 5, 1));
    let mut all: Vec<usize> = a.concat();
    all.sort();
    assert_eq!(all, (0..11).collect::<Vec<_>>());
    let mut sorted: Vec<usize> = (0..11).collect();
    sorted.sort_by_key(|&i| (data[i].feats.rows(), i));
    for b in &a {
        let pos: Vec<usize> = b.iter().map(|i| sorted.iter().position(|j| j == i).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[1] == w[0] + 1));
    }
}

fn run(model_cfg: &ModelConfig, c: TrainConfig, data: &[Example]) -> (Trainer, Vec<TrainMetrics>) {
    let mut t = Trainer::from_config(model_cfg, c).unwrap();
    let mut log = Vec::new();
    t.train(data, &mut |m| log.push(m.clone())).unwrap();
    (t, log)
}

#[test]
fn identical_runs_are_bit_identical() {
    let data = corpus(8, 2);
    for (e, stage) in [(0, 1), (3, 1)] {
        let c = TrainConfig { stage, ..cfg(10) };
        let (a, la) = run(&tiny(e), c.clone(), &data);
        let (b, lb) = run(&tiny(e), c, &data);
        for (x, y) in a.model.params.iter().zip(b.model.params.iter()) {
            assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
        }
        let strip = |l: &[TrainMetrics]| l.iter().map(|m| (m.losses, m.gnorm, m.chunk)).collect::<Vec<_>>();
        assert_eq!(strip(&la), strip(&lb));
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = corpus(4, 3);
    let fresh = Model::<f32>::new(&tiny(0), 0).unwrap();
    let (t, log) = run(&tiny(0), TrainConfig { peak_lr: 0.0, ..cfg(3) }, &data);
    assert_eq!(log.len(), 3);
    for (x, y) in fresh.params.iter().zip(t.model.params.iter()) {
        assert_eq!(x.value.data(), y.value.data());
    }
}

#[test]
fn overfits_a_single_batch() {
    let data = corpus(2, 4);
    let batch: Vec<&Example> = data.iter().collect();
    let mut t = Trainer::from_config(&tiny(0), TrainConfig { peak_lr: 5e-3, warmup: 20, ..cfg(200) }).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.train_step(&batch).unwrap().losses.l_total).collect();
    let initial = losses[0];
    assert!(losses[199] <= 0.1 * initial, "initial {initial}, final {}", losses[199]);
    // after warmup, the loss trend is downward: every 20-step window mean
    // is below the previous one
    let means: Vec<f64> = losses[20..].chunks(20).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
}

#[test]
fn metrics_log_line_and_expert_load() {
    let data = corpus(4, 5);
    let batch: Vec<&Example> = data.iter().take(2).collect();
    let mut dense = Trainer::from_config(&tiny(0), cfg(1)).unwrap();
    let m = dense.train_step(&batch).unwrap();
    assert!(m.expert_load.is_none());
    let line = m.to_string();
    let keys: Vec<&str> = line.split(' ').map(|kv| kv.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["step", "l_total", "l_ctc", "l_l2r", "l_r2l", "gnorm", "lr", "sec_per_step"]);
    assert!(line.starts_with("step=1 "));

    let mut moe = Trainer::from_config(&tiny(3), cfg(1)).unwrap();
    let m = moe.train_step(&batch).unwrap();
    let h = m.expert_load.unwrap();
    let frames: usize = batch.iter().map(|e| subsampled_len(e.feats.rows()).unwrap()).sum();
    let dec_tokens: usize = batch.iter().map(|e| e.tokens.len() + 1).sum();
    // every encoder slot routes every frame, every decoder slot every token
    assert_eq!(h.total, 2 * (2 * 2 * frames + 2 * dec_tokens));
    assert_eq!(h.counts.len(), 3);
}

#[test]
fn divergence_aborts_with_checkpoint_pointer() {
    let data = corpus(6, 6);
    let model = Model::<f32>::new(&tiny(0), 0).unwrap();
    let mut by_loss: Vec<(f64, usize)> =
        (0..data.len()).map(|i| (evaluate(&model, &data[i..i + 1], None).unwrap().l_total, i)).collect();
    by_loss.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (easy, hard) = (&data[by_loss[0].1], &data[by_loss[5].1]);
    let c = TrainConfig { peak_lr: 0.0, divergence_factor: 1.0 + 1e-9, ..cfg(5) };
    let mut t = Trainer::new(model, c).unwrap();
    t.train_step(&[easy]).unwrap();
    let err = t.train_step(&[hard]).unwrap_err();
    match err {
        Error::Diverged { step, reason } => {
            assert_eq!(step, 2);
            assert!(reason.contains("last good checkpoint: none"), "{reason}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn identical_experts_give_the_dense_step_zero_loss() {
    let data = corpus(4, 7);
    let dense = Model::<f32>::new(&tiny(0), 3).unwrap();
    let moe = dense.expand_to_moe(4, 2, 9).unwrap();
    let a = evaluate(&dense, &data, None).unwrap();
    let b = evaluate(&moe, &data, None).unwrap();
    assert!((a.l_total - b.l_total).abs() <= 1e-4, "{} vs {}", a.l_total, b.l_total);
}

#[test]
fn two_stage_hands_over_identical_weights() {
    let dir = tempfile::tempdir().unwrap();
    let train = corpus(6, 8);
    let valid = corpus(3, 9);
    let s1 = cfg(4);
    let s2 = TrainConfig { stage: 2, seed: 1, ..cfg(4) };
    let mut stages = Vec::new();
    let out = run_two_stage(&tiny(2), &s1, &s2, &train, &valid, None, dir.path(), &mut |s, m| {
        stages.push((s, m.chunk));
    })
    .unwrap();
    assert_eq!(out.stage2_initial_valid, out.stage1_final_valid);
    assert!(out.ckpt_stage1.join(crate::artifacts::MANIFEST).exists());
    assert!(out.ckpt_stage2.join(crate::artifacts::MANIFEST).exists());
    assert_eq!(stages.len(), 8);
    assert!(stages.iter().filter(|s| s.0 == 1).all(|s| s.1.is_none()));

    // stage-1 dense checkpoint cannot initialise an MoE stage 2
    let c = TrainConfig { stage: 2, checkpoint_in: Some(dir.path().join("stage1")), ..cfg(1) };
    let err = Trainer::from_config(&tiny(0), c).err().unwrap().to_string();
    assert!(err.contains("not in the configuration"), "{err}");
}

#[test]
fn dynamic_chunks_vary_in_stage_two() {
    let data = corpus(8, 10);
    let dir = tempfile::tempdir().unwrap();
    let m = Model::<f32>::new(&tiny(0), 0).unwrap();
    crate::artifacts::save_checkpoint(&m, None, dir.path()).unwrap();
    let c = TrainConfig { stage: 2, checkpoint_in: Some(dir.path().to_path_buf()), ..cfg(40) };
    let (_, log) = run(&tiny(0), c, &data);
    assert!(log.iter().any(|m| m.chunk.is_none()));
    assert!(log.iter().any(|m| m.chunk.is_some()));
}

#[test]
fn periodic_checkpoints_update_the_pointer() {
    let data = corpus(4, 11);
    let dir = tempfile::tempdir().unwrap();
    let c = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), checkpoint_every: 2, ..cfg(5) };
    let (t, _) = run(&tiny(0), c, &data);
    assert_eq!(t.last_checkpoint().unwrap(), dir.path().join("step4"));
    assert!(dir.path().join("step2").join(crate::artifacts::MANIFEST).exists());
}

#[test]
fn synthetic_manifest_shape() {
    let m = synth_manifest("tr", 50, 16, 3, 6, 1).unwrap();
    assert_eq!(m.len(), 50);
    assert!(m.iter().all(|e| (3..=6).contains(&e.tokens.len()) && e.tokens.iter().all(|&t| (1..=16).contains(&t))));
    assert_eq!(m[3].id, "tr00003");
    assert_eq!(m, synth_manifest("tr", 50, 16, 3, 6, 1).unwrap());
    assert!(synth_manifest("x", 1, 4, 3, 2, 0).is_err());
}
