use std::collections::HashMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::ModelConfig;

fn lp_from_probs(rows: &[Vec<f64>]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect::<Vec<_>>()).unwrap()
}

fn random_lp(t: usize, v: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let rows: Vec<Vec<f64>> = (0..t)
        .map(|_| {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            raw.iter().map(|x| x / z).collect()
        })
        .collect();
    lp_from_probs(&rows)
}

/// Sum of path probabilities per collapsed label sequence, by enumerating
/// every frame-level path.
fn exhaustive(lp: &Tensor<f64>, blank: usize) -> HashMap<Vec<usize>, f64> {
    let (t, v) = (lp.rows(), lp.cols());
    let mut out = HashMap::new();
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        let mut path = Vec::with_capacity(t);
        let mut logp = 0.0;
        for f in 0..t {
            let k = c % v;
            c /= v;
            path.push(k);
            logp += lp.row(f)[k];
        }
        let mut seq = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                seq.push(k);
            }
            prev = Some(k);
        }
        *out.entry(seq).or_insert(0.0) += logp.exp();
    }
    out
}

#[test]
fn greedy_collapse_rules() {
    let onehot = |ids: &[usize]| {
        let rows: Vec<Vec<f64>> =
            ids.iter().map(|&i| (0..3).map(|k| if k == i { 0.9 } else { 0.05 }).collect()).collect();
        lp_from_probs(&rows)
    };
    assert_eq!(ctc_greedy(&onehot(&[0, 1, 1, 0, 2]), 0), vec![1, 2]);
    assert_eq!(ctc_greedy(&onehot(&[0, 0, 0]), 0), Vec::<usize>::new());
    assert_eq!(ctc_greedy(&onehot(&[1, 0, 1]), 0), vec![1, 1]);
    // exact tie goes to the lower id
    let tie = lp_from_probs(&[vec![0.2, 0.4, 0.4]]);
    assert_eq!(ctc_greedy(&tie, 0), vec![1]);
}

#[test]
fn beam_beats_greedy_on_the_two_frame_example() {
    let lp = lp_from_probs(&[vec![0.6, 0.4], vec![0.6, 0.4]]);
    assert!(ctc_greedy(&lp, 0).is_empty());
    let nb = ctc_prefix_beam(&lp, 4, 0).unwrap();
    assert_eq!(nb.hypotheses[0].tokens, vec![1]);
    assert!((nb.hypotheses[0].ctc_log_prob - 0.64f64.ln()).abs() < 1e-12);
    assert_eq!(nb.hypotheses[1].tokens, Vec::<usize>::new());
    assert!((nb.hypotheses[1].ctc_log_prob - 0.36f64.ln()).abs() < 1e-12);
}

#[test]
fn unbounded_beam_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in 1..=5 {
        for v in 2..=3 {
            for _ in 0..5 {
                let lp = random_lp(t, v, &mut rng);
                let oracle = exhaustive(&lp, 0);
                let nb = ctc_prefix_beam(&lp, v.pow(t as u32), 0).unwrap();
                assert_eq!(nb.hypotheses.len(), oracle.len());
                for h in &nb.hypotheses {
                    assert!((h.ctc_log_prob - oracle[&h.tokens].ln()).abs() <= 1e-10, "{h:?}");
                    assert!(!h.tokens.contains(&0));
                }
                for w in nb.hypotheses.windows(2) {
                    assert!(w[0].ctc_log_prob >= w[1].ctc_log_prob);
                }
            }
        }
    }
}

#[test]
fn beam_of_one_on_peaked_input_equals_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| {
                let hot = rng.gen_range(0..4);
                (0..4).map(|k| if k == hot { 0.97 } else { 0.01 }).collect()
            })
            .collect();
        let lp = lp_from_probs(&rows);
        let nb = ctc_prefix_beam(&lp, 1, 0).unwrap();
        assert_eq!(nb.hypotheses.len(), 1);
        assert_eq!(nb.hypotheses[0].tokens, ctc_greedy(&lp, 0));
    }
}

#[test]
fn zero_beam_is_rejected() {
    assert!(matches!(ctc_prefix_beam(&Tensor::<f64>::zeros(&[1, 2]), 0, 0), Err(Error::Config(_))));
}

proptest! {
    #[test]
    fn greedy_is_invariant_under_monotone_transforms(seed in 0u64..1000, scale in 0.1f64..10.0, shift in -5.0f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lp = random_lp(10, 5, &mut rng);
        let transformed = lp.map(|x| (scale * x + shift).exp());
        prop_assert_eq!(ctc_greedy(&lp, 0), ctc_greedy(&transformed, 0));
    }
}

fn tiny() -> ModelConfig {
    ModelConfig { m_layers: 2, n_dec_layers: 1, d_att: 16, d_ff: 32, vocab: 6, ..ModelConfig::default() }
}

fn feats<F: Scalar>(rows: usize, dim: usize, seed: u64) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[rows, dim], |_| F::of(rng.gen_range(-1.0..1.0)))
}

fn nbest_of(hyps: &[(&[usize], f64)]) -> NBestList {
    NBestList {
        hypotheses: hyps.iter().map(|(t, s)| Hypothesis { tokens: t.to_vec(), ctc_log_prob: *s }).collect(),
        beam: hyps.len(),
    }
}

#[test]
fn rescoring_rules() {
    let m = Model::<f64>::new(&tiny(), 1).unwrap();
    let (enc, _) = encode_offline(&m, &feats(60, 80, 2), None).unwrap();
    let one = nbest_of(&[(&[3, 1], -4.0)]);
    for w in [RescoreWeights::default(), RescoreWeights::new(0.0, 1.0).unwrap(), RescoreWeights::new(7.0, 0.0).unwrap()] {
        assert_eq!(attention_rescore(&m, &one, &enc, w).unwrap().0, 0);
    }
    let twins = nbest_of(&[(&[2, 2], -1.0), (&[2, 2], -1.0)]);
    assert_eq!(attention_rescore(&m, &twins, &enc, RescoreWeights::default()).unwrap().0, 0);
    assert!(attention_rescore(&m, &nbest_of(&[]), &enc, RescoreWeights::default()).is_err());
    assert!(RescoreWeights::new(-0.1, 0.3).is_err());
    assert!(RescoreWeights::new(0.5, 1.1).is_err());
}

#[test]
fn batched_rescoring_matches_one_hypothesis_at_a_time() {
    let cfg = ModelConfig { num_experts: 4, topk: 2, ..tiny() };
    let m = Model::<f64>::new(&cfg, 3).unwrap();
    let (enc, _) = encode_offline(&m, &feats(60, 80, 5), None).unwrap();
    let nbest = nbest_of(&[(&[1, 2, 3], -1.0), (&[], -2.0), (&[4], -3.0), (&[2, 2, 5, 1, 3], -4.0)]);
    let (_, scored) = attention_rescore(&m, &nbest, &enc, RescoreWeights::default()).unwrap();
    for s in &scored {
        let l2r = decoder_log_likelihood(&m, &enc, &s.tokens, Direction::L2r).unwrap();
        let r2l = decoder_log_likelihood(&m, &enc, &s.tokens, Direction::R2l).unwrap();
        assert!((s.l2r_log_prob - l2r).abs() < 1e-10, "{} vs {l2r}", s.l2r_log_prob);
        assert!((s.r2l_log_prob - r2l).abs() < 1e-10, "{} vs {r2l}", s.r2l_log_prob);
    }
}

#[test]
fn pure_left_to_right_rescoring_matches_cross_entropy_ranking() {
    let cfg = tiny();
    let m = Model::<f64>::new(&cfg, 4).unwrap();
    let x = feats(60, 80, 5);
    let (enc, _) = encode_offline(&m, &x, None).unwrap();
    let hyps: Vec<Vec<usize>> = vec![vec![1], vec![2, 3], vec![4, 4, 1], vec![], vec![3, 2, 1, 2]];
    let nb = NBestList {
        hypotheses: hyps.iter().enumerate().map(|(i, h)| Hypothesis { tokens: h.clone(), ctc_log_prob: -(i as f64) }).collect(),
        beam: hyps.len(),
    };
    let (best, scored) = attention_rescore(&m, &nb, &enc, RescoreWeights::new(0.0, 0.0).unwrap()).unwrap();
    // oracle: full teacher-forced forward, explicit log-softmax per row
    let oracle: Vec<f64> = hyps
        .iter()
        .map(|h| {
            let mut t = Tape::no_grad();
            let p = m.params.bind(&mut t);
            let out = m.arch.forward(&mut t, &p, &x, Some(h), None).unwrap();
            let logits = t.value(out.l2r_logits.unwrap());
            let mut target = h.clone();
            target.push(cfg.sos_eos());
            target
                .iter()
                .enumerate()
                .map(|(u, &y)| {
                    let row = logits.row(u);
                    let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                    row[y] - lse
                })
                .sum()
        })
        .collect();
    for (s, o) in scored.iter().zip(&oracle) {
        assert!((s.score - o).abs() < 1e-9, "{} vs {o}", s.score);
    }
    let argmax = (0..oracle.len()).fold(0, |b, i| if oracle[i] > oracle[b] { i } else { b });
    assert_eq!(best, argmax);
}

#[test]
fn huge_ctc_weight_keeps_first_pass_order() {
    let m = Model::<f64>::new(&tiny(), 6).unwrap();
    let (enc, lp) = encode_offline(&m, &feats(90, 80, 7), None).unwrap();
    let nb = ctc_prefix_beam(&lp, 6, 0).unwrap();
    let (best, _) = attention_rescore(&m, &nb, &enc, RescoreWeights::new(1e6, 0.3).unwrap()).unwrap();
    assert_eq!(best, 0);
}

#[test]
fn decode_line_round_trip() {
    let line = format_decode_line("utt7", &[4, 0, 12]);
    assert_eq!(line, "utt7\t4 0 12");
    assert_eq!(parse_decode_line(&line).unwrap(), ("utt7".to_string(), vec![4, 0, 12]));
    assert_eq!(parse_decode_line("empty\t").unwrap().1, Vec::<usize>::new());
    assert!(parse_decode_line("no tab").is_err());
}

fn stream_in_pieces(m: &Model<f32>, x: &Tensor<f32>, chunk: usize, mode: DecodeMode, piece: usize) -> DecodeResult {
    let mut s = StreamState::new(m, chunk, mode).unwrap();
    let mut start = 0;
    while start < x.rows() {
        let end = (start + piece).min(x.rows());
        s.push(&x.slice_rows(start, end)).unwrap();
        assert!(s.buffered_raw_frames() < 15);
        start = end;
    }
    s.finalize().unwrap()
}

#[test]
fn stream_finalize_matches_offline_decode() {
    let m = Model::<f32>::new(&tiny(), 11).unwrap();
    for (seed, rows) in [(1u64, 95usize), (2, 130), (3, 23)] {
        let x = feats::<f32>(rows, 80, seed);
        let t_prime = crate::model::subsampled_len(rows).unwrap();
        for chunk in [1, 2, 4, t_prime, t_prime + 3] {
            for mode in [DecodeMode::Greedy, DecodeMode::default()] {
                let offline = decode_offline(&m, &x, Some(chunk), mode).unwrap();
                let streamed = stream_in_pieces(&m, &x, chunk, mode, rows);
                assert_eq!(streamed.tokens, offline.tokens, "chunk {chunk} mode {mode:?}");
            }
        }
        // C >= T' is the non-streaming decode
        assert_eq!(
            stream_in_pieces(&m, &x, t_prime, DecodeMode::default(), 7).tokens,
            decode_offline(&m, &x, None, DecodeMode::default()).unwrap().tokens
        );
    }
}

#[test]
fn stream_is_invariant_to_push_granularity() {
    let m = Model::<f32>::new(&tiny(), 12).unwrap();
    let x = feats::<f32>(150, 80, 13);
    let whole = stream_in_pieces(&m, &x, 4, DecodeMode::default(), 150);
    for piece in [1, 3, 8, 17] {
        let r = stream_in_pieces(&m, &x, 4, DecodeMode::default(), piece);
        assert_eq!(r.tokens, whole.tokens);
        assert_eq!(r.nbest, whole.nbest);
    }
}

#[test]
fn stream_lifecycle_errors_and_empty_stream() {
    let m = Model::<f32>::new(&tiny(), 14).unwrap();
    let mut s = StreamState::new(&m, 4, DecodeMode::default()).unwrap();
    assert!(s.push(&Tensor::zeros(&[0, 80])).unwrap().is_empty());
    assert_eq!(s.buffered_raw_frames(), 0);
    assert!(s.push(&Tensor::zeros(&[3, 40])).is_err());
    assert!(s.finalize().unwrap().tokens.is_empty());
    assert!(matches!(s.finalize(), Err(Error::Stream(_))));
    assert!(matches!(s.push(&Tensor::zeros(&[1, 80])), Err(Error::Stream(_))));
    assert!(StreamState::new(&m, 0, DecodeMode::Greedy).is_err());
}

#[test]
fn partial_tracks_encoded_chunks() {
    let m = Model::<f32>::new(&tiny(), 15).unwrap();
    let x = feats::<f32>(95, 80, 16);
    let mut s = StreamState::new(&m, 2, DecodeMode::default()).unwrap();
    s.push(&x.slice_rows(0, 22)).unwrap();
    // 22 raw frames give 1 subsampled frame: not a full chunk yet
    assert_eq!(s.encoded_frames(), 0);
    s.push(&x.slice_rows(22, 95)).unwrap();
    assert_eq!(s.encoded_frames(), 10);
    let (_, lp) = encode_offline(&m, &x, Some(2)).unwrap();
    let offline = ctc_prefix_beam(&lp.slice_rows(0, 10), DEFAULT_BEAM, 0).unwrap();
    assert_eq!(s.partial(), offline.hypotheses[0].tokens);
}

#[test]
fn edit_counts_examples() {
    let c = edit_counts(b"abc", b"axc");
    assert_eq!((c.substitutions, c.deletions, c.insertions, c.ref_len), (1, 0, 0, 3));
    assert_eq!(edit_counts(b"abc", b"abc").errors(), 0);
    let c = edit_counts(b"", b"ab");
    assert_eq!((c.insertions, c.ref_len), (2, 0));
    let c = edit_counts(b"abcd", b"bcd");
    assert_eq!((c.deletions, c.errors()), (1, 1));
}

#[test]
fn report_averaging_conventions() {
    let set = |n: usize, errs: usize| -> Vec<(Vec<u8>, Vec<u8>)> {
        let r = vec![b'a'; n];
        let mut h = r.clone();
        for x in h.iter_mut().take(errs) {
            *x = b'b';
        }
        vec![(r, h)]
    };
    let rep = wer_report(&[("set1".to_string(), set(10, 2)), ("set2".to_string(), set(90, 9))]).unwrap();
    assert!((rep.mean_wer - 15.0).abs() < 1e-12);
    assert!((rep.overall_wer - 11.0).abs() < 1e-12);
    let text = rep.to_string();
    assert!(text.contains("\nMEAN 15.00\nOVERALL 11.00"), "{text}");
    let r = wer_report(&[("s".to_string(), vec![(b"abc".to_vec(), b"axc".to_vec()), (vec![], b"z".to_vec())])]).unwrap();
    assert_eq!(r.sets[0].empty_refs, 1);
    assert!((r.overall_wer - 200.0 / 3.0).abs() < 1e-12);
    assert!(r.to_string().contains("1 empty references"));
    assert!(wer_report::<u8>(&[]).is_err());
    assert!(wer_report(&[("e".to_string(), vec![(vec![], vec![1u8])])]).is_err());
}

/// Independent oracle: minimum over all alignments of the cost, then the
/// counts must satisfy S + D + I = distance and D − I = n − m.
fn distance(a: &[u8], b: &[u8]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub = distance(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
    sub.min(distance(&a[1..], b) + 1).min(distance(a, &b[1..]) + 1)
}

proptest! {
    #[test]
    fn edit_counts_match_recursive_oracle(r in proptest::collection::vec(0u8..3, 0..7), h in proptest::collection::vec(0u8..3, 0..7)) {
        let c = edit_counts(&r, &h);
        prop_assert_eq!(c.errors(), distance(&r, &h));
        prop_assert_eq!(c.deletions as isize - c.insertions as isize, r.len() as isize - h.len() as isize);
        prop_assert!(c.substitutions + c.deletions <= r.len());
    }
}
