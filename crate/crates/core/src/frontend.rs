//! Log-mel features, global CMVN, WAV input and the synthetic toy corpus.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400;
pub const FRAME_SHIFT: usize = 160;
pub const FRAME_LEN_MS: u32 = 25;
pub const FRAME_SHIFT_MS: u32 = 10;
pub const NUM_MEL: usize = 80;
pub const FFT_SIZE: usize = 512;
pub const LOG_FLOOR: f64 = 1e-10;
pub const CMVN_VAR_FLOOR: f64 = 1e-8;

/// Feature matrix `[T, dim]`, one row per 10 ms frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrames {
    pub data: Tensor<f32>,
}

impl FeatureFrames {
    pub fn new(data: Tensor<f32>) -> Result<Self> {
        if data.shape().len() != 2 || data.shape()[0] == 0 {
            return Err(Error::shape(format!("feature frames must be [T>=1, dim], got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn num_frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[1]
    }
}

pub fn num_frames(samples: usize) -> Option<usize> {
    (samples >= FRAME_LEN).then(|| 1 + (samples - FRAME_LEN) / FRAME_SHIFT)
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over the `FFT_SIZE/2 + 1` power bins,
/// `[NUM_MEL][bins]`, spanning 0 Hz to Nyquist.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let bins = FFT_SIZE / 2 + 1;
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..NUM_MEL + 2)
        .map(|i| mel_to_hz(top * i as f64 / (NUM_MEL + 1) as f64))
        .collect();
    (0..NUM_MEL)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|b| {
                    let f = b as f64 * SAMPLE_RATE as f64 / FFT_SIZE as f64;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// 80-bin log-mel energies: 25 ms Hamming frames every 10 ms, zero-padded
/// to a 512-point FFT, power spectrum, `ln(max(e, 1e-10))`.
pub fn compute_logmel(pcm: &[f32]) -> Result<FeatureFrames> {
    let frames = num_frames(pcm.len()).ok_or_else(|| {
        Error::TooShort(format!("{} samples, need at least {FRAME_LEN}", pcm.len()))
    })?;
    let window = hamming(FRAME_LEN);
    let bank = mel_filterbank();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0f64; FFT_SIZE / 2 + 1];
    let mut out = Vec::with_capacity(frames * NUM_MEL);
    for t in 0..frames {
        let chunk = &pcm[t * FRAME_SHIFT..t * FRAME_SHIFT + FRAME_LEN];
        for (i, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(chunk.get(i).map_or(0.0, |&s| s as f64 * window[i]), 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            out.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    FeatureFrames::new(Tensor::new(vec![frames, NUM_MEL], out)?)
}

/// Read a 16 kHz mono 16-bit PCM WAV file as samples in [-1, 1).
pub fn read_wav(path: &Path) -> Result<Vec<f32>> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE
        || spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::config(format!(
            "{}: expected 16 kHz mono 16-bit PCM, got {} Hz, {} channel(s), {}-bit {:?}",
            path.display(),
            spec.sample_rate,
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| Ok(s? as f32 / 32768.0))
        .collect()
}

pub fn write_wav(path: &Path, pcm: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in pcm {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Tensor<f32>,
    pub inv_std: Tensor<f32>,
    pub frame_count: usize,
}

pub fn estimate_cmvn<'a>(corpus: impl IntoIterator<Item = &'a FeatureFrames>) -> Result<CmvnStats> {
    let mut sum: Vec<f64> = Vec::new();
    let mut sq: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for utt in corpus {
        if sum.is_empty() {
            sum = vec![0.0; utt.dim()];
            sq = vec![0.0; utt.dim()];
        } else if utt.dim() != sum.len() {
            return Err(Error::shape(format!("feature dim {} vs {}", utt.dim(), sum.len())));
        }
        for r in 0..utt.num_frames() {
            for (d, &v) in utt.data.row(r).iter().enumerate() {
                sum[d] += v as f64;
                sq[d] += v as f64 * v as f64;
            }
        }
        count += utt.num_frames();
    }
    if count < 2 {
        return Err(Error::config(format!("CMVN needs at least 2 frames, got {count}")));
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let inv_std: Vec<f32> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (1.0 / ((q / n - m * m).max(0.0) + CMVN_VAR_FLOOR).sqrt()) as f32)
        .collect();
    let dim = mean.len();
    Ok(CmvnStats {
        mean: Tensor::new(vec![dim], mean.into_iter().map(|m| m as f32).collect())?,
        inv_std: Tensor::new(vec![dim], inv_std)?,
        frame_count: count,
    })
}

fn check_dims(frames: &FeatureFrames, stats: &CmvnStats) -> Result<()> {
    if frames.dim() != stats.mean.len() {
        return Err(Error::shape(format!(
            "features have {} dims, CMVN stats {}",
            frames.dim(),
            stats.mean.len()
        )));
    }
    Ok(())
}

/// `(x − mean) · inv_std` per dimension.
pub fn apply_cmvn(frames: &FeatureFrames, stats: &CmvnStats) -> Result<FeatureFrames> {
    check_dims(frames, stats)?;
    let mut out = frames.data.clone();
    let (m, s) = (stats.mean.data(), stats.inv_std.data());
    for r in 0..out.rows() {
        for (d, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = ((*v as f64 - m[d] as f64) * s[d] as f64) as f32;
        }
    }
    FeatureFrames::new(out)
}

/// Inverse of [`apply_cmvn`].
pub fn unapply_cmvn(frames: &FeatureFrames, stats: &CmvnStats) -> Result<FeatureFrames> {
    check_dims(frames, stats)?;
    let mut out = frames.data.clone();
    let (m, s) = (stats.mean.data(), stats.inv_std.data());
    for r in 0..out.rows() {
        for (d, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v as f64 / s[d] as f64 + m[d] as f64) as f32;
        }
    }
    FeatureFrames::new(out)
}

/// One `P`-frame feature template per toy token; utterances are the
/// concatenated templates plus Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCodebook {
    /// `[V_toy, P, dim]`
    pub prototypes: Tensor<f32>,
    pub noise_sigma: f32,
    pub seed: u64,
}

impl SyntheticCodebook {
    pub fn generate(v_toy: usize, p: usize, dim: usize, noise_sigma: f32, seed: u64) -> Result<Self> {
        if v_toy < 2 || p < 2 || dim == 0 {
            return Err(Error::config(format!(
                "codebook needs V_toy >= 2 and P >= 2, got V_toy={v_toy} P={p}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let prototypes = Tensor::from_fn(&[v_toy, p, dim], |_| normal.sample(&mut rng));
        Self::from_prototypes(prototypes, noise_sigma, seed)
    }

    pub fn from_prototypes(prototypes: Tensor<f32>, noise_sigma: f32, seed: u64) -> Result<Self> {
        let s = prototypes.shape();
        if s.len() != 3 || s[0] < 2 || s[1] < 2 {
            return Err(Error::shape(format!("prototypes must be [V>=2, P>=2, dim], got {s:?}")));
        }
        if !(noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        let cb = Self { prototypes, noise_sigma, seed };
        if cb.min_pairwise_distance() <= 0.0 {
            return Err(Error::config("codebook prototypes must be pairwise distinct"));
        }
        Ok(cb)
    }

    pub fn vocab(&self) -> usize {
        self.prototypes.shape()[0]
    }

    pub fn frames_per_token(&self) -> usize {
        self.prototypes.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.prototypes.shape()[2]
    }

    pub fn prototype(&self, token: usize) -> &[f32] {
        let n = self.frames_per_token() * self.dim();
        &self.prototypes.data()[token * n..(token + 1) * n]
    }

    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.vocab() {
            for b in a + 1..self.vocab() {
                let d: f64 = self
                    .prototype(a)
                    .iter()
                    .zip(self.prototype(b))
                    .map(|(&x, &y)| ((x - y) as f64).powi(2))
                    .sum();
                best = best.min(d.sqrt());
            }
        }
        best
    }

    /// Index of the prototype nearest (L2) to the `P`-frame block `frames`.
    pub fn nearest(&self, block: &[f32]) -> usize {
        (0..self.vocab())
            .map(|v| {
                let d: f64 = self
                    .prototype(v)
                    .iter()
                    .zip(block)
                    .map(|(&x, &y)| ((x - y) as f64).powi(2))
                    .sum();
                (v, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }
}

/// Concatenate the prototypes of `labels` (codebook indices) and add
/// i.i.d. `N(0, noise_sigma²)` noise drawn from `seed`.
pub fn synth_utterance(labels: &[usize], codebook: &SyntheticCodebook, seed: u64) -> Result<FeatureFrames> {
    if labels.is_empty() {
        return Err(Error::config("synthetic utterance needs at least one label"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= codebook.vocab()) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: codebook.vocab() });
    }
    let (p, dim) = (codebook.frames_per_token(), codebook.dim());
    let mut data = Vec::with_capacity(labels.len() * p * dim);
    for &l in labels {
        data.extend_from_slice(codebook.prototype(l));
    }
    if codebook.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, codebook.noise_sigma).unwrap();
        for v in &mut data {
            *v += normal.sample(&mut rng);
        }
    }
    FeatureFrames::new(Tensor::new(vec![labels.len() * p, dim], data)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AudioSource {
    Wav(PathBuf),
    Synth(u64),
}

impl fmt::Display for AudioSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Wav(p) => write!(f, "{}", p.display()),
            Self::Synth(seed) => write!(f, "SYNTH:{seed}"),
        }
    }
}

/// One manifest line: `utt_id<TAB>path-or-SYNTH:<seed><TAB>token ids`.
/// Token ids are model vocabulary ids; for synthetic audio, id `i` is
/// rendered with codebook prototype `i − 1` because id 0 is the blank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: AudioSource,
    pub tokens: Vec<usize>,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let toks: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        write!(f, "{}\t{}\t{}", self.id, self.source, toks.join(" "))
    }
}

impl FromStr for ManifestEntry {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let parse_err = |msg: String| Error::Parse { location: "manifest".into(), msg };
        let mut parts = line.split('\t');
        let (Some(id), Some(src), Some(toks), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(parse_err(format!("expected 3 tab-separated fields: {line:?}")));
        };
        if id.is_empty() {
            return Err(parse_err("empty utterance id".into()));
        }
        let source = match src.strip_prefix("SYNTH:") {
            Some(seed) => AudioSource::Synth(
                seed.parse()
                    .map_err(|_| parse_err(format!("bad synthetic seed {seed:?}")))?,
            ),
            None => AudioSource::Wav(PathBuf::from(src)),
        };
        let tokens = toks
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| parse_err(format!("bad token id {t:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self { id: id.to_string(), source, tokens })
    }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.parse().map_err(|e| match e {
                Error::Parse { msg, .. } => Error::Parse { location: format!("manifest line {}", i + 1), msg },
                other => other,
            })
        })
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&std::fs::read_to_string(path)?)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&e.to_string());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Raw (un-normalised) features of a manifest entry.
pub fn load_features(entry: &ManifestEntry, codebook: Option<&SyntheticCodebook>) -> Result<FeatureFrames> {
    match &entry.source {
        AudioSource::Wav(path) => compute_logmel(&read_wav(path)?),
        AudioSource::Synth(seed) => {
            let cb = codebook.ok_or_else(|| Error::config("synthetic manifest entry needs a codebook"))?;
            let labels = entry
                .tokens
                .iter()
                .map(|&t| {
                    t.checked_sub(1)
                        .ok_or(Error::TokenOutOfRange { id: t, vocab: cb.vocab() + 1 })
                })
                .collect::<Result<Vec<_>>>()?;
            synth_utterance(&labels, cb, *seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, samples: usize) -> Vec<f32> {
        (0..samples)
            .map(|i| (0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64).sin()) as f32)
            .collect()
    }

    #[test]
    fn frame_counts() {
        assert_eq!(compute_logmel(&vec![0.0; 400]).unwrap().num_frames(), 1);
        assert_eq!(compute_logmel(&vec![0.0; 16000]).unwrap().num_frames(), 98);
        assert!(matches!(compute_logmel(&vec![0.0; 399]), Err(Error::TooShort(_))));
        let msg = compute_logmel(&[]).unwrap_err().to_string();
        assert!(msg.contains("utterance too short"), "{msg}");
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let f = compute_logmel(&vec![0.0; 800]).unwrap();
        let floor = (LOG_FLOOR.ln()) as f32;
        assert!(f.data.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn every_filter_covers_some_bin() {
        let bank = mel_filterbank();
        assert_eq!(bank.len(), NUM_MEL);
        for (m, f) in bank.iter().enumerate() {
            assert!(f.iter().any(|&w| w > 0.0), "filter {m} is empty");
        }
        // the first and last filter hug 0 Hz and 8 kHz
        assert!(bank[0][1] > 0.0);
        assert!(bank[NUM_MEL - 1][FFT_SIZE / 2 - 1] > 0.0);
    }

    #[test]
    fn matches_direct_dft_oracle() {
        let pcm: Vec<f32> = sine(440.0, 1200)
            .iter()
            .zip(sine(2900.0, 1200))
            .map(|(a, b)| a + 0.3 * b)
            .collect();
        let feats = compute_logmel(&pcm).unwrap();
        let window = hamming(FRAME_LEN);
        let bank = mel_filterbank();
        for t in [0, 3, feats.num_frames() - 1] {
            let frame: Vec<f64> = (0..FRAME_LEN)
                .map(|i| pcm[t * FRAME_SHIFT + i] as f64 * window[i])
                .collect();
            let power: Vec<f64> = (0..=FFT_SIZE / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (n, &x) in frame.iter().enumerate() {
                        let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / FFT_SIZE as f64;
                        re += x * ang.cos();
                        im += x * ang.sin();
                    }
                    re * re + im * im
                })
                .collect();
            for (m, filt) in bank.iter().enumerate() {
                let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
                let want = e.max(LOG_FLOOR).ln();
                let got = feats.data.row(t)[m] as f64;
                assert!((got - want).abs() < 1e-4, "t={t} m={m}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn sine_peaks_in_the_matching_filter() {
        let feats = compute_logmel(&sine(1000.0, 8000)).unwrap();
        let arg = feats.data.argmax_rows();
        assert!(arg.iter().all(|&a| a == arg[0]), "{arg:?}");
        let bank = mel_filterbank();
        let bin_1k = (1000.0 * FFT_SIZE as f64 / SAMPLE_RATE as f64).round() as usize;
        assert!(bank[arg[0]][bin_1k] > 0.0, "peak filter {} misses 1 kHz", arg[0]);
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let pcm = sine(300.0, 1000);
        write_wav(&path, &pcm).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), pcm.len());
        assert!(pcm.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-4));

        let spec = hound::WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
        let bad = dir.path().join("b.wav");
        let mut w = hound::WavWriter::create(&bad, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&bad), Err(Error::Config(_))));
    }

    fn frames(rows: &[Vec<f32>]) -> FeatureFrames {
        FeatureFrames::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cmvn_hand_values() {
        let s = estimate_cmvn([&frames(&[vec![0.0; 3], vec![2.0; 3]])]).unwrap();
        assert_eq!(s.mean.data(), &[1.0; 3]);
        assert!(s.inv_std.data().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert_eq!(s.frame_count, 2);

        let s = estimate_cmvn([&frames(&vec![vec![5.0; 2]; 4])]).unwrap();
        assert_eq!(s.mean.data(), &[5.0; 2]);
        assert!(s.inv_std.data().iter().all(|&v| (v - 1e4).abs() < 1e-2));

        assert!(estimate_cmvn([&frames(&[vec![1.0]])]).is_err());
    }

    #[test]
    fn apply_cmvn_hand_values() {
        let stats = CmvnStats {
            mean: Tensor::new(vec![1], vec![1.0]).unwrap(),
            inv_std: Tensor::new(vec![1], vec![0.5]).unwrap(),
            frame_count: 2,
        };
        assert_eq!(apply_cmvn(&frames(&[vec![3.0]]), &stats).unwrap().data.data(), &[1.0]);
        assert_eq!(apply_cmvn(&frames(&[vec![1.0]]), &stats).unwrap().data.data(), &[0.0]);
        let identity = CmvnStats {
            mean: Tensor::zeros(&[2]),
            inv_std: Tensor::full(&[2], 1.0),
            frame_count: 2,
        };
        let x = frames(&[vec![0.3, -2.0]]);
        assert_eq!(apply_cmvn(&x, &identity).unwrap(), x);
        assert!(apply_cmvn(&x, &stats).is_err());
    }

    #[test]
    fn cmvn_normalises_the_corpus() {
        let cb = SyntheticCodebook::generate(5, 4, 8, 0.7, 1).unwrap();
        let corpus: Vec<FeatureFrames> = (0..20)
            .map(|i| synth_utterance(&[i % 5, (i + 2) % 5, 1], &cb, i as u64).unwrap())
            .collect();
        let stats = estimate_cmvn(&corpus).unwrap();
        let normed: Vec<FeatureFrames> = corpus.iter().map(|f| apply_cmvn(f, &stats).unwrap()).collect();
        let again = estimate_cmvn(&normed).unwrap();
        for d in 0..8 {
            assert!(again.mean.data()[d].abs() < 1e-3);
            let var = 1.0 / (again.inv_std.data()[d] as f64).powi(2);
            assert!((var - 1.0).abs() < 1e-2);
        }
    }

    #[test]
    fn synth_examples() {
        let cb = SyntheticCodebook::generate(3, 4, 6, 0.0, 2).unwrap();
        let u = synth_utterance(&[0], &cb, 9).unwrap();
        assert_eq!(u.data.data(), cb.prototype(0));
        assert_eq!(synth_utterance(&[0, 1], &cb, 9).unwrap().num_frames(), 8);
        assert!(matches!(synth_utterance(&[3], &cb, 0), Err(Error::TokenOutOfRange { .. })));
        assert!(synth_utterance(&[], &cb, 0).is_err());

        let noisy = SyntheticCodebook::generate(3, 4, 6, 0.5, 2).unwrap();
        let a = synth_utterance(&[2, 1, 0], &noisy, 77).unwrap();
        let b = synth_utterance(&[2, 1, 0], &noisy, 77).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_utterance(&[2, 1, 0], &noisy, 78).unwrap());
    }

    #[test]
    fn codebook_validation() {
        assert!(SyntheticCodebook::generate(1, 4, 6, 0.0, 0).is_err());
        assert!(SyntheticCodebook::generate(3, 1, 6, 0.0, 0).is_err());
        let dup = Tensor::<f32>::zeros(&[2, 2, 3]);
        assert!(SyntheticCodebook::from_prototypes(dup, 0.1, 0).is_err());
    }

    #[test]
    fn noiseless_frames_are_separable() {
        let cb = SyntheticCodebook::generate(16, 16, NUM_MEL, 0.0, 3).unwrap();
        let labels: Vec<usize> = (0..16).rev().chain(0..16).collect();
        let u = synth_utterance(&labels, &cb, 0).unwrap();
        let block = 16 * NUM_MEL;
        for (i, &l) in labels.iter().enumerate() {
            assert_eq!(cb.nearest(&u.data.data()[i * block..(i + 1) * block]), l);
        }
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let entries = vec![
            ManifestEntry { id: "u1".into(), source: AudioSource::Synth(42), tokens: vec![3, 1, 16] },
            ManifestEntry { id: "u2".into(), source: AudioSource::Wav("a/b.wav".into()), tokens: vec![] },
        ];
        let text: String = entries.iter().map(|e| format!("{e}\n")).collect();
        assert_eq!(text.lines().next().unwrap(), "u1\tSYNTH:42\t3 1 16");
        assert_eq!(parse_manifest(&text).unwrap(), entries);
        let err = parse_manifest("ok\tSYNTH:1\t1\nbad line\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(parse_manifest("u\tSYNTH:x\t1").is_err());
        assert!(parse_manifest("u\tSYNTH:1\t1 a").is_err());
    }

    #[test]
    fn synthetic_entries_shift_ids_past_blank() {
        let cb = SyntheticCodebook::generate(3, 2, 4, 0.0, 5).unwrap();
        let e = ManifestEntry { id: "x".into(), source: AudioSource::Synth(1), tokens: vec![1, 3] };
        let f = load_features(&e, Some(&cb)).unwrap();
        assert_eq!(&f.data.data()[..8], cb.prototype(0));
        assert_eq!(&f.data.data()[8..], cb.prototype(2));
        let blank = ManifestEntry { tokens: vec![0], ..e.clone() };
        assert!(load_features(&blank, Some(&cb)).is_err());
        assert!(load_features(&e, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn frame_count_formula(len in 400usize..4000) {
            let f = compute_logmel(&vec![0.01; len]).unwrap();
            prop_assert_eq!(f.num_frames(), 1 + (len - 400) / 160);
            prop_assert!(f.data.all_finite());
        }

        #[test]
        fn cmvn_is_invertible(vals in prop::collection::vec(-50.0f32..50.0, 12..48), scale in 0.1f32..10.0) {
            let rows: Vec<Vec<f32>> = vals.chunks_exact(4).map(|c| c.iter().map(|v| v * scale).collect()).collect();
            let x = frames(&rows);
            let stats = estimate_cmvn([&x]).unwrap();
            let back = unapply_cmvn(&apply_cmvn(&x, &stats).unwrap(), &stats).unwrap();
            // f32 storage: error is relative to the magnitude of each column
            for d in 0..4 {
                let col: Vec<f32> = (0..rows.len()).map(|r| x.data.row(r)[d]).collect();
                let scale = col.iter().fold(1.0f32, |m, v| m.max(v.abs()));
                for (r, a) in col.iter().enumerate() {
                    prop_assert!((a - back.data.row(r)[d]).abs() / scale < 1e-6);
                }
            }
        }
    }
}
