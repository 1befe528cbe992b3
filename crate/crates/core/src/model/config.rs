use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::NUM_MEL;

/// Architecture and objective hyperparameters. `num_experts = 0` builds a
/// dense model; otherwise every FFN becomes a top-`topk` MoE layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub m_layers: usize,
    pub n_dec_layers: usize,
    pub d_att: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub cnn_kernel: usize,
    pub num_experts: usize,
    pub topk: usize,
    pub vocab: usize,
    pub feat_dim: usize,
    /// Probability of the full-context chunk in dynamic chunk training.
    pub p_full_chunk: f64,
    /// Upper bound of the uniformly sampled streaming chunk size.
    pub chunk_cap: usize,
    /// CTC weight λ.
    pub lambda: f64,
    /// Right-to-left decoder weight α.
    pub alpha: f64,
}

pub const SUBSAMPLE_FACTOR: usize = 8;

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            m_layers: 12,
            n_dec_layers: 3,
            d_att: 720,
            d_ff: 2880,
            heads: 8,
            cnn_kernel: 15,
            num_experts: 0,
            topk: 2,
            vocab: 6000,
            feat_dim: NUM_MEL,
            p_full_chunk: 0.5,
            chunk_cap: 25,
            lambda: 0.3,
            alpha: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn dense_225m() -> Self {
        Self::default()
    }

    pub fn moe_1b() -> Self {
        Self { num_experts: 8, ..Self::default() }
    }

    pub fn dense_1b() -> Self {
        Self { m_layers: 32, n_dec_layers: 6, d_att: 1024, d_ff: 4096, ..Self::default() }
    }

    /// Desk-scale dense model used for efficiency and learning checks.
    pub fn toy_dense() -> Self {
        Self { m_layers: 4, n_dec_layers: 1, d_att: 64, d_ff: 256, vocab: 32, ..Self::default() }
    }

    pub fn toy_moe() -> Self {
        Self { num_experts: 8, ..Self::toy_dense() }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "dense-225m" => Some(Self::dense_225m()),
            "moe-1b" => Some(Self::moe_1b()),
            "dense-1b" => Some(Self::dense_1b()),
            "toy-dense" => Some(Self::toy_dense()),
            "toy-moe" => Some(Self::toy_moe()),
            _ => None,
        }
    }

    pub fn is_moe(&self) -> bool {
        self.num_experts > 0
    }

    pub fn blank(&self) -> usize {
        0
    }

    /// `<sos>` and `<eos>` share the last vocabulary id.
    pub fn sos_eos(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("m_layers", self.m_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("d_att", self.d_att),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("cnn_kernel", self.cnn_kernel),
            ("chunk_cap", self.chunk_cap),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.d_att % self.heads != 0 {
            return Err(Error::config(format!(
                "d_att {} is not divisible by heads {}",
                self.d_att, self.heads
            )));
        }
        if self.num_experts > 0 && (self.topk == 0 || self.topk > self.num_experts) {
            return Err(Error::config(format!(
                "top-k {} must be in 1..={}",
                self.topk, self.num_experts
            )));
        }
        if self.vocab < 3 {
            return Err(Error::config("vocab needs blank, one token and <sos/eos>"));
        }
        if self.feat_dim < 15 {
            return Err(Error::config("feat_dim must be at least 15 for 1/8 subsampling"));
        }
        for (name, v) in [("p_full_chunk", self.p_full_chunk), ("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} = {v} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Parse flat `key = value` lines; `#` starts a comment. Unspecified
    /// keys keep their defaults. `ctc_weight` and `reverse_weight` are
    /// aliases of `lambda` and `alpha`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let location = format!("config line {}", i + 1);
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: location.clone(),
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let canonical = match key {
                "ctc_weight" => "lambda",
                "reverse_weight" => "alpha",
                k => k,
            };
            if seen.iter().any(|k| k == canonical) {
                return Err(Error::Parse { location, msg: format!("{key} given twice") });
            }
            let bad = || Error::Parse { location: location.clone(), msg: format!("bad value {value:?} for {key}") };
            match canonical {
                "m_layers" => cfg.m_layers = value.parse().map_err(|_| bad())?,
                "n_dec_layers" => cfg.n_dec_layers = value.parse().map_err(|_| bad())?,
                "d_att" => cfg.d_att = value.parse().map_err(|_| bad())?,
                "d_ff" => cfg.d_ff = value.parse().map_err(|_| bad())?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad())?,
                "cnn_kernel" => cfg.cnn_kernel = value.parse().map_err(|_| bad())?,
                "num_experts" => cfg.num_experts = value.parse().map_err(|_| bad())?,
                "topk" => cfg.topk = value.parse().map_err(|_| bad())?,
                "vocab" => cfg.vocab = value.parse().map_err(|_| bad())?,
                "feat_dim" => cfg.feat_dim = value.parse().map_err(|_| bad())?,
                "chunk_cap" => cfg.chunk_cap = value.parse().map_err(|_| bad())?,
                "p_full_chunk" => cfg.p_full_chunk = value.parse().map_err(|_| bad())?,
                "lambda" => cfg.lambda = value.parse().map_err(|_| bad())?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::Parse { location, msg: format!("unknown key {key:?}") }),
            }
            seen.push(canonical.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "m_layers = {}", self.m_layers)?;
        writeln!(f, "n_dec_layers = {}", self.n_dec_layers)?;
        writeln!(f, "d_att = {}", self.d_att)?;
        writeln!(f, "d_ff = {}", self.d_ff)?;
        writeln!(f, "heads = {}", self.heads)?;
        writeln!(f, "cnn_kernel = {}", self.cnn_kernel)?;
        writeln!(f, "num_experts = {}", self.num_experts)?;
        writeln!(f, "topk = {}", self.topk)?;
        writeln!(f, "vocab = {}", self.vocab)?;
        writeln!(f, "feat_dim = {}", self.feat_dim)?;
        writeln!(f, "p_full_chunk = {}", self.p_full_chunk)?;
        writeln!(f, "chunk_cap = {}", self.chunk_cap)?;
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "alpha = {}", self.alpha)
    }
}
