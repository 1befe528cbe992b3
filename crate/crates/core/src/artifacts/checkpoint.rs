//! Directory checkpoint: a UTF-8 `MANIFEST` with one
//! `name<TAB>dtype<TAB>dim0,dim1,…<TAB>filename` line per tensor and one raw
//! row-major little-endian f32 file per tensor.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{CmvnStats, SyntheticCodebook};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST: &str = "MANIFEST";
/// Model configuration written next to the manifest for convenience.
pub const CONFIG_FILE: &str = "model.cfg";
const DTYPE: &str = "f32";
const CMVN_MEAN: &str = "cmvn.mean";
const CMVN_INV_STD: &str = "cmvn.inv_std";
const CODEBOOK_PROTOTYPES: &str = "codebook.prototypes";
const CODEBOOK_SIGMA: &str = "codebook.noise_sigma";

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

fn file_name(name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect();
    format!("{safe}.bin")
}

/// Write named tensors into `dir` (created if missing).
pub fn write_tensors(dir: &Path, tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut seen = BTreeSet::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(['\t', '\n']) || !seen.insert(*name) {
            return Err(ckpt_err(dir, format!("invalid or duplicate tensor name {name:?}")));
        }
        let file = file_name(name);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{DTYPE}\t{}\t{file}\n", dims.join(",")));
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Read every tensor listed in `dir/MANIFEST`, in manifest order.
pub fn read_tensors(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| ckpt_err(&manifest_path, e.to_string()))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |msg: String| ckpt_err(&manifest_path, format!("line {}: {msg}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [name, dtype, dims, file] = fields[..] else {
            return Err(bad(format!("expected 4 tab-separated fields, got {}", fields.len())));
        };
        if dtype != DTYPE {
            return Err(bad(format!("unsupported dtype {dtype:?}")));
        }
        if !seen.insert(name.to_string()) {
            return Err(bad(format!("tensor {name} listed twice")));
        }
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',')
                .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad dimension {d:?}"))))
                .collect::<Result<Vec<_>>>()?
        };
        if file.contains(['/', '\\']) || file.starts_with("..") {
            return Err(bad(format!("tensor file {file:?} must be a plain file name")));
        }
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| ckpt_err(&path, format!("tensor {name}: {e}")))?;
        let numel: usize = shape.iter().product();
        if bytes.len() != numel * 4 {
            return Err(ckpt_err(
                &path,
                format!("tensor {name}: corrupt file, {} bytes for shape {shape:?} ({} expected)", bytes.len(), numel * 4),
            ));
        }
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        out.push((name.to_string(), Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Save model parameters (as f32), its configuration and optional CMVN
/// statistics.
pub fn save_checkpoint<F: Scalar>(model: &Model<F>, cmvn: Option<&CmvnStats>, dir: &Path) -> Result<()> {
    let values: Vec<(String, Tensor<f32>)> = model.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect();
    let mut refs: Vec<(&str, &Tensor<f32>)> = values.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if let Some(c) = cmvn {
        refs.push((CMVN_MEAN, &c.mean));
        refs.push((CMVN_INV_STD, &c.inv_std));
    }
    write_tensors(dir, &refs)?;
    fs::write(dir.join(CONFIG_FILE), model.config().to_string())?;
    Ok(())
}

/// Load a checkpoint into a model built from `config`. Every parameter of
/// the configuration must be present with the right shape and nothing else
/// (except CMVN statistics) may be present; no partial initialisation.
pub fn load_checkpoint<F: Scalar>(dir: &Path, config: &ModelConfig) -> Result<(Model<F>, Option<CmvnStats>)> {
    let mut tensors: HashMap<String, Tensor<f32>> = read_tensors(dir)?.into_iter().collect();
    let cmvn = match (tensors.remove(CMVN_MEAN), tensors.remove(CMVN_INV_STD)) {
        (Some(mean), Some(inv_std)) if mean.shape() == inv_std.shape() => {
            Some(CmvnStats { mean, inv_std, frame_count: 0 })
        }
        (None, None) => None,
        _ => return Err(ckpt_err(dir, "incomplete or inconsistent CMVN statistics")),
    };
    let mut model = Model::<F>::new(config, 0)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let ids: Vec<_> = model.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    for (name, shape) in &ids {
        match tensors.remove(name) {
            None => missing.push(name.clone()),
            Some(t) if t.shape() != shape.as_slice() => {
                mismatched.push(format!("{name} (checkpoint {:?}, config {shape:?})", t.shape()))
            }
            Some(t) => {
                let id = model.params.id(name).unwrap();
                model.params.set(id, t.cast())?;
            }
        }
    }
    let mut unexpected: Vec<String> = tensors.into_keys().collect();
    unexpected.sort();
    if !missing.is_empty() || !mismatched.is_empty() || !unexpected.is_empty() {
        let mut parts = Vec::new();
        let list = |v: &[String]| {
            let shown: Vec<&str> = v.iter().take(8).map(String::as_str).collect();
            let more = if v.len() > 8 { format!(" (+{} more)", v.len() - 8) } else { String::new() };
            format!("{}{more}", shown.join(", "))
        };
        if !missing.is_empty() {
            parts.push(format!("missing tensor(s): {}", list(&missing)));
        }
        if !mismatched.is_empty() {
            parts.push(format!("shape mismatch: {}", list(&mismatched)));
        }
        if !unexpected.is_empty() {
            parts.push(format!("tensor(s) not in the configuration: {}", list(&unexpected)));
        }
        return Err(ckpt_err(dir, format!("checkpoint does not match the configuration: {}", parts.join("; "))));
    }
    Ok((model, cmvn))
}

/// The configuration stored next to a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<ModelConfig> {
    ModelConfig::from_file(&dir.join(CONFIG_FILE))
}

pub fn save_codebook(cb: &SyntheticCodebook, dir: &Path) -> Result<()> {
    let sigma = Tensor::scalar(cb.noise_sigma);
    write_tensors(dir, &[(CODEBOOK_PROTOTYPES, &cb.prototypes), (CODEBOOK_SIGMA, &sigma)])
}

pub fn load_codebook(dir: &Path) -> Result<SyntheticCodebook> {
    let mut tensors: HashMap<String, Tensor<f32>> = read_tensors(dir)?.into_iter().collect();
    let (Some(protos), Some(sigma)) = (tensors.remove(CODEBOOK_PROTOTYPES), tensors.remove(CODEBOOK_SIGMA)) else {
        return Err(ckpt_err(dir, "not a codebook container"));
    };
    SyntheticCodebook::from_prototypes(protos, sigma.data()[0], 0)
}

pub fn save_cmvn(stats: &CmvnStats, dir: &Path) -> Result<()> {
    write_tensors(dir, &[(CMVN_MEAN, &stats.mean), (CMVN_INV_STD, &stats.inv_std)])
}

pub fn load_cmvn(dir: &Path) -> Result<CmvnStats> {
    let mut tensors: HashMap<String, Tensor<f32>> = read_tensors(dir)?.into_iter().collect();
    match (tensors.remove(CMVN_MEAN), tensors.remove(CMVN_INV_STD)) {
        (Some(mean), Some(inv_std)) if mean.shape() == inv_std.shape() => Ok(CmvnStats { mean, inv_std, frame_count: 0 }),
        _ => Err(ckpt_err(dir, "no CMVN statistics in container")),
    }
}
