//! On-disk formats: frame-feature files, dataset manifests, checkpoints and label lists.
//!
//! Feature file (`FVF1`), all little-endian:
//!
//! ```text
//! "FVF1" | T: u32 | d: u32 | T*d f32, frame-major
//! ```
//!
//! Checkpoint: `"CLTA"`, a version byte, then blocks of
//! `name_len: u32 | name | rows: u32 | cols: u32 | rows*cols f64` until EOF.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{FrameSequence, FusionMode};
use crate::classifiers::ClassifierKind;
use crate::dataset::{Dataset, Sample, Split};
use crate::error::{CltaError, Result};
use crate::model::{AttentionKind, Model, ModelConfig, ProjectionStage};
use crate::numerics::{Matrix, ParamSet};

pub const FEATURE_MAGIC: &[u8; 4] = b"FVF1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CLTA";
pub const CHECKPOINT_VERSION: u8 = 1;
const FEATURE_HEADER: usize = 12;

fn format_err(path: &Path, offset: usize, msg: impl Into<String>) -> CltaError {
    CltaError::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(FEATURE_HEADER + 4 * m.as_slice().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for (i, &v) in m.as_slice().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(CltaError::Numeric {
                param: format!("feature[{i}] = {v} does not fit single precision"),
            });
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), "file shorter than the magic"));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(format_err(path, 0, format!("bad magic {:?}, expected \"FVF1\"", String::from_utf8_lossy(&bytes[..4]))));
    }
    if bytes.len() < FEATURE_HEADER {
        return Err(format_err(path, bytes.len(), "truncated header"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if t == 0 || d == 0 {
        return Err(format_err(path, 4, format!("empty shape {t}x{d}")));
    }
    let need = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(path, 4, "shape overflows"))?;
    let payload = &bytes[FEATURE_HEADER..];
    if payload.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: {} of {need} bytes for {t}x{d}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(format_err(path, FEATURE_HEADER + need, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(format_err(path, FEATURE_HEADER + 4 * i, format!("non-finite value {v}")));
        }
        data.push(v as f64);
    }
    Matrix::from_vec(t, d, data)
}

pub fn write_feature_file(path: &Path, m: &Matrix) -> Result<()> {
    let bytes = encode_features(m)?;
    fs::write(path, bytes).map_err(|e| CltaError::io(path, e))
}

/// Reads a feature file; the video id is the file stem.
pub fn read_feature_file(path: &Path) -> Result<FrameSequence> {
    let bytes = fs::read(path).map_err(|e| CltaError::io(path, e))?;
    let m = decode_features(&bytes, path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    FrameSequence::new(m, None, id)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    pub label: String,
    pub split: String,
    pub path: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| CltaError::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| CltaError::Manifest(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["video_id", "label", "split", "path"] {
        return Err(CltaError::Manifest(format!(
            "{}: header must be `video_id,label,split,path`, got `{}`",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| CltaError::Manifest(format!("{} row {}: {e}", path.display(), i + 2))))
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| CltaError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for e in entries {
        w.serialize(e).map_err(|e| CltaError::Manifest(e.to_string()))?;
    }
    w.flush().map_err(|e| CltaError::io(path, e))
}

/// Loads and validates every video referenced by a manifest.
/// Relative paths are resolved against the manifest's directory.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let entries = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert(e.video_id.as_str()) {
            return Err(CltaError::Manifest(format!("duplicate video id `{}`", e.video_id)));
        }
    }
    let samples: Vec<Sample> = entries
        .par_iter()
        .map(|e| {
            let split: Split = e.split.parse()?;
            let p = base.join(&e.path);
            if !p.is_file() {
                return Err(CltaError::Manifest(format!(
                    "video `{}` references missing file {}",
                    e.video_id,
                    p.display()
                )));
            }
            let mut seq = read_feature_file(&p)?;
            seq.video_id = e.video_id.clone();
            Ok(Sample {
                seq,
                label: e.label.clone(),
                split,
            })
        })
        .collect::<Result<_>>()?;
    let ds = Dataset { samples };
    ds.validate()?;
    Ok(ds)
}

/// Writes `<dir>/features/<video_id>.fvf` and `<dir>/manifest.csv`; returns the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    ds.validate()?;
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| CltaError::io(&feat_dir, e))?;
    let entries: Vec<ManifestEntry> = ds
        .samples
        .par_iter()
        .map(|s| {
            let rel = format!("features/{}.fvf", s.seq.video_id);
            write_feature_file(&dir.join(&rel), &s.seq.features)?;
            Ok(ManifestEntry {
                video_id: s.seq.video_id.clone(),
                label: s.label.clone(),
                split: s.split.name().to_string(),
                path: rel,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

fn config_blocks(c: &ModelConfig) -> Vec<(&'static str, f64)> {
    vec![
        ("config.attention", c.attention.code() as f64),
        ("config.k", c.k as f64),
        ("config.beta", c.beta),
        ("config.z", c.z as f64),
        ("config.dim", c.dim as f64),
        ("config.num_classes", c.num_classes as f64),
        (
            "config.fusion",
            match c.fusion {
                FusionMode::Average => 0.0,
                FusionMode::SoftWeight => 1.0,
            },
        ),
        (
            "config.classifier",
            match c.classifier {
                ClassifierKind::Softmax => 0.0,
                ClassifierKind::Cosine => 1.0,
            },
        ),
        ("config.hidden", c.hidden as f64),
        (
            "config.projection_stage",
            match c.projection_stage {
                ProjectionStage::Pre => 0.0,
                ProjectionStage::Post => 1.0,
            },
        ),
        ("config.batch_norm", if c.batch_norm { 1.0 } else { 0.0 }),
    ]
}

fn config_from_blocks(b: &BTreeMap<String, Matrix>) -> Result<ModelConfig> {
    let get = |name: &str| -> Result<f64> {
        b.get(name)
            .map(|m| m.get(0, 0))
            .ok_or_else(|| CltaError::config(format!("checkpoint lacks `{name}`")))
    };
    let count = |name: &str| -> Result<usize> {
        let v = get(name)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(CltaError::config(format!("checkpoint `{name}` = {v} is not a count")));
        }
        Ok(v as usize)
    };
    let code = count("config.attention")?;
    let cfg = ModelConfig {
        attention: AttentionKind::from_code(code as u32)
            .ok_or_else(|| CltaError::config(format!("unknown attention code {code}")))?,
        k: count("config.k")?,
        beta: get("config.beta")?,
        z: count("config.z")?,
        dim: count("config.dim")?,
        num_classes: count("config.num_classes")?,
        fusion: if count("config.fusion")? == 1 {
            FusionMode::SoftWeight
        } else {
            FusionMode::Average
        },
        classifier: if count("config.classifier")? == 1 {
            ClassifierKind::Cosine
        } else {
            ClassifierKind::Softmax
        },
        hidden: count("config.hidden")?,
        projection_stage: if count("config.projection_stage")? == 0 {
            ProjectionStage::Pre
        } else {
            ProjectionStage::Post
        },
        batch_norm: count("config.batch_norm")? == 1,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn push_block(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    for (name, v) in config_blocks(&model.config) {
        push_block(&mut out, name, &Matrix::filled(1, 1, v));
    }
    for (name, m) in model.params() {
        push_block(&mut out, name, m);
    }
    for (name, m) in model.buffers() {
        push_block(&mut out, &format!("buf.{name}"), m);
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Model> {
    if bytes.len() < 5 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(path, 0, "not a checkpoint (bad magic)"));
    }
    if bytes[4] != CHECKPOINT_VERSION {
        return Err(format_err(path, 4, format!("unsupported checkpoint version {}", bytes[4])));
    }
    let mut pos = 5;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() - *pos < n {
            return Err(format_err(path, *pos, format!("truncated block: need {n} bytes")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let read_u32 = |pos: &mut usize| -> Result<usize> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().expect("4 bytes")) as usize)
    };
    let mut blocks = BTreeMap::new();
    while pos < bytes.len() {
        let start = pos;
        let len = read_u32(&mut pos)?;
        let name = String::from_utf8(take(&mut pos, len)?.to_vec())
            .map_err(|_| format_err(path, start + 4, "block name is not UTF-8"))?;
        let rows = read_u32(&mut pos)?;
        let cols = read_u32(&mut pos)?;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format_err(path, start, "block shape overflows"))?;
        let payload_at = pos;
        let data: Vec<f64> = take(&mut pos, n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(format_err(path, payload_at + 8 * i, format!("non-finite value in `{name}`")));
        }
        let m = Matrix::from_vec(rows, cols, data).map_err(|_| format_err(path, start, format!("empty block `{name}`")))?;
        if blocks.insert(name.clone(), m).is_some() {
            return Err(format_err(path, start, format!("duplicate block `{name}`")));
        }
    }

    let config = config_from_blocks(&blocks)?;
    let mut model = Model::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut params = ParamSet::new();
    for (name, m) in &blocks {
        if !name.starts_with("config.") && !name.starts_with("buf.") {
            params.insert(name.clone(), m.clone());
        }
    }
    model.load_params(&params)?;
    for (name, slot) in model.buffers_mut() {
        let key = format!("buf.{name}");
        let m = blocks
            .get(&key)
            .ok_or_else(|| CltaError::shape(format!("checkpoint lacks `{key}`")))?;
        if !m.same_shape(slot) {
            return Err(CltaError::shape(format!("`{key}` has shape {:?}", m.shape())));
        }
        *slot = m.clone();
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| CltaError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| CltaError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Class list stored next to a checkpoint: `<checkpoint>.labels`.
pub fn labels_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

pub fn write_labels(path: &Path, names: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CltaError::io(path, e))?;
    for n in names {
        writeln!(f, "{n}").map_err(|e| CltaError::io(path, e))?;
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CltaError::io(path, e))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}
