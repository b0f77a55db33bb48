//! Checkpoint directories: `manifest.json` plus `params.bin` (and
//! `optimizer.bin` when optimizer state is saved). Directories are written
//! under a temporary name and renamed into place.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blob::{self, ArrayData, NamedArray};
use crate::grad::{DType, Real, Tensor};
use crate::{Error, Result};

use super::{ActionStats, ModelConfig, ParamStore};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const PARAMS_MAGIC: &[u8; 8] = b"TWAMPAR1";
const OPTIM_MAGIC: &[u8; 8] = b"TWAMOPT1";
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";
const OPTIM: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub num_train_steps: usize,
    pub step: u64,
    pub stage: String,
    pub base_seed: u64,
    /// Earlier checkpoints this one descends from, oldest first.
    pub lineage: Vec<String>,
    pub action_stats: ActionStats,
    pub params_sha256: String,
    pub optimizer_sha256: Option<String>,
}

/// A loaded checkpoint; parameters are converted to `f32`.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: CheckpointManifest,
    pub params: ParamStore<f32>,
    /// Named optimizer buffers, if saved.
    pub optimizer: Option<Vec<(String, Vec<f32>)>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn digest(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn encode_params<F: Real>(params: &ParamStore<F>) -> Vec<u8> {
    let arrays: Vec<NamedArray> = params
        .iter()
        .map(|(n, t)| {
            let data = match F::DTYPE {
                DType::F32 => ArrayData::F32(t.data().iter().map(|x| x.to_f32().unwrap()).collect()),
                DType::F64 => ArrayData::F64(t.data().iter().map(|x| x.to_f64().unwrap()).collect()),
            };
            NamedArray::new(n, t.shape(), data)
        })
        .collect();
    blob::encode(PARAMS_MAGIC, &arrays)
}

/// Writes a checkpoint directory atomically.
pub fn save_checkpoint<F: Real>(
    dir: &Path,
    mut manifest: CheckpointManifest,
    params: &ParamStore<F>,
    optimizer: Option<&[(String, Vec<f32>)]>,
) -> Result<()> {
    let parent = dir
        .parent()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no parent directory", dir.display())))?;
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let pbytes = encode_params(params);
    manifest.params_sha256 = digest(&pbytes);
    std::fs::write(tmp.join(PARAMS), &pbytes).map_err(|e| Error::io(tmp.join(PARAMS), e))?;
    manifest.optimizer_sha256 = None;
    if let Some(opt) = optimizer {
        let arrays: Vec<NamedArray> = opt
            .iter()
            .map(|(n, v)| NamedArray::new(n.clone(), &[v.len()], ArrayData::F32(v.clone())))
            .collect();
        let obytes = blob::encode(OPTIM_MAGIC, &arrays);
        manifest.optimizer_sha256 = Some(digest(&obytes));
        std::fs::write(tmp.join(OPTIM), &obytes).map_err(|e| Error::io(tmp.join(OPTIM), e))?;
    }
    manifest.format_version = CHECKPOINT_FORMAT_VERSION;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    std::fs::write(tmp.join(MANIFEST), json).map_err(|e| Error::io(tmp.join(MANIFEST), e))?;
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn read_verified(path: &Path, sha: &str) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if digest(&bytes) != sha {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    Ok(bytes)
}

fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            m.format_version
        )));
    }
    Ok(m)
}

fn to_f32(a: NamedArray) -> Result<(String, Vec<usize>, Vec<f32>)> {
    let data = match a.data {
        ArrayData::F32(v) => v,
        ArrayData::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        ArrayData::U8(_) => return Err(Error::Checkpoint(format!("tensor {} has dtype u8", a.name))),
    };
    Ok((a.name, a.shape, data))
}

/// Loads and validates a checkpoint: checksums, every expected tensor name
/// and every shape.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    manifest.model.validate()?;
    let pbytes = read_verified(&dir.join(PARAMS), &manifest.params_sha256)?;
    let named = blob::decode(PARAMS_MAGIC, &pbytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(PARAMS).display())))?
        .into_iter()
        .map(|a| to_f32(a).map(|(n, s, d)| (n, Tensor::new(&s, d))))
        .collect::<Result<Vec<_>>>()?;
    let params = ParamStore::from_named(named);
    params
        .validate(&manifest.model)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let optimizer = match &manifest.optimizer_sha256 {
        Some(sha) => {
            let obytes = read_verified(&dir.join(OPTIM), sha)?;
            let arrays = blob::decode(OPTIM_MAGIC, &obytes)?;
            Some(
                arrays
                    .into_iter()
                    .map(|a| to_f32(a).map(|(n, _, d)| (n, d)))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        manifest,
        params,
        optimizer,
    })
}

fn diff_json(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match y.get(k) {
                    Some(vb) => diff_json(&p, va, vb, out),
                    None => out.push(format!("{p}: {va} (absent in preset)")),
                }
            }
        }
        _ if a != b => out.push(format!("{prefix}: {a} (preset {b})")),
        _ => {}
    }
}

/// Human-readable summary: manifest, tensor table, and the fields where the
/// stored model config differs from `preset`.
pub fn inspect_checkpoint(dir: &Path, preset: &ModelConfig) -> Result<String> {
    let ck = load_checkpoint(dir)?;
    let m = &ck.manifest;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint {}", dir.display());
    let _ = writeln!(s, "  stage {}  step {}  base seed {}", m.stage, m.step, m.base_seed);
    let _ = writeln!(s, "  diffusion steps {}  lineage {:?}", m.num_train_steps, m.lineage);
    let _ = writeln!(s, "  variant {}  parameters {}", m.model.variant.label(), ck.params.num_scalars());
    let _ = writeln!(s, "tensors:");
    for (n, t) in ck.params.iter() {
        let _ = writeln!(s, "  {n:<24} {:?} {:?}", m.model.precision, t.shape());
    }
    let mut diffs = Vec::new();
    let a = serde_json::to_value(&m.model).expect("config serializes");
    let b = serde_json::to_value(preset).expect("config serializes");
    diff_json("model", &a, &b, &mut diffs);
    let _ = writeln!(s, "config differences from preset: {}", diffs.len());
    for d in diffs {
        let _ = writeln!(s, "  {d}");
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(cfg: &ModelConfig) -> CheckpointManifest {
        CheckpointManifest {
            format_version: 0,
            model: cfg.clone(),
            num_train_steps: 100,
            step: 5,
            stage: "finetune".into(),
            base_seed: 1,
            lineage: vec![],
            action_stats: ActionStats::identity(3),
            params_sha256: String::new(),
            optimizer_sha256: None,
        }
    }

    #[test]
    fn save_load_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::desk();
        let p = ParamStore::<f32>::init(&cfg, 3);
        let opt = vec![("m.type".to_string(), vec![1.0f32, 2.0])];
        let path = dir.path().join("ck");
        save_checkpoint(&path, manifest(&cfg), &p, Some(&opt)).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.optimizer.unwrap(), opt);
        assert_eq!(ck.manifest.step, 5);
        let text = inspect_checkpoint(&path, &ModelConfig::reference()).unwrap();
        assert!(text.contains("model.hidden: 64 (preset 768)"));
        assert!(inspect_checkpoint(&path, &cfg).unwrap().contains("differences from preset: 0"));
    }

    #[test]
    fn corruption_and_mismatch_fail_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig::tiny();
        let p = ParamStore::<f64>::init(&cfg, 0);
        let path = dir.path().join("ck");
        save_checkpoint(&path, manifest(&cfg), &p, None).unwrap();
        let blob_path = path.join(PARAMS);
        let mut bytes = std::fs::read(&blob_path).unwrap();
        let n = bytes.len();
        bytes[n - 1] ^= 0xff;
        std::fs::write(&blob_path, &bytes).unwrap();
        assert!(load_checkpoint(&path).unwrap_err().to_string().contains("checksum"));

        let other = ModelConfig::desk();
        save_checkpoint(&path, manifest(&other), &p, None).unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(!path.with_extension("partial").exists());
    }
}
