//! On-disk formats: `TNSR` tensor files, scene directories, dataset
//! manifests and checkpoints.
//!
//! Tensor file layout (all little-endian):
//!
//! | offset     | field                                   |
//! |------------|-----------------------------------------|
//! | 0          | magic `b"TNSR"`                         |
//! | 4          | `u32` version (= 1)                     |
//! | 8          | `u32` dtype: 0 = f64, 1 = f32, 2 = u8   |
//! | 12         | `u32` rank                              |
//! | 16         | `rank × u64` dims                       |
//! | 16 + 8·rank| row-major payload                       |

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Moments, Tensor};
use crate::error::{Error, Result};
use crate::geometry::is_rotation;
use crate::synth::{PatchBundle, Scene, SceneAnnotation};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
    U8,
}

impl DType {
    pub fn code(self) -> u32 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(DType::F64),
            1 => Some(DType::F32),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// Decoded tensor file. Values are widened to `f64`, which is exact for
/// every stored dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim("TensorFile::new", &shape, &[data.len()]));
        }
        let representable = |v: &f64| match dtype {
            DType::F64 => true,
            DType::F32 => (*v as f32) as f64 == *v || v.is_nan(),
            DType::U8 => *v >= 0.0 && *v <= 255.0 && v.fract() == 0.0,
        };
        if let Some(bad) = data.iter().find(|v| !representable(v)) {
            return Err(Error::Contract(format!("value {bad} is not exactly representable as {dtype:?}")));
        }
        Ok(TensorFile { dtype, shape, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.shape.len() + self.dtype.size() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype.code().to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &self.data {
            match self.dtype {
                DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                DType::U8 => out.push(*v as u8),
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg,
        };
        let u32_at = |off: usize| -> Result<u32> {
            bytes
                .get(off..off + 4)
                .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
                .ok_or_else(|| fail(bytes.len(), format!("header truncated, expected 4 bytes at {off}")))
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(fail(0, "bad magic, expected \"TNSR\"".into()));
        }
        let version = u32_at(4)?;
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let code = u32_at(8)?;
        let dtype = DType::from_code(code).ok_or_else(|| fail(8, format!("unknown dtype code {code}")))?;
        let rank = u32_at(12)? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut off = 16;
        let mut count: usize = 1;
        for _ in 0..rank {
            let d = bytes
                .get(off..off + 8)
                .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
                .ok_or_else(|| fail(bytes.len(), format!("dims truncated, expected 8 bytes at {off}")))?;
            let d = usize::try_from(d).map_err(|_| fail(off, format!("dimension {d} too large")))?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| fail(off, "element count overflows".into()))?;
            shape.push(d);
            off += 8;
        }
        let need = count
            .checked_mul(dtype.size())
            .and_then(|n| n.checked_add(off))
            .ok_or_else(|| fail(off, "payload size overflows".into()))?;
        if bytes.len() < need {
            return Err(fail(
                bytes.len(),
                format!("payload truncated: {} of {} bytes", bytes.len() - off, need - off),
            ));
        }
        if bytes.len() > need {
            return Err(fail(need, format!("{} trailing bytes after payload", bytes.len() - need)));
        }
        let payload = &bytes[off..need];
        let data = match dtype {
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            DType::U8 => payload.iter().map(|b| *b as f64).collect(),
        };
        Ok(TensorFile { dtype, shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    TensorFile::new(DType::F64, t.shape().to_vec(), t.data().to_vec())?.write(path)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let f = TensorFile::read(path)?;
    Tensor::new(f.shape, f.data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub const SCENE_FILES: [&str; 6] = [
    "rgb.tnsr",
    "depth_gt.tnsr",
    "depth_raw.tnsr",
    "normal_gt.tnsr",
    "mask.tnsr",
    "meta.json",
];

pub fn save_scene(dir: &Path, scene: &Scene) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = &scene.bundle;
    let p = b.size;
    let mask: Vec<f64> = b.mask.iter().map(|m| *m as f64).collect();
    TensorFile::new(DType::F32, vec![p, p, 3], b.rgb.clone())?.write(&dir.join("rgb.tnsr"))?;
    TensorFile::new(DType::F32, vec![p, p], b.depth_gt.clone())?.write(&dir.join("depth_gt.tnsr"))?;
    TensorFile::new(DType::F32, vec![p, p], b.depth_raw.clone())?.write(&dir.join("depth_raw.tnsr"))?;
    TensorFile::new(DType::F32, vec![p, p, 3], b.normal_gt.clone())?.write(&dir.join("normal_gt.tnsr"))?;
    TensorFile::new(DType::U8, vec![p, p], mask)?.write(&dir.join("mask.tnsr"))?;
    write_json(&dir.join("meta.json"), &scene.annotation)
}

fn load_err(path: &Path, field: &str, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        field: field.to_string(),
        msg: msg.into(),
    }
}

fn load_field(dir: &Path, name: &str, shape: &[usize]) -> Result<TensorFile> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(load_err(dir, name, "file is missing"));
    }
    let f = TensorFile::read(&path)?;
    if f.shape != shape {
        return Err(load_err(dir, name, format!("shape {:?}, expected {:?}", f.shape, shape)));
    }
    Ok(f)
}

/// Loads and cross-validates a scene directory.
pub fn load_scene(dir: &Path) -> Result<(PatchBundle, SceneAnnotation)> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(load_err(dir, "meta.json", "file is missing"));
    }
    let ann: SceneAnnotation = read_json(&meta_path)?;
    ann.k.validate().map_err(|e| load_err(dir, "K", e.to_string()))?;
    if ann.patch_box[2] <= 0.0 || ann.patch_box[3] <= 0.0 {
        return Err(load_err(dir, "patch_box", "non-positive crop size"));
    }
    for (i, obj) in ann.objects.iter().enumerate() {
        let pose = obj.pose();
        if !is_rotation(&pose.r, 1e-6) {
            return Err(load_err(dir, &format!("objects[{i}].R"), "not a rotation within 1e-6"));
        }
        if pose.s.iter().any(|v| !(*v > 0.0)) {
            return Err(load_err(dir, &format!("objects[{i}].s"), "extents must be positive"));
        }
        if obj.symmetric != obj.category.symmetric() {
            return Err(load_err(dir, &format!("objects[{i}].symmetric"), "disagrees with category"));
        }
    }
    let p = ann.patch_size;
    let rgb = load_field(dir, "rgb.tnsr", &[p, p, 3])?;
    let depth_gt = load_field(dir, "depth_gt.tnsr", &[p, p])?;
    let depth_raw = load_field(dir, "depth_raw.tnsr", &[p, p])?;
    let normal_gt = load_field(dir, "normal_gt.tnsr", &[p, p, 3])?;
    let mask = load_field(dir, "mask.tnsr", &[p, p])?;
    if mask.dtype != DType::U8 {
        return Err(load_err(dir, "mask.tnsr", "mask must be stored as u8"));
    }
    let bundle = PatchBundle {
        size: p,
        k: ann.patch_intrinsics(),
        rgb: rgb.data,
        depth_gt: depth_gt.data,
        depth_raw: depth_raw.data,
        normal_gt: normal_gt.data,
        mask: mask.data.iter().map(|v| *v as u8).collect(),
    };
    Ok((bundle, ann))
}

/// SHA-256 over the relative paths and bytes of every file below `root`,
/// in sorted order.
pub fn hash_tree(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0u8]);
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Scene directories of a split, sorted by name.
pub fn list_scenes(split_dir: &Path) -> Result<Vec<PathBuf>> {
    if !split_dir.is_dir() {
        return Err(load_err(split_dir, "split", "directory is missing"));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(split_dir)
        .map_err(|e| Error::io(split_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// A non-existent or empty directory is fine; anything else needs
/// `overwrite`, in which case it is cleared.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::Exists(dir.to_path_buf()));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<TensorEntry>,
    /// Optimizer first/second moments, parallel to `params`; empty when the
    /// checkpoint carries no optimizer state.
    pub moments: Vec<[String; 2]>,
    pub extra: serde_json::Value,
}

/// Parameters, optimizer state and free-form metadata of one model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: String,
    pub seed: u64,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
    pub moments: Vec<Moments>,
    pub extra: serde_json::Value,
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::new();
    for (i, (name, t)) in ck.params.iter().enumerate() {
        let file = format!("param_{i:03}.tnsr");
        write_tensor(&dir.join(&file), t)?;
        params.push(TensorEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let mut moments = Vec::new();
    for (i, m) in ck.moments.iter().enumerate() {
        let shape = ck.params.get(i).map(|p| p.1.shape().to_vec()).unwrap_or(vec![m.m.len()]);
        let files = [format!("adam_m_{i:03}.tnsr"), format!("adam_v_{i:03}.tnsr")];
        TensorFile::new(DType::F64, shape.clone(), m.m.clone())?.write(&dir.join(&files[0]))?;
        TensorFile::new(DType::F64, shape, m.v.clone())?.write(&dir.join(&files[1]))?;
        moments.push(files);
    }
    let manifest = CheckpointManifest {
        kind: ck.kind.clone(),
        config_hash: ck.config_hash.clone(),
        seed: ck.seed,
        step: ck.step,
        params,
        moments,
        extra: ck.extra.clone(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::Dependency(format!("no checkpoint manifest at {}", path.display())));
    }
    let m: CheckpointManifest = read_json(&path)?;
    let mut params = Vec::with_capacity(m.params.len());
    for e in &m.params {
        let t = read_tensor(&dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(load_err(dir, &e.name, format!("shape {:?}, manifest says {:?}", t.shape(), e.shape)));
        }
        params.push((e.name.clone(), t.with_grad()));
    }
    let mut moments = Vec::with_capacity(m.moments.len());
    for [mf, vf] in &m.moments {
        moments.push(Moments {
            m: TensorFile::read(&dir.join(mf))?.data,
            v: TensorFile::read(&dir.join(vf))?.data,
        });
    }
    Ok(Checkpoint {
        kind: m.kind,
        config_hash: m.config_hash,
        seed: m.seed,
        step: m.step,
        params,
        moments,
        extra: m.extra,
    })
}
