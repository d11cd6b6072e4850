use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Importance, TeacherState};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";
const FORMAT_VERSION: u32 = 1;
const BLOBS: [&str; 4] = ["teacher_prev.bin", "teacher_ema.bin", "student.bin", "importance.bin"];

/// Run position needed to resume or to compare checkpoints. All randomness
/// is derived from `seed` and `global_step`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub round: usize,
    pub config_hash: String,
    pub seed: u64,
    pub global_step: usize,
    pub labeled: BTreeSet<usize>,
    pub unlabeled: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub teacher: TeacherState,
    pub student: ParamStore<f64>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode<'a>(entries: impl Iterator<Item = (&'a str, &'a [usize], &'a [f64])>, count: usize) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, count);
    for (name, shape, data) in entries {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, shape.len());
        for &d in shape {
            put_u32(&mut out, d);
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serializes a store: u32 count, then per tensor the u32-length-prefixed
/// name, u32 rank, u32 dims and the f64 values, all little-endian.
pub fn encode_store(store: &ParamStore<f64>) -> Vec<u8> {
    encode(store.iter().map(|(n, t)| (n, t.shape(), t.data())), store.len())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "unexpected end of blob"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_store(buf: &[u8], path: &Path) -> Result<ParamStore<f64>> {
    let mut r = Reader { buf, pos: 0, path };
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > buf.len() {
            return Err(Error::format(path, format!("tensor `{name}` larger than the blob")));
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        store.insert(name, t.into_param()).map_err(|e| Error::format(path, e.to_string()))?;
    }
    if r.pos != buf.len() {
        return Err(Error::format(path, "trailing bytes after last tensor"));
    }
    Ok(store)
}

fn importance_store(phi: &Importance, like: &ParamStore<f64>) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (name, v) in phi {
        let shape = like.require(name)?.shape().to_vec();
        s.insert(name.clone(), Tensor::new(shape, v.clone())?)?;
    }
    Ok(s)
}

pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stores = [
        encode_store(&ck.teacher.params_prev),
        encode_store(&ck.teacher.params_ema),
        encode_store(&ck.student),
        encode_store(&importance_store(&ck.teacher.importance, &ck.teacher.params_prev)?),
    ];
    for (name, bytes) in BLOBS.iter().zip(stores) {
        let p = dir.join(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST);
    let text = toml::to_string(&ck.manifest).expect("manifest serializes");
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn load_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: CheckpointManifest = toml::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(&p, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(dir)?;
    let mut stores = Vec::with_capacity(BLOBS.len());
    for name in BLOBS {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        stores.push(decode_store(&bytes, &p)?);
    }
    let phi_store = stores.pop().expect("four blobs");
    let student = stores.pop().expect("four blobs");
    let params_ema = stores.pop().expect("four blobs");
    let params_prev = stores.pop().expect("four blobs");
    let bad = |what: &str, e: Error| Error::format(dir, format!("{what}: {e}"));
    params_prev.check_aligned(&params_ema).map_err(|e| bad("teacher blobs disagree", e))?;
    params_prev.check_aligned(&student).map_err(|e| bad("student blob disagrees", e))?;
    let mut importance = Importance::new();
    for (name, t) in phi_store.iter() {
        let p = params_prev.require(name).map_err(|e| bad("importance blob", e))?;
        if p.shape() != t.shape() || t.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::format(dir, format!("importance for `{name}` is malformed")));
        }
        importance.insert(name.to_string(), t.data().to_vec());
    }
    let teacher = TeacherState { params_prev, params_ema, importance, round: manifest.round };
    Ok(Checkpoint { manifest, teacher, student })
}
