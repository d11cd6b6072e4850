//! On-disk dataset: `manifest.toml` plus one little-endian record per scene.
//!
//! Record layout: `u32` box count; per box `cx cy w l yaw z` as `f64` and the
//! class as `i32` (`z` is always 0 on the planar world); `u32` point count;
//! points as `f64` pairs; ego pose `r00 r01 r10 r11 tx ty` as `f64`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSpec, Scene, SceneDataset};
use crate::error::{Error, Result};
use crate::geometry::{Box3DLite, EgoTransform};

pub const MANIFEST_FILE: &str = "manifest.toml";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: DatasetSpec,
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
}

fn record_name(seq: usize, t: usize) -> String {
    format!("seq{seq:05}_t{t:04}.bin")
}

pub fn save_dataset(ds: &SceneDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: ds.spec.clone(),
        labeled: ds.labeled.iter().copied().collect(),
        unlabeled: ds.unlabeled.iter().copied().collect(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST_FILE), e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (s, seq) in ds.sequences.iter().enumerate() {
        for (t, scene) in seq.iter().enumerate() {
            let path = dir.join(record_name(s, t));
            fs::write(&path, encode_scene(scene)).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(&path, format!("unsupported format version {}", m.format_version)));
    }
    m.spec.validate()?;
    let labeled: BTreeSet<usize> = m.labeled.into_iter().collect();
    let unlabeled: BTreeSet<usize> = m.unlabeled.into_iter().collect();
    let n = m.spec.n_sequences;
    if !labeled.is_disjoint(&unlabeled) || labeled.len() + unlabeled.len() != n || labeled.iter().chain(&unlabeled).any(|&i| i >= n) {
        return Err(Error::format(&path, "split does not partition the sequences"));
    }
    let mut sequences = Vec::with_capacity(n);
    for s in 0..n {
        let mut seq = Vec::with_capacity(m.spec.seq_len);
        for t in 0..m.spec.seq_len {
            let p = dir.join(record_name(s, t));
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let mut scene = decode_scene(&bytes).map_err(|reason| Error::format(&p, reason))?;
            scene.timestamp = t;
            seq.push(scene);
        }
        sequences.push(seq);
    }
    Ok(SceneDataset { spec: m.spec, sequences, labeled, unlabeled })
}

fn encode_scene(scene: &Scene) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + scene.boxes.len() * 52 + scene.points.len() * 16 + 48);
    let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    out.extend_from_slice(&(scene.boxes.len() as u32).to_le_bytes());
    for b in &scene.boxes {
        for v in [b.cx, b.cy, b.w, b.l, b.yaw, 0.0] {
            put(&mut out, v);
        }
        out.extend_from_slice(&(b.class_id as i32).to_le_bytes());
    }
    out.extend_from_slice(&(scene.points.len() as u32).to_le_bytes());
    for p in &scene.points {
        put(&mut out, p[0]);
        put(&mut out, p[1]);
    }
    let r = scene.ego_pose.rot;
    for v in [r[0][0], r[0][1], r[1][0], r[1][1], scene.ego_pose.trans[0], scene.ego_pose.trans[1]] {
        put(&mut out, v);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> std::result::Result<[u8; N], String> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or_else(|| format!("truncated record at byte {}", self.pos))?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length"))
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take::<8>()?))
    }
    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take::<4>()?))
    }
    fn i32(&mut self) -> std::result::Result<i32, String> {
        Ok(i32::from_le_bytes(self.take::<4>()?))
    }
}

fn decode_scene(bytes: &[u8]) -> std::result::Result<Scene, String> {
    let mut r = Reader { bytes, pos: 0 };
    let n_boxes = r.u32()? as usize;
    let mut boxes = Vec::with_capacity(n_boxes.min(4096));
    for _ in 0..n_boxes {
        let v: Vec<f64> = (0..6).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
        let class = r.i32()?;
        if class < 0 {
            return Err(format!("negative class id {class}"));
        }
        let b = Box3DLite { cx: v[0], cy: v[1], w: v[2], l: v[3], yaw: v[4], class_id: class as usize };
        b.validate().map_err(|e| e.to_string())?;
        boxes.push(b);
    }
    let n_points = r.u32()? as usize;
    let mut points = Vec::with_capacity(n_points.min(1 << 20));
    for _ in 0..n_points {
        points.push([r.f64()?, r.f64()?]);
    }
    let p: Vec<f64> = (0..6).map(|_| r.f64()).collect::<std::result::Result<_, _>>()?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    let ego_pose = EgoTransform { rot: [[p[0], p[1]], [p[2], p[3]]], trans: [p[4], p[5]] };
    ego_pose.validate(1e-9).map_err(|e| e.to_string())?;
    Ok(Scene { boxes, ego_pose, timestamp: 0, points })
}
