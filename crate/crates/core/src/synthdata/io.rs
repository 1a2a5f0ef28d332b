//! On-disk dataset: `<dir>/meta.txt`, `<dir>/video_<id>/frame_<i>.tnsr`
//! and `<dir>/video_<id>/ann.txt`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detection::GroundTruth;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::generate::{format_sig6, video_seed, SyntheticVideo};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
const DTYPE_F32: u8 = 1;

/// Contents of `meta.txt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_videos: usize,
    pub seed: u64,
    pub difficulty: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub videos: Vec<SyntheticVideo>,
}

impl Dataset {
    /// Videos `0..n_train` and the rest.
    pub fn split(&self, n_train: usize) -> (&[SyntheticVideo], &[SyntheticVideo]) {
        self.videos.split_at(n_train.min(self.videos.len()))
    }
}

pub fn encode_tensor(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 6 {
        return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing TNSR magic".into()));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(bad(format!("unsupported dtype code {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err(bad("rank 0 tensor".into()));
    }
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated dims".into()));
    }
    let dims: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
    let expected = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| bad(format!("dims {dims:?} overflow")))?;
    if bytes.len() < expected {
        return Err(bad(format!(
            "truncated payload: {} bytes, dims {dims:?} need {expected}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(bad(format!("{} trailing bytes", bytes.len() - expected)));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(dims, data).map_err(|e| bad(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

fn video_dir(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("video_{id}"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Annotation records, one `frame class cx cy w h` line per object.
pub fn format_annotations(annotations: &[GroundTruth]) -> String {
    let mut s = String::new();
    for (f, gt) in annotations.iter().enumerate() {
        for (b, &label) in gt.boxes.iter().zip(&gt.labels) {
            s.push_str(&format!(
                "{f} {label} {} {} {} {}\n",
                format_sig6(b[0]),
                format_sig6(b[1]),
                format_sig6(b[2]),
                format_sig6(b[3])
            ));
        }
    }
    s
}

pub fn parse_annotations(text: &str, frames: usize, path: &Path) -> Result<Vec<GroundTruth>> {
    let mut out = vec![GroundTruth::empty(); frames];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |reason: String| Error::format(path, format!("line {}: {reason}", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad frame index '{}'", fields[0])))?;
        let class: usize = fields[1]
            .parse()
            .map_err(|_| bad(format!("bad class id '{}'", fields[1])))?;
        let mut b = [0.0; 4];
        for (slot, text) in b.iter_mut().zip(&fields[2..]) {
            *slot = text.parse().map_err(|_| bad(format!("bad number '{text}'")))?;
        }
        if frame >= frames {
            return Err(bad(format!("frame {frame} but the video has {frames} frames")));
        }
        let gt = &mut out[frame];
        gt.boxes.push(b);
        gt.labels.push(class);
        GroundTruth::new(vec![b], vec![class])
            .and_then(|g| g.validate(2))
            .map_err(|e| bad(format!("invariant violation: {e}")))?;
    }
    Ok(out)
}

pub fn format_meta(meta: &DatasetMeta) -> String {
    format!(
        "n_videos={}\nseed={}\ndifficulty={}\n",
        meta.n_videos, meta.seed, meta.difficulty
    )
}

pub fn parse_meta(text: &str, path: &Path) -> Result<DatasetMeta> {
    let (mut n, mut seed, mut difficulty) = (None, None, None);
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("'{line}' is not key=value")))?;
        let bad = || Error::format(path, format!("bad value for {k}: '{v}'"));
        match k.trim() {
            "n_videos" => n = Some(v.trim().parse().map_err(|_| bad())?),
            "seed" => seed = Some(v.trim().parse().map_err(|_| bad())?),
            "difficulty" => difficulty = Some(v.trim().parse().map_err(|_| bad())?),
            _ => {}
        }
    }
    let missing = |k: &str| Error::format(path, format!("missing key {k}"));
    Ok(DatasetMeta {
        n_videos: n.ok_or_else(|| missing("n_videos"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        difficulty: difficulty.ok_or_else(|| missing("difficulty"))?,
    })
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join("meta.txt"), &format_meta(&dataset.meta))?;
    for v in &dataset.videos {
        let vd = video_dir(dir, v.id);
        fs::create_dir_all(&vd).map_err(|e| Error::io(&vd, e))?;
        for (i, f) in v.frames.iter().enumerate() {
            write_tensor(&vd.join(format!("frame_{i}.tnsr")), f)?;
        }
        write_text(&vd.join("ann.txt"), &format_annotations(&v.annotations))?;
    }
    Ok(())
}

fn read_video(dir: &Path, id: usize, master_seed: u64) -> Result<SyntheticVideo> {
    let vd = video_dir(dir, id);
    let mut frames = Vec::new();
    loop {
        let p = vd.join(format!("frame_{}.tnsr", frames.len()));
        if !p.exists() {
            break;
        }
        let t = read_tensor(&p)?;
        if t.rank() != 3 || t.dims()[0] != 1 {
            return Err(Error::format(
                &p,
                format!("expected a [1, H, W] frame, got {:?}", t.dims()),
            ));
        }
        if let Some(first) = frames.first().map(|f: &Tensor<f32>| f.dims().to_vec()) {
            if first != t.dims() {
                return Err(Error::format(&p, "frame size differs from frame 0"));
            }
        }
        frames.push(t);
    }
    if frames.is_empty() {
        return Err(Error::format(&vd, "no frame_0.tnsr"));
    }
    let ann_path = vd.join("ann.txt");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let annotations = parse_annotations(&text, frames.len(), &ann_path)?;
    Ok(SyntheticVideo {
        id,
        seed: video_seed(master_seed, id),
        frames,
        annotations,
        occluded: None,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.txt");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta = parse_meta(&text, &meta_path)?;
    let videos = (0..meta.n_videos)
        .map(|id| read_video(dir, id, meta.seed))
        .collect::<Result<_>>()?;
    Ok(Dataset { meta, videos })
}
