//! On-disk RGB-D dataset layout shared by synthetic and recorded data.
//!
//! ```text
//! intrinsics.txt      fx fy cx cy width height
//! depth/NNNNNN.png    16-bit, meters × 5000, 0 = invalid
//! color/NNNNNN.png    8-bit RGB
//! trajectory.txt      index tx ty tz qx qy qz qw   (estimated poses)
//! groundtruth.txt     same schema, optional
//! events.jsonl        {"at_frame", "anchors": {"id": [t, q]}, "new_dvo_keyframes"}, optional
//! dvo_keyframes.txt   one frame index per line, optional
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{DepthMap, Image, RgbImage};
use crate::keyframe::FrameObservation;
use crate::reintegration::PoseUpdateEvent;
use crate::synth::Sequence;

pub const DEPTH_SCALE: f64 = 5000.0;
pub const QUATERNION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    /// In index order, carrying the estimated poses.
    pub frames: Vec<FrameObservation>,
    pub ground_truth: Option<BTreeMap<u64, Pose>>,
    pub events: Vec<PoseUpdateEvent>,
    pub dvo_keyframes: Option<Vec<u64>>,
}

impl Dataset {
    pub fn from_sequence(seq: &Sequence) -> Self {
        Self {
            intrinsics: seq.intrinsics,
            frames: seq.frames.clone(),
            ground_truth: Some(
                seq.frames
                    .iter()
                    .map(|f| f.index)
                    .zip(seq.ground_truth.iter().copied())
                    .collect(),
            ),
            events: seq.events.clone(),
            dvo_keyframes: Some(seq.dvo_keyframes.clone()),
        }
    }

    /// Ground-truth pose of every frame, in frame order.
    pub fn ground_truth_poses(&self) -> Result<Vec<Pose>> {
        let gt = self.ground_truth.as_ref();
        self.frames
            .iter()
            .map(|f| {
                gt.and_then(|g| g.get(&f.index))
                    .copied()
                    .ok_or(Error::IncompleteTrajectory(f.index))
            })
            .collect()
    }
}

fn frame_name(index: u64) -> String {
    format!("{index:06}.png")
}

pub fn write_depth_png(depth: &DepthMap, path: &Path) -> Result<()> {
    let (w, h) = depth.dims();
    let mut data = Vec::with_capacity(w * h * 2);
    for &z in depth.as_slice() {
        let raw = (z * DEPTH_SCALE).round().clamp(0.0, u16::MAX as f64) as u16;
        data.extend_from_slice(&raw.to_be_bytes());
    }
    write_png(path, w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

pub fn write_color_png(color: &RgbImage, path: &Path) -> Result<()> {
    let (w, h) = color.dims();
    let data: Vec<u8> = color.as_slice().iter().flatten().copied().collect();
    write_png(path, w, h, png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let fmt = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

fn read_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

pub fn read_depth_png(path: &Path) -> Result<DepthMap> {
    let (info, buf) = read_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::format(path, "depth must be 16-bit grayscale"));
    }
    let data = buf
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / DEPTH_SCALE)
        .collect();
    Ok(Image::from_vec(info.width as usize, info.height as usize, data))
}

pub fn read_color_png(path: &Path) -> Result<RgbImage> {
    let (info, buf) = read_png(path)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "color must be 8-bit"));
    }
    let data: Vec<[u8; 3]> = match info.color_type {
        png::ColorType::Rgb => buf.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Rgba => buf.chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().map(|&g| [g; 3]).collect(),
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    Ok(Image::from_vec(info.width as usize, info.height as usize, data))
}

fn pose_fields(p: &Pose) -> [f64; 7] {
    let q = p.quaternion();
    let t = p.translation;
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
}

fn pose_from_fields(v: &[f64]) -> Result<Pose> {
    Pose::from_quaternion([v[3], v[4], v[5], v[6]], Vector3::new(v[0], v[1], v[2]), QUATERNION_TOLERANCE)
}

pub fn write_trajectory(poses: &[(u64, Pose)], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (i, p) in poses {
        let f = pose_fields(p);
        writeln!(w, "{i} {} {} {} {} {} {} {}", f[0], f[1], f[2], f[3], f[4], f[5], f[6]).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads `index tx ty tz qx qy qz qw` lines; blank lines and `#` comments
/// are skipped.
pub fn read_trajectory(path: &Path) -> Result<BTreeMap<u64, Pose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: &str| Error::format(path, format!("line {}: {m}", n + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 8 {
            return Err(bad("expected 8 fields"));
        }
        let idx: u64 = parts[0].parse().map_err(|_| bad("bad frame index"))?;
        let v: Vec<f64> = parts[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        let pose = pose_from_fields(&v).map_err(|e| bad(&e.to_string()))?;
        out.insert(idx, pose);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct EventRecord {
    at_frame: u64,
    anchors: BTreeMap<String, [f64; 7]>,
    #[serde(default)]
    new_dvo_keyframes: Vec<u64>,
}

pub fn write_events(events: &[PoseUpdateEvent], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for ev in events {
        let rec = EventRecord {
            at_frame: ev.at_frame,
            anchors: ev.anchor_poses.iter().map(|(k, p)| (k.to_string(), pose_fields(p))).collect(),
            new_dvo_keyframes: ev.new_dvo_keyframes.clone(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::format(path, e.to_string()))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_events(path: &Path) -> Result<Vec<PoseUpdateEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| Error::format(path, format!("line {}: {m}", n + 1));
        let rec: EventRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mut ev = PoseUpdateEvent {
            at_frame: rec.at_frame,
            new_dvo_keyframes: rec.new_dvo_keyframes,
            ..Default::default()
        };
        for (k, v) in rec.anchors {
            let id: u64 = k.parse().map_err(|_| bad(format!("bad anchor id {k:?}")))?;
            ev.anchor_poses.insert(id, pose_from_fields(&v).map_err(|e| bad(e.to_string()))?);
        }
        out.push(ev);
    }
    out.sort_by_key(|e| e.at_frame);
    Ok(out)
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::format(path, "expected: fx fy cx cy width height");
    if v.len() != 6 {
        return Err(bad());
    }
    let f = |i: usize| v[i].parse::<f64>().map_err(|_| bad());
    let u = |i: usize| v[i].parse::<usize>().map_err(|_| bad());
    Intrinsics::new(f(0)?, f(1)?, f(2)?, f(3)?, u(4)?, u(5)?)
}

pub fn write_intrinsics(k: &Intrinsics, path: &Path) -> Result<()> {
    fs::write(path, format!("{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height))
        .map_err(|e| Error::io(path, e))
}

/// Writes a rendered sequence in the dataset layout.
pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    for sub in ["depth", "color"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_intrinsics(&seq.intrinsics, &dir.join("intrinsics.txt"))?;
    for f in &seq.frames {
        write_depth_png(&f.depth, &dir.join("depth").join(frame_name(f.index)))?;
        write_color_png(&f.color, &dir.join("color").join(frame_name(f.index)))?;
    }
    let idx: Vec<u64> = seq.frames.iter().map(|f| f.index).collect();
    let est: Vec<(u64, Pose)> = idx.iter().copied().zip(seq.drifted.iter().copied()).collect();
    let gt: Vec<(u64, Pose)> = idx.iter().copied().zip(seq.ground_truth.iter().copied()).collect();
    write_trajectory(&est, &dir.join("trajectory.txt"))?;
    write_trajectory(&gt, &dir.join("groundtruth.txt"))?;
    write_events(&seq.events, &dir.join("events.jsonl"))?;
    let dvo: String = seq.dvo_keyframes.iter().map(|i| format!("{i}\n")).collect();
    let p = dir.join("dvo_keyframes.txt");
    fs::write(&p, dvo).map_err(|e| Error::io(&p, e))
}

fn optional(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

/// Loads a dataset directory. Intrinsics default to the conventional VGA
/// calibration when `intrinsics.txt` is absent.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let intrinsics = match optional(dir.join("intrinsics.txt")) {
        Some(p) => read_intrinsics(&p)?,
        None => Intrinsics::default_vga(),
    };
    let trajectory = read_trajectory(&dir.join("trajectory.txt"))?;
    let mut frames = Vec::with_capacity(trajectory.len());
    for (&index, &pose) in &trajectory {
        let dp = dir.join("depth").join(frame_name(index));
        let cp = dir.join("color").join(frame_name(index));
        let depth = read_depth_png(&dp)?;
        let color = read_color_png(&cp)?;
        let dims = (intrinsics.width, intrinsics.height);
        if depth.dims() != dims {
            return Err(Error::format(&dp, "size differs from intrinsics"));
        }
        if color.dims() != dims {
            return Err(Error::format(&cp, "size differs from intrinsics"));
        }
        frames.push(FrameObservation {
            index,
            color,
            depth,
            pose,
        });
    }
    let ground_truth = optional(dir.join("groundtruth.txt")).map(|p| read_trajectory(&p)).transpose()?;
    let events = match optional(dir.join("events.jsonl")) {
        Some(p) => read_events(&p)?,
        None => Vec::new(),
    };
    let dvo_keyframes = match optional(dir.join("dvo_keyframes.txt")) {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let ids = text
                .split_whitespace()
                .map(|s| s.parse::<u64>().map_err(|_| Error::format(&p, format!("bad frame index {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Some(ids)
        }
        None => None,
    };
    Ok(Dataset {
        intrinsics,
        frames,
        ground_truth,
        events,
        dvo_keyframes,
    })
}
