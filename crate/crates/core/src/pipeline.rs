//! End-to-end reconstruction: frames are fused into keyframes, keyframes are
//! integrated into the volume, pose updates trigger corrections, and a final
//! pass re-integrates whatever is still out of date before meshing.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{mad_completeness, mad_correctness, sample_mesh, PointCloud};
use crate::geometry::{Point3, PoseScale};
use crate::keyframe::{keyframe_decision, AnchorId, FrameObservation, FusionParams, Keyframe, KeyframeStrategy};
use crate::meshing::{marching_cubes, TriangleMesh, WELD_TOLERANCE};
use crate::reintegration::{IntegrationLedger, PoseUpdateEvent, ReintegrationMode};
use crate::volume::{StreamCounters, TwoTierStore, VolumeConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub strategy: KeyframeStrategy,
    /// Window size `m` of each correction.
    pub window: usize,
    pub volume: VolumeConfig,
    pub fusion: FusionParams,
    pub mode: ReintegrationMode,
    pub scale: PoseScale,
    /// Anchor spacing when the dataset does not list its DVO keyframes.
    pub anchor_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: KeyframeStrategy::Const { kappa: 20 },
            window: 10,
            volume: VolumeConfig::default(),
            fusion: FusionParams::default(),
            mode: ReintegrationMode::ConsecutiveWindow,
            scale: PoseScale::default(),
            anchor_every: 10,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        self.volume.validate()?;
        if self.window == 0 {
            return Err(Error::Config("window size m must be at least 1".into()));
        }
        if self.anchor_every == 0 {
            return Err(Error::Config("anchor_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn kappa(&self) -> Option<usize> {
        match self.strategy {
            KeyframeStrategy::Const { kappa } => Some(kappa),
            _ => None,
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "strategy" => {
                self.strategy = match value.to_ascii_lowercase().as_str() {
                    "const" | "kf_const" => KeyframeStrategy::Const {
                        kappa: self.kappa().unwrap_or(20),
                    },
                    "dvo" | "kf_dvo" => KeyframeStrategy::Dvo,
                    "dist" | "kf_dist" => KeyframeStrategy::Dist {
                        max_rotation: 0.2,
                        max_translation: 0.1,
                    },
                    "overlap" | "kf_overlap" => KeyframeStrategy::Overlap { min_ratio: 0.8 },
                    _ => return Err(Error::Config(format!("unknown strategy {value:?}"))),
                }
            }
            "kappa" => self.strategy = KeyframeStrategy::Const { kappa: parse("kappa", value)? },
            "max_rotation" | "max_translation" => {
                let (mut r, mut t) = match self.strategy {
                    KeyframeStrategy::Dist {
                        max_rotation,
                        max_translation,
                    } => (max_rotation, max_translation),
                    _ => (0.2, 0.1),
                };
                if key.trim() == "max_rotation" {
                    r = parse(key, value)?;
                } else {
                    t = parse(key, value)?;
                }
                self.strategy = KeyframeStrategy::Dist {
                    max_rotation: r,
                    max_translation: t,
                };
            }
            "min_overlap" => {
                self.strategy = KeyframeStrategy::Overlap {
                    min_ratio: parse(key, value)?,
                }
            }
            "m" | "window" => self.window = parse(key, value)?,
            "voxel_size" => self.volume.voxel_size = parse(key, value)?,
            "truncation" | "mu" => self.volume.truncation = parse(key, value)?,
            "stream_radius" => self.volume.stream_radius = parse(key, value)?,
            "hash_buckets" => self.volume.hash_buckets = parse(key, value)?,
            "mode" | "reintegration_mode" => self.mode = ReintegrationMode::parse(value)?,
            "anchor_every" => self.anchor_every = parse(key, value)?,
            "discontinuity_threshold" => self.fusion.discontinuity_threshold = parse(key, value)?,
            "occlusion_tolerance" => self.fusion.occlusion_tolerance = parse(key, value)?,
            "unsharp_sigma" => self.fusion.unsharp_sigma = parse(key, value)?,
            "unsharp_gain" => self.fusion.unsharp_gain = parse(key, value)?,
            "fusion_gate" => self.fusion.fusion_gate = parse(key, value)?,
            "pose_scale" => {
                let v: Vec<f64> = value
                    .split(',')
                    .map(|s| parse::<f64>(key, s.trim()))
                    .collect::<Result<_>>()?;
                if v.len() != 6 {
                    return Err(Error::Config("pose_scale needs 6 comma-separated values".into()));
                }
                self.scale = PoseScale([v[0], v[1], v[2], v[3], v[4], v[5]]);
            }
            other => return Err(Error::Config(format!("unknown setting {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct FrameStats {
    pub frame: u64,
    pub fuse_ms: f64,
    pub integrate_ms: f64,
    pub correct_ms: f64,
    pub blocks_in: u64,
    pub blocks_out: u64,
    pub relocations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub corr_mad_mm: f64,
    pub compl_mad_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunStats {
    pub frames: Vec<FrameStats>,
    /// Work done after the last frame: last integration, pending events and
    /// the final pass.
    pub tail: FrameStats,
    pub keyframes: usize,
    pub corrections: usize,
    pub corrected_entries: usize,
    pub finalized_entries: usize,
    pub counters: StreamCounters,
    /// Valid depth pixels over all retained keyframes.
    pub retained_pixels: usize,
    pub metrics: Option<Metrics>,
}

impl RunStats {
    fn sum(&self, f: impl Fn(&FrameStats) -> f64) -> f64 {
        self.frames.iter().map(&f).sum::<f64>() + f(&self.tail)
    }

    pub fn fuse_ms(&self) -> f64 {
        self.sum(|s| s.fuse_ms)
    }

    pub fn integrate_ms(&self) -> f64 {
        self.sum(|s| s.integrate_ms)
    }

    pub fn correct_ms(&self) -> f64 {
        self.sum(|s| s.correct_ms)
    }

    /// Integration plus all de- and re-integration.
    pub fn volume_ms(&self) -> f64 {
        self.integrate_ms() + self.correct_ms()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,fuse_ms,integrate_ms,correct_ms,blocks_in,blocks_out,relocations\n");
        for s in &self.frames {
            let _ = writeln!(
                out,
                "{},{:.4},{:.4},{:.4},{},{},{}",
                s.frame, s.fuse_ms, s.integrate_ms, s.correct_ms, s.blocks_in, s.blocks_out, s.relocations
            );
        }
        out
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "keyframes": self.keyframes,
            "corrections": self.corrections,
            "corrected_entries": self.corrected_entries,
            "finalized_entries": self.finalized_entries,
            "blocks_streamed_in": self.counters.blocks_streamed_in,
            "blocks_streamed_out": self.counters.blocks_streamed_out,
            "sphere_relocations": self.counters.sphere_relocations,
            "retained_pixels": self.retained_pixels,
            "fuse_ms": self.fuse_ms(),
            "integrate_ms": self.integrate_ms(),
            "correct_ms": self.correct_ms(),
            "corr_mad_mm": self.metrics.map(|m| m.corr_mad_mm),
            "compl_mad_mm": self.metrics.map(|m| m.compl_mad_mm),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub mesh: TriangleMesh,
    pub stats: RunStats,
    pub store: TwoTierStore,
    pub ledger: IntegrationLedger,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    store: TwoTierStore,
    ledger: IntegrationLedger,
    open: Option<Keyframe>,
    stats: RunStats,
}

impl Runner<'_> {
    fn handle_event(&mut self, ev: &PoseUpdateEvent, next_center: &Point3, row: &mut FrameStats) -> Result<()> {
        let t = Instant::now();
        self.ledger.apply_pose_update(ev)?;
        if let Some(kf) = self.open.as_mut() {
            if let Some(p) = ev.anchor_poses.get(&kf.anchor_id()) {
                kf.set_anchor_pose(*p);
            }
        }
        let rec = self
            .ledger
            .correct(&mut self.store, self.cfg.mode, self.cfg.window, &self.cfg.scale, next_center)?;
        if let Some(rec) = rec {
            self.stats.corrections += 1;
            self.stats.corrected_entries += rec.entries.len();
        }
        row.correct_ms += ms(t);
        Ok(())
    }

    fn close_open(&mut self, row: &mut FrameStats) -> Result<()> {
        if let Some(mut kf) = self.open.take() {
            let t = Instant::now();
            kf.fuse_color(&self.cfg.fusion);
            row.fuse_ms += ms(t);
            let t = Instant::now();
            self.ledger.integrate(&mut self.store, kf)?;
            row.integrate_ms += ms(t);
        }
        Ok(())
    }
}

/// Runs the full pipeline over `data`.
pub fn reconstruct(cfg: &RunConfig, data: &Dataset) -> Result<Reconstruction> {
    cfg.validate()?;
    if data.frames.is_empty() {
        return Err(Error::EmptyInput("dataset has no frames"));
    }
    let mut dvo: BTreeSet<u64> = match &data.dvo_keyframes {
        Some(list) => list.iter().copied().collect(),
        None => {
            let first = data.frames[0].index;
            data.frames
                .iter()
                .map(|f| f.index)
                .filter(|i| (i - first) % cfg.anchor_every == 0)
                .collect()
        }
    };
    let mut events: VecDeque<PoseUpdateEvent> = data.events.iter().cloned().collect();
    events.make_contiguous().sort_by_key(|e| e.at_frame);

    let mut run = Runner {
        cfg,
        store: TwoTierStore::new(cfg.volume)?,
        ledger: IntegrationLedger::new(),
        open: None,
        stats: RunStats::default(),
    };
    let mut current_anchor: Option<AnchorId> = None;
    let mut kf_count = 0usize;

    for frame in &data.frames {
        let before = run.store.counters();
        let mut row = FrameStats {
            frame: frame.index,
            ..Default::default()
        };
        let center = frame.pose.camera_center();
        while events.front().is_some_and(|e| e.at_frame <= frame.index) {
            let ev = events.pop_front().unwrap();
            dvo.extend(ev.new_dvo_keyframes.iter().copied());
            run.handle_event(&ev, &center, &mut row)?;
        }
        if dvo.contains(&frame.index) || current_anchor.is_none() {
            if run.ledger.anchor_pose(frame.index).is_none() {
                run.ledger.register_anchor(frame.index, frame.pose);
            }
            current_anchor = Some(frame.index);
        }
        let new_kf = match &run.open {
            None => true,
            Some(kf) => keyframe_decision(&cfg.strategy, kf, frame, &dvo, &cfg.fusion),
        };
        if new_kf {
            run.close_open(&mut row)?;
            let aid = current_anchor.expect("anchor registered");
            let apose = *run.ledger.anchor_pose(aid).expect("anchor pose");
            run.open = Some(Keyframe::new(frame.index, data.intrinsics, aid, apose, &frame.pose));
            kf_count += 1;
        }
        let t = Instant::now();
        run.open.as_mut().unwrap().fuse_depth(frame, &cfg.fusion);
        row.fuse_ms += ms(t);
        let d = run.store.counters().since(&before);
        row.blocks_in = d.blocks_streamed_in;
        row.blocks_out = d.blocks_streamed_out;
        row.relocations = d.sphere_relocations;
        run.stats.frames.push(row);
    }

    let before = run.store.counters();
    let mut tail = FrameStats {
        frame: data.frames.last().unwrap().index + 1,
        ..Default::default()
    };
    let center = run.open.as_ref().map_or(Point3::zeros(), |k| k.pose().camera_center());
    while let Some(ev) = events.pop_front() {
        run.handle_event(&ev, &center, &mut tail)?;
    }
    run.close_open(&mut tail)?;
    if cfg.mode != ReintegrationMode::Off {
        let t = Instant::now();
        run.stats.finalized_entries = run.ledger.finalize(&mut run.store, cfg.window)?;
        tail.correct_ms += ms(t);
    }
    let d = run.store.counters().since(&before);
    tail.blocks_in = d.blocks_streamed_in;
    tail.blocks_out = d.blocks_streamed_out;
    tail.relocations = d.sphere_relocations;
    run.stats.tail = tail;

    let mesh = marching_cubes(&run.store);
    let mut stats = run.stats;
    stats.keyframes = kf_count;
    stats.counters = run.store.counters();
    stats.retained_pixels = run.ledger.entries().iter().map(|e| e.keyframe.valid_pixels()).sum();
    Ok(Reconstruction {
        mesh,
        stats,
        store: run.store,
        ledger: run.ledger,
    })
}

/// Reference surface: every frame integrated on its own at its ground-truth
/// pose, without pose updates.
pub fn build_reference(data: &Dataset, volume: &VolumeConfig, fusion: &FusionParams) -> Result<TriangleMesh> {
    if data.frames.is_empty() {
        return Err(Error::EmptyInput("dataset has no frames"));
    }
    let gt = data.ground_truth_poses()?;
    let frames: Vec<FrameObservation> = data
        .frames
        .iter()
        .zip(gt)
        .map(|(f, pose)| FrameObservation { pose, ..f.clone() })
        .collect();
    let reference = Dataset {
        intrinsics: data.intrinsics,
        frames,
        ground_truth: None,
        events: Vec::new(),
        dvo_keyframes: None,
    };
    let cfg = RunConfig {
        strategy: KeyframeStrategy::Const { kappa: 1 },
        volume: *volume,
        fusion: *fusion,
        mode: ReintegrationMode::Off,
        anchor_every: 1,
        ..Default::default()
    };
    Ok(reconstruct(&cfg, &reference)?.mesh)
}

/// Correctness against `reference` and completeness of the model against it,
/// using welded model vertices.
pub fn evaluate(model: &TriangleMesh, reference: &[Point3], cell: f64) -> Result<Metrics> {
    let welded = model.weld(WELD_TOLERANCE);
    Ok(Metrics {
        corr_mad_mm: mad_correctness(&welded, reference, cell)?,
        compl_mad_mm: mad_completeness(&welded, reference, cell)?,
    })
}

/// Sampled reference cloud from a reference mesh.
pub fn reference_cloud(reference: &TriangleMesh, points: usize, seed: u64) -> Result<PointCloud> {
    sample_mesh(reference, points, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub kappa: Option<usize>,
    pub m: usize,
    pub mode: &'static str,
    pub keyframes: usize,
    pub integrate_ms: f64,
    pub correct_ms: f64,
    pub volume_ms: f64,
    pub blocks_in: u64,
    pub blocks_out: u64,
    pub relocations: u64,
    pub corr_mad_mm: Option<f64>,
    pub compl_mad_mm: Option<f64>,
}

/// Runs every configuration on the same data. Metrics are filled in when a
/// reference cloud is given.
pub fn bench(configs: &[RunConfig], data: &Dataset, reference: Option<&[Point3]>) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let rec = reconstruct(cfg, data)?;
        let metrics = match reference {
            Some(r) => Some(evaluate(&rec.mesh, r, 4.0 * cfg.volume.voxel_size)?),
            None => None,
        };
        let s = &rec.stats;
        rows.push(BenchRow {
            kappa: cfg.kappa(),
            m: cfg.window,
            mode: cfg.mode.name(),
            keyframes: s.keyframes,
            integrate_ms: s.integrate_ms(),
            correct_ms: s.correct_ms(),
            volume_ms: s.volume_ms(),
            blocks_in: s.counters.blocks_streamed_in,
            blocks_out: s.counters.blocks_streamed_out,
            relocations: s.counters.sphere_relocations,
            corr_mad_mm: metrics.map(|m| m.corr_mad_mm),
            compl_mad_mm: metrics.map(|m| m.compl_mad_mm),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
    let mut out = String::from(
        "kappa,m,mode,keyframes,integrate_ms,correct_ms,volume_ms,blocks_in,blocks_out,relocations,corr_mad_mm,compl_mad_mm\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3},{:.3},{:.3},{},{},{},{},{}",
            r.kappa.map_or(String::new(), |k| k.to_string()),
            r.m,
            r.mode,
            r.keyframes,
            r.integrate_ms,
            r.correct_ms,
            r.volume_ms,
            r.blocks_in,
            r.blocks_out,
            r.relocations,
            opt(r.corr_mad_mm),
            opt(r.compl_mad_mm)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::reintegration::{max_voxel_difference, rebuild_at_targets};
    use crate::synth::{make_sequence, AnalyticScene, SynthParams, TrajectoryPlan};

    fn data(frames: usize, drift: [f64; 6], schedule: Vec<(u64, f64)>) -> Dataset {
        let plan = TrajectoryPlan {
            waypoints: TrajectoryPlan::orbit(&Point3::new(0.0, 0.0, 0.5), 1.0, 1.3, 4),
            frames_per_segment: frames / 4,
            drift_rate: drift,
            correction_schedule: schedule,
            anchor_every: 5,
        };
        let k = Intrinsics::default_vga().downscaled(10);
        let p = SynthParams {
            noise_sigma0: 0.0,
            ..Default::default()
        };
        Dataset::from_sequence(&make_sequence(&AnalyticScene::desk_room(), &plan, &k, &p).unwrap())
    }

    fn cfg(kappa: usize, m: usize, mode: ReintegrationMode) -> RunConfig {
        RunConfig {
            strategy: KeyframeStrategy::Const { kappa },
            window: m,
            volume: VolumeConfig {
                voxel_size: 0.04,
                truncation: 0.12,
                stream_radius: 3.0,
                hash_buckets: 4096,
            },
            mode,
            anchor_every: 5,
            ..Default::default()
        }
    }

    #[test]
    fn config_file_and_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.cfg");
        fs::write(&p, "# test\nkappa = 7\nm=3\nmode=topk_baseline\nvoxel_size=0.02 # fine\n").unwrap();
        let mut c = RunConfig::default();
        c.apply_file(&p).unwrap();
        assert_eq!(c.kappa(), Some(7));
        assert_eq!(c.window, 3);
        assert_eq!(c.mode, ReintegrationMode::TopK);
        assert_eq!(c.volume.voxel_size, 0.02);
        c.set("m", "9").unwrap();
        assert_eq!(c.window, 9);
        assert!(c.set("nonsense", "1").is_err());
        fs::write(&p, "kappa\n").unwrap();
        assert!(matches!(c.apply_file(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn keyframe_count_and_determinism() {
        let d = data(24, [0.0; 6], vec![]);
        for kappa in [1, 5, 7, 24, 30] {
            let r = reconstruct(&cfg(kappa, 2, ReintegrationMode::Off), &d).unwrap();
            assert_eq!(r.stats.keyframes, d.frames.len().div_ceil(kappa));
            assert_eq!(r.ledger.len(), r.stats.keyframes);
            assert_eq!(r.stats.frames.len(), d.frames.len());
        }
        let a = reconstruct(&cfg(5, 2, ReintegrationMode::ConsecutiveWindow), &d).unwrap();
        let b = reconstruct(&cfg(5, 2, ReintegrationMode::ConsecutiveWindow), &d).unwrap();
        assert_eq!(a.mesh, b.mesh);
        assert_eq!(a.stats.counters, a.store.counters());
        let rows_in: u64 = a.stats.frames.iter().map(|r| r.blocks_in).sum::<u64>() + a.stats.tail.blocks_in;
        assert_eq!(rows_in, a.stats.counters.blocks_streamed_in);
    }

    #[test]
    fn corrected_run_matches_rebuild() {
        let d = data(24, [2e-3, 1e-3, 0.0, 0.0, 0.0, 2e-3], vec![(12, 0.5), (25, 1.0)]);
        let r = reconstruct(&cfg(3, 2, ReintegrationMode::ConsecutiveWindow), &d).unwrap();
        assert!(r.stats.corrections >= 1);
        assert!(r.ledger.entries().iter().all(|e| e.is_consistent()));
        let fresh = rebuild_at_targets(&r.ledger, &r.store).unwrap();
        let (dd, dw) = max_voxel_difference(&r.store, &fresh);
        assert!(dd < 1e-9 && dw < 1e-9, "{dd} {dw}");
    }

    #[test]
    fn bench_rows() {
        let d = data(8, [0.0; 6], vec![]);
        let rows = bench(&[cfg(2, 2, ReintegrationMode::Off)], &d, None).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(bench_csv(&rows).lines().count(), 2);
        assert_eq!(rows[0].keyframes, 4);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut d = data(8, [0.0; 6], vec![]);
        d.frames.clear();
        assert!(matches!(reconstruct(&RunConfig::default(), &d), Err(Error::EmptyInput(_))));
        assert!(matches!(
            build_reference(&d, &VolumeConfig::default(), &FusionParams::default()),
            Err(Error::EmptyInput(_))
        ));
    }
}
