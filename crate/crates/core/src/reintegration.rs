//! Integration ledger, anchor-driven pose updates and surface correction.
//!
//! Every integrated keyframe is recorded with the pose it was integrated at
//! and its current target pose. Pose updates move anchors; keyframes follow
//! their anchor through their fixed relative pose. Corrections de-integrate
//! keyframes at the recorded pose and re-integrate them at the target.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::geometry::{pose_distance, Point3, Pose, PoseScale};
use crate::keyframe::{AnchorId, Keyframe};
use crate::volume::{IntegrationRecord, StreamCounters, TwoTierStore};

/// Scaled pose distance below which an entry counts as unmoved.
pub const MOVE_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReintegrationMode {
    /// Re-integrate the most-moved window of `m` consecutive keyframes.
    ConsecutiveWindow,
    /// Re-integrate the `m` most-moved keyframes one by one.
    TopK,
    Off,
}

impl ReintegrationMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ConsecutiveWindow => "consecutive_window",
            Self::TopK => "topk_baseline",
            Self::Off => "off",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "consecutive_window" | "window" => Ok(Self::ConsecutiveWindow),
            "topk_baseline" | "topk" => Ok(Self::TopK),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("unknown reintegration mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseUpdateEvent {
    /// Input frame index at which the update becomes visible.
    pub at_frame: u64,
    pub anchor_poses: BTreeMap<AnchorId, Pose>,
    pub new_dvo_keyframes: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct LedgerEntry {
    pub keyframe: Keyframe,
    pub integrated_pose: Pose,
    pub record: IntegrationRecord,
}

impl LedgerEntry {
    pub fn target_pose(&self) -> &Pose {
        self.keyframe.pose()
    }

    pub fn is_consistent(&self) -> bool {
        self.integrated_pose == *self.target_pose()
    }
}

#[derive(Debug, Clone, Default)]
pub struct IntegrationLedger {
    entries: Vec<LedgerEntry>,
    anchors: BTreeMap<AnchorId, Pose>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrectionRecord {
    /// Ledger indices corrected, in processing order.
    pub entries: Vec<usize>,
    pub counters: StreamCounters,
}

impl IntegrationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &LedgerEntry {
        &self.entries[i]
    }

    pub fn register_anchor(&mut self, id: AnchorId, pose: Pose) {
        self.anchors.insert(id, pose);
    }

    pub fn anchor_pose(&self, id: AnchorId) -> Option<&Pose> {
        self.anchors.get(&id)
    }

    pub fn anchors(&self) -> &BTreeMap<AnchorId, Pose> {
        &self.anchors
    }

    /// Total sample weight currently integrated by all entries.
    pub fn integrated_weight(&self) -> f64 {
        self.entries.iter().map(|e| e.record.weight).sum()
    }

    /// Integrates `kf` at its current pose and records it.
    pub fn integrate(&mut self, store: &mut TwoTierStore, kf: Keyframe) -> Result<&LedgerEntry> {
        let pose = *kf.pose();
        if !self.anchors.contains_key(&kf.anchor_id()) {
            return Err(Error::MalformedEvent(format!(
                "keyframe {} references unregistered anchor {}",
                kf.id,
                kf.anchor_id()
            )));
        }
        store.stream(&pose.camera_center());
        let record = store.integrate(&kf, &pose)?;
        self.entries.push(LedgerEntry {
            keyframe: kf,
            integrated_pose: pose,
            record,
        });
        Ok(self.entries.last().unwrap())
    }

    /// Moves anchors and every keyframe attached to them. Returns the number
    /// of entries whose target pose changed. Fails without modification if
    /// the event names an anchor that is neither registered nor declared new.
    pub fn apply_pose_update(&mut self, ev: &PoseUpdateEvent) -> Result<usize> {
        let declared: BTreeSet<u64> = ev.new_dvo_keyframes.iter().copied().collect();
        for (id, pose) in &ev.anchor_poses {
            if !self.anchors.contains_key(id) && !declared.contains(id) {
                return Err(Error::MalformedEvent(format!("unknown anchor {id}")));
            }
            if !pose.is_valid(1e-6) {
                return Err(Error::MalformedEvent(format!("anchor {id} pose is not rigid")));
            }
        }
        self.anchors.extend(ev.anchor_poses.iter().map(|(k, v)| (*k, *v)));
        let mut changed = 0;
        for e in &mut self.entries {
            if let Some(pose) = ev.anchor_poses.get(&e.keyframe.anchor_id()) {
                let before = *e.keyframe.pose();
                e.keyframe.set_anchor_pose(*pose);
                if *e.keyframe.pose() != before {
                    changed += 1;
                }
            }
        }
        Ok(changed)
    }

    /// Scaled distance between integrated and target pose for every entry.
    pub fn distances(&self, s: &PoseScale) -> Vec<f64> {
        self.entries
            .iter()
            .map(|e| pose_distance(&e.integrated_pose, e.target_pose(), s))
            .collect()
    }

    /// Start (0-based) of the most-moved window; see [`select_window`].
    pub fn select_window(&self, m: usize, s: &PoseScale) -> Option<usize> {
        select_window(&self.distances(s), m)
    }

    pub fn select_topk(&self, m: usize, s: &PoseScale) -> Vec<usize> {
        select_topk(&self.distances(s), m)
    }

    /// Re-integrates the given entries at their target pose.
    ///
    /// The sphere follows the old poses while de-integrating and the new
    /// poses while re-integrating, then moves to `next_center` if given. If a
    /// de-integration fails, entries already removed are restored at their
    /// old poses and the error is returned.
    pub fn correct_entries(
        &mut self,
        store: &mut TwoTierStore,
        indices: &[usize],
        next_center: Option<&Point3>,
    ) -> Result<CorrectionRecord> {
        let before = store.counters();
        for (n, &i) in indices.iter().enumerate() {
            let e = &self.entries[i];
            store.stream(&e.integrated_pose.camera_center());
            if let Err(err) = store.deintegrate(&e.keyframe, &e.integrated_pose) {
                for &j in &indices[..n] {
                    let e = &self.entries[j];
                    store.stream(&e.integrated_pose.camera_center());
                    store.integrate(&e.keyframe, &e.integrated_pose)?;
                }
                return Err(err);
            }
        }
        for &i in indices {
            let e = &mut self.entries[i];
            let target = *e.keyframe.pose();
            store.stream(&target.camera_center());
            e.record = store.integrate(&e.keyframe, &target)?;
            e.integrated_pose = target;
        }
        if let Some(c) = next_center {
            store.stream(c);
        }
        Ok(CorrectionRecord {
            entries: indices.to_vec(),
            counters: store.counters().since(&before),
        })
    }

    /// One on-the-fly correction after a pose update, per `mode`.
    pub fn correct(
        &mut self,
        store: &mut TwoTierStore,
        mode: ReintegrationMode,
        m: usize,
        s: &PoseScale,
        next_center: &Point3,
    ) -> Result<Option<CorrectionRecord>> {
        match mode {
            ReintegrationMode::Off => Ok(None),
            ReintegrationMode::ConsecutiveWindow => {
                let Some(j) = self.select_window(m, s) else {
                    return Ok(None);
                };
                let len = m.min(self.len());
                let idx: Vec<usize> = (j..j + len).collect();
                self.correct_entries(store, &idx, Some(next_center)).map(Some)
            }
            ReintegrationMode::TopK => {
                let d = self.distances(s);
                let picks: Vec<usize> = select_topk(&d, m)
                    .into_iter()
                    .filter(|&i| d[i] > MOVE_EPSILON)
                    .collect();
                if picks.is_empty() {
                    return Ok(None);
                }
                let before = store.counters();
                for &i in &picks {
                    self.correct_entries(store, &[i], None)?;
                }
                store.stream(next_center);
                Ok(Some(CorrectionRecord {
                    entries: picks,
                    counters: store.counters().since(&before),
                }))
            }
        }
    }

    /// Final pass: brings every entry whose integrated pose differs from its
    /// target to the target, in ledger order and in chunks of `m`.
    pub fn finalize(&mut self, store: &mut TwoTierStore, m: usize) -> Result<usize> {
        let pending: Vec<usize> = (0..self.len())
            .filter(|&i| !self.entries[i].is_consistent())
            .collect();
        for chunk in pending.chunks(m.max(1)) {
            self.correct_entries(store, chunk, None)?;
        }
        Ok(pending.len())
    }
}

/// Start index (0-based) of the window of `min(m, K)` consecutive entries with
/// the largest summed distance; the smallest start wins ties. `None` if the
/// ledger is empty or nothing moved by more than [`MOVE_EPSILON`] in total.
pub fn select_window(distances: &[f64], m: usize) -> Option<usize> {
    let k = distances.len();
    if k == 0 || m == 0 {
        return None;
    }
    let len = m.min(k);
    let mut best: Option<(usize, f64)> = None;
    for j in 0..=k - len {
        let sum: f64 = distances[j..j + len].iter().sum();
        if best.map_or(true, |(_, b)| sum > b) {
            best = Some((j, sum));
        }
    }
    best.filter(|&(_, b)| b >= MOVE_EPSILON).map(|(j, _)| j)
}

/// Indices of the `m` largest distances, ordered by distance (descending) and
/// then index.
pub fn select_topk(distances: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    idx.sort_by(|&a, &b| distances[b].total_cmp(&distances[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

/// A fresh volume with every ledger entry integrated at its target pose.
pub fn rebuild_at_targets(ledger: &IntegrationLedger, store: &TwoTierStore) -> Result<TwoTierStore> {
    let mut fresh = TwoTierStore::new(*store.config())?;
    for e in ledger.entries() {
        let pose = e.target_pose();
        fresh.stream(&pose.camera_center());
        fresh.integrate(&e.keyframe, pose)?;
    }
    Ok(fresh)
}

/// Largest voxelwise difference in signed distance and in weight between two
/// volumes. Voxels missing from one side compare against an unobserved voxel.
pub fn max_voxel_difference(a: &TwoTierStore, b: &TwoTierStore) -> (f64, f64) {
    use crate::volume::{BlockCoord, VoxelBlock};
    let mut coords: Vec<_> = a
        .blocks_sorted()
        .iter()
        .chain(b.blocks_sorted().iter())
        .map(|blk| blk.coord)
        .collect();
    coords.sort_unstable();
    coords.dedup();
    let empty = VoxelBlock::new(BlockCoord::new(0, 0, 0));
    let (mut dd, mut dw) = (0.0f64, 0.0f64);
    for c in coords {
        let va = a.block(c).unwrap_or(&empty);
        let vb = b.block(c).unwrap_or(&empty);
        for (x, y) in va.voxels.iter().zip(vb.voxels.iter()) {
            dw = dw.max((x.weight - y.weight).abs());
            dd = dd.max((x.sdf - y.sdf).abs());
        }
    }
    (dd, dw)
}
