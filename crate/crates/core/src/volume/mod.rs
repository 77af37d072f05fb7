//! Sparse voxel-hashed truncated signed distance volume.
//!
//! Blocks of 8³ voxels are allocated only near observed surfaces. The store is
//! split into an active tier (blocks within the streaming sphere around the
//! current camera) and a host tier holding everything else; moves between the
//! tiers are counted so that streaming cost can be compared across
//! re-integration strategies.
//!
//! Integration and de-integration recompute the set of touched voxels from the
//! keyframe and pose alone, so de-integrating with the exact pose used for
//! integration removes the contribution exactly (up to double rounding).

mod hash;
mod io;

pub use hash::{block_hash, BlockHashMap};
pub use io::{read_snapshot, write_snapshot, SNAPSHOT_MAGIC};

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::geometry::{Point3, Pose};
use crate::keyframe::{Keyframe, KeyframeId};

pub const BLOCK_SIDE: usize = 8;
pub const BLOCK_VOXELS: usize = BLOCK_SIDE * BLOCK_SIDE * BLOCK_SIDE;

/// Weights below this after de-integration are treated as zero.
pub const WEIGHT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl BlockCoord {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn offset(&self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Voxel {
    pub sdf: f64,
    pub weight: f64,
    pub color: [f64; 3],
}

impl Voxel {
    pub fn is_observed(&self) -> bool {
        self.weight > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    pub coord: BlockCoord,
    /// Indexed by [`voxel_index`].
    pub voxels: Box<[Voxel]>,
}

impl VoxelBlock {
    pub fn new(coord: BlockCoord) -> Self {
        Self {
            coord,
            voxels: vec![Voxel::default(); BLOCK_VOXELS].into_boxed_slice(),
        }
    }

    pub fn is_unobserved(&self) -> bool {
        self.voxels.iter().all(|v| v.weight == 0.0)
    }
}

#[inline]
pub fn voxel_index(x: usize, y: usize, z: usize) -> usize {
    x + BLOCK_SIDE * (y + BLOCK_SIDE * z)
}

#[inline]
pub fn voxel_offset(index: usize) -> (usize, usize, usize) {
    (
        index % BLOCK_SIDE,
        (index / BLOCK_SIDE) % BLOCK_SIDE,
        index / (BLOCK_SIDE * BLOCK_SIDE),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeConfig {
    /// Voxel edge length (m).
    pub voxel_size: f64,
    /// Truncation distance μ (m).
    pub truncation: f64,
    /// Radius (m) of the active-tier sphere around the camera.
    pub stream_radius: f64,
    pub hash_buckets: usize,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.01,
            truncation: 0.06,
            stream_radius: 3.0,
            hash_buckets: 1 << 16,
        }
    }
}

impl VolumeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config("voxel_size must be positive".into()));
        }
        if !(self.truncation >= 2.0 * self.voxel_size) {
            return Err(Error::Config("truncation must be at least two voxels".into()));
        }
        if !(self.stream_radius > self.truncation) {
            return Err(Error::Config("stream_radius must exceed the truncation".into()));
        }
        if self.hash_buckets == 0 {
            return Err(Error::Config("hash_buckets must be positive".into()));
        }
        Ok(())
    }

    pub fn block_size(&self) -> f64 {
        self.voxel_size * BLOCK_SIDE as f64
    }

    pub fn block_of(&self, p: &Point3) -> BlockCoord {
        let b = self.block_size();
        BlockCoord::new(
            (p.x / b).floor() as i32,
            (p.y / b).floor() as i32,
            (p.z / b).floor() as i32,
        )
    }

    pub fn block_center(&self, c: BlockCoord) -> Point3 {
        let b = self.block_size();
        Point3::new(
            (c.x as f64 + 0.5) * b,
            (c.y as f64 + 0.5) * b,
            (c.z as f64 + 0.5) * b,
        )
    }

    /// World position of a voxel center.
    #[inline]
    pub fn voxel_center(&self, c: BlockCoord, index: usize) -> Point3 {
        let (x, y, z) = voxel_offset(index);
        let s = BLOCK_SIDE as i64;
        let vs = self.voxel_size;
        Point3::new(
            ((c.x as i64 * s + x as i64) as f64 + 0.5) * vs,
            ((c.y as i64 * s + y as i64) as f64 + 0.5) * vs,
            ((c.z as i64 * s + z as i64) as f64 + 0.5) * vs,
        )
    }

    fn half_block_diagonal(&self) -> f64 {
        0.5 * self.block_size() * 3f64.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StreamCounters {
    pub blocks_streamed_in: u64,
    pub blocks_streamed_out: u64,
    pub sphere_relocations: u64,
}

impl StreamCounters {
    pub fn since(&self, earlier: &StreamCounters) -> StreamCounters {
        StreamCounters {
            blocks_streamed_in: self.blocks_streamed_in - earlier.blocks_streamed_in,
            blocks_streamed_out: self.blocks_streamed_out - earlier.blocks_streamed_out,
            sphere_relocations: self.sphere_relocations - earlier.sphere_relocations,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationRecord {
    pub keyframe: KeyframeId,
    pub pose: Pose,
    pub blocks: usize,
    pub new_blocks: usize,
    pub samples: usize,
    /// Sum of the sample weights added.
    pub weight: f64,
}

/// Two-tier sparse TSDF volume.
#[derive(Debug, Clone)]
pub struct TwoTierStore {
    cfg: VolumeConfig,
    active: BlockHashMap,
    host: BTreeMap<BlockCoord, Box<VoxelBlock>>,
    counters: StreamCounters,
    stream_center: Option<Point3>,
}

/// One voxel update derived from a keyframe pixel.
#[derive(Debug, Clone, Copy)]
struct Sample {
    sdf: f64,
    weight: f64,
    color: [f64; 3],
}

/// Per-pixel data of a keyframe as seen by the volume.
struct KeyframeView<'a> {
    kf: &'a Keyframe,
    usable: Vec<bool>,
    world_to_cam: Pose,
    cam_to_world: Pose,
}

impl<'a> KeyframeView<'a> {
    fn new(kf: &'a Keyframe, pose: &Pose, cfg: &VolumeConfig) -> Self {
        let k = &kf.intrinsics;
        let reach = cfg.stream_radius - cfg.half_block_diagonal();
        let mut usable = vec![false; k.pixel_count()];
        for v in 0..k.height {
            for u in 0..k.width {
                let z = *kf.depth.get(u, v);
                if !(z > 0.0) || !(*kf.weight.get(u, v) > 0.0) {
                    continue;
                }
                let ray = k.unproject_unchecked(u as f64, v as f64, 1.0);
                usable[v * k.width + u] = (z + cfg.truncation) * ray.norm() <= reach;
            }
        }
        Self {
            kf,
            usable,
            world_to_cam: pose.inverse(),
            cam_to_world: *pose,
        }
    }

    /// Blocks intersected by the truncation band along every usable pixel ray.
    fn footprint(&self, cfg: &VolumeConfig) -> Vec<BlockCoord> {
        let k = &self.kf.intrinsics;
        let mu = cfg.truncation;
        let steps = ((2.0 * mu) / (0.5 * cfg.voxel_size)).ceil().max(1.0) as usize;
        let mut set = HashSet::new();
        for v in 0..k.height {
            for u in 0..k.width {
                if !self.usable[v * k.width + u] {
                    continue;
                }
                let z = *self.kf.depth.get(u, v);
                let ray = k.unproject_unchecked(u as f64, v as f64, 1.0);
                let mut last = None;
                for i in 0..=steps {
                    let zs = z - mu + (2.0 * mu) * (i as f64 / steps as f64);
                    if zs <= 0.0 {
                        continue;
                    }
                    let b = cfg.block_of(&self.cam_to_world.transform(&(ray * zs)));
                    if last != Some(b) {
                        set.insert(b);
                        last = Some(b);
                    }
                }
            }
        }
        let mut out: Vec<BlockCoord> = set.into_iter().collect();
        out.sort_unstable();
        out
    }

    #[inline]
    fn sample(&self, world: &Point3, mu: f64) -> Option<Sample> {
        let k = &self.kf.intrinsics;
        let p = self.world_to_cam.transform(world);
        if p.z <= 0.0 {
            return None;
        }
        let (u, v) = k.nearest_pixel(&k.project_unchecked(&p))?;
        if !self.usable[v * k.width + u] {
            return None;
        }
        let d = self.kf.depth.get(u, v) - p.z;
        if d > mu || d < -mu {
            return None;
        }
        Some(Sample {
            sdf: d.clamp(-mu, mu),
            weight: *self.kf.weight.get(u, v),
            color: self.kf.color_at(u, v),
        })
    }
}

impl TwoTierStore {
    pub fn new(cfg: VolumeConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            active: BlockHashMap::new(cfg.hash_buckets),
            host: BTreeMap::new(),
            counters: StreamCounters::default(),
            stream_center: None,
        })
    }

    pub fn config(&self) -> &VolumeConfig {
        &self.cfg
    }

    pub fn counters(&self) -> StreamCounters {
        self.counters
    }

    pub fn stream_center(&self) -> Option<Point3> {
        self.stream_center
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn host_len(&self) -> usize {
        self.host.len()
    }

    pub fn block_count(&self) -> usize {
        self.active.len() + self.host.len()
    }

    pub fn is_active(&self, coord: BlockCoord) -> bool {
        self.active.contains(coord)
    }

    pub fn block(&self, coord: BlockCoord) -> Option<&VoxelBlock> {
        self.active
            .get(coord)
            .or_else(|| self.host.get(&coord).map(|b| &**b))
    }

    /// All blocks of both tiers in ascending coordinate order.
    pub fn blocks_sorted(&self) -> Vec<&VoxelBlock> {
        let mut v: Vec<&VoxelBlock> = self
            .active
            .iter()
            .chain(self.host.values().map(|b| &**b))
            .collect();
        v.sort_unstable_by_key(|b| b.coord);
        v
    }

    pub fn active_coords(&self) -> Vec<BlockCoord> {
        let mut v: Vec<_> = self.active.iter().map(|b| b.coord).collect();
        v.sort_unstable();
        v
    }

    pub fn host_coords(&self) -> Vec<BlockCoord> {
        self.host.keys().copied().collect()
    }

    /// Voxel containing the world point `p`, if its block exists.
    pub fn voxel_at(&self, p: &Point3) -> Option<&Voxel> {
        let b = self.cfg.block_of(p);
        let block = self.block(b)?;
        let vs = self.cfg.voxel_size;
        let local = |q: f64, bc: i32| {
            ((q / vs).floor() as i64 - bc as i64 * BLOCK_SIDE as i64).clamp(0, BLOCK_SIDE as i64 - 1)
                as usize
        };
        Some(&block.voxels[voxel_index(local(p.x, b.x), local(p.y, b.y), local(p.z, b.z))])
    }

    pub fn total_weight(&self) -> f64 {
        self.blocks_sorted()
            .iter()
            .flat_map(|b| b.voxels.iter())
            .map(|v| v.weight)
            .sum()
    }

    pub fn observed_voxels(&self) -> usize {
        self.blocks_sorted()
            .iter()
            .flat_map(|b| b.voxels.iter())
            .filter(|v| v.is_observed())
            .count()
    }

    /// Moves blocks so that exactly those whose center lies within the
    /// streaming radius of `center` are active. Returns the counter delta.
    pub fn stream(&mut self, center: &Point3) -> StreamCounters {
        let before = self.counters;
        if let Some(last) = self.stream_center {
            if (center - last).norm() > self.cfg.block_size() {
                self.counters.sphere_relocations += 1;
            }
        }
        self.stream_center = Some(*center);

        let cfg = self.cfg;
        let r = cfg.stream_radius;
        let leaving = self
            .active
            .drain_where(|b| (cfg.block_center(b.coord) - center).norm() > r);
        self.counters.blocks_streamed_out += leaving.len() as u64;

        let entering: Vec<BlockCoord> = self
            .host
            .keys()
            .filter(|c| (cfg.block_center(**c) - center).norm() <= r)
            .copied()
            .collect();
        self.counters.blocks_streamed_in += entering.len() as u64;
        for c in entering {
            let block = self.host.remove(&c).expect("host block");
            self.active.insert(block);
        }
        for block in leaving {
            self.host.insert(block.coord, block);
        }
        self.counters.since(&before)
    }

    fn check_streamable(&self, coord: BlockCoord) -> Result<()> {
        let Some(center) = self.stream_center else {
            return Err(Error::StreamingContract { coord });
        };
        if self.host.contains_key(&coord)
            || (self.cfg.block_center(coord) - center).norm() > self.cfg.stream_radius
        {
            return Err(Error::StreamingContract { coord });
        }
        Ok(())
    }

    /// Allocates every block the keyframe touches at `pose` in the active
    /// tier. Returns the newly allocated coordinates. Nothing is allocated if
    /// any required block lies outside the active sphere.
    pub fn allocate_blocks(&mut self, kf: &Keyframe, pose: &Pose) -> Result<Vec<BlockCoord>> {
        let view = KeyframeView::new(kf, pose, &self.cfg);
        let footprint = view.footprint(&self.cfg);
        self.allocate_footprint(&footprint)
    }

    fn allocate_footprint(&mut self, footprint: &[BlockCoord]) -> Result<Vec<BlockCoord>> {
        let mut fresh = Vec::new();
        for &c in footprint {
            if self.active.contains(c) {
                continue;
            }
            self.check_streamable(c)?;
            fresh.push(c);
        }
        for &c in &fresh {
            self.active.insert(Box::new(VoxelBlock::new(c)));
        }
        Ok(fresh)
    }

    /// Fuses the keyframe into the volume at `pose` with a running weighted
    /// average over signed distance and color.
    pub fn integrate(&mut self, kf: &Keyframe, pose: &Pose) -> Result<IntegrationRecord> {
        let cfg = self.cfg;
        let view = KeyframeView::new(kf, pose, &cfg);
        let footprint = view.footprint(&cfg);
        let new_blocks = self.allocate_footprint(&footprint)?.len();
        let mut samples = 0;
        let mut added = 0.0;
        for &c in &footprint {
            let block = self.active.get_mut(c).expect("allocated block");
            for (i, vox) in block.voxels.iter_mut().enumerate() {
                let Some(s) = view.sample(&cfg.voxel_center(c, i), cfg.truncation) else {
                    continue;
                };
                let w = vox.weight + s.weight;
                vox.sdf = (vox.sdf * vox.weight + s.sdf * s.weight) / w;
                for ch in 0..3 {
                    vox.color[ch] = (vox.color[ch] * vox.weight + s.color[ch] * s.weight) / w;
                }
                vox.weight = w;
                samples += 1;
                added += s.weight;
            }
        }
        Ok(IntegrationRecord {
            keyframe: kf.id,
            pose: *pose,
            blocks: footprint.len(),
            new_blocks,
            samples,
            weight: added,
        })
    }

    /// Removes a keyframe previously integrated at exactly `pose`. The volume
    /// is left untouched if any voxel would end with negative weight.
    pub fn deintegrate(&mut self, kf: &Keyframe, pose: &Pose) -> Result<usize> {
        let cfg = self.cfg;
        let view = KeyframeView::new(kf, pose, &cfg);
        let footprint = view.footprint(&cfg);

        for &c in &footprint {
            match self.active.get(c) {
                Some(block) => {
                    for (i, vox) in block.voxels.iter().enumerate() {
                        if let Some(s) = view.sample(&cfg.voxel_center(c, i), cfg.truncation) {
                            if vox.weight - s.weight < -WEIGHT_EPSILON {
                                return Err(Error::Inconsistency {
                                    coord: c,
                                    voxel: i,
                                    weight: vox.weight,
                                    sample: s.weight,
                                });
                            }
                        }
                    }
                }
                None => {
                    let touched = (0..BLOCK_VOXELS)
                        .find_map(|i| view.sample(&cfg.voxel_center(c, i), cfg.truncation).map(|s| (i, s)));
                    if let Some((i, s)) = touched {
                        if self.host.contains_key(&c) {
                            return Err(Error::StreamingContract { coord: c });
                        }
                        return Err(Error::Inconsistency {
                            coord: c,
                            voxel: i,
                            weight: 0.0,
                            sample: s.weight,
                        });
                    }
                }
            }
        }

        let mut samples = 0;
        for &c in &footprint {
            let Some(block) = self.active.get_mut(c) else {
                continue;
            };
            for (i, vox) in block.voxels.iter_mut().enumerate() {
                let Some(s) = view.sample(&cfg.voxel_center(c, i), cfg.truncation) else {
                    continue;
                };
                let w = vox.weight - s.weight;
                if w < WEIGHT_EPSILON {
                    *vox = Voxel::default();
                } else {
                    vox.sdf = (vox.sdf * vox.weight - s.sdf * s.weight) / w;
                    for ch in 0..3 {
                        vox.color[ch] = (vox.color[ch] * vox.weight - s.color[ch] * s.weight) / w;
                    }
                    vox.weight = w;
                }
                samples += 1;
            }
        }
        Ok(samples)
    }

    /// Drops blocks in either tier whose voxels are all unobserved.
    pub fn garbage_collect(&mut self) -> usize {
        let freed_active = self.active.drain_where(|b| b.is_unobserved()).len();
        let before = self.host.len();
        self.host.retain(|_, b| !b.is_unobserved());
        freed_active + (before - self.host.len())
    }

    /// Inserts a block into the host tier (used when restoring snapshots).
    pub(crate) fn insert_host(&mut self, block: Box<VoxelBlock>) {
        self.active.remove(block.coord);
        self.host.insert(block.coord, block);
    }

    /// Writes an analytic signed distance field into every block overlapping
    /// `[min, max]`. Voxels within the truncation band get weight 1.
    pub fn fill_analytic(
        &mut self,
        min: &Point3,
        max: &Point3,
        sdf: impl Fn(&Point3) -> f64,
        color: [f64; 3],
    ) {
        let lo = self.cfg.block_of(min);
        let hi = self.cfg.block_of(max);
        let mu = self.cfg.truncation;
        for z in lo.z..=hi.z {
            for y in lo.y..=hi.y {
                for x in lo.x..=hi.x {
                    let c = BlockCoord::new(x, y, z);
                    let mut block = VoxelBlock::new(c);
                    let mut any = false;
                    for (i, vox) in block.voxels.iter_mut().enumerate() {
                        let d = sdf(&self.cfg.voxel_center(c, i));
                        if d.abs() <= mu {
                            *vox = Voxel {
                                sdf: d,
                                weight: 1.0,
                                color,
                            };
                            any = true;
                        }
                    }
                    if any {
                        self.insert_host(Box::new(block));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Intrinsics;
    use crate::image::{DepthMap, Image, WeightMap};
    use nalgebra::Vector3;

    fn k() -> Intrinsics {
        Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn cfg() -> VolumeConfig {
        VolumeConfig {
            voxel_size: 0.02,
            truncation: 0.06,
            stream_radius: 3.0,
            hash_buckets: 4096,
        }
    }

    fn wall_kf(id: u64, z: f64, weight: f64, gray: u8) -> Keyframe {
        let k = k();
        Keyframe::from_maps(
            id,
            k,
            DepthMap::filled(k.width, k.height, z),
            WeightMap::filled(k.width, k.height, weight),
            Image::filled(k.width, k.height, Some([gray; 3])),
            Pose::identity(),
        )
    }

    fn max_abs_diff(a: &TwoTierStore, b: &TwoTierStore) -> (f64, f64, f64) {
        let mut coords: Vec<BlockCoord> =
            a.blocks_sorted().iter().chain(b.blocks_sorted().iter()).map(|b| b.coord).collect();
        coords.sort_unstable();
        coords.dedup();
        let empty = VoxelBlock::new(BlockCoord::new(0, 0, 0));
        let (mut dd, mut dw, mut dc) = (0.0f64, 0.0f64, 0.0f64);
        for c in coords {
            let ba = a.block(c).unwrap_or(&empty);
            let bb = b.block(c).unwrap_or(&empty);
            for (va, vb) in ba.voxels.iter().zip(bb.voxels.iter()) {
                dw = dw.max((va.weight - vb.weight).abs());
                if va.weight > 0.0 || vb.weight > 0.0 {
                    dd = dd.max((va.sdf - vb.sdf).abs());
                    for ch in 0..3 {
                        dc = dc.max((va.color[ch] - vb.color[ch]).abs());
                    }
                }
            }
        }
        (dd, dw, dc)
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(VolumeConfig { truncation: 0.03, ..cfg() }.validate().is_err());
        assert!(VolumeConfig { stream_radius: 0.05, ..cfg() }.validate().is_err());
        assert!(VolumeConfig { voxel_size: 0.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn voxel_geometry() {
        let c = cfg();
        assert_eq!(c.block_of(&Point3::new(-0.01, 0.0, 0.17)), BlockCoord::new(-1, 0, 1));
        let p = c.voxel_center(BlockCoord::new(-1, 0, 2), voxel_index(7, 0, 1));
        assert!((p - Point3::new(-0.01, 0.01, 0.35)).norm() < 1e-12);
        for i in [0, 1, 77, 511] {
            let (x, y, z) = voxel_offset(i);
            assert_eq!(voxel_index(x, y, z), i);
        }
    }

    #[test]
    fn empty_keyframe_allocates_nothing() {
        let mut s = TwoTierStore::new(cfg()).unwrap();
        s.stream(&Point3::zeros());
        let kf = wall_kf(0, 0.0, 0.0, 0);
        assert!(s.allocate_blocks(&kf, &Pose::identity()).unwrap().is_empty());
    }

    #[test]
    fn single_ray_band() {
        let c = VolumeConfig {
            voxel_size: 0.01,
            truncation: 0.08,
            ..cfg()
        };
        let k = k();
        let mut depth = DepthMap::filled(k.width, k.height, 0.0);
        let mut weight = WeightMap::filled(k.width, k.height, 0.0);
        // principal point sits between pixels; use the pixel whose ray is closest
        let (u, v) = (16, 12);
        depth.set(u, v, 2.0);
        weight.set(u, v, 1.0);
        let kf = Keyframe::from_maps(0, k, depth, weight, Image::filled(k.width, k.height, None), Pose::identity());
        let mut s = TwoTierStore::new(c).unwrap();
        s.stream(&Point3::zeros());
        let fresh = s.allocate_blocks(&kf, &Pose::identity()).unwrap();
        let ray = k.unproject_unchecked(u as f64, v as f64, 1.0);
        let expected: HashSet<BlockCoord> = (0..=1600)
            .map(|i| c.block_of(&(ray * (1.92 + 0.16 * i as f64 / 1600.0))))
            .collect();
        let got: HashSet<BlockCoord> = fresh.iter().copied().collect();
        assert_eq!(got, expected);
        assert!(s.allocate_blocks(&kf, &Pose::identity()).unwrap().is_empty());
    }

    #[test]
    fn first_and_second_sample_running_average() {
        let mut s = TwoTierStore::new(cfg()).unwrap();
        s.stream(&Point3::zeros());
        // voxel centers lie at odd multiples of 0.01; the voxel at z = 0.99 sees d = 0.01
        s.integrate(&wall_kf(0, 1.0, 1.0, 100), &Pose::identity()).unwrap();
        let probe = Point3::new(0.01, 0.01, 0.99);
        let v = *s.voxel_at(&probe).unwrap();
        assert!((v.sdf - 0.01).abs() < 1e-12);
        assert_eq!(v.weight, 1.0);
        assert_eq!(v.color, [100.0; 3]);
        s.integrate(&wall_kf(1, 1.02, 1.0, 200), &Pose::identity()).unwrap();
        let v = *s.voxel_at(&probe).unwrap();
        assert!((v.sdf - 0.02).abs() < 1e-12);
        assert_eq!(v.weight, 2.0);
        assert_eq!(v.color, [150.0; 3]);
    }

    #[test]
    fn band_is_strict() {
        let mut s = TwoTierStore::new(cfg()).unwrap();
        s.stream(&Point3::zeros());
        s.integrate(&wall_kf(0, 1.0, 1.0, 100), &Pose::identity()).unwrap();
        for b in s.blocks_sorted() {
            for v in b.voxels.iter().filter(|v| v.is_observed()) {
                assert!(v.sdf.abs() <= 0.06 + 1e-12);
            }
        }
        // far behind and far in front are never touched
        assert!(s.voxel_at(&Point3::new(0.01, 0.01, 1.13)).map_or(true, |v| !v.is_observed()));
        assert!(s.voxel_at(&Point3::new(0.01, 0.01, 0.87)).map_or(true, |v| !v.is_observed()));
    }

    #[test]
    fn integrate_deintegrate_is_exact_inverse() {
        let mut s = TwoTierStore::new(cfg()).unwrap();
        s.stream(&Point3::zeros());
        let pose = Pose::from_axis_angle(&Vector3::new(0.2, 1.0, 0.1), 0.3, Vector3::new(0.1, -0.05, 0.2));
        let kf = wall_kf(0, 1.3, 0.37, 90);
        let rec = s.integrate(&kf, &pose).unwrap();
        assert!(rec.samples > 0);
        s.deintegrate(&kf, &pose).unwrap();
        assert_eq!(s.observed_voxels(), 0);
        assert_eq!(s.garbage_collect(), rec.new_blocks);
        assert_eq!(s.block_count(), 0);
    }

    #[test]
    fn deintegrate_subset_matches_direct() {
        let pa = Pose::from_axis_angle(&Vector3::y(), 0.1, Vector3::new(0.0, 0.0, 0.05));
        let pb = Pose::from_axis_angle(&Vector3::x(), -0.15, Vector3::new(0.03, 0.0, 0.0));
        let a = wall_kf(0, 1.2, 0.7, 50);
        let b = wall_kf(1, 1.25, 0.4, 220);
        let mut ab = TwoTierStore::new(cfg()).unwrap();
        ab.stream(&Point3::zeros());
        ab.integrate(&a, &pa).unwrap();
        ab.integrate(&b, &pb).unwrap();
        ab.deintegrate(&a, &pa).unwrap();
        let mut only_b = TwoTierStore::new(cfg()).unwrap();
        only_b.stream(&Point3::zeros());
        only_b.integrate(&b, &pb).unwrap();
        let (dd, dw, dc) = max_abs_diff(&ab, &only_b);
        assert!(dd < 1e-9 && dw < 1e-12 && dc < 1e-9, "{dd} {dw} {dc}");
    }

    #[test]
    fn deintegrate_wrong_pose_is_rejected() {
        let mut s = TwoTierStore::new(cfg()).unwrap();
        s.stream(&Point3::zeros());
        let kf = wall_kf(0, 1.0, 1.0, 10);
        s.integrate(&kf, &Pose::identity()).unwrap();
        let snapshot = s.clone();
        let wrong = Pose::from_translation(Vector3::new(0.0, 0.0, 0.3));
        assert!(matches!(s.deintegrate(&kf, &wrong), Err(Error::Inconsistency { .. })));
        let (dd, dw, _) = max_abs_diff(&s, &snapshot);
        assert_eq!((dd, dw), (0.0, 0.0));
    }

    #[test]
    fn integration_order_independent() {
        let kfs: Vec<(Keyframe, Pose)> = (0..4)
            .map(|i| {
                let p = Pose::from_axis_angle(&Vector3::y(), 0.05 * i as f64, Vector3::new(0.02 * i as f64, 0.0, 0.0));
                (wall_kf(i, 1.1 + 0.01 * i as f64, 0.3 + 0.1 * i as f64, (40 * i) as u8), p)
            })
            .collect();
        let build = |order: &[usize]| {
            let mut s = TwoTierStore::new(cfg()).unwrap();
            s.stream(&Point3::zeros());
            for &i in order {
                s.integrate(&kfs[i].0, &kfs[i].1).unwrap();
            }
            s
        };
        let (dd, dw, dc) = max_abs_diff(&build(&[0, 1, 2, 3]), &build(&[3, 1, 0, 2]));
        assert!(dd < 1e-9 && dw < 1e-9 && dc < 1e-9);
    }

    fn seeded_store() -> TwoTierStore {
        let mut s = TwoTierStore::new(cfg()).unwrap();
        for x in -20..20 {
            for y in -20..20 {
                let mut b = VoxelBlock::new(BlockCoord::new(x, y, 0));
                b.voxels[0].weight = 1.0;
                s.insert_host(Box::new(b));
            }
        }
        s
    }

    #[test]
    fn stream_fixed_point_and_disjoint_spheres() {
        let mut s = seeded_store();
        let c = Point3::new(0.0, 0.0, 0.0);
        let first = s.stream(&c);
        assert!(first.blocks_streamed_in > 0);
        assert_eq!(first.sphere_relocations, 0);
        assert_eq!(s.stream(&c), StreamCounters::default());
        let active_before = s.active_len() as u64;
        let far = Point3::new(2.0 * 3.0 + 1.0, 0.0, 0.0);
        let d = s.stream(&far);
        assert_eq!(d.blocks_streamed_out, active_before);
        assert_eq!(d.sphere_relocations, 1);
    }

    #[test]
    fn stream_moves_symmetric_difference() {
        let mut s = seeded_store();
        let cfg = *s.config();
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(cfg.stream_radius / 2.0, 0.0, 0.0);
        s.stream(&a);
        let all: Vec<BlockCoord> = s.blocks_sorted().iter().map(|b| b.coord).collect();
        let inside = |c: &BlockCoord, p: &Point3| (cfg.block_center(*c) - p).norm() <= cfg.stream_radius;
        let only_a = all.iter().filter(|c| inside(c, &a) && !inside(c, &b)).count() as u64;
        let only_b = all.iter().filter(|c| !inside(c, &a) && inside(c, &b)).count() as u64;
        let d = s.stream(&b);
        assert_eq!(d.blocks_streamed_out, only_a);
        assert_eq!(d.blocks_streamed_in, only_b);
        for c in s.active_coords() {
            assert!(inside(&c, &b));
            assert!(!s.host_coords().contains(&c));
        }
    }

    #[test]
    fn allocation_outside_sphere_is_contract_violation() {
        let mut s = TwoTierStore::new(cfg()).unwrap();
        s.stream(&Point3::new(10.0, 0.0, 0.0));
        let kf = wall_kf(0, 1.0, 1.0, 0);
        assert!(matches!(
            s.allocate_blocks(&kf, &Pose::identity()),
            Err(Error::StreamingContract { .. })
        ));
        assert_eq!(s.block_count(), 0);
    }

    #[test]
    fn garbage_collect_counts_match_scan() {
        let mut s = seeded_store();
        assert_eq!(s.garbage_collect(), 0);
        for x in 0..5 {
            s.insert_host(Box::new(VoxelBlock::new(BlockCoord::new(x, 0, 5))));
        }
        s.stream(&Point3::zeros());
        let brute = s.blocks_sorted().iter().filter(|b| b.voxels.iter().all(|v| v.weight == 0.0)).count();
        assert_eq!(brute, 5);
        assert_eq!(s.garbage_collect(), brute);
    }
}
