//! Keyframe fusion: consecutive RGB-D frames are merged into a single 2.5D
//! keyframe (fused depth, fusion weights, fused color) anchored to an
//! externally optimized pose.

mod color;
mod strategy;

pub use color::{blurriness, unsharp_mask, weighted_median};
pub use strategy::{keyframe_decision, overlap_ratio, KeyframeStrategy};

use nalgebra::Vector3;

use crate::geometry::{Intrinsics, Pose};
use crate::image::{DepthMap, Image, Mask, RgbImage, WeightMap};

/// Identifier of an anchor (DVO) keyframe: the index of the frame that introduced it.
pub type AnchorId = u64;
pub type KeyframeId = u64;

/// Tunables of depth and color fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    /// Depth jump (m) to any 8-neighbor above which a pixel is discarded.
    pub discontinuity_threshold: f64,
    /// Depth agreement (m) required for color sampling and overlap.
    pub occlusion_tolerance: f64,
    pub unsharp_sigma: f64,
    pub unsharp_gain: f64,
    /// Samples whose warped depth differs from an already observed keyframe
    /// depth by more than this (m) belong to another surface and are skipped.
    pub fusion_gate: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            discontinuity_threshold: 0.1,
            occlusion_tolerance: 0.05,
            unsharp_sigma: 1.5,
            unsharp_gain: 0.5,
            fusion_gate: 0.3,
        }
    }
}

/// One registered RGB-D input frame.
#[derive(Debug, Clone)]
pub struct FrameObservation {
    /// 1-based frame index.
    pub index: u64,
    pub color: RgbImage,
    /// Meters; 0 marks an invalid pixel.
    pub depth: DepthMap,
    /// Camera-to-world pose estimate at arrival.
    pub pose: Pose,
}

/// Per-member data kept until the keyframe color is finalized.
#[derive(Debug, Clone)]
struct MemberObservation {
    /// Member camera to keyframe camera, as used for depth fusion.
    to_keyframe: Pose,
    color: RgbImage,
    depth: DepthMap,
    weights: WeightMap,
    sharpness: f64,
}

#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub intrinsics: Intrinsics,
    /// Fused depth `Z*` (0 where no observation).
    pub depth: DepthMap,
    /// Fusion weights `W*`.
    pub weight: WeightMap,
    /// Fused color `C*`; `None` for pixels without any valid color observation
    /// (and everywhere before [`Keyframe::fuse_color`]).
    pub color: Image<Option<[u8; 3]>>,
    anchor_id: AnchorId,
    anchor_pose: Pose,
    rel_pose: Pose,
    pose: Pose,
    members: Vec<u64>,
    pending: Vec<MemberObservation>,
    color_finalized: bool,
}

impl Keyframe {
    /// Opens an empty keyframe whose pose is `first_pose`, expressed relative
    /// to the anchor.
    pub fn new(
        id: KeyframeId,
        intrinsics: Intrinsics,
        anchor_id: AnchorId,
        anchor_pose: Pose,
        first_pose: &Pose,
    ) -> Self {
        let rel_pose = anchor_pose.inverse().compose(first_pose);
        let (w, h) = (intrinsics.width, intrinsics.height);
        Self {
            id,
            intrinsics,
            depth: DepthMap::filled(w, h, 0.0),
            weight: WeightMap::filled(w, h, 0.0),
            color: Image::filled(w, h, None),
            anchor_id,
            anchor_pose,
            rel_pose,
            pose: anchor_pose.compose(&rel_pose),
            members: Vec::new(),
            pending: Vec::new(),
            color_finalized: false,
        }
    }

    /// A finalized keyframe built directly from fused maps, anchored to itself.
    pub fn from_maps(
        id: KeyframeId,
        intrinsics: Intrinsics,
        depth: DepthMap,
        weight: WeightMap,
        color: Image<Option<[u8; 3]>>,
        pose: Pose,
    ) -> Self {
        assert_eq!(depth.dims(), (intrinsics.width, intrinsics.height));
        assert_eq!(weight.dims(), depth.dims());
        assert_eq!(color.dims(), depth.dims());
        Self {
            id,
            intrinsics,
            depth,
            weight,
            color,
            anchor_id: id,
            anchor_pose: pose,
            rel_pose: Pose::identity(),
            pose,
            members: vec![id],
            pending: Vec::new(),
            color_finalized: true,
        }
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn anchor_id(&self) -> AnchorId {
        self.anchor_id
    }

    pub fn rel_pose(&self) -> &Pose {
        &self.rel_pose
    }

    /// Moves the keyframe with its anchor.
    pub fn set_anchor_pose(&mut self, anchor_pose: Pose) {
        self.anchor_pose = anchor_pose;
        self.pose = anchor_pose.compose(&self.rel_pose);
    }

    pub fn members(&self) -> &[u64] {
        &self.members
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_color_finalized(&self) -> bool {
        self.color_finalized
    }

    /// Number of pixels carrying fused depth.
    pub fn valid_pixels(&self) -> usize {
        self.weight.as_slice().iter().filter(|&&w| w > 0.0).count()
    }

    /// Fused color as real RGB, with colorless pixels mapped to mid gray.
    #[inline]
    pub fn color_at(&self, u: usize, v: usize) -> [f64; 3] {
        match self.color.get(u, v) {
            Some(c) => [c[0] as f64, c[1] as f64, c[2] as f64],
            None => [128.0; 3],
        }
    }

    /// Warps every usable pixel of `frame` into the keyframe and applies the
    /// weighted running average to the fused depth.
    pub fn fuse_depth(&mut self, frame: &FrameObservation, params: &FusionParams) {
        let k = self.intrinsics;
        assert_eq!(frame.depth.dims(), (k.width, k.height), "frame size mismatch");
        let weights = effective_depth_weights(&frame.depth, &k, params);
        let to_kf = self.pose.inverse().compose(&frame.pose);
        for v in 0..k.height {
            for u in 0..k.width {
                let w = *weights.get(u, v);
                if w <= 0.0 {
                    continue;
                }
                let z = *frame.depth.get(u, v);
                let p = to_kf.transform(&k.unproject_unchecked(u as f64, v as f64, z));
                if p.z <= 0.0 {
                    continue;
                }
                let Some((uk, vk)) = k.nearest_pixel(&k.project_unchecked(&p)) else {
                    continue;
                };
                let wk = self.weight.get_mut(uk, vk);
                let zk = self.depth.get_mut(uk, vk);
                if *wk > 0.0 && (p.z - *zk).abs() > params.fusion_gate {
                    continue;
                }
                *zk = (*wk * *zk + w * p.z) / (*wk + w);
                *wk += w;
            }
        }
        self.members.push(frame.index);
        self.pending.push(MemberObservation {
            to_keyframe: to_kf,
            color: unsharp_mask(&frame.color, params.unsharp_sigma, params.unsharp_gain),
            sharpness: blurriness(&frame.color.to_gray()),
            depth: frame.depth.clone(),
            weights,
        });
        self.color_finalized = false;
    }

    /// Computes the fused color as the per-channel weighted median of all
    /// member observations, then drops the member buffers.
    pub fn fuse_color(&mut self, params: &FusionParams) {
        let k = self.intrinsics;
        let mut samples: [Vec<(f64, f64)>; 3] = Default::default();
        let from_kf: Vec<Pose> = self.pending.iter().map(|m| m.to_keyframe.inverse()).collect();
        for v in 0..k.height {
            for u in 0..k.width {
                if *self.weight.get(u, v) <= 0.0 {
                    self.color.set(u, v, None);
                    continue;
                }
                let zk = *self.depth.get(u, v);
                let pk = k.unproject_unchecked(u as f64, v as f64, zk);
                samples.iter_mut().for_each(Vec::clear);
                for (m, to_member) in self.pending.iter().zip(&from_kf) {
                    let p = to_member.transform(&pk);
                    if p.z <= 0.0 {
                        continue;
                    }
                    let x = k.project_unchecked(&p);
                    let Some((um, vm)) = k.nearest_pixel(&x) else {
                        continue;
                    };
                    let zm = *m.depth.get(um, vm);
                    if zm <= 0.0 || (zm - p.z).abs() > params.occlusion_tolerance {
                        continue;
                    }
                    let w = m.sharpness * m.weights.get(um, vm);
                    if w <= 0.0 {
                        continue;
                    }
                    let Some(c) = m.color.sample_bilinear(x.x, x.y) else {
                        continue;
                    };
                    for ch in 0..3 {
                        samples[ch].push((c[ch], w));
                    }
                }
                let fused = if samples[0].is_empty() {
                    None
                } else {
                    let mut c = [0u8; 3];
                    for ch in 0..3 {
                        let m = weighted_median(&mut samples[ch]).expect("non-empty samples");
                        c[ch] = m.round().clamp(0.0, 255.0) as u8;
                    }
                    Some(c)
                };
                self.color.set(u, v, fused);
            }
        }
        self.pending = Vec::new();
        self.color_finalized = true;
    }
}

/// View- and distance-dependent sample weight `cos(θ) / z²`, where `θ` is the
/// angle between the surface normal (oriented toward the camera) and the
/// camera axis. Zero for invalid depth or back-facing normals.
pub fn depth_sample_weight(normal: &Vector3<f64>, z: f64) -> f64 {
    if !(z > 0.0) {
        return 0.0;
    }
    let cos_theta = -normal.z / normal.norm();
    if !(cos_theta > 0.0) {
        return 0.0;
    }
    cos_theta / (z * z)
}

/// Per-pixel depth weights from central-difference normals. Border pixels
/// and pixels with an invalid 4-neighbor get zero weight.
pub fn depth_weights(depth: &DepthMap, k: &Intrinsics) -> WeightMap {
    let (w, h) = depth.dims();
    let mut out = WeightMap::filled(w, h, 0.0);
    if w < 3 || h < 3 {
        return out;
    }
    let point = |u: usize, v: usize| {
        let z = *depth.get(u, v);
        (z > 0.0).then(|| k.unproject_unchecked(u as f64, v as f64, z))
    };
    for v in 1..h - 1 {
        for u in 1..w - 1 {
            let (Some(c), Some(l), Some(r), Some(t), Some(b)) = (
                point(u, v),
                point(u - 1, v),
                point(u + 1, v),
                point(u, v - 1),
                point(u, v + 1),
            ) else {
                continue;
            };
            let mut n = (r - l).cross(&(b - t));
            let len = n.norm();
            if len == 0.0 {
                continue;
            }
            n /= len;
            if n.dot(&c) > 0.0 {
                n = -n;
            }
            out.set(u, v, depth_sample_weight(&n, c.z));
        }
    }
    out
}

/// Marks pixels to discard: invalid pixels, and valid pixels whose depth
/// differs from any 8-neighbor by more than `threshold` (invalid neighbors
/// always count as a discontinuity).
pub fn discontinuity_mask(depth: &DepthMap, threshold: f64) -> Mask {
    let (w, h) = depth.dims();
    Mask::from_fn(w, h, |u, v| {
        let z = *depth.get(u, v);
        if !(z > 0.0) {
            return true;
        }
        for dv in -1i64..=1 {
            for du in -1i64..=1 {
                if du == 0 && dv == 0 {
                    continue;
                }
                let (nu, nv) = (u as i64 + du, v as i64 + dv);
                if nu < 0 || nv < 0 || nu >= w as i64 || nv >= h as i64 {
                    continue;
                }
                let zn = *depth.get(nu as usize, nv as usize);
                if !(zn > 0.0) || (zn - z).abs() > threshold {
                    return true;
                }
            }
        }
        false
    })
}

/// Depth weights with discontinuity-masked pixels zeroed.
pub fn effective_depth_weights(depth: &DepthMap, k: &Intrinsics, params: &FusionParams) -> WeightMap {
    let mask = discontinuity_mask(depth, params.discontinuity_threshold);
    let mut weights = depth_weights(depth, k);
    for (w, m) in weights.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        if *m {
            *w = 0.0;
        }
    }
    weights
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point3;
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(50.0, 50.0, 15.5, 11.5, 32, 24).unwrap()
    }

    fn wall(z: f64) -> FrameObservation {
        let k = k();
        FrameObservation {
            index: 1,
            color: RgbImage::from_fn(k.width, k.height, |u, v| [(u * 7) as u8, (v * 9) as u8, 77]),
            depth: DepthMap::filled(k.width, k.height, z),
            pose: Pose::identity(),
        }
    }

    #[test]
    fn depth_sample_weight_examples() {
        assert_eq!(depth_sample_weight(&Vector3::new(0.0, 0.0, -1.0), 1.0), 1.0);
        let t = 60f64.to_radians();
        let n = Vector3::new(0.0, t.sin(), -t.cos());
        assert!((depth_sample_weight(&n, 2.0) - 0.125).abs() < 1e-12);
        assert_eq!(depth_sample_weight(&Vector3::new(0.0, 0.0, -1.0), 0.0), 0.0);
        assert_eq!(depth_sample_weight(&Vector3::new(0.0, 0.0, 1.0), 1.0), 0.0);
    }

    #[test]
    fn frontal_wall_weights() {
        let f = wall(2.0);
        let w = depth_weights(&f.depth, &k());
        assert_eq!(*w.get(0, 5), 0.0);
        assert!((w.get(10, 10) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn discontinuity_examples() {
        let plane = DepthMap::filled(8, 6, 1.5);
        assert!(discontinuity_mask(&plane, 0.1).as_slice().iter().all(|m| !m));

        let step = DepthMap::from_fn(8, 6, |u, _| if u < 4 { 1.0 } else { 1.5 });
        let m = discontinuity_mask(&step, 0.1);
        for v in 0..6 {
            for u in 0..8 {
                assert_eq!(*m.get(u, v), u == 3 || u == 4, "({u},{v})");
            }
        }

        let mut hole = DepthMap::filled(5, 5, 1.0);
        hole.set(2, 2, 0.0);
        let m = discontinuity_mask(&hole, 0.1);
        for v in 0..5 {
            for u in 0..5 {
                let near = (u as i64 - 2).abs() <= 1 && (v as i64 - 2).abs() <= 1;
                assert_eq!(*m.get(u, v), near, "({u},{v})");
            }
        }
    }

    #[test]
    fn running_average_examples() {
        let f = wall(2.0);
        let mut kf = Keyframe::new(0, k(), 1, Pose::identity(), &f.pose);
        kf.fuse_depth(&f, &FusionParams::default());
        let (u, v) = (10, 10);
        assert_eq!(*kf.depth.get(u, v), 2.0);
        assert!((kf.weight.get(u, v) - 0.25).abs() < 1e-12);

        // second observation at 2.2 m: weights 1/2^2 and 1/2.2^2
        kf.fuse_depth(&wall(2.2), &FusionParams::default());
        let (w1, w2) = (0.25, 1.0 / (2.2 * 2.2));
        let expected = (w1 * 2.0 + w2 * 2.2) / (w1 + w2);
        assert!((kf.depth.get(u, v) - expected).abs() < 1e-12);
        assert!((kf.weight.get(u, v) - (w1 + w2)).abs() < 1e-12);
    }

    #[test]
    fn gate_skips_other_surfaces() {
        let f = wall(2.0);
        let mut kf = Keyframe::new(0, k(), 1, Pose::identity(), &f.pose);
        let params = FusionParams::default();
        kf.fuse_depth(&f, &params);
        kf.fuse_depth(&wall(2.5), &params);
        assert_eq!(*kf.depth.get(10, 10), 2.0);
        assert!((kf.weight.get(10, 10) - 0.25).abs() < 1e-12);

        let open = FusionParams {
            fusion_gate: f64::INFINITY,
            ..params
        };
        kf.fuse_depth(&wall(2.5), &open);
        assert!(*kf.depth.get(10, 10) > 2.0);
    }

    #[test]
    fn identity_warp_reproduces_depth() {
        let mut f = wall(2.0);
        f.depth = DepthMap::from_fn(32, 24, |u, v| 1.5 + 0.01 * u as f64 + 0.005 * v as f64);
        let params = FusionParams::default();
        let mut kf = Keyframe::new(0, k(), 1, Pose::identity(), &f.pose);
        kf.fuse_depth(&f, &params);
        let w = effective_depth_weights(&f.depth, &k(), &params);
        for v in 0..24 {
            for u in 0..32 {
                if *w.get(u, v) > 0.0 {
                    assert!((kf.depth.get(u, v) - f.depth.get(u, v)).abs() < 1e-12);
                    assert_eq!(kf.weight.get(u, v), w.get(u, v));
                } else {
                    assert_eq!(*kf.weight.get(u, v), 0.0);
                }
            }
        }
    }

    #[test]
    fn single_member_color_is_deblurred_input() {
        let f = wall(2.0);
        let params = FusionParams::default();
        let mut kf = Keyframe::new(0, k(), 1, Pose::identity(), &f.pose);
        kf.fuse_depth(&f, &params);
        kf.fuse_color(&params);
        let sharp = unsharp_mask(&f.color, params.unsharp_sigma, params.unsharp_gain);
        let mut colored = 0;
        for v in 0..24 {
            for u in 0..32 {
                if *kf.weight.get(u, v) > 0.0 {
                    assert_eq!(*kf.color.get(u, v), Some(*sharp.get(u, v)));
                    colored += 1;
                } else {
                    assert_eq!(*kf.color.get(u, v), None);
                }
            }
        }
        assert!(colored > 0);
        assert!(kf.pending.is_empty());
    }

    #[test]
    fn anchor_update_moves_keyframe() {
        let anchor = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0));
        let first = Pose::from_axis_angle(&Vector3::y(), 0.3, Vector3::new(1.5, 0.2, 0.0));
        let mut kf = Keyframe::new(0, k(), 7, anchor, &first);
        assert!((kf.pose().translation - first.translation).norm() < 1e-12);
        let moved = Pose::from_translation(Vector3::new(1.1, 0.0, 0.0));
        kf.set_anchor_pose(moved);
        let expected = moved.compose(kf.rel_pose());
        assert_eq!(*kf.pose(), expected);
        assert!((kf.pose().translation - Point3::new(1.6, 0.2, 0.0)).norm() < 1e-12);
    }

    proptest! {
        #[test]
        fn fusion_is_order_independent(depths in prop::collection::vec(1.0f64..3.0, 1..8),
                                       seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let params = FusionParams { fusion_gate: f64::INFINITY, ..Default::default() };
            let fuse = |depths: &[f64]| {
                let mut kf = Keyframe::new(0, k(), 1, Pose::identity(), &Pose::identity());
                for &z in depths {
                    kf.fuse_depth(&wall(z), &params);
                }
                kf
            };
            let a = fuse(&depths);
            let mut shuffled = depths.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = fuse(&shuffled);
            let expected_w: f64 = depths.iter().map(|z| 1.0 / (z * z)).sum();
            for v in 1..23 {
                for u in 1..31 {
                    let (za, zb) = (*a.depth.get(u, v), *b.depth.get(u, v));
                    prop_assert!(((za - zb) / za).abs() < 1e-9);
                    prop_assert!(((a.weight.get(u, v) - expected_w) / expected_w).abs() < 1e-12);
                    prop_assert!(((b.weight.get(u, v) - expected_w) / expected_w).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn gated_fusion_is_order_independent_within_gate(
            depths in prop::collection::vec(1.5f64..1.75, 1..8),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let params = FusionParams::default();
            let fuse = |depths: &[f64]| {
                let mut kf = Keyframe::new(0, k(), 1, Pose::identity(), &Pose::identity());
                for &z in depths {
                    kf.fuse_depth(&wall(z), &params);
                }
                kf
            };
            let a = fuse(&depths);
            let mut shuffled = depths.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = fuse(&shuffled);
            for v in 1..23 {
                for u in 1..31 {
                    let (za, zb) = (*a.depth.get(u, v), *b.depth.get(u, v));
                    prop_assert!(((za - zb) / za).abs() < 1e-9);
                    prop_assert!((a.weight.get(u, v) - b.weight.get(u, v)).abs() < 1e-9);
                }
            }
        }
    }
}
