use std::collections::BTreeSet;

use super::{FrameObservation, FusionParams, Keyframe};
use crate::error::{Error, Result};

/// When to close the open keyframe and start a new one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyframeStrategy {
    /// A fixed number of frames per keyframe.
    Const { kappa: usize },
    /// Start a keyframe at every anchor (DVO) keyframe.
    Dvo,
    /// Start a keyframe when the relative pose to the keyframe exceeds either threshold.
    Dist {
        max_rotation: f64,
        max_translation: f64,
    },
    /// Start a keyframe when the co-visible pixel ratio drops below `min_ratio`.
    Overlap { min_ratio: f64 },
}

impl KeyframeStrategy {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            KeyframeStrategy::Const { kappa } => kappa >= 1,
            KeyframeStrategy::Dvo => true,
            KeyframeStrategy::Dist {
                max_rotation,
                max_translation,
            } => max_rotation > 0.0 && max_translation > 0.0,
            KeyframeStrategy::Overlap { min_ratio } => min_ratio > 0.0 && min_ratio < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid keyframe strategy {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KeyframeStrategy::Const { .. } => "const",
            KeyframeStrategy::Dvo => "dvo",
            KeyframeStrategy::Dist { .. } => "dist",
            KeyframeStrategy::Overlap { .. } => "overlap",
        }
    }
}

/// Whether a new keyframe should be started before fusing `frame`.
/// An empty keyframe always accepts the frame.
pub fn keyframe_decision(
    strategy: &KeyframeStrategy,
    kf: &Keyframe,
    frame: &FrameObservation,
    dvo_keyframes: &BTreeSet<u64>,
    params: &FusionParams,
) -> bool {
    if kf.is_empty() {
        return false;
    }
    match *strategy {
        KeyframeStrategy::Const { kappa } => kf.members().len() >= kappa,
        KeyframeStrategy::Dvo => dvo_keyframes.contains(&frame.index),
        KeyframeStrategy::Dist {
            max_rotation,
            max_translation,
        } => {
            let rel = kf.pose().inverse().compose(&frame.pose);
            rel.rotation_angle() > max_rotation || rel.translation.norm() > max_translation
        }
        KeyframeStrategy::Overlap { min_ratio } => match overlap_ratio(kf, frame, params) {
            Ok(r) => r < min_ratio,
            Err(_) => true,
        },
    }
}

/// Fraction of the keyframe's valid pixels that are visible in `frame` with
/// consistent depth.
pub fn overlap_ratio(kf: &Keyframe, frame: &FrameObservation, params: &FusionParams) -> Result<f64> {
    let k = kf.intrinsics;
    let to_frame = frame.pose.inverse().compose(kf.pose());
    let (mut valid, mut visible) = (0usize, 0usize);
    for v in 0..k.height {
        for u in 0..k.width {
            if *kf.weight.get(u, v) <= 0.0 {
                continue;
            }
            valid += 1;
            let z = *kf.depth.get(u, v);
            let p = to_frame.transform(&k.unproject_unchecked(u as f64, v as f64, z));
            if p.z <= 0.0 {
                continue;
            }
            let Some((uf, vf)) = k.nearest_pixel(&k.project_unchecked(&p)) else {
                continue;
            };
            let zf = *frame.depth.get(uf, vf);
            if zf > 0.0 && (zf - p.z).abs() <= params.occlusion_tolerance {
                visible += 1;
            }
        }
    }
    if valid == 0 {
        return Err(Error::UndefinedOverlap);
    }
    Ok(visible as f64 / valid as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::image::{DepthMap, RgbImage};
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    fn k() -> Intrinsics {
        Intrinsics::new(80.0, 80.0, 39.5, 29.5, 80, 60).unwrap()
    }

    fn wall_frame(index: u64, pose: Pose, wall_z: f64) -> FrameObservation {
        // a fronto-parallel wall at world z = wall_z seen by a camera looking along +z
        let k = k();
        let depth = DepthMap::filled(k.width, k.height, wall_z - pose.translation.z);
        FrameObservation {
            index,
            color: RgbImage::filled(k.width, k.height, [128; 3]),
            depth,
            pose,
        }
    }

    fn kf_with(frame: &FrameObservation) -> Keyframe {
        let mut kf = Keyframe::new(0, k(), 1, Pose::identity(), &frame.pose);
        kf.fuse_depth(frame, &FusionParams::default());
        kf
    }

    #[test]
    fn const_boundary() {
        let f = wall_frame(1, Pose::identity(), 2.0);
        let mut kf = kf_with(&f);
        let s = KeyframeStrategy::Const { kappa: 5 };
        let none = BTreeSet::new();
        let p = FusionParams::default();
        for i in 2..=5 {
            assert!(!keyframe_decision(&s, &kf, &wall_frame(i, Pose::identity(), 2.0), &none, &p));
            kf.fuse_depth(&wall_frame(i, Pose::identity(), 2.0), &p);
        }
        assert_eq!(kf.members().len(), 5);
        assert!(keyframe_decision(&s, &kf, &wall_frame(6, Pose::identity(), 2.0), &none, &p));
    }

    #[test]
    fn empty_keyframe_never_splits() {
        let kf = Keyframe::new(0, k(), 1, Pose::identity(), &Pose::identity());
        let f = wall_frame(1, Pose::identity(), 2.0);
        let s = KeyframeStrategy::Const { kappa: 1 };
        assert!(!keyframe_decision(&s, &kf, &f, &BTreeSet::new(), &FusionParams::default()));
    }

    #[test]
    fn dvo_follows_flags() {
        let kf = kf_with(&wall_frame(1, Pose::identity(), 2.0));
        let flags: BTreeSet<u64> = [1, 11].into_iter().collect();
        let p = FusionParams::default();
        let s = KeyframeStrategy::Dvo;
        assert!(!keyframe_decision(&s, &kf, &wall_frame(5, Pose::identity(), 2.0), &flags, &p));
        assert!(keyframe_decision(&s, &kf, &wall_frame(11, Pose::identity(), 2.0), &flags, &p));
    }

    #[test]
    fn dist_threshold_crossing() {
        let kf = kf_with(&wall_frame(1, Pose::identity(), 2.0));
        let s = KeyframeStrategy::Dist {
            max_rotation: 0.2,
            max_translation: 0.3,
        };
        let p = FusionParams::default();
        let none = BTreeSet::new();
        let near = Pose::from_translation(Vector3::new(0.29, 0.0, 0.0));
        let far = Pose::from_translation(Vector3::new(0.31, 0.0, 0.0));
        assert!(!keyframe_decision(&s, &kf, &wall_frame(2, near, 2.0), &none, &p));
        assert!(keyframe_decision(&s, &kf, &wall_frame(2, far, 2.0), &none, &p));
        let turned = Pose::from_axis_angle(&Vector3::y(), 0.25, Vector3::zeros());
        assert!(keyframe_decision(&s, &kf, &wall_frame(2, turned, 2.0), &none, &p));
    }

    #[test]
    fn overlap_examples() {
        let p = FusionParams::default();
        let f = wall_frame(1, Pose::identity(), 2.0);
        let kf = kf_with(&f);
        assert_eq!(overlap_ratio(&kf, &f, &p).unwrap(), 1.0);
        let s = KeyframeStrategy::Overlap { min_ratio: 0.7 };
        assert!(!keyframe_decision(&s, &kf, &f, &BTreeSet::new(), &p));

        let back = Pose::from_axis_angle(&Vector3::y(), PI, Vector3::zeros());
        let mut behind = wall_frame(2, back, 2.0);
        behind.depth = DepthMap::filled(80, 60, 2.0);
        assert_eq!(overlap_ratio(&kf, &behind, &p).unwrap(), 0.0);

        // lateral shift by half the visible wall width
        let half_width = 2.0 * (k().width as f64 / 2.0) / k().fx;
        let shifted = wall_frame(3, Pose::from_translation(Vector3::new(half_width, 0.0, 0.0)), 2.0);
        let r = overlap_ratio(&kf, &shifted, &p).unwrap();
        assert!((r - 0.5).abs() <= 0.02, "overlap {r}");
    }

    #[test]
    fn overlap_requires_valid_pixels() {
        let kf = Keyframe::new(0, k(), 1, Pose::identity(), &Pose::identity());
        let f = wall_frame(1, Pose::identity(), 2.0);
        assert!(matches!(
            overlap_ratio(&kf, &f, &FusionParams::default()),
            Err(Error::UndefinedOverlap)
        ));
    }
}
