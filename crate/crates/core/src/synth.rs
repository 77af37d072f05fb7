//! Deterministic synthetic RGB-D sequences of analytic scenes.
//!
//! Frames are rendered at ground-truth poses; the trajectory handed to the
//! reconstruction drifts away from the truth and is pulled back by a schedule
//! of anchor pose updates.

use nalgebra::{Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{look_at, Intrinsics, Point3, Pose};
use crate::image::{gaussian_blur_rgb, DepthMap, RgbImage};
use crate::keyframe::{AnchorId, FrameObservation};
use crate::reintegration::PoseUpdateEvent;

pub const TRACE_MAX_STEPS: usize = 256;
pub const TRACE_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    /// Interior of an axis-aligned box: the camera lives inside.
    Room { min: Point3, max: Point3 },
    Sphere { center: Point3, radius: f64 },
    Cuboid { center: Point3, half: Vector3<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [u8; 3],
    /// Second albedo for a 0.25 m checkerboard; `None` for flat color.
    pub checker: Option<[u8; 3]>,
}

fn box_sdf(p: &Point3, center: &Point3, half: &Vector3<f64>) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.map(|c| c.max(0.0)).norm();
    outside + q.x.max(q.y).max(q.z).min(0.0)
}

impl Shape {
    pub fn sdf(&self, p: &Point3) -> f64 {
        match self {
            Shape::Room { min, max } => {
                let c = (min + max) / 2.0;
                -box_sdf(p, &c, &((max - min) / 2.0))
            }
            Shape::Sphere { center, radius } => (p - center).norm() - radius,
            Shape::Cuboid { center, half } => box_sdf(p, center, half),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
}

impl AnalyticScene {
    /// A 3 m × 3 m × 2.4 m room with a table, two spheres and a crate.
    pub fn desk_room() -> Self {
        let p = |shape, albedo, checker| Primitive {
            shape,
            albedo,
            checker,
        };
        Self {
            primitives: vec![
                p(
                    Shape::Room {
                        min: Point3::new(-1.5, -1.5, 0.0),
                        max: Point3::new(1.5, 1.5, 2.4),
                    },
                    [200, 190, 170],
                    Some([90, 80, 70]),
                ),
                p(
                    Shape::Cuboid {
                        center: Point3::new(0.0, 0.0, 0.35),
                        half: Vector3::new(0.4, 0.3, 0.35),
                    },
                    [150, 100, 60],
                    None,
                ),
                p(
                    Shape::Sphere {
                        center: Point3::new(0.1, 0.0, 0.85),
                        radius: 0.15,
                    },
                    [220, 40, 40],
                    None,
                ),
                p(
                    Shape::Sphere {
                        center: Point3::new(-0.6, 0.75, 0.25),
                        radius: 0.25,
                    },
                    [40, 160, 60],
                    None,
                ),
                p(
                    Shape::Cuboid {
                        center: Point3::new(0.75, -0.65, 0.2),
                        half: Vector3::new(0.2, 0.2, 0.2),
                    },
                    [50, 70, 200],
                    Some([230, 230, 240]),
                ),
            ],
        }
    }

    pub fn sdf(&self, p: &Point3) -> f64 {
        self.primitives
            .iter()
            .map(|pr| pr.shape.sdf(p))
            .fold(f64::INFINITY, f64::min)
    }

    fn closest(&self, p: &Point3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, pr) in self.primitives.iter().enumerate() {
            let d = pr.shape.sdf(p);
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    pub fn normal(&self, p: &Point3) -> Vector3<f64> {
        let h = 1e-6;
        let d = |o: Vector3<f64>| self.sdf(&(p + o)) - self.sdf(&(p - o));
        Vector3::new(d(Vector3::x() * h), d(Vector3::y() * h), d(Vector3::z() * h)).normalize()
    }

    fn albedo(&self, i: usize, p: &Point3) -> [u8; 3] {
        let pr = &self.primitives[i];
        match pr.checker {
            Some(alt) => {
                let t = |c: f64| (c / 0.25).floor() as i64;
                if (t(p.x) + t(p.y) + t(p.z)).rem_euclid(2) == 0 {
                    pr.albedo
                } else {
                    alt
                }
            }
            None => pr.albedo,
        }
    }

    /// Points on the visible union surface, sampled on a grid of `spacing`
    /// over every primitive.
    pub fn surface_cloud(&self, spacing: f64) -> Vec<Point3> {
        let mut out = Vec::new();
        let mut keep = |q: Point3, own: usize| {
            let visible = self
                .primitives
                .iter()
                .enumerate()
                .all(|(j, pr)| j == own || pr.shape.sdf(&q) >= -1e-12);
            if visible {
                out.push(q);
            }
        };
        for (i, pr) in self.primitives.iter().enumerate() {
            match &pr.shape {
                Shape::Room { min, max } => {
                    box_faces(&((min + max) / 2.0), &((max - min) / 2.0), spacing, |q| keep(q, i))
                }
                Shape::Cuboid { center, half } => box_faces(center, half, spacing, |q| keep(q, i)),
                Shape::Sphere { center, radius } => {
                    let n_lat = ((std::f64::consts::PI * radius) / spacing).ceil() as usize;
                    for a in 0..=n_lat {
                        let theta = std::f64::consts::PI * a as f64 / n_lat as f64;
                        let ring = (2.0 * std::f64::consts::PI * radius * theta.sin() / spacing).ceil().max(1.0) as usize;
                        for b in 0..ring {
                            let phi = 2.0 * std::f64::consts::PI * b as f64 / ring as f64;
                            let dir = Vector3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
                            keep(center + dir * *radius, i);
                        }
                    }
                }
            }
        }
        out
    }
}

fn box_faces(center: &Point3, half: &Vector3<f64>, spacing: f64, mut f: impl FnMut(Point3)) {
    for axis in 0..3 {
        let (a1, a2) = ((axis + 1) % 3, (axis + 2) % 3);
        let n1 = (2.0 * half[a1] / spacing).round().max(1.0) as usize;
        let n2 = (2.0 * half[a2] / spacing).round().max(1.0) as usize;
        for side in [-1.0, 1.0] {
            for i in 0..=n1 {
                for j in 0..=n2 {
                    let mut q = *center;
                    q[axis] += side * half[axis];
                    q[a1] += -half[a1] + 2.0 * half[a1] * i as f64 / n1 as f64;
                    q[a2] += -half[a2] + 2.0 * half[a2] * j as f64 / n2 as f64;
                    f(q);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderParams {
    pub max_depth: f64,
    /// Direction towards the light, world frame.
    pub light: Vector3<f64>,
    pub ambient: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        Self {
            max_depth: 4.0,
            light: Vector3::new(0.3, 0.5, 1.0).normalize(),
            ambient: 0.3,
        }
    }
}

/// Sphere-traced hit of a camera ray: distance along the unit ray and the
/// primitive hit.
fn trace(scene: &AnalyticScene, origin: &Point3, dir: &Vector3<f64>, max_t: f64) -> Option<(f64, usize)> {
    let mut t = 0.0;
    for _ in 0..TRACE_MAX_STEPS {
        let (d, i) = scene.closest(&(origin + dir * t));
        if d < TRACE_EPSILON {
            return Some((t, i));
        }
        t += d;
        if t > max_t {
            return None;
        }
    }
    None
}

/// Z-depth map of the scene seen from `pose`; misses and hits beyond
/// `max_depth` are 0.
pub fn render_depth(scene: &AnalyticScene, pose: &Pose, k: &Intrinsics, params: &RenderParams) -> DepthMap {
    render(scene, pose, k, params).0
}

/// Depth and Lambert-shaded color.
pub fn render(scene: &AnalyticScene, pose: &Pose, k: &Intrinsics, params: &RenderParams) -> (DepthMap, RgbImage) {
    let origin = pose.camera_center();
    let mut depth = DepthMap::filled(k.width, k.height, 0.0);
    let mut color = RgbImage::filled(k.width, k.height, [0, 0, 0]);
    for v in 0..k.height {
        for u in 0..k.width {
            let ray = k.unproject_unchecked(u as f64, v as f64, 1.0);
            let scale = ray.norm();
            let dir = pose.rotation * (ray / scale);
            let Some((t, i)) = trace(scene, &origin, &dir, params.max_depth * scale) else {
                continue;
            };
            let z = t / scale;
            if z > params.max_depth {
                continue;
            }
            depth.set(u, v, z);
            let hit = origin + dir * t;
            let mut n = scene.normal(&hit);
            if n.dot(&dir) > 0.0 {
                n = -n;
            }
            let shade = params.ambient + (1.0 - params.ambient) * n.dot(&params.light).max(0.0);
            let a = scene.albedo(i, &hit);
            color.set(u, v, a.map(|c| (c as f64 * shade).round().clamp(0.0, 255.0) as u8));
        }
    }
    (depth, color)
}

/// Adds zero-mean Gaussian noise with standard deviation `sigma0 * z²`;
/// invalid pixels stay 0.
pub fn add_noise(depth: &DepthMap, sigma0: f64, seed: u64) -> DepthMap {
    if sigma0 == 0.0 {
        return depth.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    depth.map(|&z| {
        if z > 0.0 {
            let n: f64 = unit.sample(&mut rng);
            (z + sigma0 * z * z * n).max(1e-6)
        } else {
            0.0
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPlan {
    pub waypoints: Vec<Pose>,
    pub frames_per_segment: usize,
    /// Per-frame drift increment: translation (m) then rotation (rad, roll
    /// pitch yaw).
    pub drift_rate: [f64; 6],
    /// `(frame index, fraction of accumulated drift removed)`.
    pub correction_schedule: Vec<(u64, f64)>,
    /// A DVO keyframe every `anchor_every` frames.
    pub anchor_every: u64,
}

impl TrajectoryPlan {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 || self.frames_per_segment == 0 || self.anchor_every == 0 {
            return Err(Error::Config("trajectory needs ≥ 2 waypoints and positive step counts".into()));
        }
        let mut last = 0;
        for &(f, phi) in &self.correction_schedule {
            if !(0.0..=1.0).contains(&phi) {
                return Err(Error::Config(format!("correction fraction {phi} outside [0, 1]")));
            }
            if f <= last {
                return Err(Error::Config("correction frames must increase".into()));
            }
            last = f;
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.waypoints.len() - 1) * self.frames_per_segment
    }

    /// Waypoints on a horizontal circle around `target`, all looking at it.
    pub fn orbit(target: &Point3, radius: f64, height: f64, waypoints: usize) -> Vec<Pose> {
        (0..=waypoints)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / waypoints as f64;
                let eye = Point3::new(target.x + radius * a.cos(), target.y + radius * a.sin(), height);
                look_at(&eye, target, &Vector3::z())
            })
            .collect()
    }
}

/// Ground-truth pose of every frame, interpolating linearly in translation
/// and spherically in rotation between waypoints.
pub fn interpolate(plan: &TrajectoryPlan) -> Vec<Pose> {
    let mut out = Vec::with_capacity(plan.frame_count());
    for seg in plan.waypoints.windows(2) {
        let quat = |p: &Pose| UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(p.rotation));
        let (qa, qb) = (quat(&seg[0]), quat(&seg[1]));
        for s in 0..plan.frames_per_segment {
            let t = s as f64 / plan.frames_per_segment as f64;
            let q = qa.slerp(&qb, t);
            let tr = seg[0].translation * (1.0 - t) + seg[1].translation * t;
            out.push(Pose {
                rotation: *q.to_rotation_matrix().matrix(),
                translation: tr,
            });
        }
    }
    out
}

fn drift_pose(e: &[f64; 6]) -> Pose {
    Pose::from_euler(&Vector3::new(e[3], e[4], e[5]), Vector3::new(e[0], e[1], e[2]))
}

fn apply_drift(e: &[f64; 6], gt: &Pose) -> Pose {
    drift_pose(e).compose(gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub noise_sigma0: f64,
    /// Upper bound of the per-frame random color blur σ (pixels); 0 disables.
    pub max_color_blur: f64,
    pub seed: u64,
    pub render: RenderParams,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise_sigma0: 0.0015,
            max_color_blur: 0.0,
            seed: 7,
            render: RenderParams::default(),
        }
    }
}

/// A rendered sequence with its trajectories and pose update log.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    /// Frames carry the drifted (estimated) pose; indices start at 1.
    pub frames: Vec<FrameObservation>,
    pub ground_truth: Vec<Pose>,
    pub drifted: Vec<Pose>,
    pub events: Vec<PoseUpdateEvent>,
    pub dvo_keyframes: Vec<u64>,
}

/// Whether frame `index` (1-based) is an anchor.
pub fn is_anchor(index: u64, every: u64) -> bool {
    (index - 1) % every == 0
}

/// Poses and events only, without rendering.
pub fn make_trajectory(plan: &TrajectoryPlan) -> Result<(Vec<Pose>, Vec<Pose>, Vec<PoseUpdateEvent>, Vec<u64>)> {
    plan.validate()?;
    let gt = interpolate(plan);
    let n = gt.len() as u64;
    let mut drift = [0.0; 6];
    let mut anchor_drift: Vec<(AnchorId, [f64; 6])> = Vec::new();
    let mut drifted = Vec::with_capacity(gt.len());
    let mut events = Vec::new();
    let mut schedule = plan.correction_schedule.iter().peekable();
    for idx in 1..=n {
        while let Some(&&(at, phi)) = schedule.peek() {
            if at > idx {
                break;
            }
            schedule.next();
            events.push(correction_event(at, phi, &mut drift, &mut anchor_drift, &gt));
        }
        for (d, r) in drift.iter_mut().zip(plan.drift_rate) {
            *d += r;
        }
        if is_anchor(idx, plan.anchor_every) {
            anchor_drift.push((idx, drift));
        }
        drifted.push(apply_drift(&drift, &gt[(idx - 1) as usize]));
    }
    for &(at, phi) in schedule {
        events.push(correction_event(at, phi, &mut drift, &mut anchor_drift, &gt));
    }
    let dvo = (1..=n).filter(|&i| is_anchor(i, plan.anchor_every)).collect();
    Ok((gt, drifted, events, dvo))
}

fn correction_event(
    at: u64,
    phi: f64,
    drift: &mut [f64; 6],
    anchors: &mut [(AnchorId, [f64; 6])],
    gt: &[Pose],
) -> PoseUpdateEvent {
    let mut ev = PoseUpdateEvent {
        at_frame: at,
        ..Default::default()
    };
    for (id, e) in anchors.iter_mut() {
        if *id >= at {
            continue;
        }
        for c in e.iter_mut() {
            *c *= 1.0 - phi;
        }
        ev.anchor_poses.insert(*id, apply_drift(e, &gt[(*id - 1) as usize]));
    }
    for c in drift.iter_mut() {
        *c *= 1.0 - phi;
    }
    ev
}

/// Renders every frame of the trajectory.
pub fn make_sequence(
    scene: &AnalyticScene,
    plan: &TrajectoryPlan,
    k: &Intrinsics,
    params: &SynthParams,
) -> Result<Sequence> {
    let (gt, drifted, events, dvo) = make_trajectory(plan)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let frames = gt
        .iter()
        .zip(&drifted)
        .enumerate()
        .map(|(i, (g, d))| {
            let (depth, mut color) = render(scene, g, k, &params.render);
            let noise_seed: u64 = rng.random();
            let blur = if params.max_color_blur > 0.0 {
                rng.random::<f64>() * params.max_color_blur
            } else {
                0.0
            };
            if blur > 0.0 {
                color = gaussian_blur_rgb(&color, blur);
            }
            FrameObservation {
                index: i as u64 + 1,
                color,
                depth: add_noise(&depth, params.noise_sigma0, noise_seed),
                pose: *d,
            }
        })
        .collect();
    Ok(Sequence {
        intrinsics: *k,
        frames,
        ground_truth: gt,
        drifted,
        events,
        dvo_keyframes: dvo,
    })
}
