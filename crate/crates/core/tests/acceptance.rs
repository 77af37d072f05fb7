//! Acceptance suite. Prints one pass/fail line per criterion and exits with a
//! failure status if any criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use resurface::dataset::Dataset;
use resurface::evaluation::{brute_force_nearest, mad_completeness, mad_correctness, visible_subset, GridIndex};
use resurface::geometry::{Intrinsics, Point3, Pose, PoseScale};
use resurface::image::{DepthMap, Image, WeightMap};
use resurface::keyframe::{Keyframe, KeyframeStrategy};
use resurface::meshing::{marching_cubes, TriangleMesh, WELD_TOLERANCE};
use resurface::pipeline::{reconstruct, Reconstruction, RunConfig};
use resurface::reintegration::{
    max_voxel_difference, rebuild_at_targets, select_topk, select_window, IntegrationLedger, PoseUpdateEvent,
    ReintegrationMode,
};
use resurface::synth::{make_sequence, AnalyticScene, SynthParams, TrajectoryPlan};
use resurface::volume::{TwoTierStore, VolumeConfig};

const EXACT_TOL: f64 = 1e-9;
const VOXEL: f64 = 0.02;
const EVAL_CELL: f64 = 4.0 * VOXEL;
const CLOUD_SPACING: f64 = 0.01;
const VISIBILITY_TOL: f64 = 0.05;
const EFFICIENCY_MAX_RATIO: f64 = 0.25;
const MEMORY_TOL: f64 = 0.10;
const PLANE_OFFSET_MM: f64 = 5.0;
const PLANE_TOL_MM: f64 = 0.1;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

/// Shared state: every KF_CONST run is logged as (frames, kappa, keyframes).
#[derive(Default)]
struct Ctx {
    runs: Vec<(usize, usize, usize)>,
    room_cloud: Vec<Point3>,
}

impl Ctx {
    fn run(&mut self, cfg: &RunConfig, data: &Dataset) -> Reconstruction {
        let rec = reconstruct(cfg, data).expect("reconstruction");
        if let Some(kappa) = cfg.kappa() {
            self.runs.push((data.frames.len(), kappa, rec.stats.keyframes));
        }
        rec
    }
}

fn volume() -> VolumeConfig {
    VolumeConfig {
        voxel_size: VOXEL,
        truncation: 4.0 * VOXEL,
        stream_radius: 3.0,
        hash_buckets: 16384,
    }
}

fn config(kappa: usize, m: usize, mode: ReintegrationMode) -> RunConfig {
    RunConfig {
        strategy: KeyframeStrategy::Const { kappa },
        window: m,
        volume: volume(),
        mode,
        anchor_every: 10,
        ..Default::default()
    }
}

fn room_sequence(per_segment: usize, drift: [f64; 6], schedule: Vec<(u64, f64)>, noise: f64) -> Dataset {
    let plan = TrajectoryPlan {
        waypoints: TrajectoryPlan::orbit(&Point3::new(0.0, 0.0, 0.5), 1.0, 1.3, 8),
        frames_per_segment: per_segment,
        drift_rate: drift,
        correction_schedule: schedule,
        anchor_every: 10,
    };
    let k = Intrinsics::default_vga().downscaled(5);
    let params = SynthParams {
        noise_sigma0: noise,
        ..Default::default()
    };
    Dataset::from_sequence(&make_sequence(&AnalyticScene::desk_room(), &plan, &k, &params).expect("sequence"))
}

/// CORR MAD (mm) of the welded mesh against the analytic room.
fn correctness(mesh: &TriangleMesh, cloud: &[Point3]) -> f64 {
    mad_correctness(&mesh.weld(WELD_TOLERANCE), cloud, EVAL_CELL).unwrap()
}

fn random_pose(rng: &mut ChaCha8Rng, angle: f64, shift: f64) -> Pose {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
    let t = Vector3::new(
        rng.random_range(-shift..shift),
        rng.random_range(-shift..shift),
        rng.random_range(-shift..shift),
    );
    Pose::from_axis_angle(&axis, rng.random_range(0.0..angle), t)
}

fn random_keyframe(rng: &mut ChaCha8Rng, id: u64, pose: Pose) -> Keyframe {
    let k = Intrinsics::new(30.0, 30.0, 15.5, 11.5, 32, 24).unwrap();
    let z0 = rng.random_range(0.6..1.8);
    let (gx, gy) = (rng.random_range(-0.01..0.01), rng.random_range(-0.01..0.01));
    let depth = DepthMap::from_fn(k.width, k.height, |u, v| {
        if rng.random::<f64>() < 0.1 {
            0.0
        } else {
            z0 + gx * u as f64 + gy * v as f64 + rng.random_range(-0.005..0.005)
        }
    });
    let weight = WeightMap::from_fn(k.width, k.height, |_, _| rng.random_range(0.05..1.0));
    let color = Image::from_fn(k.width, k.height, |_, _| Some([rng.random(), rng.random(), rng.random()]));
    Keyframe::from_maps(id, k, depth, weight, color, pose)
}

fn exact_deintegration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = VolumeConfig {
        stream_radius: 10.0,
        ..volume()
    };
    let (mut worst_empty, mut worst_d, mut worst_w) = (0usize, 0.0f64, 0.0f64);
    for scene in 0..50u64 {
        let pa = random_pose(&mut rng, 0.6, 0.3);
        let pb = random_pose(&mut rng, 0.2, 0.1).compose(&pa);
        let a = random_keyframe(&mut rng, 2 * scene, pa);
        let b = random_keyframe(&mut rng, 2 * scene + 1, pb);

        let mut s = TwoTierStore::new(cfg).unwrap();
        s.stream(&Point3::zeros());
        s.integrate(&a, &pa).unwrap();
        s.deintegrate(&a, &pa).unwrap();
        worst_empty = worst_empty.max(s.observed_voxels());

        let mut ab = TwoTierStore::new(cfg).unwrap();
        ab.stream(&Point3::zeros());
        ab.integrate(&a, &pa).unwrap();
        ab.integrate(&b, &pb).unwrap();
        ab.deintegrate(&a, &pa).unwrap();
        let mut only_b = TwoTierStore::new(cfg).unwrap();
        only_b.stream(&Point3::zeros());
        only_b.integrate(&b, &pb).unwrap();
        let (dd, dw) = max_voxel_difference(&ab, &only_b);
        worst_d = worst_d.max(dd);
        worst_w = worst_w.max(dw);
    }
    Outcome::new(
        worst_empty == 0 && worst_d < EXACT_TOL && worst_w < EXACT_TOL,
        format!(
            "50 scenes: observed voxels left {worst_empty}, max |dD| {worst_d:.1e}, max |dW| {worst_w:.1e} (tol {EXACT_TOL:e})"
        ),
    )
}

/// Direct evaluation of the window objective: every start `j`, sum of the
/// `min(m, K)` distances from `j`; the first maximum wins; `None` below 1e-6.
fn window_oracle(d: &[f64], m: usize) -> Option<usize> {
    let len = m.min(d.len());
    let mut best = None;
    let mut best_sum = f64::NEG_INFINITY;
    for j in 0..=d.len() - len {
        let mut sum = 0.0;
        for x in &d[j..j + len] {
            sum += x;
        }
        if sum > best_sum {
            best_sum = sum;
            best = Some(j);
        }
    }
    if best_sum < 1e-6 {
        None
    } else {
        best
    }
}

fn window_selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = rng.random_range(1..=200);
        let m = rng.random_range(1..=20);
        // coarse values provoke ties; some ledgers are entirely still
        let still = rng.random::<f64>() < 0.05;
        let d: Vec<f64> = (0..k)
            .map(|_| match rng.random_range(0..4) {
                _ if still => 0.0,
                0 => 0.0,
                1 => 0.25,
                2 => 0.5,
                _ => rng.random::<f64>(),
            })
            .collect();
        if select_window(&d, m) != window_oracle(&d, m) {
            mismatches += 1;
        }
    }
    Outcome::new(mismatches == 0, format!("1000 random ledgers, {mismatches} mismatches"))
}

fn seeded_displacements() -> Vec<f64> {
    let mut d = vec![0.05; 15];
    for (i, v) in [(3, 0.5), (4, 0.45), (5, 0.55), (6, 0.40), (7, 0.42), (8, 0.70), (12, 0.90), (13, 0.60)] {
        d[i - 1] = v;
    }
    d
}

/// Fifteen keyframes along a line, one anchor each; the update shifts anchor
/// `i` sideways by the seeded displacement `d_i`.
fn displacement_relocations(mode: ReintegrationMode) -> (u64, Vec<usize>) {
    let vol = VolumeConfig {
        stream_radius: 2.0,
        ..volume()
    };
    let k = Intrinsics::new(30.0, 30.0, 11.5, 8.5, 24, 18).unwrap();
    let mut store = TwoTierStore::new(vol).unwrap();
    let mut ledger = IntegrationLedger::new();
    let d = seeded_displacements();
    let mut update = PoseUpdateEvent::default();
    for i in 0..15u64 {
        let pose = Pose::from_translation(Vector3::new(0.05 * i as f64, 0.0, 0.0));
        ledger.register_anchor(i, pose);
        let mut kf = Keyframe::new(i, k, i, pose, &pose);
        kf.depth = DepthMap::filled(k.width, k.height, 1.0);
        kf.weight = WeightMap::filled(k.width, k.height, 1.0);
        ledger.integrate(&mut store, kf).unwrap();
        update
            .anchor_poses
            .insert(i, Pose::from_translation(Vector3::new(0.0, d[i as usize], 0.0)).compose(&pose));
    }
    ledger.apply_pose_update(&update).unwrap();
    let next = Point3::new(0.05 * 15.0, 0.0, 0.0);
    let rec = ledger
        .correct(&mut store, mode, 5, &PoseScale::default(), &next)
        .unwrap()
        .unwrap();
    (rec.counters.sphere_relocations, rec.entries)
}

fn displacement_scenario() -> Outcome {
    let d = seeded_displacements();
    let topk: Vec<usize> = select_topk(&d, 5).iter().map(|i| i + 1).collect();
    let window = select_window(&d, 5).map(|j| (j + 1, j + 5));
    let (r_window, e_window) = displacement_relocations(ReintegrationMode::ConsecutiveWindow);
    let (r_topk, e_topk) = displacement_relocations(ReintegrationMode::TopK);
    let pass = topk == [12, 8, 13, 5, 3]
        && window == Some((4, 8))
        && e_window == [3, 4, 5, 6, 7]
        && e_topk.iter().map(|i| i + 1).eq(topk.iter().copied())
        && r_window < r_topk;
    Outcome::new(
        pass,
        format!("top-k {topk:?}, window {window:?}, relocations window {r_window} < top-k {r_topk}"),
    )
}

fn keyframe_efficiency(ctx: &mut Ctx) -> Outcome {
    let schedule = vec![(150, 0.5), (300, 0.5), (450, 0.5), (601, 1.0)];
    let data = room_sequence(75, [5e-4, 2e-4, 0.0, 0.0, 0.0, 5e-4], schedule, 0.0015);
    assert_eq!(data.frames.len(), 600);
    let fused = ctx.run(&config(20, 5, ReintegrationMode::ConsecutiveWindow), &data);
    let single = ctx.run(&config(1, 100, ReintegrationMode::TopK), &data);
    let (a, b) = (fused.stats.volume_ms(), single.stats.volume_ms());
    let ratio = a / b;
    Outcome::new(
        ratio <= EFFICIENCY_MAX_RATIO,
        format!(
            "600 frames: kappa=20/m=5 window {a:.0} ms vs kappa=1/m=100 top-k {b:.0} ms, ratio {ratio:.3} (max {EFFICIENCY_MAX_RATIO})"
        ),
    )
}

/// Noisy room without drift at brisk handheld speed (1.5 degrees per frame),
/// shared by the completeness and memory criteria.
fn noisy_room() -> Dataset {
    room_sequence(30, [0.0; 6], vec![], 0.0015)
}

fn completeness_trend(ctx: &mut Ctx, data: &Dataset) -> Outcome {
    let gt = data.ground_truth_poses().unwrap();
    let views: Vec<(Pose, &DepthMap)> = gt.iter().copied().zip(data.frames.iter().map(|f| &f.depth)).collect();
    let seen = visible_subset(&ctx.room_cloud, &data.intrinsics, &views, VISIBILITY_TOL);
    let mut metrics = BTreeMap::new();
    for kappa in [5, 60] {
        // every pixel of the room lies inside the sphere, so only fusion loses surface
        let mut cfg = config(kappa, 10, ReintegrationMode::Off);
        cfg.volume.stream_radius = 5.0;
        let rec = ctx.run(&cfg, data);
        let corr = correctness(&rec.mesh, &ctx.room_cloud);
        let compl = mad_completeness(&rec.mesh.weld(WELD_TOLERANCE), &seen, EVAL_CELL).unwrap();
        metrics.insert(kappa, (corr, compl));
    }
    let (c5, p5) = metrics[&5];
    let (c60, p60) = metrics[&60];
    let pass = p60 > p5 && c60 / c5 < p60 / p5;
    Outcome::new(
        pass,
        format!(
            "COMPL {p5:.2} -> {p60:.2} mm, CORR {c5:.2} -> {c60:.2} mm (kappa 5 -> 60), ratios CORR {:.3} < COMPL {:.3}",
            c60 / c5,
            p60 / p5
        ),
    )
}

fn correction_efficacy(ctx: &mut Ctx) -> Outcome {
    let data = room_sequence(20, [1e-3, 5e-4, 0.0, 0.0, 0.0, 1e-3], vec![(80, 0.5), (161, 1.0)], 0.0015);
    let off = ctx.run(&config(5, 4, ReintegrationMode::Off), &data);
    let on = ctx.run(&config(5, 4, ReintegrationMode::ConsecutiveWindow), &data);
    let corr_off = correctness(&off.mesh, &ctx.room_cloud);
    let corr_on = correctness(&on.mesh, &ctx.room_cloud);
    let fresh = rebuild_at_targets(&on.ledger, &on.store).unwrap();
    let (dd, dw) = max_voxel_difference(&on.store, &fresh);
    Outcome::new(
        corr_on < corr_off && dd < EXACT_TOL && dw < EXACT_TOL,
        format!(
            "CORR with correction {corr_on:.2} mm < off {corr_off:.2} mm; rebuild max |dD| {dd:.1e}, |dW| {dw:.1e} (tol {EXACT_TOL:e})"
        ),
    )
}

fn meshing_baselines(ctx: &mut Ctx) -> Outcome {
    let (vs, r) = (0.01, 0.5);
    let mut s = TwoTierStore::new(VolumeConfig {
        voxel_size: vs,
        truncation: 4.0 * vs,
        stream_radius: 3.0,
        hash_buckets: 16384,
    })
    .unwrap();
    let e = Point3::new(r + 0.1, r + 0.1, r + 0.1);
    s.fill_analytic(&(-e), &e, |p| p.norm() - r, [128.0; 3]);
    let sphere = marching_cubes(&s);
    let radial = sphere
        .vertices
        .iter()
        .map(|v| (v.norm() - r).abs())
        .fold(0.0, f64::max);

    let data = room_sequence(10, [0.0; 6], vec![], 0.0);
    let rec = ctx.run(&config(1, 10, ReintegrationMode::Off), &data);
    let corr = correctness(&rec.mesh, &ctx.room_cloud);
    let limit_mm = VOXEL * 1000.0;
    Outcome::new(
        !sphere.is_empty() && radial < vs / 2.0 && corr < limit_mm,
        format!(
            "sphere max radial error {:.2} mm (< {:.1} mm); noiseless kappa=1 CORR {corr:.2} mm (< {limit_mm:.0} mm)",
            radial * 1000.0,
            vs * 500.0
        ),
    )
}

fn plane(z: f64, n: usize, step: f64) -> TriangleMesh {
    let mut m = TriangleMesh::default();
    for j in 0..=n {
        for i in 0..=n {
            m.vertices.push(Point3::new(i as f64 * step, j as f64 * step, z));
            m.colors.push([0; 3]);
        }
    }
    let w = (n + 1) as u32;
    for j in 0..n as u32 {
        for i in 0..n as u32 {
            let a = j * w + i;
            m.triangles.push([a, a + 1, a + w + 1]);
            m.triangles.push([a, a + w + 1, a + w]);
        }
    }
    m
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut mismatches = 0;
    for instance in 0..3 {
        let points: Vec<Point3> = (0..10_000)
            .map(|_| {
                let spread = if instance == 2 { 0.1 } else { 2.0 };
                Point3::new(
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                )
            })
            .collect();
        let index = GridIndex::new(&points, 0.05).unwrap();
        for _ in 0..1000 {
            let q = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            if index.nearest(&q) != brute_force_nearest(&points, &q) {
                mismatches += 1;
            }
        }
    }
    let model = plane(PLANE_OFFSET_MM / 1000.0, 50, 0.01);
    let reference = plane(0.0, 50, 0.01).vertices;
    let corr = mad_correctness(&model, &reference, 0.05).unwrap();
    let compl = mad_completeness(&model, &reference, 0.05).unwrap();
    let plane_ok = (corr - PLANE_OFFSET_MM).abs() <= PLANE_TOL_MM && (compl - PLANE_OFFSET_MM).abs() <= PLANE_TOL_MM;
    Outcome::new(
        mismatches == 0 && plane_ok,
        format!(
            "3 x 10^4-point grids, 3000 queries, {mismatches} mismatches; plane offset CORR {corr:.3} mm, COMPL {compl:.3} mm (5 +- {PLANE_TOL_MM} mm)"
        ),
    )
}

fn keyframe_accounting(ctx: &mut Ctx, data: &Dataset) -> Outcome {
    let n = data.frames.len();
    let mut proxy = Vec::new();
    for kappa in [5, 10, 20, 40] {
        let rec = ctx.run(&config(kappa, 10, ReintegrationMode::Off), data);
        proxy.push((kappa, rec.stats.retained_pixels));
    }
    let (k0, p0) = proxy[0];
    let worst = proxy
        .iter()
        .map(|&(k, p)| ((p as f64 * k as f64) / (p0 as f64 * k0 as f64) - 1.0).abs())
        .fold(0.0, f64::max);
    let bad: Vec<_> = ctx
        .runs
        .iter()
        .filter(|&&(n, kappa, count)| count != n.div_ceil(kappa))
        .collect();
    Outcome::new(
        bad.is_empty() && worst <= MEMORY_TOL,
        format!(
            "{} runs with keyframes = ceil(N/kappa), {} violations; N={n} retained pixels {:?}, max deviation from 1/kappa {:.1}% (tol {:.0}%)",
            ctx.runs.len(),
            bad.len(),
            proxy,
            worst * 100.0,
            MEMORY_TOL * 100.0
        ),
    )
}

fn main() -> ExitCode {
    let mut ctx = Ctx {
        room_cloud: AnalyticScene::desk_room().surface_cloud(CLOUD_SPACING),
        ..Default::default()
    };
    let noisy = noisy_room();
    // ACCEPTANCE_ONLY=4,5 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let (mut failures, mut ran) = (0, 0);
    let mut report = |n: usize, name: &str, limit_s: f64, f: &mut dyn FnMut() -> Outcome| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        ran += 1;
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        let pass = o.pass && secs < limit_s;
        if !pass {
            failures += 1;
        }
        println!(
            "[{}] criterion {n}: {name}: {} ({secs:.1} s, limit {limit_s:.0} s)",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    };
    report(1, "exact de-integration", 60.0, &mut exact_deintegration);
    report(2, "window selection oracle", 30.0, &mut window_selection_oracle);
    report(3, "seeded displacement scenario", 30.0, &mut displacement_scenario);
    report(4, "keyframe efficiency", 600.0, &mut || keyframe_efficiency(&mut ctx));
    report(5, "completeness trend", 600.0, &mut || completeness_trend(&mut ctx, &noisy));
    report(6, "correction efficacy", 600.0, &mut || correction_efficacy(&mut ctx));
    report(7, "geometry and meshing baselines", 120.0, &mut || meshing_baselines(&mut ctx));
    report(8, "metric oracles", 60.0, &mut metric_oracles);
    report(9, "keyframe accounting", 600.0, &mut || keyframe_accounting(&mut ctx, &noisy));
    if failures == 0 {
        println!("acceptance: all {ran} criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} of {ran} criteria failed");
        ExitCode::FAILURE
    }
}
