//! Python bindings for the reconstruction library.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::resurface as core;
use core::dataset::{read_dataset, write_sequence, Dataset as CoreDataset};
use core::geometry::{pose_distance as core_pose_distance, Intrinsics as CoreIntrinsics, Point3, Pose as CorePose, PoseScale};
use core::meshing::{read_ply, write_obj, write_ply, TriangleMesh, WELD_TOLERANCE};
use core::pipeline::{build_reference, evaluate, reconstruct, reference_cloud, RunConfig as CoreRunConfig, RunStats};
use core::synth::{make_sequence, AnalyticScene, SynthParams, TrajectoryPlan};

create_exception!(resurface, ResurfaceError, PyException);

fn err(e: core::Error) -> PyErr {
    ResurfaceError::new_err(e.to_string())
}

#[pyclass(name = "Intrinsics", module = "resurface", from_py_object)]
#[derive(Clone, Copy)]
struct Intrinsics {
    inner: CoreIntrinsics,
}

#[pymethods]
impl Intrinsics {
    #[new]
    fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> PyResult<Self> {
        let inner = CoreIntrinsics::new(fx, fy, cx, cy, width, height).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn default_vga() -> Self {
        Self {
            inner: CoreIntrinsics::default_vga(),
        }
    }

    fn downscaled(&self, factor: usize) -> Self {
        Self {
            inner: self.inner.downscaled(factor.max(1)),
        }
    }

    /// Pixel coordinates of a camera-frame point.
    fn project(&self, p: [f64; 3]) -> PyResult<(f64, f64)> {
        let x = self.inner.project(&Point3::from(p)).map_err(err)?;
        Ok((x.x, x.y))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    fn __repr__(&self) -> String {
        let k = &self.inner;
        format!(
            "Intrinsics(fx={}, fy={}, cx={}, cy={}, width={}, height={})",
            k.fx, k.fy, k.cx, k.cy, k.width, k.height
        )
    }
}

/// Rigid camera-to-world transform.
#[pyclass(name = "Pose", module = "resurface", from_py_object)]
#[derive(Clone, Copy)]
struct Pose {
    inner: CorePose,
}

#[pymethods]
impl Pose {
    #[new]
    #[pyo3(signature = (translation = [0.0; 3], quaternion = [0.0, 0.0, 0.0, 1.0]))]
    fn new(translation: [f64; 3], quaternion: [f64; 4]) -> PyResult<Self> {
        let inner = CorePose::from_quaternion(quaternion, translation.into(), 1e-3).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_euler(euler: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            inner: CorePose::from_euler(&euler.into(), translation.into()),
        }
    }

    fn compose(&self, other: PyRef<'_, Pose>) -> Self {
        Self {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        Self {
            inner: self.inner.inverse(),
        }
    }

    fn transform(&self, p: [f64; 3]) -> [f64; 3] {
        self.inner.transform(&Point3::from(p)).into()
    }

    /// Quaternion in (x, y, z, w) order.
    fn quaternion(&self) -> [f64; 4] {
        self.inner.quaternion()
    }

    #[getter]
    fn translation(&self) -> [f64; 3] {
        self.inner.translation.into()
    }

    /// Row-major 4x4 homogeneous matrix.
    fn matrix(&self) -> [[f64; 4]; 4] {
        let (r, t) = (&self.inner.rotation, &self.inner.translation);
        let mut out = [[0.0; 4]; 4];
        for (i, row) in out.iter_mut().enumerate().take(3) {
            for (j, v) in row.iter_mut().enumerate().take(3) {
                *v = r[(i, j)];
            }
            row[3] = t[i];
        }
        out[3][3] = 1.0;
        out
    }

    fn __repr__(&self) -> String {
        format!("Pose(translation={:?}, quaternion={:?})", self.translation(), self.quaternion())
    }
}

/// Scaled distance between two poses; `scale` weights (roll, pitch, yaw, x, y, z).
#[pyfunction]
#[pyo3(signature = (a, b, scale = None))]
fn pose_distance(a: PyRef<'_, Pose>, b: PyRef<'_, Pose>, scale: Option<[f64; 6]>) -> f64 {
    let s = scale.map(PoseScale).unwrap_or_default();
    core_pose_distance(&a.inner, &b.inner, &s)
}

/// Start (0-based) of the window of `m` consecutive entries with the largest
/// summed distance, or `None` if nothing moved.
#[pyfunction]
fn select_window(distances: Vec<f64>, m: usize) -> Option<usize> {
    core::reintegration::select_window(&distances, m)
}

/// Indices of the `m` largest distances.
#[pyfunction]
fn select_topk(distances: Vec<f64>, m: usize) -> Vec<usize> {
    core::reintegration::select_topk(&distances, m)
}

#[pyclass(name = "Mesh", module = "resurface", skip_from_py_object)]
#[derive(Clone)]
struct Mesh {
    inner: TriangleMesh,
}

#[pymethods]
impl Mesh {
    #[staticmethod]
    fn read_ply(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_ply(&path).map_err(err)?,
        })
    }

    fn write_ply(&self, path: PathBuf) -> PyResult<()> {
        write_ply(&self.inner, &path).map_err(err)
    }

    fn write_obj(&self, path: PathBuf) -> PyResult<()> {
        write_obj(&self.inner, &path).map_err(err)
    }

    #[pyo3(signature = (tolerance = WELD_TOLERANCE))]
    fn weld(&self, tolerance: f64) -> Self {
        Self {
            inner: self.inner.weld(tolerance),
        }
    }

    fn surface_area(&self) -> f64 {
        self.inner.surface_area()
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices.iter().map(|v| (*v).into()).collect()
    }

    #[getter]
    fn colors(&self) -> Vec<[u8; 3]> {
        self.inner.colors.clone()
    }

    #[getter]
    fn triangles(&self) -> Vec<[u32; 3]> {
        self.inner.triangles.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.triangles.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Mesh(vertices={}, triangles={})",
            self.inner.vertices.len(),
            self.inner.triangles.len()
        )
    }
}

#[pyclass(name = "Dataset", module = "resurface")]
struct Dataset {
    inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_dataset(&path).map_err(err)?,
        })
    }

    #[getter]
    fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            inner: self.inner.intrinsics,
        }
    }

    #[getter]
    fn event_count(&self) -> usize {
        self.inner.events.len()
    }

    /// Estimated pose of every frame, in frame order.
    fn poses(&self) -> Vec<Pose> {
        self.inner.frames.iter().map(|f| Pose { inner: f.pose }).collect()
    }

    fn has_ground_truth(&self) -> bool {
        self.inner.ground_truth.is_some()
    }

    fn __len__(&self) -> usize {
        self.inner.frames.len()
    }
}

/// Renders a synthetic desk-room sequence into `out` and returns its frame count.
#[pyfunction]
#[pyo3(signature = (
    out, frames = 80, waypoints = 8, downscale = 5, noise = 0.0015,
    drift = [0.0; 6], corrections = Vec::new(), anchor_every = 10, seed = 7
))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out: PathBuf,
    frames: usize,
    waypoints: usize,
    downscale: usize,
    noise: f64,
    drift: [f64; 6],
    corrections: Vec<(u64, f64)>,
    anchor_every: u64,
    seed: u64,
) -> PyResult<usize> {
    if waypoints < 2 || frames < waypoints {
        return Err(ResurfaceError::new_err("need at least 2 waypoints and one frame per waypoint"));
    }
    let plan = TrajectoryPlan {
        waypoints: TrajectoryPlan::orbit(&Point3::new(0.0, 0.0, 0.5), 1.0, 1.3, waypoints),
        frames_per_segment: frames / waypoints,
        drift_rate: drift,
        correction_schedule: corrections,
        anchor_every,
    };
    let k = CoreIntrinsics::default_vga().downscaled(downscale.max(1));
    let params = SynthParams {
        noise_sigma0: noise,
        seed,
        ..Default::default()
    };
    let seq = make_sequence(&AnalyticScene::desk_room(), &plan, &k, &params).map_err(err)?;
    write_sequence(&seq, &out).map_err(err)?;
    Ok(seq.frames.len())
}

/// Run configuration; keyword arguments and `set` take the same keys as the
/// command-line config file.
#[pyclass(name = "RunConfig", module = "resurface", skip_from_py_object)]
#[derive(Clone)]
struct RunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut cfg = Self {
            inner: CoreRunConfig::default(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                cfg.inner
                    .set(&k.extract::<String>()?, &v.str()?.to_string())
                    .map_err(err)?;
            }
        }
        cfg.inner.validate().map_err(err)?;
        Ok(cfg)
    }

    /// Sets one option; the configuration is left unchanged if the result is invalid.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(err)?;
        next.validate().map_err(err)?;
        self.inner = next;
        Ok(())
    }

    #[getter]
    fn kappa(&self) -> Option<usize> {
        self.inner.kappa()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.window
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.name()
    }

    #[getter]
    fn voxel_size(&self) -> f64 {
        self.inner.volume.voxel_size
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(strategy={}, kappa={:?}, m={}, mode={}, voxel_size={})",
            self.inner.strategy.name(),
            self.kappa(),
            self.inner.window,
            self.mode(),
            self.voxel_size()
        )
    }
}

fn stats_dict<'py>(py: Python<'py>, s: &RunStats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("keyframes", s.keyframes)?;
    d.set_item("corrections", s.corrections)?;
    d.set_item("corrected_entries", s.corrected_entries)?;
    d.set_item("finalized_entries", s.finalized_entries)?;
    d.set_item("blocks_streamed_in", s.counters.blocks_streamed_in)?;
    d.set_item("blocks_streamed_out", s.counters.blocks_streamed_out)?;
    d.set_item("sphere_relocations", s.counters.sphere_relocations)?;
    d.set_item("retained_pixels", s.retained_pixels)?;
    d.set_item("fuse_ms", s.fuse_ms())?;
    d.set_item("integrate_ms", s.integrate_ms())?;
    d.set_item("correct_ms", s.correct_ms())?;
    if let Some(m) = s.metrics {
        d.set_item("corr_mad_mm", m.corr_mad_mm)?;
        d.set_item("compl_mad_mm", m.compl_mad_mm)?;
    }
    Ok(d)
}

/// Reconstructs `dataset` and returns `(mesh, stats)`.
#[pyfunction]
fn run<'py>(
    py: Python<'py>,
    config: PyRef<'_, RunConfig>,
    dataset: PyRef<'_, Dataset>,
) -> PyResult<(Mesh, Bound<'py, PyDict>)> {
    let rec = reconstruct(&config.inner, &dataset.inner).map_err(err)?;
    let stats = stats_dict(py, &rec.stats)?;
    Ok((Mesh { inner: rec.mesh }, stats))
}

/// Reference mesh from the dataset's ground-truth trajectory.
#[pyfunction]
fn reference_mesh(config: PyRef<'_, RunConfig>, dataset: PyRef<'_, Dataset>) -> PyResult<Mesh> {
    let mesh = build_reference(&dataset.inner, &config.inner.volume, &config.inner.fusion).map_err(err)?;
    Ok(Mesh { inner: mesh })
}

/// Correctness and completeness MAD (mm) of `model` against points sampled
/// from `reference`.
#[pyfunction]
#[pyo3(signature = (model, reference, samples = 100_000, seed = 0, cell = 0.04))]
fn evaluate_mesh(
    model: PyRef<'_, Mesh>,
    reference: PyRef<'_, Mesh>,
    samples: usize,
    seed: u64,
    cell: f64,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let cloud = reference_cloud(&reference.inner, samples, seed).map_err(err)?;
    let m = evaluate(&model.inner, &cloud, cell).map_err(err)?;
    Ok(BTreeMap::from([("corr_mad_mm", m.corr_mad_mm), ("compl_mad_mm", m.compl_mad_mm)]))
}

#[pymodule(name = "resurface")]
fn resurface(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ResurfaceError", m.py().get_type::<ResurfaceError>())?;
    m.add_class::<Intrinsics>()?;
    m.add_class::<Pose>()?;
    m.add_class::<Mesh>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<RunConfig>()?;
    m.add_function(wrap_pyfunction!(pose_distance, m)?)?;
    m.add_function(wrap_pyfunction!(select_window, m)?)?;
    m.add_function(wrap_pyfunction!(select_topk, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(reference_mesh, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_mesh, m)?)?;
    Ok(())
}
