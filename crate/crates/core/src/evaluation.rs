//! Correctness and completeness of a reconstruction against a reference.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Point3, Pose};
use crate::image::DepthMap;
use crate::meshing::{write_ply, TriangleMesh};

pub type PointCloud = Vec<Point3>;

/// Upper bound on grid cells; coarser cells are used beyond it.
const MAX_CELLS: f64 = 1.0e7;

/// Exact nearest-neighbor queries over a dense uniform grid spanning the
/// bounding box of the points.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell: f64,
    points: Vec<Point3>,
    /// Key of the lowest cell.
    origin: [i64; 3],
    dims: [i64; 3],
    /// Cell `c` holds `order[starts[c]..starts[c + 1]]`.
    starts: Vec<u32>,
    order: Vec<u32>,
}

impl GridIndex {
    pub fn new(points: &[Point3], cell: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("point set"));
        }
        if !(cell > 0.0) {
            return Err(Error::Config("grid cell size must be positive".into()));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::Config("point set contains a non-finite point".into()));
        }
        let (mut lo, mut hi) = (points[0], points[0]);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let volume = (0..3).map(|a| extent[a] / cell + 1.0).product::<f64>();
        let cell = if volume > MAX_CELLS {
            cell * (volume / MAX_CELLS).cbrt().max(1.0) * 1.01
        } else {
            cell
        };
        let (a, b) = (key(&lo, cell), key(&hi, cell));
        let origin = [a.0, a.1, a.2];
        let dims = [b.0 - a.0 + 1, b.1 - a.1 + 1, b.2 - a.2 + 1];
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut index = Self {
            cell,
            points: points.to_vec(),
            origin,
            dims,
            starts: vec![0; n_cells + 1],
            order: vec![0; points.len()],
        };
        let cells: Vec<usize> = points
            .iter()
            .map(|p| {
                let k = key(p, cell);
                index.linear(k.0 - origin[0], k.1 - origin[1], k.2 - origin[2])
            })
            .collect();
        for &c in &cells {
            index.starts[c + 1] += 1;
        }
        for c in 0..n_cells {
            index.starts[c + 1] += index.starts[c];
        }
        let mut fill = index.starts.clone();
        for (i, &c) in cells.iter().enumerate() {
            index.order[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    #[inline]
    fn linear(&self, x: i64, y: i64, z: i64) -> usize {
        (x + self.dims[0] * (y + self.dims[1] * z)) as usize
    }

    /// Distance to the closest indexed point, with its index. Ties go to the
    /// lower index.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let k = key(q, self.cell);
        // query cell relative to the grid
        let c = [k.0 - self.origin[0], k.1 - self.origin[1], k.2 - self.origin[2]];
        let gap = |a: usize| (-c[a]).max(c[a] - (self.dims[a] - 1)).max(0);
        let far = |a: usize| c[a].max(self.dims[a] - 1 - c[a]);
        let first = gap(0).max(gap(1)).max(gap(2));
        let last = far(0).max(far(1)).max(far(2));
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in first..=last {
            self.scan_ring(q, c, ring, &mut best);
            // every point in ring r+1 or beyond is at least r*cell away
            if best.1 <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }

    fn scan_ring(&self, q: &Point3, c: [i64; 3], r: i64, best: &mut (usize, f64)) {
        let range = |a: usize| ((c[a] - r).max(0), (c[a] + r).min(self.dims[a] - 1));
        let ((x0, x1), (y0, y1), (z0, z1)) = (range(0), range(1), range(2));
        let mut visit = |x: i64, y: i64, z: i64| {
            let cell = self.linear(x, y, z);
            for &i in &self.order[self.starts[cell] as usize..self.starts[cell + 1] as usize] {
                let d = (self.points[i as usize] - q).norm();
                if d < best.1 || (d == best.1 && (i as usize) < best.0) {
                    *best = (i as usize, d);
                }
            }
        };
        for x in x0..=x1 {
            for y in y0..=y1 {
                if (x - c[0]).abs() == r || (y - c[1]).abs() == r {
                    for z in z0..=z1 {
                        visit(x, y, z);
                    }
                } else {
                    if c[2] - r >= 0 && c[2] - r < self.dims[2] {
                        visit(x, y, c[2] - r);
                    }
                    if r > 0 && c[2] + r >= 0 && c[2] + r < self.dims[2] {
                        visit(x, y, c[2] + r);
                    }
                }
            }
        }
    }
}

fn key(p: &Point3, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Nearest-neighbor distance by exhaustive search.
pub fn brute_force_nearest(points: &[Point3], q: &Point3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean distance (mm) from every query point to its nearest indexed point.
fn mean_nn_mm(queries: &[Point3], index: &GridIndex) -> f64 {
    let sum: f64 = queries.iter().map(|q| index.nearest(q).1).sum();
    1000.0 * sum / queries.len() as f64
}

/// Mean distance (mm) from each model vertex to the nearest reference point.
pub fn mad_correctness(model: &TriangleMesh, reference: &[Point3], cell: f64) -> Result<f64> {
    if model.vertices.is_empty() {
        return Err(Error::EmptyInput("model mesh"));
    }
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference cloud"));
    }
    Ok(mean_nn_mm(&model.vertices, &GridIndex::new(reference, cell)?))
}

/// Mean distance (mm) from each reference point to the nearest model vertex.
pub fn mad_completeness(model: &TriangleMesh, reference: &[Point3], cell: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::EmptyInput("reference cloud"));
    }
    if model.vertices.is_empty() {
        return Err(Error::EmptyModel);
    }
    Ok(mean_nn_mm(reference, &GridIndex::new(&model.vertices, cell)?))
}

/// Area-weighted uniform sampling of `n` points on the mesh surface.
pub fn sample_mesh(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.triangles.is_empty() || n == 0 {
        return Err(Error::EmptyInput("mesh or sample count"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let (mut u, mut v) = (rng.random::<f64>(), rng.random::<f64>());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        out.push(a + (b - a) * u + (c - a) * v);
    }
    Ok(out)
}

/// Maps a distance in millimeters to blue (0) through red (`max_mm` and
/// beyond).
pub fn distance_color(mm: f64, max_mm: f64) -> [u8; 3] {
    let t = (mm / max_mm).clamp(0.0, 1.0);
    // blue → cyan → green → yellow → red
    let (r, g, b) = if t < 0.25 {
        (0.0, t / 0.25, 1.0)
    } else if t < 0.5 {
        (0.0, 1.0, 1.0 - (t - 0.25) / 0.25)
    } else if t < 0.75 {
        ((t - 0.5) / 0.25, 1.0, 0.0)
    } else {
        (1.0, 1.0 - (t - 0.75) / 0.25, 0.0)
    };
    [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
}

/// Copy of `model` with vertices colored by their distance to `reference`.
pub fn distance_colored(model: &TriangleMesh, reference: &[Point3], cell: f64) -> Result<TriangleMesh> {
    let index = GridIndex::new(reference, cell)?;
    let mut out = model.clone();
    for (c, v) in out.colors.iter_mut().zip(&model.vertices) {
        *c = distance_color(1000.0 * index.nearest(v).1, 50.0);
    }
    Ok(out)
}

pub fn write_distance_ply(model: &TriangleMesh, reference: &[Point3], cell: f64, path: &Path) -> Result<()> {
    write_ply(&distance_colored(model, reference, cell)?, path)
}

/// Points of `cloud` seen by at least one view: the point projects inside the
/// image in front of the camera and the depth there agrees within `tol`.
pub fn visible_subset(cloud: &[Point3], k: &Intrinsics, views: &[(Pose, &DepthMap)], tol: f64) -> PointCloud {
    let inverse: Vec<Pose> = views.iter().map(|(p, _)| p.inverse()).collect();
    cloud
        .iter()
        .filter(|p| {
            views.iter().zip(&inverse).any(|((_, depth), w2c)| {
                let c = w2c.transform(p);
                if c.z <= 0.0 {
                    return false;
                }
                let Some((u, v)) = k.nearest_pixel(&k.project_unchecked(&c)) else {
                    return false;
                };
                let z = *depth.get(u, v);
                z > 0.0 && (z - c.z).abs() <= tol
            })
        })
        .copied()
        .collect()
}
