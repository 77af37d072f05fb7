//! Zero iso-surface extraction.

mod io;
mod tables;

pub use io::{read_ply, write_obj, write_ply};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::volume::{voxel_index, TwoTierStore, Voxel, VoxelBlock, BLOCK_SIDE};
use tables::{CORNERS, EDGES, EDGE_TABLE, TRI_TABLE};

/// Default tolerance of [`TriangleMesh::weld`].
pub const WELD_TOLERANCE: f64 = 1e-7;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point3>,
    pub colors: Vec<[u8; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() != self.vertices.len() {
            return Err(Error::Config("mesh color count differs from vertex count".into()));
        }
        let n = self.vertices.len() as u32;
        if self.triangles.iter().flatten().any(|&i| i >= n) {
            return Err(Error::Config("mesh triangle index out of range".into()));
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return Err(Error::Config("mesh vertex is not finite".into()));
        }
        Ok(())
    }

    pub fn triangle(&self, t: usize) -> [Point3; 3] {
        let [a, b, c] = self.triangles[t];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle(t);
        0.5 * (b - a).cross(&(c - a)).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Merges vertices closer than `tol` (first occurrence wins) and drops
    /// triangles that collapse.
    pub fn weld(&self, tol: f64) -> TriangleMesh {
        let cell = tol.max(f64::MIN_POSITIVE) * 2.0;
        let key = |p: &Point3| {
            (
                (p.x / cell).floor() as i64,
                (p.y / cell).floor() as i64,
                (p.z / cell).floor() as i64,
            )
        };
        let mut grid: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        let mut out = TriangleMesh::default();
        let mut remap = Vec::with_capacity(self.vertices.len());
        for (p, c) in self.vertices.iter().zip(&self.colors) {
            let (kx, ky, kz) = key(p);
            let mut found = None;
            'search: for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        if let Some(list) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                            if let Some(&j) = list.iter().find(|&&j| (out.vertices[j as usize] - p).norm() <= tol) {
                                found = Some(j);
                                break 'search;
                            }
                        }
                    }
                }
            }
            let idx = found.unwrap_or_else(|| {
                let j = out.vertices.len() as u32;
                out.vertices.push(*p);
                out.colors.push(*c);
                grid.entry((kx, ky, kz)).or_default().push(j);
                j
            });
            remap.push(idx);
        }
        for t in &self.triangles {
            let [a, b, c] = t.map(|i| remap[i as usize]);
            if a != b && b != c && a != c {
                out.triangles.push([a, b, c]);
            }
        }
        out
    }
}

/// Neighborhood of a block: index `dx + 2*dy + 4*dz` holds the block at
/// offset `(dx, dy, dz)`, `dx, dy, dz ∈ {0, 1}`.
struct Neighborhood<'a> {
    blocks: [Option<&'a VoxelBlock>; 8],
}

impl<'a> Neighborhood<'a> {
    #[inline]
    fn voxel(&self, x: usize, y: usize, z: usize) -> Option<&'a Voxel> {
        let (bx, by, bz) = (x / BLOCK_SIDE, y / BLOCK_SIDE, z / BLOCK_SIDE);
        let b = self.blocks[bx + 2 * by + 4 * bz]?;
        Some(&b.voxels[voxel_index(x % BLOCK_SIDE, y % BLOCK_SIDE, z % BLOCK_SIDE)])
    }
}

/// Marching cubes over every observed cell of both tiers. Triangles are
/// wound so that their normals point towards increasing signed distance
/// (out of the surface into free space). Vertices are shared within a cell
/// only; use [`TriangleMesh::weld`] to merge across cells.
pub fn marching_cubes(store: &TwoTierStore) -> TriangleMesh {
    let cfg = *store.config();
    let vs = cfg.voxel_size;
    let side = BLOCK_SIDE as i64;
    let mut mesh = TriangleMesh::default();
    for block in store.blocks_sorted() {
        let c = block.coord;
        let mut blocks = [None; 8];
        for (i, slot) in blocks.iter_mut().enumerate() {
            *slot = if i == 0 {
                Some(block)
            } else {
                store.block(c.offset((i & 1) as i32, ((i >> 1) & 1) as i32, ((i >> 2) & 1) as i32))
            };
        }
        let hood = Neighborhood { blocks };
        let base = [c.x as i64 * side, c.y as i64 * side, c.z as i64 * side];
        for z in 0..BLOCK_SIDE {
            for y in 0..BLOCK_SIDE {
                for x in 0..BLOCK_SIDE {
                    let mut corners = [Voxel::default(); 8];
                    let mut ok = true;
                    let mut case = 0usize;
                    for (i, off) in CORNERS.iter().enumerate() {
                        match hood.voxel(x + off[0], y + off[1], z + off[2]) {
                            Some(v) if v.weight > 0.0 => {
                                corners[i] = *v;
                                if v.sdf < 0.0 {
                                    case |= 1 << i;
                                }
                            }
                            _ => {
                                ok = false;
                                break;
                            }
                        }
                    }
                    if !ok || EDGE_TABLE[case] == 0 {
                        continue;
                    }
                    let pos = |i: usize| {
                        let o = CORNERS[i];
                        Point3::new(
                            ((base[0] + (x + o[0]) as i64) as f64 + 0.5) * vs,
                            ((base[1] + (y + o[1]) as i64) as f64 + 0.5) * vs,
                            ((base[2] + (z + o[2]) as i64) as f64 + 0.5) * vs,
                        )
                    };
                    let mut edge_vertex = [u32::MAX; 12];
                    for (e, &[a, b]) in EDGES.iter().enumerate() {
                        if EDGE_TABLE[case] & (1 << e) == 0 {
                            continue;
                        }
                        let (va, vb) = (&corners[a], &corners[b]);
                        let t = if va.sdf == vb.sdf {
                            0.5
                        } else {
                            va.sdf / (va.sdf - vb.sdf)
                        };
                        let p = pos(a) + (pos(b) - pos(a)) * t;
                        let mut col = [0u8; 3];
                        for ch in 0..3 {
                            col[ch] = (va.color[ch] + (vb.color[ch] - va.color[ch]) * t)
                                .round()
                                .clamp(0.0, 255.0) as u8;
                        }
                        edge_vertex[e] = mesh.vertices.len() as u32;
                        mesh.vertices.push(p);
                        mesh.colors.push(col);
                    }
                    for tri in TRI_TABLE[case].chunks_exact(3) {
                        if tri[0] < 0 {
                            break;
                        }
                        let [a, b, c] = [tri[0], tri[1], tri[2]].map(|e| edge_vertex[e as usize]);
                        mesh.triangles.push([a, c, b]);
                    }
                }
            }
        }
    }
    mesh
}
