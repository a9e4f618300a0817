//! Surface voxelization of triangle soups.

use super::{Dims, GridDomain, OccupancyGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleSoup {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleSoup {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = TriangleSoup {
            vertices,
            triangles,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::DegenerateMesh("mesh has no triangles".into()));
        }
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::DegenerateMesh(format!(
                "triangle {t:?} indexes past {n} vertices"
            )));
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::DegenerateMesh("non-finite vertex".into()));
        }
        Ok(())
    }

    /// Axis-aligned bounds over the vertices referenced by triangles.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in self.triangles.iter().flatten() {
            let v = self.vertices[i];
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }

    /// Axis-aligned unit cube `[0,1]³` as 12 triangles.
    pub fn unit_cube() -> Self {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            vertices.push([(i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64]);
        }
        let quads = [
            [0, 2, 3, 1],
            [4, 5, 7, 6],
            [0, 1, 5, 4],
            [2, 6, 7, 3],
            [0, 4, 6, 2],
            [1, 3, 7, 5],
        ];
        let triangles = quads
            .iter()
            .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
            .collect();
        TriangleSoup {
            vertices,
            triangles,
        }
    }
}

/// Surface-voxelizes `mesh` into a grid of `dims`.
///
/// The mesh is uniformly scaled and centered so that its bounding box fits
/// the grid with one empty voxel on every side. A voxel is occupied iff some
/// triangle intersects its closed cube; candidate voxels are limited to those
/// covering the scaled bounding box, so faces lying exactly on the box
/// boundary only mark the voxels inside it.
pub fn voxelize(mesh: &TriangleSoup, dims: Dims) -> Result<OccupancyGrid> {
    mesh.validate()?;
    if dims.x < 3 || dims.y < 3 || dims.z < 3 {
        return Err(Error::InvalidArgument(format!(
            "grid {dims} too small for a one-voxel border"
        )));
    }
    let (lo, hi) = mesh.bounds();
    let extent = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let avail = [dims.x - 2, dims.y - 2, dims.z - 2];
    let scale = (0..3)
        .filter(|&a| extent[a] > 0.0)
        .map(|a| avail[a] as f64 / extent[a])
        .fold(f64::INFINITY, f64::min);
    if !scale.is_finite() {
        return Err(Error::DegenerateMesh("zero-extent bounding box".into()));
    }

    let size = dims.as_array();
    let to_grid = |v: [f64; 3]| -> [f64; 3] {
        let mut out = [0.0; 3];
        for a in 0..3 {
            let mid = 0.5 * (lo[a] + hi[a]);
            out[a] = (v[a] - mid) * scale + 0.5 * size[a] as f64;
        }
        out
    };

    // Voxel range covered by the scaled bounding box, clamped inside the border.
    let mut cover_lo = [0usize; 3];
    let mut cover_hi = [0usize; 3];
    let (glo, ghi) = (to_grid(lo), to_grid(hi));
    for a in 0..3 {
        let first = glo[a].floor().max(1.0) as usize;
        let last = (ghi[a].ceil() - 1.0).min((size[a] - 2) as f64) as usize;
        cover_lo[a] = first.min(size[a] - 2);
        cover_hi[a] = last.max(cover_lo[a]);
    }

    let mut grid = OccupancyGrid::empty(dims, "", GridDomain::Cad);
    for t in &mesh.triangles {
        let tri = [
            to_grid(mesh.vertices[t[0]]),
            to_grid(mesh.vertices[t[1]]),
            to_grid(mesh.vertices[t[2]]),
        ];
        let mut r_lo = [0usize; 3];
        let mut r_hi = [0usize; 3];
        let mut empty = false;
        for a in 0..3 {
            let tmin = tri[0][a].min(tri[1][a]).min(tri[2][a]);
            let tmax = tri[0][a].max(tri[1][a]).max(tri[2][a]);
            // Closed-cube overlap: voxel i spans [i, i+1].
            let first = (tmin.floor() - 1.0).max(cover_lo[a] as f64) as usize;
            let last = tmax.floor().min(cover_hi[a] as f64);
            if last < first as f64 {
                empty = true;
                break;
            }
            r_lo[a] = first;
            r_hi[a] = last as usize;
        }
        if empty {
            continue;
        }
        for x in r_lo[0]..=r_hi[0] {
            for y in r_lo[1]..=r_hi[1] {
                for z in r_lo[2]..=r_hi[2] {
                    if grid.get(x, y, z) {
                        continue;
                    }
                    let center = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    if triangle_box_overlap(center, [0.5; 3], &tri) {
                        grid.set(x, y, z, true);
                    }
                }
            }
        }
    }
    Ok(grid)
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Separating-axis test between a triangle and a closed axis-aligned box.
///
/// Tests the three box face normals, the triangle normal and the nine edge
/// cross products; touching counts as overlap.
pub fn triangle_box_overlap(center: [f64; 3], half: [f64; 3], tri: &[[f64; 3]; 3]) -> bool {
    let v = [sub(tri[0], center), sub(tri[1], center), sub(tri[2], center)];
    let edges = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];

    let separated = |axis: [f64; 3]| -> bool {
        let p = [dot(v[0], axis), dot(v[1], axis), dot(v[2], axis)];
        let r = half[0] * axis[0].abs() + half[1] * axis[1].abs() + half[2] * axis[2].abs();
        let min = p[0].min(p[1]).min(p[2]);
        let max = p[0].max(p[1]).max(p[2]);
        min > r || max < -r
    };

    for a in 0..3 {
        let mut axis = [0.0; 3];
        axis[a] = 1.0;
        if separated(axis) {
            return false;
        }
    }
    let normal = cross(edges[0], edges[1]);
    if dot(normal, normal) > 0.0 && separated(normal) {
        return false;
    }
    for e in &edges {
        for a in 0..3 {
            let mut unit = [0.0; 3];
            unit[a] = 1.0;
            let axis = cross(*e, unit);
            if dot(axis, axis) > 0.0 && separated(axis) {
                return false;
            }
        }
    }
    true
}
