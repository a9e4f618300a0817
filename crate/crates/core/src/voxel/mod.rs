//! Binary occupancy grids and the operations defined on them.
//!
//! Cells are addressed `(x, y, z)` and stored x-major: the linear index of a
//! cell is `(x * dims.y + y) * dims.z + z`, which is also the memory order of
//! the `depth × height × width` tensors the networks consume. The y axis is
//! the up axis.

mod io;
mod mesh;

use bitvec::prelude::*;

use crate::{Error, Result};

pub use self::io::{read_grid, read_grid_file, write_grid, write_grid_file};
pub use self::mesh::{triangle_box_overlap, voxelize, TriangleSoup};

/// Edge length of the grids the networks operate on.
pub const GRID_DIM: usize = 32;

/// Number of uniform up-axis rotations used for augmentation and evaluation.
pub const ROTATION_STEPS: u8 = 12;

/// Default binarization threshold for predicted occupancy.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
}

impl Dims {
    pub const fn new(x: usize, y: usize, z: usize) -> Self {
        Dims { x, y, z }
    }

    pub const fn cube(n: usize) -> Self {
        Dims { x: n, y: n, z: n }
    }

    pub const fn cells(&self) -> usize {
        self.x * self.y * self.z
    }

    pub fn is_cubic(&self) -> bool {
        self.x == self.y && self.y == self.z
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.y + y) * self.z + z
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize, usize) {
        let z = index % self.z;
        let y = (index / self.z) % self.y;
        let x = index / (self.y * self.z);
        (x, y, z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.x, self.y, self.z]
    }
}

impl Default for Dims {
    fn default() -> Self {
        Dims::cube(GRID_DIM)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.x, self.y, self.z)
    }
}

/// What a grid represents. The numeric codes are those of the `SCVX` format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridDomain {
    Scan,
    Cad,
    Mask,
}

impl GridDomain {
    pub fn code(self) -> u8 {
        match self {
            GridDomain::Scan => 0,
            GridDomain::Cad => 1,
            GridDomain::Mask => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GridDomain::Scan),
            1 => Some(GridDomain::Cad),
            2 => Some(GridDomain::Mask),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OccupancyGrid {
    dims: Dims,
    bits: BitVec<u8, Lsb0>,
    object_id: String,
    domain: GridDomain,
}

impl OccupancyGrid {
    pub fn empty(dims: Dims, object_id: impl Into<String>, domain: GridDomain) -> Self {
        OccupancyGrid {
            dims,
            bits: bitvec![u8, Lsb0; 0; dims.cells()],
            object_id: object_id.into(),
            domain,
        }
    }

    pub fn from_bits(
        dims: Dims,
        bits: BitVec<u8, Lsb0>,
        object_id: impl Into<String>,
        domain: GridDomain,
    ) -> Result<Self> {
        if bits.len() != dims.cells() {
            return Err(Error::Shape(format!(
                "{} bits for a {dims} grid",
                bits.len()
            )));
        }
        Ok(OccupancyGrid {
            dims,
            bits,
            object_id: object_id.into(),
            domain,
        })
    }

    /// Builds a grid from one flag per cell in x-major order.
    pub fn from_cells(
        dims: Dims,
        cells: impl IntoIterator<Item = bool>,
        object_id: impl Into<String>,
        domain: GridDomain,
    ) -> Result<Self> {
        let bits: BitVec<u8, Lsb0> = cells.into_iter().collect();
        Self::from_bits(dims, bits, object_id, domain)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn object_id(&self) -> &str {
        &self.object_id
    }

    pub fn domain(&self) -> GridDomain {
        self.domain
    }

    pub fn bits(&self) -> &BitSlice<u8, Lsb0> {
        &self.bits
    }

    /// Bit-packed occupancy, LSB-first within each byte.
    pub fn packed_bytes(&self) -> &[u8] {
        self.bits.as_raw_slice()
    }

    pub fn with_identity(mut self, object_id: impl Into<String>, domain: GridDomain) -> Self {
        self.object_id = object_id.into();
        self.domain = domain;
        self
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.bits[self.dims.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, occupied: bool) {
        let i = self.dims.index(x, y, z);
        self.bits.set(i, occupied);
    }

    #[inline]
    pub fn get_index(&self, index: usize) -> bool {
        self.bits[index]
    }

    #[inline]
    pub fn set_index(&mut self, index: usize, occupied: bool) {
        self.bits.set(index, occupied);
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.not_any()
    }

    /// Linear indices of the occupied cells, ascending.
    pub fn occupied(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    /// Occupancy as reals (1.0 occupied, 0.0 empty) in cell order.
    pub fn to_reals<T: num_traits::Float>(&self) -> Vec<T> {
        self.bits
            .iter()
            .map(|b| if *b { T::one() } else { T::zero() })
            .collect()
    }

    fn check_dims(&self, other: &OccupancyGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "grid dims {} vs {}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn and(&self, other: &OccupancyGrid) -> Result<OccupancyGrid> {
        self.check_dims(other)?;
        let mut out = self.clone();
        out.bits &= other.bits.as_bitslice();
        Ok(out)
    }

    pub fn or(&self, other: &OccupancyGrid) -> Result<OccupancyGrid> {
        self.check_dims(other)?;
        let mut out = self.clone();
        out.bits |= other.bits.as_bitslice();
        Ok(out)
    }

    /// Cells of `self` that are not in `other`.
    pub fn minus(&self, other: &OccupancyGrid) -> Result<OccupancyGrid> {
        self.check_dims(other)?;
        let mut out = self.clone();
        for i in other.bits.iter_ones() {
            out.bits.set(i, false);
        }
        Ok(out)
    }

    pub fn intersection_count(&self, other: &OccupancyGrid) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .as_raw_slice()
            .iter()
            .zip(other.bits.as_raw_slice())
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn union_count(&self, other: &OccupancyGrid) -> Result<usize> {
        self.check_dims(other)?;
        Ok(self
            .bits
            .as_raw_slice()
            .iter()
            .zip(other.bits.as_raw_slice())
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum())
    }

    /// True if no occupied cell lies on the outermost layer of the grid.
    pub fn border_is_empty(&self) -> bool {
        let d = self.dims;
        self.occupied().all(|i| {
            let (x, y, z) = d.coords(i);
            x > 0 && y > 0 && z > 0 && x + 1 < d.x && y + 1 < d.y && z + 1 < d.z
        })
    }
}

/// Intersection over union of two grids; two empty grids score 1.0.
pub fn iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(1.0);
    }
    let inter = a.intersection_count(b)?;
    Ok(inter as f64 / union as f64)
}

/// Binarizes a dense probability field: a cell is occupied iff its value is
/// strictly greater than `tau`.
pub fn threshold(
    probabilities: &[f32],
    dims: Dims,
    tau: f32,
    object_id: impl Into<String>,
    domain: GridDomain,
) -> Result<OccupancyGrid> {
    if probabilities.len() != dims.cells() {
        return Err(Error::Shape(format!(
            "{} probabilities for a {dims} grid",
            probabilities.len()
        )));
    }
    OccupancyGrid::from_cells(dims, probabilities.iter().map(|&p| p > tau), object_id, domain)
}

/// (cos, sin) of `steps` × 30°, exact at multiples of 90°.
fn rotation_cos_sin(steps: u8) -> (f64, f64) {
    match steps % 12 {
        0 => (1.0, 0.0),
        3 => (0.0, 1.0),
        6 => (-1.0, 0.0),
        9 => (0.0, -1.0),
        s => {
            let theta = f64::from(s) * std::f64::consts::PI / 6.0;
            (theta.cos(), theta.sin())
        }
    }
}

/// Rotates a cubic grid by `steps` × 30° about the vertical (y) axis through
/// the grid center.
///
/// Each output cell takes the value of the input cell containing its
/// inverse-rotated center; samples falling outside the grid are empty.
pub fn rotate_up_axis(grid: &OccupancyGrid, steps: u8) -> Result<OccupancyGrid> {
    if steps >= ROTATION_STEPS {
        return Err(Error::InvalidArgument(format!(
            "rotation step {steps} outside 0..{ROTATION_STEPS}"
        )));
    }
    let d = grid.dims();
    if !d.is_cubic() {
        return Err(Error::Shape(format!("rotation needs a cubic grid, got {d}")));
    }
    if steps == 0 {
        return Ok(grid.clone());
    }
    let (cos, sin) = rotation_cos_sin(steps);
    let n = d.x;
    let half = n as f64 / 2.0;
    let mut out = OccupancyGrid::empty(d, grid.object_id(), grid.domain());

    // The sampling map is the same on every horizontal slice.
    for x in 0..n {
        let cx = x as f64 + 0.5 - half;
        for z in 0..n {
            let cz = z as f64 + 0.5 - half;
            // Forward rotation maps (x, z) -> (x cos - z sin, x sin + z cos);
            // its inverse is applied to the output cell center.
            let sx = (cos * cx + sin * cz + half).floor();
            let sz = (-sin * cx + cos * cz + half).floor();
            if sx < 0.0 || sz < 0.0 || sx >= n as f64 || sz >= n as f64 {
                continue;
            }
            let (sx, sz) = (sx as usize, sz as usize);
            for y in 0..n {
                if grid.get(sx, y, sz) {
                    out.set(x, y, z, true);
                }
            }
        }
    }
    Ok(out)
}
