//! Procedural scan/CAD pairs and the on-disk pair and catalog formats.
//!
//! A CAD grid is a solid composition of axis-aligned parts from one of six
//! families, centered in the horizontal plane and standing on the floor
//! layer. The matching scan removes a contiguous slab of the object (cut by a
//! random half-space), adds a floor plane and clutter boxes, and flips cells
//! near the observed surface. Ground-truth masks are tracked cell by cell.
//!
//! Directory layout written by [`write_pairs`]:
//!
//! ```text
//! manifest.tsv     id  category  scan  fg  bg  cad   (paths relative to the dir)
//! grids/{id}_scan.scvx, {id}_fg.scvx, {id}_bg.scvx, {id}_cad.scvx
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::voxel::{read_grid_file, write_grid_file, Dims, GridDomain, OccupancyGrid, GRID_DIM};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CATALOG_FILE: &str = "catalog.tsv";

/// Lowest object layer; layer 1 holds the floor plane.
const FLOOR_Y: usize = 1;
const OBJECT_Y: usize = FLOOR_Y + 1;
/// Largest horizontal half-extent of an object in cells. Keeps every corner
/// within 9·√2 of the vertical axis so any rotation about it stays inside.
const MAX_HALF: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Box,
    Cylinder,
    LShape,
    Table,
    Chair,
    Shelf,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Box,
        Category::Cylinder,
        Category::LShape,
        Category::Table,
        Category::Chair,
        Category::Shelf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Box => "box",
            Category::Cylinder => "cylinder",
            Category::LShape => "l_shape",
            Category::Table => "table",
            Category::Chair => "chair",
            Category::Shelf => "shelf",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub category: Category,
    pub clutter_density: f64,
    pub dropout_fraction: f64,
    pub noise_flip_prob: f64,
}

impl SyntheticSpec {
    /// A clean spec: no clutter, dropout or noise.
    pub fn clean(seed: u64, category: Category) -> Self {
        SyntheticSpec {
            seed,
            category,
            clutter_density: 0.0,
            dropout_fraction: 0.0,
            noise_flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("clutter_density", self.clutter_density),
            ("dropout_fraction", self.dropout_fraction),
            ("noise_flip_prob", self.noise_flip_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn default_id(&self) -> String {
        format!("{}_{}", self.category, self.seed)
    }
}

/// A scan with its segmentation targets and the clean CAD model it depicts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairedSample {
    pub id: String,
    pub category: String,
    pub scan: OccupancyGrid,
    pub gt_fg: OccupancyGrid,
    pub gt_bg: OccupancyGrid,
    pub cad: OccupancyGrid,
}

impl PairedSample {
    /// Checks equal dims, `fg ∧ bg = ∅` and `fg ∨ bg = scan`.
    pub fn validate(&self) -> Result<()> {
        let err = |reason: String| Err(Error::sample(&self.id, reason));
        let d = self.scan.dims();
        for (name, g) in [("fg", &self.gt_fg), ("bg", &self.gt_bg), ("cad", &self.cad)] {
            if g.dims() != d {
                return err(format!("{name} grid is {} but scan is {d}", g.dims()));
            }
        }
        let overlap = self.gt_fg.intersection_count(&self.gt_bg)?;
        if overlap != 0 {
            return err(format!("fg and bg masks share {overlap} cells"));
        }
        if self.gt_fg.or(&self.gt_bg)?.bits() != self.scan.bits() {
            return err("fg ∪ bg differs from the scan occupancy".into());
        }
        Ok(())
    }

    pub fn object_ids(id: &str) -> [String; 4] {
        [
            format!("{id}_scan"),
            format!("{id}_fg"),
            format!("{id}_bg"),
            format!("{id}_cad"),
        ]
    }
}

struct Solid {
    dims: Dims,
    cells: Vec<bool>,
}

impl Solid {
    fn new(n: usize) -> Self {
        let dims = Dims::cube(n);
        Solid {
            dims,
            cells: vec![false; dims.cells()],
        }
    }

    /// Fills the half-open box `[x0, x1) × [y0, y1) × [z0, z1)`, relative to
    /// the grid center in x/z and to the object floor in y.
    fn cuboid(&mut self, x: (i64, i64), y: (usize, usize), z: (i64, i64)) {
        let c = (self.dims.x / 2) as i64;
        for xi in (c + x.0)..(c + x.1) {
            for yi in (OBJECT_Y + y.0)..(OBJECT_Y + y.1) {
                for zi in (c + z.0)..(c + z.1) {
                    let i = self.dims.index(xi as usize, yi, zi as usize);
                    self.cells[i] = true;
                }
            }
        }
    }

    /// Vertical cylinder of radius `r` about the grid's vertical axis.
    fn cylinder(&mut self, r: f64, height: usize) {
        let c = (self.dims.x / 2) as f64;
        for x in 0..self.dims.x {
            for z in 0..self.dims.z {
                let (dx, dz) = (x as f64 + 0.5 - c, z as f64 + 0.5 - c);
                if dx * dx + dz * dz <= r * r {
                    for y in OBJECT_Y..OBJECT_Y + height {
                        let i = self.dims.index(x, y, z);
                        self.cells[i] = true;
                    }
                }
            }
        }
    }
}

fn half_extent(rng: &mut ChaCha8Rng, lo: i64) -> i64 {
    rng.random_range(lo..=MAX_HALF as i64)
}

/// Clean CAD grid for `category`, deterministic in `rng`.
fn build_cad(category: Category, n: usize, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut s = Solid::new(n);
    match category {
        Category::Box => {
            let (hx, hz) = (half_extent(rng, 4), half_extent(rng, 4));
            let h = rng.random_range(6..=20);
            s.cuboid((-hx, hx), (0, h), (-hz, hz));
        }
        Category::Cylinder => {
            let r = rng.random_range(4.0..9.0);
            let h = rng.random_range(10..=24);
            s.cylinder(r, h);
        }
        Category::LShape => {
            let (hx, hz) = (half_extent(rng, 5), half_extent(rng, 3));
            let base = rng.random_range(3..=6);
            let tall = rng.random_range(10..=22);
            let arm = rng.random_range(2..=hx.max(3) - 1);
            s.cuboid((-hx, hx), (0, base), (-hz, hz));
            s.cuboid((-hx, -hx + arm), (base, tall), (-hz, hz));
        }
        Category::Table => {
            let (hx, hz) = (half_extent(rng, 6), half_extent(rng, 5));
            let h = rng.random_range(10..=18);
            let top = rng.random_range(2..=3);
            s.cuboid((-hx, hx), (h - top, h), (-hz, hz));
            let leg = 2;
            for (x0, z0) in [(-hx, -hz), (hx - leg, -hz), (-hx, hz - leg), (hx - leg, hz - leg)] {
                s.cuboid((x0, x0 + leg), (0, h - top), (z0, z0 + leg));
            }
        }
        Category::Chair => {
            let hx = half_extent(rng, 5);
            let hz = rng.random_range(5..=hx.min(8));
            let seat = rng.random_range(8..=12);
            let back = rng.random_range(seat + 8..=seat + 14).min(28);
            let leg = 2;
            s.cuboid((-hx, hx), (seat - 2, seat), (-hz, hz));
            for (x0, z0) in [(-hx, -hz), (hx - leg, -hz), (-hx, hz - leg), (hx - leg, hz - leg)] {
                s.cuboid((x0, x0 + leg), (0, seat - 2), (z0, z0 + leg));
            }
            s.cuboid((-hx, hx), (seat, back), (-hz, -hz + 2));
        }
        Category::Shelf => {
            let (hx, hz) = (half_extent(rng, 6), rng.random_range(3..=6));
            let h = rng.random_range(16..=26);
            let boards = rng.random_range(3..=5);
            s.cuboid((-hx, -hx + 2), (0, h), (-hz, hz));
            s.cuboid((hx - 2, hx), (0, h), (-hz, hz));
            s.cuboid((-hx, hx), (0, h), (hz - 1, hz));
            for b in 0..boards {
                let y = b * (h - 2) / (boards - 1);
                s.cuboid((-hx, hx), (y, y + 2), (-hz, hz));
            }
        }
    }
    s.cells
}

/// Clean CAD grid of one family, as [`generate`] would build it for `seed`.
pub fn generate_cad(category: Category, seed: u64, object_id: &str) -> OccupancyGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = build_cad(category, GRID_DIM, &mut rng);
    OccupancyGrid::from_cells(Dims::cube(GRID_DIM), cells, object_id, GridDomain::Cad)
        .expect("cell count matches dims")
}

fn neighbours(d: Dims, i: usize) -> impl Iterator<Item = usize> {
    let (x, y, z) = d.coords(i);
    let r = |v: usize, n: usize| v.saturating_sub(1)..=(v + 1).min(n - 1);
    r(x, d.x).flat_map(move |nx| {
        r(y, d.y).flat_map(move |ny| r(z, d.z).map(move |nz| d.index(nx, ny, nz)))
    })
}

fn interior(d: Dims, i: usize) -> bool {
    let (x, y, z) = d.coords(i);
    (1..d.x - 1).contains(&x) && (1..d.y - 1).contains(&y) && (1..d.z - 1).contains(&z)
}

/// Builds one paired sample. A pure function of `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<PairedSample> {
    generate_with_id(spec, &spec.default_id())
}

pub fn generate_with_id(spec: &SyntheticSpec, id: &str) -> Result<PairedSample> {
    spec.validate()?;
    let n = GRID_DIM;
    let d = Dims::cube(n);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let cad = build_cad(spec.category, n, &mut rng);

    // Dropout: remove the cells furthest along a random direction.
    let mut fg = cad.clone();
    let cad_cells: Vec<usize> = (0..d.cells()).filter(|&i| cad[i]).collect();
    let drop = (spec.dropout_fraction * cad_cells.len() as f64).round() as usize;
    if drop > 0 {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let lift: f64 = rng.random_range(-0.5..0.5);
        let dir = [theta.cos(), lift, theta.sin()];
        let mut keyed: Vec<(f64, usize)> = cad_cells
            .iter()
            .map(|&i| {
                let (x, y, z) = d.coords(i);
                (dir[0] * x as f64 + dir[1] * y as f64 + dir[2] * z as f64, i)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, i) in keyed.iter().take(drop) {
            fg[i] = false;
        }
    }

    // Floor plane and clutter boxes, never overlapping the CAD model.
    let mut bg = vec![false; d.cells()];
    if spec.clutter_density > 0.0 {
        for x in 1..n - 1 {
            for z in 1..n - 1 {
                bg[d.index(x, FLOOR_Y, z)] = true;
            }
        }
        let boxes = (spec.clutter_density * 8.0).round() as usize;
        for _ in 0..boxes {
            let size = [rng.random_range(2..=6), rng.random_range(2..=8), rng.random_range(2..=6)];
            let x0 = rng.random_range(1..n - 1 - size[0]);
            let z0 = rng.random_range(1..n - 1 - size[2]);
            for x in x0..x0 + size[0] {
                for y in OBJECT_Y..OBJECT_Y + size[1] {
                    for z in z0..z0 + size[2] {
                        let i = d.index(x, y, z);
                        if !cad[i] {
                            bg[i] = true;
                        }
                    }
                }
            }
        }
    }

    // Noise: flip cells in the one-cell band around the observed scan.
    if spec.noise_flip_prob > 0.0 {
        let observed: Vec<bool> = (0..d.cells()).map(|i| fg[i] || bg[i]).collect();
        let mut band = vec![false; d.cells()];
        for i in (0..d.cells()).filter(|&i| observed[i]) {
            for j in neighbours(d, i) {
                band[j] = true;
            }
        }
        let (fg0, bg0) = (fg.clone(), bg.clone());
        for i in 0..d.cells() {
            if !band[i] || !interior(d, i) || !rng.random_bool(spec.noise_flip_prob) {
                continue;
            }
            if observed[i] {
                fg[i] = false;
                bg[i] = false;
            } else if neighbours(d, i).any(|j| fg0[j]) {
                fg[i] = true;
            } else {
                debug_assert!(neighbours(d, i).any(|j| bg0[j]));
                bg[i] = true;
            }
        }
    }

    let grid = |cells: Vec<bool>, suffix: &str, domain| {
        OccupancyGrid::from_cells(d, cells, format!("{id}_{suffix}"), domain)
    };
    let scan: Vec<bool> = (0..d.cells()).map(|i| fg[i] || bg[i]).collect();
    let sample = PairedSample {
        id: id.to_string(),
        category: spec.category.to_string(),
        scan: grid(scan, "scan", GridDomain::Scan)?,
        gt_fg: grid(fg, "fg", GridDomain::Mask)?,
        gt_bg: grid(bg, "bg", GridDomain::Mask)?,
        cad: grid(cad, "cad", GridDomain::Cad)?,
    };
    sample.validate()?;
    Ok(sample)
}

/// Settings shared by every pair of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub pairs: usize,
    pub seed: u64,
    pub categories: Vec<Category>,
    pub clutter_density: f64,
    pub dropout_fraction: f64,
    pub noise_flip_prob: f64,
}

impl DatasetSpec {
    pub fn new(pairs: usize, seed: u64) -> Self {
        DatasetSpec {
            pairs,
            seed,
            categories: Category::ALL.to_vec(),
            clutter_density: 0.4,
            dropout_fraction: 0.3,
            noise_flip_prob: 0.02,
        }
    }

    /// Per-pair spec: categories cycle, seeds derive from the dataset seed.
    pub fn pair_spec(&self, index: usize) -> SyntheticSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        SyntheticSpec {
            seed: rng.random(),
            category: self.categories[index % self.categories.len()],
            clutter_density: self.clutter_density,
            dropout_fraction: self.dropout_fraction,
            noise_flip_prob: self.noise_flip_prob,
        }
    }

    pub fn pair_id(index: usize) -> String {
        format!("pair{index:04}")
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<PairedSample>> {
    if spec.categories.is_empty() {
        return Err(Error::InvalidArgument("no categories to generate".into()));
    }
    (0..spec.pairs)
        .map(|i| generate_with_id(&spec.pair_spec(i), &DatasetSpec::pair_id(i)))
        .collect()
}

/// Extra clean CAD models, cycling through `categories`, for retrieval pools.
pub fn generate_catalog_cads(count: usize, seed: u64, categories: &[Category]) -> Vec<(OccupancyGrid, Category)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00ca_7a10_9000);
    (0..count)
        .map(|i| {
            let c = categories[i % categories.len()];
            let id = format!("extra{i:04}_cad");
            (generate_cad(c, rng.random(), &id), c)
        })
        .collect()
}

fn grid_rel_path(object_id: &str) -> String {
    format!("grids/{object_id}.scvx")
}

fn check_field(id: &str, name: &str, value: &str) -> Result<()> {
    if value.is_empty() || value.contains(['\t', '\n', '\r']) {
        return Err(Error::sample(id, format!("{name} `{value}` is empty or contains tabs/newlines")));
    }
    Ok(())
}

/// Writes the grids and `manifest.tsv` for `samples` under `dir`.
pub fn write_pairs(dir: impl AsRef<Path>, samples: &[PairedSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("grids"))?;
    let mut manifest = String::new();
    for s in samples {
        check_field(&s.id, "id", &s.id)?;
        check_field(&s.id, "category", &s.category)?;
        s.validate()?;
        let ids = PairedSample::object_ids(&s.id);
        let grids = [&s.scan, &s.gt_fg, &s.gt_bg, &s.cad];
        let mut paths = Vec::with_capacity(4);
        for (oid, g) in ids.iter().zip(grids) {
            let rel = grid_rel_path(oid);
            write_grid_file(dir.join(&rel), &g.clone().with_identity(oid.clone(), g.domain()))?;
            paths.push(rel);
        }
        manifest.push_str(&format!("{}\t{}\t{}\n", s.id, s.category, paths.join("\t")));
    }
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Resolves a dataset argument: a directory holding `manifest.tsv` or the
/// manifest file itself. Returns `(manifest, base directory)`.
pub fn resolve_manifest(path: impl AsRef<Path>) -> (PathBuf, PathBuf) {
    let path = path.as_ref();
    if path.is_dir() {
        (path.join(MANIFEST_FILE), path.to_path_buf())
    } else {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        (path.to_path_buf(), base)
    }
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub category: String,
    pub scan: PathBuf,
    pub fg: PathBuf,
    pub bg: PathBuf,
    pub cad: PathBuf,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let (manifest, base) = resolve_manifest(path);
    let text = fs::read_to_string(&manifest)?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            let id = f.first().copied().unwrap_or("");
            return Err(Error::sample(
                id,
                format!("manifest line {} has {} fields, expected 6", n + 1, f.len()),
            ));
        }
        entries.push(ManifestEntry {
            id: f[0].to_string(),
            category: f[1].to_string(),
            scan: base.join(f[2]),
            fg: base.join(f[3]),
            bg: base.join(f[4]),
            cad: base.join(f[5]),
        });
    }
    Ok(entries)
}

fn load_entry(e: &ManifestEntry) -> Result<PairedSample> {
    let load = |p: &Path, what: &str| {
        if !p.exists() {
            return Err(Error::sample(&e.id, format!("missing {what} grid {}", p.display())));
        }
        read_grid_file(p).map_err(|err| Error::sample(&e.id, format!("{what} grid: {err}")))
    };
    let sample = PairedSample {
        id: e.id.clone(),
        category: e.category.clone(),
        scan: load(&e.scan, "scan")?,
        gt_fg: load(&e.fg, "fg")?,
        gt_bg: load(&e.bg, "bg")?,
        cad: load(&e.cad, "cad")?,
    };
    sample.validate()?;
    Ok(sample)
}

/// Streams validated samples from a manifest (or the directory holding one).
pub fn load_pairs(path: impl AsRef<Path>) -> Result<impl Iterator<Item = Result<PairedSample>>> {
    Ok(read_manifest(path)?.into_iter().map(|e| load_entry(&e)))
}

/// Convenience: loads every sample, failing on the first invalid one.
pub fn load_all_pairs(path: impl AsRef<Path>) -> Result<Vec<PairedSample>> {
    load_pairs(path)?.collect()
}

/// A CAD model available for retrieval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CatalogEntry {
    pub cad_id: String,
    pub category: String,
    pub path: PathBuf,
}

/// Writes extra CAD grids under `dir/grids` and a `catalog.tsv` listing them
/// together with the CAD models of `samples`.
pub fn write_catalog(
    dir: impl AsRef<Path>,
    samples: &[PairedSample],
    extra: &[(OccupancyGrid, Category)],
) -> Result<Vec<CatalogEntry>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("grids"))?;
    let mut entries = Vec::new();
    for s in samples {
        let cad_id = format!("{}_cad", s.id);
        entries.push(CatalogEntry {
            path: PathBuf::from(grid_rel_path(&cad_id)),
            cad_id,
            category: s.category.clone(),
        });
    }
    for (g, c) in extra {
        let rel = grid_rel_path(g.object_id());
        write_grid_file(dir.join(&rel), g)?;
        entries.push(CatalogEntry {
            cad_id: g.object_id().to_string(),
            category: c.to_string(),
            path: PathBuf::from(rel),
        });
    }
    let text: String = entries
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.cad_id, e.category, e.path.display()))
        .collect();
    fs::write(dir.join(CATALOG_FILE), text)?;
    Ok(entries)
}

/// Reads `catalog.tsv` (or the directory holding one). Paths are resolved
/// against the catalog's directory.
pub fn read_catalog(path: impl AsRef<Path>) -> Result<Vec<CatalogEntry>> {
    let path = path.as_ref();
    let (file, base) = if path.is_dir() {
        (path.join(CATALOG_FILE), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    let text = fs::read_to_string(&file)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::format(
                "catalog",
                format!("line {} has {} fields, expected 3", n + 1, f.len()),
            ));
        }
        out.push(CatalogEntry {
            cad_id: f[0].to_string(),
            category: f[1].to_string(),
            path: base.join(f[2]),
        });
    }
    Ok(out)
}
