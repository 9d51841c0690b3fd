//! Cylindrical partition of a scan: coordinate transform, cell assignment,
//! point↔cell tables, feature scattering, cell-label encoding, and the
//! occupancy/encoding statistics comparing partition schemes.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::eval::metrics::ConfusionMatrix;
use crate::io::PointCloud;
use crate::par;
use crate::sparse::{Coord, SparseTensor};

/// A point in cylinder coordinates; `theta` is in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylPoint {
    pub rho: f64,
    pub theta: f64,
    pub z: f64,
}

/// Wraps an angle into `[-π, π)`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let t = theta - two_pi * ((theta + PI) / two_pi).floor();
    if t >= PI {
        t - two_pi
    } else if t < -PI {
        t + two_pi
    } else {
        t
    }
}

pub fn cart_to_cyl(x: f64, y: f64, z: f64) -> CylPoint {
    CylPoint {
        rho: x.hypot(y),
        theta: normalize_angle(y.atan2(x)),
        z,
    }
}

pub fn cyl_to_cart(p: CylPoint) -> [f64; 3] {
    let (s, c) = p.theta.sin_cos();
    [p.rho * c, p.rho * s, p.z]
}

fn bin(v: f64, lo: f64, width: f64, n: usize) -> usize {
    let b = ((v - lo) / width).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else if b >= n as f64 {
        n - 1
    } else {
        b as usize
    }
}

/// A regular 3D grid that points can be binned into.
pub trait Grid {
    fn resolution(&self) -> [usize; 3];
    fn cell_of(&self, xyz: [f64; 3]) -> Coord;
    /// Planar distance from the origin to the cell center.
    fn cell_distance(&self, cell: Coord) -> f64;

    fn num_cells(&self) -> usize {
        self.resolution().iter().product()
    }

    fn flat_index(&self, c: Coord) -> usize {
        let r = self.resolution();
        (c[0] * r[1] + c[1]) * r[2] + c[2]
    }
}

/// Cylindrical grid over `(ρ, θ, z)`; θ always spans `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylGridSpec {
    pub rho_range: [f64; 2],
    pub z_range: [f64; 2],
    /// `(H, W, L)` over radius, azimuth, height.
    pub resolution: [usize; 3],
}

impl Default for CylGridSpec {
    fn default() -> Self {
        CylGridSpec {
            rho_range: [0.0, 50.0],
            z_range: [-4.0, 2.0],
            resolution: [480, 360, 32],
        }
    }
}

impl CylGridSpec {
    pub fn new(rho_range: [f64; 2], z_range: [f64; 2], resolution: [usize; 3]) -> Result<Self> {
        let g = CylGridSpec {
            rho_range,
            z_range,
            resolution,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let [r0, r1] = self.rho_range;
        let [z0, z1] = self.z_range;
        if !(r0 >= 0.0 && r1 > r0 && r1.is_finite()) {
            return Err(Error::InvalidValue(format!("bad radius range {:?}", self.rho_range)));
        }
        if !(z1 > z0 && z0.is_finite() && z1.is_finite()) {
            return Err(Error::InvalidValue(format!("bad height range {:?}", self.z_range)));
        }
        if self.resolution.contains(&0) {
            return Err(Error::InvalidValue(format!(
                "resolution {:?} must be positive",
                self.resolution
            )));
        }
        Ok(())
    }

    /// `(Δρ, Δθ, Δz)`.
    pub fn cell_size(&self) -> [f64; 3] {
        [
            (self.rho_range[1] - self.rho_range[0]) / self.resolution[0] as f64,
            2.0 * PI / self.resolution[1] as f64,
            (self.z_range[1] - self.z_range[0]) / self.resolution[2] as f64,
        ]
    }

    pub fn cell_of_cyl(&self, p: CylPoint) -> Coord {
        let [dr, dt, dz] = self.cell_size();
        [
            bin(p.rho, self.rho_range[0], dr, self.resolution[0]),
            bin(p.theta, -PI, dt, self.resolution[1]),
            bin(p.z, self.z_range[0], dz, self.resolution[2]),
        ]
    }

    pub fn cell_center(&self, c: Coord) -> CylPoint {
        let [dr, dt, dz] = self.cell_size();
        CylPoint {
            rho: self.rho_range[0] + (c[0] as f64 + 0.5) * dr,
            theta: -PI + (c[1] as f64 + 0.5) * dt,
            z: self.z_range[0] + (c[2] as f64 + 0.5) * dz,
        }
    }

    /// Volume of any cell in radius bin `h`: `(Δθ/2)(ρ_out² − ρ_in²)Δz`.
    pub fn cell_volume(&self, h: usize) -> f64 {
        let [dr, dt, dz] = self.cell_size();
        let inner = self.rho_range[0] + h as f64 * dr;
        let outer = inner + dr;
        0.5 * dt * (outer * outer - inner * inner) * dz
    }
}

impl Grid for CylGridSpec {
    fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    fn cell_of(&self, xyz: [f64; 3]) -> Coord {
        self.cell_of_cyl(cart_to_cyl(xyz[0], xyz[1], xyz[2]))
    }

    fn cell_distance(&self, cell: Coord) -> f64 {
        self.cell_center(cell).rho
    }
}

/// Axis-aligned Cartesian grid, the comparison partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CubicGridSpec {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub resolution: [usize; 3],
}

impl Default for CubicGridSpec {
    /// Same cell count as the default cylindrical grid (480·360·32 =
    /// 480·480·24) over its bounding box.
    fn default() -> Self {
        CubicGridSpec {
            x_range: [-50.0, 50.0],
            y_range: [-50.0, 50.0],
            z_range: [-4.0, 2.0],
            resolution: [480, 480, 24],
        }
    }
}

impl CubicGridSpec {
    pub fn validate(&self) -> Result<()> {
        for r in [self.x_range, self.y_range, self.z_range] {
            if !(r[1] > r[0] && r[0].is_finite() && r[1].is_finite()) {
                return Err(Error::InvalidValue(format!("bad axis range {r:?}")));
            }
        }
        if self.resolution.contains(&0) {
            return Err(Error::InvalidValue("resolution must be positive".into()));
        }
        Ok(())
    }

    fn ranges(&self) -> [[f64; 2]; 3] {
        [self.x_range, self.y_range, self.z_range]
    }
}

impl Grid for CubicGridSpec {
    fn resolution(&self) -> [usize; 3] {
        self.resolution
    }

    fn cell_of(&self, xyz: [f64; 3]) -> Coord {
        let r = self.ranges();
        [0, 1, 2].map(|a| {
            let w = (r[a][1] - r[a][0]) / self.resolution[a] as f64;
            bin(xyz[a], r[a][0], w, self.resolution[a])
        })
    }

    fn cell_distance(&self, cell: Coord) -> f64 {
        let r = self.ranges();
        let center = |a: usize| {
            let w = (r[a][1] - r[a][0]) / self.resolution[a] as f64;
            r[a][0] + (cell[a] as f64 + 0.5) * w
        };
        center(0).hypot(center(1))
    }
}

/// Point↔cell tables for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMapping {
    /// Per point, the flat grid index of its cell.
    pub point_cell: Vec<usize>,
    /// Per point, the index of its cell in `cells`.
    pub point_site: Vec<usize>,
    /// Occupied cells in ascending flat-index order.
    pub cells: Arc<[Coord]>,
    /// Per occupied cell, member point indices in ascending order.
    pub cell_points: Vec<Vec<usize>>,
    pub shape: [usize; 3],
}

impl VoxelMapping {
    pub fn num_points(&self) -> usize {
        self.point_site.len()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }
}

/// Bins every point; out-of-range coordinates are clamped to boundary cells.
pub fn assign_cells<G: Grid>(cloud: &PointCloud, grid: &G) -> VoxelMapping {
    let point_coord: Vec<Coord> = cloud.xyz.iter().map(|p| grid.cell_of(*p)).collect();
    let point_cell: Vec<usize> = point_coord.iter().map(|c| grid.flat_index(*c)).collect();
    let mut groups: BTreeMap<usize, (Coord, Vec<usize>)> = BTreeMap::new();
    for (i, (&flat, &c)) in point_cell.iter().zip(&point_coord).enumerate() {
        groups.entry(flat).or_insert_with(|| (c, Vec::new())).1.push(i);
    }
    let mut point_site = vec![0usize; cloud.len()];
    let mut cells = Vec::with_capacity(groups.len());
    let mut cell_points = Vec::with_capacity(groups.len());
    for (s, (_, (c, members))) in groups.into_iter().enumerate() {
        for &i in &members {
            point_site[i] = s;
        }
        cells.push(c);
        cell_points.push(members);
    }
    VoxelMapping {
        point_cell,
        point_site,
        cells: cells.into(),
        cell_points,
        shape: grid.resolution(),
    }
}

/// Per-channel maximum of member-point features per occupied cell.
///
/// Also returns, for each site and channel, the point that supplied the
/// maximum (lowest index on ties), which routes gradients back.
pub fn scatter_max(
    point_features: &Array2<f64>,
    mapping: &VoxelMapping,
) -> Result<(SparseTensor, Array2<usize>)> {
    if point_features.nrows() != mapping.num_points() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} mapped points",
            point_features.nrows(),
            mapping.num_points()
        )));
    }
    let c = point_features.ncols();
    let m = mapping.num_cells();
    let mut out = Array2::from_elem((m, c), f64::NEG_INFINITY);
    let mut arg = Array2::zeros((m, c));
    for (s, members) in mapping.cell_points.iter().enumerate() {
        for &i in members {
            for ch in 0..c {
                let v = point_features[[i, ch]];
                if v > out[[s, ch]] {
                    out[[s, ch]] = v;
                    arg[[s, ch]] = i;
                }
            }
        }
    }
    let t = SparseTensor::from_shared(mapping.cells.clone(), out, mapping.shape)?;
    Ok((t, arg))
}

/// Spreads site gradients back to the points that won the maximum.
pub fn scatter_max_backward(grad_sites: &Array2<f64>, argmax: &Array2<usize>, num_points: usize) -> Array2<f64> {
    let mut g = Array2::zeros((num_points, grad_sites.ncols()));
    for ((s, ch), &i) in argmax.indexed_iter() {
        g[[i, ch]] += grad_sites[[s, ch]];
    }
    g
}

/// Builds the voxel tensor for a scan's point features (elementwise max per cell).
pub fn scatter_features(
    point_features: &Array2<f64>,
    mapping: &VoxelMapping,
    grid: &CylGridSpec,
) -> Result<SparseTensor> {
    if mapping.shape != grid.resolution {
        return Err(Error::Shape("mapping built on a different grid".into()));
    }
    if point_features.ncols() == 0 {
        return Err(Error::Shape("features need at least one channel".into()));
    }
    scatter_max(point_features, mapping).map(|(t, _)| t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelEncoding {
    /// Most frequent class in the cell.
    Majority,
    /// Least frequent class present in the cell.
    Minority,
}

/// One label per occupied cell. Ignored points do not vote; a cell with only
/// ignored points gets `ignore_id`. Ties go to the smaller class id.
pub fn encode_cell_labels(
    mapping: &VoxelMapping,
    point_labels: &[u32],
    mode: LabelEncoding,
    ignore_id: u32,
) -> Result<Vec<u32>> {
    if point_labels.len() != mapping.num_points() {
        return Err(Error::LabelCount {
            labels: point_labels.len(),
            points: mapping.num_points(),
        });
    }
    Ok(mapping
        .cell_points
        .iter()
        .map(|members| {
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in members {
                let l = point_labels[i];
                if l != ignore_id {
                    *counts.entry(l).or_default() += 1;
                }
            }
            // BTreeMap iterates in ascending id, so strict comparisons keep the smallest id on ties
            let mut best: Option<(u32, usize)> = None;
            for (&l, &n) in &counts {
                let better = match (best, mode) {
                    (None, _) => true,
                    (Some((_, b)), LabelEncoding::Majority) => n > b,
                    (Some((_, b)), LabelEncoding::Minority) => n < b,
                };
                if better {
                    best = Some((l, n));
                }
            }
            best.map_or(ignore_id, |(l, _)| l)
        })
        .collect())
}

/// mIoU obtained by predicting every point with its cell's encoded label.
pub fn encoding_upper_bound_miou<G: Grid>(
    cloud: &PointCloud,
    grid: &G,
    mode: LabelEncoding,
    num_classes: usize,
    ignore_id: u32,
) -> Result<f64> {
    let labels = cloud.labels.as_ref().ok_or(Error::NoLabels)?;
    if labels.iter().all(|&l| l == ignore_id) {
        return Err(Error::NoLabels);
    }
    let mapping = assign_cells(cloud, grid);
    let cell_labels = encode_cell_labels(&mapping, labels, mode, ignore_id)?;
    let pred: Vec<u32> = mapping.point_site.iter().map(|&s| cell_labels[s]).collect();
    let mut cm = ConfusionMatrix::new(num_classes, ignore_id);
    cm.update(labels, &pred)?;
    cm.miou().ok_or(Error::NoLabels)
}

/// One row of an occupancy table.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyRow {
    pub scheme: String,
    pub distance_lo: f64,
    pub distance_hi: f64,
    /// `None` when no cell center falls in the bin.
    pub nonempty_proportion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OccupancyTable {
    pub rows: Vec<OccupancyRow>,
}

impl OccupancyTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scheme,distance_lo,distance_hi,nonempty_proportion\n");
        for r in &self.rows {
            let p = r.nonempty_proportion.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.scheme, r.distance_lo, r.distance_hi, p);
        }
        s
    }

    pub fn scheme(&self, name: &str) -> Vec<&OccupancyRow> {
        self.rows.iter().filter(|r| r.scheme == name).collect()
    }
}

fn bin_of(edges: &[f64], d: f64) -> Option<usize> {
    if edges.len() < 2 || d < edges[0] || d >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= d) - 1)
}

/// Counts cells per distance bin. Cell distance depends only on the first
/// two axes, so count columns and multiply by the height resolution.
fn cells_per_bin<G: Grid>(grid: &G, edges: &[f64]) -> Vec<u64> {
    let r = grid.resolution();
    let mut counts = vec![0u64; edges.len().saturating_sub(1)];
    for a in 0..r[0] {
        for b in 0..r[1] {
            if let Some(k) = bin_of(edges, grid.cell_distance([a, b, 0])) {
                counts[k] += r[2] as u64;
            }
        }
    }
    counts
}

fn nonempty_per_bin<G: Grid>(cloud: &PointCloud, grid: &G, edges: &[f64]) -> Vec<u64> {
    let mut occupied: HashMap<usize, Coord> = HashMap::new();
    for p in &cloud.xyz {
        let c = grid.cell_of(*p);
        occupied.insert(grid.flat_index(c), c);
    }
    let mut counts = vec![0u64; edges.len().saturating_sub(1)];
    for c in occupied.values() {
        if let Some(k) = bin_of(edges, grid.cell_distance(*c)) {
            counts[k] += 1;
        }
    }
    counts
}

fn scheme_rows<G: Grid + Sync>(
    name: &str,
    clouds: &[PointCloud],
    grid: &G,
    edges: &[f64],
) -> Vec<OccupancyRow> {
    let totals = cells_per_bin(grid, edges);
    let per_cloud = par::map_slice(clouds, |c| nonempty_per_bin(c, grid, edges));
    let mut nonempty = vec![0u64; totals.len()];
    for counts in per_cloud {
        for (acc, n) in nonempty.iter_mut().zip(counts) {
            *acc += n;
        }
    }
    edges
        .windows(2)
        .enumerate()
        .map(|(k, w)| OccupancyRow {
            scheme: name.to_string(),
            distance_lo: w[0],
            distance_hi: w[1],
            // the per-cloud denominator is constant, so the mean of
            // per-cloud proportions is the pooled ratio
            nonempty_proportion: (totals[k] > 0)
                .then(|| nonempty[k] as f64 / (totals[k] as f64 * clouds.len() as f64)),
        })
        .collect()
}

/// Proportion of non-empty cells per planar-distance bin for the cylindrical
/// and cubic partitions, averaged over `clouds`. `distance_edges` are the
/// increasing bin boundaries; bins are half-open `[lo, hi)`.
pub fn occupancy_by_distance(
    clouds: &[PointCloud],
    cyl: &CylGridSpec,
    cubic: &CubicGridSpec,
    distance_edges: &[f64],
) -> Result<OccupancyTable> {
    if clouds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if distance_edges.len() < 2 || distance_edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidValue("distance edges must increase".into()));
    }
    cyl.validate()?;
    cubic.validate()?;
    let mut rows = scheme_rows("cylindrical", clouds, cyl, distance_edges);
    rows.extend(scheme_rows("cubic", clouds, cubic, distance_edges));
    Ok(OccupancyTable { rows })
}
