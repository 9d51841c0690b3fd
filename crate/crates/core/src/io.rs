//! Point cloud ingestion: SemanticKITTI-style `.bin`/`.label` files, class
//! remapping, and deterministic synthetic scenes for desk-scale runs.
//!
//! `.bin` scans are consecutive little-endian `f32` quadruples
//! `(x, y, z, intensity)`. `.label` files hold one little-endian `u32` per
//! point whose lower 16 bits are the semantic class and upper 16 bits the
//! instance id.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Train id used for points that carry no usable label.
pub const DEFAULT_IGNORE_ID: u32 = 255;

/// A scan: coordinates in meters, intensity in `[0, 1]`, optional train-id labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub xyz: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(xyz: Vec<[f64; 3]>, intensity: Vec<f64>, labels: Option<Vec<u32>>) -> Result<Self> {
        let cloud = PointCloud {
            xyz,
            intensity,
            labels,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.intensity.len() != self.xyz.len() {
            return Err(Error::Shape(format!(
                "{} intensities for {} points",
                self.intensity.len(),
                self.xyz.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.xyz.len() {
                return Err(Error::LabelCount {
                    labels: labels.len(),
                    points: self.xyz.len(),
                });
            }
        }
        if self.xyz.iter().flatten().any(|v| !v.is_finite())
            || self.intensity.iter().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidValue("non-finite point attribute".into()));
        }
        Ok(())
    }

    /// Attaches labels, checking the count against the point count.
    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::LabelCount {
                labels: labels.len(),
                points: self.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    /// Reorders points (and labels) so that new index `i` holds old point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> PointCloud {
        PointCloud {
            xyz: perm.iter().map(|&i| self.xyz[i]).collect(),
            intensity: perm.iter().map(|&i| self.intensity[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| perm.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Raw dataset class ids to contiguous train ids.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    raw_to_train: BTreeMap<u32, u32>,
    train_to_raw: Vec<u32>,
    num_classes: usize,
    ignore_id: u32,
}

impl LabelMap {
    /// Builds a map. `inverse` gives the raw id written for each train id;
    /// when omitted the smallest raw id mapping to each class is used.
    pub fn new(
        raw_to_train: BTreeMap<u32, u32>,
        num_classes: usize,
        ignore_id: u32,
        inverse: Option<Vec<u32>>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("label map needs at least one class".into()));
        }
        if (ignore_id as usize) < num_classes {
            return Err(Error::Config(format!(
                "ignore id {ignore_id} collides with class range [0, {num_classes})"
            )));
        }
        for (&raw, &train) in &raw_to_train {
            if train != ignore_id && train as usize >= num_classes {
                return Err(Error::Config(format!(
                    "raw id {raw} maps to {train}, outside [0, {num_classes})"
                )));
            }
        }
        let train_to_raw = match inverse {
            Some(inv) => inv,
            None => (0..num_classes as u32)
                .map(|t| {
                    raw_to_train
                        .iter()
                        .find(|&(_, &v)| v == t)
                        .map(|(&r, _)| r)
                        .unwrap_or(t)
                })
                .collect(),
        };
        if train_to_raw.len() != num_classes {
            return Err(Error::Config(format!(
                "inverse map has {} entries for {num_classes} classes",
                train_to_raw.len()
            )));
        }
        let map = LabelMap {
            raw_to_train,
            train_to_raw,
            num_classes,
            ignore_id,
        };
        for t in 0..num_classes as u32 {
            let raw = map.train_to_raw[t as usize];
            if map.to_train(raw) != t {
                return Err(Error::Config(format!(
                    "inverse map sends class {t} to raw id {raw}, which maps back to {}",
                    map.to_train(raw)
                )));
            }
        }
        Ok(map)
    }

    /// Identity map over `[0, num_classes)`, everything else ignored.
    pub fn identity(num_classes: usize, ignore_id: u32) -> Result<Self> {
        let raw = (0..num_classes as u32).map(|c| (c, c)).collect();
        LabelMap::new(raw, num_classes, ignore_id, None)
    }

    /// The 19-class SemanticKITTI training map (moving classes merged into
    /// their static counterparts, unlabeled/outlier/other ignored).
    pub fn semantic_kitti() -> Self {
        const LEARNING_MAP: [(u32, u32); 34] = [
            (0, 0),
            (1, 0),
            (10, 1),
            (11, 2),
            (13, 5),
            (15, 3),
            (16, 5),
            (18, 4),
            (20, 5),
            (30, 6),
            (31, 7),
            (32, 8),
            (40, 9),
            (44, 10),
            (48, 11),
            (49, 12),
            (50, 13),
            (51, 14),
            (52, 0),
            (60, 9),
            (70, 15),
            (71, 16),
            (72, 17),
            (80, 18),
            (81, 19),
            (99, 0),
            (252, 1),
            (253, 7),
            (254, 6),
            (255, 8),
            (256, 5),
            (257, 5),
            (258, 4),
            (259, 5),
        ];
        const INVERSE: [u32; 19] = [
            10, 11, 15, 18, 20, 30, 31, 32, 40, 44, 48, 49, 50, 51, 70, 71, 72, 80, 81,
        ];
        // learning ids are 1-based with 0 = unlabeled
        let raw = LEARNING_MAP
            .iter()
            .map(|&(r, l)| (r, if l == 0 { DEFAULT_IGNORE_ID } else { l - 1 }))
            .collect();
        LabelMap::new(raw, 19, DEFAULT_IGNORE_ID, Some(INVERSE.to_vec()))
            .expect("built-in map is consistent")
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }

    /// Unknown raw ids map to the ignore id.
    pub fn to_train(&self, raw: u32) -> u32 {
        self.raw_to_train.get(&raw).copied().unwrap_or(self.ignore_id)
    }

    /// Raw id written for a train id; ignore and out-of-range ids become 0.
    pub fn to_raw(&self, train: u32) -> u32 {
        self.train_to_raw.get(train as usize).copied().unwrap_or(0)
    }

    pub fn raw_to_train(&self) -> &BTreeMap<u32, u32> {
        &self.raw_to_train
    }

    pub fn train_to_raw(&self) -> &[u32] {
        &self.train_to_raw
    }
}

fn read_records(path: &Path, record: u64) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !(bytes.len() as u64).is_multiple_of(record) {
        return Err(Error::RecordLength {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record,
        });
    }
    Ok(bytes)
}

/// Decodes a `.bin` scan into an unlabeled cloud.
pub fn read_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let bytes = read_records(path.as_ref(), 16)?;
    decode_kitti_bin(&bytes)
}

/// Decodes `.bin` bytes; the length must be a multiple of 16.
pub fn decode_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(16) {
        return Err(Error::InvalidValue(format!(
            "{} bytes is not a whole number of points",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut xyz = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| {
            f32::from_le_bytes([rec[4 * k], rec[4 * k + 1], rec[4 * k + 2], rec[4 * k + 3]]) as f64
        };
        xyz.push([f(0), f(1), f(2)]);
        intensity.push(f(3));
    }
    PointCloud::new(xyz, intensity, None)
}

/// Encodes coordinates and intensity as `.bin` bytes (narrowed to `f32`).
pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (p, &i) in cloud.xyz.iter().zip(&cloud.intensity) {
        for v in [p[0], p[1], p[2], i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kitti_bin(cloud)).map_err(|e| Error::io(path, e))
}

/// Reads a `.label` file and remaps the semantic part of each record.
pub fn read_kitti_labels(path: impl AsRef<Path>, map: &LabelMap) -> Result<Vec<u32>> {
    let bytes = read_records(path.as_ref(), 4)?;
    Ok(decode_kitti_labels(&bytes, map))
}

/// Lower 16 bits carry the semantic id; the instance id above is dropped.
pub fn decode_kitti_labels(bytes: &[u8], map: &LabelMap) -> Vec<u32> {
    bytes
        .chunks_exact(4)
        .map(|r| {
            let word = u32::from_le_bytes([r[0], r[1], r[2], r[3]]);
            map.to_train(word & 0xFFFF)
        })
        .collect()
}

/// Writes train ids as raw ids through the inverse of `map`, instance bits zero.
pub fn write_kitti_labels(path: impl AsRef<Path>, labels: &[u32], map: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(labels.len() * 4);
    for &t in labels {
        out.extend_from_slice(&(map.to_raw(t) & 0xFFFF).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a scan and its labels, checking that the counts agree.
pub fn read_labeled_scan(
    bin: impl AsRef<Path>,
    label: impl AsRef<Path>,
    map: &LabelMap,
) -> Result<PointCloud> {
    let cloud = read_kitti_bin(bin)?;
    let labels = read_kitti_labels(label, map)?;
    cloud.with_labels(labels)
}

/// Synthetic class ids.
pub const CLASS_GROUND: u32 = 0;
pub const CLASS_POLE: u32 = 1;
pub const CLASS_BOX: u32 = 2;
pub const SYNTHETIC_CLASSES: usize = 3;

/// Parameters of a synthetic street scene: a ground plane with poles and
/// box-shaped objects, sensor at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    pub num_points: usize,
    pub max_range: f64,
    /// Innermost radius that receives returns.
    pub min_range: f64,
    /// Height of the ground plane relative to the sensor.
    pub ground_z: f64,
    pub pole_count: usize,
    pub pole_height: f64,
    pub pole_radius: f64,
    pub box_count: usize,
    /// (min, max) footprint side length.
    pub box_size: (f64, f64),
    pub box_height: f64,
    /// Share of points on ground, poles, boxes (normalized internally).
    pub class_shares: [f64; 3],
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        SyntheticSceneSpec {
            seed: 0,
            num_points: 10_000,
            max_range: 50.0,
            min_range: 1.0,
            ground_z: -1.73,
            pole_count: 8,
            pole_height: 3.5,
            pole_radius: 0.2,
            box_count: 6,
            box_size: (2.0, 4.5),
            box_height: 1.5,
            class_shares: [0.6, 0.15, 0.25],
        }
    }
}

impl SyntheticSceneSpec {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidValue(m.to_string()));
        if self.num_points == 0 {
            return bad("num_points must be positive");
        }
        if !(self.max_range > 0.0) || !(self.min_range >= 0.0) || self.min_range >= self.max_range
        {
            return bad("need 0 <= min_range < max_range");
        }
        if self.pole_count == 0 || self.box_count == 0 {
            return bad("scene needs at least one pole and one box");
        }
        if !(self.pole_height > 0.0 && self.pole_radius > 0.0 && self.box_height > 0.0) {
            return bad("object dimensions must be positive");
        }
        if !(self.box_size.0 > 0.0 && self.box_size.1 >= self.box_size.0) {
            return bad("box_size must be an increasing positive range");
        }
        let largest = self.box_size.1 * std::f64::consts::SQRT_2;
        if self.min_range + 4.0 + largest >= self.max_range {
            return bad("max_range too small to place objects");
        }
        if self.class_shares.iter().any(|s| !(*s > 0.0)) {
            return bad("class shares must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct BoxObject {
    center: [f64; 2],
    half: [f64; 2],
    yaw: f64,
}

impl BoxObject {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.half[0] && v.abs() <= self.half[1]
    }

    fn radius(&self) -> f64 {
        self.half[0].hypot(self.half[1])
    }
}

fn polar_sample(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 2] {
    let r = rng.gen_range(lo..hi);
    let t = rng.gen_range(-PI..PI);
    [r * t.cos(), r * t.sin()]
}

/// Picks an index with probability proportional to `weights`.
fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

/// Generates a labeled scene. The result is a pure function of `spec`.
///
/// Ground returns are uniform in radius, giving areal density proportional
/// to `1/ρ` like a rotating multi-beam sensor. Object returns are split
/// across objects in proportion to `size / distance`.
pub fn generate_synthetic_scene(spec: &SyntheticSceneSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let place_lo = spec.min_range + 2.0;

    let mut boxes: Vec<BoxObject> = Vec::with_capacity(spec.box_count);
    let mut poles: Vec<[f64; 2]> = Vec::with_capacity(spec.pole_count);
    let clear = |p: [f64; 2], r: f64, boxes: &[BoxObject], poles: &[[f64; 2]]| {
        boxes
            .iter()
            .all(|b| (p[0] - b.center[0]).hypot(p[1] - b.center[1]) > r + b.radius() + 0.5)
            && poles
                .iter()
                .all(|q| (p[0] - q[0]).hypot(p[1] - q[1]) > r + spec.pole_radius + 0.5)
    };
    for _ in 0..spec.box_count {
        let half = [
            0.5 * rng.gen_range(spec.box_size.0..=spec.box_size.1),
            0.5 * rng.gen_range(spec.box_size.0..=spec.box_size.1),
        ];
        let yaw = rng.gen_range(-PI..PI);
        let reach = half[0].hypot(half[1]);
        let mut center = polar_sample(&mut rng, place_lo + reach, spec.max_range - reach);
        for _ in 0..64 {
            if clear(center, reach, &boxes, &poles) {
                break;
            }
            center = polar_sample(&mut rng, place_lo + reach, spec.max_range - reach);
        }
        boxes.push(BoxObject { center, half, yaw });
    }
    for _ in 0..spec.pole_count {
        let r = spec.pole_radius;
        let mut center = polar_sample(&mut rng, place_lo, spec.max_range - r);
        for _ in 0..64 {
            if clear(center, r, &boxes, &poles) {
                break;
            }
            center = polar_sample(&mut rng, place_lo, spec.max_range - r);
        }
        poles.push(center);
    }

    let share_total: f64 = spec.class_shares.iter().sum();
    let n = spec.num_points;
    let n_pole = ((spec.class_shares[1] / share_total) * n as f64).round().max(1.0) as usize;
    let n_box = ((spec.class_shares[2] / share_total) * n as f64).round().max(1.0) as usize;
    let n_pole = n_pole.min(n.saturating_sub(2).max(1));
    let n_box = n_box.min(n.saturating_sub(n_pole + 1).max(1));
    let n_ground = n.saturating_sub(n_pole + n_box);

    let mut xyz = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);

    for _ in 0..n_ground {
        let mut p = polar_sample(&mut rng, spec.min_range, spec.max_range);
        for _ in 0..64 {
            if !boxes.iter().any(|b| b.contains(p[0], p[1])) {
                break;
            }
            p = polar_sample(&mut rng, spec.min_range, spec.max_range);
        }
        let z = spec.ground_z + rng.gen_range(-0.05..0.05);
        xyz.push([p[0], p[1], z]);
        labels.push(CLASS_GROUND);
    }

    let pole_w: Vec<f64> = poles.iter().map(|p| 1.0 / p[0].hypot(p[1])).collect();
    for _ in 0..n_pole {
        let c = poles[weighted_pick(&mut rng, &pole_w)];
        let a = rng.gen_range(-PI..PI);
        let r = spec.pole_radius * rng.gen_range(0.5..1.0);
        let z = spec.ground_z + rng.gen_range(0.0..spec.pole_height);
        xyz.push([c[0] + r * a.cos(), c[1] + r * a.sin(), z]);
        labels.push(CLASS_POLE);
    }

    let box_w: Vec<f64> = boxes
        .iter()
        .map(|b| 4.0 * b.half[0] * b.half[1] / b.center[0].hypot(b.center[1]))
        .collect();
    for _ in 0..n_box {
        let b = boxes[weighted_pick(&mut rng, &box_w)];
        let u = rng.gen_range(-b.half[0]..b.half[0]);
        let v = rng.gen_range(-b.half[1]..b.half[1]);
        let (s, c) = b.yaw.sin_cos();
        let x = b.center[0] + c * u - s * v;
        let y = b.center[1] + s * u + c * v;
        let z = spec.ground_z + rng.gen_range(0.1..spec.box_height);
        xyz.push([x, y, z]);
        labels.push(CLASS_BOX);
    }

    let intensity = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    PointCloud::new(xyz, intensity, Some(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_bytes(points: &[[f32; 4]]) -> Vec<u8> {
        // independent encoder: explicit bit patterns, LE byte order by hand
        let mut out = Vec::new();
        for p in points {
            for v in p {
                let bits = v.to_bits();
                out.extend_from_slice(&[
                    (bits & 0xFF) as u8,
                    ((bits >> 8) & 0xFF) as u8,
                    ((bits >> 16) & 0xFF) as u8,
                    (bits >> 24) as u8,
                ]);
            }
        }
        out
    }

    #[test]
    fn empty_bin_decodes_to_empty_cloud() {
        let cloud = decode_kitti_bin(&[]).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn two_points_decode_in_order() {
        let bytes = oracle_bytes(&[[1.0, 2.0, 3.0, 0.5], [-1.0, 0.0, 2.0, 0.25]]);
        assert_eq!(bytes.len(), 32);
        let cloud = decode_kitti_bin(&bytes).unwrap();
        assert_eq!(cloud.xyz, vec![[1.0, 2.0, 3.0], [-1.0, 0.0, 2.0]]);
        assert_eq!(cloud.intensity, vec![0.5, 0.25]);
    }

    #[test]
    fn seventeen_bytes_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, [0u8; 17]).unwrap();
        match read_kitti_bin(&path) {
            Err(Error::RecordLength { len: 17, record: 16, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_records_drop_instance_bits() {
        let raw = [(0, DEFAULT_IGNORE_ID), (5, 2)].into_iter().collect();
        let map = LabelMap::new(raw, 3, DEFAULT_IGNORE_ID, Some(vec![1, 1, 5])).unwrap_err();
        // inverse must round-trip; class 0 and 1 have no raw id here
        assert!(matches!(map, Error::Config(_)));

        let raw = [(0, DEFAULT_IGNORE_ID), (5, 2), (7, 0), (8, 1)]
            .into_iter()
            .collect();
        let map = LabelMap::new(raw, 3, DEFAULT_IGNORE_ID, None).unwrap();
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0x0000_0000u32.to_le_bytes());
        bytes.extend_from_slice(&0x000A_0005u32.to_le_bytes());
        let labels = decode_kitti_labels(&bytes, &map);
        assert_eq!(labels, vec![DEFAULT_IGNORE_ID, 2]);
    }

    #[test]
    fn six_byte_label_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.label");
        fs::write(&path, [0u8; 6]).unwrap();
        let map = LabelMap::identity(3, DEFAULT_IGNORE_ID).unwrap();
        assert!(matches!(
            read_kitti_labels(&path, &map),
            Err(Error::RecordLength { len: 6, record: 4, .. })
        ));
    }

    #[test]
    fn unknown_raw_ids_are_ignored() {
        let map = LabelMap::semantic_kitti();
        assert_eq!(map.to_train(12345), DEFAULT_IGNORE_ID);
        assert_eq!(map.to_train(10), 0);
        assert_eq!(map.to_train(252), 0);
        assert_eq!(map.to_train(81), 18);
        for t in 0..19 {
            assert_eq!(map.to_train(map.to_raw(t)), t);
        }
    }

    #[test]
    fn synthetic_scene_is_deterministic() {
        let spec = SyntheticSceneSpec::default().with_seed(42);
        let a = generate_synthetic_scene(&spec).unwrap();
        let b = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(encode_kitti_bin(&a), encode_kitti_bin(&b));
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&spec.clone().with_seed(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_scene_postconditions() {
        let spec = SyntheticSceneSpec {
            num_points: 10_000,
            max_range: 50.0,
            ..SyntheticSceneSpec::default()
        };
        let cloud = generate_synthetic_scene(&spec).unwrap();
        assert_eq!(cloud.len(), 10_000);
        assert!(cloud.xyz.iter().all(|p| p[0].hypot(p[1]) <= 50.0));
        let labels = cloud.labels.as_ref().unwrap();
        for class in 0..SYNTHETIC_CLASSES as u32 {
            assert!(labels.contains(&class), "class {class} missing");
        }
        assert!(cloud.intensity.iter().all(|i| (0.0..=1.0).contains(i)));
    }

    #[test]
    fn synthetic_density_falls_with_range() {
        let mut inner = 0usize;
        let mut outer = 0usize;
        for seed in 0..20 {
            let spec = SyntheticSceneSpec::default().with_seed(seed);
            let cloud = generate_synthetic_scene(&spec).unwrap();
            for p in &cloud.xyz {
                let r = p[0].hypot(p[1]);
                if (5.0..10.0).contains(&r) {
                    inner += 1;
                } else if (40.0..45.0).contains(&r) {
                    outer += 1;
                }
            }
        }
        let area = |a: f64, b: f64| PI * (b * b - a * a);
        let inner_density = inner as f64 / area(5.0, 10.0);
        let outer_density = outer as f64 / area(40.0, 45.0);
        assert!(
            inner_density > outer_density,
            "{inner_density} <= {outer_density}"
        );
    }

    #[test]
    fn invalid_specs_rejected() {
        let spec = SyntheticSceneSpec {
            num_points: 0,
            ..SyntheticSceneSpec::default()
        };
        assert!(generate_synthetic_scene(&spec).is_err());
        let spec = SyntheticSceneSpec {
            max_range: -1.0,
            ..SyntheticSceneSpec::default()
        };
        assert!(generate_synthetic_scene(&spec).is_err());
    }
}
