//! Run configuration: a sectioned `key = value` file (TOML syntax).
//!
//! ```toml
//! seed = 0
//!
//! [grid]
//! rho_range = [0.0, 50.0]
//! z_range = [-4.0, 2.0]
//! resolution = [480, 360, 32]
//!
//! [network]
//! num_classes = 3
//! base_channels = 8
//! num_stages = 2
//! block_variant = "asym"
//!
//! [labels]
//! preset = "identity"        # or "semantic_kitti", "custom" with [labels.map]
//!
//! [data]
//! source = "synthetic"       # or "kitti" with train/val/test scan lists
//!
//! [train]
//! epochs = 10
//! lr = 0.001
//! ```
//!
//! Every section is optional; unknown keys are rejected. Relative paths are
//! resolved against the directory of the config file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::io::{
    generate_synthetic_scene, read_kitti_bin, read_labeled_scan, LabelMap, PointCloud,
    SyntheticSceneSpec, DEFAULT_IGNORE_ID,
};
use crate::network::{BlockVariant, NetworkConfig};
use crate::partition::{CubicGridSpec, CylGridSpec};
use crate::training::{AdamConfig, LossWeights, TrainOptions};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    cubic: RawCubic,
    #[serde(default)]
    network: RawNetwork,
    #[serde(default)]
    labels: RawLabels,
    #[serde(default)]
    data: RawData,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    stats: RawStats,
    #[serde(default)]
    paths: RawPaths,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawGrid {
    rho_range: [f64; 2],
    z_range: [f64; 2],
    resolution: [usize; 3],
}

impl Default for RawGrid {
    fn default() -> Self {
        let g = CylGridSpec::default();
        RawGrid {
            rho_range: g.rho_range,
            z_range: g.z_range,
            resolution: g.resolution,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawCubic {
    x_range: [f64; 2],
    y_range: [f64; 2],
    z_range: [f64; 2],
    resolution: [usize; 3],
}

impl Default for RawCubic {
    fn default() -> Self {
        let g = CubicGridSpec::default();
        RawCubic {
            x_range: g.x_range,
            y_range: g.y_range,
            z_range: g.z_range,
            resolution: g.resolution,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawNetwork {
    num_classes: usize,
    base_channels: usize,
    num_stages: usize,
    point_mlp_widths: Vec<usize>,
    block_variant: String,
    use_intensity: bool,
}

impl Default for RawNetwork {
    fn default() -> Self {
        let n = NetworkConfig::default();
        RawNetwork {
            num_classes: n.num_classes,
            base_channels: n.base_channels,
            num_stages: n.num_stages,
            point_mlp_widths: n.point_mlp_widths,
            block_variant: n.block_variant.to_string(),
            use_intensity: n.use_intensity,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawLabels {
    preset: String,
    ignore_id: u32,
    map: BTreeMap<String, u32>,
    inverse: Option<Vec<u32>>,
    class_names: Option<Vec<String>>,
}

impl Default for RawLabels {
    fn default() -> Self {
        RawLabels {
            preset: "identity".into(),
            ignore_id: DEFAULT_IGNORE_ID,
            map: BTreeMap::new(),
            inverse: None,
            class_names: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawData {
    source: String,
    scene_seed: u64,
    train_scenes: usize,
    val_scenes: usize,
    test_scenes: usize,
    points_per_scene: usize,
    max_range: f64,
    train: Vec<PathBuf>,
    val: Vec<PathBuf>,
    test: Vec<PathBuf>,
}

impl Default for RawData {
    fn default() -> Self {
        RawData {
            source: "synthetic".into(),
            scene_seed: 0,
            train_scenes: 16,
            val_scenes: 4,
            test_scenes: 4,
            points_per_scene: 4000,
            max_range: 50.0,
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTrain {
    epochs: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    voxel_ce_weight: f64,
    voxel_lovasz_weight: f64,
    point_ce_weight: f64,
}

impl Default for RawTrain {
    fn default() -> Self {
        let a = AdamConfig::default();
        let w = LossWeights::default();
        RawTrain {
            epochs: TrainOptions::default().epochs,
            batch_size: 1,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            voxel_ce_weight: w.voxel_ce,
            voxel_lovasz_weight: w.voxel_lovasz,
            point_ce_weight: w.point_ce,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawStats {
    distance_edges: Vec<f64>,
}

impl Default for RawStats {
    fn default() -> Self {
        RawStats {
            distance_edges: (0..=10).map(|i| 5.0 * i as f64).collect(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawPaths {
    checkpoint: PathBuf,
    metrics: PathBuf,
    predictions: PathBuf,
}

impl Default for RawPaths {
    fn default() -> Self {
        RawPaths {
            checkpoint: "model.ckpt".into(),
            metrics: "metrics.csv".into(),
            predictions: "predictions".into(),
        }
    }
}

/// Where scans come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Generated scenes; split `s` scene `i` uses seed `scene_seed + s·1_000_000 + i`.
    Synthetic {
        scene_seed: u64,
        counts: [usize; 3],
        spec: SyntheticSceneSpec,
    },
    /// `.bin` scans per split; labels are looked up next to them (see [`label_path`]).
    Kitti { splits: [Vec<PathBuf>; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub predictions: PathBuf,
}

/// A validated run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkConfig,
    pub cubic: CubicGridSpec,
    pub label_map: LabelMap,
    pub class_names: Option<Vec<String>>,
    pub data: DataSource,
    pub train: TrainOptions,
    pub distance_edges: Vec<f64>,
    pub paths: RunPaths,
}

/// A scan with a stable name used for output files.
#[derive(Debug, Clone)]
pub struct NamedScan {
    pub name: String,
    pub cloud: PointCloud,
}

/// SemanticKITTI layout: `…/velodyne/N.bin` pairs with `…/labels/N.label`;
/// otherwise the label file sits next to the scan.
pub fn label_path(bin: &Path) -> PathBuf {
    let file = bin.with_extension("label");
    let name = file.file_name().map(PathBuf::from).unwrap_or_default();
    match bin.parent() {
        Some(dir) if dir.file_name().is_some_and(|n| n == "velodyne") => {
            dir.with_file_name("labels").join(name)
        }
        _ => file,
    }
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base_dir.join(p) };

        let grid = CylGridSpec::new(raw.grid.rho_range, raw.grid.z_range, raw.grid.resolution)
            .map_err(config_err)?;
        let cubic = CubicGridSpec {
            x_range: raw.cubic.x_range,
            y_range: raw.cubic.y_range,
            z_range: raw.cubic.z_range,
            resolution: raw.cubic.resolution,
        };
        cubic.validate().map_err(config_err)?;
        let network = NetworkConfig {
            num_classes: raw.network.num_classes,
            base_channels: raw.network.base_channels,
            num_stages: raw.network.num_stages,
            point_mlp_widths: raw.network.point_mlp_widths,
            block_variant: raw.network.block_variant.parse::<BlockVariant>()?,
            grid,
            use_intensity: raw.network.use_intensity,
        };
        network.validate()?;

        let l = raw.labels;
        let label_map = match l.preset.as_str() {
            "identity" => LabelMap::identity(network.num_classes, l.ignore_id)?,
            "semantic_kitti" => LabelMap::semantic_kitti(),
            "custom" => {
                let mut map = BTreeMap::new();
                for (k, v) in l.map {
                    let raw_id = k
                        .trim()
                        .parse::<u32>()
                        .map_err(|_| Error::Config(format!("label map key {k:?} is not an integer")))?;
                    map.insert(raw_id, v);
                }
                LabelMap::new(map, network.num_classes, l.ignore_id, l.inverse.clone())?
            }
            other => return Err(Error::Config(format!("unknown label preset {other:?}"))),
        };
        if l.preset != "custom" && (l.inverse.is_some()) {
            return Err(Error::Config("labels.inverse is only valid with preset = \"custom\"".into()));
        }
        if label_map.num_classes() != network.num_classes {
            return Err(Error::Config(format!(
                "label map has {} classes, network has {}",
                label_map.num_classes(),
                network.num_classes
            )));
        }
        if let Some(names) = &l.class_names {
            if names.len() != network.num_classes {
                return Err(Error::Config("class_names length differs from num_classes".into()));
            }
        }

        let d = raw.data;
        let data = match d.source.as_str() {
            "synthetic" => {
                if !(d.train.is_empty() && d.val.is_empty() && d.test.is_empty()) {
                    return Err(Error::Config("scan lists need source = \"kitti\"".into()));
                }
                let spec = SyntheticSceneSpec {
                    num_points: d.points_per_scene,
                    max_range: d.max_range,
                    ..SyntheticSceneSpec::default()
                };
                spec.validate().map_err(config_err)?;
                if network.num_classes != crate::io::SYNTHETIC_CLASSES {
                    return Err(Error::Config(format!(
                        "synthetic scenes have {} classes",
                        crate::io::SYNTHETIC_CLASSES
                    )));
                }
                DataSource::Synthetic {
                    scene_seed: d.scene_seed,
                    counts: [d.train_scenes, d.val_scenes, d.test_scenes],
                    spec,
                }
            }
            "kitti" => DataSource::Kitti {
                splits: [d.train, d.val, d.test].map(|v| v.into_iter().map(resolve).collect()),
            },
            other => return Err(Error::Config(format!("unknown data source {other:?}"))),
        };

        let t = raw.train;
        let train = TrainOptions {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: raw.seed,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            loss_weights: LossWeights {
                voxel_ce: t.voxel_ce_weight,
                voxel_lovasz: t.voxel_lovasz_weight,
                point_ce: t.point_ce_weight,
            },
            ignore_id: label_map.ignore_id(),
        };
        if train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        let a = train.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("adam needs lr > 0, betas in [0, 1), eps > 0".into()));
        }
        let w = train.loss_weights;
        if [w.voxel_ce, w.voxel_lovasz, w.point_ce].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }

        let edges = raw.stats.distance_edges;
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("stats.distance_edges must be increasing".into()));
        }

        Ok(RunConfig {
            seed: raw.seed,
            network,
            cubic,
            label_map,
            class_names: l.class_names,
            data,
            train,
            distance_edges: edges,
            paths: RunPaths {
                checkpoint: resolve(raw.paths.checkpoint),
                metrics: resolve(raw.paths.metrics),
                predictions: resolve(raw.paths.predictions),
            },
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Loads a split. With `labels`, ground truth is read too (required).
    pub fn scans(&self, split: Split, labels: bool) -> Result<Vec<NamedScan>> {
        let scans = match &self.data {
            DataSource::Synthetic {
                scene_seed,
                counts,
                spec,
            } => (0..counts[split.index()])
                .map(|i| {
                    let seed = scene_seed + split.index() as u64 * 1_000_000 + i as u64;
                    let mut cloud = generate_synthetic_scene(&spec.clone().with_seed(seed))?;
                    if !labels {
                        cloud.labels = None;
                    }
                    Ok(NamedScan {
                        name: format!("{}_{i:06}", split.as_str()),
                        cloud,
                    })
                })
                .collect::<Result<Vec<_>>>()?,
            DataSource::Kitti { splits } => splits[split.index()]
                .iter()
                .map(|bin| {
                    let cloud = if labels {
                        read_labeled_scan(bin, label_path(bin), &self.label_map)?
                    } else {
                        read_kitti_bin(bin)?
                    };
                    let name = bin
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .ok_or_else(|| Error::Config(format!("bad scan path {}", bin.display())))?;
                    Ok(NamedScan { name, cloud })
                })
                .collect::<Result<Vec<_>>>()?,
        };
        let mut seen = HashSet::new();
        for s in &scans {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate scan name {:?} in {} split", s.name, split.as_str())));
            }
        }
        Ok(scans)
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::InvalidValue(m) => Error::Config(m),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.network.grid.resolution, [480, 360, 32]);
        assert_eq!(c.cubic.resolution, [480, 480, 24]);
        assert_eq!(c.paths.checkpoint, Path::new("/base/model.ckpt"));
        assert_eq!(c.label_map.num_classes(), 3);
        assert_eq!(c.distance_edges.len(), 11);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(parse("colour = 1"), Err(Error::Config(_))));
        assert!(matches!(parse("[network]\nwidth = 3"), Err(Error::Config(_))));
        assert!(matches!(parse("[bogus]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn validation() {
        assert!(parse("[network]\nblock_variant = \"round\"").is_err());
        assert!(parse("[grid]\nresolution = [4, 4, 6]\n[network]\nnum_stages = 2").is_err());
        assert!(parse("[train]\nlr = -1.0").is_err());
        assert!(parse("[stats]\ndistance_edges = [0.0, 0.0]").is_err());
        assert!(parse("[labels]\npreset = \"semantic_kitti\"").is_err());
        assert!(parse("[data]\nsource = \"kitti\"\n[labels]\npreset = \"semantic_kitti\"\n[network]\nnum_classes = 19").is_ok());
    }

    #[test]
    fn custom_map() {
        let text = "[network]\nnum_classes = 2\n[data]\nsource = \"kitti\"\ntest = [\"seq/velodyne/000001.bin\"]\n\
                    [labels]\npreset = \"custom\"\ninverse = [40, 10]\n[labels.map]\n10 = 1\n11 = 1\n40 = 0\n";
        let c = parse(text).unwrap();
        assert_eq!(c.label_map.to_train(11), 1);
        assert_eq!(c.label_map.to_raw(1), 10);
        assert_eq!(c.label_map.to_train(7), DEFAULT_IGNORE_ID);
        let DataSource::Kitti { splits } = &c.data else { panic!() };
        assert_eq!(splits[2][0], Path::new("/base/seq/velodyne/000001.bin"));
        assert!(parse("[network]\nnum_classes = 2\n[labels]\npreset = \"custom\"\n[labels.map]\nx = 1").is_err());
    }

    #[test]
    fn label_paths() {
        assert_eq!(label_path(Path::new("s/00/velodyne/000007.bin")), Path::new("s/00/labels/000007.label"));
        assert_eq!(label_path(Path::new("scans/a.bin")), Path::new("scans/a.label"));
    }

    #[test]
    fn synthetic_splits_differ() {
        let c = parse("[data]\ntrain_scenes = 1\nval_scenes = 0\ntest_scenes = 1\npoints_per_scene = 200").unwrap();
        let tr = c.scans(Split::Train, true).unwrap();
        let te = c.scans(Split::Test, false).unwrap();
        assert_eq!(tr[0].name, "train_000000");
        assert!(te[0].cloud.labels.is_none());
        assert_ne!(tr[0].cloud.xyz, te[0].cloud.xyz);
        assert!(c.scans(Split::Val, true).unwrap().is_empty());
    }
}
