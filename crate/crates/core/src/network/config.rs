use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::partition::CylGridSpec;

/// Residual block family used throughout the encoder/decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockVariant {
    /// Two 3×3×3 convolutions with an identity (or projected) shortcut.
    Regular,
    /// Two branches of height-free 1D kernels `(1,3,1)` and `(3,1,1)`.
    Asym1d,
    /// Two branches stacking `(1,3,3)` and `(3,1,3)` in opposite orders.
    Asym,
}

impl BlockVariant {
    /// Kernels of the two-branch variants in `[a0, a1, b0, b1]` order;
    /// the regular variant returns its 3×3×3 kernel four times.
    pub fn branch_kernels(self) -> [[usize; 3]; 4] {
        match self {
            BlockVariant::Asym => [[1, 3, 3], [3, 1, 3], [3, 1, 3], [1, 3, 3]],
            BlockVariant::Asym1d => [[1, 3, 1], [3, 1, 1], [3, 1, 1], [1, 3, 1]],
            BlockVariant::Regular => [[3, 3, 3]; 4],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockVariant::Regular => "regular",
            BlockVariant::Asym1d => "asym1d",
            BlockVariant::Asym => "asym",
        }
    }
}

impl fmt::Display for BlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BlockVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(BlockVariant::Regular),
            "asym1d" => Ok(BlockVariant::Asym1d),
            "asym" => Ok(BlockVariant::Asym),
            other => Err(Error::Config(format!("unknown block variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub num_stages: usize,
    /// Hidden widths of the point MLP; its output width is `base_channels`.
    pub point_mlp_widths: Vec<usize>,
    pub block_variant: BlockVariant,
    pub grid: CylGridSpec,
    /// When false the intensity input column is zeroed.
    pub use_intensity: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_classes: 3,
            base_channels: 8,
            num_stages: 2,
            point_mlp_widths: vec![16],
            block_variant: BlockVariant::Asym,
            grid: CylGridSpec::default(),
            use_intensity: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.base_channels == 0 || self.num_stages == 0 {
            return Err(Error::Config("base_channels and num_stages must be positive".into()));
        }
        if self.point_mlp_widths.contains(&0) {
            return Err(Error::Config("point MLP widths must be positive".into()));
        }
        self.grid.validate()?;
        let factor = 1usize << self.num_stages;
        if !self.grid.resolution[2].is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "grid height {} not divisible by 2^{}",
                self.grid.resolution[2], self.num_stages
            )));
        }
        Ok(())
    }

    /// Feature width at encoder stage `i` (stage 0 is full resolution).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    pub fn refine_hidden(&self) -> usize {
        2 * self.num_classes
    }

    /// Text header stored alongside checkpoint tensors.
    pub fn to_header(&self) -> String {
        let g = &self.grid;
        let widths: Vec<String> = self.point_mlp_widths.iter().map(|w| w.to_string()).collect();
        format!(
            "num_classes = {}\nbase_channels = {}\nnum_stages = {}\npoint_mlp_widths = {}\nblock_variant = {}\nuse_intensity = {}\nrho_range = {} {}\nz_range = {} {}\nresolution = {} {} {}\n",
            self.num_classes,
            self.base_channels,
            self.num_stages,
            widths.join(" "),
            self.block_variant,
            self.use_intensity,
            g.rho_range[0],
            g.rho_range[1],
            g.z_range[0],
            g.z_range[1],
            g.resolution[0],
            g.resolution[1],
            g.resolution[2],
        )
    }

    pub fn from_header(text: &str) -> Result<Self> {
        let mut cfg = NetworkConfig::default();
        let mut seen = 0usize;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            let v = v.trim();
            let nums = |n: usize| -> Result<Vec<f64>> {
                let parsed: std::result::Result<Vec<f64>, _> =
                    v.split_whitespace().map(str::parse::<f64>).collect();
                match parsed {
                    Ok(p) if p.len() == n => Ok(p),
                    _ => Err(Error::Checkpoint(format!("bad header value {line:?}"))),
                }
            };
            let int = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad header value {line:?}")))
            };
            match k.trim() {
                "num_classes" => cfg.num_classes = int()?,
                "base_channels" => cfg.base_channels = int()?,
                "num_stages" => cfg.num_stages = int()?,
                "point_mlp_widths" => {
                    cfg.point_mlp_widths = v
                        .split_whitespace()
                        .map(|w| w.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Checkpoint(format!("bad header value {line:?}")))?
                }
                "block_variant" => cfg.block_variant = v.parse()?,
                "use_intensity" => {
                    cfg.use_intensity = v
                        .parse()
                        .map_err(|_| Error::Checkpoint(format!("bad header value {line:?}")))?
                }
                "rho_range" => {
                    let p = nums(2)?;
                    cfg.grid.rho_range = [p[0], p[1]];
                }
                "z_range" => {
                    let p = nums(2)?;
                    cfg.grid.z_range = [p[0], p[1]];
                }
                "resolution" => {
                    let p = nums(3)?;
                    cfg.grid.resolution = [p[0] as usize, p[1] as usize, p[2] as usize];
                }
                other => return Err(Error::Checkpoint(format!("unknown header key {other:?}"))),
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(Error::Checkpoint(format!("header has {seen} of 9 keys")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
