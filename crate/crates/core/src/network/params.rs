//! Layer parameter collections and named-tensor traversal.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::sparse::{ConvParams, NormParams, TensorContainer, TensorEntry};

use super::config::{BlockVariant, NetworkConfig};

/// Whether a tensor is updated by the optimizer or carried as state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Trainable,
    Buffer,
}

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    pub slot: Slot,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub slot: Slot,
}

/// Enumerates named tensors in a fixed order.
pub trait ParamSet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        v
    }

    /// Number of trainable scalars.
    fn trainable_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.slot == Slot::Trainable)
            .map(|t| t.data.len())
            .sum()
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! push_arrays {
    ($out:ident, $prefix:ident, $slot:expr, $method:ident, $($field:expr => $name:literal),+ $(,)?) => {
        $(
            {
                let shape = $field.shape().to_vec();
                $out.push(crate::network::params::param_entry(
                    join($prefix, $name),
                    shape,
                    $field.$method().expect("standard layout"),
                    $slot,
                ));
            }
        )+
    };
}

pub(crate) trait Entry<'a, D> {
    fn make(name: String, shape: Vec<usize>, data: D, slot: Slot) -> Self;
}

impl<'a> Entry<'a, &'a [f64]> for ParamRef<'a> {
    fn make(name: String, shape: Vec<usize>, data: &'a [f64], slot: Slot) -> Self {
        ParamRef {
            name,
            shape,
            data,
            slot,
        }
    }
}

impl<'a> Entry<'a, &'a mut [f64]> for ParamMut<'a> {
    fn make(name: String, shape: Vec<usize>, data: &'a mut [f64], slot: Slot) -> Self {
        ParamMut {
            name,
            shape,
            data,
            slot,
        }
    }
}

pub(crate) fn param_entry<'a, D, E: Entry<'a, D>>(name: String, shape: Vec<usize>, data: D, slot: Slot) -> E {
    E::make(name, shape, data, slot)
}

impl ParamSet for ConvParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_arrays!(out, prefix, Slot::Trainable, as_slice, self.weights => "weight", self.bias => "bias");
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_arrays!(out, prefix, Slot::Trainable, as_slice_mut, self.weights => "weight", self.bias => "bias");
    }
}

impl ParamSet for NormParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_arrays!(out, prefix, Slot::Trainable, as_slice, self.scale => "scale", self.shift => "shift");
        push_arrays!(out, prefix, Slot::Buffer, as_slice, self.running_mean => "running_mean", self.running_var => "running_var");
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_arrays!(out, prefix, Slot::Trainable, as_slice_mut, self.scale => "scale", self.shift => "shift");
        push_arrays!(out, prefix, Slot::Buffer, as_slice_mut, self.running_mean => "running_mean", self.running_var => "running_var");
    }
}

/// Dense affine layer `y = x · weight + bias`, weight `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearParams {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        LinearParams {
            weight: Array2::zeros((c_in, c_out)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (c_in + c_out) as f64).sqrt();
        LinearParams {
            weight: Array2::from_shape_fn((c_in, c_out), |_| rng.gen_range(-bound..bound)),
            bias: Array1::zeros(c_out),
        }
    }
}

impl ParamSet for LinearParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        push_arrays!(out, prefix, Slot::Trainable, as_slice, self.weight => "weight", self.bias => "bias");
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        push_arrays!(out, prefix, Slot::Trainable, as_slice_mut, self.weight => "weight", self.bias => "bias");
    }
}

/// A convolution followed by normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBn {
    pub kernel: [usize; 3],
    pub conv: ConvParams,
    pub norm: NormParams,
}

impl ConvBn {
    pub fn init<R: Rng + ?Sized>(kernel: [usize; 3], c_in: usize, c_out: usize, rng: &mut R) -> Self {
        ConvBn {
            kernel,
            conv: ConvParams::init(kernel.iter().product(), c_in, c_out, rng),
            norm: NormParams::new(c_out),
        }
    }
}

impl ParamSet for ConvBn {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.conv.collect(&join(prefix, "conv"), out);
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.conv.collect_mut(&join(prefix, "conv"), out);
        self.norm.collect_mut(&join(prefix, "norm"), out);
    }
}

/// Residual block of any variant.
///
/// Two-branch variants store `[a0, a1, b0, b1]`; the regular variant stores
/// its two 3×3×3 units and, when widths differ, a 1×1×1 projection for the
/// residual path.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams {
    pub variant: BlockVariant,
    pub units: Vec<ConvBn>,
    pub projection: Option<ConvBn>,
}

impl ResBlockParams {
    pub fn init<R: Rng + ?Sized>(variant: BlockVariant, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        match variant {
            BlockVariant::Regular => ResBlockParams {
                variant,
                units: vec![
                    ConvBn::init([3, 3, 3], c_in, c_out, rng),
                    ConvBn::init([3, 3, 3], c_out, c_out, rng),
                ],
                projection: (c_in != c_out).then(|| ConvBn::init([1, 1, 1], c_in, c_out, rng)),
            },
            BlockVariant::Asym | BlockVariant::Asym1d => {
                let [ka0, ka1, kb0, kb1] = variant.branch_kernels();
                ResBlockParams {
                    variant,
                    units: vec![
                        ConvBn::init(ka0, c_in, c_out, rng),
                        ConvBn::init(ka1, c_out, c_out, rng),
                        ConvBn::init(kb0, c_in, c_out, rng),
                        ConvBn::init(kb1, c_out, c_out, rng),
                    ],
                    projection: None,
                }
            }
        }
    }

    /// Convolution weights in the main path (projection and bias excluded).
    pub fn conv_weight_count(&self) -> usize {
        self.units.iter().map(|u| u.conv.weight_count()).sum()
    }
}

impl ParamSet for ResBlockParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, u) in self.units.iter().enumerate() {
            u.collect(&join(prefix, &format!("unit{i}")), out);
        }
        if let Some(p) = &self.projection {
            p.collect(&join(prefix, "proj"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, u) in self.units.iter_mut().enumerate() {
            u.collect_mut(&join(prefix, &format!("unit{i}")), out);
        }
        if let Some(p) = &mut self.projection {
            p.collect_mut(&join(prefix, "proj"), out);
        }
    }
}

/// Residual block then a stride-2 3×3×3 convolution doubling the width.
#[derive(Debug, Clone, PartialEq)]
pub struct DownParams {
    pub res: ResBlockParams,
    pub down: ConvBn,
}

/// Transposed 3×3×3 convolution back to the skip sites, then a fusion block
/// over `[upsampled | skip]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpParams {
    pub up: ConvBn,
    pub fuse: ResBlockParams,
}

/// Three rank-1 gates along radius, azimuth and height.
#[derive(Debug, Clone, PartialEq)]
pub struct DdcmParams {
    pub gates: Vec<ConvBn>,
}

pub const DDCM_KERNELS: [[usize; 3]; 3] = [[3, 1, 1], [1, 3, 1], [1, 1, 3]];

impl DdcmParams {
    pub fn init<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        DdcmParams {
            gates: DDCM_KERNELS
                .iter()
                .map(|&k| ConvBn::init(k, channels, channels, rng))
                .collect(),
        }
    }
}

/// Two-layer point-wise refinement head.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineParams {
    pub hidden: LinearParams,
    pub out: LinearParams,
}

/// Every tensor of the segmentation network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub mlp: Vec<(LinearParams, NormParams)>,
    pub down: Vec<DownParams>,
    pub ddcm: DdcmParams,
    /// `up[i]` restores stage `i` and pairs with `down[i]`.
    pub up: Vec<UpParams>,
    pub head: ConvParams,
    pub refine: RefineParams,
}

impl ParamSet for DownParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.res.collect(&join(prefix, "res"), out);
        self.down.collect(&join(prefix, "down"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.res.collect_mut(&join(prefix, "res"), out);
        self.down.collect_mut(&join(prefix, "down"), out);
    }
}

impl ParamSet for UpParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.up.collect(&join(prefix, "up"), out);
        self.fuse.collect(&join(prefix, "fuse"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.up.collect_mut(&join(prefix, "up"), out);
        self.fuse.collect_mut(&join(prefix, "fuse"), out);
    }
}

impl ParamSet for DdcmParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, g) in self.gates.iter().enumerate() {
            g.collect(&join(prefix, &format!("gate{i}")), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, g) in self.gates.iter_mut().enumerate() {
            g.collect_mut(&join(prefix, &format!("gate{i}")), out);
        }
    }
}

impl ParamSet for RefineParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.hidden.collect(&join(prefix, "hidden"), out);
        self.out.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.hidden.collect_mut(&join(prefix, "hidden"), out);
        self.out.collect_mut(&join(prefix, "out"), out);
    }
}

impl ParamSet for ModelParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, (lin, norm)) in self.mlp.iter().enumerate() {
            lin.collect(&join(prefix, &format!("mlp.{i}.linear")), out);
            norm.collect(&join(prefix, &format!("mlp.{i}.norm")), out);
        }
        for (i, d) in self.down.iter().enumerate() {
            d.collect(&join(prefix, &format!("down.{i}")), out);
        }
        self.ddcm.collect(&join(prefix, "ddcm"), out);
        for (i, u) in self.up.iter().enumerate() {
            u.collect(&join(prefix, &format!("up.{i}")), out);
        }
        self.head.collect(&join(prefix, "head"), out);
        self.refine.collect(&join(prefix, "refine"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, (lin, norm)) in self.mlp.iter_mut().enumerate() {
            lin.collect_mut(&join(prefix, &format!("mlp.{i}.linear")), out);
            norm.collect_mut(&join(prefix, &format!("mlp.{i}.norm")), out);
        }
        for (i, d) in self.down.iter_mut().enumerate() {
            d.collect_mut(&join(prefix, &format!("down.{i}")), out);
        }
        self.ddcm.collect_mut(&join(prefix, "ddcm"), out);
        for (i, u) in self.up.iter_mut().enumerate() {
            u.collect_mut(&join(prefix, &format!("up.{i}")), out);
        }
        self.head.collect_mut(&join(prefix, "head"), out);
        self.refine.collect_mut(&join(prefix, "refine"), out);
    }
}

impl ModelParams {
    /// Fresh parameters for `config`.
    pub fn init<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Self {
        let c0 = config.base_channels;
        let k = config.num_classes;
        let mut widths = vec![super::features::POINT_FEATURES];
        widths.extend(&config.point_mlp_widths);
        widths.push(c0);
        let mlp = widths
            .windows(2)
            .map(|w| (LinearParams::init(w[0], w[1], rng), NormParams::new(w[1])))
            .collect();
        let down = (0..config.num_stages)
            .map(|i| {
                let c = config.stage_channels(i);
                DownParams {
                    res: ResBlockParams::init(config.block_variant, c, c, rng),
                    down: ConvBn::init([3, 3, 3], c, 2 * c, rng),
                }
            })
            .collect();
        let ddcm = DdcmParams::init(config.stage_channels(config.num_stages), rng);
        let up = (0..config.num_stages)
            .map(|i| {
                let c = config.stage_channels(i);
                UpParams {
                    up: ConvBn::init([3, 3, 3], 2 * c, c, rng),
                    fuse: ResBlockParams::init(config.block_variant, 2 * c, c, rng),
                }
            })
            .collect();
        ModelParams {
            mlp,
            down,
            ddcm,
            up,
            head: ConvParams::init(1, c0, k, rng),
            refine: RefineParams {
                hidden: LinearParams::init(2 * c0, config.refine_hidden(), rng),
                out: LinearParams::init(config.refine_hidden(), k, rng),
            },
        }
    }

    /// Same structure with every tensor zeroed (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(0.0);
        }
        z
    }

    /// Adds `other`'s trainable tensors into `self`.
    pub fn add_assign(&mut self, other: &ModelParams) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            if dst.slot == Slot::Trainable {
                for (a, b) in dst.data.iter_mut().zip(s.data) {
                    *a += b;
                }
            }
        }
    }

    pub fn to_container(&self, header: String) -> TensorContainer {
        TensorContainer {
            header,
            entries: self
                .tensors()
                .into_iter()
                .map(|t| TensorEntry {
                    name: t.name,
                    shape: t.shape,
                    data: t.data.to_vec(),
                })
                .collect(),
        }
    }

    /// Loads tensors by name into a structure built from `config`.
    pub fn from_container(config: &NetworkConfig, container: &TensorContainer) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut params = ModelParams::init(config, &mut rng);
        let expected = params.tensors().len();
        if container.entries.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, {expected} expected",
                container.entries.len()
            )));
        }
        for t in params.tensors_mut() {
            let e = container
                .get(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", t.name)))?;
            if e.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, expected {:?}",
                    t.name, e.shape, t.shape
                )));
            }
            t.data.copy_from_slice(&e.data);
        }
        Ok(params)
    }
}
