//! Network blocks with explicit backward passes.
//!
//! Every forward returns a tape holding what its backward needs. Backward
//! functions return the input gradient and accumulate parameter gradients
//! into a structure shaped like the parameters.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};
use crate::sparse::ops::{batch_norm_features, leaky_relu_features, sigmoid_backward, sigmoid_features};
use crate::sparse::{
    batch_norm_backward, build_rulebook, inverse_conv, inverse_conv_backward, leaky_relu_backward,
    sparse_conv_backward, sparse_conv_forward, BatchNormCache, Coord, KernelSpec, Rulebook,
    SparseTensor, LEAKY_SLOPE,
};

use super::config::BlockVariant;
use super::features::{linear_backward, linear_forward};
use super::params::{ConvBn, DdcmParams, DownParams, RefineParams, ResBlockParams, UpParams};
use super::Mode;

/// Submanifold rulebooks for one active set, keyed by kernel size.
#[derive(Debug, Clone)]
pub struct StageRules {
    pub coords: Arc<[Coord]>,
    pub shape: [usize; 3],
    rules: HashMap<[usize; 3], Rulebook>,
}

impl StageRules {
    pub fn new(coords: Arc<[Coord]>, shape: [usize; 3]) -> Self {
        StageRules {
            coords,
            shape,
            rules: HashMap::new(),
        }
    }

    /// Rules for every kernel in `kernels` over the sites of `x`.
    pub fn for_tensor(x: &SparseTensor, kernels: &[[usize; 3]]) -> Result<Self> {
        let mut r = StageRules::new(x.shared_coords().clone(), x.shape());
        for &k in kernels {
            r.ensure(k)?;
        }
        Ok(r)
    }

    pub fn ensure(&mut self, kernel: [usize; 3]) -> Result<()> {
        if !self.rules.contains_key(&kernel) {
            let rb = build_rulebook(&self.coords, self.shape, KernelSpec::submanifold(kernel))?;
            self.rules.insert(kernel, rb);
        }
        Ok(())
    }

    pub fn get(&self, kernel: [usize; 3]) -> Result<&Rulebook> {
        self.rules
            .get(&kernel)
            .ok_or_else(|| Error::InvalidValue(format!("no rulebook for kernel {kernel:?}")))
    }
}

/// How a unit's convolution is routed.
#[derive(Debug, Clone, Copy)]
pub enum Route<'a> {
    Forward(&'a Rulebook),
    Inverse(&'a Rulebook),
}

#[derive(Debug, Clone)]
pub struct UnitTape {
    input: SparseTensor,
    norm: BatchNormCache,
    /// Normalized output before the activation, when one is applied.
    pre_act: Option<Array2<f64>>,
}

/// Convolution → normalization → optional LeakyReLU.
pub fn unit_forward(
    x: &SparseTensor,
    p: &ConvBn,
    route: Route<'_>,
    act: bool,
    mode: Mode,
) -> Result<(SparseTensor, UnitTape)> {
    let conv = match route {
        Route::Forward(rb) => sparse_conv_forward(x, &p.conv, rb)?,
        Route::Inverse(rb) => inverse_conv(x, &p.conv, rb)?,
    };
    let (y, norm) = batch_norm_features(conv.features(), &p.norm, mode.is_training())?;
    let (out, pre_act) = if act {
        (leaky_relu_features(&y, LEAKY_SLOPE), Some(y))
    } else {
        (y, None)
    };
    let tape = UnitTape {
        input: x.clone(),
        norm,
        pre_act,
    };
    Ok((conv.with_features(out)?, tape))
}

pub fn unit_backward(
    p: &ConvBn,
    route: Route<'_>,
    tape: &UnitTape,
    grad_out: &Array2<f64>,
    grads: &mut ConvBn,
) -> Result<Array2<f64>> {
    let g = match &tape.pre_act {
        Some(y) => leaky_relu_backward(y, grad_out, LEAKY_SLOPE),
        None => grad_out.clone(),
    };
    let (g_conv, g_scale, g_shift) = batch_norm_backward(&tape.norm, &p.norm, &g);
    grads.norm.scale += &g_scale;
    grads.norm.shift += &g_shift;
    let cg = match route {
        Route::Forward(rb) => sparse_conv_backward(&tape.input, &p.conv, rb, &g_conv)?,
        Route::Inverse(rb) => inverse_conv_backward(&tape.input, &p.conv, rb, &g_conv)?,
    };
    grads.conv.weights += &cg.weights;
    grads.conv.bias += &cg.bias;
    Ok(cg.input)
}

fn fold_unit(p: &mut ConvBn, tape: &UnitTape) {
    if let Some((mean, var)) = &tape.norm.batch_stats {
        p.norm.update_running(mean, var);
    }
}

#[derive(Debug, Clone)]
pub struct ResTape {
    units: Vec<UnitTape>,
    projection: Option<UnitTape>,
    /// Pre-activation sum.
    sum: Array2<f64>,
}

/// Residual block of the variant stored in `p`. Sites are preserved.
///
/// Two-branch variants compute `act(BN(k1(act(BN(k0 x)))) + BN(k0'(act(BN(k1' x)))))`;
/// the regular variant computes `act(x + BN(k(act(BN(k x)))))` with a
/// projected shortcut when widths differ.
pub fn res_block(
    x: &SparseTensor,
    p: &ResBlockParams,
    rules: &StageRules,
    mode: Mode,
) -> Result<(SparseTensor, ResTape)> {
    let rule = |u: &ConvBn| rules.get(u.kernel).map(Route::Forward);
    match p.variant {
        BlockVariant::Regular => {
            let (h, t0) = unit_forward(x, &p.units[0], rule(&p.units[0])?, true, mode)?;
            let (h, t1) = unit_forward(&h, &p.units[1], rule(&p.units[1])?, false, mode)?;
            let (shortcut, projection) = match &p.projection {
                Some(proj) => {
                    let (s, t) = unit_forward(x, proj, rule(proj)?, false, mode)?;
                    (s.into_features(), Some(t))
                }
                None => {
                    if x.channels() != h.channels() {
                        return Err(Error::Shape(format!(
                            "identity shortcut from {} to {} channels",
                            x.channels(),
                            h.channels()
                        )));
                    }
                    (x.features().clone(), None)
                }
            };
            let sum = h.features() + &shortcut;
            let out = h.with_features(leaky_relu_features(&sum, LEAKY_SLOPE))?;
            Ok((
                out,
                ResTape {
                    units: vec![t0, t1],
                    projection,
                    sum,
                },
            ))
        }
        BlockVariant::Asym | BlockVariant::Asym1d => {
            let (a, ta0) = unit_forward(x, &p.units[0], rule(&p.units[0])?, true, mode)?;
            let (a, ta1) = unit_forward(&a, &p.units[1], rule(&p.units[1])?, false, mode)?;
            let (b, tb0) = unit_forward(x, &p.units[2], rule(&p.units[2])?, true, mode)?;
            let (b, tb1) = unit_forward(&b, &p.units[3], rule(&p.units[3])?, false, mode)?;
            let sum = a.features() + b.features();
            let out = a.with_features(leaky_relu_features(&sum, LEAKY_SLOPE))?;
            Ok((
                out,
                ResTape {
                    units: vec![ta0, ta1, tb0, tb1],
                    projection: None,
                    sum,
                },
            ))
        }
    }
}

pub fn res_block_backward(
    p: &ResBlockParams,
    rules: &StageRules,
    tape: &ResTape,
    grad_out: &Array2<f64>,
    grads: &mut ResBlockParams,
) -> Result<Array2<f64>> {
    let g_sum = leaky_relu_backward(&tape.sum, grad_out, LEAKY_SLOPE);
    let rule = |u: &ConvBn| rules.get(u.kernel).map(Route::Forward);
    match p.variant {
        BlockVariant::Regular => {
            let g = unit_backward(&p.units[1], rule(&p.units[1])?, &tape.units[1], &g_sum, &mut grads.units[1])?;
            let mut g_x = unit_backward(&p.units[0], rule(&p.units[0])?, &tape.units[0], &g, &mut grads.units[0])?;
            match (&p.projection, &tape.projection, &mut grads.projection) {
                (Some(proj), Some(t), Some(gp)) => {
                    g_x += &unit_backward(proj, rule(proj)?, t, &g_sum, gp)?;
                }
                _ => g_x += &g_sum,
            }
            Ok(g_x)
        }
        BlockVariant::Asym | BlockVariant::Asym1d => {
            let (ga, gb) = grads.units.split_at_mut(2);
            let g = unit_backward(&p.units[1], rule(&p.units[1])?, &tape.units[1], &g_sum, &mut ga[1])?;
            let mut g_x = unit_backward(&p.units[0], rule(&p.units[0])?, &tape.units[0], &g, &mut ga[0])?;
            let g = unit_backward(&p.units[3], rule(&p.units[3])?, &tape.units[3], &g_sum, &mut gb[1])?;
            g_x += &unit_backward(&p.units[2], rule(&p.units[2])?, &tape.units[2], &g, &mut gb[0])?;
            Ok(g_x)
        }
    }
}

pub fn fold_res_block(p: &mut ResBlockParams, tape: &ResTape) {
    for (u, t) in p.units.iter_mut().zip(&tape.units) {
        fold_unit(u, t);
    }
    if let (Some(proj), Some(t)) = (&mut p.projection, &tape.projection) {
        fold_unit(proj, t);
    }
}

fn expect_variant(p: &ResBlockParams, v: BlockVariant) -> Result<()> {
    if p.variant != v {
        return Err(Error::InvalidValue(format!(
            "expected {v} block parameters, got {}",
            p.variant
        )));
    }
    Ok(())
}

/// Two stacked asymmetric kernels per branch: `(1,3,3)→(3,1,3)` and `(3,1,3)→(1,3,3)`.
pub fn asym_res_block(x: &SparseTensor, p: &ResBlockParams, rules: &StageRules, mode: Mode) -> Result<(SparseTensor, ResTape)> {
    expect_variant(p, BlockVariant::Asym)?;
    res_block(x, p, rules, mode)
}

pub fn regular_res_block(x: &SparseTensor, p: &ResBlockParams, rules: &StageRules, mode: Mode) -> Result<(SparseTensor, ResTape)> {
    expect_variant(p, BlockVariant::Regular)?;
    res_block(x, p, rules, mode)
}

/// Branch topology of the asymmetric block with height-free `(1,3,1)`/`(3,1,1)` kernels.
pub fn asym1d_res_block(x: &SparseTensor, p: &ResBlockParams, rules: &StageRules, mode: Mode) -> Result<(SparseTensor, ResTape)> {
    expect_variant(p, BlockVariant::Asym1d)?;
    res_block(x, p, rules, mode)
}

#[derive(Debug, Clone)]
pub struct DownTape {
    res: ResTape,
    down: UnitTape,
}

/// Residual block, then the strided 3×3×3 convolution (stride 2 per axis).
/// Returns the downsampled tensor, the block output (the skip), and the
/// strided rulebook for the paired upsample.
pub fn asym_down_block(
    x: &SparseTensor,
    p: &DownParams,
    rules: &StageRules,
    stride_rules: &Rulebook,
    mode: Mode,
) -> Result<(SparseTensor, SparseTensor, DownTape)> {
    let (skip, res) = res_block(x, &p.res, rules, mode)?;
    let (out, down) = unit_forward(&skip, &p.down, Route::Forward(stride_rules), true, mode)?;
    Ok((out, skip, DownTape { res, down }))
}

/// Strided rulebook used by a downsample layer at these sites.
pub fn downsample_rules(coords: &Arc<[Coord]>, shape: [usize; 3]) -> Result<Rulebook> {
    build_rulebook(coords, shape, KernelSpec::strided([3, 3, 3], [2, 2, 2]))
}

/// `grad_skip` is the gradient arriving at the block output from the decoder.
pub fn asym_down_block_backward(
    p: &DownParams,
    rules: &StageRules,
    stride_rules: &Rulebook,
    tape: &DownTape,
    grad_out: &Array2<f64>,
    grad_skip: &Array2<f64>,
    grads: &mut DownParams,
) -> Result<Array2<f64>> {
    let mut g = unit_backward(&p.down, Route::Forward(stride_rules), &tape.down, grad_out, &mut grads.down)?;
    g += grad_skip;
    res_block_backward(&p.res, rules, &tape.res, &g, &mut grads.res)
}

pub fn fold_down(p: &mut DownParams, tape: &DownTape) {
    fold_res_block(&mut p.res, &tape.res);
    fold_unit(&mut p.down, &tape.down);
}

#[derive(Debug, Clone)]
pub struct UpTape {
    up: UnitTape,
    fuse: ResTape,
    up_channels: usize,
}

/// Inverse convolution back to the skip sites, concatenation with the skip
/// features, and a fusion block back to the skip width.
pub fn asym_up_block(
    x: &SparseTensor,
    skip: &SparseTensor,
    stored: &Rulebook,
    p: &UpParams,
    rules: &StageRules,
    mode: Mode,
) -> Result<(SparseTensor, UpTape)> {
    if skip.coords() != stored.in_coords.as_ref() {
        return Err(Error::CoordMismatch(
            "skip sites differ from the stored rulebook's input sites".into(),
        ));
    }
    let (up, up_tape) = unit_forward(x, &p.up, Route::Inverse(stored), true, mode)?;
    let up_channels = up.channels();
    let joined = crate::sparse::concat_features(&up, skip)?;
    let (out, fuse) = res_block(&joined, &p.fuse, rules, mode)?;
    Ok((
        out,
        UpTape {
            up: up_tape,
            fuse,
            up_channels,
        },
    ))
}

/// Returns `(grad_x, grad_skip)`.
pub fn asym_up_block_backward(
    p: &UpParams,
    stored: &Rulebook,
    rules: &StageRules,
    tape: &UpTape,
    grad_out: &Array2<f64>,
    grads: &mut UpParams,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let g_joined = res_block_backward(&p.fuse, rules, &tape.fuse, grad_out, &mut grads.fuse)?;
    let g_up = g_joined.slice(s![.., ..tape.up_channels]).to_owned();
    let g_skip = g_joined.slice(s![.., tape.up_channels..]).to_owned();
    let g_x = unit_backward(&p.up, Route::Inverse(stored), &tape.up, &g_up, &mut grads.up)?;
    Ok((g_x, g_skip))
}

pub fn fold_up(p: &mut UpParams, tape: &UpTape) {
    fold_unit(&mut p.up, &tape.up);
    fold_res_block(&mut p.fuse, &tape.fuse);
}

#[derive(Debug, Clone)]
pub struct DdcmTape {
    input: Array2<f64>,
    units: Vec<UnitTape>,
    gates: Vec<Array2<f64>>,
    gate_sum: Array2<f64>,
}

/// Rank-1 context: `x ⊙ (σ(BN(k_h x)) + σ(BN(k_w x)) + σ(BN(k_l x)))`.
pub fn ddcm(x: &SparseTensor, p: &DdcmParams, rules: &StageRules, mode: Mode) -> Result<(SparseTensor, DdcmTape)> {
    let mut units = Vec::with_capacity(3);
    let mut gates = Vec::with_capacity(3);
    let mut gate_sum = Array2::zeros(x.features().raw_dim());
    for g in &p.gates {
        let (z, t) = unit_forward(x, g, Route::Forward(rules.get(g.kernel)?), false, mode)?;
        if z.channels() != x.channels() {
            return Err(Error::Shape(format!(
                "gate width {} differs from input width {}",
                z.channels(),
                x.channels()
            )));
        }
        let s = sigmoid_features(z.features());
        gate_sum += &s;
        units.push(t);
        gates.push(s);
    }
    let out = x.with_features(x.features() * &gate_sum)?;
    Ok((
        out,
        DdcmTape {
            input: x.features().clone(),
            units,
            gates,
            gate_sum,
        },
    ))
}

pub fn ddcm_backward(
    p: &DdcmParams,
    rules: &StageRules,
    tape: &DdcmTape,
    grad_out: &Array2<f64>,
    grads: &mut DdcmParams,
) -> Result<Array2<f64>> {
    let mut g_x = grad_out * &tape.gate_sum;
    let g_gate = grad_out * &tape.input;
    for (i, g) in p.gates.iter().enumerate() {
        let g_z = sigmoid_backward(&tape.gates[i], &g_gate);
        g_x += &unit_backward(g, Route::Forward(rules.get(g.kernel)?), &tape.units[i], &g_z, &mut grads.gates[i])?;
    }
    Ok(g_x)
}

pub fn fold_ddcm(p: &mut DdcmParams, tape: &DdcmTape) {
    for (g, t) in p.gates.iter_mut().zip(&tape.units) {
        fold_unit(g, t);
    }
}

#[derive(Debug, Clone)]
pub struct RefineTape {
    input: Array2<f64>,
    hidden: Array2<f64>,
    voxel_channels: usize,
}

/// Per point: gather its cell's voxel features, append the point's own
/// features, and map through `linear → LeakyReLU → linear` to class logits.
pub fn point_refine(
    voxel_features: &Array2<f64>,
    point_features: &Array2<f64>,
    point_site: &[usize],
    p: &RefineParams,
) -> Result<(Array2<f64>, RefineTape)> {
    if point_site.len() != point_features.nrows() {
        return Err(Error::Shape(format!(
            "{} mapped points, {} feature rows",
            point_site.len(),
            point_features.nrows()
        )));
    }
    if let Some(&bad) = point_site.iter().find(|&&s| s >= voxel_features.nrows()) {
        return Err(Error::Shape(format!("point mapped to missing site {bad}")));
    }
    let gathered = voxel_features.select(Axis(0), point_site);
    let input = concatenate(Axis(1), &[gathered.view(), point_features.view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    let hidden = linear_forward(&input, &p.hidden)?;
    let logits = linear_forward(&leaky_relu_features(&hidden, LEAKY_SLOPE), &p.out)?;
    Ok((
        logits,
        RefineTape {
            input,
            hidden,
            voxel_channels: voxel_features.ncols(),
        },
    ))
}

/// Returns `(grad_voxel_features, grad_point_features)`.
pub fn point_refine_backward(
    p: &RefineParams,
    tape: &RefineTape,
    point_site: &[usize],
    num_sites: usize,
    grad_out: &Array2<f64>,
    grads: &mut RefineParams,
) -> (Array2<f64>, Array2<f64>) {
    let act = leaky_relu_features(&tape.hidden, LEAKY_SLOPE);
    let g_act = linear_backward(&act, &p.out, grad_out, &mut grads.out);
    let g_hidden = leaky_relu_backward(&tape.hidden, &g_act, LEAKY_SLOPE);
    let g_in = linear_backward(&tape.input, &p.hidden, &g_hidden, &mut grads.hidden);
    let c = tape.voxel_channels;
    let mut g_vox = Array2::zeros((num_sites, c));
    for (i, &s) in point_site.iter().enumerate() {
        let mut row = g_vox.row_mut(s);
        row += &g_in.slice(s![i, ..c]);
    }
    let g_pts = g_in.slice(s![.., c..]).to_owned();
    (g_vox, g_pts)
}
