//! Per-point input features and the point MLP.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::io::PointCloud;
use crate::partition::{cart_to_cyl, CylGridSpec, VoxelMapping};
use crate::sparse::ops::{batch_norm_features, leaky_relu_features};
use crate::sparse::{batch_norm_backward, leaky_relu_backward, BatchNormCache, NormParams, LEAKY_SLOPE};

use super::params::LinearParams;
use super::Mode;

/// Width of [`point_input_features`] rows.
pub const POINT_FEATURES: usize = 9;

/// Per point `[ρ−ρc, θ−θc, z−zc, ρ, θ, z, x, y, intensity]` where
/// `(ρc, θc, zc)` is the center of the point's cell.
pub fn point_input_features(
    cloud: &PointCloud,
    mapping: &VoxelMapping,
    grid: &CylGridSpec,
    use_intensity: bool,
) -> Result<Array2<f64>> {
    if mapping.num_points() != cloud.len() {
        return Err(Error::Shape(format!(
            "mapping covers {} points, cloud has {}",
            mapping.num_points(),
            cloud.len()
        )));
    }
    let mut out = Array2::zeros((cloud.len(), POINT_FEATURES));
    for (i, p) in cloud.xyz.iter().enumerate() {
        let cyl = cart_to_cyl(p[0], p[1], p[2]);
        let center = grid.cell_center(mapping.cells[mapping.point_site[i]]);
        let intensity = if use_intensity { cloud.intensity[i] } else { 0.0 };
        let row = [
            cyl.rho - center.rho,
            cyl.theta - center.theta,
            cyl.z - center.z,
            cyl.rho,
            cyl.theta,
            cyl.z,
            p[0],
            p[1],
            intensity,
        ];
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
    }
    Ok(out)
}

pub fn linear_forward(x: &Array2<f64>, p: &LinearParams) -> Result<Array2<f64>> {
    if x.ncols() != p.weight.nrows() {
        return Err(Error::Shape(format!(
            "{} inputs into a {}-input layer",
            x.ncols(),
            p.weight.nrows()
        )));
    }
    Ok(x.dot(&p.weight) + &p.bias)
}

/// Returns the input gradient and accumulates parameter gradients into `grads`.
pub fn linear_backward(
    x: &Array2<f64>,
    p: &LinearParams,
    grad_out: &Array2<f64>,
    grads: &mut LinearParams,
) -> Array2<f64> {
    grads.weight += &x.t().dot(grad_out);
    grads.bias += &grad_out.sum_axis(Axis(0));
    grad_out.dot(&p.weight.t())
}

/// Saved activations of the point MLP.
#[derive(Debug, Clone)]
pub struct MlpTape {
    inputs: Vec<Array2<f64>>,
    norms: Vec<BatchNormCache>,
    pre_act: Vec<Array2<f64>>,
}

impl MlpTape {
    pub(crate) fn norm_caches(&self) -> &[BatchNormCache] {
        &self.norms
    }
}

/// Affine → normalization → LeakyReLU per layer, applied row-wise.
pub fn point_mlp(
    features: &Array2<f64>,
    layers: &[(LinearParams, NormParams)],
    mode: Mode,
) -> Result<(Array2<f64>, MlpTape)> {
    let mut tape = MlpTape {
        inputs: Vec::with_capacity(layers.len()),
        norms: Vec::with_capacity(layers.len()),
        pre_act: Vec::with_capacity(layers.len()),
    };
    let mut x = features.clone();
    for (lin, norm) in layers {
        let h = linear_forward(&x, lin)?;
        let (y, cache) = batch_norm_features(&h, norm, mode.is_training())?;
        let a = leaky_relu_features(&y, LEAKY_SLOPE);
        tape.inputs.push(x);
        tape.norms.push(cache);
        tape.pre_act.push(y);
        x = a;
    }
    Ok((x, tape))
}

pub fn point_mlp_backward(
    layers: &[(LinearParams, NormParams)],
    tape: &MlpTape,
    grad_out: &Array2<f64>,
    grads: &mut [(LinearParams, NormParams)],
) -> Array2<f64> {
    let mut g = grad_out.clone();
    for l in (0..layers.len()).rev() {
        let (lin, norm) = &layers[l];
        let g_act = leaky_relu_backward(&tape.pre_act[l], &g, LEAKY_SLOPE);
        let (g_h, g_scale, g_shift) = batch_norm_backward(&tape.norms[l], norm, &g_act);
        grads[l].1.scale += &g_scale;
        grads[l].1.shift += &g_shift;
        g = linear_backward(&tape.inputs[l], lin, &g_h, &mut grads[l].0);
    }
    g
}
