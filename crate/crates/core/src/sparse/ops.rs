//! Normalization, activations and elementwise glue over active sites.

use ndarray::{Array1, Array2, Axis, Zip};

use crate::error::{Error, Result};

use super::tensor::SparseTensor;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.99;
pub const LEAKY_SLOPE: f64 = 0.1;

/// Per-channel affine normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl NormParams {
    pub fn new(channels: usize) -> Self {
        NormParams {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Folds one batch's (biased) moments into the running statistics.
    pub fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>) {
        Zip::from(&mut self.running_mean)
            .and(mean)
            .for_each(|r, &m| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
        Zip::from(&mut self.running_var)
            .and(var)
            .for_each(|r, &v| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
    }
}

/// What the backward pass of a normalization needs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormCache {
    pub x_hat: Array2<f64>,
    pub inv_std: Array1<f64>,
    /// Batch moments; `None` in inference mode or for an empty batch.
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

/// Normalizes rows of `x` per channel. Training mode uses the batch moments,
/// inference mode the running ones. Running statistics are not touched here;
/// the batch moments are returned in the cache for the caller to fold in.
pub fn batch_norm_features(
    x: &Array2<f64>,
    norm: &NormParams,
    training: bool,
) -> Result<(Array2<f64>, BatchNormCache)> {
    if x.ncols() != norm.channels() {
        return Err(Error::Shape(format!(
            "{} channels into a {}-channel normalization",
            x.ncols(),
            norm.channels()
        )));
    }
    let m = x.nrows();
    let (mean, var, stats) = if training && m > 0 {
        let mean = x.sum_axis(Axis(0)) / m as f64;
        let centered = x - &mean;
        let var = (&centered * &centered).sum_axis(Axis(0)) / m as f64;
        (mean.clone(), var.clone(), Some((mean, var)))
    } else {
        (norm.running_mean.clone(), norm.running_var.clone(), None)
    };
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
    let x_hat = (x - &mean) * &inv_std;
    let y = &x_hat * &norm.scale + &norm.shift;
    Ok((
        y,
        BatchNormCache {
            x_hat,
            inv_std,
            batch_stats: stats,
        },
    ))
}

/// Sparse-tensor normalization; in training mode the running statistics are updated.
pub fn batch_norm(x: &SparseTensor, norm: &mut NormParams, training: bool) -> Result<SparseTensor> {
    let (y, cache) = batch_norm_features(x.features(), norm, training)?;
    if let Some((mean, var)) = &cache.batch_stats {
        norm.update_running(mean, var);
    }
    x.with_features(y)
}

/// Returns `(grad_x, grad_scale, grad_shift)`.
pub fn batch_norm_backward(
    cache: &BatchNormCache,
    norm: &NormParams,
    grad_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let m = grad_out.nrows();
    let grad_shift = grad_out.sum_axis(Axis(0));
    let grad_scale = (grad_out * &cache.x_hat).sum_axis(Axis(0));
    let grad_x = if cache.batch_stats.is_some() {
        let mf = m as f64;
        let coef = &norm.scale * &cache.inv_std / mf;
        let term = grad_out * mf - &grad_shift - &cache.x_hat * &grad_scale;
        term * &coef
    } else {
        grad_out * &(&norm.scale * &cache.inv_std)
    };
    (grad_x, grad_scale, grad_shift)
}

pub fn leaky_relu_features(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

/// `f(v) = v` for `v ≥ 0`, `slope · v` otherwise.
pub fn leaky_relu(x: &SparseTensor, slope: f64) -> Result<SparseTensor> {
    x.with_features(leaky_relu_features(x.features(), slope))
}

/// Gradient given the activation's input.
pub fn leaky_relu_backward(input: &Array2<f64>, grad_out: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut g = grad_out.clone();
    Zip::from(&mut g).and(input).for_each(|g, &v| {
        if v < 0.0 {
            *g *= slope;
        }
    });
    g
}

pub fn sigmoid_features(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Gradient given the activation's output.
pub fn sigmoid_backward(output: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    grad_out * &output.mapv(|s| s * (1.0 - s))
}

pub fn add(x: &SparseTensor, y: &SparseTensor) -> Result<SparseTensor> {
    if !x.same_sites(y) {
        return Err(Error::CoordMismatch("add needs identical site lists".into()));
    }
    if x.channels() != y.channels() {
        return Err(Error::Shape(format!(
            "add of {} and {} channels",
            x.channels(),
            y.channels()
        )));
    }
    x.with_features(x.features() + y.features())
}

/// Channel concatenation `[x | y]` on identical site lists.
pub fn concat_features(x: &SparseTensor, y: &SparseTensor) -> Result<SparseTensor> {
    if !x.same_sites(y) {
        return Err(Error::CoordMismatch("concat needs identical site lists".into()));
    }
    let f = ndarray::concatenate(Axis(1), &[x.features().view(), y.features().view()])
        .map_err(|e| Error::Shape(e.to_string()))?;
    x.with_features(f)
}
