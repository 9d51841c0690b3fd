//! Gather-GEMM-scatter sparse convolution and its adjoint.
//!
//! Each kernel offset gathers its source rows into a dense block, multiplies
//! by that offset's weight matrix, and the products are scattered into the
//! destination rows. Offsets may be multiplied in parallel; the scatter walks
//! offsets in order and each pair list in sorted order, so every output row
//! accumulates `bias + offset_0 + offset_1 + ...` identically at any thread
//! count.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::par;

use super::rulebook::Rulebook;
use super::tensor::SparseTensor;

/// Weights `(kernel_volume, c_in, c_out)` and bias `(c_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
}

impl ConvParams {
    pub fn zeros(volume: usize, c_in: usize, c_out: usize) -> Self {
        ConvParams {
            weights: Array3::zeros((volume, c_in, c_out)),
            bias: Array1::zeros(c_out),
        }
    }

    /// Uniform in `±sqrt(6 / (c_in + c_out))` per offset, zero bias.
    pub fn init<R: Rng + ?Sized>(volume: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (c_in + c_out) as f64).sqrt();
        let weights = Array3::from_shape_fn((volume, c_in, c_out), |_| rng.gen_range(-bound..bound));
        ConvParams {
            weights,
            bias: Array1::zeros(c_out),
        }
    }

    pub fn volume(&self) -> usize {
        self.weights.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weights.dim().1
    }

    pub fn c_out(&self) -> usize {
        self.weights.dim().2
    }

    /// Number of weight entries (bias excluded).
    pub fn weight_count(&self) -> usize {
        self.weights.len()
    }
}

/// Gradients of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Array2<f64>,
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
}

/// Which side of each pair is read from.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    /// Read `pair.0`, write `pair.1`.
    Forward,
    /// Read `pair.1`, write `pair.0`.
    Transposed,
}

impl Direction {
    fn ends(self, pair: (u32, u32)) -> (usize, usize) {
        match self {
            Direction::Forward => (pair.0 as usize, pair.1 as usize),
            Direction::Transposed => (pair.1 as usize, pair.0 as usize),
        }
    }
}

fn gather(src: &ArrayView2<'_, f64>, rows: impl Iterator<Item = usize>, n: usize) -> Array2<f64> {
    let mut out = Array2::zeros((n, src.ncols()));
    for (r, i) in rows.enumerate() {
        out.row_mut(r).assign(&src.row(i));
    }
    out
}

fn apply(
    src: &Array2<f64>,
    params: &ConvParams,
    rb: &Rulebook,
    n_dst: usize,
    dir: Direction,
) -> Array2<f64> {
    let view = src.view();
    let products: Vec<Array2<f64>> = par::map_indexed(rb.pairs.len(), |k| {
        let list = &rb.pairs[k];
        let g = gather(&view, list.iter().map(|&p| dir.ends(p).0), list.len());
        g.dot(&params.weights.index_axis(Axis(0), k))
    });
    let mut out = Array2::from_shape_fn((n_dst, params.c_out()), |(_, c)| params.bias[c]);
    for (list, prod) in rb.pairs.iter().zip(&products) {
        for (r, &p) in list.iter().enumerate() {
            let dst = dir.ends(p).1;
            let mut row = out.row_mut(dst);
            row += &prod.row(r);
        }
    }
    out
}

fn apply_backward(
    src: &Array2<f64>,
    params: &ConvParams,
    rb: &Rulebook,
    grad_out: &Array2<f64>,
    dir: Direction,
) -> ConvGrads {
    let src_view = src.view();
    let grad_view = grad_out.view();
    let parts: Vec<(Array2<f64>, Array2<f64>)> = par::map_indexed(rb.pairs.len(), |k| {
        let list = &rb.pairs[k];
        let g_src = gather(&src_view, list.iter().map(|&p| dir.ends(p).0), list.len());
        let g_dst = gather(&grad_view, list.iter().map(|&p| dir.ends(p).1), list.len());
        let w = params.weights.index_axis(Axis(0), k);
        (g_dst.dot(&w.t()), g_src.t().dot(&g_dst))
    });
    let mut grad_input = Array2::zeros(src.raw_dim());
    let mut grad_w = Array3::zeros(params.weights.raw_dim());
    for (k, (list, (gin, gw))) in rb.pairs.iter().zip(&parts).enumerate() {
        for (r, &p) in list.iter().enumerate() {
            let i = dir.ends(p).0;
            let mut row = grad_input.row_mut(i);
            row += &gin.row(r);
        }
        grad_w.slice_mut(s![k, .., ..]).assign(gw);
    }
    ConvGrads {
        input: grad_input,
        weights: grad_w,
        bias: grad_out.sum_axis(Axis(0)),
    }
}

fn check_params(params: &ConvParams, rb: &Rulebook, c_in: usize) -> Result<()> {
    if params.volume() != rb.pairs.len() {
        return Err(Error::Shape(format!(
            "weights cover {} offsets, rulebook has {}",
            params.volume(),
            rb.pairs.len()
        )));
    }
    if params.c_in() != c_in || params.bias.len() != params.c_out() {
        return Err(Error::Shape(format!(
            "weights {:?} / bias {} do not fit {c_in} input channels",
            params.weights.dim(),
            params.bias.len()
        )));
    }
    Ok(())
}

/// `out[j] = bias + Σ_k Σ_{(i→j)} weights[k]ᵀ · x[i]` on the rulebook's output sites.
pub fn sparse_conv_forward(x: &SparseTensor, params: &ConvParams, rb: &Rulebook) -> Result<SparseTensor> {
    check_params(params, rb, x.channels())?;
    if x.num_sites() != rb.in_coords.len() || x.shape() != rb.in_shape {
        return Err(Error::Shape(format!(
            "input has {} sites / shape {:?}, rulebook expects {} / {:?}",
            x.num_sites(),
            x.shape(),
            rb.in_coords.len(),
            rb.in_shape
        )));
    }
    let out = apply(x.features(), params, rb, rb.out_coords.len(), Direction::Forward);
    SparseTensor::from_shared(rb.out_coords.clone(), out, rb.out_shape)
}

/// Adjoint of [`sparse_conv_forward`] with respect to input, weights and bias.
pub fn sparse_conv_backward(
    x: &SparseTensor,
    params: &ConvParams,
    rb: &Rulebook,
    grad_out: &Array2<f64>,
) -> Result<ConvGrads> {
    check_params(params, rb, x.channels())?;
    if grad_out.dim() != (rb.out_coords.len(), params.c_out()) {
        return Err(Error::Shape(format!(
            "gradient {:?} misaligned with {} output sites x {} channels",
            grad_out.dim(),
            rb.out_coords.len(),
            params.c_out()
        )));
    }
    Ok(apply_backward(x.features(), params, rb, grad_out, Direction::Forward))
}

/// Transposed convolution through a stored strided rulebook: features on the
/// rulebook's output sites are carried back to its input sites.
pub fn inverse_conv(x: &SparseTensor, params: &ConvParams, stored: &Rulebook) -> Result<SparseTensor> {
    check_params(params, stored, x.channels())?;
    if x.coords() != stored.out_coords.as_ref() || x.shape() != stored.out_shape {
        return Err(Error::CoordMismatch(
            "input sites are not the stored rulebook's output sites".into(),
        ));
    }
    let out = apply(
        x.features(),
        params,
        stored,
        stored.in_coords.len(),
        Direction::Transposed,
    );
    SparseTensor::from_shared(stored.in_coords.clone(), out, stored.in_shape)
}

pub fn inverse_conv_backward(
    x: &SparseTensor,
    params: &ConvParams,
    stored: &Rulebook,
    grad_out: &Array2<f64>,
) -> Result<ConvGrads> {
    check_params(params, stored, x.channels())?;
    if grad_out.dim() != (stored.in_coords.len(), params.c_out()) {
        return Err(Error::Shape(format!(
            "gradient {:?} misaligned with {} restored sites x {} channels",
            grad_out.dim(),
            stored.in_coords.len(),
            params.c_out()
        )));
    }
    Ok(apply_backward(
        x.features(),
        params,
        stored,
        grad_out,
        Direction::Transposed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::rulebook::{build_rulebook, KernelSpec};
    use ndarray::array;
    use std::sync::Arc;

    #[test]
    fn identity_pointwise_kernel_keeps_features() {
        let x = SparseTensor::new(
            vec![[0, 0, 0], [1, 2, 0]],
            array![[1.0, -2.0], [3.5, 0.25]],
            [2, 3, 1],
        )
        .unwrap();
        let rb = build_rulebook(x.shared_coords(), x.shape(), KernelSpec::submanifold([1, 1, 1])).unwrap();
        let mut p = ConvParams::zeros(1, 2, 2);
        p.weights[[0, 0, 0]] = 1.0;
        p.weights[[0, 1, 1]] = 1.0;
        let y = sparse_conv_forward(&x, &p, &rb).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn empty_input_gives_empty_output() {
        let x = SparseTensor::empty(3, [4, 4, 4]);
        for k in [KernelSpec::submanifold([3, 3, 3]), KernelSpec::strided([3, 3, 3], [2, 2, 2])] {
            let rb = build_rulebook(x.shared_coords(), x.shape(), k).unwrap();
            let p = ConvParams::zeros(27, 3, 5);
            let y = sparse_conv_forward(&x, &p, &rb).unwrap();
            assert_eq!(y.num_sites(), 0);
            assert_eq!(y.channels(), 5);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_gradients() {
        let x = SparseTensor::new(vec![[0, 0, 0], [1, 0, 0]], array![[1.0], [2.0]], [2, 1, 1]).unwrap();
        let rb = build_rulebook(x.shared_coords(), x.shape(), KernelSpec::submanifold([3, 1, 1])).unwrap();
        let mut rng = rand::thread_rng();
        let p = ConvParams::init(3, 1, 2, &mut rng);
        let g = sparse_conv_backward(&x, &p, &rb, &Array2::zeros((2, 2))).unwrap();
        assert!(g.input.iter().all(|v| *v == 0.0));
        assert!(g.weights.iter().all(|v| *v == 0.0));
        assert!(g.bias.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_site_identity_passes_gradient_through() {
        let x = SparseTensor::new(vec![[0, 0, 0]], array![[0.5, 1.5]], [1, 1, 1]).unwrap();
        let rb = build_rulebook(x.shared_coords(), x.shape(), KernelSpec::submanifold([1, 1, 1])).unwrap();
        let mut p = ConvParams::zeros(1, 2, 2);
        p.weights[[0, 0, 0]] = 1.0;
        p.weights[[0, 1, 1]] = 1.0;
        let go = array![[0.3, -0.7]];
        let g = sparse_conv_backward(&x, &p, &rb, &go).unwrap();
        assert_eq!(g.input, go);
        assert_eq!(g.bias, array![0.3, -0.7]);
    }

    #[test]
    fn misaligned_gradient_is_rejected() {
        let x = SparseTensor::new(vec![[0, 0, 0]], array![[0.5]], [1, 1, 1]).unwrap();
        let rb = build_rulebook(x.shared_coords(), x.shape(), KernelSpec::submanifold([1, 1, 1])).unwrap();
        let p = ConvParams::zeros(1, 1, 1);
        assert!(sparse_conv_backward(&x, &p, &rb, &Array2::zeros((2, 1))).is_err());
        let wrong = ConvParams::zeros(27, 1, 1);
        assert!(sparse_conv_forward(&x, &wrong, &rb).is_err());
    }

    #[test]
    fn inverse_restores_pre_downsample_sites() {
        let coords: Arc<[[usize; 3]]> = vec![[0, 0, 0], [1, 1, 1], [5, 2, 3], [6, 7, 0]].into();
        let x = SparseTensor::from_shared(coords.clone(), Array2::ones((4, 2)), [8, 8, 4]).unwrap();
        let rb = build_rulebook(&coords, x.shape(), KernelSpec::strided([3, 3, 3], [2, 2, 2])).unwrap();
        let mut rng = rand::thread_rng();
        let down = sparse_conv_forward(&x, &ConvParams::init(27, 2, 3, &mut rng), &rb).unwrap();
        assert_eq!(down.shape(), [4, 4, 2]);
        let up = inverse_conv(&down, &ConvParams::init(27, 3, 2, &mut rng), &rb).unwrap();
        assert_eq!(up.coords(), x.coords());
        assert_eq!(up.shape(), x.shape());
    }

    #[test]
    fn inverse_copies_feature_to_preimage() {
        // one input at (1,1,1); stride 2 with a 1x1x1 kernel never reaches an
        // odd site, so use (2,2,2) -> output (1,1,1)
        let coords: Arc<[[usize; 3]]> = vec![[2, 2, 2]].into();
        let rb = build_rulebook(&coords, [4, 4, 4], KernelSpec::strided([1, 1, 1], [2, 2, 2])).unwrap();
        assert_eq!(rb.out_coords.as_ref(), &[[1, 1, 1]]);
        assert_eq!(rb.num_pairs(), 1);
        let y = SparseTensor::from_shared(rb.out_coords.clone(), array![[4.0, -1.0]], rb.out_shape).unwrap();
        let mut p = ConvParams::zeros(1, 2, 2);
        p.weights[[0, 0, 0]] = 1.0;
        p.weights[[0, 1, 1]] = 1.0;
        let up = inverse_conv(&y, &p, &rb).unwrap();
        assert_eq!(up.coords(), &[[2, 2, 2]]);
        assert_eq!(up.features(), &array![[4.0, -1.0]]);
    }
}
