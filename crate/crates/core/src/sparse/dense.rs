//! Dense reference implementations used as test oracles.
//!
//! These are direct loops over every grid cell and kernel tap with zero
//! padding. They share no code with the rulebook path.

use ndarray::{Array1, Array3, Array4};

use crate::error::Result;

use super::tensor::{Coord, SparseTensor};

/// Dense `H×W×L×C` values plus the active-site mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub values: Array4<f64>,
    pub active: Array3<bool>,
}

impl DenseTensor {
    pub fn shape(&self) -> [usize; 3] {
        let (h, w, l, _) = self.values.dim();
        [h, w, l]
    }

    pub fn channels(&self) -> usize {
        self.values.dim().3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Stride 1, output masked to the input's active sites.
    Submanifold,
    /// Output at every cell of the ceil-divided grid; active where any
    /// active input lies in the receptive field.
    Strided,
}

pub fn densify(x: &SparseTensor) -> DenseTensor {
    let [h, w, l] = x.shape();
    let c = x.channels();
    let mut values = Array4::zeros((h, w, l, c));
    let mut active = Array3::from_elem((h, w, l), false);
    for (i, p) in x.coords().iter().enumerate() {
        active[[p[0], p[1], p[2]]] = true;
        for ch in 0..c {
            values[[p[0], p[1], p[2], ch]] = x.features()[[i, ch]];
        }
    }
    DenseTensor { values, active }
}

/// Reads the active cells back in row-major cell order.
pub fn sparsify(d: &DenseTensor) -> Result<SparseTensor> {
    let [h, w, l] = d.shape();
    let c = d.channels();
    let mut coords: Vec<Coord> = Vec::new();
    let mut rows = Vec::new();
    for a in 0..h {
        for b in 0..w {
            for e in 0..l {
                if d.active[[a, b, e]] {
                    coords.push([a, b, e]);
                    rows.extend((0..c).map(|ch| d.values[[a, b, e, ch]]));
                }
            }
        }
    }
    let features = ndarray::Array2::from_shape_vec((coords.len(), c), rows)
        .expect("row count matches");
    SparseTensor::new(coords, features, [h, w, l])
}

fn half(size: [usize; 3]) -> [i64; 3] {
    size.map(|k| (k as i64 - 1) / 2)
}

/// Direct cross-correlation: `out[o] = bias + Σ_taps W[tap]ᵀ in[o*stride + tap]`.
///
/// `weights` is `(volume, c_in, c_out)` with taps in row-major `(h, w, l)` order.
pub fn dense_conv_oracle(
    input: &DenseTensor,
    weights: &Array3<f64>,
    bias: &Array1<f64>,
    size: [usize; 3],
    stride: [usize; 3],
    mode: OracleMode,
) -> DenseTensor {
    let shape = input.shape();
    let out_shape = [0, 1, 2].map(|a| shape[a].div_ceil(stride[a]));
    let (_, c_in, c_out) = weights.dim();
    let hk = half(size);
    let mut values = Array4::zeros((out_shape[0], out_shape[1], out_shape[2], c_out));
    let mut active = Array3::from_elem((out_shape[0], out_shape[1], out_shape[2]), false);
    for o0 in 0..out_shape[0] {
        for o1 in 0..out_shape[1] {
            for o2 in 0..out_shape[2] {
                let mut acc = bias.to_vec();
                let mut touched = false;
                let mut tap = 0usize;
                for d0 in -hk[0]..=hk[0] {
                    for d1 in -hk[1]..=hk[1] {
                        for d2 in -hk[2]..=hk[2] {
                            let p = [
                                (o0 * stride[0]) as i64 + d0,
                                (o1 * stride[1]) as i64 + d1,
                                (o2 * stride[2]) as i64 + d2,
                            ];
                            let inside = (0..3).all(|a| p[a] >= 0 && p[a] < shape[a] as i64);
                            if inside {
                                let (a, b, e) = (p[0] as usize, p[1] as usize, p[2] as usize);
                                if input.active[[a, b, e]] {
                                    touched = true;
                                    for ci in 0..c_in {
                                        let v = input.values[[a, b, e, ci]];
                                        for co in 0..c_out {
                                            acc[co] += weights[[tap, ci, co]] * v;
                                        }
                                    }
                                }
                            }
                            tap += 1;
                        }
                    }
                }
                let is_active = match mode {
                    OracleMode::Submanifold => input.active[[o0, o1, o2]],
                    OracleMode::Strided => touched,
                };
                if is_active {
                    active[[o0, o1, o2]] = true;
                    for co in 0..c_out {
                        values[[o0, o1, o2, co]] = acc[co];
                    }
                }
            }
        }
    }
    DenseTensor { values, active }
}

/// Direct transposed convolution onto a grid of `out_shape`: every active
/// input cell `q` adds `W[tap]ᵀ in[q]` at `q*stride + tap`. Active where any
/// contribution lands; callers restrict to the sites they restore.
pub fn dense_transposed_conv_oracle(
    input: &DenseTensor,
    weights: &Array3<f64>,
    bias: &Array1<f64>,
    size: [usize; 3],
    stride: [usize; 3],
    out_shape: [usize; 3],
) -> DenseTensor {
    let shape = input.shape();
    let (_, c_in, c_out) = weights.dim();
    let hk = half(size);
    let mut values = Array4::zeros((out_shape[0], out_shape[1], out_shape[2], c_out));
    let mut active = Array3::from_elem((out_shape[0], out_shape[1], out_shape[2]), false);
    for a in 0..out_shape[0] {
        for b in 0..out_shape[1] {
            for e in 0..out_shape[2] {
                for co in 0..c_out {
                    values[[a, b, e, co]] = bias[co];
                }
            }
        }
    }
    for q0 in 0..shape[0] {
        for q1 in 0..shape[1] {
            for q2 in 0..shape[2] {
                if !input.active[[q0, q1, q2]] {
                    continue;
                }
                let mut tap = 0usize;
                for d0 in -hk[0]..=hk[0] {
                    for d1 in -hk[1]..=hk[1] {
                        for d2 in -hk[2]..=hk[2] {
                            let p = [
                                (q0 * stride[0]) as i64 + d0,
                                (q1 * stride[1]) as i64 + d1,
                                (q2 * stride[2]) as i64 + d2,
                            ];
                            if (0..3).all(|ax| p[ax] >= 0 && p[ax] < out_shape[ax] as i64) {
                                let (x0, x1, x2) = (p[0] as usize, p[1] as usize, p[2] as usize);
                                active[[x0, x1, x2]] = true;
                                for ci in 0..c_in {
                                    let v = input.values[[q0, q1, q2, ci]];
                                    for co in 0..c_out {
                                        values[[x0, x1, x2, co]] += weights[[tap, ci, co]] * v;
                                    }
                                }
                            }
                            tap += 1;
                        }
                    }
                }
            }
        }
    }
    DenseTensor { values, active }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn densify_empty_is_zero() {
        let d = densify(&SparseTensor::empty(2, [2, 3, 4]));
        assert!(d.values.iter().all(|v| *v == 0.0));
        assert!(d.active.iter().all(|a| !a));
    }

    #[test]
    fn densify_sparsify_round_trip() {
        let x = SparseTensor::new(
            vec![[0, 1, 2], [1, 0, 0]],
            Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -3.0, 2.5]).unwrap(),
            [2, 2, 3],
        )
        .unwrap();
        let back = sparsify(&densify(&x)).unwrap();
        // sparsify emits row-major order
        assert_eq!(back.coords(), &[[0, 1, 2], [1, 0, 0]]);
        assert_eq!(back.features(), x.features());
    }

    #[test]
    fn impulse_response_is_flipped_stencil() {
        // one active impulse at the center of a 5x5x5 grid, every cell
        // active so the output is not masked away
        let mut values = Array4::zeros((5, 5, 5, 1));
        values[[2, 2, 2, 0]] = 1.0;
        let input = DenseTensor {
            values,
            active: Array3::from_elem((5, 5, 5), true),
        };
        let mut w = Array3::zeros((27, 1, 1));
        for t in 0..27 {
            w[[t, 0, 0]] = (t + 1) as f64;
        }
        let out = dense_conv_oracle(
            &input,
            &w,
            &Array1::zeros(1),
            [3, 3, 3],
            [1, 1, 1],
            OracleMode::Submanifold,
        );
        // output at 2 - d sees the impulse through tap d
        let mut tap = 0;
        for d0 in -1i64..=1 {
            for d1 in -1i64..=1 {
                for d2 in -1i64..=1 {
                    let o = [(2 - d0) as usize, (2 - d1) as usize, (2 - d2) as usize];
                    assert_eq!(out.values[[o[0], o[1], o[2], 0]], (tap + 1) as f64);
                    tap += 1;
                }
            }
        }
        let nonzero = out.values.iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 27);
    }
}
