use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::Coord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvMode {
    /// Output sites are the input sites.
    Submanifold,
    /// Output site exists wherever an input lies in its receptive field.
    Strided,
}

/// Kernel extent and stride per axis `(radius, azimuth, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KernelSpec {
    pub size: [usize; 3],
    pub stride: [usize; 3],
    pub mode: ConvMode,
}

impl KernelSpec {
    pub fn submanifold(size: [usize; 3]) -> Self {
        KernelSpec {
            size,
            stride: [1, 1, 1],
            mode: ConvMode::Submanifold,
        }
    }

    pub fn strided(size: [usize; 3], stride: [usize; 3]) -> Self {
        KernelSpec {
            size,
            stride,
            mode: ConvMode::Strided,
        }
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::InvalidValue(format!(
                "kernel size {:?} must be odd and positive",
                self.size
            )));
        }
        if self.stride.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::InvalidValue(format!(
                "stride {:?} must be 1 or 2 per axis",
                self.stride
            )));
        }
        if self.mode == ConvMode::Submanifold && self.stride != [1, 1, 1] {
            return Err(Error::InvalidValue(
                "submanifold convolution requires unit stride".into(),
            ));
        }
        Ok(())
    }

    /// Output grid shape: ceil division by the stride.
    pub fn out_shape(&self, in_shape: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| in_shape[a].div_ceil(self.stride[a]))
    }
}

/// Centered offsets in row-major order over `(h, w, l)`, each axis ranging
/// over `±(k-1)/2`.
pub fn kernel_offsets(size: [usize; 3]) -> Vec<[i64; 3]> {
    let half = size.map(|k| (k as i64 - 1) / 2);
    let mut out = Vec::with_capacity(size.iter().product());
    for dh in -half[0]..=half[0] {
        for dw in -half[1]..=half[1] {
            for dl in -half[2]..=half[2] {
                out.push([dh, dw, dl]);
            }
        }
    }
    out
}

/// Per-offset `(input_site, output_site)` pair lists for one convolution.
///
/// Pair lists are sorted by output site, then input site. Output `j`
/// receives input `i` through offset `k` when
/// `in_coords[i] = out_coords[j] * stride + offsets[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    pub kernel: KernelSpec,
    pub offsets: Vec<[i64; 3]>,
    pub pairs: Vec<Vec<(u32, u32)>>,
    pub in_coords: Arc<[Coord]>,
    pub in_shape: [usize; 3],
    pub out_coords: Arc<[Coord]>,
    pub out_shape: [usize; 3],
}

impl Rulebook {
    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn center_offset(&self) -> usize {
        self.offsets.len() / 2
    }
}

fn shift(c: Coord, off: [i64; 3], shape: [usize; 3]) -> Option<Coord> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as i64 + off[a];
        if v < 0 || v >= shape[a] as i64 {
            return None;
        }
        out[a] = v as usize;
    }
    Some(out)
}

/// Builds the connectivity for `kernel` over the active set `in_coords`.
pub fn build_rulebook(
    in_coords: &Arc<[Coord]>,
    in_shape: [usize; 3],
    kernel: KernelSpec,
) -> Result<Rulebook> {
    kernel.validate()?;
    let offsets = kernel_offsets(kernel.size);
    match kernel.mode {
        ConvMode::Submanifold => {
            let index: HashMap<Coord, u32> = in_coords
                .iter()
                .enumerate()
                .map(|(i, c)| (*c, i as u32))
                .collect();
            let pairs = offsets
                .iter()
                .map(|&off| {
                    in_coords
                        .iter()
                        .enumerate()
                        .filter_map(|(j, &c)| {
                            shift(c, off, in_shape)
                                .and_then(|n| index.get(&n))
                                .map(|&i| (i, j as u32))
                        })
                        .collect()
                })
                .collect();
            Ok(Rulebook {
                kernel,
                offsets,
                pairs,
                in_coords: in_coords.clone(),
                in_shape,
                out_coords: in_coords.clone(),
                out_shape: in_shape,
            })
        }
        ConvMode::Strided => {
            let out_shape = kernel.out_shape(in_shape);
            let stride = kernel.stride.map(|s| s as i64);
            // (offset, input, output coord) for every valid connection
            let mut links: Vec<(usize, u32, Coord)> = Vec::new();
            let mut outputs: BTreeMap<Coord, u32> = BTreeMap::new();
            for (i, c) in in_coords.iter().enumerate() {
                'off: for (k, off) in offsets.iter().enumerate() {
                    let mut o = [0usize; 3];
                    for a in 0..3 {
                        let v = c[a] as i64 - off[a];
                        if v < 0 || v % stride[a] != 0 || v / stride[a] >= out_shape[a] as i64 {
                            continue 'off;
                        }
                        o[a] = (v / stride[a]) as usize;
                    }
                    outputs.insert(o, 0);
                    links.push((k, i as u32, o));
                }
            }
            for (j, slot) in outputs.values_mut().enumerate() {
                *slot = j as u32;
            }
            let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); offsets.len()];
            for (k, i, o) in links {
                pairs[k].push((i, outputs[&o]));
            }
            for list in &mut pairs {
                list.sort_unstable_by_key(|&(i, j)| (j, i));
            }
            let out_coords: Vec<Coord> = outputs.into_keys().collect();
            Ok(Rulebook {
                kernel,
                offsets,
                pairs,
                in_coords: in_coords.clone(),
                in_shape,
                out_coords: out_coords.into(),
                out_shape,
            })
        }
    }
}
