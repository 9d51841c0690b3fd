//! Built-in verification suites: sparse convolution against the dense
//! oracle, and finite-difference checks of every backward pass.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{generate_synthetic_scene, SyntheticSceneSpec, DEFAULT_IGNORE_ID};
use crate::network::blocks::{
    asym_down_block, asym_down_block_backward, asym_up_block, asym_up_block_backward, ddcm,
    ddcm_backward, downsample_rules, point_refine, point_refine_backward, res_block,
    res_block_backward, unit_forward, StageRules,
};
use crate::network::features::{point_mlp, point_mlp_backward};
use crate::network::model::{backward_scene, forward_scene};
use crate::network::params::{
    ConvBn, DdcmParams, DownParams, LinearParams, ParamMut, ParamRef, RefineParams, ResBlockParams,
    UpParams,
};
use crate::network::{BlockVariant, Mode, NetworkConfig, ParamSet, Scene, Slot, POINT_FEATURES};
use crate::partition::{assign_cells, encode_cell_labels, scatter_max, scatter_max_backward, CylGridSpec, LabelEncoding};
use crate::sparse::ops::{batch_norm_features, leaky_relu_features, sigmoid_backward, sigmoid_features};
use crate::sparse::{
    batch_norm_backward, build_rulebook, dense_conv_oracle, dense_transposed_conv_oracle, densify,
    inverse_conv, inverse_conv_backward, leaky_relu_backward, sparse_conv_backward,
    sparse_conv_forward, sparsify, ConvParams, Coord, KernelSpec, NormParams, SparseTensor,
    LEAKY_SLOPE,
};
use crate::training::gradcheck::{check_param_gradients, finite_diff_check, jvp_check, Block, GradCheckReport};
use crate::training::loss::{
    label_counts, lovasz_softmax, softmax, total_loss, weighted_ce, ClassWeights, LossWeights,
};

/// Tolerance for isolated operations.
pub const ISOLATED_TOL: f64 = 1e-6;
/// Tolerance for whole-network checks.
pub const END_TO_END_TOL: f64 = 1e-4;
/// Absolute tolerance for sparse vs dense convolution.
pub const ORACLE_TOL: f64 = 1e-10;

/// Kernel specs exercised by the oracle suite, plus the transposed case.
pub const ORACLE_KERNELS: [&str; 9] = [
    "sub(1,3,3)",
    "sub(3,1,3)",
    "sub(3,1,1)",
    "sub(1,3,1)",
    "sub(1,1,3)",
    "sub(3,3,3)",
    "sub(1,1,1)",
    "strided(3,3,3)/2",
    "inverse(3,3,3)/2",
];

fn oracle_kernel(i: usize) -> ([usize; 3], bool) {
    match i {
        0 => ([1, 3, 3], false),
        1 => ([3, 1, 3], false),
        2 => ([3, 1, 1], false),
        3 => ([1, 3, 1], false),
        4 => ([1, 1, 3], false),
        5 => ([3, 3, 3], false),
        6 => ([1, 1, 1], false),
        _ => ([3, 3, 3], true),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelOracleStats {
    pub kernel: &'static str,
    pub instances: usize,
    pub max_abs_error: f64,
    pub site_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    pub by_kernel: Vec<KernelOracleStats>,
}

impl OracleReport {
    pub fn max_abs_error(&self) -> f64 {
        self.by_kernel.iter().fold(0.0, |m, k| m.max(k.max_abs_error))
    }

    pub fn passed(&self) -> bool {
        self.by_kernel
            .iter()
            .all(|k| k.site_mismatches == 0 && k.max_abs_error <= ORACLE_TOL)
    }
}

/// Random sparse tensor; always at least one active site.
pub fn random_sparse<R: Rng>(rng: &mut R, shape: [usize; 3], density: f64, channels: usize) -> SparseTensor {
    let mut coords: Vec<Coord> = Vec::new();
    for a in 0..shape[0] {
        for b in 0..shape[1] {
            for c in 0..shape[2] {
                if rng.gen_bool(density) {
                    coords.push([a, b, c]);
                }
            }
        }
    }
    if coords.is_empty() {
        coords.push([
            rng.gen_range(0..shape[0]),
            rng.gen_range(0..shape[1]),
            rng.gen_range(0..shape[2]),
        ]);
    }
    let features = Array2::from_shape_fn((coords.len(), channels), |_| rng.gen_range(-1.0..1.0));
    SparseTensor::new(coords, features, shape).expect("unique in-bounds coords")
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn random_conv<R: Rng>(rng: &mut R, volume: usize, c_in: usize, c_out: usize) -> ConvParams {
    let mut p = ConvParams::init(volume, c_in, c_out, rng);
    p.bias.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
    p
}

/// Runs `instances` random cases cycling through [`ORACLE_KERNELS`].
pub fn oracle_suite(instances: usize, seed: u64) -> Result<OracleReport> {
    let cases = crate::par::map_indexed(instances, |i| -> Result<(usize, f64, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let kind = i % ORACLE_KERNELS.len();
        let (size, transposed) = oracle_kernel(kind);
        let shape = [0; 3].map(|_| rng.gen_range(1..=16usize));
        let density = rng.gen_range(0.02..0.4);
        let c_in = rng.gen_range(1..=8usize);
        let c_out = rng.gen_range(1..=8usize);
        let volume = size.iter().product();
        let params = random_conv(&mut rng, volume, c_in, c_out);
        if transposed {
            let fine = random_sparse(&mut rng, shape, density, 1);
            let stored = build_rulebook(fine.shared_coords(), shape, KernelSpec::strided(size, [2, 2, 2]))?;
            let coarse_features = Array2::from_shape_fn((stored.out_coords.len(), c_in), |_| rng.gen_range(-1.0..1.0));
            let coarse = SparseTensor::from_shared(stored.out_coords.clone(), coarse_features, stored.out_shape)?;
            let out = inverse_conv(&coarse, &params, &stored)?;
            let dense = dense_transposed_conv_oracle(&densify(&coarse), &params.weights, &params.bias, size, [2, 2, 2], shape);
            let mut expect = Array2::zeros((out.num_sites(), c_out));
            for (r, c) in out.coords().iter().enumerate() {
                for ch in 0..c_out {
                    expect[[r, ch]] = dense.values[[c[0], c[1], c[2], ch]];
                }
            }
            let sites_ok = out.coords() == fine.coords();
            return Ok((kind, max_abs_diff(out.features(), &expect), sites_ok));
        }
        let x = random_sparse(&mut rng, shape, density, c_in);
        let (spec, stride, mode) = if kind == 7 {
            (KernelSpec::strided(size, [2, 2, 2]), [2, 2, 2], crate::sparse::OracleMode::Strided)
        } else {
            (KernelSpec::submanifold(size), [1, 1, 1], crate::sparse::OracleMode::Submanifold)
        };
        let rb = build_rulebook(x.shared_coords(), shape, spec)?;
        let out = sparse_conv_forward(&x, &params, &rb)?;
        let expect = sparsify(&dense_conv_oracle(&densify(&x), &params.weights, &params.bias, size, stride, mode))?;
        let sites_ok = out.coords() == expect.coords() && out.shape() == expect.shape();
        let err = if sites_ok {
            max_abs_diff(out.features(), expect.features())
        } else {
            f64::INFINITY
        };
        Ok((kind, err, sites_ok))
    });
    let mut by_kernel: Vec<KernelOracleStats> = ORACLE_KERNELS
        .iter()
        .map(|&k| KernelOracleStats {
            kernel: k,
            instances: 0,
            max_abs_error: 0.0,
            site_mismatches: 0,
        })
        .collect();
    for c in cases {
        let (kind, err, sites_ok) = c?;
        let s = &mut by_kernel[kind];
        s.instances += 1;
        s.max_abs_error = s.max_abs_error.max(err);
        if !sites_ok {
            s.site_mismatches += 1;
        }
    }
    Ok(OracleReport { instances, by_kernel })
}

fn zeros_of<P: ParamSet + Clone>(p: &P) -> P {
    let mut z = p.clone();
    for t in z.tensors_mut() {
        t.data.fill(0.0);
    }
    z
}

/// Replaces normalization scale/shift and biases with random values so the
/// checks do not run at the degenerate initialization.
fn jitter<P: ParamSet, R: Rng>(p: &mut P, rng: &mut R) {
    for t in p.tensors_mut() {
        if t.slot != Slot::Trainable {
            continue;
        }
        if t.name.ends_with("scale") {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(0.5..1.5));
        } else if t.name.ends_with("shift") || t.name.ends_with("bias") {
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        }
    }
}

/// Trainable tensors of `p` with the matching analytic gradients of `g`.
fn param_blocks<P: ParamSet>(p: &P, g: &P) -> Vec<Block> {
    p.tensors()
        .into_iter()
        .zip(g.tensors())
        .filter(|(t, _)| t.slot == Slot::Trainable)
        .map(|(t, gt)| Block {
            name: t.name,
            values: t.data.to_vec(),
            analytic: gt.data.to_vec(),
        })
        .collect()
}

fn load_blocks<P: ParamSet + Clone>(p: &P, values: &[Vec<f64>]) -> P {
    let mut out = p.clone();
    let mut k = 0;
    for t in out.tensors_mut() {
        if t.slot == Slot::Trainable {
            t.data.copy_from_slice(&values[k]);
            k += 1;
        }
    }
    out
}

/// Checks a function of several feature matrices and a parameter set.
fn joint_check<P, F>(
    inputs: &[(&str, &Array2<f64>, &Array2<f64>)],
    params: &P,
    grads: &P,
    loss: F,
    cap: Option<usize>,
) -> GradCheckReport
where
    P: ParamSet + Clone,
    F: Fn(&[Array2<f64>], &P) -> f64,
{
    let mut blocks: Vec<Block> = inputs
        .iter()
        .map(|(name, x, g)| Block {
            name: format!("input.{name}"),
            values: x.iter().copied().collect(),
            analytic: g.iter().copied().collect(),
        })
        .collect();
    blocks.extend(param_blocks(params, grads));
    let dims: Vec<(usize, usize)> = inputs.iter().map(|(_, x, _)| x.dim()).collect();
    let n_in = inputs.len();
    finite_diff_check(
        |v: &[Vec<f64>]| {
            let xs: Vec<Array2<f64>> = (0..n_in)
                .map(|i| Array2::from_shape_vec(dims[i], v[i].clone()).expect("same size"))
                .collect();
            loss(&xs, &load_blocks(params, &v[n_in..]))
        },
        &blocks,
        ISOLATED_TOL,
        cap,
    )
}

/// Placeholder parameter set for checks without parameters.
#[derive(Debug, Clone)]
struct NoParams;

impl ParamSet for NoParams {
    fn collect<'a>(&'a self, _: &str, _: &mut Vec<ParamRef<'a>>) {}
    fn collect_mut<'a>(&'a mut self, _: &str, _: &mut Vec<ParamMut<'a>>) {}
}

#[derive(Debug, Clone)]
struct Mlp(Vec<(LinearParams, NormParams)>);

impl ParamSet for Mlp {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, (l, n)) in self.0.iter().enumerate() {
            l.collect(&format!("{prefix}{i}.linear"), out);
            n.collect(&format!("{prefix}{i}.norm"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        for (i, (l, n)) in self.0.iter_mut().enumerate() {
            l.collect_mut(&format!("{prefix}{i}.linear"), out);
            n.collect_mut(&format!("{prefix}{i}.norm"), out);
        }
    }
}

fn projection<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum()
}

fn variant_kernels(v: BlockVariant) -> Vec<[usize; 3]> {
    let mut k = v.branch_kernels().to_vec();
    k.push([1, 1, 1]);
    k
}

type Named = Vec<(String, GradCheckReport)>;

fn conv_checks(rng: &mut ChaCha8Rng, cap: Option<usize>, out: &mut Named) -> Result<()> {
    for (name, size, strided) in [
        ("conv.sub(1,3,3)", [1, 3, 3], false),
        ("conv.sub(3,1,3)", [3, 1, 3], false),
        ("conv.sub(3,3,3)", [3, 3, 3], false),
        ("conv.strided(3,3,3)", [3, 3, 3], true),
    ] {
        let x = random_sparse(rng, [5, 6, 4], 0.35, 3);
        let spec = if strided {
            KernelSpec::strided(size, [2, 2, 2])
        } else {
            KernelSpec::submanifold(size)
        };
        let rb = build_rulebook(x.shared_coords(), x.shape(), spec)?;
        let p = random_conv(rng, spec.volume(), 3, 2);
        let r = projection(rng, rb.out_coords.len(), 2);
        let g = sparse_conv_backward(&x, &p, &rb, &r)?;
        let grads = ConvParams {
            weights: g.weights,
            bias: g.bias,
        };
        let rep = joint_check(
            &[("x", x.features(), &g.input)],
            &p,
            &grads,
            |xs, p| dot(sparse_conv_forward(&x.with_features(xs[0].clone()).unwrap(), p, &rb).unwrap().features(), &r),
            cap,
        );
        out.push((name.into(), rep));
    }
    let fine = random_sparse(rng, [6, 5, 4], 0.35, 1);
    let stored = build_rulebook(fine.shared_coords(), fine.shape(), KernelSpec::strided([3, 3, 3], [2, 2, 2]))?;
    let coarse = SparseTensor::from_shared(stored.out_coords.clone(), projection(rng, stored.out_coords.len(), 3), stored.out_shape)?;
    let p = random_conv(rng, 27, 3, 2);
    let r = projection(rng, fine.num_sites(), 2);
    let g = inverse_conv_backward(&coarse, &p, &stored, &r)?;
    let grads = ConvParams {
        weights: g.weights,
        bias: g.bias,
    };
    let rep = joint_check(
        &[("x", coarse.features(), &g.input)],
        &p,
        &grads,
        |xs, p| dot(inverse_conv(&coarse.with_features(xs[0].clone()).unwrap(), p, &stored).unwrap().features(), &r),
        cap,
    );
    out.push(("conv.inverse(3,3,3)".into(), rep));
    Ok(())
}

fn elementwise_checks(rng: &mut ChaCha8Rng, cap: Option<usize>, out: &mut Named) -> Result<()> {
    let x = projection(rng, 9, 4);
    let r = projection(rng, 9, 4);
    let mut norm = NormParams::new(4);
    jitter(&mut norm, rng);
    let (_, cache) = batch_norm_features(&x, &norm, true)?;
    let (gx, gs, gb) = batch_norm_backward(&cache, &norm, &r);
    let mut grads = zeros_of(&norm);
    grads.scale = gs;
    grads.shift = gb;
    let rep = joint_check(
        &[("x", &x, &gx)],
        &norm,
        &grads,
        |xs, p| dot(&batch_norm_features(&xs[0], p, true).unwrap().0, &r),
        cap,
    );
    out.push(("batch_norm".into(), rep));

    let g = leaky_relu_backward(&x, &r, LEAKY_SLOPE);
    let rep = joint_check(&[("x", &x, &g)], &NoParams, &NoParams, |xs, _| dot(&leaky_relu_features(&xs[0], LEAKY_SLOPE), &r), cap);
    out.push(("leaky_relu".into(), rep));

    let s = sigmoid_features(&x);
    let g = sigmoid_backward(&s, &r);
    let rep = joint_check(&[("x", &x, &g)], &NoParams, &NoParams, |xs, _| dot(&sigmoid_features(&xs[0]), &r), cap);
    out.push(("sigmoid".into(), rep));
    Ok(())
}

fn point_checks(rng: &mut ChaCha8Rng, cap: Option<usize>, out: &mut Named) -> Result<()> {
    let grid = CylGridSpec::new([0.0, 10.0], [-2.0, 2.0], [4, 4, 2])?;
    let cloud = random_cloud(rng, 40, 10.0);
    let mapping = assign_cells(&cloud, &grid);
    let f = projection(rng, 40, 3);
    let (sites, arg) = scatter_max(&f, &mapping)?;
    let r = projection(rng, sites.num_sites(), 3);
    let g = scatter_max_backward(&r, &arg, 40);
    let rep = joint_check(
        &[("points", &f, &g)],
        &NoParams,
        &NoParams,
        |xs, _| dot(scatter_max(&xs[0], &mapping).unwrap().0.features(), &r),
        cap,
    );
    out.push(("scatter_max".into(), rep));

    let mut mlp = Mlp(vec![
        (LinearParams::init(POINT_FEATURES, 6, rng), NormParams::new(6)),
        (LinearParams::init(6, 4, rng), NormParams::new(4)),
    ]);
    jitter(&mut mlp, rng);
    let x = projection(rng, 12, POINT_FEATURES);
    let r = projection(rng, 12, 4);
    let (_, tape) = point_mlp(&x, &mlp.0, Mode::Train)?;
    let mut grads = zeros_of(&mlp);
    let gx = point_mlp_backward(&mlp.0, &tape, &r, &mut grads.0);
    let rep = joint_check(&[("x", &x, &gx)], &mlp, &grads, |xs, p| dot(&point_mlp(&xs[0], &p.0, Mode::Train).unwrap().0, &r), cap);
    out.push(("point_mlp".into(), rep));

    let mut refine = RefineParams {
        hidden: LinearParams::init(8, 6, rng),
        out: LinearParams::init(6, 3, rng),
    };
    jitter(&mut refine, rng);
    let vox = projection(rng, sites.num_sites(), 4);
    let pts = projection(rng, 40, 4);
    let r = projection(rng, 40, 3);
    let (_, tape) = point_refine(&vox, &pts, &mapping.point_site, &refine)?;
    let mut grads = zeros_of(&refine);
    let (gv, gp) = point_refine_backward(&refine, &tape, &mapping.point_site, vox.nrows(), &r, &mut grads);
    let rep = joint_check(
        &[("voxel", &vox, &gv), ("points", &pts, &gp)],
        &refine,
        &grads,
        |xs, p| dot(&point_refine(&xs[0], &xs[1], &mapping.point_site, p).unwrap().0, &r),
        cap,
    );
    out.push(("point_refine".into(), rep));
    Ok(())
}

fn block_checks(rng: &mut ChaCha8Rng, cap: Option<usize>, out: &mut Named) -> Result<()> {
    for (variant, c_in, c_out) in [
        (BlockVariant::Asym, 3, 3),
        (BlockVariant::Asym1d, 3, 3),
        (BlockVariant::Regular, 3, 3),
        (BlockVariant::Regular, 3, 2),
    ] {
        let x = random_sparse(rng, [5, 5, 4], 0.4, c_in);
        let mut p = ResBlockParams::init(variant, c_in, c_out, rng);
        jitter(&mut p, rng);
        let rules = StageRules::for_tensor(&x, &variant_kernels(variant))?;
        let r = projection(rng, x.num_sites(), c_out);
        let (_, tape) = res_block(&x, &p, &rules, Mode::Train)?;
        let mut grads = zeros_of(&p);
        let gx = res_block_backward(&p, &rules, &tape, &r, &mut grads)?;
        let rep = joint_check(
            &[("x", x.features(), &gx)],
            &p,
            &grads,
            |xs, p| dot(res_block(&x.with_features(xs[0].clone()).unwrap(), p, &rules, Mode::Train).unwrap().0.features(), &r),
            cap,
        );
        out.push((format!("res_block.{variant}.{c_in}to{c_out}"), rep));
    }

    let c = 2;
    let x = random_sparse(rng, [6, 6, 4], 0.35, c);
    let rules = StageRules::for_tensor(&x, &variant_kernels(BlockVariant::Asym))?;
    let stride = downsample_rules(x.shared_coords(), x.shape())?;
    let mut p = DownParams {
        res: ResBlockParams::init(BlockVariant::Asym, c, c, rng),
        down: ConvBn::init([3, 3, 3], c, 2 * c, rng),
    };
    jitter(&mut p, rng);
    let r_out = projection(rng, stride.out_coords.len(), 2 * c);
    let r_skip = projection(rng, x.num_sites(), c);
    let (_, _, tape) = asym_down_block(&x, &p, &rules, &stride, Mode::Train)?;
    let mut grads = zeros_of(&p);
    let gx = asym_down_block_backward(&p, &rules, &stride, &tape, &r_out, &r_skip, &mut grads)?;
    let rep = joint_check(
        &[("x", x.features(), &gx)],
        &p,
        &grads,
        |xs, p| {
            let (o, s, _) = asym_down_block(&x.with_features(xs[0].clone()).unwrap(), p, &rules, &stride, Mode::Train).unwrap();
            dot(o.features(), &r_out) + dot(s.features(), &r_skip)
        },
        cap,
    );
    out.push(("down_block".into(), rep));

    let coarse = SparseTensor::from_shared(stride.out_coords.clone(), projection(rng, stride.out_coords.len(), 2 * c), stride.out_shape)?;
    let skip = x.clone();
    let mut p = UpParams {
        up: ConvBn::init([3, 3, 3], 2 * c, c, rng),
        fuse: ResBlockParams::init(BlockVariant::Asym, 2 * c, c, rng),
    };
    jitter(&mut p, rng);
    let r = projection(rng, skip.num_sites(), c);
    let (_, tape) = asym_up_block(&coarse, &skip, &stride, &p, &rules, Mode::Train)?;
    let mut grads = zeros_of(&p);
    let (gx, gs) = asym_up_block_backward(&p, &stride, &rules, &tape, &r, &mut grads)?;
    let rep = joint_check(
        &[("x", coarse.features(), &gx), ("skip", skip.features(), &gs)],
        &p,
        &grads,
        |xs, p| {
            let xc = coarse.with_features(xs[0].clone()).unwrap();
            let sk = skip.with_features(xs[1].clone()).unwrap();
            dot(asym_up_block(&xc, &sk, &stride, p, &rules, Mode::Train).unwrap().0.features(), &r)
        },
        cap,
    );
    out.push(("up_block".into(), rep));

    let x = random_sparse(rng, [5, 5, 4], 0.4, 3);
    let rules = StageRules::for_tensor(&x, &crate::network::params::DDCM_KERNELS)?;
    let mut p = DdcmParams::init(3, rng);
    jitter(&mut p, rng);
    let r = projection(rng, x.num_sites(), 3);
    let (_, tape) = ddcm(&x, &p, &rules, Mode::Train)?;
    let mut grads = zeros_of(&p);
    let gx = ddcm_backward(&p, &rules, &tape, &r, &mut grads)?;
    let rep = joint_check(
        &[("x", x.features(), &gx)],
        &p,
        &grads,
        |xs, p| dot(ddcm(&x.with_features(xs[0].clone()).unwrap(), p, &rules, Mode::Train).unwrap().0.features(), &r),
        cap,
    );
    out.push(("ddcm".into(), rep));

    // a single unit in inference mode exercises the running-statistics path
    let x = random_sparse(rng, [4, 4, 4], 0.4, 2);
    let rules = StageRules::for_tensor(&x, &[[3, 3, 3]])?;
    let mut p = ConvBn::init([3, 3, 3], 2, 3, rng);
    jitter(&mut p, rng);
    p.norm.running_mean.mapv_inplace(|_| rng.gen_range(-0.3..0.3));
    p.norm.running_var.mapv_inplace(|_| rng.gen_range(0.5..2.0));
    let route = crate::network::blocks::Route::Forward(rules.get([3, 3, 3])?);
    let r = projection(rng, x.num_sites(), 3);
    let (_, tape) = unit_forward(&x, &p, route, true, Mode::Infer)?;
    let mut grads = zeros_of(&p);
    let gx = crate::network::blocks::unit_backward(&p, route, &tape, &r, &mut grads)?;
    let rep = joint_check(
        &[("x", x.features(), &gx)],
        &p,
        &grads,
        |xs, p| dot(unit_forward(&x.with_features(xs[0].clone()).unwrap(), p, route, true, Mode::Infer).unwrap().0.features(), &r),
        cap,
    );
    out.push(("conv_bn_act.infer".into(), rep));
    Ok(())
}

fn loss_checks(rng: &mut ChaCha8Rng, cap: Option<usize>, out: &mut Named) -> Result<()> {
    let ign = DEFAULT_IGNORE_ID;
    let logits = projection(rng, 10, 3).mapv(|v| 2.0 * v);
    let targets: Vec<u32> = (0..10).map(|i| if i == 3 { ign } else { rng.gen_range(0..3) }).collect();
    let w = ClassWeights::new(vec![0.7, 1.3, 2.1])?;
    let (_, g) = weighted_ce(&logits, &targets, &w, ign)?;
    let rep = joint_check(&[("logits", &logits, &g)], &NoParams, &NoParams, |xs, _| weighted_ce(&xs[0], &targets, &w, ign).unwrap().0, cap);
    out.push(("weighted_ce".into(), rep));

    let probs = softmax(&logits);
    let (_, g) = lovasz_softmax(&probs, &targets, ign)?;
    let rep = joint_check(&[("probs", &probs, &g)], &NoParams, &NoParams, |xs, _| lovasz_softmax(&xs[0], &targets, ign).unwrap().0, cap);
    out.push(("lovasz_softmax".into(), rep));

    let point_logits = projection(rng, 14, 3);
    let point_targets: Vec<u32> = (0..14).map(|_| rng.gen_range(0..3)).collect();
    let terms = LossWeights::default();
    let (_, gv, gp) = total_loss(&logits, &targets, &point_logits, &point_targets, &w, &terms, ign)?;
    let rep = joint_check(
        &[("voxel", &logits, &gv), ("points", &point_logits, &gp)],
        &NoParams,
        &NoParams,
        |xs, _| total_loss(&xs[0], &targets, &xs[1], &point_targets, &w, &terms, ign).unwrap().0.total,
        cap,
    );
    out.push(("total_loss".into(), rep));
    Ok(())
}

fn random_cloud<R: Rng>(rng: &mut R, n: usize, range: f64) -> crate::io::PointCloud {
    let xyz = (0..n)
        .map(|_| {
            let rho = rng.gen_range(0.5..range);
            let theta = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            [rho * theta.cos(), rho * theta.sin(), rng.gen_range(-1.9..1.9)]
        })
        .collect();
    let intensity = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    crate::io::PointCloud::new(xyz, intensity, None).expect("consistent lengths")
}

/// Every isolated operation, each checked at [`ISOLATED_TOL`]. `cap` limits
/// the probed entries per block.
pub fn isolated_gradient_suite(seed: u64, cap: Option<usize>) -> Result<Named> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    conv_checks(&mut rng, cap, &mut out)?;
    elementwise_checks(&mut rng, cap, &mut out)?;
    point_checks(&mut rng, cap, &mut out)?;
    block_checks(&mut rng, cap, &mut out)?;
    loss_checks(&mut rng, cap, &mut out)?;
    Ok(out)
}

/// Whole-network checks on a small labeled scene.
#[derive(Debug, Clone)]
pub struct EndToEndReport {
    pub points: usize,
    pub per_tensor: GradCheckReport,
    /// `(analytic, numeric, relative error)` of a random directional derivative.
    pub jvp: (f64, f64, f64),
}

impl EndToEndReport {
    pub fn passed(&self) -> bool {
        self.per_tensor.passed() && self.jvp.2 < END_TO_END_TOL
    }
}

/// Toy network of the given block variant on a scene of at most 200 points.
pub fn toy_network_config(variant: BlockVariant) -> NetworkConfig {
    NetworkConfig {
        num_classes: 3,
        base_channels: 4,
        num_stages: 2,
        point_mlp_widths: vec![8],
        block_variant: variant,
        grid: CylGridSpec::new([0.0, 20.0], [-3.0, 2.0], [12, 16, 8]).expect("valid grid"),
        use_intensity: true,
    }
}

/// Gradient of the full training objective w.r.t. every trainable tensor.
pub fn end_to_end_gradient_check(seed: u64, variant: BlockVariant, cap: Option<usize>) -> Result<EndToEndReport> {
    let config = toy_network_config(variant);
    let spec = SyntheticSceneSpec {
        num_points: 180,
        max_range: 20.0,
        ..SyntheticSceneSpec::default()
    };
    let cloud = generate_synthetic_scene(&spec.with_seed(seed))?;
    let labels = cloud.labels.clone().ok_or(Error::NoLabels)?;
    let scene = Scene::prepare(&cloud, &config)?;
    let voxel_labels = encode_cell_labels(&scene.mapping, &labels, LabelEncoding::Majority, DEFAULT_IGNORE_ID)?;
    let weights = ClassWeights::from_counts(&label_counts([labels.as_slice()], config.num_classes))?;
    let terms = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = crate::network::ModelParams::init(&config, &mut rng);
    jitter(&mut params, &mut rng);
    let loss = |p: &crate::network::ModelParams| -> f64 {
        let (out, _) = forward_scene(&scene, &config, p, Mode::Train).expect("forward");
        total_loss(out.voxel_logits.features(), &voxel_labels, &out.point_logits, &labels, &weights, &terms, DEFAULT_IGNORE_ID)
            .expect("loss")
            .0
            .total
    };
    let (out, tape) = forward_scene(&scene, &config, &params, Mode::Train)?;
    let (_, gv, gp) = total_loss(out.voxel_logits.features(), &voxel_labels, &out.point_logits, &labels, &weights, &terms, DEFAULT_IGNORE_ID)?;
    let grads = backward_scene(&scene, &params, &tape, &gv, &gp)?;
    let mut per_tensor = check_param_gradients(&params, &grads, loss, END_TO_END_TOL, cap);
    per_tensor.tol = END_TO_END_TOL;
    let jvp = jvp_check(&params, &grads, loss, seed ^ 0x5eed);
    Ok(EndToEndReport {
        points: cloud.len(),
        per_tensor,
        jvp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_small_run() {
        let r = oracle_suite(36, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.by_kernel.iter().all(|k| k.instances == 4));
    }

    #[test]
    fn isolated_suite_passes() {
        for (name, rep) in isolated_gradient_suite(2, Some(12)).unwrap() {
            assert!(rep.passed(), "{name}: {:?}", rep.failures());
        }
    }

    #[test]
    fn end_to_end_passes() {
        let r = end_to_end_gradient_check(3, BlockVariant::Asym, Some(3)).unwrap();
        assert!(r.points <= 200);
        assert!(r.passed(), "{:?} {:?}", r.per_tensor.failures(), r.jvp);
    }
}
