//! Whole-network assembly.

use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::PointCloud;
use crate::partition::{assign_cells, scatter_max, scatter_max_backward, VoxelMapping};
use crate::sparse::{
    sparse_conv_backward, sparse_conv_forward, Coord, Rulebook, SparseTensor, TensorContainer,
};

use super::blocks::{
    asym_down_block, asym_down_block_backward, asym_up_block, asym_up_block_backward, ddcm,
    ddcm_backward, downsample_rules, fold_ddcm, fold_down, fold_up, point_refine,
    point_refine_backward, DdcmTape, DownTape, RefineTape, StageRules, UpTape,
};
use super::config::NetworkConfig;
use super::features::{point_input_features, point_mlp, point_mlp_backward, MlpTape};
use super::params::{ModelParams, DDCM_KERNELS};
use super::Mode;

/// Active sites and rulebooks of every resolution stage for one scan.
#[derive(Debug, Clone)]
pub struct Topology {
    /// `stages[i]` holds the sites at resolution `i` (0 = full grid).
    pub stages: Vec<StageRules>,
    /// `down[i]` maps stage `i` to stage `i + 1`.
    pub down: Vec<Rulebook>,
}

impl Topology {
    pub fn build(cells: Arc<[Coord]>, shape: [usize; 3], config: &NetworkConfig) -> Result<Self> {
        let mut kernels: Vec<[usize; 3]> = config.block_variant.branch_kernels().to_vec();
        kernels.push([1, 1, 1]);
        let mut stages = Vec::with_capacity(config.num_stages + 1);
        let mut down = Vec::with_capacity(config.num_stages);
        let mut rules = StageRules::new(cells, shape);
        for _ in 0..config.num_stages {
            for &k in &kernels {
                rules.ensure(k)?;
            }
            let rb = downsample_rules(&rules.coords, rules.shape)?;
            let next = StageRules::new(rb.out_coords.clone(), rb.out_shape);
            stages.push(rules);
            down.push(rb);
            rules = next;
        }
        for k in DDCM_KERNELS {
            rules.ensure(k)?;
        }
        stages.push(rules);
        Ok(Topology { stages, down })
    }
}

/// Everything about a scan that does not depend on the parameters.
#[derive(Debug, Clone)]
pub struct Scene {
    pub mapping: VoxelMapping,
    pub point_features: Array2<f64>,
    pub topology: Topology,
}

impl Scene {
    pub fn prepare(cloud: &PointCloud, config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        cloud.validate()?;
        if cloud.is_empty() {
            return Err(Error::InvalidValue("scan has no points".into()));
        }
        let mapping = assign_cells(cloud, &config.grid);
        let point_features = point_input_features(cloud, &mapping, &config.grid, config.use_intensity)?;
        let topology = Topology::build(mapping.cells.clone(), mapping.shape, config)?;
        Ok(Scene {
            mapping,
            point_features,
            topology,
        })
    }

    pub fn num_points(&self) -> usize {
        self.mapping.num_points()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// K channels on the occupied full-resolution cells.
    pub voxel_logits: SparseTensor,
    /// N×K, one row per input point.
    pub point_logits: Array2<f64>,
}

/// Saved activations of a whole forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    mlp: MlpTape,
    argmax: Array2<usize>,
    down: Vec<DownTape>,
    ddcm: DdcmTape,
    up: Vec<UpTape>,
    decoder: SparseTensor,
    refine: RefineTape,
}

/// Runs the network on a prepared scene.
pub fn forward_scene(
    scene: &Scene,
    config: &NetworkConfig,
    params: &ModelParams,
    mode: Mode,
) -> Result<(ForwardOutput, Tape)> {
    let s = config.num_stages;
    let topo = &scene.topology;
    if topo.down.len() != s || params.down.len() != s || params.up.len() != s {
        return Err(Error::Shape("stage count differs between config, params and scene".into()));
    }
    let (mlp_out, mlp) = point_mlp(&scene.point_features, &params.mlp, mode)?;
    let (mut x, argmax) = scatter_max(&mlp_out, &scene.mapping)?;
    let mut skips = Vec::with_capacity(s);
    let mut down = Vec::with_capacity(s);
    for i in 0..s {
        let (out, skip, t) = asym_down_block(&x, &params.down[i], &topo.stages[i], &topo.down[i], mode)?;
        skips.push(skip);
        down.push(t);
        x = out;
    }
    let (mut x, ddcm_tape) = ddcm(&x, &params.ddcm, &topo.stages[s], mode)?;
    let mut up = Vec::with_capacity(s);
    for i in (0..s).rev() {
        let (out, t) = asym_up_block(&x, &skips[i], &topo.down[i], &params.up[i], &topo.stages[i], mode)?;
        up.push(t);
        x = out;
    }
    up.reverse();
    let voxel_logits = sparse_conv_forward(&x, &params.head, topo.stages[0].get([1, 1, 1])?)?;
    let (point_logits, refine) = point_refine(x.features(), &mlp_out, &scene.mapping.point_site, &params.refine)?;
    Ok((
        ForwardOutput {
            voxel_logits,
            point_logits,
        },
        Tape {
            mlp,
            argmax,
            down,
            ddcm: ddcm_tape,
            up,
            decoder: x,
            refine,
        },
    ))
}

/// Gradients of all trainable parameters given gradients at both outputs.
/// Buffer entries of the result are zero.
pub fn backward_scene(
    scene: &Scene,
    params: &ModelParams,
    tape: &Tape,
    grad_voxel: &Array2<f64>,
    grad_point: &Array2<f64>,
) -> Result<ModelParams> {
    let topo = &scene.topology;
    let s = params.down.len();
    let mut grads = params.zeros_like();
    let (mut g_x, g_mlp_refine) = point_refine_backward(
        &params.refine,
        &tape.refine,
        &scene.mapping.point_site,
        tape.decoder.num_sites(),
        grad_point,
        &mut grads.refine,
    );
    let head = sparse_conv_backward(&tape.decoder, &params.head, topo.stages[0].get([1, 1, 1])?, grad_voxel)?;
    grads.head.weights += &head.weights;
    grads.head.bias += &head.bias;
    g_x += &head.input;
    let mut g_skips = vec![None; s];
    for i in 0..s {
        let (gx, gskip) = asym_up_block_backward(
            &params.up[i],
            &topo.down[i],
            &topo.stages[i],
            &tape.up[i],
            &g_x,
            &mut grads.up[i],
        )?;
        g_skips[i] = Some(gskip);
        g_x = gx;
    }
    g_x = ddcm_backward(&params.ddcm, &topo.stages[s], &tape.ddcm, &g_x, &mut grads.ddcm)?;
    for i in (0..s).rev() {
        let gskip = g_skips[i].take().expect("filled above");
        g_x = asym_down_block_backward(
            &params.down[i],
            &topo.stages[i],
            &topo.down[i],
            &tape.down[i],
            &g_x,
            &gskip,
            &mut grads.down[i],
        )?;
    }
    let mut g_mlp = scatter_max_backward(&g_x, &tape.argmax, scene.num_points());
    g_mlp += &g_mlp_refine;
    point_mlp_backward(&params.mlp, &tape.mlp, &g_mlp, &mut grads.mlp);
    Ok(grads)
}

/// Folds the batch statistics recorded in a training-mode tape into the
/// running statistics.
pub fn apply_running_stats(params: &mut ModelParams, tape: &Tape) {
    for ((_, norm), cache) in params.mlp.iter_mut().zip(tape.mlp.norm_caches()) {
        if let Some((mean, var)) = &cache.batch_stats {
            norm.update_running(mean, var);
        }
    }
    for (p, t) in params.down.iter_mut().zip(&tape.down) {
        fold_down(p, t);
    }
    fold_ddcm(&mut params.ddcm, &tape.ddcm);
    for (p, t) in params.up.iter_mut().zip(&tape.up) {
        fold_up(p, t);
    }
}

/// Full pipeline on a raw cloud.
pub fn forward(
    cloud: &PointCloud,
    config: &NetworkConfig,
    params: &ModelParams,
    mode: Mode,
) -> Result<ForwardOutput> {
    let scene = Scene::prepare(cloud, config)?;
    forward_scene(&scene, config, params, mode).map(|(out, _)| out)
}

/// Row-wise argmax; ties go to the smaller class.
pub fn argmax_rows(logits: &Array2<f64>) -> Vec<u32> {
    logits
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

/// Configuration plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ModelParams,
}

impl Network {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(&config, &mut rng);
        Ok(Network { config, params })
    }

    pub fn prepare(&self, cloud: &PointCloud) -> Result<Scene> {
        Scene::prepare(cloud, &self.config)
    }

    pub fn forward_scene(&self, scene: &Scene, mode: Mode) -> Result<(ForwardOutput, Tape)> {
        forward_scene(scene, &self.config, &self.params, mode)
    }

    pub fn backward(
        &self,
        scene: &Scene,
        tape: &Tape,
        grad_voxel: &Array2<f64>,
        grad_point: &Array2<f64>,
    ) -> Result<ModelParams> {
        backward_scene(scene, &self.params, tape, grad_voxel, grad_point)
    }

    pub fn apply_running_stats(&mut self, tape: &Tape) {
        apply_running_stats(&mut self.params, tape);
    }

    pub fn forward(&self, cloud: &PointCloud, mode: Mode) -> Result<ForwardOutput> {
        forward(cloud, &self.config, &self.params, mode)
    }

    /// Per-point train ids from the refined logits (inference mode).
    pub fn predict(&self, cloud: &PointCloud) -> Result<Vec<u32>> {
        let out = self.forward(cloud, Mode::Infer)?;
        Ok(argmax_rows(&out.point_logits))
    }

    pub fn to_container(&self) -> TensorContainer {
        self.params.to_container(self.config.to_header())
    }

    pub fn from_container(container: &TensorContainer) -> Result<Self> {
        let config = NetworkConfig::from_header(&container.header)?;
        let params = ModelParams::from_container(&config, container)?;
        Ok(Network { config, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Network::from_container(&TensorContainer::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{generate_synthetic_scene, SyntheticSceneSpec};
    use crate::network::BlockVariant;
    use crate::par;
    use crate::partition::CylGridSpec;
    use rand::seq::SliceRandom;

    fn config(variant: BlockVariant) -> NetworkConfig {
        NetworkConfig {
            num_classes: 3,
            base_channels: 4,
            num_stages: 2,
            point_mlp_widths: vec![8],
            block_variant: variant,
            grid: CylGridSpec::new([0.0, 20.0], [-3.0, 2.0], [16, 16, 8]).unwrap(),
            use_intensity: true,
        }
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let spec = SyntheticSceneSpec {
            num_points: n,
            max_range: 20.0,
            ..SyntheticSceneSpec::default()
        };
        generate_synthetic_scene(&spec.with_seed(seed)).unwrap()
    }

    #[test]
    fn single_point_shapes() {
        let net = Network::new(config(BlockVariant::Asym), 0).unwrap();
        let c = PointCloud::new(vec![[3.0, 1.0, -1.0]], vec![0.4], None).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let out = net.forward(&c, mode).unwrap();
            assert_eq!(out.voxel_logits.num_sites(), 1);
            assert_eq!(out.voxel_logits.channels(), 3);
            assert_eq!(out.point_logits.shape(), &[1, 3]);
            assert!(out.point_logits.iter().all(|v| v.is_finite()));
        }
        assert!(net.forward(&PointCloud::default(), Mode::Infer).is_err());
    }

    #[test]
    fn voxel_logits_cover_occupied_cells() {
        for v in [BlockVariant::Asym, BlockVariant::Asym1d, BlockVariant::Regular] {
            let net = Network::new(config(v), 1).unwrap();
            let c = cloud(1, 300);
            let scene = net.prepare(&c).unwrap();
            let (out, _) = net.forward_scene(&scene, Mode::Train).unwrap();
            assert_eq!(out.voxel_logits.coords(), scene.mapping.cells.as_ref());
            assert_eq!(out.point_logits.nrows(), c.len());
        }
    }

    #[test]
    fn point_order_equivariance() {
        let net = Network::new(config(BlockVariant::Asym), 2).unwrap();
        let c = cloud(2, 400);
        let mut perm: Vec<usize> = (0..c.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
        let shuffled = c.permuted(&perm);
        let a = net.forward(&c, Mode::Infer).unwrap();
        let b = net.forward(&shuffled, Mode::Infer).unwrap();
        assert_eq!(a.voxel_logits, b.voxel_logits);
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(a.point_logits.row(i), b.point_logits.row(j));
        }
        // batch statistics sum in a different order
        let a = net.forward(&c, Mode::Train).unwrap();
        let b = net.forward(&shuffled, Mode::Train).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            for k in 0..3 {
                assert!((a.point_logits[[i, k]] - b.point_logits[[j, k]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inference_is_pure_and_thread_independent() {
        let net = Network::new(config(BlockVariant::Asym), 3).unwrap();
        let c = cloud(3, 500);
        let a = net.forward(&c, Mode::Infer).unwrap();
        let b = par::with_threads(1, || net.forward(&c, Mode::Infer).unwrap());
        let d = par::with_threads(3, || net.forward(&c, Mode::Infer).unwrap());
        assert_eq!(a.point_logits, b.point_logits);
        assert_eq!(a.point_logits, d.point_logits);
        assert_eq!(net.predict(&c).unwrap(), argmax_rows(&a.point_logits));
    }

    #[test]
    fn running_stats_only_change_buffers() {
        let mut net = Network::new(config(BlockVariant::Asym), 4).unwrap();
        let before = net.params.clone();
        let scene = net.prepare(&cloud(4, 300)).unwrap();
        let (_, tape) = net.forward_scene(&scene, Mode::Train).unwrap();
        net.apply_running_stats(&tape);
        use crate::network::{ParamSet, Slot};
        for (a, b) in before.tensors().iter().zip(net.params.tensors()) {
            match a.slot {
                Slot::Trainable => assert_eq!(a.data, b.data, "{}", a.name),
                Slot::Buffer => assert_ne!(a.data, b.data, "{}", a.name),
            }
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        let l = Array2::from_shape_vec((2, 3), vec![1.0, 1.0, 0.0, -1.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&l), vec![0, 1]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(config(BlockVariant::Asym1d), 6).unwrap();
        let path = dir.path().join("m.ckpt");
        net.save(&path).unwrap();
        assert_eq!(Network::load(&path).unwrap(), net);
    }
}
