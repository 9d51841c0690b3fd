//! The training loop and evaluation helpers.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::ConfusionMatrix;
use crate::io::PointCloud;
use crate::network::model::argmax_rows;
use crate::network::{ModelParams, Mode, Network, NetworkConfig, ParamSet, Scene};
use crate::par;
use crate::partition::{encode_cell_labels, LabelEncoding};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::loss::{label_counts, total_loss, ClassWeights, LossReport, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Scenes per optimizer step; gradients are averaged, batch norm runs per scene.
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss_weights: LossWeights,
    pub ignore_id: u32,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 1,
            seed: 0,
            adam: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            ignore_id: crate::io::DEFAULT_IGNORE_ID,
        }
    }
}

/// A prepared scan with point targets and majority-encoded voxel targets.
#[derive(Debug, Clone)]
pub struct LabeledScene {
    pub scene: Scene,
    pub point_labels: Vec<u32>,
    pub voxel_labels: Vec<u32>,
}

impl LabeledScene {
    pub fn new(cloud: &PointCloud, config: &NetworkConfig, ignore_id: u32) -> Result<Self> {
        let labels = cloud.labels.clone().ok_or(Error::NoLabels)?;
        let scene = Scene::prepare(cloud, config)?;
        let voxel_labels = encode_cell_labels(&scene.mapping, &labels, LabelEncoding::Majority, ignore_id)?;
        Ok(LabeledScene {
            scene,
            point_labels: labels,
            voxel_labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over the epoch's iterations.
    pub loss: LossReport,
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub history: Vec<EpochRecord>,
    pub class_weights: ClassWeights,
    pub optimizer: OptimizerState,
}

/// Forward, loss and backward on every scene of a batch, then one Adam
/// update with the mean gradient. Running statistics fold in batch order.
/// Returns the per-scene loss reports.
pub fn train_step(
    net: &mut Network,
    batch: &[&LabeledScene],
    weights: &ClassWeights,
    opts: &TrainOptions,
    state: &mut OptimizerState,
) -> Result<Vec<LossReport>> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let net_ref = &*net;
    let results = par::map_slice(batch, |sample| {
        let (out, tape) = net_ref.forward_scene(&sample.scene, Mode::Train)?;
        let (report, g_voxel, g_point) = total_loss(
            out.voxel_logits.features(),
            &sample.voxel_labels,
            &out.point_logits,
            &sample.point_labels,
            weights,
            &opts.loss_weights,
            opts.ignore_id,
        )?;
        if !report.is_finite() {
            return Err(Error::InvalidValue("non-finite loss".into()));
        }
        let grads = net_ref.backward(&sample.scene, &tape, &g_voxel, &g_point)?;
        Ok((report, grads, tape))
    });
    let mut reports = Vec::with_capacity(batch.len());
    let mut tapes = Vec::with_capacity(batch.len());
    let mut total: Option<ModelParams> = None;
    for r in results {
        let (report, grads, tape) = r?;
        match &mut total {
            Some(t) => t.add_assign(&grads),
            None => total = Some(grads),
        }
        reports.push(report);
        tapes.push(tape);
    }
    let mut grads = total.expect("batch is non-empty");
    if batch.len() > 1 {
        let inv = 1.0 / batch.len() as f64;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= inv);
        }
    }
    adam_step(&mut net.params, &grads, state)?;
    for tape in &tapes {
        net.apply_running_stats(tape);
    }
    Ok(reports)
}

/// Trains from a fresh initialization. Each epoch visits the scenes in a
/// seeded shuffled order, `batch_size` scenes per optimizer step (the last
/// batch may be smaller); validation runs in inference mode.
pub fn train_loop(
    config: &NetworkConfig,
    train: &[PointCloud],
    val: &[PointCloud],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let samples: Vec<LabeledScene> = par::map_slice(train, |c| LabeledScene::new(c, config, opts.ignore_id))
        .into_iter()
        .collect::<Result<_>>()?;
    let counts = label_counts(samples.iter().map(|s| s.point_labels.as_slice()), config.num_classes);
    let class_weights = ClassWeights::from_counts(&counts)?;
    let mut net = Network::new(config.clone(), opts.seed)?;
    let mut state = OptimizerState::new(&net.params, opts.adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = LossReport::default();
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&LabeledScene> = chunk.iter().map(|&i| &samples[i]).collect();
            for r in train_step(&mut net, &batch, &class_weights, opts, &mut state)? {
                sum.accumulate(&r);
            }
        }
        let val_miou = if val.is_empty() {
            None
        } else {
            evaluate(&net, val, opts.ignore_id)?.miou()
        };
        history.push(EpochRecord {
            epoch,
            loss: sum.scaled(1.0 / samples.len() as f64),
            val_miou,
        });
    }
    Ok(TrainOutcome {
        network: net,
        history,
        class_weights,
        optimizer: state,
    })
}

/// Inference-mode predictions for every scan, in input order.
pub fn predict_all(net: &Network, clouds: &[PointCloud]) -> Result<Vec<Vec<u32>>> {
    par::map_slice(clouds, |c| {
        net.forward(c, Mode::Infer).map(|o| argmax_rows(&o.point_logits))
    })
    .into_iter()
    .collect()
}

/// Confusion matrix over labeled scans; per-scan matrices merge in input order.
pub fn evaluate(net: &Network, clouds: &[PointCloud], ignore_id: u32) -> Result<ConfusionMatrix> {
    let k = net.config.num_classes;
    let per_scan: Vec<Result<ConfusionMatrix>> = par::map_slice(clouds, |c| {
        let labels = c.labels.as_ref().ok_or(Error::NoLabels)?;
        let out = net.forward(c, Mode::Infer)?;
        let mut cm = ConfusionMatrix::new(k, ignore_id);
        cm.update(labels, &argmax_rows(&out.point_logits))?;
        Ok(cm)
    });
    let mut total = ConfusionMatrix::new(k, ignore_id);
    for cm in per_scan {
        total.merge(&cm?)?;
    }
    Ok(total)
}

pub const METRICS_HEADER: &str = "epoch,l_voxel_ce,l_voxel_lovasz,l_point_ce,total,val_miou";

/// Per-epoch metrics; `val_miou` is blank when there was no validation split.
pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in history {
        let miou = r.val_miou.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.loss.l_voxel_ce, r.loss.l_voxel_lovasz, r.loss.l_point_ce, r.loss.total, miou
        );
    }
    s
}
