//! Weighted cross-entropy, Lovász-softmax and the combined objective.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// Per-class weights for cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Vec<f64>,
}

/// Offset added to class frequencies before the inverse square root.
pub const FREQ_EPSILON: f64 = 1e-3;

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        ClassWeights {
            w: vec![1.0; num_classes],
        }
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidValue("class weights must be finite and nonnegative".into()));
        }
        if !w.iter().any(|v| *v > 0.0) {
            return Err(Error::InvalidValue("at least one class weight must be positive".into()));
        }
        Ok(ClassWeights { w })
    }

    /// `w_c = 1/√(freq_c + 1e-3)` from label counts.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::NoLabels);
        }
        ClassWeights::new(
            counts
                .iter()
                .map(|&n| 1.0 / (n as f64 / total as f64 + FREQ_EPSILON).sqrt())
                .collect(),
        )
    }

    pub fn num_classes(&self) -> usize {
        self.w.len()
    }
}

fn check_targets(rows: usize, k: usize, targets: &[u32], ignore_id: u32) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::LabelCount {
            labels: targets.len(),
            points: rows,
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t != ignore_id && t as usize >= k) {
        return Err(Error::ClassOutOfRange {
            id: t,
            num_classes: k,
        });
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Pulls a gradient w.r.t. softmax outputs back to the logits.
pub fn softmax_backward(probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Array2<f64> {
    let dot = (probs * grad_probs).sum_axis(Axis(1)).insert_axis(Axis(1));
    probs * &(grad_probs - &dot)
}

/// `Σ w[t]·(−log softmax(l)[t]) / Σ w[t]` over non-ignored rows, with its
/// gradient w.r.t. the logits.
pub fn weighted_ce(
    logits: &Array2<f64>,
    targets: &[u32],
    weights: &ClassWeights,
    ignore_id: u32,
) -> Result<(f64, Array2<f64>)> {
    let k = logits.ncols();
    if weights.num_classes() != k {
        return Err(Error::Shape(format!("{} class weights for {k} logits", weights.num_classes())));
    }
    check_targets(logits.nrows(), k, targets, ignore_id)?;
    let probs = softmax(logits);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut total_w = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == ignore_id {
            continue;
        }
        let t = t as usize;
        let row = logits.row(i);
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let w = weights.w[t];
        loss += w * (lse - row[t]);
        total_w += w;
        let mut g = grad.row_mut(i);
        g.assign(&probs.row(i));
        g[t] -= 1.0;
        g *= w;
    }
    if total_w == 0.0 {
        return Ok((0.0, Array2::zeros(logits.raw_dim())));
    }
    grad /= total_w;
    Ok((loss / total_w, grad))
}

/// Lovász-softmax over classes present in the targets, with its gradient
/// w.r.t. the probabilities.
pub fn lovasz_softmax(probs: &Array2<f64>, targets: &[u32], ignore_id: u32) -> Result<(f64, Array2<f64>)> {
    let k = probs.ncols();
    check_targets(probs.nrows(), k, targets, ignore_id)?;
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != ignore_id).collect();
    let mut grad = Array2::zeros(probs.raw_dim());
    let mut present = 0usize;
    let mut loss = 0.0;
    for c in 0..k {
        let fg: Vec<bool> = rows.iter().map(|&i| targets[i] as usize == c).collect();
        let gts = fg.iter().filter(|&&g| g).count();
        if gts == 0 {
            continue;
        }
        present += 1;
        let errors: Vec<f64> = rows
            .iter()
            .zip(&fg)
            .map(|(&i, &g)| (if g { 1.0 } else { 0.0 } - probs[[i, c]]).abs())
            .collect();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        // stable sort keeps original order among equal errors
        order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
        let mut cum_fg = 0usize;
        let mut cum_bg = 0usize;
        let mut prev = 0.0;
        for &j in &order {
            if fg[j] {
                cum_fg += 1;
            } else {
                cum_bg += 1;
            }
            let inter = (gts - cum_fg) as f64;
            let union = (gts + cum_bg) as f64;
            let jac = 1.0 - inter / union;
            let step = jac - prev;
            prev = jac;
            loss += errors[j] * step;
            // d|g − p|/dp is −1 on foreground rows and +1 elsewhere
            let i = rows[j];
            grad[[i, c]] += if fg[j] { -step } else { step };
        }
    }
    if present == 0 {
        return Ok((0.0, grad));
    }
    let n = present as f64;
    grad /= n;
    Ok((loss / n, grad))
}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub voxel_ce: f64,
    pub voxel_lovasz: f64,
    pub point_ce: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            voxel_ce: 1.0,
            voxel_lovasz: 1.0,
            point_ce: 1.0,
        }
    }
}

/// Loss components; `total` is their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub l_voxel_ce: f64,
    pub l_voxel_lovasz: f64,
    pub l_point_ce: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_voxel_ce, self.l_voxel_lovasz, self.l_point_ce, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            l_voxel_ce: self.l_voxel_ce * s,
            l_voxel_lovasz: self.l_voxel_lovasz * s,
            l_point_ce: self.l_point_ce * s,
            total: self.total * s,
        }
    }

    pub fn accumulate(&mut self, other: &LossReport) {
        self.l_voxel_ce += other.l_voxel_ce;
        self.l_voxel_lovasz += other.l_voxel_lovasz;
        self.l_point_ce += other.l_point_ce;
        self.total += other.total;
    }
}

/// Combined objective and the gradients w.r.t. voxel and point logits.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    voxel_logits: &Array2<f64>,
    voxel_targets: &[u32],
    point_logits: &Array2<f64>,
    point_targets: &[u32],
    weights: &ClassWeights,
    terms: &LossWeights,
    ignore_id: u32,
) -> Result<(LossReport, Array2<f64>, Array2<f64>)> {
    let (vce, g_vce) = weighted_ce(voxel_logits, voxel_targets, weights, ignore_id)?;
    let probs = softmax(voxel_logits);
    let (lov, g_probs) = lovasz_softmax(&probs, voxel_targets, ignore_id)?;
    let (pce, g_pce) = weighted_ce(point_logits, point_targets, weights, ignore_id)?;
    let g_lov = softmax_backward(&probs, &g_probs);
    let g_voxel = g_vce * terms.voxel_ce + g_lov * terms.voxel_lovasz;
    let g_point = g_pce * terms.point_ce;
    let report = LossReport {
        l_voxel_ce: terms.voxel_ce * vce,
        l_voxel_lovasz: terms.voxel_lovasz * lov,
        l_point_ce: terms.point_ce * pce,
        total: terms.voxel_ce * vce + terms.voxel_lovasz * lov + terms.point_ce * pce,
    };
    Ok((report, g_voxel, g_point))
}

/// Class label counts over `[0, K)`, ignoring everything else.
pub fn label_counts<'a>(labels: impl IntoIterator<Item = &'a [u32]>, num_classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; num_classes];
    for ls in labels {
        for &l in ls {
            if (l as usize) < num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    counts
}
