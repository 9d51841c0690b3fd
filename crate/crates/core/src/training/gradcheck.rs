//! Central finite-difference gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{ParamSet, Slot};

/// Step for central differences at value `v`: `∛ε · (|v| + 1)`.
pub fn fd_step(v: f64) -> f64 {
    f64::EPSILON.cbrt() * (v.abs() + 1.0)
}

/// `max|a − n| / max(max|a|, max|n|)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        diff = diff.max((a - n).abs());
        scale = scale.max(a.abs()).max(n.abs());
    }
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Safety factor on the round-off estimate of a central difference.
pub const NOISE_FACTOR: f64 = 64.0;

/// Round-off bound of `(up − down) / 2h`.
fn roundoff(up: f64, down: f64, h: f64) -> f64 {
    NOISE_FACTOR * f64::EPSILON * (up.abs() + down.abs()) / (2.0 * h)
}

/// Like [`relative_error`], but each entry's discrepancy is first reduced by
/// the round-off bound of its numeric derivative. Parameters whose true
/// gradient is zero (a bias feeding a batch-normalized channel) then compare
/// as equal instead of as two unrelated round-off values.
pub fn resolved_error(analytic: &[f64], numeric: &[f64], noise: &[f64]) -> f64 {
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for ((a, n), e) in analytic.iter().zip(numeric).zip(noise) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        diff = diff.max(((a - n).abs() - e).max(0.0));
        scale = scale.max(a.abs()).max(n.abs());
    }
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

/// Step reductions tried for an entry that disagrees at the default step.
pub const STEP_LADDER: [f64; 3] = [1.0, 1.0 / 16.0, 1.0 / 256.0];

/// Numeric derivative of `eval` at `v`, compared against `analytic`.
///
/// The objective is only piecewise smooth (LeakyReLU, max pooling, sorting
/// in the Lovász loss). When a kink lies within `±h` of `v` the central
/// difference mixes two slopes, so an entry that disagrees at the default
/// step is re-probed with smaller steps and the best agreement is kept. A
/// wrong analytic value disagrees at every step.
struct Probe {
    numeric: f64,
    noise: f64,
    finite: bool,
    refined: bool,
}

fn probe<F: FnMut(f64) -> f64>(mut eval: F, v: f64, analytic: f64, tol: f64) -> Probe {
    let mut best: Option<(f64, Probe)> = None;
    for (k, scale) in STEP_LADDER.iter().enumerate() {
        let h = fd_step(v) * scale;
        let up = eval(v + h);
        let down = eval(v - h);
        let p = Probe {
            numeric: (up - down) / (2.0 * h),
            noise: roundoff(up, down, h),
            finite: up.is_finite() && down.is_finite(),
            refined: k > 0,
        };
        let gap = ((analytic - p.numeric).abs() - p.noise).max(0.0);
        let ok = gap <= tol * analytic.abs().max(p.numeric.abs());
        if !p.finite {
            return p;
        }
        if best.as_ref().is_none_or(|(g, _)| gap < *g) {
            best = Some((gap, p));
        }
        if ok {
            break;
        }
    }
    best.expect("ladder is non-empty").1
}

/// Outcome for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries that needed a step smaller than `∛ε·(|v|+1)`.
    pub refined: usize,
    /// False when a perturbed evaluation produced a non-finite value.
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.finite && b.max_rel_error < self.tol)
    }

    pub fn max_error(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_error))
    }

    pub fn failures(&self) -> Vec<&BlockReport> {
        self.blocks
            .iter()
            .filter(|b| !b.finite || b.max_rel_error >= self.tol)
            .collect()
    }
}

/// A named block of inputs and the analytic gradient for it.
#[derive(Debug, Clone)]
pub struct Block {
    pub name: String,
    pub values: Vec<f64>,
    pub analytic: Vec<f64>,
}

/// Entry indices to probe: all of them, or `cap` evenly spaced ones.
fn probe_indices(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks `f` against the analytic gradients stored in `blocks`.
///
/// `f` receives the current values of every block.
pub fn finite_diff_check<F>(mut f: F, blocks: &[Block], tol: f64, cap: Option<usize>) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut values: Vec<Vec<f64>> = blocks.iter().map(|b| b.values.clone()).collect();
    let mut reports = Vec::with_capacity(blocks.len());
    for (bi, block) in blocks.iter().enumerate() {
        assert_eq!(block.values.len(), block.analytic.len(), "{}", block.name);
        let idx = probe_indices(block.values.len(), cap);
        let mut finite = true;
        let mut numeric = Vec::with_capacity(idx.len());
        let mut analytic = Vec::with_capacity(idx.len());
        let mut noise = Vec::with_capacity(idx.len());
        let mut refined = 0;
        for &i in &idx {
            let v = values[bi][i];
            let p = probe(
                |x| {
                    values[bi][i] = x;
                    f(&values)
                },
                v,
                block.analytic[i],
                tol,
            );
            values[bi][i] = v;
            finite &= p.finite;
            refined += p.refined as usize;
            numeric.push(p.numeric);
            noise.push(p.noise);
            analytic.push(block.analytic[i]);
        }
        reports.push(BlockReport {
            name: block.name.clone(),
            max_rel_error: resolved_error(&analytic, &numeric, &noise),
            checked: idx.len(),
            refined,
            finite,
        });
    }
    GradCheckReport { blocks: reports, tol }
}

/// Per-tensor check of every trainable tensor of a parameter collection.
pub fn check_param_gradients<P, F>(
    params: &P,
    analytic: &P,
    mut loss: F,
    tol: f64,
    cap: Option<usize>,
) -> GradCheckReport
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    let grads = analytic.tensors();
    let mut work = params.clone();
    let mut reports = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        if g.slot != Slot::Trainable {
            continue;
        }
        let idx = probe_indices(g.data.len(), cap);
        let mut numeric = Vec::with_capacity(idx.len());
        let mut ana = Vec::with_capacity(idx.len());
        let mut noise = Vec::with_capacity(idx.len());
        let mut finite = true;
        let mut refined = 0;
        for &i in &idx {
            let v = work.tensors()[ti].data[i];
            let p = probe(
                |x| {
                    set_entry(&mut work, ti, i, x);
                    loss(&work)
                },
                v,
                g.data[i],
                tol,
            );
            set_entry(&mut work, ti, i, v);
            finite &= p.finite;
            refined += p.refined as usize;
            numeric.push(p.numeric);
            noise.push(p.noise);
            ana.push(g.data[i]);
        }
        reports.push(BlockReport {
            name: g.name.clone(),
            max_rel_error: resolved_error(&ana, &numeric, &noise),
            checked: idx.len(),
            refined,
            finite,
        });
    }
    GradCheckReport { blocks: reports, tol }
}

fn set_entry<P: ParamSet>(params: &mut P, tensor: usize, i: usize, v: f64) {
    params.tensors_mut()[tensor].data[i] = v;
}

/// Directional derivative check along a random unit direction over all
/// trainable entries, with step `∛ε`. Returns `(analytic, numeric, relative error)`.
pub fn jvp_check<P, F>(params: &P, analytic: &P, mut loss: F, seed: u64) -> (f64, f64, f64)
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir = params.clone();
    for t in dir.tensors_mut() {
        for v in t.data.iter_mut() {
            *v = if t.slot == Slot::Trainable { rng.gen_range(-1.0..1.0) } else { 0.0 };
        }
    }
    let norm = dir
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > 0.0 {
        for t in dir.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v /= norm);
        }
    }
    let a: f64 = analytic
        .tensors()
        .iter()
        .zip(dir.tensors())
        .filter(|(g, _)| g.slot == Slot::Trainable)
        .map(|(g, d)| g.data.iter().zip(d.data.iter()).map(|(x, y)| x * y).sum::<f64>())
        .sum();
    let h = fd_step(0.0);
    let shifted = |s: f64| {
        let mut p = params.clone();
        for (t, d) in p.tensors_mut().into_iter().zip(dir.tensors()) {
            if t.slot == Slot::Trainable {
                for (x, y) in t.data.iter_mut().zip(d.data.iter()) {
                    *x += s * y;
                }
            }
        }
        p
    };
    let (up, down) = (loss(&shifted(h)), loss(&shifted(-h)));
    let n = (up - down) / (2.0 * h);
    (a, n, resolved_error(&[a], &[n], &[roundoff(up, down, h)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x, y) = Σ a_i x_i² + x·y
        let a = [1.5, -2.0, 0.25];
        let x = vec![0.3, -1.2, 2.0];
        let y = vec![1.0, 0.5, -0.7];
        let f = |v: &[Vec<f64>]| -> f64 {
            (0..3).map(|i| a[i] * v[0][i] * v[0][i] + v[0][i] * v[1][i]).sum()
        };
        let gx: Vec<f64> = (0..3).map(|i| 2.0 * a[i] * x[i] + y[i]).collect();
        let blocks = vec![
            Block { name: "x".into(), values: x.clone(), analytic: gx },
            Block { name: "y".into(), values: y, analytic: x },
        ];
        let r = finite_diff_check(f, &blocks, 1e-9, None);
        assert!(r.passed(), "{r:?}");
        assert!(r.max_error() < 1e-9);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let f = |v: &[Vec<f64>]| v[0].iter().map(|x: &f64| x.sin()).sum::<f64>();
        let x: Vec<f64> = vec![0.1, 0.7, -0.4];
        let mut g: Vec<f64> = x.iter().map(|v| v.cos()).collect();
        g[1] *= 1.01;
        let r = finite_diff_check(f, &[Block { name: "x".into(), values: x, analytic: g }], 1e-6, None);
        assert!(!r.passed());
        assert_eq!(r.failures().len(), 1);
    }

    #[test]
    fn nearby_kink_resolved_by_smaller_step() {
        // kink 1e-7 to the right of the probe point, well inside the default step
        let f = |v: &[Vec<f64>]| (v[0][0] - 1e-7).abs() + v[0][0] * v[0][0];
        let block = |g: f64| Block { name: "x".into(), values: vec![0.0], analytic: vec![g] };
        let r = finite_diff_check(f, &[block(-1.0)], 1e-6, None);
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.blocks[0].refined, 1);
        let wrong = finite_diff_check(f, &[block(-0.99)], 1e-6, None);
        assert!(!wrong.passed());
    }

    #[test]
    fn non_finite_flagged() {
        let f = |v: &[Vec<f64>]| if v[0][0] > 1.0 { f64::NAN } else { v[0][0] };
        let r = finite_diff_check(f, &[Block { name: "x".into(), values: vec![1.0], analytic: vec![1.0] }], 1e-6, None);
        assert!(!r.blocks[0].finite);
        assert!(!r.passed());
    }

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-15);
        assert_eq!(fd_step(0.0), f64::EPSILON.cbrt());
        assert_eq!(resolved_error(&[0.0], &[3e-11], &[1e-10]), 0.0);
        assert!(resolved_error(&[1.0], &[1.1], &[1e-10]) > 0.09);
    }
}
