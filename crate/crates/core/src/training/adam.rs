//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::network::{ModelParams, ParamSet, Slot};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators per trainable tensor, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params
            .tensors()
            .iter()
            .filter(|t| t.slot == Slot::Trainable)
            .map(|t| t.data.len())
            .collect();
        OptimizerState {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One update of a flat parameter slice at step `t` (1-based).
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powi(t as i32);
    let bc2 = 1.0 - c.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
}

/// Updates every trainable tensor of `params`; buffers are untouched.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<()> {
    let g = grads.tensors();
    let mut p = params.tensors_mut();
    if g.len() != p.len() {
        return Err(Error::Shape(format!("{} gradient tensors for {} parameters", g.len(), p.len())));
    }
    for (pt, gt) in p.iter().zip(&g) {
        if pt.name != gt.name || pt.data.len() != gt.data.len() {
            return Err(Error::Shape(format!("gradient {} does not match parameter {}", gt.name, pt.name)));
        }
    }
    let trainable = p.iter().filter(|t| t.slot == Slot::Trainable).count();
    if trainable != state.m.len() {
        return Err(Error::Shape("optimizer state built for a different model".into()));
    }
    state.step += 1;
    let mut k = 0;
    for (pt, gt) in p.iter_mut().zip(&g) {
        if pt.slot != Slot::Trainable {
            continue;
        }
        if state.m[k].len() != pt.data.len() {
            return Err(Error::Shape(format!("optimizer moments do not match {}", pt.name)));
        }
        adam_update(pt.data, gt.data, &mut state.m[k], &mut state.v[k], state.step, &state.config);
        k += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let c = AdamConfig::default();
        let mut p = vec![1.0, -2.0];
        let mut m = vec![0.5, -0.1];
        let mut v = vec![0.2, 0.3];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 3, &c);
        // m decays but stays nonzero, so only an all-zero history is a no-op
        let mut q = vec![1.0, -2.0];
        let mut m0 = vec![0.0; 2];
        let mut v0 = vec![0.0; 2];
        adam_update(&mut q, &[0.0, 0.0], &mut m0, &mut v0, 1, &c);
        assert_eq!(q, vec![1.0, -2.0]);
        assert!((m[0] - 0.45).abs() < 1e-15);
        assert!((v[1] - 0.2997).abs() < 1e-15);
    }

    #[test]
    fn first_step_formula() {
        let c = AdamConfig::default();
        let g = [0.5, -3.0, 1e-4];
        let mut p = vec![0.0; 3];
        let mut m = vec![0.0; 3];
        let mut v = vec![0.0; 3];
        adam_update(&mut p, &g, &mut m, &mut v, 1, &c);
        for i in 0..3 {
            // bias correction at t=1 recovers m̂ = g and v̂ = g²
            let expect = -c.lr * g[i] / (g[i].abs() + c.eps);
            assert!((p[i] - expect).abs() < 1e-15, "{} vs {}", p[i], expect);
        }
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let c = AdamConfig::default();
            let mut p = vec![0.3, -0.8];
            let mut m = vec![0.0; 2];
            let mut v = vec![0.0; 2];
            for t in 1..=50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x - 0.1 * t as f64).collect();
                adam_update(&mut p, &g, &mut m, &mut v, t, &c);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
