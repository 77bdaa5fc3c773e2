use crate::autodiff::ParamSet;
use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    pub t: u64,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update of every tensor named in `grads`.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    ensure!(cfg.lr > 0.0, "learning rate must be positive");
    for (name, g) in grads.iter() {
        let p = params.require(name)?;
        ensure!(p.shape() == g.shape(), "grad for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape());
        if !state.m.contains(name) {
            state.m.insert(name, crate::autodiff::Array::zeros(g.shape()));
            state.v.insert(name, crate::autodiff::Array::zeros(g.shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads.iter() {
        let m = state.m.get_mut(name).expect("inserted above").data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_mut(name).expect("inserted above").data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m.get(name).unwrap().data(), state.v.get(name).unwrap().data());
        let p = params.get_mut(name).unwrap().data_mut();
        for i in 0..p.len() {
            p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Array, Graph};

    fn set(v: Vec<f64>) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Array::vector(v));
        ps
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = set(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = AdamState::zeros_like(&p);
        adam_step(&mut p, &set(vec![0.0; 3]), &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut p = set(vec![1.0, -2.0, 3.0, 0.5]);
        let g = set(vec![0.3, -7.0, 1e-3, -0.01]);
        let mut st = AdamState::zeros_like(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        let before = [1.0, -2.0, 3.0, 0.5];
        for i in 0..4 {
            let moved = p.get("w").unwrap().data()[i] - before[i];
            let want = -cfg.lr * g.get("w").unwrap().data()[i].signum();
            assert!((moved - want).abs() < 1e-7 * cfg.lr.max(1.0), "{moved} vs {want}");
        }
    }

    fn descend_quadratic(lr: f64, steps: usize) -> f64 {
        let mut p = set(vec![0.6, -0.48, 0.64]);
        let mut st = AdamState::default();
        let cfg = AdamConfig { lr, ..Default::default() };
        for _ in 0..steps {
            let mut g = Graph::new();
            let b = p.bind_all(&mut g, true);
            let w = b.get("w").unwrap();
            let sq = g.square(w).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            adam_step(&mut p, &b.grads(&g), &mut st, &cfg).unwrap();
        }
        p.get("w").unwrap().data().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    // Momentum keeps the iterate ringing around the minimum for a while:
    // after 100 steps the norm sits in the low 1e-3 range for every constant
    // rate tried, and falls below 1e-3 by step 150.
    #[test]
    fn converges_on_quadratic() {
        for lr in [0.02, 0.05, 0.1] {
            assert!(descend_quadratic(lr, 100) < 1e-2, "lr {lr}");
            let n = descend_quadratic(lr, 150);
            assert!(n < 1e-3, "lr {lr}: {n}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = set(vec![1.0, 2.0]);
        let mut st = AdamState::default();
        assert!(adam_step(&mut p, &set(vec![1.0]), &mut st, &AdamConfig::default()).is_err());
    }
}
