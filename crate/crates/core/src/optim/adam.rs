use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{FieldGradients, FieldParams};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err(Error::config(format!("unknown optimizer `{s}`, expected `adam` or `sgd`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |b: f64| (0.0..1.0).contains(&b);
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(unit(self.beta1) && unit(self.beta2)) {
            return Err(Error::config(format!("Adam betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2)));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::config(format!("Adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Optimizer state over a [`FieldParams`]. Table entries are updated only
/// when touched by the current gradient; their moments stay frozen
/// otherwise. MLP parameters are updated every step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub hyper: AdamHyper,
    pub kind: OptimizerKind,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &FieldParams<T>, hyper: AdamHyper, kind: OptimizerKind) -> Result<Self> {
        hyper.validate()?;
        let n = if kind == OptimizerKind::Adam { params.len() } else { 0 };
        Ok(AdamState { step: 0, m: vec![T::zero(); n], v: vec![T::zero(); n], hyper, kind })
    }

    pub fn step(&mut self, params: &mut FieldParams<T>, grads: &FieldGradients<T>) -> Result<()> {
        if grads.data.len() != params.len() {
            return Err(Error::shape("gradients", params.len(), grads.data.len()));
        }
        if self.kind == OptimizerKind::Adam && self.m.len() != params.len() {
            return Err(Error::shape("optimizer moments", params.len(), self.m.len()));
        }
        self.step += 1;
        let f = grads.features();
        let table_len = grads.table_len();
        let len = params.len();
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = T::of(self.hyper.lr);
                let mut update = |i: usize| params.data[i] -= lr * grads.data[i];
                for &e in grads.touched() {
                    let e = e as usize;
                    (e * f..(e + 1) * f).for_each(&mut update);
                }
                (table_len..len).for_each(update);
            }
            OptimizerKind::Adam => {
                let h = self.hyper;
                let t = self.step as i32;
                let bc1 = 1.0 - h.beta1.powi(t);
                let bc2 = 1.0 - h.beta2.powi(t);
                let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
                let (c1, c2) = (T::of(1.0 - h.beta1), T::of(1.0 - h.beta2));
                let (lr, eps) = (T::of(h.lr), T::of(h.eps));
                let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
                let (m, v, data) = (&mut self.m, &mut self.v, &mut params.data);
                let mut update = |i: usize| {
                    let g = grads.data[i];
                    m[i] = b1 * m[i] + c1 * g;
                    v[i] = b2 * v[i] + c2 * g * g;
                    let m_hat = m[i] * inv_bc1;
                    let v_hat = v[i] * inv_bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                };
                for &e in grads.touched() {
                    let e = e as usize;
                    (e * f..(e + 1) * f).for_each(&mut update);
                }
                (table_len..len).for_each(update);
            }
        }
        Ok(())
    }
}

/// One optimizer update of `params` from `grads`.
pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut FieldParams<T>, grads: &FieldGradients<T>) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldConfig;
    use proptest::prelude::*;

    fn setup() -> (FieldParams<f64>, FieldGradients<f64>) {
        let p = FieldParams::<f64>::zeros(&FieldConfig::tiny()).unwrap();
        let g = FieldGradients::for_params(&p);
        (p, g)
    }

    #[test]
    fn first_step_by_hand() {
        let (mut p, mut g) = setup();
        let mlp = p.layout.table_len();
        g.data[mlp] = 1.0;
        let mut s = AdamState::new(&p, AdamHyper::default(), OptimizerKind::Adam).unwrap();
        adam_step(&mut s, &mut p, &g).unwrap();
        // m̂ = v̂ = 1, so the step is lr / (1 + eps).
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((p.data[mlp] - want).abs() < 1e-18);
        assert!((p.data[mlp] / -0.000999999995 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn untouched_entries_stay_frozen() {
        let (mut p, mut g) = setup();
        let mut s = AdamState::new(&p, AdamHyper::default(), OptimizerKind::Adam).unwrap();
        g.add_entry(3, &[0.5, -0.5]);
        adam_step(&mut s, &mut p, &g).unwrap();
        let (m3, v3) = (s.m[6], s.v[6]);
        g.reset();
        g.add_entry(9, &[1.0, 1.0]);
        let before = p.data[6];
        adam_step(&mut s, &mut p, &g).unwrap();
        assert_eq!((s.m[6], s.v[6], p.data[6]), (m3, v3, before));
        assert_eq!(p.data[20], 0.0);
        assert!(p.data[18] < 0.0);
    }

    #[test]
    fn sgd_steps_along_the_gradient() {
        let (mut p, mut g) = setup();
        let mut s = AdamState::new(&p, AdamHyper::with_lr(0.1), OptimizerKind::Sgd).unwrap();
        g.add_entry(0, &[2.0, 0.0]);
        let last = p.len() - 1;
        g.data[last] = -1.0;
        adam_step(&mut s, &mut p, &g).unwrap();
        assert_eq!(p.data[0], -0.2);
        assert_eq!(p.data[last], 0.1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut p, _) = setup();
        let mut other = FieldConfig::tiny();
        other.hidden = vec![4];
        let q = FieldParams::<f64>::zeros(&other).unwrap();
        let g = FieldGradients::for_params(&q);
        let mut s = AdamState::new(&p, AdamHyper::default(), OptimizerKind::Adam).unwrap();
        assert!(matches!(adam_step(&mut s, &mut p, &g), Err(Error::ShapeMismatch { .. })));
    }

    proptest! {
        #[test]
        fn second_moment_stays_nonnegative(grads in proptest::collection::vec(-1e3f64..1e3, 1..40)) {
            let (mut p, mut g) = setup();
            let mut s = AdamState::new(&p, AdamHyper::default(), OptimizerKind::Adam).unwrap();
            let last = p.len() - 1;
            for (k, x) in grads.iter().enumerate() {
                g.reset();
                g.add_entry(k % 7, &[*x, -*x]);
                g.data[last] = *x;
                adam_step(&mut s, &mut p, &g).unwrap();
                prop_assert!(s.v.iter().all(|v| *v >= 0.0));
                prop_assert!(p.is_finite());
            }
        }
    }
}
