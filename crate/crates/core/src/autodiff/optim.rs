use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer over an ordered list of parameter tensors.
///
/// The parameter order must stay fixed across steps; Adam moments are kept per
/// slot.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam(AdamState),
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(AdamState::default()),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Sgd => OptimizerKind::Sgd,
            Optimizer::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(
                "optimizer_step",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "optimizer_step",
                    format!("slot {i}: parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
        }

        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            Optimizer::Adam(state) => {
                if state.m.is_empty() {
                    state.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    state.v = state.m.clone();
                } else if state.m.len() != grads.len() || state.m.iter().zip(grads).any(|(m, g)| m.len() != g.numel()) {
                    return Err(Error::dim("optimizer_step", "parameter layout changed between Adam steps"));
                }
                state.step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
                for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
                    for (i, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gv;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::vector(vec![v])
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut p = one(1.0);
        let g = one(2.0);
        Optimizer::new(OptimizerKind::Sgd).step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_stationary() {
        let mut p = Tensor::vector(vec![0.3, -1.2]);
        let before = p.clone();
        let g = Tensor::zeros(&[2]);
        Optimizer::new(OptimizerKind::Sgd).step(&mut [&mut p], &[&g], 0.5).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = c, v_hat = c^2, so the step is lr * c / (c + eps).
        for c in [1e-3, 0.5, 7.0] {
            let mut p = one(1.0);
            let g = one(c);
            let lr = 0.01;
            Optimizer::new(OptimizerKind::Adam).step(&mut [&mut p], &[&g], lr).unwrap();
            let expected = 1.0 - lr * c / (c + ADAM_EPS);
            assert!((p.item() - expected).abs() < 1e-15);
            assert!((1.0 - p.item() - lr).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_mirrors_under_negated_gradients() {
        let mut a = Optimizer::new(OptimizerKind::Adam);
        let mut b = Optimizer::new(OptimizerKind::Adam);
        let mut pa = Tensor::vector(vec![0.5, -0.25]);
        let mut pb = pa.neg();
        for k in 0..20 {
            let g = Tensor::vector(vec![(k as f64).sin(), 0.3 * (k as f64).cos()]);
            a.step(&mut [&mut pa], &[&g], 1e-2).unwrap();
            b.step(&mut [&mut pb], &[&g.neg()], 1e-2).unwrap();
        }
        assert_eq!(pa, pb.neg());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let err = Optimizer::new(OptimizerKind::Sgd).step(&mut [&mut p], &[&g], 0.1);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
