//! Adam with bias correction. State is kept per parameter, in the order the
//! parameters were registered, so updates are reproducible run to run.

use super::{GradMap, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
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

pub struct AdamState<T: Scalar> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }
}

/// One optimizer step. Parameters must line up with the state; gradients are
/// looked up by parameter identity and default to zero when absent.
pub fn adam_update<T: Scalar>(
    params: &[Tensor<T>],
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
) -> Result<(), TensorError> {
    if params.len() != state.m.len() {
        return Err(TensorError::StateMismatch {
            expect: state.m.len(),
            got: params.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of_f64(state.cfg.beta1);
    let b2 = T::of_f64(state.cfg.beta2);
    let lr = T::of_f64(state.cfg.lr);
    let eps = T::of_f64(state.cfg.eps);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);

    for (idx, p) in params.iter().enumerate() {
        if state.m[idx].len() != p.len() {
            return Err(TensorError::StateShape {
                index: idx,
                expect: state.m[idx].len(),
                got: p.len(),
            });
        }
        let zero;
        let g = match grads.get(p) {
            Some(g) => g,
            None => {
                zero = vec![T::zero(); p.len()];
                &zero
            }
        };
        if g.len() != p.len() {
            return Err(TensorError::StateShape {
                index: idx,
                expect: p.len(),
                got: g.len(),
            });
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        p.update_data(|w| {
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] = w[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
    Ok(())
}
