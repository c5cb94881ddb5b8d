use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
///
/// Update rule: `running = (1 - momentum) * running + momentum * batch`,
/// where the batch variance fed into the running estimate is the unbiased one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BatchNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache)> {
    if x.shape().len() != 2 {
        return Err(Error::Shape {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: vec![state.features()],
        });
    }
    let (b, d) = (x.rows(), x.cols());
    if d != state.features() || gamma.len() != d || beta.len() != d {
        return Err(Error::Shape {
            op: "batch_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let (mean, inv_std) = match mode {
        Mode::Train => {
            if b < 2 {
                return Err(Error::BatchTooSmall(b));
            }
            let mut mean = vec![0.0; d];
            for r in 0..b {
                for (m, v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; d];
            for r in 0..b {
                for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / b as f64 + state.eps).sqrt()).collect();
            let m = state.momentum;
            for j in 0..d {
                let unbiased = var[j] / (b - 1) as f64;
                state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * mean[j];
                state.running_var[j] = (1.0 - m) * state.running_var[j] + m * unbiased;
            }
            (mean, inv_std)
        }
        Mode::Eval => (
            state.running_mean.clone(),
            state.running_var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect(),
        ),
    };
    let mut xhat = vec![0.0; b * d];
    let mut out = vec![0.0; b * d];
    for r in 0..b {
        for j in 0..d {
            let h = (x.get(r, j) - mean[j]) * inv_std[j];
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(vec![b, d], out)?, BatchNormCache { xhat, inv_std }))
}

/// Batch normalization over the rows of `x`.
///
/// Train mode normalizes by batch statistics and updates `state`; eval mode
/// reads the running statistics and leaves `state` untouched.
pub fn batch_norm(
    x: &Tensor,
    state: &mut BatchNormState,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
) -> Result<Tensor> {
    forward(x, gamma, beta, state, mode).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardized_batch_passes_through() {
        let x = Tensor::from_rows(&[vec![-1.0], vec![1.0]]);
        let mut st = BatchNormState::new(1);
        let y = batch_norm(&x, &mut st, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), Mode::Train).unwrap();
        // var=1 exactly, so the only deviation is the eps term.
        let scale = 1.0 / (1.0 + DEFAULT_EPS).sqrt();
        assert!((y.data()[0] + scale).abs() < 1e-15);
        assert!((y.data()[1] - scale).abs() < 1e-15);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn constant_batch_maps_to_beta() {
        let x = Tensor::from_rows(&[vec![3.0, -2.0], vec![3.0, -2.0], vec![3.0, -2.0]]);
        let beta = Tensor::new(vec![2], vec![0.25, -4.0]).unwrap();
        let mut st = BatchNormState::new(2);
        let y = batch_norm(&x, &mut st, &Tensor::ones(&[2]), &beta, Mode::Train).unwrap();
        for r in 0..3 {
            assert_eq!(y.row(r), beta.data());
        }
    }

    #[test]
    fn eval_mode_matches_hand_formula() {
        // m = 0.5, v = 4, eps = 1e-5, gamma = 2, beta = 0.1
        // x = 2.5  -> (2.0)/sqrt(4.00001)*2 + 0.1
        // x = -1.5 -> (-2.0)/sqrt(4.00001)*2 + 0.1
        let mut st = BatchNormState::new(1);
        st.running_mean = vec![0.5];
        st.running_var = vec![4.0];
        let before = st.clone();
        let x = Tensor::from_rows(&[vec![2.5], vec![-1.5]]);
        let gamma = Tensor::full(&[1], 2.0);
        let beta = Tensor::full(&[1], 0.1);
        let y = batch_norm(&x, &mut st, &gamma, &beta, Mode::Eval).unwrap();
        let expect_hi = 4.0 / 4.00001f64.sqrt() + 0.1;
        let expect_lo = -4.0 / 4.00001f64.sqrt() + 0.1;
        assert!((y.data()[0] - expect_hi).abs() < 1e-14);
        assert!((y.data()[1] - expect_lo).abs() < 1e-14);
        assert_eq!(st, before);
        // 1.9999975000046875 + 0.1, evaluated by hand
        assert!((y.data()[0] - 2.0999975000046875).abs() < 1e-12);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let x = Tensor::from_rows(&[vec![1.0], vec![3.0]]);
        let mut st = BatchNormState::new(1);
        batch_norm(&x, &mut st, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), Mode::Train).unwrap();
        // mean 2, unbiased var 2
        assert!((st.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((st.running_var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn train_mode_rejects_single_row() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]);
        let mut st = BatchNormState::new(2);
        let err = batch_norm(&x, &mut st, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), Mode::Train);
        assert!(matches!(err, Err(Error::BatchTooSmall(1))));
    }
}
