//! Adam with decoupled weight decay, the linear warmup/decay schedule, and
//! parameter freezing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParamSet, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates aligned index-for-index with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    fn check_aligned(&self, params: &ParamSet) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer state holds {} moments for {} parameters",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if self.m[i].shape() != p.value.shape() || self.v[i].shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: self.m[i].shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// One bias-corrected Adam update of every trainable parameter.
///
/// Decay is decoupled: `p ← p − lr·wd·p` after the Adam delta. All gradients
/// are validated before any value changes, so an error leaves `params` and
/// `state` untouched.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and ≥ 0, got {lr}")));
    }
    if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
        return Err(Error::Config(format!("weight decay must be finite and ≥ 0, got {weight_decay}")));
    }
    state.check_aligned(params)?;
    for p in params.iter().filter(|p| p.trainable) {
        if !p.grad.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", p.name)));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grad = p.grad.data();
        for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
            *w -= lr * weight_decay * *w;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub weight_decay: f64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64, weight_decay: f64) -> Result<Self> {
        let s = Self { peak_lr, warmup_steps, total_steps, weight_decay };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "schedule needs 0 < warmup_steps ≤ total_steps, got {} and {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak learning rate must be > 0, got {}", self.peak_lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be ≥ 0, got {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Warmup length for `total_steps` optimizer steps: `nominal` once the run
    /// reaches 10 000 steps, otherwise `min(nominal, total/10)` and at least 1.
    pub fn scaled_warmup(nominal: u64, total_steps: u64) -> u64 {
        if total_steps >= 10_000 {
            nominal.min(total_steps)
        } else {
            nominal.min(total_steps / 10).max(1).min(total_steps.max(1))
        }
    }
}

/// Learning rate at a 1-indexed optimizer step.
pub fn lr_at(schedule: &Schedule, step: u64) -> Result<f64> {
    schedule.validate()?;
    let Schedule { peak_lr, warmup_steps: w, total_steps: n, .. } = *schedule;
    if step == 0 || step > n {
        return Err(Error::Config(format!("step {step} outside 1..={n}")));
    }
    if step <= w {
        Ok(peak_lr * step as f64 / w as f64)
    } else {
        Ok(peak_lr * (n - step) as f64 / (n - w) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    HeadOnly,
    All,
}

/// Sets the trainable flags and returns how many tensors are trainable.
///
/// Head-only trains exactly the classifier head; the MLM head is frozen
/// together with the encoder.
pub fn set_trainable(params: &mut ParamSet, selector: Trainable) -> usize {
    for p in params.iter_mut() {
        p.trainable = match selector {
            Trainable::All => true,
            Trainable::HeadOnly => Model::is_classifier_param(&p.name),
        };
    }
    params.num_trainable()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn scalar_set(p: f64, g: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("p", Tensor::full(&[1], p)).unwrap();
        ps.get_mut("p").unwrap().grad = Tensor::full(&[1], g);
        ps
    }

    #[test]
    fn first_step_hand_value() {
        let mut ps = scalar_set(1.0, 1.0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, 0.1, 0.0).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((ps.get("p").unwrap().value.data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.9).abs() < 1e-8);
    }

    #[test]
    fn first_step_matches_closed_form_entrywise() {
        let mut ps = ParamSet::new();
        let g = [0.5, -2.0, 1e-3, 0.0, 7.0];
        ps.insert("w", Tensor::new(vec![5], vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap()).unwrap();
        ps.get_mut("w").unwrap().grad = Tensor::new(vec![5], g.to_vec()).unwrap();
        let before = ps.get("w").unwrap().value.clone();
        let mut st = AdamState::new(&ps);
        let lr = 0.01;
        adam_step(&mut ps, &mut st, lr, 0.0).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let m_hat = (1.0 - BETA1) * gi / (1.0 - BETA1);
            let v_hat = (1.0 - BETA2) * gi * gi / (1.0 - BETA2);
            let want = before.data()[i] - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            assert!((ps.get("w").unwrap().value.data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut ps = scalar_set(0.7, 0.0);
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, 0.1, 0.0).unwrap();
        assert_eq!(ps.get("p").unwrap().value.data()[0], 0.7);
    }

    #[test]
    fn decay_shrinks_magnitude() {
        for start in [0.7, -0.7] {
            let mut ps = scalar_set(start, 0.0);
            let mut st = AdamState::new(&ps);
            adam_step(&mut ps, &mut st, 0.1, 0.01).unwrap();
            let after = ps.get("p").unwrap().value.data()[0];
            assert!(after.abs() < start.abs());
            assert!((after - start * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut ps = scalar_set(1.0, f64::NAN);
        let mut st = AdamState::new(&ps);
        let err = adam_step(&mut ps, &mut st, 0.1, 0.0).unwrap_err();
        assert!(err.to_string().contains("`p`"), "{err}");
        assert_eq!(st.step, 0);
        assert_eq!(ps.get("p").unwrap().value.data()[0], 1.0);
    }

    #[test]
    fn frozen_parameters_and_moments_untouched() {
        let mut ps = scalar_set(1.0, f64::NAN);
        ps.insert("q", Tensor::full(&[2], 3.0)).unwrap();
        ps.get_mut("q").unwrap().grad = Tensor::full(&[2], 1.0);
        ps.get_mut("p").unwrap().trainable = false;
        let mut st = AdamState::new(&ps);
        adam_step(&mut ps, &mut st, 0.1, 0.5).unwrap();
        assert_eq!(ps.get("p").unwrap().value.data()[0], 1.0);
        assert_eq!(st.m[0].data(), &[0.0]);
        assert_eq!(st.v[0].data(), &[0.0]);
        assert_ne!(ps.get("q").unwrap().value.data()[0], 3.0);
    }

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::new(1e-4, 10, 110, 0.01).unwrap();
        assert_eq!(lr_at(&s, 10).unwrap(), 1e-4);
        assert_eq!(lr_at(&s, 110).unwrap(), 0.0);
        assert!((lr_at(&s, 60).unwrap() - 5e-5).abs() < 1e-20);
        assert!((lr_at(&s, 1).unwrap() - 1e-5).abs() < 1e-20);
        assert!(lr_at(&s, 0).is_err());
        assert!(lr_at(&s, 111).is_err());
        assert!(Schedule::new(1e-4, 0, 10, 0.0).is_err());
        assert!(Schedule::new(1e-4, 11, 10, 0.0).is_err());
        assert!(Schedule::new(0.0, 1, 10, 0.0).is_err());
    }

    #[test]
    fn schedule_continuous_and_non_negative() {
        let s = Schedule::new(2.0, 7, 50, 0.0).unwrap();
        let mut prev = 0.0;
        for step in 1..=50 {
            let lr = lr_at(&s, step).unwrap();
            assert!(lr >= 0.0);
            assert!((lr - prev).abs() <= 2.0 / 7.0 + 1e-12);
            prev = lr;
        }
    }

    #[test]
    fn warmup_scaling() {
        assert_eq!(Schedule::scaled_warmup(1000, 500), 50);
        assert_eq!(Schedule::scaled_warmup(1000, 5), 1);
        assert_eq!(Schedule::scaled_warmup(1000, 9_999), 999);
        assert_eq!(Schedule::scaled_warmup(1000, 10_000), 1000);
        assert_eq!(Schedule::scaled_warmup(1000, 40_000), 1000);
    }

    #[test]
    fn trainable_counts() {
        let mut model = Model::init(EncoderConfig { vocab_size: 30, ..EncoderConfig::default() }).unwrap();
        let total = model.params.len();
        assert_eq!(set_trainable(&mut model.params, Trainable::All), total);
        // dense1 w/b, bn1 gamma/beta, dense2 w/b, bn2 gamma/beta, out w/b
        assert_eq!(set_trainable(&mut model.params, Trainable::HeadOnly), 10);
        // 2 embeddings, 12 tensors per layer, final LN pair, untied MLM w/b
        assert_eq!(total - 10, 2 + 12 * 2 + 2 + 2);
    }

    #[test]
    fn head_only_step_keeps_encoder_bytes() {
        let mut model = Model::init(EncoderConfig { vocab_size: 30, ..EncoderConfig::default() }).unwrap();
        set_trainable(&mut model.params, Trainable::HeadOnly);
        for p in model.params.iter_mut() {
            p.grad = Tensor::full(p.value.shape(), 0.3);
        }
        let before = model.params.clone();
        let mut st = AdamState::new(&model.params);
        adam_step(&mut model.params, &mut st, 0.1, 0.01).unwrap();
        for (a, b) in before.iter().zip(model.params.iter()) {
            if Model::is_classifier_param(&a.name) {
                assert_ne!(a.value, b.value, "{}", a.name);
            } else {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
    }
}
