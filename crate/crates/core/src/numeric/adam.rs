//! Adam with bias correction and a step-decayed learning-rate schedule.

use super::{NumericError, ParamStore, Tensor};

/// Learning rate `max(floor, initial * decay^floor(step / interval))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    pub interval: u64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 1e-3,
            decay: 0.7,
            interval: 200_000,
            floor: 1e-5,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        let k = (step / self.interval) as i32;
        (self.initial * self.decay.powi(k)).max(self.floor)
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub schedule: LrSchedule,
}

impl AdamState {
    pub fn new(params: &ParamStore, schedule: LrSchedule) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            schedule,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step)
    }

    /// One update over all parameters; `grads` must be in store order.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<(), NumericError> {
        if grads.len() != params.len() {
            return Err(NumericError::ShapeMismatch {
                op: "adam_step",
                detail: format!("{} grads for {} params", grads.len(), params.len()),
            });
        }
        self.step += 1;
        let lr = self.schedule.at(self.step);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for idx in 0..params.len() {
            let p = params.tensor_mut(idx);
            let g = &grads[idx];
            if g.shape() != p.shape() {
                return Err(NumericError::ShapeMismatch {
                    op: "adam_step",
                    detail: format!(
                        "grad {:?} vs param {:?} for {}",
                        g.shape(),
                        p.shape(),
                        idx
                    ),
                });
            }
            let m = self.m[idx].data_mut();
            let v = self.v[idx].data_mut();
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}
