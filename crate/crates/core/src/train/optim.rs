//! Adam with decoupled weight decay. Decay multiplies the pre-step value and
//! only touches tensors whose visitor flag marks them as decayed, so norm
//! gains, biases, the class token, and position embeddings keep their scale.

use ndarray::ArrayD;

use crate::model::ModelParams;
use crate::numerics::Real;

use super::TrainError;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected step direction for one coordinate. Inner math stays in f64
/// whatever the parameter precision.
fn update_term(m: f64, v: f64, bc1: f64, bc2: f64, eps: f64) -> f64 {
    (m / bc1) / ((v / bc2).sqrt() + eps)
}

/// Moment buffers follow the canonical parameter order of
/// [`ModelParams::for_each`], which is also the order gradients arrive in.
pub struct AdamW<T> {
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(template: &ModelParams<T>, weight_decay: f64) -> Self {
        let mut m = Vec::new();
        template.for_each(|_, _, view| m.push(ArrayD::zeros(view.raw_dim())));
        AdamW {
            v: m.clone(),
            m,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            weight_decay,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over every tensor. `grads` must align one-to-one with the
    /// canonical visitor order.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &[ArrayD<T>],
        lr: f64,
    ) -> Result<(), TrainError> {
        if grads.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch(format!(
                "{} gradient tensors for {} parameter tensors",
                grads.len(),
                self.m.len()
            )));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(TrainError::InvalidArgument(format!(
                "learning rate must be nonnegative and finite, got {lr}"
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);

        let moments_m = &mut self.m;
        let moments_v = &mut self.v;
        let mut idx = 0;
        let mut problem: Option<TrainError> = None;
        params.for_each_mut(|name, decays, mut theta| {
            if problem.is_some() {
                return;
            }
            let g = &grads[idx];
            if g.shape() != theta.shape() {
                problem = Some(TrainError::ShapeMismatch(format!(
                    "gradient for {name} has shape {:?}, parameter has {:?}",
                    g.shape(),
                    theta.shape()
                )));
                return;
            }
            let ts = theta.as_slice_mut().expect("parameters are standard layout");
            let ms = moments_m[idx].as_slice_mut().expect("standard layout");
            let vs = moments_v[idx].as_slice_mut().expect("standard layout");
            let gs = g.as_slice().expect("gradients are standard layout");
            for i in 0..ts.len() {
                let g = gs[i].to_f64();
                let m = b1 * ms[i].to_f64() + (1.0 - b1) * g;
                let v = b2 * vs[i].to_f64() + (1.0 - b2) * g * g;
                ms[i] = T::from_f64(m);
                vs[i] = T::from_f64(v);
                let old = ts[i].to_f64();
                let mut new = old - lr * update_term(m, v, bc1, bc2, eps);
                if decays {
                    new -= lr * wd * old;
                }
                ts[i] = T::from_f64(new);
            }
            idx += 1;
        });
        if let Some(e) = problem {
            return Err(e);
        }
        Ok(())
    }
}
