//! Scalar-side loss math plus the tape nodes for the joint objective. The
//! value functions here and the tape ops must agree to rounding; tests hold
//! them together.

use ndarray::ArrayView2;

use crate::numerics::tape::{GradTape, NodeId};
use crate::numerics::Real;

use super::TrainError;

/// Floor under probabilities before the log so confident mistakes stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Inverse-frequency class weights rescaled to mean 1 over the classes that
/// actually occur. Absent classes get weight 0 and are left out of the mean.
pub fn inverse_frequency_alpha(counts: &[usize]) -> Result<Vec<f64>, TrainError> {
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present == 0 {
        return Err(TrainError::InvalidArgument(
            "no class observations to weight".into(),
        ));
    }
    let inv: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
        .collect();
    let mean = inv.iter().sum::<f64>() / present as f64;
    Ok(inv.iter().map(|v| v / mean).collect())
}

fn check_targets(
    rows: usize,
    classes: usize,
    targets: &[usize],
    what: &str,
) -> Result<(), TrainError> {
    if targets.len() != rows {
        return Err(TrainError::ShapeMismatch(format!(
            "{what}: {} targets for {rows} probability rows",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(TrainError::InvalidArgument(format!(
            "{what}: class {t} out of range for {classes} classes"
        )));
    }
    if rows == 0 {
        return Err(TrainError::InvalidArgument(format!("{what}: empty batch")));
    }
    Ok(())
}

/// Mean negative log probability of the target class.
pub fn cross_entropy_value<T: Real>(
    probs: ArrayView2<'_, T>,
    targets: &[usize],
) -> Result<f64, TrainError> {
    let (b, k) = probs.dim();
    check_targets(b, k, targets, "cross entropy")?;
    let mut acc = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        acc += probs[[i, t]].to_f64().max(PROB_FLOOR).ln();
    }
    Ok(-acc / b as f64)
}

/// Mean of alpha_t (1 - p_t)^gamma (-log p_t). Gamma 0 with unit alpha is
/// plain cross entropy.
pub fn focal_loss_value<T: Real>(
    probs: ArrayView2<'_, T>,
    targets: &[usize],
    gamma: f64,
    alpha: &[f64],
) -> Result<f64, TrainError> {
    let (b, k) = probs.dim();
    check_targets(b, k, targets, "focal loss")?;
    if alpha.len() != k {
        return Err(TrainError::ShapeMismatch(format!(
            "focal loss: {} alpha weights for {k} classes",
            alpha.len()
        )));
    }
    let mut acc = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        let p = probs[[i, t]].to_f64();
        let q = (1.0 - p).max(0.0);
        acc += alpha[t] * q.powf(gamma) * p.max(PROB_FLOOR).ln();
    }
    Ok(-acc / b as f64)
}

/// Everything the joint objective needs beyond the predictions themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub gamma: f64,
    pub alpha_stage: Vec<f64>,
    pub alpha_apnea: Vec<f64>,
    /// (stage, apnea) weights on the two focal terms.
    pub task_weights: (f64, f64),
}

impl Objective {
    /// Uniform weights, mostly for tests and ad-hoc evaluation.
    pub fn unweighted(n_stage_classes: usize, n_apnea_classes: usize) -> Self {
        Objective {
            gamma: 0.0,
            alpha_stage: vec![1.0; n_stage_classes],
            alpha_apnea: vec![1.0; n_apnea_classes],
            task_weights: (1.0, 1.0),
        }
    }
}

/// Weighted sum of the two per-task focal losses.
pub fn joint_loss_value<T: Real>(
    stage_probs: ArrayView2<'_, T>,
    apnea_probs: ArrayView2<'_, T>,
    stage_targets: &[usize],
    apnea_targets: &[usize],
    objective: &Objective,
) -> Result<f64, TrainError> {
    if stage_probs.nrows() != apnea_probs.nrows() {
        return Err(TrainError::ShapeMismatch(format!(
            "joint loss: stage batch {} vs apnea batch {}",
            stage_probs.nrows(),
            apnea_probs.nrows()
        )));
    }
    let ls = focal_loss_value(stage_probs, stage_targets, objective.gamma, &objective.alpha_stage)?;
    let la = focal_loss_value(apnea_probs, apnea_targets, objective.gamma, &objective.alpha_apnea)?;
    Ok(objective.task_weights.0 * ls + objective.task_weights.1 * la)
}

/// Tape nodes for one batch of the joint objective.
pub struct LossNodes {
    pub stage_focal: NodeId,
    pub apnea_focal: NodeId,
    pub joint: NodeId,
}

/// Records the joint objective on the tape over two probability nodes.
/// Argument checks mirror the value functions; the tape itself only asserts.
pub fn build_joint_loss<T: Real>(
    tape: &mut GradTape<T>,
    stage_probs: NodeId,
    apnea_probs: NodeId,
    stage_targets: &[usize],
    apnea_targets: &[usize],
    objective: &Objective,
) -> Result<LossNodes, TrainError> {
    let floor = T::from_f64(PROB_FLOOR);
    let g = T::from_f64(objective.gamma);
    for (node, targets, alpha, what) in [
        (stage_probs, stage_targets, &objective.alpha_stage, "stage"),
        (apnea_probs, apnea_targets, &objective.alpha_apnea, "apnea"),
    ] {
        let shape = tape.value(node).shape().to_vec();
        if shape.len() != 2 {
            return Err(TrainError::ShapeMismatch(format!(
                "{what} probabilities must be a matrix, got shape {shape:?}"
            )));
        }
        check_targets(shape[0], shape[1], targets, what)?;
        if alpha.len() != shape[1] {
            return Err(TrainError::ShapeMismatch(format!(
                "{what}: {} alpha weights for {} classes",
                alpha.len(),
                shape[1]
            )));
        }
    }
    if stage_targets.len() != apnea_targets.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "joint loss: stage batch {} vs apnea batch {}",
            stage_targets.len(),
            apnea_targets.len()
        )));
    }

    let a_stage: Vec<T> = objective.alpha_stage.iter().map(|&a| T::from_f64(a)).collect();
    let a_apnea: Vec<T> = objective.alpha_apnea.iter().map(|&a| T::from_f64(a)).collect();
    let stage_focal = tape.focal_loss(stage_probs, stage_targets, &a_stage, g, floor);
    let apnea_focal = tape.focal_loss(apnea_probs, apnea_targets, &a_apnea, g, floor);
    let joint = tape.affine_combine(
        stage_focal,
        apnea_focal,
        T::from_f64(objective.task_weights.0),
        T::from_f64(objective.task_weights.1),
    );
    Ok(LossNodes { stage_focal, apnea_focal, joint })
}
