//! The epoch loop and batch-mode inference over an archive.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, Array3, ArrayD, ArrayView2, Axis, Ix2};
use rand::seq::SliceRandom;

use crate::model::{
    build_forward, init_params, save_checkpoint, ModelConfig, ModelError, ModelParams,
};
use crate::numerics::{GradTape, Mode, NodeId, Real};
use crate::rng::{substream, substream_indexed};
use crate::signal::{DatasetArchive, SegmentRef, SplitIndex};

use super::loss::{
    build_joint_loss, cross_entropy_value, focal_loss_value, inverse_frequency_alpha, Objective,
};
use super::optim::AdamW;
use super::{TrainConfig, TrainError};

/// Loss and accuracy for one task over one data pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskStats {
    pub focal: f64,
    pub ce: f64,
    pub accuracy: f64,
}

impl TaskStats {
    fn nan() -> Self {
        TaskStats { focal: f64::NAN, ce: f64::NAN, accuracy: f64::NAN }
    }
}

/// One row of the training history. Validation fields are NaN when the
/// validation split is empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_stage: TaskStats,
    pub train_apnea: TaskStats,
    pub train_joint: f64,
    pub val_stage: TaskStats,
    pub val_apnea: TaskStats,
    pub val_joint: f64,
}

/// Why the loop ended. Epoch indices are 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainOutcome {
    /// Ran the full epoch budget.
    Completed,
    /// Validation loss stalled past the patience window.
    EarlyStopped { epoch: usize },
    /// Training accuracy on both tasks reached the configured target.
    TargetReached { epoch: usize },
    /// A forward pass or loss went non-finite; the returned parameters are
    /// the last set that was still healthy.
    AbortedNonFinite { epoch: usize },
}

impl std::fmt::Display for TrainOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainOutcome::Completed => write!(f, "completed"),
            TrainOutcome::EarlyStopped { epoch } => write!(f, "early_stopped at epoch {epoch}"),
            TrainOutcome::TargetReached { epoch } => write!(f, "target_reached at epoch {epoch}"),
            TrainOutcome::AbortedNonFinite { epoch } => {
                write!(f, "aborted_non_finite at epoch {epoch}")
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters the run returned.
    pub best_epoch: usize,
    pub outcome: TrainOutcome,
    /// Only nondeterministic output of a run; kept out of the history CSV.
    pub wall_time_s: f64,
}

/// Loss and accuracy for both tasks over a split, plus the joint objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitEval {
    pub stage: TaskStats,
    pub apnea: TaskStats,
    pub joint: f64,
    pub n_segments: usize,
}

/// True and predicted class indices, aligned with `refs`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predictions {
    pub refs: Vec<SegmentRef>,
    pub stage_true: Vec<usize>,
    pub stage_pred: Vec<usize>,
    pub apnea_true: Vec<usize>,
    pub apnea_pred: Vec<usize>,
}

fn argmax<T: Real>(row: ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    let mut bv = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

/// Stacks segments into a [batch, channel, sample] tensor with their labels.
/// Label indices are checked against the configured class counts.
fn batch_tensor<T: Real>(
    archive: &DatasetArchive,
    refs: &[SegmentRef],
    config: &ModelConfig,
) -> Result<(Array3<T>, Vec<usize>, Vec<usize>), TrainError> {
    let (first, _, _) = archive.segment(refs[0]);
    let (c, l) = first.dim();
    if c != config.input_channels || l != config.input_length {
        return Err(TrainError::ShapeMismatch(format!(
            "archive segments are {c}x{l}, model expects {}x{}",
            config.input_channels, config.input_length
        )));
    }
    let mut batch = Array3::<T>::zeros((refs.len(), c, l));
    let mut stage_targets = Vec::with_capacity(refs.len());
    let mut apnea_targets = Vec::with_capacity(refs.len());
    for (i, &r) in refs.iter().enumerate() {
        let (seg, stage, apnea) = archive.segment(r);
        if stage.index() >= config.n_stage_classes || apnea.index() >= config.n_apnea_classes {
            return Err(TrainError::InvalidArgument(format!(
                "label ({}, {}) does not fit a {}x{} class model",
                stage.name(),
                apnea.name(),
                config.n_stage_classes,
                config.n_apnea_classes
            )));
        }
        batch
            .index_axis_mut(Axis(0), i)
            .assign(&seg.mapv(|v| T::from_f64(f64::from(v))));
        stage_targets.push(stage.index());
        apnea_targets.push(apnea.index());
    }
    Ok((batch, stage_targets, apnea_targets))
}

fn count_classes(
    archive: &DatasetArchive,
    refs: &[SegmentRef],
    config: &ModelConfig,
) -> (Vec<usize>, Vec<usize>) {
    let mut stage = vec![0usize; config.n_stage_classes];
    let mut apnea = vec![0usize; config.n_apnea_classes];
    for &r in refs {
        let (_, s, a) = archive.segment(r);
        if s.index() < stage.len() {
            stage[s.index()] += 1;
        }
        if a.index() < apnea.len() {
            apnea[a.index()] += 1;
        }
    }
    (stage, apnea)
}

/// Turns a train config into concrete loss weights. Focal alphas left unset
/// fall back to inverse class frequency over the given training counts.
pub fn resolve_objective(
    train_config: &TrainConfig,
    model_config: &ModelConfig,
    stage_counts: &[usize],
    apnea_counts: &[usize],
) -> Result<Objective, TrainError> {
    let alpha_stage = match &train_config.focal_alpha_stage {
        Some(a) if a.len() != model_config.n_stage_classes => {
            return Err(TrainError::InvalidConfig(format!(
                "focal_alpha_stage has {} entries for {} classes",
                a.len(),
                model_config.n_stage_classes
            )))
        }
        Some(a) => a.clone(),
        None => inverse_frequency_alpha(stage_counts)?,
    };
    let alpha_apnea = match &train_config.focal_alpha_apnea {
        Some(a) if a.len() != model_config.n_apnea_classes => {
            return Err(TrainError::InvalidConfig(format!(
                "focal_alpha_apnea has {} entries for {} classes",
                a.len(),
                model_config.n_apnea_classes
            )))
        }
        Some(a) => a.clone(),
        None => inverse_frequency_alpha(apnea_counts)?,
    };
    Ok(Objective {
        gamma: train_config.focal_gamma,
        alpha_stage,
        alpha_apnea,
        task_weights: train_config.task_weights,
    })
}

/// Example-weighted accumulator across batches of one pass.
struct Running {
    n: usize,
    stage_focal: f64,
    stage_ce: f64,
    stage_correct: usize,
    apnea_focal: f64,
    apnea_ce: f64,
    apnea_correct: usize,
}

impl Running {
    fn new() -> Self {
        Running {
            n: 0,
            stage_focal: 0.0,
            stage_ce: 0.0,
            stage_correct: 0,
            apnea_focal: 0.0,
            apnea_ce: 0.0,
            apnea_correct: 0,
        }
    }

    fn accumulate<T: Real>(
        &mut self,
        stage_probs: ArrayView2<'_, T>,
        apnea_probs: ArrayView2<'_, T>,
        stage_targets: &[usize],
        apnea_targets: &[usize],
        objective: &Objective,
    ) -> Result<(), TrainError> {
        let n = stage_targets.len();
        self.n += n;
        self.stage_focal += n as f64
            * focal_loss_value(stage_probs, stage_targets, objective.gamma, &objective.alpha_stage)?;
        self.apnea_focal += n as f64
            * focal_loss_value(apnea_probs, apnea_targets, objective.gamma, &objective.alpha_apnea)?;
        self.stage_ce += n as f64 * cross_entropy_value(stage_probs, stage_targets)?;
        self.apnea_ce += n as f64 * cross_entropy_value(apnea_probs, apnea_targets)?;
        for (i, &t) in stage_targets.iter().enumerate() {
            if argmax(stage_probs.row(i)) == t {
                self.stage_correct += 1;
            }
        }
        for (i, &t) in apnea_targets.iter().enumerate() {
            if argmax(apnea_probs.row(i)) == t {
                self.apnea_correct += 1;
            }
        }
        Ok(())
    }

    fn finish(&self, task_weights: (f64, f64)) -> SplitEval {
        let n = self.n as f64;
        let stage = TaskStats {
            focal: self.stage_focal / n,
            ce: self.stage_ce / n,
            accuracy: self.stage_correct as f64 / n,
        };
        let apnea = TaskStats {
            focal: self.apnea_focal / n,
            ce: self.apnea_ce / n,
            accuracy: self.apnea_correct as f64 / n,
        };
        SplitEval {
            stage,
            apnea,
            joint: task_weights.0 * stage.focal + task_weights.1 * apnea.focal,
            n_segments: self.n,
        }
    }
}

fn probs_pair<T: Real>(
    tape: &GradTape<T>,
    stage_node: NodeId,
    apnea_node: NodeId,
) -> (Array2<T>, Array2<T>) {
    let sp = tape.value(stage_node).view().into_dimensionality::<Ix2>().expect("probs 2d");
    let ap = tape.value(apnea_node).view().into_dimensionality::<Ix2>().expect("probs 2d");
    (sp.to_owned(), ap.to_owned())
}

fn all_finite<T: Real>(m: &Array2<T>) -> bool {
    m.iter().all(|v| Real::to_f64(*v).is_finite())
}

/// Losses and accuracies over `refs` in eval mode.
pub fn evaluate<T: Real>(
    params: &ModelParams<T>,
    archive: &DatasetArchive,
    refs: &[SegmentRef],
    batch_size: usize,
    objective: &Objective,
) -> Result<SplitEval, TrainError> {
    if refs.is_empty() {
        return Err(TrainError::EmptySplit("no segments to evaluate".into()));
    }
    if batch_size == 0 {
        return Err(TrainError::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut agg = Running::new();
    for chunk in refs.chunks(batch_size) {
        let (batch, stage_t, apnea_t) = batch_tensor::<T>(archive, chunk, &params.config)?;
        let mut tape = GradTape::new();
        let graph = build_forward(&mut tape, params, &batch, Mode::Eval, None)?;
        let (sp, ap) = probs_pair(&tape, graph.stage_probs, graph.apnea_probs);
        if !all_finite(&sp) || !all_finite(&ap) {
            return Err(ModelError::NonFinite("class probabilities".into()).into());
        }
        agg.accumulate(sp.view(), ap.view(), &stage_t, &apnea_t, objective)?;
    }
    Ok(agg.finish(objective.task_weights))
}

/// Argmax predictions over `refs` in eval mode, in the given order.
pub fn predict<T: Real>(
    params: &ModelParams<T>,
    archive: &DatasetArchive,
    refs: &[SegmentRef],
    batch_size: usize,
) -> Result<Predictions, TrainError> {
    if batch_size == 0 {
        return Err(TrainError::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut out = Predictions {
        refs: refs.to_vec(),
        stage_true: Vec::with_capacity(refs.len()),
        stage_pred: Vec::with_capacity(refs.len()),
        apnea_true: Vec::with_capacity(refs.len()),
        apnea_pred: Vec::with_capacity(refs.len()),
    };
    for chunk in refs.chunks(batch_size) {
        let (batch, stage_t, apnea_t) = batch_tensor::<T>(archive, chunk, &params.config)?;
        let mut tape = GradTape::new();
        let graph = build_forward(&mut tape, params, &batch, Mode::Eval, None)?;
        let (sp, ap) = probs_pair(&tape, graph.stage_probs, graph.apnea_probs);
        if !all_finite(&sp) || !all_finite(&ap) {
            return Err(ModelError::NonFinite("class probabilities".into()).into());
        }
        for i in 0..chunk.len() {
            out.stage_true.push(stage_t[i]);
            out.stage_pred.push(argmax(sp.row(i)));
            out.apnea_true.push(apnea_t[i]);
            out.apnea_pred.push(argmax(ap.row(i)));
        }
    }
    Ok(out)
}

fn refs_for_ids(
    archive: &DatasetArchive,
    ids: &[String],
    split_name: &str,
) -> Result<Vec<SegmentRef>, TrainError> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    let present: BTreeSet<&str> = archive
        .subjects
        .iter()
        .map(|s| s.subject_id.as_str())
        .filter(|id| wanted.contains(id))
        .collect();
    if let Some(missing) = wanted.difference(&present).next() {
        return Err(TrainError::InvalidArgument(format!(
            "{split_name} split names subject {missing:?} which the archive does not contain"
        )));
    }
    Ok(archive.segment_refs_for(|s| wanted.contains(s.subject_id.as_str())))
}

/// Trains from a fresh seeded initialization and returns the selected
/// parameters with the per-epoch history.
///
/// Selection: the best-validation-loss epoch, the live parameters when the
/// train-accuracy target fires, or the last epoch when the validation split
/// is empty (which also disables early stopping). When `best_checkpoint` is
/// given, every validation improvement rewrites that file, so a later abort
/// still leaves the last healthy weights on disk; the returned parameters
/// are written there at the end regardless.
pub fn train<T: Real>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    archive: &DatasetArchive,
    split: &SplitIndex,
    best_checkpoint: Option<&Path>,
) -> Result<(ModelParams<T>, TrainHistory), TrainError> {
    model_config.validate()?;
    train_config.validate()?;
    split
        .validate()
        .map_err(|e| TrainError::InvalidArgument(e.to_string()))?;

    let train_refs = refs_for_ids(archive, &split.train, "train")?;
    let val_refs = refs_for_ids(archive, &split.val, "val")?;
    if train_refs.is_empty() {
        return Err(TrainError::EmptySplit("train split has no segments".into()));
    }

    let (stage_counts, apnea_counts) = count_classes(archive, &train_refs, model_config);
    let objective = resolve_objective(train_config, model_config, &stage_counts, &apnea_counts)?;

    let started = Instant::now();
    let mut params = init_params::<T>(model_config, train_config.seed)?;
    let mut opt = AdamW::new(&params, train_config.weight_decay);
    let mut dropout_rng = substream(train_config.seed, "train.dropout");
    let mut param_shapes = Vec::new();
    params.for_each(|_, _, view| param_shapes.push(view.raw_dim()));

    let mut history: Vec<EpochStats> = Vec::with_capacity(train_config.epochs);
    let mut best: Option<ModelParams<T>> = None;
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut since_best = 0usize;
    let mut outcome = TrainOutcome::Completed;

    'epochs: for epoch in 0..train_config.epochs {
        let lr = train_config.lr_at(epoch);
        let mut order = train_refs.clone();
        order.shuffle(&mut substream_indexed(train_config.seed, "train.batch", epoch));

        let mut agg = Running::new();
        for chunk in order.chunks(train_config.batch_size) {
            let (batch, stage_t, apnea_t) = batch_tensor::<T>(archive, chunk, model_config)?;
            let mut tape = GradTape::new();
            let graph = match build_forward(
                &mut tape,
                &params,
                &batch,
                Mode::Train,
                Some(&mut dropout_rng),
            ) {
                Ok(g) => g,
                Err(ModelError::NonFinite(_)) => {
                    outcome = TrainOutcome::AbortedNonFinite { epoch };
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            let (sp, ap) = probs_pair(&tape, graph.stage_probs, graph.apnea_probs);
            if !all_finite(&sp) || !all_finite(&ap) {
                outcome = TrainOutcome::AbortedNonFinite { epoch };
                break 'epochs;
            }
            let nodes = build_joint_loss(
                &mut tape,
                graph.stage_probs,
                graph.apnea_probs,
                &stage_t,
                &apnea_t,
                &objective,
            )?;
            if !tape.scalar(nodes.joint).to_f64().is_finite() {
                outcome = TrainOutcome::AbortedNonFinite { epoch };
                break 'epochs;
            }
            agg.accumulate(sp.view(), ap.view(), &stage_t, &apnea_t, &objective)?;

            let mut grad_store = tape.backward(nodes.joint);
            let mut grads = Vec::with_capacity(graph.params.len());
            let mut grads_finite = true;
            for (i, (_, id)) in graph.params.iter().enumerate() {
                // a stochastic-depth drop can sever a whole branch from the
                // loss, leaving its parameters without a gradient this step
                let g = grad_store
                    .take(*id)
                    .unwrap_or_else(|| ArrayD::zeros(param_shapes[i].clone()));
                grads_finite &= g.iter().all(|v| Real::to_f64(*v).is_finite());
                grads.push(g);
            }
            if !grads_finite {
                outcome = TrainOutcome::AbortedNonFinite { epoch };
                break 'epochs;
            }
            opt.step(&mut params, &grads, lr)?;
        }

        let train_eval = agg.finish(objective.task_weights);
        let val_eval = if val_refs.is_empty() {
            None
        } else {
            Some(evaluate(&params, archive, &val_refs, train_config.batch_size, &objective)?)
        };

        history.push(EpochStats {
            epoch,
            lr,
            train_stage: train_eval.stage,
            train_apnea: train_eval.apnea,
            train_joint: train_eval.joint,
            val_stage: val_eval.map_or(TaskStats::nan(), |v| v.stage),
            val_apnea: val_eval.map_or(TaskStats::nan(), |v| v.apnea),
            val_joint: val_eval.map_or(f64::NAN, |v| v.joint),
        });

        if let Some(target) = train_config.target_train_accuracy {
            if train_eval.stage.accuracy >= target && train_eval.apnea.accuracy >= target {
                outcome = TrainOutcome::TargetReached { epoch };
                best = Some(params.clone());
                best_epoch = epoch;
                break;
            }
        }

        if let Some(v) = val_eval {
            if v.joint < best_val {
                best_val = v.joint;
                best = Some(params.clone());
                best_epoch = epoch;
                since_best = 0;
                if let Some(path) = best_checkpoint {
                    save_checkpoint(best.as_ref().unwrap(), path)?;
                }
            } else {
                since_best += 1;
                if train_config.early_stop_patience > 0
                    && since_best >= train_config.early_stop_patience
                {
                    outcome = TrainOutcome::EarlyStopped { epoch };
                    break;
                }
            }
        } else {
            best_epoch = epoch;
        }
    }

    let chosen = match best {
        Some(p) => p,
        None => params,
    };
    if let Some(path) = best_checkpoint {
        save_checkpoint(&chosen, path)?;
    }
    let wall_time_s = started.elapsed().as_secs_f64();
    Ok((
        chosen,
        TrainHistory { epochs: history, best_epoch, outcome, wall_time_s },
    ))
}

/// Columns of the history CSV, one row per epoch. Written with plain float
/// formatting so identical runs produce identical bytes; empty-validation
/// runs carry NaN in the val columns.
pub const HISTORY_COLUMNS: [&str; 16] = [
    "epoch",
    "lr",
    "train_stage_focal",
    "train_stage_ce",
    "train_stage_acc",
    "train_apnea_focal",
    "train_apnea_ce",
    "train_apnea_acc",
    "train_joint",
    "val_stage_focal",
    "val_stage_ce",
    "val_stage_acc",
    "val_apnea_focal",
    "val_apnea_ce",
    "val_apnea_acc",
    "val_joint",
];

pub fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_COLUMNS)?;
    for e in &history.epochs {
        let fields = [
            e.epoch.to_string(),
            e.lr.to_string(),
            e.train_stage.focal.to_string(),
            e.train_stage.ce.to_string(),
            e.train_stage.accuracy.to_string(),
            e.train_apnea.focal.to_string(),
            e.train_apnea.ce.to_string(),
            e.train_apnea.accuracy.to_string(),
            e.train_joint.to_string(),
            e.val_stage.focal.to_string(),
            e.val_stage.ce.to_string(),
            e.val_stage.accuracy.to_string(),
            e.val_apnea.focal.to_string(),
            e.val_apnea.ce.to_string(),
            e.val_apnea.accuracy.to_string(),
            e.val_joint.to_string(),
        ];
        w.write_record(&fields)?;
    }
    w.flush()?;
    Ok(())
}
