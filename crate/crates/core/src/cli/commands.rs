//! The five subcommand bodies. Each writes `resolved_config.toml` into its
//! output directory first, so every artifact directory names the exact
//! configuration and seed that produced it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use ndarray::Array3;
use serde::Serialize;

use crate::explain::{
    extract_class_attention, head_average_importance, map_importance_to_samples, render_overlay,
    ImportanceMap,
};
use crate::metrics::{
    confusion_matrix, confusion_to_csv, metrics_report, report_to_text, stratified_report,
    ConfusionMatrix, MetricsReport,
};
use crate::model::{checkpoint_meta, forward, load_checkpoint, ModelParams};
use crate::numerics::{Mode, Precision, Real};
use crate::signal::{
    assemble_subject, collect_archive, split_by_subject, ApneaLabel, Channel, DatasetArchive,
    Disorder, SegmentRef, SleepStage, SplitIndex, DEFAULT_SPLIT, TARGET_SAMPLE_RATE_HZ,
};
use crate::synth::{read_cohort_manifest, read_raw_subject, write_raw_cohort};
use crate::train::{predict, train, write_history_csv, TrainOutcome};

use super::{CliError, RunConfig, SplitName};

fn prepare_out_dir(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    config.write_resolved(out)
}

fn require_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

pub fn cmd_synth(config: &RunConfig, out: &Path, quiet: bool) -> Result<(), CliError> {
    prepare_out_dir(config, out)?;
    let manifest = write_raw_cohort(&config.generator, out)?;
    let epochs: usize = manifest.subjects.iter().map(|s| s.epochs.len()).sum();
    if !quiet {
        println!(
            "synth: wrote {} subjects ({} epochs at {} Hz) to {}",
            manifest.subjects.len(),
            epochs,
            manifest.sampling_rate_hz,
            out.display()
        );
    }
    Ok(())
}

pub fn cmd_prepare(
    config: &RunConfig,
    raw: &Path,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    require_exists(raw, "raw cohort directory")?;
    let manifest = read_cohort_manifest(raw)?;
    prepare_out_dir(config, out)?;

    // one subject in flight at a time; raw recordings dwarf the archive
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let record = read_raw_subject(raw, manifest.sampling_rate_hz, entry)?;
        subjects.push(assemble_subject(&record)?);
    }
    let archive = collect_archive(subjects)?;
    crate::signal::write_archive(&archive, out)?;

    let ids: Vec<String> = archive.subjects.iter().map(|s| s.subject_id.clone()).collect();
    let fractions = config.split_fractions.unwrap_or(DEFAULT_SPLIT);
    let split = split_by_subject(&ids, fractions, config.seed)?;
    let mut split_json = serde_json::to_string_pretty(&split)?;
    split_json.push('\n');
    fs::write(out.join("split.json"), split_json)?;

    if !quiet {
        println!(
            "prepare: archived {} subjects / {} segments to {} (split {}/{}/{})",
            archive.subjects.len(),
            archive.n_segments(),
            out.display(),
            split.train.len(),
            split.val.len(),
            split.test.len()
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    outcome: String,
    best_epoch: usize,
    epochs_run: usize,
    wall_time_s: f64,
}

fn read_split(archive_dir: &Path) -> Result<SplitIndex, CliError> {
    let path = archive_dir.join("split.json");
    require_exists(&path, "split index")?;
    let split: SplitIndex = serde_json::from_str(&fs::read_to_string(&path)?)?;
    split.validate()?;
    Ok(split)
}

fn load_archive(archive_dir: &Path) -> Result<DatasetArchive, CliError> {
    require_exists(archive_dir, "archive directory")?;
    Ok(crate::signal::read_archive(archive_dir)?)
}

pub fn cmd_train(
    config: &RunConfig,
    archive_dir: &Path,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let archive = load_archive(archive_dir)?;
    let split = read_split(archive_dir)?;
    prepare_out_dir(config, out)?;
    match config.train_precision() {
        Precision::F32 => run_train::<f32>(config, &archive, &split, out, quiet),
        Precision::F64 => run_train::<f64>(config, &archive, &split, out, quiet),
    }
}

fn run_train<T: Real>(
    config: &RunConfig,
    archive: &DatasetArchive,
    split: &SplitIndex,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let best = out.join("best.ckpt");
    let (_, history) = train::<T>(&config.model, &config.train, archive, split, Some(&best))?;

    write_history_csv(&history, &out.join("history.csv"))?;
    let summary = TrainSummary {
        outcome: history.outcome.to_string(),
        best_epoch: history.best_epoch,
        epochs_run: history.epochs.len(),
        wall_time_s: history.wall_time_s,
    };
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    fs::write(out.join("summary.json"), summary_json)?;

    if !quiet {
        println!(
            "train: {} after {} epochs, best epoch {}, checkpoint {}",
            history.outcome,
            history.epochs.len(),
            history.best_epoch,
            best.display()
        );
    }
    if let TrainOutcome::AbortedNonFinite { epoch } = history.outcome {
        return Err(CliError::TrainAborted(epoch));
    }
    Ok(())
}

fn split_ids(split: &SplitIndex, name: SplitName) -> &[String] {
    match name {
        SplitName::Train => &split.train,
        SplitName::Val => &split.val,
        SplitName::Test => &split.test,
    }
}

fn refs_for_ids(
    archive: &DatasetArchive,
    ids: &[String],
    what: &str,
) -> Result<Vec<SegmentRef>, CliError> {
    let present: BTreeSet<&str> =
        archive.subjects.iter().map(|s| s.subject_id.as_str()).collect();
    for id in ids {
        if !present.contains(id.as_str()) {
            return Err(CliError::Config(format!(
                "{what} split names subject {id}, which the archive does not hold"
            )));
        }
    }
    let wanted: BTreeSet<&str> = ids.iter().map(|s| s.as_str()).collect();
    Ok(archive.segment_refs_for(|s| wanted.contains(s.subject_id.as_str())))
}

fn stage_names() -> Vec<String> {
    SleepStage::ALL.iter().map(|s| s.name().to_string()).collect()
}

fn apnea_names() -> Vec<String> {
    ApneaLabel::ALL.iter().map(|a| a.name().to_string()).collect()
}

/// Overall plus per-disorder reports for one task.
#[derive(Serialize)]
struct TaskEval {
    overall: MetricsReport,
    by_disorder: BTreeMap<String, MetricsReport>,
}

fn task_eval(
    true_labels: &[usize],
    predicted: &[usize],
    disorders: &[Disorder],
    class_names: &[String],
) -> Result<(TaskEval, ConfusionMatrix), CliError> {
    let cm = confusion_matrix(true_labels, predicted, class_names.len())?
        .with_class_names(class_names.to_vec())?;
    let overall = metrics_report(&cm, None)?;
    let by_disorder = stratified_report(true_labels, predicted, disorders, class_names)?
        .into_iter()
        .map(|(d, r)| (d.name().to_string(), r))
        .collect();
    Ok((TaskEval { overall, by_disorder }, cm))
}

fn eval_text(title: &str, eval: &TaskEval) -> String {
    let mut text = format!("# {title}\n");
    text.push_str(&report_to_text(&eval.overall));
    for report in eval.by_disorder.values() {
        text.push_str(&report_to_text(report));
    }
    text
}

/// Resolves the element type from the checkpoint, holding it against any
/// explicitly requested precision.
fn checkpoint_precision(
    config: &RunConfig,
    checkpoint: &Path,
) -> Result<Precision, CliError> {
    require_exists(checkpoint, "checkpoint")?;
    let (_, stored) = checkpoint_meta(checkpoint)?;
    if let Some(requested) = config.precision {
        if requested != stored {
            return Err(CliError::Config(format!(
                "checkpoint {} holds {stored} parameters but the run requests {requested}",
                checkpoint.display()
            )));
        }
    }
    Ok(stored)
}

pub fn cmd_eval(
    config: &RunConfig,
    archive_dir: &Path,
    checkpoint: &Path,
    split: SplitName,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let precision = checkpoint_precision(config, checkpoint)?;
    let archive = load_archive(archive_dir)?;
    let split_index = read_split(archive_dir)?;
    prepare_out_dir(config, out)?;

    let refs = refs_for_ids(&archive, split_ids(&split_index, split), split.as_str())?;
    let batch = config.train.batch_size;
    let predictions = match precision {
        Precision::F32 => {
            let params = load_checkpoint::<f32>(checkpoint)?;
            predict(&params, &archive, &refs, batch)?
        }
        Precision::F64 => {
            let params = load_checkpoint::<f64>(checkpoint)?;
            predict(&params, &archive, &refs, batch)?
        }
    };
    let disorders: Vec<Disorder> =
        predictions.refs.iter().map(|r| archive.subjects[r.subject].disorder).collect();

    let (stage, stage_cm) = task_eval(
        &predictions.stage_true,
        &predictions.stage_pred,
        &disorders,
        &stage_names(),
    )?;
    let (apnea, apnea_cm) = task_eval(
        &predictions.apnea_true,
        &predictions.apnea_pred,
        &disorders,
        &apnea_names(),
    )?;

    for (name, eval) in [("stage", &stage), ("apnea", &apnea)] {
        let mut json = serde_json::to_string_pretty(eval)?;
        json.push('\n');
        fs::write(out.join(format!("eval_{name}.json")), json)?;
    }
    fs::write(out.join("confusion_stage.csv"), confusion_to_csv(&stage_cm)?)?;
    fs::write(out.join("confusion_apnea.csv"), confusion_to_csv(&apnea_cm)?)?;

    let text = format!(
        "{}\n{}",
        eval_text("sleep stage", &stage),
        eval_text("apnea", &apnea)
    );
    fs::write(out.join("report.txt"), &text)?;
    if !quiet {
        print!("{text}");
        println!(
            "eval: scored {} {} segments into {}",
            predictions.refs.len(),
            split.as_str(),
            out.display()
        );
    }
    Ok(())
}

fn parse_selector(selector: &str) -> Result<(&str, usize), CliError> {
    let (id, idx) = selector.rsplit_once('/').ok_or_else(|| {
        CliError::Config(format!(
            "segment selector {selector:?} is not of the form <subject_id>/<index>"
        ))
    })?;
    let idx = idx.parse().map_err(|_| {
        CliError::Config(format!("segment selector {selector:?} has a non-numeric index"))
    })?;
    Ok((id, idx))
}

fn parse_channels(list: Option<&str>) -> Result<Vec<Channel>, CliError> {
    match list {
        None => Ok(Channel::ALL.to_vec()),
        Some(s) => s
            .split(',')
            .map(|name| Channel::parse(name.trim()).map_err(CliError::from))
            .collect(),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_explain(
    config: &RunConfig,
    archive_dir: &Path,
    checkpoint: &Path,
    selectors: &[String],
    channels: Option<&str>,
    layer: Option<usize>,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    let precision = checkpoint_precision(config, checkpoint)?;
    let archive = load_archive(archive_dir)?;
    let channels = parse_channels(channels)?;
    prepare_out_dir(config, out)?;
    match precision {
        Precision::F32 => {
            let params = load_checkpoint::<f32>(checkpoint)?;
            run_explain(&params, &archive, selectors, &channels, layer, out, quiet)
        }
        Precision::F64 => {
            let params = load_checkpoint::<f64>(checkpoint)?;
            run_explain(&params, &archive, selectors, &channels, layer, out, quiet)
        }
    }
}

fn run_explain<T: Real>(
    params: &ModelParams<T>,
    archive: &DatasetArchive,
    selectors: &[String],
    channels: &[Channel],
    layer: Option<usize>,
    out: &Path,
    quiet: bool,
) -> Result<(), CliError> {
    for selector in selectors {
        let (id, idx) = parse_selector(selector)?;
        let subject = archive
            .subjects
            .iter()
            .position(|s| s.subject_id == id)
            .ok_or_else(|| CliError::Config(format!("subject {id} not in archive")))?;
        let n = archive.subjects[subject].labels.len();
        if idx >= n {
            return Err(CliError::Config(format!(
                "segment {idx} out of range, subject {id} has {n} segments"
            )));
        }
        let r = SegmentRef { subject, segment: idx };
        let (view, stage, apnea) = archive.segment(r);

        let batch = Array3::from_shape_fn((1, view.nrows(), view.ncols()), |(_, c, s)| {
            T::from_f64(f64::from(view[[c, s]]))
        });
        let output = forward(params, &batch, Mode::Eval, None)?;
        let per_head = extract_class_attention(&output.attention[0], layer)?;
        let importance = head_average_importance(per_head.view());
        let annotated = map_importance_to_samples(
            importance.as_slice().expect("contiguous"),
            view.ncols(),
            TARGET_SAMPLE_RATE_HZ,
        )?;
        let map = ImportanceMap {
            segment_id: selector.clone(),
            per_head,
            importance,
            spans: annotated.into_iter().map(|(span, _)| span).collect(),
        };

        let seg_dir = out.join(format!("{id}_{idx}"));
        let files = render_overlay(view, apnea, &map, channels, &seg_dir)?;

        if !quiet {
            let stage_pred = argmax_row(&output.stage_probs);
            let apnea_pred = argmax_row(&output.apnea_probs);
            println!(
                "explain: {selector} true {}/{} predicted {}/{} -> {} ({} svg)",
                stage.name(),
                apnea.name(),
                SleepStage::ALL[stage_pred].name(),
                ApneaLabel::ALL[apnea_pred].name(),
                files.csv.display(),
                files.svgs.len()
            );
        }
    }
    Ok(())
}

fn argmax_row<T: Real>(probs: &ndarray::Array2<T>) -> usize {
    let row = probs.row(0);
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
