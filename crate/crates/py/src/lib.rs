//! Python bindings: cohort generation, archive access, training, inference
//! with attention read-out, and the metric suite. Signals cross the boundary
//! as numpy arrays; everything else is plain Python types.

use std::path::Path;

use ndarray::{Array3, ArrayView2};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray2};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use somnivit::cli::RunConfig;
use somnivit::explain::{extract_class_attention, head_average_importance};
use somnivit::metrics::{confusion_matrix, metrics_report};
use somnivit::model::{
    checkpoint_meta, forward, load_checkpoint, AttentionBundle, ModelConfig, ModelParams,
};
use somnivit::numerics::{Mode, Precision, Real};
use somnivit::signal::{
    assemble_subject, collect_archive, read_archive, split_by_subject, write_archive, ApneaLabel,
    DatasetArchive, SegmentRef, SleepStage, DEFAULT_SPLIT,
};
use somnivit::synth::{read_cohort_manifest, read_raw_subject, write_raw_cohort};
use somnivit::train::{train, TrainHistory};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn config_from(text: &str, seed: Option<u64>) -> PyResult<RunConfig> {
    let mut config = RunConfig::from_toml(text).map_err(err)?;
    config.resolve(seed, None);
    config.validate().map_err(err)?;
    Ok(config)
}

/// Generates a raw cohort under `out_dir` and returns the subject ids.
#[pyfunction]
#[pyo3(signature = (config_toml, out_dir, seed=None))]
fn synth_cohort(config_toml: &str, out_dir: &str, seed: Option<u64>) -> PyResult<Vec<String>> {
    let config = config_from(config_toml, seed)?;
    let manifest = write_raw_cohort(&config.generator, Path::new(out_dir)).map_err(err)?;
    Ok(manifest.subjects.into_iter().map(|s| s.id).collect())
}

/// Preprocesses a raw cohort into a segment archive with a subject split.
/// Returns (n_subjects, n_segments).
#[pyfunction]
#[pyo3(signature = (config_toml, raw_dir, out_dir, seed=None))]
fn prepare_archive(
    config_toml: &str,
    raw_dir: &str,
    out_dir: &str,
    seed: Option<u64>,
) -> PyResult<(usize, usize)> {
    let config = config_from(config_toml, seed)?;
    let raw = Path::new(raw_dir);
    let manifest = read_cohort_manifest(raw).map_err(err)?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let record = read_raw_subject(raw, manifest.sampling_rate_hz, entry).map_err(err)?;
        subjects.push(assemble_subject(&record).map_err(err)?);
    }
    let archive = collect_archive(subjects).map_err(err)?;
    write_archive(&archive, Path::new(out_dir)).map_err(err)?;

    let ids: Vec<String> = archive.subjects.iter().map(|s| s.subject_id.clone()).collect();
    let fractions = config.split_fractions.unwrap_or(DEFAULT_SPLIT);
    let split = split_by_subject(&ids, fractions, config.seed).map_err(err)?;
    let json = serde_json::to_string_pretty(&split).map_err(err)?;
    std::fs::write(Path::new(out_dir).join("split.json"), json + "\n").map_err(err)?;
    Ok((archive.subjects.len(), archive.n_segments()))
}

fn history_dict<'py>(py: Python<'py>, history: &TrainHistory) -> PyResult<Bound<'py, PyDict>> {
    let dict = PyDict::new_bound(py);
    dict.set_item("outcome", history.outcome.to_string())?;
    dict.set_item("best_epoch", history.best_epoch)?;
    dict.set_item("epochs_run", history.epochs.len())?;
    dict.set_item("wall_time_s", history.wall_time_s)?;
    let epochs: Vec<Bound<'py, PyDict>> = history
        .epochs
        .iter()
        .map(|e| {
            let row = PyDict::new_bound(py);
            row.set_item("epoch", e.epoch)?;
            row.set_item("lr", e.lr)?;
            row.set_item("train_stage_accuracy", e.train_stage.accuracy)?;
            row.set_item("train_apnea_accuracy", e.train_apnea.accuracy)?;
            row.set_item("train_joint", e.train_joint)?;
            row.set_item("val_stage_accuracy", e.val_stage.accuracy)?;
            row.set_item("val_apnea_accuracy", e.val_apnea.accuracy)?;
            row.set_item("val_joint", e.val_joint)?;
            Ok(row)
        })
        .collect::<PyResult<_>>()?;
    dict.set_item("epochs", epochs)?;
    Ok(dict)
}

/// Trains on the archive's train split and writes the best checkpoint.
/// Returns the run history.
#[pyfunction]
#[pyo3(signature = (config_toml, archive_dir, checkpoint_out, seed=None))]
fn train_model<'py>(
    py: Python<'py>,
    config_toml: &str,
    archive_dir: &str,
    checkpoint_out: &str,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let config = config_from(config_toml, seed)?;
    let archive = read_archive(Path::new(archive_dir)).map_err(err)?;
    let split_path = Path::new(archive_dir).join("split.json");
    let split = serde_json::from_str(&std::fs::read_to_string(&split_path).map_err(err)?)
        .map_err(err)?;

    let ckpt = Path::new(checkpoint_out);
    let history = match config.train_precision() {
        Precision::F32 => {
            train::<f32>(&config.model, &config.train, &archive, &split, Some(ckpt))
                .map_err(err)?
                .1
        }
        Precision::F64 => {
            train::<f64>(&config.model, &config.train, &archive, &split, Some(ckpt))
                .map_err(err)?
                .1
        }
    };
    history_dict(py, &history)
}

/// Classification metrics for one task: accuracy, weighted averages,
/// per-class F1, Cohen's kappa, and the confusion matrix.
#[pyfunction]
fn metrics_summary<'py>(
    py: Python<'py>,
    true_labels: Vec<usize>,
    predicted_labels: Vec<usize>,
    class_names: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let cm = confusion_matrix(&true_labels, &predicted_labels, class_names.len())
        .and_then(|cm| cm.with_class_names(class_names.clone()))
        .map_err(err)?;
    let report = metrics_report(&cm, None).map_err(err)?;

    let dict = PyDict::new_bound(py);
    dict.set_item("accuracy", report.accuracy)?;
    dict.set_item("precision_weighted", report.precision_weighted)?;
    dict.set_item("recall_weighted", report.recall_weighted)?;
    dict.set_item("f1_weighted", report.f1_weighted)?;
    dict.set_item("per_class_f1", report.per_class_f1)?;
    dict.set_item("kappa", report.kappa)?;
    dict.set_item("kappa_degenerate", report.kappa_degenerate)?;
    dict.set_item("zero_division_classes", report.zero_division_classes)?;
    dict.set_item("confusion", report.confusion.counts().to_vec())?;
    dict.set_item("class_names", class_names)?;
    Ok(dict)
}

/// Read-only view of a prepared segment archive.
#[pyclass]
struct Archive {
    inner: DatasetArchive,
}

impl Archive {
    fn subject_index(&self, subject_id: &str) -> PyResult<usize> {
        self.inner
            .subjects
            .iter()
            .position(|s| s.subject_id == subject_id)
            .ok_or_else(|| err(format!("subject {subject_id} not in archive")))
    }
}

#[pymethods]
impl Archive {
    #[staticmethod]
    fn open(dir: &str) -> PyResult<Archive> {
        Ok(Archive { inner: read_archive(Path::new(dir)).map_err(err)? })
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.subjects.len()
    }

    #[getter]
    fn n_segments(&self) -> usize {
        self.inner.n_segments()
    }

    fn subject_ids(&self) -> Vec<String> {
        self.inner.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    fn disorder(&self, subject_id: &str) -> PyResult<String> {
        let i = self.subject_index(subject_id)?;
        Ok(self.inner.subjects[i].disorder.name().to_string())
    }

    /// (stage, apnea) name pairs for every segment of one subject.
    fn labels(&self, subject_id: &str) -> PyResult<Vec<(String, String)>> {
        let i = self.subject_index(subject_id)?;
        Ok(self.inner.subjects[i]
            .labels
            .iter()
            .map(|(s, a)| (s.name().to_string(), a.name().to_string()))
            .collect())
    }

    /// One segment as (channels x samples array, stage name, apnea name).
    fn segment<'py>(
        &self,
        py: Python<'py>,
        subject_id: &str,
        index: usize,
    ) -> PyResult<(Bound<'py, PyArray2<f32>>, String, String)> {
        let subject = self.subject_index(subject_id)?;
        let n = self.inner.subjects[subject].labels.len();
        if index >= n {
            return Err(err(format!("segment {index} out of range, subject has {n}")));
        }
        let (view, stage, apnea) = self.inner.segment(SegmentRef { subject, segment: index });
        Ok((
            view.to_owned().into_pyarray_bound(py),
            stage.name().to_string(),
            apnea.name().to_string(),
        ))
    }
}

enum ParamStore {
    F32(ModelParams<f32>),
    F64(ModelParams<f64>),
}

/// A trained classifier restored from a checkpoint file.
#[pyclass]
struct Model {
    params: ParamStore,
    config: ModelConfig,
    precision: Precision,
}

fn forward_one<T: Real>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    x: ArrayView2<'_, f32>,
) -> PyResult<(Vec<f64>, Vec<f64>, AttentionBundle)> {
    if x.nrows() != config.input_channels || x.ncols() != config.input_length {
        return Err(err(format!(
            "expected a {} x {} signal, got {} x {}",
            config.input_channels,
            config.input_length,
            x.nrows(),
            x.ncols()
        )));
    }
    let batch = Array3::from_shape_fn((1, x.nrows(), x.ncols()), |(_, c, s)| {
        T::from_f64(f64::from(x[[c, s]]))
    });
    let out = forward(params, &batch, Mode::Eval, None).map_err(err)?;
    let stage = out.stage_probs.row(0).iter().map(|&v| Real::to_f64(v)).collect();
    let apnea = out.apnea_probs.row(0).iter().map(|&v| Real::to_f64(v)).collect();
    let bundle = out.attention.into_iter().next().expect("batch of one");
    Ok((stage, apnea, bundle))
}

impl Model {
    fn run(&self, x: ArrayView2<'_, f32>) -> PyResult<(Vec<f64>, Vec<f64>, AttentionBundle)> {
        match &self.params {
            ParamStore::F32(p) => forward_one(p, &self.config, x),
            ParamStore::F64(p) => forward_one(p, &self.config, x),
        }
    }
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in probs.iter().enumerate().skip(1) {
        if v > probs[best] {
            best = i;
        }
    }
    best
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let path = Path::new(path);
        let (config, precision) = checkpoint_meta(path).map_err(err)?;
        let params = match precision {
            Precision::F32 => ParamStore::F32(load_checkpoint(path).map_err(err)?),
            Precision::F64 => ParamStore::F64(load_checkpoint(path).map_err(err)?),
        };
        Ok(Model { params, config, precision })
    }

    #[getter]
    fn precision(&self) -> String {
        self.precision.to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.config.param_count()
    }

    #[getter]
    fn n_patches(&self) -> usize {
        self.config.n_patches()
    }

    /// Class probabilities and argmax labels for one channels x samples
    /// signal.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray2<'py, f32>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let (stage, apnea, _) = self.run(x.as_array())?;
        let dict = PyDict::new_bound(py);
        dict.set_item("stage", SleepStage::ALL[argmax(&stage)].name())?;
        dict.set_item("apnea", ApneaLabel::ALL[argmax(&apnea)].name())?;
        dict.set_item("stage_probs", stage)?;
        dict.set_item("apnea_probs", apnea)?;
        Ok(dict)
    }

    /// Class-token attention over patches: (head-averaged vector, heads x
    /// patches matrix). `layer` defaults to the last encoder layer.
    #[pyo3(signature = (x, layer=None))]
    fn attention<'py>(
        &self,
        py: Python<'py>,
        x: PyReadonlyArray2<'py, f32>,
        layer: Option<usize>,
    ) -> PyResult<(Bound<'py, PyArray1<f64>>, Bound<'py, PyArray2<f64>>)> {
        let (_, _, bundle) = self.run(x.as_array())?;
        let per_head = extract_class_attention(&bundle, layer).map_err(err)?;
        let importance = head_average_importance(per_head.view());
        Ok((importance.into_pyarray_bound(py), per_head.into_pyarray_bound(py)))
    }
}

#[pymodule]
fn somnivit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_archive, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_summary, m)?)?;
    m.add_class::<Archive>()?;
    m.add_class::<Model>()?;
    Ok(())
}
