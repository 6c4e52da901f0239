//! Recording and dataset types plus the preprocessing pipeline.
//!
//! A [`SignalRecord`] holds one subject's four channels at their native
//! sampling rate together with per-epoch labels. [`assemble_dataset`] turns a
//! set of records into a [`DatasetArchive`] of fixed-shape training examples:
//! 30-second windows are cut at the native rate, resampled to 64 Hz, and
//! z-scored per subject and channel over that subject's full set of windows,
//! so every archived channel has zero mean and unit variance at the subject
//! level.

mod archive;
mod normalize;
mod resample;
mod segment;
mod split;
mod types;

pub use archive::{
    read_archive, read_manifest, write_archive, ArchiveManifest, ClassStat, DatasetArchive,
    ManifestSubject, SegmentRef, SubjectData, ARCHIVE_FORMAT_VERSION,
};
pub use normalize::{zscore_normalize, ZScored, ZSCORE_EPSILON};
pub use resample::resample_linear;
pub use segment::{segment_recording, RawSegment};
pub use split::{split_by_subject, SplitFractions, SplitIndex, DEFAULT_SPLIT};
pub use types::{
    ApneaLabel, Channel, Disorder, EpochAnnotation, SignalRecord, SleepStage, EPOCH_SECONDS,
    N_APNEA_CLASSES, N_CHANNELS, N_STAGE_CLASSES, SAMPLES_PER_SEGMENT, TARGET_SAMPLE_RATE_HZ,
};

use ndarray::Array3;

#[derive(Debug, thiserror::Error)]
pub enum SignalError {
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("non-finite signal: {0}")]
    NonFinite(String),
    #[error("annotation/epoch mismatch: {0}")]
    AnnotationMismatch(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error("channel order mismatch: archive declares {0:?}")]
    ChannelOrderMismatch(Vec<String>),
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed archive: {0}")]
    Format(String),
}

/// Runs the full preprocessing pipeline over a cohort of records.
///
/// Per record: validate, cut 30 s windows at the native rate, resample each
/// window channel to 64 Hz / 1920 samples, then z-score each channel per
/// subject over the concatenation of that subject's windows. Subjects come
/// out sorted by id so downstream artifacts are order-independent.
pub fn assemble_dataset(records: &[SignalRecord]) -> Result<DatasetArchive, SignalError> {
    let mut subjects = Vec::with_capacity(records.len());
    for record in records {
        subjects.push(assemble_subject(record)?);
    }
    collect_archive(subjects)
}

/// Sorts per-subject results into a [`DatasetArchive`], rejecting duplicate
/// ids. Counterpart of [`assemble_subject`] for streaming callers.
pub fn collect_archive(mut subjects: Vec<SubjectData>) -> Result<DatasetArchive, SignalError> {
    subjects.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    for pair in subjects.windows(2) {
        if pair[0].subject_id == pair[1].subject_id {
            return Err(SignalError::InvalidArgument(format!(
                "duplicate subject id {:?}",
                pair[0].subject_id
            )));
        }
    }
    Ok(DatasetArchive { subjects })
}

/// Single-record step of [`assemble_dataset`]. Lets callers stream subjects
/// through the pipeline one at a time instead of holding a whole cohort of
/// raw recordings in memory.
pub fn assemble_subject(record: &SignalRecord) -> Result<SubjectData, SignalError> {
    let windows = segment_recording(record)?;
    let n = windows.len();
    if n == 0 {
        return Err(SignalError::InsufficientSamples(format!(
            "subject {:?} has no complete 30 s epoch",
            record.subject_id
        )));
    }

    // Resample every window channel to the archive rate.
    let mut resampled: Vec<[Vec<f64>; N_CHANNELS]> = Vec::with_capacity(n);
    for w in &windows {
        let mut chans: [Vec<f64>; N_CHANNELS] = Default::default();
        for (c, data) in w.channels.iter().enumerate() {
            let out = resample_linear(data, record.sampling_rate_hz, TARGET_SAMPLE_RATE_HZ)?;
            if out.len() != SAMPLES_PER_SEGMENT {
                return Err(SignalError::ShapeMismatch(format!(
                    "window resampled to {} samples, expected {SAMPLES_PER_SEGMENT}",
                    out.len()
                )));
            }
            chans[c] = out;
        }
        resampled.push(chans);
    }

    // Per-channel z-score over the subject's full set of windows, so the
    // archived segments are normalized at exactly the rate they are stored.
    let mut tensor = Array3::<f32>::zeros((n, N_CHANNELS, SAMPLES_PER_SEGMENT));
    for c in 0..N_CHANNELS {
        let mut joined = Vec::with_capacity(n * SAMPLES_PER_SEGMENT);
        for w in &resampled {
            joined.extend_from_slice(&w[c]);
        }
        let z = zscore_normalize(&joined)?;
        for (i, chunk) in z.values.chunks_exact(SAMPLES_PER_SEGMENT).enumerate() {
            for (s, &v) in chunk.iter().enumerate() {
                tensor[[i, c, s]] = v as f32;
            }
        }
    }

    Ok(SubjectData {
        subject_id: record.subject_id.clone(),
        disorder: record.disorder,
        labels: windows.iter().map(|w| (w.stage, w.apnea)).collect(),
        tensor,
    })
}
