//! Processed dataset archive: fixed-shape segment tensors plus labels and a
//! manifest, written as a directory.
//!
//! Layout:
//!   manifest.json      format version, channel order, label histograms,
//!                      per-subject segment counts and tensor checksums
//!   labels.csv         one row per segment: subject, index, stage, apnea
//!   tensors/<id>.f32   little-endian f32, row-major [segment, channel, sample]
//!
//! Tensors are stored exactly as held in memory, so a write/read round trip
//! is bit-identical. Every read verifies the recorded CRC-32 first.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{
    ApneaLabel, Channel, Disorder, SignalError, SleepStage, N_CHANNELS, SAMPLES_PER_SEGMENT,
    TARGET_SAMPLE_RATE_HZ,
};

pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

/// One subject's processed segments and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub subject_id: String,
    pub disorder: Disorder,
    /// Per-segment (stage, apnea), index-aligned with `tensor`'s first axis.
    pub labels: Vec<(SleepStage, ApneaLabel)>,
    /// [segments, channels, samples], z-scored at the archive rate.
    pub tensor: Array3<f32>,
}

/// Processed cohort, subjects sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetArchive {
    pub subjects: Vec<SubjectData>,
}

/// Address of one segment within a [`DatasetArchive`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SegmentRef {
    pub subject: usize,
    pub segment: usize,
}

impl DatasetArchive {
    pub fn n_segments(&self) -> usize {
        self.subjects.iter().map(|s| s.labels.len()).sum()
    }

    pub fn stage_counts(&self) -> [usize; super::N_STAGE_CLASSES] {
        let mut counts = [0usize; super::N_STAGE_CLASSES];
        for subject in &self.subjects {
            for (stage, _) in &subject.labels {
                counts[stage.index()] += 1;
            }
        }
        counts
    }

    pub fn apnea_counts(&self) -> [usize; super::N_APNEA_CLASSES] {
        let mut counts = [0usize; super::N_APNEA_CLASSES];
        for subject in &self.subjects {
            for (_, apnea) in &subject.labels {
                counts[apnea.index()] += 1;
            }
        }
        counts
    }

    /// Refs for every segment of every subject accepted by `keep`, in
    /// (subject, segment) order.
    pub fn segment_refs_for<F: Fn(&SubjectData) -> bool>(&self, keep: F) -> Vec<SegmentRef> {
        let mut refs = Vec::new();
        for (si, subject) in self.subjects.iter().enumerate() {
            if keep(subject) {
                refs.extend((0..subject.labels.len()).map(|k| SegmentRef { subject: si, segment: k }));
            }
        }
        refs
    }

    pub fn segment_refs(&self) -> Vec<SegmentRef> {
        self.segment_refs_for(|_| true)
    }

    pub fn segment(&self, r: SegmentRef) -> (ndarray::ArrayView2<'_, f32>, SleepStage, ApneaLabel) {
        let subject = &self.subjects[r.subject];
        let (stage, apnea) = subject.labels[r.segment];
        (subject.tensor.index_axis(ndarray::Axis(0), r.segment), stage, apnea)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    pub count: usize,
    /// Share of all segments, percent rounded to two decimals.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    pub disorder: Disorder,
    pub n_segments: usize,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub version: u32,
    pub channels: Vec<String>,
    pub sampling_rate_hz: f64,
    pub samples_per_segment: usize,
    pub n_subjects: usize,
    pub n_segments: usize,
    pub stage_histogram: BTreeMap<String, ClassStat>,
    pub apnea_histogram: BTreeMap<String, ClassStat>,
    pub subjects: Vec<ManifestSubject>,
}

fn tensor_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("tensors").join(format!("{id}.f32"))
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (10000.0 * count as f64 / total as f64).round() / 100.0
}

fn tensor_bytes(tensor: &Array3<f32>) -> Vec<u8> {
    let slice = tensor.as_slice().expect("archive tensors are standard layout");
    let mut bytes = Vec::with_capacity(slice.len() * 4);
    for &v in slice {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// Writes the archive under `dir` and returns the manifest it stored.
pub fn write_archive(archive: &DatasetArchive, dir: &Path) -> Result<ArchiveManifest, SignalError> {
    fs::create_dir_all(dir.join("tensors"))?;

    let total = archive.n_segments();
    let mut label_writer = csv::Writer::from_path(dir.join("labels.csv"))
        .map_err(|e| SignalError::Format(e.to_string()))?;
    label_writer
        .write_record(["subject_id", "segment", "stage", "apnea"])
        .map_err(|e| SignalError::Format(e.to_string()))?;

    let mut subjects = Vec::with_capacity(archive.subjects.len());
    for subject in &archive.subjects {
        let bytes = tensor_bytes(&subject.tensor);
        fs::write(tensor_path(dir, &subject.subject_id), &bytes)?;
        for (k, (stage, apnea)) in subject.labels.iter().enumerate() {
            label_writer
                .write_record([
                    subject.subject_id.as_str(),
                    &k.to_string(),
                    stage.name(),
                    apnea.name(),
                ])
                .map_err(|e| SignalError::Format(e.to_string()))?;
        }
        subjects.push(ManifestSubject {
            id: subject.subject_id.clone(),
            disorder: subject.disorder,
            n_segments: subject.labels.len(),
            crc32: crc32fast::hash(&bytes),
        });
    }
    label_writer.flush()?;

    let histogram = |counts: &[usize], names: &[&str]| {
        counts
            .iter()
            .zip(names)
            .map(|(&c, &n)| (n.to_string(), ClassStat { count: c, percent: percent(c, total) }))
            .collect::<BTreeMap<_, _>>()
    };
    let stage_names: Vec<&str> = SleepStage::ALL.iter().map(|s| s.name()).collect();
    let apnea_names: Vec<&str> = ApneaLabel::ALL.iter().map(|a| a.name()).collect();

    let manifest = ArchiveManifest {
        version: ARCHIVE_FORMAT_VERSION,
        channels: Channel::ALL.iter().map(|c| c.name().to_string()).collect(),
        sampling_rate_hz: TARGET_SAMPLE_RATE_HZ,
        samples_per_segment: SAMPLES_PER_SEGMENT,
        n_subjects: archive.subjects.len(),
        n_segments: total,
        stage_histogram: histogram(&archive.stage_counts(), &stage_names),
        apnea_histogram: histogram(&archive.apnea_counts(), &apnea_names),
        subjects,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| SignalError::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<ArchiveManifest, SignalError> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: ArchiveManifest =
        serde_json::from_str(&text).map_err(|e| SignalError::Format(e.to_string()))?;
    if manifest.version != ARCHIVE_FORMAT_VERSION {
        return Err(SignalError::Format(format!(
            "unsupported archive version {}, expected {ARCHIVE_FORMAT_VERSION}",
            manifest.version
        )));
    }
    let expected: Vec<String> = Channel::ALL.iter().map(|c| c.name().to_string()).collect();
    if manifest.channels != expected {
        return Err(SignalError::ChannelOrderMismatch(manifest.channels));
    }
    if manifest.samples_per_segment != SAMPLES_PER_SEGMENT {
        return Err(SignalError::Format(format!(
            "archive stores {} samples per segment, expected {SAMPLES_PER_SEGMENT}",
            manifest.samples_per_segment
        )));
    }
    Ok(manifest)
}

/// Reads a full archive back, verifying checksums, shapes, and label counts.
pub fn read_archive(dir: &Path) -> Result<DatasetArchive, SignalError> {
    let manifest = read_manifest(dir)?;

    let mut labels: BTreeMap<String, Vec<(SleepStage, ApneaLabel)>> = BTreeMap::new();
    let mut reader =
        csv::Reader::from_path(dir.join("labels.csv")).map_err(|e| SignalError::Format(e.to_string()))?;
    for row in reader.records() {
        let row = row.map_err(|e| SignalError::Format(e.to_string()))?;
        if row.len() != 4 {
            return Err(SignalError::Format(format!("labels.csv row has {} fields", row.len())));
        }
        let stage = SleepStage::parse(&row[2])?;
        let apnea = ApneaLabel::parse(&row[3])?;
        labels.entry(row[0].to_string()).or_default().push((stage, apnea));
    }

    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let subject_labels = labels.remove(&entry.id).ok_or_else(|| {
            SignalError::Format(format!("subject {} has no rows in labels.csv", entry.id))
        })?;
        if subject_labels.len() != entry.n_segments {
            return Err(SignalError::Format(format!(
                "subject {} has {} label rows for {} segments",
                entry.id,
                subject_labels.len(),
                entry.n_segments
            )));
        }

        let bytes = fs::read(tensor_path(dir, &entry.id))?;
        let expected = entry.n_segments * N_CHANNELS * SAMPLES_PER_SEGMENT * 4;
        if bytes.len() != expected {
            return Err(SignalError::ShapeMismatch(format!(
                "subject {} tensor holds {} bytes, expected {expected}",
                entry.id,
                bytes.len()
            )));
        }
        let actual = crc32fast::hash(&bytes);
        if actual != entry.crc32 {
            return Err(SignalError::ChecksumMismatch(format!(
                "subject {} tensor (recorded {:08x}, computed {actual:08x})",
                entry.id, entry.crc32
            )));
        }
        let data: Vec<f32> =
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor =
            Array3::from_shape_vec((entry.n_segments, N_CHANNELS, SAMPLES_PER_SEGMENT), data)
                .map_err(|e| SignalError::ShapeMismatch(e.to_string()))?;

        subjects.push(SubjectData {
            subject_id: entry.id.clone(),
            disorder: entry.disorder,
            labels: subject_labels,
            tensor,
        });
    }
    if let Some(orphan) = labels.keys().next() {
        return Err(SignalError::Format(format!(
            "labels.csv lists subject {orphan} absent from the manifest"
        )));
    }
    Ok(DatasetArchive { subjects })
}
