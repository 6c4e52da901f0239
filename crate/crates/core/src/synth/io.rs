//! On-disk cohort layout: `cohort.json` describing every subject plus one
//! raw sample file per subject under `raw/`.
//!
//! Raw files hold little-endian f32 samples, whole channels back to back in
//! canonical channel order. Each file's CRC-32 is recorded in the manifest
//! and checked on read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::signal::{Disorder, EpochAnnotation, SignalRecord, EPOCH_SECONDS, N_CHANNELS};

use super::{disorder_assignment, plan_with_disorder, render_subject, GeneratorProfile, SynthError};

pub const COHORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub version: u32,
    pub sampling_rate_hz: f64,
    pub subjects: Vec<CohortEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEntry {
    pub id: String,
    pub disorder: Disorder,
    pub epochs: Vec<EpochAnnotation>,
    pub samples_per_channel: usize,
    pub crc32: u32,
}

fn raw_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join("raw").join(format!("{id}.f32"))
}

fn record_bytes(record: &SignalRecord) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(N_CHANNELS * record.channels[0].len() * 4);
    for channel in &record.channels {
        for &v in channel {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    bytes
}

/// Generates the cohort and writes it under `dir`, one subject at a time so
/// peak memory stays at a single recording. Returns the manifest it wrote.
pub fn write_raw_cohort(profile: &GeneratorProfile, dir: &Path) -> Result<CohortManifest, SynthError> {
    profile.validate()?;
    fs::create_dir_all(dir.join("raw"))?;
    let disorders = disorder_assignment(profile);

    let mut subjects = Vec::with_capacity(profile.n_subjects);
    for index in 0..profile.n_subjects {
        let plan = plan_with_disorder(profile, index, disorders[index]);
        let record = render_subject(profile, &plan);
        let bytes = record_bytes(&record);
        fs::write(raw_path(dir, &record.subject_id), &bytes)?;
        subjects.push(CohortEntry {
            id: record.subject_id,
            disorder: record.disorder,
            epochs: record.epochs,
            samples_per_channel: record.channels[0].len(),
            crc32: crc32fast::hash(&bytes),
        });
    }

    let manifest = CohortManifest {
        version: COHORT_FORMAT_VERSION,
        sampling_rate_hz: profile.sampling_rate_hz,
        subjects,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| SynthError::Format(e.to_string()))?;
    fs::write(dir.join("cohort.json"), text + "\n")?;
    Ok(manifest)
}

pub fn read_cohort_manifest(dir: &Path) -> Result<CohortManifest, SynthError> {
    let text = fs::read_to_string(dir.join("cohort.json"))?;
    let manifest: CohortManifest =
        serde_json::from_str(&text).map_err(|e| SynthError::Format(e.to_string()))?;
    if manifest.version != COHORT_FORMAT_VERSION {
        return Err(SynthError::Format(format!(
            "unsupported cohort version {}, expected {COHORT_FORMAT_VERSION}",
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads one subject's raw samples, checking file size and checksum against
/// the manifest entry.
pub fn read_raw_subject(
    dir: &Path,
    sampling_rate_hz: f64,
    entry: &CohortEntry,
) -> Result<SignalRecord, SynthError> {
    let bytes = fs::read(raw_path(dir, &entry.id))?;
    let expected = N_CHANNELS * entry.samples_per_channel * 4;
    if bytes.len() != expected {
        return Err(SynthError::Format(format!(
            "subject {} raw file holds {} bytes, expected {expected}",
            entry.id,
            bytes.len()
        )));
    }
    let actual = crc32fast::hash(&bytes);
    if actual != entry.crc32 {
        return Err(SynthError::ChecksumMismatch(format!(
            "subject {} raw file (recorded {:08x}, computed {actual:08x})",
            entry.id, entry.crc32
        )));
    }
    let spe = (EPOCH_SECONDS * sampling_rate_hz).round() as usize;
    if entry.epochs.len() * spe != entry.samples_per_channel {
        return Err(SynthError::Format(format!(
            "subject {} declares {} epochs over {} samples per channel",
            entry.id,
            entry.epochs.len(),
            entry.samples_per_channel
        )));
    }

    let mut channels: [Vec<f64>; N_CHANNELS] =
        std::array::from_fn(|_| Vec::with_capacity(entry.samples_per_channel));
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        channels[i / entry.samples_per_channel].push(v);
    }
    Ok(SignalRecord {
        subject_id: entry.id.clone(),
        disorder: entry.disorder,
        sampling_rate_hz,
        channels,
        epochs: entry.epochs.clone(),
    })
}

/// Loads every subject in manifest order. Convenience for small cohorts;
/// large ones should stream subject by subject.
pub fn read_raw_cohort(dir: &Path) -> Result<Vec<SignalRecord>, SynthError> {
    let manifest = read_cohort_manifest(dir)?;
    manifest
        .subjects
        .iter()
        .map(|entry| read_raw_subject(dir, manifest.sampling_rate_hz, entry))
        .collect()
}
