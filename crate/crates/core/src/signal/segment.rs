//! Epoch segmentation at the native sampling rate.

use super::types::{ApneaLabel, SignalRecord, SleepStage, EPOCH_SECONDS, N_CHANNELS};
use super::SignalError;

/// One 30 s window cut from a recording, still at the native rate.
#[derive(Debug, Clone)]
pub struct RawSegment {
    pub index: usize,
    pub channels: [Vec<f64>; N_CHANNELS],
    pub stage: SleepStage,
    pub apnea: ApneaLabel,
}

/// Cuts a validated recording into complete 30 s windows.
///
/// Window `k` covers samples `[k * 30 * fs, (k + 1) * 30 * fs)`; a trailing
/// partial window is discarded. The record must carry exactly one annotation
/// per complete window.
pub fn segment_recording(record: &SignalRecord) -> Result<Vec<RawSegment>, SignalError> {
    record.validate()?;
    let spe = (EPOCH_SECONDS * record.sampling_rate_hz).round() as usize;
    let n = record.channels[0].len() / spe;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let start = k * spe;
        let channels: [Vec<f64>; N_CHANNELS] =
            std::array::from_fn(|c| record.channels[c][start..start + spe].to_vec());
        out.push(RawSegment {
            index: k,
            channels,
            stage: record.epochs[k].stage,
            apnea: record.epochs[k].apnea,
        });
    }
    Ok(out)
}
