//! Z-score normalization.

use super::SignalError;

/// Guard against division by a vanishing standard deviation.
pub const ZSCORE_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct ZScored {
    pub values: Vec<f64>,
    /// Set when the input standard deviation fell below [`ZSCORE_EPSILON`];
    /// the output is then all zeros rather than amplified noise.
    pub degenerate: bool,
}

/// `(x - mean) / std` with the population standard deviation.
///
/// A near-constant input (std below [`ZSCORE_EPSILON`]) maps to all zeros
/// with the `degenerate` flag set. Applying the transform twice is a no-op up
/// to floating-point effects, since the output already has mean 0 and std 1.
pub fn zscore_normalize(samples: &[f64]) -> Result<ZScored, SignalError> {
    if samples.is_empty() {
        return Err(SignalError::InsufficientSamples("z-score of empty sequence".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite("z-score input".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < ZSCORE_EPSILON {
        return Ok(ZScored { values: vec![0.0; samples.len()], degenerate: true });
    }
    Ok(ZScored {
        values: samples.iter().map(|v| (v - mean) / std).collect(),
        degenerate: false,
    })
}
