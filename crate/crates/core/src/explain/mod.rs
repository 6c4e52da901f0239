//! Attention explanations: class-token attention from a chosen encoder
//! layer, head-averaged per-patch importance, and the mapping from patches
//! back to signal samples and seconds.
//!
//! Attention rows are captured before attention dropout, so the same segment
//! always yields the same explanation.

mod overlay;

pub use overlay::{render_overlay, OverlayFiles};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::AttentionBundle;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("layer {layer} out of range for a {n_layers}-layer bundle")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The class token's attention over the patch tokens, one row per head.
/// `layer` defaults to the last encoder layer. Token 0 is the class token,
/// so its own column is dropped and column `p` holds patch `p`.
pub fn extract_class_attention(
    bundle: &AttentionBundle,
    layer: Option<usize>,
) -> Result<Array2<f64>, ExplainError> {
    let (n_layers, n_heads, tokens, _) = bundle.attention.dim();
    let layer = layer.unwrap_or(n_layers.saturating_sub(1));
    if layer >= n_layers {
        return Err(ExplainError::LayerOutOfRange { layer, n_layers });
    }
    let mut out = Array2::zeros((n_heads, tokens - 1));
    for h in 0..n_heads {
        for p in 1..tokens {
            out[[h, p - 1]] = bundle.attention[[layer, h, 0, p]];
        }
    }
    Ok(out)
}

/// Mean over heads of the per-head patch scores.
pub fn head_average_importance(per_head: ArrayView2<f64>) -> Array1<f64> {
    assert!(per_head.nrows() > 0, "no heads to average");
    per_head.mean_axis(Axis(0)).expect("nonempty axis")
}

/// The stretch of input one patch score speaks for. Sample bounds are
/// inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchSpan {
    pub patch: usize,
    pub start_sample: usize,
    pub end_sample: usize,
    pub start_time_s: f64,
}

/// Pairs each patch score with its sample and time range. The patches tile
/// `n_samples` evenly, so the count must divide the sample count. Channels
/// share one mapping because patch embedding mixes all channels.
pub fn map_importance_to_samples(
    importance: &[f64],
    n_samples: usize,
    sampling_rate_hz: f64,
) -> Result<Vec<(PatchSpan, f64)>, ExplainError> {
    if importance.is_empty() {
        return Err(ExplainError::InvalidArgument("empty importance".into()));
    }
    if !(sampling_rate_hz > 0.0) {
        return Err(ExplainError::InvalidArgument(format!(
            "sampling rate {sampling_rate_hz} is not positive"
        )));
    }
    let n = importance.len();
    if n_samples == 0 || n_samples % n != 0 {
        return Err(ExplainError::InvalidArgument(format!(
            "{n} patches do not tile {n_samples} samples"
        )));
    }
    let span = n_samples / n;
    Ok(importance
        .iter()
        .enumerate()
        .map(|(i, &score)| {
            let start_sample = i * span;
            let range = PatchSpan {
                patch: i,
                start_sample,
                end_sample: start_sample + span - 1,
                start_time_s: start_sample as f64 / sampling_rate_hz,
            };
            (range, score)
        })
        .collect())
}

/// Per-patch importance for one segment, with the raw per-head scores kept
/// alongside the head average.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap {
    pub segment_id: String,
    /// `[n_heads, n_patches]` class-token attention.
    pub per_head: Array2<f64>,
    /// Head-averaged score per patch.
    pub importance: Array1<f64>,
    pub spans: Vec<PatchSpan>,
}

impl ImportanceMap {
    /// Builds the map from the final layer of a finished forward pass.
    pub fn from_bundle(
        bundle: &AttentionBundle,
        segment_id: impl Into<String>,
        n_samples: usize,
        sampling_rate_hz: f64,
    ) -> Result<ImportanceMap, ExplainError> {
        let per_head = extract_class_attention(bundle, None)?;
        let importance = head_average_importance(per_head.view());
        let annotated = map_importance_to_samples(
            importance.as_slice().expect("contiguous"),
            n_samples,
            sampling_rate_hz,
        )?;
        Ok(ImportanceMap {
            segment_id: segment_id.into(),
            per_head,
            importance,
            spans: annotated.into_iter().map(|(span, _)| span).collect(),
        })
    }

    pub fn n_patches(&self) -> usize {
        self.importance.len()
    }
}
