//! Overlay artifacts for one segment: an importance CSV and one SVG per
//! selected channel, with per-patch shading scaled to the segment's maximum
//! importance.
//!
//! The archive stores no event onsets, so the apnea window drawn on labeled
//! segments is recovered from the flow channel: a sliding RMS dips under the
//! channel's median wherever breathing is suppressed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayView1, ArrayView2};

use crate::signal::{ApneaLabel, Channel};

use super::{ExplainError, ImportanceMap};

const SVG_WIDTH: f64 = 1200.0;
const SVG_HEIGHT: f64 = 240.0;
/// Vertical margin the polyline keeps clear at top and bottom.
const SVG_PAD: f64 = 12.0;

const SIGNAL_COLOR: &str = "#1565c0";
const IMPORTANCE_COLOR: &str = "#c62828";
const EVENT_COLOR: &str = "#546e7a";

/// RMS window for event recovery, in seconds.
const EVENT_RMS_WINDOW_S: f64 = 2.0;
/// Fraction of the median RMS below which a window counts as suppressed.
const EVENT_RMS_FRACTION: f64 = 0.6;
/// Shortest suppressed run worth drawing, in seconds.
const EVENT_MIN_RUN_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayFiles {
    pub csv: PathBuf,
    pub svgs: Vec<PathBuf>,
}

fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Writes `importance.csv` plus `overlay_<channel>.svg` for each selected
/// channel into `out_dir`, creating the directory if needed.
pub fn render_overlay(
    signal: ArrayView2<f32>,
    apnea: ApneaLabel,
    map: &ImportanceMap,
    channels: &[Channel],
    out_dir: &Path,
) -> Result<OverlayFiles, ExplainError> {
    if map.importance.is_empty() {
        return Err(ExplainError::InvalidArgument("empty importance".into()));
    }
    let n_samples = map.spans.last().expect("spans present").end_sample + 1;
    if signal.ncols() != n_samples {
        return Err(ExplainError::InvalidArgument(format!(
            "importance map covers {n_samples} samples but the segment has {}",
            signal.ncols()
        )));
    }
    for ch in channels {
        if ch.index() >= signal.nrows() {
            return Err(ExplainError::InvalidArgument(format!(
                "channel {} not present in a {}-channel segment",
                ch.name(),
                signal.nrows()
            )));
        }
    }
    fs::create_dir_all(out_dir)?;

    let csv = out_dir.join("importance.csv");
    fs::write(&csv, importance_csv(map))?;

    let event = if apnea == ApneaLabel::NoApnea {
        None
    } else {
        let fs_hz = (map.spans[0].end_sample - map.spans[0].start_sample + 1) as f64
            / span_seconds(map);
        detect_event_window(signal.row(Channel::Rf.index()), fs_hz)
    };

    let mut svgs = Vec::with_capacity(channels.len());
    for &ch in channels {
        let path = out_dir.join(format!("overlay_{}.svg", ch.name()));
        fs::write(&path, channel_svg(signal.row(ch.index()), ch, apnea, map, event))?;
        svgs.push(path);
    }
    Ok(OverlayFiles { csv, svgs })
}

/// Seconds covered by one patch span.
fn span_seconds(map: &ImportanceMap) -> f64 {
    if map.spans.len() > 1 {
        map.spans[1].start_time_s - map.spans[0].start_time_s
    } else {
        // lone patch: fall back to the 64 Hz segment layout
        (map.spans[0].end_sample + 1) as f64 / crate::signal::TARGET_SAMPLE_RATE_HZ
    }
}

fn importance_csv(map: &ImportanceMap) -> String {
    let n_heads = map.per_head.nrows();
    let mut out = String::new();
    out.push_str("patch_index,start_sample,end_sample,start_time_s,importance");
    for h in 0..n_heads {
        write!(out, ",head_{h}").unwrap();
    }
    out.push('\n');
    for (i, span) in map.spans.iter().enumerate() {
        write!(
            out,
            "{},{},{},{},{}",
            span.patch,
            span.start_sample,
            span.end_sample,
            sig9(span.start_time_s),
            sig9(map.importance[i])
        )
        .unwrap();
        for h in 0..n_heads {
            write!(out, ",{}", sig9(map.per_head[[h, i]])).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Longest stretch where the sliding RMS sits below the median by
/// `EVENT_RMS_FRACTION`, as inclusive sample bounds.
fn detect_event_window(flow: ArrayView1<f32>, fs_hz: f64) -> Option<(usize, usize)> {
    let n = flow.len();
    let w = (EVENT_RMS_WINDOW_S * fs_hz).round() as usize;
    if w == 0 || n < 2 * w {
        return None;
    }
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix_sq.push(0.0f64);
    for &v in flow.iter() {
        prefix_sq.push(prefix_sq.last().unwrap() + f64::from(v) * f64::from(v));
    }
    let rms: Vec<f64> = (0..=n - w)
        .map(|i| ((prefix_sq[i + w] - prefix_sq[i]) / w as f64).sqrt())
        .collect();
    let mut sorted = rms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let threshold = EVENT_RMS_FRACTION * median;

    // longest run of below-threshold window starts
    let mut best: Option<(usize, usize)> = None;
    let mut run_start = None;
    for (i, &v) in rms.iter().chain(std::iter::once(&f64::INFINITY)).enumerate() {
        match (v < threshold, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(s)) => {
                let len = i - s;
                if best.map_or(true, |(_, bl)| bl < len) {
                    best = Some((s, len));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let min_run = (EVENT_MIN_RUN_S * fs_hz) as usize;
    // the suppressed samples extend one window past the last low start
    best.filter(|&(_, len)| len >= min_run)
        .map(|(s, len)| (s, (s + len + w - 2).min(n - 1)))
}

fn channel_svg(
    trace: ArrayView1<f32>,
    channel: Channel,
    apnea: ApneaLabel,
    map: &ImportanceMap,
    event: Option<(usize, usize)>,
) -> String {
    let n = trace.len() as f64;
    let x_of = |sample: f64| sample / n * SVG_WIDTH;

    let mut svg = String::new();
    write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\" \
         width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\">\n"
    )
    .unwrap();
    writeln!(svg, "<rect width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" fill=\"white\"/>").unwrap();

    let max_imp = map.importance.iter().cloned().fold(0.0f64, f64::max);
    for (i, span) in map.spans.iter().enumerate() {
        let opacity = if max_imp > 0.0 { map.importance[i] / max_imp } else { 0.0 };
        let x = x_of(span.start_sample as f64);
        let width = x_of((span.end_sample + 1) as f64) - x;
        writeln!(
            svg,
            "<rect class=\"imp\" x=\"{x:.2}\" y=\"0\" width=\"{width:.2}\" \
             height=\"{SVG_HEIGHT}\" fill=\"{IMPORTANCE_COLOR}\" fill-opacity=\"{opacity:.4}\"/>"
        )
        .unwrap();
    }

    if let Some((start, end)) = event {
        let x = x_of(start as f64);
        let width = x_of((end + 1) as f64) - x;
        writeln!(
            svg,
            "<rect class=\"event\" x=\"{x:.2}\" y=\"0\" width=\"{width:.2}\" \
             height=\"{SVG_HEIGHT}\" fill=\"{EVENT_COLOR}\" fill-opacity=\"0.30\"/>"
        )
        .unwrap();
        for edge in [x, x + width] {
            writeln!(
                svg,
                "<line x1=\"{edge:.2}\" y1=\"0\" x2=\"{edge:.2}\" y2=\"{SVG_HEIGHT}\" \
                 stroke=\"{EVENT_COLOR}\" stroke-width=\"1\" stroke-dasharray=\"4 3\"/>"
            )
            .unwrap();
        }
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in trace.iter() {
        lo = lo.min(f64::from(v));
        hi = hi.max(f64::from(v));
    }
    let y_of = |v: f64| {
        if hi > lo {
            SVG_HEIGHT - SVG_PAD - (v - lo) / (hi - lo) * (SVG_HEIGHT - 2.0 * SVG_PAD)
        } else {
            SVG_HEIGHT / 2.0
        }
    };
    let mut points = String::new();
    for (s, &v) in trace.iter().enumerate() {
        write!(points, "{:.2},{:.2} ", x_of(s as f64 + 0.5), y_of(f64::from(v))).unwrap();
    }
    writeln!(
        svg,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{SIGNAL_COLOR}\" stroke-width=\"1.2\"/>",
        points.trim_end()
    )
    .unwrap();

    writeln!(
        svg,
        "<text x=\"8\" y=\"16\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#333\">{} ({})</text>",
        channel.name(),
        apnea.name()
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}
