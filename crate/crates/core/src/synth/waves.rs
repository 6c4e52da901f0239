//! Waveform primitives for the cohort generator.
//!
//! Respiration channels are rendered from one shared phase accumulator so a
//! subject's signal stays continuous across epoch boundaries even as the
//! stage changes the target rate and depth. Cycle-to-cycle variability is
//! injected by redrawing a rate and an amplitude factor once per breath.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::signal::{ApneaLabel, EPOCH_SECONDS, N_CHANNELS};

use super::PlannedEvent;

const TAU: f64 = std::f64::consts::TAU;

/// Second-harmonic weight on the flow channel. Gives inhale/exhale asymmetry
/// so flow is distinguishable from the belt channels after normalization.
const FLOW_HARMONIC: f64 = 0.15;
/// Belt gains and lags relative to flow, chest then abdomen.
const CHEST_GAIN: f64 = 0.9;
const CHEST_LAG_S: f64 = 0.3;
const ABDOMEN_GAIN: f64 = 0.95;
const ABDOMEN_LAG_S: f64 = 0.15;
/// Pulse wave amplitude and its respiratory modulation depth.
const PULSE_AMP: f64 = 0.7;
const PULSE_RESP_MOD: f64 = 0.12;
const PULSE_JITTER: f64 = 0.03;
/// Per-cycle jitter factors stay inside this band. The obstructive-event
/// oracle (event RMS > 50% of epoch RMS on the belts) relies on the band
/// being narrower than [0.5, 2.0].
const CYCLE_FACTOR_MIN: f64 = 0.75;
const CYCLE_FACTOR_MAX: f64 = 1.25;
/// Suppression envelopes ramp over this long just outside the event window,
/// so the labeled window itself sits entirely at the floor value.
const EVENT_RAMP_S: f64 = 0.5;

/// Samples `amp * sin(2π f t + phase)` at `fs` Hz.
pub fn sine_wave(len: usize, fs: f64, freq_hz: f64, phase: f64, amp: f64) -> Vec<f64> {
    (0..len)
        .map(|i| amp * (TAU * freq_hz * i as f64 / fs + phase).sin())
        .collect()
}

/// Root mean square of a slice; 0.0 for empty input.
pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Stage-conditioned morphology: breathing rate and depth, how much the
/// breath cycle wanders, and pulse rate. Deep sleep breathes slow, deep,
/// and regular; REM is shallow and erratic; wake is fast with high jitter.
#[derive(Debug, Clone, Copy)]
pub struct StageShape {
    pub resp_freq_hz: f64,
    pub resp_amp: f64,
    pub cycle_jitter: f64,
    pub heart_rate_bpm: f64,
}

impl StageShape {
    pub fn for_stage(stage: crate::signal::SleepStage) -> Self {
        use crate::signal::SleepStage::*;
        let (resp_freq_hz, resp_amp, cycle_jitter, heart_rate_bpm) = match stage {
            Wake => (0.32, 0.90, 0.15, 78.0),
            N1 => (0.27, 1.05, 0.08, 68.0),
            N2 => (0.23, 1.20, 0.04, 62.0),
            N3 => (0.19, 1.40, 0.02, 54.0),
            Rem => (0.30, 0.65, 0.20, 74.0),
        };
        StageShape {
            resp_freq_hz,
            resp_amp,
            cycle_jitter,
            heart_rate_bpm,
        }
    }
}

/// Oscillator state carried across epochs of one subject.
pub(super) struct OscState {
    resp_phase: f64,
    next_breath_mark: f64,
    rate_factor: f64,
    amp_factor: f64,
    cardiac_phase: f64,
    next_beat_mark: f64,
    beat_factor: f64,
}

impl OscState {
    pub(super) fn new(rng: &mut ChaCha12Rng) -> Self {
        let resp_phase = rng.gen_range(0.0..TAU);
        let cardiac_phase = rng.gen_range(0.0..TAU);
        OscState {
            resp_phase,
            next_breath_mark: resp_phase + TAU,
            rate_factor: 1.0,
            amp_factor: 1.0,
            cardiac_phase,
            next_beat_mark: cardiac_phase + TAU,
            beat_factor: 1.0,
        }
    }
}

fn jitter_factor(jitter: f64, rng: &mut ChaCha12Rng) -> f64 {
    let draw: f64 = Normal::new(1.0, jitter).expect("jitter is nonnegative").sample(rng);
    draw.clamp(CYCLE_FACTOR_MIN, CYCLE_FACTOR_MAX)
}

/// Multiplicative floors an event applies to [flow, chest, abdomen].
/// Central events silence all three; obstructive events silence flow while
/// effort continues on the belts; hypopnea halves flow and mildly damps
/// effort.
fn channel_floors(kind: ApneaLabel) -> [f64; 3] {
    match kind {
        ApneaLabel::NoApnea => [1.0, 1.0, 1.0],
        ApneaLabel::CentralApnea => [0.02, 0.02, 0.02],
        ApneaLabel::ObstructiveApnea => [0.02, 1.0, 1.0],
        ApneaLabel::ObstructiveHypopnea => [0.5, 0.85, 0.85],
    }
}

/// Envelope value at `t` seconds into the epoch. The window
/// [onset, onset + duration] sits at `floor`; half-second linear ramps lie
/// strictly outside it.
fn suppression(t: f64, onset: f64, duration: f64, floor: f64) -> f64 {
    let end = onset + duration;
    if t >= onset && t <= end {
        floor
    } else if t >= onset - EVENT_RAMP_S && t < onset {
        let u = (onset - t) / EVENT_RAMP_S;
        floor + (1.0 - floor) * u
    } else if t > end && t <= end + EVENT_RAMP_S {
        let u = (t - end) / EVENT_RAMP_S;
        floor + (1.0 - floor) * u
    } else {
        1.0
    }
}

/// Renders one 30 s epoch at `fs` Hz, advancing `state` so the next epoch
/// continues seamlessly. Channel order matches [`crate::signal::Channel`]:
/// pulse, flow, chest, abdomen. The event envelope multiplies signal and
/// noise together, so a silenced window is silent in the stored data too.
pub(super) fn render_epoch(
    shape: &StageShape,
    event: Option<&PlannedEvent>,
    fs: f64,
    noise_std: f64,
    rng: &mut ChaCha12Rng,
    state: &mut OscState,
) -> [Vec<f64>; N_CHANNELS] {
    let spe = (EPOCH_SECONDS * fs).round() as usize;
    let noise = Normal::new(0.0, noise_std).expect("noise_std is nonnegative");
    let (floors, onset, duration) = match event {
        Some(ev) => (channel_floors(ev.kind), ev.onset_s, ev.duration_s),
        None => ([1.0; 3], 0.0, 0.0),
    };
    let heart_freq = shape.heart_rate_bpm / 60.0;

    let mut out: [Vec<f64>; N_CHANNELS] = Default::default();
    for ch in out.iter_mut() {
        ch.reserve(spe);
    }
    for i in 0..spe {
        let t = i as f64 / fs;

        let resp_freq = shape.resp_freq_hz * state.rate_factor;
        state.resp_phase += TAU * resp_freq / fs;
        if state.resp_phase >= state.next_breath_mark {
            state.rate_factor = jitter_factor(shape.cycle_jitter, rng);
            state.amp_factor = jitter_factor(shape.cycle_jitter, rng);
            state.next_breath_mark += TAU;
        }
        state.cardiac_phase += TAU * heart_freq * state.beat_factor / fs;
        if state.cardiac_phase >= state.next_beat_mark {
            state.beat_factor = jitter_factor(PULSE_JITTER, rng);
            state.next_beat_mark += TAU;
        }

        let phi = state.resp_phase;
        let amp = shape.resp_amp * state.amp_factor;
        let flow = amp * (phi.sin() + FLOW_HARMONIC * (2.0 * phi).sin());
        let chest = CHEST_GAIN * amp * (phi - TAU * resp_freq * CHEST_LAG_S).sin();
        let abdomen = ABDOMEN_GAIN * amp * (phi - TAU * resp_freq * ABDOMEN_LAG_S).sin();
        let psi = state.cardiac_phase;
        let pulse = PULSE_AMP
            * (psi.sin() + 0.35 * (2.0 * psi + 0.8).sin())
            * (1.0 + PULSE_RESP_MOD * phi.sin());

        let env = if event.is_some() {
            [
                suppression(t, onset, duration, floors[0]),
                suppression(t, onset, duration, floors[1]),
                suppression(t, onset, duration, floors[2]),
            ]
        } else {
            [1.0; 3]
        };

        out[0].push(pulse + noise.sample(rng));
        out[1].push(env[0] * (flow + noise.sample(rng)));
        out[2].push(env[1] * (chest + noise.sample(rng)));
        out[3].push(env[2] * (abdomen + noise.sample(rng)));
    }
    out
}
