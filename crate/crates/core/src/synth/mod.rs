//! Synthetic cohort generator.
//!
//! Produces labeled multichannel recordings whose morphology is a
//! deterministic function of the labels: every sleep stage has its own
//! breathing rate, depth, regularity, and pulse rate, and every apnea epoch
//! embeds a contiguous suppression event with the taxonomy's channel
//! signature. Labels are therefore recoverable from the waveforms by
//! construction, which is what makes the overfit and generalization tests
//! meaningful.
//!
//! All randomness derives from the profile seed through named substreams,
//! one per subject for planning and one for waveform noise, so any subject
//! can be regenerated in isolation.

mod io;
pub mod waves;

pub use io::{
    read_cohort_manifest, read_raw_cohort, read_raw_subject, write_raw_cohort, CohortEntry,
    CohortManifest, COHORT_FORMAT_VERSION,
};
pub use waves::StageShape;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{substream, substream_indexed};
use crate::signal::{ApneaLabel, Disorder, EpochAnnotation, SignalRecord, SleepStage, EPOCH_SECONDS};

/// Event duration bounds in seconds. Ten seconds is the clinical floor for
/// scoring an apnea; the cap keeps some unsuppressed signal in every epoch.
pub const EVENT_MIN_S: f64 = 10.0;
pub const EVENT_MAX_S: f64 = 25.0;
/// Margin between an event window (plus its ramps) and the epoch edges.
const EVENT_MARGIN_S: f64 = 0.5;

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("malformed cohort file: {0}")]
    Format(String),
    #[error("checksum mismatch: {0}")]
    ChecksumMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything the generator needs: cohort size and composition, the stage
/// Markov chain, per-disorder apnea frequency, the apnea type mixture, and
/// waveform noise. Serializable so a cohort is fully described by one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorProfile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_subjects")]
    pub n_subjects: usize,
    /// Inclusive (min, max) range for the per-subject epoch count.
    #[serde(default = "default_epochs_per_subject")]
    pub epochs_per_subject: (usize, usize),
    #[serde(default = "default_sampling_rate")]
    pub sampling_rate_hz: f64,
    /// Row-stochastic 5x5 matrix over [wake, n1, n2, n3, rem]; the chain
    /// starts in wake.
    #[serde(default = "default_stage_transition")]
    pub stage_transition: [[f64; 5]; 5],
    /// Cohort composition; counts are apportioned by largest remainder so
    /// they are exact, then shuffled across subject indices.
    #[serde(default = "default_disorder_mix")]
    pub disorder_mix: BTreeMap<Disorder, f64>,
    /// Per-epoch probability that an apnea event is embedded.
    #[serde(default = "default_apnea_rates")]
    pub apnea_rate_by_disorder: BTreeMap<Disorder, f64>,
    /// Mixture over [central, obstructive, hypopnea] given an event occurs.
    #[serde(default = "default_apnea_type_mix")]
    pub apnea_type_mix: [f64; 3],
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
}

fn default_n_subjects() -> usize {
    123
}
fn default_epochs_per_subject() -> (usize, usize) {
    (36, 44)
}
fn default_sampling_rate() -> f64 {
    512.0
}
fn default_stage_transition() -> [[f64; 5]; 5] {
    [
        [0.50, 0.30, 0.15, 0.00, 0.05],
        [0.10, 0.35, 0.45, 0.05, 0.05],
        [0.05, 0.10, 0.50, 0.25, 0.10],
        [0.02, 0.03, 0.25, 0.60, 0.10],
        [0.10, 0.10, 0.25, 0.05, 0.50],
    ]
}
fn default_disorder_mix() -> BTreeMap<Disorder, f64> {
    BTreeMap::from([(Disorder::Osa, 48.0 / 123.0), (Disorder::Other, 75.0 / 123.0)])
}
fn default_apnea_rates() -> BTreeMap<Disorder, f64> {
    BTreeMap::from([(Disorder::Osa, 0.35), (Disorder::Other, 0.06)])
}
fn default_apnea_type_mix() -> [f64; 3] {
    [0.18, 0.29, 0.53]
}
fn default_noise_std() -> f64 {
    0.05
}

impl Default for GeneratorProfile {
    fn default() -> Self {
        GeneratorProfile {
            seed: 0,
            n_subjects: default_n_subjects(),
            epochs_per_subject: default_epochs_per_subject(),
            sampling_rate_hz: default_sampling_rate(),
            stage_transition: default_stage_transition(),
            disorder_mix: default_disorder_mix(),
            apnea_rate_by_disorder: default_apnea_rates(),
            apnea_type_mix: default_apnea_type_mix(),
            noise_std: default_noise_std(),
        }
    }
}

impl GeneratorProfile {
    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::InvalidProfile(msg));
        if self.n_subjects == 0 {
            return fail("n_subjects must be at least 1".into());
        }
        let (lo, hi) = self.epochs_per_subject;
        if lo == 0 || lo > hi {
            return fail(format!("epochs_per_subject range ({lo}, {hi}) is empty"));
        }
        let spe = EPOCH_SECONDS * self.sampling_rate_hz;
        if !self.sampling_rate_hz.is_finite()
            || self.sampling_rate_hz <= 0.0
            || (spe - spe.round()).abs() > 1e-9
            || spe < 1.0
        {
            return fail(format!(
                "sampling_rate_hz {} must be positive with an integral 30 s epoch",
                self.sampling_rate_hz
            ));
        }
        for (i, row) in self.stage_transition.iter().enumerate() {
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return fail(format!("stage_transition row {i} has entries outside [0, 1]"));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return fail(format!("stage_transition row {i} sums to {sum}, not 1"));
            }
        }
        if self.disorder_mix.is_empty() {
            return fail("disorder_mix must not be empty".into());
        }
        let mix_sum: f64 = self.disorder_mix.values().sum();
        if self.disorder_mix.values().any(|p| !(0.0..=1.0).contains(p)) {
            return fail("disorder_mix has weights outside [0, 1]".into());
        }
        if (mix_sum - 1.0).abs() > PROB_SUM_TOL {
            return fail(format!("disorder_mix sums to {mix_sum}, not 1"));
        }
        for (disorder, rate) in &self.apnea_rate_by_disorder {
            if !(0.0..=1.0).contains(rate) {
                return fail(format!("apnea rate {rate} for {} outside [0, 1]", disorder.name()));
            }
        }
        for disorder in self.disorder_mix.keys() {
            if !self.apnea_rate_by_disorder.contains_key(disorder) {
                return fail(format!("apnea_rate_by_disorder missing entry for {}", disorder.name()));
            }
        }
        if self.apnea_type_mix.iter().any(|p| *p < 0.0) {
            return fail("apnea_type_mix has negative weights".into());
        }
        let type_sum: f64 = self.apnea_type_mix.iter().sum();
        if (type_sum - 1.0).abs() > PROB_SUM_TOL {
            return fail(format!("apnea_type_mix sums to {type_sum}, not 1"));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return fail(format!("noise_std {} must be nonnegative", self.noise_std));
        }
        Ok(())
    }
}

/// One embedded apnea event; the labeled window is [onset, onset + duration].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannedEvent {
    pub kind: ApneaLabel,
    pub onset_s: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochPlan {
    pub stage: SleepStage,
    pub event: Option<PlannedEvent>,
}

impl EpochPlan {
    pub fn apnea(&self) -> ApneaLabel {
        self.event.map(|e| e.kind).unwrap_or(ApneaLabel::NoApnea)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPlan {
    pub subject_index: usize,
    pub subject_id: String,
    pub disorder: Disorder,
    pub epochs: Vec<EpochPlan>,
}

pub fn subject_id_for(index: usize) -> String {
    format!("s{index:03}")
}

/// Apportions disorders across the cohort by largest remainder, so the
/// realized counts match the mix exactly up to rounding, then shuffles the
/// assignment over subject indices.
pub fn disorder_assignment(profile: &GeneratorProfile) -> Vec<Disorder> {
    let n = profile.n_subjects;
    let quotas: Vec<(Disorder, f64)> =
        profile.disorder_mix.iter().map(|(d, p)| (*d, p * n as f64)).collect();
    let mut counts: Vec<(Disorder, usize, f64)> =
        quotas.iter().map(|(d, q)| (*d, q.floor() as usize, q - q.floor())).collect();
    let assigned: usize = counts.iter().map(|(_, c, _)| c).sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].2.partial_cmp(&counts[a].2).unwrap());
    for &i in order.iter().take(n - assigned) {
        counts[i].1 += 1;
    }

    let mut out = Vec::with_capacity(n);
    for (disorder, count, _) in &counts {
        out.extend(std::iter::repeat(*disorder).take(*count));
    }
    out.shuffle(&mut substream(profile.seed, "synth.disorder"));
    out
}

/// Plans one subject: epoch count, the stage chain, and event placement.
/// Uses only the subject's own plan substream, so plans are independent of
/// cohort size and of each other.
pub fn subject_plan(profile: &GeneratorProfile, subject_index: usize) -> Result<SubjectPlan, SynthError> {
    profile.validate()?;
    if subject_index >= profile.n_subjects {
        return Err(SynthError::InvalidArgument(format!(
            "subject index {subject_index} outside cohort of {}",
            profile.n_subjects
        )));
    }
    let disorder = disorder_assignment(profile)[subject_index];
    Ok(plan_with_disorder(profile, subject_index, disorder))
}

fn plan_with_disorder(profile: &GeneratorProfile, subject_index: usize, disorder: Disorder) -> SubjectPlan {
    let mut rng = substream_indexed(profile.seed, "synth.plan", subject_index);
    let (lo, hi) = profile.epochs_per_subject;
    let n_epochs = rng.gen_range(lo..=hi);
    let apnea_rate = profile.apnea_rate_by_disorder[&disorder];

    let mut epochs = Vec::with_capacity(n_epochs);
    let mut stage = SleepStage::Wake;
    for k in 0..n_epochs {
        if k > 0 {
            stage = sample_stage(&profile.stage_transition[stage.index()], rng.gen::<f64>());
        }
        let event = if rng.gen::<f64>() < apnea_rate {
            let kind = sample_event_kind(&profile.apnea_type_mix, rng.gen::<f64>());
            let duration_s = rng.gen_range(EVENT_MIN_S..=EVENT_MAX_S);
            let latest = EPOCH_SECONDS - EVENT_MARGIN_S - duration_s;
            let onset_s = rng.gen_range(EVENT_MARGIN_S..=latest);
            Some(PlannedEvent { kind, onset_s, duration_s })
        } else {
            None
        };
        epochs.push(EpochPlan { stage, event });
    }
    SubjectPlan {
        subject_index,
        subject_id: subject_id_for(subject_index),
        disorder,
        epochs,
    }
}

fn sample_stage(row: &[f64; 5], u: f64) -> SleepStage {
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return SleepStage::ALL[i];
        }
    }
    // Row sums to 1 within tolerance; u can only land here by rounding.
    SleepStage::Rem
}

fn sample_event_kind(mix: &[f64; 3], u: f64) -> ApneaLabel {
    let kinds =
        [ApneaLabel::CentralApnea, ApneaLabel::ObstructiveApnea, ApneaLabel::ObstructiveHypopnea];
    let mut acc = 0.0;
    for (i, p) in mix.iter().enumerate() {
        acc += p;
        if u < acc {
            return kinds[i];
        }
    }
    kinds[2]
}

pub(crate) fn render_subject(profile: &GeneratorProfile, plan: &SubjectPlan) -> SignalRecord {
    let fs = profile.sampling_rate_hz;
    let spe = (EPOCH_SECONDS * fs).round() as usize;
    let mut rng = substream_indexed(profile.seed, "synth.wave", plan.subject_index);
    let mut state = waves::OscState::new(&mut rng);

    let total = spe * plan.epochs.len();
    let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| Vec::with_capacity(total));
    for epoch in &plan.epochs {
        let shape = StageShape::for_stage(epoch.stage);
        let rendered =
            waves::render_epoch(&shape, epoch.event.as_ref(), fs, profile.noise_std, &mut rng, &mut state);
        for (c, data) in rendered.into_iter().enumerate() {
            channels[c].extend(data);
        }
    }

    SignalRecord {
        subject_id: plan.subject_id.clone(),
        disorder: plan.disorder,
        sampling_rate_hz: fs,
        channels,
        epochs: plan
            .epochs
            .iter()
            .map(|e| EpochAnnotation { stage: e.stage, apnea: e.apnea() })
            .collect(),
    }
}

/// Generates one subject's recording. Deterministic in (profile, index).
pub fn generate_subject(profile: &GeneratorProfile, subject_index: usize) -> Result<SignalRecord, SynthError> {
    let plan = subject_plan(profile, subject_index)?;
    Ok(render_subject(profile, &plan))
}

/// Generates the whole cohort in subject-index order.
pub fn generate_cohort(profile: &GeneratorProfile) -> Result<Vec<SignalRecord>, SynthError> {
    profile.validate()?;
    let disorders = disorder_assignment(profile);
    Ok((0..profile.n_subjects)
        .map(|i| render_subject(profile, &plan_with_disorder(profile, i, disorders[i])))
        .collect())
}
