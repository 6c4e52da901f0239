//! Domain enums and the raw recording type.

use serde::{Deserialize, Serialize};

use super::SignalError;

/// Seconds per scoring epoch.
pub const EPOCH_SECONDS: f64 = 30.0;
/// Archive sampling rate.
pub const TARGET_SAMPLE_RATE_HZ: f64 = 64.0;
/// Samples per archived segment channel: 30 s at 64 Hz.
pub const SAMPLES_PER_SEGMENT: usize = 1920;
pub const N_CHANNELS: usize = 4;
pub const N_STAGE_CLASSES: usize = 5;
pub const N_APNEA_CLASSES: usize = 4;

/// Input channels in canonical archive order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    /// Photoplethysmography.
    Ppg,
    /// Respiratory flow.
    Rf,
    /// Respiratory chest effort.
    Rc,
    /// Respiratory abdominal effort.
    Ra,
}

impl Channel {
    pub const ALL: [Channel; N_CHANNELS] = [Channel::Ppg, Channel::Rf, Channel::Rc, Channel::Ra];

    pub fn index(self) -> usize {
        match self {
            Channel::Ppg => 0,
            Channel::Rf => 1,
            Channel::Rc => 2,
            Channel::Ra => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::Ppg => "ppg",
            Channel::Rf => "rf",
            Channel::Rc => "rc",
            Channel::Ra => "ra",
        }
    }

    pub fn parse(s: &str) -> Result<Channel, SignalError> {
        match s.to_ascii_lowercase().as_str() {
            "ppg" => Ok(Channel::Ppg),
            "rf" => Ok(Channel::Rf),
            "rc" => Ok(Channel::Rc),
            "ra" => Ok(Channel::Ra),
            other => Err(SignalError::UnknownLabel(format!("channel {other:?}"))),
        }
    }
}

/// Five-class sleep stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SleepStage {
    Wake,
    N1,
    N2,
    N3,
    Rem,
}

impl SleepStage {
    pub const ALL: [SleepStage; N_STAGE_CLASSES] =
        [SleepStage::Wake, SleepStage::N1, SleepStage::N2, SleepStage::N3, SleepStage::Rem];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<SleepStage> {
        SleepStage::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SleepStage::Wake => "wake",
            SleepStage::N1 => "n1",
            SleepStage::N2 => "n2",
            SleepStage::N3 => "n3",
            SleepStage::Rem => "rem",
        }
    }

    pub fn parse(s: &str) -> Result<SleepStage, SignalError> {
        match s.to_ascii_lowercase().as_str() {
            "wake" => Ok(SleepStage::Wake),
            "n1" => Ok(SleepStage::N1),
            "n2" => Ok(SleepStage::N2),
            "n3" => Ok(SleepStage::N3),
            "rem" => Ok(SleepStage::Rem),
            other => Err(SignalError::UnknownLabel(format!("sleep stage {other:?}"))),
        }
    }
}

/// Four-class apnea annotation for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApneaLabel {
    NoApnea,
    /// Airflow and both effort channels stop.
    CentralApnea,
    /// Airflow stops while respiratory effort continues.
    ObstructiveApnea,
    /// Airflow partially reduced with effort maintained.
    ObstructiveHypopnea,
}

impl ApneaLabel {
    pub const ALL: [ApneaLabel; N_APNEA_CLASSES] = [
        ApneaLabel::NoApnea,
        ApneaLabel::CentralApnea,
        ApneaLabel::ObstructiveApnea,
        ApneaLabel::ObstructiveHypopnea,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<ApneaLabel> {
        ApneaLabel::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ApneaLabel::NoApnea => "no_apnea",
            ApneaLabel::CentralApnea => "central_apnea",
            ApneaLabel::ObstructiveApnea => "obstructive_apnea",
            ApneaLabel::ObstructiveHypopnea => "obstructive_hypopnea",
        }
    }

    pub fn parse(s: &str) -> Result<ApneaLabel, SignalError> {
        match s.to_ascii_lowercase().as_str() {
            "no_apnea" => Ok(ApneaLabel::NoApnea),
            "central_apnea" => Ok(ApneaLabel::CentralApnea),
            "obstructive_apnea" => Ok(ApneaLabel::ObstructiveApnea),
            "obstructive_hypopnea" => Ok(ApneaLabel::ObstructiveHypopnea),
            other => Err(SignalError::UnknownLabel(format!("apnea label {other:?}"))),
        }
    }
}

/// Subject-level diagnosis group, used for stratified reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Disorder {
    Osa,
    Hypersomnia,
    Insomnia,
    Other,
}

impl Disorder {
    pub const ALL: [Disorder; 4] =
        [Disorder::Osa, Disorder::Hypersomnia, Disorder::Insomnia, Disorder::Other];

    pub fn name(self) -> &'static str {
        match self {
            Disorder::Osa => "osa",
            Disorder::Hypersomnia => "hypersomnia",
            Disorder::Insomnia => "insomnia",
            Disorder::Other => "other",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochAnnotation {
    pub stage: SleepStage,
    pub apnea: ApneaLabel,
}

/// One subject's recording at its native sampling rate.
///
/// Channels are stored in canonical [`Channel::ALL`] order and must share one
/// length; `epochs` must hold exactly one annotation per complete 30 s epoch.
#[derive(Debug, Clone)]
pub struct SignalRecord {
    pub subject_id: String,
    pub disorder: Disorder,
    pub sampling_rate_hz: f64,
    pub channels: [Vec<f64>; N_CHANNELS],
    pub epochs: Vec<EpochAnnotation>,
}

impl SignalRecord {
    /// Checks the structural invariants: positive rate, equal-length finite
    /// channels, annotations matching the number of complete epochs.
    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.sampling_rate_hz > 0.0) || !self.sampling_rate_hz.is_finite() {
            return Err(SignalError::InvalidArgument(format!(
                "sampling rate {} must be positive",
                self.sampling_rate_hz
            )));
        }
        let len = self.channels[0].len();
        for (i, ch) in self.channels.iter().enumerate() {
            if ch.len() != len {
                return Err(SignalError::ShapeMismatch(format!(
                    "channel {} has {} samples, channel 0 has {len}",
                    Channel::ALL[i].name(),
                    ch.len()
                )));
            }
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(SignalError::NonFinite(format!(
                    "subject {:?} channel {}",
                    self.subject_id,
                    Channel::ALL[i].name()
                )));
            }
        }
        let spe = EPOCH_SECONDS * self.sampling_rate_hz;
        if (spe - spe.round()).abs() > 1e-9 || spe < 1.0 {
            return Err(SignalError::InvalidArgument(format!(
                "30 s epoch is {spe} samples at {} Hz, not an integer",
                self.sampling_rate_hz
            )));
        }
        let expected = len / spe.round() as usize;
        if self.epochs.len() != expected {
            return Err(SignalError::AnnotationMismatch(format!(
                "subject {:?} has {} annotations for {expected} complete epochs",
                self.subject_id,
                self.epochs.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_round_trip() {
        for (i, s) in SleepStage::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(SleepStage::from_index(i), Some(*s));
            assert_eq!(SleepStage::parse(s.name()).unwrap(), *s);
        }
        for (i, a) in ApneaLabel::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(ApneaLabel::from_index(i), Some(*a));
            assert_eq!(ApneaLabel::parse(a.name()).unwrap(), *a);
        }
        assert!(SleepStage::parse("n5").is_err());
        assert!(ApneaLabel::parse("mixed").is_err());
    }

    #[test]
    fn channel_order_is_ppg_rf_rc_ra() {
        let names: Vec<&str> = Channel::ALL.iter().map(|c| c.name()).collect();
        assert_eq!(names, ["ppg", "rf", "rc", "ra"]);
        for (i, c) in Channel::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
    }

    #[test]
    fn validate_catches_annotation_mismatch() {
        let fs = 2.0;
        let rec = SignalRecord {
            subject_id: "s0".into(),
            disorder: Disorder::Other,
            sampling_rate_hz: fs,
            channels: std::array::from_fn(|_| vec![0.0; 150]), // 2.5 epochs at 2 Hz
            epochs: vec![
                EpochAnnotation { stage: SleepStage::Wake, apnea: ApneaLabel::NoApnea };
                3
            ],
        };
        let err = rec.validate().unwrap_err();
        assert!(err.to_string().contains("annotation/epoch mismatch"), "{err}");
    }

    #[test]
    fn validate_catches_non_finite() {
        let mut channels: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; 60]);
        channels[2][10] = f64::NAN;
        let rec = SignalRecord {
            subject_id: "s0".into(),
            disorder: Disorder::Other,
            sampling_rate_hz: 2.0,
            channels,
            epochs: vec![EpochAnnotation { stage: SleepStage::Wake, apnea: ApneaLabel::NoApnea }],
        };
        let err = rec.validate().unwrap_err();
        assert!(err.to_string().contains("non-finite signal"), "{err}");
    }
}
