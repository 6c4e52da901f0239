//! Linear-interpolation resampling.

use super::SignalError;

/// Resamples `samples` from `fs_in` to `fs_out` by linear interpolation.
///
/// Output sample `j` reads the input at fractional position
/// `p = j * fs_in / fs_out`, so position 0 is preserved exactly and integral
/// positions hit input samples with no interpolation error. The output length
/// is `round(len * fs_out / fs_in)`; positions past the last input sample
/// hold its value. Needs at least two samples; everything must be finite.
pub fn resample_linear(samples: &[f64], fs_in: f64, fs_out: f64) -> Result<Vec<f64>, SignalError> {
    if !(fs_in > 0.0 && fs_out > 0.0) || !fs_in.is_finite() || !fs_out.is_finite() {
        return Err(SignalError::InvalidArgument(format!(
            "sampling rates must be positive, got {fs_in} -> {fs_out}"
        )));
    }
    if samples.len() < 2 {
        return Err(SignalError::InsufficientSamples(format!(
            "resample needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(SignalError::NonFinite("resample input".into()));
    }
    if fs_in == fs_out {
        return Ok(samples.to_vec());
    }
    let out_len = (samples.len() as f64 * fs_out / fs_in).round() as usize;
    let step = fs_in / fs_out;
    let last = samples.len() - 1;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let p = j as f64 * step;
        if p >= last as f64 {
            out.push(samples[last]);
            continue;
        }
        let i0 = p.floor() as usize;
        let frac = p - i0 as f64;
        if frac == 0.0 {
            out.push(samples[i0]);
        } else {
            out.push(samples[i0] + frac * (samples[i0 + 1] - samples[i0]));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identity_when_rates_match() {
        let x = vec![1.0, -2.5, 3.25, 0.0];
        assert_eq!(resample_linear(&x, 64.0, 64.0).unwrap(), x);
    }

    #[test]
    fn integral_decimation_picks_exact_samples() {
        let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.5).collect();
        let y = resample_linear(&x, 8.0, 2.0).unwrap();
        assert_eq!(y, vec![0.0, 2.0, 4.0, 6.0]);
    }

    #[test]
    fn sinusoid_decimation_matches_analytic() {
        // 1 Hz sinusoid sampled at 512 Hz for 30 s, decimated to 64 Hz:
        // output j should equal sin(2 pi j / 64).
        let n = 512 * 30;
        let x: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / 512.0).sin())
            .collect();
        let y = resample_linear(&x, 512.0, 64.0).unwrap();
        assert_eq!(y.len(), 1920);
        let mut max_err = 0.0f64;
        for (j, v) in y.iter().enumerate() {
            let want = (2.0 * std::f64::consts::PI * j as f64 / 64.0).sin();
            max_err = max_err.max((v - want).abs());
        }
        assert!(max_err < 1e-3, "max analytic error {max_err}");
    }

    #[test]
    fn upsampling_interpolates_ramp_exactly() {
        // A ramp is linear, so interpolation at any rate reproduces it.
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y = resample_linear(&x, 1.0, 4.0).unwrap();
        assert_eq!(y.len(), 40);
        for (j, v) in y.iter().enumerate() {
            let p = (j as f64 / 4.0).min(9.0);
            assert_abs_diff_eq!(*v, p, epsilon = 1e-12);
        }
    }

    #[test]
    fn tail_past_last_sample_holds() {
        let x = vec![0.0, 1.0];
        let y = resample_linear(&x, 1.0, 3.0).unwrap();
        assert_eq!(y.len(), 6);
        assert_abs_diff_eq!(y[5], 1.0, epsilon = 0.0);
    }

    #[test]
    fn output_length_is_rounded_ratio() {
        let x = vec![0.0; 15360];
        assert_eq!(resample_linear(&x, 512.0, 64.0).unwrap().len(), 1920);
        let x = vec![0.0; 100];
        assert_eq!(resample_linear(&x, 3.0, 7.0).unwrap().len(), 233);
    }

    #[test]
    fn rejects_degenerate_input() {
        assert!(matches!(
            resample_linear(&[1.0], 10.0, 5.0),
            Err(SignalError::InsufficientSamples(_))
        ));
        assert!(matches!(
            resample_linear(&[], 10.0, 5.0),
            Err(SignalError::InsufficientSamples(_))
        ));
        assert!(matches!(
            resample_linear(&[1.0, f64::NAN], 10.0, 5.0),
            Err(SignalError::NonFinite(_))
        ));
        assert!(resample_linear(&[1.0, 2.0], 0.0, 5.0).is_err());
        assert!(resample_linear(&[1.0, 2.0], 5.0, -1.0).is_err());
    }
}
