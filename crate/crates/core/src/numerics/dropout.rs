//! Inverted dropout and stochastic depth.

use ndarray::ArrayD;
use rand::Rng;

use super::real::Real;
use super::NumericsError;

/// Whether stochastic regularizers are live. In `Eval` both dropout and
/// stochastic depth are exact identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Multiplicative dropout mask.
///
/// In training mode each element is `0` with probability `rate` and
/// `1/(1-rate)` otherwise, so the mask has unit expectation. In eval mode the
/// mask is all ones regardless of rate. `rate` must lie in `[0, 1)`.
pub fn dropout_mask<T: Real, R: Rng>(
    shape: &[usize],
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<ArrayD<T>, NumericsError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NumericsError::InvalidArgument(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(ArrayD::ones(shape.to_vec()));
    }
    let keep = T::from_f64(1.0 / (1.0 - rate));
    Ok(ArrayD::from_shape_simple_fn(shape.to_vec(), || {
        if rng.gen::<f64>() < rate {
            T::zero()
        } else {
            keep
        }
    }))
}

/// Residual-branch gate for stochastic depth.
///
/// Training: the branch survives with probability `survival_p` and is scaled
/// by `1/survival_p` when it does, keeping the branch expectation unchanged.
/// Eval: always survives with unit scale.
#[derive(Debug, Clone, Copy)]
pub struct DepthGate<T> {
    pub keep: bool,
    pub scale: T,
}

pub fn stochastic_depth_gate<T: Real, R: Rng>(
    survival_p: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<DepthGate<T>, NumericsError> {
    if !(survival_p > 0.0 && survival_p <= 1.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "survival probability {survival_p} outside (0, 1]"
        )));
    }
    if mode == Mode::Eval {
        return Ok(DepthGate { keep: true, scale: T::one() });
    }
    let keep = rng.gen::<f64>() < survival_p;
    Ok(DepthGate {
        keep,
        scale: T::from_f64(1.0 / survival_p),
    })
}
