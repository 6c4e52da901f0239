//! Finite-difference validation of tape gradients.
//!
//! Central differences with step `h` on an `f64` graph have truncation error
//! `O(h^2)` and roundoff `O(eps/h)`; the default `h = 1e-5` balances the two
//! well below the tolerances used in tests. Relative error is floored at unit
//! scale so near-zero gradients do not blow up the ratio.

use ndarray::ArrayD;
use rand::Rng;

use super::tape::{GradTape, NodeId};
use super::NumericsError;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    /// Number of elements compared.
    pub checks: usize,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Checks `d root / d inputs[i]` for every element of every input.
///
/// `build` must be a pure function of the leaf values: it is re-run for each
/// probe, so any randomness has to be baked into captured constants. The root
/// it returns must be scalar.
pub fn grad_check<F>(
    inputs: &[ArrayD<f64>],
    build: F,
    step: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut GradTape<f64>, &[NodeId]) -> NodeId,
{
    let all: Vec<Vec<usize>> = inputs
        .iter()
        .map(|x| (0..x.len()).collect())
        .collect();
    grad_check_at(inputs, build, step, &all)
}

/// Like [`grad_check`], probing only `samples` random elements per input.
/// Every input still gets coverage; only the element set is subsampled.
pub fn grad_check_sampled<F, R: Rng>(
    inputs: &[ArrayD<f64>],
    build: F,
    step: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut GradTape<f64>, &[NodeId]) -> NodeId,
{
    let picks: Vec<Vec<usize>> = inputs
        .iter()
        .map(|x| {
            if x.len() <= samples {
                (0..x.len()).collect()
            } else {
                let mut chosen: Vec<usize> = Vec::with_capacity(samples);
                while chosen.len() < samples {
                    let idx = rng.gen_range(0..x.len());
                    if !chosen.contains(&idx) {
                        chosen.push(idx);
                    }
                }
                chosen
            }
        })
        .collect();
    grad_check_at(inputs, build, step, &picks)
}

fn grad_check_at<F>(
    inputs: &[ArrayD<f64>],
    build: F,
    step: f64,
    elements: &[Vec<usize>],
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut GradTape<f64>, &[NodeId]) -> NodeId,
{
    if step <= 0.0 {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step {step} must be positive"
        )));
    }

    let eval = |values: &[ArrayD<f64>]| -> f64 {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = values.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let root = build(&mut tape, &ids);
        tape.scalar(root)
    };

    // Analytic pass.
    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
    let root = build(&mut tape, &ids);
    if tape.value(root).len() != 1 {
        return Err(NumericsError::InvalidArgument(
            "grad_check root must be scalar".into(),
        ));
    }
    let grads = tape.backward(root);

    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checks: 0 };

    for (i, picks) in elements.iter().enumerate() {
        let analytic = grads.get(ids[i]).cloned().unwrap_or_else(|| ArrayD::zeros(inputs[i].raw_dim()));
        let analytic_flat = analytic.as_slice().expect("standard layout");
        for &e in picks {
            let orig = work[i].as_slice().expect("standard layout")[e];
            work[i].as_slice_mut().unwrap()[e] = orig + step;
            let up = eval(&work);
            work[i].as_slice_mut().unwrap()[e] = orig - step;
            let down = eval(&work);
            work[i].as_slice_mut().unwrap()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = rel_error(analytic_flat[e], numeric);
            report.checks += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((i, e));
            }
        }
    }
    Ok(report)
}
