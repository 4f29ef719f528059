//! Central-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ParamId, ParamStore, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Relative tolerance per scalar.
    pub tolerance: f64,
    /// Number of scalars to probe; `None` checks every scalar.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Fraction of probed scalars that must be within tolerance.
    pub min_pass_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            samples: None,
            seed: 0,
            min_pass_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub within_tolerance: usize,
    pub failures: Vec<GradCheckFailure>,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        self.within_tolerance as f64 / self.checked.max(1) as f64
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Picks `(parameter, flat index)` probes. Sample `j` is drawn from tensor
/// `j mod n`, so every tensor is probed once `samples ≥ n`.
fn probes(params: &ParamStore, opts: &GradCheckOptions) -> Vec<(ParamId, usize)> {
    match opts.samples {
        None => params
            .iter()
            .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
            .collect(),
        Some(n) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            let count = params.len();
            (0..n)
                .map(|j| {
                    let id = ParamId(j % count);
                    (id, rng.random_range(0..params.get(id).len()))
                })
                .collect()
        }
    }
}

/// Compares `analytic` against `(f(p + h) − f(p − h)) / 2h` at sampled
/// scalars of `params`.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &ParamStore,
    analytic: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut work = params.clone();
    let mut max_rel_err = 0.0f64;
    let mut within = 0;
    let mut failures = Vec::new();
    let probes = probes(params, opts);
    for &(id, index) in &probes {
        let original = params.get(id).data()[index];
        work.get_mut(id).data_mut()[index] = original + opts.step;
        let plus = f(&work)?;
        work.get_mut(id).data_mut()[index] = original - opts.step;
        let minus = f(&work)?;
        work.get_mut(id).data_mut()[index] = original;

        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic[id.0].data()[index];
        let rel_err = relative_error(a, numeric);
        max_rel_err = max_rel_err.max(rel_err);
        if rel_err <= opts.tolerance {
            within += 1;
        } else {
            failures.push(GradCheckFailure {
                param: params.name(id).to_string(),
                index,
                analytic: a,
                numeric,
                rel_err,
            });
        }
    }
    let checked = probes.len();
    let pass = within as f64 >= opts.min_pass_fraction * checked as f64;
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        within_tolerance: within,
        failures,
        pass,
    })
}
