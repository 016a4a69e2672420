//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked exhaustively.
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            samples_per_tensor: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PathCheck {
    pub path: String,
    pub coordinates: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub paths: Vec<PathCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(|p| p.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.paths.iter().map(|p| p.max_relative_error).fold(0.0, f64::max)
    }

    pub fn path(&self, path: &str) -> Option<&PathCheck> {
        self.paths.iter().find(|p| p.path == path)
    }
}

/// Compare the analytic gradient returned by `f` against
/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` on a fixed pseudo-random subsample of
/// coordinates. Relative error is `|a − n| / max(1, |a|, |n|)`.
pub fn finite_diff_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    if !(opts.h > 0.0) || !(opts.tol > 0.0) {
        return Err(Error::Contract(format!(
            "finite difference step and tolerance must be positive (h={}, tol={})",
            opts.h, opts.tol
        )));
    }
    let (value, analytic) = f(params)?;
    let (again, _) = f(params)?;
    if value.to_bits() != again.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations at the same point differ: {value} vs {again}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut paths = Vec::with_capacity(params.len());
    for (path, tensor) in params.iter() {
        let n = tensor.len();
        let coords: Vec<usize> = if n <= opts.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut picked = sample(&mut rng, n, opts.samples_per_tensor).into_vec();
            picked.sort_unstable();
            picked
        };
        let grad = analytic
            .get(path)
            .ok_or_else(|| Error::Integrity(format!("no analytic gradient for `{path}`")))?;
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let plus = f(&params.perturbed(path, i, opts.h)?)?.0;
            let minus = f(&params.perturbed(path, i, -opts.h)?)?.0;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        paths.push(PathCheck {
            path: path.to_string(),
            coordinates: coords.len(),
            max_relative_error: worst,
            passed: worst <= opts.tol,
        });
    }
    Ok(GradCheckReport {
        h: opts.h,
        tol: opts.tol,
        paths,
    })
}
