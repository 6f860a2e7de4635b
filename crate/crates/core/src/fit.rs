// SPDX-License-Identifier: Apache-2.0

//! Damped Gauss–Newton (Levenberg–Marquardt) least squares for the small
//! parameter counts used in this crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when the relative decrease of the residual sum of squares falls
    /// below this.
    pub ftol: f64,
    /// Stop when the relative parameter step falls below this.
    pub xtol: f64,
    pub initial_lambda: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            ftol: 1e-15,
            xtol: 1e-13,
            initial_lambda: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmFit {
    pub params: Vec<f64>,
    /// `s² (JᵀJ)⁻¹` with `s² = rss / (n - p)`.
    pub covariance: DMatrix<f64>,
    pub rss: f64,
    pub initial_rss: f64,
    pub iterations: usize,
}

impl LmFit {
    pub fn residual_rms(&self, n: usize) -> f64 {
        (self.rss / n as f64).sqrt()
    }

    pub fn stderr(&self, k: usize) -> f64 {
        self.covariance[(k, k)].max(0.0).sqrt()
    }
}

/// Minimises `Σ r_k(p)²`. `model` returns the residual vector and its
/// Jacobian `∂r/∂p` at `p`.
pub fn levenberg_marquardt<F>(model: F, p0: &[f64], opts: LmOptions) -> Result<LmFit>
where
    F: Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
{
    let n_par = p0.len();
    let mut p = DVector::from_column_slice(p0);
    let (mut r, mut jac) = model(p.as_slice());
    let n = r.len();
    if n <= n_par {
        return Err(Error::IllConditioned(format!(
            "{n} residuals cannot determine {n_par} parameters"
        )));
    }
    let initial_rss = r.norm_squared();
    if !initial_rss.is_finite() {
        return Err(Error::FitDiverged("non-finite residual at the starting point".into()));
    }
    let mut rss = initial_rss;
    let mut lambda = opts.initial_lambda;
    let mut iterations = 0;

    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * &r;
        let mut accepted = false;
        for _ in 0..60 {
            let mut damped = jtj.clone();
            for k in 0..n_par {
                let d = jtj[(k, k)];
                damped[(k, k)] += lambda * if d > 0.0 { d } else { 1.0 };
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-&grad))) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &p + &step;
            let (r_new, jac_new) = model(trial.as_slice());
            let rss_new = r_new.norm_squared();
            if rss_new.is_finite() && rss_new <= rss {
                let rel_drop = (rss - rss_new) / rss.max(f64::MIN_POSITIVE);
                let rel_step = step.norm() / (p.norm() + opts.xtol);
                p = trial;
                r = r_new;
                jac = jac_new;
                rss = rss_new;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if rel_drop < opts.ftol || rel_step < opts.xtol {
                    return finish(p, jac, rss, initial_rss, n, iterations);
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    finish(p, jac, rss, initial_rss, n, iterations)
}

fn finish(
    p: DVector<f64>,
    jac: DMatrix<f64>,
    rss: f64,
    initial_rss: f64,
    n: usize,
    iterations: usize,
) -> Result<LmFit> {
    let n_par = p.len();
    if !rss.is_finite() || p.iter().any(|v| !v.is_finite()) {
        return Err(Error::FitDiverged("non-finite parameters".into()));
    }
    let jtj = jac.transpose() * &jac;
    let inv = invert_checked(&jtj)?;
    let s2 = rss / (n - n_par) as f64;
    Ok(LmFit {
        params: p.as_slice().to_vec(),
        covariance: inv * s2,
        rss,
        initial_rss,
        iterations,
    })
}

/// Inverts a symmetric positive matrix after Jacobi scaling; refuses when the
/// scaled condition number exceeds ~1e14.
fn invert_checked(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let scale: Vec<f64> = (0..n).map(|k| m[(k, k)].max(0.0).sqrt()).collect();
    if scale.iter().any(|s| *s == 0.0 || !s.is_finite()) {
        return Err(Error::IllConditioned("a parameter has zero sensitivity".into()));
    }
    let scaled = DMatrix::from_fn(n, n, |i, j| m[(i, j)] / (scale[i] * scale[j]));
    let eig = scaled.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    if lo <= hi * 1e-14 {
        return Err(Error::IllConditioned(format!(
            "normal matrix is singular (eigenvalue ratio {:.3e})",
            lo / hi
        )));
    }
    let inv = scaled
        .try_inverse()
        .ok_or_else(|| Error::IllConditioned("normal matrix is singular".into()))?;
    Ok(DMatrix::from_fn(n, n, |i, j| inv[(i, j)] / (scale[i] * scale[j])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exponential_decay() {
        let xs: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * (-1.3 * x).exp()).collect();
        let model = |p: &[f64]| {
            let r = DVector::from_iterator(xs.len(), xs.iter().zip(&ys).map(|(x, y)| p[0] * (-p[1] * x).exp() - y));
            let j = DMatrix::from_fn(xs.len(), 2, |i, k| {
                let e = (-p[1] * xs[i]).exp();
                if k == 0 {
                    e
                } else {
                    -p[0] * xs[i] * e
                }
            });
            (r, j)
        };
        let fit = levenberg_marquardt(model, &[1.0, 0.5], LmOptions::default()).unwrap();
        assert!((fit.params[0] - 2.0).abs() < 1e-9);
        assert!((fit.params[1] - 1.3).abs() < 1e-9);
        assert!(fit.rss < fit.initial_rss);
    }

    #[test]
    fn singular_problem_is_flagged() {
        // both parameters enter only through their sum
        let model = |p: &[f64]| {
            let r = DVector::from_iterator(5, (0..5).map(|k| p[0] + p[1] - k as f64));
            let j = DMatrix::from_element(5, 2, 1.0);
            (r, j)
        };
        let err = levenberg_marquardt(model, &[0.0, 0.0], LmOptions::default()).unwrap_err();
        assert!(matches!(err, Error::IllConditioned(_)));
    }
}
