//! Curve fits: sigmoid A(dt), power laws, and the percolation-ratio model
//! linking the time step to a bond probability.
//!
//! Nonlinear fits start from the best point of a coarse grid and are
//! refined with a bounded Nelder-Mead simplex.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::permeable_ratio;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("no transition bracketed: need points with A > 0.9 and A < 0.1")]
    NoTransition,
    #[error("data do not span the transition (A range {lo:.3}..{hi:.3})")]
    InsufficientSpan { lo: f64, hi: f64 },
    #[error("power-law fit needs positive data, got ({x}, {y})")]
    NonPositive { x: f64, y: f64 },
    #[error("all x values are equal")]
    DegenerateX,
    #[error("optimizer did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("parameter {param} stuck at its bound ({fit:?})")]
    AtBound { param: &'static str, fit: DpFit },
    #[error("sigmoid slope is zero")]
    ZeroSlope,
    #[error("level must lie in (0, 1), got {0}")]
    Level(f64),
    #[error("points mix several system sizes")]
    MixedSizes,
}

/// Result of a bounded Nelder-Mead run.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best objective value after each iteration; non-increasing.
    pub history: Vec<f64>,
}

/// Minimises `f` inside the box `bounds` starting from `x0`. Vertices are
/// projected onto the box. Stops when the simplex spread in every
/// coordinate is below `tol` relative to the best vertex.
pub fn nelder_mead<F>(
    mut f: F,
    x0: &[f64],
    step: &[f64],
    bounds: &[(f64, f64)],
    tol: f64,
    max_iter: usize,
) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let project = |x: &mut Vec<f64>| {
        for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
            *v = v.clamp(lo, hi);
        }
    };
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    project(&mut start);
    let v0 = eval(&start);
    simplex.push((start.clone(), v0));
    for i in 0..n {
        let mut x = start.clone();
        x[i] += step[i];
        project(&mut x);
        if x[i] == start[i] {
            x[i] -= step[i];
            project(&mut x);
        }
        let v = eval(&x);
        simplex.push((x, v));
    }

    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let spread_ok = (0..n).all(|j| {
            let best = simplex[0].0[j];
            let scale = best.abs().max(1e-12);
            simplex.iter().all(|(x, _)| (x[j] - best).abs() <= tol * scale)
        });
        if spread_ok && iterations > 0 {
            converged = true;
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> = (0..n)
            .map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64)
            .collect();
        let along = |t: f64| {
            let mut x: Vec<f64> = centroid
                .iter()
                .zip(&simplex[n].0)
                .map(|(c, w)| c + t * (c - w))
                .collect();
            project(&mut x);
            x
        };
        let xr = along(1.0);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = along(0.5);
                let v = eval(&x);
                (x, v)
            } else {
                let x = along(-0.5);
                let v = eval(&x);
                (x, v)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for vert in simplex.iter_mut().skip(1) {
                    let mut x: Vec<f64> =
                        best.iter().zip(&vert.0).map(|(b, v)| b + 0.5 * (v - b)).collect();
                    project(&mut x);
                    let v = eval(&x);
                    *vert = (x, v);
                }
            }
        }
        let best = simplex.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
        history.push(best);
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        iterations,
        converged,
        history,
    }
}

const REL_TOL: f64 = 1e-8;
const MAX_ITER: usize = 20_000;

/// A = 1 / (1 + exp(-c (dt - d))).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmoidFit {
    pub c: f64,
    pub d: f64,
    /// Weighted sum of squared errors.
    pub residual: f64,
}

impl SigmoidFit {
    pub fn eval(&self, dt: f64) -> f64 {
        sigmoid(self.c, self.d, dt)
    }
}

fn sigmoid(c: f64, d: f64, dt: f64) -> f64 {
    let z = -c * (dt - d);
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Weight for a point with binomial standard error `stderr`.
pub fn sigmoid_weight(stderr: f64) -> f64 {
    1.0 / stderr.max(0.01).powi(2)
}

/// Weighted least-squares sigmoid fit to (dt, A, weight) points.
pub fn fit_sigmoid(points: &[(f64, f64, f64)]) -> Result<SigmoidFit, FitError> {
    fit_sigmoid_traced(points).map(|(fit, _)| fit)
}

/// As [`fit_sigmoid`], also returning the optimizer trace.
pub fn fit_sigmoid_traced(points: &[(f64, f64, f64)]) -> Result<(SigmoidFit, Minimum), FitError> {
    if points.len() < 4 {
        return Err(FitError::TooFewPoints {
            needed: 4,
            got: points.len(),
        });
    }
    let hi = points.iter().any(|p| p.1 > 0.9);
    let lo = points.iter().any(|p| p.1 < 0.1);
    if !(hi && lo) {
        return Err(FitError::NoTransition);
    }
    let sse = |c: f64, d: f64| {
        points
            .iter()
            .map(|&(x, a, w)| w * (a - sigmoid(c, d, x)).powi(2))
            .sum::<f64>()
    };
    let xmin = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let span = (xmax - xmin).max(f64::EPSILON * xmax.abs().max(1.0));
    // |c| from one to 10^4 transitions per data span, either sign.
    let c_max = 1e4 / span;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=60 {
        let mag = 10f64.powf(i as f64 / 15.0) / span;
        for sign in [-1.0, 1.0] {
            for j in 0..=40 {
                let d = xmin + span * j as f64 / 40.0;
                let v = sse(sign * mag, d);
                if v < best.0 {
                    best = (v, sign * mag, d);
                }
            }
        }
    }
    let (_, c0, d0) = best;
    let bounds = [(-c_max, c_max), (xmin - span, xmax + span)];
    let min = nelder_mead(
        |p| sse(p[0], p[1]),
        &[c0, d0],
        &[0.1 * c0.abs(), 0.05 * span],
        &bounds,
        REL_TOL,
        MAX_ITER,
    );
    if !min.converged {
        return Err(FitError::NoConvergence {
            iterations: min.iterations,
        });
    }
    Ok((
        SigmoidFit {
            c: min.x[0],
            d: min.x[1],
            residual: min.value,
        },
        min,
    ))
}

/// dt at which the fitted sigmoid equals `level`.
pub fn dt_at_level(fit: &SigmoidFit, level: f64) -> Result<f64, FitError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(FitError::Level(level));
    }
    if fit.c == 0.0 {
        return Err(FitError::ZeroSlope);
    }
    Ok(fit.d + (level / (1.0 - level)).ln() / fit.c)
}

/// y = prefactor * x^exponent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub prefactor: f64,
    pub exponent: f64,
    pub r_squared: f64,
    /// Standard error of the exponent from the log-log regression.
    pub exponent_stderr: f64,
}

impl PowerLawFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.prefactor * x.powf(self.exponent)
    }
}

/// Ordinary least squares on (ln x, ln y).
pub fn fit_power_law(pairs: &[(f64, f64)]) -> Result<PowerLawFit, FitError> {
    if pairs.len() < 3 {
        return Err(FitError::TooFewPoints {
            needed: 3,
            got: pairs.len(),
        });
    }
    if let Some(&(x, y)) = pairs.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(FitError::NonPositive { x, y });
    }
    let n = pairs.len() as f64;
    let lx: Vec<f64> = pairs.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = pairs.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(FitError::DegenerateX);
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    let exponent_stderr = if pairs.len() > 2 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(PowerLawFit {
        prefactor: intercept.exp(),
        exponent: slope,
        r_squared,
        exponent_stderr,
    })
}

/// Fitted percolation model for one system size, with the ansatz
/// delta = D p - e = a (1/(N dt) - b).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpFit {
    pub n_vars: usize,
    pub a: f64,
    pub b: f64,
    pub dim: f64,
    pub residual: f64,
}

impl DpFit {
    pub fn eval(&self, dt: f64) -> f64 {
        dp_model(self.dim, self.a * (1.0 / (self.n_vars as f64 * dt) - self.b))
    }

    /// dt at which the ansatz puts the threshold (delta = 0).
    pub fn dt_threshold(&self) -> f64 {
        1.0 / (self.n_vars as f64 * self.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpFitOptions {
    /// Fixed ansatz scale.
    pub a: f64,
    /// Clause-to-variable ratio; caps D at 10 (1 + 2 ratio) N.
    pub ratio: f64,
}

impl Default for DpFitOptions {
    fn default() -> Self {
        DpFitOptions { a: 5.0, ratio: 8.0 }
    }
}

/// Permeable ratio as a function of (D, delta). The closed form only
/// describes the neighbourhood of the threshold; below half the threshold
/// (D p <= e/2) the ratio is taken as 0 and above p = 1 as 1.
pub fn dp_model(dim: f64, delta: f64) -> f64 {
    let dp = E + delta;
    if dp <= 0.5 * E || dp <= 1.0 {
        return 0.0;
    }
    let p = dp / dim;
    if p >= 1.0 {
        return 1.0;
    }
    permeable_ratio(dim, p).unwrap_or(0.0)
}

/// Least-squares fit of A(dt) at one size N to the percolation ratio with
/// p = (e + delta) / D and delta = a (1/(N dt) - b). `points` are
/// (N, dt, A).
pub fn fit_dp_ratio(points: &[(usize, f64, f64)], opts: DpFitOptions) -> Result<DpFit, FitError> {
    if points.len() < 4 {
        return Err(FitError::TooFewPoints {
            needed: 4,
            got: points.len(),
        });
    }
    let n_vars = points[0].0;
    if points.iter().any(|p| p.0 != n_vars) {
        return Err(FitError::MixedSizes);
    }
    let lo = points.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 0.5 {
        return Err(FitError::InsufficientSpan { lo, hi });
    }
    let n = n_vars as f64;
    let xs: Vec<(f64, f64)> = points.iter().map(|&(_, dt, a)| (1.0 / (n * dt), a)).collect();
    let sse = |b: f64, dim: f64| {
        xs.iter()
            .map(|&(x, a)| (a - dp_model(dim, opts.a * (x - b))).powi(2))
            .sum::<f64>()
    };

    let d_lo = E * (1.0 + 1e-9);
    let d_hi = 10.0 * (1.0 + 2.0 * opts.ratio) * n;
    let (b_lo, b_hi) = (1e-12, 1.0);
    // Work in (b, ln D); the grid covers b over the observed 1/(N dt) range.
    let xmin = xs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let xmax = xs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=60 {
        let b = (xmin + (xmax - xmin) * i as f64 / 60.0).clamp(b_lo, b_hi);
        for j in 0..=60 {
            let ln_d = d_lo.ln() + (d_hi.ln() - d_lo.ln()) * j as f64 / 60.0;
            let v = sse(b, ln_d.exp());
            if v < best.0 {
                best = (v, b, ln_d);
            }
        }
    }
    let bounds = [(b_lo, b_hi), (d_lo.ln(), d_hi.ln())];
    let min = nelder_mead(
        |q| sse(q[0], q[1].exp()),
        &[best.1, best.2],
        &[0.05 * (xmax - xmin).max(1e-9), 0.1],
        &bounds,
        REL_TOL,
        MAX_ITER,
    );
    if !min.converged {
        return Err(FitError::NoConvergence {
            iterations: min.iterations,
        });
    }
    let fit = DpFit {
        n_vars,
        a: opts.a,
        b: min.x[0],
        dim: min.x[1].exp(),
        residual: min.value,
    };
    let near = |v: f64, bound: f64| (v - bound).abs() <= 1e-6 * bound.abs().max(1e-12);
    if near(min.x[0], b_lo) || near(min.x[0], b_hi) {
        return Err(FitError::AtBound { param: "b", fit });
    }
    if near(min.x[1], bounds[1].0) || near(min.x[1], bounds[1].1) {
        return Err(FitError::AtBound { param: "D", fit });
    }
    Ok(fit)
}
