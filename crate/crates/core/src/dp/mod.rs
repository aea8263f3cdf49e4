//! Directed percolation on a cone-shaped lattice as a model of the
//! solvable-unsolvable transition.
//!
//! A lattice of dimension `D` is traversed in `T` levels from its base to
//! its apex; each bond is present with probability `p`. A *permeable* path
//! reaches the apex, an *absorbing* path stops at a site whose outgoing
//! bonds are all absent. The expected counts grow like `(Dp)^T`, so every
//! count here is carried as a [`LogCount`].
//!
//! The closed forms for the absorbing count hold for `Dp > 1` and are only
//! meaningful near the threshold `p = e/D`.

mod lattice;
pub mod special;

pub use lattice::{simulate_cone_lattice, ConeLattice, LatticeSim, MAX_LATTICE_SITES};

use std::f64::consts::{E, LN_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use special::{ln_erfc, ln_gamma, ln_gamma_pq, normal_cdf, normal_pdf};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("closed form requires Dp > 1, got D={dim}, p={prob} (Dp={})", dim * prob)]
    BelowThreshold { dim: f64, prob: f64 },
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("lattice with {sites} sites exceeds the cap of {cap}")]
    LatticeTooLarge { sites: u128, cap: u128 },
}

/// A non-negative or signed real stored as (sign, ln |value|).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogCount {
    /// -1, 0 or +1.
    pub sign: i8,
    pub ln_abs: f64,
}

impl LogCount {
    pub const ZERO: LogCount = LogCount {
        sign: 0,
        ln_abs: f64::NEG_INFINITY,
    };

    pub fn from_ln(ln_abs: f64) -> Self {
        if ln_abs == f64::NEG_INFINITY {
            Self::ZERO
        } else {
            LogCount { sign: 1, ln_abs }
        }
    }

    pub fn from_f64(x: f64) -> Self {
        if x == 0.0 {
            Self::ZERO
        } else {
            LogCount {
                sign: if x > 0.0 { 1 } else { -1 },
                ln_abs: x.abs().ln(),
            }
        }
    }

    pub fn to_f64(self) -> f64 {
        f64::from(self.sign) * self.ln_abs.exp()
    }

    pub fn is_zero(self) -> bool {
        self.sign == 0
    }

    pub fn mul(self, other: LogCount) -> LogCount {
        if self.is_zero() || other.is_zero() {
            return Self::ZERO;
        }
        LogCount {
            sign: self.sign * other.sign,
            ln_abs: self.ln_abs + other.ln_abs,
        }
    }

    /// Sum via log-sum-exp.
    pub fn add(self, other: LogCount) -> LogCount {
        if self.is_zero() {
            return other;
        }
        if other.is_zero() {
            return self;
        }
        let (big, small) = if self.ln_abs >= other.ln_abs {
            (self, other)
        } else {
            (other, self)
        };
        let d = small.ln_abs - big.ln_abs;
        if big.sign == small.sign {
            LogCount {
                sign: big.sign,
                ln_abs: big.ln_abs + d.exp().ln_1p(),
            }
        } else if d == 0.0 {
            Self::ZERO
        } else {
            LogCount {
                sign: big.sign,
                ln_abs: big.ln_abs + special::ln_one_minus_exp(d),
            }
        }
    }
}

/// log-sum-exp over non-negative terms given by their logarithms.
fn ln_sum_exp(terms: impl IntoIterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.into_iter().collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// 1 / (1 + e^z), without overflow.
fn logistic_neg(z: f64) -> f64 {
    if z > 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    /// Lattice dimension D (real values allowed by the analytic formulas).
    pub dim: f64,
    /// Levels from base to apex, T.
    pub depth: u64,
    /// Bond probability p.
    pub prob: f64,
}

impl DpParams {
    /// Depth defaults to T = D - 1.
    pub fn new(dim: f64, prob: f64) -> Self {
        DpParams {
            dim,
            depth: (dim - 1.0).round().max(1.0) as u64,
            prob,
        }
    }

    pub fn with_depth(dim: f64, depth: u64, prob: f64) -> Self {
        DpParams { dim, depth, prob }
    }

    pub fn dp(&self) -> f64 {
        self.dim * self.prob
    }

    fn validate(&self) -> Result<(), DpError> {
        if !(self.dim.is_finite() && self.dim >= 2.0) {
            return Err(DpError::Params(format!("D must be >= 2, got {}", self.dim)));
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(DpError::Params(format!("p must lie in [0, 1], got {}", self.prob)));
        }
        if self.depth == 0 {
            return Err(DpError::Params("T must be positive".into()));
        }
        Ok(())
    }

    fn require_supercritical(&self) -> Result<f64, DpError> {
        self.validate()?;
        let dp = self.dp();
        if dp <= 1.0 {
            return Err(DpError::BelowThreshold {
                dim: self.dim,
                prob: self.prob,
            });
        }
        Ok(dp.ln())
    }
}

/// Expected and/or sampled path counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeCounts {
    pub permeable: LogCount,
    pub absorbing: LogCount,
}

impl LatticeCounts {
    /// permeable / (permeable + absorbing); NaN when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.permeable.is_zero() && self.absorbing.is_zero() {
            return f64::NAN;
        }
        if self.permeable.is_zero() {
            return 0.0;
        }
        logistic_neg(self.absorbing.ln_abs - self.permeable.ln_abs)
    }
}

/// <n_p> = (Dp)^T.
pub fn expected_permeable(params: &DpParams) -> Result<LogCount, DpError> {
    params.validate()?;
    let dp = params.dp();
    if dp == 0.0 {
        return Ok(LogCount::ZERO);
    }
    Ok(LogCount::from_ln(params.depth as f64 * dp.ln()))
}

/// Exact hyperpyramid sum
/// (1-p)^D sum_{i=0}^{T-1} (T+1-i)^{D-1} / (D-1)! (Dp)^i.
pub fn expected_absorbing_sum(params: &DpParams) -> Result<LogCount, DpError> {
    params.validate()?;
    let d = params.dim;
    let p = params.prob;
    if p == 1.0 {
        return Ok(LogCount::ZERO);
    }
    let t = params.depth;
    let ln_pref = d * (-p).ln_1p() - ln_gamma(d);
    let ln_dp = params.dp().ln();
    let terms = (0..t).map(|i| {
        let site = (d - 1.0) * ((t + 1 - i) as f64).ln();
        // (Dp)^0 = 1 even when p = 0.
        let growth = if i == 0 { 0.0 } else { i as f64 * ln_dp };
        site + growth
    });
    Ok(LogCount::from_ln(ln_pref + ln_sum_exp(terms)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClosedForm {
    /// Integral approximation, via the lower incomplete gamma function.
    Gamma,
    /// Further Gaussian approximation of the incomplete gamma, via erfc.
    Erfc,
}

/// Closed-form approximations of the absorbing count, valid for Dp > 1.
///
/// Gamma: (Dp)^{T+1} / (D-1)! ((1-p)/ln Dp)^D γ(D, (T+1) ln Dp).
/// Erfc:  (Dp)^{T+1} / 2 ((1-p)/ln Dp)^D erfc((D - (T+1) ln Dp) / sqrt(2 (T+1) ln Dp)),
/// which for T + 1 = D reduces to erfc(sqrt(D) (1 - ln Dp) / sqrt(2 ln Dp)).
pub fn expected_absorbing_closed(params: &DpParams, form: ClosedForm) -> Result<LogCount, DpError> {
    let ln_dp = params.require_supercritical()?;
    let d = params.dim;
    let p = params.prob;
    if p == 1.0 {
        return Ok(LogCount::ZERO);
    }
    let levels = params.depth as f64 + 1.0;
    let x = levels * ln_dp;
    let common = levels * ln_dp + d * ((-p).ln_1p() - ln_dp.ln());
    let tail = match form {
        // γ(D, x) / (D-1)! is the regularized P(D, x)
        ClosedForm::Gamma => ln_gamma_pq(d, x).0,
        ClosedForm::Erfc => -LN_2 + ln_erfc((d - x) / (2.0 * x).sqrt()),
    };
    Ok(LogCount::from_ln(common + tail))
}

/// Closed-form permeable ratio r(D, p) with T = D - 1:
/// 1 / (1 + Dp/2 ((1-p)/ln Dp)^D erfc(sqrt(D) (1 - ln Dp) / sqrt(2 ln Dp))).
pub fn permeable_ratio(dim: f64, prob: f64) -> Result<f64, DpError> {
    let p = DpParams::with_depth(dim, 1, prob);
    let ln_dp = p.require_supercritical()?;
    if prob == 1.0 {
        return Ok(1.0);
    }
    let z = ln_dp - LN_2
        + dim * ((-prob).ln_1p() - ln_dp.ln())
        + ln_erfc(dim.sqrt() * (1.0 - ln_dp) / (2.0 * ln_dp).sqrt());
    Ok(logistic_neg(z))
}

/// Permeable ratio linearised around the threshold, p = (e + delta) / D:
/// 1 / (1 + 1/2 e^{1 - e - delta - D delta / e} erfc(-sqrt(D/2) delta / e)).
pub fn ratio_near_transition(dim: f64, delta: f64) -> f64 {
    let z = -LN_2 + (1.0 - E - delta - dim * delta / E) + ln_erfc(-(dim / 2.0).sqrt() * delta / E);
    logistic_neg(z)
}

/// Terms of the truncated exponential series compared to their Gaussian
/// approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedExp {
    /// e_n(x) e^{-x} = sum_{k<=n} x^k e^{-x} / k!
    pub exact: f64,
    /// Φ((n - x) / sqrt(x))
    pub approx: f64,
}

impl TruncatedExp {
    /// 1 - e_n(x) e^{-x}: the fraction of the series beyond n. In the
    /// absorbing-path derivation this is the prefactor multiplying (D-1)!.
    pub fn absorbed_fraction(&self) -> f64 {
        1.0 - self.exact
    }
}

/// ln g(k, x) for k = 0..=n, with g(k, x) = x^k e^{-x} / k!, by the
/// recurrence ln g(k+1) = ln g(k) + ln x - ln(k+1).
pub fn ln_poisson_terms(n: u64, x: f64) -> Vec<f64> {
    let lx = x.ln();
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut cur = -x;
    out.push(cur);
    for k in 1..=n {
        cur += lx - (k as f64).ln();
        out.push(cur);
    }
    out
}

/// g(k, x) = x^k e^{-x} / k!.
pub fn poisson_term(k: u64, x: f64) -> f64 {
    (k as f64 * x.ln() - x - special::ln_factorial(k)).exp()
}

/// Gaussian approximation of g(k, x): normal density with mean and
/// variance x.
pub fn poisson_term_gaussian(k: f64, x: f64) -> f64 {
    normal_pdf(k, x, x.sqrt())
}

pub fn truncated_exp_ratio(n: u64, x: f64) -> Result<TruncatedExp, DpError> {
    if !(x > 0.0 && x.is_finite()) {
        return Err(DpError::Params(format!("x must be positive, got {x}")));
    }
    let exact = ln_sum_exp(ln_poisson_terms(n, x)).exp().min(1.0);
    let approx = normal_cdf((n as f64 - x) / x.sqrt());
    Ok(TruncatedExp { exact, approx })
}

/// Threshold bond probability e / D.
pub fn critical_probability(dim: f64) -> f64 {
    E / dim
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1e-300)
    }

    #[test]
    fn log_count_arithmetic() {
        let a = LogCount::from_f64(3.0);
        let b = LogCount::from_f64(4.5);
        assert!(close(a.add(b).to_f64(), 7.5, 1e-15));
        assert!(close(a.mul(b).to_f64(), 13.5, 1e-15));
        assert!(close(a.add(LogCount::from_f64(-1.0)).to_f64(), 2.0, 1e-15));
        assert!(close(LogCount::from_f64(-5.0).add(a).to_f64(), -2.0, 1e-15));
        assert!(a.add(LogCount::from_f64(-3.0)).is_zero());
        assert_eq!(LogCount::ZERO.add(a), a);
        assert!(a.mul(LogCount::ZERO).is_zero());
        let huge = LogCount::from_ln(1e6);
        assert!(close(huge.add(huge).ln_abs, 1e6 + LN_2, 1e-15));
    }

    #[test]
    fn permeable_examples() {
        let c = expected_permeable(&DpParams::with_depth(3.0, 2, 1.0)).unwrap();
        assert!(close(c.to_f64(), 9.0, 1e-15));
        let c = expected_permeable(&DpParams::with_depth(2.0, 3, 0.5)).unwrap();
        assert_eq!(c.to_f64(), 1.0);
        assert!(expected_permeable(&DpParams::with_depth(4.0, 3, 0.0)).unwrap().is_zero());
        assert!(expected_permeable(&DpParams::with_depth(1.0, 3, 0.5)).is_err());
        assert!(expected_permeable(&DpParams::with_depth(4.0, 3, 1.5)).is_err());
    }

    #[test]
    fn absorbing_sum_examples() {
        // 0.25 * (4 + 3 + 2): three terms i = 0, 1, 2 with (Dp)^i = 1.
        let c = expected_absorbing_sum(&DpParams::with_depth(2.0, 3, 0.5)).unwrap();
        assert!(close(c.to_f64(), 2.25, 1e-14));
        assert!(expected_absorbing_sum(&DpParams::with_depth(5.0, 4, 1.0))
            .unwrap()
            .is_zero());
        // p = 0 keeps only i = 0: (T+1)^{D-1} / (D-1)!
        let c = expected_absorbing_sum(&DpParams::with_depth(4.0, 5, 0.0)).unwrap();
        assert!(close(c.to_f64(), 216.0 / 6.0, 1e-14));
    }

    #[test]
    fn erfc_form_at_threshold_has_unit_erfc() {
        // ln Dp = 1 => erfc(0) = 1 and the formula is (Dp)^D/2 (1-p)^D.
        let d = 50.0;
        let p = E / d;
        let got = expected_absorbing_closed(&DpParams::new(d, p), ClosedForm::Erfc).unwrap();
        let want = d * (d * p).ln() - LN_2 + d * (1.0 - p).ln();
        assert!(close(got.ln_abs, want, 1e-13));
    }

    #[test]
    fn closed_forms_need_supercritical() {
        for form in [ClosedForm::Gamma, ClosedForm::Erfc] {
            let err = expected_absorbing_closed(&DpParams::new(100.0, 0.01), form).unwrap_err();
            assert!(matches!(err, DpError::BelowThreshold { .. }));
        }
        assert!(permeable_ratio(100.0, 0.005).is_err());
    }

    #[test]
    fn ratio_is_the_count_quotient() {
        for (d, f) in [(100.0, 1.0), (300.0, 0.97), (1000.0, 1.02), (64.0, 1.3)] {
            let p = f * E / d;
            let params = DpParams::new(d, p);
            let counts = LatticeCounts {
                permeable: expected_permeable(&params).unwrap(),
                absorbing: expected_absorbing_closed(&params, ClosedForm::Erfc).unwrap(),
            };
            let r = permeable_ratio(d, p).unwrap();
            assert!(close(counts.ratio(), r, 1e-12), "D={d} f={f}");
        }
    }

    #[test]
    fn threshold_limit() {
        // erfc(0) = 1 at delta = 0.
        let want = 1.0 / (1.0 + 0.5 * (1.0 - E).exp());
        assert!(close(ratio_near_transition(1e6, 0.0), want, 1e-15));
        assert!((want - 0.917_69).abs() < 1e-5);
        assert!(ratio_near_transition(1e6, 0.05) > 1.0 - 1e-9);
        assert!(ratio_near_transition(1e6, -0.05) < 1e-9);
    }

    #[test]
    fn truncated_exp_edges() {
        let t = truncated_exp_ratio(0, 2.5).unwrap();
        assert!(close(t.exact, (-2.5f64).exp(), 1e-15));
        let t = truncated_exp_ratio(500, 50.0).unwrap();
        assert!((t.exact - 1.0).abs() < 1e-14);
        assert!(t.absorbed_fraction().abs() < 1e-14);
        assert!(truncated_exp_ratio(3, 0.0).is_err());
        assert!(close(poisson_term(3, 2.0), 8.0 / 6.0 * (-2.0f64).exp(), 1e-14));
    }
}
