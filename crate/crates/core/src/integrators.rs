//! Explicit fixed-step Runge-Kutta integration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegrationError {
    #[error("non-finite derivative at stage {stage} of step {step} (component {index})")]
    NonFinite {
        step: u64,
        stage: usize,
        index: usize,
    },
    #[error("invalid step budget: {0}")]
    Budget(String),
    #[error("invalid tableau: {0}")]
    Tableau(String),
}

/// Weights and strictly lower-triangular stage coefficients of an explicit
/// scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ButcherTableau {
    weights: Vec<f64>,
    coeffs: Vec<Vec<f64>>,
}

impl ButcherTableau {
    /// `coeffs[i]` holds the entries of row `i` left of the diagonal, so it has
    /// exactly `i` elements; explicitness is structural.
    pub fn new(weights: Vec<f64>, coeffs: Vec<Vec<f64>>) -> Result<Self, IntegrationError> {
        if weights.is_empty() {
            return Err(IntegrationError::Tableau("no stages".into()));
        }
        if coeffs.len() != weights.len() {
            return Err(IntegrationError::Tableau(format!(
                "{} weights but {} coefficient rows",
                weights.len(),
                coeffs.len()
            )));
        }
        for (i, row) in coeffs.iter().enumerate() {
            if row.len() != i {
                return Err(IntegrationError::Tableau(format!(
                    "row {i} has {} entries, expected {i}",
                    row.len()
                )));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(IntegrationError::Tableau(format!("weights sum to {sum}")));
        }
        Ok(ButcherTableau { weights, coeffs })
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Full q x q coefficient matrix, zeros on and above the diagonal.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        let q = self.stages();
        self.coeffs
            .iter()
            .map(|row| {
                let mut full = row.clone();
                full.resize(q, 0.0);
                full
            })
            .collect()
    }
}

pub fn tableau_euler() -> ButcherTableau {
    ButcherTableau::new(vec![1.0], vec![vec![]]).unwrap()
}

pub fn tableau_trapezoid() -> ButcherTableau {
    ButcherTableau::new(vec![0.5, 0.5], vec![vec![], vec![1.0]]).unwrap()
}

pub fn tableau_rk4() -> ButcherTableau {
    ButcherTableau::new(
        vec![1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
        vec![vec![], vec![0.5], vec![0.0, 0.5], vec![0.0, 0.0, 1.0]],
    )
    .unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Trapezoid,
    Rk4,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Euler, Method::Trapezoid, Method::Rk4];

    pub fn tableau(self) -> ButcherTableau {
        match self {
            Method::Euler => tableau_euler(),
            Method::Trapezoid => tableau_trapezoid(),
            Method::Rk4 => tableau_rk4(),
        }
    }

    pub fn stages(self) -> usize {
        match self {
            Method::Euler => 1,
            Method::Trapezoid => 2,
            Method::Rk4 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Euler => "euler",
            Method::Trapezoid => "trapezoid",
            Method::Rk4 => "rk4",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Method::Euler),
            "trapezoid" | "heun" => Ok(Method::Trapezoid),
            "rk4" => Ok(Method::Rk4),
            other => Err(format!("unknown method {other:?} (euler, trapezoid, rk4)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepBudget {
    pub dt: f64,
    pub max_steps: u64,
}

impl StepBudget {
    pub fn new(dt: f64, max_steps: u64) -> Result<Self, IntegrationError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(IntegrationError::Budget(format!("dt must be positive, got {dt}")));
        }
        if max_steps == 0 {
            return Err(IntegrationError::Budget("max_steps must be positive".into()));
        }
        Ok(StepBudget { dt, max_steps })
    }
}

/// Reusable stage buffers for repeated in-place steps of one system size.
#[derive(Debug, Clone)]
pub struct Stepper {
    tableau: ButcherTableau,
    k: Vec<Vec<f64>>,
    stage: Vec<f64>,
    steps_taken: u64,
}

impl Stepper {
    pub fn new(tableau: ButcherTableau, dim: usize) -> Self {
        let q = tableau.stages();
        Stepper {
            tableau,
            k: vec![vec![0.0; dim]; q],
            stage: vec![0.0; dim],
            steps_taken: 0,
        }
    }

    pub fn tableau(&self) -> &ButcherTableau {
        &self.tableau
    }

    /// Advances `x` by one step of size `dt`, making exactly `stages()`
    /// calls to `field`. On error `x` is left untouched.
    pub fn step<F>(&mut self, field: &mut F, x: &mut [f64], dt: f64) -> Result<(), IntegrationError>
    where
        F: FnMut(&[f64], &mut [f64]),
    {
        let dim = x.len();
        debug_assert_eq!(dim, self.stage.len());
        let step = self.steps_taken;
        for i in 0..self.tableau.stages() {
            let row = &self.tableau.coeffs[i];
            let (done, rest) = self.k.split_at_mut(i);
            let ki = &mut rest[0];
            if row.iter().all(|&c| c == 0.0) {
                field(x, ki);
            } else {
                self.stage.copy_from_slice(x);
                for (j, &c) in row.iter().enumerate() {
                    if c != 0.0 {
                        let h = dt * c;
                        for (s, kj) in self.stage.iter_mut().zip(&done[j]) {
                            *s += h * kj;
                        }
                    }
                }
                field(&self.stage, ki);
            }
            if let Some(index) = ki.iter().position(|e| !e.is_finite()) {
                return Err(IntegrationError::NonFinite {
                    step,
                    stage: i,
                    index,
                });
            }
        }
        for (w, k) in self.tableau.weights.iter().zip(&self.k) {
            let h = dt * w;
            for (xe, ke) in x.iter_mut().zip(k) {
                *xe += h * ke;
            }
        }
        self.steps_taken += 1;
        Ok(())
    }
}

/// One explicit Runge-Kutta step: k_i = F(x + dt sum_{j<i} l_ij k_j),
/// x' = x + dt sum_i w_i k_i.
pub fn step<F>(
    field: &mut F,
    x: &[f64],
    dt: f64,
    tableau: &ButcherTableau,
) -> Result<Vec<f64>, IntegrationError>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut out = x.to_vec();
    Stepper::new(tableau.clone(), x.len()).step(field, &mut out, dt)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntegrationOutcome {
    pub solved: bool,
    pub steps: u64,
    pub fn_evals: u64,
}

/// Steps and clamps until `solved` holds or the budget runs out. The
/// predicate is tested on the initial state, every `check_interval` steps
/// and after the final step. A non-finite derivative aborts with the step
/// index at which it occurred.
pub fn integrate<F, C, S>(
    field: &mut F,
    clamp: &mut C,
    solved: &mut S,
    x: &mut [f64],
    tableau: &ButcherTableau,
    budget: StepBudget,
    check_interval: u64,
) -> Result<IntegrationOutcome, IntegrationError>
where
    F: FnMut(&[f64], &mut [f64]),
    C: FnMut(&mut [f64]),
    S: FnMut(&[f64]) -> bool,
{
    let q = tableau.stages() as u64;
    let interval = check_interval.max(1);
    if solved(x) {
        return Ok(IntegrationOutcome {
            solved: true,
            steps: 0,
            fn_evals: 0,
        });
    }
    let mut stepper = Stepper::new(tableau.clone(), x.len());
    for n in 1..=budget.max_steps {
        stepper.step(field, x, budget.dt)?;
        clamp(x);
        if (n % interval == 0 || n == budget.max_steps) && solved(x) {
            return Ok(IntegrationOutcome {
                solved: true,
                steps: n,
                fn_evals: n * q,
            });
        }
    }
    Ok(IntegrationOutcome {
        solved: false,
        steps: budget.max_steps,
        fn_evals: budget.max_steps * q,
    })
}
