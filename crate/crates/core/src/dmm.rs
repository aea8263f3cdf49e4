//! The memcomputing dynamical system for 3-SAT.
//!
//! Each variable carries a voltage `v_i` in [-1, 1]; each clause carries a
//! short-term memory `x_s` in [0, 1] and a long-term memory `x_l` in
//! [1, xl_max]. The state is stored flat as `[v | x_s | x_l]` so that the
//! generic Runge-Kutta stepper can operate on it directly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instances::{Assignment, Formula};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DmmError {
    #[error("{component}[{index}] = {value} is outside [{lo}, {hi}]")]
    OutOfBounds {
        component: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("state has shape ({n}, {m}), formula has ({expected_n}, {expected_m})")]
    Shape {
        n: usize,
        m: usize,
        expected_n: usize,
        expected_m: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DmmParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub zeta: f64,
    pub xl_max: f64,
}

impl DmmParams {
    /// Default rates with the long-term cap set to 10^4 per clause.
    pub fn for_clauses(n_clauses: usize) -> Self {
        DmmParams {
            alpha: 5.0,
            beta: 20.0,
            gamma: 0.25,
            delta: 0.05,
            epsilon: 1e-3,
            zeta: 0.1,
            xl_max: 1e4 * n_clauses.max(1) as f64,
        }
    }

    pub fn for_formula(f: &Formula) -> Self {
        Self::for_clauses(f.n_clauses())
    }
}

/// Voltages and memories, stored as one contiguous vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmmState {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl DmmState {
    pub fn new(v: &[f64], x_s: &[f64], x_l: &[f64]) -> Self {
        assert_eq!(x_s.len(), x_l.len(), "memory vectors differ in length");
        let mut data = Vec::with_capacity(v.len() + 2 * x_s.len());
        data.extend_from_slice(v);
        data.extend_from_slice(x_s);
        data.extend_from_slice(x_l);
        DmmState {
            n: v.len(),
            m: x_s.len(),
            data,
        }
    }

    /// Wraps a flat `[v | x_s | x_l]` vector.
    pub fn from_flat(n: usize, m: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n + 2 * m);
        DmmState { n, m, data }
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn n_clauses(&self) -> usize {
        self.m
    }

    pub fn v(&self) -> &[f64] {
        &self.data[..self.n]
    }

    pub fn x_s(&self) -> &[f64] {
        &self.data[self.n..self.n + self.m]
    }

    pub fn x_l(&self) -> &[f64] {
        &self.data[self.n + self.m..]
    }

    pub fn v_mut(&mut self) -> &mut [f64] {
        &mut self.data[..self.n]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn check_bounds(&self, params: &DmmParams) -> Result<(), DmmError> {
        let check = |component, xs: &[f64], lo: f64, hi: f64| {
            for (index, &value) in xs.iter().enumerate() {
                if !(lo..=hi).contains(&value) {
                    return Err(DmmError::OutOfBounds {
                        component,
                        index,
                        value,
                        lo,
                        hi,
                    });
                }
            }
            Ok(())
        };
        check("v", self.v(), -1.0, 1.0)?;
        check("x_s", self.x_s(), 0.0, 1.0)?;
        check("x_l", self.x_l(), 1.0, params.xl_max)
    }
}

/// Time derivative of a [`DmmState`], same flat layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivative {
    n: usize,
    m: usize,
    data: Vec<f64>,
}

impl Derivative {
    pub fn dv(&self) -> &[f64] {
        &self.data[..self.n]
    }

    pub fn dx_s(&self) -> &[f64] {
        &self.data[self.n..self.n + self.m]
    }

    pub fn dx_l(&self) -> &[f64] {
        &self.data[self.n + self.m..]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// What the integrator's field sees at Runge-Kutta stage states, which can
/// leave the box even though every completed step is clamped back into it.
///
/// `Project` evaluates the flow at the projection of the stage state, so the
/// stepper integrates `F(P(x))`; this coincides with `F` inside the box and
/// keeps the flow's in-bounds precondition. `Raw` evaluates `F` at the stage
/// state as is. For forward Euler the two are identical.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageBounds {
    #[default]
    Project,
    Raw,
}

/// A formula compiled for repeated flow evaluation: per-clause variable
/// slots and literal signs laid out contiguously.
#[derive(Debug, Clone)]
pub struct DmmSystem {
    n: usize,
    vars: Vec<[u32; 3]>,
    signs: Vec<[f64; 3]>,
    params: DmmParams,
    stage_bounds: StageBounds,
}

/// Per-clause quantities shared by the flow and the public term accessors.
#[derive(Debug, Clone, Copy)]
struct ClauseTerms {
    /// 1 - q_i v_i for each slot.
    t: [f64; 3],
    /// Slot attaining the minimum, lowest index on ties.
    argmin: usize,
}

impl ClauseTerms {
    #[inline(always)]
    fn new(v: [f64; 3], q: [f64; 3]) -> Self {
        let t = [1.0 - q[0] * v[0], 1.0 - q[1] * v[1], 1.0 - q[2] * v[2]];
        let argmin = if t[0] <= t[1] && t[0] <= t[2] {
            0
        } else if t[1] <= t[2] {
            1
        } else {
            2
        };
        ClauseTerms { t, argmin }
    }

    #[inline(always)]
    fn clause_value(&self) -> f64 {
        0.5 * self.t[self.argmin]
    }

    #[inline(always)]
    fn gradient(&self, slot: usize, q: f64) -> f64 {
        let (j, k) = others(slot);
        0.5 * q * self.t[j].min(self.t[k])
    }

    #[inline(always)]
    fn rigidity(&self, slot: usize, q: f64, v: f64) -> f64 {
        if slot == self.argmin {
            0.5 * (q - v)
        } else {
            0.0
        }
    }
}

#[inline(always)]
fn others(slot: usize) -> (usize, usize) {
    match slot {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

impl DmmSystem {
    pub fn new(formula: &Formula, params: DmmParams) -> Self {
        DmmSystem {
            n: formula.n_vars,
            vars: formula
                .clauses
                .iter()
                .map(|c| c.literals.map(|l| l.var))
                .collect(),
            signs: formula.clauses.iter().map(|c| c.signs()).collect(),
            params,
            stage_bounds: StageBounds::default(),
        }
    }

    pub fn with_stage_bounds(mut self, stage_bounds: StageBounds) -> Self {
        self.stage_bounds = stage_bounds;
        self
    }

    pub fn stage_bounds(&self) -> StageBounds {
        self.stage_bounds
    }

    /// The field handed to the stepper: the flow, evaluated according to
    /// the stage policy. `scratch` holds the projected stage state.
    pub fn stage_flow_into(&self, x: &[f64], out: &mut [f64], scratch: &mut Vec<f64>) {
        match self.stage_bounds {
            StageBounds::Raw => self.flow_into(x, out),
            StageBounds::Project => {
                scratch.clear();
                scratch.extend_from_slice(x);
                self.clamp_in_place(scratch);
                self.flow_into(scratch, out);
            }
        }
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn n_clauses(&self) -> usize {
        self.vars.len()
    }

    pub fn dim(&self) -> usize {
        self.n + 2 * self.vars.len()
    }

    pub fn params(&self) -> &DmmParams {
        &self.params
    }

    /// Evaluates the flow at a flat state into `out`. No bounds checks:
    /// Runge-Kutta stage states may lie outside the box.
    pub fn flow_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        let m = self.vars.len();
        debug_assert_eq!(x.len(), n + 2 * m);
        debug_assert_eq!(out.len(), n + 2 * m);
        let (v, mem) = x.split_at(n);
        let (xs, xl) = mem.split_at(m);
        let (dv, dmem) = out.split_at_mut(n);
        let (dxs, dxl) = dmem.split_at_mut(m);
        let p = &self.params;

        dv.fill(0.0);
        // Branch-free form of ClauseTerms: the minimising slot is data
        // dependent and mispredicts badly otherwise.
        let clauses = self.vars.iter().zip(&self.signs);
        let mems = xs.iter().zip(xl.iter()).zip(dxs.iter_mut().zip(dxl.iter_mut()));
        for ((idx, q), ((&s, &l), (ds, dl))) in clauses.zip(mems) {
            let [i0, i1, i2] = idx.map(|i| i as usize);
            let (v0, v1, v2) = (v[i0], v[i1], v[i2]);
            let t0 = 1.0 - q[0] * v0;
            let t1 = 1.0 - q[1] * v1;
            let t2 = 1.0 - q[2] * v2;
            let m12 = t1.min(t2);
            let m02 = t0.min(t2);
            let m01 = t0.min(t1);
            let c = 0.5 * t0.min(m12);
            // 0/1 masks selecting the minimising slot, lowest index on ties.
            let first = f64::from(u8::from(t0 <= m12));
            let second = (1.0 - first) * f64::from(u8::from(t1 <= t2));
            let third = 1.0 - first - second;
            let gw = 0.5 * l * s;
            let rw = 0.5 * (1.0 + p.zeta * l) * (1.0 - s);
            let r0 = first * rw * (q[0] - v0);
            let r1 = second * rw * (q[1] - v1);
            let r2 = third * rw * (q[2] - v2);
            dv[i0] += gw * q[0] * m12 + r0;
            dv[i1] += gw * q[1] * m02 + r1;
            dv[i2] += gw * q[2] * m01 + r2;
            *ds = p.beta * (s + p.epsilon) * (c - p.gamma);
            *dl = p.alpha * (c - p.delta);
        }
    }

    /// Projects a flat state onto the bounding box.
    pub fn clamp_in_place(&self, x: &mut [f64]) {
        let n = self.n;
        let m = self.vars.len();
        let (v, mem) = x.split_at_mut(n);
        let (xs, xl) = mem.split_at_mut(m);
        for e in v {
            *e = e.clamp(-1.0, 1.0);
        }
        for e in xs {
            *e = e.clamp(0.0, 1.0);
        }
        let hi = self.params.xl_max;
        for e in xl {
            *e = e.clamp(1.0, hi);
        }
    }

    /// True iff the Boolean reading of the voltages satisfies every clause.
    pub fn is_solved_flat(&self, x: &[f64]) -> bool {
        self.unsatisfied_flat(x) == 0
    }

    /// Clauses violated by the Boolean reading of the voltages. Scans every
    /// clause without early exit, which is faster than short-circuiting on
    /// the near-solved states where it matters.
    pub fn unsatisfied_flat(&self, x: &[f64]) -> usize {
        let v = &x[..self.n];
        self.vars
            .iter()
            .zip(&self.signs)
            .map(|(idx, q)| {
                let lit = |s: usize| (v[idx[s] as usize] > 0.0) == (q[s] > 0.0);
                usize::from(!(lit(0) | lit(1) | lit(2)))
            })
            .sum()
    }

    /// The neutral starting state for given voltages: x_s = 0.5, x_l = 1.
    pub fn initial_state(&self, v: Vec<f64>) -> DmmState {
        assert_eq!(v.len(), self.n);
        let m = self.vars.len();
        let mut data = v;
        data.resize(self.n + m, 0.5);
        data.resize(self.n + 2 * m, 1.0);
        DmmState::from_flat(self.n, m, data)
    }
}

fn check_shape(state: &DmmState, f: &Formula) -> Result<(), DmmError> {
    if state.n != f.n_vars || state.m != f.n_clauses() {
        return Err(DmmError::Shape {
            n: state.n,
            m: state.m,
            expected_n: f.n_vars,
            expected_m: f.n_clauses(),
        });
    }
    Ok(())
}

fn clause_terms(state: &DmmState, f: &Formula, m: usize) -> (ClauseTerms, [f64; 3], [f64; 3]) {
    let c = &f.clauses[m];
    let v = c.literals.map(|l| state.v()[l.var as usize]);
    let q = c.signs();
    (ClauseTerms::new(v, q), q, v)
}

/// C_m = 1/2 min_i (1 - q_i v_i). Below 1/2 exactly when clause `m` is
/// satisfied by the sign reading of the voltages.
pub fn clause_value(state: &DmmState, f: &Formula, m: usize) -> f64 {
    clause_terms(state, f, m).0.clause_value()
}

pub fn gradient_term(state: &DmmState, f: &Formula, m: usize, slot: usize) -> f64 {
    let (terms, q, _) = clause_terms(state, f, m);
    terms.gradient(slot, q[slot])
}

/// 1/2 (q_i - v_i) for the slot attaining the clause minimum (lowest slot on
/// ties), zero for the others.
pub fn rigidity_term(state: &DmmState, f: &Formula, m: usize, slot: usize) -> f64 {
    let (terms, q, v) = clause_terms(state, f, m);
    terms.rigidity(slot, q[slot], v[slot])
}

/// Flow field at an in-bounds state.
pub fn flow(state: &DmmState, f: &Formula, params: &DmmParams) -> Result<Derivative, DmmError> {
    check_shape(state, f)?;
    state.check_bounds(params)?;
    let sys = DmmSystem::new(f, *params);
    let mut data = vec![0.0; state.data.len()];
    sys.flow_into(&state.data, &mut data);
    Ok(Derivative {
        n: state.n,
        m: state.m,
        data,
    })
}

pub fn clamp(state: &DmmState, params: &DmmParams) -> DmmState {
    let mut out = state.clone();
    let (v, mem) = out.data.split_at_mut(state.n);
    let (xs, xl) = mem.split_at_mut(state.m);
    v.iter_mut().for_each(|e| *e = e.clamp(-1.0, 1.0));
    xs.iter_mut().for_each(|e| *e = e.clamp(0.0, 1.0));
    xl.iter_mut().for_each(|e| *e = e.clamp(1.0, params.xl_max));
    out
}

/// y_i = 1 iff v_i > 0.
pub fn assignment_from_voltages(state: &DmmState) -> Assignment {
    Assignment::new(state.v().iter().map(|&v| v > 0.0).collect())
}

pub fn is_solved(state: &DmmState, f: &Formula) -> bool {
    let a = assignment_from_voltages(state);
    crate::instances::count_unsatisfied(f, &a.values) == 0
}
