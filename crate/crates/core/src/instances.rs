//! 3-SAT formulas, DIMACS CNF input/output and clause-distribution-control
//! (CDC) instances with a planted solution.
//!
//! Variables are 0-based in memory and 1-based in DIMACS text.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InstanceError {
    #[error("line {line}: malformed header: {reason}")]
    Header { line: usize, reason: String },
    #[error("line {line}: clause has {arity} literals, expected 3")]
    Arity { line: usize, arity: usize },
    #[error("line {line}: variable {var} repeated in clause")]
    RepeatedVariable { line: usize, var: u32 },
    #[error("line {line}: variable {var} out of range 1..={n_vars}")]
    VariableOutOfRange { line: usize, var: i64, n_vars: usize },
    #[error("line {line}: invalid literal token {token:?}")]
    Token { line: usize, token: String },
    #[error("header declares {declared} clauses but {found} were read")]
    ClauseCount { declared: usize, found: usize },
    #[error("missing \"p cnf\" header")]
    MissingHeader,
    #[error("assignment has length {got}, formula has {expected} variables")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid CDC parameters: {0}")]
    CdcParams(String),
    #[error("line {line}: invalid assignment value {token:?}")]
    AssignmentToken { line: usize, token: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Literal {
    pub var: u32,
    pub negated: bool,
}

impl Literal {
    pub fn new(var: u32, negated: bool) -> Self {
        Literal { var, negated }
    }

    /// The sign q: +1 for a plain literal, -1 for a negated one.
    #[inline]
    pub fn sign(self) -> f64 {
        if self.negated {
            -1.0
        } else {
            1.0
        }
    }

    #[inline]
    pub fn is_true(self, assignment: &[bool]) -> bool {
        assignment[self.var as usize] != self.negated
    }

    fn to_dimacs(self) -> i64 {
        let v = self.var as i64 + 1;
        if self.negated {
            -v
        } else {
            v
        }
    }
}

/// A 3-literal disjunction over pairwise distinct variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Clause {
    pub literals: [Literal; 3],
}

impl Clause {
    /// Builds a clause, rejecting repeated variables.
    pub fn new(literals: [Literal; 3]) -> Option<Self> {
        let [a, b, c] = literals;
        if a.var == b.var || a.var == c.var || b.var == c.var {
            return None;
        }
        Some(Clause { literals })
    }

    pub fn signs(&self) -> [f64; 3] {
        self.literals.map(Literal::sign)
    }

    pub fn is_satisfied(&self, assignment: &[bool]) -> bool {
        self.literals.iter().any(|l| l.is_true(assignment))
    }

    /// Number of literals evaluating to false under `assignment`.
    pub fn false_literals(&self, assignment: &[bool]) -> usize {
        self.literals.iter().filter(|l| !l.is_true(assignment)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Formula {
    pub n_vars: usize,
    pub clauses: Vec<Clause>,
}

impl Formula {
    pub fn new(n_vars: usize, clauses: Vec<Clause>) -> Self {
        debug_assert!(clauses
            .iter()
            .all(|c| c.literals.iter().all(|l| (l.var as usize) < n_vars)));
        Formula { n_vars, clauses }
    }

    pub fn n_clauses(&self) -> usize {
        self.clauses.len()
    }

    /// Number of clause slots in which each variable occurs.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_vars];
        for c in &self.clauses {
            for l in &c.literals {
                deg[l.var as usize] += 1;
            }
        }
        deg
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub values: Vec<bool>,
}

impl Assignment {
    pub fn new(values: Vec<bool>) -> Self {
        Assignment { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Sidecar format: N space-separated 0/1 values on one line.
    pub fn to_sidecar(&self) -> String {
        let mut s = String::with_capacity(2 * self.values.len() + 1);
        for (i, &b) in self.values.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push(if b { '1' } else { '0' });
        }
        s.push('\n');
        s
    }

    pub fn from_sidecar(text: &str) -> Result<Self, InstanceError> {
        let mut values = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            for tok in line.split_whitespace() {
                match tok {
                    "0" => values.push(false),
                    "1" => values.push(true),
                    _ => {
                        return Err(InstanceError::AssignmentToken {
                            line: ln + 1,
                            token: tok.to_string(),
                        })
                    }
                }
            }
        }
        Ok(Assignment { values })
    }
}

/// Counts clauses of `f` left unsatisfied by `a`.
pub fn evaluate(f: &Formula, a: &Assignment) -> Result<usize, InstanceError> {
    if a.len() != f.n_vars {
        return Err(InstanceError::LengthMismatch {
            expected: f.n_vars,
            got: a.len(),
        });
    }
    Ok(count_unsatisfied(f, &a.values))
}

#[inline]
pub(crate) fn count_unsatisfied(f: &Formula, values: &[bool]) -> usize {
    f.clauses.iter().filter(|c| !c.is_satisfied(values)).count()
}

pub fn parse_dimacs(text: &str) -> Result<Formula, InstanceError> {
    let mut header: Option<(usize, usize)> = None;
    let mut clauses = Vec::new();
    let mut pending: Vec<(i64, usize)> = Vec::with_capacity(3);

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('c') {
            continue;
        }
        // SATLIB files end with a "%" line followed by a stray 0.
        if line.starts_with('%') {
            break;
        }
        if line.starts_with('p') {
            if header.is_some() {
                return Err(InstanceError::Header {
                    line: line_no,
                    reason: "duplicate header".into(),
                });
            }
            header = Some(parse_header(line, line_no)?);
            continue;
        }
        let Some((n_vars, _)) = header else {
            return Err(InstanceError::MissingHeader);
        };
        for tok in line.split_whitespace() {
            let lit: i64 = tok.parse().map_err(|_| InstanceError::Token {
                line: line_no,
                token: tok.to_string(),
            })?;
            if lit != 0 {
                if lit.unsigned_abs() as usize > n_vars {
                    return Err(InstanceError::VariableOutOfRange {
                        line: line_no,
                        var: lit,
                        n_vars,
                    });
                }
                pending.push((lit, line_no));
                continue;
            }
            clauses.push(finish_clause(&pending, line_no)?);
            pending.clear();
        }
    }

    let (n_vars, n_clauses) = header.ok_or(InstanceError::MissingHeader)?;
    if !pending.is_empty() {
        // Last clause without terminating 0.
        let line = pending.last().map(|p| p.1).unwrap_or(0);
        clauses.push(finish_clause(&pending, line)?);
    }
    if clauses.len() != n_clauses {
        return Err(InstanceError::ClauseCount {
            declared: n_clauses,
            found: clauses.len(),
        });
    }
    Ok(Formula { n_vars, clauses })
}

fn parse_header(line: &str, line_no: usize) -> Result<(usize, usize), InstanceError> {
    let err = |reason: &str| InstanceError::Header {
        line: line_no,
        reason: reason.to_string(),
    };
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "p" || parts[1] != "cnf" {
        return Err(err("expected \"p cnf <vars> <clauses>\""));
    }
    let n = parts[2].parse().map_err(|_| err("bad variable count"))?;
    let m = parts[3].parse().map_err(|_| err("bad clause count"))?;
    Ok((n, m))
}

fn finish_clause(pending: &[(i64, usize)], line: usize) -> Result<Clause, InstanceError> {
    if pending.len() != 3 {
        return Err(InstanceError::Arity {
            line,
            arity: pending.len(),
        });
    }
    let lits = [0, 1, 2].map(|i| {
        let v = pending[i].0;
        Literal::new((v.unsigned_abs() - 1) as u32, v < 0)
    });
    Clause::new(lits).ok_or_else(|| {
        let [a, b, c] = lits;
        let var = if a.var == b.var || a.var == c.var {
            a.var
        } else {
            b.var
        };
        InstanceError::RepeatedVariable { line, var: var + 1 }
    })
}

pub fn write_dimacs(f: &Formula) -> String {
    let mut out = String::with_capacity(16 * f.clauses.len() + 32);
    let _ = writeln!(out, "p cnf {} {}", f.n_vars, f.clauses.len());
    for c in &f.clauses {
        let [a, b, d] = c.literals.map(Literal::to_dimacs);
        let _ = writeln!(out, "{a} {b} {d} 0");
    }
    out
}

/// Parameters of a CDC planted-solution instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdcParams {
    pub n_vars: usize,
    /// Clauses per variable.
    pub ratio: f64,
    /// Probability of a clause with no false literal under the planted assignment.
    pub p0: f64,
    pub seed: u64,
}

impl CdcParams {
    pub fn new(n_vars: usize, ratio: f64, p0: f64, seed: u64) -> Self {
        CdcParams {
            n_vars,
            ratio,
            p0,
            seed,
        }
    }

    /// Per-pattern probabilities (p1, p2) for sign patterns with one and two
    /// false literals. Fixed by normalisation p0 + 3 p1 + 3 p2 = 1 and
    /// polarity balance p1 + 2 p2 = 1/2.
    pub fn pattern_probs(&self) -> (f64, f64) {
        ((1.0 - 4.0 * self.p0) / 6.0, (1.0 + 2.0 * self.p0) / 6.0)
    }

    pub fn n_clauses(&self) -> usize {
        (self.ratio * self.n_vars as f64).round() as usize
    }

    pub fn validate(&self) -> Result<(), InstanceError> {
        let bad = |m: String| Err(InstanceError::CdcParams(m));
        if self.n_vars < 3 {
            return bad(format!("need at least 3 variables, got {}", self.n_vars));
        }
        if !(self.ratio.is_finite() && self.ratio > 0.0) {
            return bad(format!("ratio must be positive, got {}", self.ratio));
        }
        if !(0.0..0.25).contains(&self.p0) {
            return bad(format!("p0 must lie in [0, 0.25), got {}", self.p0));
        }
        let (p1, p2) = self.pattern_probs();
        if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) {
            return bad(format!("derived p1={p1}, p2={p2} outside [0, 1]"));
        }
        Ok(())
    }
}

/// Draws a CDC instance and its planted assignment. Pure in `params`.
///
/// In the frame where the planted assignment is all-true, each clause gets
/// three distinct uniform variables and a sign pattern with k in {0, 1, 2}
/// negated slots, chosen with probability (p0, 3 p1, 3 p2); the k slots are
/// uniform among the C(3, k) patterns. Signs are then mapped back through
/// the planted values. Duplicate clauses are allowed.
pub fn generate_cdc(params: &CdcParams) -> Result<(Formula, Assignment), InstanceError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = params.n_vars;
    let planted: Vec<bool> = (0..n).map(|_| rng.gen::<bool>()).collect();
    let (p1, _) = params.pattern_probs();
    let cut0 = params.p0;
    let cut1 = params.p0 + 3.0 * p1;

    const ONE_FALSE: [[bool; 3]; 3] = [
        [true, false, false],
        [false, true, false],
        [false, false, true],
    ];
    const TWO_FALSE: [[bool; 3]; 3] = [
        [true, true, false],
        [true, false, true],
        [false, true, true],
    ];

    let m = params.n_clauses();
    let mut clauses = Vec::with_capacity(m);
    for _ in 0..m {
        let vars = index::sample(&mut rng, n, 3);
        let u: f64 = rng.gen();
        let pattern = if u < cut0 {
            [false; 3]
        } else if u < cut1 {
            ONE_FALSE[rng.gen_range(0..3)]
        } else {
            TWO_FALSE[rng.gen_range(0..3)]
        };
        let lits = [0, 1, 2].map(|s| {
            let var = vars.index(s);
            // A literal false under the planted values is negated iff the
            // planted value is true.
            Literal::new(var as u32, pattern[s] == planted[var])
        });
        clauses.push(Clause::new(lits).expect("sampled variables are distinct"));
    }
    Ok((Formula::new(n, clauses), Assignment::new(planted)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(v: i64) -> Literal {
        Literal::new((v.unsigned_abs() - 1) as u32, v < 0)
    }

    #[test]
    fn parses_single_clause() {
        let f = parse_dimacs("p cnf 3 1\n1 -2 3 0").unwrap();
        assert_eq!(f.n_vars, 3);
        assert_eq!(f.clauses, vec![Clause::new([lit(1), lit(-2), lit(3)]).unwrap()]);
        assert_eq!(f.clauses[0].signs(), [1.0, -1.0, 1.0]);
    }

    #[test]
    fn comments_and_split_clauses() {
        let text = "c hello\nc world\np cnf 4 2\n1 -2\n 3 0 -4 2 1 0\n";
        let f = parse_dimacs(text).unwrap();
        assert_eq!(f.clauses.len(), 2);
        assert_eq!(f.clauses[1].literals, [lit(-4), lit(2), lit(1)]);
    }

    #[test]
    fn rejects_repeated_variable() {
        let err = parse_dimacs("p cnf 2 1\n1 -1 2 0").unwrap_err();
        assert_eq!(err, InstanceError::RepeatedVariable { line: 2, var: 1 });
    }

    #[test]
    fn rejects_bad_arity_and_range_and_header() {
        assert!(matches!(
            parse_dimacs("p cnf 3 1\n1 2 0"),
            Err(InstanceError::Arity { line: 2, arity: 2 })
        ));
        assert!(matches!(
            parse_dimacs("p cnf 3 1\n\n1 2 4 0"),
            Err(InstanceError::VariableOutOfRange { line: 3, var: 4, .. })
        ));
        assert!(matches!(
            parse_dimacs("p dnf 3 1\n1 2 3 0"),
            Err(InstanceError::Header { line: 1, .. })
        ));
        assert!(matches!(
            parse_dimacs("1 2 3 0"),
            Err(InstanceError::MissingHeader)
        ));
        assert!(matches!(
            parse_dimacs("p cnf 3 2\n1 2 3 0"),
            Err(InstanceError::ClauseCount { declared: 2, found: 1 })
        ));
        assert!(matches!(
            parse_dimacs("p cnf 3 1\n1 x 3 0"),
            Err(InstanceError::Token { line: 2, .. })
        ));
    }

    #[test]
    fn writes_dimacs() {
        let f = Formula::new(3, vec![Clause::new([lit(1), lit(-2), lit(3)]).unwrap()]);
        let text = write_dimacs(&f);
        assert!(text.contains("p cnf 3 1"));
        assert!(text.lines().any(|l| l == "1 -2 3 0"));

        let empty = Formula::new(7, vec![]);
        assert_eq!(write_dimacs(&empty), "p cnf 7 0\n");
        assert_eq!(parse_dimacs(&write_dimacs(&empty)).unwrap(), empty);
    }

    #[test]
    fn evaluate_counts() {
        let f = Formula::new(3, vec![Clause::new([lit(1), lit(-2), lit(3)]).unwrap()]);
        let a = Assignment::new(vec![true, true, false]);
        assert_eq!(evaluate(&f, &a).unwrap(), 0);
        let all_false = Assignment::new(vec![false, true, false]);
        assert_eq!(evaluate(&f, &all_false).unwrap(), 1);
        assert!(matches!(
            evaluate(&f, &Assignment::new(vec![true])),
            Err(InstanceError::LengthMismatch { expected: 3, got: 1 })
        ));
    }

    #[test]
    fn pattern_probabilities_for_p0_008() {
        let p = CdcParams::new(100, 8.0, 0.08, 1);
        let (p1, p2) = p.pattern_probs();
        // Solving p0 + 3p1 + 3p2 = 1 and p1 + 2p2 = 1/2 by elimination:
        // p2 = 1/2 - p1 ... gives p1 = (1 - 4p0)/6, p2 = (1 + 2p0)/6.
        assert!((p1 - 0.68 / 6.0).abs() < 1e-15);
        assert!((p2 - 1.16 / 6.0).abs() < 1e-15);
        assert!((0.08 + 3.0 * p1 + 3.0 * p2 - 1.0).abs() < 1e-15);
        assert!((p1 + 2.0 * p2 - 0.5).abs() < 1e-15);
        assert!((3.0 * p1 - 0.34).abs() < 1e-12 && (3.0 * p2 - 0.58).abs() < 1e-12);
    }

    #[test]
    fn cdc_rejects_bad_params() {
        for p0 in [-0.1, 0.25, 0.5] {
            assert!(generate_cdc(&CdcParams::new(10, 8.0, p0, 0)).is_err());
        }
        assert!(generate_cdc(&CdcParams::new(2, 8.0, 0.08, 0)).is_err());
        assert!(generate_cdc(&CdcParams::new(10, 0.0, 0.08, 0)).is_err());
    }

    #[test]
    fn cdc_sizes_and_determinism() {
        let p = CdcParams::new(101, 6.0, 0.08, 42);
        let (f, a) = generate_cdc(&p).unwrap();
        assert_eq!(f.n_clauses(), 606);
        assert_eq!(a.len(), 101);
        assert_eq!(evaluate(&f, &a).unwrap(), 0);
        let (g, b) = generate_cdc(&p).unwrap();
        assert_eq!(f, g);
        assert_eq!(a, b);
        let (h, _) = generate_cdc(&CdcParams { seed: 43, ..p }).unwrap();
        assert_ne!(f, h);
    }

    #[test]
    fn sidecar_round_trip() {
        let a = Assignment::new(vec![true, false, false, true]);
        assert_eq!(a.to_sidecar(), "1 0 0 1\n");
        assert_eq!(Assignment::from_sidecar(&a.to_sidecar()).unwrap(), a);
        assert!(Assignment::from_sidecar("1 2").is_err());
    }
}
