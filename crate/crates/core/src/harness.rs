//! Solution trials and the three experiment protocols built on them:
//! plateau curves, basin-of-attraction sweeps over the time step, and
//! safety-factor scalability runs.
//!
//! Trial `(i, r)` (instance `i`, replica `r`) draws its initial voltages
//! from `trial_seed(base, i, r)`, so every table is a pure function of the
//! instances, the configuration and the base seed. Jobs run on a rayon
//! pool and are collected in `(i, r)` order.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dmm::{DmmParams, DmmSystem, StageBounds};
use crate::fitting::PowerLawFit;
use crate::instances::{generate_cdc, Assignment, CdcParams, Formula, InstanceError};
use crate::integrators::{integrate, IntegrationError, Method, StepBudget};
use crate::seeds::{instance_seed, stream_seed, trial_seed};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Integration(#[from] IntegrationError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub formula: Formula,
    pub method: Method,
    pub dt: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub dmm_params: DmmParams,
    #[serde(default)]
    pub stage_bounds: StageBounds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub solved: bool,
    /// The state became non-finite; counted as unsolved.
    pub diverged: bool,
    /// Steps taken: the solving step, the budget, or the diverging step.
    pub steps: u64,
    pub fn_evals: u64,
    /// Seconds; not part of any reproducible table.
    pub wall_time: f64,
}

/// Uniform(-1, 1) voltages for `n` variables from `seed`.
pub fn initial_voltages(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn run_trial(cfg: &TrialConfig) -> Result<TrialResult, HarnessError> {
    let system = DmmSystem::new(&cfg.formula, cfg.dmm_params).with_stage_bounds(cfg.stage_bounds);
    run_trial_on(&system, cfg.method, cfg.dt, cfg.max_steps, cfg.seed)
}

/// Runs one trial on a prebuilt system. Solvedness is checked after every
/// step so `steps` is exact.
pub fn run_trial_on(
    system: &DmmSystem,
    method: Method,
    dt: f64,
    max_steps: u64,
    seed: u64,
) -> Result<TrialResult, HarnessError> {
    let budget = StepBudget::new(dt, max_steps)?;
    let start = Instant::now();
    let mut x = system
        .initial_state(initial_voltages(system.n_vars(), seed))
        .into_flat();
    let tableau = method.tableau();
    // Euler's only stage is the clamped state itself, so projection is a no-op.
    let raw = method == Method::Euler || system.stage_bounds() == StageBounds::Raw;
    let mut scratch = Vec::with_capacity(x.len());
    let outcome = integrate(
        &mut |x: &[f64], out: &mut [f64]| {
            if raw {
                system.flow_into(x, out)
            } else {
                system.stage_flow_into(x, out, &mut scratch)
            }
        },
        &mut |x: &mut [f64]| system.clamp_in_place(x),
        &mut |x: &[f64]| system.is_solved_flat(x),
        &mut x,
        &tableau,
        budget,
        1,
    );
    let wall_time = start.elapsed().as_secs_f64();
    let q = method.stages() as u64;
    match outcome {
        Ok(o) => Ok(TrialResult {
            solved: o.solved,
            diverged: false,
            steps: o.steps,
            fn_evals: o.fn_evals,
            wall_time,
        }),
        Err(IntegrationError::NonFinite { step, .. }) => Ok(TrialResult {
            solved: false,
            diverged: true,
            steps: step,
            fn_evals: step * q,
            wall_time,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Worker pool of fixed width. Results never depend on the width.
pub struct Runner {
    pool: rayon::ThreadPool,
}

impl Runner {
    /// `threads = None` uses the available parallelism.
    pub fn new(threads: Option<usize>) -> Result<Self, HarnessError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(t) = threads {
            if t == 0 {
                return Err(HarnessError::Config("--threads must be positive".into()));
            }
            b = b.num_threads(t);
        }
        let pool = b.build().map_err(|e| HarnessError::Pool(e.to_string()))?;
        Ok(Runner { pool })
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }

    /// Runs `f` inside the pool, so nested rayon work uses its width.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    /// All `replicas` trials on every system, as `out[i][r]`.
    pub fn run_ensemble(
        &self,
        systems: &[DmmSystem],
        replicas: usize,
        method: Method,
        dt: f64,
        max_steps: u64,
        base_seed: u64,
    ) -> Result<Vec<Vec<TrialResult>>, HarnessError> {
        StepBudget::new(dt, max_steps)?;
        let jobs: Vec<(usize, usize)> = (0..systems.len())
            .flat_map(|i| (0..replicas).map(move |r| (i, r)))
            .collect();
        let flat: Vec<TrialResult> = self.pool.install(|| {
            jobs.par_iter()
                .map(|&(i, r)| {
                    let seed = trial_seed(base_seed, i as u64, r as u64);
                    run_trial_on(&systems[i], method, dt, max_steps, seed)
                })
                .collect::<Result<_, _>>()
        })?;
        Ok(flat.chunks(replicas.max(1)).map(<[_]>::to_vec).collect())
    }
}

/// `count` CDC instances of size `n` with seeds `instance_seed(base, n, k)`.
pub fn generate_instances(
    n: usize,
    ratio: f64,
    p0: f64,
    count: usize,
    base_seed: u64,
) -> Result<Vec<(Formula, Assignment)>, HarnessError> {
    (0..count)
        .map(|k| {
            let params = CdcParams::new(n, ratio, p0, instance_seed(base_seed, n as u64, k as u64));
            Ok(generate_cdc(&params)?)
        })
        .collect()
}

pub fn build_systems(formulas: &[Formula]) -> Vec<DmmSystem> {
    build_systems_with(formulas, StageBounds::default())
}

pub fn build_systems_with(formulas: &[Formula], stage_bounds: StageBounds) -> Vec<DmmSystem> {
    formulas
        .iter()
        .map(|f| DmmSystem::new(f, DmmParams::for_formula(f)).with_stage_bounds(stage_bounds))
        .collect()
}

/// Step budget for size `n`: 10^5 up to N = 1000, growing as N^0.6 beyond.
pub fn default_budget(n: usize) -> u64 {
    let n = n as f64;
    if n <= 1e3 {
        100_000
    } else {
        (1e5 * (n / 1e3).powf(0.6)).round() as u64
    }
}

/// True when no trial solved in the last 20% of the budget, i.e. the
/// unsolved count was already flat there.
pub fn plateau_reached(results: &[TrialResult], max_steps: u64) -> bool {
    let cut = max_steps - max_steps / 5;
    !results.iter().any(|r| r.solved && r.steps > cut)
}

/// Unsolved trials against step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauCurve {
    pub steps: Vec<u64>,
    pub unsolved: Vec<u64>,
    /// `per_instance[i][g]`: unsolved replicas of instance `i` at grid point `g`.
    pub per_instance: Vec<Vec<u64>>,
    /// One standard deviation of the total under instance resampling:
    /// sqrt(I) times the sample deviation of the per-instance counts.
    pub band: Vec<f64>,
}

fn unsolved_at(results: &[TrialResult], s: u64) -> u64 {
    results.iter().filter(|r| !(r.solved && r.steps <= s)).count() as u64
}

/// Builds a plateau curve from finished trials (`results[i][r]`).
pub fn plateau_from_results(results: &[Vec<TrialResult>], grid: &[u64]) -> PlateauCurve {
    let per_instance: Vec<Vec<u64>> = results
        .iter()
        .map(|rs| grid.iter().map(|&s| unsolved_at(rs, s)).collect())
        .collect();
    let k = per_instance.len();
    let unsolved = (0..grid.len())
        .map(|g| per_instance.iter().map(|c| c[g]).sum())
        .collect();
    let band = (0..grid.len())
        .map(|g| {
            if k < 2 {
                return 0.0;
            }
            let xs: Vec<f64> = per_instance.iter().map(|c| c[g] as f64).collect();
            let mean = xs.iter().sum::<f64>() / k as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (k as f64 * var).sqrt()
        })
        .collect();
    PlateauCurve {
        steps: grid.to_vec(),
        unsolved,
        per_instance,
        band,
    }
}

/// Runs every trial to `grid.last()` steps and counts survivors at each
/// grid point.
pub fn plateau_curve(
    runner: &Runner,
    systems: &[DmmSystem],
    method: Method,
    dt: f64,
    replicas: usize,
    grid: &[u64],
    base_seed: u64,
) -> Result<PlateauCurve, HarnessError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(HarnessError::Config("step grid must be non-empty and increasing".into()));
    }
    let max_steps = *grid.last().unwrap();
    let results = runner.run_ensemble(systems, replicas, method, dt, max_steps, base_seed)?;
    Ok(plateau_from_results(&results, grid))
}

/// One time step of a basin-of-attraction sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_vars: usize,
    pub ratio: f64,
    pub method: Method,
    pub dt: f64,
    pub trials: u64,
    pub solved: u64,
    /// Solved fraction, the estimate of the basin ratio A.
    pub a: f64,
    /// Binomial standard error sqrt(A (1 - A) / trials).
    pub stderr_a: f64,
    pub diverged: u64,
    pub max_steps: u64,
    pub plateau: bool,
}

impl SweepRow {
    pub fn from_results(
        n_vars: usize,
        ratio: f64,
        method: Method,
        dt: f64,
        max_steps: u64,
        results: &[TrialResult],
    ) -> Self {
        let trials = results.len() as u64;
        let solved = results.iter().filter(|r| r.solved).count() as u64;
        let a = if trials == 0 { 0.0 } else { solved as f64 / trials as f64 };
        SweepRow {
            n_vars,
            ratio,
            method,
            dt,
            trials,
            solved,
            a,
            stderr_a: if trials == 0 { 0.0 } else { (a * (1.0 - a) / trials as f64).sqrt() },
            diverged: results.iter().filter(|r| r.diverged).count() as u64,
            max_steps,
            plateau: plateau_reached(results, max_steps),
        }
    }
}

/// A fixed ensemble for sweeping the time step.
pub struct SweepSpec<'a> {
    pub n_vars: usize,
    pub ratio: f64,
    pub method: Method,
    pub systems: &'a [DmmSystem],
    pub replicas: usize,
    pub max_steps: u64,
    pub seed: u64,
}

impl SweepSpec<'_> {
    fn row(&self, runner: &Runner, dt: f64) -> Result<SweepRow, HarnessError> {
        let results = runner.run_ensemble(
            self.systems,
            self.replicas,
            self.method,
            dt,
            self.max_steps,
            self.seed,
        )?;
        let flat: Vec<TrialResult> = results.into_iter().flatten().collect();
        Ok(SweepRow::from_results(
            self.n_vars,
            self.ratio,
            self.method,
            dt,
            self.max_steps,
            &flat,
        ))
    }
}

/// One row per time step in `grid`, sorted by time step. Every row reuses
/// the same trial seeds.
pub fn sweep_dt(runner: &Runner, spec: &SweepSpec, grid: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if grid.iter().any(|&dt| !(dt > 0.0 && dt.is_finite())) {
        return Err(HarnessError::Config("time steps must be positive".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    sorted.iter().map(|&dt| spec.row(runner, dt)).collect()
}

/// Geometric grid point `k`: `anchor * 10^(k / per_decade)`.
pub fn grid_point(anchor: f64, per_decade: u32, k: i32) -> f64 {
    anchor * 10f64.powf(k as f64 / per_decade as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveSweep {
    pub rows: Vec<SweepRow>,
    /// Both A > 0.95 and A < 0.05 were observed.
    pub bracketed: bool,
}

/// Sweeps a geometric grid through `anchor`, extending downwards until some
/// A > `hi` and upwards until some A < `lo`, or until `max_points`.
pub fn adaptive_sweep(
    runner: &Runner,
    spec: &SweepSpec,
    anchor: f64,
    per_decade: u32,
    max_points: usize,
) -> Result<AdaptiveSweep, HarnessError> {
    const HI: f64 = 0.95;
    const LO: f64 = 0.05;
    if !(anchor > 0.0) || per_decade == 0 {
        return Err(HarnessError::Config("anchor and grid density must be positive".into()));
    }
    let mut rows = vec![spec.row(runner, anchor)?];
    let (mut down, mut up) = (0i32, 0i32);
    loop {
        let have_hi = rows.iter().any(|r| r.a > HI);
        let have_lo = rows.iter().any(|r| r.a < LO);
        if (have_hi && have_lo) || rows.len() >= max_points {
            break;
        }
        // Extend past the lowest A seen towards the missing shoulder.
        let k = if !have_hi {
            down -= 1;
            down
        } else {
            up += 1;
            up
        };
        rows.push(spec.row(runner, grid_point(anchor, per_decade, k))?);
    }
    rows.sort_by(|a, b| a.dt.total_cmp(&b.dt));
    let bracketed = rows.iter().any(|r| r.a > HI) && rows.iter().any(|r| r.a < LO);
    Ok(AdaptiveSweep { rows, bracketed })
}

/// The `q`-quantile of the solving step: the ceil(q T)-th smallest solving
/// step among all T trials. `None` when fewer trials solved.
pub fn step_percentile(results: &[TrialResult], q: f64) -> Option<u64> {
    let mut steps: Vec<u64> = results.iter().filter(|r| r.solved).map(|r| r.steps).collect();
    steps.sort_unstable();
    let k = (q * results.len() as f64).ceil().max(1.0) as usize;
    steps.get(k - 1).copied()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileStat {
    pub q: f64,
    pub steps: Option<u64>,
    pub fn_evals: Option<u64>,
    /// Bootstrap standard deviation of `steps`.
    pub steps_stderr: Option<f64>,
    pub fn_evals_stderr: Option<f64>,
}

/// Percentile with bootstrap error bars over trials.
pub fn percentile_with_bootstrap(
    results: &[TrialResult],
    q: f64,
    stages: usize,
    resamples: usize,
    seed: u64,
) -> PercentileStat {
    let steps = step_percentile(results, q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = results.len();
    let mut draws = Vec::with_capacity(resamples);
    let mut buf = Vec::with_capacity(n);
    for _ in 0..resamples {
        buf.clear();
        buf.extend((0..n).map(|_| results[rng.gen_range(0..n)]));
        if let Some(s) = step_percentile(&buf, q) {
            draws.push(s as f64);
        }
    }
    let steps_stderr = (steps.is_some() && draws.len() >= 2).then(|| {
        let m = draws.iter().sum::<f64>() / draws.len() as f64;
        (draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64).sqrt()
    });
    PercentileStat {
        q,
        steps,
        fn_evals: steps.map(|s| s * stages as u64),
        steps_stderr,
        fn_evals_stderr: steps_stderr.map(|s| s * stages as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub n_vars: usize,
    pub ratio: f64,
    pub method: Method,
    pub dt: f64,
    pub trials: u64,
    pub solved: u64,
    pub percentiles: Vec<PercentileStat>,
    /// Some requested percentile is undefined.
    pub flagged: bool,
}

/// Ensemble of one size for a scalability run.
pub struct ScaleSize<'a> {
    pub n_vars: usize,
    pub systems: &'a [DmmSystem],
}

pub struct ScaleSpec<'a> {
    pub sizes: Vec<ScaleSize<'a>>,
    pub ratio: f64,
    pub method: Method,
    /// Power-law fit of the A = 0.95 time step against N.
    pub dt95: PowerLawFit,
    pub safety: f64,
    pub replicas: usize,
    pub max_steps: u64,
    pub percentiles: Vec<f64>,
    pub resamples: usize,
    pub seed: u64,
}

/// Runs each size at `safety * dt95(N)` and reports solving-step
/// percentiles with bootstrap errors.
pub fn scalability(runner: &Runner, spec: &ScaleSpec) -> Result<Vec<ScaleRow>, HarnessError> {
    if spec.resamples < 1000 {
        return Err(HarnessError::Config("bootstrap needs at least 1000 resamples".into()));
    }
    if spec.percentiles.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
        return Err(HarnessError::Config("percentiles must lie in (0, 1]".into()));
    }
    spec.sizes
        .iter()
        .map(|size| {
            let dt = spec.safety * spec.dt95.eval(size.n_vars as f64);
            let results: Vec<TrialResult> = runner
                .run_ensemble(size.systems, spec.replicas, spec.method, dt, spec.max_steps, spec.seed)?
                .into_iter()
                .flatten()
                .collect();
            let percentiles: Vec<PercentileStat> = spec
                .percentiles
                .iter()
                .map(|&q| {
                    let tag = format!("bootstrap/{}/{}/{q}", size.n_vars, spec.method);
                    percentile_with_bootstrap(
                        &results,
                        q,
                        spec.method.stages(),
                        spec.resamples,
                        stream_seed(spec.seed, &tag),
                    )
                })
                .collect();
            Ok(ScaleRow {
                n_vars: size.n_vars,
                ratio: spec.ratio,
                method: spec.method,
                dt,
                trials: results.len() as u64,
                solved: results.iter().filter(|r| r.solved).count() as u64,
                flagged: percentiles.iter().any(|p| p.steps.is_none()),
                percentiles,
            })
        })
        .collect()
}

/// CSV rendering of a float: shortest round-trip form, with an exponent
/// outside [1e-4, 1e15) so tiny ratios stay readable.
pub fn fmt_num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&a) {
        x.to_string()
    } else {
        format!("{x:e}")
    }
}

pub const SWEEP_HEADER: &str =
    "n_vars,ratio,method,dt,trials,solved,A,stderr_A,diverged,max_steps,plateau";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.n_vars,
            fmt_num(r.ratio),
            r.method,
            fmt_num(r.dt),
            r.trials,
            r.solved,
            fmt_num(r.a),
            fmt_num(r.stderr_a),
            r.diverged,
            r.max_steps,
            r.plateau
        );
    }
    out
}

pub fn parse_sweep_csv(text: &str) -> Result<Vec<SweepRow>, HarnessError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == SWEEP_HEADER => {}
        _ => {
            return Err(HarnessError::Csv {
                line: 1,
                reason: format!("expected header `{SWEEP_HEADER}`"),
            })
        }
    }
    lines
        .map(|(i, l)| {
            let line = i + 1;
            let bad = |reason: String| HarnessError::Csv { line, reason };
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 11 {
                return Err(bad(format!("expected 11 fields, got {}", f.len())));
            }
            fn num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, HarnessError> {
                s.parse().map_err(|_| HarnessError::Csv {
                    line,
                    reason: format!("bad value `{s}`"),
                })
            }
            Ok(SweepRow {
                n_vars: num(f[0], line)?,
                ratio: num(f[1], line)?,
                method: f[2].parse().map_err(bad)?,
                dt: num(f[3], line)?,
                trials: num(f[4], line)?,
                solved: num(f[5], line)?,
                a: num(f[6], line)?,
                stderr_a: num(f[7], line)?,
                diverged: num(f[8], line)?,
                max_steps: num(f[9], line)?,
                plateau: num(f[10], line)?,
            })
        })
        .collect()
}

pub fn plateau_csv(curve: &PlateauCurve) -> String {
    let mut out = String::from("steps,unsolved,band");
    for i in 0..curve.per_instance.len() {
        let _ = write!(out, ",instance_{i}");
    }
    out.push('\n');
    for (g, s) in curve.steps.iter().enumerate() {
        let _ = write!(out, "{},{},{}", s, curve.unsolved[g], fmt_num(curve.band[g]));
        for c in &curve.per_instance {
            let _ = write!(out, ",{}", c[g]);
        }
        out.push('\n');
    }
    out
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn opt_num(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

/// Percentile columns are named by the percent value, e.g. `steps_p50`.
pub fn scale_csv(rows: &[ScaleRow]) -> String {
    let mut out = String::from("n_vars,ratio,method,dt,trials,solved");
    if let Some(first) = rows.first() {
        for p in &first.percentiles {
            let pc = fmt_num(p.q * 100.0);
            let _ = write!(
                out,
                ",steps_p{pc},steps_stderr_p{pc},fn_evals_p{pc},fn_evals_stderr_p{pc}"
            );
        }
    }
    out.push_str(",flagged\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.n_vars,
            fmt_num(r.ratio),
            r.method,
            fmt_num(r.dt),
            r.trials,
            r.solved
        );
        for p in &r.percentiles {
            let _ = write!(
                out,
                ",{},{},{},{}",
                opt(p.steps),
                opt_num(p.steps_stderr),
                opt(p.fn_evals),
                opt_num(p.fn_evals_stderr)
            );
        }
        let _ = writeln!(out, ",{}", r.flagged);
    }
    out
}
