//! Command-line front end. Every file written is accompanied by a run
//! manifest from which `memperc rerun` reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dmm::{DmmParams, DmmSystem, StageBounds};
use crate::dp::{
    self, expected_absorbing_closed, expected_absorbing_sum, expected_permeable,
    ratio_near_transition, simulate_cone_lattice, ClosedForm, DpParams, LatticeCounts,
};
use crate::fitting::{
    dt_at_level, fit_dp_ratio, fit_power_law, fit_sigmoid, sigmoid_weight, DpFitOptions,
    PowerLawFit,
};
use crate::harness::{
    self, adaptive_sweep, build_systems_with, default_budget, fmt_num, parse_sweep_csv, plateau_curve,
    run_trial_on, scalability, sweep_dt, Runner, ScaleSize, ScaleSpec, SweepRow, SweepSpec,
};
use crate::instances::{parse_dimacs, write_dimacs, Formula};
use crate::integrators::Method;

#[derive(Debug, Parser)]
#[command(name = "memperc", version, about = "DMM trials on planted 3-SAT and the percolation model of their time-step transition")]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism. Never changes results.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Base seed for instances, initial conditions and bootstrap streams.
    #[arg(long, global = true, env = "MEMPERC_SEED", default_value_t = 1)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate planted CDC instances with assignment sidecars.
    Gen(GenArgs),
    /// Run one trial and print the result as JSON.
    Solve(SolveArgs),
    /// Unsolved trials against step count.
    Plateau(PlateauArgs),
    /// Solved fraction A against the time step.
    Sweep(SweepArgs),
    /// Solving-step percentiles at a safety fraction of the A = 0.95 step.
    Scale(ScaleArgs),
    /// Sigmoid, percolation-ratio and power-law fits of sweep tables.
    Fit(FitArgs),
    /// Percolation formulas and lattice simulation.
    #[command(subcommand)]
    Dp(DpCommand),
    /// Re-run the command recorded in a manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DpCommand {
    /// Permeable ratio from each formula on a grid of p or delta.
    Eval(DpEvalArgs),
    /// Monte-Carlo path counts on the explicit cone lattice.
    Sim(DpSimArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 8.0)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0.08)]
    pub p0: f64,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub cnf: PathBuf,
    #[arg(long, default_value = "euler")]
    pub method: Method,
    #[arg(long)]
    pub dt: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_steps: u64,
    /// Evaluate the flow at unprojected Runge-Kutta stage states.
    #[arg(long)]
    #[serde(default)]
    pub raw_stages: bool,
}

/// Where instances come from: a directory of `.cnf` files, or generated
/// from the base seed exactly as `gen` would.
#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct InstanceArgs {
    #[arg(long, conflicts_with = "n")]
    pub instances: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 8.0)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0.08)]
    pub p0: f64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PlateauArgs {
    #[command(flatten)]
    pub source: InstanceArgs,
    #[arg(long, default_value = "euler")]
    pub method: Method,
    #[arg(long)]
    pub dt: f64,
    /// Initial conditions per instance.
    #[arg(long, default_value_t = 10)]
    pub replicas: usize,
    /// Step counts to report; defaults to a log grid up to --max-steps.
    #[arg(long, value_delimiter = ',')]
    pub grid: Vec<u64>,
    #[arg(long, default_value_t = 10_000)]
    pub max_steps: u64,
    #[arg(long, default_value_t = 40)]
    pub points: usize,
    /// Evaluate the flow at unprojected Runge-Kutta stage states.
    #[arg(long)]
    #[serde(default)]
    pub raw_stages: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub source: InstanceArgs,
    #[arg(long, default_value = "euler")]
    pub method: Method,
    /// Explicit time steps. Without them the grid is extended adaptively.
    #[arg(long, value_delimiter = ',')]
    pub dt: Vec<f64>,
    /// First point of the adaptive grid.
    #[arg(long, default_value_t = 0.3)]
    pub anchor: f64,
    #[arg(long, default_value_t = 12)]
    pub per_decade: u32,
    #[arg(long, default_value_t = 40)]
    pub max_points: usize,
    #[arg(long, default_value_t = 10)]
    pub replicas: usize,
    /// Defaults to 10^5 steps, growing as N^0.6 above N = 1000.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Evaluate the flow at unprojected Runge-Kutta stage states.
    #[arg(long)]
    #[serde(default)]
    pub raw_stages: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ScaleArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 8.0)]
    pub ratio: f64,
    #[arg(long, default_value_t = 0.08)]
    pub p0: f64,
    #[arg(long, default_value = "euler")]
    pub method: Method,
    /// Fit table from `fit`; its dt_95 column is fitted as a power law in N.
    #[arg(long, conflicts_with_all = ["dt95_prefactor", "dt95_exponent"])]
    pub fit: Option<PathBuf>,
    #[arg(long, requires = "dt95_exponent")]
    pub dt95_prefactor: Option<f64>,
    #[arg(long, requires = "dt95_prefactor", allow_hyphen_values = true)]
    pub dt95_exponent: Option<f64>,
    #[arg(long, default_value_t = 0.6)]
    pub safety: f64,
    #[arg(long, default_value_t = 10)]
    pub replicas: usize,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.9])]
    pub percentiles: Vec<f64>,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    /// Evaluate the flow at unprojected Runge-Kutta stage states.
    #[arg(long)]
    #[serde(default)]
    pub raw_stages: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FitArgs {
    /// Sweep tables to fit; rows are grouped by (n_vars, ratio, method).
    #[arg(long, value_delimiter = ',', required = true)]
    pub input: Vec<PathBuf>,
    /// Fixed scale of the ansatz delta = a (1/(N dt) - b).
    #[arg(long, default_value_t = 5.0)]
    pub a: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Optional table of power-law fits of dt_c, dt_95, b and D against N.
    #[arg(long)]
    pub power_law_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DpEvalArgs {
    #[arg(long = "dim", visible_alias = "D", value_delimiter = ',', required = true)]
    pub dims: Vec<f64>,
    #[arg(long, value_delimiter = ',', conflicts_with = "delta")]
    pub p: Vec<f64>,
    /// Offsets from the threshold: p = (e + delta) / D.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta: Vec<f64>,
    /// Linear p grid in units of e/D, used when neither --p nor --delta is given.
    #[arg(long, default_value_t = 0.5)]
    pub p_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub p_max: f64,
    #[arg(long, default_value_t = 31)]
    pub points: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DpSimArgs {
    #[arg(long = "dim", visible_alias = "D")]
    pub dim: usize,
    #[arg(long)]
    pub depth: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    pub p: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this path instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// Subcommand name, e.g. `sweep` or `dp eval`.
    pub command: String,
    pub params: Command,
    pub base_seed: u64,
    /// Informational only; outputs do not depend on it.
    pub threads: usize,
    pub instances: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Manifest path for an output file: `x.csv` -> `x.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    out.with_extension("manifest.json")
}

pub fn instance_file_name(n: usize, ratio: f64, seed: u64, k: usize) -> String {
    format!("cdc_N{n}_r{ratio}_s{seed}_{k}.cnf")
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Solve(_) => "solve",
            Command::Plateau(_) => "plateau",
            Command::Sweep(_) => "sweep",
            Command::Scale(_) => "scale",
            Command::Fit(_) => "fit",
            Command::Dp(DpCommand::Eval(_)) => "dp eval",
            Command::Dp(DpCommand::Sim(_)) => "dp sim",
            Command::Rerun(_) => "rerun",
        }
    }

    fn set_out(&mut self, out: PathBuf) -> Result<()> {
        match self {
            Command::Gen(a) => a.out = out,
            Command::Plateau(a) => a.out = out,
            Command::Sweep(a) => a.out = out,
            Command::Scale(a) => a.out = out,
            Command::Fit(a) => a.out = out,
            Command::Dp(DpCommand::Eval(a)) => a.out = out,
            Command::Dp(DpCommand::Sim(a)) => a.out = out,
            Command::Solve(_) | Command::Rerun(_) => bail!("command has no output file"),
        }
        Ok(())
    }
}

struct Ctx {
    seed: u64,
    threads: Option<usize>,
}

impl Ctx {
    fn runner(&self) -> Result<Runner> {
        Ok(Runner::new(self.threads)?)
    }

    fn write(&self, cmd: &Command, out: &Path, contents: &str, instances: Vec<FileDigest>) -> Result<()> {
        write_file(out, contents)?;
        let outputs = vec![FileDigest {
            name: file_name(out),
            sha256: sha256_hex(contents.as_bytes()),
        }];
        self.write_manifest(cmd, &manifest_path(out), instances, outputs)
    }

    fn write_manifest(
        &self,
        cmd: &Command,
        path: &Path,
        instances: Vec<FileDigest>,
        outputs: Vec<FileDigest>,
    ) -> Result<()> {
        let manifest = RunManifest {
            tool: "memperc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: cmd.name().into(),
            params: cmd.clone(),
            base_seed: self.seed,
            threads: self.runner()?.threads(),
            instances,
            outputs,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        write_file(path, &(serde_json::to_string_pretty(&manifest)? + "\n"))
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        threads: cli.threads,
    };
    execute(&ctx, &cli.command)
}

fn execute(ctx: &Ctx, cmd: &Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(ctx, cmd, a),
        Command::Solve(a) => cmd_solve(ctx, a),
        Command::Plateau(a) => cmd_plateau(ctx, cmd, a),
        Command::Sweep(a) => cmd_sweep(ctx, cmd, a),
        Command::Scale(a) => cmd_scale(ctx, cmd, a),
        Command::Fit(a) => cmd_fit(ctx, cmd, a),
        Command::Dp(DpCommand::Eval(a)) => cmd_dp_eval(ctx, cmd, a),
        Command::Dp(DpCommand::Sim(a)) => cmd_dp_sim(ctx, cmd, a),
        Command::Rerun(a) => cmd_rerun(ctx, a),
    }
}

fn cmd_rerun(ctx: &Ctx, args: &RerunArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.manifest)?;
    let mut cmd = manifest.params;
    if let Some(out) = &args.out {
        cmd.set_out(out.clone())?;
    }
    if matches!(cmd, Command::Rerun(_)) {
        bail!("manifest records another rerun");
    }
    let inner = Ctx {
        seed: manifest.base_seed,
        threads: ctx.threads,
    };
    execute(&inner, &cmd)
}

fn cmd_gen(ctx: &Ctx, cmd: &Command, a: &GenArgs) -> Result<()> {
    ensure!(a.count > 0, "--count must be positive");
    let generated = harness::generate_instances(a.n, a.ratio, a.p0, a.count, ctx.seed)?;
    let mut outputs = Vec::new();
    for (k, (formula, planted)) in generated.iter().enumerate() {
        let name = instance_file_name(a.n, a.ratio, ctx.seed, k);
        let path = a.out.join(&name);
        let text = write_dimacs(formula);
        write_file(&path, &text)?;
        let sol = planted.to_sidecar();
        let sol_path = path.with_extension("sol");
        write_file(&sol_path, &sol)?;
        outputs.push(FileDigest {
            name,
            sha256: sha256_hex(text.as_bytes()),
        });
        outputs.push(FileDigest {
            name: file_name(&sol_path),
            sha256: sha256_hex(sol.as_bytes()),
        });
    }
    ctx.write_manifest(cmd, &a.out.join("manifest.json"), Vec::new(), outputs)
}

fn stage_bounds(raw: bool) -> StageBounds {
    if raw {
        StageBounds::Raw
    } else {
        StageBounds::Project
    }
}

fn cmd_solve(ctx: &Ctx, a: &SolveArgs) -> Result<()> {
    let text = fs::read_to_string(&a.cnf).with_context(|| format!("reading {}", a.cnf.display()))?;
    let formula = parse_dimacs(&text)?;
    let system = DmmSystem::new(&formula, DmmParams::for_formula(&formula))
        .with_stage_bounds(stage_bounds(a.raw_stages));
    let result = run_trial_on(&system, a.method, a.dt, a.max_steps, ctx.seed)?;
    println!("{}", serde_json::to_string(&result)?);
    Ok(())
}

struct Loaded {
    formulas: Vec<Formula>,
    digests: Vec<FileDigest>,
    n_vars: usize,
    ratio: f64,
}

fn load_instances(src: &InstanceArgs, seed: u64) -> Result<Loaded> {
    match (&src.instances, src.n) {
        (Some(dir), _) => load_dir(dir),
        (None, Some(n)) => {
            ensure!(src.count > 0, "--count must be positive");
            let generated = harness::generate_instances(n, src.ratio, src.p0, src.count, seed)?;
            let digests = generated
                .iter()
                .enumerate()
                .map(|(k, (f, _))| FileDigest {
                    name: instance_file_name(n, src.ratio, seed, k),
                    sha256: sha256_hex(write_dimacs(f).as_bytes()),
                })
                .collect();
            Ok(Loaded {
                formulas: generated.into_iter().map(|(f, _)| f).collect(),
                digests,
                n_vars: n,
                ratio: src.ratio,
            })
        }
        (None, None) => bail!("give either --instances DIR or --n N"),
    }
}

fn load_dir(dir: &Path) -> Result<Loaded> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "cnf"))
        .collect();
    paths.sort();
    ensure!(!paths.is_empty(), "no .cnf files in {}", dir.display());
    let mut formulas = Vec::new();
    let mut digests = Vec::new();
    for p in &paths {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let text = String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", p.display()))?;
        let f = parse_dimacs(&text).with_context(|| format!("parsing {}", p.display()))?;
        digests.push(FileDigest {
            name: file_name(p),
            sha256: sha256_hex(text.as_bytes()),
        });
        formulas.push(f);
    }
    let n_vars = formulas[0].n_vars;
    let m = formulas[0].n_clauses();
    ensure!(
        formulas.iter().all(|f| f.n_vars == n_vars && f.n_clauses() == m),
        "instances in {} differ in size",
        dir.display()
    );
    Ok(Loaded {
        formulas,
        digests,
        n_vars,
        ratio: m as f64 / n_vars as f64,
    })
}

/// Roughly log-spaced distinct step counts from 1 to `max`.
fn log_grid(max: u64, points: usize) -> Vec<u64> {
    let mut g: Vec<u64> = (0..points.max(2))
        .map(|i| {
            let f = i as f64 / (points.max(2) - 1) as f64;
            (max as f64).powf(f).round() as u64
        })
        .collect();
    g.dedup();
    g
}

fn cmd_plateau(ctx: &Ctx, cmd: &Command, a: &PlateauArgs) -> Result<()> {
    let loaded = load_instances(&a.source, ctx.seed)?;
    let grid = if a.grid.is_empty() {
        log_grid(a.max_steps, a.points)
    } else {
        a.grid.clone()
    };
    let systems = build_systems_with(&loaded.formulas, stage_bounds(a.raw_stages));
    let curve = plateau_curve(&ctx.runner()?, &systems, a.method, a.dt, a.replicas, &grid, ctx.seed)?;
    ctx.write(cmd, &a.out, &harness::plateau_csv(&curve), loaded.digests)
}

fn cmd_sweep(ctx: &Ctx, cmd: &Command, a: &SweepArgs) -> Result<()> {
    let loaded = load_instances(&a.source, ctx.seed)?;
    let systems = build_systems_with(&loaded.formulas, stage_bounds(a.raw_stages));
    let spec = SweepSpec {
        n_vars: loaded.n_vars,
        ratio: loaded.ratio,
        method: a.method,
        systems: &systems,
        replicas: a.replicas,
        max_steps: a.max_steps.unwrap_or_else(|| default_budget(loaded.n_vars)),
        seed: ctx.seed,
    };
    let runner = ctx.runner()?;
    let rows = if a.dt.is_empty() {
        adaptive_sweep(&runner, &spec, a.anchor, a.per_decade, a.max_points)?.rows
    } else {
        sweep_dt(&runner, &spec, &a.dt)?
    };
    ctx.write(cmd, &a.out, &harness::sweep_csv(&rows), loaded.digests)
}

/// One row of the fit table. Failed fits leave their fields empty and
/// explain why in `note`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub n_vars: usize,
    pub ratio: f64,
    pub method: Method,
    pub c: Option<f64>,
    pub d: Option<f64>,
    pub dt_c: Option<f64>,
    pub dt_95: Option<f64>,
    pub residual: Option<f64>,
    pub b: Option<f64>,
    pub dim: Option<f64>,
    pub dp_residual: Option<f64>,
    pub note: String,
}

pub const FIT_HEADER: &str = "n_vars,ratio,method,c,d,dt_c,dt_95,residual,b,D,dp_residual,note";

fn opt_str(v: Option<f64>) -> String {
    v.map(fmt_num).unwrap_or_default()
}

pub fn fit_csv(rows: &[FitRow]) -> String {
    let mut out = format!("{FIT_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.n_vars,
            fmt_num(r.ratio),
            r.method,
            opt_str(r.c),
            opt_str(r.d),
            opt_str(r.dt_c),
            opt_str(r.dt_95),
            opt_str(r.residual),
            opt_str(r.b),
            opt_str(r.dim),
            opt_str(r.dp_residual),
            r.note.replace([',', '\n'], ";")
        ));
    }
    out
}

pub fn parse_fit_csv(text: &str) -> Result<Vec<FitRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    ensure!(lines.next().map(str::trim) == Some(FIT_HEADER), "expected fit header `{FIT_HEADER}`");
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ensure!(f.len() == 12, "fit row needs 12 fields: {l}");
            let num = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    Ok(Some(s.parse().with_context(|| format!("bad number `{s}`"))?))
                }
            };
            Ok(FitRow {
                n_vars: f[0].parse()?,
                ratio: f[1].parse()?,
                method: f[2].parse().map_err(|e: String| anyhow!(e))?,
                c: num(f[3])?,
                d: num(f[4])?,
                dt_c: num(f[5])?,
                dt_95: num(f[6])?,
                residual: num(f[7])?,
                b: num(f[8])?,
                dim: num(f[9])?,
                dp_residual: num(f[10])?,
                note: f[11].to_string(),
            })
        })
        .collect()
}

/// Sigmoid and percolation-ratio fits of one (N, ratio, method) group.
pub fn fit_group(rows: &[SweepRow], a: f64) -> FitRow {
    let first = &rows[0];
    let mut out = FitRow {
        n_vars: first.n_vars,
        ratio: first.ratio,
        method: first.method,
        c: None,
        d: None,
        dt_c: None,
        dt_95: None,
        residual: None,
        b: None,
        dim: None,
        dp_residual: None,
        note: String::new(),
    };
    let mut notes = Vec::new();
    let pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| (r.dt, r.a, sigmoid_weight(r.stderr_a)))
        .collect();
    match fit_sigmoid(&pts) {
        Ok(s) => {
            out.c = Some(s.c);
            out.d = Some(s.d);
            out.dt_c = Some(s.d);
            out.dt_95 = dt_at_level(&s, 0.95).ok();
            out.residual = Some(s.residual);
        }
        Err(e) => notes.push(format!("sigmoid: {e}")),
    }
    let dp_pts: Vec<(usize, f64, f64)> = rows.iter().map(|r| (r.n_vars, r.dt, r.a)).collect();
    match fit_dp_ratio(&dp_pts, DpFitOptions { a, ratio: first.ratio }) {
        Ok(f) => {
            out.b = Some(f.b);
            out.dim = Some(f.dim);
            out.dp_residual = Some(f.residual);
        }
        Err(e) => notes.push(format!("dp: {e}")),
    }
    out.note = notes.join("; ");
    out
}

fn cmd_fit(ctx: &Ctx, cmd: &Command, a: &FitArgs) -> Result<()> {
    let mut groups: BTreeMap<(usize, String, Method), Vec<SweepRow>> = BTreeMap::new();
    let mut digests = Vec::new();
    for path in &a.input {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        digests.push(FileDigest {
            name: file_name(path),
            sha256: sha256_hex(text.as_bytes()),
        });
        for row in parse_sweep_csv(&text).with_context(|| format!("parsing {}", path.display()))? {
            groups
                .entry((row.n_vars, fmt_num(row.ratio), row.method))
                .or_default()
                .push(row);
        }
    }
    let rows: Vec<FitRow> = groups
        .into_values()
        .map(|mut g| {
            g.sort_by(|x, y| x.dt.total_cmp(&y.dt));
            fit_group(&g, a.a)
        })
        .collect();
    if let Some(pl) = &a.power_law_out {
        ctx.write(cmd, pl, &power_law_csv(&rows), digests.clone())?;
    }
    ctx.write(cmd, &a.out, &fit_csv(&rows), digests)
}

/// Power laws in N of each fitted quantity, per (ratio, method).
pub fn power_law_csv(rows: &[FitRow]) -> String {
    let mut out = String::from("ratio,method,quantity,prefactor,exponent,exponent_stderr,r_squared,points\n");
    let mut keys: Vec<(String, Method)> = rows.iter().map(|r| (fmt_num(r.ratio), r.method)).collect();
    keys.sort();
    keys.dedup();
    type Getter = fn(&FitRow) -> Option<f64>;
    let quantities: [(&str, Getter); 4] = [
        ("dt_c", |r| r.dt_c),
        ("dt_95", |r| r.dt_95),
        ("b", |r| r.b),
        ("D", |r| r.dim),
    ];
    for (ratio, method) in keys {
        for (name, get) in quantities {
            let pairs: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| fmt_num(r.ratio) == ratio && r.method == method)
                .filter_map(|r| get(r).map(|y| (r.n_vars as f64, y)))
                .collect();
            if let Ok(f) = fit_power_law(&pairs) {
                out.push_str(&format!(
                    "{ratio},{method},{name},{},{},{},{},{}\n",
                    fmt_num(f.prefactor),
                    fmt_num(f.exponent),
                    fmt_num(f.exponent_stderr),
                    fmt_num(f.r_squared),
                    pairs.len()
                ));
            }
        }
    }
    out
}

fn dt95_law(a: &ScaleArgs) -> Result<(PowerLawFit, Vec<FileDigest>)> {
    if let (Some(prefactor), Some(exponent)) = (a.dt95_prefactor, a.dt95_exponent) {
        return Ok((
            PowerLawFit {
                prefactor,
                exponent,
                r_squared: f64::NAN,
                exponent_stderr: f64::NAN,
            },
            Vec::new(),
        ));
    }
    let path = a
        .fit
        .as_ref()
        .ok_or_else(|| anyhow!("give --fit FILE or --dt95-prefactor/--dt95-exponent"))?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let pairs: Vec<(f64, f64)> = parse_fit_csv(&text)?
        .into_iter()
        .filter(|r| r.method == a.method && r.ratio == a.ratio)
        .filter_map(|r| r.dt_95.map(|y| (r.n_vars as f64, y)))
        .collect();
    let law = fit_power_law(&pairs)
        .with_context(|| format!("fitting dt_95 for {} at ratio {}", a.method, a.ratio))?;
    let digest = FileDigest {
        name: file_name(path),
        sha256: sha256_hex(text.as_bytes()),
    };
    Ok((law, vec![digest]))
}

fn cmd_scale(ctx: &Ctx, cmd: &Command, a: &ScaleArgs) -> Result<()> {
    let (law, mut digests) = dt95_law(a)?;
    let mut per_size = Vec::new();
    for &n in &a.sizes {
        let src = InstanceArgs {
            instances: None,
            n: Some(n),
            count: a.count,
            ratio: a.ratio,
            p0: a.p0,
        };
        let loaded = load_instances(&src, ctx.seed)?;
        digests.extend(loaded.digests);
        per_size.push((n, build_systems_with(&loaded.formulas, stage_bounds(a.raw_stages))));
    }
    let max_n = a.sizes.iter().copied().max().unwrap_or(0);
    let spec = ScaleSpec {
        sizes: per_size
            .iter()
            .map(|(n, s)| ScaleSize { n_vars: *n, systems: s })
            .collect(),
        ratio: a.ratio,
        method: a.method,
        dt95: law,
        safety: a.safety,
        replicas: a.replicas,
        max_steps: a.max_steps.unwrap_or_else(|| default_budget(max_n)),
        percentiles: a.percentiles.clone(),
        resamples: a.resamples,
        seed: ctx.seed,
    };
    let rows = scalability(&ctx.runner()?, &spec)?;
    ctx.write(cmd, &a.out, &harness::scale_csv(&rows), digests)
}

pub const DP_EVAL_HEADER: &str = "D,p,delta,r_exact_sum,r_gamma,r_erfc,r_near_transition";

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// One evaluation row; formulas undefined at (D, p) give `None`.
pub fn dp_eval_row(dim: f64, p: f64) -> [Option<f64>; 4] {
    let params = DpParams::new(dim, p);
    let ratio_with = |absorbing: Result<dp::LogCount, dp::DpError>| -> Option<f64> {
        let counts = LatticeCounts {
            permeable: expected_permeable(&params).ok()?,
            absorbing: absorbing.ok()?,
        };
        finite(counts.ratio())
    };
    let delta = dim * p - std::f64::consts::E;
    [
        ratio_with(expected_absorbing_sum(&params)),
        ratio_with(expected_absorbing_closed(&params, ClosedForm::Gamma)),
        dp::permeable_ratio(dim, p).ok(),
        finite(ratio_near_transition(dim, delta)),
    ]
}

fn cmd_dp_eval(ctx: &Ctx, cmd: &Command, a: &DpEvalArgs) -> Result<()> {
    let mut out = format!("{DP_EVAL_HEADER}\n");
    for &dim in &a.dims {
        ensure!(dim >= 2.0, "D must be at least 2, got {dim}");
        let ps: Vec<f64> = if !a.p.is_empty() {
            a.p.clone()
        } else if !a.delta.is_empty() {
            a.delta.iter().map(|d| (std::f64::consts::E + d) / dim).collect()
        } else {
            ensure!(a.points >= 2, "--points must be at least 2");
            let pc = dp::critical_probability(dim);
            (0..a.points)
                .map(|i| pc * (a.p_min + (a.p_max - a.p_min) * i as f64 / (a.points - 1) as f64))
                .collect()
        };
        for p in ps {
            ensure!((0.0..=1.0).contains(&p), "p = {p} outside [0, 1] at D = {dim}");
            let r = dp_eval_row(dim, p);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                fmt_num(dim),
                fmt_num(p),
                fmt_num(dim * p - std::f64::consts::E),
                opt_str(r[0]),
                opt_str(r[1]),
                opt_str(r[2]),
                opt_str(r[3])
            ));
        }
    }
    ctx.write(cmd, &a.out, &out, Vec::new())
}

fn cmd_dp_sim(ctx: &Ctx, cmd: &Command, a: &DpSimArgs) -> Result<()> {
    let mut out = String::from(
        "D,T,p,trials,permeable_mean,permeable_stderr,permeable_exact,absorbing_mean,absorbing_stderr,absorbing_exact\n",
    );
    let runner = ctx.runner()?;
    for &p in &a.p {
        let sim = runner.install(|| simulate_cone_lattice(a.dim, a.depth, p, a.trials, ctx.seed))?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            a.dim,
            a.depth,
            fmt_num(p),
            a.trials,
            fmt_num(sim.sampled_permeable()),
            fmt_num(sim.permeable_stderr),
            fmt_num(sim.exact_permeable()),
            fmt_num(sim.sampled_absorbing()),
            fmt_num(sim.absorbing_stderr),
            fmt_num(sim.exact_absorbing())
        ));
    }
    ctx.write(cmd, &a.out, &out, Vec::new())
}
