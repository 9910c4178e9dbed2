//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed comparison (`compare`, `selftest`),
//! 2 usage error, 3 runtime failure.

use crate::acceptance::{self, Context, CRITERIA};
use crate::emptyball::{
    estimate_direct, estimate_f, EmptyBallRow, FOptions, PredSource, RegimeKind, ScalingRegime, TreeMode,
};
use crate::engine::{survival_mc, survival_recursion, Caps};
use crate::error::{Error, Result};
use crate::laws::{OffspringLaw, OffspringSpec, StepLaw, StepSpec};
use crate::maxdisp::{default_gen_cap, default_replicates, estimate_m_tail, estimate_mn_scaled};
use crate::parallel::default_workers;
use crate::sbmpde::{
    calibrate_b, compute_f, extinction_profiles, BranchingMechanism, FunctionalRow, GridParams, ThetaLadder,
};
use crate::spine::{estimate_i_levels, SpineRow};
use crate::stats::{ComparisonItem, ComparisonReport, ToleranceRule};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "brwlab", version, about = "Critical branching random walk experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Root seed for every random stream.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "BRWLAB_WORKERS")]
    workers: Option<usize>,
    /// Output directory. Tables go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn workers(&self) -> usize {
        self.workers.filter(|&w| w > 0).unwrap_or_else(default_workers)
    }
}

#[derive(Args, Debug, Clone)]
struct CapArgs {
    #[arg(long)]
    gen_cap: Option<u64>,
    #[arg(long)]
    progeny_cap: Option<u64>,
    /// Largest expected number of field ancestors per run.
    #[arg(long)]
    field_cap: Option<f64>,
}

impl CapArgs {
    fn caps(&self) -> Caps {
        let d = Caps::default();
        Caps {
            generations: self.gen_cap.unwrap_or(d.generations),
            progeny: self.progeny_cap.unwrap_or(d.progeny),
            field_particles: self.field_cap.unwrap_or(d.field_particles),
        }
    }

    fn is_set(&self) -> bool {
        self.gen_cap.is_some() || self.progeny_cap.is_some() || self.field_cap.is_some()
    }
}

#[derive(Args, Debug, Clone)]
struct PdeArgs {
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    rho_max: Option<f64>,
    #[arg(long)]
    dt_max: Option<f64>,
    #[arg(long)]
    theta_start: Option<f64>,
    #[arg(long)]
    theta_factor: Option<f64>,
    /// Ladder tolerance relative to the mass bound.
    #[arg(long)]
    theta_tol: Option<f64>,
}

impl PdeArgs {
    fn grid(&self) -> GridParams {
        let d = GridParams::default();
        GridParams { cells: self.cells.unwrap_or(d.cells), rho_max: self.rho_max, dt_max: self.dt_max, ..d }
    }

    fn ladder(&self) -> ThetaLadder {
        let d = ThetaLadder::default();
        ThetaLadder {
            start: self.theta_start.unwrap_or(d.start),
            factor: self.theta_factor.unwrap_or(d.factor),
            tol: self.theta_tol.unwrap_or(d.tol),
            ..d
        }
    }

    fn is_set(&self) -> bool {
        self.cells.is_some() || self.rho_max.is_some() || self.dt_max.is_some()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Estimator {
    Occupation,
    Direct,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum RegimeArg {
    Natural,
    Diffusive,
    Smallball,
    Fixed,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum TreeArg {
    Plain,
    Conditioned,
}

#[derive(Args, Debug, Clone)]
struct EmptyBallArgs {
    #[arg(long)]
    dim: usize,
    #[arg(long)]
    offspring: String,
    #[arg(long)]
    step: String,
    #[arg(long)]
    n: u64,
    #[arg(long, value_enum, default_value_t = RegimeArg::Natural)]
    regime: RegimeArg,
    /// Radii in units of ρ_n, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    r: Vec<f64>,
    #[arg(long, default_value_t = 10_000)]
    replicates: u64,
    #[arg(long, value_enum, default_value_t = Estimator::Occupation)]
    estimator: Estimator,
    #[arg(long, value_enum, default_value_t = TreeArg::Conditioned)]
    trees: TreeArg,
    /// Window bias budget for the direct estimator.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[command(flatten)]
    caps: CapArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Survival probability Q_n by exact recursion and optionally Monte Carlo.
    Survival {
        #[arg(long)]
        offspring: String,
        #[arg(long)]
        n: u64,
        /// Monte Carlo replicates; 0 skips the simulation.
        #[arg(long, default_value_t = 0)]
        replicates: u64,
        #[command(flatten)]
        caps: CapArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Tail of the all-time maximum, or of M_m with `--mn-n`.
    Maxdisp {
        #[arg(long)]
        offspring: String,
        #[arg(long, default_value = "gauss:d=1,eta2=1")]
        step: String,
        #[arg(long, value_delimiter = ',', required = true)]
        x: Vec<f64>,
        #[arg(long)]
        replicates: Option<u64>,
        #[arg(long)]
        gen_cap: Option<u64>,
        /// Estimate n^{1/β} P(M_⌊nr⌋ > x√n) at this n instead.
        #[arg(long)]
        mn_n: Option<u64>,
        #[arg(long, default_value_t = 1.0)]
        mn_r: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Empty-ball probabilities P(R_n ≥ ρ_n r).
    Emptyball {
        #[command(flatten)]
        args: EmptyBallArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Spine estimate of I for balls of radius r.
    Spine {
        #[arg(long)]
        offspring: String,
        #[arg(long)]
        step: String,
        #[arg(long, value_delimiter = ',', required = true)]
        r: Vec<f64>,
        /// Spine depths, comma separated.
        #[arg(long = "K", value_delimiter = ',', default_value = "64")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 10_000)]
        samples: u64,
        #[arg(long, default_value_t = 16)]
        y_samples: usize,
        #[command(flatten)]
        caps: CapArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Extinction profile and functional F_d(r) of the log-Laplace equation.
    Pde {
        #[arg(long)]
        dim: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        r: Vec<f64>,
        #[arg(long, default_value = "quad:b=0.5")]
        mech: String,
        #[arg(long = "T", default_value_t = 1.0)]
        t: f64,
        #[arg(long, default_value_t = 1.0)]
        eta2: f64,
        #[command(flatten)]
        pde: PdeArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Empty-ball estimate against the prediction for its regime.
    Compare {
        #[command(flatten)]
        args: EmptyBallArgs,
        /// Branching coefficient for the PDE; calibrated from the law when absent.
        #[arg(long)]
        b: Option<f64>,
        #[arg(long, default_value_t = 3.0)]
        k_se: f64,
        #[arg(long, default_value_t = 0.05)]
        abs_tol: f64,
        /// Spine depth for the fixed-radius regime.
        #[arg(long = "K", default_value_t = 64)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        spine_samples: u64,
        #[command(flatten)]
        pde: PdeArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Runs the acceptance criteria.
    Selftest {
        /// Criterion numbers to run, comma separated; all when absent.
        #[arg(long, value_delimiter = ',')]
        only: Vec<u8>,
        #[command(flatten)]
        common: Common,
    },
}

/// Everything that determines an experiment's output except the worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub subcommand: String,
    pub offspring: Option<String>,
    pub step: Option<String>,
    pub dim: Option<usize>,
    pub n: Option<u64>,
    pub regime: Option<String>,
    pub r_grid: Vec<f64>,
    pub replicates: Option<u64>,
    pub seed: u64,
    pub workers: usize,
    pub caps: Option<Caps>,
    pub outputs: Vec<String>,
    pub pde_grid: Option<GridParams>,
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ExperimentConfig {
    fn new(subcommand: &str, common: &Common) -> Self {
        Self {
            subcommand: subcommand.into(),
            offspring: None,
            step: None,
            dim: None,
            n: None,
            regime: None,
            r_grid: Vec::new(),
            replicates: None,
            seed: common.seed,
            workers: common.workers(),
            caps: None,
            outputs: Vec::new(),
            pde_grid: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Parses a canonical string; law specs are normalised through their parsers.
    pub fn from_canonical(s: &str) -> Result<Self> {
        let mut c: ExperimentConfig = serde_json::from_str(s)?;
        if let Some(o) = &c.offspring {
            c.offspring = Some(o.parse::<OffspringSpec>()?.to_string());
        }
        if let Some(st) = &c.step {
            c.step = Some(st.parse::<StepSpec>()?.to_string());
        }
        Ok(c)
    }

    fn set(&mut self, key: &str, v: impl Serialize) {
        self.extra.insert(key.into(), serde_json::to_value(v).unwrap_or(serde_json::Value::Null));
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) | Error::InvalidLaw(_) | Error::Parse(_) | Error::Sizing(_) => 2,
                _ => 3,
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Survival { offspring, n, replicates, caps, common } => survival(&offspring, n, replicates, &caps, &common),
        Command::Maxdisp { offspring, step, x, replicates, gen_cap, mn_n, mn_r, common } => {
            maxdisp(&offspring, &step, &x, replicates, gen_cap, mn_n, mn_r, &common)
        }
        Command::Emptyball { args, common } => emptyball(&args, &common),
        Command::Spine { offspring, step, r, k, samples, y_samples, caps, common } => {
            spine(&offspring, &step, &r, &k, samples, y_samples, &caps, &common)
        }
        Command::Pde { dim, r, mech, t, eta2, pde, common } => pde_cmd(dim, &r, &mech, t, eta2, &pde, &common),
        Command::Compare { args, b, k_se, abs_tol, k, spine_samples, pde, common } => {
            compare(&args, b, k_se, abs_tol, k, spine_samples, &pde, &common)
        }
        Command::Selftest { only, common } => selftest(&only, &common),
    }
}

/// Writes each table to `out/name`, or to stdout when no directory is given.
struct Sink<'a> {
    out: Option<&'a Path>,
}

impl Sink<'_> {
    fn emit(&self, name: &str, bytes: &[u8]) -> Result<()> {
        match self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join(name), bytes)?;
            }
            None => std::io::stdout().write_all(bytes)?,
        }
        Ok(())
    }

    fn config(&self, cfg: &mut ExperimentConfig, outputs: &[&str]) -> Result<()> {
        cfg.outputs = outputs.iter().map(|s| s.to_string()).collect();
        if let Some(dir) = self.out {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.json"), cfg.to_canonical())?;
        }
        Ok(())
    }
}

fn csv_bytes<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn parse_laws(offspring: &str, step: &str) -> Result<(OffspringLaw, StepLaw)> {
    Ok((OffspringLaw::parse(offspring)?, StepLaw::parse(step)?))
}

#[derive(Serialize)]
struct SurvivalRow {
    n: u64,
    q_n: f64,
    scaled: f64,
    q_hat: Option<f64>,
    se: Option<f64>,
    replicates: u64,
}

fn survival(offspring: &str, n: u64, replicates: u64, caps: &CapArgs, common: &Common) -> Result<i32> {
    let off = OffspringLaw::parse(offspring)?;
    let beta = off.tail_index().beta();
    let q = survival_recursion(&off, n);
    let scaled = (n as f64).powf(1.0 / beta) * q;
    let mc = if replicates > 0 {
        Some(survival_mc(&off, n, replicates, caps.caps().progeny, common.seed, common.workers())?)
    } else {
        None
    };
    let row = SurvivalRow { n, q_n: q, scaled, q_hat: mc.map(|m| m.q_hat), se: mc.map(|m| m.se), replicates };
    let sink = Sink { out: common.out.as_deref() };
    let mut cfg = ExperimentConfig::new("survival", common);
    cfg.offspring = Some(off.spec().to_string());
    cfg.n = Some(n);
    cfg.replicates = Some(replicates);
    sink.config(&mut cfg, &["survival.csv"])?;
    println!("n^(1/beta)*Q_n = {scaled}");
    sink.emit("survival.csv", &csv_bytes(&[row])?)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn maxdisp(
    offspring: &str,
    step: &str,
    x: &[f64],
    replicates: Option<u64>,
    gen_cap: Option<u64>,
    mn_n: Option<u64>,
    mn_r: f64,
    common: &Common,
) -> Result<i32> {
    let (off, st) = parse_laws(offspring, step)?;
    let x_max = x.iter().cloned().fold(0.0, f64::max);
    let sink = Sink { out: common.out.as_deref() };
    let mut cfg = ExperimentConfig::new("maxdisp", common);
    cfg.offspring = Some(off.spec().to_string());
    cfg.step = Some(st.spec().to_string());
    cfg.set("x", x);
    if let Some(n) = mn_n {
        let reps = replicates.unwrap_or(100_000);
        let rows = x
            .iter()
            .map(|&xi| estimate_mn_scaled(&off, &st, n, mn_r, xi, reps, common.seed, common.workers()))
            .collect::<Result<Vec<_>>>()?;
        cfg.n = Some(n);
        cfg.replicates = Some(reps);
        cfg.set("mn_r", mn_r);
        sink.config(&mut cfg, &["mn.csv"])?;
        return sink.emit("mn.csv", &csv_bytes(&rows)?).map(|_| 0);
    }
    let reps = match replicates {
        Some(r) => r,
        None => default_replicates(&off, &st, x_max)?,
    };
    let cap = gen_cap.unwrap_or_else(|| default_gen_cap(x_max));
    let est = estimate_m_tail(&off, &st, x, reps, cap, common.seed, common.workers())?;
    cfg.replicates = Some(reps);
    cfg.set("gen_cap", cap);
    sink.config(&mut cfg, &["maxdisp.csv"])?;
    sink.emit("maxdisp.csv", &csv_bytes(&est)?)?;
    Ok(0)
}

struct EmptyBallRun {
    regime: ScalingRegime,
    off: OffspringLaw,
    step: StepLaw,
    rows: Vec<EmptyBallRow>,
    cfg: ExperimentConfig,
}

fn resolve_regime(args: &EmptyBallArgs, off: &OffspringLaw, step: &StepLaw) -> Result<ScalingRegime> {
    if step.dim() != args.dim {
        return Err(Error::InvalidArgument(format!("--dim {} but the step law has dimension {}", args.dim, step.dim())));
    }
    let kind = match args.regime {
        RegimeArg::Natural => RegimeKind::natural(off, args.dim)?,
        RegimeArg::Diffusive => RegimeKind::Diffusive,
        RegimeArg::Smallball => RegimeKind::SmallBall,
        RegimeArg::Fixed => RegimeKind::Fixed,
    };
    ScalingRegime::new(kind, args.n, off, args.dim)
}

fn run_emptyball(args: &EmptyBallArgs, common: &Common, name: &str) -> Result<EmptyBallRun> {
    let (off, step) = parse_laws(&args.offspring, &args.step)?;
    if args.r.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidArgument("radii must be positive".into()));
    }
    let regime = resolve_regime(args, &off, &step)?;
    let caps = args.caps.caps();
    let (seed, workers) = (common.seed, common.workers());
    let mut rows = Vec::new();
    if matches!(args.estimator, Estimator::Occupation | Estimator::Both) {
        let mode = match args.trees {
            TreeArg::Plain => TreeMode::Plain,
            TreeArg::Conditioned => TreeMode::Conditioned,
        };
        let opts = FOptions { mode, caps, ..FOptions::default() };
        for e in estimate_f(&regime, &off, &step, &args.r, args.replicates, seed, workers, &opts)? {
            let pred = regime.closed_form_limit(&off, e.r).map(|v| (v, PredSource::ClosedForm));
            rows.push(EmptyBallRow::from_f(&regime, &e, pred));
        }
    }
    if matches!(args.estimator, Estimator::Direct | Estimator::Both) {
        let res = estimate_direct(&regime, &off, &step, &args.r, args.replicates, seed, workers, args.epsilon, &caps)?;
        rows.extend(res.estimates.iter().map(|e| EmptyBallRow::from_direct(&regime, e)));
    }
    let mut cfg = ExperimentConfig::new(name, common);
    cfg.offspring = Some(off.spec().to_string());
    cfg.step = Some(step.spec().to_string());
    cfg.dim = Some(args.dim);
    cfg.n = Some(args.n);
    cfg.regime = Some(regime.kind.to_string());
    cfg.r_grid = args.r.clone();
    cfg.replicates = Some(args.replicates);
    if args.caps.is_set() {
        cfg.caps = Some(caps);
    }
    cfg.set("estimator", format!("{:?}", args.estimator).to_lowercase());
    cfg.set("trees", format!("{:?}", args.trees).to_lowercase());
    cfg.set("epsilon", args.epsilon);
    Ok(EmptyBallRun { regime, off, step, rows, cfg })
}

fn emptyball(args: &EmptyBallArgs, common: &Common) -> Result<i32> {
    let mut run = run_emptyball(args, common, "emptyball")?;
    let sink = Sink { out: common.out.as_deref() };
    sink.config(&mut run.cfg, &["emptyball.csv"])?;
    sink.emit("emptyball.csv", &csv_bytes(&run.rows)?)?;
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn spine(
    offspring: &str,
    step: &str,
    radii: &[f64],
    ks: &[usize],
    samples: u64,
    y_samples: usize,
    caps: &CapArgs,
    common: &Common,
) -> Result<i32> {
    let (off, st) = parse_laws(offspring, step)?;
    let mut rows = Vec::new();
    for (i, &r) in radii.iter().enumerate() {
        let est = estimate_i_levels(&off, &st, r, ks, samples, y_samples, common.seed.wrapping_add(i as u64), common.workers(), &caps.caps())?;
        rows.extend(est.iter().map(SpineRow::from));
    }
    let sink = Sink { out: common.out.as_deref() };
    let mut cfg = ExperimentConfig::new("spine", common);
    cfg.offspring = Some(off.spec().to_string());
    cfg.step = Some(st.spec().to_string());
    cfg.dim = Some(st.dim());
    cfg.r_grid = radii.to_vec();
    cfg.replicates = Some(samples);
    if caps.is_set() {
        cfg.caps = Some(caps.caps());
    }
    cfg.set("K", ks);
    cfg.set("y_samples", y_samples);
    sink.config(&mut cfg, &["spine.csv"])?;
    sink.emit("spine.csv", &csv_bytes(&rows)?)?;
    Ok(0)
}

#[derive(Serialize)]
struct ProfileRow {
    r: f64,
    rho: f64,
    v: f64,
}

fn pde_cmd(dim: usize, radii: &[f64], mech: &str, t: f64, eta2: f64, pde: &PdeArgs, common: &Common) -> Result<i32> {
    if dim < 2 {
        return Err(Error::InvalidArgument("the PDE functional is defined for d ≥ 2".into()));
    }
    if !(t > 0.0 && eta2 > 0.0) || radii.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidArgument("T, eta2 and every r must be positive".into()));
    }
    let mech = BranchingMechanism::parse(mech)?;
    let (grid, ladder) = (pde.grid(), pde.ladder());
    let mut table = Vec::new();
    let mut profile_rows = Vec::new();
    for &r in radii {
        let ext = extinction_profiles(dim, &mech, eta2, r, &[t], &grid, &ladder)?.remove(0);
        let f = compute_f(dim, &ext.profile)?;
        table.push(FunctionalRow { d: dim, r, t, b: mech.b, beta: mech.beta, f: f.f, exp_neg_f: (-f.f).exp() });
        profile_rows.extend(ext.profile.grid.iter().zip(&ext.profile.values).map(|(&rho, &v)| ProfileRow { r, rho, v }));
    }
    let sink = Sink { out: common.out.as_deref() };
    let mut cfg = ExperimentConfig::new("pde", common);
    cfg.dim = Some(dim);
    cfg.r_grid = radii.to_vec();
    if pde.is_set() {
        cfg.pde_grid = Some(grid);
    }
    cfg.set("mechanism", mech);
    cfg.set("T", t);
    cfg.set("eta2", eta2);
    cfg.set("ladder", ladder);
    sink.config(&mut cfg, &["functional.csv", "profile.csv"])?;
    sink.emit("functional.csv", &csv_bytes(&table)?)?;
    if common.out.is_some() {
        sink.emit("profile.csv", &csv_bytes(&profile_rows)?)?;
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn compare(
    args: &EmptyBallArgs,
    b: Option<f64>,
    k_se: f64,
    abs_tol: f64,
    k: usize,
    spine_samples: u64,
    pde: &PdeArgs,
    common: &Common,
) -> Result<i32> {
    let mut run = run_emptyball(args, common, "compare")?;
    let rule = ToleranceRule::se_abs(k_se, abs_tol);
    let mut report = ComparisonReport::default();
    let mut predictions = Vec::new();
    for &r in &args.r {
        let pred = match run.regime.kind {
            RegimeKind::SmallBall => run.regime.closed_form_limit(&run.off, r).expect("small-ball closed form"),
            RegimeKind::Diffusive => {
                let eta2 = run.step.eta2().ok_or_else(|| {
                    Error::InvalidArgument("the PDE prediction needs an isotropic step law".into())
                })?;
                let coef = b.unwrap_or_else(|| calibrate_b(&run.off, run.regime.n));
                let mech = BranchingMechanism::quadratic(coef)?;
                let ext = extinction_profiles(2, &mech, eta2, r, &[1.0], &pde.grid(), &pde.ladder())?.remove(0);
                report.set_meta("b", coef);
                (-compute_f(2, &ext.profile)?.f).exp()
            }
            RegimeKind::Fixed => {
                let est = estimate_i_levels(&run.off, &run.step, r, &[k], spine_samples, 16, common.seed, common.workers(), &run.args_caps())?;
                est[0].exp_neg_i()
            }
        };
        predictions.push(pred);
    }
    let source = match run.regime.kind {
        RegimeKind::SmallBall => PredSource::ClosedForm,
        RegimeKind::Diffusive => PredSource::Pde,
        RegimeKind::Fixed => PredSource::Spine,
    };
    for row in run.rows.iter_mut() {
        let i = args.r.iter().position(|&r| r == row.r).expect("row radius from the grid");
        row.predicted = Some(predictions[i]);
        row.pred_source = Some(source.to_string());
        report.push(ComparisonItem::new(
            format!("{} r={}", row.estimator, row.r),
            row.p_hat,
            predictions[i],
            row.se,
            row.bias_budget,
            rule,
        ));
    }
    report.set_meta("regime", run.regime);
    report.set_meta("seed", common.seed);
    report.set_meta("source", source.to_string());
    run.cfg.set("k_se", k_se);
    run.cfg.set("abs_tol", abs_tol);
    run.cfg.set("K", k);
    run.cfg.set("spine_samples", spine_samples);
    if let Some(b) = b {
        run.cfg.set("b", b);
    }
    if pde.is_set() {
        run.cfg.pde_grid = Some(pde.grid());
    }
    let sink = Sink { out: common.out.as_deref() };
    sink.config(&mut run.cfg, &["emptyball.csv", "report.json", "report.csv"])?;
    if common.out.is_some() {
        sink.emit("emptyball.csv", &csv_bytes(&run.rows)?)?;
        sink.emit("report.json", report.to_json().as_bytes())?;
    }
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    sink.emit("report.csv", &csv)?;
    Ok(if report.passed() { 0 } else { 1 })
}

impl EmptyBallRun {
    fn args_caps(&self) -> Caps {
        self.cfg.caps.unwrap_or_default()
    }
}

fn selftest(only: &[u8], common: &Common) -> Result<i32> {
    let ids: Vec<u8> = if only.is_empty() { CRITERIA.iter().map(|c| c.0).collect() } else { only.to_vec() };
    if let Some(bad) = ids.iter().find(|&&i| !CRITERIA.iter().any(|c| c.0 == i)) {
        return Err(Error::InvalidArgument(format!("no criterion {bad}; valid numbers are 1 to {}", CRITERIA.len())));
    }
    let ctx = Context::new(common.seed, common.workers(), common.out.clone());
    let mut all = true;
    for id in ids {
        let res = acceptance::run_criterion(id, &ctx);
        println!("{}", res.summary());
        all &= res.passed();
    }
    Ok(if all { 0 } else { 1 })
}
