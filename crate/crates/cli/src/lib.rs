//! Command-line harness for the hanging-chain experiments.
//!
//! Subcommands write CSV tables, each preceded by `# key: value` metadata
//! lines (git hash, seed, config digest), plus SVG charts for `scaling` and
//! `profile`. Exit codes: 0 success, 1 solver failure, 2 configuration error.

pub mod check;
pub mod config;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use zogp::benchmark::{
    self, fit_chain_gp, generate_training_data, loglog_slope, run_closed_loop, run_profile_experiment,
    run_scaling_experiment, write_profile_csv, write_scaling_csv, ClosedLoopOptions, DataGenOptions, ProfileOptions,
    ScalingOptions, ScalingRow, CATEGORIES,
};
use zogp::gp::GpDataset;
use zogp::sqp::{SolverMode, SolverOptions};

pub use config::ExperimentConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(#[from] zogp::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Solver(zogp::Error::InvalidArgument(_) | zogp::Error::Unsupported(_)) => 2,
            Self::Solver(_) | Self::Failed(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Solver(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "zogp", version, about = "GP-MPC experiments on the hanging chain")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// nominal, zero_order or naive.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Threads for stage-wise maps; 0 uses all.
    #[arg(long, global = true, env = "ZOGP_WORKERS")]
    pub workers: Option<usize>,
    /// Std of Gaussian plant noise on the B channel.
    #[arg(long, global = true)]
    pub plant_noise: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record GP training data from nominal closed-loop runs.
    GenData {
        /// Perturbed starts; D = 15 times this.
        #[arg(long)]
        n_x0: Option<usize>,
    },
    /// Closed-loop simulation against the true plant.
    ClosedLoop {
        /// Training data CSV; without it the data-free GP is used.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-iteration time against n_x for every mode.
    Scaling,
    /// Timing categories of the zero-order iteration.
    Profile,
    /// Run the property suites.
    Check,
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(m) = &cli.mode {
        cfg.modes = vec![m.clone()];
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
        cfg.profile.workers = vec![w];
    }
    if let Some(n) = cli.plant_noise {
        cfg.plant_noise = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn git_hash() -> String {
    Process::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn metadata(cfg: &ExperimentConfig, command: &str) -> Vec<(String, String)> {
    vec![
        ("command".into(), command.into()),
        ("git_hash".into(), git_hash()),
        ("seed".into(), cfg.seed.to_string()),
        ("config_digest".into(), cfg.digest()),
    ]
}

fn create_out(cfg: &ExperimentConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.out)?;
    Ok(&cfg.out)
}

fn datagen_options(cfg: &ExperimentConfig, n_x0: usize) -> DataGenOptions {
    DataGenOptions {
        n_x0,
        steps_per_start: cfg.data.steps_per_start,
        perturb_std: cfg.data.perturb_std,
        plant_noise: cfg.plant_noise,
        ocp: cfg.ocp_options(cfg.horizon),
        solver: SolverOptions {
            workers: cfg.workers,
            ..SolverOptions::with_mode(SolverMode::Nominal)
        },
    }
}

/// Dataset of `size` rows for a chain of `n_mass` masses; empty for 0.
fn dataset(cfg: &ExperimentConfig, n_mass: usize, size: usize) -> Result<GpDataset, CliError> {
    let chain = cfg.chain_config(n_mass);
    if size == 0 {
        return Ok(GpDataset::empty(benchmark::chain_features(&chain).dim(), chain.layout().n_w()));
    }
    let n_x0 = size / cfg.data.steps_per_start;
    let (data, report) = generate_training_data(&chain, &datagen_options(cfg, n_x0), cfg.seed.wrapping_add(n_mass as u64))?;
    for (start, msg) in &report.skipped {
        eprintln!("n_mass {n_mass}: start {start} skipped: {msg}");
    }
    if data.is_empty() {
        return Err(CliError::Failed(format!("no training data for n_mass = {n_mass}")));
    }
    Ok(data)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData { n_x0 } => gen_data(&cfg, n_x0.unwrap_or(cfg.n_x0)),
        Command::ClosedLoop { data } => closed_loop(&cfg, data.as_deref()),
        Command::Scaling => scaling(&cfg),
        Command::Profile => profile(&cfg),
        Command::Check => {
            let results = check::run_checks(cfg.seed);
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} suites passed", results.len() - failed, results.len());
            if failed > 0 {
                return Err(CliError::Failed(format!("{failed} property suites failed")));
            }
            Ok(())
        }
    }
}

fn gen_data(cfg: &ExperimentConfig, n_x0: usize) -> Result<(), CliError> {
    let chain = cfg.chain_config(cfg.chain.n_mass);
    let (data, report) = generate_training_data(&chain, &datagen_options(cfg, n_x0), cfg.seed)?;
    let out = create_out(cfg)?;
    let path = out.join(format!("data_n{}_D{}.csv", chain.n_mass, data.len()));
    let mut meta = metadata(cfg, "gen-data");
    meta.push(("n_mass".into(), chain.n_mass.to_string()));
    meta.push(("starts_requested".into(), n_x0.to_string()));
    meta.push(("starts_ok".into(), report.starts_ok.to_string()));
    for (start, msg) in &report.skipped {
        meta.push((format!("skipped_start_{start}"), msg.replace('\n', " ")));
    }
    data.save(&path, &meta)?;
    println!("wrote {} ({} rows, {} of {n_x0} starts)", path.display(), data.len(), report.starts_ok);
    if report.starts_ok == 0 {
        return Err(CliError::Failed("every start failed".into()));
    }
    Ok(())
}

fn closed_loop(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<(), CliError> {
    let mode = cfg.solver_modes()?[0];
    let chain = cfg.chain_config(cfg.chain.n_mass);
    let gp = match data {
        Some(p) => {
            let d = GpDataset::load(p).map_err(|e| CliError::Config(format!("cannot load {}: {e}", p.display())))?;
            Some(Arc::new(fit_chain_gp(&chain, &d, &cfg.gp_options())?))
        }
        None => Some(Arc::new(fit_chain_gp(
            &chain,
            &GpDataset::empty(benchmark::chain_features(&chain).dim(), chain.layout().n_w()),
            &cfg.gp_options(),
        )?)),
    };
    let opts = ClosedLoopOptions {
        steps: cfg.closed_loop.steps,
        ocp: cfg.ocp_options(cfg.horizon),
        solver: SolverOptions {
            workers: cfg.workers,
            ..SolverOptions::with_mode(mode)
        },
        plant_noise: cfg.plant_noise,
    };
    let log = run_closed_loop(&chain, &opts, gp, cfg.seed)?;
    let out = create_out(cfg)?;
    let path = out.join(format!("closed_loop_{mode}.csv"));
    let mut meta = metadata(cfg, "closed-loop");
    meta.push(("mode".into(), mode.to_string()));
    meta.push(("min_margin".into(), format!("{:e}", log.min_margin)));
    meta.push(("violations".into(), log.violations.to_string()));
    let mut file = fs::File::create(&path)?;
    benchmark::write_metadata(&mut file, &meta)?;
    log.write_csv(file)?;
    println!(
        "wrote {}: {} steps, min wall margin {:.4e} m, {} violations, {} solver failures",
        path.display(),
        log.steps.len(),
        log.min_margin,
        log.violations,
        log.failures()
    );
    if log.failures() > 0 {
        return Err(CliError::Failed(format!("{} closed-loop solves failed", log.failures())));
    }
    Ok(())
}

/// Slope of `ln t` against `ln n_x` per `(mode, D)` series.
pub fn scaling_slopes(rows: &[ScalingRow]) -> Vec<(SolverMode, usize, Option<f64>)> {
    let mut keys: Vec<(SolverMode, usize)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.mode, r.data_size)) {
            keys.push((r.mode, r.data_size));
        }
    }
    keys.into_iter()
        .map(|(mode, d)| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.mode == mode && r.data_size == d)
                .filter_map(|r| r.median_seconds.map(|t| (r.n_x as f64, t)))
                .collect();
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            (mode, d, loglog_slope(&xs, &ys).ok())
        })
        .collect()
}

fn scaling(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let modes = cfg.solver_modes()?;
    let chain = cfg.chain_config(cfg.chain.n_mass);
    let mut rows = Vec::new();
    for &d in &cfg.data_sizes {
        let modes: Vec<SolverMode> = modes.iter().copied().filter(|&m| d == 0 || m != SolverMode::Naive).collect();
        if modes.is_empty() {
            continue;
        }
        let data = cfg
            .n_masses
            .iter()
            .map(|&n| if d == 0 { Ok(None) } else { dataset(cfg, n, d).map(Some) })
            .collect::<Result<Vec<_>, CliError>>()?;
        let opts = ScalingOptions {
            n_masses: cfg.n_masses.clone(),
            modes,
            ocp: cfg.ocp_options(cfg.scaling.horizon),
            gp: cfg.gp_options(),
            data,
            workers: cfg.workers,
            warmup: cfg.scaling.warmup,
            iterations: cfg.scaling.iterations,
            budget_seconds: cfg.scaling.budget_seconds,
        };
        rows.extend(run_scaling_experiment(&chain, &opts)?);
    }
    let out = create_out(cfg)?;
    let csv_path = out.join("scaling.csv");
    write_scaling_csv(fs::File::create(&csv_path)?, &rows, &metadata(cfg, "scaling"))?;
    let slopes = scaling_slopes(&rows);
    let series: Vec<(String, Vec<(f64, f64)>)> = slopes
        .iter()
        .map(|&(mode, d, _)| {
            let pts = rows
                .iter()
                .filter(|r| r.mode == mode && r.data_size == d)
                .filter_map(|r| r.median_seconds.map(|t| (r.n_x as f64, t)))
                .collect();
            (format!("{mode}, D={d}"), pts)
        })
        .collect();
    let svg_path = out.join("scaling.svg");
    fs::write(
        &svg_path,
        svg::loglog_chart("Time per SQP iteration", "n_x", "seconds", &series),
    )?;
    for r in &rows {
        match r.median_seconds {
            Some(t) => println!("n_x {:>3} {:<10} D={:<5} {:.4e} s", r.n_x, r.mode, r.data_size, t),
            None => println!("n_x {:>3} {:<10} D={:<5} timed out", r.n_x, r.mode, r.data_size),
        }
    }
    for (mode, d, s) in slopes {
        match s {
            Some(s) => println!("slope {mode} D={d}: {s:.3}"),
            None => println!("slope {mode} D={d}: not enough points"),
        }
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn profile(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let n_mass = cfg.profile.n_mass;
    let chain = cfg.chain_config(n_mass);
    let datasets = cfg
        .data_sizes
        .iter()
        .map(|&d| dataset(cfg, n_mass, d))
        .collect::<Result<Vec<_>, CliError>>()?;
    let opts = ProfileOptions {
        ocp: cfg.ocp_options(cfg.horizon),
        gp: cfg.gp_options(),
        datasets,
        workers: cfg.profile.workers.clone(),
        warmup: cfg.profile.warmup,
        iterations: cfg.profile.iterations,
    };
    let rows = run_profile_experiment(&chain, &opts)?;
    let out = create_out(cfg)?;
    let csv_path = out.join("profile.csv");
    let mut meta = metadata(cfg, "profile");
    meta.push(("n_mass".into(), n_mass.to_string()));
    write_profile_csv(fs::File::create(&csv_path)?, &rows, &meta)?;
    let bars: Vec<(String, Vec<f64>)> = rows
        .iter()
        .map(|r| (format!("D={} w={}", r.data_size, r.workers), r.shares().to_vec()))
        .collect();
    let svg_path = out.join("profile.svg");
    fs::write(
        &svg_path,
        svg::share_chart(&format!("Zero-order iteration, n_x = {}", chain.layout().n_x()), &CATEGORIES, &bars),
    )?;
    for r in &rows {
        let shares: Vec<String> = CATEGORIES
            .iter()
            .zip(r.shares())
            .map(|(c, s)| format!("{c} {:.1}%", 100.0 * s))
            .collect();
        println!("D={:<5} workers={} {}", r.data_size, r.workers, shares.join(", "));
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}
