//! Argument parsing and subcommand dispatch.


use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::ffi::OsString;

use clap::{Parser, Subcommand};
use log::info;

use sdde_bem::assumptions::audit_all;
use sdde_bem::brownian::path_increments;
use sdde_bem::experiments::{
    report_stem, run_ergodicity, sanitize, run_invariant_study, run_moments, run_rate_regression, run_strong_error,
    write_report, ErgodicityConfig, InvariantConfig, MomentConfig, RateConfig, Report, StrongErrorConfig,
};
use sdde_bem::stepper::{check_step_size, integrate};
use sdde_bem::{Error, TimeGrid, Trajectory};

use crate::config::{Overrides, RunConfig, Section, SimulateConfig};

#[derive(Parser, Debug)]
#[command(name = "sdde-bem", version, about = "Backward Euler-Maruyama experiments for stochastic delay equations")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all Brownian paths.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of Monte Carlo paths.
    #[arg(long, global = true)]
    paths: Option<usize>,
    /// Worker threads; 0 or unset uses every core.
    #[arg(long, global = true, env = "SDDE_BEM_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Built-in model name.
    #[arg(long, global = true)]
    model: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Integrate paths and write one trajectory CSV per path.
    Simulate,
    /// Coupled fine/coarse mean-square error over time.
    StrongError,
    /// Log-log regression of terminal RMS error against step size.
    Rate,
    /// K-S stabilization and coupled distance decay.
    Invariant,
    /// Time averages from several initial segments.
    Ergodicity,
    /// Ensemble mean, variance and absolute moment per node.
    Moments,
    /// Audit the structural inequalities for the configured constants.
    Check,
}

enum Failure {
    Lib(Error),
    Audit(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Json(_) => 2,
        e if e.is_numerical() => 3,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let overrides = Overrides {
        model: cli.model.clone(),
        seed: cli.seed,
        paths: cli.paths,
        threads: cli.threads,
        out: cli.out.clone(),
    };
    let result = RunConfig::load(cli.config.as_deref()).map_err(Failure::from).and_then(|mut cfg| {
        cfg.apply(&overrides);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads.unwrap_or(0))
            .build()
            .map_err(|e| Failure::Lib(Error::Usage(format!("cannot start worker pool: {e}"))))?;
        pool.install(|| dispatch(cli.command, &cfg))
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(Failure::Audit(summary)) => {
            eprintln!("audit: {summary}");
            4
        }
    }
}

fn dispatch(cmd: Command, cfg: &RunConfig) -> Result<(), Failure> {
    let model = cfg.model()?;
    let tau = model.tau();
    let consts = cfg.constants.as_ref();
    cfg.solver.validate()?;
    match cmd {
        Command::Simulate => simulate(cfg, cfg.section(Section::Simulate, tau)?)?,
        Command::StrongError => {
            let c: StrongErrorConfig = cfg.section(Section::StrongError, tau)?;
            check_step_size(c.delta, consts)?;
            let r = run_strong_error(&model, &c, &cfg.solver)?;
            println!(
                "max e_strong/delta: (0, T/2] {:.6e}  (T/2, T] {:.6e}",
                r.max_ratio(0.0, r.horizon / 2.0),
                r.max_ratio(r.horizon / 2.0, r.horizon)
            );
            emit(&r, cfg)?;
        }
        Command::Rate => {
            let c: RateConfig = cfg.section(Section::Rate, tau)?;
            c.validate()?;
            for &d in &c.deltas {
                check_step_size(d, consts)?;
            }
            let r = run_rate_regression(&model, &c, &cfg.solver)?;
            for e in &r.entries {
                println!("delta {:.6e}  rms {:.6e}", e.delta, e.rms);
            }
            println!("slope {:.6}  intercept {:.6}", r.slope, r.intercept);
            emit(&r, cfg)?;
        }
        Command::Invariant => {
            let c: InvariantConfig = cfg.section(Section::Invariant, tau)?;
            check_step_size(c.delta, consts)?;
            let r = run_invariant_study(&model, &c, &cfg.solver)?;
            for (t, d) in r.compare_times.iter().zip(&r.ks) {
                println!("ks t={t}  {d:.6}");
            }
            if let (Some(first), Some(last)) = (r.dl_bound.first(), r.dl_bound.last()) {
                println!("dl bound: {first:.6e} -> {last:.6e}");
            }
            emit(&r, cfg)?;
        }
        Command::Ergodicity => {
            let c: ErgodicityConfig = cfg.section(Section::Ergodicity, tau)?;
            check_step_size(c.delta, consts)?;
            let r = run_ergodicity(&model, &c, &cfg.solver)?;
            for (obs, s) in &r.terminal_spread {
                println!("terminal spread {obs}: {s:.6e}");
            }
            emit(&r, cfg)?;
        }
        Command::Moments => {
            let c: MomentConfig = cfg.section(Section::Moments, tau)?;
            check_step_size(c.delta, consts)?;
            let r = run_moments(&model, &c, &cfg.solver)?;
            let last = r.times.len() - 1;
            println!(
                "t={}  mean {:.6e}  variance {:.6e}  E|X|^{} {:.6e}",
                r.times[last], r.mean[last], r.variance[last], r.p, r.abs_moment[last]
            );
            emit(&r, cfg)?;
        }
        Command::Check => {
            let c = cfg.constants_for(&model)?;
            let report = audit_all(&model, &c, &cfg.audit)?;
            for e in &report.entries {
                println!(
                    "{:<20} margin {:+.6e} {}",
                    e.id,
                    e.margin,
                    if e.violated { "VIOLATED" } else { "ok" }
                );
            }
            for h in &report.header {
                println!("{:<26} ({} vs {}) {}", h.id, h.lhs, h.rhs, if h.holds { "ok" } else { "VIOLATED" });
            }
            let dir = cfg.out_dir();
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            let path = dir.join(format!("check_{}_seed{}.json", sanitize(&report.model), cfg.audit.seed));
            let mut w = BufWriter::new(File::create(&path).map_err(Error::from)?);
            serde_json::to_writer_pretty(&mut w, &report).map_err(Error::from)?;
            writeln!(w).and_then(|_| w.flush()).map_err(Error::from)?;
            println!("{}", report.summary);
            println!("wrote {}", path.display());
            if !report.passed() {
                return Err(Failure::Audit(report.summary));
            }
        }
    }
    Ok(())
}

fn emit<R: Report>(r: &R, cfg: &RunConfig) -> Result<(), Error> {
    for p in write_report(r, &cfg.out_dir())? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn simulate(cfg: &RunConfig, c: SimulateConfig) -> Result<(), Error> {
    let model = cfg.model()?;
    let grid = TimeGrid::from_step(model.tau(), c.delta, c.horizon)?;
    if c.paths == 0 {
        return Err(Error::Usage("path count must be positive".into()));
    }
    check_step_size(c.delta, cfg.constants.as_ref())?;
    use rayon::prelude::*;
    let runs: Vec<Result<Trajectory, Error>> = (0..c.paths)
        .into_par_iter()
        .map(|i| {
            let inc = path_increments(c.seed, i as u64, &grid, model.noise_dim());
            integrate(&model, &grid, &inc, &cfg.solver)
        })
        .collect();
    let runs: Vec<Trajectory> = runs.into_iter().collect::<Result<_, _>>()?;

    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir)?;
    let stem = report_stem("simulate", model.name(), c.seed, grid.delta(), grid.horizon());
    for (i, t) in runs.iter().enumerate() {
        let path = dir.join(format!("{stem}_path{i}.csv"));
        let mut w = BufWriter::new(File::create(&path)?);
        t.write_csv(&mut w)?;
        w.flush()?;
        info!("wrote {}", path.display());
    }
    let finals: Vec<f64> = runs.iter().map(|t| t.node(grid.n() as i64)[0]).collect();
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = if finals.len() > 1 {
        finals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let min = finals.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "{} paths, {} nodes each, X(T) at T={}: mean {mean:.6e}  std {:.6e}  min {min:.6e}  max {max:.6e}",
        runs.len(),
        grid.node_count(),
        grid.horizon(),
        var.sqrt()
    );
    println!("wrote {} files to {}", runs.len(), dir.display());
    Ok(())
}
