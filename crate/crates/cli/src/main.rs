use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use swe_ocp::bench::{error_sweep, measure_speedup, write_timings_csv};
use swe_ocp::config::{parse_config, Config};
use swe_ocp::geometry::build_structured_mesh;
use swe_ocp::pipeline::{load_rom, run_offline, truth_model, Workdir};
use swe_ocp::pod::{sample_parameters, InnerProducts};
use swe_ocp::rom::online_solve;
use swe_ocp::validate::run_checks;

/// Space-time optimal control of the parametrized shallow water equations
/// with a POD-Galerkin reduced model.
#[derive(Parser, Debug)]
#[command(name = "swe-ocp", version)]
struct Cli {
    /// Configuration file; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parameter sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the full optimality system and dump the fields.
    Truth {
        #[arg(long, value_parser = parse_mu)]
        mu: Option<[f64; 3]>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample, solve, compress and project; writes the reduced model.
    Offline {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "N")]
        n: Option<usize>,
    },
    /// Solve the reduced system and dump the reconstruction.
    Online {
        #[arg(long, value_parser = parse_mu)]
        mu: Option<[f64; 3]>,
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property checks.
    Validate {
        #[arg(long, value_parser = parse_mu)]
        mu: Option<[f64; 3]>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Error-versus-N sweep on a test set plus timings.
    Bench {
        #[arg(long = "N")]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn parse_mu(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| "expected three comma-separated values".to_string())
}

fn workdir(cfg: &Config) -> Workdir {
    let root = cfg
        .workdir
        .clone()
        .or_else(|| std::env::var_os("SWE_OCP_WORKDIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("swe_ocp_work"));
    Workdir::new(root)
}

fn default_mu(cfg: &Config) -> [f64; 3] {
    cfg.params.mu()
}

fn check_mu(cfg: &Config, mu: [f64; 3]) {
    if !cfg.pbox.contains(mu) {
        log::warn!("mu = {mu:?} lies outside the parameter box");
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => Config::default(),
    };
    if let Some(j) = cli.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global()?;
    }
    let wd = workdir(&cfg);
    match cli.command {
        Command::Truth { mu, out } => {
            let mu = mu.unwrap_or_else(|| default_mu(&cfg));
            check_mu(&cfg, mu);
            let model = truth_model(&cfg)?;
            let t = Instant::now();
            let sol = model.solve(mu).context("truth solve")?;
            let elapsed = t.elapsed().as_secs_f64();
            let cost = model.cost(mu, &sol.w)?;
            let out = out.unwrap_or_else(|| wd.root.join("truth"));
            sol.w.write_csv(&model.mesh, &out.join("truth"))?;
            println!(
                "truth mu = {mu:?}: {} iterations, residual {:.3e}, cost {cost:.10e}, {elapsed:.2} s",
                sol.iterations,
                sol.residual()
            );
            println!("fields written to {}", out.display());
        }
        Command::Offline { seed, n } => {
            let mut cfg = cfg.clone();
            if let Some(s) = seed {
                cfg.pod.seed = s;
            }
            if let Some(n) = n {
                cfg.pod.n = n;
            }
            cfg.validate()?;
            let model = truth_model(&cfg)?;
            let t = Instant::now();
            let a = run_offline(&model, &cfg)?;
            a.save(&wd, &cfg)?;
            println!(
                "offline: {} snapshots ({} failed), N = {}, reduced dimension {}, {:.1} s",
                a.snapshots.params.len(),
                a.snapshots.failed.len(),
                a.rom.n,
                a.rom.total_dim(),
                t.elapsed().as_secs_f64()
            );
            println!("artifacts written to {}", wd.root.display());
        }
        Command::Online { mu, n, out } => {
            let (rom, bases) = load_rom(&wd)?;
            let n = n.unwrap_or(rom.n);
            let rom = rom.truncate(n)?;
            let bases = bases.truncate(n)?;
            let mu = mu.unwrap_or_else(|| default_mu(&cfg));
            check_mu(&cfg, mu);
            let p = rom.base.with_mu(mu);
            let t = Instant::now();
            let sol = online_solve(&rom, &p, None, &cfg.newton)?;
            let elapsed = t.elapsed().as_secs_f64();
            let mesh = build_structured_mesh(&cfg.mesh)?;
            let w = bases.reconstruct(&sol.y)?;
            let out = out.unwrap_or_else(|| wd.root.join("online"));
            w.write_csv(&mesh, &out.join("online"))?;
            println!(
                "online mu = {mu:?}, N = {n}: {} iterations, residual {:.3e}, {:.3e} s",
                sol.iterations,
                sol.residual_history.last().copied().unwrap_or(f64::NAN),
                elapsed
            );
            println!("reconstruction written to {}", out.display());
        }
        Command::Validate { mu, seed } => {
            let mu = mu.unwrap_or_else(|| default_mu(&cfg));
            let model = truth_model(&cfg)?;
            let rom = match load_rom(&wd) {
                Ok(r) => Some(r),
                Err(swe_ocp::Error::MissingArtifact(p)) => {
                    info!("no reduced model at {}; reduced checks skipped", p.display());
                    None
                }
                Err(e) => return Err(e.into()),
            };
            let checks = run_checks(&model, mu, rom.as_ref().map(|(r, b)| (r, b)), seed.unwrap_or(cfg.pod.seed))?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                bail!("{failed} of {} checks failed", checks.len());
            }
        }
        Command::Bench { n, seed } => {
            let (rom, bases) = load_rom(&wd)?;
            let n_top = n.unwrap_or(rom.n).min(rom.n);
            let model = truth_model(&cfg)?;
            let test = sample_parameters(cfg.pod.test_size, &cfg.pbox, seed.unwrap_or(cfg.pod.test_seed))?;
            info!("solving {} test points", test.len());
            let truths: Vec<_> = test
                .params
                .par_iter()
                .map(|&mu| model.solve(mu).map(|s| (mu, s.w)))
                .collect::<Result<_, _>>()?;
            let ips = InnerProducts::new(&model.ops, model.base.dt(), model.base.nt);
            let n_list: Vec<usize> = (1..=n_top).collect();
            let report = error_sweep(&rom, &bases, &model, &truths, &n_list, &ips, &cfg.newton)?;
            let reports = wd.reports();
            std::fs::create_dir_all(&reports)?;
            report.write_csv(BufWriter::new(File::create(reports.join("errors.csv"))?))?;
            let timing_mus = &test.params[..test.len().min(3)];
            let rows = measure_speedup(&model, &rom, timing_mus, &n_list, 5)?;
            write_timings_csv(&rows, BufWriter::new(File::create(reports.join("timings.csv"))?))?;
            print_table(&report, &rows, &reports);
        }
    }
    Ok(())
}

fn print_table(report: &swe_ocp::bench::ErrorReport, rows: &[swe_ocp::bench::TimingRow], dir: &Path) {
    println!("{:>4} {:>10} {:>10} {:>10} {:>10} {:>10} {:>9}", "N", "v", "h", "u", "chi", "lambda", "speedup");
    for (r, t) in report.rows.iter().zip(rows) {
        let e = r.mean;
        println!(
            "{:>4} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>9.1}",
            r.n, e[0], e[1], e[2], e[3], e[4], t.speedup
        );
    }
    if !report.failures.is_empty() {
        println!("{} online solves failed", report.failures.len());
    }
    println!("reports written to {}", dir.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
