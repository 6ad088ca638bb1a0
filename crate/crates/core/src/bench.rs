//! Error metrics, error-versus-N sweeps and timing comparisons.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pod::InnerProducts;
use crate::rom::{online_solve, AggregatedBases, RomOperators};
use crate::sparse::SparseMatrix;
use crate::spacetime::{NewtonOptions, SpaceTimeVector, TruthModel, Var};

/// Relative errors of `[v, h, u, χ, λ]` in the Δt-weighted H¹/L² norms.
/// The absolute error is reported when the truth norm is below `1e-14`.
pub fn relative_errors(truth: &SpaceTimeVector, rom: &SpaceTimeVector, ips: &InnerProducts) -> Result<[f64; 5]> {
    if truth.layout != rom.layout {
        return Err(Error::Dimension {
            context: "error evaluation",
            expected: truth.layout.total(),
            got: rom.layout.total(),
        });
    }
    let mut out = [0.0; 5];
    for var in Var::ALL {
        let ip = ips.get(var);
        let t = truth.var(var);
        let diff: Vec<f64> = t.iter().zip(rom.var(var)).map(|(a, b)| a - b).collect();
        let e = ip.norm(&diff)?;
        let n = ip.norm(t)?;
        out[var.index()] = if n < 1e-14 { e } else { e / n };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorRow {
    pub n: usize,
    /// Mean over the successful test points.
    pub mean: [f64; 5],
    pub per_point: Vec<[f64; 5]>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
    /// `(N, μ, message)` for online solves that failed.
    pub failures: Vec<(usize, [f64; 3], String)>,
}

impl ErrorReport {
    pub fn row(&self, n: usize) -> Option<&ErrorRow> {
        self.rows.iter().find(|r| r.n == n)
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "N,err_v,err_h,err_u,err_chi,err_lambda")?;
        for r in &self.rows {
            let e = r.mean;
            writeln!(out, "{},{:e},{:e},{:e},{:e},{:e}", r.n, e[0], e[1], e[2], e[3], e[4])?;
        }
        Ok(())
    }
}

pub fn mean_errors(points: &[[f64; 5]]) -> [f64; 5] {
    let mut m = [0.0; 5];
    for p in points {
        for i in 0..5 {
            m[i] += p[i];
        }
    }
    m.map(|x| x / points.len().max(1) as f64)
}

/// Mean relative errors over `truths` for every `N` in `n_list`, using the
/// leading modes of the stored reduced model.
pub fn error_sweep(
    rom: &RomOperators,
    bases: &AggregatedBases,
    model: &TruthModel,
    truths: &[([f64; 3], SpaceTimeVector)],
    n_list: &[usize],
    ips: &InnerProducts,
    opts: &NewtonOptions,
) -> Result<ErrorReport> {
    let mut report = ErrorReport::default();
    for &n in n_list {
        let rom_n = rom.truncate(n)?;
        let z_n = bases.truncate(n)?;
        let results: Vec<_> = truths
            .par_iter()
            .map(|(mu, truth)| {
                let sol = online_solve(&rom_n, &model.params(*mu), None, opts)?;
                let w = z_n.reconstruct(&sol.y)?;
                relative_errors(truth, &w, ips)
            })
            .collect();
        let mut points = Vec::new();
        for ((mu, _), r) in truths.iter().zip(results) {
            match r {
                Ok(e) => points.push(e),
                Err(e) => {
                    log::warn!("online solve failed at N = {n}, mu = {mu:?}: {e}");
                    report.failures.push((n, *mu, e.to_string()));
                }
            }
        }
        report.rows.push(ErrorRow {
            n,
            mean: mean_errors(&points),
            per_point: points,
        });
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingRow {
    pub n: usize,
    pub truth_s: f64,
    pub online_s: f64,
    pub speedup: f64,
}

pub fn write_timings_csv(rows: &[TimingRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "N,truth_s,online_s,speedup")?;
    for r in rows {
        writeln!(out, "{},{:e},{:e},{:e}", r.n, r.truth_s, r.online_s, r.speedup)?;
    }
    Ok(())
}

/// Best-of-`repeats` wall time of one online solve, in seconds.
pub fn time_online(rom: &RomOperators, model: &TruthModel, mu: [f64; 3], repeats: usize, opts: &NewtonOptions) -> Result<f64> {
    let p = model.params(mu);
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        online_solve(rom, &p, None, opts)?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

/// Mean truth and online wall times over `mus`, on a single thread.
/// Offline work is not counted.
pub fn measure_speedup(
    model: &TruthModel,
    rom: &RomOperators,
    mus: &[[f64; 3]],
    n_list: &[usize],
    online_repeats: usize,
) -> Result<Vec<TimingRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Pipeline(e.to_string()))?;
    pool.install(|| {
        let mut truth_s = 0.0;
        for &mu in mus {
            let t = Instant::now();
            model.solve(mu)?;
            truth_s += t.elapsed().as_secs_f64();
        }
        truth_s /= mus.len().max(1) as f64;
        let mut rows = Vec::new();
        for &n in n_list {
            let rom_n = rom.truncate(n)?;
            let mut online_s = 0.0;
            for &mu in mus {
                online_s += time_online(&rom_n, model, mu, online_repeats, &model.newton)?;
            }
            online_s /= mus.len().max(1) as f64;
            rows.push(TimingRow {
                n,
                truth_s,
                online_s,
                speedup: truth_s / online_s,
            });
        }
        Ok(rows)
    })
}

/// `max_k |∫h_k − ∫h_0| / |∫h_0|` for a time-major height trajectory.
pub fn mass_conservation_check(m_h: &SparseMatrix, h0: &[f64], h: &[f64]) -> f64 {
    let ones = vec![1.0; h0.len()];
    let mass = |x: &[f64]| m_h.quad_form(&ones, x);
    let m0 = mass(h0);
    h.chunks(h0.len())
        .map(|hk| (mass(hk) - m0).abs() / m0.abs())
        .fold(0.0, f64::max)
}
