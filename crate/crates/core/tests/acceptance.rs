//! Acceptance suite on the default 15×15 mesh with eight time steps.
//!
//! Prints one `PASS`/`FAIL` line per criterion and fails if any criterion does.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use swe_ocp::bench::measure_speedup;
use swe_ocp::config::Config;
use swe_ocp::geometry::MeshConfig;
use swe_ocp::pipeline::{run_offline, truth_model, OfflineArtifacts};
use swe_ocp::pod::sample_parameters;
use swe_ocp::rom::{online_solve, AggregatedBases, ReducedVector, RomOperators};
use swe_ocp::sparse::SparseMatrix;
use swe_ocp::spacetime::{
    uncontrolled_forward_solve, KktSystem, ProblemData, SpaceTimeVector, TruthModel, Var,
};

fn report(lines: &mut Vec<(usize, bool, String)>, id: usize, ok: bool, detail: String) {
    let tag = if ok { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "criterion {id}: {tag} {detail}");
    let _ = out.flush();
    lines.push((id, ok, detail));
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `Δt Σ_k x_kᵀ X x_k` with `X = M + K` for velocity-type and `M` otherwise.
struct Norms {
    x_v: SparseMatrix,
    x_h: SparseMatrix,
    x_u: SparseMatrix,
    dt: f64,
}

impl Norms {
    fn new(model: &TruthModel) -> Self {
        let o = &model.ops;
        Self {
            x_v: o.m_v.lin_comb(1.0, &o.k, 1.0),
            x_h: o.m_h.clone(),
            x_u: o.m_u.clone(),
            dt: model.base.dt(),
        }
    }

    fn gram(&self, var: Var) -> &SparseMatrix {
        match var {
            Var::V | Var::Chi => &self.x_v,
            Var::H | Var::Lambda => &self.x_h,
            Var::U => &self.x_u,
        }
    }

    fn sq(&self, var: Var, x: &[f64]) -> f64 {
        let g = self.gram(var);
        x.chunks(g.rows()).map(|xk| self.dt * g.quad_form(xk, xk)).sum()
    }

    fn rel(&self, truth: &SpaceTimeVector, approx: &SpaceTimeVector) -> [f64; 5] {
        let mut out = [0.0; 5];
        for var in Var::ALL {
            let d: Vec<f64> = truth.var(var).iter().zip(approx.var(var)).map(|(a, b)| a - b).collect();
            let t = self.sq(var, truth.var(var)).sqrt();
            let e = self.sq(var, &d).sqrt();
            out[var.index()] = if t < 1e-14 { e } else { e / t };
        }
        out
    }
}

fn mass_drift(m: &SparseMatrix, h0: &[f64], h: &[f64]) -> f64 {
    let ones = vec![1.0; h0.len()];
    let m0 = m.quad_form(&ones, h0);
    h.chunks(h0.len()).map(|hk| ((m.quad_form(&ones, hk) - m0) / m0).abs()).fold(0.0, f64::max)
}

fn optimality_gap(alpha: f64, w: &SpaceTimeVector) -> f64 {
    w.var(Var::U)
        .iter()
        .zip(w.var(Var::Chi))
        .map(|(u, c)| (alpha * u - c).abs())
        .fold(0.0, f64::max)
}

fn feasible_cost(model: &TruthModel, mu: [f64; 3], u: Option<&[f64]>) -> f64 {
    let p = model.params(mu);
    let traj = uncontrolled_forward_solve(&model.ops, &p, &model.v0, &model.h0, u, &model.forward).unwrap();
    let mut w = SpaceTimeVector::zeros(model.layout());
    w.var_mut(Var::V).copy_from_slice(&traj.v);
    w.var_mut(Var::H).copy_from_slice(&traj.h);
    if let Some(u) = u {
        w.var_mut(Var::U).copy_from_slice(u);
    }
    model.cost(mu, &w).unwrap()
}

fn projected_jacobian(j: &SparseMatrix, z: &AggregatedBases, dim: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dim, dim);
    for c in 0..dim {
        let mut e = ReducedVector::zeros(z.n);
        e.data[c] = 1.0;
        let ze = z.reconstruct(&e).unwrap();
        let jz = SpaceTimeVector::from_vec(ze.layout, j.mul_vec(&ze.data)).unwrap();
        out.set_column(c, &z.restrict(&jz).unwrap().data);
    }
    out
}

// Median online times of two models, measured alternately so both see the
// same machine state.
fn paired_online_times(models: [(&RomOperators, &TruthModel); 2], mu: [f64; 3], repeats: usize) -> [f64; 2] {
    let solve = |(rom, model): (&RomOperators, &TruthModel)| {
        let p = model.params(mu);
        let t = Instant::now();
        online_solve(rom, &p, None, &model.newton).unwrap();
        t.elapsed().as_secs_f64()
    };
    for _ in 0..10 {
        let _ = models.map(solve);
    }
    let mut times = [Vec::with_capacity(repeats), Vec::with_capacity(repeats)];
    for _ in 0..repeats {
        for (i, m) in models.into_iter().enumerate() {
            times[i].push(solve(m));
        }
    }
    times.map(|mut t| {
        t.sort_by(f64::total_cmp);
        t[repeats / 2]
    })
}

fn small_offline(cells: usize) -> (TruthModel, OfflineArtifacts) {
    let mut cfg = Config::default();
    cfg.mesh = MeshConfig::square(10.0, cells);
    cfg.pod.n_max = 6;
    cfg.pod.n = 5;
    let model = truth_model(&cfg).unwrap();
    let a = run_offline(&model, &cfg).unwrap();
    (model, a)
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut cfg = Config::default();
    cfg.pod.n_max = 20;
    cfg.pod.n = 20;
    let model = truth_model(&cfg).unwrap();
    let norms = Norms::new(&model);
    let alpha = model.base.alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut opt_gap: f64 = 0.0;
    let mut drift: f64 = 0.0;

    // 1. trivial tracking
    {
        let mu = [0.1, 0.5, 1.0];
        let t = Instant::now();
        let unc = model.uncontrolled(mu).unwrap();
        let data = ProblemData::new(model.v0.clone(), model.h0.clone(), &unc);
        let result = model.solve_with(mu, &data);
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(sol) => {
                let mults = [Var::U, Var::Chi, Var::Lambda].map(|v| norm(sol.w.var(v)));
                let ok = mults.iter().all(|&m| m < 1e-8) && sol.residual() < 1e-9 && secs < 60.0;
                report(
                    &mut lines,
                    1,
                    ok,
                    format!(
                        "|u|={:.1e} |chi|={:.1e} |lambda|={:.1e} (< 1e-8), residual {:.1e} (< 1e-9), {secs:.1} s (< 60 s)",
                        mults[0],
                        mults[1],
                        mults[2],
                        sol.residual()
                    ),
                );
            }
            Err(e) => report(&mut lines, 1, false, format!("solve failed: {e}")),
        }
    }

    // 2. Jacobian against central differences
    {
        let mut worst: f64 = 0.0;
        for _ in 0..3 {
            let mu = [rng.random_range(1e-5..1.0), rng.random_range(0.01..0.5), rng.random_range(0.1..1.0)];
            let data = model.problem_data(mu).unwrap();
            let sys = KktSystem::new(&model.ops, model.params(mu), &data).unwrap();
            for _ in 0..5 {
                let mut w = SpaceTimeVector::zeros(model.layout());
                w.data.iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1));
                for k in 0..model.base.nt {
                    w.step_mut(Var::H, k).iter_mut().zip(&model.h0).for_each(|(x, h)| *x += h);
                }
                let d: Vec<f64> = (0..w.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let eps = 1e-6;
                let at = |s: f64| {
                    let mut x = w.clone();
                    x.data.iter_mut().zip(&d).for_each(|(a, b)| *a += s * b);
                    sys.residual(&x).unwrap()
                };
                let (rp, rm) = (at(eps), at(-eps));
                let jd = sys.jacobian(&w).unwrap().mul_vec(&d);
                let diff: Vec<f64> = (0..jd.len()).map(|i| (rp.data[i] - rm.data[i]) / (2.0 * eps) - jd[i]).collect();
                worst = worst.max(norm(&diff) / norm(&jd));
            }
        }
        report(&mut lines, 2, worst < 1e-6, format!("max relative FD mismatch {worst:.2e} (< 1e-6) over 5 states x 3 parameters"));
    }

    let t = Instant::now();
    let offline = run_offline(&model, &cfg).unwrap();
    let offline_s = t.elapsed().as_secs_f64();
    let (rom, z) = (&offline.rom, &offline.bases);
    for j in 0..offline.snapshots.params.len() {
        let w = offline.snapshots.column(j, model.layout()).unwrap();
        opt_gap = opt_gap.max(optimality_gap(alpha, &w));
        drift = drift.max(mass_drift(&model.ops.m_h, &model.h0, w.var(Var::H)));
    }

    // 3. projection residual against the eigenvalue tail
    {
        let mut worst: f64 = 0.0;
        for (var, pod) in Var::ALL.iter().zip(&offline.pods) {
            let s = &offline.snapshots.matrix(*var).data;
            let g = norms.gram(*var);
            let n_sp = g.rows();
            let apply = |x: &[f64]| -> Vec<f64> { x.chunks(n_sp).flat_map(|xk| g.mul_vec(xk)).map(|v| v * norms.dt).collect() };
            for n in [1, 2, 5, 10] {
                let basis = pod.basis.columns(0, n);
                let mut total = 0.0;
                for j in 0..s.ncols() {
                    let col = s.column(j);
                    let xs = nalgebra::DVector::from_vec(apply(col.as_slice()));
                    let coeff = basis.transpose() * xs;
                    let r = &col - &basis * coeff;
                    total += norms.sq(*var, r.as_slice());
                }
                let mean = total / s.ncols() as f64;
                let tail: f64 = pod.eigenvalues[n..].iter().sum();
                worst = worst.max((mean - tail).abs() / tail);
            }
        }
        report(&mut lines, 3, worst < 1e-8, format!("max relative gap {worst:.2e} (< 1e-8), N in {{1,2,5,10}}, N_max = 20"));
    }

    // 4. reduced system against the projected full system
    {
        let (mut res, mut jac): (f64, f64) = (0.0, 0.0);
        let mu = cfg.params.mu();
        let p = model.params(mu);
        let data = model.problem_data(mu).unwrap();
        let sys = KktSystem::new(&model.ops, p, &data).unwrap();
        for _ in 0..5 {
            let mut y = ReducedVector::zeros(rom.n);
            y.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            let w = z.reconstruct(&y).unwrap();
            let (r, j) = sys.residual_and_jacobian(&w).unwrap();
            let (rr, jr) = rom.reduced_system(&y, &p).unwrap();
            res = res.max((&rr - &z.restrict(&r).unwrap().data).amax());
            jac = jac.max((&jr - projected_jacobian(&j, z, rom.total_dim())).amax());
        }
        report(&mut lines, 4, res < 1e-10 && jac < 1e-10, format!("residual {res:.2e}, jacobian {jac:.2e} max-abs (< 1e-10), N = {}", rom.n));
    }

    // 5. training point reproduction
    {
        let mu = offline.snapshots.params[0];
        let truth = offline.snapshots.column(0, model.layout()).unwrap();
        let detail;
        let ok = match online_solve(rom, &model.params(mu), None, &model.newton) {
            Ok(sol) => {
                let e = norms.rel(&truth, &z.reconstruct(&sol.y).unwrap());
                detail = format!("relative errors {:.1e} {:.1e} {:.1e} {:.1e} {:.1e} (< 1e-6), N = {}", e[0], e[1], e[2], e[3], e[4], rom.n);
                e.iter().all(|&x| x < 1e-6)
            }
            Err(e) => {
                detail = format!("online solve failed: {e}");
                false
            }
        };
        report(&mut lines, 5, ok, detail);
    }

    // 6. error decay on a test set
    let test = sample_parameters(10, &cfg.pbox, cfg.pod.test_seed).unwrap();
    let truths: Vec<_> = test.params.par_iter().map(|&mu| (mu, model.solve(mu).unwrap().w)).collect();
    for (_, w) in &truths {
        opt_gap = opt_gap.max(optimality_gap(alpha, w));
        drift = drift.max(mass_drift(&model.ops.m_h, &model.h0, w.var(Var::H)));
    }
    {
        let mut means = Vec::new();
        let mut failures = 0;
        for n in 1..=rom.n {
            let (rn, zn) = (rom.truncate(n).unwrap(), z.truncate(n).unwrap());
            let mut acc = [0.0; 5];
            for (mu, truth) in &truths {
                match online_solve(&rn, &model.params(*mu), None, &model.newton) {
                    Ok(sol) => {
                        let e = norms.rel(truth, &zn.reconstruct(&sol.y).unwrap());
                        (0..5).for_each(|i| acc[i] += e[i] / truths.len() as f64);
                    }
                    Err(_) => failures += 1,
                }
            }
            means.push(acc);
        }
        let at10 = means[9];
        let monotone = means.windows(2).all(|w| (0..5).all(|i| w[1][i] <= 1.1 * w[0][i]));
        let ok = failures == 0 && at10.iter().all(|&e| e < 1e-2) && monotone;
        report(
            &mut lines,
            6,
            ok,
            format!(
                "N = 10 mean errors v {:.1e} h {:.1e} u {:.1e} chi {:.1e} lambda {:.1e} (< 1e-2), non-increasing within 10%: {monotone}, failed online solves: {failures}",
                at10[0], at10[1], at10[2], at10[3], at10[4]
            ),
        );
    }

    // 7. speedup and mesh independence of the online cost
    {
        let mu = test.params[0];
        let timing = measure_speedup(&model, rom, &[mu], &[rom.n], 21).unwrap()[0];
        let (truth_s, online, speedup) = (timing.truth_s, timing.online_s, timing.speedup);
        let (coarse_model, coarse) = small_offline(6);
        let (fine_model, fine) = small_offline(12);
        let n = coarse.rom.n.min(fine.rom.n);
        let (rc, rf) = (coarse.rom.truncate(n).unwrap(), fine.rom.truncate(n).unwrap());
        let [tc, tf] = paired_online_times([(&rc, &coarse_model), (&rf, &fine_model)], mu, 201);
        let ratio = tf.max(tc) / tf.min(tc);
        report(
            &mut lines,
            7,
            speedup >= 10.0 && ratio < 1.5,
            format!(
                "truth {truth_s:.2} s, online {online:.2e} s at N = {}, speedup {speedup:.0} (>= 10); online time ratio 6x6 vs 12x12 at N = {n}: {ratio:.2} (< 1.5); offline took {offline_s:.0} s",
                rom.n
            ),
        );
    }

    // 8. invariants over every truth solve so far plus the uncontrolled runs
    {
        for (mu, _) in &truths {
            let unc = model.uncontrolled(*mu).unwrap();
            drift = drift.max(mass_drift(&model.ops.m_h, &model.h0, &unc.h));
        }
        report(
            &mut lines,
            8,
            drift < 1e-10 && opt_gap < 1e-8,
            format!("mass drift {drift:.2e} (< 1e-10), max |alpha u - chi| {opt_gap:.2e} (< 1e-8) over {} optima", offline.snapshots.params.len() + truths.len()),
        );
    }

    // 9. cost domination
    {
        let n = 10;
        let (rn, zn) = (rom.truncate(n).unwrap(), z.truncate(n).unwrap());
        let (mut lower, mut upper): (f64, f64) = (f64::INFINITY, f64::NEG_INFINITY);
        for (mu, truth) in truths.iter().take(5) {
            let j_truth = model.cost(*mu, truth).unwrap();
            let sol = online_solve(&rn, &model.params(*mu), None, &model.newton).unwrap();
            let u = zn.reconstruct(&sol.y).unwrap();
            let j_rom = feasible_cost(&model, *mu, Some(u.var(Var::U)));
            let j_unc = feasible_cost(&model, *mu, None);
            lower = lower.min(j_rom - (j_truth - 1e-8));
            upper = upper.max(j_truth - j_unc);
        }
        report(
            &mut lines,
            9,
            lower >= 0.0 && upper <= 0.0,
            format!("min J(lifted ROM) - J(truth) + 1e-8 = {lower:.2e} (>= 0), max J(truth) - J(uncontrolled) = {upper:.2e} (<= 0), 5 parameters"),
        );
    }

    let failed: Vec<usize> = lines.iter().filter(|l| !l.1).map(|l| l.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
