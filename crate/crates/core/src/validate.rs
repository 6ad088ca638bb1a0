//! Property checks run by the `validate` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bench::mass_conservation_check;
use crate::error::Result;
use crate::rom::{AggregatedBases, ReducedVector, RomOperators};
use crate::spacetime::{norm2, DesiredMode, KktSystem, ProblemData, SpaceTimeVector, TruthModel, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tol: f64,
}

impl Check {
    fn new(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value < self.tol
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {:.3e} (tol {:.1e})", self.name, self.value, self.tol)
    }
}

fn random_state(model: &TruthModel, rng: &mut ChaCha8Rng) -> SpaceTimeVector {
    let layout = model.layout();
    let mut w = SpaceTimeVector::zeros(layout);
    for var in Var::ALL {
        for x in w.var_mut(var) {
            *x = rng.random_range(-0.1..0.1);
        }
    }
    for k in 0..layout.nt {
        for (x, h) in w.step_mut(Var::H, k).iter_mut().zip(&model.h0) {
            *x += h;
        }
    }
    w
}

/// Worst relative mismatch between central differences of the residual and
/// the assembled Jacobian along random directions.
pub fn jacobian_fd_error(sys: &KktSystem, w: &SpaceTimeVector, rng: &mut ChaCha8Rng, directions: usize) -> Result<f64> {
    let j = sys.jacobian(w)?;
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..directions {
        let d: Vec<f64> = (0..w.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let shift = |s: f64| {
            let mut x = w.clone();
            x.data.iter_mut().zip(&d).for_each(|(a, b)| *a += s * b);
            x
        };
        let rp = sys.residual(&shift(eps))?;
        let rm = sys.residual(&shift(-eps))?;
        let jd = j.mul_vec(&d);
        let diff: Vec<f64> = (0..jd.len())
            .map(|i| (rp.data[i] - rm.data[i]) / (2.0 * eps) - jd[i])
            .collect();
        worst = worst.max(norm2(&diff) / norm2(&jd));
    }
    Ok(worst)
}

/// Max-abs mismatch between the reduced residual/Jacobian and the projected
/// full-order ones at `y`.
pub fn reduced_oracle_error(
    model: &TruthModel,
    rom: &RomOperators,
    bases: &AggregatedBases,
    mu: [f64; 3],
    y: &ReducedVector,
) -> Result<(f64, f64)> {
    let p = model.params(mu);
    let data = model.problem_data(mu)?;
    let sys = KktSystem::new(&model.ops, p, &data)?;
    let w = bases.reconstruct(y)?;
    let (r, j) = sys.residual_and_jacobian(&w)?;
    let (rr, jr) = rom.reduced_system(y, &p)?;
    let r_proj = bases.restrict(&r)?;
    let res_err = (&rr - &r_proj.data).amax();
    let mut jac_err: f64 = 0.0;
    for c in 0..rom.total_dim() {
        let mut e = ReducedVector::zeros(rom.n);
        e.data[c] = 1.0;
        let ze = bases.reconstruct(&e)?;
        let jz = SpaceTimeVector::from_vec(ze.layout, j.mul_vec(&ze.data))?;
        let col = bases.restrict(&jz)?;
        jac_err = jac_err.max((jr.column(c) - &col.data).amax());
    }
    Ok((res_err, jac_err))
}

/// Default property suite at the configured parameter `mu`. Reduced checks
/// run only when offline artifacts are supplied.
pub fn run_checks(model: &TruthModel, mu: [f64; 3], rom: Option<(&RomOperators, &AggregatedBases)>, seed: u64) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let p = model.params(mu);

    let data = model.problem_data(mu)?;
    let sys = KktSystem::new(&model.ops, p, &data)?;
    let w = random_state(model, &mut rng);
    out.push(Check::new("jacobian finite differences", jacobian_fd_error(&sys, &w, &mut rng, 3)?, 1e-6));

    let unc = model.uncontrolled(mu)?;
    let tracking = ProblemData::new(model.v0.clone(), model.h0.clone(), &unc);
    let triv = model.solve_with(mu, &tracking)?;
    let adj = [Var::U, Var::Chi, Var::Lambda]
        .iter()
        .map(|&v| norm2(triv.w.var(v)))
        .fold(0.0, f64::max);
    out.push(Check::new("trivial tracking multipliers", adj, 1e-8));
    out.push(Check::new("trivial tracking residual", triv.residual(), 1e-9));

    let sol = model.solve_with(mu, &data)?;
    out.push(Check::new("mass drift uncontrolled", mass_conservation_check(&model.ops.m_h, &model.h0, &unc.h), 1e-10));
    out.push(Check::new(
        "mass drift controlled",
        mass_conservation_check(&model.ops.m_h, &model.h0, sol.w.var(Var::H)),
        1e-10,
    ));
    let opt = sol
        .w
        .var(Var::U)
        .iter()
        .zip(sol.w.var(Var::Chi))
        .map(|(u, c)| (p.alpha * u - c).abs())
        .fold(0.0, f64::max);
    out.push(Check::new("optimality relation", opt, 1e-8));
    let mut feasible = SpaceTimeVector::zeros(model.layout());
    feasible.var_mut(Var::V).copy_from_slice(&unc.v);
    feasible.var_mut(Var::H).copy_from_slice(&unc.h);
    let gap = sys.cost(&sol.w)? - sys.cost(&feasible)?;
    out.push(Check::new("optimum below uncontrolled cost", gap, 1e-8));

    if let Some((rom, bases)) = rom {
        if matches!(model.desired_mode, DesiredMode::Fixed { .. }) {
            let mut y = ReducedVector::zeros(rom.n);
            y.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            let (re, je) = reduced_oracle_error(model, rom, bases, mu, &y)?;
            out.push(Check::new("reduced residual projection", re, 1e-10));
            out.push(Check::new("reduced jacobian projection", je, 1e-10));
        } else {
            log::warn!("reduced projection checks need a fixed desired trajectory; skipped");
        }
    }
    Ok(out)
}
