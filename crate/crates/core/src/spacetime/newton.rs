use super::forward::{uncontrolled_forward_solve, ForwardOptions};
use super::kkt::KktSystem;
use super::{SpaceTimeVector, Var};
use crate::error::{Error, Result};
use crate::sparse::SparseLu;

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    /// Extra steps with the last factorization after the stopping test
    /// passes, kept only while they reduce the residual.
    pub polish: usize,
    /// Maximum number of step halvings when a full step increases the residual.
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol_abs: 1e-10,
            tol_rel: 1e-8,
            max_iter: 20,
            polish: 1,
            max_halvings: 8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TruthSolution {
    pub w: SpaceTimeVector,
    pub iterations: usize,
    /// `‖R‖₂` at every iterate, starting with the initial guess.
    pub residual_history: Vec<f64>,
}

impl TruthSolution {
    pub fn residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&f64::NAN)
    }
}

/// Default starting point: uncontrolled state, zero control and multipliers.
pub fn default_initial_guess(sys: &KktSystem) -> Result<SpaceTimeVector> {
    let traj = uncontrolled_forward_solve(
        sys.ops(),
        &sys.params,
        &sys.data.v0,
        &sys.data.h0,
        None,
        &ForwardOptions::default(),
    )?;
    let mut w = SpaceTimeVector::zeros(sys.layout);
    w.var_mut(Var::V).copy_from_slice(&traj.v);
    w.var_mut(Var::H).copy_from_slice(&traj.h);
    Ok(w)
}

/// Newton iteration on the full optimality system with a sparse direct solve
/// per step.
pub fn truth_newton_solve(
    sys: &KktSystem,
    init: Option<SpaceTimeVector>,
    opts: &NewtonOptions,
) -> Result<TruthSolution> {
    let mut w = match init {
        Some(w) => w,
        None => default_initial_guess(sys)?,
    };
    let mut r = sys.residual(&w)?;
    let mut norm = r.norm();
    let tol = opts.tol_abs + opts.tol_rel * norm;
    let mut history = vec![norm];
    let mut iterations = 0;
    let mut last_lu = None;
    while norm > tol {
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                residual: norm,
                history,
            });
        }
        let lu = SparseLu::factor(&sys.jacobian(&w)?)?;
        let rhs: Vec<f64> = r.data.iter().map(|x| -x).collect();
        let dw = lu.solve(&rhs)?;
        let mut step = 1.0;
        let mut accepted = None;
        for h in 0..=opts.max_halvings {
            let mut trial = w.clone();
            trial.data.iter_mut().zip(&dw).for_each(|(a, b)| *a += step * b);
            let rt = sys.residual(&trial)?;
            let nt = rt.norm();
            if nt.is_finite() && (nt < norm || h == opts.max_halvings) {
                accepted = Some((trial, rt, nt));
                break;
            }
            step *= 0.5;
        }
        let Some((tw, tr, tn)) = accepted else {
            return Err(Error::NonConvergence {
                iterations,
                residual: norm,
                history,
            });
        };
        w = tw;
        r = tr;
        norm = tn;
        iterations += 1;
        history.push(norm);
        last_lu = Some(lu);
        log::debug!("newton iteration {iterations}: |R| = {norm:e} (step {step})");
    }
    // Simplified Newton steps with the last factorization.
    if let Some(lu) = &last_lu {
        for _ in 0..opts.polish {
            let rhs: Vec<f64> = r.data.iter().map(|x| -x).collect();
            let dw = lu.solve(&rhs)?;
            let mut trial = w.clone();
            trial.data.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            let rt = sys.residual(&trial)?;
            let nt = rt.norm();
            if !(nt < norm) {
                break;
            }
            w = trial;
            r = rt;
            norm = nt;
            history.push(norm);
        }
    }
    let hmin = w.var(Var::H).iter().copied().fold(f64::INFINITY, f64::min);
    if hmin <= 0.0 {
        log::warn!("water height is not positive after the truth solve (min {hmin:e})");
    }
    Ok(TruthSolution {
        w,
        iterations,
        residual_history: history,
    })
}
