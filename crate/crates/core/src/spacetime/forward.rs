use super::kkt::StepOperators;
use super::{norm2, Parameters};
use crate::error::{Error, Result};
use crate::operators::AffineOperatorSet;
use crate::sparse::{solve_sparse, TripletBuilder};

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Per-step stopping test: `‖r‖ ≤ tol · max(1, ‖M h_{k-1}‖)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 25 }
    }
}

/// State trajectory `(v_k, h_k)`, `k = 1..N_t`, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct StateTrajectory {
    pub nv: usize,
    pub nh: usize,
    pub nt: usize,
    pub v: Vec<f64>,
    pub h: Vec<f64>,
}

impl StateTrajectory {
    pub fn v_step(&self, k: usize) -> &[f64] {
        &self.v[k * self.nv..(k + 1) * self.nv]
    }

    pub fn h_step(&self, k: usize) -> &[f64] {
        &self.h[k * self.nh..(k + 1) * self.nh]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.v.iter_mut().chain(out.h.iter_mut()).for_each(|x| *x *= s);
        out
    }
}

/// Backward Euler march of the state equation with Newton on each step.
/// `u` is the time-major control; `None` means no forcing.
pub fn uncontrolled_forward_solve(
    ops: &AffineOperatorSet,
    params: &Parameters,
    v0: &[f64],
    h0: &[f64],
    u: Option<&[f64]>,
    opts: &ForwardOptions,
) -> Result<StateTrajectory> {
    params.validate()?;
    let (nv, nh, nu, nt) = (ops.nv(), ops.nh(), ops.nu(), params.nt);
    if v0.len() != nv || h0.len() != nh {
        return Err(Error::Dimension {
            context: "forward solve initial condition",
            expected: nv + nh,
            got: v0.len() + h0.len(),
        });
    }
    if let Some(u) = u {
        if u.len() != nt * nu {
            return Err(Error::Dimension {
                context: "forward solve control",
                expected: nt * nu,
                got: u.len(),
            });
        }
    }
    let step = StepOperators::new(ops, params);
    let mut traj = StateTrajectory {
        nv,
        nh,
        nt,
        v: Vec::with_capacity(nt * nv),
        h: Vec::with_capacity(nt * nh),
    };
    let mut vp = v0.to_vec();
    let mut hp = h0.to_vec();
    for k in 0..nt {
        let uk = u.map(|u| &u[k * nu..(k + 1) * nu]);
        let scale = norm2(&ops.m_h.mul_vec(&hp)).max(1.0);
        let mut v = super::kkt::mask_vec(&vp, &step.free);
        let mut h = hp.clone();
        let mut converged = false;
        let mut res = f64::INFINITY;
        for it in 0..=opts.max_iter {
            let (rv, rh) = step.residual(&v, &h, uk, &vp, &hp);
            res = (norm2(&rv).powi(2) + norm2(&rh).powi(2)).sqrt();
            if res <= opts.tol * scale {
                converged = true;
                break;
            }
            if it == opts.max_iter || !res.is_finite() {
                break;
            }
            let (vv, hv, hh) = step.linearize(&v, &h);
            let mut jb = TripletBuilder::new(nv + nh, nv + nh);
            jb.push_block(0, 0, &vv, 1.0);
            jb.push_block(0, nv, &step.pd, 1.0);
            jb.push_block(nv, 0, &hv, 1.0);
            jb.push_block(nv, nv, &hh, 1.0);
            let rhs: Vec<f64> = rv.iter().chain(&rh).map(|x| -x).collect();
            let dz = solve_sparse(&jb.finish(), &rhs)?;
            v.iter_mut().zip(&dz[..nv]).for_each(|(a, b)| *a += b);
            h.iter_mut().zip(&dz[nv..]).for_each(|(a, b)| *a += b);
        }
        if !converged {
            return Err(Error::ForwardStep {
                step: k + 1,
                iterations: opts.max_iter,
                residual: res,
            });
        }
        traj.v.extend_from_slice(&v);
        traj.h.extend_from_slice(&h);
        vp = v;
        hp = h;
    }
    Ok(traj)
}
