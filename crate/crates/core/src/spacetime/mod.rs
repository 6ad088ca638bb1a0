//! All-at-once space-time discretization of the optimality system.
//!
//! The unknown is `w = [v; h; u; χ; λ]`, each block time-major over the
//! steps `t_1 … t_{N_t}`. Backward Euler in time, P1 in space.

mod forward;
mod kkt;
mod model;
mod newton;

use std::cell::Cell;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

pub use forward::{uncontrolled_forward_solve, ForwardOptions, StateTrajectory};
pub use kkt::{evaluate_cost, KktSystem};
pub use model::TruthModel;
pub use newton::{default_initial_guess, truth_newton_solve, NewtonOptions, TruthSolution};

use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::operators::AffineOperatorSet;

thread_local! {
    static FULL_ORDER_ALLOCS: Cell<usize> = const { Cell::new(0) };
}

/// Number of full-order space-time vectors created on the current thread.
pub fn full_order_allocations() -> usize {
    FULL_ORDER_ALLOCS.with(|c| c.get())
}

fn count_full_order_alloc() {
    FULL_ORDER_ALLOCS.with(|c| c.set(c.get() + 1));
}

/// Axis-aligned box of admissible `(μ1, μ2, μ3)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParameterBox {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for ParameterBox {
    fn default() -> Self {
        Self {
            lo: [1e-5, 0.01, 0.1],
            hi: [1.0, 0.5, 1.0],
        }
    }
}

impl ParameterBox {
    pub fn contains(&self, mu: [f64; 3]) -> bool {
        (0..3).all(|i| mu[i] >= self.lo[i] && mu[i] <= self.hi[i])
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..3 {
            if !(self.hi[i] > self.lo[i]) {
                return Err(Error::Config(format!(
                    "parameter box: mu{} range [{}, {}] is empty",
                    i + 1,
                    self.lo[i],
                    self.hi[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Parameters {
    /// Diffusion coefficient.
    pub mu1: f64,
    /// Advection coefficient.
    pub mu2: f64,
    /// Scale of the desired profile.
    pub mu3: f64,
    /// Control penalization, in `(0, 1]`.
    pub alpha: f64,
    pub g: f64,
    pub t_final: f64,
    pub nt: usize,
}

impl Parameters {
    pub fn new(mu: [f64; 3], alpha: f64) -> Self {
        Self {
            mu1: mu[0],
            mu2: mu[1],
            mu3: mu[2],
            alpha,
            ..Self::default()
        }
    }

    pub fn with_mu(mut self, mu: [f64; 3]) -> Self {
        [self.mu1, self.mu2, self.mu3] = mu;
        self
    }

    pub fn mu(&self) -> [f64; 3] {
        [self.mu1, self.mu2, self.mu3]
    }

    pub fn dt(&self) -> f64 {
        self.t_final / self.nt as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.nt == 0 || !(self.t_final > 0.0) {
            return Err(Error::Config("time grid needs T > 0 and nt >= 1".into()));
        }
        if !(self.g > 0.0) {
            return Err(Error::Config(format!("gravity must be positive, got {}", self.g)));
        }
        if self.mu1 < 0.0 || self.mu2 < 0.0 {
            return Err(Error::Config("mu1 and mu2 must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for Parameters {
    fn default() -> Self {
        Self {
            mu1: 0.1,
            mu2: 0.5,
            mu3: 1.0,
            alpha: 0.1,
            g: 9.81,
            t_final: 0.8,
            nt: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    V,
    H,
    U,
    Chi,
    Lambda,
}

impl Var {
    pub const ALL: [Var; 5] = [Var::V, Var::H, Var::U, Var::Chi, Var::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            Var::V => "v",
            Var::H => "h",
            Var::U => "u",
            Var::Chi => "chi",
            Var::Lambda => "lambda",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Velocity-type variables are measured in H¹, the rest in L².
    pub fn is_velocity_type(self) -> bool {
        matches!(self, Var::V | Var::Chi)
    }
}

/// Block sizes and offsets of the space-time unknown.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpaceTimeLayout {
    pub nv: usize,
    pub nh: usize,
    pub nu: usize,
    pub nt: usize,
}

impl SpaceTimeLayout {
    pub fn new(ops: &AffineOperatorSet, nt: usize) -> Self {
        Self {
            nv: ops.nv(),
            nh: ops.nh(),
            nu: ops.nu(),
            nt,
        }
    }

    pub fn spatial(&self, var: Var) -> usize {
        match var {
            Var::V | Var::Chi => self.nv,
            Var::H | Var::Lambda => self.nh,
            Var::U => self.nu,
        }
    }

    pub fn block_len(&self, var: Var) -> usize {
        self.nt * self.spatial(var)
    }

    pub fn offset(&self, var: Var) -> usize {
        Var::ALL
            .iter()
            .take_while(|&&v| v != var)
            .map(|&v| self.block_len(v))
            .sum()
    }

    pub fn block(&self, var: Var) -> Range<usize> {
        let o = self.offset(var);
        o..o + self.block_len(var)
    }

    /// Global range of step `k` (0-based, i.e. time `t_{k+1}`).
    pub fn step(&self, var: Var, k: usize) -> Range<usize> {
        let n = self.spatial(var);
        let o = self.offset(var) + k * n;
        o..o + n
    }

    pub fn total(&self) -> usize {
        self.nt * (2 * self.nv + 2 * self.nh + self.nu)
    }

    /// Length of the state/control part `[v; h; u]`.
    pub fn primal_len(&self) -> usize {
        self.nt * (self.nv + self.nh + self.nu)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeVector {
    pub layout: SpaceTimeLayout,
    pub data: Vec<f64>,
}

impl SpaceTimeVector {
    pub fn zeros(layout: SpaceTimeLayout) -> Self {
        count_full_order_alloc();
        Self {
            layout,
            data: vec![0.0; layout.total()],
        }
    }

    pub fn from_vec(layout: SpaceTimeLayout, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total() {
            return Err(Error::Dimension {
                context: "space-time vector",
                expected: layout.total(),
                got: data.len(),
            });
        }
        count_full_order_alloc();
        Ok(Self { layout, data })
    }

    pub fn var(&self, var: Var) -> &[f64] {
        &self.data[self.layout.block(var)]
    }

    pub fn var_mut(&mut self, var: Var) -> &mut [f64] {
        let r = self.layout.block(var);
        &mut self.data[r]
    }

    pub fn step(&self, var: Var, k: usize) -> &[f64] {
        &self.data[self.layout.step(var, k)]
    }

    pub fn step_mut(&mut self, var: Var, k: usize) -> &mut [f64] {
        let r = self.layout.step(var, k);
        &mut self.data[r]
    }

    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|x| *x *= s);
        out
    }

    /// One CSV file per time step, named `<prefix>_t<k>.csv` with `k = 1..=N_t`.
    pub fn write_csv(&self, mesh: &Mesh, prefix: &Path) -> Result<()> {
        if let Some(dir) = prefix.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let stem = prefix
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for k in 0..self.layout.nt {
            let path = prefix.with_file_name(format!("{stem}_t{}.csv", k + 1));
            let mut out = BufWriter::new(File::create(path)?);
            writeln!(out, "x,y,vx,vy,h,ux,uy,chix,chiy,lambda")?;
            let (v, h, u, chi, lam) = (
                self.step(Var::V, k),
                self.step(Var::H, k),
                self.step(Var::U, k),
                self.step(Var::Chi, k),
                self.step(Var::Lambda, k),
            );
            for (i, p) in mesh.vertices.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                    p[0],
                    p[1],
                    v[2 * i],
                    v[2 * i + 1],
                    h[i],
                    u[2 * i],
                    u[2 * i + 1],
                    chi[2 * i],
                    chi[2 * i + 1],
                    lam[i]
                )?;
            }
            out.flush()?;
        }
        Ok(())
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Initial water surface: a Gaussian mound on a 0.2 base, at rest.
pub fn initial_conditions(mesh: &Mesh) -> (Vec<f64>, Vec<f64>) {
    let v0 = vec![0.0; 2 * mesh.n_vertices()];
    let h0 = mesh.interpolate(|x, y| 0.2 * (1.0 + 5.0 * gaussian(x, y)));
    (v0, h0)
}

/// Initial elevation of the reference (desired) trajectory.
pub fn desired_initial_height(mesh: &Mesh) -> Vec<f64> {
    mesh.interpolate(|x, y| 2.0 * gaussian(x, y))
}

fn gaussian(x: f64, y: f64) -> f64 {
    (-(x - 5.0).powi(2) - (y - 5.0).powi(2) + 1.0).exp()
}

/// Desired state trajectory and initial data of one optimal control problem.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub v0: Vec<f64>,
    pub h0: Vec<f64>,
    /// Desired velocity, time-major over `N_t` steps.
    pub vd: Vec<f64>,
    /// Desired height, time-major over `N_t` steps.
    pub hd: Vec<f64>,
}

impl ProblemData {
    pub fn new(v0: Vec<f64>, h0: Vec<f64>, desired: &StateTrajectory) -> Self {
        Self {
            v0,
            h0,
            vd: desired.v.clone(),
            hd: desired.h.clone(),
        }
    }

    pub fn check(&self, layout: &SpaceTimeLayout) -> Result<()> {
        let checks = [
            ("initial velocity", layout.nv, self.v0.len()),
            ("initial height", layout.nh, self.h0.len()),
            ("desired velocity", layout.nt * layout.nv, self.vd.len()),
            ("desired height", layout.nt * layout.nh, self.hd.len()),
        ];
        for (context, expected, got) in checks {
            if expected != got {
                return Err(Error::Dimension { context, expected, got });
            }
        }
        Ok(())
    }
}

/// Which trajectory the desired profile is built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DesiredMode {
    /// One trajectory computed at fixed reference `(μ1, μ2)`, scaled by `μ3`.
    Fixed { mu1: f64, mu2: f64 },
    /// Recomputed at every parameter's own `(μ1, μ2)`, scaled by `μ3`.
    PerParameter,
}

impl Default for DesiredMode {
    fn default() -> Self {
        DesiredMode::Fixed { mu1: 0.1, mu2: 0.5 }
    }
}

/// `μ3 ×` the uncontrolled trajectory started from the desired initial
/// elevation at rest.
pub fn desired_profile(
    mu3: f64,
    mesh: &Mesh,
    ops: &AffineOperatorSet,
    params: &Parameters,
    opts: &ForwardOptions,
) -> Result<StateTrajectory> {
    let v0 = vec![0.0; ops.nv()];
    let hd0 = desired_initial_height(mesh);
    let base = uncontrolled_forward_solve(ops, params, &v0, &hd0, None, opts)?;
    Ok(base.scaled(mu3))
}
