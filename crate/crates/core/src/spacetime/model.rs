use super::{
    desired_profile, evaluate_cost, initial_conditions, truth_newton_solve, uncontrolled_forward_solve, DesiredMode,
    ForwardOptions, KktSystem, NewtonOptions, Parameters, ProblemData, SpaceTimeLayout, StateTrajectory,
    SpaceTimeVector, TruthSolution,
};
use crate::error::Result;
use crate::geometry::{build_structured_mesh, Mesh, MeshConfig};
use crate::operators::AffineOperatorSet;

/// Mesh, operators, initial data and solver settings shared by all truth
/// solves of a parameter study.
#[derive(Clone, Debug)]
pub struct TruthModel {
    pub mesh: Mesh,
    pub ops: AffineOperatorSet,
    /// `alpha`, `g`, `T`, `N_t`; the `μ` fields are overwritten per solve.
    pub base: Parameters,
    pub desired_mode: DesiredMode,
    pub forward: ForwardOptions,
    pub newton: NewtonOptions,
    pub v0: Vec<f64>,
    pub h0: Vec<f64>,
    /// Unscaled desired trajectory when it does not depend on `μ`.
    pub desired_base: Option<StateTrajectory>,
}

impl TruthModel {
    pub fn new(mesh_cfg: &MeshConfig, base: Parameters, desired_mode: DesiredMode) -> Result<Self> {
        Self::with_options(mesh_cfg, base, desired_mode, ForwardOptions::default(), NewtonOptions::default())
    }

    pub fn with_options(
        mesh_cfg: &MeshConfig,
        base: Parameters,
        desired_mode: DesiredMode,
        forward: ForwardOptions,
        newton: NewtonOptions,
    ) -> Result<Self> {
        base.validate()?;
        let mesh = build_structured_mesh(mesh_cfg)?;
        let ops = AffineOperatorSet::assemble(&mesh, base.g)?;
        let (v0, h0) = initial_conditions(&mesh);
        let desired_base = match desired_mode {
            DesiredMode::Fixed { mu1, mu2 } => {
                let p = base.with_mu([mu1, mu2, 1.0]);
                Some(desired_profile(1.0, &mesh, &ops, &p, &forward)?)
            }
            DesiredMode::PerParameter => None,
        };
        Ok(Self {
            mesh,
            ops,
            base,
            desired_mode,
            forward,
            newton,
            v0,
            h0,
            desired_base,
        })
    }

    pub fn params(&self, mu: [f64; 3]) -> Parameters {
        self.base.with_mu(mu)
    }

    pub fn layout(&self) -> SpaceTimeLayout {
        SpaceTimeLayout::new(&self.ops, self.base.nt)
    }

    /// Reference `(μ1, μ2)` of the desired trajectory, if it is fixed.
    pub fn reference_mu(&self) -> Option<[f64; 2]> {
        match self.desired_mode {
            DesiredMode::Fixed { mu1, mu2 } => Some([mu1, mu2]),
            DesiredMode::PerParameter => None,
        }
    }

    pub fn desired(&self, mu: [f64; 3]) -> Result<StateTrajectory> {
        match &self.desired_base {
            Some(base) => Ok(base.scaled(mu[2])),
            None => desired_profile(mu[2], &self.mesh, &self.ops, &self.params(mu), &self.forward),
        }
    }

    pub fn problem_data(&self, mu: [f64; 3]) -> Result<ProblemData> {
        Ok(ProblemData::new(self.v0.clone(), self.h0.clone(), &self.desired(mu)?))
    }

    pub fn uncontrolled(&self, mu: [f64; 3]) -> Result<StateTrajectory> {
        uncontrolled_forward_solve(&self.ops, &self.params(mu), &self.v0, &self.h0, None, &self.forward)
    }

    pub fn solve(&self, mu: [f64; 3]) -> Result<TruthSolution> {
        let data = self.problem_data(mu)?;
        self.solve_with(mu, &data)
    }

    pub fn solve_with(&self, mu: [f64; 3], data: &ProblemData) -> Result<TruthSolution> {
        let sys = KktSystem::new(&self.ops, self.params(mu), data)?;
        truth_newton_solve(&sys, None, &self.newton)
    }

    /// Cost of `w` at `mu`, with the desired trajectory of this model.
    pub fn cost(&self, mu: [f64; 3], w: &SpaceTimeVector) -> Result<f64> {
        let data = self.problem_data(mu)?;
        Ok(evaluate_cost(&self.ops, &self.params(mu), &data, w))
    }
}
