use super::{Parameters, ProblemData, SpaceTimeLayout, SpaceTimeVector, Var};
use crate::error::{Error, Result};
use crate::operators::AffineOperatorSet;
use crate::sparse::{SparseMatrix, TripletBuilder};

/// Keeps the entries whose row and column pass the given masks.
pub(crate) fn mask_matrix(m: &SparseMatrix, rows: Option<&[bool]>, cols: Option<&[bool]>) -> SparseMatrix {
    let mut b = TripletBuilder::with_capacity(m.rows(), m.cols(), m.nnz());
    for (i, j, v) in m.iter() {
        if rows.is_none_or(|r| r[i]) && cols.is_none_or(|c| c[j]) {
            b.push(i, j, v);
        }
    }
    b.finish()
}

pub(crate) fn mask_vec(x: &[f64], free: &[bool]) -> Vec<f64> {
    x.iter().zip(free).map(|(&v, &f)| if f { v } else { 0.0 }).collect()
}

/// Parameter-dependent but state-independent pieces of one backward Euler step.
pub(crate) struct StepOperators<'a> {
    pub ops: &'a AffineOperatorSet,
    pub free: Vec<bool>,
    pub dt: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// `P M_v P`
    pub pmp: SparseMatrix,
    /// `P (M_v + Δt μ1 K) P`
    pub linear_vv: SparseMatrix,
    /// `Δt P D`
    pub pd: SparseMatrix,
    /// `-Δt P M_u`
    pub pmu: SparseMatrix,
}

impl<'a> StepOperators<'a> {
    pub fn new(ops: &'a AffineOperatorSet, params: &Parameters) -> Self {
        let free = ops.v_space.free_mask();
        let dt = params.dt();
        let f = Some(free.as_slice());
        let pmp = mask_matrix(&ops.m_v, f, f);
        let linear_vv = mask_matrix(&ops.m_v.lin_comb(1.0, &ops.k, dt * params.mu1), f, f);
        let pd = mask_matrix(&ops.d, f, None).scaled(dt);
        let pmu = mask_matrix(&ops.m_u, f, None).scaled(-dt);
        Self {
            ops,
            free,
            dt,
            mu1: params.mu1,
            mu2: params.mu2,
            pmp,
            linear_vv,
            pd,
            pmu,
        }
    }

    /// State residual of one step given the (unmasked) previous velocity.
    pub fn residual(
        &self,
        v: &[f64],
        h: &[f64],
        u: Option<&[f64]>,
        v_prev: &[f64],
        h_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let ops = self.ops;
        let vm = mask_vec(v, &self.free);
        let vm_prev = mask_vec(v_prev, &self.free);
        let dv: Vec<f64> = vm.iter().zip(&vm_prev).map(|(a, b)| a - b).collect();
        let mut rv = ops.m_v.mul_vec(&dv);
        ops.k.mul_vec_add(&vm, self.dt * self.mu1, &mut rv);
        if self.mu2 != 0.0 {
            ops.h(&vm).mul_vec_add(&vm, self.dt * self.mu2, &mut rv);
        }
        ops.d.mul_vec_add(h, self.dt, &mut rv);
        if let Some(u) = u {
            ops.m_u.mul_vec_add(u, -self.dt, &mut rv);
        }
        for (i, r) in rv.iter_mut().enumerate() {
            if !self.free[i] {
                *r = v[i];
            }
        }
        let dh: Vec<f64> = h.iter().zip(h_prev).map(|(a, b)| a - b).collect();
        let mut rh = ops.m_h.mul_vec(&dh);
        ops.g_mat(&vm).mul_vec_add(h, self.dt, &mut rh);
        (rv, rh)
    }

    /// Diagonal blocks of the linearized state step:
    /// `(v,v) = P(M + Δtμ1K + Δtμ2(H + H̄))P + I_c`, `(h,v) = Δt F(h) P`,
    /// `(h,h) = M_h + Δt G(vm)`.
    pub fn linearize(&self, v: &[f64], h: &[f64]) -> (SparseMatrix, SparseMatrix, SparseMatrix) {
        let ops = self.ops;
        let f = Some(self.free.as_slice());
        let vm = mask_vec(v, &self.free);
        let mut vv = TripletBuilder::new(ops.nv(), ops.nv());
        vv.push_block(0, 0, &self.linear_vv, 1.0);
        if self.mu2 != 0.0 {
            let conv = ops.h(&vm).lin_comb(1.0, &ops.h_bar(&vm), 1.0);
            vv.push_block(0, 0, &mask_matrix(&conv, f, f), self.dt * self.mu2);
        }
        for (i, &fr) in self.free.iter().enumerate() {
            if !fr {
                vv.push(i, i, 1.0);
            }
        }
        let hv = mask_matrix(&ops.f_mat(h), None, f).scaled(self.dt);
        let hh = ops.m_h.lin_comb(1.0, &ops.g_mat(&vm), self.dt);
        (vv.finish(), hv, hh)
    }
}

/// Optimality system `R(w) = 0` of the discrete Lagrangian
/// `L = J(v, h, u) + χᵀ S_v(v, h, u) + λᵀ S_h(v, h)`.
///
/// The residual is its exact gradient and the Jacobian its exact Hessian,
/// so the off-diagonal blocks are transposes of each other by construction.
pub struct KktSystem<'a> {
    step: StepOperators<'a>,
    pub params: Parameters,
    pub data: &'a ProblemData,
    pub layout: SpaceTimeLayout,
}

impl<'a> KktSystem<'a> {
    pub fn new(ops: &'a AffineOperatorSet, params: Parameters, data: &'a ProblemData) -> Result<Self> {
        params.validate()?;
        if (params.g - ops.g).abs() > 0.0 {
            return Err(Error::Config(format!(
                "gravity mismatch: parameters use {}, operators were assembled with {}",
                params.g, ops.g
            )));
        }
        let layout = SpaceTimeLayout::new(ops, params.nt);
        data.check(&layout)?;
        Ok(Self {
            step: StepOperators::new(ops, &params),
            params,
            data,
            layout,
        })
    }

    pub fn ops(&self) -> &AffineOperatorSet {
        self.step.ops
    }

    pub fn free_mask(&self) -> &[bool] {
        &self.step.free
    }

    fn check(&self, w: &SpaceTimeVector) -> Result<()> {
        if w.layout != self.layout {
            return Err(Error::Dimension {
                context: "space-time vector layout",
                expected: self.layout.total(),
                got: w.data.len(),
            });
        }
        Ok(())
    }

    fn row_offsets(&self) -> (usize, usize) {
        let l = &self.layout;
        (l.nt * l.nv, l.nt * (l.nv + l.nh))
    }

    /// State block `B(x)`: rows `[state-v; state-h]`, columns `[v; h; u]`.
    pub fn state_jacobian(&self, w: &SpaceTimeVector) -> Result<SparseMatrix> {
        self.check(w)?;
        let l = &self.layout;
        let (h_row0, rows) = self.row_offsets();
        let cols = l.primal_len();
        let (ov, oh, ou) = (l.offset(Var::V), l.offset(Var::H), l.offset(Var::U));
        let blocks: Vec<_> = (0..l.nt)
            .map(|k| self.step.linearize(w.step(Var::V, k), w.step(Var::H, k)))
            .collect();
        let mut b = TripletBuilder::new(rows, cols);
        for (k, (vv, hv, hh)) in blocks.iter().enumerate() {
            let (rv, rh) = (k * l.nv, h_row0 + k * l.nh);
            b.push_block(rv, ov + k * l.nv, vv, 1.0);
            b.push_block(rv, oh + k * l.nh, &self.step.pd, 1.0);
            b.push_block(rv, ou + k * l.nu, &self.step.pmu, 1.0);
            b.push_block(rh, ov + k * l.nv, hv, 1.0);
            b.push_block(rh, oh + k * l.nh, hh, 1.0);
            if k > 0 {
                b.push_block(rv, ov + (k - 1) * l.nv, &self.step.pmp, -1.0);
                b.push_block(rh, oh + (k - 1) * l.nh, &self.step.ops.m_h, -1.0);
            }
        }
        Ok(b.finish())
    }

    /// Right-hand side `f̄`: desired-state terms in the adjoint rows and the
    /// initial condition in the first state block.
    pub fn rhs(&self) -> SpaceTimeVector {
        let l = self.layout;
        let ops = self.step.ops;
        let dt = self.step.dt;
        let mut f = SpaceTimeVector::zeros(l);
        for k in 0..l.nt {
            let vd = &self.data.vd[k * l.nv..(k + 1) * l.nv];
            let hd = &self.data.hd[k * l.nh..(k + 1) * l.nh];
            let fv = self.step.pmp.mul_vec(vd);
            f.step_mut(Var::V, k).iter_mut().zip(fv).for_each(|(a, b)| *a = dt * b);
            let fh = ops.m_h.mul_vec(hd);
            f.step_mut(Var::H, k).iter_mut().zip(fh).for_each(|(a, b)| *a = dt * b);
        }
        let v0m = mask_vec(&self.data.v0, &self.step.free);
        f.step_mut(Var::Chi, 0).copy_from_slice(&self.step.pmp.mul_vec(&v0m));
        f.step_mut(Var::Lambda, 0).copy_from_slice(&ops.m_h.mul_vec(&self.data.h0));
        f
    }

    /// `R(w) = G(w) w − f̄`, rows `[adjoint-v; adjoint-h; optimality; state-v; state-h]`.
    pub fn residual(&self, w: &SpaceTimeVector) -> Result<SpaceTimeVector> {
        let b = self.state_jacobian(w)?;
        Ok(self.residual_with(w, &b))
    }

    fn residual_with(&self, w: &SpaceTimeVector, b: &SparseMatrix) -> SpaceTimeVector {
        let l = self.layout;
        let ops = self.step.ops;
        let dt = self.step.dt;
        let np = l.primal_len();
        let mut r = SpaceTimeVector::zeros(l);
        let f = self.rhs();
        let zero_v = vec![0.0; l.nv];
        let zero_h = vec![0.0; l.nh];
        {
            let (rx, rp) = r.data.split_at_mut(np);
            // gradient of the tracking and control terms
            for k in 0..l.nt {
                let vm = mask_vec(w.step(Var::V, k), &self.step.free);
                let gv = self.step.pmp.mul_vec(&vm);
                rx[l.step(Var::V, k)].iter_mut().zip(gv).for_each(|(a, b)| *a = dt * b);
                let gh = ops.m_h.mul_vec(w.step(Var::H, k));
                rx[l.step(Var::H, k)].iter_mut().zip(gh).for_each(|(a, b)| *a = dt * b);
                let gu = ops.m_u.mul_vec(w.step(Var::U, k));
                let a = self.params.alpha * dt;
                rx[l.step(Var::U, k)].iter_mut().zip(gu).for_each(|(x, y)| *x = a * y);
            }
            b.mul_transpose_vec_add(&w.data[np..], 1.0, rx);
            // state equations
            let h_row0 = l.nt * l.nv;
            for k in 0..l.nt {
                let (vp, hp) = if k == 0 {
                    (zero_v.as_slice(), zero_h.as_slice())
                } else {
                    (w.step(Var::V, k - 1), w.step(Var::H, k - 1))
                };
                let (sv, sh) = self.step.residual(
                    w.step(Var::V, k),
                    w.step(Var::H, k),
                    Some(w.step(Var::U, k)),
                    vp,
                    hp,
                );
                rp[k * l.nv..(k + 1) * l.nv].copy_from_slice(&sv);
                rp[h_row0 + k * l.nh..h_row0 + (k + 1) * l.nh].copy_from_slice(&sh);
            }
        }
        r.data.iter_mut().zip(&f.data).for_each(|(a, b)| *a -= b);
        r
    }

    /// Hessian of the Lagrangian with respect to `x = [v; h; u]`.
    pub fn hessian_block(&self, w: &SpaceTimeVector) -> Result<SparseMatrix> {
        self.check(w)?;
        let l = &self.layout;
        let ops = self.step.ops;
        let dt = self.step.dt;
        let f = Some(self.step.free.as_slice());
        let n = l.primal_len();
        let mut a = TripletBuilder::new(n, n);
        for k in 0..l.nt {
            let (ov, oh, ou) = (l.step(Var::V, k).start, l.step(Var::H, k).start, l.step(Var::U, k).start);
            a.push_block(ov, ov, &self.step.pmp, dt);
            if self.step.mu2 != 0.0 {
                let chi = mask_vec(w.step(Var::Chi, k), &self.step.free);
                let adv = mask_matrix(&ops.advection_hessian(&chi), f, f);
                a.push_block(ov, ov, &adv, dt * self.step.mu2);
            }
            let cont = mask_matrix(&ops.continuity_hessian(w.step(Var::Lambda, k)), None, f);
            a.push_block(oh, ov, &cont, dt);
            a.push_block_transposed(ov, oh, &cont, dt);
            a.push_block(oh, oh, &ops.m_h, dt);
            a.push_block(ou, ou, &ops.m_u, self.params.alpha * dt);
        }
        Ok(a.finish())
    }

    /// `J(w) = [[A, Bᵀ], [B, 0]]` with `Bᵀ` written from the same triplets as `B`.
    pub fn jacobian(&self, w: &SpaceTimeVector) -> Result<SparseMatrix> {
        let b = self.state_jacobian(w)?;
        self.jacobian_with(w, &b)
    }

    fn jacobian_with(&self, w: &SpaceTimeVector, b: &SparseMatrix) -> Result<SparseMatrix> {
        let a = self.hessian_block(w)?;
        let n = self.layout.total();
        let np = self.layout.primal_len();
        let mut j = TripletBuilder::with_capacity(n, n, a.nnz() + 2 * b.nnz());
        j.push_block(0, 0, &a, 1.0);
        j.push_block(np, 0, b, 1.0);
        j.push_block_transposed(0, np, b, 1.0);
        Ok(j.finish())
    }

    /// Residual and Jacobian sharing one linearization of the state block.
    pub fn residual_and_jacobian(&self, w: &SpaceTimeVector) -> Result<(SpaceTimeVector, SparseMatrix)> {
        let b = self.state_jacobian(w)?;
        let r = self.residual_with(w, &b);
        let j = self.jacobian_with(w, &b)?;
        Ok((r, j))
    }

    pub fn cost(&self, w: &SpaceTimeVector) -> Result<f64> {
        self.check(w)?;
        Ok(evaluate_cost(self.step.ops, &self.params, self.data, w))
    }
}

/// `J = ½Δt Σ_k [(v_k − v_d)ᵀM(v_k − v_d) + (h_k − h_d)ᵀM(h_k − h_d) + α u_kᵀ M u_k]`
pub fn evaluate_cost(ops: &AffineOperatorSet, params: &Parameters, data: &ProblemData, w: &SpaceTimeVector) -> f64 {
    let l = &w.layout;
    let free = ops.v_space.free_mask();
    let dt = params.dt();
    let mut total = 0.0;
    for k in 0..l.nt {
        let vm = mask_vec(w.step(Var::V, k), &free);
        let ev: Vec<f64> = vm.iter().zip(&data.vd[k * l.nv..]).map(|(a, b)| a - b).collect();
        let eh: Vec<f64> = w.step(Var::H, k).iter().zip(&data.hd[k * l.nh..]).map(|(a, b)| a - b).collect();
        let u = w.step(Var::U, k);
        total += ops.m_v.quad_form(&ev, &ev) + ops.m_h.quad_form(&eh, &eh) + params.alpha * ops.m_u.quad_form(u, u);
    }
    0.5 * dt * total
}
