//! Aggregated reduced spaces, offline projection and the online reduced
//! Newton solver.
//!
//! The reduced system is the gradient and Hessian of the reduced Lagrangian
//! `L_N(y) = L(Z y)`, so it coincides with `Zᵀ R(Z y)` and `Zᵀ J(Z y) Z`.
//! Time stepping, `Δt` and `μ` are kept out of the stored operators and enter
//! online as scalar factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::operators::{AffineOperatorSet, Axis, Tensor3};
use crate::pod::{orthonormalize, PodBasis, SpaceTimeInnerProduct};
use crate::spacetime::{
    NewtonOptions, Parameters, ProblemData, SpaceTimeLayout, SpaceTimeVector, StateTrajectory, Var,
};

/// `Z_v ≡ Z_χ`, `Z_h ≡ Z_λ` (2N columns each) and `Z_u` (N columns).
///
/// State and adjoint columns are interleaved before orthonormalization, so
/// the leading `2n` columns span the aggregated space of the first `n` POD
/// modes of each variable.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedBases {
    pub n: usize,
    pub zv: DMatrix<f64>,
    pub zh: DMatrix<f64>,
    pub zu: DMatrix<f64>,
    pub layout: SpaceTimeLayout,
}

pub fn aggregate_spaces(
    pods: &[PodBasis],
    ip_v: &SpaceTimeInnerProduct,
    ip_h: &SpaceTimeInnerProduct,
    layout: SpaceTimeLayout,
) -> Result<AggregatedBases> {
    let get = |var: Var| {
        pods.iter()
            .find(|p| p.var == var)
            .ok_or_else(|| Error::Config(format!("missing POD basis for {}", var.name())))
    };
    let (pv, ph, pu, pc, pl) = (get(Var::V)?, get(Var::H)?, get(Var::U)?, get(Var::Chi)?, get(Var::Lambda)?);
    let n = pv.n();
    if [ph.n(), pu.n(), pc.n(), pl.n()].iter().any(|&m| m != n) {
        return Err(Error::Config(format!(
            "aggregation needs equal basis sizes, got v={} h={} u={} chi={} lambda={}",
            pv.n(),
            ph.n(),
            pu.n(),
            pc.n(),
            pl.n()
        )));
    }
    let interleave = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        DMatrix::from_fn(a.nrows(), 2 * n, |i, j| if j % 2 == 0 { a[(i, j / 2)] } else { b[(i, j / 2)] })
    };
    let zv = orthonormalize(interleave(&pv.basis, &pc.basis), ip_v)?;
    let zh = orthonormalize(interleave(&ph.basis, &pl.basis), ip_h)?;
    Ok(AggregatedBases {
        n,
        zv,
        zh,
        zu: pu.basis.clone(),
        layout,
    })
}

impl AggregatedBases {
    pub fn total_dim(&self) -> usize {
        9 * self.n
    }

    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n {
            return Err(Error::BasisDeficiency {
                requested: n,
                retainable: self.n,
            });
        }
        Ok(Self {
            n,
            zv: self.zv.columns(0, 2 * n).into_owned(),
            zh: self.zh.columns(0, 2 * n).into_owned(),
            zu: self.zu.columns(0, n).into_owned(),
            layout: self.layout,
        })
    }

    fn basis(&self, var: Var) -> &DMatrix<f64> {
        match var {
            Var::V | Var::Chi => &self.zv,
            Var::H | Var::Lambda => &self.zh,
            Var::U => &self.zu,
        }
    }

    /// Full-order `Z y`.
    pub fn reconstruct(&self, y: &ReducedVector) -> Result<SpaceTimeVector> {
        self.check(y)?;
        let mut w = SpaceTimeVector::zeros(self.layout);
        for var in Var::ALL {
            let x = self.basis(var) * y.block(var);
            w.var_mut(var).copy_from_slice(x.as_slice());
        }
        Ok(w)
    }

    /// Euclidean `Zᵀ r` blockwise; maps full residuals to reduced ones.
    pub fn restrict(&self, r: &SpaceTimeVector) -> Result<ReducedVector> {
        let mut y = ReducedVector::zeros(self.n);
        for var in Var::ALL {
            let x = DVector::from_column_slice(r.var(var));
            let c = self.basis(var).transpose() * x;
            y.block_mut(var).copy_from(&c);
        }
        Ok(y)
    }

    /// Orthogonal projection coefficients in the space-time inner products.
    pub fn project(
        &self,
        w: &SpaceTimeVector,
        ip_v: &SpaceTimeInnerProduct,
        ip_h: &SpaceTimeInnerProduct,
        ip_u: &SpaceTimeInnerProduct,
    ) -> Result<ReducedVector> {
        let mut y = ReducedVector::zeros(self.n);
        for var in Var::ALL {
            let ip = match var {
                Var::V | Var::Chi => ip_v,
                Var::H | Var::Lambda => ip_h,
                Var::U => ip_u,
            };
            let x = DVector::from_vec(ip.apply(w.var(var))?);
            let c = self.basis(var).transpose() * x;
            y.block_mut(var).copy_from(&c);
        }
        Ok(y)
    }

    fn check(&self, y: &ReducedVector) -> Result<()> {
        if y.n != self.n {
            return Err(Error::Dimension {
                context: "reduced vector",
                expected: 9 * self.n,
                got: y.data.len(),
            });
        }
        Ok(())
    }
}

/// `[v_N; h_N; u_N; χ_N; λ_N]` with lengths `[2N, 2N, N, 2N, 2N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedVector {
    pub n: usize,
    pub data: DVector<f64>,
}

impl ReducedVector {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: DVector::zeros(9 * n),
        }
    }

    pub fn from_vec(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 9 * n {
            return Err(Error::Dimension {
                context: "reduced vector",
                expected: 9 * n,
                got: data.len(),
            });
        }
        Ok(Self {
            n,
            data: DVector::from_vec(data),
        })
    }

    pub fn range(n: usize, var: Var) -> std::ops::Range<usize> {
        let (start, len) = match var {
            Var::V => (0, 2 * n),
            Var::H => (2 * n, 2 * n),
            Var::U => (4 * n, n),
            Var::Chi => (5 * n, 2 * n),
            Var::Lambda => (7 * n, 2 * n),
        };
        start..start + len
    }

    pub fn block(&self, var: Var) -> nalgebra::DVectorView<'_, f64> {
        let r = Self::range(self.n, var);
        self.data.rows(r.start, r.len())
    }

    pub fn block_mut(&mut self, var: Var) -> nalgebra::DVectorViewMut<'_, f64> {
        let r = Self::range(self.n, var);
        self.data.rows_mut(r.start, r.len())
    }

    /// Keeps the leading coefficients of every block.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n > self.n {
            return Err(Error::BasisDeficiency {
                requested: n,
                retainable: self.n,
            });
        }
        let mut out = Self::zeros(n);
        for var in Var::ALL {
            let len = Self::range(n, var).len();
            let src = self.block(var).rows(0, len).into_owned();
            out.block_mut(var).copy_from(&src);
        }
        Ok(out)
    }
}

/// Dense third-order array, `data[(a·d1 + b)·d2 + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor3 {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl DenseTensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn idx(&self, a: usize, b: usize, c: usize) -> usize {
        (a * self.dims[1] + b) * self.dims[2] + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.idx(a, b, c)]
    }

    pub fn truncate(&self, dims: [usize; 3]) -> Self {
        let mut out = Self::zeros(dims);
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    let i = out.idx(a, b, c);
                    out.data[i] = self.get(a, b, c);
                }
            }
        }
        out
    }

    /// `Σ_c T[a,b,c] z_c`
    pub fn contract_last(&self, z: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dims[0], self.dims[1], |a, b| {
            let o = self.idx(a, b, 0);
            self.data[o..o + self.dims[2]].iter().zip(z).map(|(t, x)| t * x).sum()
        })
    }

    /// `Σ_b T[a,b,c] z_b`
    pub fn contract_middle(&self, z: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dims[0], self.dims[2]);
        for a in 0..self.dims[0] {
            for (b, &zb) in z.iter().enumerate() {
                if zb == 0.0 {
                    continue;
                }
                let o = self.idx(a, b, 0);
                for c in 0..self.dims[2] {
                    out[(a, c)] += self.data[o + c] * zb;
                }
            }
        }
        out
    }

    /// `Σ_a z_a T[a,b,c]`
    pub fn contract_first(&self, z: &[f64]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dims[1], self.dims[2]);
        for (a, &za) in z.iter().enumerate() {
            if za == 0.0 {
                continue;
            }
            for b in 0..self.dims[1] {
                let o = self.idx(a, b, 0);
                for c in 0..self.dims[2] {
                    out[(b, c)] += self.data[o + c] * za;
                }
            }
        }
        out
    }
}

/// Offline-reduced operators. Sums over time blocks are taken here; `Δt`,
/// `μ` and `α` are applied online.
#[derive(Clone, Debug, PartialEq)]
pub struct RomOperators {
    pub n: usize,
    /// `T`, `N_t`, `g`, `α` of the offline model.
    pub base: Parameters,
    /// `Σ_k Z_kᵀ M_v Z_k`
    pub mv_diag: DMatrix<f64>,
    /// `Σ_{k≥1} Z_kᵀ M_v Z_{k-1}`
    pub mv_sub: DMatrix<f64>,
    pub k_r: DMatrix<f64>,
    /// `Σ_k Z_{v,k}ᵀ D Z_{h,k}`
    pub d_r: DMatrix<f64>,
    /// `Σ_k Z_{v,k}ᵀ M_u Z_{u,k}`
    pub mvu_r: DMatrix<f64>,
    pub mh_diag: DMatrix<f64>,
    pub mh_sub: DMatrix<f64>,
    pub mu_r: DMatrix<f64>,
    /// Advection tensor reduced on all three axes by `Z_v`.
    pub tadv_r: DenseTensor3,
    /// Divergence tensor reduced by `(Z_h, Z_h, Z_v)`.
    pub tdiv_r: DenseTensor3,
    /// `Z_{v,1}ᵀ M_v v_0`
    pub v0_r: DVector<f64>,
    /// `Z_{h,1}ᵀ M_h h_0`
    pub h0_r: DVector<f64>,
    /// `Σ_k Z_{v,k}ᵀ M_v v_{d,k}` for the unscaled desired trajectory.
    pub vd_r: DVector<f64>,
    pub hd_r: DVector<f64>,
    /// Projected uncontrolled state used as the online starting point.
    pub y_init: ReducedVector,
}

fn time_block(z: &DMatrix<f64>, n: usize, k: usize) -> DMatrix<f64> {
    z.rows(k * n, n).into_owned()
}

fn project_tensor(t: &Tensor3, za: &DMatrix<f64>, zb: &DMatrix<f64>, zc: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
    (0..zc.ncols())
        .map(|c| {
            let m = t.contract(Axis::Coeff, zc.column(c).as_slice(), 1.0)?;
            Ok(za.transpose() * m.mul_dense(zb))
        })
        .collect()
}

/// Builds every reduced operator once. `desired` is the unscaled desired
/// trajectory and `init` the state whose projection seeds online Newton.
pub fn project_operators(
    ops: &AffineOperatorSet,
    z: &AggregatedBases,
    base: &Parameters,
    data: &ProblemData,
    desired: &StateTrajectory,
    y_init: ReducedVector,
) -> Result<RomOperators> {
    let l = z.layout;
    data.check(&l)?;
    let (m, nu) = (2 * z.n, z.n);
    let mut r = RomOperators {
        n: z.n,
        base: *base,
        mv_diag: DMatrix::zeros(m, m),
        mv_sub: DMatrix::zeros(m, m),
        k_r: DMatrix::zeros(m, m),
        d_r: DMatrix::zeros(m, m),
        mvu_r: DMatrix::zeros(m, nu),
        mh_diag: DMatrix::zeros(m, m),
        mh_sub: DMatrix::zeros(m, m),
        mu_r: DMatrix::zeros(nu, nu),
        tadv_r: DenseTensor3::zeros([m, m, m]),
        tdiv_r: DenseTensor3::zeros([m, m, m]),
        v0_r: DVector::zeros(m),
        h0_r: DVector::zeros(m),
        vd_r: DVector::zeros(m),
        hd_r: DVector::zeros(m),
        y_init,
    };
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    for k in 0..l.nt {
        let zv = time_block(&z.zv, l.nv, k);
        let zh = time_block(&z.zh, l.nh, k);
        let zu = time_block(&z.zu, l.nu, k);
        let mzv = ops.m_v.mul_dense(&zv);
        let mzh = ops.m_h.mul_dense(&zh);
        r.mv_diag += zv.transpose() * &mzv;
        r.mh_diag += zh.transpose() * &mzh;
        r.k_r += zv.transpose() * ops.k.mul_dense(&zv);
        r.d_r += zv.transpose() * ops.d.mul_dense(&zh);
        r.mvu_r += zv.transpose() * ops.m_u.mul_dense(&zu);
        r.mu_r += zu.transpose() * ops.m_u.mul_dense(&zu);
        match &prev {
            Some((mzv_prev, mzh_prev)) => {
                r.mv_sub += zv.transpose() * mzv_prev;
                r.mh_sub += zh.transpose() * mzh_prev;
            }
            None => {
                r.v0_r = zv.transpose() * DVector::from_vec(ops.m_v.mul_vec(&data.v0));
                r.h0_r = zh.transpose() * DVector::from_vec(ops.m_h.mul_vec(&data.h0));
            }
        }
        r.vd_r += mzv.transpose() * DVector::from_column_slice(desired.v_step(k));
        r.hd_r += mzh.transpose() * DVector::from_column_slice(desired.h_step(k));
        let adv = project_tensor(&ops.t_adv, &zv, &zv, &zv)?;
        let div = project_tensor(&ops.t_div, &zh, &zh, &zv)?;
        for c in 0..m {
            for a in 0..m {
                for b in 0..m {
                    let i = r.tadv_r.idx(a, b, c);
                    r.tadv_r.data[i] += adv[c][(a, b)];
                    r.tdiv_r.data[i] += div[c][(a, b)];
                }
            }
        }
        prev = Some((mzv, mzh));
    }
    Ok(r)
}

impl RomOperators {
    pub fn total_dim(&self) -> usize {
        9 * self.n
    }

    /// Operators of the leading `n` aggregated modes.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.n {
            return Err(Error::BasisDeficiency {
                requested: n,
                retainable: self.n,
            });
        }
        let m = 2 * n;
        let sq = |a: &DMatrix<f64>, r: usize, c: usize| a.view((0, 0), (r, c)).into_owned();
        let head = |v: &DVector<f64>| v.rows(0, m).into_owned();
        Ok(Self {
            n,
            base: self.base,
            mv_diag: sq(&self.mv_diag, m, m),
            mv_sub: sq(&self.mv_sub, m, m),
            k_r: sq(&self.k_r, m, m),
            d_r: sq(&self.d_r, m, m),
            mvu_r: sq(&self.mvu_r, m, n),
            mh_diag: sq(&self.mh_diag, m, m),
            mh_sub: sq(&self.mh_sub, m, m),
            mu_r: sq(&self.mu_r, n, n),
            tadv_r: self.tadv_r.truncate([m, m, m]),
            tdiv_r: self.tdiv_r.truncate([m, m, m]),
            v0_r: head(&self.v0_r),
            h0_r: head(&self.h0_r),
            vd_r: head(&self.vd_r),
            hd_r: head(&self.hd_r),
            y_init: self.y_init.truncate(n)?,
        })
    }

    fn check(&self, y: &ReducedVector) -> Result<()> {
        if y.n != self.n {
            return Err(Error::Dimension {
                context: "reduced vector",
                expected: 9 * self.n,
                got: y.data.len(),
            });
        }
        Ok(())
    }

    /// Reduced residual and Jacobian at `y` for the parameters `p`.
    pub fn reduced_system(&self, y: &ReducedVector, p: &Parameters) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check(y)?;
        Ok(self.assemble(y, p, true))
    }

    pub fn reduced_residual(&self, y: &ReducedVector, p: &Parameters) -> Result<DVector<f64>> {
        self.check(y)?;
        Ok(self.assemble(y, p, false).0)
    }

    fn assemble(&self, y: &ReducedVector, p: &Parameters, with_jacobian: bool) -> (DVector<f64>, DMatrix<f64>) {
        let (n, m) = (self.n, 2 * self.n);
        let dt = p.dt();
        let (mu1, mu2, mu3, alpha) = (p.mu1, p.mu2, p.mu3, p.alpha);
        let yv = y.block(Var::V).into_owned();
        let yh = y.block(Var::H).into_owned();
        let yu = y.block(Var::U).into_owned();
        let yc = y.block(Var::Chi).into_owned();
        let yl = y.block(Var::Lambda).into_owned();

        let lv = &self.mv_diag - &self.mv_sub + &self.k_r * (dt * mu1);
        let lh = &self.mh_diag - &self.mh_sub;
        // n(y)_a = Σ T[a,b,c] y_b y_c
        let h_v = self.tadv_r.contract_last(yv.as_slice());
        let hbar_v = self.tadv_r.contract_middle(yv.as_slice());
        let nl = &h_v * &yv;
        let nlin = &h_v + &hbar_v;
        let q_h = self.tdiv_r.contract_last(yv.as_slice());
        let q_v = self.tdiv_r.contract_middle(yh.as_slice());
        let q = &q_h * &yh;

        let s_v = &lv * &yv + nl * (dt * mu2) + &self.d_r * &yh * dt - &self.mvu_r * &yu * dt - &self.v0_r;
        let s_h = &lh * &yh + q * dt - &self.h0_r;
        let g_v = &self.mv_diag * &yv * dt - &self.vd_r * (dt * mu3)
            + lv.tr_mul(&yc)
            + nlin.tr_mul(&yc) * (dt * mu2)
            + q_v.tr_mul(&yl) * dt;
        let g_h = &self.mh_diag * &yh * dt - &self.hd_r * (dt * mu3)
            + self.d_r.tr_mul(&yc) * dt
            + lh.tr_mul(&yl)
            + q_h.tr_mul(&yl) * dt;
        let g_u = &self.mu_r * &yu * (alpha * dt) - self.mvu_r.tr_mul(&yc) * dt;

        let mut r = DVector::zeros(9 * n);
        r.rows_mut(0, m).copy_from(&g_v);
        r.rows_mut(m, m).copy_from(&g_h);
        r.rows_mut(2 * m, n).copy_from(&g_u);
        r.rows_mut(2 * m + n, m).copy_from(&s_v);
        r.rows_mut(3 * m + n, m).copy_from(&s_h);
        if !with_jacobian {
            return (r, DMatrix::zeros(0, 0));
        }

        let (ov, oh, ou, oc, ol) = (0, m, 2 * m, 2 * m + n, 3 * m + n);
        let mut j = DMatrix::zeros(9 * n, 9 * n);
        // Hessian block
        let cchi = self.tadv_r.contract_first(yc.as_slice());
        let avv = &self.mv_diag * dt + (&cchi + cchi.transpose()) * (dt * mu2);
        let e = self.tdiv_r.contract_first(yl.as_slice()) * dt;
        j.view_mut((ov, ov), (m, m)).copy_from(&avv);
        j.view_mut((oh, ov), (m, m)).copy_from(&e);
        j.view_mut((ov, oh), (m, m)).copy_from(&e.transpose());
        j.view_mut((oh, oh), (m, m)).copy_from(&(&self.mh_diag * dt));
        j.view_mut((ou, ou), (n, n)).copy_from(&(&self.mu_r * (alpha * dt)));
        // Constraint block and its transpose
        let b_cv = lv + nlin * (dt * mu2);
        let b_ch = &self.d_r * dt;
        let b_cu = &self.mvu_r * (-dt);
        let b_lv = q_v * dt;
        let b_lh = lh + q_h * dt;
        let blocks = [(oc, ov, &b_cv), (oc, oh, &b_ch), (oc, ou, &b_cu), (ol, ov, &b_lv), (ol, oh, &b_lh)];
        for (r0, c0, b) in blocks {
            j.view_mut((r0, c0), b.shape()).copy_from(b);
            j.view_mut((c0, r0), (b.ncols(), b.nrows())).copy_from(&b.transpose());
        }
        (r, j)
    }
}

#[derive(Clone, Debug)]
pub struct OnlineSolution {
    pub y: ReducedVector,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

/// Reduced Newton with dense LU; never touches full-order vectors.
pub fn online_solve(
    rom: &RomOperators,
    p: &Parameters,
    init: Option<&ReducedVector>,
    opts: &NewtonOptions,
) -> Result<OnlineSolution> {
    let mut y = init.cloned().unwrap_or_else(|| rom.y_init.clone());
    rom.check(&y)?;
    let mut r = rom.reduced_residual(&y, p)?;
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
        let (_, j) = rom.reduced_system(&y, p)?;
        let lu = j.lu();
        let dy = lu
            .solve(&(-&r))
            .ok_or_else(|| Error::Factorization("singular reduced Jacobian".into()))?;
        let mut step = 1.0;
        let mut accepted = None;
        for h in 0..=opts.max_halvings {
            let mut trial = y.clone();
            trial.data.axpy(step, &dy, 1.0);
            let rt = rom.reduced_residual(&trial, p)?;
            let nt = rt.norm();
            if nt.is_finite() && (nt < norm || h == opts.max_halvings) {
                accepted = Some((trial, rt, nt));
                break;
            }
            step *= 0.5;
        }
        let Some((ty, tr, tn)) = accepted else {
            return Err(Error::NonConvergence {
                iterations,
                residual: norm,
                history,
            });
        };
        y = ty;
        r = tr;
        norm = tn;
        iterations += 1;
        history.push(norm);
        last_lu = Some(lu);
    }
    if let Some(lu) = &last_lu {
        for _ in 0..opts.polish {
            let Some(dy) = lu.solve(&(-&r)) else { break };
            let mut trial = y.clone();
            trial.data += dy;
            let rt = rom.reduced_residual(&trial, p)?;
            let nt = rt.norm();
            if !(nt < norm) {
                break;
            }
            y = trial;
            r = rt;
            norm = nt;
            history.push(norm);
        }
    }
    if !norm.is_finite() {
        return Err(Error::NonConvergence {
            iterations,
            residual: norm,
            history,
        });
    }
    Ok(OnlineSolution {
        y,
        iterations,
        residual_history: history,
    })
}
