//! Parameter-independent spatial operators.
//!
//! Every nonlinear term of the shallow water optimality system is at most
//! quadratic, so each one is a single contraction of one of four sparse
//! third-order tensors with a coefficient vector:
//!
//! | tensor        | entry `[i, j, k]`                      | test | trial | coeff |
//! |---------------|----------------------------------------|------|-------|-------|
//! | `t_adv`       | `∫ φ_i · (φ_k · ∇) φ_j`                | V    | V     | V     |
//! | `t_div`       | `∫ ψ_i div(ψ_j φ_k)`                   | Q    | Q     | V     |
//! | `t_gradscal`  | `∫ ψ_i (φ_k · ∇ψ_j)`                   | Q    | Q     | V     |
//! | `t_hgrad`     | `∫ (φ_i · ∇ψ_j) ψ_k`                   | V    | Q     | Q     |
//!
//! `V` is the interleaved vector P1 space, `Q` the scalar P1 space.

use std::collections::BTreeSet;
use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{Element, FeSpace, Mesh, QuadratureRule, SpaceKind};
use crate::sparse::{SparseMatrix, TripletBuilder};

const ELEMENT_CHUNK: usize = 256;

/// Runs `local` over every element in parallel chunks and merges the
/// per-chunk entries in element order, so the result is deterministic.
fn assemble_elements<E: Send>(
    mesh: &Mesh,
    local: impl Fn(usize, &Element, &mut Vec<E>) + Sync,
) -> Vec<E> {
    let n = mesh.n_triangles();
    let chunks: Vec<Vec<E>> = (0..n.div_ceil(ELEMENT_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut out = Vec::new();
            for t in c * ELEMENT_CHUNK..((c + 1) * ELEMENT_CHUNK).min(n) {
                local(t, &mesh.element(t), &mut out);
            }
            out
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

fn into_matrix(rows: usize, cols: usize, entries: Vec<(usize, usize, f64)>) -> SparseMatrix {
    let mut b = TripletBuilder::with_capacity(rows, cols, entries.len());
    for (i, j, v) in entries {
        b.push(i, j, v);
    }
    b.finish()
}

/// `∫ λ_a λ_b` over an element, evaluated with the supplied rule.
fn local_mass(el: &Element, q: &QuadratureRule) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for (p, w) in q.points.iter().zip(&q.weights) {
        for a in 0..3 {
            for b in 0..3 {
                m[a][b] += w * el.area * p[a] * p[b];
            }
        }
    }
    m
}

pub fn assemble_mass(space: &FeSpace, mesh: &Mesh) -> SparseMatrix {
    let q = QuadratureRule::default();
    let comps = space.components();
    let entries = assemble_elements(mesh, |t, el, out| {
        let tri = mesh.triangles[t];
        let m = local_mass(el, &q);
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..comps {
                    out.push((comps * tri[a] + c, comps * tri[b] + c, m[a][b]));
                }
            }
        }
    });
    into_matrix(space.dof_count, space.dof_count, entries)
}

/// Vector Laplacian `∫ ∇φ_i : ∇φ_j`.
pub fn assemble_stiffness(space: &FeSpace, mesh: &Mesh) -> SparseMatrix {
    let comps = space.components();
    let entries = assemble_elements(mesh, |t, el, out| {
        let tri = mesh.triangles[t];
        for a in 0..3 {
            for b in 0..3 {
                let k = el.area * (el.grad[a][0] * el.grad[b][0] + el.grad[a][1] * el.grad[b][1]);
                for c in 0..comps {
                    out.push((comps * tri[a] + c, comps * tri[b] + c, k));
                }
            }
        }
    });
    into_matrix(space.dof_count, space.dof_count, entries)
}

/// `D_ij = g ∫ φ_i · ∇ψ_j`, velocity-test rows and height-trial columns.
pub fn assemble_pressure_gradient(v_space: &FeSpace, h_space: &FeSpace, mesh: &Mesh, g: f64) -> SparseMatrix {
    let q = QuadratureRule::default();
    let entries = assemble_elements(mesh, |t, el, out| {
        let tri = mesh.triangles[t];
        for a in 0..3 {
            let int_a: f64 = q.points.iter().zip(&q.weights).map(|(p, w)| w * el.area * p[a]).sum();
            for b in 0..3 {
                for c in 0..2 {
                    out.push((2 * tri[a] + c, tri[b], g * int_a * el.grad[b][c]));
                }
            }
        }
    });
    into_matrix(v_space.dof_count, h_space.dof_count, entries)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Test,
    Trial,
    Coeff,
}

/// Sparse third-order tensor with sorted, merged `(i, j, k)` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    pub dims: [usize; 3],
    entries: Vec<([u32; 3], f64)>,
}

impl Tensor3 {
    pub fn from_entries(dims: [usize; 3], mut raw: Vec<([u32; 3], f64)>) -> Self {
        raw.sort_by_key(|e| e.0);
        let mut entries: Vec<([u32; 3], f64)> = Vec::with_capacity(raw.len());
        for (idx, v) in raw {
            match entries.last_mut() {
                Some(last) if last.0 == idx => last.1 += v,
                _ => entries.push((idx, v)),
            }
        }
        Self { dims, entries }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        self.entries
            .iter()
            .map(|&([i, j, k], v)| (i as usize, j as usize, k as usize, v))
    }

    fn axis_index(axis: Axis) -> usize {
        match axis {
            Axis::Test => 0,
            Axis::Trial => 1,
            Axis::Coeff => 2,
        }
    }

    /// Contracts `axis` with `w` and returns `sign *` the matrix over the two
    /// remaining axes, kept in their original order.
    pub fn contract(&self, axis: Axis, w: &[f64], sign: f64) -> Result<SparseMatrix> {
        let ax = Self::axis_index(axis);
        if w.len() != self.dims[ax] {
            return Err(Error::Dimension {
                context: "tensor contraction",
                expected: self.dims[ax],
                got: w.len(),
            });
        }
        let (r, c) = match ax {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut b = TripletBuilder::with_capacity(self.dims[r], self.dims[c], self.entries.len());
        for &(idx, v) in &self.entries {
            b.push(idx[r] as usize, idx[c] as usize, sign * v * w[idx[ax] as usize]);
        }
        Ok(b.finish())
    }

    /// `Σ T[i,j,k] x_i y_j z_k`
    pub fn form(&self, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
        self.iter().map(|(i, j, k, v)| v * x[i] * y[j] * z[k]).sum()
    }

    /// Debug dump: `i j k value` per stored entry, lexicographic.
    pub fn write_dump(&self, mut out: impl Write) -> Result<()> {
        for (i, j, k, v) in self.iter() {
            writeln!(out, "{i} {j} {k} {v:e}")?;
        }
        Ok(())
    }
}

pub struct NonlinearTensors {
    pub t_adv: Tensor3,
    pub t_div: Tensor3,
    pub t_gradscal: Tensor3,
    pub t_hgrad: Tensor3,
}

pub fn assemble_nonlinear_tensors(v_space: &FeSpace, h_space: &FeSpace, mesh: &Mesh) -> NonlinearTensors {
    assert_eq!(v_space.kind, SpaceKind::VectorP1);
    assert_eq!(h_space.kind, SpaceKind::ScalarP1);
    let nv = v_space.dof_count;
    let nh = h_space.dof_count;
    let q = QuadratureRule::default();

    type Quad = ([u32; 3], f64);
    let entries: Vec<(u8, Quad)> = assemble_elements(mesh, |t, el, out| {
        let tri = mesh.triangles[t];
        let m = local_mass(el, &q);
        let vd = |a: usize, c: usize| (2 * tri[a] + c) as u32;
        let sd = |a: usize| tri[a] as u32;
        for a in 0..3 {
            for b in 0..3 {
                for e in 0..3 {
                    for f in 0..2 {
                        // ∫ λ_a λ_e ∂_f λ_b
                        let ae_db = m[a][e] * el.grad[b][f];
                        for c in 0..2 {
                            out.push((0, ([vd(a, c), vd(b, c), vd(e, f)], ae_db)));
                        }
                        let div = ae_db + m[a][b] * el.grad[e][f];
                        out.push((1, ([sd(a), sd(b), vd(e, f)], div)));
                        out.push((2, ([sd(a), sd(b), vd(e, f)], ae_db)));
                        // ∫ λ_a ∂_f λ_b λ_e with the velocity component on the test side
                        out.push((3, ([vd(a, f), sd(b), sd(e)], ae_db)));
                    }
                }
            }
        }
    });

    let mut split: [Vec<Quad>; 4] = Default::default();
    for (which, e) in entries {
        split[which as usize].push(e);
    }
    let [adv, div, gs, hg] = split;
    NonlinearTensors {
        t_adv: Tensor3::from_entries([nv, nv, nv], adv),
        t_div: Tensor3::from_entries([nh, nh, nv], div),
        t_gradscal: Tensor3::from_entries([nh, nh, nv], gs),
        t_hgrad: Tensor3::from_entries([nv, nh, nh], hg),
    }
}

/// Imposes `x_d = value_d` on the rows in `dofs`: each such row becomes an
/// identity row, and the matching column entries are moved to the right-hand
/// side so symmetric inputs stay symmetric.
pub fn apply_dirichlet(
    a: &SparseMatrix,
    rhs: &[f64],
    dofs: &BTreeSet<usize>,
    values: &[f64],
) -> Result<(SparseMatrix, Vec<f64>)> {
    if rhs.len() != a.rows() {
        return Err(Error::Dimension {
            context: "apply_dirichlet rhs",
            expected: a.rows(),
            got: rhs.len(),
        });
    }
    if values.len() != dofs.len() {
        return Err(Error::Dimension {
            context: "apply_dirichlet values",
            expected: dofs.len(),
            got: values.len(),
        });
    }
    let n = a.rows().min(a.cols());
    if let Some(&bad) = dofs.iter().find(|&&d| d >= n) {
        return Err(Error::Index { index: bad, size: n });
    }
    let mut prescribed = vec![None; a.cols()];
    for (&d, &v) in dofs.iter().zip(values) {
        prescribed[d] = Some(v);
    }
    let mut b = TripletBuilder::with_capacity(a.rows(), a.cols(), a.nnz());
    let mut new_rhs = rhs.to_vec();
    for i in 0..a.rows() {
        if let Some(v) = prescribed.get(i).copied().flatten() {
            b.push(i, i, 1.0);
            new_rhs[i] = v;
            continue;
        }
        for (j, aij) in a.row(i) {
            match prescribed[j] {
                Some(v) => new_rhs[i] -= aij * v,
                None => b.push(i, j, aij),
            }
        }
    }
    Ok((b.finish(), new_rhs))
}

/// The full affine building-block set on one mesh.
#[derive(Clone, Debug)]
pub struct AffineOperatorSet {
    pub v_space: FeSpace,
    pub h_space: FeSpace,
    pub u_space: FeSpace,
    pub g: f64,
    pub m_v: SparseMatrix,
    pub m_h: SparseMatrix,
    pub m_u: SparseMatrix,
    pub k: SparseMatrix,
    pub d: SparseMatrix,
    pub t_adv: Tensor3,
    pub t_div: Tensor3,
    pub t_gradscal: Tensor3,
    pub t_hgrad: Tensor3,
}

impl AffineOperatorSet {
    pub fn assemble(mesh: &Mesh, g: f64) -> Result<Self> {
        if !(g > 0.0) {
            return Err(Error::Config(format!("gravity must be positive, got {g}")));
        }
        let v_space = crate::geometry::mark_dirichlet(FeSpace::vector(mesh), mesh);
        let h_space = FeSpace::scalar(mesh);
        let u_space = FeSpace::vector(mesh);
        let m_v = assemble_mass(&v_space, mesh);
        let m_h = assemble_mass(&h_space, mesh);
        let m_u = m_v.clone();
        let k = assemble_stiffness(&v_space, mesh);
        let d = assemble_pressure_gradient(&v_space, &h_space, mesh, g);
        let NonlinearTensors {
            t_adv,
            t_div,
            t_gradscal,
            t_hgrad,
        } = assemble_nonlinear_tensors(&v_space, &h_space, mesh);
        Ok(Self {
            v_space,
            h_space,
            u_space,
            g,
            m_v,
            m_h,
            m_u,
            k,
            d,
            t_adv,
            t_div,
            t_gradscal,
            t_hgrad,
        })
    }

    pub fn nv(&self) -> usize {
        self.v_space.dof_count
    }

    pub fn nh(&self) -> usize {
        self.h_space.dof_count
    }

    pub fn nu(&self) -> usize {
        self.u_space.dof_count
    }

    /// `H(v)_ij = ∫ φ_i · (v · ∇) φ_j`
    pub fn h(&self, v: &[f64]) -> SparseMatrix {
        self.t_adv.contract(Axis::Coeff, v, 1.0).expect("velocity length")
    }

    /// `H̄(v)_ij = ∫ φ_i · (φ_j · ∇) v`
    pub fn h_bar(&self, v: &[f64]) -> SparseMatrix {
        self.t_adv.contract(Axis::Trial, v, 1.0).expect("velocity length")
    }

    /// `H*(χ)_ij = −∫ (φ_i · ∇) χ · φ_j`
    pub fn h_star(&self, chi: &[f64]) -> SparseMatrix {
        self.t_adv
            .contract(Axis::Trial, chi, -1.0)
            .expect("adjoint velocity length")
            .transpose()
    }

    /// `G(v)_ij = ∫ ψ_i div(ψ_j v)`
    pub fn g_mat(&self, v: &[f64]) -> SparseMatrix {
        self.t_div.contract(Axis::Coeff, v, 1.0).expect("velocity length")
    }

    /// `F(h)_ik = ∫ ψ_i div(h φ_k)`: height rows, velocity columns.
    pub fn f_mat(&self, h: &[f64]) -> SparseMatrix {
        self.t_div.contract(Axis::Trial, h, 1.0).expect("height length")
    }

    /// `G*(v)_ij = −∫ ψ_i (v · ∇ψ_j)`
    pub fn g_star(&self, v: &[f64]) -> SparseMatrix {
        self.t_gradscal.contract(Axis::Coeff, v, -1.0).expect("velocity length")
    }

    /// `F*(h)_ij = −∫ h φ_i · ∇ψ_j`: velocity rows, height columns.
    pub fn f_star(&self, h: &[f64]) -> SparseMatrix {
        self.t_hgrad.contract(Axis::Coeff, h, -1.0).expect("height length")
    }

    /// `F̄(λ)_ik = −∫ (φ_i · ∇λ) ψ_k`: velocity rows, height columns.
    pub fn f_bar(&self, lambda: &[f64]) -> SparseMatrix {
        self.t_hgrad.contract(Axis::Trial, lambda, -1.0).expect("height length")
    }

    /// `Ḡ(λ)_ik = −∫ ψ_i (φ_k · ∇λ)`: height rows, velocity columns.
    pub fn g_bar(&self, lambda: &[f64]) -> SparseMatrix {
        self.t_gradscal.contract(Axis::Trial, lambda, -1.0).expect("height length")
    }

    /// Second derivative of `χ · (v·∇)v` with respect to `v`:
    /// `∫ χ · (φ_k·∇)φ_j + ∫ χ · (φ_j·∇)φ_k`.
    pub fn advection_hessian(&self, chi: &[f64]) -> SparseMatrix {
        let c = self.t_adv.contract(Axis::Test, chi, 1.0).expect("adjoint velocity length");
        c.lin_comb(1.0, &c.transpose(), 1.0)
    }

    /// Mixed second derivative of `λ div(h v)`: height rows, velocity columns.
    pub fn continuity_hessian(&self, lambda: &[f64]) -> SparseMatrix {
        self.t_div.contract(Axis::Test, lambda, 1.0).expect("adjoint height length")
    }
}

/// Direct element-by-element assembly of `∫ ((∇v)^T φ_i) · φ_j`.
pub fn assemble_h_bar_star(v: &[f64], mesh: &Mesh) -> SparseMatrix {
    let q = QuadratureRule::default();
    let n = 2 * mesh.n_vertices();
    let entries = assemble_elements(mesh, |t, el, out| {
        let tri = mesh.triangles[t];
        // grad_v[c][d] = ∂_d v_c, constant on the element
        let mut grad_v = [[0.0; 2]; 2];
        for a in 0..3 {
            for c in 0..2 {
                for d in 0..2 {
                    grad_v[c][d] += v[2 * tri[a] + c] * el.grad[a][d];
                }
            }
        }
        let m = local_mass(el, &q);
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..2 {
                    for d in 0..2 {
                        // ((∇v)^T e_c) · e_d = ∂_d v_c
                        out.push((2 * tri[a] + c, 2 * tri[b] + d, m[a][b] * grad_v[c][d]));
                    }
                }
            }
        }
    });
    into_matrix(n, n, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_structured_mesh, mark_dirichlet, MeshConfig};

    fn setup(n: usize) -> (Mesh, AffineOperatorSet) {
        let mesh = build_structured_mesh(&MeshConfig::square(10.0, n)).unwrap();
        let ops = AffineOperatorSet::assemble(&mesh, 9.81).unwrap();
        (mesh, ops)
    }

    #[test]
    fn scalar_mass_total_is_area() {
        let (_, ops) = setup(6);
        let total: f64 = ops.m_h.row_sums().iter().sum();
        assert!((total - 100.0).abs() < 1e-10);
    }

    #[test]
    fn stiffness_kernel_and_linear_energy() {
        let (mesh, ops) = setup(5);
        let ones = mesh.interpolate_vector(|_, _| [1.0, -2.0]);
        assert!(ops.k.mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
        let vx = mesh.interpolate_vector(|x, _| [x, 0.0]);
        assert!((ops.k.quad_form(&vx, &vx) - 100.0).abs() < 1e-10);
        assert!(ops.k.max_abs_diff(&ops.k.transpose()) < 1e-14);
    }

    #[test]
    fn gradient_of_constant_vanishes_and_scales_with_g() {
        let (mesh, ops) = setup(4);
        let c = vec![3.0; mesh.n_vertices()];
        assert!(ops.d.mul_vec(&c).iter().all(|v| v.abs() < 1e-12));
        let d2 = assemble_pressure_gradient(&ops.v_space, &ops.h_space, &mesh, 2.0 * 9.81);
        for ((_, _, a), (_, _, b)) in ops.d.iter().zip(d2.iter()) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn contraction_rejects_wrong_length() {
        let (_, ops) = setup(2);
        assert!(matches!(
            ops.t_adv.contract(Axis::Coeff, &[1.0; 3], 1.0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_velocity_gives_zero_advection() {
        let (_, ops) = setup(3);
        assert_eq!(ops.h(&vec![0.0; ops.nv()]).max_abs(), 0.0);
    }

    #[test]
    fn h_bar_star_matches_h_bar() {
        let (mesh, ops) = setup(4);
        let v = mesh.interpolate_vector(|x, y| [(0.3 * x).sin() * y, x * x - y]);
        let direct = assemble_h_bar_star(&v, &mesh);
        assert!(direct.max_abs_diff(&ops.h_bar(&v)) < 1e-13);
    }

    #[test]
    fn divergence_integrates_to_zero_for_wall_bounded_flow() {
        let (mesh, ops) = setup(5);
        let free = ops.v_space.free_mask();
        let mut v = mesh.interpolate_vector(|x, y| [(x * 0.7).cos() + y, x * y * 0.1]);
        v.iter_mut().zip(&free).for_each(|(vi, &f)| if !f { *vi = 0.0 });
        let h = mesh.interpolate(|x, y| 1.0 + 0.1 * x * y);
        let total: f64 = ops.g_mat(&v).mul_vec(&h).iter().sum();
        assert!(total.abs() < 1e-12, "{total}");
    }

    #[test]
    fn apply_dirichlet_properties() {
        let (mesh, ops) = setup(3);
        let a = ops.m_h.lin_comb(1.0, &assemble_stiffness(&FeSpace::scalar(&mesh), &mesh), 1.0);
        let rhs: Vec<f64> = (0..a.rows()).map(|i| i as f64).collect();
        let (a0, r0) = apply_dirichlet(&a, &rhs, &BTreeSet::new(), &[]).unwrap();
        assert_eq!(a0, a);
        assert_eq!(r0, rhs);

        let some: BTreeSet<usize> = [0, 5, 7].into_iter().collect();
        let (a1, _) = apply_dirichlet(&a, &rhs, &some, &[1.0, 2.0, 3.0]).unwrap();
        assert!(a1.max_abs_diff(&a1.transpose()) < 1e-14);

        let all: BTreeSet<usize> = (0..a.rows()).collect();
        let (a2, r2) = apply_dirichlet(&a, &rhs, &all, &vec![0.0; a.rows()]).unwrap();
        let x = crate::sparse::solve_sparse(&a2, &r2).unwrap();
        assert!(x.iter().all(|v| v.abs() < 1e-15));

        let bad: BTreeSet<usize> = [a.rows()].into_iter().collect();
        assert!(matches!(
            apply_dirichlet(&a, &rhs, &bad, &[0.0]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn vector_mass_is_spd_on_small_mesh() {
        let mesh = build_structured_mesh(&MeshConfig::square(10.0, 2)).unwrap();
        let v = mark_dirichlet(FeSpace::vector(&mesh), &mesh);
        let m = assemble_mass(&v, &mesh).to_dense();
        let eig = nalgebra::SymmetricEigen::new(m);
        assert!(eig.eigenvalues.min() > 0.0);
    }
}
