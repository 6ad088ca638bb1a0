//! Partitioned POD of space-time snapshots.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::operators::AffineOperatorSet;
use crate::sparse::SparseMatrix;
use crate::spacetime::{ParameterBox, SpaceTimeVector, TruthModel, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub params: Vec<[f64; 3]>,
    pub sampling: Sampling,
    pub seed: u64,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// Independent uniform draws from the parameter box.
pub fn sample_parameters(n_max: usize, pbox: &ParameterBox, seed: u64) -> Result<TrainingSet> {
    if n_max == 0 {
        return Err(Error::Config("training set size must be at least 1".into()));
    }
    pbox.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = (0..n_max)
        .map(|_| std::array::from_fn(|i| rng.random_range(pbox.lo[i]..=pbox.hi[i])))
        .collect();
    Ok(TrainingSet {
        params,
        sampling: Sampling::Uniform,
        seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerProductKind {
    /// Mass plus stiffness.
    H1,
    /// Mass only.
    L2,
}

impl InnerProductKind {
    pub fn for_var(var: Var) -> Self {
        if var.is_velocity_type() {
            Self::H1
        } else {
            Self::L2
        }
    }
}

/// `(a, b) = Σ_k Δt a_kᵀ X b_k` with a spatial Gram matrix `X`.
#[derive(Clone, Debug)]
pub struct SpaceTimeInnerProduct {
    pub kind: InnerProductKind,
    pub gram: SparseMatrix,
    pub dt: f64,
    pub nt: usize,
}

impl SpaceTimeInnerProduct {
    pub fn new(ops: &AffineOperatorSet, var: Var, dt: f64, nt: usize) -> Self {
        let kind = InnerProductKind::for_var(var);
        let mass = match var {
            Var::V | Var::Chi => &ops.m_v,
            Var::H | Var::Lambda => &ops.m_h,
            Var::U => &ops.m_u,
        };
        let gram = match kind {
            InnerProductKind::H1 => mass.lin_comb(1.0, &ops.k, 1.0),
            InnerProductKind::L2 => mass.clone(),
        };
        Self { kind, gram, dt, nt }
    }

    pub fn spatial(&self) -> usize {
        self.gram.rows()
    }

    pub fn len(&self) -> usize {
        self.nt * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Δt X` applied block by block.
    pub fn apply(&self, a: &[f64]) -> Result<Vec<f64>> {
        self.check(a.len())?;
        let n = self.spatial();
        let mut out = vec![0.0; a.len()];
        for k in 0..self.nt {
            self.gram
                .mul_vec_add(&a[k * n..(k + 1) * n], self.dt, &mut out[k * n..(k + 1) * n]);
        }
        Ok(out)
    }

    pub fn apply_matrix(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let cols: Result<Vec<Vec<f64>>> = (0..a.ncols())
            .into_par_iter()
            .map(|j| self.apply(a.column(j).as_slice()))
            .collect();
        let cols = cols?;
        Ok(DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| cols[j][i]))
    }

    pub fn ip(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check(b.len())?;
        Ok(self.apply(a)?.iter().zip(b).map(|(x, y)| x * y).sum())
    }

    pub fn norm(&self, a: &[f64]) -> Result<f64> {
        Ok(self.ip(a, a)?.max(0.0).sqrt())
    }

    /// `W` with `WᵀW = Aᵀ (Δt X) A`, from a Cholesky factor of `X`.
    pub fn weighted(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check(a.nrows())?;
        let n = self.spatial();
        let chol = Cholesky::new(self.gram.to_dense())
            .ok_or_else(|| Error::Factorization("inner product Gram matrix is not positive definite".into()))?;
        let lt = chol.l().transpose() * self.dt.sqrt();
        let mut out = DMatrix::zeros(a.nrows(), a.ncols());
        for k in 0..self.nt {
            out.rows_mut(k * n, n).copy_from(&(&lt * a.rows(k * n, n)));
        }
        Ok(out)
    }

    /// `Aᵀ (Δt X) B`
    pub fn gram_matrix(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(a.transpose() * self.apply_matrix(b)?)
    }

    fn check(&self, got: usize) -> Result<()> {
        if got != self.len() {
            return Err(Error::Dimension {
                context: "space-time inner product",
                expected: self.len(),
                got,
            });
        }
        Ok(())
    }
}

/// The three spatial inner products used for the five variables.
#[derive(Clone, Debug)]
pub struct InnerProducts {
    pub v: SpaceTimeInnerProduct,
    pub h: SpaceTimeInnerProduct,
    pub u: SpaceTimeInnerProduct,
}

impl InnerProducts {
    pub fn new(ops: &AffineOperatorSet, dt: f64, nt: usize) -> Self {
        Self {
            v: SpaceTimeInnerProduct::new(ops, Var::V, dt, nt),
            h: SpaceTimeInnerProduct::new(ops, Var::H, dt, nt),
            u: SpaceTimeInnerProduct::new(ops, Var::U, dt, nt),
        }
    }

    pub fn get(&self, var: Var) -> &SpaceTimeInnerProduct {
        match var {
            Var::V | Var::Chi => &self.v,
            Var::H | Var::Lambda => &self.h,
            Var::U => &self.u,
        }
    }
}

/// Free-function form of [`SpaceTimeInnerProduct::ip`].
pub fn spacetime_inner_product(a: &[f64], b: &[f64], ip: &SpaceTimeInnerProduct) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "inner product operands",
            expected: a.len(),
            got: b.len(),
        });
    }
    ip.ip(a, b)
}

/// One variable's snapshots, one column per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotMatrix {
    pub var: Var,
    pub data: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct Snapshots {
    /// Parameters of the retained columns, in column order.
    pub params: Vec<[f64; 3]>,
    /// Indexed by [`Var::index`].
    pub matrices: Vec<SnapshotMatrix>,
    pub failed: Vec<([f64; 3], String)>,
}

impl Snapshots {
    pub fn matrix(&self, var: Var) -> &SnapshotMatrix {
        &self.matrices[var.index()]
    }

    pub fn from_solutions(params: Vec<[f64; 3]>, sols: &[SpaceTimeVector]) -> Result<Self> {
        let Some(first) = sols.first() else {
            return Err(Error::Pipeline("no snapshots to assemble".into()));
        };
        let layout = first.layout;
        let matrices = Var::ALL
            .iter()
            .map(|&var| SnapshotMatrix {
                var,
                data: DMatrix::from_fn(layout.block_len(var), sols.len(), |i, j| sols[j].var(var)[i]),
            })
            .collect();
        Ok(Self {
            params,
            matrices,
            failed: Vec::new(),
        })
    }

    /// Column `j` as a full space-time vector.
    pub fn column(&self, j: usize, layout: crate::spacetime::SpaceTimeLayout) -> Result<SpaceTimeVector> {
        let mut data = Vec::with_capacity(layout.total());
        for m in &self.matrices {
            data.extend(m.data.column(j).iter());
        }
        SpaceTimeVector::from_vec(layout, data)
    }
}

/// Truth solves over the training set, in parallel. Failed solves are logged
/// and dropped.
pub fn collect_snapshots(model: &TruthModel, set: &TrainingSet) -> Result<Snapshots> {
    let results: Vec<_> = set.params.par_iter().map(|&mu| (mu, model.solve(mu))).collect();
    let mut params = Vec::new();
    let mut sols = Vec::new();
    let mut failed = Vec::new();
    for (mu, r) in results {
        match r {
            Ok(s) => {
                params.push(mu);
                sols.push(s.w);
            }
            Err(e) => {
                log::warn!("truth solve failed at mu = {mu:?}: {e}");
                failed.push((mu, e.to_string()));
            }
        }
    }
    if sols.is_empty() {
        return Err(Error::Pipeline(format!("all {} truth solves failed", set.len())));
    }
    let mut snaps = Snapshots::from_solutions(params, &sols)?;
    snaps.failed = failed;
    Ok(snaps)
}

/// `C_ml = (1/N_max) (s_m, s_l)`
pub fn correlation_matrix(s: &SnapshotMatrix, ip: &SpaceTimeInnerProduct) -> Result<DMatrix<f64>> {
    let n = s.data.ncols();
    if n == 0 {
        return Err(Error::Pipeline("correlation matrix of an empty snapshot set".into()));
    }
    let mut c = ip.gram_matrix(&s.data, &s.data)? / n as f64;
    // Exact symmetry.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Ok(c)
}

#[derive(Clone, Debug)]
pub struct EigenPairs {
    /// Retained eigenvalues, descending.
    pub values: Vec<f64>,
    /// Unit eigenvectors as columns, matching `values`.
    pub vectors: DMatrix<f64>,
    /// Every eigenvalue of `C`, descending, including discarded ones.
    pub spectrum: Vec<f64>,
}

/// Top-`n` eigenpairs; pairs below `cutoff · θ_1` are discarded.
pub fn pod_eigendecompose(c: &DMatrix<f64>, n: usize, cutoff: f64) -> Result<EigenPairs> {
    let eig = SymmetricEigen::new(c.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let theta1 = spectrum.first().copied().unwrap_or(0.0);
    let retainable = if theta1 > 0.0 {
        spectrum.iter().take_while(|&&t| t >= cutoff * theta1 && t > 0.0).count()
    } else {
        0
    };
    if n > retainable {
        return Err(Error::BasisDeficiency {
            requested: n,
            retainable,
        });
    }
    let vectors = DMatrix::from_fn(c.nrows(), n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok(EigenPairs {
        values: spectrum[..n].to_vec(),
        vectors,
        spectrum,
    })
}

/// Number of eigenpairs above the relative cutoff.
pub fn retained_rank(spectrum: &[f64], cutoff: f64) -> usize {
    let theta1 = spectrum.first().copied().unwrap_or(0.0);
    if theta1 <= 0.0 {
        return 0;
    }
    spectrum.iter().take_while(|&&t| t >= cutoff * theta1).count()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PodBasis {
    pub var: Var,
    pub kind: InnerProductKind,
    /// Full spectrum of the correlation matrix, descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal space-time basis columns.
    pub basis: DMatrix<f64>,
}

impl PodBasis {
    pub fn n(&self) -> usize {
        self.basis.ncols()
    }

    /// `Σ_{n > N} θ_n`, with tiny negative rounding clamped away.
    pub fn tail(&self, n: usize) -> f64 {
        self.eigenvalues.iter().skip(n).map(|t| t.max(0.0)).sum()
    }

    pub fn write_eigs_csv(bases: &[PodBasis], mut out: impl Write) -> Result<()> {
        writeln!(out, "variable,n,theta_n,cumulative_energy")?;
        for b in bases {
            let total: f64 = b.eigenvalues.iter().map(|t| t.max(0.0)).sum();
            let mut acc = 0.0;
            for (i, &t) in b.eigenvalues.iter().enumerate() {
                acc += t.max(0.0);
                let energy = if total > 0.0 { acc / total } else { 0.0 };
                writeln!(out, "{},{},{:e},{:.16e}", b.var.name(), i + 1, t, energy)?;
            }
        }
        Ok(())
    }
}

/// `ζ_n = (1/√(N_max θ_n)) Σ_m (x_n)_m s_m`, then two-pass modified
/// Gram–Schmidt in `ip`.
pub fn build_basis(s: &SnapshotMatrix, eig: &EigenPairs, ip: &SpaceTimeInnerProduct) -> Result<PodBasis> {
    let n_max = s.data.ncols() as f64;
    let mut z = &s.data * &eig.vectors;
    for (j, &theta) in eig.values.iter().enumerate() {
        let scale = 1.0 / (n_max * theta).sqrt();
        z.column_mut(j).iter_mut().for_each(|x| *x *= scale);
    }
    let z = orthonormalize(z, ip)?;
    Ok(PodBasis {
        var: s.var,
        kind: ip.kind,
        eigenvalues: eig.spectrum.clone(),
        basis: z,
    })
}

/// Modified Gram–Schmidt with one re-orthogonalization pass per column.
pub fn orthonormalize(mut z: DMatrix<f64>, ip: &SpaceTimeInnerProduct) -> Result<DMatrix<f64>> {
    let mut xz: Vec<Vec<f64>> = Vec::with_capacity(z.ncols());
    for j in 0..z.ncols() {
        for _pass in 0..2 {
            for (i, xzi) in xz.iter().enumerate() {
                let c: f64 = xzi.iter().zip(z.column(j).iter()).map(|(a, b)| a * b).sum();
                let (zi, mut zj) = z.columns_range_pair_mut(i, j);
                zj.axpy(-c, &zi, 1.0);
            }
        }
        let xj = ip.apply(z.column(j).as_slice())?;
        let nrm: f64 = xj.iter().zip(z.column(j).iter()).map(|(a, b)| a * b).sum::<f64>().sqrt();
        if !(nrm > 0.0) || !nrm.is_finite() {
            return Err(Error::BasisDeficiency {
                requested: z.ncols(),
                retainable: j,
            });
        }
        z.column_mut(j).iter_mut().for_each(|x| *x /= nrm);
        xz.push(xj.into_iter().map(|x| x / nrm).collect());
    }
    Ok(z)
}

/// Eigenpairs of the correlation matrix from the singular values of the
/// weighted snapshots. Small eigenvalues keep their relative accuracy, which
/// a direct eigensolve of `C` loses below `ε θ_1`.
pub fn pod_spectrum(s: &SnapshotMatrix, ip: &SpaceTimeInnerProduct, n: usize, cutoff: f64) -> Result<EigenPairs> {
    let cols = s.data.ncols();
    if cols == 0 {
        return Err(Error::Pipeline("no snapshots".into()));
    }
    let a = ip.weighted(&s.data)? / (cols as f64).sqrt();
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Factorization("singular value decomposition failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut spectrum: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    spectrum.resize(cols, 0.0);
    let retainable = retained_rank(&spectrum, cutoff);
    if n > retainable {
        return Err(Error::BasisDeficiency {
            requested: n,
            retainable,
        });
    }
    let vectors = DMatrix::from_fn(cols, n, |i, j| v_t[(order[j], i)]);
    Ok(EigenPairs {
        values: spectrum[..n].to_vec(),
        vectors,
        spectrum,
    })
}

/// Full partitioned POD of one variable.
pub fn pod(s: &SnapshotMatrix, ip: &SpaceTimeInnerProduct, n: usize, cutoff: f64) -> Result<PodBasis> {
    let eig = pod_spectrum(s, ip, n, cutoff)?;
    build_basis(s, &eig, ip)
}

/// `(1/N_max) Σ_m ‖s_m − Π_N s_m‖²` for the first `n` basis columns.
pub fn mean_projection_error(s: &SnapshotMatrix, basis: &DMatrix<f64>, n: usize, ip: &SpaceTimeInnerProduct) -> Result<f64> {
    let z = basis.columns(0, n).into_owned();
    let xs = ip.apply_matrix(&s.data)?;
    let coeff = z.transpose() * &xs;
    let resid = &s.data - &z * coeff;
    let mut total = 0.0;
    for j in 0..resid.ncols() {
        let r = resid.column(j);
        total += ip.ip(r.as_slice(), r.as_slice())?;
    }
    Ok(total / s.data.ncols() as f64)
}

/// Coefficients of the `ip`-orthogonal projection onto `basis`.
pub fn project_coefficients(basis: &DMatrix<f64>, x: &[f64], ip: &SpaceTimeInnerProduct) -> Result<DVector<f64>> {
    let xx = DVector::from_vec(ip.apply(x)?);
    Ok(basis.transpose() * xx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_ip(n: usize, nt: usize, dt: f64) -> SpaceTimeInnerProduct {
        SpaceTimeInnerProduct {
            kind: InnerProductKind::L2,
            gram: SparseMatrix::identity(n),
            dt,
            nt,
        }
    }

    #[test]
    fn sampling_is_reproducible_and_inside_box() {
        let b = ParameterBox::default();
        let a = sample_parameters(100, &b, 7).unwrap();
        assert_eq!(a, sample_parameters(100, &b, 7).unwrap());
        assert_ne!(a, sample_parameters(100, &b, 8).unwrap());
        assert!(a.params.iter().all(|&m| b.contains(m)));
        assert!(sample_parameters(0, &b, 1).is_err());
        let empty = ParameterBox { lo: [0.0; 3], hi: [0.0, 1.0, 1.0] };
        assert!(sample_parameters(3, &empty, 1).is_err());
    }

    #[test]
    fn duplicate_columns_give_rank_one() {
        let ip = identity_ip(3, 2, 0.5);
        let col = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let s = SnapshotMatrix {
            var: Var::H,
            data: DMatrix::from_fn(6, 3, |i, _| col[i]),
        };
        let c = correlation_matrix(&s, &ip).unwrap();
        let e = pod_eigendecompose(&c, 1, 1e-12).unwrap();
        assert!(e.spectrum[1].abs() < 1e-12 * e.spectrum[0]);
        assert!(matches!(
            pod_eigendecompose(&c, 2, 1e-12),
            Err(Error::BasisDeficiency { requested: 2, retainable: 1 })
        ));
        let b = build_basis(&s, &e, &ip).unwrap();
        let nrm = ip.norm(&col).unwrap();
        for i in 0..6 {
            assert!((b.basis[(i, 0)].abs() - col[i].abs() / nrm).abs() < 1e-14);
        }
    }

    #[test]
    fn inner_product_length_checked() {
        let ip = identity_ip(2, 2, 1.0);
        assert!(ip.ip(&[1.0; 3], &[1.0; 3]).is_err());
        assert!(spacetime_inner_product(&[1.0; 4], &[1.0; 3], &ip).is_err());
    }
}
