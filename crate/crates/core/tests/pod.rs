use std::sync::OnceLock;

use nalgebra::DMatrix;
use proptest::prelude::*;

use swe_ocp::geometry::MeshConfig;
use swe_ocp::pod::{
    collect_snapshots, correlation_matrix, mean_projection_error, pod, pod_eigendecompose, pod_spectrum,
    sample_parameters, InnerProducts, SnapshotMatrix, Snapshots, SpaceTimeInnerProduct,
};
use swe_ocp::spacetime::{DesiredMode, ParameterBox, Parameters, TruthModel, Var};
use swe_ocp::Error;

struct Fixture {
    model: TruthModel,
    snapshots: Snapshots,
    ips: InnerProducts,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let base = Parameters {
            nt: 4,
            t_final: 0.4,
            ..Parameters::default()
        };
        let model = TruthModel::new(&MeshConfig::square(10.0, 5), base, DesiredMode::default()).unwrap();
        let set = sample_parameters(12, &ParameterBox::default(), 7).unwrap();
        let snapshots = collect_snapshots(&model, &set).unwrap();
        let ips = InnerProducts::new(&model.ops, model.base.dt(), model.base.nt);
        Fixture { model, snapshots, ips }
    })
}

#[test]
fn projection_residual_equals_eigenvalue_tail() {
    let f = fixture();
    for var in Var::ALL {
        let s = f.snapshots.matrix(var);
        let basis = pod(s, f.ips.get(var), 6, 1e-12).unwrap();
        for n in [1, 2, 4, 6] {
            let err = mean_projection_error(s, &basis.basis, n, f.ips.get(var)).unwrap();
            let tail = basis.tail(n);
            assert!((err - tail).abs() <= 1e-8 * tail.abs(), "{} n={n}: {err:e} vs {tail:e}", var.name());
        }
    }
}

#[test]
fn basis_is_orthonormal_in_its_inner_product() {
    let f = fixture();
    for var in Var::ALL {
        let ip = f.ips.get(var);
        let basis = pod(f.snapshots.matrix(var), ip, 5, 1e-12).unwrap();
        let gram = ip.gram_matrix(&basis.basis, &basis.basis).unwrap();
        let err = (gram - DMatrix::identity(5, 5)).amax();
        assert!(err < 1e-12, "{}: {err:e}", var.name());
    }
}

#[test]
fn spectrum_is_invariant_under_column_permutation() {
    let f = fixture();
    let s = f.snapshots.matrix(Var::H);
    let ip = f.ips.get(Var::H);
    let mut perm = s.clone();
    let n = s.data.ncols();
    perm.data = DMatrix::from_fn(s.data.nrows(), n, |i, j| s.data[(i, n - 1 - j)]);
    let a = pod_eigendecompose(&correlation_matrix(s, ip).unwrap(), 4, 1e-12).unwrap();
    let b = pod_eigendecompose(&correlation_matrix(&perm, ip).unwrap(), 4, 1e-12).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() <= 1e-12 * a.values[0]);
    }
}

#[test]
fn velocity_norm_includes_gradients() {
    let f = fixture();
    let ipv = f.ips.get(Var::V);
    let col = f.snapshots.matrix(Var::V).data.column(0).into_owned();
    let h1 = ipv.norm(col.as_slice()).unwrap();
    // Δt Σ_k v_kᵀ M v_k alone
    let dt = f.model.base.dt();
    let nv = f.model.layout().nv;
    let mut l2 = 0.0;
    for k in 0..f.model.base.nt {
        let vk = &col.as_slice()[k * nv..(k + 1) * nv];
        l2 += dt * f.model.ops.m_v.quad_form(vk, vk);
    }
    assert!(h1 * h1 > l2);
}

#[test]
fn asking_beyond_the_rank_is_a_deficiency() {
    let f = fixture();
    let s = f.snapshots.matrix(Var::U);
    let c = correlation_matrix(s, f.ips.get(Var::U)).unwrap();
    match pod_eigendecompose(&c, 13, 1e-12) {
        Err(Error::BasisDeficiency { requested: 13, retainable }) => assert!(retainable <= 12),
        other => panic!("unexpected {other:?}"),
    }
}

// Cyclic Jacobi rotations until the off-diagonal mass vanishes.
fn jacobi_eigenvalues(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let mut r = DMatrix::identity(n, n);
                r[(p, p)] = c;
                r[(q, q)] = c;
                r[(p, q)] = s;
                r[(q, p)] = -s;
                a = r.transpose() * a * r;
            }
        }
    }
    let mut d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    d.sort_by(|x, y| y.total_cmp(x));
    d
}

#[test]
fn eigenvalues_match_jacobi_oracle() {
    let f = fixture();
    let s = f.snapshots.matrix(Var::V);
    let five = SnapshotMatrix {
        var: Var::V,
        data: s.data.columns(0, 5).into_owned(),
    };
    let c = correlation_matrix(&five, f.ips.get(Var::V)).unwrap();
    let want = jacobi_eigenvalues(c.clone());
    let got = pod_eigendecompose(&c, 0, 1e-12).unwrap().spectrum;
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12 * want[0].max(1.0), "{g} vs {w}");
    }
    let accurate = pod_spectrum(&five, f.ips.get(Var::V), 0, 1e-12).unwrap().spectrum;
    for (a, w) in accurate.iter().zip(&want) {
        assert!((a - w).abs() < 1e-12 * want[0].max(1.0), "{a} vs {w}");
    }
}

#[test]
fn trace_is_mean_squared_norm() {
    let f = fixture();
    for var in Var::ALL {
        let s = f.snapshots.matrix(var);
        let ip = f.ips.get(var);
        let c = correlation_matrix(s, ip).unwrap();
        assert_eq!(c, c.transpose());
        let mean: f64 = (0..s.data.ncols())
            .map(|j| ip.ip(s.data.column(j).as_slice(), s.data.column(j).as_slice()).unwrap())
            .sum::<f64>()
            / s.data.ncols() as f64;
        assert!((c.trace() - mean).abs() < 1e-10 * mean);
        let eig = pod_eigendecompose(&c, 0, 1e-12).unwrap();
        assert!((eig.spectrum.iter().sum::<f64>() - c.trace()).abs() < 1e-10 * mean);
    }
}

#[test]
fn constant_height_trajectory_has_area_times_time() {
    let base = Parameters::default();
    let model = TruthModel::new(&MeshConfig::square(10.0, 4), base, DesiredMode::default()).unwrap();
    let ip = SpaceTimeInnerProduct::new(&model.ops, Var::H, base.dt(), base.nt);
    let one = vec![1.0; ip.len()];
    assert!((ip.ip(&one, &one).unwrap() - 80.0).abs() < 1e-8);
}

fn synthetic(amplitudes: &[f64], cols: usize) -> (SnapshotMatrix, InnerProducts) {
    let f = fixture();
    let ips = InnerProducts::new(&f.model.ops, f.model.base.dt(), f.model.base.nt);
    let modes = f.snapshots.matrix(Var::H).data.columns(0, amplitudes.len()).into_owned();
    let data = DMatrix::from_fn(modes.nrows(), cols, |i, j| {
        (0..amplitudes.len())
            .map(|m| amplitudes[m] * ((j * (m + 1)) as f64 * 0.7).cos() * modes[(i, m)])
            .sum()
    });
    (SnapshotMatrix { var: Var::H, data }, ips)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn rank_is_bounded_by_generating_modes(a in 0.1..5.0f64, b in 0.1..5.0f64, cols in 4usize..10) {
        let (s, ips) = synthetic(&[a, b], cols);
        let c = correlation_matrix(&s, ips.get(Var::H)).unwrap();
        let eig = pod_eigendecompose(&c, 0, 1e-10).unwrap();
        let retained = eig.spectrum.iter().filter(|&&t| t >= 1e-10 * eig.spectrum[0]).count();
        prop_assert!(retained <= 2);
        let basis = pod(&s, ips.get(Var::H), retained, 1e-10).unwrap();
        let err = mean_projection_error(&s, &basis.basis, retained, ips.get(Var::H)).unwrap();
        prop_assert!(err <= 1e-10 * eig.spectrum[0]);
    }

    #[test]
    fn scaling_snapshots_scales_spectrum(scale in 0.1..10.0f64) {
        let f = fixture();
        let s = f.snapshots.matrix(Var::Lambda);
        let ip = f.ips.get(Var::Lambda);
        let scaled = SnapshotMatrix { var: s.var, data: &s.data * scale };
        let a = pod_eigendecompose(&correlation_matrix(s, ip).unwrap(), 3, 1e-12).unwrap();
        let b = pod_eigendecompose(&correlation_matrix(&scaled, ip).unwrap(), 3, 1e-12).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x * scale * scale - y).abs() <= 1e-10 * y);
        }
    }
}
