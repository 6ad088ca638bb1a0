use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swe_ocp::bench::{error_sweep, relative_errors};
use swe_ocp::config::Config;
use swe_ocp::geometry::MeshConfig;
use swe_ocp::io::{read_sections, write_sections};
use swe_ocp::pipeline::{
    build_rom, load_rom, load_snapshots, rom_from_sections, rom_sections, run_offline, save_snapshots, truth_model,
    OfflineArtifacts, Workdir,
};
use swe_ocp::pod::InnerProducts;
use swe_ocp::rom::{online_solve, ReducedVector};
use swe_ocp::spacetime::{full_order_allocations, KktSystem, SpaceTimeVector, TruthModel, Var};
use swe_ocp::Error;

struct Fixture {
    cfg: Config,
    model: TruthModel,
    offline: OfflineArtifacts,
    ips: InnerProducts,
}

fn small_config() -> Config {
    let mut cfg = Config::default();
    cfg.mesh = MeshConfig::square(10.0, 5);
    cfg.params.nt = 4;
    cfg.params.t_final = 0.4;
    cfg.pod.n_max = 8;
    cfg.pod.n = 8;
    cfg.pod.cutoff = 1e-14;
    cfg
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = small_config();
        let model = truth_model(&cfg).unwrap();
        let offline = run_offline(&model, &cfg).unwrap();
        let ips = InnerProducts::new(&model.ops, model.base.dt(), model.base.nt);
        Fixture {
            cfg,
            model,
            offline,
            ips,
        }
    })
}

fn random_reduced(n: usize, rng: &mut ChaCha8Rng) -> ReducedVector {
    let mut y = ReducedVector::zeros(n);
    y.data.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    y
}

#[test]
fn reduced_system_is_the_projected_full_system() {
    let f = fixture();
    let (rom, z) = (&f.offline.rom, &f.offline.bases);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..3 {
        let mu = [rng.random_range(0.0..1.0), rng.random_range(0.01..0.5), rng.random_range(0.1..1.0)];
        let p = f.model.params(mu);
        let data = f.model.problem_data(mu).unwrap();
        let sys = KktSystem::new(&f.model.ops, p, &data).unwrap();
        let y = random_reduced(rom.n, &mut rng);
        let w = z.reconstruct(&y).unwrap();
        let (r, j) = sys.residual_and_jacobian(&w).unwrap();
        let (rr, jr) = rom.reduced_system(&y, &p).unwrap();
        let want_r = z.restrict(&r).unwrap();
        assert!((&rr - &want_r.data).amax() < 1e-10, "residual {:e}", (&rr - &want_r.data).amax());
        let mut want_j = DMatrix::zeros(rom.total_dim(), rom.total_dim());
        for c in 0..rom.total_dim() {
            let mut e = ReducedVector::zeros(rom.n);
            e.data[c] = 1.0;
            let ze = z.reconstruct(&e).unwrap();
            let jz = SpaceTimeVector::from_vec(ze.layout, j.mul_vec(&ze.data)).unwrap();
            want_j.set_column(c, &z.restrict(&jz).unwrap().data);
        }
        assert!((&jr - &want_j).amax() < 1e-10, "jacobian {:e}", (&jr - &want_j).amax());
    }
}

#[test]
fn reduced_jacobian_has_zero_multiplier_block() {
    let f = fixture();
    let rom = &f.offline.rom;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = random_reduced(rom.n, &mut rng);
    let (_, j) = rom.reduced_system(&y, &f.model.params([0.4, 0.2, 0.9])).unwrap();
    let start = ReducedVector::range(rom.n, Var::Chi).start;
    let block = j.view((start, start), (j.nrows() - start, j.ncols() - start));
    assert_eq!(block.amax(), 0.0);
    assert!((&j - j.transpose()).amax() < 1e-10);
}

#[test]
fn truncation_matches_rebuilt_smaller_model() {
    let f = fixture();
    let (_, z3, rom3) = build_rom(&f.model, &f.cfg, &f.offline.snapshots, 3).unwrap();
    let cut = f.offline.rom.truncate(3).unwrap();
    let zc = f.offline.bases.truncate(3).unwrap();
    assert!((&zc.zv - &z3.zv).amax() < 1e-10);
    assert!((&zc.zh - &z3.zh).amax() < 1e-10);
    assert!((&cut.k_r - &rom3.k_r).amax() < 1e-10);
    assert!((&cut.mvu_r - &rom3.mvu_r).amax() < 1e-10);
    let t: f64 = cut.tadv_r.data.iter().zip(&rom3.tadv_r.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(t < 1e-10);
    assert!((&cut.y_init.data - &rom3.y_init.data).amax() < 1e-10);
}

#[test]
fn online_solve_allocates_nothing_full_order() {
    let f = fixture();
    let before = full_order_allocations();
    let sol = online_solve(&f.offline.rom, &f.model.params([0.3, 0.3, 0.5]), None, &f.model.newton).unwrap();
    assert_eq!(full_order_allocations(), before);
    assert!(*sol.residual_history.last().unwrap() < 1e-9);
}

#[test]
fn training_point_is_reproduced_with_full_basis() {
    let f = fixture();
    let j = 0;
    let mu = f.offline.snapshots.params[j];
    let truth = f.offline.snapshots.column(j, f.model.layout()).unwrap();
    let sol = online_solve(&f.offline.rom, &f.model.params(mu), None, &f.model.newton).unwrap();
    let w = f.offline.bases.reconstruct(&sol.y).unwrap();
    let err = relative_errors(&truth, &w, &f.ips).unwrap();
    assert!(err.iter().all(|&e| e < 1e-6), "{err:?}");
}

#[test]
fn error_sweep_is_deterministic_and_decays() {
    let f = fixture();
    let mus = [[0.2, 0.1, 0.4], [0.7, 0.4, 0.9]];
    let truths: Vec<_> = mus.iter().map(|&mu| (mu, f.model.solve(mu).unwrap().w)).collect();
    let n_list = [1, 4, f.offline.rom.n];
    let a = error_sweep(&f.offline.rom, &f.offline.bases, &f.model, &truths, &n_list, &f.ips, &f.model.newton).unwrap();
    let b = error_sweep(&f.offline.rom, &f.offline.bases, &f.model, &truths, &n_list, &f.ips, &f.model.newton).unwrap();
    let (mut ca, mut cb) = (Vec::new(), Vec::new());
    a.write_csv(&mut ca).unwrap();
    b.write_csv(&mut cb).unwrap();
    assert_eq!(ca, cb);
    assert!(String::from_utf8(ca).unwrap().starts_with("N,err_v,err_h,err_u,err_chi,err_lambda\n"));
    let first = a.rows[0].mean;
    let last = a.rows[2].mean;
    for i in 0..5 {
        assert!(last[i] < first[i]);
    }
}

#[test]
fn artifacts_round_trip_bit_identically() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let wd = Workdir::new(dir.path());
    f.offline.save(&wd, &f.cfg).unwrap();
    let (rom, bases) = load_rom(&wd).unwrap();
    assert_eq!(rom, f.offline.rom);
    assert_eq!(bases.zv, f.offline.bases.zv);
    assert_eq!(bases.zu, f.offline.bases.zu);
    let snaps = load_snapshots(&wd.snapshots().join("snapshots.bin")).unwrap();
    assert_eq!(snaps.params, f.offline.snapshots.params);
    for var in Var::ALL {
        assert_eq!(snaps.matrix(var).data, f.offline.snapshots.matrix(var).data);
    }
    let manifest = std::fs::read_to_string(wd.rom().join("manifest.txt")).unwrap();
    assert!(manifest.contains(&f.cfg.hash()));
    let eigs = std::fs::read_to_string(wd.reports().join("eigs.csv")).unwrap();
    assert!(eigs.starts_with("variable,n,theta_n,cumulative_energy\n"));

    let path = dir.path().join("again.bin");
    save_snapshots(&path, &snaps).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(wd.snapshots().join("snapshots.bin")).unwrap());
}

#[test]
fn missing_and_malformed_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let wd = Workdir::new(dir.path());
    assert!(matches!(load_rom(&wd), Err(Error::MissingArtifact(_))));
    let f = fixture();
    let path = dir.path().join("rom.bin");
    let mut sections = rom_sections(&f.offline.rom);
    sections.retain(|s| s.tag != "tdiv");
    write_sections(&path, &sections).unwrap();
    let back = read_sections(&path).unwrap();
    assert!(matches!(rom_from_sections(&back, &path), Err(Error::Format { .. })));
}

