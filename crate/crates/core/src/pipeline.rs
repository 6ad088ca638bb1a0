//! Offline stage orchestration and artifact persistence.
//!
//! Workdir layout: `snapshots/`, `basis/`, `rom/`, `reports/`.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::io::{find, read_sections, write_sections, Section};
use crate::pod::{
    build_basis, collect_snapshots, pod_spectrum, retained_rank, sample_parameters,
    InnerProducts, PodBasis, SnapshotMatrix, Snapshots, TrainingSet,
};
use crate::rom::{aggregate_spaces, project_operators, AggregatedBases, DenseTensor3, ReducedVector, RomOperators};
use crate::spacetime::{DesiredMode, SpaceTimeLayout, SpaceTimeVector, TruthModel, Var};

#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn snapshots(&self) -> PathBuf {
        self.root.join("snapshots")
    }

    pub fn basis(&self) -> PathBuf {
        self.root.join("basis")
    }

    pub fn rom(&self) -> PathBuf {
        self.root.join("rom")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.snapshots(), self.basis(), self.rom(), self.reports()] {
            std::fs::create_dir_all(d)?;
        }
        Ok(())
    }
}

pub fn truth_model(cfg: &Config) -> Result<TruthModel> {
    TruthModel::with_options(&cfg.mesh, cfg.params, cfg.desired, cfg.forward, cfg.newton)
}

#[derive(Clone, Debug)]
pub struct OfflineArtifacts {
    pub training: TrainingSet,
    pub snapshots: Snapshots,
    pub pods: Vec<PodBasis>,
    pub bases: AggregatedBases,
    pub rom: RomOperators,
}

/// Reference point whose uncontrolled state seeds online Newton.
pub fn initial_guess_mu(model: &TruthModel, cfg: &Config) -> [f64; 3] {
    match model.reference_mu() {
        Some([a, b]) => [a, b, 1.0],
        None => std::array::from_fn(|i| 0.5 * (cfg.pbox.lo[i] + cfg.pbox.hi[i])),
    }
}

/// POD of every variable from stored snapshots, with a common basis size of
/// `min(n, smallest retained rank)`.
pub fn build_pods(snapshots: &Snapshots, ips: &InnerProducts, n: usize, cutoff: f64) -> Result<Vec<PodBasis>> {
    let mut rank = usize::MAX;
    for var in Var::ALL {
        let eig = pod_spectrum(snapshots.matrix(var), ips.get(var), 0, cutoff)?;
        rank = rank.min(retained_rank(&eig.spectrum, cutoff));
    }
    if rank == 0 {
        return Err(Error::BasisDeficiency {
            requested: n,
            retainable: 0,
        });
    }
    let n_eff = n.min(rank);
    if n_eff < n {
        log::warn!("requested N = {n} but only {rank} modes are retainable for every variable; using N = {n_eff}");
    }
    Var::ALL
        .iter()
        .map(|&var| {
            let eig = pod_spectrum(snapshots.matrix(var), ips.get(var), n_eff, cutoff)?;
            build_basis(snapshots.matrix(var), &eig, ips.get(var))
        })
        .collect()
}

/// Reduced model from snapshots: POD, aggregation and projection.
pub fn build_rom(model: &TruthModel, cfg: &Config, snapshots: &Snapshots, n: usize) -> Result<(Vec<PodBasis>, AggregatedBases, RomOperators)> {
    let layout = model.layout();
    let ips = InnerProducts::new(&model.ops, model.base.dt(), model.base.nt);
    let pods = build_pods(snapshots, &ips, n, cfg.pod.cutoff)?;
    let bases = aggregate_spaces(&pods, &ips.v, &ips.h, layout)?;
    let desired = match model.desired_mode {
        DesiredMode::Fixed { .. } => model.desired([0.0, 0.0, 1.0])?,
        DesiredMode::PerParameter => {
            log::warn!("reduced model uses the desired trajectory at the parameter box center");
            let c = initial_guess_mu(model, cfg);
            model.desired([c[0], c[1], 1.0])?
        }
    };
    let data = model.problem_data(initial_guess_mu(model, cfg))?;
    let unc = model.uncontrolled(initial_guess_mu(model, cfg))?;
    let mut w0 = SpaceTimeVector::zeros(layout);
    w0.var_mut(Var::V).copy_from_slice(&unc.v);
    w0.var_mut(Var::H).copy_from_slice(&unc.h);
    let y_init = bases.project(&w0, &ips.v, &ips.h, &ips.u)?;
    let rom = project_operators(&model.ops, &bases, &model.base, &data, &desired, y_init)?;
    Ok((pods, bases, rom))
}

pub fn run_offline(model: &TruthModel, cfg: &Config) -> Result<OfflineArtifacts> {
    let training = sample_parameters(cfg.pod.n_max, &cfg.pbox, cfg.pod.seed)?;
    log::info!("collecting {} snapshots", training.len());
    let snapshots = collect_snapshots(model, &training)?;
    let (pods, bases, rom) = build_rom(model, cfg, &snapshots, cfg.pod.n)?;
    Ok(OfflineArtifacts {
        training,
        snapshots,
        pods,
        bases,
        rom,
    })
}

fn params_matrix(params: &[[f64; 3]]) -> DMatrix<f64> {
    DMatrix::from_fn(3, params.len(), |i, j| params[j][i])
}

fn params_from(m: &DMatrix<f64>) -> Vec<[f64; 3]> {
    (0..m.ncols()).map(|j| [m[(0, j)], m[(1, j)], m[(2, j)]]).collect()
}

pub fn save_snapshots(path: &Path, s: &Snapshots) -> Result<()> {
    let mut sections = vec![Section::new("params", params_matrix(&s.params))];
    for m in &s.matrices {
        sections.push(Section::new(m.var.name(), m.data.clone()));
    }
    write_sections(path, &sections)
}

pub fn load_snapshots(path: &Path) -> Result<Snapshots> {
    let s = read_sections(path)?;
    let params = params_from(find(&s, "params", path)?);
    let matrices = Var::ALL
        .iter()
        .map(|&var| {
            Ok(SnapshotMatrix {
                var,
                data: find(&s, var.name(), path)?.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Snapshots {
        params,
        matrices,
        failed: Vec::new(),
    })
}

fn tensor_to_matrix(t: &DenseTensor3) -> DMatrix<f64> {
    let [a, b, c] = t.dims;
    DMatrix::from_fn(a * b, c, |r, k| t.get(r / b, r % b, k))
}

fn tensor_from_matrix(m: &DMatrix<f64>, dims: [usize; 3]) -> DenseTensor3 {
    let mut t = DenseTensor3::zeros(dims);
    for r in 0..m.nrows() {
        for k in 0..m.ncols() {
            let i = t.idx(r / dims[1], r % dims[1], k);
            t.data[i] = m[(r, k)];
        }
    }
    t
}

fn col(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

pub fn rom_sections(rom: &RomOperators) -> Vec<Section> {
    let b = &rom.base;
    let meta = DMatrix::from_column_slice(5, 1, &[rom.n as f64, b.t_final, b.nt as f64, b.g, b.alpha]);
    vec![
        Section::new("meta", meta),
        Section::new("mv_diag", rom.mv_diag.clone()),
        Section::new("mv_sub", rom.mv_sub.clone()),
        Section::new("k", rom.k_r.clone()),
        Section::new("d", rom.d_r.clone()),
        Section::new("mvu", rom.mvu_r.clone()),
        Section::new("mh_diag", rom.mh_diag.clone()),
        Section::new("mh_sub", rom.mh_sub.clone()),
        Section::new("mu", rom.mu_r.clone()),
        Section::new("tadv", tensor_to_matrix(&rom.tadv_r)),
        Section::new("tdiv", tensor_to_matrix(&rom.tdiv_r)),
        Section::new("v0", col(&rom.v0_r)),
        Section::new("h0", col(&rom.h0_r)),
        Section::new("vd", col(&rom.vd_r)),
        Section::new("hd", col(&rom.hd_r)),
        Section::new("y_init", col(&rom.y_init.data)),
    ]
}

pub fn rom_from_sections(s: &[Section], path: &Path) -> Result<RomOperators> {
    let get = |t: &str| find(s, t, path);
    let meta = get("meta")?;
    if meta.len() != 5 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "bad meta section".into(),
        });
    }
    let n = meta[0] as usize;
    let m = 2 * n;
    let base = crate::spacetime::Parameters {
        t_final: meta[1],
        nt: meta[2] as usize,
        g: meta[3],
        alpha: meta[4],
        ..Default::default()
    };
    let vec = |t: &str| -> Result<DVector<f64>> { Ok(DVector::from_column_slice(get(t)?.as_slice())) };
    let rom = RomOperators {
        n,
        base,
        mv_diag: get("mv_diag")?.clone(),
        mv_sub: get("mv_sub")?.clone(),
        k_r: get("k")?.clone(),
        d_r: get("d")?.clone(),
        mvu_r: get("mvu")?.clone(),
        mh_diag: get("mh_diag")?.clone(),
        mh_sub: get("mh_sub")?.clone(),
        mu_r: get("mu")?.clone(),
        tadv_r: tensor_from_matrix(get("tadv")?, [m, m, m]),
        tdiv_r: tensor_from_matrix(get("tdiv")?, [m, m, m]),
        v0_r: vec("v0")?,
        h0_r: vec("h0")?,
        vd_r: vec("vd")?,
        hd_r: vec("hd")?,
        y_init: ReducedVector::from_vec(n, get("y_init")?.as_slice().to_vec())?,
    };
    let shapes = [
        (rom.mv_diag.shape(), (m, m)),
        (rom.k_r.shape(), (m, m)),
        (rom.mvu_r.shape(), (m, n)),
        (rom.mu_r.shape(), (n, n)),
        (get("tadv")?.shape(), (m * m, m)),
        (get("tdiv")?.shape(), (m * m, m)),
    ];
    if shapes.iter().any(|(a, b)| a != b) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: "reduced operator shapes do not match N".into(),
        });
    }
    Ok(rom)
}

pub fn save_bases(path: &Path, z: &AggregatedBases) -> Result<()> {
    let l = z.layout;
    let meta = DMatrix::from_column_slice(5, 1, &[z.n as f64, l.nv as f64, l.nh as f64, l.nu as f64, l.nt as f64]);
    write_sections(
        path,
        &[
            Section::new("meta", meta),
            Section::new("zv", z.zv.clone()),
            Section::new("zh", z.zh.clone()),
            Section::new("zu", z.zu.clone()),
        ],
    )
}

pub fn load_bases(path: &Path) -> Result<AggregatedBases> {
    let s = read_sections(path)?;
    let meta = find(&s, "meta", path)?;
    let u = |i: usize| meta[i] as usize;
    Ok(AggregatedBases {
        n: u(0),
        zv: find(&s, "zv", path)?.clone(),
        zh: find(&s, "zh", path)?.clone(),
        zu: find(&s, "zu", path)?.clone(),
        layout: SpaceTimeLayout {
            nv: u(1),
            nh: u(2),
            nu: u(3),
            nt: u(4),
        },
    })
}

pub fn save_pods(path: &Path, pods: &[PodBasis]) -> Result<()> {
    let mut sections = Vec::new();
    for p in pods {
        sections.push(Section::new(format!("z_{}", p.var.name()), p.basis.clone()));
        let e = DMatrix::from_column_slice(p.eigenvalues.len(), 1, &p.eigenvalues);
        sections.push(Section::new(format!("theta_{}", p.var.name()), e));
    }
    write_sections(path, &sections)
}

pub fn load_pods(path: &Path) -> Result<Vec<PodBasis>> {
    let s = read_sections(path)?;
    Var::ALL
        .iter()
        .map(|&var| {
            Ok(PodBasis {
                var,
                kind: crate::pod::InnerProductKind::for_var(var),
                eigenvalues: find(&s, &format!("theta_{}", var.name()), path)?.as_slice().to_vec(),
                basis: find(&s, &format!("z_{}", var.name()), path)?.clone(),
            })
        })
        .collect()
}

impl OfflineArtifacts {
    pub fn save(&self, wd: &Workdir, cfg: &Config) -> Result<()> {
        wd.create()?;
        save_snapshots(&wd.snapshots().join("snapshots.bin"), &self.snapshots)?;
        save_pods(&wd.basis().join("pod.bin"), &self.pods)?;
        save_bases(&wd.basis().join("aggregated.bin"), &self.bases)?;
        write_sections(&wd.rom().join("rom.bin"), &rom_sections(&self.rom))?;
        let mut out = BufWriter::new(File::create(wd.reports().join("eigs.csv"))?);
        PodBasis::write_eigs_csv(&self.pods, &mut out)?;
        write_manifest(&wd.rom().join("manifest.txt"), self, cfg)
    }
}

fn write_manifest(path: &Path, a: &OfflineArtifacts, cfg: &Config) -> Result<()> {
    use std::io::Write;
    let l = a.bases.layout;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "n = {}", a.rom.n)?;
    writeln!(out, "reduced_dim = {}", a.rom.total_dim())?;
    writeln!(out, "velocity_columns = {}", a.bases.zv.ncols())?;
    writeln!(out, "height_columns = {}", a.bases.zh.ncols())?;
    writeln!(out, "control_columns = {}", a.bases.zu.ncols())?;
    writeln!(out, "full_dim = {}", l.total())?;
    writeln!(out, "nv = {}\nnh = {}\nnu = {}\nnt = {}", l.nv, l.nh, l.nu, l.nt)?;
    writeln!(out, "n_max = {}", a.training.len())?;
    writeln!(out, "snapshots = {}", a.snapshots.params.len())?;
    writeln!(out, "failed_solves = {}", a.snapshots.failed.len())?;
    writeln!(out, "training_seed = {}", a.training.seed)?;
    writeln!(out, "config_hash = {}", cfg.hash())?;
    let desired = match cfg.desired {
        DesiredMode::Fixed { mu1, mu2 } => format!("fixed reference ({mu1}, {mu2}) scaled by mu3"),
        DesiredMode::PerParameter => "per-parameter on the truth side, box center on the reduced side".into(),
    };
    writeln!(out, "desired = {desired}")?;
    Ok(())
}

/// Reduced operators and bases written by the offline stage.
pub fn load_rom(wd: &Workdir) -> Result<(RomOperators, AggregatedBases)> {
    let rp = wd.rom().join("rom.bin");
    let bp = wd.basis().join("aggregated.bin");
    for p in [&rp, &bp] {
        if !p.exists() {
            return Err(Error::MissingArtifact(p.clone()));
        }
    }
    let rom = rom_from_sections(&read_sections(&rp)?, &rp)?;
    let bases = load_bases(&bp)?;
    if bases.n != rom.n {
        return Err(Error::Format {
            path: bp,
            reason: format!("basis size {} does not match reduced operators ({})", bases.n, rom.n),
        });
    }
    Ok((rom, bases))
}
