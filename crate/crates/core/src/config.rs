//! Sectioned `key = value` configuration.
//!
//! ```text
//! [mesh]
//! nx = 15
//! [physics]
//! alpha = 0.1
//! mu2 = 0.01, 0.5
//! ```
//!
//! `#` starts a comment. Every key is optional; unknown sections and keys
//! are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::MeshConfig;
use crate::spacetime::{DesiredMode, ForwardOptions, NewtonOptions, ParameterBox, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct PodConfig {
    /// Training set size.
    pub n_max: usize,
    /// Basis size per variable.
    pub n: usize,
    pub seed: u64,
    pub cutoff: f64,
    pub test_size: usize,
    pub test_seed: u64,
}

impl Default for PodConfig {
    fn default() -> Self {
        Self {
            n_max: 100,
            n: 30,
            seed: 1,
            cutoff: 1e-12,
            test_size: 20,
            test_seed: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Config {
    pub mesh: MeshConfig,
    /// `g`, `alpha`, `T`, `nt`; the `μ` fields hold the default solve point.
    pub params: Parameters,
    pub pbox: ParameterBox,
    pub desired: DesiredMode,
    pub pod: PodConfig,
    pub newton: NewtonOptions,
    pub forward: ForwardOptions,
    pub workdir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            mesh: MeshConfig::default(),
            params: Parameters::default(),
            pbox: ParameterBox::default(),
            desired: DesiredMode::default(),
            pod: PodConfig::default(),
            newton: NewtonOptions::default(),
            forward: ForwardOptions::default(),
            workdir: None,
        }
    }
}

pub fn parse_config(path: &Path) -> Result<Config> {
    if !path.exists() {
        return Err(Error::Config(format!("config file {} not found", path.display())));
    }
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, path)
}

pub fn parse_config_str(text: &str, path: &Path) -> Result<Config> {
    let mut cfg = Config::default();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            reason,
        };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?
                .trim();
            if !["mesh", "time", "physics", "pod", "solver", "paths"].contains(&name) {
                return Err(err(format!("unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim().trim_matches('"'));
        if section.is_empty() {
            return Err(err(format!("key `{key}` outside of any section")));
        }
        set_key(&mut cfg, &section, key, value).map_err(err)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{key}`: cannot parse `{v}`"))
}

fn pair(key: &str, v: &str) -> std::result::Result<[f64; 2], String> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("`{key}` expects two comma-separated numbers"));
    }
    Ok([num(key, parts[0])?, num(key, parts[1])?])
}

fn set_key(cfg: &mut Config, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
    match (section, key) {
        ("mesh", "x_min") => cfg.mesh.x_min = num(key, v)?,
        ("mesh", "x_max") => cfg.mesh.x_max = num(key, v)?,
        ("mesh", "y_min") => cfg.mesh.y_min = num(key, v)?,
        ("mesh", "y_max") => cfg.mesh.y_max = num(key, v)?,
        ("mesh", "nx") => cfg.mesh.nx = num(key, v)?,
        ("mesh", "ny") => cfg.mesh.ny = num(key, v)?,
        ("time", "T") => cfg.params.t_final = num(key, v)?,
        ("time", "nt") => cfg.params.nt = num(key, v)?,
        ("physics", "g") => cfg.params.g = num(key, v)?,
        ("physics", "alpha") => cfg.params.alpha = num(key, v)?,
        ("physics", "mu1" | "mu2" | "mu3") => {
            let i = (key.as_bytes()[2] - b'1') as usize;
            [cfg.pbox.lo[i], cfg.pbox.hi[i]] = pair(key, v)?;
        }
        ("physics", "mu") => {
            let parts: Vec<&str> = v.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err("`mu` expects three comma-separated numbers".into());
            }
            cfg.params.mu1 = num(key, parts[0])?;
            cfg.params.mu2 = num(key, parts[1])?;
            cfg.params.mu3 = num(key, parts[2])?;
        }
        ("physics", "desired") => {
            cfg.desired = match v {
                "fixed" => match cfg.desired {
                    DesiredMode::Fixed { .. } => cfg.desired,
                    DesiredMode::PerParameter => DesiredMode::default(),
                },
                "per-parameter" => DesiredMode::PerParameter,
                _ => return Err(format!("`desired` must be `fixed` or `per-parameter`, got `{v}`")),
            }
        }
        ("physics", "reference") => {
            let [mu1, mu2] = pair(key, v)?;
            cfg.desired = DesiredMode::Fixed { mu1, mu2 };
        }
        ("pod", "n_max") => cfg.pod.n_max = num(key, v)?,
        ("pod", "n") => cfg.pod.n = num(key, v)?,
        ("pod", "seed") => cfg.pod.seed = num(key, v)?,
        ("pod", "cutoff") => cfg.pod.cutoff = num(key, v)?,
        ("pod", "test_size") => cfg.pod.test_size = num(key, v)?,
        ("pod", "test_seed") => cfg.pod.test_seed = num(key, v)?,
        ("solver", "tol_abs") => cfg.newton.tol_abs = num(key, v)?,
        ("solver", "tol_rel") => cfg.newton.tol_rel = num(key, v)?,
        ("solver", "max_iter") => cfg.newton.max_iter = num(key, v)?,
        ("solver", "polish") => cfg.newton.polish = num(key, v)?,
        ("solver", "forward_tol") => cfg.forward.tol = num(key, v)?,
        ("solver", "forward_max_iter") => cfg.forward.max_iter = num(key, v)?,
        ("paths", "workdir") => cfg.workdir = Some(PathBuf::from(v)),
        _ => return Err(format!("unknown key `{key}` in [{section}]")),
    }
    Ok(())
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, msg: String| Err(Error::Config(format!("{key}: {msg}")));
        self.mesh.validate()?;
        let p = &self.params;
        if !(p.alpha > 0.0 && p.alpha <= 1.0) {
            return range("alpha", format!("must lie in (0, 1], got {}", p.alpha));
        }
        if !(p.t_final > 0.0) {
            return range("T", format!("must be positive, got {}", p.t_final));
        }
        if p.nt == 0 {
            return range("nt", "must be at least 1".into());
        }
        if !(p.g > 0.0) {
            return range("g", format!("must be positive, got {}", p.g));
        }
        for i in 0..3 {
            if !(self.pbox.hi[i] > self.pbox.lo[i]) {
                return range(&format!("mu{}", i + 1), "range is empty".into());
            }
        }
        if self.pbox.lo[0] < 0.0 || self.pbox.lo[1] < 0.0 {
            return range("mu1/mu2", "lower bounds must be nonnegative".into());
        }
        if self.pod.n_max == 0 {
            return range("n_max", "must be at least 1".into());
        }
        if self.pod.n == 0 {
            return range("n", "must be at least 1".into());
        }
        if self.pod.n > self.pod.n_max {
            return range("n", format!("cannot exceed n_max = {}", self.pod.n_max));
        }
        if !(self.pod.cutoff > 0.0 && self.pod.cutoff < 1.0) {
            return range("cutoff", format!("must lie in (0, 1), got {}", self.pod.cutoff));
        }
        if self.pod.test_size == 0 {
            return range("test_size", "must be at least 1".into());
        }
        if !(self.newton.tol_abs >= 0.0 && self.newton.tol_rel >= 0.0) {
            return range("tol_abs/tol_rel", "must be nonnegative".into());
        }
        if self.newton.max_iter == 0 {
            return range("max_iter", "must be at least 1".into());
        }
        if !(self.forward.tol > 0.0) {
            return range("forward_tol", "must be positive".into());
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.mesh;
        let p = &self.params;
        let b = &self.pbox;
        let _ = writeln!(s, "[mesh]");
        let _ = writeln!(s, "x_min = {:?}\nx_max = {:?}\ny_min = {:?}\ny_max = {:?}", m.x_min, m.x_max, m.y_min, m.y_max);
        let _ = writeln!(s, "nx = {}\nny = {}", m.nx, m.ny);
        let _ = writeln!(s, "\n[time]\nT = {:?}\nnt = {}", p.t_final, p.nt);
        let _ = writeln!(s, "\n[physics]\ng = {:?}\nalpha = {:?}", p.g, p.alpha);
        for i in 0..3 {
            let _ = writeln!(s, "mu{} = {:?}, {:?}", i + 1, b.lo[i], b.hi[i]);
        }
        let _ = writeln!(s, "mu = {:?}, {:?}, {:?}", p.mu1, p.mu2, p.mu3);
        match self.desired {
            DesiredMode::Fixed { mu1, mu2 } => {
                let _ = writeln!(s, "desired = fixed\nreference = {mu1:?}, {mu2:?}");
            }
            DesiredMode::PerParameter => {
                let _ = writeln!(s, "desired = per-parameter");
            }
        }
        let d = &self.pod;
        let _ = writeln!(
            s,
            "\n[pod]\nn_max = {}\nn = {}\nseed = {}\ncutoff = {:?}\ntest_size = {}\ntest_seed = {}",
            d.n_max, d.n, d.seed, d.cutoff, d.test_size, d.test_seed
        );
        let n = &self.newton;
        let _ = writeln!(
            s,
            "\n[solver]\ntol_abs = {:?}\ntol_rel = {:?}\nmax_iter = {}\npolish = {}\nforward_tol = {:?}\nforward_max_iter = {}",
            n.tol_abs, n.tol_rel, n.max_iter, n.polish, self.forward.tol, self.forward.max_iter
        );
        if let Some(w) = &self.workdir {
            let _ = writeln!(s, "\n[paths]\nworkdir = {}", w.display());
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded. The workdir is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = None;
        Sha256::digest(c.to_text().as_bytes())
            .iter()
            .fold(String::new(), |mut s, b| {
                let _ = write!(s, "{b:02x}");
                s
            })
    }
}
