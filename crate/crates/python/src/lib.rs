//! Python bindings: truth solves, the offline stage and reduced solves.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use swe_ocp::config::{parse_config, Config};
use swe_ocp::pipeline::{self, Workdir};
use swe_ocp::rom::{online_solve, AggregatedBases, RomOperators};
use swe_ocp::spacetime::{NewtonOptions, SpaceTimeVector, Var};
use swe_ocp::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::Config(_) | Error::Parse { .. } | Error::Dimension { .. } | Error::BasisDeficiency { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn load_config(path: Option<PathBuf>) -> PyResult<Config> {
    match path {
        Some(p) => parse_config(&p).map_err(py_err),
        None => Ok(Config::default()),
    }
}

fn put_fields(d: &Bound<'_, PyDict>, w: &SpaceTimeVector) -> PyResult<()> {
    for var in Var::ALL {
        d.set_item(var.name(), w.var(var).to_vec())?;
    }
    d.set_item("nt", w.layout.nt)
}

/// Solves the full optimality system at `mu` and returns its fields as
/// time-major lists.
#[pyfunction]
#[pyo3(signature = (mu, config = None))]
fn solve_truth(py: Python<'_>, mu: [f64; 3], config: Option<PathBuf>) -> PyResult<Py<PyDict>> {
    let cfg = load_config(config)?;
    let (sol, cost) = py
        .detach(|| -> Result<_, Error> {
            let model = pipeline::truth_model(&cfg)?;
            let sol = model.solve(mu)?;
            let cost = model.cost(mu, &sol.w)?;
            Ok((sol, cost))
        })
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("iterations", sol.iterations)?;
    d.set_item("residual_history", sol.residual_history.clone())?;
    d.set_item("cost", cost)?;
    put_fields(&d, &sol.w)?;
    Ok(d.unbind())
}

/// Runs the offline stage and writes its artifacts to `workdir`.
/// Returns the reduced basis size.
#[pyfunction]
#[pyo3(signature = (workdir, config = None))]
fn run_offline(py: Python<'_>, workdir: PathBuf, config: Option<PathBuf>) -> PyResult<usize> {
    let cfg = load_config(config)?;
    py.detach(|| -> Result<usize, Error> {
        let model = pipeline::truth_model(&cfg)?;
        let a = pipeline::run_offline(&model, &cfg)?;
        a.save(&Workdir::new(workdir), &cfg)?;
        Ok(a.rom.n)
    })
    .map_err(py_err)
}

/// Reduced model loaded from an offline workdir.
#[pyclass(frozen)]
struct ReducedModel {
    rom: RomOperators,
    bases: AggregatedBases,
    newton: NewtonOptions,
}

#[pymethods]
impl ReducedModel {
    #[staticmethod]
    #[pyo3(signature = (workdir, config = None))]
    fn load(workdir: PathBuf, config: Option<PathBuf>) -> PyResult<Self> {
        let cfg = load_config(config)?;
        let (rom, bases) = pipeline::load_rom(&Workdir::new(workdir)).map_err(py_err)?;
        Ok(Self {
            rom,
            bases,
            newton: cfg.newton,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.rom.n
    }

    /// Reduced solve at `mu` with the leading `n` modes; returns the reduced
    /// coefficients and the reconstructed fields.
    #[pyo3(signature = (mu, n = None))]
    fn solve(&self, py: Python<'_>, mu: [f64; 3], n: Option<usize>) -> PyResult<Py<PyDict>> {
        let n = n.unwrap_or(self.rom.n);
        let (sol, w) = py
            .detach(|| -> Result<_, Error> {
                let rom = self.rom.truncate(n)?;
                let bases = self.bases.truncate(n)?;
                let sol = online_solve(&rom, &rom.base.with_mu(mu), None, &self.newton)?;
                let w = bases.reconstruct(&sol.y)?;
                Ok((sol, w))
            })
            .map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("iterations", sol.iterations)?;
        d.set_item("residual_history", sol.residual_history.clone())?;
        d.set_item("coefficients", sol.y.data.as_slice().to_vec())?;
        put_fields(&d, &w)?;
        Ok(d.unbind())
    }
}

#[pymodule]
fn swe_ocp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(solve_truth, m)?)?;
    m.add_function(wrap_pyfunction!(run_offline, m)?)?;
    m.add_class::<ReducedModel>()?;
    Ok(())
}
