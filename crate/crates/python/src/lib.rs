//! Python module `superres`.
//!
//! Structured results (spectra, evidence, candidate sets, reports) cross the
//! boundary as plain dicts and lists with the same layout as the JSON files
//! the command-line tool writes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::de::DeserializeOwned;
use serde::Serialize;

use superres_core::config::Config;
use superres_core::correlation::{self, CorrelationCurve, DetectorArray, ScanGrid};
use superres_core::error::Error;
use superres_core::pipeline;
use superres_core::reconstruction::{self, CandidateSet, SearchBounds};
use superres_core::spectrum::{self, EvidenceTable, FitOptions, GatePolicy, ModulationSpectrum};
use superres_core::{permanent as perm, SourceGeometry};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Json(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = value.py().import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Irregular linear array of point sources, given by gaps in lattice units.
#[pyclass(name = "SourceGeometry", module = "superres", frozen, eq, skip_from_py_object)]
#[derive(Clone, PartialEq)]
struct PyGeometry(SourceGeometry);

#[pymethods]
impl PyGeometry {
    #[new]
    #[pyo3(signature = (x, d=None))]
    fn new(x: Vec<u32>, d: Option<f64>) -> PyResult<Self> {
        let g = match d {
            Some(d) => SourceGeometry::with_lattice_constant(x, d),
            None => SourceGeometry::new(x),
        };
        g.map(PyGeometry).map_err(err)
    }

    #[staticmethod]
    fn from_positions(positions: Vec<u32>) -> PyResult<Self> {
        SourceGeometry::from_positions(&positions).map(PyGeometry).map_err(err)
    }

    #[getter]
    fn x(&self) -> Vec<u32> {
        self.0.gaps().to_vec()
    }

    #[getter]
    fn d(&self) -> f64 {
        self.0.lattice_constant()
    }

    #[getter]
    fn span(&self) -> u32 {
        self.0.span()
    }

    #[getter]
    fn source_count(&self) -> usize {
        self.0.source_count()
    }

    fn positions(&self) -> Vec<u32> {
        self.0.phase_prefactors().into_vec()
    }

    /// Sorted distinct pair distances.
    fn frequencies(&self) -> PyResult<Vec<u32>> {
        Ok(self.0.distinct_frequencies().map_err(err)?.to_vec())
    }

    /// Pair distance → multiplicity.
    fn pair_distances(&self) -> PyResult<std::collections::BTreeMap<u32, usize>> {
        Ok(self.0.pair_distances().map_err(err)?.counts().clone())
    }

    fn canonical(&self) -> Self {
        PyGeometry(self.0.canonical())
    }

    fn reflect(&self) -> Self {
        PyGeometry(self.0.reflect())
    }

    fn surviving_frequencies(&self, m: usize) -> PyResult<Vec<u32>> {
        Ok(correlation::surviving_frequencies(&self.0, m).map_err(err)?.to_vec())
    }

    fn __repr__(&self) -> String {
        format!("SourceGeometry({})", self.0)
    }
}

/// Run configuration; mirrors the TOML file read by the command-line tool.
#[pyclass(name = "Config", module = "superres", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(Config);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (x, seed=0, orders=None, frames=None))]
    fn new(x: Vec<u32>, seed: u64, orders: Option<Vec<usize>>, frames: Option<usize>) -> PyResult<Self> {
        let mut c = Config::for_geometry(x);
        c.seed = seed;
        if let Some(o) = orders {
            c.orders = o;
        }
        if let Some(f) = frames {
            c.simulation.frames = f;
        }
        c.validate().map_err(err)?;
        Ok(PyConfig(c))
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Config::parse(text).map(PyConfig).map_err(err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.emit().map_err(err)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn orders(&self) -> Vec<usize> {
        self.0.orders.clone()
    }

    #[setter]
    fn set_orders(&mut self, orders: Vec<usize>) {
        self.0.orders = orders;
    }

    #[getter]
    fn frames(&self) -> usize {
        self.0.simulation.frames
    }

    #[setter]
    fn set_frames(&mut self, frames: usize) {
        self.0.simulation.frames = frames;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(x={:?}, seed={}, orders={:?}, frames={})",
            self.0.geometry.x, self.0.seed, self.0.orders, self.0.simulation.frames
        )
    }
}

/// Permanent of a square complex matrix given as nested lists.
#[pyfunction]
fn permanent(matrix: Vec<Vec<num_complex::Complex64>>) -> PyResult<num_complex::Complex64> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| matrix[i][j]);
    perm::permanent(&m).map_err(err)
}

/// Analytic `g^(m)` with fixed detectors at the magic positions, sampled at
/// `samples` points over one period. Returns `(delta1, values)`.
#[pyfunction]
#[pyo3(signature = (geometry, m, samples=64, weights=None))]
fn g_m_analytic(
    geometry: &PyGeometry,
    m: usize,
    samples: usize,
    weights: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let detectors = DetectorArray::magic(m, ScanGrid::periodic(samples)).map_err(err)?;
    let c = correlation::g_m_analytic(&geometry.0, &detectors, weights.as_deref()).map_err(err)?;
    Ok((c.delta1, c.values))
}

/// Exact spectrum of `geometry` at order `m`.
#[pyfunction]
fn predicted_spectrum<'py>(py: Python<'py>, geometry: &PyGeometry, m: usize) -> PyResult<Bound<'py, PyAny>> {
    let spectra = pipeline::analytic_spectra(&geometry.0, &[m]).map_err(err)?;
    to_py(py, &spectra[0])
}

/// Simulated curves for every configured order, as a list of dicts.
#[pyfunction]
fn simulate<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let sim = py.detach(|| pipeline::simulate(&config.0)).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("curves", to_py(py, &sim.curves())?)?;
    out.set_item("warnings", sim.warnings)?;
    Ok(out.into_any())
}

/// Free-frequency fit of one curve.
#[pyfunction]
#[pyo3(signature = (delta1, values, m, sigma=None, max_harmonics=8))]
fn fit_free<'py>(
    py: Python<'py>,
    delta1: Vec<f64>,
    values: Vec<f64>,
    m: usize,
    sigma: Option<Vec<f64>>,
    max_harmonics: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let mut curve = CorrelationCurve::new(m, delta1, values).map_err(err)?;
    if sigma.is_some() {
        curve.sigma = sigma;
        curve.validate().map_err(err)?;
    }
    let fit = py
        .detach(|| spectrum::fit_free(&curve, m, max_harmonics, &FitOptions::default()))
        .map_err(err)?;
    to_py(py, &fit)
}

/// Keep harmonics passing the default gate (or `policy`, a dict).
#[pyfunction]
#[pyo3(signature = (spectrum, policy=None))]
fn gate<'py>(
    py: Python<'py>,
    spectrum: &Bound<'py, PyAny>,
    policy: Option<&Bound<'py, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let s: ModulationSpectrum = from_py(spectrum)?;
    let policy: GatePolicy = match policy {
        Some(p) => from_py(p)?,
        None => GatePolicy::default(),
    };
    to_py(py, &spectrum::gate(&s, &policy))
}

/// Evidence table from gated spectra.
#[pyfunction]
fn aggregate<'py>(py: Python<'py>, spectra: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
    let s: Vec<ModulationSpectrum> = from_py(spectra)?;
    to_py(py, &spectrum::aggregate(&s).map_err(err)?)
}

/// Evidence table with explicit present and absent frequencies.
#[pyfunction]
fn evidence<'py>(py: Python<'py>, present: Vec<u32>, absent: Vec<u32>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &EvidenceTable::from_sets(&present, &absent))
}

/// Evidence from noiseless measurements of `orders`.
#[pyfunction]
fn analytic_evidence<'py>(py: Python<'py>, geometry: &PyGeometry, orders: Vec<usize>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &pipeline::analytic_evidence(&geometry.0, &orders).map_err(err)?)
}

fn bounds(max_sources: usize, max_span: u32, allow_unknown_span: bool) -> SearchBounds {
    SearchBounds {
        max_sources,
        max_span,
        allow_unknown_span,
    }
}

/// Geometries consistent with an evidence table.
#[pyfunction]
#[pyo3(signature = (evidence, max_sources=8, max_span=24, allow_unknown_span=false))]
fn search<'py>(
    py: Python<'py>,
    evidence: &Bound<'py, PyAny>,
    max_sources: usize,
    max_span: u32,
    allow_unknown_span: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let ev: EvidenceTable = from_py(evidence)?;
    let b = bounds(max_sources, max_span, allow_unknown_span);
    let found = py.detach(|| reconstruction::search(&ev, &b)).map_err(err)?;
    to_py(py, &found)
}

/// Exhaustive reference enumeration; spans up to 12.
#[pyfunction]
#[pyo3(signature = (evidence, max_sources=8, max_span=24, allow_unknown_span=false))]
fn oracle_search<'py>(
    py: Python<'py>,
    evidence: &Bound<'py, PyAny>,
    max_sources: usize,
    max_span: u32,
    allow_unknown_span: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let ev: EvidenceTable = from_py(evidence)?;
    let b = bounds(max_sources, max_span, allow_unknown_span);
    to_py(py, &reconstruction::oracle_search(&ev, &b).map_err(err)?)
}

/// Rank a candidate set by χ² against measured spectra.
#[pyfunction]
fn disambiguate<'py>(
    py: Python<'py>,
    candidates: &Bound<'py, PyAny>,
    spectra: &Bound<'py, PyAny>,
) -> PyResult<Bound<'py, PyAny>> {
    let c: CandidateSet = from_py(candidates)?;
    let s: Vec<ModulationSpectrum> = from_py(spectra)?;
    to_py(py, &reconstruction::disambiguate(&c, &s).map_err(err)?)
}

#[pyfunction]
fn aperture_report<'py>(py: Python<'py>, m: usize) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &reconstruction::aperture_report(m).map_err(err)?)
}

/// Simulate, analyze and reconstruct in one call.
#[pyfunction]
fn run_pipeline<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Bound<'py, PyAny>> {
    let c = &config.0;
    let (analysis, report) = py
        .detach(|| -> Result<_, Error> {
            let sim = pipeline::simulate(c)?;
            let analysis = pipeline::analyze(&sim.curves(), c)?;
            let report = pipeline::reconstruct(&analysis.evidence, &analysis.gated_spectra(), &c.search.bounds());
            Ok((analysis, report))
        })
        .map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("analysis", to_py(py, &analysis)?)?;
    match report {
        Ok(r) => out.set_item("reconstruction", to_py(py, &r)?)?,
        Err(Error::EmptyEvidence) => out.set_item("reconstruction", py.None())?,
        Err(e) => return Err(err(e)),
    }
    out.set_item("report", pipeline::report(c, &analysis, None))?;
    Ok(out.into_any())
}

#[pymodule]
fn superres(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGeometry>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(permanent, m)?)?;
    m.add_function(wrap_pyfunction!(g_m_analytic, m)?)?;
    m.add_function(wrap_pyfunction!(predicted_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_free, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(evidence, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_evidence, m)?)?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_search, m)?)?;
    m.add_function(wrap_pyfunction!(disambiguate, m)?)?;
    m.add_function(wrap_pyfunction!(aperture_report, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
