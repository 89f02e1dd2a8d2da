//! End-to-end workflows: simulate, analyze, reconstruct, and report.
//!
//! Each `cmd_*` function reads and writes a single output directory:
//!
//! | file                     | written by    |
//! |--------------------------|---------------|
//! | `frames.bin`             | simulate      |
//! | `curves/g{m}.csv`        | simulate      |
//! | `manifest.json`          | simulate      |
//! | `fits.json`, `spectra.json`, `evidence.json`, `table.csv` | analyze |
//! | `reconstruction.json`    | reconstruct   |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, RunManifest};
use crate::correlation::{predicted_spectrum, CorrelationCurve, ScanGrid};
use crate::error::{Error, Result};
use crate::geometry::SourceGeometry;
use crate::io;
use crate::reconstruction::{aperture_report, disambiguate, search, ApertureReport, Candidate, SearchBounds};
use crate::speckle::{correlate_frames, estimate_g_m, nearest_magic_pixels, sample_frames, FrameStack, SpeckleRun};
use crate::spectrum::{aggregate, fit_free, gate, EvidenceTable, ModulationSpectrum, Rejection};

pub const FRAMES_FILE: &str = "frames.bin";
pub const CURVES_DIR: &str = "curves";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FITS_FILE: &str = "fits.json";
pub const SPECTRA_FILE: &str = "spectra.json";
pub const EVIDENCE_FILE: &str = "evidence.json";
pub const TABLE_FILE: &str = "table.csv";
pub const RECONSTRUCTION_FILE: &str = "reconstruction.json";

/// Placement errors above this many radians are reported as warnings.
const MAGIC_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedCurve {
    pub curve: CorrelationCurve,
    /// Worst distance of a fixed pixel from its magic position, in radians.
    pub magic_error: f64,
    /// False when too few frames were available for error bars.
    pub sigma_reliable: bool,
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub stack: FrameStack,
    pub curves: Vec<SimulatedCurve>,
    pub warnings: Vec<String>,
}

impl Simulation {
    pub fn curves(&self) -> Vec<CorrelationCurve> {
        self.curves.iter().map(|c| c.curve.clone()).collect()
    }
}

/// Speckle run described by the configuration.
pub fn speckle_run(config: &Config) -> Result<SpeckleRun> {
    let mut run = SpeckleRun::new(
        config.source_geometry()?,
        config.simulation.frames,
        config.seed,
        ScanGrid::periodic(config.simulation.pixels),
    );
    if let Some(w) = &config.simulation.weights {
        run.weights = w.clone();
    }
    run.bits = config.simulation.bits;
    run.envelope_width = config.simulation.envelope_width;
    Ok(run)
}

/// Curves for every configured order from an existing frame stack.
pub fn correlate(stack: &FrameStack, config: &Config) -> Result<(Vec<SimulatedCurve>, Vec<String>)> {
    let mut warnings = Vec::new();
    let mut curves = Vec::new();
    for &m in &config.orders {
        let magic = nearest_magic_pixels(stack.delta_axis(), m)?;
        if magic.max_error > MAGIC_TOLERANCE {
            warnings.push(format!(
                "m={m}: fixed pixels sit up to {:.3e} rad from the magic positions",
                magic.max_error
            ));
        }
        let (curve, reliable) = if stack.frames() >= 2 {
            (estimate_g_m(stack, &magic.indices, &config.estimate_options())?, true)
        } else {
            warnings.push(format!("m={m}: a single frame gives no error bars; sigma omitted"));
            (correlate_frames(stack, &magic.indices)?, false)
        };
        curves.push(SimulatedCurve {
            curve,
            magic_error: magic.max_error,
            sigma_reliable: reliable,
        });
    }
    Ok((curves, warnings))
}

pub fn simulate(config: &Config) -> Result<Simulation> {
    config.validate()?;
    let stack = sample_frames(&speckle_run(config)?)?;
    let (curves, mut warnings) = correlate(&stack, config)?;
    if let Some(scene) = config.scene() {
        let geometry = config.source_geometry()?;
        if !scene.far_field(geometry.source_count(), geometry.span()) {
            warnings.push(format!(
                "z = {} m is not far beyond the Fraunhofer distance of this array",
                scene.z
            ));
        }
    }
    Ok(Simulation {
        stack,
        curves,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandSummary {
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub fn cmd_simulate(config: &Config, out: &Path) -> Result<CommandSummary> {
    let started = RunManifest::now();
    let sim = simulate(config)?;
    let mut outputs = Vec::new();

    let mut bytes = Vec::new();
    sim.stack.write_to(&mut bytes)?;
    let frames = out.join(FRAMES_FILE);
    io::write_atomic(&frames, &bytes)?;
    outputs.push(frames);

    let curves_dir = out.join(CURVES_DIR);
    for c in &sim.curves {
        io::write_curve_bundle(&curves_dir, &c.curve)?;
        outputs.push(io::curve_path(&curves_dir, c.curve.order));
        if c.curve.replicates.is_some() {
            outputs.push(io::replicates_path(&curves_dir, c.curve.order));
        }
    }

    let manifest = RunManifest {
        config: config.clone(),
        seed: config.seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started,
        finished: RunManifest::now(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let path = out.join(MANIFEST_FILE);
    io::write_json(&path, &manifest)?;
    outputs.push(path);
    Ok(CommandSummary {
        outputs,
        warnings: sim.warnings,
    })
}

/// Fit and gate result for one order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderAnalysis {
    pub m: usize,
    pub fit: Option<ModulationSpectrum>,
    pub gated: Option<ModulationSpectrum>,
    pub error: Option<String>,
}

/// One row of the fit table: a fitted harmonic and its gate verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub m: usize,
    pub f: f64,
    pub sigma_f: f64,
    #[serde(rename = "A")]
    pub amplitude: f64,
    #[serde(rename = "sigma_A")]
    pub sigma_amplitude: f64,
    pub accepted: bool,
    pub rejection: Option<Rejection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub orders: Vec<OrderAnalysis>,
    pub evidence: EvidenceTable,
    pub warnings: Vec<String>,
}

impl Analysis {
    pub fn gated_spectra(&self) -> Vec<ModulationSpectrum> {
        self.orders.iter().filter_map(|o| o.gated.clone()).collect()
    }

    pub fn failures(&self) -> Vec<(usize, String)> {
        self.orders
            .iter()
            .filter_map(|o| o.error.clone().map(|e| (o.m, e)))
            .collect()
    }

    pub fn records(&self, config: &Config) -> Vec<FitRecord> {
        let policy = config.gate.policy();
        self.orders
            .iter()
            .filter_map(|o| o.fit.as_ref())
            .flat_map(|fit| {
                let policy = &policy;
                fit.harmonics.iter().map(move |h| {
                    let rejection = policy.verdict(h, fit.order, fit.a0);
                    FitRecord {
                        m: fit.order,
                        f: h.f,
                        sigma_f: h.sigma_f,
                        amplitude: h.amplitude,
                        sigma_amplitude: h.sigma_amplitude,
                        accepted: rejection.is_none(),
                        rejection,
                    }
                })
            })
            .collect()
    }
}

/// Fit, gate and aggregate. Fit failures are recorded per order and the
/// remaining orders are still analysed.
pub fn analyze(curves: &[CorrelationCurve], config: &Config) -> Result<Analysis> {
    let mut seen = BTreeSet::new();
    for c in curves {
        if !seen.insert(c.order) {
            return Err(Error::Dimension(format!("order {} appears twice", c.order)));
        }
    }
    let policy = config.gate.policy();
    let options = config.fit.options();
    let mut orders: Vec<OrderAnalysis> = curves
        .par_iter()
        .map(|c| match fit_free(c, c.order, config.fit.max_harmonics, &options) {
            Ok(fit) => OrderAnalysis {
                m: c.order,
                gated: Some(gate(&fit, &policy)),
                fit: Some(fit),
                error: None,
            },
            Err(e) => OrderAnalysis {
                m: c.order,
                fit: None,
                gated: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    orders.sort_by_key(|o| o.m);

    let mut warnings = Vec::new();
    if curves.is_empty() {
        warnings.push("no curves to analyse; evidence is empty".to_string());
    }
    for o in &orders {
        if let Some(e) = &o.error {
            warnings.push(format!("m={}: {e}", o.m));
        }
    }
    let gated: Vec<ModulationSpectrum> = orders.iter().filter_map(|o| o.gated.clone()).collect();
    let evidence = aggregate(&gated)?;
    for row in evidence.conflicted() {
        warnings.push(format!(
            "f={}: accepted at orders {:?} but absent at {:?}",
            row.f, row.orders, row.conflicts
        ));
    }
    Ok(Analysis {
        orders,
        evidence,
        warnings,
    })
}

pub fn table_csv(records: &[FitRecord]) -> String {
    let mut out = String::from("m,f,sigma_f,A,sigma_A,accepted,rejection\n");
    for r in records {
        let rejection = r
            .rejection
            .map(|x| {
                serde_json::to_value(x)
                    .ok()
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_default()
            })
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.m, r.f, r.sigma_f, r.amplitude, r.sigma_amplitude, r.accepted, rejection
        );
    }
    out
}

pub fn cmd_analyze(config: &Config, dir: &Path) -> Result<(Analysis, CommandSummary)> {
    let curves_dir = dir.join(CURVES_DIR);
    let mut curves = Vec::new();
    let mut missing = Vec::new();
    for &m in &config.orders {
        if io::curve_path(&curves_dir, m).exists() {
            curves.push(io::read_curve_bundle(&curves_dir, m)?);
        } else {
            missing.push(m);
        }
    }
    let mut analysis = analyze(&curves, config)?;
    for m in missing {
        analysis.warnings.push(format!(
            "m={m}: no curve at {}",
            io::curve_path(&curves_dir, m).display()
        ));
    }

    let outputs = vec![
        dir.join(FITS_FILE),
        dir.join(SPECTRA_FILE),
        dir.join(EVIDENCE_FILE),
        dir.join(TABLE_FILE),
    ];
    io::write_json(&outputs[0], &analysis)?;
    io::write_json(&outputs[1], &analysis.gated_spectra())?;
    io::write_json(&outputs[2], &analysis.evidence)?;
    io::write_atomic(&outputs[3], table_csv(&analysis.records(config)).as_bytes())?;
    let warnings = analysis.warnings.clone();
    Ok((analysis, CommandSummary { outputs, warnings }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub evidence: EvidenceTable,
    pub candidates: Vec<Candidate>,
    pub apertures: Vec<ApertureReport>,
    pub exhaustive: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Search, rank by amplitudes when the spectra allow it, and list the
/// apertures of every measured order.
pub fn reconstruct(
    evidence: &EvidenceTable,
    spectra: &[ModulationSpectrum],
    bounds: &SearchBounds,
) -> Result<ReconstructionReport> {
    let found = search(evidence, bounds)?;
    let mut warnings = Vec::new();
    if !found.exhaustive {
        warnings.push("search bounds cut the enumeration short; more candidates may exist".into());
    }
    let ranked = if found.candidates.is_empty() {
        warnings.push("no geometry within the bounds explains the evidence".into());
        found
    } else {
        match disambiguate(&found, spectra) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("candidates left unranked: {e}"));
                found
            }
        }
    };
    let mut orders: Vec<usize> = evidence.orders_measured.clone();
    orders.extend(spectra.iter().map(|s| s.order));
    orders.sort_unstable();
    orders.dedup();
    let apertures = orders.into_iter().map(aperture_report).collect::<Result<Vec<_>>>()?;
    Ok(ReconstructionReport {
        evidence: ranked.evidence,
        candidates: ranked.candidates,
        apertures,
        exhaustive: ranked.exhaustive,
        warnings,
    })
}

pub fn cmd_reconstruct(config: &Config, dir: &Path) -> Result<(ReconstructionReport, CommandSummary)> {
    let evidence: EvidenceTable = io::read_json(&dir.join(EVIDENCE_FILE))?;
    let spectra_path = dir.join(SPECTRA_FILE);
    let spectra: Vec<ModulationSpectrum> = if spectra_path.exists() {
        io::read_json(&spectra_path)?
    } else {
        Vec::new()
    };
    let report = reconstruct(&evidence, &spectra, &config.search.bounds())?;
    let path = dir.join(RECONSTRUCTION_FILE);
    io::write_json(&path, &report)?;
    let warnings = report.warnings.clone();
    Ok((
        report,
        CommandSummary {
            outputs: vec![path],
            warnings,
        },
    ))
}

pub fn cmd_aperture(orders: &[usize]) -> Result<Vec<ApertureReport>> {
    orders.iter().map(|&m| aperture_report(m)).collect()
}

pub fn aperture_csv(reports: &[ApertureReport]) -> String {
    let mut out = String::from("m,r_moving,r_total\n");
    for r in reports {
        let _ = writeln!(out, "{},{},{}", r.m, r.r_moving, r.r_total);
    }
    out
}

/// Exact spectra of a geometry at the magic positions.
pub fn analytic_spectra(geometry: &SourceGeometry, orders: &[usize]) -> Result<Vec<ModulationSpectrum>> {
    let samples = (4 * (geometry.span() as usize + 1)).max(64);
    orders
        .iter()
        .map(|&m| Ok(predicted_spectrum(geometry, m, samples, None)?.spectrum))
        .collect()
}

/// Evidence a noiseless measurement of `orders` would produce.
pub fn analytic_evidence(geometry: &SourceGeometry, orders: &[usize]) -> Result<EvidenceTable> {
    aggregate(&analytic_spectra(geometry, orders)?)
}

fn pm(value: f64, sigma: f64) -> String {
    format!("{value:.2}±{sigma:.2}")
}

/// Plain-text table with accepted `f̄ ± σ` and `A ± σ` per order, plus the
/// evidence and, when given, the candidate geometries.
pub fn report(config: &Config, analysis: &Analysis, reconstruction: Option<&ReconstructionReport>) -> String {
    let mut out = String::new();
    if let Ok(g) = config.source_geometry() {
        if let Ok(f) = g.distinct_frequencies() {
            let _ = writeln!(out, "geometry x = {g}, F = {f}");
        }
    }
    let _ = writeln!(out, "{:>4}  {:>12}  {:>12}  status", "m", "f", "A");
    for o in &analysis.orders {
        match (&o.fit, &o.error) {
            (_, Some(e)) => {
                let _ = writeln!(out, "{:>4}  fit failed: {e}", o.m);
            }
            (Some(fit), None) => {
                if fit.harmonics.is_empty() {
                    let _ = writeln!(out, "{:>4}  {:>12}  {:>12}  no modulation", o.m, "-", "-");
                }
                let policy = config.gate.policy();
                for h in &fit.harmonics {
                    let status = match policy.verdict(h, fit.order, fit.a0) {
                        None => "accepted".to_string(),
                        Some(r) => format!(
                            "rejected ({})",
                            serde_json::to_value(r)
                                .ok()
                                .and_then(|v| v.as_str().map(String::from))
                                .unwrap_or_default()
                        ),
                    };
                    let _ = writeln!(
                        out,
                        "{:>4}  {:>12}  {:>12}  {status}",
                        o.m,
                        pm(h.f, h.sigma_f),
                        pm(h.amplitude, h.sigma_amplitude)
                    );
                }
            }
            (None, None) => {}
        }
    }
    let ev = &analysis.evidence;
    let fmt_set = |s: BTreeSet<u32>| s.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
    let _ = writeln!(
        out,
        "evidence: present {{{}}}, absent {{{}}}, unknown up to {}",
        fmt_set(ev.present()),
        fmt_set(ev.absent()),
        ev.span_hint
    );
    if let Some(r) = reconstruction {
        let _ = writeln!(
            out,
            "candidates ({}):",
            if r.exhaustive { "exhaustive" } else { "truncated" }
        );
        for c in &r.candidates {
            let score = c
                .score
                .map(|s| format!("chi2 = {s:.3}"))
                .unwrap_or_else(|| "unscored".into());
            let mark = if c.joint_winner { " *" } else { "" };
            let _ = writeln!(out, "  {}  {score}{mark}", c.geometry);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_evidence_examples() {
        let g = SourceGeometry::new(vec![3, 1, 4]).unwrap();
        let ev = analytic_evidence(&g, &[3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(ev.present(), BTreeSet::from([3, 4, 5, 8]));
        assert_eq!(ev.absent(), BTreeSet::from([2, 6, 7]));
        let ev = analytic_evidence(&g, &[3]).unwrap();
        assert_eq!(ev.present(), BTreeSet::from([4, 8]));
        assert_eq!(ev.absent(), BTreeSet::from([2, 6]));
    }

    #[test]
    fn aperture_table() {
        let csv = aperture_csv(&cmd_aperture(&[2, 3]).unwrap());
        assert_eq!(csv, "m,r_moving,r_total\n2,1,1\n3,0.5,0.5\n");
    }

    #[test]
    fn empty_analysis() {
        let config = Config::for_geometry(vec![1, 3]);
        let a = analyze(&[], &config).unwrap();
        assert!(a.evidence.rows.is_empty());
        assert_eq!(a.warnings.len(), 1);
    }

    #[test]
    fn reconstruct_examples() {
        let g = SourceGeometry::new(vec![3, 1, 4]).unwrap();
        let orders: Vec<usize> = (3..=9).collect();
        let ev = analytic_evidence(&g, &orders).unwrap();
        let r = reconstruct(&ev, &[], &SearchBounds::default()).unwrap();
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.apertures.len(), 7);
        assert!(r.warnings.iter().any(|w| w.contains("unranked")));

        let ev = EvidenceTable::from_sets(&[3, 4, 5, 8, 9], &[2, 6, 7]);
        assert!(matches!(
            reconstruct(&EvidenceTable::from_sets(&[], &[]), &[], &SearchBounds::default()),
            Err(Error::EmptyEvidence)
        ));
        let tight = SearchBounds {
            max_sources: 4,
            ..Default::default()
        };
        let r = reconstruct(&ev, &[], &tight).unwrap();
        assert!(!r.exhaustive);
        assert!(r.warnings.iter().any(|w| w.contains("bounds")));
    }
}
