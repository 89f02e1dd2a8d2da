//! Exact m-th order intensity correlations of independent thermal sources.
//!
//! For circular Gaussian fields the normally ordered m-point intensity moment
//! is the permanent of the mutual coherence matrix
//! `J_jk = Σ_l w_l exp(i α_l (δ_k − δ_j))`, so
//! `g^(m) = perm(J) / Π_j J_jj`.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier;
use crate::geometry::{FrequencySet, SourceGeometry};
use crate::permanent::{permanent_with_cap, DEFAULT_PERMANENT_CAP};
use crate::spectrum::{FitKind, Harmonic, ModulationSpectrum};

/// Coefficients below this are treated as suppressed by the magic positions.
pub const SUPPRESSION_TOLERANCE: f64 = 1e-9;

/// Fixed detector phases `δ_j = 2π(j−2)/(m−1)`, `j = 2..m`.
pub fn magic_positions(m: usize) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::Order { got: m, min: 2 });
    }
    Ok((0..m - 1).map(|j| TAU * j as f64 / (m - 1) as f64).collect())
}

/// `Σ_{j=2}^{m} exp(i λ δ_j)` over the magic positions.
pub fn roots_of_unity_sum(lambda: i64, m: usize) -> Result<Complex64> {
    if m < 2 {
        return Err(Error::Order { got: m, min: 2 });
    }
    let n = (m - 1) as i64;
    let mut acc = Complex64::new(0.0, 0.0);
    for j in 0..n {
        // exact reduction of λ·j modulo m−1 before forming the phase
        let k = (lambda * j).rem_euclid(n);
        acc += Complex64::from_polar(1.0, TAU * k as f64 / n as f64);
    }
    Ok(acc)
}

/// Uniform grid of moving-detector phases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub start: f64,
    pub end: f64,
    pub samples: usize,
    /// Whether `end` itself is a grid point. Periodic grids exclude it.
    pub include_end: bool,
}

impl ScanGrid {
    /// `samples` points over `[0, 2π)`.
    pub fn periodic(samples: usize) -> Self {
        ScanGrid {
            start: 0.0,
            end: TAU,
            samples,
            include_end: false,
        }
    }

    pub fn closed(start: f64, end: f64, samples: usize) -> Result<Self> {
        let grid = ScanGrid {
            start,
            end,
            samples,
            include_end: true,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || !(self.end > self.start) || !self.start.is_finite() || !self.end.is_finite() {
            return Err(Error::Dimension(format!(
                "scan grid must be strictly increasing with at least two samples, got [{}, {}] with {} samples",
                self.start, self.end, self.samples
            )));
        }
        Ok(())
    }

    pub fn pitch(&self) -> f64 {
        let intervals = if self.include_end {
            self.samples - 1
        } else {
            self.samples
        };
        (self.end - self.start) / intervals as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.pitch();
        (0..self.samples).map(|p| self.start + h * p as f64).collect()
    }

    /// True when the grid is exactly one period `[0, 2π)`, so integer
    /// frequencies land on DFT bins.
    pub fn is_full_period(&self) -> bool {
        !self.include_end && self.start == 0.0 && (self.end - TAU).abs() < 1e-12
    }
}

/// Detector configuration: one moving detector scanned over a grid and
/// `m − 1` fixed detectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorArray {
    order: usize,
    fixed_deltas: Vec<f64>,
    scan: ScanGrid,
}

impl DetectorArray {
    pub fn new(order: usize, fixed_deltas: Vec<f64>, scan: ScanGrid) -> Result<Self> {
        if order < 2 {
            return Err(Error::Order { got: order, min: 2 });
        }
        if fixed_deltas.len() != order - 1 {
            return Err(Error::Dimension(format!(
                "order {order} needs {} fixed detectors, got {}",
                order - 1,
                fixed_deltas.len()
            )));
        }
        scan.validate()?;
        Ok(DetectorArray {
            order,
            fixed_deltas,
            scan,
        })
    }

    /// Fixed detectors at the magic positions.
    pub fn magic(order: usize, scan: ScanGrid) -> Result<Self> {
        Self::new(order, magic_positions(order)?, scan)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn fixed_deltas(&self) -> &[f64] {
        &self.fixed_deltas
    }

    pub fn scan(&self) -> &ScanGrid {
        &self.scan
    }
}

/// Mutual coherence matrix of the detector fields.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceMatrix {
    entries: DMatrix<Complex64>,
}

impl CoherenceMatrix {
    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    /// Product of the diagonal, i.e. the product of mean intensities.
    pub fn diagonal_product(&self) -> f64 {
        self.entries.diagonal().iter().map(|z| z.re).product()
    }
}

fn unit_weights(geometry: &SourceGeometry) -> Vec<f64> {
    vec![1.0; geometry.source_count()]
}

pub(crate) fn check_weights(geometry: &SourceGeometry, weights: &[f64]) -> Result<()> {
    if weights.len() != geometry.source_count() {
        return Err(Error::Dimension(format!(
            "{} weights for {} sources",
            weights.len(),
            geometry.source_count()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Dimension("source weights must be positive".into()));
    }
    Ok(())
}

/// `J_jk = Σ_l w_l exp(i α_l (δ_k − δ_j))`. Unit weights when `weights` is `None`.
pub fn coherence_matrix(geometry: &SourceGeometry, deltas: &[f64], weights: Option<&[f64]>) -> Result<CoherenceMatrix> {
    let default;
    let weights = match weights {
        Some(w) => w,
        None => {
            default = unit_weights(geometry);
            &default
        }
    };
    check_weights(geometry, weights)?;
    let alpha = geometry.phase_prefactors();
    let m = deltas.len();
    let entries = DMatrix::from_fn(m, m, |j, k| {
        let diff = deltas[k] - deltas[j];
        alpha
            .as_slice()
            .iter()
            .zip(weights)
            .map(|(&a, &w)| Complex64::from_polar(w, a as f64 * diff))
            .sum()
    });
    Ok(CoherenceMatrix { entries })
}

/// Sampled `g^(m)(δ_1)` with optional per-sample standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCurve {
    pub order: usize,
    pub delta1: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
    /// Bootstrap replicates of the whole curve (resample × sample), when the
    /// curve was estimated from frames. Used to propagate correlated noise
    /// into fitted parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates: Option<Vec<Vec<f64>>>,
}

impl CorrelationCurve {
    pub fn new(order: usize, delta1: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let curve = CorrelationCurve {
            order,
            delta1,
            values,
            sigma: None,
            replicates: None,
        };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta1.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "{} phases but {} values",
                self.delta1.len(),
                self.values.len()
            )));
        }
        if let Some(s) = &self.sigma {
            if s.len() != self.values.len() {
                return Err(Error::Dimension("sigma length differs from values".into()));
            }
        }
        if let Some(reps) = &self.replicates {
            if reps.iter().any(|r| r.len() != self.values.len()) {
                return Err(Error::Dimension("replicate length differs from values".into()));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("curve values must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Multiply every value (and its uncertainty) by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= factor);
        if let Some(s) = &mut out.sigma {
            s.iter_mut().for_each(|v| *v *= factor.abs());
        }
        if let Some(reps) = &mut out.replicates {
            reps.iter_mut().flatten().for_each(|v| *v *= factor);
        }
        out
    }
}

/// Analytic engine with a configurable permanent cap.
#[derive(Clone, Debug)]
pub struct AnalyticEngine {
    pub permanent_cap: usize,
}

impl Default for AnalyticEngine {
    fn default() -> Self {
        AnalyticEngine {
            permanent_cap: DEFAULT_PERMANENT_CAP,
        }
    }
}

impl AnalyticEngine {
    /// `g^(m)` for one full set of detector phases `(δ_1, …, δ_m)`.
    pub fn g_at(&self, geometry: &SourceGeometry, deltas: &[f64], weights: Option<&[f64]>) -> Result<f64> {
        let j = coherence_matrix(geometry, deltas, weights)?;
        let p = permanent_with_cap(j.entries(), self.permanent_cap)?;
        Ok(p.re / j.diagonal_product())
    }

    pub fn curve(
        &self,
        geometry: &SourceGeometry,
        detectors: &DetectorArray,
        weights: Option<&[f64]>,
    ) -> Result<CorrelationCurve> {
        if detectors.order() > self.permanent_cap {
            return Err(Error::PermanentSize {
                size: detectors.order(),
                cap: self.permanent_cap,
            });
        }
        if let Some(w) = weights {
            check_weights(geometry, w)?;
        }
        let delta1 = detectors.scan().points();
        let values = delta1
            .par_iter()
            .map(|&d1| {
                let mut deltas = Vec::with_capacity(detectors.order());
                deltas.push(d1);
                deltas.extend_from_slice(detectors.fixed_deltas());
                self.g_at(geometry, &deltas, weights)
            })
            .collect::<Result<Vec<_>>>()?;
        // clamp negative rounding residue
        let values = values.into_iter().map(|v| v.max(0.0)).collect();
        CorrelationCurve::new(detectors.order(), delta1, values)
    }
}

/// `g^(m)(δ_1)` over the detector scan, via the coherence-matrix permanent.
pub fn g_m_analytic(
    geometry: &SourceGeometry,
    detectors: &DetectorArray,
    weights: Option<&[f64]>,
) -> Result<CorrelationCurve> {
    AnalyticEngine::default().curve(geometry, detectors, weights)
}

/// Distinct frequencies that survive with fixed detectors at the magic
/// positions: those divisible by `m − 1`.
pub fn surviving_frequencies(geometry: &SourceGeometry, m: usize) -> Result<FrequencySet> {
    if m < 2 {
        return Err(Error::Order { got: m, min: 2 });
    }
    if geometry.source_count() < 2 {
        return Ok(FrequencySet::default());
    }
    let step = (m - 1) as u32;
    Ok(geometry
        .distinct_frequencies()?
        .iter()
        .filter(|f| f % step == 0)
        .collect())
}

/// Predicted modulation spectrum together with the largest Fourier
/// magnitude found outside the surviving frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedSpectrum {
    pub spectrum: ModulationSpectrum,
    pub leakage: f64,
}

fn required_samples(span: u32) -> usize {
    4 * (span as usize + 1)
}

/// Fourier decomposition of the analytic curve with detectors at the magic
/// positions, sampled at `samples` points over `[0, 2π)`.
pub fn predicted_spectrum(
    geometry: &SourceGeometry,
    m: usize,
    samples: usize,
    weights: Option<&[f64]>,
) -> Result<PredictedSpectrum> {
    if m < 2 {
        return Err(Error::Order { got: m, min: 2 });
    }
    let span = geometry.span();
    let required = required_samples(span);
    if samples < required {
        return Err(Error::Aliasing {
            samples,
            span,
            required,
        });
    }
    let detectors = DetectorArray::magic(m, ScanGrid::periodic(samples))?;
    let curve = g_m_analytic(geometry, &detectors, weights)?;
    let surviving = surviving_frequencies(geometry, m)?;
    let step = (m - 1) as u32;

    let harmonics = surviving
        .iter()
        .map(|f| Harmonic::exact(f / step, f as f64, fourier::amplitude(&curve.values, f)))
        .collect();
    let leakage = (1..=(samples / 2) as u32)
        .filter(|q| !surviving.contains(*q))
        .map(|q| fourier::coefficient(&curve.values, q).norm())
        .fold(0.0, f64::max);

    Ok(PredictedSpectrum {
        spectrum: ModulationSpectrum {
            order: m,
            a0: fourier::amplitude(&curve.values, 0),
            sigma_a0: 0.0,
            harmonics,
            fit_kind: FitKind::Fixed,
            residual_rms: 0.0,
        },
        leakage,
    })
}

/// Spectrum of a regular unit-spaced array of `n` sources with all fixed
/// detectors at `δ = 0`. Harmonic `l` sits at frequency `l` (`kappa = l`).
pub fn regular_array_reference(n: usize, m: usize, samples: usize) -> Result<ModulationSpectrum> {
    if n < 2 {
        return Err(Error::EmptyGeometry(n));
    }
    let geometry = SourceGeometry::regular(n)?;
    let required = required_samples(geometry.span());
    if samples < required {
        return Err(Error::Aliasing {
            samples,
            span: geometry.span(),
            required,
        });
    }
    let detectors = DetectorArray::new(m, vec![0.0; m.saturating_sub(1)], ScanGrid::periodic(samples))?;
    let curve = g_m_analytic(&geometry, &detectors, None)?;
    let harmonics = (1..n as u32)
        .map(|l| Harmonic::exact(l, l as f64, fourier::amplitude(&curve.values, l)))
        .collect();
    Ok(ModulationSpectrum {
        order: m,
        a0: fourier::amplitude(&curve.values, 0),
        sigma_a0: 0.0,
        harmonics,
        fit_kind: FitKind::Fixed,
        residual_rms: 0.0,
    })
}
