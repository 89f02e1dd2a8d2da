//! Harmonic fits of `g^(m)(δ_1) = A_0 + Σ_κ A_κ cos(κ(m−1)δ_1)`, the
//! acceptance gate for fitted harmonics, and aggregation of accepted
//! frequencies across correlation orders.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationCurve;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitKind {
    #[serde(rename = "fixed-frequency")]
    Fixed,
    #[serde(rename = "free-frequency")]
    Free,
}

/// One modulation term `A cos(f δ_1 + φ)` with `f ≈ κ(m−1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    pub kappa: u32,
    pub f: f64,
    pub sigma_f: f64,
    #[serde(rename = "A")]
    pub amplitude: f64,
    #[serde(rename = "sigma_A")]
    pub sigma_amplitude: f64,
}

impl Harmonic {
    pub(crate) fn exact(kappa: u32, f: f64, amplitude: f64) -> Self {
        Harmonic {
            kappa,
            f,
            sigma_f: 0.0,
            amplitude,
            sigma_amplitude: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpectrum {
    #[serde(rename = "m")]
    pub order: usize,
    #[serde(rename = "A0")]
    pub a0: f64,
    #[serde(rename = "sigma_A0")]
    pub sigma_a0: f64,
    pub harmonics: Vec<Harmonic>,
    pub fit_kind: FitKind,
    pub residual_rms: f64,
}

impl ModulationSpectrum {
    /// Harmonic whose frequency rounds to `f`.
    pub fn harmonic_at(&self, f: u32) -> Option<&Harmonic> {
        self.harmonics.iter().find(|h| h.f.round() == f as f64)
    }

    /// Frequencies of all harmonics, rounded.
    pub fn frequencies(&self) -> BTreeSet<u32> {
        self.harmonics.iter().map(|h| h.f.round().max(0.0) as u32).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Largest spatial frequency considered, in lattice units.
    pub span_bound: u32,
    /// Iteration cap for the nonlinear refinement.
    pub max_iterations: usize,
    /// Lowest free frequency; anything slower is absorbed by the offset.
    pub min_frequency: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            span_bound: 12,
            max_iterations: 200,
            min_frequency: 0.5,
        }
    }
}

struct Samples {
    t: Vec<f64>,
    weights: Vec<f64>,
}

impl Samples {
    fn new(curve: &CorrelationCurve, m: usize) -> Result<Self> {
        curve.validate()?;
        if m < 2 {
            return Err(Error::Order { got: m, min: 2 });
        }
        if curve.len() < 3 {
            return Err(Error::Fit(format!("{} samples are too few to fit", curve.len())));
        }
        let first = curve.delta1[0];
        let last = curve.delta1[curve.len() - 1];
        let pitch = (last - first) / (curve.len() - 1) as f64;
        let coverage = last - first + pitch;
        let period = std::f64::consts::TAU / (m - 1) as f64;
        if coverage < period * (1.0 - 1e-9) {
            return Err(Error::Fit(format!(
                "scan covers {coverage:.4} rad, less than one fundamental period {period:.4}"
            )));
        }
        // Phases are measured from the scan centre to decorrelate frequency
        // and phase; amplitudes do not depend on the origin.
        let centre = 0.5 * (first + last);
        let t = curve.delta1.iter().map(|d| d - centre).collect();
        let weights = match &curve.sigma {
            Some(s) if s.iter().all(|v| v.is_finite() && *v > 0.0) => s.iter().map(|v| 1.0 / v).collect(),
            _ => vec![1.0; curve.len()],
        };
        Ok(Samples { t, weights })
    }

    fn weighted(&self) -> bool {
        self.weights.iter().any(|&w| w != 1.0)
    }

    fn coverage(&self) -> f64 {
        let n = self.t.len();
        (self.t[n - 1] - self.t[0]) * n as f64 / (n - 1) as f64
    }
}

/// Weighted least squares `min ||W(Xβ − y)||` via SVD, with rank check.
fn linear_solve(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, p) = x.shape();
    if n < p {
        return Err(Error::Fit(format!("{n} samples for {p} parameters")));
    }
    let mut xw = x.clone();
    let mut yw = y.clone();
    for i in 0..n {
        xw.row_mut(i).scale_mut(w[i]);
        yw[i] *= w[i];
    }
    let svd = xw.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= smax * 1e-10 {
        return Err(Error::Fit("design matrix is rank deficient".into()));
    }
    let beta = svd.solve(&yw, 0.0).map_err(|e| Error::Fit(e.to_string()))?;
    let xtx = xw.transpose() * &xw;
    let cov = xtx
        .try_inverse()
        .ok_or_else(|| Error::Fit("normal matrix is singular".into()))?;
    Ok((beta, cov))
}

fn std_dev(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    var.sqrt()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Standard deviation estimated from the median absolute deviation, so a
/// few runaway refits do not dominate.
fn robust_spread(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mut v = values.to_vec();
    let centre = median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - centre).abs()).collect();
    1.482_602_218_505_602 * median(&mut dev)
}

/// Amplitude of `a cos + b sin` and its first-order standard error.
fn quadrature(a: f64, b: f64, var_a: f64, var_b: f64, cov_ab: f64) -> (f64, f64) {
    let amp = a.hypot(b);
    let var = if amp > 0.0 {
        (a * a * var_a + b * b * var_b + 2.0 * a * b * cov_ab) / (amp * amp)
    } else {
        0.5 * (var_a + var_b)
    };
    (amp, var.max(0.0).sqrt())
}

/// Linear least squares with frequencies fixed at `κ(m−1)`,
/// `κ = 1..=span_bound/(m−1)`.
pub fn fit_fixed(curve: &CorrelationCurve, m: usize, options: &FitOptions) -> Result<ModulationSpectrum> {
    let samples = Samples::new(curve, m)?;
    let step = (m - 1) as u32;
    let kmax = options.span_bound / step;
    let freqs: Vec<f64> = (1..=kmax).map(|k| (k * step) as f64).collect();
    let n = curve.len();
    let p = 1 + 2 * freqs.len();
    let x = DMatrix::from_fn(n, p, |i, j| {
        if j == 0 {
            1.0
        } else {
            let f = freqs[(j - 1) / 2];
            let t = samples.t[i];
            if j % 2 == 1 {
                (f * t).cos()
            } else {
                (f * t).sin()
            }
        }
    });
    let y = DVector::from_column_slice(&curve.values);
    let (beta, mut cov) = linear_solve(&x, &y, &samples.weights)?;
    let resid = &y - &x * &beta;
    let residual_rms = (resid.norm_squared() / n as f64).sqrt();
    if !samples.weighted() {
        let dof = (n - p).max(1) as f64;
        let s2 = resid.norm_squared() / dof;
        cov *= s2;
    }

    let mut harmonics: Vec<Harmonic> = freqs
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let (ia, ib) = (1 + 2 * k, 2 + 2 * k);
            let (amp, sigma) = quadrature(beta[ia], beta[ib], cov[(ia, ia)], cov[(ib, ib)], cov[(ia, ib)]);
            Harmonic {
                kappa: k as u32 + 1,
                f,
                sigma_f: 0.0,
                amplitude: amp,
                sigma_amplitude: sigma,
            }
        })
        .collect();
    let mut sigma_a0 = cov[(0, 0)].max(0.0).sqrt();

    if let Some(reps) = curve.replicates.as_ref().filter(|r| r.len() >= 2) {
        let fits: Vec<DVector<f64>> = reps
            .iter()
            .map(|r| linear_solve(&x, &DVector::from_column_slice(r), &samples.weights).map(|(b, _)| b))
            .collect::<Result<_>>()?;
        sigma_a0 = std_dev(&fits.iter().map(|b| b[0]).collect::<Vec<_>>());
        for (k, h) in harmonics.iter_mut().enumerate() {
            let amps: Vec<f64> = fits.iter().map(|b| b[1 + 2 * k].hypot(b[2 + 2 * k])).collect();
            h.sigma_amplitude = std_dev(&amps);
        }
    }

    Ok(ModulationSpectrum {
        order: m,
        a0: beta[0],
        sigma_a0,
        harmonics,
        fit_kind: FitKind::Fixed,
        residual_rms,
    })
}

/// Sum-of-sinusoids model `c + Σ a_k cos(f_k t) + b_k sin(f_k t)`,
/// parameters laid out as `[c, a_1, b_1, f_1, a_2, b_2, f_2, …]`.
struct SinusoidModel<'a> {
    t: &'a [f64],
    w: &'a [f64],
    f_lo: f64,
    f_hi: f64,
}

impl SinusoidModel<'_> {
    fn components(params: &DVector<f64>) -> usize {
        (params.len() - 1) / 3
    }

    fn eval(&self, params: &DVector<f64>, t: f64) -> f64 {
        let mut v = params[0];
        for k in 0..Self::components(params) {
            let (a, b, f) = (params[1 + 3 * k], params[2 + 3 * k], params[3 + 3 * k]);
            v += a * (f * t).cos() + b * (f * t).sin();
        }
        v
    }

    fn cost(&self, params: &DVector<f64>, y: &[f64]) -> f64 {
        self.t
            .iter()
            .zip(y)
            .zip(self.w)
            .map(|((&t, &y), &w)| (w * (y - self.eval(params, t))).powi(2))
            .sum()
    }

    /// Weighted Jacobian of the model and weighted residuals.
    fn linearize(&self, params: &DVector<f64>, y: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.t.len();
        let p = params.len();
        let mut jac = DMatrix::zeros(n, p);
        let mut r = DVector::zeros(n);
        for i in 0..n {
            let (t, w) = (self.t[i], self.w[i]);
            jac[(i, 0)] = w;
            let mut model = params[0];
            for k in 0..Self::components(params) {
                let (a, b, f) = (params[1 + 3 * k], params[2 + 3 * k], params[3 + 3 * k]);
                let (s, c) = (f * t).sin_cos();
                model += a * c + b * s;
                jac[(i, 1 + 3 * k)] = w * c;
                jac[(i, 2 + 3 * k)] = w * s;
                jac[(i, 3 + 3 * k)] = w * t * (b * c - a * s);
            }
            r[i] = w * (y[i] - model);
        }
        (jac, r)
    }

    fn clamp(&self, params: &mut DVector<f64>) {
        for k in 0..Self::components(params) {
            let f = &mut params[3 + 3 * k];
            *f = f.clamp(self.f_lo, self.f_hi);
        }
    }

    /// Levenberg-Marquardt refinement. Returns the iteration count.
    fn refine(&self, params: &mut DVector<f64>, y: &[f64], max_iter: usize) -> Result<usize> {
        let mut lambda = 1e-3;
        let mut cost = self.cost(params, y);
        for iter in 0..max_iter {
            let (jac, r) = self.linearize(params, y);
            let jtj = jac.transpose() * &jac;
            let g = jac.transpose() * &r;
            let mut improved = false;
            while lambda < 1e12 {
                let mut a = jtj.clone();
                for d in 0..a.nrows() {
                    a[(d, d)] += lambda * jtj[(d, d)].max(1e-12);
                }
                let step = match a.cholesky() {
                    Some(ch) => ch.solve(&g),
                    None => {
                        lambda *= 10.0;
                        continue;
                    }
                };
                let mut trial = &*params + &step;
                self.clamp(&mut trial);
                let trial_cost = self.cost(&trial, y);
                if trial_cost.is_finite() && trial_cost <= cost {
                    let decrease = cost - trial_cost;
                    *params = trial;
                    cost = trial_cost;
                    lambda = (lambda * 0.1).max(1e-12);
                    improved = true;
                    if decrease <= 1e-14 * cost.max(f64::MIN_POSITIVE) || step.norm() < 1e-13 {
                        return Ok(iter + 1);
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                // no downhill step at any damping: at a minimum
                return Ok(iter + 1);
            }
        }
        Err(Error::Fit(format!(
            "nonlinear refinement did not converge in {max_iter} iterations (cost {cost:.3e}, damping {lambda:.1e})"
        )))
    }

    /// Least-squares amplitude of a single sinusoid at `f` in the residual.
    fn probe(&self, resid: &[f64], f: f64) -> (f64, f64, f64) {
        let (mut scc, mut sss, mut scs, mut syc, mut sys) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for ((&t, &w), &y) in self.t.iter().zip(self.w).zip(resid) {
            let (s, c) = (f * t).sin_cos();
            let w2 = w * w;
            scc += w2 * c * c;
            sss += w2 * s * s;
            scs += w2 * c * s;
            syc += w2 * y * c;
            sys += w2 * y * s;
        }
        let det = scc * sss - scs * scs;
        if det.abs() < 1e-300 {
            return (0.0, 0.0, 0.0);
        }
        let a = (syc * sss - sys * scs) / det;
        let b = (sys * scc - syc * scs) / det;
        (a, b, a.hypot(b))
    }

    /// Strongest sinusoid in the residual on a fine grid over `[lo, hi]`.
    fn periodogram_peak(&self, resid: &[f64], lo: f64, hi: f64, coverage: f64) -> (f64, f64, f64, f64) {
        let step = 0.05 * std::f64::consts::TAU / coverage;
        let mut best = (0.0, 0.0, lo, 0.0);
        let mut f = lo;
        while f <= hi + 1e-12 {
            let (a, b, amp) = self.probe(resid, f);
            if amp > best.3 {
                best = (a, b, f, amp);
            }
            f += step;
        }
        best
    }

    fn residual(&self, params: &DVector<f64>, y: &[f64]) -> Vec<f64> {
        self.t.iter().zip(y).map(|(&t, &v)| v - self.eval(params, t)).collect()
    }

    fn amplitude(params: &DVector<f64>, k: usize) -> f64 {
        params[1 + 3 * k].hypot(params[2 + 3 * k])
    }
}

/// Components added greedily from periodogram peaks of the residual, each
/// addition followed by a joint refinement of all parameters.
fn free_fit_core(
    model: &SinusoidModel<'_>,
    y: &[f64],
    max_harmonics: usize,
    coverage: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    let mean = y.iter().zip(model.w).map(|(v, w)| v * w * w).sum::<f64>() / model.w.iter().map(|w| w * w).sum::<f64>();
    let scale = y.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1e-300);
    let mut params = DVector::from_element(1, mean);
    for k in 0..max_harmonics {
        let resid = model.residual(&params, y);
        let (a, b, f, amp) = model.periodogram_peak(&resid, model.f_lo, model.f_hi, coverage);
        if amp <= 1e-9 * scale {
            break;
        }
        let mut trial = params.clone().resize_vertically(params.len() + 3, 0.0);
        trial[1 + 3 * k] = a;
        trial[2 + 3 * k] = b;
        trial[3 + 3 * k] = f;
        match model.refine(&mut trial, y, max_iter) {
            Ok(_) => {}
            Err(e) if k == 0 => return Err(e),
            Err(_) => break,
        }
        // two components collapsing onto one frequency carry no new information
        let collapsed = (0..=k).any(|i| (i + 1..=k).any(|j| (trial[3 + 3 * i] - trial[3 + 3 * j]).abs() < 0.5));
        if collapsed || SinusoidModel::amplitude(&trial, k) <= 1e-9 * scale {
            break;
        }
        params = trial;
    }
    Ok(params)
}

/// Nonlinear least squares of `c + Σ_k A_k cos(f_k δ + φ_k)` with free
/// frequencies, at most `max_harmonics` components.
pub fn fit_free(
    curve: &CorrelationCurve,
    m: usize,
    max_harmonics: usize,
    options: &FitOptions,
) -> Result<ModulationSpectrum> {
    let samples = Samples::new(curve, m)?;
    let n = curve.len();
    let coverage = samples.coverage();
    let nyquist = 0.5 * n as f64 * std::f64::consts::TAU / coverage;
    let model = SinusoidModel {
        t: &samples.t,
        w: &samples.weights,
        f_lo: options.min_frequency,
        f_hi: (options.span_bound as f64 + 0.5).min(nyquist * 0.95),
    };
    let params = free_fit_core(&model, &curve.values, max_harmonics, coverage, options.max_iterations)?;
    let k = SinusoidModel::components(&params);
    let p = params.len();
    if n <= p {
        return Err(Error::Fit(format!("{n} samples for {p} parameters")));
    }

    let (jac, r) = model.linearize(&params, &curve.values);
    let mut cov = (jac.transpose() * &jac)
        .try_inverse()
        .ok_or_else(|| Error::Fit("singular normal matrix at the solution".into()))?;
    let rss = model.cost(&params, &curve.values);
    if !samples.weighted() {
        cov *= rss / (n - p) as f64;
    }
    let residual_rms = if samples.weighted() {
        let unweighted: f64 = samples
            .t
            .iter()
            .zip(&curve.values)
            .map(|(&t, &v)| (v - model.eval(&params, t)).powi(2))
            .sum();
        (unweighted / n as f64).sqrt()
    } else {
        (r.norm_squared() / n as f64).sqrt()
    };

    let step = (m - 1) as f64;
    let mut harmonics: Vec<Harmonic> = (0..k)
        .map(|j| {
            let (ia, ib, jf) = (1 + 3 * j, 2 + 3 * j, 3 + 3 * j);
            let (amp, sigma_amp) = quadrature(params[ia], params[ib], cov[(ia, ia)], cov[(ib, ib)], cov[(ia, ib)]);
            let f = params[jf];
            Harmonic {
                kappa: ((f / step).round() as u32).max(1),
                f,
                sigma_f: cov[(jf, jf)].max(0.0).sqrt(),
                amplitude: amp,
                sigma_amplitude: sigma_amp,
            }
        })
        .collect();
    let mut sigma_a0 = cov[(0, 0)].max(0.0).sqrt();

    if let Some(reps) = curve.replicates.as_ref().filter(|r| r.len() >= 2) {
        let refits: Vec<DVector<f64>> = reps
            .par_iter()
            .filter_map(|rep| {
                // a replicate that hits the iteration cap still yields a
                // usable estimate; only non-finite results are discarded
                let mut q = params.clone();
                let _ = model.refine(&mut q, rep, options.max_iterations);
                q.iter().all(|v| v.is_finite()).then_some(q)
            })
            .collect();
        if refits.len() * 2 < reps.len() {
            return Err(Error::Fit(format!(
                "only {} of {} bootstrap replicates could be refitted",
                refits.len(),
                reps.len()
            )));
        }
        sigma_a0 = robust_spread(&refits.iter().map(|q| q[0]).collect::<Vec<_>>());
        for (j, h) in harmonics.iter_mut().enumerate() {
            let amps: Vec<f64> = refits.iter().map(|q| q[1 + 3 * j].hypot(q[2 + 3 * j])).collect();
            let freqs: Vec<f64> = refits.iter().map(|q| q[3 + 3 * j]).collect();
            h.sigma_amplitude = robust_spread(&amps);
            h.sigma_f = robust_spread(&freqs);
        }
    }

    harmonics.sort_by(|a, b| a.f.total_cmp(&b.f));
    Ok(ModulationSpectrum {
        order: m,
        a0: params[0],
        sigma_a0,
        harmonics,
        fit_kind: FitKind::Free,
        residual_rms,
    })
}

/// Thresholds for accepting a fitted harmonic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatePolicy {
    /// Minimum amplitude significance `A / σ_A`.
    pub k_a: f64,
    /// Largest acceptable frequency uncertainty.
    pub sigma_f_max: f64,
    /// Largest acceptable distance of `f` from an integer.
    pub eps_int: f64,
    /// Reject frequencies that do not round to a multiple of `m − 1`.
    #[serde(default = "enabled")]
    pub harmonics_only: bool,
    /// Smallest accepted visibility `A / A0`.
    #[serde(default = "default_min_visibility")]
    pub min_visibility: f64,
}

fn default_min_visibility() -> f64 {
    1e-3
}

fn enabled() -> bool {
    true
}

impl Default for GatePolicy {
    fn default() -> Self {
        GatePolicy {
            k_a: 2.0,
            sigma_f_max: 0.1,
            eps_int: 0.15,
            harmonics_only: true,
            min_visibility: default_min_visibility(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rejection {
    LowAmplitude,
    FrequencySpread,
    OffGrid,
    NotHarmonic,
}

impl GatePolicy {
    /// First criterion `h` fails in a spectrum of order `m` with offset `a0`.
    pub fn verdict(&self, h: &Harmonic, m: usize, a0: f64) -> Option<Rejection> {
        let step = m.saturating_sub(1).max(1) as f64;
        if !(h.amplitude >= self.k_a * h.sigma_amplitude) || !(h.amplitude > self.min_visibility * a0.abs()) {
            Some(Rejection::LowAmplitude)
        } else if !(h.sigma_f <= self.sigma_f_max) {
            Some(Rejection::FrequencySpread)
        } else if (h.f - h.f.round()).abs() > self.eps_int {
            Some(Rejection::OffGrid)
        } else if self.harmonics_only && h.f.round() % step != 0.0 {
            Some(Rejection::NotHarmonic)
        } else {
            None
        }
    }
}

/// Drop harmonics failing the policy and round surviving frequencies.
pub fn gate(spectrum: &ModulationSpectrum, policy: &GatePolicy) -> ModulationSpectrum {
    let step = spectrum.order.saturating_sub(1).max(1) as f64;
    let harmonics = spectrum
        .harmonics
        .iter()
        .filter(|h| policy.verdict(h, spectrum.order, spectrum.a0).is_none())
        .map(|h| {
            let f = h.f.round();
            Harmonic {
                kappa: ((f / step).round() as u32).max(1),
                f,
                ..h.clone()
            }
        })
        .collect();
    ModulationSpectrum {
        harmonics,
        ..spectrum.clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Present,
    Absent,
    Unknown,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Present => "present",
            Status::Absent => "absent",
            Status::Unknown => "unknown",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceRow {
    pub f: u32,
    pub status: Status,
    #[serde(rename = "A")]
    pub amplitude: Option<f64>,
    #[serde(rename = "sigma_A")]
    pub sigma_amplitude: Option<f64>,
    /// Orders that accepted `f` (present) or could have seen it but did not (absent).
    pub orders: Vec<usize>,
    /// Orders contradicting a present verdict.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflicts: Vec<usize>,
}

/// Per-frequency presence verdicts for `f = 1..=span_hint`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTable {
    pub span_hint: u32,
    pub rows: Vec<EvidenceRow>,
    pub orders_measured: Vec<usize>,
}

impl EvidenceTable {
    pub fn status(&self, f: u32) -> Status {
        if f == 0 || f > self.span_hint {
            return Status::Unknown;
        }
        self.rows
            .get(f as usize - 1)
            .map(|r| r.status)
            .unwrap_or(Status::Unknown)
    }

    pub fn with_status(&self, status: Status) -> BTreeSet<u32> {
        self.rows.iter().filter(|r| r.status == status).map(|r| r.f).collect()
    }

    pub fn present(&self) -> BTreeSet<u32> {
        self.with_status(Status::Present)
    }

    pub fn absent(&self) -> BTreeSet<u32> {
        self.with_status(Status::Absent)
    }

    pub fn conflicted(&self) -> Vec<&EvidenceRow> {
        self.rows.iter().filter(|r| !r.conflicts.is_empty()).collect()
    }

    /// Table with explicit present and absent sets; everything else up to
    /// the largest present frequency is unknown.
    pub fn from_sets(present: &[u32], absent: &[u32]) -> Self {
        let span_hint = present.iter().copied().max().unwrap_or(0);
        let rows = (1..=span_hint)
            .map(|f| {
                let status = if present.contains(&f) {
                    Status::Present
                } else if absent.contains(&f) {
                    Status::Absent
                } else {
                    Status::Unknown
                };
                EvidenceRow {
                    f,
                    status,
                    amplitude: None,
                    sigma_amplitude: None,
                    orders: Vec::new(),
                    conflicts: Vec::new(),
                }
            })
            .collect();
        EvidenceTable {
            span_hint,
            rows,
            orders_measured: Vec::new(),
        }
    }
}

/// Merge gated spectra from distinct orders into an evidence table.
pub fn aggregate(spectra: &[ModulationSpectrum]) -> Result<EvidenceTable> {
    let mut by_order: BTreeMap<usize, &ModulationSpectrum> = BTreeMap::new();
    for s in spectra {
        if s.order < 2 {
            return Err(Error::Order { got: s.order, min: 2 });
        }
        if by_order.insert(s.order, s).is_some() {
            return Err(Error::Dimension(format!("order {} appears twice", s.order)));
        }
    }
    let divides = |m: usize, f: u32| f.is_multiple_of(m as u32 - 1);

    let span_hint = by_order
        .iter()
        .flat_map(|(&m, s)| s.frequencies().into_iter().filter(move |&f| f > 0 && divides(m, f)))
        .max()
        .unwrap_or(0);

    let rows = (1..=span_hint)
        .map(|f| {
            let mut accepting = Vec::new();
            let mut rejecting = Vec::new();
            let mut best: Option<&Harmonic> = None;
            for (&m, s) in &by_order {
                if !divides(m, f) {
                    continue;
                }
                match s.harmonic_at(f) {
                    Some(h) => {
                        accepting.push(m);
                        best.get_or_insert(h);
                    }
                    None => rejecting.push(m),
                }
            }
            let (status, orders, conflicts) = if !accepting.is_empty() {
                (Status::Present, accepting, rejecting)
            } else if !rejecting.is_empty() {
                (Status::Absent, rejecting, Vec::new())
            } else {
                (Status::Unknown, Vec::new(), Vec::new())
            };
            EvidenceRow {
                f,
                status,
                amplitude: best.map(|h| h.amplitude),
                sigma_amplitude: best.map(|h| h.sigma_amplitude),
                orders,
                conflicts,
            }
        })
        .collect();

    Ok(EvidenceTable {
        span_hint,
        rows,
        orders_measured: by_order.keys().copied().collect(),
    })
}

/// Lattice constant from consecutive magic-position detectors:
/// `d = λ / ((m−1)(sin θ_j − sin θ_{j−1}))`, averaged over the pairs.
pub fn calibrate_d(pairs: &[(f64, f64)], wavelength: f64, m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::Order { got: m, min: 2 });
    }
    if pairs.is_empty() {
        return Err(Error::Degenerate("no detector pairs".into()));
    }
    let mut total = 0.0;
    for &(sin_j, sin_prev) in pairs {
        let sep = sin_j - sin_prev;
        if sep == 0.0 || !sep.is_finite() {
            return Err(Error::Degenerate("zero angular separation".into()));
        }
        total += wavelength / ((m - 1) as f64 * sep);
    }
    Ok(total / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{g_m_analytic, predicted_spectrum, DetectorArray, ScanGrid};
    use crate::geometry::SourceGeometry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn analytic(x: &[u32], m: usize, samples: usize) -> CorrelationCurve {
        let det = DetectorArray::magic(m, ScanGrid::periodic(samples)).unwrap();
        g_m_analytic(&SourceGeometry::new(x.to_vec()).unwrap(), &det, None).unwrap()
    }

    fn synthetic(f: impl Fn(f64) -> f64, noise: f64, seed: u64) -> CorrelationCurve {
        let grid = ScanGrid::periodic(256).points();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let values = grid
            .iter()
            .map(|&d| f(d) + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 })
            .collect();
        let mut curve = CorrelationCurve::new(2, grid, values).unwrap();
        if noise > 0.0 {
            curve.sigma = Some(vec![noise; curve.len()]);
        }
        curve
    }

    fn h(f: f64, sigma_f: f64, a: f64, sigma_a: f64) -> Harmonic {
        Harmonic {
            kappa: 1,
            f,
            sigma_f,
            amplitude: a,
            sigma_amplitude: sigma_a,
        }
    }

    fn spectrum(m: usize, harmonics: Vec<Harmonic>) -> ModulationSpectrum {
        ModulationSpectrum {
            order: m,
            a0: 1.0,
            sigma_a0: 0.0,
            harmonics,
            fit_kind: FitKind::Free,
            residual_rms: 0.0,
        }
    }

    #[test]
    fn fixed_fit_matches_prediction() {
        let curve = analytic(&[3, 1, 4], 5, 128);
        let fit = fit_fixed(&curve, 5, &FitOptions::default()).unwrap();
        let pred = predicted_spectrum(&SourceGeometry::new(vec![3, 1, 4]).unwrap(), 5, 128, None)
            .unwrap()
            .spectrum;
        assert!((fit.a0 - pred.a0).abs() < 1e-8);
        for p in &pred.harmonics {
            let got = fit.harmonic_at(p.f as u32).unwrap();
            assert!((got.amplitude - p.amplitude).abs() < 1e-8);
        }
        // κ = 3 (f = 12) is fitted but empty
        assert!(fit.harmonic_at(12).unwrap().amplitude < 1e-8);
    }

    #[test]
    fn fixed_fit_of_noisy_constant_is_null() {
        let curve = synthetic(|_| 24.0, 0.05, 3);
        let fit = fit_fixed(&curve, 6, &FitOptions::default()).unwrap();
        assert_eq!(fit.harmonics.len(), 2);
        for h in &fit.harmonics {
            assert!(h.amplitude <= 2.0 * h.sigma_amplitude + 1e-12, "{h:?}");
        }
    }

    #[test]
    fn fixed_fit_recovers_synthetic_amplitude() {
        let curve = synthetic(|d| 1.0 + 0.4 * (4.0 * d).cos(), 0.01, 11);
        let fit = fit_fixed(&curve, 5, &FitOptions::default()).unwrap();
        let h = fit.harmonic_at(4).unwrap();
        assert!((h.amplitude - 0.4).abs() < 0.01);
        assert!(h.sigma_amplitude > 0.0 && h.sigma_amplitude < 0.01);
    }

    #[test]
    fn fixed_fit_errors() {
        let curve = CorrelationCurve::new(5, vec![0.0, 0.1, 0.2, 0.3], vec![1.0; 4]).unwrap();
        assert!(matches!(
            fit_fixed(&curve, 5, &FitOptions::default()),
            Err(Error::Fit(_))
        ));
        let grid = ScanGrid::periodic(4).points();
        let curve = CorrelationCurve::new(3, grid, vec![1.0; 4]).unwrap();
        assert!(matches!(
            fit_fixed(&curve, 3, &FitOptions::default()),
            Err(Error::Fit(_))
        ));
    }

    #[test]
    fn free_fit_recovers_off_grid_frequency() {
        let curve = synthetic(|d| 2.0 + 0.5 * (3.3 * d + 0.2).cos(), 0.01, 5);
        let fit = fit_free(&curve, 4, 1, &FitOptions::default()).unwrap();
        let h = &fit.harmonics[0];
        assert!((h.f - 3.3).abs() < 3.0 * h.sigma_f + 1e-3, "{h:?}");
        assert!(h.sigma_f < 0.01);
        assert!((h.amplitude - 0.5).abs() < 0.01);
    }

    #[test]
    fn free_fit_on_analytic_curve_is_exact() {
        let curve = analytic(&[1, 3, 2], 3, 256);
        let fit = fit_free(&curve, 3, 4, &FitOptions::default()).unwrap();
        let gated = gate(&fit, &GatePolicy::default());
        assert_eq!(gated.frequencies(), BTreeSet::from([2, 4, 6]));
        for h in &fit.harmonics {
            assert!((h.f - h.f.round()).abs() < 1e-6);
        }
    }

    #[test]
    fn free_fit_of_constant_has_no_harmonics() {
        let curve = analytic(&[1, 3], 6, 128);
        let fit = fit_free(&curve, 6, 3, &FitOptions::default()).unwrap();
        assert!(gate(&fit, &GatePolicy::default()).harmonics.is_empty());
    }

    #[test]
    fn gate_examples() {
        let policy = GatePolicy::default();
        assert_eq!(
            policy.verdict(&h(3.90, 0.31, 1.05, 0.2), 6, 1.0),
            Some(Rejection::FrequencySpread)
        );
        assert_eq!(policy.verdict(&h(2.93, 0.03, 0.51, 0.19), 4, 1.0), None);
        assert_eq!(
            policy.verdict(&h(4.00, 0.005, 1e-4, 1e-4), 5, 1.0),
            Some(Rejection::LowAmplitude)
        );
        assert_eq!(
            policy.verdict(&h(3.80, 0.01, 1.0, 0.01), 5, 1.0),
            Some(Rejection::OffGrid)
        );
        assert_eq!(
            policy.verdict(&h(3.02, 0.01, 1.0, 0.01), 3, 1.0),
            Some(Rejection::NotHarmonic)
        );
        let lenient = GatePolicy {
            harmonics_only: false,
            ..policy.clone()
        };
        assert_eq!(lenient.verdict(&h(3.02, 0.01, 1.0, 0.01), 3, 1.0), None);

        let gated = gate(
            &spectrum(4, vec![h(2.93, 0.03, 0.51, 0.19), h(3.9, 0.31, 1.0, 0.1)]),
            &policy,
        );
        assert_eq!(gated.harmonics.len(), 1);
        assert_eq!(gated.harmonics[0].f, 3.0);
        assert_eq!(gated.harmonics[0].kappa, 1);
    }

    fn ideal_spectra(x: &[u32], orders: impl IntoIterator<Item = usize>) -> Vec<ModulationSpectrum> {
        let f = SourceGeometry::new(x.to_vec()).unwrap().distinct_frequencies().unwrap();
        orders
            .into_iter()
            .map(|m| {
                let hs = f
                    .iter()
                    .filter(|v| v % (m as u32 - 1) == 0)
                    .map(|v| h(v as f64, 0.0, 1.0, 0.1))
                    .collect();
                spectrum(m, hs)
            })
            .collect()
    }

    #[test]
    fn aggregate_examples() {
        let table = aggregate(&ideal_spectra(&[3, 1, 4], 3..=9)).unwrap();
        assert_eq!(table.span_hint, 8);
        assert_eq!(table.present(), BTreeSet::from([3, 4, 5, 8]));
        assert_eq!(table.absent(), BTreeSet::from([2, 6, 7]));
        assert_eq!(table.with_status(Status::Unknown), BTreeSet::from([1]));

        let table = aggregate(&ideal_spectra(&[3, 1, 4], [3])).unwrap();
        assert_eq!(table.present(), BTreeSet::from([4, 8]));
        assert_eq!(table.absent(), BTreeSet::from([2, 6]));
        assert_eq!(table.with_status(Status::Unknown), BTreeSet::from([1, 3, 5, 7]));

        let table = aggregate(&[]).unwrap();
        assert!(table.rows.is_empty());
        assert_eq!(table.status(3), Status::Unknown);
    }

    #[test]
    fn aggregate_flags_conflicts() {
        let spectra = vec![spectrum(3, vec![h(4.0, 0.0, 1.0, 0.1)]), spectrum(5, vec![])];
        let table = aggregate(&spectra).unwrap();
        assert_eq!(table.status(4), Status::Present);
        assert_eq!(table.rows[3].conflicts, vec![5]);
        assert_eq!(table.conflicted().len(), 1);
        assert!(aggregate(&[spectrum(3, vec![]), spectrum(3, vec![])]).is_err());
    }

    #[test]
    fn aggregate_is_monotone() {
        let all = ideal_spectra(&[2, 1, 3], 3..=7);
        for k in 1..all.len() {
            let before = aggregate(&all[..k]).unwrap();
            let after = aggregate(&all[..=k]).unwrap();
            for f in before.present() {
                assert_eq!(after.status(f), Status::Present);
            }
        }
    }

    #[test]
    fn evidence_json_schema() {
        let table = aggregate(&ideal_spectra(&[1, 3], [3])).unwrap();
        let v = serde_json::to_value(&table).unwrap();
        assert_eq!(v["span_hint"], 4);
        assert_eq!(v["rows"][3]["status"], "present");
        assert_eq!(v["rows"][3]["A"], 1.0);
        assert_eq!(v["orders_measured"], serde_json::json!([3]));
        let back: EvidenceTable = serde_json::from_value(v).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn calibration() {
        let lambda = 632.8e-9;
        let d = 570e-6;
        let sep = lambda / (2.0 * d);
        let got = calibrate_d(&[(0.1 + sep, 0.1)], lambda, 3).unwrap();
        assert!((got - d).abs() < 1e-12);
        let got = calibrate_d(&[(sep, 0.0), (sep, 0.0)], lambda, 3).unwrap();
        assert!((got - d).abs() < 1e-12);
        let got = calibrate_d(&[(1.01 * sep, 0.0), (0.99 * sep, 0.0)], lambda, 3).unwrap();
        assert!((got / d - 1.0).abs() < 0.01);
        assert!(calibrate_d(&[(0.2, 0.2)], lambda, 3).is_err());
    }
}
