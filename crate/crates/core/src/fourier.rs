//! Discrete Fourier helpers for curves sampled uniformly over one full period
//! `[0, 2π)`. On such a grid integer frequencies fall exactly on DFT bins.

use std::f64::consts::TAU;

use num_complex::Complex64;

/// Uniform grid `2πp/S`, `p = 0..S`.
pub fn periodic_grid(samples: usize) -> Vec<f64> {
    (0..samples).map(|p| TAU * p as f64 / samples as f64).collect()
}

/// `(1/S) Σ_p v_p e^{-i q δ_p}` for a periodic uniform grid.
pub fn coefficient(values: &[f64], q: u32) -> Complex64 {
    let s = values.len();
    let mut acc = Complex64::new(0.0, 0.0);
    for (p, &v) in values.iter().enumerate() {
        // phase index reduced modulo S
        let k = (q as u64 * p as u64) % s as u64;
        let phase = -TAU * k as f64 / s as f64;
        acc += v * Complex64::from_polar(1.0, phase);
    }
    acc / s as f64
}

/// Amplitude of the `cos(qδ + φ)` component: `2|X_q|` (just the mean for q = 0).
pub fn amplitude(values: &[f64], q: u32) -> f64 {
    let c = coefficient(values, q);
    if q == 0 {
        c.re
    } else {
        2.0 * c.norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_cosine_amplitudes() {
        let grid = periodic_grid(64);
        let v: Vec<f64> = grid
            .iter()
            .map(|&d| 1.0 + 0.4 * (4.0 * d).cos() - 0.25 * (7.0 * d + 0.3).cos())
            .collect();
        assert!((amplitude(&v, 0) - 1.0).abs() < 1e-14);
        assert!((amplitude(&v, 4) - 0.4).abs() < 1e-14);
        assert!((amplitude(&v, 7) - 0.25).abs() < 1e-14);
        assert!(amplitude(&v, 5) < 1e-14);
    }
}
