//! Superresolving imaging of irregular thermal source arrays from
//! higher-order intensity correlations.
//!
//! The crate covers the whole chain: exact correlation functions of
//! independent thermal sources (via matrix permanents), a Monte Carlo speckle
//! experiment, harmonic fits of the measured curves, and reconstruction of
//! the source geometry from the recovered spatial frequencies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod correlation;
pub mod error;
pub mod fourier;
pub mod geometry;
pub mod io;
pub mod permanent;
pub mod pipeline;
pub mod reconstruction;
pub mod speckle;
pub mod spectrum;

pub use correlation::{
    coherence_matrix, g_m_analytic, magic_positions, predicted_spectrum, regular_array_reference, roots_of_unity_sum,
    surviving_frequencies, CorrelationCurve, DetectorArray, ScanGrid,
};
pub use error::{Error, Result};
pub use geometry::{FrequencyMultiset, FrequencySet, PhasePrefactors, SourceGeometry};
pub use permanent::permanent;
pub use reconstruction::{
    aperture_report, disambiguate, oracle_search, search, ApertureReport, CandidateSet, SearchBounds,
};
pub use speckle::{estimate_g_m, nearest_magic_pixels, quantize, sample_frames, FrameStack, SpeckleRun};
pub use spectrum::{aggregate, calibrate_d, fit_fixed, fit_free, gate, EvidenceTable, GatePolicy, ModulationSpectrum};
