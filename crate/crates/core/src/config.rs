//! Run configuration (TOML), physical scene, and run manifests.
//!
//! Precedence: command-line flags override keys from the file, which
//! override the defaults below.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SourceGeometry;
use crate::reconstruction::SearchBounds;
use crate::speckle::EstimateOptions;
use crate::spectrum::{FitOptions, GatePolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_orders")]
    pub orders: Vec<usize>,
    pub geometry: GeometryConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub gate: GateConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneConfig>,
}

fn default_orders() -> Vec<usize> {
    vec![3, 4, 5, 6]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub x: Vec<u32>,
    #[serde(default = "default_d_microns")]
    pub d_microns: f64,
}

fn default_d_microns() -> f64 {
    570.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub frames: usize,
    /// Pixels over one period `[0, 2π)`.
    pub pixels: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bits: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope_width: Option<f64>,
    pub bootstrap: usize,
    pub blocks: usize,
    pub shift_average: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let est = EstimateOptions::default();
        SimulationConfig {
            frames: 1000,
            pixels: 240,
            weights: None,
            bits: None,
            envelope_width: None,
            bootstrap: est.bootstrap,
            blocks: est.blocks,
            shift_average: est.shift_average,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub span_bound: u32,
    pub max_harmonics: usize,
    pub max_iterations: usize,
    pub min_frequency: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let f = FitOptions::default();
        FitConfig {
            span_bound: f.span_bound,
            max_harmonics: 8,
            max_iterations: f.max_iterations,
            min_frequency: f.min_frequency,
        }
    }
}

impl FitConfig {
    pub fn options(&self) -> FitOptions {
        FitOptions {
            span_bound: self.span_bound,
            max_iterations: self.max_iterations,
            min_frequency: self.min_frequency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    #[serde(rename = "k_A")]
    pub k_a: f64,
    pub sigma_f_max: f64,
    pub eps_int: f64,
    pub harmonics_only: bool,
    pub min_visibility: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig::from(&GatePolicy::default())
    }
}

impl From<&GatePolicy> for GateConfig {
    fn from(p: &GatePolicy) -> Self {
        GateConfig {
            k_a: p.k_a,
            sigma_f_max: p.sigma_f_max,
            eps_int: p.eps_int,
            harmonics_only: p.harmonics_only,
            min_visibility: p.min_visibility,
        }
    }
}

impl GateConfig {
    pub fn policy(&self) -> GatePolicy {
        GatePolicy {
            k_a: self.k_a,
            sigma_f_max: self.sigma_f_max,
            eps_int: self.eps_int,
            harmonics_only: self.harmonics_only,
            min_visibility: self.min_visibility,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub max_sources: usize,
    pub max_span: u32,
    pub allow_unknown_span: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        let b = SearchBounds::default();
        SearchConfig {
            max_sources: b.max_sources,
            max_span: b.max_span,
            allow_unknown_span: b.allow_unknown_span,
        }
    }
}

impl SearchConfig {
    pub fn bounds(&self) -> SearchBounds {
        SearchBounds {
            max_sources: self.max_sources,
            max_span: self.max_span,
            allow_unknown_span: self.allow_unknown_span,
        }
    }
}

/// Optical parameters; the lattice constant comes from the geometry section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Wavelength in meters.
    pub lambda: f64,
    /// Source-detector distance in meters.
    pub z: f64,
}

/// Wavelength, distance and lattice constant, all in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalScene {
    pub lambda: f64,
    pub z: f64,
    pub d: f64,
}

impl PhysicalScene {
    pub fn new(lambda: f64, z: f64, d: f64) -> Result<Self> {
        let bad: Vec<String> = [("scene.lambda", lambda), ("scene.z", z), ("geometry.d_microns", d)]
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v > 0.0))
            .map(|(k, v)| format!("{k} must be positive, got {v}"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        Ok(PhysicalScene { lambda, z, d })
    }

    pub fn wavenumber(&self) -> f64 {
        TAU / self.lambda
    }

    /// Detector phase `δ = k d sin θ`.
    pub fn delta_of_theta(&self, theta: f64) -> f64 {
        self.wavenumber() * self.d * theta.sin()
    }

    /// Inverse of [`Self::delta_of_theta`]; `None` outside `|sin θ| ≤ 1`.
    pub fn theta_of_delta(&self, delta: f64) -> Option<f64> {
        let s = delta / (self.wavenumber() * self.d);
        (s.abs() <= 1.0).then(|| s.asin())
    }

    /// Whether `z` exceeds the Fraunhofer distance `(extent)² / λ` of a
    /// source array spanning `span` lattice steps, by a factor of ten.
    pub fn far_field(&self, sources: usize, span: u32) -> bool {
        let extent = sources as f64 * span as f64 * self.d;
        self.z >= 10.0 * extent * extent / self.lambda
    }
}

impl Config {
    pub fn for_geometry(x: Vec<u32>) -> Self {
        Config {
            seed: 0,
            orders: default_orders(),
            geometry: GeometryConfig {
                x,
                d_microns: default_d_microns(),
            },
            simulation: SimulationConfig::default(),
            fit: FitConfig::default(),
            gate: GateConfig::default(),
            search: SearchConfig::default(),
            scene: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::parse(&text)
    }

    pub fn emit(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Every offending key with the reason it was rejected.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.seed > i64::MAX as u64 {
            bad.push("seed must be below 2^63".into());
        }
        if let Err(e) = self.source_geometry() {
            bad.push(format!("geometry.x: {e}"));
        }
        if !(self.geometry.d_microns.is_finite() && self.geometry.d_microns > 0.0) {
            bad.push("geometry.d_microns must be positive".into());
        }
        if self.orders.is_empty() {
            bad.push("orders must not be empty".into());
        }
        if let Some(m) = self.orders.iter().find(|&&m| m < 2) {
            bad.push(format!("orders: {m} is below 2"));
        }
        let mut sorted = self.orders.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.orders.len() {
            bad.push("orders contains duplicates".into());
        }
        let sim = &self.simulation;
        if sim.frames == 0 {
            bad.push("simulation.frames must be at least 1".into());
        }
        let span = self.geometry.x.iter().sum::<u32>() as usize;
        if sim.pixels < 4 * (span + 1) {
            bad.push(format!(
                "simulation.pixels = {} cannot resolve span {span} (need at least {})",
                sim.pixels,
                4 * (span + 1)
            ));
        }
        if let Some(w) = &sim.weights {
            if w.len() != self.geometry.x.len() + 1 {
                bad.push(format!(
                    "simulation.weights has {} entries for {} sources",
                    w.len(),
                    self.geometry.x.len() + 1
                ));
            } else if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                bad.push("simulation.weights must be finite and non-negative".into());
            }
        }
        if let Some(b) = sim.bits {
            if !(1..=16).contains(&b) {
                bad.push(format!("simulation.bits = {b} is outside 1..=16"));
            }
        }
        if let Some(w) = sim.envelope_width {
            if !(w.is_finite() && w > 0.0) {
                bad.push("simulation.envelope_width must be positive".into());
            }
        }
        if sim.blocks < 2 {
            bad.push("simulation.blocks must be at least 2".into());
        }
        if self.fit.max_harmonics == 0 {
            bad.push("fit.max_harmonics must be at least 1".into());
        }
        if self.fit.span_bound == 0 {
            bad.push("fit.span_bound must be at least 1".into());
        }
        let g = &self.gate;
        for (key, v) in [
            ("gate.k_A", g.k_a),
            ("gate.sigma_f_max", g.sigma_f_max),
            ("gate.eps_int", g.eps_int),
            ("gate.min_visibility", g.min_visibility),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                bad.push(format!("{key} must be finite and non-negative"));
            }
        }
        if !(g.eps_int < 0.5) {
            bad.push("gate.eps_int must be below 0.5".into());
        }
        if self.search.max_sources < 2 {
            bad.push("search.max_sources must be at least 2".into());
        }
        if let Some(s) = &self.scene {
            if let Err(Error::Config(mut e)) = PhysicalScene::new(s.lambda, s.z, self.geometry.d_microns * 1e-6) {
                bad.append(&mut e);
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn source_geometry(&self) -> Result<SourceGeometry> {
        SourceGeometry::with_lattice_constant(self.geometry.x.clone(), self.geometry.d_microns * 1e-6)
    }

    pub fn scene(&self) -> Option<PhysicalScene> {
        self.scene
            .as_ref()
            .and_then(|s| PhysicalScene::new(s.lambda, s.z, self.geometry.d_microns * 1e-6).ok())
    }

    pub fn estimate_options(&self) -> EstimateOptions {
        EstimateOptions {
            bootstrap: self.simulation.bootstrap,
            blocks: self.simulation.blocks,
            seed: self.seed,
            shift_average: self.simulation.shift_average,
        }
    }
}

/// Snapshot of a run: everything needed to reproduce its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Config,
    pub seed: u64,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn now() -> u64 {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = r#"
seed = 7
orders = [3, 4, 5, 6]

[geometry]
x = [1, 3]
d_microns = 570.0

[simulation]
frames = 1000

[gate]
k_A = 2.5

[scene]
lambda = 632.8e-9
z = 0.40
"#;

    #[test]
    fn parses_sample() {
        let c = Config::parse(SAMPLE).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.geometry.x, [1, 3]);
        assert_eq!(c.gate.k_a, 2.5);
        assert_eq!(c.gate.sigma_f_max, 0.1);
        assert_eq!(c.simulation.pixels, 240);
        let scene = c.scene().unwrap();
        assert!((scene.d - 570e-6).abs() < 1e-15);
        assert_eq!(c.source_geometry().unwrap().gaps(), [1, 3]);
    }

    #[test]
    fn roundtrip() {
        let c = Config::parse(SAMPLE).unwrap();
        assert_eq!(Config::parse(&c.emit().unwrap()).unwrap(), c);
    }

    #[test]
    fn reports_offending_keys() {
        let err = Config::parse("[geometry]\nx = [1, 0]\n[simulation]\nframes = 0\npixels = 4\n").unwrap_err();
        let Error::Config(keys) = err else { panic!() };
        assert!(keys.iter().any(|k| k.starts_with("geometry.x")), "{keys:?}");
        assert!(keys.iter().any(|k| k.starts_with("simulation.frames")));
        assert!(keys.iter().any(|k| k.starts_with("simulation.pixels")));

        let err = Config::parse("[geometry]\nx = [1]\ncolour = 3\n").unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        assert!(Config::parse("orders = [3]\n").is_err());
    }

    #[test]
    fn scene_mapping() {
        let s = PhysicalScene::new(632.8e-9, 0.4, 570e-6).unwrap();
        let theta = 3e-4;
        let d = s.delta_of_theta(theta);
        assert!((s.theta_of_delta(d).unwrap() - theta).abs() < 1e-15);
        assert!(s.theta_of_delta(1e9).is_none());
        assert!(PhysicalScene::new(1e-6, 1e6, 1e-6).unwrap().far_field(3, 4));
        assert!(!PhysicalScene::new(632.8e-9, 0.4, 570e-6).unwrap().far_field(3, 4));
        assert!(PhysicalScene::new(-1.0, 0.4, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn emit_parse_roundtrip(
            seed in 0..=i64::MAX as u64,
            x in prop::collection::vec(1u32..5, 1..4),
            frames in 1usize..5000,
            k_a in 0.0f64..10.0,
            unknown in any::<bool>(),
            bits in prop::option::of(1u8..=16),
        ) {
            let mut c = Config::for_geometry(x);
            c.seed = seed;
            c.simulation.frames = frames;
            c.simulation.bits = bits;
            c.gate.k_a = k_a;
            c.search.allow_unknown_span = unknown;
            let text = c.emit().unwrap();
            prop_assert_eq!(Config::parse(&text).unwrap(), c);
        }
    }
}
