//! Monte Carlo pseudothermal experiment.
//!
//! Every frame draws one independent circular Gaussian amplitude per source
//! and records the far-field intensity `|Σ_l a_l e^{i α_l δ_p}|²` on a row of
//! pixels. Frames use independent ChaCha streams keyed by `(seed, frame)`,
//! so results do not depend on how the work is split across threads.

use std::io::{Read, Write};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::{check_weights, magic_positions, CorrelationCurve, ScanGrid};
use crate::error::{Error, Result};
use crate::geometry::SourceGeometry;

/// Stream index reserved for bootstrap resampling; frames use `0..R`.
const BOOTSTRAP_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeckleRun {
    pub geometry: SourceGeometry,
    pub frames: usize,
    pub seed: u64,
    /// Pixel positions in δ units.
    pub pixels: ScanGrid,
    /// Per-source mean intensities.
    pub weights: Vec<f64>,
    /// Camera bit depth; `None` keeps raw intensities.
    pub bits: Option<u8>,
    /// Width (in δ) of a Gaussian intensity envelope from the finite source
    /// size. Off by default.
    pub envelope_width: Option<f64>,
}

impl SpeckleRun {
    pub fn new(geometry: SourceGeometry, frames: usize, seed: u64, pixels: ScanGrid) -> Self {
        let weights = vec![1.0; geometry.source_count()];
        SpeckleRun {
            geometry,
            frames,
            seed,
            pixels,
            weights,
            bits: None,
            envelope_width: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Dimension("at least one frame is required".into()));
        }
        self.pixels.validate()?;
        check_weights(&self.geometry, &self.weights)?;
        if let Some(bits) = self.bits {
            check_bits(bits)?;
        }
        if let Some(w) = self.envelope_width {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Dimension("envelope width must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Frames × pixels intensities, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    intensities: Vec<f32>,
    frames: usize,
    delta_axis: Vec<f64>,
    sources: usize,
    seed: u64,
    bits: Option<u8>,
}

#[derive(Serialize, Deserialize)]
struct StackHeader {
    #[serde(rename = "N")]
    sources: usize,
    #[serde(rename = "R")]
    frames: usize,
    #[serde(rename = "P")]
    pixels: usize,
    seed: u64,
    delta_axis: Vec<f64>,
    bits: Option<u8>,
}

const STACK_MAGIC: &[u8; 8] = b"TLSFRAME";
const STACK_VERSION: u32 = 1;

impl FrameStack {
    pub fn from_parts(
        intensities: Vec<f32>,
        frames: usize,
        delta_axis: Vec<f64>,
        sources: usize,
        seed: u64,
        bits: Option<u8>,
    ) -> Result<Self> {
        if intensities.len() != frames * delta_axis.len() {
            return Err(Error::Dimension(format!(
                "{} intensities for {} frames × {} pixels",
                intensities.len(),
                frames,
                delta_axis.len()
            )));
        }
        if intensities.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Dimension("intensities must be finite and non-negative".into()));
        }
        Ok(FrameStack {
            intensities,
            frames,
            delta_axis,
            sources,
            seed,
            bits,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pixels(&self) -> usize {
        self.delta_axis.len()
    }

    pub fn delta_axis(&self) -> &[f64] {
        &self.delta_axis
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bits(&self) -> Option<u8> {
        self.bits
    }

    pub fn frame(&self, r: usize) -> &[f32] {
        let p = self.pixels();
        &self.intensities[r * p..(r + 1) * p]
    }

    pub fn intensities(&self) -> &[f32] {
        &self.intensities
    }

    pub fn mean_intensity(&self, pixel: usize) -> f64 {
        (0..self.frames).map(|r| self.frame(r)[pixel] as f64).sum::<f64>() / self.frames as f64
    }

    /// `⟨I²⟩ / ⟨I⟩²` at one pixel; 2 for thermal light.
    pub fn normalized_second_moment(&self, pixel: usize) -> f64 {
        let mean = self.mean_intensity(pixel);
        let second = (0..self.frames)
            .map(|r| (self.frame(r)[pixel] as f64).powi(2))
            .sum::<f64>()
            / self.frames as f64;
        second / (mean * mean)
    }

    /// Every intensity multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        FrameStack {
            intensities: self.intensities.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// Binary container: magic, version, JSON header length, JSON header,
    /// then `R·P` little-endian `f32` intensities.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&StackHeader {
            sources: self.sources,
            frames: self.frames,
            pixels: self.pixels(),
            seed: self.seed,
            delta_axis: self.delta_axis.clone(),
            bits: self.bits,
        })?;
        w.write_all(STACK_MAGIC)?;
        w.write_all(&STACK_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        let mut body = Vec::with_capacity(4 * self.intensities.len());
        for v in &self.intensities {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            what: "frame stack",
            detail: detail.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != STACK_MAGIC {
            return Err(bad("wrong magic bytes"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != STACK_VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: StackHeader = serde_json::from_slice(&header)?;
        if header.delta_axis.len() != header.pixels {
            return Err(bad("delta axis length differs from pixel count"));
        }
        let mut body = vec![0u8; 4 * header.frames * header.pixels];
        r.read_exact(&mut body)?;
        let intensities = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FrameStack::from_parts(
            intensities,
            header.frames,
            header.delta_axis,
            header.sources,
            header.seed,
            header.bits,
        )
    }
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draw `run.frames` independent speckle frames.
pub fn sample_frames(run: &SpeckleRun) -> Result<FrameStack> {
    run.validate()?;
    let delta_axis = run.pixels.points();
    let p = delta_axis.len();
    let alpha = run.geometry.phase_prefactors();
    let n = alpha.as_slice().len();
    // phasors[p * n + l] = exp(i α_l δ_p)
    let phasors: Vec<Complex64> = delta_axis
        .iter()
        .flat_map(|&d| {
            alpha
                .as_slice()
                .iter()
                .map(move |&a| Complex64::from_polar(1.0, a as f64 * d))
        })
        .collect();
    let envelope: Vec<f64> = match run.envelope_width {
        Some(w) => delta_axis.iter().map(|d| (-0.5 * (d / w).powi(2)).exp()).collect(),
        None => vec![1.0; p],
    };
    let scales: Vec<f64> = run.weights.iter().map(|w| (0.5 * w).sqrt()).collect();

    let mut intensities = vec![0f32; run.frames * p];
    intensities.par_chunks_mut(p).enumerate().for_each(|(r, row)| {
        let mut rng = frame_rng(run.seed, r as u64);
        let amps: Vec<Complex64> = scales
            .iter()
            .map(|&s| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex64::new(s * re, s * im)
            })
            .collect();
        for (q, out) in row.iter_mut().enumerate() {
            let field: Complex64 = phasors[q * n..(q + 1) * n]
                .iter()
                .zip(&amps)
                .map(|(ph, a)| ph * a)
                .sum();
            *out = (field.norm_sqr() * envelope[q]) as f32;
        }
    });

    let stack = FrameStack::from_parts(intensities, run.frames, delta_axis, n, run.seed, None)?;
    match run.bits {
        Some(bits) => Ok(quantize(&stack, bits)?.0),
        None => Ok(stack),
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=16).contains(&bits) {
        return Err(Error::Dimension(format!("bit depth must be in 1..=16, got {bits}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizationReport {
    pub bits: u8,
    /// Multiplier mapping raw intensity to gray levels.
    pub scale: f64,
    /// Fraction of nonzero raw intensities that became gray level 0.
    pub zeroed_fraction: f64,
    /// Set when quantization destroys a large part of the signal.
    pub clipped: bool,
}

/// Linear scaling of the stack maximum to `2^bits − 1`, rounded to integers.
pub fn quantize(stack: &FrameStack, bits: u8) -> Result<(FrameStack, QuantizationReport)> {
    check_bits(bits)?;
    let full = ((1u32 << bits) - 1) as f64;
    let max = stack.intensities.iter().fold(0f32, |a, &b| a.max(b)) as f64;
    let scale = if max > 0.0 { full / max } else { 1.0 };
    let mut zeroed = 0usize;
    let mut nonzero = 0usize;
    let intensities = stack
        .intensities
        .iter()
        .map(|&v| {
            let q = (v as f64 * scale).round().min(full);
            if v > 0.0 {
                nonzero += 1;
                if q == 0.0 {
                    zeroed += 1;
                }
            }
            q as f32
        })
        .collect();
    let zeroed_fraction = if nonzero > 0 {
        zeroed as f64 / nonzero as f64
    } else {
        0.0
    };
    let report = QuantizationReport {
        bits,
        scale,
        zeroed_fraction,
        clipped: zeroed_fraction > 0.25,
    };
    Ok((
        FrameStack {
            intensities,
            bits: Some(bits),
            ..stack.clone()
        },
        report,
    ))
}

/// Pixels closest to the magic positions and the worst placement error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MagicPixels {
    pub indices: Vec<usize>,
    pub max_error: f64,
}

impl MagicPixels {
    /// Phases of the chosen pixels.
    pub fn deltas(&self, axis: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| axis[i]).collect()
    }
}

pub fn nearest_magic_pixels(axis: &[f64], m: usize) -> Result<MagicPixels> {
    let targets = magic_positions(m)?;
    if axis.len() < 2 {
        return Err(Error::Dimension("pixel axis needs at least two points".into()));
    }
    let half_pitch = 0.5 * (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64;
    let lo = axis[0] - half_pitch;
    let hi = axis[axis.len() - 1] + half_pitch;
    let mut indices = Vec::with_capacity(targets.len());
    let mut max_error = 0.0f64;
    for t in targets {
        if t < lo - 1e-12 || t > hi + 1e-12 {
            return Err(Error::Coverage { position: t });
        }
        let (idx, err) = axis
            .iter()
            .enumerate()
            .map(|(i, &d)| (i, (d - t).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("non-empty axis");
        indices.push(idx);
        max_error = max_error.max(err);
    }
    Ok(MagicPixels { indices, max_error })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    /// Bootstrap resamples; 0 disables error bars.
    pub bootstrap: usize,
    /// Frames are grouped into this many contiguous blocks for resampling.
    pub blocks: usize,
    pub seed: u64,
    /// Average every frame over all cyclic translations of the detector
    /// configuration. `g^(m)` depends on phase differences only, so this
    /// estimates the same quantity with far less noise. Ignored unless the
    /// pixel axis is the uniform grid `2πp/P` over one full period.
    #[serde(default = "enabled")]
    pub shift_average: bool,
}

fn enabled() -> bool {
    true
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            bootstrap: 200,
            blocks: 200,
            seed: 0,
            shift_average: true,
        }
    }
}

/// Whether `axis` is `2πp/P`, `p = 0..P`.
pub fn is_periodic_axis(axis: &[f64]) -> bool {
    let p = axis.len();
    p >= 2
        && axis
            .iter()
            .enumerate()
            .all(|(i, &d)| (d - std::f64::consts::TAU * i as f64 / p as f64).abs() < 1e-9)
}

/// Per-block sums needed for the normalized correlation ratio.
struct BlockSums {
    count: usize,
    joint: Vec<f64>,
    moving: Vec<f64>,
    fixed: Vec<f64>,
}

fn block_sums(stack: &FrameStack, fixed: &[usize], range: std::ops::Range<usize>, shift_average: bool) -> BlockSums {
    if shift_average {
        return shifted_block_sums(stack, fixed, range);
    }
    let p = stack.pixels();
    let mut sums = BlockSums {
        count: range.len(),
        joint: vec![0.0; p],
        moving: vec![0.0; p],
        fixed: vec![0.0; fixed.len()],
    };
    for r in range {
        let row = stack.frame(r);
        let mut product = 1.0f64;
        for (j, &q) in fixed.iter().enumerate() {
            let v = row[q] as f64;
            sums.fixed[j] += v;
            product *= v;
        }
        for ((joint, moving), &v) in sums.joint.iter_mut().zip(sums.moving.iter_mut()).zip(row) {
            let v = v as f64;
            *joint += v * product;
            *moving += v;
        }
    }
    sums
}

/// Block sums with each frame averaged over all `P` cyclic translations:
/// `joint[i] = (1/P) Σ_s I(i+s) Π_j I(q_j+s)`, means replaced by the
/// frame's spatial mean.
fn shifted_block_sums(stack: &FrameStack, fixed: &[usize], range: std::ops::Range<usize>) -> BlockSums {
    let p = stack.pixels();
    let mut sums = BlockSums {
        count: range.len(),
        joint: vec![0.0; p],
        moving: vec![0.0; p],
        fixed: vec![0.0; fixed.len()],
    };
    let mut row = vec![0.0f64; 2 * p];
    let mut product = vec![0.0f64; p];
    for r in range {
        for (i, &v) in stack.frame(r).iter().enumerate() {
            row[i] = v as f64;
            row[i + p] = v as f64;
        }
        let mean = row[..p].iter().sum::<f64>() / p as f64;
        for (s, out) in product.iter_mut().enumerate() {
            *out = fixed.iter().map(|&q| row[q + s]).product::<f64>() / p as f64;
        }
        for (i, joint) in sums.joint.iter_mut().enumerate() {
            *joint += row[i..i + p].iter().zip(&product).map(|(a, b)| a * b).sum::<f64>();
        }
        sums.moving.iter_mut().for_each(|m| *m += mean);
        sums.fixed.iter_mut().for_each(|f| *f += mean);
    }
    sums
}

fn ratio(count: f64, joint: &[f64], moving: &[f64], fixed: &[f64]) -> std::result::Result<Vec<f64>, usize> {
    let fixed_mean: f64 = fixed.iter().map(|s| s / count).product();
    joint
        .iter()
        .zip(moving)
        .enumerate()
        .map(|(p, (&j, &mv))| {
            let den = (mv / count) * fixed_mean;
            if den > 0.0 {
                Ok((j / count) / den)
            } else {
                Err(p)
            }
        })
        .collect()
}

fn check_fixed(stack: &FrameStack, fixed: &[usize]) -> Result<()> {
    if let Some(&bad) = fixed.iter().find(|&&q| q >= stack.pixels()) {
        return Err(Error::Dimension(format!(
            "fixed pixel {bad} outside {} pixels",
            stack.pixels()
        )));
    }
    Ok(())
}

fn degenerate(stack: &FrameStack, fixed: &[usize], moving: usize) -> Error {
    let pixel = fixed
        .iter()
        .copied()
        .find(|&q| stack.mean_intensity(q) == 0.0)
        .unwrap_or(moving);
    Error::DegeneratePixel { pixel }
}

/// Point estimate of `g^(m)` for every pixel as the moving detector; works
/// for any frame count but carries no error bars.
pub fn correlate_frames(stack: &FrameStack, fixed: &[usize]) -> Result<CorrelationCurve> {
    check_fixed(stack, fixed)?;
    let sums = block_sums(stack, fixed, 0..stack.frames(), false);
    let values =
        ratio(sums.count as f64, &sums.joint, &sums.moving, &sums.fixed).map_err(|p| degenerate(stack, fixed, p))?;
    CorrelationCurve::new(fixed.len() + 1, stack.delta_axis().to_vec(), values)
}

/// `g^(m)` estimate with block-bootstrap standard errors and replicates.
pub fn estimate_g_m(stack: &FrameStack, fixed: &[usize], options: &EstimateOptions) -> Result<CorrelationCurve> {
    check_fixed(stack, fixed)?;
    let frames = stack.frames();
    if frames < 2 {
        return Err(Error::Degenerate(format!(
            "{frames} frame(s); at least two are needed for error bars"
        )));
    }
    let blocks = options.blocks.clamp(2, frames);
    let shift = options.shift_average && is_periodic_axis(stack.delta_axis());
    let bounds: Vec<usize> = (0..=blocks).map(|b| b * frames / blocks).collect();
    let sums: Vec<BlockSums> = (0..blocks)
        .into_par_iter()
        .map(|b| block_sums(stack, fixed, bounds[b]..bounds[b + 1], shift))
        .collect();

    let p = stack.pixels();
    let total = |picks: &mut dyn Iterator<Item = usize>| {
        let mut acc = BlockSums {
            count: 0,
            joint: vec![0.0; p],
            moving: vec![0.0; p],
            fixed: vec![0.0; fixed.len()],
        };
        for b in picks {
            let s = &sums[b];
            acc.count += s.count;
            acc.joint.iter_mut().zip(&s.joint).for_each(|(a, v)| *a += v);
            acc.moving.iter_mut().zip(&s.moving).for_each(|(a, v)| *a += v);
            acc.fixed.iter_mut().zip(&s.fixed).for_each(|(a, v)| *a += v);
        }
        acc
    };

    let all = total(&mut (0..blocks));
    let values =
        ratio(all.count as f64, &all.joint, &all.moving, &all.fixed).map_err(|q| degenerate(stack, fixed, q))?;
    let mut curve = CorrelationCurve::new(fixed.len() + 1, stack.delta_axis().to_vec(), values)?;
    if options.bootstrap == 0 {
        return Ok(curve);
    }

    let mut rng = frame_rng(options.seed, BOOTSTRAP_STREAM);
    let draws: Vec<Vec<usize>> = (0..options.bootstrap)
        .map(|_| (0..blocks).map(|_| rng.random_range(0..blocks)).collect())
        .collect();
    let replicates: Vec<Vec<f64>> = draws
        .par_iter()
        .map(|picks| {
            let s = total(&mut picks.iter().copied());
            // a resample can miss every bright frame of a dim pixel; fall
            // back to the full-sample value there
            ratio(s.count as f64, &s.joint, &s.moving, &s.fixed).unwrap_or_else(|_| curve.values.clone())
        })
        .collect();

    let n = replicates.len() as f64;
    let sigma = (0..p)
        .map(|q| {
            let mean = replicates.iter().map(|r| r[q]).sum::<f64>() / n;
            (replicates.iter().map(|r| (r[q] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        })
        .collect();
    curve.sigma = Some(sigma);
    curve.replicates = Some(replicates);
    Ok(curve)
}
