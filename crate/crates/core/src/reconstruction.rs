//! Source geometry reconstruction from tri-state frequency evidence.
//!
//! The search is a turnpike-style backtracking: the largest present distance
//! not yet produced by the placed sources must be realised by some pair, so
//! we branch over every admissible pair at that distance and prune any
//! placement that creates an absent distance. Once every present distance is
//! explained, all admissible supersets are solutions too (unknown distances
//! are unconstrained), so those are enumerated as cliques of mutually
//! compatible extra positions.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::correlation::predicted_spectrum;
use crate::error::{Error, Result};
use crate::geometry::SourceGeometry;
use crate::spectrum::{EvidenceTable, ModulationSpectrum, Status};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchBounds {
    pub max_sources: usize,
    pub max_span: u32,
    /// Also try spans whose status is unknown (beyond the largest present
    /// frequency, up to `max_span`).
    #[serde(default)]
    pub allow_unknown_span: bool,
}

impl Default for SearchBounds {
    fn default() -> Self {
        SearchBounds {
            max_sources: 8,
            max_span: 24,
            allow_unknown_span: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(flatten)]
    pub geometry: SourceGeometry,
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub chi2_by_order: BTreeMap<usize, f64>,
    /// Within one unit of χ² of the best candidate.
    #[serde(default)]
    pub joint_winner: bool,
}

impl Candidate {
    fn unscored(geometry: SourceGeometry) -> Self {
        Candidate {
            geometry,
            score: None,
            chi2_by_order: BTreeMap::new(),
            joint_winner: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
    pub evidence: EvidenceTable,
    /// False when a bound cut the search short.
    pub exhaustive: bool,
}

impl CandidateSet {
    pub fn geometries(&self) -> BTreeSet<Vec<u32>> {
        self.candidates.iter().map(|c| c.geometry.gaps().to_vec()).collect()
    }
}

struct Constraints<'a> {
    evidence: &'a EvidenceTable,
    present: BTreeSet<u32>,
}

impl Constraints<'_> {
    fn allowed(&self, d: u32) -> bool {
        self.evidence.status(d) != Status::Absent
    }

    fn compatible(&self, placed: &[u32], p: u32) -> bool {
        placed.iter().all(|&q| q != p && self.allowed(p.abs_diff(q)))
    }

    fn spans(&self, bounds: &SearchBounds) -> (Vec<u32>, bool) {
        let top = *self.present.iter().next_back().expect("non-empty present set");
        let mut truncated = false;
        let mut spans = Vec::new();
        let upper = if bounds.allow_unknown_span {
            bounds.max_span.max(top)
        } else {
            top
        };
        for s in top..=upper {
            let usable = match self.evidence.status(s) {
                Status::Present => true,
                Status::Unknown => bounds.allow_unknown_span,
                Status::Absent => false,
            };
            if !usable {
                continue;
            }
            if s > bounds.max_span {
                truncated = true;
            } else {
                spans.push(s);
            }
        }
        (spans, truncated)
    }

    fn geometry(points: &[u32]) -> SourceGeometry {
        SourceGeometry::from_positions(points)
            .expect("distinct positions")
            .canonical()
    }
}

struct Search<'a> {
    constraints: &'a Constraints<'a>,
    span: u32,
    max_sources: usize,
    solutions: BTreeSet<Vec<u32>>,
    truncated: bool,
}

impl Search<'_> {
    fn unexplained(&self, placed: &[u32]) -> Vec<u32> {
        let mut diffs = BTreeSet::new();
        for (i, &a) in placed.iter().enumerate() {
            for &b in &placed[i + 1..] {
                diffs.insert(a.abs_diff(b));
            }
        }
        self.constraints
            .present
            .iter()
            .copied()
            .filter(|f| *f <= self.span && !diffs.contains(f))
            .collect()
    }

    /// Placements of the pair `(a, a + d)` that keep every distance admissible.
    fn witnesses(&self, placed: &[u32], d: u32) -> Vec<(u32, u32)> {
        (0..=self.span - d)
            .filter_map(|a| {
                let b = a + d;
                let ok = |p: u32| placed.contains(&p) || self.constraints.compatible(placed, p);
                (ok(a) && ok(b) && !(placed.contains(&a) && placed.contains(&b))).then_some((a, b))
            })
            .collect()
    }

    fn record(&mut self, placed: &[u32]) {
        self.solutions.insert(Constraints::geometry(placed).gaps().to_vec());
    }

    fn descend(&mut self, placed: &mut Vec<u32>) {
        if placed.len() > self.max_sources {
            if !self.truncated && self.completable(placed) {
                self.truncated = true;
            }
            return;
        }
        let unexplained = self.unexplained(placed);
        let Some(&largest) = unexplained.last() else {
            let extras: Vec<u32> = (1..self.span)
                .filter(|&p| self.constraints.compatible(placed, p))
                .collect();
            self.extend(placed, &extras, 0);
            return;
        };
        // every unexplained distance must still have somewhere to go
        if unexplained.iter().any(|&d| self.witnesses(placed, d).is_empty()) {
            return;
        }
        for (a, b) in self.witnesses(placed, largest) {
            let saved = placed.clone();
            for p in [a, b] {
                if !placed.contains(&p) {
                    placed.push(p);
                }
            }
            placed.sort_unstable();
            self.descend(placed);
            *placed = saved;
        }
    }

    /// Whether some admissible superset of `placed` explains every present distance.
    fn completable(&self, placed: &mut Vec<u32>) -> bool {
        let unexplained = self.unexplained(placed);
        let Some(&largest) = unexplained.last() else {
            return true;
        };
        if unexplained.iter().any(|&d| self.witnesses(placed, d).is_empty()) {
            return false;
        }
        self.witnesses(placed, largest).into_iter().any(|(a, b)| {
            let saved = placed.clone();
            for p in [a, b] {
                if !placed.contains(&p) {
                    placed.push(p);
                }
            }
            placed.sort_unstable();
            let found = self.completable(placed);
            *placed = saved;
            found
        })
    }

    /// Record `placed` and every admissible superset built from `extras[from..]`.
    fn extend(&mut self, placed: &mut Vec<u32>, extras: &[u32], from: usize) {
        if placed.len() > self.max_sources {
            self.truncated = true;
            return;
        }
        self.record(placed);
        for i in from..extras.len() {
            let p = extras[i];
            if self.constraints.compatible(placed, p) {
                placed.push(p);
                placed.sort_unstable();
                self.extend(placed, extras, i + 1);
                placed.retain(|&q| q != p);
            }
        }
    }
}

/// All canonical geometries consistent with the evidence, within bounds.
pub fn search(evidence: &EvidenceTable, bounds: &SearchBounds) -> Result<CandidateSet> {
    let present = evidence.present();
    if present.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    let constraints = Constraints { evidence, present };
    let (spans, mut truncated) = constraints.spans(bounds);

    let results: Vec<(BTreeSet<Vec<u32>>, bool)> = spans
        .par_iter()
        .map(|&span| {
            let mut s = Search {
                constraints: &constraints,
                span,
                max_sources: bounds.max_sources,
                solutions: BTreeSet::new(),
                truncated: false,
            };
            if bounds.max_sources < 2 {
                s.truncated = true;
            } else {
                s.descend(&mut vec![0, span]);
            }
            (s.solutions, s.truncated)
        })
        .collect();

    let mut all = BTreeSet::new();
    for (sols, t) in results {
        all.extend(sols);
        truncated |= t;
    }
    Ok(CandidateSet {
        candidates: all
            .into_iter()
            .map(|x| Candidate::unscored(SourceGeometry::new(x).expect("valid gaps")))
            .collect(),
        evidence: evidence.clone(),
        exhaustive: !truncated,
    })
}

/// Largest span the exhaustive oracle accepts.
pub const ORACLE_MAX_SPAN: u32 = 12;

/// Exhaustive enumeration of every position subset, without pruning.
pub fn oracle_search(evidence: &EvidenceTable, bounds: &SearchBounds) -> Result<CandidateSet> {
    let present = evidence.present();
    if present.is_empty() {
        return Err(Error::EmptyEvidence);
    }
    let constraints = Constraints { evidence, present };
    let (spans, mut truncated) = constraints.spans(bounds);
    if let Some(&s) = spans.iter().find(|&&s| s > ORACLE_MAX_SPAN) {
        return Err(Error::Bounds(format!(
            "oracle enumerates spans up to {ORACLE_MAX_SPAN}, asked for {s}"
        )));
    }

    let mut found = BTreeSet::new();
    for span in spans {
        let interior = span.saturating_sub(1);
        for mask in 0u32..(1u32 << interior) {
            let mut points = vec![0];
            points.extend((1..span).filter(|p| mask & (1 << (p - 1)) != 0));
            points.push(span);
            let mut diffs = BTreeSet::new();
            for (i, &a) in points.iter().enumerate() {
                for &b in &points[i + 1..] {
                    diffs.insert(b - a);
                }
            }
            let consistent =
                constraints.present.iter().all(|f| diffs.contains(f)) && diffs.iter().all(|&d| constraints.allowed(d));
            if !consistent {
                continue;
            }
            if points.len() > bounds.max_sources {
                truncated = true;
                continue;
            }
            found.insert(Constraints::geometry(&points).gaps().to_vec());
        }
    }
    Ok(CandidateSet {
        candidates: found
            .into_iter()
            .map(|x| Candidate::unscored(SourceGeometry::new(x).expect("valid gaps")))
            .collect(),
        evidence: evidence.clone(),
        exhaustive: !truncated,
    })
}

/// Rank candidates by χ² between measured and predicted relative
/// amplitudes `A_κ / A_0`.
pub fn disambiguate(candidates: &CandidateSet, measured: &[ModulationSpectrum]) -> Result<CandidateSet> {
    if candidates.candidates.is_empty() {
        return Err(Error::Degenerate("no candidates to rank".into()));
    }
    // (order, f, relative amplitude, its standard error)
    let mut observations = Vec::new();
    for s in measured {
        if !(s.a0.abs() > 0.0) {
            continue;
        }
        for h in &s.harmonics {
            let rel = h.amplitude / s.a0;
            let sigma = ((h.sigma_amplitude / s.a0).powi(2) + (rel * s.sigma_a0 / s.a0).powi(2)).sqrt();
            observations.push((s.order, h.f.round() as u32, rel, sigma));
        }
    }
    if observations.is_empty() || observations.iter().all(|o| !(o.3 > 0.0)) {
        return Err(Error::Degenerate(
            "measured amplitudes carry no uncertainty to weight the comparison".into(),
        ));
    }
    let orders: BTreeSet<usize> = observations.iter().map(|o| o.0).collect();

    let mut scored = candidates
        .candidates
        .par_iter()
        .map(|c| {
            let samples = (4 * (c.geometry.span() as usize + 1)).max(64);
            let mut chi2_by_order = BTreeMap::new();
            for &m in &orders {
                let pred = predicted_spectrum(&c.geometry, m, samples, None)?.spectrum;
                let chi2: f64 = observations
                    .iter()
                    .filter(|o| o.0 == m && o.3 > 0.0)
                    .map(|&(_, f, rel, sigma)| {
                        let expected = pred.harmonic_at(f).map(|h| h.amplitude / pred.a0).unwrap_or(0.0);
                        ((rel - expected) / sigma).powi(2)
                    })
                    .sum();
                chi2_by_order.insert(m, chi2);
            }
            Ok(Candidate {
                geometry: c.geometry.clone(),
                score: Some(chi2_by_order.values().sum()),
                chi2_by_order,
                joint_winner: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    scored.sort_by(|a, b| {
        a.score
            .unwrap()
            .total_cmp(&b.score.unwrap())
            .then_with(|| a.geometry.gaps().cmp(b.geometry.gaps()))
    });
    let best = scored[0].score.unwrap();
    for c in &mut scored {
        c.joint_winner = c.score.unwrap() <= best + 1.0;
    }
    Ok(CandidateSet {
        candidates: scored,
        evidence: candidates.evidence.clone(),
        exhaustive: candidates.exhaustive,
    })
}

/// Angular ranges needed by the imaging protocol, relative to the Abbe
/// range `Δδ = 2π`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApertureReport {
    pub m: usize,
    /// Moving detector alone.
    pub r_moving: f64,
    /// All detectors, fixed ones included.
    pub r_total: f64,
    /// Underlying `Δδ` ranges: moving window, fixed detectors, all detectors.
    pub delta_spans: DeltaSpans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaSpans {
    pub moving: f64,
    pub fixed: f64,
    pub total: f64,
}

pub fn aperture_report(m: usize) -> Result<ApertureReport> {
    if m < 2 {
        return Err(Error::Order { got: m, min: 2 });
    }
    let moving = TAU / (m - 1) as f64;
    let fixed = TAU * (m - 2) as f64 / (m - 1) as f64;
    // the moving window fits between two neighbouring fixed detectors
    let total = moving.max(fixed);
    Ok(ApertureReport {
        m,
        r_moving: 1.0 / (m - 1) as f64,
        r_total: total / TAU,
        delta_spans: DeltaSpans { moving, fixed, total },
    })
}

/// Abbe limit `d_min = λ / (2A)`.
pub fn abbe_min_distance(wavelength: f64, aperture: f64) -> f64 {
    wavelength / (2.0 * aperture)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(xs: &[&[u32]]) -> BTreeSet<Vec<u32>> {
        xs.iter().map(|x| x.to_vec()).collect()
    }

    #[test]
    fn unique_reconstruction() {
        let ev = EvidenceTable::from_sets(&[3, 4, 5, 8], &[2, 6, 7]);
        let cs = search(&ev, &SearchBounds::default()).unwrap();
        assert_eq!(cs.geometries(), set(&[&[3, 1, 4]]));
        assert!(cs.exhaustive);
    }

    #[test]
    fn ambiguous_reconstruction() {
        let ev = EvidenceTable::from_sets(&[3, 4, 5, 8, 9], &[2, 6, 7]);
        let cs = search(&ev, &SearchBounds::default()).unwrap();
        assert_eq!(cs.geometries(), set(&[&[1, 3, 5], &[1, 3, 1, 4]]));
    }

    #[test]
    fn two_sources() {
        let ev = EvidenceTable::from_sets(&[1], &[]);
        assert_eq!(
            search(&ev, &SearchBounds::default()).unwrap().geometries(),
            set(&[&[1]])
        );
        let ev = EvidenceTable::from_sets(&[2], &[1]);
        assert_eq!(
            search(&ev, &SearchBounds::default()).unwrap().geometries(),
            set(&[&[2]])
        );
        assert_eq!(
            oracle_search(
                &ev,
                &SearchBounds {
                    max_sources: 6,
                    ..Default::default()
                }
            )
            .unwrap()
            .geometries(),
            set(&[&[2]])
        );
    }

    #[test]
    fn empty_evidence() {
        let ev = EvidenceTable::from_sets(&[], &[1, 2]);
        assert!(matches!(
            search(&ev, &SearchBounds::default()),
            Err(Error::EmptyEvidence)
        ));
        let bounds = SearchBounds {
            max_sources: 6,
            ..Default::default()
        };
        assert!(matches!(oracle_search(&ev, &bounds), Err(Error::EmptyEvidence)));
    }

    #[test]
    fn truncation_is_reported() {
        // span 6 with no absent distances admits up to seven sources
        let ev = EvidenceTable::from_sets(&[6], &[]);
        let cs = search(
            &ev,
            &SearchBounds {
                max_sources: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(!cs.exhaustive);
        assert!(cs.candidates.iter().all(|c| c.geometry.source_count() <= 3));
        let full = search(&ev, &SearchBounds::default()).unwrap();
        assert!(full.exhaustive);
        assert!(full.geometries().contains(&vec![1, 1, 1, 1, 1, 1]));
    }

    #[test]
    fn oracle_bounds() {
        let ev = EvidenceTable::from_sets(&[13], &[]);
        assert!(matches!(
            oracle_search(&ev, &SearchBounds::default()),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn search_matches_oracle_on_small_tables() {
        let bounds = SearchBounds {
            max_sources: 6,
            ..Default::default()
        };
        for present_mask in 1u32..(1 << 7) {
            let present: Vec<u32> = (1..=7).filter(|f| present_mask & (1 << (f - 1)) != 0).collect();
            let top = *present.last().unwrap();
            for absent_mask in 0u32..(1 << top) {
                let absent: Vec<u32> = (1..top)
                    .filter(|f| absent_mask & (1 << (f - 1)) != 0 && !present.contains(f))
                    .collect();
                if absent_mask % 5 != 0 {
                    continue;
                }
                let ev = EvidenceTable::from_sets(&present, &absent);
                let a = search(&ev, &bounds).unwrap();
                let b = oracle_search(&ev, &bounds).unwrap();
                assert_eq!(a.geometries(), b.geometries(), "present {present:?} absent {absent:?}");
            }
        }
    }

    #[test]
    fn unknown_spans() {
        // orders {3}: odd spans are invisible
        let ev = EvidenceTable::from_sets(&[2, 4], &[]);
        let strict = search(&ev, &SearchBounds::default()).unwrap();
        assert!(strict.candidates.iter().all(|c| c.geometry.span() == 4));
        let loose = search(
            &ev,
            &SearchBounds {
                max_span: 6,
                allow_unknown_span: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(loose.candidates.iter().any(|c| c.geometry.span() == 5));
    }

    fn measured(x: &[u32], m: usize, noise: f64) -> ModulationSpectrum {
        let mut s = predicted_spectrum(&SourceGeometry::new(x.to_vec()).unwrap(), m, 64, None)
            .unwrap()
            .spectrum;
        for h in &mut s.harmonics {
            h.sigma_amplitude = noise * h.amplitude.max(1e-3);
        }
        s.sigma_a0 = noise * s.a0;
        s
    }

    #[test]
    fn disambiguation_prefers_truth() {
        let ev = EvidenceTable::from_sets(&[3, 4, 5, 8, 9], &[2, 6, 7]);
        let cs = search(&ev, &SearchBounds::default()).unwrap();
        for truth in [&[1u32, 3, 1, 4][..], &[1, 3, 5]] {
            let ranked = disambiguate(&cs, &[measured(truth, 5, 0.05)]).unwrap();
            assert_eq!(ranked.candidates[0].geometry.gaps(), truth);
            assert!(ranked.candidates[0].joint_winner);
            assert!(!ranked.candidates[1].joint_winner);
        }
    }

    #[test]
    fn disambiguation_is_scale_invariant() {
        let ev = EvidenceTable::from_sets(&[3, 4, 5, 8, 9], &[2, 6, 7]);
        let cs = search(&ev, &SearchBounds::default()).unwrap();
        let base = measured(&[1, 3, 1, 4], 5, 0.05);
        let mut scaled = base.clone();
        scaled.a0 *= 7.5;
        scaled.sigma_a0 *= 7.5;
        for h in &mut scaled.harmonics {
            h.amplitude *= 7.5;
            h.sigma_amplitude *= 7.5;
        }
        let a = disambiguate(&cs, &[base]).unwrap();
        let b = disambiguate(&cs, &[scaled]).unwrap();
        for (x, y) in a.candidates.iter().zip(&b.candidates) {
            assert_eq!(x.geometry, y.geometry);
            assert!((x.score.unwrap() - y.score.unwrap()).abs() < 1e-9 * x.score.unwrap().max(1.0));
        }
    }

    #[test]
    fn disambiguation_edge_cases() {
        let ev = EvidenceTable::from_sets(&[3, 4, 5, 8], &[2, 6, 7]);
        let cs = search(&ev, &SearchBounds::default()).unwrap();
        let ranked = disambiguate(&cs, &[measured(&[3, 1, 4], 5, 0.05)]).unwrap();
        assert_eq!(ranked.candidates.len(), 1);
        assert!(ranked.candidates[0].score.is_some());
        assert!(matches!(
            disambiguate(&cs, &[measured(&[3, 1, 4], 5, 0.0)]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn apertures() {
        let r = aperture_report(3).unwrap();
        assert_eq!(r.r_moving, 0.5);
        assert_eq!(r.r_total, 0.5);
        assert_eq!(aperture_report(5).unwrap().r_moving, 0.25);
        let r = aperture_report(2).unwrap();
        assert_eq!((r.r_moving, r.r_total), (1.0, 1.0));
        let mut prev = 0.0;
        for m in 3..=20 {
            let r = aperture_report(m).unwrap();
            assert_eq!(r.r_moving * (m - 1) as f64, 1.0);
            assert!(r.r_total < 1.0 && r.r_total >= prev);
            assert!((r.r_total - (m - 2) as f64 / (m - 1) as f64).abs() < 1e-15 || m == 3);
            prev = r.r_total;
        }
        assert!(aperture_report(1).is_err());
        assert!((abbe_min_distance(632.8e-9, 0.5) - 632.8e-9).abs() < 1e-20);
    }
}
