//! Integer-grid source geometries and their spatial-frequency algebra.
//!
//! A geometry is a list of adjacent gaps `x_l` in units of the lattice
//! constant. Source positions are the prefix sums of the gaps (the phase
//! prefactors), and the spatial frequencies are the pairwise position
//! differences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lattice constant of the experimental fibre grid, in meters.
pub const DEFAULT_LATTICE_CONSTANT: f64 = 570e-6;

/// One-dimensional arrangement of point sources on a regular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGeometry", into = "RawGeometry")]
pub struct SourceGeometry {
    lattice_constant: f64,
    gaps: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RawGeometry {
    x: Vec<u32>,
    d: f64,
}

impl TryFrom<RawGeometry> for SourceGeometry {
    type Error = Error;

    fn try_from(raw: RawGeometry) -> Result<Self> {
        SourceGeometry::with_lattice_constant(raw.x, raw.d)
    }
}

impl From<SourceGeometry> for RawGeometry {
    fn from(g: SourceGeometry) -> Self {
        RawGeometry {
            x: g.gaps,
            d: g.lattice_constant,
        }
    }
}

impl SourceGeometry {
    /// Geometry with the default lattice constant.
    pub fn new(gaps: impl Into<Vec<u32>>) -> Result<Self> {
        Self::with_lattice_constant(gaps, DEFAULT_LATTICE_CONSTANT)
    }

    pub fn with_lattice_constant(gaps: impl Into<Vec<u32>>, d: f64) -> Result<Self> {
        let gaps = gaps.into();
        if let Some(pos) = gaps.iter().position(|&x| x == 0) {
            return Err(Error::InvalidGeometry(format!(
                "gap {} is zero; every gap must be a positive integer",
                pos + 1
            )));
        }
        if !(d.is_finite() && d > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "lattice constant must be positive, got {d}"
            )));
        }
        Ok(SourceGeometry {
            lattice_constant: d,
            gaps,
        })
    }

    /// Geometry from absolute grid positions (any order, duplicates rejected).
    pub fn from_positions(positions: &[u32]) -> Result<Self> {
        let mut sorted = positions.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidGeometry("duplicate source position".into()));
        }
        if sorted.is_empty() {
            return Err(Error::InvalidGeometry("no sources".into()));
        }
        Self::new(sorted.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>())
    }

    /// Single source.
    pub fn single() -> Self {
        SourceGeometry {
            lattice_constant: DEFAULT_LATTICE_CONSTANT,
            gaps: Vec::new(),
        }
    }

    /// Regular array of `n` sources with unit spacing.
    pub fn regular(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGeometry("no sources".into()));
        }
        Self::new(vec![1; n - 1])
    }

    pub fn gaps(&self) -> &[u32] {
        &self.gaps
    }

    pub fn lattice_constant(&self) -> f64 {
        self.lattice_constant
    }

    pub fn source_count(&self) -> usize {
        self.gaps.len() + 1
    }

    /// Total extent in lattice units, equal to the largest phase prefactor.
    pub fn span(&self) -> u32 {
        self.gaps.iter().sum()
    }

    pub fn phase_prefactors(&self) -> PhasePrefactors {
        let mut alpha = Vec::with_capacity(self.source_count());
        let mut acc = 0;
        alpha.push(acc);
        for &x in &self.gaps {
            acc += x;
            alpha.push(acc);
        }
        PhasePrefactors(alpha)
    }

    /// Multiset of all pairwise source distances.
    pub fn pair_distances(&self) -> Result<FrequencyMultiset> {
        if self.source_count() < 2 {
            return Err(Error::EmptyGeometry(self.source_count()));
        }
        let alpha = self.phase_prefactors();
        let mut counts = BTreeMap::new();
        for (i, &a) in alpha.0.iter().enumerate() {
            for &b in &alpha.0[i + 1..] {
                *counts.entry(b - a).or_insert(0) += 1;
            }
        }
        Ok(FrequencyMultiset(counts))
    }

    pub fn distinct_frequencies(&self) -> Result<FrequencySet> {
        Ok(self.pair_distances()?.distinct())
    }

    /// Mirror image: gaps reversed.
    pub fn reflect(&self) -> Self {
        let mut gaps = self.gaps.clone();
        gaps.reverse();
        SourceGeometry {
            lattice_constant: self.lattice_constant,
            gaps,
        }
    }

    /// Lexicographically smaller of the geometry and its mirror image.
    pub fn canonical(&self) -> Self {
        let reflected = self.reflect();
        if reflected.gaps < self.gaps {
            reflected
        } else {
            self.clone()
        }
    }
}

impl fmt::Display for SourceGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, x) in self.gaps.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, ")")
    }
}

/// Grid positions of the sources, `alpha_1 = 0`, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePrefactors(Vec<u32>);

impl PhasePrefactors {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }
}

/// Pairwise distances with multiplicity.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyMultiset(BTreeMap<u32, usize>);

impl FrequencyMultiset {
    pub fn counts(&self) -> &BTreeMap<u32, usize> {
        &self.0
    }

    pub fn multiplicity(&self, f: u32) -> usize {
        self.0.get(&f).copied().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.0.values().sum()
    }

    pub fn distinct(&self) -> FrequencySet {
        FrequencySet(self.0.keys().copied().collect())
    }
}

/// Sorted set of distinct spatial frequencies.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FrequencySet(BTreeSet<u32>);

impl FrequencySet {
    pub fn new(freqs: impl IntoIterator<Item = u32>) -> Self {
        FrequencySet(freqs.into_iter().collect())
    }

    pub fn contains(&self, f: u32) -> bool {
        self.0.contains(&f)
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn largest(&self) -> Option<u32> {
        self.0.last().copied()
    }

    pub fn as_set(&self) -> &BTreeSet<u32> {
        &self.0
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.0.iter().copied().collect()
    }
}

impl FromIterator<u32> for FrequencySet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        FrequencySet(iter.into_iter().collect())
    }
}

impl fmt::Display for FrequencySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{x}")?;
        }
        write!(f, "}}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(x: &[u32]) -> SourceGeometry {
        SourceGeometry::new(x.to_vec()).unwrap()
    }

    #[test]
    fn prefactors() {
        assert_eq!(g(&[3, 1, 4]).phase_prefactors().as_slice(), &[0, 3, 4, 8]);
        assert_eq!(g(&[]).phase_prefactors().as_slice(), &[0]);
        assert_eq!(g(&[1, 3, 1, 4]).phase_prefactors().as_slice(), &[0, 1, 4, 5, 9]);
    }

    #[test]
    fn pair_distances_by_enumeration() {
        // positions 0,3,4,8: 3,4,8,1,5,4
        let d = g(&[3, 1, 4]).pair_distances().unwrap();
        let expected: BTreeMap<u32, usize> = [(1, 1), (3, 1), (4, 2), (5, 1), (8, 1)].into();
        assert_eq!(d.counts(), &expected);
        assert_eq!(g(&[1]).pair_distances().unwrap().counts(), &BTreeMap::from([(1, 1)]));
        let d = g(&[1, 3, 2]).pair_distances().unwrap();
        assert_eq!(d.counts(), &(1..=6).map(|f| (f, 1)).collect::<BTreeMap<_, _>>());
    }

    #[test]
    fn single_source_has_no_distances() {
        assert!(matches!(
            SourceGeometry::single().pair_distances(),
            Err(Error::EmptyGeometry(1))
        ));
    }

    #[test]
    fn distinct_sets() {
        assert_eq!(g(&[3, 1, 4]).distinct_frequencies().unwrap().to_vec(), [1, 3, 4, 5, 8]);
        assert_eq!(
            g(&[1, 3, 5]).distinct_frequencies().unwrap().to_vec(),
            [1, 3, 4, 5, 8, 9]
        );
        assert_eq!(g(&[2, 1, 3]).distinct_frequencies().unwrap().to_vec(), [1, 2, 3, 4, 6]);
    }

    #[test]
    fn reflection_and_canonical_form() {
        assert_eq!(g(&[3, 1, 4]).reflect().gaps(), &[4, 1, 3]);
        assert_eq!(g(&[1]).reflect().gaps(), &[1]);
        assert_eq!(
            g(&[1, 3, 2]).reflect().distinct_frequencies().unwrap(),
            g(&[1, 3, 2]).distinct_frequencies().unwrap()
        );
        assert_eq!(g(&[4, 1, 3]).canonical().gaps(), &[3, 1, 4]);
        assert_eq!(g(&[1, 3, 1, 4]).canonical().gaps(), &[1, 3, 1, 4]);
    }

    #[test]
    fn rejects_zero_gap() {
        assert!(SourceGeometry::new(vec![1, 0, 2]).is_err());
        assert!(SourceGeometry::with_lattice_constant(vec![1], -1.0).is_err());
    }

    #[test]
    fn positions_roundtrip() {
        let geom = SourceGeometry::from_positions(&[9, 0, 5, 1, 4]).unwrap();
        assert_eq!(geom.gaps(), &[1, 3, 1, 4]);
        assert!(SourceGeometry::from_positions(&[0, 2, 2]).is_err());
    }

    #[test]
    fn serde_literal() {
        let geom: SourceGeometry = serde_json::from_str(r#"{"x":[3,1,4],"d":0.00057}"#).unwrap();
        assert_eq!(geom.gaps(), &[3, 1, 4]);
        assert!(serde_json::from_str::<SourceGeometry>(r#"{"x":[0],"d":1.0}"#).is_err());
    }

    fn small_geometry() -> impl Strategy<Value = SourceGeometry> {
        prop::collection::vec(1u32..=5, 0..=5).prop_map(|x| SourceGeometry::new(x).unwrap())
    }

    proptest! {
        #[test]
        fn multiplicity_is_pair_count(geom in small_geometry()) {
            let n = geom.source_count();
            prop_assume!(n >= 2);
            let d = geom.pair_distances().unwrap();
            prop_assert_eq!(d.total(), n * (n - 1) / 2);
            prop_assert_eq!(d.counts().keys().max().copied(), Some(geom.span()));
        }

        #[test]
        fn reflection_preserves_distances(geom in small_geometry()) {
            prop_assume!(geom.source_count() >= 2);
            prop_assert_eq!(geom.pair_distances().unwrap(), geom.reflect().pair_distances().unwrap());
        }

        #[test]
        fn frequencies_within_span(geom in small_geometry()) {
            prop_assume!(geom.source_count() >= 2);
            let f = geom.distinct_frequencies().unwrap();
            prop_assert_eq!(f.largest(), Some(geom.span()));
            prop_assert!(f.iter().all(|v| (1..=geom.span()).contains(&v)));
        }

        #[test]
        fn canonical_idempotent(geom in small_geometry()) {
            let c = geom.canonical();
            prop_assert_eq!(c.canonical(), c.clone());
            prop_assert!(c.gaps() <= geom.gaps() && c.gaps() <= geom.reflect().gaps());
        }
    }
}
