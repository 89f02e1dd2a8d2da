use std::collections::BTreeSet;

use proptest::prelude::*;

use superres_core::correlation::{g_m_analytic, surviving_frequencies, DetectorArray, ScanGrid};
use superres_core::reconstruction::{oracle_search, search, SearchBounds};
use superres_core::speckle::{
    estimate_g_m, nearest_magic_pixels, sample_frames, EstimateOptions, FrameStack, SpeckleRun,
};
use superres_core::spectrum::{fit_free, gate, EvidenceTable, FitOptions, GatePolicy};
use superres_core::SourceGeometry;

fn gaps(max_sources: usize, max_gap: u32) -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(1..=max_gap, 1..max_sources)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_fit_recovers_surviving_frequencies(x in gaps(4, 4), m in 3usize..=6) {
        let g = SourceGeometry::new(x).unwrap();
        let detectors = DetectorArray::magic(m, ScanGrid::periodic(96)).unwrap();
        let curve = g_m_analytic(&g, &detectors, None).unwrap();
        let fit = fit_free(&curve, m, 8, &FitOptions::default()).unwrap();
        let gated = gate(&fit, &GatePolicy::default());
        let expected: BTreeSet<u32> = surviving_frequencies(&g, m).unwrap().iter().collect();
        prop_assert_eq!(gated.frequencies(), expected);
    }

    #[test]
    fn reflection_keeps_the_correlation_curve(x in gaps(5, 4), m in 2usize..=5) {
        let g = SourceGeometry::new(x).unwrap();
        let detectors = DetectorArray::magic(m, ScanGrid::periodic(32)).unwrap();
        let a = g_m_analytic(&g, &detectors, None).unwrap();
        let b = g_m_analytic(&g.reflect(), &detectors, None).unwrap();
        // reflection maps δ to −δ
        let n = a.values.len();
        for i in 0..n {
            prop_assert!((a.values[i] - b.values[(n - i) % n]).abs() < 1e-9);
        }
    }

    #[test]
    fn search_matches_oracle_on_random_tables(
        present in prop::collection::btree_set(1u32..=9, 1..5),
        absent in prop::collection::btree_set(1u32..=9, 0..5),
        max_sources in 2usize..=6,
    ) {
        let absent: Vec<u32> = absent.difference(&present).copied().collect();
        let present: Vec<u32> = present.into_iter().collect();
        let ev = EvidenceTable::from_sets(&present, &absent);
        let bounds = SearchBounds { max_sources, ..Default::default() };
        let a = search(&ev, &bounds).unwrap();
        let b = oracle_search(&ev, &bounds).unwrap();
        prop_assert_eq!(a.geometries(), b.geometries());
        prop_assert_eq!(a.exhaustive, b.exhaustive);
        for c in &a.candidates {
            let f = c.geometry.distinct_frequencies().unwrap();
            prop_assert!(present.iter().all(|&p| f.contains(p)));
            prop_assert!(absent.iter().all(|&q| !f.contains(q)));
        }
    }

    #[test]
    fn frame_stack_roundtrips(x in gaps(4, 3), frames in 1usize..6, seed in any::<u64>()) {
        let run = SpeckleRun::new(SourceGeometry::new(x).unwrap(), frames, seed, ScanGrid::periodic(16));
        let stack = sample_frames(&run).unwrap();
        let mut bytes = Vec::new();
        stack.write_to(&mut bytes).unwrap();
        let back = FrameStack::read_from(bytes.as_slice()).unwrap();
        prop_assert_eq!(back.intensities(), stack.intensities());
        prop_assert_eq!(back.seed(), seed);
    }
}

#[test]
fn translation_averaging_is_unbiased_and_tighter() {
    let g = SourceGeometry::new(vec![1, 3]).unwrap();
    let stack = sample_frames(&SpeckleRun::new(g.clone(), 4000, 8, ScanGrid::periodic(48))).unwrap();
    let magic = nearest_magic_pixels(stack.delta_axis(), 3).unwrap();
    let detectors = DetectorArray::magic(3, ScanGrid::periodic(48)).unwrap();
    let exact = g_m_analytic(&g, &detectors, None).unwrap();
    let mean_sigma = |shift: bool| {
        let options = EstimateOptions {
            shift_average: shift,
            seed: 8,
            ..Default::default()
        };
        let c = estimate_g_m(&stack, &magic.indices, &options).unwrap();
        let sigma = c.sigma.unwrap();
        let within = c
            .values
            .iter()
            .zip(&exact.values)
            .zip(&sigma)
            .filter(|((e, a), s)| (*e - *a).abs() <= 3.0 * *s)
            .count();
        assert!(within as f64 >= 0.9 * c.values.len() as f64, "shift={shift}: {within}");
        sigma.iter().sum::<f64>() / sigma.len() as f64
    };
    let plain = mean_sigma(false);
    let averaged = mean_sigma(true);
    assert!(averaged < 0.5 * plain, "averaged {averaged} vs plain {plain}");
}

#[test]
fn same_seed_same_frames() {
    let g = SourceGeometry::new(vec![2, 1]).unwrap();
    let run = SpeckleRun::new(g, 50, 99, ScanGrid::periodic(24));
    assert_eq!(
        sample_frames(&run).unwrap().intensities(),
        sample_frames(&run).unwrap().intensities()
    );
}
