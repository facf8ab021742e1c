//! Property tests for the data and protocol invariants.

use proptest::prelude::*;

use indexmap::IndexMap;
use refml_core::autodiff::{Graph, NodeId, Tensor};
use refml_core::data::{format_csv, ingest_csv, sample_episode, ClientDataset, LabeledWindow};
use refml_core::fedproto::{adaptive_interpolate_with, aggregate, InterpolationWeights};
use refml_core::model::ParamSet;
use refml_core::Result as CoreResult;

fn dataset(n: usize, per_class: usize) -> ClientDataset {
    let windows = (0..n * per_class)
        .map(|i| LabeledWindow {
            // signal[0] doubles as a unique identity for disjointness checks
            signal: vec![i as f64, 0.5, -0.5, 1.0],
            label: i % n,
            condition_id: 0,
        })
        .collect();
    ClientDataset { windows, condition_id: 0 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn episode_sampler_invariants(
        n in 2usize..=5,
        k in 1usize..=5,
        q in 1usize..=10,
        extra in 0usize..20,
        seed in any::<u64>(),
    ) {
        let ds = dataset(n, k + q + extra);
        let ep = sample_episode(&ds, n, k, q, seed).unwrap();

        prop_assert_eq!(ep.support.len(), n * k);
        prop_assert_eq!(ep.query.len(), n * q);
        for class in 0..n {
            prop_assert_eq!(ep.support.iter().filter(|w| w.label == class).count(), k);
            prop_assert_eq!(ep.query.iter().filter(|w| w.label == class).count(), q);
        }
        let support_ids: Vec<f64> = ep.support.iter().map(|w| w.signal[0]).collect();
        for w in &ep.query {
            prop_assert!(!support_ids.contains(&w.signal[0]));
        }
        // No window drawn twice.
        let mut all: Vec<f64> = support_ids;
        all.extend(ep.query.iter().map(|w| w.signal[0]));
        let len = all.len();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        all.dedup();
        prop_assert_eq!(all.len(), len);
    }
}

proptest! {
    #[test]
    fn csv_roundtrip_is_bit_exact(
        rows in prop::collection::vec(
            (0usize..6, prop::collection::vec(-1e12f64..1e12, 5)),
            1..12,
        ),
        cond in any::<u32>(),
    ) {
        let windows = rows
            .iter()
            .map(|(label, signal)| LabeledWindow {
                signal: signal.clone(),
                label: *label,
                condition_id: cond,
            })
            .collect();
        let ds = ClientDataset { windows, condition_id: cond };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cond.csv");
        std::fs::write(&path, format_csv(&ds)).unwrap();
        let back = ingest_csv(&path, 5).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn interpolation_weights_always_land_in_unit_interval(
        g0 in -5.0f64..5.0,
        l0 in -5.0f64..5.0,
        a0 in 0.0f64..=1.0,
        delta in 0.0f64..1e6,
    ) {
        let mk = |v: f64| {
            let mut entries = IndexMap::new();
            entries.insert("predictor.w".to_string(), Tensor::scalar(v));
            ParamSet::from_entries(entries)
        };
        let global = mk(g0);
        let local = mk(l0);
        let interp = InterpolationWeights::constant_like(&global, a0).unwrap();
        let loss = |g: &mut Graph, nodes: &IndexMap<String, NodeId>| -> CoreResult<NodeId> {
            let w = *nodes.values().next().unwrap();
            let sq = g.mul(w, w)?;
            Ok(g.scale(sq, 0.5))
        };
        let (_, a_new) = adaptive_interpolate_with(&global, &local, &interp, delta, &loss).unwrap();
        prop_assert!(a_new.in_bounds());
    }

    #[test]
    fn aggregation_stays_in_the_hull(
        values in prop::collection::vec((-1e6f64..1e6, 1usize..1000), 1..8,
        ),
    ) {
        let models: Vec<(ParamSet, usize)> = values
            .iter()
            .map(|(v, c)| {
                let mut entries = IndexMap::new();
                entries.insert("predictor.w".to_string(), Tensor::scalar(*v));
                (ParamSet::from_entries(entries), *c)
            })
            .collect();
        let agg = aggregate(&models).unwrap();
        let out = agg.get("predictor.w").unwrap().item();
        let lo = values.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out >= lo && out <= hi, "{out} outside [{lo}, {hi}]");
    }
}
