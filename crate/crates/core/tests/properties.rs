//! Property tests for the library's structural invariants.

use metagnn::data::{split_dataset, synth_generate, zscore_fit, Normalizer, SynthSpec};
use metagnn::layers::{model_init, Architecture, ArchKind, GraphBatch, ModelParams};
use metagnn::meta::reptile_meta_update;
use metagnn::eval::Predictor;
use proptest::prelude::*;

fn arch_kind() -> impl Strategy<Value = ArchKind> {
    prop_oneof![
        Just(ArchKind::Gcn),
        Just(ArchKind::Gat),
        Just(ArchKind::Mpnn),
        Just(ArchKind::Egnn),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    /// A generated dataset is internally consistent: edge endpoints are
    /// in range and ordered, and feature/target dimensions match the spec.
    #[test]
    fn synth_output_is_well_formed(
        seed in 0u64..1000,
        num_graphs in 1usize..8,
        nodes in 2usize..10,
        tasks in 2usize..5,
        coords in any::<bool>(),
    ) {
        let spec = SynthSpec {
            num_graphs,
            nodes_min: 2,
            nodes_max: nodes.max(2),
            d_node: 3,
            d_edge: 2,
            num_tasks: tasks,
            with_coords: coords,
        };
        let ds = synth_generate(&spec, seed).unwrap();
        prop_assert_eq!(ds.graphs.len(), num_graphs);
        prop_assert_eq!(ds.num_tasks(), tasks);
        for g in &ds.graphs {
            prop_assert!(g.num_nodes >= 2 && g.num_nodes <= nodes.max(2));
            prop_assert_eq!(g.node_feats.len(), g.num_nodes);
            prop_assert!(g.node_feats.iter().all(|f| f.len() == 3));
            prop_assert_eq!(g.edge_feats.len(), g.edges.len());
            prop_assert_eq!(g.targets.len(), tasks);
            prop_assert_eq!(g.coords.is_some(), coords);
            for &(i, j) in &g.edges {
                prop_assert!(i < j && j < g.num_nodes);
            }
        }
    }

    /// Splitting yields a disjoint cover of the graph indices and is a
    /// pure function of the seed.
    #[test]
    fn split_is_a_deterministic_partition(
        seed in 0u64..1000,
        num_graphs in 4usize..40,
        frac_pct in 10u32..90,
    ) {
        let spec = SynthSpec {
            num_graphs, nodes_min: 2, nodes_max: 4,
            d_node: 3, d_edge: 2, num_tasks: 2, with_coords: false,
        };
        let ds = synth_generate(&spec, seed).unwrap();
        let frac = frac_pct as f64 / 100.0;
        let (train, test) = split_dataset(&ds, frac, seed).unwrap();
        let (train2, test2) = split_dataset(&ds, frac, seed).unwrap();
        prop_assert_eq!(&train, &train2);
        prop_assert_eq!(&test, &test2);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..num_graphs).collect::<Vec<_>>());
    }

    /// apply and invert are mutual inverses for any finite target.
    #[test]
    fn normalizer_round_trips(
        mean in -1e6f64..1e6,
        std in 1e-6f64..1e6,
        y in -1e6f64..1e6,
    ) {
        let norm = Normalizer { mean, std };
        let back = norm.invert(norm.apply(y));
        prop_assert!((back - y).abs() <= 1e-9 * y.abs().max(1.0));
    }

    /// Targets standardized over the fitted split have zero mean and unit
    /// variance regardless of which subset was used for fitting.
    #[test]
    fn zscore_standardizes_the_fitted_split(
        seed in 0u64..1000,
        num_graphs in 6usize..30,
    ) {
        let spec = SynthSpec {
            num_graphs, nodes_min: 2, nodes_max: 5,
            d_node: 3, d_edge: 2, num_tasks: 2, with_coords: false,
        };
        let ds = synth_generate(&spec, seed).unwrap();
        let (train, _) = split_dataset(&ds, 0.7, seed).unwrap();
        let norm = zscore_fit(&ds, &train).unwrap();
        let zs: Vec<f64> = train
            .iter()
            .flat_map(|&i| ds.graphs[i].targets.iter().map(|&y| norm.apply(y)))
            .collect();
        let n = zs.len() as f64;
        let mean = zs.iter().sum::<f64>() / n;
        let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9, "mean {mean}");
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
    }

    /// The Reptile update interpolates: every parameter lands between its
    /// old and adapted value, and at the endpoints exactly on them.
    #[test]
    fn reptile_update_interpolates(
        kind in arch_kind(),
        beta_pct in 0u32..=100,
        seed in 0u64..1000,
    ) {
        let arch = Architecture::new(kind, 3, 2);
        let theta = model_init(arch, seed).unwrap();
        let adapted = model_init(arch, seed ^ 0xdead_beef).unwrap();
        let beta = beta_pct as f64 / 100.0;
        let mut updated = theta.clone();
        reptile_meta_update(&mut updated, &adapted, beta).unwrap();
        for (name, tensor) in theta.params.iter() {
            let t = &tensor.data;
            let a = &adapted.params.get(name).unwrap().data;
            let u = &updated.params.get(name).unwrap().data;
            for ((&t, &a), &u) in t.iter().zip(a).zip(u) {
                let (lo, hi) = if t <= a { (t, a) } else { (a, t) };
                prop_assert!(u >= lo - 1e-12 && u <= hi + 1e-12);
                if beta == 0.0 {
                    prop_assert_eq!(u.to_bits(), t.to_bits());
                }
                if beta == 1.0 {
                    prop_assert_eq!(u.to_bits(), a.to_bits());
                }
            }
        }
    }

    /// Predictions do not depend on how graphs are grouped into batches.
    #[test]
    fn predictions_are_batching_independent(
        kind in arch_kind(),
        seed in 0u64..1000,
    ) {
        let spec = SynthSpec {
            num_graphs: 4, nodes_min: 3, nodes_max: 6,
            d_node: 3, d_edge: 2, num_tasks: 2, with_coords: true,
        };
        let ds = synth_generate(&spec, seed).unwrap();
        let mp: ModelParams = model_init(Architecture::new(kind, 3, 2), seed).unwrap();
        let predictor = Predictor::Single(mp);
        let labels: Vec<f64> = ds.graphs.iter().map(|g| g.targets[0]).collect();
        let joint = predictor
            .predict(&GraphBatch::from_graphs(&ds, &[0, 1, 2, 3], &labels))
            .unwrap();
        for i in 0..4 {
            let solo = predictor
                .predict(&GraphBatch::from_graphs(&ds, &[i], &labels[i..=i]))
                .unwrap();
            prop_assert!((joint[i] - solo[0]).abs() < 1e-9,
                "graph {} batched {} vs alone {}", i, joint[i], solo[0]);
        }
    }
}
