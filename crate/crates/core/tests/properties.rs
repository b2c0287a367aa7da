//! Property tests over randomly sampled cells.

use cap_core::bench::{read_dataset, synth_accuracy, synthetic_dataset, write_dataset, SpaceSpec};
use cap_core::graph::{
    edge_ops_to_node_ops, permute, undirected_neighbors, validate, wl_hash, CellGraph, EdgeOpCell, OpVocabulary, INPUT,
    OUTPUT,
};
use cap_core::nn::{Encoder, EncoderConfig, GraphBatch, Mode};
use cap_core::predictor::{FinetuneMode, Predictor};
use cap_core::pretrain::{build_batch_pairs, pretrain, PretrainConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn family() -> impl Strategy<Value = SpaceSpec> {
    prop_oneof![
        Just(SpaceSpec::node_ops_101_like()),
        Just(SpaceSpec::edge_ops_201_like())
    ]
}

fn sampled(spec: &SpaceSpec, seed: u64) -> CellGraph {
    spec.sample_one(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    p
}

/// Longest input-to-output path by enumerating every path.
fn brute_longest(g: &CellGraph, v: usize, target: usize) -> Option<usize> {
    if v == target {
        return Some(0);
    }
    (0..g.num_nodes())
        .filter(|&w| g.has_edge(v, w))
        .filter_map(|w| brute_longest(g, w, target).map(|d| d + 1))
        .max()
}

#[test]
fn longest_path_matches_enumeration_on_all_small_dags() {
    let mut checked = 0;
    for n in 2..=6usize {
        let slots: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        for mask in 0u32..1 << slots.len() {
            let mut ops = vec![2; n];
            ops[0] = INPUT;
            ops[n - 1] = OUTPUT;
            let edges: Vec<_> = slots
                .iter()
                .enumerate()
                .filter(|(b, _)| mask >> b & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            let g = CellGraph::from_edges(ops, &edges).unwrap();
            assert_eq!(g.longest_path(), brute_longest(&g, 0, n - 1), "{edges:?}");
            checked += 1;
        }
    }
    assert_eq!(checked, 2 + 8 + 64 + 1024 + 32768);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sampler_output_is_valid(spec in family(), seed in any::<u64>()) {
        let g = sampled(&spec, seed);
        prop_assert!(validate(&g).is_valid());
        prop_assert!(spec.contains(&g));
    }

    #[test]
    fn wl_hash_and_oracle_ignore_node_order(spec in family(), seed in any::<u64>(), pseed in any::<u64>()) {
        let g = sampled(&spec, seed);
        let q = permute(&g, &shuffled(g.num_nodes(), pseed)).unwrap();
        prop_assert_eq!(wl_hash(&g, 3), wl_hash(&q, 3));
        prop_assert_eq!(synth_accuracy(&g).unwrap(), synth_accuracy(&q).unwrap());
    }

    #[test]
    fn neighborhoods_are_symmetric(seed in any::<u64>()) {
        let g = sampled(&SpaceSpec::default(), seed);
        let n = g.num_nodes();
        for u in 0..n {
            let nu = undirected_neighbors(&g, u).unwrap();
            for v in 0..n {
                prop_assert_eq!(nu.contains(&v), undirected_neighbors(&g, v).unwrap().contains(&u));
            }
        }
    }

    #[test]
    fn edge_op_transform_keeps_every_op(mask in 1u32..64, ops in prop::collection::vec(2usize..5, 6)) {
        let slots = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        let edge_ops: Vec<_> = slots
            .iter()
            .zip(&ops)
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, (&(t, h), &op))| (t, h, op))
            .collect();
        // an edge survives only if it lies on some source-to-sink route
        let reach = |from: usize, to: usize| {
            let mut seen = [false; 4];
            seen[from] = true;
            for _ in 0..4 {
                for &(t, h, _) in &edge_ops {
                    if seen[t] { seen[h] = true; }
                }
            }
            seen[to]
        };
        let all_on_route = edge_ops.iter().all(|&(t, h, _)| reach(0, t) && reach(h, 3));
        let cell = EdgeOpCell { num_nodes: 4, edge_ops: edge_ops.clone() };
        match edge_ops_to_node_ops(&cell, &OpVocabulary::nasbench()) {
            Ok(g) => {
                prop_assert!(all_on_route);
                prop_assert_eq!(g.num_nodes(), edge_ops.len() + 2);
                prop_assert!(validate(&g).is_valid());
            }
            Err(_) => prop_assert!(!all_on_route),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoder_is_permutation_invariant_and_deterministic(seed in any::<u64>(), pseed in any::<u64>()) {
        let g = sampled(&SpaceSpec::default(), seed);
        let q = permute(&g, &shuffled(g.num_nodes(), pseed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(5, &EncoderConfig::default(), &mut rng).unwrap();
        let (a, _) = enc.encode_graph(&g, Mode::Partial).unwrap();
        let (b, _) = enc.encode_graph(&q, Mode::Partial).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
        let batch = GraphBatch::from_graphs([&g, &q], 5).unwrap();
        for mode in [Mode::Eval, Mode::Partial] {
            let first = enc.infer(&batch, mode).unwrap();
            let second = enc.infer(&batch, mode).unwrap();
            prop_assert_eq!(first.graphs.data(), second.graphs.data());
            prop_assert_eq!(first.nodes.data(), second.nodes.data());
        }
    }

    #[test]
    fn ranking_survives_increasing_affine_head_transform(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
        let data = synthetic_dataset(&SpaceSpec::default(), 30, seed % 1000).unwrap();
        let graphs: Vec<&CellGraph> = data.iter().map(|a| &a.graph).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(5, &EncoderConfig::default(), &mut rng).unwrap();
        let p = Predictor::new(enc, FinetuneMode::Partial, &mut rng).unwrap();
        let mut q = p.clone();
        let last = q.head.linears.last_mut().unwrap();
        last.weight.data_mut().iter_mut().for_each(|w| *w *= scale);
        last.bias.iter_mut().for_each(|b| *b = *b * scale + shift);
        let (a, b) = (p.predict(&graphs).unwrap(), q.predict(&graphs).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((y - (x * scale + shift)).abs() <= 1e-9 * (1.0 + y.abs()));
        }
        // pairs closer than the rounding of the transform carry no order
        let resolvable = |i: usize, j: usize| ((a[i] - a[j]) * scale).abs() > 1e-12 * (1.0 + b[i].abs());
        for i in 0..a.len() {
            for j in 0..a.len() {
                if resolvable(i, j) {
                    prop_assert_eq!(a[i] < a[j], b[i] < b[j]);
                }
            }
        }
    }

    #[test]
    fn unit_ratio_batches_are_balanced(seed in any::<u64>()) {
        let data = synthetic_dataset(&SpaceSpec::default(), 12, seed % 1000).unwrap();
        let graphs: Vec<&CellGraph> = data.iter().map(|a| &a.graph).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Some(batch) = build_batch_pairs(&graphs, &PretrainConfig::default(), 5, &mut rng).unwrap() {
            let pos = batch.pairs.iter().filter(|p| p.label == 1).count();
            prop_assert_eq!(pos * 2, batch.pairs.len());
        }
    }

    #[test]
    fn dataset_round_trip_is_identity(seed in any::<u64>(), n in 0usize..40) {
        let records = synthetic_dataset(&SpaceSpec::default(), n.max(1), seed % 10_000).unwrap();
        let records = &records[..n.min(records.len())];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, records).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), records.to_vec());
    }
}

#[test]
fn pretraining_is_bit_reproducible() {
    let graphs: Vec<CellGraph> = synthetic_dataset(&SpaceSpec::default(), 60, 3)
        .unwrap()
        .into_iter()
        .map(|a| a.graph)
        .collect();
    let cfg = PretrainConfig {
        epochs: 2,
        seed: 9,
        ..Default::default()
    };
    let a = pretrain(&graphs, 5, &EncoderConfig::default(), &cfg).unwrap();
    let b = pretrain(&graphs, 5, &EncoderConfig::default(), &cfg).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.history, b.history);
}
