//! Randomized invariants for the corpus layer: seeded splits partition the
//! dataset, mini-batching permutes without loss, and the uniform file format
//! round-trips exactly.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rubric_core::corpus::{load_uniform, minibatch, split, write_uniform, Dataset, EvalInstance};

fn instances(n: usize, scores: &[u8]) -> Vec<EvalInstance> {
    (0..n)
        .map(|i| EvalInstance {
            id: format!("id-{i:03}"),
            source: format!("source text {i}"),
            response: format!("response text {i}"),
            human_score: scores[i % scores.len()] as f64,
            meta: if i == 0 {
                Some(BTreeMap::from([(
                    "benchmark".to_string(),
                    "topicalchat".to_string(),
                )]))
            } else {
                None
            },
        })
        .collect()
}

fn dataset_strategy() -> impl Strategy<Value = Dataset> {
    (4usize..60, prop::collection::vec(0u8..=100, 1..8)).prop_map(|(n, scores)| {
        Dataset::new("topicalchat", instances(n, &scores)).unwrap()
    })
}

fn ids(dataset: &Dataset) -> Vec<&str> {
    dataset.instances.iter().map(|i| i.id.as_str()).collect()
}

proptest! {
    #[test]
    fn split_partitions_without_loss_or_reorder(
        dataset in dataset_strategy(),
        fraction in 0.1f64..0.9,
        seed in any::<u64>(),
    ) {
        let n = dataset.len();
        let expected_train = (fraction * n as f64).round() as usize;
        prop_assume!(expected_train > 0 && expected_train < n);
        let (train, test) = split(&dataset, fraction, seed).unwrap();
        prop_assert_eq!(train.len(), expected_train);
        prop_assert_eq!(train.len() + test.len(), n);
        // Each half keeps canonical order, and together they cover every id
        // exactly once.
        let mut merged: Vec<&str> = Vec::with_capacity(n);
        let (mut ti, mut si) = (0, 0);
        let (train_ids, test_ids) = (ids(&train), ids(&test));
        for id in ids(&dataset) {
            if ti < train_ids.len() && train_ids[ti] == id {
                merged.push(train_ids[ti]);
                ti += 1;
            } else if si < test_ids.len() && test_ids[si] == id {
                merged.push(test_ids[si]);
                si += 1;
            }
        }
        prop_assert_eq!(merged, ids(&dataset));
        prop_assert_eq!(ti, train.len());
        prop_assert_eq!(si, test.len());
        // Same seed reproduces the selection.
        let (train2, _) = split(&dataset, fraction, seed).unwrap();
        prop_assert_eq!(train, train2);
    }

    #[test]
    fn minibatches_are_a_sized_permutation(
        dataset in dataset_strategy(),
        batch_size in 1usize..12,
        seed in any::<u64>(),
    ) {
        let batches = minibatch(&dataset, batch_size, usize::MAX.min(1_000), seed).unwrap();
        for (i, batch) in batches.iter().enumerate() {
            prop_assert_eq!(batch.index, i);
            if i + 1 < batches.len() {
                prop_assert_eq!(batch.instances.len(), batch_size);
            } else {
                prop_assert!(batch.instances.len() <= batch_size);
                prop_assert!(!batch.instances.is_empty());
            }
        }
        let mut seen: Vec<&str> = batches
            .iter()
            .flat_map(|b| b.instances.iter().map(|i| i.id.as_str()))
            .collect();
        seen.sort_unstable();
        let mut expected = ids(&dataset);
        expected.sort_unstable();
        prop_assert_eq!(seen, expected);
    }

    #[test]
    fn minibatch_truncates_to_max_batches(
        dataset in dataset_strategy(),
        batch_size in 1usize..6,
        max_batches in 1usize..5,
        seed in any::<u64>(),
    ) {
        let batches = minibatch(&dataset, batch_size, max_batches, seed).unwrap();
        let full = dataset.len().div_ceil(batch_size);
        prop_assert_eq!(batches.len(), full.min(max_batches));
    }

    #[test]
    fn uniform_format_round_trips(dataset in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("round_trip.jsonl");
        write_uniform(&dataset, &path).unwrap();
        let reloaded = load_uniform(&path).unwrap();
        prop_assert_eq!(&reloaded.benchmark_id, "topicalchat");
        prop_assert_eq!(reloaded.instances, dataset.instances);
    }
}
