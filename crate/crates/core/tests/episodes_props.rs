mod common;

use std::collections::BTreeSet;

use metamod_core::episodes::{pair_tasks, sample_episode, split_classes, Dataset, Phase};
use proptest::prelude::*;

fn dataset() -> Dataset {
    common::tiny_dataset(24, 8, 4, 12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn splits_are_disjoint_and_cover_every_class(seed in any::<u64>(), n_train in 1usize..24) {
        let ds = dataset();
        let s = split_classes(&ds.spec, n_train, seed).unwrap();
        let train: BTreeSet<_> = s.meta_train_classes.iter().copied().collect();
        let test: BTreeSet<_> = s.meta_test_classes.iter().copied().collect();
        prop_assert_eq!(train.len(), n_train);
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.union(&test).count(), 24);
        prop_assert_eq!(&split_classes(&ds.spec, n_train, seed).unwrap(), &s);
    }

    #[test]
    fn episodes_meet_their_contract(seed in any::<u64>(), n_way in 1usize..6, k in 1usize..4, q in 1usize..5, test in any::<bool>()) {
        let ds = dataset();
        let phase = if test { Phase::Test } else { Phase::Train };
        let ep = sample_episode(&ds, phase, n_way, k, q, seed).unwrap();
        prop_assert_eq!(ep.support.len(), n_way * k);
        prop_assert_eq!(ep.query.len(), n_way * q);
        let s: BTreeSet<_> = ep.support.iter().map(|p| p.0).collect();
        let qs: BTreeSet<_> = ep.query.iter().map(|p| p.0).collect();
        prop_assert_eq!(s.len() + qs.len(), ep.n_rows());
        prop_assert!(s.is_disjoint(&qs));
        for label in 0..n_way {
            prop_assert_eq!(ep.support_labels().iter().filter(|&&l| l == label).count(), k);
            prop_assert_eq!(ep.query_labels().iter().filter(|&&l| l == label).count(), q);
        }
        let labels: BTreeSet<_> = ep.row_labels().into_iter().collect();
        prop_assert_eq!(labels, (0..n_way).collect::<BTreeSet<_>>());
        // every instance belongs to the class its label names, drawn from the phase pool
        for &(id, label) in ep.support.iter().chain(&ep.query) {
            prop_assert_eq!(ds.instance_class[id], ep.class_ids[label]);
            prop_assert!(ds.spec.classes(phase).contains(&ep.class_ids[label]));
        }
        prop_assert_eq!(sample_episode(&ds, phase, n_way, k, q, seed).unwrap(), ep);
    }

    #[test]
    fn pairing_is_a_derangement_of_the_batch(seed in any::<u64>(), t in 2usize..7, n_way in 1usize..6) {
        let ds = dataset();
        let batch: Vec<_> = (0..t)
            .map(|i| sample_episode(&ds, Phase::Train, n_way, 1, 1, seed ^ i as u64).unwrap())
            .collect();
        let pairs = pair_tasks(&batch, seed).unwrap();
        prop_assert_eq!(pairs.len(), t);
        let bases: BTreeSet<_> = pairs.iter().map(|p| p.base_index).collect();
        let conds: BTreeSet<_> = pairs.iter().map(|p| p.conditioning_index).collect();
        prop_assert_eq!(bases.len(), t);
        prop_assert_eq!(conds.len(), t);
        for p in &pairs {
            prop_assert_ne!(p.base_index, p.conditioning_index);
            prop_assert_eq!(&p.base, &batch[p.base_index]);
            prop_assert_eq!(&p.conditioning, &batch[p.conditioning_index]);
            let mut perm = p.class_pairing.clone();
            perm.sort_unstable();
            prop_assert_eq!(perm, (0..n_way).collect::<Vec<_>>());
        }
        prop_assert_eq!(pair_tasks(&batch, seed).unwrap(), pairs);
    }
}

#[test]
fn class_pairings_cover_every_permutation() {
    let ds = dataset();
    let batch: Vec<_> = (0..2).map(|i| sample_episode(&ds, Phase::Train, 3, 1, 1, i).unwrap()).collect();
    let mut counts = std::collections::BTreeMap::new();
    for seed in 0..3000 {
        for p in pair_tasks(&batch, seed).unwrap() {
            *counts.entry(p.class_pairing).or_insert(0usize) += 1;
        }
    }
    // 6 permutations, 6000 draws: each near 1000
    assert_eq!(counts.len(), 6);
    assert!(counts.values().all(|&c| (850..1150).contains(&c)), "{counts:?}");
}
