//! Invariant suites, each over at least 100 random instances.

mod common;

use common::criteria;
use globaldoc::evaluation::recall_at_k;
use globaldoc::queue::SupportQueue;
use globaldoc::Modality;
use proptest::prelude::*;

#[test]
fn seeded_invariant_suites_have_no_violations() {
    for (name, bad) in criteria::invariant_violations(100) {
        assert_eq!(bad, 0, "{name}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn recall_is_monotone_in_k(labels in prop::collection::vec(prop::option::of(0u32..4), 1..40), query in 0u32..4) {
        let ks: Vec<usize> = (1..=labels.len() + 2).collect();
        let hits = recall_at_k(&labels, query, &ks).unwrap();
        for w in hits.windows(2) {
            prop_assert!(!w[0] || w[1]);
        }
        let first = labels.iter().position(|&l| l == Some(query));
        prop_assert_eq!(hits[0], first == Some(0));
    }

    #[test]
    fn queue_keeps_the_newest_capacity_entries(capacity in 1usize..20, sizes in prop::collection::vec(0usize..12, 1..8)) {
        let mut queue = SupportQueue::new(capacity, Modality::Vision).unwrap();
        let mut total = 0u64;
        for n in sizes {
            let batch: Vec<Vec<f32>> = (0..n).map(|i| {
                let a = (total + i as u64) as f32 * 0.37;
                vec![a.cos(), a.sin()]
            }).collect();
            queue.enqueue_batch(&batch, None).unwrap();
            total += n as u64;
            let seqs: Vec<u64> = queue.entries().map(|e| e.sequence).collect();
            let expected: Vec<u64> = (total.saturating_sub(capacity as u64)..total).collect();
            prop_assert_eq!(seqs, expected);
        }
    }
}
