//! Randomized structural properties checked against simple oracles.

use proptest::prelude::*;

use streamsel::filter::{CandidateBuffer, ScoredCandidate};
use streamsel::importance::{allocate_batch_sizes, intra_class_probabilities};
use streamsel::model::Sample;

fn scored(id: usize, score: f64) -> ScoredCandidate {
    ScoredCandidate {
        sample: Sample { id, features: vec![0.0], label: 0 },
        features: vec![0.0],
        score,
        arrival: id as u64,
    }
}

proptest! {
    // The bounded buffer retains exactly the capacity-many highest scores;
    // on ties the most recent arrival survives.
    #[test]
    fn buffer_matches_sort_oracle(
        scores in proptest::collection::vec(-1000i32..1000, 1..60),
        capacity in 1usize..20,
    ) {
        let mut buffer = CandidateBuffer::new(capacity);
        for (id, &s) in scores.iter().enumerate() {
            buffer.admit(scored(id, s as f64));
        }
        let mut kept: Vec<usize> = buffer
            .snapshot_by_class()
            .values()
            .flat_map(|v| v.iter().map(|c| c.sample.id))
            .collect();
        kept.sort_unstable();

        let mut order: Vec<usize> = (0..scores.len()).collect();
        // Descending score, recency breaking ties.
        order.sort_by(|&a, &b| scores[b].cmp(&scores[a]).then(b.cmp(&a)));
        let mut expect: Vec<usize> = order.into_iter().take(capacity).collect();
        expect.sort_unstable();
        prop_assert_eq!(kept, expect);
    }

    // Probabilities are a distribution proportional to the norms.
    #[test]
    fn intra_class_probabilities_normalize(
        norms in proptest::collection::vec(0.0f64..100.0, 1..30),
    ) {
        let probs = intra_class_probabilities(&norms);
        let total: f64 = probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(probs.iter().all(|&p| p >= 0.0));
        let sum: f64 = norms.iter().sum();
        if sum > 0.0 {
            for (n, p) in norms.iter().zip(&probs) {
                prop_assert!((p - n / sum).abs() < 1e-12);
            }
        }
    }

    // Largest-remainder allocation always hands out exactly the batch, and
    // respects pool caps in without-replacement mode.
    #[test]
    fn allocation_sums_to_batch(
        importances in proptest::collection::vec(0.0f64..10.0, 1..6),
        sizes in proptest::collection::vec(1usize..12, 1..6),
        batch in 1usize..12,
    ) {
        let k = importances.len().min(sizes.len());
        let (imp, sz) = (&importances[..k], &sizes[..k]);
        let alloc = allocate_batch_sizes(imp, sz, batch, false).unwrap();
        prop_assert_eq!(alloc.iter().sum::<usize>(), batch);

        let pool: usize = sz.iter().sum();
        if batch <= pool {
            let capped = allocate_batch_sizes(imp, sz, batch, true).unwrap();
            prop_assert_eq!(capped.iter().sum::<usize>(), batch);
            prop_assert!(capped.iter().zip(sz).all(|(&b, &s)| b <= s));
        }
    }
}
