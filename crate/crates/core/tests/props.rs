//! Property tests for the batching, metric, and file-format invariants.

use proptest::prelude::*;
use subspace_lab::clustering::{acc, nmi};
use subspace_lab::data::{load_tensor, save_tensor, split_batches};
use subspace_lab::Tensor;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Every epoch's batches partition 0..N-1 exactly once.
    #[test]
    fn batches_partition_the_index_range(
        n in 1usize..400,
        batch in 1usize..200,
        seed in any::<u64>(),
        epoch in 0u64..50,
        shuffle in any::<bool>(),
    ) {
        let batch = batch.min(n);
        let sched = split_batches(n, batch, shuffle, seed, epoch).unwrap();
        let mut seen = vec![false; n];
        for b in sched.batches() {
            for &i in b {
                prop_assert!(!seen[i], "index {i} appears twice");
                seen[i] = true;
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
        prop_assert_eq!(sched.num_batches(), n.div_ceil(batch));
    }

    /// ACC is invariant under relabeling of either side; both metrics stay
    /// in [0,1]; NMI is symmetric; identical partitions score 1.
    #[test]
    fn metric_invariants(
        labels in prop::collection::vec(0usize..5, 4..60),
        perm_seed in any::<u64>(),
    ) {
        // densify
        let mut ids: Vec<usize> = labels.clone();
        ids.sort_unstable();
        ids.dedup();
        let truth: Vec<usize> = labels.iter().map(|l| ids.binary_search(l).unwrap()).collect();
        let k = ids.len();

        // random permutation of label ids
        let mut perm: Vec<usize> = (0..k).collect();
        let mut state = perm_seed;
        for i in (1..k).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let j = (state >> 33) as usize % (i + 1);
            perm.swap(i, j);
        }
        let relabeled: Vec<usize> = truth.iter().map(|&l| perm[l]).collect();

        let a = acc(&relabeled, &truth).unwrap();
        prop_assert_eq!(a, 1.0, "relabeling must not change ACC");
        let m = nmi(&relabeled, &truth).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&m));
        if k >= 2 {
            prop_assert!((m - 1.0).abs() < 1e-12, "identical partitions have NMI 1");
        }

        // symmetry on a derived second partition
        let other: Vec<usize> = truth.iter().map(|&l| (l + 1) % k.max(1)).collect();
        let ab = nmi(&truth, &other).unwrap();
        let ba = nmi(&other, &truth).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12);
        let acc_ab = acc(&truth, &other).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc_ab));
    }

    /// Tensor file roundtrips are bit-identical.
    #[test]
    fn tensor_file_roundtrip(
        dims in prop::collection::vec(1usize..6, 1..4),
        fill in any::<i32>(),
    ) {
        let numel: usize = dims.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|i| (fill as f64) * 1e-3 + i as f64 * 0.25 - 3.0)
            .collect();
        let t = Tensor::new(dims, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.sctd");
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }
}
