//! Property tests for the structural invariants: shape algebra, probability
//! simplexes, KL non-negativity, overlay geometry, cache round-trips.

use proptest::prelude::*;

use mtvib_core::data::{make_overlay, Dataset, SourcePool, DEFAULT_SHIFT};
use mtvib_core::linalg::conv_out_extent;
use mtvib_core::multitask::{argmax_rows, scaled_softmax};
use mtvib_core::rng;
use mtvib_core::vib::kl_closed_form_value;
use mtvib_core::{Graph, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The conv arithmetic the architecture tables rely on matches what the
    /// kernel actually produces, for every extent/kernel/stride combination.
    #[test]
    fn conv_extent_formula_matches_kernel(
        input in 3usize..12,
        kernel in 1usize..6,
        stride in 1usize..4,
    ) {
        prop_assume!(kernel <= input);
        let out = conv_out_extent(input, kernel, stride);
        prop_assert!(out >= 1);
        // Last window fits: (out-1)*stride + kernel ≤ input; next would not.
        prop_assert!((out - 1) * stride + kernel <= input);
        prop_assert!(out * stride + kernel > input);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::filled(&[1, 1, input, input], 1.0));
        let w = g.leaf(&Tensor::filled(&[1, 1, kernel, kernel], 1.0));
        let b = g.leaf(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, stride).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 1, out, out][..]);
    }

    /// Pooling halves extents with floor semantics and never panics on odd
    /// extents.
    #[test]
    fn pool_floors_extents(h in 2usize..13, w in 2usize..13) {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::filled(&[1, 1, h, w], 1.0));
        let y = g.maxpool2x2(x).unwrap();
        prop_assert_eq!(g.shape(y), &[1, 1, h / 2, w / 2][..]);
    }

    /// Closed-form KL to the standard normal is non-negative for any
    /// diagonal Gaussian.
    #[test]
    fn kl_nonnegative(
        mu in prop::collection::vec(-5.0f64..5.0, 8),
        lv in prop::collection::vec(-4.0f64..4.0, 8),
    ) {
        let kl = kl_closed_form_value(&mu, &lv, 2, 4);
        prop_assert!(kl >= -1e-12, "kl = {kl}");
    }

    /// Scaled softmax rows are probability vectors and share the plain
    /// argmax for any positive temperature.
    #[test]
    fn scaled_softmax_rows_are_simplex_and_argmax_invariant(
        logits in prop::collection::vec(-30.0f64..30.0, 40),
        sigma2 in 0.05f64..20.0,
    ) {
        let probs = scaled_softmax(&logits, 8, 5, sigma2).unwrap();
        for row in probs.chunks(5) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
        prop_assert_eq!(argmax_rows(&probs, 8, 5), argmax_rows(&logits, 8, 5));
    }

    /// Overlay output stays in range, keeps canvas geometry, and dominates
    /// both sources pointwise wherever they are placed.
    #[test]
    fn overlay_dominates_sources(
        a in prop::collection::vec(0.0f64..=1.0, 784),
        b in prop::collection::vec(0.0f64..=1.0, 784),
        dy in 0usize..=8,
        dx in 0usize..=8,
    ) {
        let canvas = make_overlay(&a, &b, (dy, dx)).unwrap();
        prop_assert_eq!(canvas.len(), 36 * 36);
        prop_assert!(canvas.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for r in 0..28 {
            for c in 0..28 {
                prop_assert!(canvas[r * 36 + c] >= a[r * 28 + c]);
                prop_assert!(canvas[(r + dy) * 36 + c + dx] >= b[r * 28 + c]);
            }
        }
    }

    /// The binary cache is lossless for any dataset contents.
    #[test]
    fn cache_round_trips(seed in 0u64..500, n in 1usize..24) {
        let mut r = rng::stream_rng(seed, 1234);
        let images: Vec<u8> =
            rng::standard_normal_vec(&mut r, 8 * 784).iter().map(|v| (v.abs() * 90.0) as u8).collect();
        let labels = (0..8u8).collect();
        let pool = SourcePool::new(images, labels).unwrap();
        let ds = mtvib_core::data::overlay_pairs(&pool, n, &mut r, DEFAULT_SHIFT).unwrap();
        let back = Dataset::from_cache_bytes(&ds.to_cache_bytes()).unwrap();
        prop_assert_eq!(ds, back);
    }

    /// Training pairs never draw the same source image twice.
    #[test]
    fn pairs_use_two_distinct_sources(seed in 0u64..500) {
        // Labels equal indices, so a pair (a, a) would show as equal labels.
        let images = vec![128u8; 10 * 784];
        let labels = (0..10u8).collect();
        let pool = SourcePool::new(images, labels).unwrap();
        let mut r = rng::stream_rng(seed, 4321);
        let ds = mtvib_core::data::overlay_pairs(&pool, 40, &mut r, DEFAULT_SHIFT).unwrap();
        for i in 0..ds.len() {
            let l = ds.labels_of(i);
            prop_assert_ne!(l[0], l[1]);
        }
    }
}
