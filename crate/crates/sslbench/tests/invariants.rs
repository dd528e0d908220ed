//! Randomized property checks for the structural guarantees the library
//! promises: split partitioning, weight mass, metric relationships,
//! alignment invariance, replay determinism, and hash stability.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;

use autograd::ParamSet;
use sslbench::augment::{preprocess_train, AugmentConfig};
use sslbench::config::Config;
use sslbench::data::{class_weights, split_dataset, BoxPx, TaskKind};
use sslbench::encoders::ema_update;
use sslbench::metrics::{
    dataset_ap, segmentation_metrics, ssi_mse, Detection, MatchRule, Scene,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Every record lands in exactly one split, and the same seed replays
    /// the same assignment.
    #[test]
    fn split_partitions_and_replays(
        n in 3usize..200,
        a in 1u32..10,
        b in 1u32..10,
        c in 1u32..10,
        seed in any::<u64>(),
    ) {
        let total = (a + b + c) as f64;
        let ratios = [a as f64 / total, b as f64 / total, c as f64 / total];
        let s1 = split_dataset(n, ratios, seed).unwrap();
        let s2 = split_dataset(n, ratios, seed).unwrap();
        prop_assert_eq!(&s1.train, &s2.train);
        prop_assert_eq!(&s1.val, &s2.val);
        prop_assert_eq!(&s1.test, &s2.test);
        let mut seen = vec![0usize; n];
        for &i in s1.train.iter().chain(&s1.val).chain(&s1.test) {
            seen[i] += 1;
        }
        prop_assert!(seen.iter().all(|&k| k == 1), "not a partition: {:?}", seen);
    }

    /// Reweighted class counts always sum back to the dataset size.
    #[test]
    fn class_weights_preserve_mass(counts in prop::collection::vec(1usize..400, 2..9)) {
        let w = class_weights(&counts).unwrap();
        let total: usize = counts.iter().sum();
        let mass: f64 = counts.iter().zip(&w.weights).map(|(&c, &wi)| c as f64 * wi).sum();
        prop_assert!((mass - total as f64).abs() / (total as f64) < 1e-9);
    }

    /// Per-image Dice never falls below IoU, so the means keep that order.
    #[test]
    fn dice_dominates_iou(cells in prop::collection::vec((0.0f64..1.0, any::<bool>()), 64)) {
        let probs = Array2::from_shape_vec((8, 8), cells.iter().map(|c| c.0).collect()).unwrap();
        let truth = Array2::from_shape_vec((8, 8), cells.iter().map(|c| c.1).collect()).unwrap();
        let m = segmentation_metrics(&[probs], &[truth]).unwrap();
        prop_assert!(m.m_dice >= m.m_iou - 1e-12, "dice {} < iou {}", m.m_dice, m.m_iou);
        prop_assert!((0.0..=1.0).contains(&m.m_dice) && (0.0..=1.0).contains(&m.m_iou));
    }

    /// AP stays inside [0, 1] and cannot rise when a strictly worse
    /// (lowest-confidence, zero-overlap) detection is appended.
    #[test]
    fn ap_bounded_and_monotone(
        boxes in prop::collection::vec((0.0f64..40.0, 0.0f64..40.0, 2.0f64..20.0, 2.0f64..20.0, 0.01f64..0.99), 1..8),
        hits in prop::collection::vec(any::<bool>(), 1..8),
    ) {
        let truths: Vec<BoxPx> = boxes
            .iter()
            .map(|&(x, y, w, h, _)| BoxPx { x_min: x, y_min: y, x_max: x + w, y_max: y + h })
            .collect();
        let detections: Vec<Detection> = boxes
            .iter()
            .zip(&hits)
            .map(|(&(x, y, w, h, s), &hit)| {
                let off = if hit { 0.0 } else { 500.0 };
                Detection {
                    box_px: BoxPx {
                        x_min: x + off,
                        y_min: y + off,
                        x_max: x + w + off,
                        y_max: y + h + off,
                    },
                    score: s,
                }
            })
            .collect();
        let scene = Scene { detections: detections.clone(), truths: truths.clone() };
        let ap = dataset_ap(&[scene], 0.5, MatchRule::HighestIou).unwrap();
        prop_assert!((0.0..=1.0).contains(&ap), "ap {}", ap);
        let mut worse = detections;
        worse.push(Detection {
            box_px: BoxPx { x_min: 900.0, y_min: 900.0, x_max: 910.0, y_max: 910.0 },
            score: 0.001,
        });
        let scene2 = Scene { detections: worse, truths };
        let ap2 = dataset_ap(&[scene2], 0.5, MatchRule::HighestIou).unwrap();
        prop_assert!(ap2 <= ap + 1e-12, "extra miss raised AP: {} -> {}", ap, ap2);
    }

    /// The scale/shift-invariant error ignores affine maps of the prediction.
    #[test]
    fn ssi_error_ignores_affine_maps(
        vals in prop::collection::vec((0.0f64..1.0, 0.1f64..0.9, any::<bool>()), 36),
        a in 0.2f64..4.0,
        b in -2.0f64..2.0,
    ) {
        let pred = Array2::from_shape_vec((6, 6), vals.iter().map(|v| v.0).collect()).unwrap();
        let target = Array2::from_shape_vec((6, 6), vals.iter().map(|v| v.1).collect()).unwrap();
        let mut lens =
            Array2::from_shape_vec((6, 6), vals.iter().map(|v| if v.2 { 1.0 } else { 0.0 }).collect())
                .unwrap();
        // keep enough valid pixels for a well-posed alignment
        lens[[0, 0]] = 1.0;
        lens[[5, 5]] = 1.0;
        lens[[2, 3]] = 1.0;
        let e1 = ssi_mse(&pred, &target, &lens).unwrap();
        let e2 = ssi_mse(&pred.mapv(|v| a * v + b), &target, &lens).unwrap();
        prop_assert!((e1 - e2).abs() <= 1e-6 * e1.abs().max(1.0), "{} vs {}", e1, e2);
    }

    /// The momentum copy moves to exactly the convex combination.
    #[test]
    fn ema_is_a_convex_combination(
        shadow in prop::collection::vec(-2.0f64..2.0, 6),
        online in prop::collection::vec(-2.0f64..2.0, 6),
        m in 0.0f64..1.0,
    ) {
        let mut a = ParamSet::new();
        a.add("w", ArrayD::from_shape_vec(IxDyn(&[6]), shadow.clone()).unwrap(), true);
        let mut b = ParamSet::new();
        b.add("w", ArrayD::from_shape_vec(IxDyn(&[6]), online.clone()).unwrap(), true);
        ema_update(&mut a, &b, m).unwrap();
        let id = a.id_by_name("w").unwrap();
        for (i, got) in a.value(id).iter().enumerate() {
            let want = m * shadow[i] + (1.0 - m) * online[i];
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    /// The augmentation pipeline replays bit-identically under one seed and
    /// always emits the working resolution.
    #[test]
    fn augmentation_replays_deterministically(seed in any::<u64>(), px in 0.0f64..1.0) {
        let img = Array3::from_shape_fn((3, 40, 48), |(c, y, x)| {
            (px + c as f64 * 0.1 + y as f64 * 0.01 + x as f64 * 0.003) % 1.0
        });
        let cfg = AugmentConfig { side: 32, ..AugmentConfig::default() };
        let (a, _) = preprocess_train(&img, TaskKind::Classification, &cfg, seed);
        let (b, _) = preprocess_train(&img, TaskKind::Classification, &cfg, seed);
        prop_assert_eq!(a.clone(), b);
        prop_assert_eq!(a.dim(), (3, 32, 32));
    }

    /// The configuration hash depends on content, not line order.
    #[test]
    fn config_hash_ignores_order(
        mut pairs in prop::collection::btree_map("[a-z]{1,6}", "[a-z0-9]{1,6}", 1..8),
        extra in "[a-z]{1,6}",
    ) {
        pairs.insert(extra, "x".to_string());
        let forward: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let mut backward = forward.clone();
        backward.reverse();
        let a = Config::parse(&forward.join("\n")).unwrap();
        let b = Config::parse(&backward.join("\n")).unwrap();
        prop_assert_eq!(a.hash(), b.hash());
        let mut changed = pairs;
        let first = changed.keys().next().unwrap().clone();
        changed.insert(first, "changed-value".to_string());
        let lines: Vec<String> = changed.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let c = Config::parse(&lines.join("\n")).unwrap();
        prop_assert_ne!(a.hash(), c.hash());
    }
}
