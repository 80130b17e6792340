//! Property tests for the grounding metrics and the execution schedules.

use gap_core::bench::{grounding_score_topk, iou, recall_at_k};
use gap_core::exec::{self, Schedule};
use proptest::prelude::*;

fn boxes() -> impl Strategy<Value = [f64; 4]> {
    (0.0..10.0f64, 0.0..10.0f64, 0.1..5.0f64, 0.1..5.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01..1.0f64, n).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ab));
        prop_assert!((ab - iou(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grounding_score_grows_with_k(beta in distribution(6), mask in prop::collection::vec(any::<bool>(), 6)) {
        let mut relevant: Vec<usize> = (0..6).filter(|&j| mask[j]).collect();
        if relevant.is_empty() {
            relevant.push(0);
        }
        let mut last = 0.0;
        for k in 1..=6 {
            let s = grounding_score_topk(&beta, &relevant, k).unwrap();
            prop_assert!(s >= last - 1e-12 && s <= 1.0 + 1e-12);
            last = s;
        }
        let mass: f64 = relevant.iter().map(|&j| beta[j]).sum();
        prop_assert!((last - mass).abs() < 1e-12);
    }

    #[test]
    fn recall_grows_with_k(
        regions in prop::collection::vec(boxes(), 5),
        scores in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 5), 1..4),
        gt_pick in prop::collection::vec(0usize..5, 4),
    ) {
        let gt: Vec<Vec<[f64; 4]>> = (0..scores.len()).map(|i| vec![regions[gt_pick[i]]]).collect();
        let mut last = 0.0;
        for k in 1..=5 {
            let r = recall_at_k(&scores, &gt, &regions, k).unwrap();
            prop_assert!(r >= last && r <= 1.0);
            last = r;
        }
        prop_assert_eq!(last, 1.0);
    }

    #[test]
    fn schedules_agree(xs in prop::collection::vec(-100i64..100, 0..200)) {
        let f = |x: &i64| x * x - 3 * x;
        let auto = exec::map_ordered_with(Schedule::Auto, &xs, f);
        let seq = exec::map_ordered_with(Schedule::Sequential, &xs, f);
        prop_assert_eq!(&auto, &seq);
        prop_assert_eq!(exec::map_range(xs.len(), |i| f(&xs[i])), seq);
    }
}
