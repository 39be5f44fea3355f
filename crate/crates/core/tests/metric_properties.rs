use proptest::prelude::*;

use patchfcn::metrics::{average_precision, dice_jaccard, roc_auc};

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..80).prop_flat_map(|n| {
        (
            prop::collection::vec((0u32..20).prop_map(|v| f64::from(v) / 20.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
    })
}

proptest! {
    #[test]
    fn ranking_metrics_ignore_strictly_increasing_maps((scores, labels) in scored_labels()) {
        let mapped: Vec<f64> = scores.iter().map(|s| 3.0 * s * s * s + s - 7.0).collect();
        match (average_precision(&scores, &labels), average_precision(&mapped, &labels)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
        match (roc_auc(&scores, &labels), roc_auc(&mapped, &labels)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn auc_of_reversed_scores_is_complementary((scores, labels) in scored_labels()) {
        let reversed: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let (Ok(a), Ok(b)) = (roc_auc(&scores, &labels), roc_auc(&reversed, &labels)) {
            prop_assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn ranking_metrics_lie_in_unit_interval((scores, labels) in scored_labels()) {
        if let Ok(ap) = average_precision(&scores, &labels) {
            prop_assert!((0.0..=1.0).contains(&ap));
        }
        if let Ok(auc) = roc_auc(&scores, &labels) {
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }

    #[test]
    fn dice_and_jaccard_are_linked(
        pairs in prop::collection::vec((0u8..=10, 0u8..=1), 1..100),
    ) {
        let scores: Vec<f32> = pairs.iter().map(|&(s, _)| f32::from(s) / 10.0).collect();
        let gt: Vec<u8> = pairs.iter().map(|&(_, g)| g).collect();
        let (d, j) = dice_jaccard(&scores, &gt, 0.5).unwrap();
        prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&j));
        prop_assert!(j <= d);
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 4.0 * f64::EPSILON);
    }
}

#[test]
fn perfect_ranking_scores_one() {
    let scores = [0.1, 0.2, 0.8, 0.9];
    let labels = [false, false, true, true];
    assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    assert_eq!(roc_auc(&scores, &labels).unwrap(), 1.0);
}

#[test]
fn degenerate_label_sets_are_undefined() {
    assert!(average_precision(&[0.1, 0.2], &[false, false]).is_err());
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
}
