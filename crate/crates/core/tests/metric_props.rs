use modeprior::metrics::{frechet_distance, knn_recall_precision};
use proptest::prelude::*;

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 2), 6..max)
}

fn rotate<T: Clone>(v: &[T], by: usize) -> Vec<T> {
    let mut out = v.to_vec();
    out.rotate_left(by % v.len());
    out.reverse();
    out
}

proptest! {
    #[test]
    fn knn_metrics_ignore_order(real in cloud(30), gen in cloud(30), r in 0usize..30, k in 1usize..4) {
        let a = knn_recall_precision(&real, &gen, k).unwrap();
        let b = knn_recall_precision(&rotate(&real, r), &rotate(&gen, r + 1), k).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn frechet_is_symmetric_and_order_free(real in cloud(30), gen in cloud(30), r in 0usize..30) {
        let ab = frechet_distance(&real, &gen).unwrap().distance;
        let ba = frechet_distance(&gen, &real).unwrap().distance;
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        let shuffled = frechet_distance(&rotate(&real, r), &rotate(&gen, r + 2)).unwrap().distance;
        prop_assert!((ab - shuffled).abs() <= 1e-8 * (1.0 + ab));
    }

    #[test]
    fn frechet_vanishes_for_matching_moments(real in cloud(30), shift in -3.0f64..3.0) {
        let d = frechet_distance(&real, &real).unwrap().distance;
        prop_assert!(d.abs() < 1e-8);
        let moved: Vec<Vec<f64>> = real.iter().map(|x| vec![x[0] + shift, x[1]]).collect();
        let d = frechet_distance(&real, &moved).unwrap().distance;
        prop_assert!((d - shift * shift).abs() < 1e-6 * (1.0 + shift * shift));
    }

    // Adding a generated copy of a real point never lowers precision. Recall
    // can drop, since new points shrink existing k-NN radii.
    #[test]
    fn duplicating_real_points_keeps_precision(real in cloud(25), gen in cloud(25), picks in prop::collection::vec(0usize..25, 1..6), k in 1usize..4) {
        let (_, p0) = knn_recall_precision(&real, &gen, k).unwrap();
        let mut more = gen.clone();
        for &i in &picks {
            more.push(real[i % real.len()].clone());
        }
        let (_, p1) = knn_recall_precision(&real, &more, k).unwrap();
        prop_assert!(p1 >= p0 - 1e-12);
    }
}

#[test]
fn recall_can_fall_when_generated_points_are_added() {
    let real = vec![vec![-8.0], vec![0.0]];
    let (r0, _) = knn_recall_precision(&real, &[vec![0.0], vec![10.0]], 1).unwrap();
    let (r1, _) = knn_recall_precision(&real, &[vec![0.0], vec![10.0], vec![0.0]], 1).unwrap();
    assert!(r1 < r0, "{r1} vs {r0}");
}
