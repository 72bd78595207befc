use fedsplit::data::SparseRatings;
use fedsplit::eval::{evaluate_group, mean_ci, pearson, summarize, GroupReport, RatingPredictor};
use proptest::prelude::*;

struct Constant(f64, usize, usize);

impl RatingPredictor for Constant {
    fn n_users(&self) -> usize {
        self.1
    }
    fn n_items(&self) -> usize {
        self.2
    }
    fn predict_raw(&self, _: usize, _: usize) -> f64 {
        self.0
    }
}

fn report_strategy() -> impl Strategy<Value = GroupReport> {
    (0u64..4, 0usize..40, 3usize..31, 1usize..500, 0.5f64..1.5, 0.5f64..1.5)
        .prop_map(|(seed, g, members, ratings, l, f)| GroupReport::new(seed, g, members, ratings, 1, l, f))
}

/// Textbook single-pass form, independent of the library's two-pass one.
fn pearson_oracle(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let syy: f64 = ys.iter().map(|y| y * y).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

#[test]
fn group_rmse_examples() {
    let test = SparseRatings::from_dense_entries(1, 2, &[(0, 0, 2.0), (0, 1, 4.0)]);
    assert_eq!(evaluate_group(&Constant(3.0, 1, 2), &test).unwrap(), 1.0);
    // Predictions are clamped to [1, 5] first.
    assert_eq!(evaluate_group(&Constant(9.0, 1, 2), &test).unwrap(), evaluate_group(&Constant(5.0, 1, 2), &test).unwrap());
    let empty = SparseRatings::from_dense_entries(1, 2, &[]);
    assert!(evaluate_group(&Constant(3.0, 1, 2), &empty).is_err());
}

#[test]
fn two_point_interval() {
    let ci = mean_ci(&[1.0, 2.0]).unwrap();
    assert_eq!(ci.mean, 1.5);
    assert!((ci.half_width - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    let same = mean_ci(&[0.3; 5]).unwrap();
    assert_eq!(same.half_width, 0.0);
    assert!(pearson(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).is_none());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn summary_ignores_report_order(reports in prop::collection::vec(report_strategy(), 1..40), rot in 0usize..40) {
        let mut shuffled = reports.clone();
        shuffled.reverse();
        let len = shuffled.len();
        shuffled.rotate_left(rot % len);
        let a = summarize(&reports).unwrap();
        let b = summarize(&shuffled).unwrap();
        prop_assert_eq!(a.n_groups, reports.len());
        prop_assert_eq!(a.improved + a.worsened + a.unchanged, a.n_groups);
        for r in &a.reports {
            prop_assert_eq!(r.delta, r.rmse_fed - r.rmse_local);
        }
        prop_assert_eq!(a, b);
    }

    #[test]
    fn pearson_is_bounded_and_matches_the_textbook_form(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..60)
    ) {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Some(r) = pearson(&xs, &ys) {
            prop_assert!((-1.0..=1.0).contains(&r));
            let oracle = pearson_oracle(&xs, &ys);
            if oracle.is_finite() {
                prop_assert!((r - oracle).abs() < 1e-6, "{} vs {}", r, oracle);
            }
            prop_assert!((pearson(&ys, &xs).unwrap() - r).abs() < 1e-12);
        }
        prop_assert_eq!(pearson(&xs, &xs).map(|r| (r - 1.0).abs() < 1e-12), Some(true));
    }
}
