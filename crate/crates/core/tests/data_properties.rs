use std::collections::{HashMap, HashSet};

use fedsplit::data::{
    parse_ratings, partition_groups, partition_with_sizes, preprocess, split, Preprocessing, RatingFormat,
    RatingTriple, SparseRatings,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn raw_ratings(n_users: u64, n_items: u64, density: f64, seed: u64) -> SparseRatings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::new();
    for u in 1..=n_users {
        for i in 1..=n_items {
            if rng.random::<f64>() < density {
                triples.push(RatingTriple {
                    user: u * 7,
                    item: i * 3 + 100,
                    rating: rng.random_range(1..=10) as f64 / 2.0,
                });
            }
        }
    }
    SparseRatings::from_triples(triples)
}

fn keyed(x: &SparseRatings) -> Vec<(u64, u64, u64)> {
    let mut v: Vec<_> = x.triples().map(|t| (t.user, t.item, t.rating.to_bits())).collect();
    v.sort();
    v
}

#[test]
fn snapshot_round_trips() {
    let x = raw_ratings(10, 12, 0.4, 1);
    let mut buf = Vec::new();
    x.write_snapshot(&mut buf).unwrap();
    let back = SparseRatings::from_triples(parse_ratings(buf.as_slice(), RatingFormat::Comma).unwrap());
    assert_eq!(keyed(&back), keyed(&x));
}

#[test]
fn group_examples() {
    let p = partition_groups(&[1, 2, 3], 3, 30, 0).unwrap();
    assert_eq!(p.sizes(), vec![3]);
    let users: Vec<u64> = (0..33).collect();
    let mut draws = [30, 3].into_iter();
    let p = partition_with_sizes(&users, 3, || draws.next().unwrap()).unwrap();
    assert_eq!(p.sizes(), vec![30, 3]);
    assert!(partition_groups(&[1, 2], 3, 30, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_covering_partition(seed in any::<u64>(), density in 0.2f64..0.9) {
        let x = raw_ratings(15, 20, density, seed);
        prop_assume!(!x.is_empty());
        let s = split(&x, 0.2, 0.2, seed).unwrap();
        let mut all = keyed(&s.train);
        all.extend(keyed(&s.validation));
        all.extend(keyed(&s.test));
        all.sort();
        prop_assert_eq!(all, keyed(&x));

        let train_users: HashSet<u64> = s.train.triples().map(|t| t.user).collect();
        let train_items: HashSet<u64> = s.train.triples().map(|t| t.item).collect();
        for t in s.validation.triples().chain(s.test.triples()) {
            prop_assert!(train_users.contains(&t.user));
            prop_assert!(train_items.contains(&t.item));
        }
        let again = split(&x, 0.2, 0.2, seed).unwrap();
        prop_assert_eq!(again, s);
    }

    #[test]
    fn groups_partition_the_users(n in 3usize..400, lo in 1usize..6, extra in 0usize..30, seed in any::<u64>()) {
        let hi = lo + extra;
        prop_assume!(n >= lo);
        let users: Vec<u64> = (0..n as u64).map(|u| u * 13 + 5).collect();
        let p = partition_groups(&users, lo, hi, seed).unwrap();
        let mut seen: Vec<u64> = p.groups().iter().flatten().copied().collect();
        seen.sort();
        prop_assert_eq!(&seen, &users);
        for size in p.sizes() {
            prop_assert!(size >= lo);
            prop_assert!(size < hi + lo);
        }
        prop_assert_eq!(partition_groups(&users, lo, hi, seed).unwrap(), p);
    }

    #[test]
    fn preprocessing_filters_in_order_and_rounds(seed in any::<u64>(), min_user in 1usize..8, min_item in 1usize..8) {
        let raw = raw_ratings(20, 25, 0.3, seed);
        let opts = Preprocessing { min_user_ratings: min_user, min_item_ratings: min_item, ..Preprocessing::default() };

        let mut per_user: HashMap<u64, usize> = HashMap::new();
        for t in raw.triples() {
            *per_user.entry(t.user).or_default() += 1;
        }
        let users_kept: Vec<RatingTriple> = raw.triples().filter(|t| per_user[&t.user] >= min_user).collect();
        let mut per_item: HashMap<u64, usize> = HashMap::new();
        for t in &users_kept {
            *per_item.entry(t.item).or_default() += 1;
        }
        let mut expected: Vec<(u64, u64, u64)> = users_kept
            .iter()
            .filter(|t| per_item[&t.item] >= min_item)
            .map(|t| (t.user, t.item, t.rating.ceil().to_bits()))
            .collect();
        expected.sort();

        match preprocess(&raw, &opts) {
            Ok(out) => {
                prop_assert_eq!(keyed(&out), expected);
                for t in out.triples() {
                    prop_assert!(t.rating.fract() == 0.0 && (1.0..=5.0).contains(&t.rating));
                }
            }
            Err(_) => prop_assert!(expected.is_empty()),
        }
    }
}
