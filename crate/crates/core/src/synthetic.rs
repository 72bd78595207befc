//! Random MovieLens-like rating data: a low-rank taste structure plus user and
//! item offsets, rounded to whole stars, with popularity-skewed sparsity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RatingTriple, SparseRatings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub rank: usize,
    /// Expected share of observed cells.
    pub density: f64,
    /// Standard deviation of the per-rating noise, in stars.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 50,
            n_items: 80,
            rank: 3,
            density: 0.3,
            noise: 0.3,
            seed: 0,
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Ids are 1-based. Every user and every item gets at least one rating.
pub fn generate(cfg: &SyntheticConfig) -> SparseRatings {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, m, k) = (cfg.n_users.max(1), cfg.n_items.max(1), cfg.rank.max(1));

    let scale = 1.0 / (k as f64).sqrt();
    let users: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..k).map(|_| rng.random::<f64>() * scale * 1.6).collect())
        .collect();
    let items: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..k).map(|_| rng.random::<f64>() * scale * 1.6).collect())
        .collect();
    let user_bias: Vec<f64> = (0..n).map(|_| 0.4 * gaussian(&mut rng)).collect();
    let item_bias: Vec<f64> = (0..m).map(|_| 0.4 * gaussian(&mut rng)).collect();
    let popularity: Vec<f64> = (0..m).map(|j| 1.5 / (1.0 + j as f64 / (m as f64 / 4.0))).collect();
    let pop_mean = popularity.iter().sum::<f64>() / m as f64;

    let rating = |i: usize, j: usize, rng: &mut ChaCha8Rng| {
        let taste: f64 = users[i].iter().zip(&items[j]).map(|(a, b)| a * b).sum();
        let raw = 2.6 + taste + user_bias[i] + item_bias[j] + cfg.noise * gaussian(rng);
        raw.round().clamp(1.0, 5.0)
    };

    let mut triples = Vec::new();
    let mut item_seen = vec![false; m];
    for i in 0..n {
        let before = triples.len();
        for j in 0..m {
            let p = (cfg.density * popularity[j] / pop_mean).min(1.0);
            if rng.random::<f64>() < p {
                triples.push(RatingTriple {
                    user: i as u64 + 1,
                    item: j as u64 + 1,
                    rating: rating(i, j, &mut rng),
                });
                item_seen[j] = true;
            }
        }
        if triples.len() == before {
            let j = rng.random_range(0..m);
            triples.push(RatingTriple {
                user: i as u64 + 1,
                item: j as u64 + 1,
                rating: rating(i, j, &mut rng),
            });
            item_seen[j] = true;
        }
    }
    for j in (0..m).filter(|&j| !item_seen[j]) {
        let i = rng.random_range(0..n);
        triples.push(RatingTriple {
            user: i as u64 + 1,
            item: j as u64 + 1,
            rating: rating(i, j, &mut rng),
        });
    }
    SparseRatings::from_triples(triples)
}
