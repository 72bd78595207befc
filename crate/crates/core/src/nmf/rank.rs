use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{initialize, NmfConfig, NmfError, NmfSolver};

/// Mean held-out error for one candidate rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankScore {
    pub rank: usize,
    pub fold_errors: Vec<f64>,
    pub mean_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub rank: usize,
    pub scores: Vec<RankScore>,
}

/// Cross-validated rank choice by entry hold-out.
///
/// Each fold hides `val_frac` of the entries. The factorization is fit on the
/// visible entries, with hidden ones imputed from the current reconstruction
/// before every sweep, and scored by relative squared error on the hidden
/// entries. Candidates are visited in ascending order and ties keep the
/// smaller rank. A single candidate is returned without any fitting.
pub fn select_rank(
    x: ArrayView2<f64>,
    candidates: &[usize],
    folds: usize,
    val_frac: f64,
    base: &NmfConfig,
    seed: u64,
) -> Result<RankSelection, NmfError> {
    let mut ranks: Vec<usize> = candidates.to_vec();
    ranks.sort_unstable();
    ranks.dedup();
    match ranks.as_slice() {
        [] => return Err(NmfError::InvalidConfig("no candidate ranks".into())),
        [only] => {
            return Ok(RankSelection {
                rank: *only,
                scores: Vec::new(),
            })
        }
        _ => {}
    }
    if folds == 0 || !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(NmfError::InvalidConfig(format!("folds={folds}, val_frac={val_frac}")));
    }
    let (n, m) = x.dim();
    let max_rank = n.min(m);
    ranks.retain(|&k| k >= 1 && k <= max_rank);
    if ranks.is_empty() {
        return Err(NmfError::InvalidConfig(format!("no candidate rank fits a {n}x{m} matrix")));
    }

    let masks = holdout_masks(n, m, folds, val_frac, seed);
    let scores = ranks
        .par_iter()
        .map(|&rank| {
            let cfg = NmfConfig { rank, ..*base };
            let fold_errors = masks
                .iter()
                .map(|mask| heldout_error(x, mask, &cfg))
                .collect::<Result<Vec<f64>, NmfError>>()?;
            let mean_error = fold_errors.iter().sum::<f64>() / fold_errors.len() as f64;
            Ok(RankScore {
                rank,
                fold_errors,
                mean_error,
            })
        })
        .collect::<Result<Vec<RankScore>, NmfError>>()?;

    let mut best = &scores[0];
    for s in &scores[1..] {
        if s.mean_error < best.mean_error {
            best = s;
        }
    }
    Ok(RankSelection {
        rank: best.rank,
        scores,
    })
}

/// `true` marks a hidden entry. Folds take consecutive blocks of one shuffled
/// order, so they are disjoint whenever `folds * val_frac <= 1`.
fn holdout_masks(n: usize, m: usize, folds: usize, val_frac: f64, seed: u64) -> Vec<Array2<bool>> {
    let total = n * m;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let size = ((val_frac * total as f64).round() as usize).clamp(1, total.saturating_sub(1).max(1));
    (0..folds)
        .map(|f| {
            let mut mask = Array2::from_elem((n, m), false);
            for r in 0..size {
                let flat = order[(f * size + r) % total];
                mask[[flat / m, flat % m]] = true;
            }
            mask
        })
        .collect()
}

fn heldout_error(x: ArrayView2<f64>, hidden: &Array2<bool>, cfg: &NmfConfig) -> Result<f64, NmfError> {
    let visible_mean = {
        let (sum, count) = Zip::from(&x)
            .and(hidden)
            .fold((0.0, 0usize), |(s, c), &v, &h| if h { (s, c) } else { (s + v, c + 1) });
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    let mut filled = x.to_owned();
    Zip::from(&mut filled).and(hidden).for_each(|v, &h| {
        if h {
            *v = visible_mean;
        }
    });
    if filled.iter().all(|&v| v == 0.0) {
        return Err(NmfError::InvalidInput("fold leaves an all-zero matrix".into()));
    }

    let init = initialize(filled.view(), cfg)?;
    let mut factors = init;
    let mut previous = f64::INFINITY;
    for _ in 0..cfg.max_iters {
        let mut solver = NmfSolver::new(filled.view(), factors, cfg.epsilon)?;
        solver.step()?;
        let current = solver.relative_error();
        factors = solver.into_factors();
        let approx = factors.w.dot(&factors.h);
        Zip::from(&mut filled)
            .and(hidden)
            .and(&approx)
            .for_each(|v, &h, &a| {
                if h {
                    *v = a;
                }
            });
        if (previous - current).abs() < cfg.tol {
            break;
        }
        previous = current;
    }

    let approx = factors.w.dot(&factors.h);
    let (err, norm) = Zip::from(&x)
        .and(hidden)
        .and(&approx)
        .fold((0.0, 0.0), |(e, s), &v, &h, &a| {
            if h {
                (e + (v - a) * (v - a), s + v * v)
            } else {
                (e, s)
            }
        });
    Ok(if norm > 0.0 { err / norm } else { err })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmf::NmfInit;

    fn low_rank(n: usize, m: usize, k: usize) -> Array2<f64> {
        let w = Array2::from_shape_fn((n, k), |(i, c)| ((i * 7 + c * 3) % 5) as f64 * 0.5 + 0.1);
        let h = Array2::from_shape_fn((k, m), |(c, j)| ((j * 11 + c * 5) % 7) as f64 * 0.3 + 0.1);
        w.dot(&h)
    }

    #[test]
    fn single_candidate_skips_cv() {
        let x = low_rank(6, 5, 2);
        let sel = select_rank(x.view(), &[4], 5, 0.2, &NmfConfig::default(), 0).unwrap();
        assert_eq!(sel.rank, 4);
        assert!(sel.scores.is_empty());
    }

    #[test]
    fn masks_are_disjoint_for_five_folds() {
        let masks = holdout_masks(10, 10, 5, 0.2, 3);
        let mut hits = Array2::<u32>::zeros((10, 10));
        for mask in &masks {
            assert_eq!(mask.iter().filter(|&&h| h).count(), 20);
            Zip::from(&mut hits).and(mask).for_each(|c, &h| *c += h as u32);
        }
        assert!(hits.iter().all(|&c| c == 1));
    }

    #[test]
    fn exact_rank_two_is_selected() {
        let x = low_rank(30, 20, 2);
        let cfg = NmfConfig {
            max_iters: 1000,
            init: NmfInit::Nndsvd,
            ..NmfConfig::default()
        };
        let sel = select_rank(x.view(), &[2, 4, 6], 5, 0.2, &cfg, 1).unwrap();
        assert_eq!(sel.rank, 2, "{:?}", sel.scores);
    }
}
