//! Random-search hyperparameter tuning with k-fold cross-validation over the
//! observed ratings.

use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnmf::{clamp_rating, rmse, CnmfError, CnmfHyperparams, CnmfTrainer};
use crate::data::SparseRatings;

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("need at least 2 ratings to tune, got {0}")]
    TooFewRatings(usize),
    #[error("invalid search space: {0}")]
    InvalidSpace(String),
    #[error(transparent)]
    Cnmf(#[from] CnmfError),
}

/// Closed interval sampled uniformly in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRange {
    pub lo: f64,
    pub hi: f64,
}

impl LogRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            return self.lo;
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        (a + (b - a) * rng.random::<f64>()).exp().clamp(self.lo, self.hi)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    fn validate(&self, name: &str) -> Result<(), TuningError> {
        if !(self.lo > 0.0) || !(self.hi >= self.lo) || !self.hi.is_finite() {
            return Err(TuningError::InvalidSpace(format!("{name}: [{}, {}]", self.lo, self.hi)));
        }
        Ok(())
    }
}

/// Closed integer interval sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: usize,
    pub hi: usize,
}

impl IntRange {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.lo..=self.hi)
    }

    pub fn contains(&self, v: usize) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub alpha: LogRange,
    pub beta: LogRange,
    pub gamma: LogRange,
    pub delta: LogRange,
    pub eta_w: LogRange,
    pub eta_h: LogRange,
    pub k: IntRange,
}

impl SearchSpace {
    /// Default ranges for a rating matrix with `n_users` rows. The rank range
    /// is `[2, min(n_users, 21) − 1]`, collapsing to `k = 2` for tiny groups.
    pub fn for_users(n_users: usize) -> Self {
        let k_hi = n_users.min(21).saturating_sub(1).max(2);
        Self {
            alpha: LogRange::new(0.04, 0.08),
            beta: LogRange::new(0.04, 0.08),
            gamma: LogRange::new(0.01, 0.04),
            delta: LogRange::new(0.01, 0.04),
            eta_w: LogRange::new(0.002, 0.009),
            eta_h: LogRange::new(0.002, 0.009),
            k: IntRange { lo: 2, hi: k_hi },
        }
    }

    /// Space containing exactly one point.
    pub fn point(hp: &CnmfHyperparams) -> Self {
        Self {
            alpha: LogRange::point(hp.alpha),
            beta: LogRange::point(hp.beta),
            gamma: LogRange::point(hp.gamma),
            delta: LogRange::point(hp.delta),
            eta_w: LogRange::point(hp.eta_w),
            eta_h: LogRange::point(hp.eta_h),
            k: IntRange { lo: hp.k, hi: hp.k },
        }
    }

    /// Geometric midpoints, with k at the middle of its range.
    pub fn midpoint(&self) -> CnmfHyperparams {
        let mid = |r: LogRange| (r.lo * r.hi).sqrt();
        CnmfHyperparams {
            k: (self.k.lo + self.k.hi) / 2,
            alpha: mid(self.alpha),
            beta: mid(self.beta),
            gamma: mid(self.gamma),
            delta: mid(self.delta),
            eta_w: mid(self.eta_w),
            eta_h: mid(self.eta_h),
            ..CnmfHyperparams::default()
        }
    }

    pub fn validate(&self) -> Result<(), TuningError> {
        self.alpha.validate("alpha")?;
        self.beta.validate("beta")?;
        self.gamma.validate("gamma")?;
        self.delta.validate("delta")?;
        self.eta_w.validate("eta_w")?;
        self.eta_h.validate("eta_h")?;
        if self.k.lo == 0 || self.k.hi < self.k.lo {
            return Err(TuningError::InvalidSpace(format!("k: [{}, {}]", self.k.lo, self.k.hi)));
        }
        Ok(())
    }

    pub fn contains(&self, hp: &CnmfHyperparams) -> bool {
        self.alpha.contains(hp.alpha)
            && self.beta.contains(hp.beta)
            && self.gamma.contains(hp.gamma)
            && self.delta.contains(hp.delta)
            && self.eta_w.contains(hp.eta_w)
            && self.eta_h.contains(hp.eta_h)
            && self.k.contains(hp.k)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R, max_iters: usize, seed: u64) -> CnmfHyperparams {
        CnmfHyperparams {
            alpha: self.alpha.sample(rng),
            beta: self.beta.sample(rng),
            gamma: self.gamma.sample(rng),
            delta: self.delta.sample(rng),
            eta_w: self.eta_w.sample(rng),
            eta_h: self.eta_h.sample(rng),
            k: self.k.sample(rng),
            max_iters,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    pub trials: usize,
    pub folds: usize,
    /// Iteration cap for every fit made while tuning.
    pub iters: usize,
    /// Hold-out share for the single-split fallback.
    pub fallback_val_frac: f64,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            folds: 5,
            iters: 100,
            fallback_val_frac: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub index: usize,
    pub hyperparams: CnmfHyperparams,
    pub fold_rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: CnmfHyperparams,
    pub best_trial: usize,
    pub trials: Vec<TrialResult>,
    /// The data was too small for k folds and one random split was used.
    pub used_fallback: bool,
}

/// One train / held-out pair over the same index space.
#[derive(Debug, Clone)]
pub struct Fold {
    pub train: SparseRatings,
    pub heldout: SparseRatings,
}

/// Partitions the observed entries into `folds` disjoint held-out sets.
pub fn cv_folds(x: &SparseRatings, folds: usize, seed: u64) -> Vec<Fold> {
    let mut order: Vec<usize> = (0..x.nnz()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0usize; x.nnz()];
    for (rank, &idx) in order.iter().enumerate() {
        fold_of[idx] = rank % folds;
    }
    (0..folds)
        .map(|f| {
            let (held, kept): (Vec<_>, Vec<_>) = x
                .entries()
                .iter()
                .zip(&fold_of)
                .partition(|(_, &ff)| ff == f);
            Fold {
                train: x.with_entries(kept.into_iter().map(|(e, _)| *e).collect()),
                heldout: x.with_entries(held.into_iter().map(|(e, _)| *e).collect()),
            }
        })
        .collect()
}

fn random_holdout(x: &SparseRatings, frac: f64, seed: u64) -> Fold {
    let mut order: Vec<usize> = (0..x.nnz()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_held = ((frac * x.nnz() as f64).round() as usize).clamp(1, x.nnz() - 1);
    let mut held = vec![false; x.nnz()];
    for &idx in &order[..n_held] {
        held[idx] = true;
    }
    let pick = |want: bool| {
        x.with_entries(
            x.entries()
                .iter()
                .zip(&held)
                .filter(|(_, &h)| h == want)
                .map(|(e, _)| *e)
                .collect(),
        )
    };
    Fold {
        train: pick(false),
        heldout: pick(true),
    }
}

/// Clamped held-out RMSE of one hyperparameter setting on one fold.
pub fn fold_rmse(fold: &Fold, mu: f64, hp: &CnmfHyperparams) -> Result<f64, CnmfError> {
    let model = CnmfTrainer::new(*hp, mu).fit(&fold.train)?.model;
    rmse(
        fold.heldout
            .entries()
            .iter()
            .map(|e| (clamp_rating(model.predict_unchecked(e.row, e.col)), e.value)),
    )
}

/// Mean k-fold CV RMSE for a fixed setting, using the same folds `tune` would.
pub fn cross_validate(x: &SparseRatings, mu: f64, hp: &CnmfHyperparams, cfg: &TuningConfig) -> Result<f64, TuningError> {
    let (folds, _) = make_folds(x, cfg)?;
    let scores = folds
        .iter()
        .map(|f| fold_rmse(f, mu, hp))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

fn make_folds(x: &SparseRatings, cfg: &TuningConfig) -> Result<(Vec<Fold>, bool), TuningError> {
    if x.nnz() < 2 {
        return Err(TuningError::TooFewRatings(x.nnz()));
    }
    if cfg.folds >= 2 && x.nnz() >= 2 * cfg.folds {
        Ok((cv_folds(x, cfg.folds, cfg.seed), false))
    } else {
        log::warn!(
            "{} ratings cannot form {} folds; tuning on one {:.0}% hold-out",
            x.nnz(),
            cfg.folds,
            cfg.fallback_val_frac * 100.0
        );
        Ok((vec![random_holdout(x, cfg.fallback_val_frac, cfg.seed)], true))
    }
}

/// Random search: every trial samples the space (log-uniform for reals,
/// uniform for k) and is scored by mean clamped CV RMSE. The lowest mean wins,
/// earliest trial on ties.
pub fn tune(x: &SparseRatings, mu: f64, space: &SearchSpace, cfg: &TuningConfig) -> Result<TuneOutcome, TuningError> {
    space.validate()?;
    let (folds, used_fallback) = make_folds(x, cfg)?;
    let trials = cfg.trials.max(1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7475_6e65);
    let candidates: Vec<CnmfHyperparams> = (0..trials)
        .map(|_| space.sample(&mut rng, cfg.iters, cfg.seed))
        .collect();

    let results = candidates
        .into_par_iter()
        .enumerate()
        .map(|(index, hp)| {
            let fold_rmse = folds
                .iter()
                .map(|f| match fold_rmse(f, mu, &hp) {
                    Err(CnmfError::Divergence { iteration }) => {
                        log::debug!("trial {index} diverged at iteration {iteration}");
                        Ok(f64::INFINITY)
                    }
                    other => other,
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mean_rmse = fold_rmse.iter().sum::<f64>() / fold_rmse.len() as f64;
            Ok(TrialResult {
                index,
                hyperparams: hp,
                fold_rmse,
                mean_rmse,
            })
        })
        .collect::<Result<Vec<_>, TuningError>>()?;

    let best = results
        .iter()
        .min_by(|a, b| a.mean_rmse.total_cmp(&b.mean_rmse).then(a.index.cmp(&b.index)))
        .expect("at least one trial");
    if !best.mean_rmse.is_finite() {
        return Err(TuningError::Cnmf(CnmfError::Divergence { iteration: 0 }));
    }
    Ok(TuneOutcome {
        best: best.hyperparams,
        best_trial: best.index,
        trials: results,
        used_fallback,
    })
}

/// Comma-separated trials log.
pub fn write_trials_csv<W: Write>(mut out: W, trials: &[TrialResult]) -> io::Result<()> {
    let folds = trials.iter().map(|t| t.fold_rmse.len()).max().unwrap_or(0);
    write!(out, "trial,k,alpha,beta,gamma,delta,eta_w,eta_h")?;
    for f in 0..folds {
        write!(out, ",fold{f}_rmse")?;
    }
    writeln!(out, ",mean_rmse")?;
    for t in trials {
        let hp = &t.hyperparams;
        write!(
            out,
            "{},{},{},{},{},{},{},{}",
            t.index, hp.k, hp.alpha, hp.beta, hp.gamma, hp.delta, hp.eta_w, hp.eta_h
        )?;
        for r in &t.fold_rmse {
            write!(out, ",{r}")?;
        }
        writeln!(out, ",{}", t.mean_rmse)?;
    }
    Ok(())
}
