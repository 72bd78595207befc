//! Reconstruction attacks against published item factors.
//!
//! The adversary holds a group's `(H^g)ᵀ`, `b_H^g`, the global mean and part
//! of the group's ratings. It fits user factors and user biases against the
//! known ratings with the item side frozen, then the full reconstruction is
//! scored against every true rating of the group.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnmf::{AccessLog, CnmfError, CnmfHyperparams, CnmfInit, CnmfModel, CnmfTrainer, Frozen};
use crate::data::SparseRatings;
use crate::eval::mean_ci;

#[derive(Debug, Error, PartialEq)]
pub enum AuditError {
    #[error("fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("the group has no ratings")]
    EmptyGroup,
    #[error("item factors are {factors:?} but the group has {n_items} items")]
    Shape { factors: (usize, usize), n_items: usize },
    #[error("attack diverged twice (last at iteration {iteration})")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Cnmf(#[from] CnmfError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    UserRows,
    MovieColumns,
    RatingEntries,
}

impl AttackMode {
    pub const ALL: [AttackMode; 3] = [AttackMode::UserRows, AttackMode::MovieColumns, AttackMode::RatingEntries];

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::UserRows => "user",
            AttackMode::MovieColumns => "movie",
            AttackMode::RatingEntries => "ratings",
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "user" | "users" | "user_rows" => Ok(AttackMode::UserRows),
            "movie" | "movies" | "movie_columns" => Ok(AttackMode::MovieColumns),
            "ratings" | "rating" | "rating_entries" => Ok(AttackMode::RatingEntries),
            other => Err(format!("unknown attack mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackKnowledge {
    pub mode: AttackMode,
    pub fraction: f64,
    pub subset: SparseRatings,
    pub seed: u64,
}

/// `⌈fraction · total⌉`, at least one, at most `total`.
pub fn sample_count(fraction: f64, total: usize) -> usize {
    let raw = (fraction * total as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(total)
}

fn choose<T: Copy>(pool: &[T], count: usize, rng: &mut ChaCha8Rng) -> Vec<T> {
    index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect()
}

/// Uniform sample without replacement of rows, rated columns or entries.
pub fn sample_knowledge(x: &SparseRatings, mode: AttackMode, fraction: f64, seed: u64) -> Result<AttackKnowledge, AuditError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AuditError::InvalidFraction(fraction));
    }
    if x.is_empty() {
        return Err(AuditError::EmptyGroup);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = x.entries();
    let kept = match mode {
        AttackMode::UserRows => {
            let rows: Vec<usize> = (0..x.n_users()).collect();
            let mut pick = vec![false; x.n_users()];
            for r in choose(&rows, sample_count(fraction, rows.len()), &mut rng) {
                pick[r] = true;
            }
            entries.iter().filter(|e| pick[e.row]).copied().collect()
        }
        AttackMode::MovieColumns => {
            let mut rated: Vec<usize> = entries.iter().map(|e| e.col).collect();
            rated.sort_unstable();
            rated.dedup();
            let mut pick = vec![false; x.n_items()];
            for c in choose(&rated, sample_count(fraction, rated.len()), &mut rng) {
                pick[c] = true;
            }
            entries.iter().filter(|e| pick[e.col]).copied().collect()
        }
        AttackMode::RatingEntries => {
            let mut picked = choose(entries, sample_count(fraction, entries.len()), &mut rng);
            picked.shuffle(&mut rng);
            picked
        }
    };
    Ok(AttackKnowledge {
        mode,
        fraction,
        subset: x.with_entries(kept),
        seed,
    })
}

/// What was published about one group.
#[derive(Debug, Clone, PartialEq)]
pub struct PublishedItems {
    /// k × m.
    pub h: Array2<f64>,
    pub b_h: Array1<f64>,
    pub mu_global: f64,
}

impl PublishedItems {
    pub fn from_model(model: &CnmfModel, mu_global: f64) -> Self {
        Self {
            h: model.h.clone(),
            b_h: model.b_h.clone(),
            mu_global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Regularization and learning rates for the user side; `k` is taken
    /// from the published factors.
    pub hyperparams: CnmfHyperparams,
    pub iters: usize,
    pub learn_user_biases: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            hyperparams: CnmfHyperparams::default(),
            iters: 500,
            learn_user_biases: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub mode: AttackMode,
    pub fraction: f64,
    pub relative_error: f64,
    pub known_ratings: usize,
    pub retried: bool,
}

/// `Σ (x − x̂)² / Σ x²` over the stored ratings of `x`.
pub fn relative_error_on_ratings(x: &SparseRatings, model: &CnmfModel) -> f64 {
    let (mut err, mut norm) = (0.0, 0.0);
    for e in x.entries() {
        let d = e.value - model.predict_unchecked(e.row, e.col);
        err += d * d;
        norm += e.value * e.value;
    }
    err / norm
}

/// Fits the adversary's user side. An optional access log records every
/// rating coordinate the optimizer reads.
pub fn fit_adversary(
    knowledge: &SparseRatings,
    published: &PublishedItems,
    cfg: &AttackConfig,
    log: Option<Arc<AccessLog>>,
) -> Result<(CnmfModel, bool), AuditError> {
    let (k, m) = published.h.dim();
    if m != knowledge.n_items() || published.b_h.len() != m {
        return Err(AuditError::Shape {
            factors: (k, m),
            n_items: knowledge.n_items(),
        });
    }
    let mut frozen = Frozen::item_side();
    frozen.user_biases = !cfg.learn_user_biases;
    let attempt = |eta_w: f64| {
        let hp = CnmfHyperparams {
            k,
            eta_w,
            max_iters: cfg.iters,
            ..cfg.hyperparams
        };
        let mut trainer = CnmfTrainer::new(hp, published.mu_global)
            .frozen(frozen)
            .init(CnmfInit {
                h: Some(published.h.clone()),
                b_h: Some(published.b_h.clone()),
                ..CnmfInit::default()
            });
        if let Some(log) = &log {
            trainer = trainer.access_log(Arc::clone(log));
        }
        trainer.fit(knowledge)
    };
    match attempt(cfg.hyperparams.eta_w) {
        Ok(fit) => Ok((fit.model, false)),
        Err(CnmfError::Divergence { .. }) => match attempt(cfg.hyperparams.eta_w / 10.0) {
            Ok(fit) => Ok((fit.model, true)),
            Err(CnmfError::Divergence { iteration }) => Err(AuditError::Diverged { iteration }),
            Err(e) => Err(e.into()),
        },
        Err(e) => Err(e.into()),
    }
}

/// Runs one attack and scores it on all of the group's true ratings.
pub fn reconstruct(
    x_true: &SparseRatings,
    knowledge: &AttackKnowledge,
    published: &PublishedItems,
    cfg: &AttackConfig,
) -> Result<AttackResult, AuditError> {
    if x_true.is_empty() {
        return Err(AuditError::EmptyGroup);
    }
    let (model, retried) = fit_adversary(&knowledge.subset, published, cfg, None)?;
    Ok(AttackResult {
        mode: knowledge.mode,
        fraction: knowledge.fraction,
        relative_error: relative_error_on_ratings(x_true, &model),
        known_ratings: knowledge.subset.nnz(),
        retried,
    })
}

/// One attacked group.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTarget {
    pub group_id: usize,
    pub ratings: SparseRatings,
    pub published: PublishedItems,
    pub config: AttackConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub group_id: usize,
    pub mode: AttackMode,
    pub fraction: f64,
    pub seed: u64,
    /// `None` when the attack failed.
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: AttackMode,
    pub fraction: f64,
    pub mean: f64,
    pub ci: f64,
    pub n_cells: usize,
    pub n_failed: usize,
}

/// `0.05, 0.10, …, 1.00`.
pub fn default_fractions() -> Vec<f64> {
    (1..=20).map(|i| i as f64 / 20.0).collect()
}

fn cell_seed(seed: u64, group_id: usize, mode: AttackMode, fraction_index: usize) -> u64 {
    seed.wrapping_mul(0x2545_f491_4f6c_dd1d)
        ^ ((group_id as u64) << 24)
        ^ ((mode as u64) << 20)
        ^ fraction_index as u64
}

/// Every (group, mode, fraction, seed) attack, in deterministic order.
pub fn attack_cells(targets: &[AttackTarget], modes: &[AttackMode], fractions: &[f64], seeds: &[u64]) -> Vec<AttackCell> {
    let mut jobs = Vec::new();
    for t in targets {
        for &mode in modes {
            for (fi, &fraction) in fractions.iter().enumerate() {
                for &seed in seeds {
                    jobs.push((t, mode, fi, fraction, seed));
                }
            }
        }
    }
    jobs.into_par_iter()
        .map(|(t, mode, fi, fraction, seed)| {
            let outcome = sample_knowledge(&t.ratings, mode, fraction, cell_seed(seed, t.group_id, mode, fi))
                .and_then(|kn| reconstruct(&t.ratings, &kn, &t.published, &t.config));
            if let Err(e) = &outcome {
                log::warn!("attack {mode} at {fraction} on group {} failed: {e}", t.group_id);
            }
            AttackCell {
                group_id: t.group_id,
                mode,
                fraction,
                seed,
                relative_error: outcome.ok().map(|r| r.relative_error),
            }
        })
        .collect()
}

/// Mean and CI per (mode, fraction), failed cells excluded and counted.
pub fn curve(cells: &[AttackCell], modes: &[AttackMode], fractions: &[f64]) -> Vec<CurvePoint> {
    let mut out = Vec::new();
    for &mode in modes {
        for &fraction in fractions {
            let here: Vec<&AttackCell> = cells
                .iter()
                .filter(|c| c.mode == mode && c.fraction == fraction)
                .collect();
            let ok: Vec<f64> = here.iter().filter_map(|c| c.relative_error).collect();
            let stats = mean_ci(&ok);
            out.push(CurvePoint {
                mode,
                fraction,
                mean: stats.map_or(f64::NAN, |s| s.mean),
                ci: stats.map_or(f64::NAN, |s| s.half_width),
                n_cells: ok.len(),
                n_failed: here.len() - ok.len(),
            });
        }
    }
    out
}

pub fn attack_sweep(targets: &[AttackTarget], modes: &[AttackMode], fractions: &[f64], seeds: &[u64]) -> Vec<CurvePoint> {
    curve(&attack_cells(targets, modes, fractions, seeds), modes, fractions)
}

pub fn write_curve_csv<W: Write>(mut out: W, points: &[CurvePoint]) -> io::Result<()> {
    writeln!(out, "mode,fraction,mean_relative_error,ci_half_width,n_cells,n_failed")?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.mode, p.fraction, p.mean, p.ci, p.n_cells, p.n_failed
        )?;
    }
    Ok(())
}

/// Best non-increasing fit (pool adjacent violators, equal weights).
pub fn isotonic_decreasing(values: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.pop();
            let last = blocks.last_mut().unwrap();
            *last = ((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

/// Largest gap between a curve and its best non-increasing fit.
pub fn monotone_violation(values: &[f64]) -> f64 {
    isotonic_decreasing(values)
        .iter()
        .zip(values)
        .map(|(f, v)| (f - v).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn group(n: usize, m: usize) -> SparseRatings {
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..m {
                if (i * 7 + j * 3) % 4 != 0 {
                    entries.push((i, j, ((i + 2 * j) % 5 + 1) as f64));
                }
            }
        }
        SparseRatings::from_dense_entries(n, m, &entries)
    }

    #[test]
    fn counts_round_up() {
        assert_eq!(sample_count(0.25, 10), 3);
        assert_eq!(sample_count(0.05, 400), 20);
        assert_eq!(sample_count(0.3, 10), 3);
        assert_eq!(sample_count(0.001, 10), 1);
        assert_eq!(sample_count(1.0, 7), 7);
    }

    #[test]
    fn full_knowledge_is_everything() {
        let x = group(10, 8);
        for mode in AttackMode::ALL {
            let kn = sample_knowledge(&x, mode, 1.0, 3).unwrap();
            assert_eq!(kn.subset, x);
        }
    }

    #[test]
    fn user_mode_keeps_whole_rows() {
        let x = group(10, 8);
        let kn = sample_knowledge(&x, AttackMode::UserRows, 0.25, 1).unwrap();
        let mut rows: Vec<usize> = kn.subset.entries().iter().map(|e| e.row).collect();
        rows.dedup();
        assert_eq!(rows.len(), 3);
        for &r in &rows {
            let full = x.entries().iter().filter(|e| e.row == r).count();
            let kept = kn.subset.entries().iter().filter(|e| e.row == r).count();
            assert_eq!(full, kept);
        }
    }

    #[test]
    fn subsets_are_subsets() {
        let x = group(12, 9);
        for mode in AttackMode::ALL {
            let kn = sample_knowledge(&x, mode, 0.4, 9).unwrap();
            for e in kn.subset.entries() {
                assert_eq!(x.get(e.row, e.col), Some(e.value));
            }
        }
        let kn = sample_knowledge(&x, AttackMode::RatingEntries, 0.05, 9).unwrap();
        assert_eq!(kn.subset.nnz(), sample_count(0.05, x.nnz()));
    }

    #[test]
    fn bad_fraction() {
        let x = group(3, 3);
        assert_eq!(
            sample_knowledge(&x, AttackMode::UserRows, 0.0, 0),
            Err(AuditError::InvalidFraction(0.0))
        );
        assert!(sample_knowledge(&x, AttackMode::UserRows, 1.5, 0).is_err());
    }

    #[test]
    fn isotonic_fit() {
        assert_eq!(isotonic_decreasing(&[3.0, 2.0, 1.0]), vec![3.0, 2.0, 1.0]);
        assert_eq!(isotonic_decreasing(&[1.0, 3.0]), vec![2.0, 2.0]);
        assert_eq!(monotone_violation(&[3.0, 2.0, 2.0, 1.0]), 0.0);
        assert!((monotone_violation(&[1.0, 3.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn curve_csv_rows() {
        let cells = vec![
            AttackCell {
                group_id: 0,
                mode: AttackMode::UserRows,
                fraction: 1.0,
                seed: 0,
                relative_error: Some(0.2),
            },
            AttackCell {
                group_id: 1,
                mode: AttackMode::UserRows,
                fraction: 1.0,
                seed: 0,
                relative_error: None,
            },
        ];
        let pts = curve(&cells, &[AttackMode::UserRows], &[1.0]);
        assert_eq!(pts[0].n_cells, 1);
        assert_eq!(pts[0].n_failed, 1);
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &pts).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
    }
}
