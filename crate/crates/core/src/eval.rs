//! Per-group RMSE reporting and aggregate statistics.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnmf::{clamp_rating, rmse, CnmfModel};
use crate::data::SparseRatings;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no test ratings to evaluate")]
    NoTestRatings,
    #[error("no reports to summarize")]
    NoReports,
    #[error("test ratings are {test_users}x{test_items} but the model is {model_users}x{model_items}")]
    Shape {
        test_users: usize,
        test_items: usize,
        model_users: usize,
        model_items: usize,
    },
}

/// Anything that produces an unclamped rating estimate for a dense
/// (user, item) position.
pub trait RatingPredictor {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    fn predict_raw(&self, row: usize, col: usize) -> f64;
}

impl RatingPredictor for CnmfModel {
    fn n_users(&self) -> usize {
        CnmfModel::n_users(self)
    }

    fn n_items(&self) -> usize {
        CnmfModel::n_items(self)
    }

    fn predict_raw(&self, row: usize, col: usize) -> f64 {
        self.predict_unchecked(row, col)
    }
}

/// Clamped held-out RMSE of `model` on `test`.
pub fn evaluate_group<P: RatingPredictor + ?Sized>(model: &P, test: &SparseRatings) -> Result<f64, EvalError> {
    if test.is_empty() {
        return Err(EvalError::NoTestRatings);
    }
    if test.n_users() != model.n_users() || test.n_items() != model.n_items() {
        return Err(EvalError::Shape {
            test_users: test.n_users(),
            test_items: test.n_items(),
            model_users: model.n_users(),
            model_items: model.n_items(),
        });
    }
    rmse(
        test.entries()
            .iter()
            .map(|e| (clamp_rating(model.predict_raw(e.row, e.col)), e.value)),
    )
    .map_err(|_| EvalError::NoTestRatings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub seed: u64,
    pub group_id: usize,
    pub n_members: usize,
    /// Ratings the group trained on.
    pub n_ratings: usize,
    pub n_test: usize,
    pub rmse_local: f64,
    pub rmse_fed: f64,
    /// `rmse_fed − rmse_local`; negative means federation helped.
    pub delta: f64,
}

impl GroupReport {
    pub fn new(
        seed: u64,
        group_id: usize,
        n_members: usize,
        n_ratings: usize,
        n_test: usize,
        rmse_local: f64,
        rmse_fed: f64,
    ) -> Self {
        Self {
            seed,
            group_id,
            n_members,
            n_ratings,
            n_test,
            rmse_local,
            rmse_fed,
            delta: rmse_fed - rmse_local,
        }
    }
}

/// Mean with a normal-approximation 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
    pub count: usize,
    /// False when fewer than two values were given; `half_width` is then 0.
    pub ci_defined: bool,
}

pub fn mean_ci(values: &[f64]) -> Option<MeanCi> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some(MeanCi {
            mean,
            half_width: 0.0,
            count: 1,
            ci_defined: false,
        });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Some(MeanCi {
        mean,
        half_width: 1.96 * var.sqrt() / (n as f64).sqrt(),
        count: n,
        ci_defined: true,
    })
}

/// Pearson correlation; `None` for fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    /// All group reports, ordered by (seed, group).
    pub reports: Vec<GroupReport>,
    pub n_groups: usize,
    pub rmse_local: MeanCi,
    pub rmse_fed: MeanCi,
    pub delta: MeanCi,
    pub improved: usize,
    pub worsened: usize,
    pub unchanged: usize,
    /// Mean delta over the improved groups.
    pub improvement: Option<MeanCi>,
    /// Mean delta over the worsened groups.
    pub reduction: Option<MeanCi>,
    pub pearson_members_delta: Option<f64>,
    pub pearson_ratings_delta: Option<f64>,
}

impl ExperimentSummary {
    pub fn seeds(&self) -> Vec<u64> {
        let mut seeds: Vec<u64> = self.reports.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
    }

    pub fn improved_share(&self) -> f64 {
        self.improved as f64 / self.n_groups as f64
    }
}

pub fn summarize(reports: &[GroupReport]) -> Result<ExperimentSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let mut reports = reports.to_vec();
    reports.sort_by(|a, b| {
        (a.seed, a.group_id, a.n_members, a.n_ratings, a.n_test)
            .cmp(&(b.seed, b.group_id, b.n_members, b.n_ratings, b.n_test))
            .then(a.rmse_local.total_cmp(&b.rmse_local))
            .then(a.rmse_fed.total_cmp(&b.rmse_fed))
    });

    let col = |f: fn(&GroupReport) -> f64| reports.iter().map(f).collect::<Vec<f64>>();
    let local = col(|r| r.rmse_local);
    let fed = col(|r| r.rmse_fed);
    let delta = col(|r| r.delta);
    let members = col(|r| r.n_members as f64);
    let ratings = col(|r| r.n_ratings as f64);

    let improved: Vec<f64> = delta.iter().copied().filter(|&d| d < 0.0).collect();
    let worsened: Vec<f64> = delta.iter().copied().filter(|&d| d > 0.0).collect();
    let unchanged = delta.len() - improved.len() - worsened.len();

    Ok(ExperimentSummary {
        n_groups: reports.len(),
        rmse_local: mean_ci(&local).expect("nonempty"),
        rmse_fed: mean_ci(&fed).expect("nonempty"),
        delta: mean_ci(&delta).expect("nonempty"),
        improved: improved.len(),
        worsened: worsened.len(),
        unchanged,
        improvement: mean_ci(&improved),
        reduction: mean_ci(&worsened),
        pearson_members_delta: pearson(&members, &delta),
        pearson_ratings_delta: pearson(&ratings, &delta),
        reports,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "NA".into())
}

/// One-row aggregate table.
pub fn write_summary_csv<W: Write>(mut out: W, s: &ExperimentSummary) -> io::Result<()> {
    writeln!(
        out,
        "n_groups,n_improved,n_worsened,n_unchanged,rmse_local,rmse_local_ci,rmse_fed,rmse_fed_ci,\
         delta,delta_ci,improve,improve_ci,reduce,reduce_ci,pearson_members_delta,pearson_ratings_delta"
    )?;
    let pair = |m: Option<MeanCi>| match m {
        Some(m) => format!("{},{}", m.mean, m.half_width),
        None => "NA,NA".into(),
    };
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{}",
        s.n_groups,
        s.improved,
        s.worsened,
        s.unchanged,
        pair(Some(s.rmse_local)),
        pair(Some(s.rmse_fed)),
        pair(Some(s.delta)),
        pair(s.improvement),
        pair(s.reduction),
        format_args!("{},{}", fmt_opt(s.pearson_members_delta), fmt_opt(s.pearson_ratings_delta)),
    )
}

/// Per-group rows sorted by delta (most improved first): the four series of
/// the group comparison plot.
pub fn write_plot_data<W: Write>(mut out: W, reports: &[GroupReport]) -> io::Result<()> {
    let mut sorted = reports.to_vec();
    sorted.sort_by(|a, b| {
        a.delta
            .total_cmp(&b.delta)
            .then((a.seed, a.group_id).cmp(&(b.seed, b.group_id)))
    });
    writeln!(out, "x,seed,group,rmse_local,rmse_fed,members,ratings,delta")?;
    for (x, r) in sorted.iter().enumerate() {
        writeln!(
            out,
            "{x},{},{},{},{},{},{},{}",
            r.seed, r.group_id, r.rmse_local, r.rmse_fed, r.n_members, r.n_ratings, r.delta
        )?;
    }
    Ok(())
}

pub fn write_group_reports<W: Write>(mut out: W, reports: &[GroupReport]) -> io::Result<()> {
    writeln!(out, "seed,group,members,ratings,test_ratings,rmse_local,rmse_fed,delta")?;
    for r in reports {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seed, r.group_id, r.n_members, r.n_ratings, r.n_test, r.rmse_local, r.rmse_fed, r.delta
        )?;
    }
    Ok(())
}
