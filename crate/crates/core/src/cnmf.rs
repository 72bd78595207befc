//! Collaborative NMF: bias-aware matrix completion restricted to observed
//! ratings.
//!
//! The prediction for user `i` and item `j` is `W[i,:]·H[:,j] + b_W[i] +
//! b_H[j] + μ`. Each iteration updates, in order, the user biases, the item
//! biases, `W` and `H`. Bias steps are per-coordinate gradient steps whose
//! sums run over the coordinate's observed ratings. Factor steps are masked
//! multiplicative updates in which the data term and the prediction term only
//! see observed coordinates, with Tikhonov terms `αW` and `βH` in the
//! denominators. Entries driven negative are projected to zero and counted.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SparseRatings;

const DIVISION_GUARD: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CnmfError {
    #[error("mean of an empty rating set is undefined")]
    EmptyRatings,
    #[error("non-finite parameter at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("index ({row}, {col}) outside a {n_users}x{n_items} model")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_users: usize,
        n_items: usize,
    },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CnmfHyperparams {
    pub k: usize,
    /// Regularization on W.
    pub alpha: f64,
    /// Regularization on H.
    pub beta: f64,
    /// Regularization on the user biases.
    pub gamma: f64,
    /// Regularization on the item biases.
    pub delta: f64,
    pub eta_w: f64,
    pub eta_h: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for CnmfHyperparams {
    /// Midpoints of the tuning ranges.
    fn default() -> Self {
        Self {
            k: 10,
            alpha: 0.06,
            beta: 0.06,
            gamma: 0.025,
            delta: 0.025,
            eta_w: 0.0055,
            eta_h: 0.0055,
            max_iters: 500,
            seed: 0,
        }
    }
}

impl CnmfHyperparams {
    pub fn validate(&self) -> Result<(), CnmfError> {
        let bad = |msg: &str| Err(CnmfError::InvalidHyperparams(msg.to_string()));
        if self.k == 0 {
            return bad("k must be positive");
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.eta_w > 0.0) || !(self.eta_h > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }
}

/// A trained client model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnmfModel {
    /// n × k user factors.
    pub w: Array2<f64>,
    /// k × m item factors.
    pub h: Array2<f64>,
    pub b_w: Array1<f64>,
    pub b_h: Array1<f64>,
    pub mu: f64,
    pub hyperparams: CnmfHyperparams,
}

impl CnmfModel {
    pub fn n_users(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.h.ncols()
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    /// Unclamped prediction.
    pub fn predict(&self, row: usize, col: usize) -> Result<f64, CnmfError> {
        if row >= self.n_users() || col >= self.n_items() {
            return Err(CnmfError::IndexOutOfRange {
                row,
                col,
                n_users: self.n_users(),
                n_items: self.n_items(),
            });
        }
        Ok(self.predict_unchecked(row, col))
    }

    pub(crate) fn predict_unchecked(&self, row: usize, col: usize) -> f64 {
        let dot = self.w.row(row).dot(&self.h.column(col));
        dot + self.b_w[row] + self.b_h[col] + self.mu
    }

    pub fn check_shapes(&self) -> Result<(), CnmfError> {
        let (n, k) = self.w.dim();
        let (k2, m) = self.h.dim();
        if k != k2 || self.b_w.len() != n || self.b_h.len() != m {
            return Err(CnmfError::Shape(format!(
                "W {:?}, H {:?}, b_W {}, b_H {}",
                self.w.dim(),
                self.h.dim(),
                self.b_w.len(),
                self.b_h.len()
            )));
        }
        Ok(())
    }
}

/// Arithmetic mean of the stored ratings.
pub fn group_mean(x: &SparseRatings) -> Result<f64, CnmfError> {
    x.mean().ok_or(CnmfError::EmptyRatings)
}

/// Root-mean-square error over `(predicted, actual)` pairs.
pub fn rmse<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Result<f64, CnmfError> {
    let (sum, count) = pairs
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (p, a)| (s + (p - a) * (p - a), c + 1));
    if count == 0 {
        return Err(CnmfError::EmptyRatings);
    }
    Ok((sum / count as f64).sqrt())
}

/// Clamp to the 1–5 star scale. Applied at evaluation time only.
pub fn clamp_rating(v: f64) -> f64 {
    v.clamp(1.0, 5.0)
}

/// Diagnostic score `‖X − X̂‖²_F / √(mn)` over the full matrix, unobserved
/// cells counting as zeros in `X`. Not a root-mean-square error.
pub fn frobenius_score(model: &CnmfModel, x: &SparseRatings) -> Result<f64, CnmfError> {
    let (n, m) = (model.n_users(), model.n_items());
    if x.n_users() != n || x.n_items() != m {
        return Err(CnmfError::Shape(format!(
            "ratings {}x{} vs model {n}x{m}",
            x.n_users(),
            x.n_items()
        )));
    }
    let pred = model.w.dot(&model.h);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let p = pred[[i, j]] + model.b_w[i] + model.b_h[j] + model.mu;
            total += p * p;
        }
    }
    for e in x.entries() {
        let p = pred[[e.row, e.col]] + model.b_w[e.row] + model.b_h[e.col] + model.mu;
        total += (e.value - p) * (e.value - p) - p * p;
    }
    Ok(total / ((m * n) as f64).sqrt())
}

/// Per-coordinate read counter, used to verify that an optimizer only touches
/// the coordinates it was given.
#[derive(Debug)]
pub struct AccessLog {
    n_items: usize,
    counts: Vec<AtomicU64>,
}

impl AccessLog {
    pub fn new(n_users: usize, n_items: usize) -> Self {
        Self {
            n_items,
            counts: (0..n_users * n_items).map(|_| AtomicU64::new(0)).collect(),
        }
    }

    fn touch(&self, row: usize, col: usize) {
        self.counts[row * self.n_items + col].fetch_add(1, Ordering::Relaxed);
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.n_items + col].load(Ordering::Relaxed)
    }

    /// Coordinates read at least once.
    pub fn touched(&self) -> Vec<(usize, usize)> {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, c)| c.load(Ordering::Relaxed) > 0)
            .map(|(flat, _)| (flat / self.n_items, flat % self.n_items))
            .collect()
    }
}

/// Observed ratings in row-major (CSR) and column-major (CSC) layouts.
struct ObservedMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    row_cols: Vec<usize>,
    row_vals: Vec<f64>,
    col_ptr: Vec<usize>,
    col_rows: Vec<usize>,
    col_vals: Vec<f64>,
    log: Option<Arc<AccessLog>>,
}

impl ObservedMatrix {
    fn new(x: &SparseRatings, log: Option<Arc<AccessLog>>) -> Self {
        let (n, m) = (x.n_users(), x.n_items());
        let entries = x.entries();
        let mut row_ptr = vec![0; n + 1];
        let mut col_ptr = vec![0; m + 1];
        for e in entries {
            row_ptr[e.row + 1] += 1;
            col_ptr[e.col + 1] += 1;
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        for j in 0..m {
            col_ptr[j + 1] += col_ptr[j];
        }
        // Entries are sorted by (row, col), so CSR is a direct copy.
        let row_cols = entries.iter().map(|e| e.col).collect();
        let row_vals = entries.iter().map(|e| e.value).collect();
        let mut fill = col_ptr.clone();
        let mut col_rows = vec![0; entries.len()];
        let mut col_vals = vec![0.0; entries.len()];
        for e in entries {
            let slot = fill[e.col];
            col_rows[slot] = e.row;
            col_vals[slot] = e.value;
            fill[e.col] += 1;
        }
        Self {
            n_rows: n,
            n_cols: m,
            row_ptr,
            row_cols,
            row_vals,
            col_ptr,
            col_rows,
            col_vals,
            log,
        }
    }

    fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        if let Some(log) = &self.log {
            for &j in &self.row_cols[a..b] {
                log.touch(i, j);
            }
        }
        (&self.row_cols[a..b], &self.row_vals[a..b])
    }

    fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.col_ptr[j], self.col_ptr[j + 1]);
        if let Some(log) = &self.log {
            for &i in &self.col_rows[a..b] {
                log.touch(i, j);
            }
        }
        (&self.col_rows[a..b], &self.col_vals[a..b])
    }
}

/// Which parameter blocks stay fixed during a fit.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frozen {
    pub user_factors: bool,
    pub item_factors: bool,
    pub user_biases: bool,
    pub item_biases: bool,
}

impl Frozen {
    pub const NONE: Frozen = Frozen {
        user_factors: false,
        item_factors: false,
        user_biases: false,
        item_biases: false,
    };

    pub fn biases() -> Self {
        Self {
            user_biases: true,
            item_biases: true,
            ..Self::NONE
        }
    }

    pub fn factors() -> Self {
        Self {
            user_factors: true,
            item_factors: true,
            ..Self::NONE
        }
    }

    /// Only the user side (W and b_W) is trained.
    pub fn item_side() -> Self {
        Self {
            item_factors: true,
            item_biases: true,
            ..Self::NONE
        }
    }
}

/// Starting parameters; missing parts fall back to the defaults (random
/// factors, zero biases).
#[derive(Debug, Clone, Default)]
pub struct CnmfInit {
    pub w: Option<Array2<f64>>,
    pub h: Option<Array2<f64>>,
    pub b_w: Option<Array1<f64>>,
    pub b_h: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnmfFit {
    pub model: CnmfModel,
    pub iterations: usize,
    /// Number of factor entries projected back to zero.
    pub projections: u64,
    /// Training RMSE over observed entries after each iteration.
    pub train_rmse: Vec<f64>,
    pub best_validation_rmse: Option<f64>,
}

/// Configurable CNMF fit. [`cnmf_fit`] covers the common case.
#[derive(Debug, Clone)]
pub struct CnmfTrainer<'a> {
    pub hyperparams: CnmfHyperparams,
    pub mu: f64,
    pub frozen: Frozen,
    pub init: CnmfInit,
    /// Early-stop on clamped RMSE over these ratings.
    pub validation: Option<&'a SparseRatings>,
    pub patience: usize,
    pub access_log: Option<Arc<AccessLog>>,
    pub record_train_rmse: bool,
}

impl<'a> CnmfTrainer<'a> {
    pub fn new(hyperparams: CnmfHyperparams, mu: f64) -> Self {
        Self {
            hyperparams,
            mu,
            frozen: Frozen::NONE,
            init: CnmfInit::default(),
            validation: None,
            patience: 10,
            access_log: None,
            record_train_rmse: false,
        }
    }

    pub fn frozen(mut self, frozen: Frozen) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn init(mut self, init: CnmfInit) -> Self {
        self.init = init;
        self
    }

    pub fn validation(mut self, validation: &'a SparseRatings) -> Self {
        self.validation = Some(validation);
        self
    }

    pub fn access_log(mut self, log: Arc<AccessLog>) -> Self {
        self.access_log = Some(log);
        self
    }

    pub fn record_train_rmse(mut self) -> Self {
        self.record_train_rmse = true;
        self
    }

    pub fn fit(&self, x: &SparseRatings) -> Result<CnmfFit, CnmfError> {
        let hp = self.hyperparams;
        hp.validate()?;
        if x.is_empty() {
            return Err(CnmfError::EmptyRatings);
        }
        let (n, m, k) = (x.n_users(), x.n_items(), hp.k);
        let obs = ObservedMatrix::new(x, self.access_log.clone());
        let mut state = State::initialize(n, m, &hp, self.mu, &self.init)?;

        let user_counts: Vec<usize> = (0..n).map(|i| obs.row_ptr[i + 1] - obs.row_ptr[i]).collect();
        let item_counts: Vec<usize> = (0..m).map(|j| obs.col_ptr[j + 1] - obs.col_ptr[j]).collect();

        let mut projections = 0u64;
        let mut train_rmse = Vec::new();
        let mut best: Option<(f64, State)> = None;
        let mut since_best = 0usize;
        let mut iterations = 0;

        for it in 1..=hp.max_iters {
            iterations = it;
            if !self.frozen.user_biases {
                state.update_user_biases(&obs, &user_counts, hp.gamma, hp.eta_w);
            }
            if !self.frozen.item_biases {
                state.update_item_biases(&obs, &item_counts, hp.delta, hp.eta_h);
            }
            if !self.frozen.user_factors {
                projections += state.update_user_factors(&obs, hp.alpha);
            }
            if !self.frozen.item_factors {
                projections += state.update_item_factors(&obs, hp.beta);
            }
            if !state.is_finite() {
                return Err(CnmfError::Divergence { iteration: it });
            }
            if self.record_train_rmse {
                train_rmse.push(state.observed_rmse(&obs));
            }
            if let Some(val) = self.validation {
                let score = state.clamped_rmse(val);
                match &best {
                    Some((b, _)) if score >= *b => {
                        since_best += 1;
                        if since_best >= self.patience {
                            break;
                        }
                    }
                    _ => {
                        best = Some((score, state.clone()));
                        since_best = 0;
                    }
                }
            }
        }

        let best_validation_rmse = best.as_ref().map(|(s, _)| *s);
        if let Some((_, s)) = best {
            state = s;
        }
        Ok(CnmfFit {
            model: state.into_model(k, hp),
            iterations,
            projections,
            train_rmse,
            best_validation_rmse,
        })
    }
}

/// Fits a CNMF model with random factors and zero biases.
pub fn cnmf_fit(x: &SparseRatings, mu: f64, hp: &CnmfHyperparams) -> Result<CnmfModel, CnmfError> {
    Ok(CnmfTrainer::new(*hp, mu).fit(x)?.model)
}

/// Working parameters. Item factors are stored transposed (m × k) so both
/// sides are row-contiguous.
#[derive(Debug, Clone)]
struct State {
    k: usize,
    mu: f64,
    w: Vec<f64>,
    ht: Vec<f64>,
    b_w: Vec<f64>,
    b_h: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl State {
    fn initialize(n: usize, m: usize, hp: &CnmfHyperparams, mu: f64, init: &CnmfInit) -> Result<Self, CnmfError> {
        let k = hp.k;
        let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
        let upper = 1.0 / (k as f64).sqrt();
        let w = match &init.w {
            Some(w) if w.dim() == (n, k) => w.iter().copied().collect(),
            Some(w) => return Err(CnmfError::Shape(format!("initial W {:?}, expected ({n}, {k})", w.dim()))),
            None => (0..n * k).map(|_| rng.random::<f64>() * upper).collect(),
        };
        let ht = match &init.h {
            Some(h) if h.dim() == (k, m) => h.t().iter().copied().collect(),
            Some(h) => return Err(CnmfError::Shape(format!("initial H {:?}, expected ({k}, {m})", h.dim()))),
            None => (0..m * k).map(|_| rng.random::<f64>() * upper).collect(),
        };
        let vector = |v: &Option<Array1<f64>>, len: usize, what: &str| match v {
            Some(v) if v.len() == len => Ok(v.to_vec()),
            Some(v) => Err(CnmfError::Shape(format!("initial {what} has length {}, expected {len}", v.len()))),
            None => Ok(vec![0.0; len]),
        };
        Ok(Self {
            k,
            mu,
            w,
            ht,
            b_w: vector(&init.b_w, n, "b_W")?,
            b_h: vector(&init.b_h, m, "b_H")?,
        })
    }

    fn w_row(&self, i: usize) -> &[f64] {
        &self.w[i * self.k..(i + 1) * self.k]
    }

    fn h_row(&self, j: usize) -> &[f64] {
        &self.ht[j * self.k..(j + 1) * self.k]
    }

    fn predict(&self, i: usize, j: usize) -> f64 {
        dot(self.w_row(i), self.h_row(j)) + self.b_w[i] + self.b_h[j] + self.mu
    }

    /// `b_W[i] += η Σ_j (err_ij − γ b_W[i])` over user i's observed items.
    /// The step is capped at the exact coordinate minimizer `1 / (n_i (1+γ))`
    /// so heavy raters cannot make the step unstable.
    fn update_user_biases(&mut self, obs: &ObservedMatrix, counts: &[usize], reg: f64, eta: f64) {
        for i in 0..obs.n_rows {
            if counts[i] == 0 {
                continue;
            }
            let (cols, vals) = obs.row(i);
            let err_sum: f64 = cols.iter().zip(vals).map(|(&j, &x)| x - self.predict(i, j)).sum();
            let n_i = counts[i] as f64;
            let step = eta.min(1.0 / (n_i * (1.0 + reg)));
            self.b_w[i] += step * (err_sum - n_i * reg * self.b_w[i]);
        }
    }

    fn update_item_biases(&mut self, obs: &ObservedMatrix, counts: &[usize], reg: f64, eta: f64) {
        for j in 0..obs.n_cols {
            if counts[j] == 0 {
                continue;
            }
            let (rows, vals) = obs.col(j);
            let err_sum: f64 = rows.iter().zip(vals).map(|(&i, &x)| x - self.predict(i, j)).sum();
            let n_j = counts[j] as f64;
            let step = eta.min(1.0 / (n_j * (1.0 + reg)));
            self.b_h[j] += step * (err_sum - n_j * reg * self.b_h[j]);
        }
    }

    /// `W ← W ⊙ (X Hᵀ) / (X̂ Hᵀ + αW)` with both products over observed cells.
    fn update_user_factors(&mut self, obs: &ObservedMatrix, alpha: f64) -> u64 {
        let k = self.k;
        let mut numer = vec![0.0; k];
        let mut denom = vec![0.0; k];
        let mut projected = 0;
        for i in 0..obs.n_rows {
            numer.iter_mut().for_each(|v| *v = 0.0);
            denom.iter_mut().for_each(|v| *v = 0.0);
            let (cols, vals) = obs.row(i);
            for (&j, &x) in cols.iter().zip(vals) {
                let est = self.predict(i, j);
                let h = self.h_row(j);
                for c in 0..k {
                    numer[c] += x * h[c];
                    denom[c] += est * h[c];
                }
            }
            let w = &mut self.w[i * k..(i + 1) * k];
            for c in 0..k {
                let reg = alpha * w[c];
                projected += multiplicative_step(&mut w[c], numer[c], denom[c] + reg);
            }
        }
        projected
    }

    /// `H ← H ⊙ (Wᵀ X) / (Wᵀ X̂ + βH)` with both products over observed cells.
    fn update_item_factors(&mut self, obs: &ObservedMatrix, beta: f64) -> u64 {
        let k = self.k;
        let mut numer = vec![0.0; k];
        let mut denom = vec![0.0; k];
        let mut projected = 0;
        for j in 0..obs.n_cols {
            numer.iter_mut().for_each(|v| *v = 0.0);
            denom.iter_mut().for_each(|v| *v = 0.0);
            let (rows, vals) = obs.col(j);
            for (&i, &x) in rows.iter().zip(vals) {
                let est = self.predict(i, j);
                let w = self.w_row(i);
                for c in 0..k {
                    numer[c] += x * w[c];
                    denom[c] += est * w[c];
                }
            }
            let h = &mut self.ht[j * k..(j + 1) * k];
            for c in 0..k {
                let reg = beta * h[c];
                projected += multiplicative_step(&mut h[c], numer[c], denom[c] + reg);
            }
        }
        projected
    }

    fn is_finite(&self) -> bool {
        self.w
            .iter()
            .chain(&self.ht)
            .chain(&self.b_w)
            .chain(&self.b_h)
            .all(|v| v.is_finite())
    }

    fn observed_rmse(&self, obs: &ObservedMatrix) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..obs.n_rows {
            let (a, b) = (obs.row_ptr[i], obs.row_ptr[i + 1]);
            for (&j, &x) in obs.row_cols[a..b].iter().zip(&obs.row_vals[a..b]) {
                let e = x - self.predict(i, j);
                sum += e * e;
                count += 1;
            }
        }
        (sum / count.max(1) as f64).sqrt()
    }

    fn clamped_rmse(&self, ratings: &SparseRatings) -> f64 {
        let pairs = ratings
            .entries()
            .iter()
            .map(|e| (clamp_rating(self.predict(e.row, e.col)), e.value));
        rmse(pairs).unwrap_or(f64::INFINITY)
    }

    fn into_model(self, k: usize, hyperparams: CnmfHyperparams) -> CnmfModel {
        let n = self.b_w.len();
        let m = self.b_h.len();
        let w = Array2::from_shape_vec((n, k), self.w).expect("W buffer has n*k entries");
        let ht = Array2::from_shape_vec((m, k), self.ht).expect("H buffer has m*k entries");
        CnmfModel {
            w,
            h: ht.t().to_owned(),
            b_w: Array1::from(self.b_w),
            b_h: Array1::from(self.b_h),
            mu: self.mu,
            hyperparams,
        }
    }
}

/// Returns 1 when the entry had to be projected to zero.
fn multiplicative_step(value: &mut f64, numer: f64, denom: f64) -> u64 {
    let denom = denom + DIVISION_GUARD;
    if denom <= 0.0 {
        let was_positive = *value > 0.0;
        *value = 0.0;
        return was_positive as u64;
    }
    *value *= numer / denom;
    if *value < 0.0 {
        *value = 0.0;
        return 1;
    }
    0
}
