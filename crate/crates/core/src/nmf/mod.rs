//! Dense non-negative matrix factorization by Lee–Seung multiplicative
//! updates under the Frobenius objective.

mod nndsvd;
mod rank;

pub use nndsvd::nndsvd_init;
pub use rank::{select_rank, RankScore, RankSelection};

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NmfError {
    #[error("non-finite factor entry at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("relative error undefined for a zero-norm matrix")]
    ZeroNorm,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("SVD failed: {0}")]
    Svd(String),
}

/// Non-negative factors with `w.ncols() == h.nrows() == rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseFactorPair {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
}

impl DenseFactorPair {
    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn reconstruct(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }

    pub fn is_non_negative(&self) -> bool {
        self.w.iter().chain(self.h.iter()).all(|&v| v >= 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NmfInit {
    Nndsvd,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmfConfig {
    pub rank: usize,
    pub max_iters: usize,
    /// Stop once the relative error changes by less than this between sweeps.
    pub tol: f64,
    pub init: NmfInit,
    /// Added to update denominators.
    pub epsilon: f64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            rank: 2,
            max_iters: 1000,
            tol: 1e-6,
            init: NmfInit::Nndsvd,
            epsilon: 1e-12,
        }
    }
}

impl NmfConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NmfError> {
        if self.rank == 0 {
            return Err(NmfError::InvalidConfig("rank must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(NmfError::InvalidConfig("tol must be positive".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(NmfError::InvalidConfig("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmfFit {
    pub factors: DenseFactorPair,
    pub relative_error: f64,
    pub iterations: usize,
    /// Relative error after each full W+H sweep.
    pub history: Vec<f64>,
}

/// `‖X − WH‖²_F / ‖X‖²_F`.
pub fn relative_error(x: ArrayView2<f64>, w: ArrayView2<f64>, h: ArrayView2<f64>) -> Result<f64, NmfError> {
    if w.nrows() != x.nrows() || h.ncols() != x.ncols() || w.ncols() != h.nrows() {
        return Err(NmfError::Shape(format!(
            "X {:?}, W {:?}, H {:?}",
            x.dim(),
            w.dim(),
            h.dim()
        )));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>();
    if norm == 0.0 {
        return Err(NmfError::ZeroNorm);
    }
    let approx = w.dot(&h);
    let resid = Zip::from(&x)
        .and(&approx)
        .fold(0.0, |acc, &a, &b| acc + (a - b) * (a - b));
    Ok(resid / norm)
}

/// Uniform `[0, 1)` factors scaled so that `WH` has the same mean as `X`.
pub fn random_init(x: ArrayView2<f64>, rank: usize, seed: u64) -> DenseFactorPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = x.dim();
    let mean = x.mean().unwrap_or(0.0).max(0.0);
    let scale = (mean / rank as f64).sqrt();
    let w = Array2::from_shape_simple_fn((n, rank), || scale * rng.random::<f64>());
    let h = Array2::from_shape_simple_fn((rank, m), || scale * rng.random::<f64>());
    DenseFactorPair { w, h }
}

fn check_input(x: ArrayView2<f64>) -> Result<f64, NmfError> {
    if x.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(NmfError::InvalidInput("X must be finite and non-negative".into()));
    }
    let norm = x.iter().map(|v| v * v).sum::<f64>();
    if norm == 0.0 {
        return Err(NmfError::InvalidInput("X is all zeros".into()));
    }
    Ok(norm)
}

/// Stepwise solver; one [`step`](NmfSolver::step) is a W update followed by an
/// H update.
pub struct NmfSolver<'a> {
    x: ArrayView2<'a, f64>,
    x_norm: f64,
    factors: DenseFactorPair,
    epsilon: f64,
    iteration: usize,
}

impl<'a> NmfSolver<'a> {
    pub fn new(x: ArrayView2<'a, f64>, init: DenseFactorPair, epsilon: f64) -> Result<Self, NmfError> {
        let x_norm = check_input(x)?;
        if init.w.nrows() != x.nrows() || init.h.ncols() != x.ncols() || init.w.ncols() != init.h.nrows() {
            return Err(NmfError::Shape(format!(
                "X {:?} cannot be factored as {:?} x {:?}",
                x.dim(),
                init.w.dim(),
                init.h.dim()
            )));
        }
        Ok(Self {
            x,
            x_norm,
            factors: init,
            epsilon,
            iteration: 0,
        })
    }

    pub fn factors(&self) -> &DenseFactorPair {
        &self.factors
    }

    pub fn into_factors(self) -> DenseFactorPair {
        self.factors
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<(), NmfError> {
        self.iteration += 1;
        let eps = self.epsilon;
        let DenseFactorPair { w, h } = &mut self.factors;

        let numer = self.x.dot(&h.t());
        let denom = w.dot(&h.dot(&h.t()));
        Zip::from(&mut *w)
            .and(&numer)
            .and(&denom)
            .for_each(|v, &n, &d| *v *= n / (d + eps));

        let numer = w.t().dot(&self.x);
        let denom = w.t().dot(&*w).dot(&*h);
        Zip::from(&mut *h)
            .and(&numer)
            .and(&denom)
            .for_each(|v, &n, &d| *v *= n / (d + eps));

        if w.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(NmfError::Divergence {
                iteration: self.iteration,
            });
        }
        Ok(())
    }

    /// Relative error of the current factors, via the trace expansion
    /// `‖X‖² − 2⟨WᵀX, H⟩ + ⟨WᵀW, HHᵀ⟩` so no n×m product is formed.
    pub fn relative_error(&self) -> f64 {
        let DenseFactorPair { w, h } = &self.factors;
        let wtx = w.t().dot(&self.x);
        let cross = Zip::from(&wtx).and(h).fold(0.0, |acc, &a, &b| acc + a * b);
        let gram = Zip::from(&w.t().dot(w))
            .and(&h.dot(&h.t()))
            .fold(0.0, |acc, &a, &b| acc + a * b);
        ((self.x_norm - 2.0 * cross + gram) / self.x_norm).max(0.0)
    }
}

/// Initial factors per `cfg.init`.
pub fn initialize(x: ArrayView2<f64>, cfg: &NmfConfig) -> Result<DenseFactorPair, NmfError> {
    match cfg.init {
        NmfInit::Nndsvd => nndsvd_init(x, cfg.rank),
        NmfInit::Random { seed } => Ok(random_init(x, cfg.rank, seed)),
    }
}

/// Factorizes `x` from the configured initialization.
pub fn nmf_fit(x: ArrayView2<f64>, cfg: &NmfConfig) -> Result<NmfFit, NmfError> {
    cfg.validate()?;
    check_input(x)?;
    let init = initialize(x, cfg)?;
    nmf_fit_from(x, init, cfg)
}

/// Factorizes `x` starting from the given factors.
pub fn nmf_fit_from(x: ArrayView2<f64>, init: DenseFactorPair, cfg: &NmfConfig) -> Result<NmfFit, NmfError> {
    cfg.validate()?;
    let mut solver = NmfSolver::new(x, init, cfg.epsilon)?;
    let mut history = Vec::new();
    let mut previous = solver.relative_error();
    for _ in 0..cfg.max_iters {
        solver.step()?;
        let current = solver.relative_error();
        history.push(current);
        let converged = (previous - current).abs() < cfg.tol;
        previous = current;
        if converged {
            break;
        }
    }
    let iterations = solver.iteration();
    let factors = solver.into_factors();
    let relative_error = relative_error(x, factors.w.view(), factors.h.view())?;
    Ok(NmfFit {
        factors,
        relative_error,
        iterations,
        history,
    })
}
