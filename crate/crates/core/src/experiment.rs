//! Experiment configuration and the per-seed pipeline: split, group, tune and
//! fit the non-private baseline, run the federated protocol, report.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cnmf::{group_mean, CnmfError, CnmfHyperparams, CnmfModel, CnmfTrainer};
use crate::data::{partition_groups, split, DataError, Preprocessing, RatingFormat, SparseRatings, SplitSet};
use crate::eval::{evaluate_group, EvalError, GroupReport};
use crate::federation::{
    client_data, run_fedsplit, ClientData, CommunicationLedger, FedSplitConfig, FedSplitRun, FederationError,
    LocalTraining, PhaseTimings, ServerConfig, Weighting,
};
use crate::nmf::{NmfConfig, NmfInit};
use crate::privacy_audit::{default_fractions, AttackConfig, AttackMode, AttackTarget, PublishedItems};
use crate::tuning::{tune, SearchSpace, TuningConfig, TuningError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("baseline: {0}")]
    Tuning(#[from] TuningError),
    #[error("baseline: {0}")]
    Cnmf(#[from] CnmfError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl ExperimentError {
    pub fn is_numeric(&self) -> bool {
        match self {
            ExperimentError::Cnmf(CnmfError::Divergence { .. }) => true,
            ExperimentError::Tuning(TuningError::Cnmf(CnmfError::Divergence { .. })) => true,
            ExperimentError::Federation(e) => e.is_numeric(),
            _ => false,
        }
    }

    pub fn is_input(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Data(_))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    pub path: Option<PathBuf>,
    /// Inferred from the file extension when absent.
    pub format: Option<RatingFormat>,
    #[serde(flatten)]
    pub preprocessing: Preprocessing,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub test_frac: f64,
    /// Share of the remaining (non-test) ratings.
    pub val_frac: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self {
            test_frac: 0.2,
            val_frac: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupSection {
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for GroupSection {
    fn default() -> Self {
        Self {
            min_size: 3,
            max_size: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub trials: usize,
    /// Trials for each group's local model; `trials` when absent.
    pub local_trials: Option<usize>,
    pub folds: usize,
    pub iters: usize,
    pub final_iters: usize,
    /// When false every model uses the midpoint of the search space.
    pub enabled: bool,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self {
            trials: 100,
            local_trials: None,
            folds: 5,
            iters: 100,
            final_iters: 500,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub rank_candidates: Vec<usize>,
    pub folds: usize,
    pub val_frac: f64,
    pub max_iters: usize,
    pub selection_max_iters: usize,
    pub tol: f64,
    pub weighting: Weighting,
}

impl Default for ServerSection {
    fn default() -> Self {
        let s = ServerConfig::default();
        Self {
            rank_candidates: s.rank_candidates,
            folds: s.folds,
            val_frac: s.val_frac,
            max_iters: s.nmf.max_iters,
            selection_max_iters: s.selection_max_iters,
            tol: s.nmf.tol,
            weighting: s.weighting,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuditSection {
    pub fractions: Vec<f64>,
    pub modes: Vec<AttackMode>,
    pub iters: usize,
    /// Independent knowledge draws per (group, mode, fraction).
    pub repeats: usize,
}

impl Default for AuditSection {
    fn default() -> Self {
        Self {
            fractions: default_fractions(),
            modes: AttackMode::ALL.to_vec(),
            iters: 500,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub split: SplitSection,
    pub groups: GroupSection,
    pub seeds: Vec<u64>,
    pub tuning: TuningSection,
    pub server: ServerSection,
    pub audit: AuditSection,
    /// Fit and report the non-private model on all users.
    pub baseline: bool,
    /// Early-stop local fits on the validation ratings instead of training
    /// on train ∪ validation.
    pub early_stop: bool,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSection::default(),
            split: SplitSection::default(),
            groups: GroupSection::default(),
            seeds: (0..10).collect(),
            tuning: TuningSection::default(),
            server: ServerSection::default(),
            audit: AuditSection::default(),
            baseline: true,
            early_stop: false,
            output: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let frac_ok = |f: f64| f > 0.0 && f < 1.0;
        if !frac_ok(self.split.test_frac) || !frac_ok(self.split.val_frac) {
            return bad(format!(
                "split fractions must be in (0, 1): test={}, val={}",
                self.split.test_frac, self.split.val_frac
            ));
        }
        if self.groups.min_size == 0 || self.groups.max_size < self.groups.min_size {
            return bad(format!(
                "group sizes [{}, {}]",
                self.groups.min_size, self.groups.max_size
            ));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.tuning.trials == 0 || self.tuning.local_trials == Some(0) {
            return bad("tuning needs at least one trial".into());
        }
        if self.tuning.iters == 0 || self.tuning.final_iters == 0 {
            return bad("iteration caps must be positive".into());
        }
        if self.server.rank_candidates.is_empty() || self.server.rank_candidates.contains(&0) {
            return bad("server rank candidates must be positive and nonempty".into());
        }
        if self.server.folds == 0 || !frac_ok(self.server.val_frac) {
            return bad("server rank selection needs folds ≥ 1 and val_frac in (0, 1)".into());
        }
        if !(self.server.tol > 0.0) || self.server.max_iters == 0 {
            return bad("server NMF needs a positive tolerance and iteration cap".into());
        }
        if self.audit.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return bad("audit fractions must be in (0, 1]".into());
        }
        if self.audit.repeats == 0 || self.audit.iters == 0 {
            return bad("audit repeats and iterations must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn server_config(&self, seed: u64) -> ServerConfig {
        ServerConfig {
            nmf: NmfConfig {
                max_iters: self.server.max_iters,
                tol: self.server.tol,
                init: NmfInit::Nndsvd,
                ..NmfConfig::default()
            },
            rank_candidates: self.server.rank_candidates.clone(),
            folds: self.server.folds,
            val_frac: self.server.val_frac,
            selection_max_iters: self.server.selection_max_iters,
            seed,
            weighting: self.server.weighting,
        }
    }

    fn tuning_config(&self, trials: usize, seed: u64) -> TuningConfig {
        TuningConfig {
            trials,
            folds: self.tuning.folds,
            iters: self.tuning.iters,
            seed,
            ..TuningConfig::default()
        }
    }

    pub fn fedsplit_config(&self, seed: u64) -> FedSplitConfig {
        let local = if self.tuning.enabled {
            LocalTraining::Tuned {
                tuning: self.tuning_config(self.tuning.local_trials.unwrap_or(self.tuning.trials), seed),
                final_iters: self.tuning.final_iters,
            }
        } else {
            LocalTraining::Fixed(CnmfHyperparams {
                max_iters: self.tuning.final_iters,
                ..SearchSpace::for_users(21).midpoint()
            })
        };
        FedSplitConfig {
            local,
            server: self.server_config(seed),
            early_stop: self.early_stop,
            seed,
        }
    }
}

/// Non-private model fit on every user's ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineOutcome {
    pub model: CnmfModel,
    pub test_rmse: f64,
    pub tuned_cv_rmse: Option<f64>,
}

pub fn fit_baseline(split_set: &SplitSet, cfg: &ExperimentConfig, seed: u64) -> Result<BaselineOutcome, ExperimentError> {
    let pooled = split_set.train_and_validation();
    let mu = group_mean(&pooled)?;
    let space = SearchSpace::for_users(pooled.n_users());
    let (hp, cv) = if cfg.tuning.enabled {
        let outcome = tune(&pooled, mu, &space, &cfg.tuning_config(cfg.tuning.trials, seed))?;
        let cv = outcome.trials[outcome.best_trial].mean_rmse;
        (outcome.best, Some(cv))
    } else {
        (space.midpoint(), None)
    };
    let hp = CnmfHyperparams {
        max_iters: cfg.tuning.final_iters,
        seed,
        ..hp
    };
    let model = CnmfTrainer::new(hp, mu).fit(&pooled)?.model;
    let test_rmse = evaluate_group(&model, &split_set.test)?;
    Ok(BaselineOutcome {
        model,
        test_rmse,
        tuned_cv_rmse: cv,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedTimings {
    pub baseline: Duration,
    pub fedsplit: PhaseTimings,
    pub total: Duration,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub split: SplitSet,
    pub clients: Vec<ClientData>,
    pub baseline: Option<BaselineOutcome>,
    pub fedsplit: FedSplitRun,
    pub reports: Vec<GroupReport>,
    /// Groups left out of the reports because they have no test ratings.
    pub excluded_groups: Vec<usize>,
    pub timings: SeedTimings,
}

/// Structured per-seed record written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub group_sizes: Vec<usize>,
    pub local_ranks: Vec<usize>,
    pub server_rank: usize,
    pub server_relative_error: f64,
    pub baseline_rmse: Option<f64>,
    pub excluded_groups: Vec<usize>,
    pub timings: SeedTimings,
    pub ledger: CommunicationLedger,
}

impl SeedOutcome {
    pub fn manifest(&self, config_hash: &str) -> RunManifest {
        RunManifest {
            config_hash: config_hash.to_string(),
            seed: self.seed,
            n_users: self.split.train.n_users(),
            n_items: self.split.train.n_items(),
            n_train: self.split.train.nnz(),
            n_validation: self.split.validation.nnz(),
            n_test: self.split.test.nnz(),
            group_sizes: self.clients.iter().map(|c| c.train.n_users()).collect(),
            local_ranks: self.fedsplit.clients.iter().map(|c| c.local.rank()).collect(),
            server_rank: self.fedsplit.global.rank,
            server_relative_error: self.fedsplit.global.relative_error,
            baseline_rmse: self.baseline.as_ref().map(|b| b.test_rmse),
            excluded_groups: self.excluded_groups.clone(),
            timings: self.timings.clone(),
            ledger: self.fedsplit.ledger.clone(),
        }
    }

    /// One attack target per group: its training ratings and what it published.
    pub fn attack_targets(&self, iters: usize) -> Vec<AttackTarget> {
        let mu_global = self.fedsplit.global.items.mu_global;
        self.clients
            .iter()
            .zip(&self.fedsplit.clients)
            .map(|(data, outcome)| AttackTarget {
                group_id: data.group_id,
                ratings: data.train.merged(&data.validation),
                published: PublishedItems::from_model(&outcome.local, mu_global),
                config: AttackConfig {
                    hyperparams: outcome.local.hyperparams,
                    iters,
                    learn_user_biases: true,
                },
            })
            .collect()
    }
}

/// Everything for one seed on already preprocessed ratings.
pub fn run_seed(ratings: &SparseRatings, cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutcome, ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    let split_set = split(ratings, cfg.split.test_frac, cfg.split.val_frac, seed)?;
    let users = split_set.train.users().ids().to_vec();
    let partition = partition_groups(&users, cfg.groups.min_size, cfg.groups.max_size, seed)?;
    let clients = client_data(&split_set, &partition)?;

    let t = Instant::now();
    let baseline = if cfg.baseline {
        Some(fit_baseline(&split_set, cfg, seed)?)
    } else {
        None
    };
    let baseline_time = t.elapsed();

    let fedsplit = run_fedsplit(&clients, &cfg.fedsplit_config(seed))?;

    let mut reports = Vec::new();
    let mut excluded_groups = Vec::new();
    for (data, outcome) in clients.iter().zip(&fedsplit.clients) {
        if data.test.is_empty() {
            log::warn!("seed {seed}: group {} has no test ratings", data.group_id);
            excluded_groups.push(data.group_id);
            continue;
        }
        reports.push(GroupReport::new(
            seed,
            data.group_id,
            data.train.n_users(),
            data.train.nnz() + data.validation.nnz(),
            data.test.nnz(),
            evaluate_group(&outcome.local, &data.test)?,
            evaluate_group(&outcome.federated, &data.test)?,
        ));
    }

    let timings = SeedTimings {
        baseline: baseline_time,
        fedsplit: fedsplit.timings.clone(),
        total: start.elapsed(),
    };
    Ok(SeedOutcome {
        seed,
        split: split_set,
        clients,
        baseline,
        fedsplit,
        reports,
        excluded_groups,
        timings,
    })
}
