//! The one-shot protocol between clients and the processor.
//!
//! Setup: every client reports its mean rating and receives the global mean.
//! One-shot round: every client trains locally with the global mean, uploads
//! its transposed item factors and item biases, and receives the processor's
//! global item patterns, its slice of the joint coefficients and the global
//! item biases. Distillation turns the slice into new user factors.

use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnmf::{group_mean, CnmfError, CnmfHyperparams, CnmfModel, CnmfTrainer};
use crate::data::{GroupPartition, SparseRatings, SplitSet};
use crate::eval::RatingPredictor;
use crate::nmf::{nmf_fit, select_rank, NmfConfig, NmfError, NmfInit, RankSelection};
use crate::tuning::{tune, SearchSpace, TuneOutcome, TuningConfig, TuningError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunPhase {
    Setup,
    LocalTraining,
    Aggregation,
    Distillation,
}

impl fmt::Display for RunPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            RunPhase::Setup => "setup",
            RunPhase::LocalTraining => "local training",
            RunPhase::Aggregation => "aggregation",
            RunPhase::Distillation => "distillation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index ({row}, {col}) outside a {n_users}x{n_items} model")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_users: usize,
        n_items: usize,
    },
    #[error(transparent)]
    Nmf(#[from] NmfError),
    #[error("{phase} failed for group {group_id:?}: {source}")]
    Phase {
        phase: RunPhase,
        group_id: Option<usize>,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl FederationError {
    fn phase<E: std::error::Error + Send + Sync + 'static>(phase: RunPhase, group_id: Option<usize>, e: E) -> Self {
        FederationError::Phase {
            phase,
            group_id,
            source: Box::new(e),
        }
    }

    pub fn run_phase(&self) -> Option<RunPhase> {
        match self {
            FederationError::Phase { phase, .. } => Some(*phase),
            _ => None,
        }
    }

    /// True when the root cause is a numeric divergence.
    pub fn is_numeric(&self) -> bool {
        match self {
            FederationError::Nmf(NmfError::Divergence { .. }) => true,
            FederationError::Phase { source, .. } => {
                if let Some(e) = source.downcast_ref::<CnmfError>() {
                    matches!(e, CnmfError::Divergence { .. })
                } else if let Some(e) = source.downcast_ref::<TuningError>() {
                    matches!(e, TuningError::Cnmf(CnmfError::Divergence { .. }))
                } else if let Some(e) = source.downcast_ref::<FederationError>() {
                    e.is_numeric()
                } else {
                    false
                }
            }
            _ => false,
        }
    }
}

/// Setup uplink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub group_id: usize,
    pub mu: f64,
    /// Only used by the rating-weighted aggregation variant.
    pub n_ratings: usize,
}

/// One-shot uplink: item-side parameters only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpload {
    pub group_id: usize,
    /// m × k^g.
    pub h_transpose: Array2<f64>,
    pub b_h: Array1<f64>,
}

impl ClientUpload {
    pub fn from_model(group_id: usize, model: &CnmfModel) -> Self {
        Self {
            group_id,
            h_transpose: model.h.t().to_owned(),
            b_h: model.b_h.clone(),
        }
    }

    pub fn rank(&self) -> usize {
        self.h_transpose.ncols()
    }
}

/// One-shot downlink.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDownload {
    pub group_id: usize,
    pub global: Arc<GlobalItemModel>,
    /// K × k^g.
    pub slice: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Message {
    MeanReport(MeanReport),
    GlobalMean { group_id: usize, mu: f64 },
    Upload(ClientUpload),
    Download(GlobalDownload),
}

impl Message {
    pub fn group_id(&self) -> usize {
        match self {
            Message::MeanReport(m) => m.group_id,
            Message::GlobalMean { group_id, .. } => *group_id,
            Message::Upload(u) => u.group_id,
            Message::Download(d) => d.group_id,
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            Message::MeanReport(_) | Message::Upload(_) => Direction::Up,
            Message::GlobalMean { .. } | Message::Download(_) => Direction::Down,
        }
    }

    pub fn phase(&self) -> Phase {
        match self {
            Message::MeanReport(_) | Message::GlobalMean { .. } => Phase::Setup,
            Message::Upload(_) | Message::Download(_) => Phase::OneShot,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Message::MeanReport(_) => "mean_report",
            Message::GlobalMean { .. } => "global_mean",
            Message::Upload(_) => "upload",
            Message::Download(_) => "download",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Setup,
    OneShot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub group_id: usize,
    pub direction: Direction,
    pub phase: Phase,
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunicationLedger {
    pub entries: Vec<LedgerEntry>,
}

impl CommunicationLedger {
    pub fn count(&self, direction: Direction, phase: Option<Phase>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.direction == direction && phase.is_none_or(|p| e.phase == p))
            .count()
    }

    pub fn count_for(&self, group_id: usize, direction: Direction, phase: Phase) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group_id == group_id && e.direction == direction && e.phase == phase)
            .count()
    }

    /// Checks that each listed client exchanged exactly one message each way
    /// during setup and during the one-shot round, and nobody else talked.
    pub fn verify_one_shot(&self, group_ids: &[usize]) -> Result<(), FederationError> {
        for &g in group_ids {
            for phase in [Phase::Setup, Phase::OneShot] {
                for direction in [Direction::Up, Direction::Down] {
                    let c = self.count_for(g, direction, phase);
                    if c != 1 {
                        return Err(FederationError::Protocol(format!(
                            "group {g} has {c} {direction:?} messages in {phase:?}"
                        )));
                    }
                }
            }
        }
        if self.entries.len() != 4 * group_ids.len() {
            return Err(FederationError::Protocol(format!(
                "{} messages for {} clients",
                self.entries.len(),
                group_ids.len()
            )));
        }
        Ok(())
    }
}

/// In-process transport. Every message passes through here and is logged.
#[derive(Debug, Default)]
pub struct Channel {
    ledger: Mutex<CommunicationLedger>,
}

impl Channel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&self, msg: Message) -> Message {
        let entry = LedgerEntry {
            group_id: msg.group_id(),
            direction: msg.direction(),
            phase: msg.phase(),
            kind: msg.kind().to_string(),
        };
        self.ledger.lock().expect("ledger lock").entries.push(entry);
        msg
    }

    /// The ledger in a deterministic order.
    pub fn into_ledger(self) -> CommunicationLedger {
        let mut ledger = self.ledger.into_inner().expect("ledger lock");
        ledger
            .entries
            .sort_by_key(|e| (e.phase, e.group_id, e.direction));
        ledger
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Plain average over clients.
    #[default]
    Unweighted,
    /// Clients weighted by their rating counts.
    ByRatings,
}

pub fn compute_global_mean(reports: &[MeanReport], weighting: Weighting) -> Result<f64, FederationError> {
    if reports.is_empty() {
        return Err(FederationError::Protocol("no mean reports".into()));
    }
    let weights = client_weights(reports, weighting);
    Ok(reports.iter().zip(&weights).map(|(r, w)| r.mu * w).sum())
}

fn client_weights(reports: &[MeanReport], weighting: Weighting) -> Vec<f64> {
    let n = reports.len() as f64;
    match weighting {
        Weighting::Unweighted => vec![1.0 / n; reports.len()],
        Weighting::ByRatings => {
            let total: usize = reports.iter().map(|r| r.n_ratings).sum();
            if total == 0 {
                vec![1.0 / n; reports.len()]
            } else {
                reports.iter().map(|r| r.n_ratings as f64 / total as f64).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    /// Settings for the final joint fit; `rank` is replaced by the selection.
    pub nmf: NmfConfig,
    pub rank_candidates: Vec<usize>,
    pub folds: usize,
    pub val_frac: f64,
    /// Iteration cap for the rank-selection fits.
    pub selection_max_iters: usize,
    pub seed: u64,
    pub weighting: Weighting,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            nmf: NmfConfig {
                init: NmfInit::Nndsvd,
                ..NmfConfig::default()
            },
            rank_candidates: (2..=30).step_by(2).collect(),
            folds: 5,
            val_frac: 0.2,
            selection_max_iters: 1000,
            seed: 0,
            weighting: Weighting::Unweighted,
        }
    }
}

/// What every client receives from the processor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalItemModel {
    /// m × K.
    pub w_global: Array2<f64>,
    pub b_h_global: Array1<f64>,
    pub mu_global: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub items: Arc<GlobalItemModel>,
    /// K × Σk^g.
    pub h_global: Array2<f64>,
    /// Upload order.
    pub group_ids: Vec<usize>,
    /// Column offsets of each client's slice; one more entry than clients.
    pub offsets: Vec<usize>,
    pub rank: usize,
    pub rank_selection: Option<RankSelection>,
    pub relative_error: f64,
    pub iterations: usize,
}

impl GlobalModel {
    pub fn n_items(&self) -> usize {
        self.items.w_global.nrows()
    }

    pub fn n_clients(&self) -> usize {
        self.group_ids.len()
    }

    /// M^g for the client at `position` in upload order.
    pub fn slice(&self, position: usize) -> Array2<f64> {
        self.h_global
            .slice(s![.., self.offsets[position]..self.offsets[position + 1]])
            .to_owned()
    }

    pub fn slice_for(&self, group_id: usize) -> Option<Array2<f64>> {
        self.group_ids
            .iter()
            .position(|&g| g == group_id)
            .map(|p| self.slice(p))
    }

    pub fn slices(&self) -> Vec<Array2<f64>> {
        (0..self.n_clients()).map(|p| self.slice(p)).collect()
    }

    pub fn concat_slices(&self) -> Array2<f64> {
        let slices = self.slices();
        let views: Vec<_> = slices.iter().map(|m| m.view()).collect();
        concatenate(Axis(1), &views).expect("slices share the row count")
    }
}

/// X_joint = [H¹ᵀ | … | Hᴺᵀ].
pub fn joint_matrix(uploads: &[ClientUpload]) -> Result<Array2<f64>, FederationError> {
    let first = uploads
        .first()
        .ok_or_else(|| FederationError::Protocol("no uploads".into()))?;
    let m = first.h_transpose.nrows();
    for u in uploads {
        if u.h_transpose.nrows() != m || u.b_h.len() != m {
            return Err(FederationError::Protocol(format!(
                "group {} uploaded {} item rows and {} item biases, expected {m}",
                u.group_id,
                u.h_transpose.nrows(),
                u.b_h.len()
            )));
        }
    }
    let views: Vec<_> = uploads.iter().map(|u| u.h_transpose.view()).collect();
    Ok(concatenate(Axis(1), &views).expect("row counts checked"))
}

/// Joint factorization of the uploaded item factors.
pub fn server_aggregate(
    uploads: &[ClientUpload],
    reports: &[MeanReport],
    cfg: &ServerConfig,
) -> Result<GlobalModel, FederationError> {
    let x_joint = joint_matrix(uploads)?;
    let (m, total_k) = x_joint.dim();
    let mu_global = compute_global_mean(reports, cfg.weighting)?;

    let weights = match cfg.weighting {
        Weighting::Unweighted => vec![1.0 / uploads.len() as f64; uploads.len()],
        Weighting::ByRatings => {
            let by_group: Vec<MeanReport> = uploads
                .iter()
                .map(|u| {
                    reports
                        .iter()
                        .find(|r| r.group_id == u.group_id)
                        .cloned()
                        .ok_or_else(|| FederationError::Protocol(format!("no mean report from group {}", u.group_id)))
                })
                .collect::<Result<_, _>>()?;
            client_weights(&by_group, Weighting::ByRatings)
        }
    };
    let mut b_h_global = Array1::<f64>::zeros(m);
    for (u, w) in uploads.iter().zip(&weights) {
        b_h_global.scaled_add(*w, &u.b_h);
    }

    let max_rank = m.min(total_k);
    let mut candidates: Vec<usize> = cfg
        .rank_candidates
        .iter()
        .copied()
        .filter(|&k| k >= 1 && k <= max_rank)
        .collect();
    if candidates.is_empty() {
        candidates.push(max_rank);
    }
    let selection_cfg = NmfConfig {
        max_iters: cfg.selection_max_iters,
        ..cfg.nmf
    };
    let selection = select_rank(x_joint.view(), &candidates, cfg.folds, cfg.val_frac, &selection_cfg, cfg.seed)?;
    let rank = selection.rank;
    log::info!("server rank {rank} from candidates {candidates:?}");

    let fit = nmf_fit(x_joint.view(), &NmfConfig { rank, ..cfg.nmf })?;

    let mut offsets = Vec::with_capacity(uploads.len() + 1);
    offsets.push(0);
    for u in uploads {
        offsets.push(offsets.last().unwrap() + u.rank());
    }

    Ok(GlobalModel {
        items: Arc::new(GlobalItemModel {
            w_global: fit.factors.w,
            b_h_global,
            mu_global,
        }),
        h_global: fit.factors.h,
        group_ids: uploads.iter().map(|u| u.group_id).collect(),
        offsets,
        rank,
        rank_selection: (!selection.scores.is_empty()).then_some(selection),
        relative_error: fit.relative_error,
        iterations: fit.iterations,
    })
}

/// W* = W^g (M^g)ᵀ.
pub fn distill(w: &Array2<f64>, slice: &Array2<f64>) -> Result<Array2<f64>, FederationError> {
    if w.ncols() != slice.ncols() {
        return Err(FederationError::Shape(format!(
            "W^g is {:?} but the slice is {:?}",
            w.dim(),
            slice.dim()
        )));
    }
    Ok(w.dot(&slice.t()))
}

/// A client's model after distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedClientModel {
    pub group_id: usize,
    /// n^g × K.
    pub w_star: Array2<f64>,
    pub b_w: Array1<f64>,
    pub global: Arc<GlobalItemModel>,
}

impl FederatedClientModel {
    pub fn from_download(local: &CnmfModel, download: &GlobalDownload) -> Result<Self, FederationError> {
        if local.n_items() != download.global.w_global.nrows() {
            return Err(FederationError::Shape(format!(
                "local model has {} items, global model {}",
                local.n_items(),
                download.global.w_global.nrows()
            )));
        }
        Ok(Self {
            group_id: download.group_id,
            w_star: distill(&local.w, &download.slice)?,
            b_w: local.b_w.clone(),
            global: Arc::clone(&download.global),
        })
    }

    pub fn rank(&self) -> usize {
        self.w_star.ncols()
    }

    fn raw(&self, row: usize, col: usize) -> f64 {
        let g = &self.global;
        self.w_star.row(row).dot(&g.w_global.row(col)) + self.b_w[row] + g.b_h_global[col] + g.mu_global
    }
}

/// Unclamped federated estimate for user `row`, item `col`.
pub fn federated_predict(model: &FederatedClientModel, row: usize, col: usize) -> Result<f64, FederationError> {
    let (n, m) = (model.w_star.nrows(), model.global.w_global.nrows());
    if row >= n || col >= m {
        return Err(FederationError::IndexOutOfRange {
            row,
            col,
            n_users: n,
            n_items: m,
        });
    }
    Ok(model.raw(row, col))
}

impl RatingPredictor for FederatedClientModel {
    fn n_users(&self) -> usize {
        self.w_star.nrows()
    }

    fn n_items(&self) -> usize {
        self.global.w_global.nrows()
    }

    fn predict_raw(&self, row: usize, col: usize) -> f64 {
        self.raw(row, col)
    }
}

/// Everything the processor holds. Only uplink messages ever enter it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Processor {
    pub config: Option<ServerConfig>,
    pub mean_reports: Vec<MeanReport>,
    pub uploads: Vec<ClientUpload>,
    pub global: Option<GlobalModel>,
}

impl Processor {
    pub fn new(config: ServerConfig) -> Self {
        Self {
            config: Some(config),
            ..Self::default()
        }
    }

    pub fn receive(&mut self, msg: Message) -> Result<(), FederationError> {
        match msg {
            Message::MeanReport(r) => self.mean_reports.push(r),
            Message::Upload(u) => self.uploads.push(u),
            other => {
                return Err(FederationError::Protocol(format!(
                    "processor cannot receive {}",
                    other.kind()
                )))
            }
        }
        Ok(())
    }

    pub fn global_mean(&self) -> Result<f64, FederationError> {
        let weighting = self.config.as_ref().map(|c| c.weighting).unwrap_or_default();
        compute_global_mean(&self.mean_reports, weighting)
    }

    pub fn aggregate(&mut self) -> Result<&GlobalModel, FederationError> {
        self.uploads.sort_by_key(|u| u.group_id);
        let cfg = self.config.clone().unwrap_or_default();
        self.global = Some(server_aggregate(&self.uploads, &self.mean_reports, &cfg)?);
        Ok(self.global.as_ref().expect("just set"))
    }

    pub fn download_for(&self, group_id: usize) -> Result<GlobalDownload, FederationError> {
        let global = self
            .global
            .as_ref()
            .ok_or_else(|| FederationError::Protocol("download requested before aggregation".into()))?;
        let slice = global
            .slice_for(group_id)
            .ok_or_else(|| FederationError::Protocol(format!("group {group_id} never uploaded")))?;
        Ok(GlobalDownload {
            group_id,
            global: Arc::clone(&global.items),
            slice,
        })
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub group_id: usize,
    pub train: SparseRatings,
    pub validation: SparseRatings,
    pub test: SparseRatings,
}

/// Restricts every split to each group's members. Items keep the global index.
pub fn client_data(split: &SplitSet, partition: &GroupPartition) -> Result<Vec<ClientData>, crate::data::DataError> {
    partition
        .groups()
        .iter()
        .enumerate()
        .map(|(group_id, members)| {
            Ok(ClientData {
                group_id,
                train: split.train.restrict_users(members)?,
                validation: split.validation.restrict_users(members)?,
                test: split.test.restrict_users(members)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LocalTraining {
    /// Same hyperparameters for every client, with k capped by the group size.
    Fixed(CnmfHyperparams),
    /// Independent random search per client on train ∪ validation.
    Tuned { tuning: TuningConfig, final_iters: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedSplitConfig {
    pub local: LocalTraining,
    pub server: ServerConfig,
    /// Stop local fits early on the validation ratings.
    pub early_stop: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub setup: Duration,
    pub local_training: Duration,
    pub aggregation: Duration,
    pub distillation: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub group_id: usize,
    pub local: CnmfModel,
    pub federated: FederatedClientModel,
    pub tuning: Option<TuneOutcome>,
    pub local_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct FedSplitRun {
    pub clients: Vec<ClientOutcome>,
    pub global: GlobalModel,
    pub ledger: CommunicationLedger,
    pub timings: PhaseTimings,
}

/// Derives a per-client seed so clients never share random streams.
pub fn client_seed(seed: u64, group_id: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(group_id as u64)
        .rotate_left(17)
}

fn train_local(
    client: &ClientData,
    mu_global: f64,
    cfg: &FedSplitConfig,
) -> Result<(CnmfModel, Option<TuneOutcome>, usize), FederationError> {
    let phase_err = |e: Box<dyn std::error::Error + Send + Sync>| FederationError::Phase {
        phase: RunPhase::LocalTraining,
        group_id: Some(client.group_id),
        source: e,
    };
    let seed = client_seed(cfg.seed, client.group_id);
    let pooled = client.train.merged(&client.validation);
    let (hp, tuning) = match &cfg.local {
        LocalTraining::Fixed(hp) => {
            let k_cap = SearchSpace::for_users(client.train.n_users()).k.hi;
            (
                CnmfHyperparams {
                    k: hp.k.min(k_cap),
                    seed,
                    ..*hp
                },
                None,
            )
        }
        LocalTraining::Tuned { tuning, final_iters } => {
            let space = SearchSpace::for_users(client.train.n_users());
            let tcfg = TuningConfig { seed, ..*tuning };
            let outcome = tune(&pooled, mu_global, &space, &tcfg).map_err(|e| phase_err(Box::new(e)))?;
            let hp = CnmfHyperparams {
                max_iters: *final_iters,
                seed,
                ..outcome.best
            };
            (hp, Some(outcome))
        }
    };
    let fit = if cfg.early_stop && !client.validation.is_empty() {
        CnmfTrainer::new(hp, mu_global)
            .validation(&client.validation)
            .fit(&client.train)
    } else {
        CnmfTrainer::new(hp, mu_global).fit(&pooled)
    }
    .map_err(|e| phase_err(Box::new(e)))?;
    Ok((fit.model, tuning, fit.iterations))
}

/// Runs the whole protocol over in-process clients.
pub fn run_fedsplit(clients: &[ClientData], cfg: &FedSplitConfig) -> Result<FedSplitRun, FederationError> {
    if clients.is_empty() {
        return Err(FederationError::Protocol("no clients".into()));
    }
    let channel = Channel::new();
    let mut processor = Processor::new(ServerConfig {
        seed: cfg.seed,
        ..cfg.server.clone()
    });
    let mut timings = PhaseTimings::default();

    let t = Instant::now();
    for c in clients {
        let own = c.train.merged(&c.validation);
        let mu = group_mean(&own).map_err(|e| FederationError::phase(RunPhase::Setup, Some(c.group_id), e))?;
        let report = Message::MeanReport(MeanReport {
            group_id: c.group_id,
            mu,
            n_ratings: own.nnz(),
        });
        processor
            .receive(channel.send(report))
            .map_err(|e| FederationError::phase(RunPhase::Setup, Some(c.group_id), e))?;
    }
    let mu_global = processor
        .global_mean()
        .map_err(|e| FederationError::phase(RunPhase::Setup, None, e))?;
    let received: Vec<f64> = clients
        .iter()
        .map(|c| match channel.send(Message::GlobalMean { group_id: c.group_id, mu: mu_global }) {
            Message::GlobalMean { mu, .. } => mu,
            _ => unreachable!(),
        })
        .collect();
    timings.setup = t.elapsed();

    let t = Instant::now();
    let trained = clients
        .par_iter()
        .zip(received.par_iter())
        .map(|(c, &mu)| train_local(c, mu, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    timings.local_training = t.elapsed();

    let t = Instant::now();
    for (c, (model, _, _)) in clients.iter().zip(&trained) {
        let upload = Message::Upload(ClientUpload::from_model(c.group_id, model));
        processor
            .receive(channel.send(upload))
            .map_err(|e| FederationError::phase(RunPhase::Aggregation, Some(c.group_id), e))?;
    }
    processor
        .aggregate()
        .map_err(|e| FederationError::phase(RunPhase::Aggregation, None, e))?;
    let downloads = clients
        .iter()
        .map(|c| {
            let d = processor
                .download_for(c.group_id)
                .map_err(|e| FederationError::phase(RunPhase::Aggregation, Some(c.group_id), e))?;
            match channel.send(Message::Download(d)) {
                Message::Download(d) => Ok(d),
                _ => unreachable!(),
            }
        })
        .collect::<Result<Vec<_>, FederationError>>()?;
    timings.aggregation = t.elapsed();

    let t = Instant::now();
    let outcomes = clients
        .par_iter()
        .zip(trained.into_par_iter())
        .zip(downloads.par_iter())
        .map(|((c, (local, tuning, local_iterations)), d)| {
            let federated = FederatedClientModel::from_download(&local, d)
                .map_err(|e| FederationError::phase(RunPhase::Distillation, Some(c.group_id), e))?;
            Ok(ClientOutcome {
                group_id: c.group_id,
                local,
                federated,
                tuning,
                local_iterations,
            })
        })
        .collect::<Result<Vec<_>, FederationError>>()?;
    timings.distillation = t.elapsed();

    let ledger = channel.into_ledger();
    let ids: Vec<usize> = clients.iter().map(|c| c.group_id).collect();
    ledger.verify_one_shot(&ids)?;

    Ok(FedSplitRun {
        clients: outcomes,
        global: processor.global.expect("aggregated"),
        ledger,
        timings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(group_id: usize, mu: f64, n_ratings: usize) -> MeanReport {
        MeanReport { group_id, mu, n_ratings }
    }

    fn upload(group_id: usize, m: usize, k: usize, salt: usize) -> ClientUpload {
        ClientUpload {
            group_id,
            h_transpose: Array2::from_shape_fn((m, k), |(j, c)| ((j * 3 + c * 7 + salt) % 5) as f64 * 0.2 + 0.05),
            b_h: Array1::from_shape_fn(m, |j| (j + salt) as f64 * 0.01),
        }
    }

    #[test]
    fn global_mean_is_unweighted() {
        let r = [report(0, 2.0, 1), report(1, 3.0, 1), report(2, 4.0, 1)];
        assert_eq!(compute_global_mean(&r, Weighting::Unweighted).unwrap(), 3.0);
        assert_eq!(compute_global_mean(&[report(0, 3.7, 5)], Weighting::Unweighted).unwrap(), 3.7);
        let skewed = [report(0, 5.0, 10), report(1, 1.0, 1000)];
        assert_eq!(compute_global_mean(&skewed, Weighting::Unweighted).unwrap(), 3.0);
        let weighted = compute_global_mean(&skewed, Weighting::ByRatings).unwrap();
        assert!((weighted - (50.0 + 1000.0) / 1010.0).abs() < 1e-12);
        assert!(compute_global_mean(&[], Weighting::Unweighted).is_err());
    }

    #[test]
    fn slices_follow_client_ranks() {
        let uploads = vec![upload(0, 12, 3, 0), upload(1, 12, 5, 1)];
        let cfg = ServerConfig {
            rank_candidates: vec![4],
            ..ServerConfig::default()
        };
        let g = server_aggregate(&uploads, &[report(0, 3.0, 1), report(1, 3.5, 1)], &cfg).unwrap();
        assert_eq!(g.h_global.ncols(), 8);
        assert_eq!(g.offsets, vec![0, 3, 8]);
        assert_eq!(g.slice(0).ncols(), 3);
        assert_eq!(g.slice(1).ncols(), 5);
        assert_eq!(g.concat_slices(), g.h_global);
        assert_eq!(g.items.mu_global, 3.25);
        for j in 0..12 {
            let expected = (uploads[0].b_h[j] + uploads[1].b_h[j]) / 2.0;
            assert!((g.items.b_h_global[j] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn single_client_slice_is_everything() {
        let uploads = vec![upload(0, 10, 4, 2)];
        let cfg = ServerConfig {
            rank_candidates: vec![2, 4],
            folds: 2,
            selection_max_iters: 200,
            ..ServerConfig::default()
        };
        let g = server_aggregate(&uploads, &[report(0, 3.0, 1)], &cfg).unwrap();
        assert_eq!(g.slice(0), g.h_global);
    }

    #[test]
    fn mismatched_items_rejected() {
        let uploads = vec![upload(0, 10, 2, 0), upload(1, 11, 2, 0)];
        assert!(matches!(joint_matrix(&uploads), Err(FederationError::Protocol(_))));
    }

    #[test]
    fn distill_examples() {
        let w = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(distill(&w, &Array2::eye(2)).unwrap(), w);
        let zeros = Array2::<f64>::zeros((3, 2));
        let m = Array2::from_elem((4, 2), 0.5);
        assert!(distill(&zeros, &m).unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(distill(&zeros, &m).unwrap().dim(), (3, 4));
        assert!(distill(&zeros, &Array2::zeros((4, 3))).is_err());
    }

    #[test]
    fn predict_examples() {
        let zero = FederatedClientModel {
            group_id: 0,
            w_star: Array2::zeros((1, 1)),
            b_w: Array1::zeros(1),
            global: Arc::new(GlobalItemModel {
                w_global: Array2::zeros((1, 1)),
                b_h_global: Array1::zeros(1),
                mu_global: 3.5,
            }),
        };
        assert_eq!(federated_predict(&zero, 0, 0).unwrap(), 3.5);

        let scalar = FederatedClientModel {
            group_id: 0,
            w_star: Array2::from_elem((1, 1), 2.0),
            b_w: Array1::from_elem(1, 0.1),
            global: Arc::new(GlobalItemModel {
                w_global: Array2::from_elem((1, 1), 1.5),
                b_h_global: Array1::from_elem(1, 0.2),
                mu_global: 3.0,
            }),
        };
        let raw = federated_predict(&scalar, 0, 0).unwrap();
        assert!((raw - 6.3).abs() < 1e-12);
        assert_eq!(crate::cnmf::clamp_rating(raw), 5.0);
        assert!(federated_predict(&scalar, 1, 0).is_err());
    }

    #[test]
    fn ledger_checks() {
        let channel = Channel::new();
        for g in 0..5 {
            channel.send(Message::MeanReport(report(g, 3.0, 1)));
            channel.send(Message::GlobalMean { group_id: g, mu: 3.0 });
            channel.send(Message::Upload(upload(g, 3, 2, 0)));
        }
        let ids: Vec<usize> = (0..5).collect();
        let partial = CommunicationLedger {
            entries: channel.ledger.lock().unwrap().entries.clone(),
        };
        assert!(partial.verify_one_shot(&ids).is_err());
        let global = Arc::new(GlobalItemModel {
            w_global: Array2::zeros((3, 2)),
            b_h_global: Array1::zeros(3),
            mu_global: 3.0,
        });
        for g in 0..5 {
            channel.send(Message::Download(GlobalDownload {
                group_id: g,
                global: Arc::clone(&global),
                slice: Array2::zeros((2, 2)),
            }));
        }
        let ledger = channel.into_ledger();
        ledger.verify_one_shot(&ids).unwrap();
        assert_eq!(ledger.count(Direction::Up, None), 10);
        assert_eq!(ledger.count(Direction::Down, None), 10);
    }

    #[test]
    fn processor_rejects_downlinks() {
        let mut p = Processor::default();
        assert!(p.receive(Message::GlobalMean { group_id: 0, mu: 1.0 }).is_err());
        assert!(p.download_for(0).is_err());
    }
}
