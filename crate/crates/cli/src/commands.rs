use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use fedsplit::container;
use fedsplit::data::{
    load_movielens, parse_ratings, partition_groups, preprocess, split, DataError, RatingFormat, SparseRatings,
};
use fedsplit::eval::{summarize, write_group_reports, write_plot_data, write_summary_csv, GroupReport};
use fedsplit::experiment::{run_seed, ExperimentConfig, ExperimentError, SeedOutcome};
use fedsplit::federation::client_data;
use fedsplit::privacy_audit::{attack_cells, curve, write_curve_csv, AttackTarget, PublishedItems};
use fedsplit::synthetic::{generate, SyntheticConfig};

use crate::artifacts::{read_group_reports, read_hash, write_groups, write_text, Layout};
use crate::{Common, DATA_DIR_VAR};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_INPUT: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub source: anyhow::Error,
}

impl CliError {
    pub fn input(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INPUT,
            source: e.into(),
        }
    }

    pub fn missing(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_MISSING,
            source: e.into(),
        }
    }

    fn other(e: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_FAILURE,
            source: e.into(),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::other(e)
    }
}

impl From<String> for CliError {
    fn from(e: String) -> Self {
        CliError::input(anyhow!(e))
    }
}

fn experiment_error(e: ExperimentError) -> CliError {
    let code = if e.is_input() {
        EXIT_INPUT
    } else if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_FAILURE
    };
    CliError {
        code,
        source: e.into(),
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let lo: u64 = a.trim().parse().map_err(|_| format!("bad seed range '{s}'"))?;
        let hi: u64 = b.trim().parse().map_err(|_| format!("bad seed range '{s}'"))?;
        if hi <= lo {
            return Err(format!("empty seed range '{s}'"));
        }
        return Ok((lo..hi).collect());
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad seed '{p}'")))
        .collect()
}

/// `synthetic:USERSxITEMS[:SEED]`.
fn parse_synthetic(spec: &str) -> Option<Result<SyntheticConfig, String>> {
    let rest = spec.strip_prefix("synthetic:")?;
    let parse = || {
        let mut parts = rest.split(':');
        let dims = parts.next().unwrap_or_default();
        let (u, i) = dims.split_once('x').ok_or("expected USERSxITEMS")?;
        let n_users = u.parse().map_err(|_| "bad user count")?;
        let n_items = i.parse().map_err(|_| "bad item count")?;
        let seed = match parts.next() {
            Some(s) => s.parse().map_err(|_| "bad synthetic seed")?,
            None => 0,
        };
        Ok::<_, &str>(SyntheticConfig {
            n_users,
            n_items,
            seed,
            ..SyntheticConfig::default()
        })
    };
    Some(parse().map_err(|e| format!("dataset '{spec}': {e}")))
}

pub struct Context {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub layout: Layout,
}

impl Context {
    pub fn resolve(common: &Common) -> Result<Self, CliError> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::input(anyhow!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<ExperimentConfig>(&text)
                    .map_err(|e| CliError::input(anyhow!("config {}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seeds = vec![seed];
        }
        if let Some(seeds) = &common.seeds {
            cfg.seeds = parse_seeds(seeds)?;
        }
        if let Some(dataset) = &common.dataset {
            cfg.dataset.path = Some(PathBuf::from(dataset));
        }
        if let Some(out) = &common.out {
            cfg.output = out.clone();
        }
        cfg.dataset.path = resolve_dataset(cfg.dataset.path.take());
        cfg.validate().map_err(experiment_error)?;
        let hash = cfg.hash();
        Ok(Self {
            layout: Layout::new(cfg.output.clone()),
            cfg,
            hash,
        })
    }

    pub fn print_dry_run(&self) -> Result<(), CliError> {
        let text = toml::to_string_pretty(&self.cfg).map_err(|e| CliError::other(anyhow!(e)))?;
        println!("# config_hash={}", self.hash);
        print!("{text}");
        Ok(())
    }

    fn require(&self, path: &Path, what: &str) -> Result<(), CliError> {
        if path.exists() {
            Ok(())
        } else {
            Err(CliError::missing(anyhow!(
                "{what} not found at {} (run the earlier step first)",
                path.display()
            )))
        }
    }
}

/// Relative paths that do not exist are looked up in the data directory;
/// without a path the data directory's ml-latest-small ratings are used.
fn resolve_dataset(path: Option<PathBuf>) -> Option<PathBuf> {
    let data_dir = std::env::var_os(DATA_DIR_VAR).map(PathBuf::from);
    match path {
        Some(p) if p.to_string_lossy().starts_with("synthetic:") => Some(p),
        Some(p) if p.is_relative() && !p.exists() => match &data_dir {
            Some(dir) if dir.join(&p).exists() => Some(dir.join(p)),
            _ => Some(p),
        },
        Some(p) => Some(p),
        None => data_dir.map(|d| d.join("ml-latest-small").join("ratings.csv")),
    }
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<SparseRatings, CliError> {
    let path = cfg.dataset.path.as_ref().ok_or_else(|| {
        CliError::input(anyhow!("no dataset given; pass --dataset or set {DATA_DIR_VAR}"))
    })?;
    let spec = path.to_string_lossy();
    if let Some(synthetic) = parse_synthetic(&spec) {
        return Ok(generate(&synthetic?));
    }
    let format = cfg.dataset.format.unwrap_or_else(|| RatingFormat::infer(path));
    let raw = load_movielens(path, format).map_err(|e| match e {
        DataError::Io { .. } => CliError::input(anyhow!(e)),
        other => CliError::input(anyhow!("{}: {other}", path.display())),
    })?;
    log::info!("loaded {} ratings from {}", raw.nnz(), path.display());
    preprocess(&raw, &cfg.dataset.preprocessing).map_err(CliError::input)
}

fn load_snapshot(ctx: &Context) -> Result<SparseRatings, CliError> {
    let path = ctx.layout.dataset();
    ctx.require(&path, "prepared dataset")?;
    if read_hash(&path)?.as_deref() != Some(ctx.hash.as_str()) {
        log::warn!("{} was prepared with a different configuration", path.display());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let triples = parse_ratings(text.as_bytes(), RatingFormat::Comma).map_err(CliError::input)?;
    Ok(SparseRatings::from_triples(triples))
}

pub fn prepare(ctx: &Context) -> Result<(), CliError> {
    let ratings = SparseRatings::from_triples(load_dataset(&ctx.cfg)?.triples());
    let hash = &ctx.hash;
    write_text(&ctx.layout.dataset(), hash, |w| ratings.write_snapshot(w))?;
    println!(
        "dataset: {} users, {} items, {} ratings",
        ratings.n_users(),
        ratings.n_items(),
        ratings.nnz()
    );
    for &seed in &ctx.cfg.seeds {
        let s = split(&ratings, ctx.cfg.split.test_frac, ctx.cfg.split.val_frac, seed).map_err(CliError::input)?;
        let users = s.train.users().ids().to_vec();
        let groups = partition_groups(&users, ctx.cfg.groups.min_size, ctx.cfg.groups.max_size, seed)
            .map_err(CliError::input)?;
        let l = &ctx.layout;
        write_text(&l.seed_file(seed, "train.csv"), hash, |w| s.train.write_snapshot(w))?;
        write_text(&l.seed_file(seed, "validation.csv"), hash, |w| s.validation.write_snapshot(w))?;
        write_text(&l.seed_file(seed, "test.csv"), hash, |w| s.test.write_snapshot(w))?;
        write_text(&l.seed_file(seed, "groups.csv"), hash, |w| write_groups(w, groups.groups()))?;
        println!(
            "seed {seed}: train {}, validation {}, test {}, {} groups",
            s.train.nnz(),
            s.validation.nnz(),
            s.test.nnz(),
            groups.n_groups()
        );
    }
    Ok(())
}

fn save_seed(ctx: &Context, out: &SeedOutcome) -> Result<(), CliError> {
    let (l, hash, seed) = (&ctx.layout, &ctx.hash, out.seed);
    write_text(&l.seed_file(seed, "group_reports.csv"), hash, |w| write_group_reports(w, &out.reports))?;
    let manifest = serde_json::to_string_pretty(&out.manifest(hash)).map_err(|e| CliError::other(anyhow!(e)))?;
    fs::write(l.seed_file(seed, "manifest.json"), manifest + "\n").context("writing manifest")?;

    let models = l.seed_dir(seed).join("models");
    fs::create_dir_all(&models).context("creating model directory")?;
    let io = |e: std::io::Error| CliError::other(anyhow!(e));
    if let Some(b) = &out.baseline {
        container::save(l.model(seed, "baseline"), &b.model, |w, m| container::write_cnmf(w, m)).map_err(io)?;
    }
    container::save(l.model(seed, "global"), &out.fedsplit.global, |w, m| container::write_global(w, m)).map_err(io)?;
    for c in &out.fedsplit.clients {
        let g = c.group_id;
        container::save(l.model(seed, &format!("local-{g}")), &c.local, |w, m| container::write_cnmf(w, m))
            .map_err(io)?;
        container::save(l.model(seed, &format!("federated-{g}")), &c.federated, |w, m| {
            container::write_federated(w, m)
        })
        .map_err(io)?;
    }
    Ok(())
}

pub fn run(ctx: &Context) -> Result<(), CliError> {
    let ratings = load_snapshot(ctx)?;
    let mut reports: Vec<GroupReport> = Vec::new();
    let mut baselines: Vec<(u64, f64)> = Vec::new();
    let mut failures: Vec<(u64, CliError)> = Vec::new();

    for &seed in &ctx.cfg.seeds {
        log::info!("seed {seed}: running");
        match run_seed(&ratings, &ctx.cfg, seed) {
            Ok(out) => {
                save_seed(ctx, &out)?;
                let fed = out.reports.iter().map(|r| r.rmse_fed).sum::<f64>() / out.reports.len().max(1) as f64;
                let local = out.reports.iter().map(|r| r.rmse_local).sum::<f64>() / out.reports.len().max(1) as f64;
                println!(
                    "seed {seed}: {} groups, server rank {}, local {local:.4}, federated {fed:.4}{}",
                    out.reports.len(),
                    out.fedsplit.global.rank,
                    out.baseline
                        .as_ref()
                        .map(|b| format!(", non-private {:.4}", b.test_rmse))
                        .unwrap_or_default()
                );
                if let Some(b) = &out.baseline {
                    baselines.push((seed, b.test_rmse));
                }
                reports.extend(out.reports);
            }
            Err(e) => {
                log::error!("seed {seed} failed: {e}");
                failures.push((seed, experiment_error(e)));
            }
        }
    }

    if !reports.is_empty() {
        write_summaries(ctx, &reports)?;
    }
    if !baselines.is_empty() {
        write_text(&ctx.layout.file("baseline.csv"), &ctx.hash, |w| {
            writeln!(w, "seed,rmse")?;
            for (seed, rmse) in &baselines {
                writeln!(w, "{seed},{rmse}")?;
            }
            Ok(())
        })?;
    }
    match failures.len() {
        0 => Ok(()),
        n => {
            let code = failures.iter().map(|(_, e)| e.code).max().unwrap_or(EXIT_FAILURE);
            let seeds: Vec<String> = failures.iter().map(|(s, _)| s.to_string()).collect();
            let (_, first) = failures.into_iter().next().unwrap();
            Err(CliError {
                code,
                source: first
                    .source
                    .context(format!("{n} seed(s) failed: {}", seeds.join(","))),
            })
        }
    }
}

fn write_summaries(ctx: &Context, reports: &[GroupReport]) -> Result<(), CliError> {
    let summary = summarize(reports).map_err(|e| CliError::other(anyhow!(e)))?;
    let hash = &ctx.hash;
    write_text(&ctx.layout.file("group_reports.csv"), hash, |w| write_group_reports(w, &summary.reports))?;
    write_text(&ctx.layout.file("summary.csv"), hash, |w| write_summary_csv(w, &summary))?;
    write_text(&ctx.layout.file("plot_data.csv"), hash, |w| write_plot_data(w, &summary.reports))?;
    let fmt = |m: fedsplit::eval::MeanCi| format!("{:.3} (± {:.3})", m.mean, m.half_width);
    println!(
        "groups {}: local {}, federated {}, delta {}, improved {}/{}",
        summary.n_groups,
        fmt(summary.rmse_local),
        fmt(summary.rmse_fed),
        fmt(summary.delta),
        summary.improved,
        summary.n_groups
    );
    println!(
        "pearson members-delta {}, ratings-delta {}",
        summary.pearson_members_delta.map_or("NA".into(), |r| format!("{r:.3}")),
        summary.pearson_ratings_delta.map_or("NA".into(), |r| format!("{r:.3}"))
    );
    Ok(())
}

pub fn report(ctx: &Context) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let path = ctx.layout.seed_file(seed, "group_reports.csv");
        ctx.require(&path, "group reports")?;
        reports.extend(read_group_reports(&path).map_err(CliError::input)?);
    }
    if reports.is_empty() {
        return Err(CliError::missing(anyhow!("no group reports to summarize")));
    }
    write_summaries(ctx, &reports)
}

fn attack_targets(ctx: &Context, ratings: &SparseRatings, seed: u64) -> Result<Vec<AttackTarget>, CliError> {
    let cfg = &ctx.cfg;
    let global_path = ctx.layout.model(seed, "global");
    ctx.require(&global_path, "global model")?;
    let global = container::load(&global_path, container::read_global).map_err(CliError::missing)?;

    let s = split(ratings, cfg.split.test_frac, cfg.split.val_frac, seed).map_err(CliError::input)?;
    let users = s.train.users().ids().to_vec();
    let groups = partition_groups(&users, cfg.groups.min_size, cfg.groups.max_size, seed).map_err(CliError::input)?;
    let clients = client_data(&s, &groups).map_err(CliError::input)?;

    clients
        .iter()
        .map(|c| {
            let path = ctx.layout.model(seed, &format!("local-{}", c.group_id));
            ctx.require(&path, "local model")?;
            let local = container::load(&path, container::read_cnmf).map_err(CliError::missing)?;
            let ratings = c.train.merged(&c.validation);
            if local.n_users() != ratings.n_users() || local.n_items() != ratings.n_items() {
                return Err(CliError::missing(anyhow!(
                    "{} does not match the prepared data; rerun `run`",
                    path.display()
                )));
            }
            Ok(AttackTarget {
                group_id: c.group_id,
                ratings,
                published: PublishedItems::from_model(&local, global.items.mu_global),
                config: fedsplit::privacy_audit::AttackConfig {
                    hyperparams: local.hyperparams,
                    iters: cfg.audit.iters,
                    learn_user_biases: true,
                },
            })
        })
        .collect()
}

pub fn audit(ctx: &Context) -> Result<(), CliError> {
    let ratings = load_snapshot(ctx)?;
    let a = &ctx.cfg.audit;
    let mut cells = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let targets = attack_targets(ctx, &ratings, seed)?;
        let attack_seeds: Vec<u64> = (0..a.repeats as u64).map(|r| seed * 1_000 + r).collect();
        log::info!("seed {seed}: attacking {} groups", targets.len());
        cells.extend(attack_cells(&targets, &a.modes, &a.fractions, &attack_seeds));
    }
    let points = curve(&cells, &a.modes, &a.fractions);
    write_text(&ctx.layout.file("audit_curve.csv"), &ctx.hash, |w| write_curve_csv(w, &points))?;
    write_text(&ctx.layout.file("audit_cells.csv"), &ctx.hash, |w| {
        writeln!(w, "group,mode,fraction,seed,relative_error")?;
        for c in &cells {
            let err = c.relative_error.map_or("NA".into(), |e| e.to_string());
            writeln!(w, "{},{},{},{},{err}", c.group_id, c.mode, c.fraction, c.seed)?;
        }
        Ok(())
    })?;
    for p in &points {
        println!("{:>7} {:.2}: {:.4} (± {:.4}) n={}", p.mode, p.fraction, p.mean, p.ci, p.n_cells);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 7").unwrap(), vec![4, 7]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn synthetic_specs() {
        let cfg = parse_synthetic("synthetic:50x80:3").unwrap().unwrap();
        assert_eq!((cfg.n_users, cfg.n_items, cfg.seed), (50, 80, 3));
        assert!(parse_synthetic("synthetic:50").unwrap().is_err());
        assert!(parse_synthetic("ratings.csv").is_none());
    }
}
