//! On-disk layout of an experiment directory.
//!
//! ```text
//! out/
//!   dataset.csv            preprocessed ratings
//!   summary.csv            aggregate over all seeds
//!   plot_data.csv
//!   group_reports.csv
//!   baseline.csv
//!   audit_curve.csv
//!   audit_cells.csv
//!   seed-N/
//!     train.csv validation.csv test.csv groups.csv
//!     group_reports.csv manifest.json
//!     models/{baseline,global,local-G,federated-G}.bin
//! ```
//!
//! Every text file starts with a `# config_hash=` line.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use fedsplit::eval::GroupReport;

pub const HASH_PREFIX: &str = "# config_hash=";

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.root.join(format!("seed-{seed}"))
    }

    pub fn seed_file(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join(name)
    }

    pub fn model(&self, seed: u64, name: &str) -> PathBuf {
        self.seed_dir(seed).join("models").join(format!("{name}.bin"))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Writes `path` atomically enough for our purposes: hash line, then body.
pub fn write_text<F>(path: &Path, hash: &str, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> io::Result<()>,
{
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(out, "{HASH_PREFIX}{hash}")?;
    body(&mut out).with_context(|| format!("writing {}", path.display()))?;
    out.flush()?;
    Ok(())
}

pub fn read_hash(path: &Path) -> Result<Option<String>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first)?;
    Ok(first.trim_end().strip_prefix(HASH_PREFIX).map(str::to_string))
}

/// Data rows of one of our CSV files: comments and the header dropped.
fn data_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    let mut header_seen = false;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header_seen {
            header_seen = true;
            continue;
        }
        rows.push(line.split(',').map(str::to_string).collect());
    }
    Ok(rows)
}

pub fn read_group_reports(path: &Path) -> Result<Vec<GroupReport>> {
    data_rows(path)?
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = || anyhow!("{}: malformed row {}", path.display(), i + 1);
            if r.len() != 8 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let mut report = GroupReport::new(
                r[0].parse().map_err(|_| bad())?,
                int(&r[1])?,
                int(&r[2])?,
                int(&r[3])?,
                int(&r[4])?,
                real(&r[5])?,
                real(&r[6])?,
            );
            report.delta = real(&r[7])?;
            Ok(report)
        })
        .collect()
}

pub fn write_groups(out: &mut dyn Write, groups: &[Vec<u64>]) -> io::Result<()> {
    writeln!(out, "group,user")?;
    for (g, members) in groups.iter().enumerate() {
        for u in members {
            writeln!(out, "{g},{u}")?;
        }
    }
    Ok(())
}
