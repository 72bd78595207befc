use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMOKE: &str = r#"
seeds = [0]

[dataset]
path = "synthetic:50x80:7"

[groups]
min_size = 3
max_size = 10

[tuning]
trials = 4
folds = 3
iters = 50
final_iters = 300

[server]
rank_candidates = [2, 4, 6, 8]
folds = 3
selection_max_iters = 300

[audit]
iters = 100
"#;

fn fedsplit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsplit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("FEDSPLIT_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup(extra: &str) -> (tempfile::TempDir, PathBuf, String) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("smoke.toml");
    fs::write(&config, format!("{SMOKE}{extra}")).unwrap();
    (dir, out, config.to_string_lossy().into_owned())
}

fn step(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.to_string_lossy();
    let mut args = vec![cmd, "--config", config, "--out", &*out];
    args.extend_from_slice(extra);
    fedsplit(&args)
}

fn data_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn dry_run_touches_nothing() {
    let (_dir, out, config) = setup("");
    for cmd in ["prepare", "run", "audit", "report"] {
        let o = step(cmd, &config, &out, &["--dry-run"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("config_hash"));
    }
    assert!(!out.exists());
}

#[test]
fn missing_dataset_is_an_input_error() {
    let (dir, out, config) = setup("");
    let missing = dir.path().join("nowhere").join("ratings.csv");
    let missing = missing.to_string_lossy();
    let o = step("prepare", &config, &out, &["--dataset", &missing]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&*missing), "{}", stderr(&o));
}

#[test]
fn bad_config_is_an_input_error() {
    let (_dir, out, config) = setup("unknown_key = 1\n");
    assert_eq!(code(&step("prepare", &config, &out, &[])), 2);
}

#[test]
fn later_stages_need_earlier_artifacts() {
    let (_dir, out, config) = setup("");
    for cmd in ["run", "audit", "report"] {
        let o = step(cmd, &config, &out, &[]);
        assert_eq!(code(&o), 3, "{cmd}: {}", stderr(&o));
    }
    assert_eq!(code(&step("prepare", &config, &out, &[])), 0);
    for cmd in ["audit", "report"] {
        assert_eq!(code(&step(cmd, &config, &out, &[])), 3, "{cmd}");
    }
}

#[test]
fn prepare_is_byte_identical() {
    let (_dir, out, config) = setup("");
    assert_eq!(code(&step("prepare", &config, &out, &[])), 0);
    let first: Vec<(PathBuf, Vec<u8>)> = files_under(&out).into_iter().map(|p| (p.clone(), fs::read(p).unwrap())).collect();
    assert!(first.len() >= 5);
    assert_eq!(code(&step("prepare", &config, &out, &[])), 0);
    for (p, bytes) in first {
        assert_eq!(fs::read(&p).unwrap(), bytes, "{}", p.display());
    }
}

#[test]
fn smoke_pipeline() {
    let (_dir, out, config) = setup("");
    assert_eq!(code(&step("prepare", &config, &out, &[])), 0);

    let t = Instant::now();
    let o = step("run", &config, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(t.elapsed() < Duration::from_secs(60), "{:?}", t.elapsed());

    let csvs = ["summary.csv", "plot_data.csv", "group_reports.csv", "baseline.csv"];
    let first: Vec<Vec<u8>> = csvs.iter().map(|f| fs::read(out.join(f)).unwrap()).collect();
    let hash_line = String::from_utf8_lossy(&first[0]).lines().next().unwrap().to_string();
    assert!(hash_line.starts_with("# config_hash="));
    for bytes in &first {
        assert!(String::from_utf8_lossy(bytes).starts_with(&hash_line));
    }
    assert!(!data_rows(&out.join("group_reports.csv")).is_empty());

    assert_eq!(code(&step("run", &config, &out, &[])), 0);
    for (f, bytes) in csvs.iter().zip(&first) {
        assert_eq!(&fs::read(out.join(f)).unwrap(), bytes, "{f} changed on rerun");
    }

    let o = step("report", &config, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(out.join("summary.csv")).unwrap(), first[0]);

    let o = step("audit", &config, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = data_rows(&out.join("audit_curve.csv"));
    assert_eq!(rows.len(), 60);
    for mode in ["user", "movie", "ratings"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{mode},"))).count(), 20);
    }
}

#[test]
fn full_knowledge_audit_has_one_row_per_mode() {
    let (_dir, out, config) = setup("fractions = [1.0]\n");
    assert_eq!(code(&step("prepare", &config, &out, &[])), 0);
    assert_eq!(code(&step("run", &config, &out, &[])), 0);
    let o = step("audit", &config, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = data_rows(&out.join("audit_curve.csv"));
    assert_eq!(rows.len(), 3, "{rows:?}");
    for r in rows {
        let err: f64 = r.split(',').nth(2).unwrap().parse().unwrap();
        assert!(err > 0.0 && err.is_finite());
    }
}
