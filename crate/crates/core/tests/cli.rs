use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use weatherformer::cli::{RunManifest, CHECKPOINT, MANIFEST};
use weatherformer::data::{latitudes, load_wfr};
use weatherformer::eval::{init_times, lat_weights, weighted_rmse};
use weatherformer::model::{load_checkpoint, save_checkpoint, Patch};
use weatherformer::rng::{stream, Stream};
use weatherformer::{ModelConfig, ModelParams};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weatherformer"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["gen-data", "--h", "8", "--w", "16", "--steps", "100", "--seed", "3", "-o", name];
    args.extend_from_slice(extra);
    let o = bin(&args, dir);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join(name)
}

/// Run directories created under `parent`, oldest name first.
fn run_dirs(parent: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(parent)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

fn new_dir(parent: &Path, before: &[PathBuf]) -> PathBuf {
    let after = run_dirs(parent);
    let fresh: Vec<_> = after.into_iter().filter(|p| !before.contains(p)).collect();
    assert_eq!(fresh.len(), 1, "expected exactly one new run dir, got {fresh:?}");
    fresh[0].clone()
}

const QUICK: &[&str] = &["--embed-dim", "8", "--layers", "1", "--blocks", "2", "--windows-per-epoch", "12", "--val-windows", "4"];

fn train(dir: &Path, extra: &[&str]) -> (Output, Option<PathBuf>) {
    let runs = dir.join("runs");
    let before = run_dirs(&runs);
    let mut args = vec!["train", "--data", "toy.wfr", "--out-dir", "runs"];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    let o = bin(&args, dir);
    let d = o.status.success().then(|| new_dir(&runs, &before));
    (o, d)
}

#[test]
fn gen_data_summarizes_and_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let o = bin(&["gen-data", "--h", "8", "--w", "16", "--steps", "100", "--seed", "3", "-o", "a.wfr"], t.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("100 snapshots of 8x16 with 3 channels"), "{}", stdout(&o));
    let b = load_wfr(t.path().join("a.wfr")).unwrap();
    assert_eq!(b.dims(), [100, 8, 16, 3]);
    gen(t.path(), "b.wfr", &[]);
    assert_eq!(fs::read(t.path().join("a.wfr")).unwrap(), fs::read(t.path().join("b.wfr")).unwrap());
    let m = RunManifest::load(t.path().join("a.wfr.manifest.json")).unwrap();
    assert_eq!((m.command.as_str(), m.seed), ("gen-data", 3));
    assert_eq!(m.config["height"], 8);

    let o = bin(&["gen-data", "--h", "8", "--w", "16", "--steps", "100", "--seed", "4", "-o", "c.wfr"], t.path());
    assert!(o.status.success());
    assert_ne!(fs::read(t.path().join("c.wfr")).unwrap(), fs::read(t.path().join("a.wfr")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let o = bin(&["gen-data", "--h", "8", "-o", "x.wfr"], t.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!t.path().join("x.wfr").exists());
    assert_eq!(bin(&["train"], t.path()).status.code(), Some(2));
    assert_eq!(bin(&["gradcheck", "--samples", "0"], t.path()).status.code(), Some(2));
    assert_eq!(bin(&["no-such-command"], t.path()).status.code(), Some(2));
    assert_eq!(bin(&["train", "--data", "x.wfr", "--mixer", "cnn"], t.path()).status.code(), Some(2));
    assert_eq!(bin(&["--help"], t.path()).status.code(), Some(0));
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "toy.wfr", &[]);
    let (o, dir) = train(t.path(), &["--epochs", "0", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = dir.unwrap();
    let got = load_checkpoint(dir.join(CHECKPOINT)).unwrap();
    let want = ModelParams::init(got.config(), &mut stream(5, Stream::Init)).unwrap();
    assert_eq!(got.values(), want.values());
    assert_eq!((got.config().height, got.config().width, got.config().embed_dim), (8, 16, 8));
    let m = RunManifest::load(dir.join(MANIFEST)).unwrap();
    assert_eq!(m.command, "train");
    assert!(m.outputs.iter().any(|p| p == CHECKPOINT));
    let entries = fs::read_dir(&dir).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name() == MANIFEST).count();
    assert_eq!(entries, 1);
}

#[test]
fn training_is_reproducible_from_seed_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "toy.wfr", &[]);
    let flags = ["--epochs", "3", "--seed", "2", "--lr", "3e-3", "--warmup-epochs", "0.5"];
    let (o1, d1) = train(t.path(), &flags);
    assert!(o1.status.success(), "{}", stderr(&o1));
    let (_, d2) = train(t.path(), &flags);
    let (d1, d2) = (d1.unwrap(), d2.unwrap());
    assert_ne!(d1, d2, "run directories are never reused");
    let c1 = fs::read(d1.join(CHECKPOINT)).unwrap();
    assert_eq!(c1, fs::read(d2.join(CHECKPOINT)).unwrap());

    let runs = t.path().join("runs");
    let before = run_dirs(&runs);
    let manifest = d1.join(MANIFEST);
    let o = bin(&["train", "--config", manifest.to_str().unwrap(), "--out-dir", "runs"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let d3 = new_dir(&runs, &before);
    assert_eq!(c1, fs::read(d3.join(CHECKPOINT)).unwrap());
    assert_eq!(fs::read(d1.join("loss.csv")).unwrap(), fs::read(d3.join("loss.csv")).unwrap());

    let (_, d4) = train(t.path(), &["--epochs", "3", "--seed", "9", "--lr", "3e-3", "--warmup-epochs", "0.5"]);
    assert_ne!(c1, fs::read(d4.unwrap().join(CHECKPOINT)).unwrap());

    let csv = fs::read_to_string(d1.join("loss.csv")).unwrap();
    let train_loss: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(train_loss.len(), 3);
    assert!(train_loss[2] < train_loss[0], "{train_loss:?}");
}

#[test]
fn ablation_switches_reach_the_config() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "toy.wfr", &[]);
    let (o, d) = train(t.path(), &["--epochs", "0", "--mixer", "fno", "--no-temporal", "--no-rotate", "--noise", "--two-step"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = RunManifest::load(d.unwrap().join(MANIFEST)).unwrap();
    let tr = &m.config["train"];
    assert_eq!(tr["model"]["spatial"]["mode"], "fno");
    assert!(tr["model"]["temporal"].is_null());
    assert_eq!(tr["augment"]["rotate"], false);
    assert_eq!(tr["augment"]["noise"], true);
    assert_eq!(tr["two_step"], true);
}

#[test]
fn exploding_training_exits_with_three() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "toy.wfr", &[]);
    let (o, _) = train(t.path(), &["--epochs", "2", "--lr", "1e300", "--warmup-epochs", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite loss at epoch"), "{}", stderr(&o));
}

fn oracle_checkpoint(dir: &Path) -> PathBuf {
    let mut c = ModelConfig::toy(8, 16, 3);
    c.patch = Patch::new(1, 1, 1);
    c.layers = 0;
    c.spatial.blocks = 1;
    c.temporal = None;
    let p = ModelParams::shift_oracle(&c, 1).unwrap();
    let path = dir.join("oracle.wfck");
    save_checkpoint(&path, &p).unwrap();
    path
}

fn report_rows(csv: &str) -> Vec<Vec<String>> {
    csv.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn evaluate_scores_the_oracle_and_the_baselines() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "adv.wfr", &["--speed", "1", "--diffusion", "0"]);
    oracle_checkpoint(t.path());
    let runs = t.path().join("runs");
    let o = bin(
        &["evaluate", "--checkpoint", "oracle.wfck", "--data", "adv.wfr", "--leads", "3", "--out-dir", "runs"],
        t.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = run_dirs(&runs)[0].clone();
    let rows = report_rows(&fs::read_to_string(dir.join("report.csv")).unwrap());
    assert_eq!(rows.len(), 3 * 3 * 2);
    for r in rows.iter().filter(|r| r[0] == "model") {
        let (rmse, acc): (f64, f64) = (r[3].parse().unwrap(), r[4].parse().unwrap());
        assert!(rmse <= 1e-9 && (acc - 1.0).abs() <= 1e-9, "{r:?}");
    }

    // Persistence: the last observed state, scored directly.
    let b = load_wfr(t.path().join("adv.wfr")).unwrap();
    let w = lat_weights(&latitudes(8)).unwrap();
    let inits = init_times(&b, 4, 3);
    for lead in 1..=3 {
        let preds: Vec<_> = inits.iter().map(|&i| b.target(i + 3)).collect();
        let truths: Vec<_> = inits.iter().map(|&i| b.target(i + 3 + lead)).collect();
        let direct = weighted_rmse(&preds, &truths, &w).unwrap();
        for (c, name) in ["field0", "field1"].iter().enumerate() {
            let row = rows.iter().find(|r| r[0] == "persistence" && r[1] == lead.to_string() && r[2] == *name).unwrap();
            let v: f64 = row[3].parse().unwrap();
            assert!((v - direct[c]).abs() <= 1e-9 * direct[c].max(1.0), "{v} vs {}", direct[c]);
        }
    }

    let table = fs::read_to_string(dir.join("report.txt")).unwrap();
    let header = table.lines().next().unwrap();
    assert_eq!(header.split(" | ").count(), 1 + 2 * 3 * 2);
    assert_eq!(table.lines().count(), 2 + 3);
}

#[test]
fn mismatched_checkpoint_exits_with_four() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "toy.wfr", &[]);
    let p = ModelParams::init(&ModelConfig::toy(16, 32, 8), &mut stream(0, Stream::Init)).unwrap();
    save_checkpoint(t.path().join("big.wfck"), &p).unwrap();
    let o = bin(&["evaluate", "--checkpoint", "big.wfck", "--data", "toy.wfr", "--out-dir", "runs"], t.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let o = bin(&["predict", "--checkpoint", "big.wfck", "--data", "toy.wfr", "--out-dir", "runs"], t.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gradcheck_passes_and_names_a_corrupted_group() {
    let t = tempfile::tempdir().unwrap();
    let o = bin(&["gradcheck", "--out-dir", "runs"], t.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("PASS"));
    let o = bin(&["gradcheck", "--inject-fault", "--samples", "42", "--out-dir", "runs"], t.path());
    assert_eq!(o.status.code(), Some(5));
    let err = stderr(&o);
    assert!(err.contains("group lambda") && err.contains("parameter index"), "{err}");
    assert!(!err.contains("group decoder"));
    assert_eq!(run_dirs(&t.path().join("runs")).len(), 2);
}

#[test]
fn kernel_dump_and_predict_write_csv() {
    let t = tempfile::tempdir().unwrap();
    gen(t.path(), "toy.wfr", &[]);
    let (_, d) = train(t.path(), &["--epochs", "0"]);
    let ck = d.unwrap().join(CHECKPOINT);
    let ck = ck.to_str().unwrap();
    let runs = t.path().join("runs");

    let before = run_dirs(&runs);
    let o = bin(&["kernel-dump", "--checkpoint", ck, "--block", "0", "--domain", "spatial", "--out-dir", "runs"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(new_dir(&runs, &before).join("kernel.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "i0,i1,offset0,offset1,distance,value");
    assert_eq!(csv.lines().count(), 1 + 8 * 16);
    // A fresh initialization has lambda = 1: a delta kernel at the pivot.
    let pivot: f64 = csv.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!((pivot - 1.0).abs() < 1e-12);

    let o = bin(&["kernel-dump", "--checkpoint", ck, "--block", "7", "--out-dir", "runs"], t.path());
    assert_eq!(o.status.code(), Some(2));

    let before = run_dirs(&runs);
    let o = bin(&["predict", "--checkpoint", ck, "--data", "toy.wfr", "--leads", "2", "--out-dir", "runs"], t.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(new_dir(&runs, &before).join("forecast.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 8 * 16 * 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("1,0,0,"));
}
