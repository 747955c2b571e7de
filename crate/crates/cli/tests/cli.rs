use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn chord(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chord"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// 30 users with 12 interactions each over 40 items, tab-separated.
fn write_dataset(dir: &Path) -> PathBuf {
    let mut text = String::new();
    for u in 0..30u64 {
        for t in 0..12u64 {
            let item = (u * 7 + t * 3 + (u * t) % 5) % 40;
            text.push_str(&format!(
                "{}\t{}\t4\t{}\n",
                u + 1,
                item + 1,
                1000 + t * 10 + u
            ));
        }
    }
    let path = dir.join("u.data");
    fs::write(&path, text).unwrap();
    path
}

fn write_config(dir: &Path, data: &Path, arch: &str) -> PathBuf {
    let text = format!(
        r#"out = "{out}"
seeds = [3]
budgets = [3.0, 2.5]

[dataset]
name = "toy"
path = "{data}"
format = "ml100k"
k_core = 2

[backbone]
architecture = "{arch}"
embedding_dim = 8
max_seq_len = {len}
num_heads = 2
num_blocks = 1
horizontal_filters = 4
vertical_filters = 2
filter_heights = [2, 3]

[saliency]
profile_dim = 8
hidden = 8
rank = 2
window = 5

[train]
epochs = 2
batch_size = 8
negatives = 5

[eval]
negatives = 10
"#,
        out = dir.join("out").display(),
        data = data.display(),
        arch = arch,
        len = if arch == "caser" { 4 } else { 8 },
    );
    let path = dir.join(format!("{}.toml", arch));
    fs::write(&path, text).unwrap();
    path
}

fn setup(arch: &str) -> (TempDir, PathBuf) {
    let dir = TempDir::new().unwrap();
    let data = write_dataset(dir.path());
    let cfg = write_config(dir.path(), &data, arch);
    (dir, cfg)
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn train_writes_checkpoint_and_log_with_bit_config() {
    let (dir, cfg) = setup("sasrec");
    let out = chord(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--bit-config",
        "2-5-6-7",
    ]);
    ok(&out);
    let seed_dir = dir.path().join("out/seed-3");
    assert!(seed_dir.join("model.chck").is_file());
    let log = fs::read_to_string(seed_dir.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("started_unix"));
    for l in &lines[1..] {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert_eq!(v["bit_config"], "2-5-6-7");
        for key in ["epoch", "loss", "ndcg10", "hr10", "avg_bits", "wall_ms"] {
            assert!(v.get(key).is_some(), "missing {}", key);
        }
    }
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("nope.data"), "sasrec");
    let out = chord(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset not found"));
}

#[test]
fn unknown_baseline_and_bad_flags_exit_two() {
    let (_dir, cfg) = setup("caser");
    let out = chord(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--baselines",
        "chord,magic",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = chord(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--bit-config",
        "1-2-3-4",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = chord(&["train", "--config", cfg.to_str().unwrap(), "--beta", "0.9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_and_eval_reports_are_deterministic() {
    let (dir, cfg) = setup("caser");
    let cfg = cfg.to_str().unwrap();
    ok(&chord(&["train", "--config", cfg]));
    let seed_dir = dir.path().join("out/seed-3");

    ok(&chord(&["simulate", "--config", cfg]));
    let first = fs::read(seed_dir.join("simulate.csv")).unwrap();
    let transcript = fs::read(seed_dir.join("transcript-b2.50.jsonl")).unwrap();
    ok(&chord(&["simulate", "--config", cfg]));
    assert_eq!(first, fs::read(seed_dir.join("simulate.csv")).unwrap());
    assert_eq!(
        transcript,
        fs::read(seed_dir.join("transcript-b2.50.jsonl")).unwrap()
    );

    let rows = chord_core::data::read_metrics_csv(&first[..]).unwrap();
    assert_eq!(rows.len(), 2);
    for (row, budget) in rows.iter().zip([3.0, 2.5]) {
        assert!(
            row.avg_bits <= budget + 0.05,
            "{} > {}",
            row.avg_bits,
            budget
        );
    }

    ok(&chord(&["eval", "--config", cfg]));
    let rows =
        chord_core::data::read_metrics_csv(&fs::read(seed_dir.join("eval.csv")).unwrap()[..])
            .unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, ["chord", "quant-3bit", "full-precision"]);
    // caser toy registry: h2, h3 (4 channels each), v (2), fc (8), each
    // layer padded to whole bytes: 8 + 8 + 8 + 16 bits
    assert!((rows[0].param_mbit - 40.0 / 1e6).abs() < 1e-12);
    assert!(rows[0].ndcg10 > 0.0);
    assert_eq!(rows[2].avg_bits, 32.0);
}

#[test]
fn export_writes_one_strategy_per_user() {
    let (dir, cfg) = setup("sasrec");
    let cfg = cfg.to_str().unwrap();
    ok(&chord(&["train", "--config", cfg, "--epochs", "1"]));
    ok(&chord(&["export", "--config", cfg]));
    let strategies = dir.path().join("out/seed-3/strategies");
    let files = fs::read_dir(&strategies)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "chst")
        })
        .count();
    assert_eq!(files, 30);
    let index = fs::read_to_string(strategies.join("index.csv")).unwrap();
    assert_eq!(index.lines().count(), 31);
}

#[test]
fn foreign_checkpoint_is_an_incompatibility() {
    let (dir, cfg) = setup("sasrec");
    let cfg = cfg.to_str().unwrap();
    ok(&chord(&["train", "--config", cfg, "--epochs", "1"]));
    let ckpt = dir.path().join("out/seed-3/model.chck");
    let mut bytes = fs::read(&ckpt).unwrap();
    // flip a bit in the first stored value of a trunk weight
    let n = bytes.len();
    let tampered = dir.path().join("tampered.chck");
    let name = b"block0.attn.k.weight";
    let pos = bytes.windows(name.len()).position(|w| w == name).unwrap() + name.len();
    bytes[pos + 2 + 8 + 1] ^= 0x20;
    assert_eq!(bytes.len(), n);
    fs::write(&tampered, &bytes).unwrap();
    let out = chord(&[
        "simulate",
        "--config",
        cfg,
        "--checkpoint",
        tampered.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
