//! End-to-end tests of the `alc` binary: exit codes, file outputs, and the
//! synth -> train -> evaluate -> sweep -> compare flow.

use std::path::{Path, PathBuf};
use std::process::Command;

use alc_core::cache::read_cache;
use alc_core::checkpoint::load_checkpoint;
use alc_core::models::{Model, ModelKind, ModelSpec};
use alc_core::pamap2::{render_line, ImuBlock, SampleRecord};

fn alc(args: &[&str], envs: &[(&str, &str)]) -> (i32, String, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_alc"))
        .args(args)
        .envs(envs.iter().copied())
        .output()
        .expect("spawn alc");
    (
        output.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&output.stdout).into_owned(),
        String::from_utf8_lossy(&output.stderr).into_owned(),
    )
}

fn met_table_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/pamap2_met.tsv")
}

fn path_str(path: &Path) -> String {
    path.to_str().expect("utf8 path").to_string()
}

#[test]
fn synth_train_evaluate_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("windows.alwin");
    let (code, stdout, stderr) = alc(
        &[
            "synth",
            "--out",
            &path_str(&cache),
            "--subjects",
            "3",
            "--per-class",
            "4",
            "--channels",
            "3",
            "--window",
            "32",
            "--noise",
            "0.1",
            "--seed",
            "7",
        ],
        &[],
    );
    assert_eq!(code, 0, "synth failed: {stderr}");
    assert!(stdout.contains("36 windows"), "stdout: {stdout}");
    let set = read_cache(&cache).unwrap();
    assert_eq!(set.len(), 36);

    let train_dir = dir.path().join("run");
    let (code, stdout, stderr) = alc(
        &[
            "train",
            "--cache",
            &path_str(&cache),
            "--model",
            "mlp",
            "--config",
            "WO",
            "--out-dir",
            &path_str(&train_dir),
            "--epochs",
            "2",
        ],
        &[],
    );
    assert_eq!(code, 0, "train failed: {stderr}");
    assert!(stdout.contains("final loss"));
    let history = std::fs::read_to_string(train_dir.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "epoch,loss");
    assert_eq!(lines.len(), 3);

    let eval_dir = dir.path().join("eval");
    let (code, stdout, stderr) = alc(
        &[
            "evaluate",
            "--checkpoint",
            &path_str(&train_dir.join("model.ckpt")),
            "--cache",
            &path_str(&cache),
            "--out-dir",
            &path_str(&eval_dir),
        ],
        &[],
    );
    assert_eq!(code, 0, "evaluate failed: {stderr}");
    assert!(stdout.contains("accuracy"), "stdout: {stdout}");
    let metrics = std::fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("accuracy,macro_f1,recall_low,recall_medium,recall_high\n"));
    let counts = std::fs::read_to_string(eval_dir.join("confusion_counts.csv")).unwrap();
    let total: u64 = counts
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(1).map(|v| v.parse::<u64>().unwrap()))
        .sum();
    assert_eq!(total, 36);
    let pct = std::fs::read_to_string(eval_dir.join("confusion_percent.csv")).unwrap();
    for line in pct.lines().skip(1) {
        let sum: f64 = line
            .split(',')
            .skip(1)
            .map(|v| v.parse::<f64>().unwrap())
            .sum();
        assert!((sum - 100.0).abs() < 1e-6 || sum == 0.0, "row {line}");
    }
}

#[test]
fn train_with_zero_epochs_saves_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("w.alwin");
    let (code, _, _) = alc(
        &[
            "synth",
            "--out",
            &path_str(&cache),
            "--subjects",
            "2",
            "--per-class",
            "2",
            "--channels",
            "3",
            "--window",
            "16",
            "--seed",
            "3",
        ],
        &[],
    );
    assert_eq!(code, 0);
    let out = dir.path().join("init");
    let (code, _, stderr) = alc(
        &[
            "train",
            "--cache",
            &path_str(&cache),
            "--model",
            "mlp",
            "--config",
            "WO",
            "--out-dir",
            &path_str(&out),
            "--epochs",
            "0",
        ],
        &[],
    );
    assert_eq!(code, 0, "train failed: {stderr}");
    let (loaded, _, _) = load_checkpoint(&out.join("model.ckpt")).unwrap();
    let fresh = Model::build(
        ModelSpec {
            kind: ModelKind::Mlp,
            in_channels: 3,
            window_length: 16,
            n_classes: 3,
        },
        42,
    )
    .unwrap();
    for (a, b) in loaded.store().params().iter().zip(fresh.store().params()) {
        assert_eq!(a.value, b.value, "{} differs from initialization", a.name);
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history, "epoch,loss\n");
}

fn imu(v: f64) -> ImuBlock {
    ImuBlock {
        accel: [Some(v), Some(v + 0.1), Some(v - 0.1)],
        gyro: [Some(v / 10.0), Some(v / 20.0), Some(v / 30.0)],
    }
}

fn write_subject(path: &Path, activities: &[(u16, usize)]) {
    let mut t = 0.0;
    let mut lines = String::new();
    for &(activity, samples) in activities {
        for i in 0..samples {
            let v = (i as f64 / 7.0).sin() * if activity == 5 { 3.0 } else { 1.0 };
            let record = SampleRecord {
                timestamp: t,
                activity_id: activity,
                heart_rate: None,
                imu_wrist: imu(v),
                imu_chest: imu(v + 1.0),
                imu_ankle: imu(v + 2.0),
            };
            lines.push_str(&render_line(&record));
            lines.push('\n');
            t += 0.01;
        }
    }
    std::fs::write(path, lines).unwrap();
}

#[test]
fn prepare_builds_cache_with_conserved_counts() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw");
    std::fs::create_dir(&raw).unwrap();
    // Activity 1 = lying (low), 4 = walking (medium), 5 = running (high),
    // 0 = transient and must never reach a window.
    write_subject(&raw.join("subject101.dat"), &[(1, 30), (0, 10), (4, 30)]);
    write_subject(&raw.join("subject102.dat"), &[(5, 30), (1, 12)]);
    let cache = dir.path().join("pamap.alwin");
    let (code, stdout, stderr) = alc(
        &[
            "prepare",
            "--raw-dir",
            &path_str(&raw),
            "--met-table",
            &path_str(&met_table_path()),
            "--out",
            &path_str(&cache),
            "--config",
            "W18",
            "--window",
            "8",
            "--stride",
            "4",
            "--max-gap",
            "2",
        ],
        &[],
    );
    assert_eq!(code, 0, "prepare failed: {stderr}");
    let set = read_cache(&cache).unwrap();
    assert_eq!(set.channels(), 18);
    assert_eq!(set.subjects(), vec![101, 102]);
    let mut counts = [0usize; 3];
    for e in &set.examples {
        counts[e.label.index()] += 1;
    }
    assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
    for (i, name) in ["low", "medium", "high"].iter().enumerate() {
        assert!(
            stdout.contains(&format!("{name} {}", counts[i])),
            "summary {stdout:?} vs counts {counts:?}"
        );
    }
}

#[test]
fn bad_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let (code, _, stderr) = alc(
        &[
            "prepare",
            "--raw-dir",
            &path_str(&empty),
            "--met-table",
            &path_str(&met_table_path()),
            "--out",
            &path_str(&dir.path().join("x.alwin")),
        ],
        &[],
    );
    assert_eq!(code, 2, "stderr: {stderr}");
    assert!(stderr.contains("no .dat"));

    let (code, _, _) = alc(
        &[
            "train",
            "--cache",
            &path_str(&dir.path().join("missing.alwin")),
            "--model",
            "mlp",
            "--out-dir",
            &path_str(&dir.path().join("out")),
        ],
        &[],
    );
    assert_eq!(code, 2);

    let (code, _, _) = alc(&["train"], &[]);
    assert_eq!(code, 2);
    let (code, _, _) = alc(&["no-such-command"], &[]);
    assert_eq!(code, 2);
    let (code, _, _) = alc(&["--help"], &[]);
    assert_eq!(code, 0);
}

fn sweep_manifest(dir: &Path, out_dir: &Path) -> PathBuf {
    let manifest = serde_json::json!({
        "synth": {
            "n_subjects": 3,
            "windows_per_class": 2,
            "channels": 18,
            "window_length": 32,
            "noise_std": 0.1,
            "seed": 9
        },
        "configs": ["WO", "W18"],
        "models": ["mlp", "cnn"],
        "hyperparams": { "epochs": 1, "seed": 5 },
        "protocol": "loso",
        "repeats": 2,
        "out_dir": out_dir
    });
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

#[test]
fn sweep_is_resumable_and_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let manifest = sweep_manifest(dir.path(), &out_dir);
    let (code, stdout, stderr) = alc(&["sweep", "--config", &path_str(&manifest)], &[]);
    assert_eq!(code, 0, "sweep failed: {stderr}");
    assert!(stdout.contains("4 cells (0 reused)"), "stdout: {stdout}");
    let results = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(
        lines[0],
        "config,model,protocol,subject,repeat,accuracy,macro_f1"
    );
    // 2 configs x 2 models x 3 subjects x 2 repeats.
    assert_eq!(lines.len(), 1 + 24);

    let (code, stdout, stderr) = alc(&["sweep", "--config", &path_str(&manifest)], &[]);
    assert_eq!(code, 0, "re-sweep failed: {stderr}");
    assert!(stdout.contains("4 cells (4 reused)"), "stdout: {stdout}");
    let again = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(results, again);

    // A fresh output directory recomputes everything but must produce the
    // same bytes.
    let out2 = dir.path().join("sweep2");
    let (code, _, _) = alc(
        &[
            "sweep",
            "--config",
            &path_str(&manifest),
            "--out-dir",
            &path_str(&out2),
        ],
        &[],
    );
    assert_eq!(code, 0);
    let fresh = std::fs::read_to_string(out2.join("results.csv")).unwrap();
    assert_eq!(results, fresh);

    let grid = std::fs::read_to_string(out_dir.join("accuracy_grid.csv")).unwrap();
    let grid_lines: Vec<&str> = grid.lines().collect();
    assert_eq!(grid_lines[0], "model,WO,W18");
    assert_eq!(grid_lines.len(), 3);

    // Changing the seed must invalidate the cell digests.
    let (code, stdout, _) = alc(
        &["sweep", "--config", &path_str(&manifest), "--seed", "6"],
        &[],
    );
    assert_eq!(code, 0);
    assert!(stdout.contains("4 cells (0 reused)"), "stdout: {stdout}");
}

#[test]
fn alc_seed_env_overrides_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let manifest = sweep_manifest(dir.path(), &out_dir);
    let (code, _, stderr) = alc(
        &["sweep", "--config", &path_str(&manifest)],
        &[("ALC_SEED", "123")],
    );
    assert_eq!(code, 0, "sweep failed: {stderr}");
    let recorded = std::fs::read_to_string(out_dir.join("manifest.json")).unwrap();
    assert!(recorded.contains("\"seed\": 123"), "manifest: {recorded}");

    let (code, _, stderr) = alc(
        &["sweep", "--config", &path_str(&manifest)],
        &[("ALC_SEED", "not-a-number")],
    );
    assert_eq!(code, 2, "stderr: {stderr}");
}

#[test]
fn compare_reports_pairs_and_degenerate_cases() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let manifest = sweep_manifest(dir.path(), &out_dir);
    let (code, _, stderr) = alc(&["sweep", "--config", &path_str(&manifest)], &[]);
    assert_eq!(code, 0, "sweep failed: {stderr}");

    // Mixed models without a filter is ambiguous.
    let report = dir.path().join("report.csv");
    let (code, _, stderr) = alc(
        &[
            "compare",
            "--results",
            &path_str(&out_dir.join("results.csv")),
            "--out",
            &path_str(&report),
        ],
        &[],
    );
    assert_eq!(code, 2);
    assert!(stderr.contains("--model"), "stderr: {stderr}");

    let (code, stdout, stderr) = alc(
        &[
            "compare",
            "--results",
            &path_str(&out_dir.join("results.csv")),
            "--out",
            &path_str(&report),
            "--model",
            "mlp",
        ],
        &[],
    );
    assert_eq!(code, 0, "compare failed: {stderr}");
    assert!(stdout.contains("WO-W18"));
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "pair,n_effective,W,p_value,method,threshold,significant"
    );
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("WO-W18,"));
    assert!(lines[1].contains(",0.050000,"));

    // Identical score columns give the degenerate report.
    let header = "config,model,protocol,subject,repeat,accuracy,macro_f1";
    let degenerate = format!(
        "{header}\nWO,mlp,loso,1,0,0.5,0.5\nWO,mlp,loso,2,0,0.6,0.6\nW18,mlp,loso,1,0,0.5,0.5\nW18,mlp,loso,2,0,0.6,0.6\n"
    );
    let degenerate_path = dir.path().join("degenerate.csv");
    std::fs::write(&degenerate_path, degenerate).unwrap();
    let (code, stdout, _) = alc(
        &[
            "compare",
            "--results",
            &path_str(&degenerate_path),
            "--out",
            &path_str(&report),
        ],
        &[],
    );
    assert_eq!(code, 0);
    assert!(stdout.contains("degenerate"), "stdout: {stdout}");
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("WO-W18,0,0.0,1.000000,degenerate"), "{text}");

    // Disjoint pairing keys are a usage error.
    let mismatched = format!("{header}\nWO,mlp,loso,1,0,0.5,0.5\nW18,mlp,loso,2,0,0.6,0.6\n");
    let mismatched_path = dir.path().join("mismatched.csv");
    std::fs::write(&mismatched_path, mismatched).unwrap();
    let (code, _, stderr) = alc(
        &[
            "compare",
            "--results",
            &path_str(&mismatched_path),
            "--out",
            &path_str(&report),
        ],
        &[],
    );
    assert_eq!(code, 2, "stderr: {stderr}");

    // Three configurations produce the three canonical pairs with the
    // 0.05/3 threshold.
    let mut triple = String::from(header);
    triple.push('\n');
    for (cfg, base) in [("WO", 0.70), ("WA", 0.80), ("W18", 0.90)] {
        for subject in 1..=4u16 {
            triple.push_str(&format!(
                "{cfg},cnn_lstm,loso,{subject},0,{:.6},{:.6}\n",
                base + subject as f64 / 100.0,
                base + subject as f64 / 90.0,
            ));
        }
    }
    let triple_path = dir.path().join("triple.csv");
    std::fs::write(&triple_path, triple).unwrap();
    let (code, _, stderr) = alc(
        &[
            "compare",
            "--results",
            &path_str(&triple_path),
            "--out",
            &path_str(&report),
        ],
        &[],
    );
    assert_eq!(code, 0, "compare failed: {stderr}");
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("WO-WA,"));
    assert!(lines[2].starts_with("WO-W18,"));
    assert!(lines[3].starts_with("WA-W18,"));
    assert!(lines[1].contains(",0.016667,"), "{}", lines[1]);
}
