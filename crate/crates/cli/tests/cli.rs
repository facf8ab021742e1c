//! End-to-end tests of the `refml` binary: generate, run, inspect, exit
//! codes, and reproducibility guarantees.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn refml() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refml"))
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let base = "\
data.source = synthetic
synthetic.conditions = 1.0:0.5:1.0;1.05:0.6:0.9;0.95:0.7:1.1
synthetic.windows_per_class = 10
synthetic.seed = 3
classes = 3
model.input_length = 64
model.conv_units = 2x3x2,4x3x2
model.hidden_dim = 8
methods = REFML,FedAvg-FT,Local
episode.shots = 2
episode.query = 4
rounds = 3
seeds = 1
master_seed = 5
hp.alpha = 0.02
hp.beta = 0.02
hp.gamma = 0.02
hp.delta = 0.05
hp.eta = 0.02
hp.encoder_steps = 2
hp.finetune_steps = 2
";
    let path = dir.join("exp.cfg");
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_writes_one_csv_per_condition_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out1 = dir.path().join("data1");
    let status = refml()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out1)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", stderr(&status));

    let mut files: Vec<PathBuf> = std::fs::read_dir(&out1)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert_eq!(files.len(), 3);
    // 3 classes × 10 windows per class = 30 rows per condition file.
    for f in &files {
        let text = std::fs::read_to_string(f).unwrap();
        assert_eq!(text.lines().count(), 30);
    }

    // Same seed → byte-identical files.
    let out2 = dir.path().join("data2");
    refml()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out2)
        .output()
        .unwrap();
    for f in &files {
        let twin = out2.join(f.file_name().unwrap());
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(&twin).unwrap());
    }
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "definitely_not_a_key = 1\n");
    let out = refml()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("definitely_not_a_key"), "{}", stderr(&out));
}

#[test]
fn dry_run_prints_resolved_config_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = refml()
        .args(["run", "--dry-run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("rounds = 3"), "{text}");
    assert!(text.contains("methods = REFML,FedAvg-FT,Local"), "{text}");
    assert!(!out_dir.exists());
}

#[test]
fn run_emits_manifest_results_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = refml()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    for f in ["manifest.txt", "results.csv", "summary.csv"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }
    // 3 methods × 1 shot × 3 folds × 1 seed = 9 cells.
    let cells: Vec<_> = std::fs::read_dir(out_dir.join("cells")).unwrap().collect();
    assert_eq!(cells.len(), 9);
    let one = out_dir.join("cells/REFML_2shot_fold0_seed0");
    assert!(one.join("global.bin").exists());
    assert!(one.join("meta.txt").exists());
    let meta = std::fs::read_to_string(one.join("meta.txt")).unwrap();
    assert!(meta.contains("method = REFML"));
    assert!(meta.contains("rounds = 3"));

    // Every artifact the manifest promised exists.
    let manifest = std::fs::read_to_string(out_dir.join("manifest.txt")).unwrap();
    let mut promised = 0;
    for line in manifest.lines() {
        if let Some(name) = line.strip_prefix("# artifact: ") {
            assert!(out_dir.join(name).exists(), "promised artifact {name} missing");
            promised += 1;
        }
    }
    assert!(promised > 9, "manifest lists {promised} artifacts");

    // Results table has one row per cell.
    let results = std::fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 10); // header + 9 rows
}

#[test]
fn rerun_from_manifest_reproduces_summary_bytes_at_any_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out1 = dir.path().join("out1");
    let run1 = refml()
        .args(["run", "--jobs", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out1)
        .output()
        .unwrap();
    assert!(run1.status.success(), "{}", stderr(&run1));

    // The manifest is itself a loadable config.
    let out2 = dir.path().join("out2");
    let run2 = refml()
        .args(["run", "--jobs", "1", "--config"])
        .arg(out1.join("manifest.txt"))
        .arg("--out")
        .arg(&out2)
        .output()
        .unwrap();
    assert!(run2.status.success(), "{}", stderr(&run2));

    let summary1 = std::fs::read(out1.join("summary.csv")).unwrap();
    let summary2 = std::fs::read(out2.join("summary.csv")).unwrap();
    assert_eq!(summary1, summary2);
    let results1 = std::fs::read(out1.join("results.csv")).unwrap();
    let results2 = std::fs::read(out2.join("results.csv")).unwrap();
    assert_eq!(results1, results2);
}

#[test]
fn set_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = refml()
        .args(["run", "--dry-run", "--set", "rounds=7", "--set", "seeds=2", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    let text = stdout(&out);
    assert!(text.contains("rounds = 7"), "{text}");
    assert!(text.contains("seeds = 2"), "{text}");
}

#[test]
fn inspect_reports_paper_shapes_and_rejects_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();

    // Build a paper-default checkpoint through the library.
    let spec = refml_core::model::ArchitectureSpec::paper_default(10);
    let params = refml_core::model::build(&spec, 11).unwrap();
    let ck_path = dir.path().join("paper.bin");
    refml_core::model::save_checkpoint(&ck_path, &spec, &params).unwrap();

    let out = refml().arg("inspect").arg(&ck_path).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("flatten length: 4096"), "{text}");
    assert!(text.contains("embedding width: 256"), "{text}");
    assert!(text.contains("predictor path: 4096 -> 256 -> 10"), "{text}");

    // Truncated file.
    let bytes = std::fs::read(&ck_path).unwrap();
    let trunc_path = dir.path().join("trunc.bin");
    std::fs::write(&trunc_path, &bytes[..bytes.len() / 3]).unwrap();
    let out = refml().arg("inspect").arg(&trunc_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("corrupt checkpoint"), "{}", stderr(&out));

    // Wrong magic.
    let mut bad = bytes.clone();
    bad[0] = b'Z';
    let bad_path = dir.path().join("bad.bin");
    std::fs::write(&bad_path, &bad).unwrap();
    let out = refml().arg("inspect").arg(&bad_path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("magic"), "{}", stderr(&out));
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let out = refml()
        .args(["run", "--config", "/nonexistent/nowhere.cfg"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn csv_source_round_trips_through_generate_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let data_dir = dir.path().join("data");
    refml()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&data_dir)
        .output()
        .unwrap();

    // Same experiment, fed from the generated CSVs.
    let csv_cfg = dir.path().join("csv.cfg");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("data.source = synthetic", "data.source = csv");
    std::fs::write(
        &csv_cfg,
        format!("{text}data.csv_dir = {}\n", data_dir.display()),
    )
    .unwrap();
    let out_dir = dir.path().join("out_csv");
    let out = refml()
        .args(["run", "--config"])
        .arg(&csv_cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    // Synthetic-direct and CSV-fed runs see identical data, so results match.
    let out_dir2 = dir.path().join("out_syn");
    refml()
        .args(["run", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir2)
        .output()
        .unwrap();
    assert_eq!(
        std::fs::read(out_dir.join("results.csv")).unwrap(),
        std::fs::read(out_dir2.join("results.csv")).unwrap()
    );
}
