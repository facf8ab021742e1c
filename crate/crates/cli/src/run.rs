//! `refml run` — execute the suite, writing a reproducing manifest before
//! any computation, per-cell checkpoints, and the results/summary CSVs.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use refml_core::config::ExperimentConfig;
use refml_core::data::ClientDataset;
use refml_core::eval::{self, run_suite, CellKey, FoldSpec, SuiteConfig};
use refml_core::fedproto::CellOutcome;
use refml_core::model::save_checkpoint;
use refml_core::{Error, Result};

fn cell_dir_name(key: &CellKey) -> String {
    format!(
        "{}_{}shot_fold{}_seed{}",
        key.method.name().replace('-', "_"),
        key.shots,
        key.fold,
        key.seed
    )
}

/// Planned artifact paths, known before any computation.
fn planned_artifacts(cfg: &ExperimentConfig, folds: &[FoldSpec]) -> Vec<String> {
    let mut artifacts = vec![
        "manifest.txt".to_string(),
        "results.csv".to_string(),
        "summary.csv".to_string(),
    ];
    for &method in &cfg.methods {
        for &shots in &cfg.shots {
            for fold in 0..folds.len() {
                for seed in 0..cfg.seeds {
                    let key = CellKey { method, shots, fold, seed };
                    let dir = cell_dir_name(&key);
                    artifacts.push(format!("cells/{dir}/global.bin"));
                    artifacts.push(format!("cells/{dir}/meta.txt"));
                    for cond in &folds[fold].test_conditions {
                        artifacts.push(format!("cells/{dir}/testing_{cond}.bin"));
                        if cfg.dump_embeddings {
                            artifacts.push(format!("cells/{dir}/embeddings_{cond}.tsv"));
                        }
                    }
                }
            }
        }
    }
    artifacts
}

/// The manifest doubles as a loadable config: resolved keys as plain lines,
/// run metadata and the artifact list as comments.
fn manifest_text(cfg: &ExperimentConfig, folds: &[FoldSpec], jobs: usize) -> String {
    let mut out = String::new();
    let started = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    writeln!(out, "# refml run manifest (loadable as --config)").unwrap();
    writeln!(out, "# meta: version = {}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(out, "# meta: started_unix = {started}").unwrap();
    writeln!(out, "# meta: jobs = {jobs}").unwrap();
    writeln!(out, "#").unwrap();
    out.push_str(&cfg.resolved_text());
    writeln!(out, "#").unwrap();
    for artifact in planned_artifacts(cfg, folds) {
        writeln!(out, "# artifact: {artifact}").unwrap();
    }
    out
}

fn write_cell(
    base: &Path,
    cfg: &ExperimentConfig,
    datasets: &[ClientDataset],
    key: &CellKey,
    outcome: &CellOutcome,
) -> Result<()> {
    let dir = base.join("cells").join(cell_dir_name(key));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;

    save_checkpoint(&dir.join("global.bin"), &cfg.arch, &outcome.final_global)?;
    for (cond, params) in &outcome.testing_models {
        save_checkpoint(&dir.join(format!("testing_{cond}.bin")), &cfg.arch, params)?;
        if cfg.dump_embeddings {
            let ds = datasets
                .iter()
                .find(|d| d.condition_id == *cond)
                .ok_or_else(|| Error::InvalidData(format!("no dataset for condition {cond}")))?;
            eval::export_embeddings(
                &cfg.arch,
                params,
                &ds.windows,
                &dir.join(format!("embeddings_{cond}.tsv")),
            )?;
        }
    }

    let mut meta = String::new();
    writeln!(meta, "method = {}", key.method).unwrap();
    writeln!(meta, "shots = {}", key.shots).unwrap();
    writeln!(meta, "fold = {}", key.fold).unwrap();
    writeln!(meta, "seed = {}", key.seed).unwrap();
    writeln!(meta, "rounds = {}", cfg.hp.rounds).unwrap();
    writeln!(meta, "accuracy = {}", outcome.accuracy).unwrap();
    for (cond, acc) in &outcome.per_client {
        writeln!(meta, "accuracy_condition_{cond} = {acc}").unwrap();
    }
    writeln!(meta, "hp.alpha = {}", cfg.hp.alpha).unwrap();
    writeln!(meta, "hp.beta = {}", cfg.hp.beta).unwrap();
    writeln!(meta, "hp.gamma = {}", cfg.hp.gamma).unwrap();
    writeln!(meta, "hp.delta = {}", cfg.hp.delta).unwrap();
    writeln!(meta, "hp.eta = {}", cfg.hp.eta).unwrap();
    writeln!(meta, "hp.mu = {}", cfg.hp.mu).unwrap();
    writeln!(meta, "hp.encoder_steps = {}", cfg.hp.encoder_steps).unwrap();
    writeln!(meta, "hp.finetune_steps = {}", cfg.hp.finetune_steps).unwrap();
    let meta_path = dir.join("meta.txt");
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path.display().to_string(), e))?;
    Ok(())
}

pub fn cmd_run(cfg: &ExperimentConfig, jobs: usize, dry_run: bool) -> Result<()> {
    if dry_run {
        print!("{}", cfg.resolved_text());
        return Ok(());
    }
    let datasets = cfg.load_datasets()?;
    let folds = cfg.fold_specs(&datasets)?;

    let out_dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let manifest_path = out_dir.join("manifest.txt");
    std::fs::write(&manifest_path, manifest_text(cfg, &folds, jobs))
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;

    let suite = SuiteConfig {
        spec: &cfg.arch,
        hp: &cfg.hp,
        methods: &cfg.methods,
        shots: &cfg.shots,
        folds: &folds,
        seeds: cfg.seeds,
        q_query: cfg.q_query,
        resample_episodes: cfg.resample_episodes,
        datasets: &datasets,
        master_seed: cfg.master_seed,
    };
    let sink = |key: &CellKey, outcome: &CellOutcome| write_cell(&out_dir, cfg, &datasets, key, outcome);

    let table = if jobs > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))?;
        pool.install(|| run_suite(&suite, &sink))?
    } else {
        run_suite(&suite, &sink)?
    };

    let results_path = out_dir.join("results.csv");
    std::fs::write(&results_path, table.to_csv())
        .map_err(|e| Error::io(results_path.display().to_string(), e))?;
    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&summary_path, table.summary_csv())
        .map_err(|e| Error::io(summary_path.display().to_string(), e))?;

    print!("{}", table.summary_csv());
    let failed: Vec<String> = table
        .rows()
        .iter()
        .filter(|r| r.outcome.is_err())
        .map(|r| {
            format!(
                "{} {}-shot fold {} seed {}: {}",
                r.method,
                r.shots,
                r.fold,
                r.seed,
                r.outcome.as_ref().unwrap_err()
            )
        })
        .collect();
    if !failed.is_empty() {
        return Err(Error::NonFinite(format!(
            "{} cell(s) failed:\n{}",
            failed.len(),
            failed.join("\n")
        )));
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}
