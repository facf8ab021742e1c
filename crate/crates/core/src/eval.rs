//! Cross-condition fold protocols, accuracy metrics, suite execution over
//! the method × shot × fold × seed cross product, and embedding export.

use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{windows_to_batch, ClientDataset, LabeledWindow};
use crate::error::{Error, Result};
use crate::fedproto::{run_experiment, CellConfig, CellOutcome, HyperParams, Method};
use crate::model::{self, ArchitectureSpec, ParamSet};
use crate::seeds;

/// Query-set classification accuracy in percent; argmax predictions with
/// lowest-index tie-breaking.
pub fn accuracy(spec: &ArchitectureSpec, params: &ParamSet, query: &[LabeledWindow]) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::InvalidData("empty query set".into()));
    }
    let (batch, labels) = windows_to_batch(query)?;
    let out = model::forward(spec, params, &batch)?;
    let n = spec.num_classes;
    let correct = out
        .logits
        .data()
        .chunks(n)
        .zip(&labels)
        .filter(|(row, &label)| model::argmax(row) == label)
        .count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// One cross-validation fold: which conditions train and which test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSpec {
    pub train_conditions: Vec<u32>,
    pub test_conditions: Vec<u32>,
}

/// How folds are produced.
#[derive(Debug, Clone)]
pub enum FoldMode {
    /// Rotate each condition through the testing role; fold i tests
    /// condition i and trains on the others in rotated order.
    LeaveOneOut,
    /// Explicit folds. `cross_equipment` marks train/test conditions as
    /// coming from distinct datasets, where equal ids are not an overlap.
    Explicit {
        folds: Vec<FoldSpec>,
        cross_equipment: bool,
    },
}

pub fn kfold_protocol(condition_ids: &[u32], mode: &FoldMode) -> Result<Vec<FoldSpec>> {
    match mode {
        FoldMode::LeaveOneOut => {
            let m = condition_ids.len();
            if m < 2 {
                return Err(Error::InvalidConfig(format!(
                    "leave-one-out needs at least 2 conditions, got {m}"
                )));
            }
            Ok((0..m)
                .map(|i| FoldSpec {
                    train_conditions: (1..m).map(|o| condition_ids[(i + o) % m]).collect(),
                    test_conditions: vec![condition_ids[i]],
                })
                .collect())
        }
        FoldMode::Explicit { folds, cross_equipment } => {
            if folds.is_empty() {
                return Err(Error::InvalidConfig("no explicit folds given".into()));
            }
            for (i, f) in folds.iter().enumerate() {
                if f.train_conditions.is_empty() || f.test_conditions.is_empty() {
                    return Err(Error::InvalidConfig(format!(
                        "fold {}: train and test conditions must be nonempty",
                        i + 1
                    )));
                }
                if !cross_equipment {
                    if let Some(shared) = f
                        .train_conditions
                        .iter()
                        .find(|c| f.test_conditions.contains(c))
                    {
                        return Err(Error::InvalidConfig(format!(
                            "fold {}: condition {shared} appears in both train and test",
                            i + 1
                        )));
                    }
                }
            }
            Ok(folds.clone())
        }
    }
}

/// One suite cell result.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub method: Method,
    pub shots: usize,
    pub fold: usize,
    pub seed: u64,
    /// Accuracy percent, or the error that aborted the cell.
    pub outcome: std::result::Result<f64, String>,
}

/// Per-method, per-shot, per-fold accuracy records with unique cells.
#[derive(Debug, Clone, Default)]
pub struct ResultsTable {
    rows: Vec<ResultRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub shots: usize,
    pub mean: f64,
    pub std: f64,
}

impl ResultsTable {
    pub fn new() -> Self {
        ResultsTable { rows: Vec::new() }
    }

    pub fn insert(&mut self, row: ResultRow) -> Result<()> {
        if let Ok(acc) = row.outcome {
            if !(0.0..=100.0).contains(&acc) {
                return Err(Error::InvalidData(format!("accuracy {acc} outside [0, 100]")));
            }
        }
        let duplicate = self.rows.iter().any(|r| {
            r.method == row.method && r.shots == row.shots && r.fold == row.fold && r.seed == row.seed
        });
        if duplicate {
            return Err(Error::InvalidData(format!(
                "duplicate cell ({}, {}-shot, fold {}, seed {})",
                row.method, row.shots, row.fold, row.seed
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    /// Sorts rows into canonical (method, shots, fold, seed) order so the
    /// serialized table is independent of completion order.
    pub fn canonicalize(&mut self) {
        self.rows.sort_by_key(|r| {
            (
                Method::ALL.iter().position(|m| *m == r.method).unwrap_or(usize::MAX),
                r.shots,
                r.fold,
                r.seed,
            )
        });
    }

    /// Mean accuracy of a (method, shots) group over succeeded cells.
    pub fn mean_of(&self, method: Method, shots: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method && r.shots == shots)
            .filter_map(|r| r.outcome.as_ref().ok().copied())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean accuracy of a method over all shots, folds, and seeds.
    pub fn mean_over_shots(&self, method: Method) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.outcome.as_ref().ok().copied())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Mean ± sample std per (method, shots) group, in canonical order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<(Method, usize)> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&(r.method, r.shots)) {
                groups.push((r.method, r.shots));
            }
        }
        groups.sort_by_key(|(m, s)| {
            (
                Method::ALL.iter().position(|x| x == m).unwrap_or(usize::MAX),
                *s,
            )
        });
        groups
            .into_iter()
            .filter_map(|(method, shots)| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.method == method && r.shots == shots)
                    .filter_map(|r| r.outcome.as_ref().ok().copied())
                    .collect();
                if vals.is_empty() {
                    return None;
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let std = if vals.len() < 2 {
                    0.0
                } else {
                    (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
                };
                Some(SummaryRow { method, shots, mean, std })
            })
            .collect()
    }

    /// `method,shots,fold,seed,accuracy` rows; failed cells carry `failed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,shots,fold,seed,accuracy\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(acc) => writeln!(out, "{},{},{},{},{acc}", r.method, r.shots, r.fold, r.seed),
                Err(_) => writeln!(out, "{},{},{},{},failed", r.method, r.shots, r.fold, r.seed),
            }
            .unwrap();
        }
        out
    }

    /// `method,shots,mean,std` summary.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,shots,mean,std\n");
        for s in self.summary() {
            writeln!(out, "{},{},{:.4},{:.4}", s.method, s.shots, s.mean, s.std).unwrap();
        }
        out
    }
}

/// Identity of one suite cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellKey {
    pub method: Method,
    pub shots: usize,
    pub fold: usize,
    pub seed: u64,
}

/// Inputs of a whole suite: the cross product of methods, shots, folds, and
/// seeds over a fixed set of condition datasets.
pub struct SuiteConfig<'a> {
    pub spec: &'a ArchitectureSpec,
    pub hp: &'a HyperParams,
    pub methods: &'a [Method],
    pub shots: &'a [usize],
    pub folds: &'a [FoldSpec],
    /// Number of seeds per cell (seed indices 0..seeds).
    pub seeds: u64,
    pub q_query: usize,
    pub resample_episodes: bool,
    pub datasets: &'a [ClientDataset],
    pub master_seed: u64,
}

fn datasets_for(all: &[ClientDataset], ids: &[u32]) -> Result<Vec<ClientDataset>> {
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|d| d.condition_id == *id)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("no dataset for condition {id}")))
        })
        .collect()
}

/// Runs every cell of the suite, in parallel, and assembles the table in
/// canonical order. A failing cell is recorded as failed and does not stop
/// the others. `sink` observes each finished cell (checkpointing); the
/// degree of parallelism does not affect any output.
pub fn run_suite(
    cfg: &SuiteConfig,
    sink: &(dyn Fn(&CellKey, &CellOutcome) -> Result<()> + Sync),
) -> Result<ResultsTable> {
    if cfg.methods.is_empty() || cfg.shots.is_empty() || cfg.folds.is_empty() || cfg.seeds == 0 {
        return Err(Error::InvalidConfig(
            "suite needs at least one method, shot, fold, and seed".into(),
        ));
    }
    let mut cells: Vec<CellKey> = Vec::new();
    for &method in cfg.methods {
        for &shots in cfg.shots {
            for fold in 0..cfg.folds.len() {
                for seed in 0..cfg.seeds {
                    cells.push(CellKey { method, shots, fold, seed });
                }
            }
        }
    }

    let outcomes: Vec<ResultRow> = cells
        .par_iter()
        .map(|key| {
            let run = || -> Result<f64> {
                let fold = &cfg.folds[key.fold];
                let train = datasets_for(cfg.datasets, &fold.train_conditions)?;
                let test = datasets_for(cfg.datasets, &fold.test_conditions)?;
                let cell = CellConfig {
                    spec: cfg.spec,
                    hp: cfg.hp,
                    method: key.method,
                    k_shot: key.shots,
                    q_query: cfg.q_query,
                    resample_episodes: cfg.resample_episodes,
                    train_datasets: &train,
                    test_datasets: &test,
                    // Methods and shots share seeds so comparisons are
                    // paired; folds and seed indices get their own streams.
                    master_seed: seeds::mix(&[cfg.master_seed, key.fold as u64, key.seed]),
                };
                let outcome = run_experiment(&cell)?;
                sink(key, &outcome)?;
                Ok(outcome.accuracy)
            };
            ResultRow {
                method: key.method,
                shots: key.shots,
                fold: key.fold,
                seed: key.seed,
                outcome: run().map_err(|e| e.to_string()),
            }
        })
        .collect();

    let mut table = ResultsTable::new();
    for row in outcomes {
        table.insert(row)?;
    }
    table.canonicalize();
    Ok(table)
}

/// No-op cell sink.
pub fn no_sink(_: &CellKey, _: &CellOutcome) -> Result<()> {
    Ok(())
}

/// Tab-separated embedding dump: one row per window with condition id, true
/// label, predicted label, then the hidden_dim embedding values.
pub fn format_embeddings(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    windows: &[LabeledWindow],
) -> Result<String> {
    let (batch, labels) = windows_to_batch(windows)?;
    let out = model::forward(spec, params, &batch)?;
    let n = spec.num_classes;
    let h = spec.hidden_dim;
    let mut text = String::new();
    for (i, w) in windows.iter().enumerate() {
        let logits = &out.logits.data()[i * n..(i + 1) * n];
        write!(text, "{}\t{}\t{}", w.condition_id, labels[i], model::argmax(logits)).unwrap();
        for v in &out.embeddings.data()[i * h..(i + 1) * h] {
            write!(text, "\t{v}").unwrap();
        }
        text.push('\n');
    }
    Ok(text)
}

pub fn export_embeddings(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    windows: &[LabeledWindow],
    path: &Path,
) -> Result<()> {
    let text = format_embeddings(spec, params, windows)?;
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, ConvUnit};

    fn tiny_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            input_length: 16,
            num_classes: 4,
            conv_units: vec![ConvUnit { out_channels: 2, kernel: 3, pool: 2 }],
            hidden_dim: 4,
        }
    }

    fn windows(n_per_class: usize, classes: usize, cond: u32) -> Vec<LabeledWindow> {
        let mut out = Vec::new();
        for c in 0..classes {
            for i in 0..n_per_class {
                let signal = (0..16)
                    .map(|t| ((t * (c + 1) + i) as f64 * 0.37).sin() + 0.1 * i as f64)
                    .collect();
                out.push(LabeledWindow { signal, label: c, condition_id: cond });
            }
        }
        out
    }

    #[test]
    fn zero_model_scores_the_tie_break_rate() {
        let spec = tiny_spec();
        let zero = build(&spec, 0).unwrap().map(|_| 0.0);
        let query = windows(5, 4, 0);
        let acc = accuracy(&spec, &zero, &query).unwrap();
        // All logits are zero, argmax picks class 0, which is 1/4 of the
        // balanced query.
        assert_eq!(acc, 25.0);
    }

    #[test]
    fn perfect_and_partial_accuracy() {
        let spec = tiny_spec();
        let params = build(&spec, 3).unwrap();
        let query = windows(3, 4, 0);
        let acc = accuracy(&spec, &params, &query).unwrap();
        assert!((0.0..=100.0).contains(&acc));
        assert!(accuracy(&spec, &params, &[]).is_err());
    }

    /// Labels three windows so that, by hand, exactly two of the model's
    /// argmax predictions match: accuracy must be 66.67; relabeling all
    /// three to the predictions gives exactly 100.
    #[test]
    fn hand_built_three_sample_accuracy() {
        let spec = tiny_spec();
        let params = build(&spec, 5).unwrap();
        let mut query: Vec<LabeledWindow> = windows(1, 3, 0).into_iter().take(3).collect();
        let (batch, _) = windows_to_batch(&query).unwrap();
        let out = model::forward(&spec, &params, &batch).unwrap();
        let n = spec.num_classes;
        let preds: Vec<usize> = out
            .logits
            .data()
            .chunks(n)
            .map(model::argmax)
            .collect();

        for (w, p) in query.iter_mut().zip(&preds) {
            w.label = *p;
        }
        assert_eq!(accuracy(&spec, &params, &query).unwrap(), 100.0);

        // Break exactly one match.
        query[2].label = (preds[2] + 1) % n;
        let acc = accuracy(&spec, &params, &query).unwrap();
        assert!((acc - 200.0 / 3.0).abs() < 1e-9, "{acc}");
        assert!((acc - 66.67).abs() < 0.005);
    }

    #[test]
    fn leave_one_out_reproduces_the_rotation() {
        let folds = kfold_protocol(&[0, 1, 2, 3], &FoldMode::LeaveOneOut).unwrap();
        assert_eq!(folds.len(), 4);
        assert_eq!(folds[0].train_conditions, vec![1, 2, 3]);
        assert_eq!(folds[0].test_conditions, vec![0]);
        assert_eq!(folds[1].train_conditions, vec![2, 3, 0]);
        assert_eq!(folds[1].test_conditions, vec![1]);

        let jnu = kfold_protocol(&[0, 1, 2], &FoldMode::LeaveOneOut).unwrap();
        assert_eq!(jnu.len(), 3);
        // Bijection between folds and test conditions.
        let mut tested: Vec<u32> = jnu.iter().flat_map(|f| f.test_conditions.clone()).collect();
        tested.sort();
        assert_eq!(tested, vec![0, 1, 2]);

        assert!(kfold_protocol(&[0], &FoldMode::LeaveOneOut).is_err());
    }

    #[test]
    fn explicit_folds_validate_overlap() {
        let overlapping = FoldMode::Explicit {
            folds: vec![FoldSpec {
                train_conditions: vec![0, 1],
                test_conditions: vec![1],
            }],
            cross_equipment: false,
        };
        assert!(kfold_protocol(&[], &overlapping).is_err());

        // Cross-equipment: same numeric ids on distinct datasets accepted.
        let cross = FoldMode::Explicit {
            folds: vec![FoldSpec {
                train_conditions: vec![0, 1, 2, 3],
                test_conditions: vec![0, 1, 2],
            }],
            cross_equipment: true,
        };
        let folds = kfold_protocol(&[], &cross).unwrap();
        assert_eq!(folds.len(), 1);
    }

    #[test]
    fn table_rejects_duplicates_and_bad_accuracy() {
        let mut t = ResultsTable::new();
        let row = ResultRow {
            method: Method::Refml,
            shots: 1,
            fold: 0,
            seed: 0,
            outcome: Ok(50.0),
        };
        t.insert(row.clone()).unwrap();
        assert!(t.insert(row).is_err());
        assert!(t
            .insert(ResultRow {
                method: Method::Refml,
                shots: 1,
                fold: 0,
                seed: 1,
                outcome: Ok(150.0),
            })
            .is_err());
    }

    #[test]
    fn summary_means_and_std() {
        let mut t = ResultsTable::new();
        for (seed, acc) in [(0, 80.0), (1, 90.0)] {
            t.insert(ResultRow {
                method: Method::FedAvg,
                shots: 5,
                fold: 0,
                seed,
                outcome: Ok(acc),
            })
            .unwrap();
        }
        let s = t.summary();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, 85.0);
        assert!((s[0].std - 50.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(t.mean_of(Method::FedAvg, 5), Some(85.0));
    }

    #[test]
    fn single_cell_suite_yields_one_row() {
        let spec = ArchitectureSpec {
            input_length: 64,
            num_classes: 2,
            conv_units: vec![ConvUnit { out_channels: 2, kernel: 3, pool: 2 }],
            hidden_dim: 4,
        };
        let cfg = refml_core_synth(2, 3, 64);
        let datasets = crate::data::generate_synthetic(&cfg).unwrap();
        let hp = HyperParams {
            alpha: 0.02,
            beta: 0.02,
            gamma: 0.02,
            delta: 0.05,
            eta: 0.02,
            mu: 0.01,
            encoder_steps: 1,
            finetune_steps: 1,
            rounds: 1,
            grad_mode: crate::autodiff::GradMode::Second,
        };
        let folds = vec![FoldSpec {
            train_conditions: vec![1, 2],
            test_conditions: vec![0],
        }];
        let suite = SuiteConfig {
            spec: &spec,
            hp: &hp,
            methods: &[Method::Refml],
            shots: &[2],
            folds: &folds,
            seeds: 1,
            q_query: 3,
            resample_episodes: true,
            datasets: &datasets,
            master_seed: 9,
        };
        let table = run_suite(&suite, &no_sink).unwrap();
        assert_eq!(table.rows().len(), 1);
        assert!(table.rows()[0].outcome.is_ok());
        let again = run_suite(&suite, &no_sink).unwrap();
        assert_eq!(table.to_csv(), again.to_csv());
    }

    fn refml_core_synth(classes: usize, conditions: usize, len: usize) -> crate::data::SyntheticConfig {
        crate::data::SyntheticConfig {
            num_classes: classes,
            conditions: (0..conditions)
                .map(|i| crate::data::Condition {
                    speed_factor: 1.0 + 0.05 * i as f64,
                    noise_std: 0.4,
                    amplitude_scale: 1.0,
                })
                .collect(),
            windows_per_class: 8,
            input_length: len,
            seed: 31,
        }
    }

    #[test]
    fn embeddings_have_id_label_prediction_and_width() {
        let spec = tiny_spec();
        let params = build(&spec, 1).unwrap();
        let query = windows(2, 4, 7);
        let text = format_embeddings(&spec, &params, &query).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 8);
        for line in &lines {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 3 + spec.hidden_dim);
            assert_eq!(fields[0], "7");
        }
        // Identical windows get identical embedding rows.
        let twice = vec![query[0].clone(), query[0].clone()];
        let text2 = format_embeddings(&spec, &params, &twice).unwrap();
        let rows: Vec<&str> = text2.lines().collect();
        assert_eq!(rows[0], rows[1]);
        // Round-trip parse recovers the values.
        let first_val: f64 = text.lines().next().unwrap().split('\t').nth(3).unwrap().parse().unwrap();
        assert!(first_val.is_finite());
    }
}
