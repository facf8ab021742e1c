//! Experiment configuration: a flat key-value text format with `--set`
//! overrides, strict unknown-key rejection, and a canonical resolved dump
//! that reproduces the run byte-for-byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::autodiff::GradMode;
use crate::data::{self, ClientDataset, Condition, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{FoldMode, FoldSpec};
use crate::fedproto::{HyperParams, Method};
use crate::model::{ArchitectureSpec, ConvUnit};

/// Where the condition datasets come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// Directory of window CSV files, one condition per file.
    CsvDir(PathBuf),
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub arch: ArchitectureSpec,
    pub methods: Vec<Method>,
    pub shots: Vec<usize>,
    pub q_query: usize,
    pub hp: HyperParams,
    pub fold_mode: FoldMode,
    /// Seeds per cell (seed indices 0..seeds).
    pub seeds: u64,
    pub master_seed: u64,
    pub resample_episodes: bool,
    /// Optional raw-label → experiment-label table applied at load.
    pub label_map: Option<Vec<(usize, usize)>>,
    pub out_dir: PathBuf,
    pub dump_embeddings: bool,
}

const KNOWN_KEYS: &[&str] = &[
    "data.source",
    "data.csv_dir",
    "synthetic.conditions",
    "synthetic.windows_per_class",
    "synthetic.seed",
    "classes",
    "model.input_length",
    "model.conv_units",
    "model.hidden_dim",
    "methods",
    "episode.shots",
    "episode.query",
    "episode.resample",
    "folds",
    "folds.explicit",
    "folds.cross_equipment",
    "seeds",
    "master_seed",
    "rounds",
    "hp.alpha",
    "hp.beta",
    "hp.gamma",
    "hp.delta",
    "hp.eta",
    "hp.mu",
    "hp.encoder_steps",
    "hp.finetune_steps",
    "hp.grad_mode",
    "labels.map",
    "output.dir",
    "output.embeddings",
];

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped. Later occurrences of a key override earlier ones (layering).
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!("line {}: expected key = value, got {raw:?}", idx + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::InvalidConfig(format!("line {}: empty key", idx + 1)));
        }
        if let Some(slot) = pairs.iter_mut().find(|(k, _)| *k == key) {
            slot.1 = value;
        } else {
            pairs.push((key, value));
        }
    }
    Ok(pairs)
}

/// One `key=value` override as given on a command line.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("override {arg:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

/// Key-value accessor. Unknown keys are rejected up front against the
/// whitelist; known keys that are inactive under the chosen mode (e.g.
/// `synthetic.*` with a CSV source) are simply unused.
struct KvReader {
    pairs: Vec<(String, String)>,
}

impl KvReader {
    fn new(pairs: Vec<(String, String)>) -> Self {
        KvReader { pairs }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone())
    }

    fn require(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing required key {key}")))
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidConfig(format!("key {key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("key {key}: expected true/false, got {v:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(|item| parse_num(key, item.trim()))
        .collect()
}

/// `speed:noise:amp;speed:noise:amp;...`
fn parse_conditions(v: &str) -> Result<Vec<Condition>> {
    v.split(';')
        .map(|triple| {
            let parts: Vec<&str> = triple.trim().split(':').collect();
            if parts.len() != 3 {
                return Err(Error::InvalidConfig(format!(
                    "synthetic.conditions: expected speed:noise:amp, got {triple:?}"
                )));
            }
            Ok(Condition {
                speed_factor: parse_num("synthetic.conditions", parts[0])?,
                noise_std: parse_num("synthetic.conditions", parts[1])?,
                amplitude_scale: parse_num("synthetic.conditions", parts[2])?,
            })
        })
        .collect()
}

/// `CxKxP,CxKxP,...`
fn parse_conv_units(v: &str) -> Result<Vec<ConvUnit>> {
    v.split(',')
        .map(|unit| {
            let parts: Vec<&str> = unit.trim().split('x').collect();
            if parts.len() != 3 {
                return Err(Error::InvalidConfig(format!(
                    "model.conv_units: expected CHANNELSxKERNELxPOOL, got {unit:?}"
                )));
            }
            Ok(ConvUnit {
                out_channels: parse_num("model.conv_units", parts[0])?,
                kernel: parse_num("model.conv_units", parts[1])?,
                pool: parse_num("model.conv_units", parts[2])?,
            })
        })
        .collect()
}

/// `t,t,t>e;t,t>e,e;...` — train conditions, `>`, test conditions.
fn parse_folds(v: &str) -> Result<Vec<FoldSpec>> {
    v.split(';')
        .map(|fold| {
            let (train, test) = fold.trim().split_once('>').ok_or_else(|| {
                Error::InvalidConfig(format!("folds.explicit: expected train>test, got {fold:?}"))
            })?;
            Ok(FoldSpec {
                train_conditions: parse_list("folds.explicit", train)?,
                test_conditions: parse_list("folds.explicit", test)?,
            })
        })
        .collect()
}

/// `raw:mapped,raw:mapped,...`
fn parse_label_map(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|pair| {
            let (from, to) = pair.trim().split_once(':').ok_or_else(|| {
                Error::InvalidConfig(format!("labels.map: expected raw:mapped, got {pair:?}"))
            })?;
            Ok((parse_num("labels.map", from)?, parse_num("labels.map", to)?))
        })
        .collect()
}

impl ExperimentConfig {
    /// Builds a config from key-value pairs, rejecting unknown keys.
    pub fn from_pairs(pairs: Vec<(String, String)>) -> Result<Self> {
        for (k, _) in &pairs {
            if !KNOWN_KEYS.contains(&k.as_str()) {
                return Err(Error::InvalidConfig(format!("unknown key {k}")));
            }
        }
        let mut kv = KvReader::new(pairs);

        let classes: usize = parse_num("classes", &kv.require("classes")?)?;
        let input_length: usize = parse_num("model.input_length", &kv.require("model.input_length")?)?;

        let data = match kv.require("data.source")?.as_str() {
            "synthetic" => {
                let conditions = parse_conditions(&kv.require("synthetic.conditions")?)?;
                DataSource::Synthetic(SyntheticConfig {
                    num_classes: classes,
                    conditions,
                    windows_per_class: parse_num(
                        "synthetic.windows_per_class",
                        &kv.require("synthetic.windows_per_class")?,
                    )?,
                    input_length,
                    seed: parse_num("synthetic.seed", &kv.require("synthetic.seed")?)?,
                })
            }
            "csv" => DataSource::CsvDir(PathBuf::from(kv.require("data.csv_dir")?)),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "data.source must be synthetic or csv, got {other:?}"
                )))
            }
        };

        let arch = ArchitectureSpec {
            input_length,
            num_classes: classes,
            conv_units: parse_conv_units(&kv.require("model.conv_units")?)?,
            hidden_dim: parse_num("model.hidden_dim", &kv.require("model.hidden_dim")?)?,
        };
        arch.validate()?;

        let methods: Vec<Method> = kv
            .require("methods")?
            .split(',')
            .map(Method::parse)
            .collect::<Result<_>>()?;
        let shots: Vec<usize> = parse_list("episode.shots", &kv.require("episode.shots")?)?;
        if shots.is_empty() || shots.contains(&0) {
            return Err(Error::InvalidConfig("episode.shots must be positive".into()));
        }
        let q_query: usize = parse_num("episode.query", &kv.require("episode.query")?)?;
        if q_query == 0 {
            return Err(Error::InvalidConfig("episode.query must be >= 1".into()));
        }

        let defaults = HyperParams::default();
        let hp = HyperParams {
            alpha: match kv.take("hp.alpha") {
                Some(v) => parse_num("hp.alpha", &v)?,
                None => defaults.alpha,
            },
            beta: match kv.take("hp.beta") {
                Some(v) => parse_num("hp.beta", &v)?,
                None => defaults.beta,
            },
            gamma: match kv.take("hp.gamma") {
                Some(v) => parse_num("hp.gamma", &v)?,
                None => defaults.gamma,
            },
            delta: match kv.take("hp.delta") {
                Some(v) => parse_num("hp.delta", &v)?,
                None => defaults.delta,
            },
            eta: match kv.take("hp.eta") {
                Some(v) => parse_num("hp.eta", &v)?,
                None => defaults.eta,
            },
            mu: match kv.take("hp.mu") {
                Some(v) => parse_num("hp.mu", &v)?,
                None => defaults.mu,
            },
            encoder_steps: match kv.take("hp.encoder_steps") {
                Some(v) => parse_num("hp.encoder_steps", &v)?,
                None => defaults.encoder_steps,
            },
            finetune_steps: match kv.take("hp.finetune_steps") {
                Some(v) => parse_num("hp.finetune_steps", &v)?,
                None => defaults.finetune_steps,
            },
            rounds: parse_num("rounds", &kv.require("rounds")?)?,
            grad_mode: match kv.take("hp.grad_mode").as_deref() {
                None | Some("second") => GradMode::Second,
                Some("first") => GradMode::First,
                Some(other) => {
                    return Err(Error::InvalidConfig(format!(
                        "hp.grad_mode must be first or second, got {other:?}"
                    )))
                }
            },
        };
        hp.validate()?;

        let fold_mode = match kv.take("folds").as_deref().unwrap_or("auto") {
            "auto" => FoldMode::LeaveOneOut,
            "explicit" => FoldMode::Explicit {
                folds: parse_folds(&kv.require("folds.explicit")?)?,
                cross_equipment: match kv.take("folds.cross_equipment") {
                    Some(v) => parse_bool("folds.cross_equipment", &v)?,
                    None => false,
                },
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "folds must be auto or explicit, got {other:?}"
                )))
            }
        };

        let cfg = ExperimentConfig {
            data,
            arch,
            methods,
            shots,
            q_query,
            hp,
            fold_mode,
            seeds: match kv.take("seeds") {
                Some(v) => parse_num("seeds", &v)?,
                None => 5,
            },
            master_seed: match kv.take("master_seed") {
                Some(v) => parse_num("master_seed", &v)?,
                None => 42,
            },
            resample_episodes: match kv.take("episode.resample") {
                Some(v) => parse_bool("episode.resample", &v)?,
                None => true,
            },
            label_map: match kv.take("labels.map") {
                Some(v) => Some(parse_label_map(&v)?),
                None => None,
            },
            out_dir: PathBuf::from(kv.take("output.dir").unwrap_or_else(|| "out".into())),
            dump_embeddings: match kv.take("output.embeddings") {
                Some(v) => parse_bool("output.embeddings", &v)?,
                None => false,
            },
        };
        if cfg.methods.is_empty() {
            return Err(Error::InvalidConfig("methods must be nonempty".into()));
        }
        if cfg.seeds == 0 {
            return Err(Error::InvalidConfig("seeds must be >= 1".into()));
        }
        Ok(cfg)
    }

    /// Loads a config file and applies `--set` overrides on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidConfig(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut pairs = parse_kv(&text)?;
        for (k, v) in overrides {
            if let Some(slot) = pairs.iter_mut().find(|(key, _)| key == k) {
                slot.1 = v.clone();
            } else {
                pairs.push((k.clone(), v.clone()));
            }
        }
        Self::from_pairs(pairs)
    }

    /// Canonical key-value dump; loading it back reproduces this config.
    pub fn resolved(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| out.push((k.to_string(), v));

        match &self.data {
            DataSource::Synthetic(s) => {
                push("data.source", "synthetic".into());
                let conds = s
                    .conditions
                    .iter()
                    .map(|c| format!("{}:{}:{}", c.speed_factor, c.noise_std, c.amplitude_scale))
                    .collect::<Vec<_>>()
                    .join(";");
                push("synthetic.conditions", conds);
                push("synthetic.windows_per_class", s.windows_per_class.to_string());
                push("synthetic.seed", s.seed.to_string());
            }
            DataSource::CsvDir(dir) => {
                push("data.source", "csv".into());
                push("data.csv_dir", dir.display().to_string());
            }
        }
        push("classes", self.arch.num_classes.to_string());
        push("model.input_length", self.arch.input_length.to_string());
        let units = self
            .arch
            .conv_units
            .iter()
            .map(|u| format!("{}x{}x{}", u.out_channels, u.kernel, u.pool))
            .collect::<Vec<_>>()
            .join(",");
        push("model.conv_units", units);
        push("model.hidden_dim", self.arch.hidden_dim.to_string());
        push(
            "methods",
            self.methods.iter().map(Method::name).collect::<Vec<_>>().join(","),
        );
        push(
            "episode.shots",
            self.shots.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        push("episode.query", self.q_query.to_string());
        push("episode.resample", self.resample_episodes.to_string());
        match &self.fold_mode {
            FoldMode::LeaveOneOut => push("folds", "auto".into()),
            FoldMode::Explicit { folds, cross_equipment } => {
                push("folds", "explicit".into());
                let spec = folds
                    .iter()
                    .map(|f| {
                        format!(
                            "{}>{}",
                            f.train_conditions.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
                            f.test_conditions.iter().map(u32::to_string).collect::<Vec<_>>().join(",")
                        )
                    })
                    .collect::<Vec<_>>()
                    .join(";");
                push("folds.explicit", spec);
                push("folds.cross_equipment", cross_equipment.to_string());
            }
        }
        push("seeds", self.seeds.to_string());
        push("master_seed", self.master_seed.to_string());
        push("rounds", self.hp.rounds.to_string());
        push("hp.alpha", self.hp.alpha.to_string());
        push("hp.beta", self.hp.beta.to_string());
        push("hp.gamma", self.hp.gamma.to_string());
        push("hp.delta", self.hp.delta.to_string());
        push("hp.eta", self.hp.eta.to_string());
        push("hp.mu", self.hp.mu.to_string());
        push("hp.encoder_steps", self.hp.encoder_steps.to_string());
        push("hp.finetune_steps", self.hp.finetune_steps.to_string());
        push(
            "hp.grad_mode",
            match self.hp.grad_mode {
                GradMode::Second => "second".into(),
                GradMode::First => "first".into(),
            },
        );
        if let Some(map) = &self.label_map {
            let table = map
                .iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect::<Vec<_>>()
                .join(",");
            push("labels.map", table);
        }
        push("output.dir", self.out_dir.display().to_string());
        push("output.embeddings", self.dump_embeddings.to_string());
        out
    }

    /// Resolved config as loadable text.
    pub fn resolved_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Loads or generates the condition datasets and validates that every
    /// class has enough windows for the largest requested episode.
    pub fn load_datasets(&self) -> Result<Vec<ClientDataset>> {
        let mut datasets = match &self.data {
            DataSource::Synthetic(cfg) => data::generate_synthetic(cfg)?,
            DataSource::CsvDir(dir) => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir.display().to_string(), e))?
                    .filter_map(|entry| entry.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "csv"))
                    .collect();
                files.sort();
                if files.is_empty() {
                    return Err(Error::InvalidData(format!(
                        "no .csv files in {}",
                        dir.display()
                    )));
                }
                files
                    .iter()
                    .map(|f| data::ingest_csv(f, self.arch.input_length))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        if let Some(map) = &self.label_map {
            datasets = datasets.iter().map(|d| d.remap_labels(map)).collect();
        }

        let mut seen = Vec::new();
        for ds in &datasets {
            if seen.contains(&ds.condition_id) {
                return Err(Error::InvalidData(format!(
                    "duplicate condition id {} across dataset files",
                    ds.condition_id
                )));
            }
            seen.push(ds.condition_id);
        }

        let max_shot = *self.shots.iter().max().unwrap();
        let need = max_shot + self.q_query;
        for ds in &datasets {
            for class in 0..self.arch.num_classes {
                let have = ds.windows.iter().filter(|w| w.label == class).count();
                if have < need {
                    return Err(Error::InvalidData(format!(
                        "condition {}: class {class} has {have} windows, needs {need} for {max_shot}-shot with {} queries",
                        ds.condition_id, self.q_query
                    )));
                }
            }
        }
        Ok(datasets)
    }

    /// Resolves the fold list against the loaded condition ids.
    pub fn fold_specs(&self, datasets: &[ClientDataset]) -> Result<Vec<FoldSpec>> {
        let mut ids: Vec<u32> = datasets.iter().map(|d| d.condition_id).collect();
        ids.sort_unstable();
        crate::eval::kfold_protocol(&ids, &self.fold_mode)
    }
}
