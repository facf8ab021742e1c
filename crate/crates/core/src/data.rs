//! Labeled signal-window datasets: a synthetic multi-condition vibration
//! generator, CSV ingestion/export, and N-way K-shot episode sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::seeds;

/// One labeled vibration window.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    /// Unitless normalized amplitude samples.
    pub signal: Vec<f64>,
    /// Class index in `0..num_classes`.
    pub label: usize,
    /// Working-condition / equipment tag; one client per condition.
    pub condition_id: u32,
}

/// All windows of one working condition (equivalently, one client).
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub windows: Vec<LabeledWindow>,
    pub condition_id: u32,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Number of classes, assuming labels 0..N-1.
    pub fn num_classes(&self) -> usize {
        self.windows.iter().map(|w| w.label + 1).max().unwrap_or(0)
    }

    /// Window indices per class label, in dataset order.
    fn indices_by_class(&self, num_classes: usize) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, w) in self.windows.iter().enumerate() {
            if w.label < num_classes {
                by_class[w.label].push(i);
            }
        }
        by_class
    }

    /// Applies a label-mapping table (for aligning classes across equipment
    /// types); windows with unmapped labels are dropped.
    pub fn remap_labels(&self, map: &[(usize, usize)]) -> ClientDataset {
        let windows = self
            .windows
            .iter()
            .filter_map(|w| {
                map.iter().find(|(from, _)| *from == w.label).map(|(_, to)| LabeledWindow {
                    signal: w.signal.clone(),
                    label: *to,
                    condition_id: w.condition_id,
                })
            })
            .collect();
        ClientDataset {
            windows,
            condition_id: self.condition_id,
        }
    }
}

/// One N-way K-shot task: disjoint support and query sets.
#[derive(Debug, Clone)]
pub struct Episode {
    /// Exactly K windows per class, class-major order.
    pub support: Vec<LabeledWindow>,
    /// Exactly Q windows per class, class-major order.
    pub query: Vec<LabeledWindow>,
}

/// One synthetic working condition: frequency scaling (speed), noise level,
/// and signal amplitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Condition {
    pub speed_factor: f64,
    pub noise_std: f64,
    pub amplitude_scale: f64,
}

/// Configuration of the synthetic multi-condition generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub conditions: Vec<Condition>,
    pub windows_per_class: usize,
    pub input_length: usize,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidData(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.conditions.is_empty() {
            return Err(Error::InvalidData("no conditions configured".into()));
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if c.speed_factor <= 0.0 || c.noise_std < 0.0 || c.amplitude_scale <= 0.0 {
                return Err(Error::InvalidData(format!(
                    "condition {i}: speed {}, noise {}, amplitude {} (need >0, >=0, >0)",
                    c.speed_factor, c.noise_std, c.amplitude_scale
                )));
            }
        }
        if self.windows_per_class == 0 || self.input_length < 8 {
            return Err(Error::InvalidData(format!(
                "windows_per_class {} / input_length {} too small",
                self.windows_per_class, self.input_length
            )));
        }
        // The fastest class tone must stay below Nyquist.
        let fmax = class_frequency(self.num_classes - 1)
            * self.conditions.iter().map(|c| c.speed_factor).fold(0.0, f64::max);
        if fmax >= self.input_length as f64 / 2.0 {
            return Err(Error::InvalidData(format!(
                "top class frequency {fmax:.1} cycles exceeds Nyquist for length {}",
                self.input_length
            )));
        }
        Ok(())
    }
}

/// Base tone of class `c` in cycles per window at speed factor 1.
pub fn class_frequency(class: usize) -> f64 {
    8.0 + 6.0 * class as f64
}

/// Burst repetition rate of class `c` in bursts per window at speed 1.
fn class_burst_rate(class: usize) -> f64 {
    3.0 + 2.0 * class as f64
}

/// Generates one dataset per condition. Class `c` under condition `v` is a
/// tone at `class_frequency(c) × speed_factor_v` plus a class-specific
/// impulsive burst train and Gaussian noise of `noise_std_v`; everything is
/// scaled by `amplitude_scale_v` before the noise is added.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<ClientDataset>> {
    cfg.validate()?;
    let l = cfg.input_length;
    let mut out = Vec::with_capacity(cfg.conditions.len());
    for (ci, cond) in cfg.conditions.iter().enumerate() {
        let mut windows = Vec::with_capacity(cfg.num_classes * cfg.windows_per_class);
        for class in 0..cfg.num_classes {
            for wi in 0..cfg.windows_per_class {
                let seed = seeds::mix(&[cfg.seed, ci as u64, class as u64, wi as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                windows.push(LabeledWindow {
                    signal: synth_window(&mut rng, l, class, cond),
                    label: class,
                    condition_id: ci as u32,
                });
            }
        }
        out.push(ClientDataset {
            windows,
            condition_id: ci as u32,
        });
    }
    Ok(out)
}

fn synth_window(rng: &mut ChaCha8Rng, l: usize, class: usize, cond: &Condition) -> Vec<f64> {
    let tone_freq = class_frequency(class) * cond.speed_factor;
    let burst_rate = class_burst_rate(class) * cond.speed_factor;
    let resonance = l as f64 / 4.0; // structural ring frequency, speed-invariant
    let tone_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let burst_phase: f64 = rng.gen_range(0.0..1.0);
    let ring_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let tau = std::f64::consts::TAU;

    (0..l)
        .map(|i| {
            let t = i as f64 / l as f64;
            let tone = (tau * tone_freq * t + tone_phase).sin();
            let cycle = (burst_rate * t + burst_phase).fract();
            let burst = 0.5 * (-6.0 * cycle).exp() * (tau * resonance * t + ring_phase).sin();
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * cond.noise_std;
            cond.amplitude_scale * (tone + burst) + noise
        })
        .collect()
}

/// Z-scores one window to mean 0 and unit population variance.
pub fn normalize_window(w: &LabeledWindow) -> Result<LabeledWindow> {
    let n = w.signal.len() as f64;
    let mean = w.signal.iter().sum::<f64>() / n;
    let var = w.signal.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::InvalidData("constant signal cannot be normalized".into()));
    }
    let istd = 1.0 / var.sqrt();
    Ok(LabeledWindow {
        signal: w.signal.iter().map(|&v| (v - mean) * istd).collect(),
        label: w.label,
        condition_id: w.condition_id,
    })
}

/// Draws an N-way K-shot episode without replacement; support and query are
/// disjoint, exactly K and Q windows per class, deterministic per seed.
pub fn sample_episode(ds: &ClientDataset, n: usize, k: usize, q: usize, seed: u64) -> Result<Episode> {
    if n < 2 || k == 0 || q == 0 {
        return Err(Error::InvalidData(format!(
            "episode needs N >= 2, K >= 1, Q >= 1; got N={n}, K={k}, Q={q}"
        )));
    }
    let by_class = ds.indices_by_class(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * q);
    for (class, indices) in by_class.iter().enumerate() {
        if indices.len() < k + q {
            return Err(Error::InvalidData(format!(
                "class {class} has {} windows in condition {}, needs K+Q = {}",
                indices.len(),
                ds.condition_id,
                k + q
            )));
        }
        // Partial Fisher-Yates: shuffle the first K+Q positions.
        let mut pool: Vec<usize> = indices.clone();
        for i in 0..(k + q) {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        support.extend(pool[..k].iter().map(|&i| ds.windows[i].clone()));
        query.extend(pool[k..k + q].iter().map(|&i| ds.windows[i].clone()));
    }
    Ok(Episode { support, query })
}

/// Fixed per-client split of a condition dataset: the N×K support windows
/// and the whole balanced remainder as the query pool.
pub fn split_support_pool(ds: &ClientDataset, n: usize, k: usize, seed: u64) -> Result<(Vec<LabeledWindow>, Vec<LabeledWindow>)> {
    let by_class = ds.indices_by_class(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = Vec::with_capacity(n * k);
    let mut pool = Vec::new();
    for (class, indices) in by_class.iter().enumerate() {
        if indices.len() < k + 1 {
            return Err(Error::InvalidData(format!(
                "class {class} has {} windows in condition {}, needs at least K+1 = {}",
                indices.len(),
                ds.condition_id,
                k + 1
            )));
        }
        let mut order: Vec<usize> = indices.clone();
        for i in 0..k {
            let j = rng.gen_range(i..order.len());
            order.swap(i, j);
        }
        support.extend(order[..k].iter().map(|&i| ds.windows[i].clone()));
        pool.extend(order[k..].iter().map(|&i| ds.windows[i].clone()));
    }
    Ok((support, pool))
}

/// Stacks windows into a raw `[B, L]` batch and a label vector.
pub fn windows_to_batch(windows: &[LabeledWindow]) -> Result<(Tensor, Vec<usize>)> {
    if windows.is_empty() {
        return Err(Error::InvalidData("empty window batch".into()));
    }
    let l = windows[0].signal.len();
    let mut data = Vec::with_capacity(windows.len() * l);
    let mut labels = Vec::with_capacity(windows.len());
    for w in windows {
        if w.signal.len() != l {
            return Err(Error::InvalidData(format!(
                "window lengths differ: {l} vs {}",
                w.signal.len()
            )));
        }
        data.extend_from_slice(&w.signal);
        labels.push(w.label);
    }
    Ok((Tensor::new(vec![windows.len(), l], data)?, labels))
}

// ─── Window CSV: `label,condition_id,v1,...,vL`, LF endings ─────────────

/// Parses a window CSV file. Every row must have `2 + input_length` fields
/// and all rows must share one condition id.
pub fn ingest_csv(path: &Path, input_length: usize) -> Result<ClientDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_csv(&text, input_length).map_err(|e| match e {
        Error::InvalidData(msg) => Error::InvalidData(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_csv(text: &str, input_length: usize) -> Result<ClientDataset> {
    let mut windows = Vec::new();
    let mut condition_id: Option<u32> = None;
    for (row_idx, line) in text.lines().enumerate() {
        let row = row_idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != input_length + 2 {
            return Err(Error::InvalidData(format!(
                "row {row}: expected {} fields (label, condition, {input_length} values), got {}",
                input_length + 2,
                fields.len()
            )));
        }
        let label: usize = fields[0]
            .parse()
            .map_err(|_| Error::InvalidData(format!("row {row}: non-numeric label {:?}", fields[0])))?;
        let cond: u32 = fields[1]
            .parse()
            .map_err(|_| Error::InvalidData(format!("row {row}: non-numeric condition id {:?}", fields[1])))?;
        match condition_id {
            None => condition_id = Some(cond),
            Some(expect) if expect != cond => {
                return Err(Error::InvalidData(format!(
                    "row {row}: condition id {cond} differs from {expect} earlier in the file"
                )))
            }
            _ => {}
        }
        let mut signal = Vec::with_capacity(input_length);
        for (col, f) in fields[2..].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| {
                Error::InvalidData(format!("row {row}: non-numeric value {f:?} in column {}", col + 3))
            })?;
            signal.push(v);
        }
        windows.push(LabeledWindow {
            signal,
            label,
            condition_id: cond,
        });
    }
    let condition_id = condition_id.ok_or_else(|| Error::InvalidData("no rows".into()))?;
    Ok(ClientDataset {
        windows,
        condition_id,
    })
}

/// Serializes a dataset in the window CSV format, bit-exactly invertible by
/// [`ingest_csv`] (shortest round-trip decimal encoding).
pub fn format_csv(ds: &ClientDataset) -> String {
    let mut out = String::new();
    for w in &ds.windows {
        write!(out, "{},{}", w.label, w.condition_id).unwrap();
        for v in &w.signal {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn export_csv(ds: &ClientDataset, path: &Path) -> Result<()> {
    std::fs::write(path, format_csv(ds)).map_err(|e| Error::io(path.display().to_string(), e))
}
