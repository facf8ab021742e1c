//! The fault-diagnosis network: a three-unit 1D-convolutional encoder and a
//! two-layer fully connected predictor, with an explicit encoder/predictor
//! parameter partition and a flat binary checkpoint format.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Batch-norm variance stabilizer. Batch statistics only; no running
/// averages are kept or aggregated.
pub const BN_EPS: f64 = 1e-5;

/// One encoder unit: conv (odd kernel, stride 1, same padding, no bias) →
/// batch norm → relu → max pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvUnit {
    pub out_channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

/// Shape description of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    /// Signal samples per window.
    pub input_length: usize,
    /// Number of health-state classes (output units).
    pub num_classes: usize,
    pub conv_units: Vec<ConvUnit>,
    /// Width of the first fully connected layer; the embedding dimension.
    pub hidden_dim: usize,
}

impl ArchitectureSpec {
    /// The published architecture: window 1024, conv channels (16, 32, 32)
    /// with kernel 3 and pool 2, flatten length 4096, hidden width 256.
    pub fn paper_default(num_classes: usize) -> Self {
        ArchitectureSpec {
            input_length: 1024,
            num_classes,
            conv_units: vec![
                ConvUnit { out_channels: 16, kernel: 3, pool: 2 },
                ConvUnit { out_channels: 32, kernel: 3, pool: 2 },
                ConvUnit { out_channels: 32, kernel: 3, pool: 2 },
            ],
            hidden_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_length == 0 || self.num_classes < 2 || self.hidden_dim == 0 {
            return Err(Error::InvalidArchitecture(format!(
                "input_length {}, num_classes {}, hidden_dim {} (need >0, >=2, >0)",
                self.input_length, self.num_classes, self.hidden_dim
            )));
        }
        if self.conv_units.is_empty() {
            return Err(Error::InvalidArchitecture("no conv units".into()));
        }
        self.flatten_len().map(|_| ())
    }

    /// Flattened width after the conv stack: final channels × final spatial
    /// length (conv keeps length; pooling divides it). Fails if any unit
    /// would leave nothing.
    pub fn flatten_len(&self) -> Result<usize> {
        let mut len = self.input_length;
        for (i, u) in self.conv_units.iter().enumerate() {
            if u.kernel % 2 == 0 || u.kernel == 0 || u.kernel > len {
                return Err(Error::InvalidArchitecture(format!(
                    "conv unit {}: kernel {} invalid for spatial length {len}",
                    i + 1,
                    u.kernel
                )));
            }
            if u.pool == 0 || u.pool > len {
                return Err(Error::InvalidArchitecture(format!(
                    "conv unit {}: pool {} exceeds spatial length {len}",
                    i + 1,
                    u.pool
                )));
            }
            len = (len - u.pool) / u.pool + 1;
            if len == 0 {
                return Err(Error::InvalidArchitecture(format!(
                    "conv unit {} reduces spatial length to zero",
                    i + 1
                )));
            }
        }
        let channels = self.conv_units.last().unwrap().out_channels;
        Ok(channels * len)
    }

    /// Content hash used to match checkpoints to architectures (FNV-1a).
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.input_length as u64);
        eat(self.num_classes as u64);
        eat(self.hidden_dim as u64);
        eat(self.conv_units.len() as u64);
        for u in &self.conv_units {
            eat(u.out_channels as u64);
            eat(u.kernel as u64);
            eat(u.pool as u64);
        }
        h
    }

    /// Parameter names, shapes, and fan-in, in network order.
    fn param_layout(&self) -> Result<Vec<(String, Vec<usize>, usize)>> {
        let mut layout = Vec::new();
        let mut in_ch = 1usize;
        for (i, u) in self.conv_units.iter().enumerate() {
            let n = i + 1;
            layout.push((
                format!("encoder.conv{n}.weight"),
                vec![u.out_channels, in_ch, u.kernel],
                in_ch * u.kernel,
            ));
            layout.push((format!("encoder.bn{n}.gamma"), vec![u.out_channels], 0));
            layout.push((format!("encoder.bn{n}.beta"), vec![u.out_channels], 0));
            in_ch = u.out_channels;
        }
        let flat = self.flatten_len()?;
        layout.push(("predictor.fc1.weight".into(), vec![self.hidden_dim, flat], flat));
        layout.push(("predictor.fc1.bias".into(), vec![self.hidden_dim], flat));
        layout.push((
            "predictor.fc2.weight".into(),
            vec![self.num_classes, self.hidden_dim],
            self.hidden_dim,
        ));
        layout.push(("predictor.fc2.bias".into(), vec![self.num_classes], self.hidden_dim));
        Ok(layout)
    }
}

/// Which side of the encoder/predictor partition a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Encoder,
    Predictor,
}

/// Segment of a parameter, read off its name prefix.
pub fn segment_of(name: &str) -> Segment {
    if name.starts_with("encoder.") {
        Segment::Encoder
    } else {
        Segment::Predictor
    }
}

/// Named, shaped collection of parameter tensors; the unit of federated
/// exchange. Entry order is fixed by the architecture, so two ParamSets from
/// the same spec always align.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn from_entries(entries: IndexMap<String, Tensor>) -> Self {
        ParamSet { entries }
    }

    pub fn entries(&self) -> &IndexMap<String, Tensor> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    /// True when both sets have identical names and shapes in order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    /// Elementwise combination of two aligned ParamSets.
    pub fn zip_with(&self, other: &ParamSet, f: impl Fn(f64, f64) -> f64) -> Result<ParamSet> {
        if !self.same_layout(other) {
            return Err(Error::ShapeMismatch {
                op: "paramset_zip",
                detail: "parameter sets have different layouts".into(),
            });
        }
        let mut entries = IndexMap::with_capacity(self.entries.len());
        for ((name, a), (_, b)) in self.entries.iter().zip(other.entries.iter()) {
            entries.insert(name.clone(), a.zip(b, &f)?);
        }
        Ok(ParamSet { entries })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ParamSet {
        let entries = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), t.map(&f)))
            .collect();
        ParamSet { entries }
    }

    /// Replaces the tensors named in `updates`, keeping all others.
    pub fn with_updates(&self, updates: &IndexMap<String, Tensor>) -> Result<ParamSet> {
        let mut entries = self.entries.clone();
        for (name, t) in updates {
            match entries.get_mut(name) {
                Some(slot) if slot.shape() == t.shape() => *slot = t.clone(),
                Some(slot) => {
                    return Err(Error::ShapeMismatch {
                        op: "paramset_update",
                        detail: format!("{name}: {:?} vs {:?}", slot.shape(), t.shape()),
                    })
                }
                None => {
                    return Err(Error::InvalidData(format!("unknown parameter {name}")));
                }
            }
        }
        Ok(ParamSet { entries })
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Binds every entry as a leaf node, preserving order.
    pub fn bind(&self, g: &mut Graph) -> IndexMap<String, NodeId> {
        self.entries
            .iter()
            .map(|(n, t)| (n.clone(), g.leaf(t.clone())))
            .collect()
    }
}

/// Splits a ParamSet into its encoder and predictor views.
pub fn split(params: &ParamSet) -> (ParamSet, ParamSet) {
    let mut enc = IndexMap::new();
    let mut pred = IndexMap::new();
    for (name, t) in params.iter() {
        match segment_of(name) {
            Segment::Encoder => enc.insert(name.clone(), t.clone()),
            Segment::Predictor => pred.insert(name.clone(), t.clone()),
        };
    }
    (ParamSet::from_entries(enc), ParamSet::from_entries(pred))
}

/// Reassembles encoder and predictor views; exact inverse of [`split`].
pub fn merge(encoder: &ParamSet, predictor: &ParamSet) -> Result<ParamSet> {
    let mut entries = IndexMap::with_capacity(encoder.len() + predictor.len());
    for (name, t) in encoder.iter() {
        if segment_of(name) != Segment::Encoder {
            return Err(Error::InvalidData(format!("{name} is not an encoder parameter")));
        }
        entries.insert(name.clone(), t.clone());
    }
    for (name, t) in predictor.iter() {
        if segment_of(name) != Segment::Predictor {
            return Err(Error::InvalidData(format!("{name} is not a predictor parameter")));
        }
        if entries.insert(name.clone(), t.clone()).is_some() {
            return Err(Error::InvalidData(format!("duplicate parameter {name}")));
        }
    }
    Ok(ParamSet::from_entries(entries))
}

/// Deterministic scaled-uniform fan-in initialization: weights from
/// U(−1/√fan_in, 1/√fan_in); batch-norm gamma 1, beta 0.
pub fn build(spec: &ArchitectureSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = IndexMap::new();
    for (name, shape, fan_in) in spec.param_layout()? {
        let t = if name.contains(".bn") {
            if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else {
                Tensor::zeros(shape)
            }
        } else {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            Tensor::new(shape, data)?
        };
        entries.insert(name, t);
    }
    Ok(ParamSet { entries })
}

/// Logits and first-FC-layer embeddings for a batch.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// `[B, num_classes]`
    pub logits: Tensor,
    /// `[B, hidden_dim]`, pre-activation output of the first FC layer.
    pub embeddings: Tensor,
}

/// Z-scores each row of a raw `[B, L]` batch (mean 0, unit population
/// variance per window).
pub fn zscore_batch(batch: &Tensor) -> Result<Tensor> {
    let (b, l) = match batch.shape() {
        [b, l] => (*b, *l),
        other => {
            return Err(Error::ShapeMismatch {
                op: "zscore_batch",
                detail: format!("expected [B, L], got {other:?}"),
            })
        }
    };
    let mut out = batch.data().to_vec();
    for row in out.chunks_mut(l) {
        let mean = row.iter().sum::<f64>() / l as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / l as f64;
        if var <= 0.0 {
            return Err(Error::InvalidData("constant window cannot be normalized".into()));
        }
        let istd = 1.0 / var.sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * istd;
        }
    }
    Tensor::new(vec![b, l], out)
}

/// Builds the network forward pass over existing parameter nodes. `input`
/// must already be z-scored `[B, input_length]`. Returns (logits, embedding)
/// nodes.
pub fn forward_graph(
    g: &mut Graph,
    spec: &ArchitectureSpec,
    params: &IndexMap<String, NodeId>,
    input: NodeId,
) -> Result<(NodeId, NodeId)> {
    let shape = g.value(input).shape().to_vec();
    let (b, l) = match shape[..] {
        [b, l] => (b, l),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "forward",
                detail: format!("expected [B, L] input, got {shape:?}"),
            })
        }
    };
    if l != spec.input_length {
        return Err(Error::ShapeMismatch {
            op: "forward",
            detail: format!("input length {l} vs spec {}", spec.input_length),
        });
    }
    let node = |params: &IndexMap<String, NodeId>, name: &str| -> Result<NodeId> {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidData(format!("missing parameter {name}")))
    };

    let mut h = g.reshape(input, vec![b, 1, spec.input_length])?;
    for (i, u) in spec.conv_units.iter().enumerate() {
        let n = i + 1;
        let w = node(params, &format!("encoder.conv{n}.weight"))?;
        let gamma = node(params, &format!("encoder.bn{n}.gamma"))?;
        let beta = node(params, &format!("encoder.bn{n}.beta"))?;
        let zero_bias = g.leaf(Tensor::zeros(vec![u.out_channels]));
        h = g.conv1d(h, w, zero_bias)?;
        h = g.batchnorm1d(h, gamma, beta, BN_EPS)?;
        h = g.relu(h);
        h = g.maxpool1d(h, u.pool, u.pool)?;
    }
    let flat = g.flatten(h)?;
    let fc1w = node(params, "predictor.fc1.weight")?;
    let fc1b = node(params, "predictor.fc1.bias")?;
    let embedding = g.linear(flat, fc1w, fc1b)?;
    let hidden = g.relu(embedding);
    let fc2w = node(params, "predictor.fc2.weight")?;
    let fc2b = node(params, "predictor.fc2.bias")?;
    let logits = g.linear(hidden, fc2w, fc2b)?;
    Ok((logits, embedding))
}

/// Evaluates the network on a raw `[B, input_length]` batch.
pub fn forward(spec: &ArchitectureSpec, params: &ParamSet, batch: &Tensor) -> Result<ModelOutput> {
    let normalized = zscore_batch(batch)?;
    let mut g = Graph::new();
    let nodes = params.bind(&mut g);
    let input = g.leaf(normalized);
    let (logits, embedding) = forward_graph(&mut g, spec, &nodes, input)?;
    Ok(ModelOutput {
        logits: g.value(logits).clone(),
        embeddings: g.value(embedding).clone(),
    })
}

/// Mean softmax cross-entropy loss node over a raw batch and labels, built
/// on existing parameter nodes.
pub fn loss_graph(
    g: &mut Graph,
    spec: &ArchitectureSpec,
    params: &IndexMap<String, NodeId>,
    batch: &Tensor,
    labels: &[usize],
) -> Result<NodeId> {
    let normalized = zscore_batch(batch)?;
    let input = g.leaf(normalized);
    let (logits, _) = forward_graph(g, spec, params, input)?;
    let losses = g.cross_entropy_batch(logits, labels)?;
    Ok(g.reduce_mean(losses))
}

/// Index of the largest logit, lowest index winning ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ─── Checkpoint format ──────────────────────────────────────────────────
//
// Header: 8-byte magic, spec hash (u64 LE), entry count (u32 LE).
// Per entry: name length (u32 LE), name bytes, shape rank (u32 LE),
// dims (u32 LE each), raw little-endian f64 data.

const MAGIC: &[u8; 8] = b"RFMLCKP1";

pub fn write_checkpoint<W: Write>(
    mut w: W,
    spec: &ArchitectureSpec,
    params: &ParamSet,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&spec.content_hash().to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, spec: &ArchitectureSpec, params: &ParamSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = std::io::BufWriter::new(file);
    write_checkpoint(&mut buf, spec, params).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parsed checkpoint: the stored spec hash and the parameter tensors.
pub struct Checkpoint {
    pub spec_hash: u64,
    pub params: ParamSet,
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let corrupt = |what: &str| Error::CorruptCheckpoint(what.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| corrupt("file too short for header"))?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| corrupt("missing spec hash"))?;
    let spec_hash = u64::from_le_bytes(u64buf);
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| corrupt("missing entry count"))?;
    let count = u32::from_le_bytes(u32buf) as usize;
    if count > 1 << 20 {
        return Err(corrupt("implausible entry count"));
    }

    let mut entries = IndexMap::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32buf).map_err(|_| corrupt("truncated entry name length"))?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        if name_len > 4096 {
            return Err(corrupt("implausible name length"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| corrupt("truncated entry name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| corrupt("entry name is not UTF-8"))?;
        r.read_exact(&mut u32buf).map_err(|_| corrupt("truncated shape rank"))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(corrupt("implausible shape rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(|_| corrupt("truncated shape dims"))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(corrupt("implausible tensor size"));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut u64buf).map_err(|_| corrupt("truncated tensor data"))?;
            data.push(f64::from_le_bytes(u64buf));
        }
        let t = Tensor::new(shape, data).map_err(|_| corrupt("inconsistent tensor shape"))?;
        if entries.insert(name, t).is_some() {
            return Err(corrupt("duplicate entry name"));
        }
    }
    Ok(Checkpoint {
        spec_hash,
        params: ParamSet::from_entries(entries),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            input_length: 256,
            num_classes: 10,
            conv_units: vec![
                ConvUnit { out_channels: 16, kernel: 3, pool: 2 },
                ConvUnit { out_channels: 32, kernel: 3, pool: 2 },
                ConvUnit { out_channels: 32, kernel: 3, pool: 2 },
            ],
            hidden_dim: 256,
        }
    }

    #[test]
    fn paper_default_flattens_to_4096() {
        let spec = ArchitectureSpec::paper_default(10);
        assert_eq!(spec.flatten_len().unwrap(), 4096);
        assert_eq!(spec.hidden_dim, 256);
    }

    #[test]
    fn shorter_window_flattens_to_1024() {
        assert_eq!(desk_spec().flatten_len().unwrap(), 32 * 32);
    }

    #[test]
    fn builds_are_deterministic() {
        let spec = desk_spec();
        let a = build(&spec, 7).unwrap();
        let b = build(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = build(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_conv_stack_is_rejected() {
        let spec = ArchitectureSpec {
            input_length: 4,
            num_classes: 4,
            conv_units: vec![
                ConvUnit { out_channels: 4, kernel: 3, pool: 4 },
                ConvUnit { out_channels: 4, kernel: 3, pool: 2 },
            ],
            hidden_dim: 8,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_merge_roundtrip_is_exact() {
        let spec = desk_spec();
        let p = build(&spec, 3).unwrap();
        let (enc, pred) = split(&p);
        assert_eq!(merge(&enc, &pred).unwrap(), p);
    }

    #[test]
    fn predictor_view_is_two_weights_two_biases() {
        let p = build(&ArchitectureSpec::paper_default(10), 1).unwrap();
        let (enc, pred) = split(&p);
        let names: Vec<&String> = pred.iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            vec![
                "predictor.fc1.weight",
                "predictor.fc1.bias",
                "predictor.fc2.weight",
                "predictor.fc2.bias"
            ]
        );
        assert!(enc.iter().all(|(n, _)| !n.contains("fc")));
        // Partition is total and disjoint.
        assert_eq!(enc.len() + pred.len(), p.len());
    }

    fn toy_batch(spec: &ArchitectureSpec, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * spec.input_length).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![b, spec.input_length], data).unwrap()
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let spec = desk_spec();
        let p = build(&spec, 5).unwrap();
        let batch = toy_batch(&spec, 4, 11);
        let out1 = forward(&spec, &p, &batch).unwrap();
        let out2 = forward(&spec, &p, &batch).unwrap();
        assert_eq!(out1.logits.shape(), &[4, 10]);
        assert_eq!(out1.embeddings.shape(), &[4, 256]);
        assert!(out1.logits.all_finite());
        assert_eq!(out1.logits, out2.logits);
    }

    #[test]
    fn identical_samples_get_identical_logits() {
        let spec = desk_spec();
        let p = build(&spec, 5).unwrap();
        let one = toy_batch(&spec, 1, 13).into_data();
        let mut data = one.clone();
        data.extend_from_slice(&one);
        let batch = Tensor::new(vec![2, spec.input_length], data).unwrap();
        let out = forward(&spec, &p, &batch).unwrap();
        let n = spec.num_classes;
        assert_eq!(out.logits.data()[..n], out.logits.data()[n..]);
    }

    #[test]
    fn forward_rejects_wrong_length_and_small_batch() {
        let spec = desk_spec();
        let p = build(&spec, 5).unwrap();
        let wrong = Tensor::new(vec![2, 128], vec![0.5; 256]).unwrap();
        assert!(forward(&spec, &p, &wrong).is_err());
        let single = toy_batch(&spec, 1, 3);
        assert!(forward(&spec, &p, &single).is_err());
    }

    #[test]
    fn argmax_is_scale_invariant_with_low_tie_break() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        let row = [0.1, -0.4, 0.9, 0.2];
        let scaled: Vec<f64> = row.iter().map(|v| v * 17.0).collect();
        assert_eq!(argmax(&row), argmax(&scaled));
    }

    #[test]
    fn zscore_normalizes_each_window() {
        let batch = Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let z = zscore_batch(&batch).unwrap();
        let mean: f64 = z.data().iter().sum::<f64>() / 4.0;
        let var: f64 = z.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);

        let constant = Tensor::new(vec![1, 4], vec![2.0; 4]).unwrap();
        assert!(zscore_batch(&constant).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let spec = desk_spec();
        let p = build(&spec, 21).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &p).unwrap();
        let ck = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(ck.spec_hash, spec.content_hash());
        assert_eq!(ck.params, p);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let spec = desk_spec();
        let p = build(&spec, 21).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &spec, &p).unwrap();

        let truncated = &buf[..buf.len() / 2];
        assert!(matches!(
            read_checkpoint(truncated),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_checkpoint(&bad_magic[..]),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
