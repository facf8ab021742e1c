//! The federated protocol: client-side adaptive interpolation, representation
//! encoding, predictor meta-updating, and testing-client fine-tuning;
//! server-side weighted aggregation and round orchestration, plus the
//! FedAvg/FedProx baselines.
//!
//! The gradient-step engines (`sgd_steps`, `maml_step`,
//! `adaptive_interpolate_with`) are generic over a loss builder so the same
//! code paths that drive the diagnosis model can be verified against scalar
//! closed forms.

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::autodiff::{GradMode, Graph, NodeId, Tensor};
use crate::data::{sample_episode, windows_to_batch, ClientDataset, Episode, LabeledWindow};
use crate::error::{Error, Result};
use crate::model::{self, ArchitectureSpec, ParamSet, Segment};
use crate::seeds;

/// Builds a scalar loss node over named parameter nodes.
pub type LossBuilder<'a> = &'a (dyn Fn(&mut Graph, &IndexMap<String, NodeId>) -> Result<NodeId> + Sync);

/// Learning rates and step counts of every protocol stage.
///
/// `eta` doubles as the local learning rate of the FedAvg/FedProx baselines
/// and `encoder_steps` as their local step count, so all methods share one
/// per-round local budget.
#[derive(Debug, Clone)]
pub struct HyperParams {
    /// Fast-adaptation rate of the predictor meta-step.
    pub alpha: f64,
    /// Meta-update rate of the predictor.
    pub beta: f64,
    /// Fine-tuning rate of testing clients.
    pub gamma: f64,
    /// Interpolation-weight rate.
    pub delta: f64,
    /// Encoder (and baseline local) rate.
    pub eta: f64,
    /// FedProx proximal coefficient.
    pub mu: f64,
    pub encoder_steps: usize,
    pub finetune_steps: usize,
    /// Communication rounds T.
    pub rounds: usize,
    pub grad_mode: GradMode,
}

impl Default for HyperParams {
    /// Documented full-scale defaults: the published learning-rate search
    /// band tops out at 0.001 and the round budget is 1000.
    fn default() -> Self {
        HyperParams {
            alpha: 0.001,
            beta: 0.001,
            gamma: 0.001,
            delta: 0.01,
            eta: 0.001,
            mu: 0.01,
            encoder_steps: 5,
            finetune_steps: 10,
            rounds: 1000,
            grad_mode: GradMode::Second,
        }
    }
}

impl HyperParams {
    /// Rates must lie in [0, 1]; zero is allowed so no-op diagnostics can
    /// run. Step counts must be at least 1.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("eta", self.eta),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("rate {name} = {v} outside [0, 1]")));
            }
        }
        if self.mu < 0.0 {
            return Err(Error::InvalidConfig(format!("mu = {} must be >= 0", self.mu)));
        }
        if self.encoder_steps == 0 || self.finetune_steps == 0 {
            return Err(Error::InvalidConfig("step counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// The compared methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Refml,
    RefmlNoAi,
    FedAvg,
    FedAvgFt,
    FedProx,
    FedProxFt,
    Local,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::FedAvg,
        Method::FedAvgFt,
        Method::FedProx,
        Method::FedProxFt,
        Method::Refml,
        Method::RefmlNoAi,
        Method::Local,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Refml => "REFML",
            Method::RefmlNoAi => "REFML-no-AI",
            Method::FedAvg => "FedAvg",
            Method::FedAvgFt => "FedAvg-FT",
            Method::FedProx => "FedProx",
            Method::FedProxFt => "FedProx-FT",
            Method::Local => "Local",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        Ok(match norm.as_str() {
            "refml" => Method::Refml,
            "refml-no-ai" | "refml-noai" => Method::RefmlNoAi,
            "fedavg" => Method::FedAvg,
            "fedavg-ft" => Method::FedAvgFt,
            "fedprox" => Method::FedProx,
            "fedprox-ft" => Method::FedProxFt,
            "local" => Method::Local,
            _ => return Err(Error::InvalidConfig(format!("unknown method {s:?}"))),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-parameter convex blend weights between the global model (weight `a`)
/// and the local model (weight `1 − a`); every element stays in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationWeights {
    entries: IndexMap<String, Tensor>,
}

impl InterpolationWeights {
    /// All-ones weights: round 1 uses the pure global model, so the method
    /// differs from standard FL only through learned personalization.
    pub fn ones_like(params: &ParamSet) -> Self {
        let entries = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::ones(t.shape().to_vec())))
            .collect();
        InterpolationWeights { entries }
    }

    pub fn from_entries(entries: IndexMap<String, Tensor>) -> Result<Self> {
        for (name, t) in &entries {
            if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidData(format!(
                    "interpolation weight {name} has elements outside [0, 1]"
                )));
            }
        }
        Ok(InterpolationWeights { entries })
    }

    pub fn entries(&self) -> &IndexMap<String, Tensor> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    /// Uniform constant weights (for tests and identities).
    pub fn constant_like(params: &ParamSet, a: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::InvalidData(format!("weight {a} outside [0, 1]")));
        }
        let entries = params
            .iter()
            .map(|(n, t)| (n.clone(), t.full_like(a)))
            .collect();
        Ok(InterpolationWeights { entries })
    }

    pub fn in_bounds(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v)))
    }
}

/// Client role in the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Training,
    Testing,
}

/// Everything one client owns across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub role: Role,
    pub dataset: ClientDataset,
    /// Fixed N×K support windows.
    pub support: Vec<LabeledWindow>,
    /// Balanced remainder of the dataset; meta queries are drawn from it and
    /// testing clients are evaluated on it.
    pub query_pool: Vec<LabeledWindow>,
    /// W_{t−1} of this client.
    pub local_params: ParamSet,
    /// A_{t−1} of this client.
    pub interp: InterpolationWeights,
    /// Base of this client's isolated RNG stream.
    pub stream: u64,
}

impl ClientState {
    /// Full local data D_u: support plus query pool.
    pub fn full_data(&self) -> Vec<LabeledWindow> {
        let mut all = self.support.clone();
        all.extend(self.query_pool.iter().cloned());
        all
    }

    pub fn sample_count(&self) -> usize {
        self.support.len() + self.query_pool.len()
    }
}

/// Server-side state between rounds.
#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: usize,
    pub global_params: ParamSet,
}

// ─── Generic gradient-step engines ──────────────────────────────────────

fn finite_loss(g: &Graph, loss: NodeId, what: &str) -> Result<f64> {
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("{what} loss")));
    }
    Ok(v)
}

/// Full-batch gradient descent on the parameters selected by `pick`,
/// rebuilding the loss each step. Unselected parameters are bit-identical in
/// the result.
pub fn sgd_steps_filtered(
    params: &ParamSet,
    lr: f64,
    steps: usize,
    pick: impl Fn(&str) -> bool,
    loss: LossBuilder,
) -> Result<ParamSet> {
    let mut current = params.clone();
    for _ in 0..steps {
        let mut g = Graph::new();
        let nodes = current.bind(&mut g);
        let loss_node = loss(&mut g, &nodes)?;
        finite_loss(&g, loss_node, "local")?;
        let names: Vec<String> = nodes.keys().filter(|n| pick(n)).cloned().collect();
        let wrt: Vec<NodeId> = names.iter().map(|n| nodes[n]).collect();
        let grads = g.backward(loss_node, &wrt, GradMode::First)?;
        let mut updates = IndexMap::with_capacity(names.len());
        for (name, grad) in names.iter().zip(grads) {
            let stepped = current
                .get(name)
                .unwrap()
                .zip(g.value(grad), |w, d| w - lr * d)?;
            updates.insert(name.clone(), stepped);
        }
        current = current.with_updates(&updates)?;
    }
    Ok(current)
}

/// Gradient descent on all parameters.
pub fn sgd_steps(params: &ParamSet, lr: f64, steps: usize, loss: LossBuilder) -> Result<ParamSet> {
    sgd_steps_filtered(params, lr, steps, |_| true, loss)
}

/// One meta-step on the parameters selected by `adapt`: fast-adapt them on
/// the support loss with rate `alpha`, evaluate the query loss at the
/// adapted values, and step the originals against that loss with rate
/// `beta`. In `GradMode::Second` the meta-gradient flows through the
/// adaptation step exactly; in `GradMode::First` the inner gradient is
/// treated as a constant.
pub fn maml_step(
    params: &ParamSet,
    adapt: impl Fn(&str) -> bool,
    alpha: f64,
    beta: f64,
    mode: GradMode,
    support_loss: LossBuilder,
    query_loss: LossBuilder,
) -> Result<ParamSet> {
    let mut g = Graph::new();
    let nodes = params.bind(&mut g);
    let names: Vec<String> = nodes.keys().filter(|n| adapt(n)).cloned().collect();
    if names.is_empty() {
        return Err(Error::InvalidData("no parameters selected for meta-update".into()));
    }
    let wrt: Vec<NodeId> = names.iter().map(|n| nodes[n]).collect();

    let support_node = support_loss(&mut g, &nodes)?;
    finite_loss(&g, support_node, "support")?;
    let inner_grads = g.backward(support_node, &wrt, mode)?;

    let mut adapted = nodes.clone();
    for ((name, node), grad) in names.iter().zip(&wrt).zip(inner_grads) {
        let step = g.scale(grad, alpha);
        adapted[name] = g.sub(*node, step)?;
    }

    let query_node = query_loss(&mut g, &adapted)?;
    finite_loss(&g, query_node, "query")?;
    let meta_grads = g.backward(query_node, &wrt, GradMode::First)?;

    let mut updates = IndexMap::with_capacity(names.len());
    for (name, grad) in names.iter().zip(meta_grads) {
        let stepped = params
            .get(name)
            .unwrap()
            .zip(g.value(grad), |w, d| w - beta * d)?;
        updates.insert(name.clone(), stepped);
    }
    params.with_updates(&updates)
}

/// Elementwise convex blend: `a ⊙ global + (1 − a) ⊙ local`.
pub fn interpolate(global: &ParamSet, local: &ParamSet, a: &InterpolationWeights) -> Result<ParamSet> {
    if !global.same_layout(local) {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            detail: "global and local layouts differ".into(),
        });
    }
    let mut entries = IndexMap::with_capacity(global.len());
    for ((name, wg), (_, wl)) in global.iter().zip(local.iter()) {
        let aw = a
            .get(name)
            .ok_or_else(|| Error::ShapeMismatch {
                op: "interpolate",
                detail: format!("missing interpolation weights for {name}"),
            })?;
        let mut out = Vec::with_capacity(wg.numel());
        for ((&g, &l), &av) in wg.data().iter().zip(wl.data()).zip(aw.data()) {
            out.push(av * g + (1.0 - av) * l);
        }
        entries.insert(name.clone(), Tensor::new(wg.shape().to_vec(), out)?);
    }
    Ok(ParamSet::from_entries(entries))
}

/// Adaptive interpolation with an arbitrary local loss: forms the temporary
/// blend with the previous weights, takes one gradient step on the weights
/// against the local loss, clamps them to [0, 1], and returns the blend at
/// the updated weights together with those weights.
pub fn adaptive_interpolate_with(
    global: &ParamSet,
    local: &ParamSet,
    interp: &InterpolationWeights,
    delta: f64,
    loss: LossBuilder,
) -> Result<(ParamSet, InterpolationWeights)> {
    if !global.same_layout(local) {
        return Err(Error::ShapeMismatch {
            op: "adaptive_interpolate",
            detail: "global and local layouts differ".into(),
        });
    }
    let mut g = Graph::new();
    let mut a_nodes: IndexMap<String, NodeId> = IndexMap::with_capacity(global.len());
    let mut blended: IndexMap<String, NodeId> = IndexMap::with_capacity(global.len());
    for ((name, wg), (_, wl)) in global.iter().zip(local.iter()) {
        let a_prev = interp.get(name).ok_or_else(|| Error::ShapeMismatch {
            op: "adaptive_interpolate",
            detail: format!("missing interpolation weights for {name}"),
        })?;
        let a = g.leaf(a_prev.clone());
        let wg_node = g.leaf(wg.clone());
        let wl_node = g.leaf(wl.clone());
        let ones = g.leaf(Tensor::ones(wg.shape().to_vec()));
        let ga = g.mul(a, wg_node)?;
        let inv = g.sub(ones, a)?;
        let la = g.mul(inv, wl_node)?;
        let w_tmp = g.add(ga, la)?;
        a_nodes.insert(name.clone(), a);
        blended.insert(name.clone(), w_tmp);
    }

    let loss_node = loss(&mut g, &blended)?;
    finite_loss(&g, loss_node, "interpolation")?;
    let wrt: Vec<NodeId> = a_nodes.values().copied().collect();
    let grads = g.backward(loss_node, &wrt, GradMode::First)?;

    let mut new_entries = IndexMap::with_capacity(global.len());
    for ((name, a_node), grad) in a_nodes.iter().zip(grads) {
        let stepped = g
            .value(*a_node)
            .zip(g.value(grad), |a, d| (a - delta * d).clamp(0.0, 1.0))?;
        new_entries.insert(name.clone(), stepped);
    }
    let a_new = InterpolationWeights { entries: new_entries };
    let w_new = interpolate(global, local, &a_new)?;
    Ok((w_new, a_new))
}

/// Gradient descent on `loss + (mu/2)·‖W − W_anchor‖²`.
pub fn sgd_steps_proximal(
    params: &ParamSet,
    anchor: &ParamSet,
    lr: f64,
    mu: f64,
    steps: usize,
    loss: LossBuilder,
) -> Result<ParamSet> {
    if !params.same_layout(anchor) {
        return Err(Error::ShapeMismatch {
            op: "proximal",
            detail: "parameter and anchor layouts differ".into(),
        });
    }
    let anchor = anchor.clone();
    let prox_loss = move |g: &mut Graph, nodes: &IndexMap<String, NodeId>| -> Result<NodeId> {
        let base = loss(g, nodes)?;
        let mut penalty: Option<NodeId> = None;
        for (name, node) in nodes {
            let anchor_leaf = g.leaf(anchor.get(name).unwrap().clone());
            let d = g.sub(*node, anchor_leaf)?;
            let sq = g.mul(d, d)?;
            let s = g.reduce_sum(sq);
            penalty = Some(match penalty {
                None => s,
                Some(p) => g.add(p, s)?,
            });
        }
        let scaled = g.scale(penalty.unwrap(), mu / 2.0);
        g.add(base, scaled)
    };
    sgd_steps_filtered(params, lr, steps, |_| true, &prox_loss)
}

// ─── Model-bound client operations ──────────────────────────────────────

fn model_loss<'a>(
    spec: &'a ArchitectureSpec,
    windows: &[LabeledWindow],
) -> Result<impl Fn(&mut Graph, &IndexMap<String, NodeId>) -> Result<NodeId> + Sync + 'a> {
    let (batch, labels) = windows_to_batch(windows)?;
    Ok(move |g: &mut Graph, nodes: &IndexMap<String, NodeId>| {
        model::loss_graph(g, spec, nodes, &batch, &labels)
    })
}

/// Adaptive interpolation of the downloaded global model with the client's
/// retained local model, learned on `loss_windows` (the full local data for
/// training clients, the support set for testing clients).
pub fn adaptive_interpolate(
    spec: &ArchitectureSpec,
    client: &ClientState,
    global: &ParamSet,
    loss_windows: &[LabeledWindow],
    delta: f64,
) -> Result<(ParamSet, InterpolationWeights)> {
    let loss = model_loss(spec, loss_windows)?;
    adaptive_interpolate_with(global, &client.local_params, &client.interp, delta, &loss)
}

/// Representation encoding: gradient steps on the local cross-entropy that
/// touch only encoder parameters; the predictor comes back bit-identical.
pub fn update_encoder(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    windows: &[LabeledWindow],
    eta: f64,
    steps: usize,
) -> Result<ParamSet> {
    let loss = model_loss(spec, windows)?;
    sgd_steps_filtered(
        params,
        eta,
        steps,
        |n| model::segment_of(n) == Segment::Encoder,
        &loss,
    )
}

/// Meta-updating of the predictor: fast-adapt the predictor on the support
/// set, evaluate on the query set, and update the original predictor against
/// the query loss. The encoder is frozen and comes back bit-identical.
pub fn meta_update_predictor(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    episode: &Episode,
    alpha: f64,
    beta: f64,
    mode: GradMode,
) -> Result<ParamSet> {
    let support_loss = model_loss(spec, &episode.support)?;
    let query_loss = model_loss(spec, &episode.query)?;
    maml_step(
        params,
        |n| model::segment_of(n) == Segment::Predictor,
        alpha,
        beta,
        mode,
        &support_loss,
        &query_loss,
    )
}

/// Testing-client fine-tuning: full-batch gradient steps on the support
/// cross-entropy updating all parameters.
pub fn fine_tune(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    support: &[LabeledWindow],
    gamma: f64,
    steps: usize,
) -> Result<ParamSet> {
    let loss = model_loss(spec, support)?;
    sgd_steps(params, gamma, steps, &loss)
}

/// Plain local training on the full local cross-entropy (the FedAvg client
/// step); definitionally the same update as [`fine_tune`].
pub fn fedavg_local(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    windows: &[LabeledWindow],
    lr: f64,
    steps: usize,
) -> Result<ParamSet> {
    let loss = model_loss(spec, windows)?;
    sgd_steps(params, lr, steps, &loss)
}

/// FedProx local training: the local cross-entropy plus a proximal pull
/// toward the downloaded global model.
pub fn fedprox_local(
    spec: &ArchitectureSpec,
    params: &ParamSet,
    global: &ParamSet,
    windows: &[LabeledWindow],
    lr: f64,
    mu: f64,
    steps: usize,
) -> Result<ParamSet> {
    if mu < 0.0 {
        return Err(Error::InvalidConfig(format!("mu = {mu} must be >= 0")));
    }
    let loss = model_loss(spec, windows)?;
    sgd_steps_proximal(params, global, lr, mu, steps, &loss)
}

// ─── Aggregation ────────────────────────────────────────────────────────

/// Error-free product: `a·b` as a rounded head and exact tail.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, f64::mul_add(a, b, -p))
}

/// Error-free sum of two doubles (Knuth two-sum).
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

/// Sample-count-weighted mean of client models, summed in fixed client
/// order: `Σ (|D_u|/n)·W_u` with `n = Σ|D_u|`. Each element is accumulated
/// in double-double precision and divided once with a correctly rounded
/// quotient, so aggregating identical models returns them exactly and the
/// result never leaves the elementwise hull of the inputs.
pub fn aggregate(models: &[(ParamSet, usize)]) -> Result<ParamSet> {
    let (first, _) = models
        .first()
        .ok_or_else(|| Error::InvalidData("nothing to aggregate".into()))?;
    for (m, count) in models {
        if !m.same_layout(first) {
            return Err(Error::ShapeMismatch {
                op: "aggregate",
                detail: "client models have different layouts".into(),
            });
        }
        if *count == 0 {
            return Err(Error::InvalidData("client sample count must be > 0".into()));
        }
    }
    let n: usize = models.iter().map(|(_, c)| c).sum();
    let n = n as f64;

    let mut entries = IndexMap::with_capacity(first.len());
    for (name, proto) in first.iter() {
        let mut out = Vec::with_capacity(proto.numel());
        for i in 0..proto.numel() {
            let (mut hi, mut lo) = (0.0f64, 0.0f64);
            for (m, count) in models {
                let (p, e) = two_prod(*count as f64, m.get(name).unwrap().data()[i]);
                let (s, carry) = two_sum(hi, p);
                hi = s;
                lo += carry + e;
            }
            // Correctly rounded (hi + lo) / n.
            let q = hi / n;
            let (ph, pe) = two_prod(q, n);
            let remainder = ((hi - ph) - pe) + lo;
            out.push(q + remainder / n);
        }
        entries.insert(name.clone(), Tensor::new(proto.shape().to_vec(), out)?);
    }
    Ok(ParamSet::from_entries(entries))
}

// ─── Round orchestration ────────────────────────────────────────────────

/// Per-round invariants shared by all clients.
pub struct RoundContext<'a> {
    pub spec: &'a ArchitectureSpec,
    pub hp: &'a HyperParams,
    pub method: Method,
    pub k_shot: usize,
    pub q_query: usize,
    /// Resample the meta-update query batch from the query pool each round
    /// (the support set stays fixed either way).
    pub resample_episodes: bool,
}

/// The meta-update episode of a training client. With resampling on, a
/// fresh K-shot support and Q-query pair is drawn from the client's full
/// data each round, giving the meta-step a richer task distribution; with
/// resampling off, the fixed support is paired with a fixed query draw.
/// Testing clients never resample: their labeled budget is the fixed
/// support.
fn training_episode(
    client: &ClientState,
    ctx: &RoundContext,
    k_shot: usize,
    round: usize,
) -> Result<Episode> {
    let n = ctx.spec.num_classes;
    if ctx.resample_episodes {
        let full_ds = ClientDataset {
            windows: client.full_data(),
            condition_id: client.dataset.condition_id,
        };
        let seed = seeds::mix(&[client.stream, round as u64, 0x51]);
        sample_episode(&full_ds, n, k_shot, ctx.q_query, seed)
    } else {
        let pool_ds = ClientDataset {
            windows: client.query_pool.clone(),
            condition_id: client.dataset.condition_id,
        };
        let seed = seeds::mix(&[client.stream, 0, 0x51]);
        let drawn = sample_episode(&pool_ds, n, 1, ctx.q_query, seed)?;
        Ok(Episode {
            support: client.support.clone(),
            query: drawn.query,
        })
    }
}

fn training_update(
    client: &ClientState,
    global: &ParamSet,
    ctx: &RoundContext,
    round: usize,
) -> Result<(ParamSet, InterpolationWeights)> {
    let hp = ctx.hp;
    match ctx.method {
        Method::Refml | Method::RefmlNoAi => {
            let full = client.full_data();
            let (start, a_new) = if ctx.method == Method::Refml {
                adaptive_interpolate(ctx.spec, client, global, &full, hp.delta)?
            } else {
                (global.clone(), client.interp.clone())
            };
            let encoded = update_encoder(ctx.spec, &start, &full, hp.eta, hp.encoder_steps)?;
            let episode = training_episode(client, ctx, ctx.k_shot, round)?;
            let updated = meta_update_predictor(
                ctx.spec,
                &encoded,
                &episode,
                hp.alpha,
                hp.beta,
                hp.grad_mode,
            )?;
            Ok((updated, a_new))
        }
        Method::FedAvg | Method::FedAvgFt => {
            let updated = fedavg_local(ctx.spec, global, &client.full_data(), hp.eta, hp.encoder_steps)?;
            Ok((updated, client.interp.clone()))
        }
        Method::FedProx | Method::FedProxFt => {
            let updated = fedprox_local(
                ctx.spec,
                global,
                global,
                &client.full_data(),
                hp.eta,
                hp.mu,
                hp.encoder_steps,
            )?;
            Ok((updated, client.interp.clone()))
        }
        Method::Local => Ok((client.local_params.clone(), client.interp.clone())),
    }
}

fn testing_update(
    client: &ClientState,
    global: &ParamSet,
    ctx: &RoundContext,
) -> Result<(ParamSet, InterpolationWeights)> {
    let hp = ctx.hp;
    match ctx.method {
        Method::Refml => {
            let (start, a_new) =
                adaptive_interpolate(ctx.spec, client, global, &client.support, hp.delta)?;
            let tuned = fine_tune(ctx.spec, &start, &client.support, hp.gamma, hp.finetune_steps)?;
            Ok((tuned, a_new))
        }
        Method::RefmlNoAi => {
            let tuned = fine_tune(ctx.spec, global, &client.support, hp.gamma, hp.finetune_steps)?;
            Ok((tuned, client.interp.clone()))
        }
        // Baselines leave testing clients untouched during rounds; their
        // fine-tuned variants adapt once after the final round.
        _ => Ok((client.local_params.clone(), client.interp.clone())),
    }
}

/// One communication round: every training client produces an upload from
/// the broadcast global model, every testing client personalizes its own
/// state (and never uploads), and the server aggregates the training uploads
/// in fixed client order. Client updates run in parallel; results are
/// bit-identical to sequential execution.
pub fn run_round(
    gs: &GlobalState,
    clients: &mut [ClientState],
    ctx: &RoundContext,
) -> Result<GlobalState> {
    if ctx.method == Method::Local {
        return Ok(GlobalState {
            round: gs.round + 1,
            global_params: gs.global_params.clone(),
        });
    }
    let global = &gs.global_params;
    let round = gs.round;

    let outcomes: Vec<Result<(ParamSet, InterpolationWeights)>> = clients
        .par_iter()
        .map(|client| match client.role {
            Role::Training => training_update(client, global, ctx, round),
            Role::Testing => testing_update(client, global, ctx),
        })
        .collect();

    let mut uploads: Vec<(ParamSet, usize)> = Vec::new();
    for (client, outcome) in clients.iter_mut().zip(outcomes) {
        let (params, interp) = outcome?;
        if client.role == Role::Training {
            uploads.push((params.clone(), client.sample_count()));
        }
        client.local_params = params;
        client.interp = interp;
    }
    if uploads.is_empty() {
        return Err(Error::InvalidData("round has no training clients".into()));
    }
    let aggregated = aggregate(&uploads)?;
    Ok(GlobalState {
        round: round + 1,
        global_params: aggregated,
    })
}

// ─── Whole-experiment runner (one suite cell) ───────────────────────────

/// Inputs of one experiment cell: a method trained on the given training
/// conditions and evaluated on the testing conditions.
pub struct CellConfig<'a> {
    pub spec: &'a ArchitectureSpec,
    pub hp: &'a HyperParams,
    pub method: Method,
    pub k_shot: usize,
    pub q_query: usize,
    pub resample_episodes: bool,
    pub train_datasets: &'a [ClientDataset],
    pub test_datasets: &'a [ClientDataset],
    /// Cell seed; init, splits, and per-client streams derive from it.
    pub master_seed: u64,
}

/// Result of one cell: per-testing-client accuracy and final models.
pub struct CellOutcome {
    /// Mean accuracy over testing clients, percent.
    pub accuracy: f64,
    pub per_client: Vec<(u32, f64)>,
    pub final_global: ParamSet,
    /// Final personalized model per testing condition.
    pub testing_models: Vec<(u32, ParamSet)>,
    /// The query pool each testing model was evaluated on, for recomputing
    /// the reported accuracy from checkpoints.
    pub testing_pools: Vec<(u32, Vec<LabeledWindow>)>,
}

/// Builds the client registry of a cell: one training client per training
/// condition and one testing client per testing condition, all starting from
/// the same seeded initialization with all-ones interpolation weights.
pub fn make_clients(cfg: &CellConfig) -> Result<Vec<ClientState>> {
    let n = cfg.spec.num_classes;
    let w0 = model::build(cfg.spec, seeds::mix(&[cfg.master_seed, 0x1717]))?;
    let mut clients = Vec::new();
    let mut id = 0usize;
    for (role, group) in [
        (Role::Training, cfg.train_datasets),
        (Role::Testing, cfg.test_datasets),
    ] {
        for ds in group {
            let split_seed = seeds::mix(&[cfg.master_seed, 0x5b1i64 as u64, ds.condition_id as u64]);
            let (support, query_pool) = crate::data::split_support_pool(ds, n, cfg.k_shot, split_seed)?;
            clients.push(ClientState {
                id,
                role,
                dataset: ds.clone(),
                support,
                query_pool,
                local_params: w0.clone(),
                interp: InterpolationWeights::ones_like(&w0),
                stream: seeds::mix(&[cfg.master_seed, 0x57e4, ds.condition_id as u64]),
            });
            id += 1;
        }
    }
    Ok(clients)
}

/// Runs T rounds of the configured method and evaluates every testing
/// client's final model on its query pool. Deterministic per master seed.
pub fn run_experiment(cfg: &CellConfig) -> Result<CellOutcome> {
    cfg.hp.validate()?;
    cfg.spec.validate()?;
    let mut clients = make_clients(cfg)?;
    if clients.iter().all(|c| c.role != Role::Testing) {
        return Err(Error::InvalidData("experiment has no testing clients".into()));
    }
    if cfg.method != Method::Local && clients.iter().all(|c| c.role != Role::Training) {
        return Err(Error::InvalidData("experiment has no training clients".into()));
    }
    let w0 = clients[0].local_params.clone();
    let ctx = RoundContext {
        spec: cfg.spec,
        hp: cfg.hp,
        method: cfg.method,
        k_shot: cfg.k_shot,
        q_query: cfg.q_query,
        resample_episodes: cfg.resample_episodes,
    };

    let mut gs = GlobalState {
        round: 0,
        global_params: w0,
    };
    for _ in 0..cfg.hp.rounds {
        gs = run_round(&gs, &mut clients, &ctx)?;
    }

    // Final testing-client models. With T = 0 nothing has run, so every
    // method evaluates the freshly initialized global model.
    let mut testing_models = Vec::new();
    for client in clients.iter().filter(|c| c.role == Role::Testing) {
        let model = if cfg.hp.rounds == 0 {
            gs.global_params.clone()
        } else {
            match cfg.method {
                Method::Refml | Method::RefmlNoAi => client.local_params.clone(),
                Method::FedAvg | Method::FedProx => gs.global_params.clone(),
                Method::FedAvgFt | Method::FedProxFt => fine_tune(
                    cfg.spec,
                    &gs.global_params,
                    &client.support,
                    cfg.hp.gamma,
                    cfg.hp.finetune_steps,
                )?,
                Method::Local => {
                    let loss = model_loss(cfg.spec, &client.support)?;
                    let steps = cfg.hp.rounds * cfg.hp.finetune_steps;
                    sgd_steps(&client.local_params, cfg.hp.gamma, steps, &loss)?
                }
            }
        };
        testing_models.push((client.dataset.condition_id, model));
    }

    let mut per_client = Vec::with_capacity(testing_models.len());
    let mut testing_pools = Vec::with_capacity(testing_models.len());
    for (cond, params) in &testing_models {
        let client = clients
            .iter()
            .find(|c| c.role == Role::Testing && c.dataset.condition_id == *cond)
            .unwrap();
        let acc = crate::eval::accuracy(cfg.spec, params, &client.query_pool)?;
        per_client.push((*cond, acc));
        testing_pools.push((*cond, client.query_pool.clone()));
    }
    let accuracy = per_client.iter().map(|(_, a)| a).sum::<f64>() / per_client.len() as f64;
    Ok(CellOutcome {
        accuracy,
        per_client,
        final_global: gs.global_params,
        testing_models,
        testing_pools,
    })
}
