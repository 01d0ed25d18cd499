//! The gated multi-task claim network, its ablation variants, and the
//! single-hidden-layer baseline.
//!
//! Per context i in {c, d, o}, two gated layers produce
//! `c = relu(W_f in + b_f) ⊙ softmax(W_g in + b_g)`. The three context
//! vectors fuse through pairwise elementwise products, per-pair projection,
//! and batch normalization, summed and passed through a ReLU into the shared
//! trunk. Four heads read the trunk: a sigmoid denial probability, two
//! softmax reason-code distributions, and a linear response-days estimate.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::{BatchNormState, BatchStats, DiffError, Graph, Mode, NodeId, Tensor};
use crate::featurize::{ClaimVector, Vocabulary};
use crate::ingest::TargetVector;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("checkpoint was trained against a different vocabulary (expected hash {expected:#018x}, got {actual:#018x})")]
    VocabularyMismatch { expected: u64, actual: u64 },
    #[error("unknown variant \"{0}\" (expected deepclaim1, deepclaim2, no_multipliers, no_gates, or baseline_nn)")]
    UnknownVariant(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Architecture switches and loss weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub context_dim: usize,
    pub embed_dim: usize,
    /// Shared trunk depth L.
    pub shared_layers: usize,
    pub towers: bool,
    pub gates_enabled: bool,
    pub multipliers_enabled: bool,
    /// (λ0, λ1, λ2) weighting the claim-code, service-code, and days losses.
    pub lambda: [f64; 3],
    /// Class counts for the claim- and service-level code distributions.
    pub class_counts: [usize; 2],
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_dim: 96,
            embed_dim: 94,
            shared_layers: 2,
            towers: false,
            gates_enabled: true,
            multipliers_enabled: true,
            lambda: [1.0, 1.0, 0.01],
            class_counts: [3, 3],
            seed: 0,
        }
    }
}

/// The five benchmarked architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    DeepClaim1,
    DeepClaim2,
    NoMultipliers,
    NoGates,
    BaselineNn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::DeepClaim1,
        Variant::DeepClaim2,
        Variant::NoMultipliers,
        Variant::NoGates,
        Variant::BaselineNn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::DeepClaim1 => "deepclaim1",
            Variant::DeepClaim2 => "deepclaim2",
            Variant::NoMultipliers => "no_multipliers",
            Variant::NoGates => "no_gates",
            Variant::BaselineNn => "baseline_nn",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }

    /// Overwrite the architecture switches of `config` for this variant.
    pub fn configure(self, config: &mut ModelConfig) {
        let (layers, towers, gates, multipliers) = match self {
            Variant::DeepClaim1 => (2, true, true, true),
            Variant::DeepClaim2 => (2, false, true, true),
            Variant::NoMultipliers => (0, false, true, false),
            Variant::NoGates => (0, false, false, false),
            // The baseline ignores these switches; keep them inert.
            Variant::BaselineNn => (0, false, false, false),
        };
        config.shared_layers = layers;
        config.towers = towers;
        config.gates_enabled = gates;
        config.multipliers_enabled = multipliers;
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::parse(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatePair {
    pub w_g: Tensor,
    pub b_g: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatedLayerParams {
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub gate: Option<GatePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextParams {
    pub layer0: GatedLayerParams,
    pub layer1: GatedLayerParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w: [Tensor; 3],
    pub bn: [BatchNormState; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub denial: DenseParams,
    pub claim_codes: DenseParams,
    pub service_codes: DenseParams,
    pub days: DenseParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Contexts in (c, d, o) order.
    pub contexts: [ContextParams; 3],
    pub fusion: FusionParams,
    pub shared: Vec<DenseParams>,
    pub towers: Option<Box<[DenseParams; 4]>>,
    pub heads: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineParams {
    pub hidden: DenseParams,
    pub heads: HeadParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NetworkParams {
    Deep(ModelParams),
    Baseline(BaselineParams),
}

const CONTEXT_TAGS: [&str; 3] = ["c", "d", "o"];
const HEAD_TAGS: [&str; 4] = ["denial", "claim", "service", "days"];

fn he_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

fn init_dense(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> DenseParams {
    DenseParams { w: he_uniform(rng, out_dim, in_dim), b: Tensor::zeros(vec![out_dim]) }
}

fn init_gated(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize, gates: bool) -> GatedLayerParams {
    let w_f = he_uniform(rng, out_dim, in_dim);
    let b_f = Tensor::zeros(vec![out_dim]);
    let gate = gates.then(|| GatePair {
        w_g: he_uniform(rng, out_dim, in_dim),
        b_g: Tensor::zeros(vec![out_dim]),
    });
    GatedLayerParams { w_f, b_f, gate }
}

/// Initialize the deep network for input dims `(x_c, x_d, x_o)`.
pub fn init_deep(config: &ModelConfig, input_dims: [usize; 3]) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.context_dim;
    let h = config.embed_dim;
    let contexts = std::array::from_fn(|i| ContextParams {
        layer0: init_gated(&mut rng, k, input_dims[i], config.gates_enabled),
        layer1: init_gated(&mut rng, k, k, config.gates_enabled),
    });
    let fusion = FusionParams {
        w: std::array::from_fn(|_| he_uniform(&mut rng, h, k)),
        bn: std::array::from_fn(|_| BatchNormState::new(h)),
    };
    let shared = (0..config.shared_layers).map(|_| init_dense(&mut rng, h, h)).collect();
    let towers = config
        .towers
        .then(|| Box::new(std::array::from_fn(|_| init_dense(&mut rng, h, h))));
    let heads = HeadParams {
        denial: init_dense(&mut rng, 1, h),
        claim_codes: init_dense(&mut rng, config.class_counts[0], h),
        service_codes: init_dense(&mut rng, config.class_counts[1], h),
        days: init_dense(&mut rng, 1, h),
    };
    ModelParams { contexts, fusion, shared, towers, heads }
}

/// Initialize the bag-of-features baseline: one ReLU hidden layer of
/// `context_dim` over the concatenated input, then the same four heads.
pub fn init_baseline(config: &ModelConfig, input_dims: [usize; 3]) -> BaselineParams {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let k = config.context_dim;
    let total: usize = input_dims.iter().sum();
    let hidden = init_dense(&mut rng, k, total);
    let heads = HeadParams {
        denial: init_dense(&mut rng, 1, k),
        claim_codes: init_dense(&mut rng, config.class_counts[0], k),
        service_codes: init_dense(&mut rng, config.class_counts[1], k),
        days: init_dense(&mut rng, 1, k),
    };
    BaselineParams { hidden, heads }
}

pub fn init_network(variant: Variant, config: &ModelConfig, input_dims: [usize; 3]) -> NetworkParams {
    match variant {
        Variant::BaselineNn => NetworkParams::Baseline(init_baseline(config, input_dims)),
        _ => NetworkParams::Deep(init_deep(config, input_dims)),
    }
}

impl ModelParams {
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        for (i, ctx) in self.contexts.iter().enumerate() {
            let tag = CONTEXT_TAGS[i];
            for (l, layer) in [&ctx.layer0, &ctx.layer1].into_iter().enumerate() {
                f(format!("ctx_{tag}.l{l}.w_f"), &layer.w_f);
                f(format!("ctx_{tag}.l{l}.b_f"), &layer.b_f);
                if let Some(gate) = &layer.gate {
                    f(format!("ctx_{tag}.l{l}.w_g"), &gate.w_g);
                    f(format!("ctx_{tag}.l{l}.b_g"), &gate.b_g);
                }
            }
        }
        for j in 0..3 {
            f(format!("fuse{j}.w"), &self.fusion.w[j]);
            f(format!("fuse{j}.gamma"), &self.fusion.bn[j].gamma);
            f(format!("fuse{j}.beta"), &self.fusion.bn[j].beta);
        }
        for (l, layer) in self.shared.iter().enumerate() {
            f(format!("shared{l}.w"), &layer.w);
            f(format!("shared{l}.b"), &layer.b);
        }
        if let Some(towers) = &self.towers {
            for (j, t) in towers.iter().enumerate() {
                f(format!("tower_{}.w", HEAD_TAGS[j]), &t.w);
                f(format!("tower_{}.b", HEAD_TAGS[j]), &t.b);
            }
        }
        visit_heads(&self.heads, f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        for (i, ctx) in self.contexts.iter_mut().enumerate() {
            let tag = CONTEXT_TAGS[i];
            for (l, layer) in [&mut ctx.layer0, &mut ctx.layer1].into_iter().enumerate() {
                f(format!("ctx_{tag}.l{l}.w_f"), &mut layer.w_f);
                f(format!("ctx_{tag}.l{l}.b_f"), &mut layer.b_f);
                if let Some(gate) = &mut layer.gate {
                    f(format!("ctx_{tag}.l{l}.w_g"), &mut gate.w_g);
                    f(format!("ctx_{tag}.l{l}.b_g"), &mut gate.b_g);
                }
            }
        }
        for j in 0..3 {
            f(format!("fuse{j}.w"), &mut self.fusion.w[j]);
            f(format!("fuse{j}.gamma"), &mut self.fusion.bn[j].gamma);
            f(format!("fuse{j}.beta"), &mut self.fusion.bn[j].beta);
        }
        for (l, layer) in self.shared.iter_mut().enumerate() {
            f(format!("shared{l}.w"), &mut layer.w);
            f(format!("shared{l}.b"), &mut layer.b);
        }
        if let Some(towers) = &mut self.towers {
            for (j, t) in towers.iter_mut().enumerate() {
                f(format!("tower_{}.w", HEAD_TAGS[j]), &mut t.w);
                f(format!("tower_{}.b", HEAD_TAGS[j]), &mut t.b);
            }
        }
        visit_heads_mut(&mut self.heads, f);
    }
}

fn visit_heads(heads: &HeadParams, f: &mut impl FnMut(String, &Tensor)) {
    for (tag, head) in HEAD_TAGS
        .iter()
        .zip([&heads.denial, &heads.claim_codes, &heads.service_codes, &heads.days])
    {
        f(format!("head_{tag}.w"), &head.w);
        f(format!("head_{tag}.b"), &head.b);
    }
}

fn visit_heads_mut(heads: &mut HeadParams, f: &mut impl FnMut(String, &mut Tensor)) {
    for (tag, head) in HEAD_TAGS
        .iter()
        .zip([&mut heads.denial, &mut heads.claim_codes, &mut heads.service_codes, &mut heads.days])
    {
        f(format!("head_{tag}.w"), &mut head.w);
        f(format!("head_{tag}.b"), &mut head.b);
    }
}

impl BaselineParams {
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        f("hidden.w".into(), &self.hidden.w);
        f("hidden.b".into(), &self.hidden.b);
        visit_heads(&self.heads, f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("hidden.w".into(), &mut self.hidden.w);
        f("hidden.b".into(), &mut self.hidden.b);
        visit_heads_mut(&mut self.heads, f);
    }
}

impl NetworkParams {
    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        match self {
            NetworkParams::Deep(p) => p.visit(f),
            NetworkParams::Baseline(p) => p.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        match self {
            NetworkParams::Deep(p) => p.visit_mut(f),
            NetworkParams::Baseline(p) => p.visit_mut(f),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }
}

/// A recorded forward pass over one batch.
pub struct ForwardPass {
    pub graph: Graph,
    /// Input leaves: (x_c, x_d, x_o) for the deep network, one concatenated
    /// leaf for the baseline.
    pub inputs: Vec<NodeId>,
    /// Final per-context vectors (deep network only).
    pub contexts: Vec<NodeId>,
    pub embedding: NodeId,
    pub p_denial: NodeId,
    pub claim_dist: NodeId,
    pub service_dist: NodeId,
    pub days: NodeId,
    /// Fusion batch statistics to fold into running stats after a train step.
    pub bn_stats: Vec<(usize, BatchStats)>,
}

fn batch_segment(
    graph: &mut Graph,
    batch: &[&ClaimVector],
    pick: impl Fn(&ClaimVector) -> &crate::featurize::SparseVec,
) -> NodeId {
    let dim = pick(batch[0]).dim;
    let mut data = vec![0.0; batch.len() * dim];
    let mut pattern = Vec::with_capacity(batch.len());
    for (row, cv) in batch.iter().enumerate() {
        let seg = pick(cv);
        debug_assert_eq!(seg.dim, dim);
        let mut nz = Vec::with_capacity(seg.entries.len());
        for (i, v) in &seg.entries {
            data[row * dim + i] = *v;
            nz.push(*i);
        }
        pattern.push(nz);
    }
    graph.input(Tensor::from_parts(vec![batch.len(), dim], data), Some(pattern))
}

fn batch_concat(graph: &mut Graph, batch: &[&ClaimVector]) -> NodeId {
    let dim = batch[0].total_dim();
    let mut data = vec![0.0; batch.len() * dim];
    let mut pattern = Vec::with_capacity(batch.len());
    for (row, cv) in batch.iter().enumerate() {
        let dense = cv.to_dense();
        data[row * dim..(row + 1) * dim].copy_from_slice(&dense);
        pattern.push(cv.concat_pattern());
    }
    graph.input(Tensor::from_parts(vec![batch.len(), dim], data), Some(pattern))
}

/// One gated layer: relu(W_f in + b_f), elementwise-modulated by
/// softmax(W_g in + b_g) when the gate pair is present.
pub(crate) fn gated_layer(
    graph: &mut Graph,
    input: NodeId,
    params: &GatedLayerParams,
    prefix: &str,
) -> Result<NodeId, DiffError> {
    let w_f = graph.param(format!("{prefix}.w_f"), params.w_f.clone());
    let b_f = graph.param(format!("{prefix}.b_f"), params.b_f.clone());
    let affine = graph.linear(input, w_f, Some(b_f))?;
    let f = graph.relu(affine);
    match &params.gate {
        Some(gate) => {
            let w_g = graph.param(format!("{prefix}.w_g"), gate.w_g.clone());
            let b_g = graph.param(format!("{prefix}.b_g"), gate.b_g.clone());
            let logits = graph.linear(input, w_g, Some(b_g))?;
            let g = graph.softmax(logits);
            graph.hadamard(f, g)
        }
        None => Ok(f),
    }
}

/// Pairwise multiplicative fusion. With multipliers disabled, each context
/// projects directly through its own W and BN instead.
fn fuse(
    graph: &mut Graph,
    contexts: &[NodeId; 3],
    fusion: &FusionParams,
    multipliers: bool,
    mode: Mode,
) -> Result<(NodeId, Vec<(usize, BatchStats)>), DiffError> {
    // Pair order: (c,d), (o,c), (d,o).
    let pair_index: [(usize, usize); 3] = [(0, 1), (2, 0), (1, 2)];
    let mut terms = Vec::with_capacity(3);
    let mut bn_stats = Vec::new();
    for j in 0..3 {
        let source = if multipliers {
            let (a, b) = pair_index[j];
            graph.hadamard(contexts[a], contexts[b])?
        } else {
            contexts[j]
        };
        let w = graph.param(format!("fuse{j}.w"), fusion.w[j].clone());
        let projected = graph.linear(source, w, None)?;
        let gamma = graph.param(format!("fuse{j}.gamma"), fusion.bn[j].gamma.clone());
        let beta = graph.param(format!("fuse{j}.beta"), fusion.bn[j].beta.clone());
        let (normed, stats) = graph.batchnorm(projected, gamma, beta, &fusion.bn[j], mode)?;
        if let Some(stats) = stats {
            bn_stats.push((j, stats));
        }
        terms.push(normed);
    }
    let sum01 = graph.add(terms[0], terms[1])?;
    let sum = graph.add(sum01, terms[2])?;
    let h = graph.relu(sum);
    Ok((h, bn_stats))
}

fn dense_layer(
    graph: &mut Graph,
    input: NodeId,
    params: &DenseParams,
    prefix: &str,
) -> Result<NodeId, DiffError> {
    let w = graph.param(format!("{prefix}.w"), params.w.clone());
    let b = graph.param(format!("{prefix}.b"), params.b.clone());
    graph.linear(input, w, Some(b))
}

fn attach_heads(
    graph: &mut Graph,
    trunk: [NodeId; 4],
    heads: &HeadParams,
) -> Result<(NodeId, NodeId, NodeId, NodeId), DiffError> {
    let denial_logit = dense_layer(graph, trunk[0], &heads.denial, "head_denial")?;
    let p_denial = graph.sigmoid(denial_logit);
    let claim_logits = dense_layer(graph, trunk[1], &heads.claim_codes, "head_claim")?;
    let claim_dist = graph.softmax(claim_logits);
    let service_logits = dense_layer(graph, trunk[2], &heads.service_codes, "head_service")?;
    let service_dist = graph.softmax(service_logits);
    let days = dense_layer(graph, trunk[3], &heads.days, "head_days")?;
    Ok((p_denial, claim_dist, service_dist, days))
}

/// Record the deep network's forward pass for a batch.
pub fn forward_deep(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &[&ClaimVector],
    mode: Mode,
) -> Result<ForwardPass, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut graph = Graph::new();
    let x_c = batch_segment(&mut graph, batch, |cv| &cv.x_c);
    let x_d = batch_segment(&mut graph, batch, |cv| &cv.x_d);
    let x_o = batch_segment(&mut graph, batch, |cv| &cv.x_o);
    let inputs = vec![x_c, x_d, x_o];

    let mut contexts = Vec::with_capacity(3);
    for (i, ctx) in params.contexts.iter().enumerate() {
        let tag = CONTEXT_TAGS[i];
        let c0 = gated_layer(&mut graph, inputs[i], &ctx.layer0, &format!("ctx_{tag}.l0"))?;
        let c1 = gated_layer(&mut graph, c0, &ctx.layer1, &format!("ctx_{tag}.l1"))?;
        contexts.push(c1);
    }
    let ctx_arr = [contexts[0], contexts[1], contexts[2]];
    let (h, bn_stats) =
        fuse(&mut graph, &ctx_arr, &params.fusion, config.multipliers_enabled, mode)?;

    let mut trunk_top = h;
    for (l, layer) in params.shared.iter().enumerate() {
        let affine = dense_layer(&mut graph, trunk_top, layer, &format!("shared{l}"))?;
        trunk_top = graph.relu(affine);
    }

    let trunk: [NodeId; 4] = match &params.towers {
        Some(towers) => {
            let mut per_task = [trunk_top; 4];
            for (j, tower) in towers.iter().enumerate() {
                let affine =
                    dense_layer(&mut graph, trunk_top, tower, &format!("tower_{}", HEAD_TAGS[j]))?;
                per_task[j] = graph.relu(affine);
            }
            per_task
        }
        None => [trunk_top; 4],
    };
    let (p_denial, claim_dist, service_dist, days) = attach_heads(&mut graph, trunk, &params.heads)?;

    Ok(ForwardPass {
        graph,
        inputs,
        contexts,
        embedding: h,
        p_denial,
        claim_dist,
        service_dist,
        days,
        bn_stats,
    })
}

/// Record the baseline's forward pass: one hidden ReLU layer over the
/// concatenated input, then the four heads.
pub fn forward_baseline(
    params: &BaselineParams,
    batch: &[&ClaimVector],
) -> Result<ForwardPass, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let mut graph = Graph::new();
    let x = batch_concat(&mut graph, batch);
    let affine = dense_layer(&mut graph, x, &params.hidden, "hidden")?;
    let hidden = graph.relu(affine);
    let (p_denial, claim_dist, service_dist, days) =
        attach_heads(&mut graph, [hidden; 4], &params.heads)?;
    Ok(ForwardPass {
        graph,
        inputs: vec![x],
        contexts: Vec::new(),
        embedding: hidden,
        p_denial,
        claim_dist,
        service_dist,
        days,
        bn_stats: Vec::new(),
    })
}

pub fn forward(
    params: &NetworkParams,
    config: &ModelConfig,
    batch: &[&ClaimVector],
    mode: Mode,
) -> Result<ForwardPass, ModelError> {
    match params {
        NetworkParams::Deep(p) => forward_deep(p, config, batch, mode),
        NetworkParams::Baseline(p) => forward_baseline(p, batch),
    }
}

/// Node handles for the combined loss and its components.
pub struct LossNodes {
    pub total: NodeId,
    pub bce: NodeId,
    pub cce_claim: NodeId,
    pub cce_service: NodeId,
    pub l1: NodeId,
}

/// total = bce + λ0·cce_claim + λ1·cce_service + λ2·l1
pub fn combine_losses(
    graph: &mut Graph,
    bce: NodeId,
    cce_claim: NodeId,
    cce_service: NodeId,
    l1: NodeId,
    lambda: [f64; 3],
) -> Result<NodeId, DiffError> {
    let t0 = graph.scale(cce_claim, lambda[0]);
    let t1 = graph.scale(cce_service, lambda[1]);
    let t2 = graph.scale(l1, lambda[2]);
    let s0 = graph.add(bce, t0)?;
    let s1 = graph.add(s0, t1)?;
    graph.add(s1, t2)
}

/// Append target constants and the multi-task loss to a recorded pass.
pub fn attach_loss(
    pass: &mut ForwardPass,
    targets: &[&TargetVector],
    lambda: [f64; 3],
) -> Result<LossNodes, ModelError> {
    let graph = &mut pass.graph;
    let b = targets.len();
    let y0: Vec<f64> = targets.iter().map(|t| t.y0).collect();
    let k1 = targets[0].y1.len();
    let k2 = targets[0].y2.len();
    let y1: Vec<f64> = targets.iter().flat_map(|t| t.y1.iter().copied()).collect();
    let y2: Vec<f64> = targets.iter().flat_map(|t| t.y2.iter().copied()).collect();
    let y3: Vec<f64> = targets.iter().map(|t| t.y3).collect();

    let y0 = graph.constant(Tensor::from_parts(vec![b, 1], y0));
    let y1 = graph.constant(Tensor::from_parts(vec![b, k1], y1));
    let y2 = graph.constant(Tensor::from_parts(vec![b, k2], y2));
    let y3 = graph.constant(Tensor::from_parts(vec![b, 1], y3));

    let bce = graph.bce_mean(pass.p_denial, y0)?;
    let cce_claim = graph.cce_mean(pass.claim_dist, y1)?;
    let cce_service = graph.cce_mean(pass.service_dist, y2)?;
    let l1 = graph.abs_mean(pass.days, y3)?;
    let total = combine_losses(graph, bce, cce_claim, cce_service, l1, lambda)?;
    Ok(LossNodes { total, bce, cce_claim, cce_service, l1 })
}

/// Point predictions for one claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_denial: f64,
    pub claim_code_dist: Vec<f64>,
    pub service_code_dist: Vec<f64>,
    pub response_days: f64,
}

pub fn extract_predictions(pass: &ForwardPass) -> Vec<Prediction> {
    let p = pass.graph.value(pass.p_denial);
    let claim = pass.graph.value(pass.claim_dist);
    let service = pass.graph.value(pass.service_dist);
    let days = pass.graph.value(pass.days);
    let b = p.rows();
    (0..b)
        .map(|r| Prediction {
            p_denial: p.row(r)[0],
            claim_code_dist: claim.row(r).to_vec(),
            service_code_dist: service.row(r).to_vec(),
            response_days: days.row(r)[0],
        })
        .collect()
}

/// Serialized trained model: config, every parameter tensor (including BN
/// running statistics), and the hash of the vocabulary it was trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: Variant,
    pub config: ModelConfig,
    pub params: NetworkParams,
    pub input_dims: [usize; 3],
    pub vocab_hash: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Refuse to score claims vectorized under a different vocabulary.
    pub fn verify_vocab(&self, vocab: &Vocabulary) -> Result<(), ModelError> {
        let actual = vocab.content_hash();
        if actual != self.vocab_hash {
            return Err(ModelError::VocabularyMismatch { expected: self.vocab_hash, actual });
        }
        Ok(())
    }
}
