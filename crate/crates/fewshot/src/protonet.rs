//! Embedding network, prototypes, distance classification, and the episodic
//! training/evaluation machinery every method plugs into.
//!
//! The embedder is a stack of conv3x3 -> instance-norm -> relu (-> maxpool)
//! blocks. Hook points sit after each block; StyleMix layers and
//! class-support attention attach there. Queries are classified by distance
//! to per-class prototypes (support-feature centroids).

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand_distr::{Distribution, Normal};

use crate::attention::{
    self, AttentionConfig, Projections,
};
use crate::data::{sample_episode, DatasetManifest, Episode, SampleFilter, Split};
use crate::rng::{stream, Rng};
use crate::stylemix::{self, MixConfig};
use crate::tensor::{
    load_tensors, save_tensors, Result, SgdOptimizer, Tape, Tensor, TensorError, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    SquaredL2,
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sq_l2" | "l2" => Some(Metric::SquaredL2),
            "cosine" => Some(Metric::Cosine),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockConfig {
    pub out_channels: usize,
    pub stride: usize,
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderConfig {
    pub in_channels: usize,
    pub blocks: Vec<ConvBlockConfig>,
    /// Per-block instance normalization. On by default; turning it off gives
    /// a style-sensitive network whose features keep channel statistics
    /// (used by the style-sensitivity analyses).
    pub instance_norm: bool,
}

impl Default for EmbedderConfig {
    /// Conv4-class network sized for 3x16x16 inputs: three pooled blocks and
    /// one final unpooled block, giving 16-channel 2x2 feature maps (D = 64).
    fn default() -> Self {
        let block = |pool| ConvBlockConfig {
            out_channels: 16,
            stride: 1,
            pool,
        };
        EmbedderConfig {
            in_channels: 3,
            blocks: vec![block(true), block(true), block(true), block(false)],
            instance_norm: true,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(TensorError::BadParameter {
                op: "embedder",
                detail: "need at least one conv block".into(),
            });
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.stride == 0 {
                return Err(TensorError::BadParameter {
                    op: "embedder",
                    detail: format!("block {i} has zero channels or stride"),
                });
            }
        }
        Ok(())
    }

    pub fn n_slots(&self) -> usize {
        self.blocks.len()
    }

    /// Feature-map shape (C, H, W) produced for an input of the given size.
    pub fn feature_shape(&self, h: usize, w: usize) -> (usize, usize, usize) {
        let (mut h, mut w) = (h, w);
        let mut c = self.in_channels;
        for b in &self.blocks {
            // conv 3x3, pad 1
            h = (h + 2 - 3) / b.stride + 1;
            w = (w + 2 - 3) / b.stride + 1;
            if b.pool {
                h = (h - 2) / 2 + 1;
                w = (w - 2) / 2 + 1;
            }
            c = b.out_channels;
        }
        (c, h, w)
    }

    pub fn feature_dim(&self, h: usize, w: usize) -> usize {
        let (c, fh, fw) = self.feature_shape(h, w);
        c * fh * fw
    }
}

/// Embedder weights (one 3x3 conv kernel per block) plus optional learned
/// attention projections.
#[derive(Debug, Clone)]
pub struct ProtoModel {
    pub config: EmbedderConfig,
    pub weights: Vec<Tensor>,
    pub attn_proj: Option<[Tensor; 3]>,
}

impl ProtoModel {
    /// He-initialized model.
    pub fn new(config: EmbedderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut weights = Vec::with_capacity(config.blocks.len());
        let mut in_ch = config.in_channels;
        for b in &config.blocks {
            let fan_in = in_ch * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid normal");
            let data: Vec<f64> = (0..b.out_channels * in_ch * 9)
                .map(|_| normal.sample(rng))
                .collect();
            weights.push(Tensor::new(vec![b.out_channels, in_ch, 3, 3], data)?);
            in_ch = b.out_channels;
        }
        Ok(ProtoModel {
            config,
            weights,
            attn_proj: None,
        })
    }

    /// Add learned Q/K/V projections of size D×D (ablation mode).
    pub fn with_learned_projections(mut self, d: usize, rng: &mut Rng) -> Result<Self> {
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid normal");
        let mut make = || -> Result<Tensor> {
            let data: Vec<f64> = (0..d * d).map(|_| normal.sample(rng)).collect();
            Tensor::new(vec![d, d], data)
        };
        self.attn_proj = Some([make()?, make()?, make()?]);
        Ok(self)
    }

    pub fn parameters(&self) -> Vec<(String, Tensor)> {
        let mut params: Vec<(String, Tensor)> = self
            .weights
            .iter()
            .enumerate()
            .map(|(i, w)| (format!("block{i}.conv"), w.clone()))
            .collect();
        if let Some([wq, wk, wv]) = &self.attn_proj {
            params.push(("attn.wq".into(), wq.clone()));
            params.push(("attn.wk".into(), wk.clone()));
            params.push(("attn.wv".into(), wv.clone()));
        }
        params
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut tensors = self.parameters();
        // architecture is stored alongside the weights so load is self-contained
        let mut arch = Vec::new();
        for b in &self.config.blocks {
            arch.extend_from_slice(&[
                b.out_channels as f64,
                b.stride as f64,
                if b.pool { 1.0 } else { 0.0 },
            ]);
        }
        tensors.push((
            "config.blocks".into(),
            Tensor::new(vec![self.config.blocks.len(), 3], arch)?,
        ));
        tensors.push((
            "config.in_channels".into(),
            Tensor::scalar(self.config.in_channels as f64),
        ));
        tensors.push((
            "config.instance_norm".into(),
            Tensor::scalar(if self.config.instance_norm { 1.0 } else { 0.0 }),
        ));
        save_tensors(path, &tensors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let tensors = load_tensors(path)?;
        let find = |name: &str| -> Result<&Tensor> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| TensorError::Format(format!("checkpoint missing tensor {name}")))
        };
        let arch = find("config.blocks")?;
        let in_channels = find("config.in_channels")?.item() as usize;
        let n_blocks = arch.shape()[0];
        let blocks: Vec<ConvBlockConfig> = (0..n_blocks)
            .map(|i| ConvBlockConfig {
                out_channels: arch.get(&[i, 0]) as usize,
                stride: arch.get(&[i, 1]) as usize,
                pool: arch.get(&[i, 2]) != 0.0,
            })
            .collect();
        let instance_norm = find("config.instance_norm").map_or(true, |t| t.item() != 0.0);
        let config = EmbedderConfig {
            in_channels,
            blocks,
            instance_norm,
        };
        let weights = (0..n_blocks)
            .map(|i| find(&format!("block{i}.conv")).cloned())
            .collect::<Result<Vec<_>>>()?;
        let attn_proj = match (find("attn.wq"), find("attn.wk"), find("attn.wv")) {
            (Ok(wq), Ok(wk), Ok(wv)) => Some([wq.clone(), wk.clone(), wv.clone()]),
            _ => None,
        };
        Ok(ProtoModel {
            config,
            weights,
            attn_proj,
        })
    }
}

/// Model weights registered on a tape.
pub struct BoundModel<'a> {
    pub config: &'a EmbedderConfig,
    pub weight_vars: Vec<Var>,
    pub proj: Option<Projections>,
}

/// Register the model's weights on `tape`; `trainable` marks them as
/// gradient leaves.
pub fn bind_model<'a>(tape: &mut Tape, model: &'a ProtoModel, trainable: bool) -> BoundModel<'a> {
    let weight_vars = model
        .weights
        .iter()
        .map(|w| tape.leaf(w.clone().with_requires_grad(trainable)))
        .collect();
    let proj = model.attn_proj.as_ref().map(|[wq, wk, wv]| Projections {
        wq: tape.leaf(wq.clone().with_requires_grad(trainable)),
        wk: tape.leaf(wk.clone().with_requires_grad(trainable)),
        wv: tape.leaf(wv.clone().with_requires_grad(trainable)),
    });
    BoundModel {
        config: &model.config,
        weight_vars,
        proj,
    }
}

/// What attaches at an embedder hook point.
pub enum Hook<'a> {
    StyleMix(&'a MixConfig),
    /// Joint self-attention over the spatial tokens of same-class support
    /// maps; other batch images pass through.
    ClassAttention,
}

pub struct HookPlan<'a> {
    pub slot: usize,
    pub hook: Hook<'a>,
}

/// Batch structure the hooks need: which episode each image belongs to and,
/// for class attention, the support indices grouped by (episode, class).
#[derive(Debug, Clone, Default)]
pub struct BatchContext {
    pub membership: Vec<usize>,
    pub class_groups: Vec<Vec<usize>>,
}

/// Run the embedder over a batch, applying hooks in slot order.
/// Deterministic given `rng`; without stochastic hooks the rng is unused.
pub fn embed(
    tape: &mut Tape,
    model: &BoundModel,
    images: Var,
    hooks: &[HookPlan],
    ctx: &BatchContext,
    rng: &mut Rng,
) -> Result<Var> {
    let n_slots = model.config.n_slots();
    for h in hooks {
        if h.slot >= n_slots {
            return Err(TensorError::BadParameter {
                op: "embed",
                detail: format!("hook at slot {} but embedder has {n_slots} blocks", h.slot),
            });
        }
    }
    let mut x = images;
    for (slot, (block, &w)) in model
        .config
        .blocks
        .iter()
        .zip(&model.weight_vars)
        .enumerate()
    {
        x = tape.conv2d(x, w, block.stride, 1)?;
        if model.config.instance_norm {
            x = tape.instance_norm(x)?;
        }
        x = tape.relu(x)?;
        if block.pool {
            x = tape.max_pool2d(x, 2, 2)?;
        }
        for h in hooks.iter().filter(|h| h.slot == slot) {
            x = match &h.hook {
                Hook::StyleMix(config) => {
                    stylemix::stylemix_layer(tape, x, &ctx.membership, config, rng)?
                }
                Hook::ClassAttention => apply_class_attention(tape, x, ctx, model.proj.as_ref())?,
            };
        }
    }
    Ok(x)
}

/// Refine each (episode, class) support group jointly; everything else
/// passes through unchanged.
fn apply_class_attention(
    tape: &mut Tape,
    features: Var,
    ctx: &BatchContext,
    proj: Option<&Projections>,
) -> Result<Var> {
    if ctx.class_groups.is_empty() {
        return Ok(features);
    }
    let batch = tape.value(features).shape()[0];
    // refined[i] = slice of the group output this image lands in
    let mut replacement: Vec<Option<Var>> = vec![None; batch];
    for group in &ctx.class_groups {
        let members: Vec<Var> = group
            .iter()
            .map(|&i| tape.slice(features, 0, i, 1))
            .collect::<Result<_>>()?;
        let stacked = tape.concat(&members, 0)?;
        let refined = attention::class_support_attention(tape, stacked, proj)?;
        for (j, &i) in group.iter().enumerate() {
            replacement[i] = Some(tape.slice(refined, 0, j, 1)?);
        }
    }
    let rows: Vec<Var> = (0..batch)
        .map(|i| match replacement[i] {
            Some(v) => Ok(v),
            None => tape.slice(features, 0, i, 1),
        })
        .collect::<Result<_>>()?;
    tape.concat(&rows, 0)
}

/// Per-class centroids of support features. Accepts (S,D) or (S,C,H,W)
/// features and returns prototypes of the same rank.
pub fn compute_prototypes(
    tape: &mut Tape,
    support_features: Var,
    labels: &[usize],
    n_way: usize,
) -> Result<Var> {
    let shape = tape.value(support_features).shape().to_vec();
    let s = shape[0];
    if labels.len() != s {
        return Err(TensorError::BadParameter {
            op: "compute_prototypes",
            detail: format!("{} labels for {s} support features", labels.len()),
        });
    }
    let mut counts = vec![0usize; n_way];
    for &l in labels {
        if l >= n_way {
            return Err(TensorError::LabelOutOfRange {
                label: l,
                classes: n_way,
            });
        }
        counts[l] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(TensorError::Empty {
            op: "compute_prototypes",
        })
        .map_err(|_| TensorError::BadParameter {
            op: "compute_prototypes",
            detail: format!("class {empty} has no support features"),
        });
    }
    let mut avg = vec![0.0; n_way * s];
    for (i, &l) in labels.iter().enumerate() {
        avg[l * s + i] = 1.0 / counts[l] as f64;
    }
    let avg = tape.constant(Tensor::new(vec![n_way, s], avg)?);
    let per: usize = shape[1..].iter().product();
    let flat = tape.reshape(support_features, vec![s, per])?;
    let protos = tape.matmul(avg, flat)?;
    let mut out_shape = shape;
    out_shape[0] = n_way;
    tape.reshape(protos, out_shape)
}

/// Distance logits of queries against prototypes: negative squared L2 or
/// cosine similarity, so argmax is always the nearest prototype under the
/// metric. Rank-4 inputs are flattened.
pub fn classify(
    tape: &mut Tape,
    query_features: Var,
    prototypes: Var,
    metric: Metric,
) -> Result<Var> {
    let flatten = |tape: &mut Tape, v: Var| -> Result<Var> {
        let shape = tape.value(v).shape().to_vec();
        if shape.len() == 2 {
            Ok(v)
        } else {
            let rows = shape[0];
            let per: usize = shape[1..].iter().product();
            tape.reshape(v, vec![rows, per])
        }
    };
    let q = flatten(tape, query_features)?;
    let p = flatten(tape, prototypes)?;
    match metric {
        Metric::SquaredL2 => {
            let d = tape.l2_distance_pairwise(q, p)?;
            tape.scalar_mul(d, -1.0)
        }
        Metric::Cosine => tape.cosine_similarity_pairwise(q, p),
    }
}

/// Everything that distinguishes one method from another at episode level.
#[derive(Debug, Clone, Default)]
pub struct MethodConfig {
    pub stylemix: Option<StyleMixPlan>,
    pub attention: Option<AttentionConfig>,
    pub metric: MetricConfig,
}

#[derive(Debug, Clone)]
pub struct StyleMixPlan {
    pub mix: MixConfig,
    /// Embedder block indices the StyleMix layer attaches after.
    pub slots: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct MetricConfig(pub Metric);

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig(Metric::SquaredL2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub accuracy: f64,
}

/// Forward pass of one or more episodes on an existing tape. Returns the
/// scalar loss var (mean over episodes) and the query accuracy.
pub fn episode_graph(
    tape: &mut Tape,
    model: &BoundModel,
    manifest: &DatasetManifest,
    episodes: &[Episode],
    method: &MethodConfig,
    rng: &mut Rng,
) -> Result<(Var, f64)> {
    if episodes.is_empty() {
        return Err(TensorError::Empty { op: "episode_graph" });
    }
    // batch: per episode, supports then queries
    let mut indices = Vec::new();
    let mut membership = Vec::new();
    let mut class_groups: Vec<Vec<usize>> = Vec::new();
    let mut spans = Vec::new(); // (support_start, query_start, end) per episode
    for (e, ep) in episodes.iter().enumerate() {
        let support_start = indices.len();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); ep.n_way];
        for &(idx, label) in &ep.support {
            groups[label].push(indices.len());
            indices.push(idx);
            membership.push(e);
        }
        let query_start = indices.len();
        for &(idx, _) in &ep.query {
            indices.push(idx);
            membership.push(e);
        }
        spans.push((support_start, query_start, indices.len()));
        class_groups.extend(groups);
    }
    let images = tape.constant(manifest.gather_images(&indices));

    let mut hooks: Vec<HookPlan> = Vec::new();
    if let Some(plan) = &method.stylemix {
        for &slot in &plan.slots {
            hooks.push(HookPlan {
                slot,
                hook: Hook::StyleMix(&plan.mix),
            });
        }
    }
    let attn = method.attention.as_ref();
    let last_slot = model.config.n_slots() - 1;
    let mut ctx = BatchContext {
        membership,
        class_groups: Vec::new(),
    };
    if let Some(a) = attn {
        if a.mode.refines_support() {
            ctx.class_groups = class_groups;
            let slots = if a.slots.is_empty() {
                vec![last_slot]
            } else {
                a.slots.clone()
            };
            for slot in slots {
                hooks.push(HookPlan {
                    slot,
                    hook: Hook::ClassAttention,
                });
            }
        }
    }
    hooks.sort_by_key(|h| h.slot);

    let features = embed(tape, model, images, &hooks, &ctx, rng)?;

    let mut losses = Vec::with_capacity(episodes.len());
    let mut correct = 0usize;
    let mut total = 0usize;
    for (ep, &(s0, q0, end)) in episodes.iter().zip(&spans) {
        let support = tape.slice(features, 0, s0, q0 - s0)?;
        let queries = tape.slice(features, 0, q0, end - q0)?;
        let support_labels: Vec<usize> = ep.support.iter().map(|&(_, l)| l).collect();
        let query_labels: Vec<usize> = ep.query.iter().map(|&(_, l)| l).collect();

        let mut prototypes = compute_prototypes(tape, support, &support_labels, ep.n_way)?;
        if let Some(a) = attn {
            if a.mode.refines_prototypes() {
                let shape = tape.value(prototypes).shape().to_vec();
                let per: usize = shape[1..].iter().product();
                let flat = tape.reshape(prototypes, vec![ep.n_way, per])?;
                let refined =
                    attention::prototype_attention(tape, flat, model.proj.as_ref())?;
                prototypes = tape.reshape(refined, shape)?;
            }
        }

        let logits = if attn.is_some_and(|a| a.mode.refines_query()) {
            // per-query joint refinement against the prototype maps
            let mut rows = Vec::with_capacity(query_labels.len());
            let proto_shape = tape.value(prototypes).shape().to_vec();
            let (c, h, w) = (proto_shape[1], proto_shape[2], proto_shape[3]);
            for qi in 0..query_labels.len() {
                let qmap4 = tape.slice(queries, 0, qi, 1)?;
                let qmap = tape.reshape(qmap4, vec![c, h, w])?;
                let (rq, rp) = attention::query_prototype_attention(
                    tape,
                    qmap,
                    prototypes,
                    model.proj.as_ref(),
                )?;
                let rq2 = tape.reshape(rq, vec![1, c * h * w])?;
                rows.push(classify(tape, rq2, rp, method.metric.0)?);
            }
            tape.concat(&rows, 0)?
        } else {
            classify(tape, queries, prototypes, method.metric.0)?
        };

        let loss = tape.cross_entropy(logits, &query_labels)?;
        losses.push(loss);

        let logits_val = tape.value(logits);
        for (row, &label) in query_labels.iter().enumerate() {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for k in 0..ep.n_way {
                let v = logits_val.get(&[row, k]);
                if v > best.0 {
                    best = (v, k);
                }
            }
            if best.1 == label {
                correct += 1;
            }
            total += 1;
        }
    }
    let loss = if losses.len() == 1 {
        losses[0]
    } else {
        let mut acc = losses[0];
        for &l in &losses[1..] {
            acc = tape.add(acc, l)?;
        }
        tape.scalar_mul(acc, 1.0 / losses.len() as f64)?
    };
    Ok((loss, correct as f64 / total as f64))
}

/// Evaluate one or more episodes (no gradients).
pub fn episode_step(
    model: &ProtoModel,
    manifest: &DatasetManifest,
    episodes: &[Episode],
    method: &MethodConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model, false);
    let (loss, accuracy) = episode_graph(&mut tape, &bound, manifest, episodes, method, rng)?;
    Ok(EpisodeOutcome {
        loss: tape.value(loss).item(),
        accuracy,
    })
}

/// One SGD update on the episodic loss.
pub fn episode_train_step(
    model: &mut ProtoModel,
    optimizer: &mut SgdOptimizer,
    manifest: &DatasetManifest,
    episodes: &[Episode],
    method: &MethodConfig,
    rng: &mut Rng,
) -> Result<EpisodeOutcome> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, model, true);
    let weight_vars = bound.weight_vars.clone();
    let proj_vars = bound.proj;
    let (loss, accuracy) = episode_graph(&mut tape, &bound, manifest, episodes, method, rng)?;
    let loss_value = tape.value(loss).item();
    tape.backward(loss)?;

    let mut params: Vec<Tensor> = model.weights.clone();
    let mut grads: Vec<Tensor> = weight_vars
        .iter()
        .map(|&v| grad_or_zeros(&tape, v))
        .collect::<Result<_>>()?;
    if let (Some([wq, wk, wv]), Some(p)) = (&model.attn_proj, proj_vars) {
        params.extend([wq.clone(), wk.clone(), wv.clone()]);
        grads.push(grad_or_zeros(&tape, p.wq)?);
        grads.push(grad_or_zeros(&tape, p.wk)?);
        grads.push(grad_or_zeros(&tape, p.wv)?);
    }
    optimizer.step(&mut params, &grads)?;
    let n_blocks = model.weights.len();
    model.weights = params[..n_blocks].to_vec();
    if model.attn_proj.is_some() {
        model.attn_proj = Some([
            params[n_blocks].clone(),
            params[n_blocks + 1].clone(),
            params[n_blocks + 2].clone(),
        ]);
    }
    Ok(EpisodeOutcome {
        loss: loss_value,
        accuracy,
    })
}

fn grad_or_zeros(tape: &Tape, v: Var) -> Result<Tensor> {
    Ok(match tape.grad(v)? {
        Some(g) => g,
        None => Tensor::zeros(tape.value(v).shape().to_vec()),
    })
}

/// Episodic training schedule: SGD with momentum 0.9, lr 0.01, and a single
/// x0.1 decay two-thirds of the way through.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub episodes: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_decay_at: f64,
    /// Two episodes per batch (required by cross-episode StyleMix scope).
    pub double_episode: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            episodes: 240,
            lr: 0.01,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_decay_at: 2.0 / 3.0,
            double_episode: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// (epoch-or-episode index, training loss, validation accuracy).
    pub rows: Vec<(usize, f64, f64)>,
}

impl TrainLog {
    /// Training-curve CSV; "epoch" counts epochs during pretraining and
    /// episodes during episodic training.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,val_accuracy\n");
        for (step, loss, acc) in &self.rows {
            out.push_str(&format!("{step},{loss:.6},{acc:.4}\n"));
        }
        out
    }
}

/// Episodic training of the embedder on episodes drawn from `filter`.
pub fn episodic_train(
    model: &mut ProtoModel,
    manifest: &DatasetManifest,
    filter: SampleFilter,
    method: &MethodConfig,
    config: &TrainConfig,
    seed: u64,
) -> crate::Result<TrainLog> {
    let mut optimizer = SgdOptimizer::new(config.lr, config.momentum)?;
    let decay_point = (config.episodes as f64 * config.lr_decay_at) as usize;
    let mut log = TrainLog::default();
    let mut window = Vec::new();
    for step in 0..config.episodes {
        if step == decay_point && decay_point > 0 {
            optimizer.set_lr(config.lr * config.lr_decay);
        }
        let mut ep_rng = stream(seed, "train-episode", &[step as u64]);
        let count = if config.double_episode { 2 } else { 1 };
        let episodes: Vec<Episode> = (0..count)
            .map(|_| {
                sample_episode(
                    manifest,
                    filter,
                    config.n_way,
                    config.k_shot,
                    config.q_queries,
                    &mut ep_rng,
                )
            })
            .collect::<crate::data::Result<_>>()?;
        let mut hook_rng = stream(seed, "train-hooks", &[step as u64]);
        let outcome = episode_train_step(
            model,
            &mut optimizer,
            manifest,
            &episodes,
            method,
            &mut hook_rng,
        )?;
        window.push(outcome.loss);
        if (step + 1) % 20 == 0 || step + 1 == config.episodes {
            let loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            log.rows.push((step + 1, loss, f64::NAN));
        }
    }
    Ok(log)
}

/// Pretraining: plain softmax classification over every base class, then the
/// classifier head is dropped and the embedder kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub lr_decay_at: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 0.02,
            momentum: 0.9,
            lr_decay: 0.1,
            lr_decay_at: 2.0 / 3.0,
        }
    }
}

pub fn pretrain_classifier(
    model: &mut ProtoModel,
    manifest: &DatasetManifest,
    filter: SampleFilter,
    config: &PretrainConfig,
    seed: u64,
) -> crate::Result<TrainLog> {
    let pool = manifest.select(filter);
    if pool.is_empty() {
        return Err(crate::Error::Data(crate::data::DataError::Invalid(
            "pretraining split is empty".into(),
        )));
    }
    let classes = manifest.classes_in(filter);
    let class_index: std::collections::HashMap<usize, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let (_, h, w) = manifest.image_shape();
    let d = model.config.feature_dim(h, w);

    let mut init_rng = stream(seed, "pretrain-head", &[]);
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid normal");
    let mut head_w = Tensor::new(
        vec![d, classes.len()],
        (0..d * classes.len())
            .map(|_| normal.sample(&mut init_rng))
            .collect(),
    )?;
    let mut head_b = Tensor::zeros(vec![1, classes.len()]);

    let mut optimizer = SgdOptimizer::new(config.lr, config.momentum)?;
    let decay_epoch = (config.epochs as f64 * config.lr_decay_at) as usize;
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        if epoch == decay_epoch && decay_epoch > 0 {
            optimizer.set_lr(config.lr * config.lr_decay);
        }
        let mut order = pool.clone();
        let mut shuffle_rng = stream(seed, "pretrain-shuffle", &[epoch as u64]);
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| class_index[&manifest.samples[i].class_id])
                .collect();
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, model, true);
            let weight_vars = bound.weight_vars.clone();
            let images = tape.constant(manifest.gather_images(chunk));
            let mut dummy_rng = stream(seed, "pretrain-embed", &[]);
            let feats = embed(
                &mut tape,
                &bound,
                images,
                &[],
                &BatchContext::default(),
                &mut dummy_rng,
            )?;
            let flat = tape.reshape(feats, vec![chunk.len(), d])?;
            let wv = tape.leaf(head_w.clone().with_requires_grad(true));
            let bv = tape.leaf(head_b.clone().with_requires_grad(true));
            let scores = tape.matmul(flat, wv)?;
            let logits = tape.add(scores, bv)?;
            let loss = tape.cross_entropy(logits, &labels)?;
            epoch_loss += tape.value(loss).item();
            batches += 1;
            tape.backward(loss)?;

            let mut params: Vec<Tensor> = model.weights.clone();
            params.push(head_w.clone());
            params.push(head_b.clone());
            let mut grads: Vec<Tensor> = weight_vars
                .iter()
                .map(|&v| grad_or_zeros(&tape, v))
                .collect::<Result<_>>()?;
            grads.push(grad_or_zeros(&tape, wv)?);
            grads.push(grad_or_zeros(&tape, bv)?);
            optimizer.step(&mut params, &grads)?;
            let n_blocks = model.weights.len();
            model.weights = params[..n_blocks].to_vec();
            head_b = params.pop().expect("head bias");
            head_w = params.pop().expect("head weight");
        }
        let val_acc = quick_val_accuracy(model, manifest, seed, epoch as u64)?;
        log.rows.push((epoch + 1, epoch_loss / batches as f64, val_acc));
    }
    Ok(log)
}

/// Small fixed-budget episodic check on the validation split (falls back to
/// NaN when the split cannot host an episode).
fn quick_val_accuracy(
    model: &ProtoModel,
    manifest: &DatasetManifest,
    seed: u64,
    epoch: u64,
) -> crate::Result<f64> {
    let filter = SampleFilter::split_domain(Split::Val, 0);
    let classes = manifest.classes_in(filter).len();
    let n_way = classes.min(5);
    if n_way < 2 {
        return Ok(f64::NAN);
    }
    let method = MethodConfig::default();
    let mut total = 0.0;
    let episodes = 20;
    for e in 0..episodes {
        let mut rng = stream(seed, "pretrain-val", &[epoch, e]);
        let ep = sample_episode(manifest, filter, n_way, 5, 5, &mut rng)?;
        let outcome = episode_step(model, manifest, &[ep], &method, &mut rng)?;
        total += outcome.accuracy;
    }
    Ok(total / episodes as f64)
}

fn shuffle(indices: &mut [usize], rng: &mut Rng) {
    use rand::Rng as _;
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Accuracy with a 95% normal-approximation confidence interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub n_episodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub n_episodes: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            n_episodes: 2000,
        }
    }
}

/// Episode-averaged evaluation. Episodes fan out over worker threads
/// (capped by FSL_THREADS); per-episode RNG streams are derived from the
/// seed and episode index, so the result is bit-identical regardless of the
/// thread count or schedule.
pub fn evaluate(
    model: &ProtoModel,
    manifest: &DatasetManifest,
    filter: SampleFilter,
    method: &MethodConfig,
    protocol: &EvalProtocol,
    seed: u64,
) -> crate::Result<EvalReport> {
    evaluate_with_filters(model, manifest, filter, filter, method, protocol, seed)
}

/// Evaluation with distinct support and query subsets (cross-domain probes).
pub fn evaluate_with_filters(
    model: &ProtoModel,
    manifest: &DatasetManifest,
    support_filter: SampleFilter,
    query_filter: SampleFilter,
    method: &MethodConfig,
    protocol: &EvalProtocol,
    seed: u64,
) -> crate::Result<EvalReport> {
    if protocol.n_episodes == 0 {
        return Err(crate::Error::Data(crate::data::DataError::Invalid(
            "n_episodes must be at least 1".into(),
        )));
    }
    let n = protocol.n_episodes;
    let workers = worker_count().min(n);
    let accuracies: Vec<f64> = {
        let mut accs = vec![0.0f64; n];
        let next = AtomicUsize::new(0);
        let error: Mutex<Option<crate::Error>> = Mutex::new(None);
        let slots = Mutex::new(&mut accs);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let e = next.fetch_add(1, Ordering::Relaxed);
                    if e >= n || error.lock().unwrap().is_some() {
                        break;
                    }
                    let run = || -> crate::Result<f64> {
                        let mut rng = stream(seed, "eval-episode", &[e as u64]);
                        let ep = crate::data::sample_episode_with(
                            manifest,
                            support_filter,
                            query_filter,
                            protocol.n_way,
                            protocol.k_shot,
                            protocol.q_queries,
                            &mut rng,
                        )?;
                        let outcome = episode_step(model, manifest, &[ep], method, &mut rng)?;
                        Ok(outcome.accuracy)
                    };
                    match run() {
                        Ok(acc) => slots.lock().unwrap()[e] = acc,
                        Err(err) => {
                            *error.lock().unwrap() = Some(err);
                            break;
                        }
                    }
                });
            }
        });
        if let Some(err) = error.into_inner().unwrap() {
            return Err(err);
        }
        accs
    };
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        mean_accuracy: mean,
        ci95,
        n_episodes: n,
    })
}

/// Nearest-centroid accuracy of a frozen embedder: support centroids from
/// `support_filter`, queries from `query_filter` (the non-episodic baseline
/// protocol for cross-domain comparisons).
pub fn mean_centroid_baseline(
    model: &ProtoModel,
    manifest: &DatasetManifest,
    support_filter: SampleFilter,
    query_filter: SampleFilter,
    protocol: &EvalProtocol,
    seed: u64,
) -> crate::Result<EvalReport> {
    evaluate_with_filters(
        model,
        manifest,
        support_filter,
        query_filter,
        &MethodConfig::default(),
        protocol,
        seed,
    )
}

fn worker_count() -> usize {
    if let Ok(v) = std::env::var("FSL_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}
