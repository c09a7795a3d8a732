//! Pseudo-label contrastive adaptation: DBSCAN over unlabeled target
//! features, a three-family prototype memory (source class centroids,
//! target cluster centroids, target outlier instances), the unified
//! contrastive loss over all of them, and the alternating cluster/update
//! training loop.

use rand::Rng as _;

use crate::data::{DataError, DatasetManifest, Role, SampleFilter, Split};
use crate::protonet::{
    bind_model, embed, BatchContext, EvalProtocol, MethodConfig, ProtoModel,
};
use crate::rng::{stream, Rng};
use crate::tensor::{SgdOptimizer, Tape, Tensor, TensorError, Var};
use crate::Result;

/// DBSCAN output. Cluster ids are assigned in discovery order; `None` marks
/// outliers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<Option<usize>>,
    pub core: Vec<bool>,
    pub eps: f64,
    pub min_pts: usize,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn n_outliers(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Sample indices of each cluster, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                out[*c].push(i);
            }
        }
        out
    }
}

/// Classical DBSCAN with a fixed deterministic tie policy: neighborhoods
/// include the point itself (distance <= eps), clusters are numbered by the
/// smallest index of their core points, and border points join the first
/// cluster (in that numbering) that claims them.
pub fn dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Result<ClusterAssignment> {
    if points.is_empty() {
        return Err(TensorError::Empty { op: "dbscan" }.into());
    }
    if eps <= 0.0 || min_pts == 0 {
        return Err(TensorError::BadParameter {
            op: "dbscan",
            detail: format!("eps {eps}, min_pts {min_pts}"),
        }
        .into());
    }
    let n = points.len();
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(TensorError::BadParameter {
                op: "dbscan",
                detail: format!("point {i} has dim {}, expected {dim}", p.len()),
            }
            .into());
        }
    }
    let eps2 = eps * eps;
    let neighbors = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| sq_dist(&points[i], &points[j]) <= eps2)
            .collect()
    };
    let core: Vec<bool> = (0..n).map(|i| neighbors(i).len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut n_clusters = 0usize;
    for seed in 0..n {
        if visited[seed] || !core[seed] {
            continue;
        }
        let cluster = n_clusters;
        n_clusters += 1;
        // breadth-first expansion in index order
        let mut queue = std::collections::VecDeque::from([seed]);
        visited[seed] = true;
        labels[seed] = Some(cluster);
        while let Some(p) = queue.pop_front() {
            for q in neighbors(p) {
                if labels[q].is_none() {
                    labels[q] = Some(cluster);
                }
                if core[q] && !visited[q] {
                    visited[q] = true;
                    queue.push_back(q);
                }
            }
        }
    }
    Ok(ClusterAssignment {
        labels,
        core,
        eps,
        min_pts,
        n_clusters,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Scale-adaptive eps: the given percentile of every point's k-th-nearest-
/// other-neighbor distance (k = min_pts). Deterministic nearest-rank rule.
pub fn eps_by_percentile(points: &[Vec<f64>], min_pts: usize, percentile: f64) -> Result<f64> {
    if points.len() <= min_pts {
        return Err(TensorError::BadParameter {
            op: "eps_by_percentile",
            detail: format!("{} points but min_pts {min_pts}", points.len()),
        }
        .into());
    }
    if !(0.0..=1.0).contains(&percentile) {
        return Err(TensorError::BadParameter {
            op: "eps_by_percentile",
            detail: format!("percentile {percentile} outside [0, 1]"),
        }
        .into());
    }
    let mut kth: Vec<f64> = (0..points.len())
        .map(|i| {
            let mut dists: Vec<f64> = (0..points.len())
                .filter(|&j| j != i)
                .map(|j| sq_dist(&points[i], &points[j]).sqrt())
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            dists[min_pts - 1]
        })
        .collect();
    kth.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let rank = ((points.len() - 1) as f64 * percentile).floor() as usize;
    Ok(kth[rank].max(1e-9))
}

/// Which memory entry is the positive for a feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveRef {
    SourceClass(usize),
    Cluster(usize),
    Outlier(usize),
}

/// The three prototype families, all unit-norm, plus the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    pub class_centroids: Vec<Vec<f64>>,
    pub cluster_centroids: Vec<Vec<f64>>,
    pub outliers: Vec<Vec<f64>>,
    pub tau: f64,
    pub dim: usize,
}

impl PrototypeMemory {
    pub fn len(&self) -> usize {
        self.class_centroids.len() + self.cluster_centroids.len() + self.outliers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row index of a positive in the stacked [w.. c.. v..] matrix.
    pub fn index_of(&self, positive: PositiveRef) -> Result<usize> {
        let (nw, nc, no) = (
            self.class_centroids.len(),
            self.cluster_centroids.len(),
            self.outliers.len(),
        );
        let idx = match positive {
            PositiveRef::SourceClass(k) if k < nw => k,
            PositiveRef::Cluster(k) if k < nc => nw + k,
            PositiveRef::Outlier(k) if k < no => nw + nc + k,
            _ => {
                return Err(TensorError::BadParameter {
                    op: "contrastive_loss",
                    detail: format!("positive {positive:?} not present in memory"),
                }
                .into())
            }
        };
        Ok(idx)
    }

    /// All entries stacked into an (M, D) tensor, w's first, then c's, then v's.
    pub fn stacked(&self) -> Result<Tensor> {
        let mut data = Vec::with_capacity(self.len() * self.dim);
        for row in self
            .class_centroids
            .iter()
            .chain(&self.cluster_centroids)
            .chain(&self.outliers)
        {
            data.extend_from_slice(row);
        }
        Ok(Tensor::new(vec![self.len(), self.dim], data)?)
    }
}

/// Build the memory from raw (unnormalized) features: class centroid = the
/// normalized mean of the class's source features, cluster centroid likewise
/// over target features, plus every outlier feature normalized individually.
/// Entry order is stable: ascending class, cluster, then sample index.
pub fn build_memory(
    source_features: &[Vec<f64>],
    source_labels: &[usize],
    target_features: &[Vec<f64>],
    assignment: &ClusterAssignment,
    tau: f64,
) -> Result<PrototypeMemory> {
    if tau <= 0.0 {
        return Err(TensorError::BadParameter {
            op: "build_memory",
            detail: format!("tau must be positive, got {tau}"),
        }
        .into());
    }
    if source_features.len() != source_labels.len() {
        return Err(TensorError::BadParameter {
            op: "build_memory",
            detail: format!(
                "{} source features but {} labels",
                source_features.len(),
                source_labels.len()
            ),
        }
        .into());
    }
    if target_features.len() != assignment.labels.len() {
        return Err(TensorError::BadParameter {
            op: "build_memory",
            detail: format!(
                "{} target features but {} cluster labels",
                target_features.len(),
                assignment.labels.len()
            ),
        }
        .into());
    }
    let dim = source_features
        .first()
        .or(target_features.first())
        .map(|f| f.len())
        .unwrap_or(0);
    if dim == 0 {
        return Err(TensorError::Empty { op: "build_memory" }.into());
    }

    let n_classes = source_labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut class_sums = vec![vec![0.0; dim]; n_classes];
    let mut class_counts = vec![0usize; n_classes];
    for (f, &l) in source_features.iter().zip(source_labels) {
        for (s, v) in class_sums[l].iter_mut().zip(f) {
            *s += v;
        }
        class_counts[l] += 1;
    }
    let class_centroids = class_sums
        .into_iter()
        .zip(&class_counts)
        .map(|(sum, &count)| {
            if count == 0 {
                return Err(TensorError::Empty { op: "build_memory" }.into());
            }
            normalize(sum.iter().map(|v| v / count as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cluster_sums = vec![vec![0.0; dim]; assignment.n_clusters];
    let mut cluster_counts = vec![0usize; assignment.n_clusters];
    let mut outliers = Vec::new();
    for (f, l) in target_features.iter().zip(&assignment.labels) {
        match l {
            Some(c) => {
                for (s, v) in cluster_sums[*c].iter_mut().zip(f) {
                    *s += v;
                }
                cluster_counts[*c] += 1;
            }
            None => outliers.push(normalize(f.clone())?),
        }
    }
    let cluster_centroids = cluster_sums
        .into_iter()
        .zip(&cluster_counts)
        .map(|(sum, &count)| normalize(sum.iter().map(|v| v / count as f64).collect()))
        .collect::<Result<Vec<_>>>()?;

    Ok(PrototypeMemory {
        class_centroids,
        cluster_centroids,
        outliers,
        tau,
        dim,
    })
}

fn normalize(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(TensorError::ZeroNorm {
            op: "build_memory",
            row: 0,
        }
        .into());
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    Ok(v)
}

/// Unified contrastive loss of a batch of unit-norm features against the
/// memory: per row, `-log( exp(<f,z+>/tau) / sum_all exp(<f,m>/tau) )`,
/// log-sum-exp stabilized, averaged over the batch. Gradients flow through
/// the features; the memory is a constant.
pub fn contrastive_loss_batch(
    tape: &mut Tape,
    features: Var,
    positives: &[PositiveRef],
    memory: &PrototypeMemory,
) -> Result<Var> {
    let shape = tape.value(features).shape().to_vec();
    if shape.len() != 2 {
        return Err(TensorError::InvalidShape {
            op: "contrastive_loss",
            expected: "rank-2 features (B,D)",
            shape,
        }
        .into());
    }
    let (b, d) = (shape[0], shape[1]);
    if d != memory.dim {
        return Err(TensorError::ShapeMismatch {
            op: "contrastive_loss",
            left: shape,
            right: vec![memory.len(), memory.dim],
        }
        .into());
    }
    if positives.len() != b {
        return Err(TensorError::BadParameter {
            op: "contrastive_loss",
            detail: format!("{} positives for a batch of {b}", positives.len()),
        }
        .into());
    }
    for row in 0..b {
        let norm: f64 = tape.value(features).data()[row * d..(row + 1) * d]
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(TensorError::BadParameter {
                op: "contrastive_loss",
                detail: format!("feature row {row} has norm {norm}, expected 1"),
            }
            .into());
        }
    }
    let m = memory.len();
    let pos_rows: Vec<usize> = positives
        .iter()
        .map(|&p| memory.index_of(p))
        .collect::<Result<_>>()?;

    let mem = tape.constant(memory.stacked()?);
    let mem_t = tape.permute(mem, &[1, 0])?;
    let sims = tape.matmul(features, mem_t)?;
    let logits = tape.scalar_mul(sims, 1.0 / memory.tau)?;

    // row-max as a constant: lse = log(sum exp(l - max)) + max
    let maxes: Vec<f64> = (0..b)
        .map(|r| {
            tape.value(logits).data()[r * m..(r + 1) * m]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let max_col = tape.constant(Tensor::new(vec![b, 1], maxes.clone())?);
    let shifted = tape.sub(logits, max_col)?;
    let exp = tape.exp(shifted)?;
    let mean_exp = tape.mean_axes(exp, &[1])?;
    let log_mean = tape.log(mean_exp)?;
    let lse_shifted = tape.add_scalar(log_mean, (m as f64).ln())?;
    let lse = tape.add(lse_shifted, max_col)?;

    let mut onehot = vec![0.0; b * m];
    for (r, &p) in pos_rows.iter().enumerate() {
        onehot[r * m + p] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![b, m], onehot)?);
    let picked = tape.mul(logits, onehot)?;
    let pos_mean = tape.mean_axes(picked, &[1])?;
    let pos = tape.scalar_mul(pos_mean, m as f64)?;

    let per_row = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per_row)?)
}

/// Single-feature form of the unified loss.
pub fn contrastive_loss(
    tape: &mut Tape,
    feature: Var,
    positive: PositiveRef,
    memory: &PrototypeMemory,
) -> Result<Var> {
    let shape = tape.value(feature).shape().to_vec();
    let row = if shape.len() == 1 {
        tape.reshape(feature, vec![1, shape[0]])?
    } else {
        feature
    };
    contrastive_loss_batch(tape, row, &[positive], memory)
}

/// Alternating cluster/update schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AlternatingConfig {
    /// Hard cap on clustering rounds.
    pub rounds_cap: usize,
    /// Model updates per round between clusterings.
    pub inner_iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub tau: f64,
    pub min_pts: usize,
    pub eps_percentile: f64,
    /// Stop when both cluster count and eval accuracy move less than this
    /// fraction across two consecutive rounds.
    pub convergence_tol: f64,
    /// Episodes for the per-round target-accuracy monitor.
    pub monitor_episodes: usize,
    /// Use only this many unlabeled target samples (seeded subsample, nested
    /// across caps: the N-sample is a prefix of the 2N-sample).
    pub unlabeled_cap: Option<usize>,
    /// Blend factor for the optional momentum memory (None = the default
    /// full recomputation every round).
    pub memory_momentum: Option<f64>,
    /// Whether outlier instances take batch slots as anchors. They always
    /// appear in the loss denominator either way.
    pub batch_outliers: bool,
    /// Per-round multiplicative learning-rate decay (1.0 = constant).
    pub lr_round_decay: f64,
}

impl Default for AlternatingConfig {
    /// Calibrated on the synthetic benchmark: conservative clustering (tight
    /// eps, small min_pts) keeps clusters pure enough to bootstrap, outliers
    /// stay out of the anchor batches (they remain negatives in every
    /// denominator), and the per-round lr decay tapers the drift.
    fn default() -> Self {
        AlternatingConfig {
            rounds_cap: 20,
            inner_iters: 60,
            batch_size: 24,
            lr: 0.001,
            momentum: 0.9,
            tau: 0.05,
            min_pts: 3,
            eps_percentile: 0.1,
            convergence_tol: 0.0005,
            monitor_episodes: 100,
            unlabeled_cap: None,
            memory_momentum: None,
            batch_outliers: false,
            lr_round_decay: 0.85,
        }
    }
}

/// One row of the per-round progress log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub n_clusters: usize,
    pub n_outliers: usize,
    pub source_loss: f64,
    pub target_accuracy: f64,
}

pub fn rounds_to_csv(rows: &[RoundRecord]) -> String {
    let mut out = String::from("round,n_clusters,n_outliers,source_loss,target_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.4}\n",
            r.round, r.n_clusters, r.n_outliers, r.source_loss, r.target_accuracy
        ));
    }
    out
}

/// Alternate between clustering target features and contrastive updates
/// until converged (or capped). The model is checkpointed per round when
/// `checkpoint_dir` is given.
pub fn alternating_train(
    model: &mut ProtoModel,
    manifest: &DatasetManifest,
    config: &AlternatingConfig,
    seed: u64,
    checkpoint_dir: Option<&std::path::Path>,
) -> Result<Vec<RoundRecord>> {
    let source_filter = SampleFilter {
        split: Some(Split::Base),
        domain: Some(0),
        role: Some(Role::LabeledSource),
    };
    let source_idx = manifest.select(source_filter);
    if source_idx.is_empty() {
        return Err(DataError::Invalid("no labeled source samples".into()).into());
    }
    let mut unlabeled_idx = manifest.select(SampleFilter::role(Role::UnlabeledTarget));
    if unlabeled_idx.is_empty() {
        return Err(DataError::Invalid("no unlabeled target samples".into()).into());
    }
    {
        let mut rng = stream(seed, "unlabeled-cap", &[]);
        for i in (1..unlabeled_idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            unlabeled_idx.swap(i, j);
        }
    }
    if let Some(cap) = config.unlabeled_cap {
        unlabeled_idx.truncate(cap.max(1));
    }

    // source classes, densely re-indexed
    let source_classes = manifest.classes_in(source_filter);
    let class_slot: std::collections::HashMap<usize, usize> = source_classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, i))
        .collect();
    let source_labels: Vec<usize> = source_idx
        .iter()
        .map(|&i| class_slot[&manifest.samples[i].class_id])
        .collect();

    let mut optimizer = SgdOptimizer::new(config.lr, config.momentum)?;
    let mut records: Vec<RoundRecord> = Vec::new();
    let mut previous_memory: Option<PrototypeMemory> = None;
    let mut stall_streak = 0usize;

    for round in 0..config.rounds_cap {
        if round > 0 && config.lr_round_decay != 1.0 {
            optimizer.set_lr(optimizer.lr() * config.lr_round_decay);
        }
        let source_feats = embed_features(model, manifest, &source_idx)?;
        let target_feats = embed_features(model, manifest, &unlabeled_idx)?;

        let eps = eps_by_percentile(&target_feats, config.min_pts, config.eps_percentile)?;
        let assignment = dbscan(&target_feats, eps, config.min_pts)?;
        if assignment.n_clusters == 0 {
            eprintln!(
                "warning: clustering round {round} produced no clusters ({} outliers); \
                 continuing on instance terms only",
                assignment.n_outliers()
            );
        }
        let mut memory = build_memory(
            &source_feats,
            &source_labels,
            &target_feats,
            &assignment,
            config.tau,
        )?;
        if let (Some(m), Some(prev)) = (config.memory_momentum, &previous_memory) {
            blend_memory(&mut memory, prev, m)?;
        }

        let cluster_members = assignment.members();
        let outlier_members: Vec<usize> = assignment
            .labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.is_none().then_some(i))
            .collect();

        let mut loss_sum = 0.0;
        for iter in 0..config.inner_iters {
            let mut rng = stream(seed, "contrastive-batch", &[round as u64, iter as u64]);
            let outlier_pool: &[usize] = if config.batch_outliers {
                &outlier_members
            } else {
                &[]
            };
            let (batch_idx, positives) = compose_batch(
                &source_idx,
                &source_labels,
                &unlabeled_idx,
                &cluster_members,
                outlier_pool,
                &assignment,
                config.batch_size,
                &mut rng,
            );
            let labels_batch: Vec<PositiveRef> = positives;
            let mut tape = Tape::new();
            let bound = bind_model(&mut tape, model, true);
            let weight_vars = bound.weight_vars.clone();
            let images = tape.constant(manifest.gather_images(&batch_idx));
            let mut hook_rng = stream(seed, "contrastive-embed", &[round as u64, iter as u64]);
            let maps = embed(
                &mut tape,
                &bound,
                images,
                &[],
                &BatchContext::default(),
                &mut hook_rng,
            )?;
            let mshape = tape.value(maps).shape().to_vec();
            let d: usize = mshape[1..].iter().product();
            let flat = tape.reshape(maps, vec![batch_idx.len(), d])?;
            let normalized = tape.l2_normalize_rows(flat)?;
            let loss = contrastive_loss_batch(&mut tape, normalized, &labels_batch, &memory)?;
            loss_sum += tape.value(loss).item();
            tape.backward(loss)?;
            let grads: Vec<Tensor> = weight_vars
                .iter()
                .map(|&v| {
                    Ok(match tape.grad(v)? {
                        Some(g) => g,
                        None => Tensor::zeros(tape.value(v).shape().to_vec()),
                    })
                })
                .collect::<crate::tensor::Result<_>>()?;
            let mut params = model.weights.clone();
            optimizer.step(&mut params, &grads)?;
            model.weights = params;
        }

        let monitor = crate::protonet::evaluate(
            model,
            manifest,
            SampleFilter::split_domain(Split::Novel, 1),
            &MethodConfig::default(),
            &EvalProtocol {
                n_episodes: config.monitor_episodes,
                ..Default::default()
            },
            seed ^ 0x5eed,
        )?;
        let record = RoundRecord {
            round,
            n_clusters: assignment.n_clusters,
            n_outliers: assignment.n_outliers(),
            source_loss: loss_sum / config.inner_iters.max(1) as f64,
            target_accuracy: monitor.mean_accuracy,
        };
        if let Some(dir) = checkpoint_dir {
            model.save(&dir.join(format!("round_{round}.fslt")))?;
        }
        let stalled = records.last().is_some_and(|prev: &RoundRecord| {
            let dc = (record.n_clusters as f64 - prev.n_clusters as f64).abs()
                / (prev.n_clusters.max(1) as f64);
            let da = (record.target_accuracy - prev.target_accuracy).abs();
            dc < config.convergence_tol && da < config.convergence_tol
        });
        records.push(record);
        previous_memory = Some(memory);
        // two consecutive stalls end the run (one can be monitor noise)
        if stalled {
            stall_streak += 1;
            if stall_streak >= 2 {
                break;
            }
        } else {
            stall_streak = 0;
        }
    }
    Ok(records)
}

/// Equal thirds source/clustered/outlier when every family has members,
/// otherwise proportional to family sizes.
#[allow(clippy::too_many_arguments)]
fn compose_batch(
    source_idx: &[usize],
    source_labels: &[usize],
    unlabeled_idx: &[usize],
    cluster_members: &[Vec<usize>],
    outlier_members: &[usize],
    assignment: &ClusterAssignment,
    batch_size: usize,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<PositiveRef>) {
    let clustered_total: usize = cluster_members.iter().map(|m| m.len()).sum();
    let families = [
        source_idx.len(),
        clustered_total,
        outlier_members.len(),
    ];
    // equal split across the non-empty families; remainder to the source side
    let nonempty = families.iter().filter(|&&n| n > 0).count().max(1);
    let per = batch_size / nonempty;
    let mut quotas: Vec<usize> = families
        .iter()
        .map(|&n| if n > 0 { per } else { 0 })
        .collect();
    let used: usize = quotas.iter().sum();
    for (qi, &n) in quotas.iter_mut().zip(&families) {
        if n > 0 {
            *qi += batch_size - used;
            break;
        }
    }

    let mut batch = Vec::with_capacity(batch_size);
    let mut positives = Vec::with_capacity(batch_size);
    for _ in 0..quotas[0].min(source_idx.len().max(1) * 8) {
        if source_idx.is_empty() {
            break;
        }
        let pick = rng.gen_range(0..source_idx.len());
        batch.push(source_idx[pick]);
        positives.push(PositiveRef::SourceClass(source_labels[pick]));
    }
    for _ in 0..quotas[1] {
        if clustered_total == 0 {
            break;
        }
        let mut pick = rng.gen_range(0..clustered_total);
        for (cluster, members) in cluster_members.iter().enumerate() {
            if pick < members.len() {
                let t = members[pick];
                batch.push(unlabeled_idx[t]);
                positives.push(PositiveRef::Cluster(cluster));
                break;
            }
            pick -= members.len();
        }
    }
    for _ in 0..quotas[2] {
        if outlier_members.is_empty() {
            break;
        }
        // the pick index doubles as the memory slot: members and memory
        // entries share the ascending-sample-index order
        let slot = rng.gen_range(0..outlier_members.len());
        let t = outlier_members[slot];
        batch.push(unlabeled_idx[t]);
        positives.push(PositiveRef::Outlier(slot));
        debug_assert!(assignment.labels[t].is_none());
    }
    (batch, positives)
}

fn blend_memory(memory: &mut PrototypeMemory, previous: &PrototypeMemory, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(TensorError::BadParameter {
            op: "memory_momentum",
            detail: format!("momentum {m} outside [0, 1)"),
        }
        .into());
    }
    // class count is stable round to round; clusters/outliers are not, so
    // only the class centroids blend
    if memory.class_centroids.len() == previous.class_centroids.len() {
        for (new, old) in memory
            .class_centroids
            .iter_mut()
            .zip(&previous.class_centroids)
        {
            let blended: Vec<f64> = new
                .iter()
                .zip(old)
                .map(|(n, o)| m * o + (1.0 - m) * n)
                .collect();
            *new = normalize(blended)?;
        }
    }
    Ok(())
}

/// Frozen-model features (flattened final maps, unit-norm rows).
pub fn embed_features(
    model: &ProtoModel,
    manifest: &DatasetManifest,
    indices: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(64) {
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, model, false);
        let images = tape.constant(manifest.gather_images(chunk));
        let mut rng = stream(0, "embed-features", &[]);
        let maps = embed(
            &mut tape,
            &bound,
            images,
            &[],
            &BatchContext::default(),
            &mut rng,
        )?;
        let shape = tape.value(maps).shape().to_vec();
        let d: usize = shape[1..].iter().product();
        let flat = tape.reshape(maps, vec![chunk.len(), d])?;
        let normalized = tape.l2_normalize_rows(flat)?;
        let data = tape.value(normalized).data();
        for r in 0..chunk.len() {
            out.push(data[r * d..(r + 1) * d].to_vec());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn blob(rng: &mut Rng, center: &[f64], spread: f64, count: usize) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| c + rng.gen_range(-spread..spread))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn two_tight_blobs_make_two_clusters_without_outliers() {
        let mut rng = stream(1, "blobs", &[]);
        let mut points = blob(&mut rng, &[0.0, 0.0], 0.05, 8);
        points.extend(blob(&mut rng, &[5.0, 5.0], 0.05, 8));
        let out = dbscan(&points, 0.5, 4).unwrap();
        assert_eq!(out.n_clusters, 2);
        assert_eq!(out.n_outliers(), 0);
        for i in 0..8 {
            assert_eq!(out.labels[i], Some(0));
            assert_eq!(out.labels[8 + i], Some(1));
        }
    }

    #[test]
    fn all_isolated_points_are_outliers() {
        let points: Vec<Vec<f64>> = (0..6).map(|i| vec![10.0 * i as f64]).collect();
        let out = dbscan(&points, 1.0, 2).unwrap();
        assert_eq!(out.n_clusters, 0);
        assert!(out.labels.iter().all(|l| l.is_none()));
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(dbscan(&[], 1.0, 2).is_err());
    }

    #[test]
    fn duplicating_a_core_point_leaves_other_labels_unchanged() {
        let mut rng = stream(2, "blobs", &[]);
        let mut points = blob(&mut rng, &[0.0, 0.0], 0.2, 10);
        points.extend(blob(&mut rng, &[4.0, 4.0], 0.2, 10));
        let base = dbscan(&points, 1.0, 4).unwrap();
        let mut with_dup = points.clone();
        with_dup.push(points[0].clone()); // duplicate of a core point, at the end
        let dup = dbscan(&with_dup, 1.0, 4).unwrap();
        assert_eq!(&dup.labels[..points.len()], &base.labels[..]);
        assert_eq!(dup.labels[points.len()], base.labels[0]);
    }

    #[test]
    fn eps_percentile_is_deterministic_and_positive() {
        let mut rng = stream(3, "eps", &[]);
        let points = blob(&mut rng, &[0.0, 0.0, 0.0], 1.0, 50);
        let a = eps_by_percentile(&points, 4, 0.6).unwrap();
        let b = eps_by_percentile(&points, 4, 0.6).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
        // higher percentile, larger radius
        let hi = eps_by_percentile(&points, 4, 0.95).unwrap();
        assert!(hi >= a);
    }

    fn simple_memory(tau: f64) -> PrototypeMemory {
        PrototypeMemory {
            class_centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            cluster_centroids: vec![normalize(vec![1.0, 1.0]).unwrap()],
            outliers: vec![vec![-1.0, 0.0], vec![0.0, -1.0]],
            tau,
            dim: 2,
        }
    }

    #[test]
    fn singleton_memory_loss_is_exactly_zero() {
        let memory = PrototypeMemory {
            class_centroids: vec![vec![1.0, 0.0]],
            cluster_centroids: vec![],
            outliers: vec![],
            tau: 0.05,
            dim: 2,
        };
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 2], normalize(vec![0.3, 0.7]).unwrap()).unwrap());
        let loss = contrastive_loss_batch(&mut tape, f, &[PositiveRef::SourceClass(0)], &memory)
            .unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn equal_similarity_two_entry_loss_is_log_two() {
        let memory = PrototypeMemory {
            class_centroids: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            cluster_centroids: vec![],
            outliers: vec![],
            tau: 0.1,
            dim: 2,
        };
        // f equidistant from both entries
        let f = normalize(vec![1.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let fv = tape.constant(Tensor::new(vec![1, 2], f).unwrap());
        let loss =
            contrastive_loss_batch(&mut tape, fv, &[PositiveRef::SourceClass(0)], &memory)
                .unwrap();
        assert!((tape.value(loss).item() - (2.0f64).ln()).abs() < 1e-15);
    }

    #[test]
    fn stabilized_loss_matches_direct_evaluation() {
        let memory = simple_memory(0.07);
        let mut rng = stream(4, "loss", &[]);
        for _ in 0..20 {
            let f = normalize(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).unwrap();
            let positive = PositiveRef::Cluster(0);
            let mut tape = Tape::new();
            let fv = tape.constant(Tensor::new(vec![1, 2], f.clone()).unwrap());
            let loss = contrastive_loss_batch(&mut tape, fv, &[positive], &memory).unwrap();

            // direct unstabilized evaluation
            let stacked = memory.stacked().unwrap();
            let sims: Vec<f64> = (0..memory.len())
                .map(|r| {
                    (0..2)
                        .map(|d| f[d] * stacked.get(&[r, d]))
                        .sum::<f64>()
                        / memory.tau
                })
                .collect();
            let denom: f64 = sims.iter().map(|s| s.exp()).sum();
            let pos = sims[memory.index_of(positive).unwrap()];
            let direct = -(pos.exp() / denom).ln();
            assert!((tape.value(loss).item() - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_positive_with_multiple_entries_and_invariant_to_entry_order() {
        let memory = simple_memory(0.05);
        let f = normalize(vec![0.6, 0.8]).unwrap();
        let loss_for = |memory: &PrototypeMemory, positive| {
            let mut tape = Tape::new();
            let fv = tape.constant(Tensor::new(vec![1, 2], f.clone()).unwrap());
            let l = contrastive_loss_batch(&mut tape, fv, &[positive], memory).unwrap();
            tape.value(l).item()
        };
        let base = loss_for(&memory, PositiveRef::SourceClass(1));
        assert!(base > 0.0);

        // permute entries within each family and remap the positive
        let permuted = PrototypeMemory {
            class_centroids: vec![
                memory.class_centroids[1].clone(),
                memory.class_centroids[0].clone(),
            ],
            cluster_centroids: memory.cluster_centroids.clone(),
            outliers: vec![memory.outliers[1].clone(), memory.outliers[0].clone()],
            tau: memory.tau,
            dim: 2,
        };
        let same = loss_for(&permuted, PositiveRef::SourceClass(0));
        assert!((base - same).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_checks_under_1e6() {
        let memory = simple_memory(0.05);
        let f = Tensor::new(vec![1, 2], vec![0.9, -0.4]).unwrap();
        let err = crate::tensor::grad_check(
            |tape, vars| {
                let normalized = tape.l2_normalize_rows(vars[0])?;
                match contrastive_loss_batch(
                    tape,
                    normalized,
                    &[PositiveRef::Outlier(1)],
                    &memory,
                ) {
                    Ok(v) => Ok(v),
                    Err(crate::Error::Tensor(e)) => Err(e),
                    Err(_) => unreachable!(),
                }
            },
            &[f],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "contrastive gradient error {err}");
    }

    #[test]
    fn missing_positive_is_rejected() {
        let memory = simple_memory(0.05);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        assert!(
            contrastive_loss_batch(&mut tape, f, &[PositiveRef::Cluster(7)], &memory).is_err()
        );
    }

    #[test]
    fn non_unit_feature_is_rejected() {
        let memory = simple_memory(0.05);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap());
        assert!(
            contrastive_loss_batch(&mut tape, f, &[PositiveRef::SourceClass(0)], &memory)
                .is_err()
        );
    }

    #[test]
    fn memory_entries_are_unit_norm_and_stably_ordered() {
        let source = vec![
            vec![2.0, 0.0],
            vec![4.0, 0.0],
            vec![0.0, 3.0],
        ];
        let labels = vec![0, 0, 1];
        let target = vec![vec![1.0, 1.0], vec![1.1, 0.9], vec![-5.0, 0.0]];
        let assignment = ClusterAssignment {
            labels: vec![Some(0), Some(0), None],
            core: vec![true, true, false],
            eps: 0.5,
            min_pts: 2,
            n_clusters: 1,
        };
        let memory = build_memory(&source, &labels, &target, &assignment, 0.05).unwrap();
        assert_eq!(memory.class_centroids.len(), 2);
        assert_eq!(memory.cluster_centroids.len(), 1);
        assert_eq!(memory.outliers.len(), 1);
        for row in memory
            .class_centroids
            .iter()
            .chain(&memory.cluster_centroids)
            .chain(&memory.outliers)
        {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
        // class 0 centroid = normalize(mean([2,0],[4,0])) = [1, 0]
        assert!((memory.class_centroids[0][0] - 1.0).abs() < 1e-12);
        // permuting within-class order leaves centroids unchanged
        let memory2 = build_memory(
            &[source[1].clone(), source[0].clone(), source[2].clone()],
            &labels,
            &target,
            &assignment,
            0.05,
        )
        .unwrap();
        assert_eq!(memory.class_centroids, memory2.class_centroids);
    }

    #[test]
    fn single_member_cluster_centroid_is_that_feature_normalized() {
        let target = vec![vec![3.0, 4.0]];
        let assignment = ClusterAssignment {
            labels: vec![Some(0)],
            core: vec![true],
            eps: 1.0,
            min_pts: 1,
            n_clusters: 1,
        };
        let memory =
            build_memory(&[vec![1.0, 0.0]], &[0], &target, &assignment, 0.05).unwrap();
        assert!((memory.cluster_centroids[0][0] - 0.6).abs() < 1e-12);
        assert!((memory.cluster_centroids[0][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_feature_is_rejected() {
        let assignment = ClusterAssignment {
            labels: vec![None],
            core: vec![false],
            eps: 1.0,
            min_pts: 1,
            n_clusters: 0,
        };
        assert!(
            build_memory(&[vec![1.0, 0.0]], &[0], &[vec![0.0, 0.0]], &assignment, 0.05).is_err()
        );
    }

    #[test]
    fn tau_scales_logits_but_not_positive_ranking() {
        let memory_lo = simple_memory(0.05);
        let memory_hi = simple_memory(0.5);
        let f = normalize(vec![0.8, 0.3]).unwrap();
        let loss_for = |memory: &PrototypeMemory, positive| {
            let mut tape = Tape::new();
            let fv = tape.constant(Tensor::new(vec![1, 2], f.clone()).unwrap());
            let l = contrastive_loss_batch(&mut tape, fv, &[positive], memory).unwrap();
            tape.value(l).item()
        };
        let candidates = [
            PositiveRef::SourceClass(0),
            PositiveRef::SourceClass(1),
            PositiveRef::Cluster(0),
            PositiveRef::Outlier(0),
            PositiveRef::Outlier(1),
        ];
        let rank = |memory: &PrototypeMemory| {
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|&a, &b| {
                loss_for(memory, candidates[a])
                    .partial_cmp(&loss_for(memory, candidates[b]))
                    .unwrap()
            });
            order
        };
        assert_eq!(rank(&memory_lo), rank(&memory_hi));
    }
}
