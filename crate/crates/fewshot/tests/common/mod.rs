//! Shared oracles for the integration and acceptance suites. Everything here
//! is deliberately naive and independent of the production code paths it
//! checks.

#![allow(dead_code)]

use fewshot::data::{sample_episode_with, DatasetManifest, SampleFilter};
use fewshot::rng::stream;

/// Naive DBSCAN by fixpoint density-reachability, using the same
/// deterministic rule as the production implementation: neighborhoods
/// include the point itself (<= eps), core components are numbered by their
/// smallest core index, border points take the smallest adjacent cluster id.
pub fn naive_dbscan(points: &[Vec<f64>], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let eps2 = eps * eps;
    let within = |i: usize, j: usize| dist2(&points[i], &points[j]) <= eps2;
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| within(i, j)).count() >= min_pts)
        .collect();

    // transitive closure over core-core adjacency, no queue, pure sweeps
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next_cluster = 0usize;
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next_cluster);
        loop {
            let mut changed = false;
            for i in 0..n {
                if !core[i] || labels[i] != Some(next_cluster) {
                    continue;
                }
                for j in 0..n {
                    if core[j] && labels[j].is_none() && within(i, j) {
                        labels[j] = Some(next_cluster);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        next_cluster += 1;
    }
    // border points: smallest cluster id among core neighbors
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<usize> = None;
        for j in 0..n {
            if core[j] && within(i, j) {
                let c = labels[j].expect("cores are labeled");
                best = Some(best.map_or(c, |b: usize| b.min(c)));
            }
        }
        labels[i] = best;
    }
    labels
}

/// True when two clusterings induce the same partition of non-outliers and
/// agree on which points are outliers.
pub fn partitions_match(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let mut forward: std::collections::HashMap<usize, usize> = Default::default();
    let mut backward: std::collections::HashMap<usize, usize> = Default::default();
    for (x, y) in a.iter().zip(b) {
        match (x, y) {
            (None, None) => {}
            (Some(ca), Some(cb)) => {
                if *forward.entry(*ca).or_insert(*cb) != *cb {
                    return false;
                }
                if *backward.entry(*cb).or_insert(*ca) != *ca {
                    return false;
                }
            }
            _ => return false,
        }
    }
    true
}

/// Raw-pixel nearest-centroid few-shot accuracy (the protonet-free oracle).
pub fn raw_centroid_accuracy(
    manifest: &DatasetManifest,
    support_filter: SampleFilter,
    query_filter: SampleFilter,
    episodes: u64,
    seed: u64,
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for e in 0..episodes {
        let mut rng = stream(seed, "ncc-episode", &[e]);
        let ep = sample_episode_with(manifest, support_filter, query_filter, 5, 5, 15, &mut rng)
            .expect("episode must be drawable");
        let dim = manifest.samples[ep.support[0].0].image.numel();
        let mut centroids = vec![vec![0.0f64; dim]; ep.n_way];
        let mut counts = vec![0usize; ep.n_way];
        for &(idx, label) in &ep.support {
            for (c, v) in centroids[label]
                .iter_mut()
                .zip(manifest.samples[idx].image.data())
            {
                *c += v;
            }
            counts[label] += 1;
        }
        for (centroid, count) in centroids.iter_mut().zip(&counts) {
            for v in centroid.iter_mut() {
                *v /= *count as f64;
            }
        }
        for &(idx, label) in &ep.query {
            let img = manifest.samples[idx].image.data();
            let mut best = (f64::INFINITY, 0usize);
            for (k, centroid) in centroids.iter().enumerate() {
                let d: f64 = centroid
                    .iter()
                    .zip(img)
                    .map(|(c, v)| (c - v) * (c - v))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 == label {
                correct += 1;
            }
            total += 1;
        }
    }
    correct as f64 / total as f64
}
