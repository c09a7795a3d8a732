//! Dataset representation, meta-splits, and N-way K-shot episode sampling.

mod generator;
mod io;

pub use generator::{generate_synthetic, DomainStyle, GeneratorConfig};
pub use io::{load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::seq::index::sample as index_sample;
use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(String),
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("dataset file version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset checksum mismatch (file truncated or corrupted)")]
    ChecksumFailure,
    #[error("episode needs {needed} classes but the subset has only {available}")]
    InsufficientClasses { needed: usize, available: usize },
    #[error("class {class} has {available} usable samples, episode needs {needed}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

/// Meta-split a class belongs to. Splits partition the class set, so the
/// three label spaces are disjoint by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Split::Base => 0,
            Split::Val => 1,
            Split::Novel => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Base),
            1 => Ok(Split::Val),
            2 => Ok(Split::Novel),
            other => Err(DataError::Format(format!("unknown split tag {other}"))),
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "base" => Some(Split::Base),
            "val" => Some(Split::Val),
            "novel" => Some(Split::Novel),
            _ => None,
        }
    }
}

/// Part a sample plays in the cross-domain protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    LabeledSource,
    UnlabeledTarget,
    TestTarget,
}

impl Role {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Role::LabeledSource => 0,
            Role::UnlabeledTarget => 1,
            Role::TestTarget => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Role::LabeledSource),
            1 => Ok(Role::UnlabeledTarget),
            2 => Ok(Role::TestTarget),
            other => Err(DataError::Format(format!("unknown role tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// Image as a C×H×W tensor with values in [0, 1].
    pub image: Tensor,
    pub class_id: usize,
    pub domain_id: usize,
    pub role: Role,
}

/// In-memory dataset: samples plus the class/domain/split bookkeeping.
/// Read-only after creation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub samples: Vec<SampleRecord>,
    pub class_names: Vec<String>,
    pub domain_names: Vec<String>,
    /// Split of each class, indexed by `class_id`.
    pub split_map: Vec<Split>,
}

/// Restriction of a manifest to one split / domain / role (all optional).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleFilter {
    pub split: Option<Split>,
    pub domain: Option<usize>,
    pub role: Option<Role>,
}

impl SampleFilter {
    pub fn split(split: Split) -> Self {
        Self {
            split: Some(split),
            ..Default::default()
        }
    }

    pub fn split_domain(split: Split, domain: usize) -> Self {
        Self {
            split: Some(split),
            domain: Some(domain),
            role: None,
        }
    }

    pub fn role(role: Role) -> Self {
        Self {
            role: Some(role),
            ..Default::default()
        }
    }
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_names.len()
    }

    /// (C, H, W) of the images; panics on an empty manifest.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.samples[0].image.shape();
        (s[0], s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        if self.split_map.len() != self.class_names.len() {
            return Err(DataError::Invalid(format!(
                "split_map covers {} classes, manifest has {}",
                self.split_map.len(),
                self.class_names.len()
            )));
        }
        let shape = self.samples.first().map(|s| s.image.shape().to_vec());
        for (i, s) in self.samples.iter().enumerate() {
            if s.class_id >= self.class_names.len() {
                return Err(DataError::Invalid(format!(
                    "sample {i} references class {} of {}",
                    s.class_id,
                    self.class_names.len()
                )));
            }
            if s.domain_id >= self.domain_names.len() {
                return Err(DataError::Invalid(format!(
                    "sample {i} references domain {} of {}",
                    s.domain_id,
                    self.domain_names.len()
                )));
            }
            if Some(s.image.shape().to_vec()) != shape {
                return Err(DataError::Invalid(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    s.image.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn matches(&self, idx: usize, filter: SampleFilter) -> bool {
        let s = &self.samples[idx];
        filter
            .split
            .is_none_or(|sp| self.split_map[s.class_id] == sp)
            && filter.domain.is_none_or(|d| s.domain_id == d)
            && filter.role.is_none_or(|r| s.role == r)
    }

    /// Sample indices matching the filter, in manifest order.
    pub fn select(&self, filter: SampleFilter) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.matches(i, filter))
            .collect()
    }

    /// Class ids that have at least one sample matching the filter, ascending.
    pub fn classes_in(&self, filter: SampleFilter) -> Vec<usize> {
        let mut present = vec![false; self.n_classes()];
        for &i in &self.select(filter) {
            present[self.samples[i].class_id] = true;
        }
        (0..self.n_classes()).filter(|&c| present[c]).collect()
    }

    /// Stack the given samples into one (B, C, H, W) batch tensor.
    pub fn gather_images(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
        }
        Tensor::new(vec![indices.len(), c, h, w], data).expect("sample shapes validated")
    }

    /// Union of two manifests over the same class/domain tables (used to
    /// train on original plus stylized data).
    pub fn merged_with(&self, other: &DatasetManifest) -> Result<DatasetManifest> {
        if self.class_names != other.class_names || self.split_map != other.split_map {
            return Err(DataError::Invalid(
                "cannot merge manifests with different class tables".into(),
            ));
        }
        if self.domain_names != other.domain_names {
            return Err(DataError::Invalid(
                "cannot merge manifests with different domain tables".into(),
            ));
        }
        let mut merged = self.clone();
        merged.samples.extend(other.samples.iter().cloned());
        Ok(merged)
    }
}

/// One N-way K-shot task. Sample indices refer back to the manifest;
/// episode-local labels run 0..n_way.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Episode-local label -> global class id (a bijection onto the chosen classes).
    pub class_remap: Vec<usize>,
}

/// Draw an episode with support and query both taken from `filter`.
pub fn sample_episode(
    manifest: &DatasetManifest,
    filter: SampleFilter,
    n_way: usize,
    k_shot: usize,
    q_queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    sample_episode_with(manifest, filter, filter, n_way, k_shot, q_queries, rng)
}

/// Draw an episode whose support and query sets come from different subsets
/// (e.g. support from the source domain, queries from the target domain).
/// Classes are drawn without replacement from those usable under both
/// filters; support and query sample identities never overlap.
pub fn sample_episode_with(
    manifest: &DatasetManifest,
    support_filter: SampleFilter,
    query_filter: SampleFilter,
    n_way: usize,
    k_shot: usize,
    q_queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    let n_classes = manifest.n_classes();
    let mut support_pool: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in &manifest.select(support_filter) {
        support_pool[manifest.samples[i].class_id].push(i);
    }
    let mut query_pool: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for &i in &manifest.select(query_filter) {
        query_pool[manifest.samples[i].class_id].push(i);
    }

    let eligible: Vec<usize> = (0..n_classes)
        .filter(|&c| !support_pool[c].is_empty() && !query_pool[c].is_empty())
        .collect();
    if eligible.len() < n_way {
        return Err(DataError::InsufficientClasses {
            needed: n_way,
            available: eligible.len(),
        });
    }

    let chosen: Vec<usize> = index_sample(rng, eligible.len(), n_way)
        .iter()
        .map(|i| eligible[i])
        .collect();

    let same_pools = support_filter == query_filter;
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * q_queries);
    for (label, &class) in chosen.iter().enumerate() {
        if same_pools {
            let pool = &support_pool[class];
            let needed = k_shot + q_queries;
            if pool.len() < needed {
                return Err(DataError::InsufficientSamples {
                    class,
                    available: pool.len(),
                    needed,
                });
            }
            let picked: Vec<usize> = index_sample(rng, pool.len(), needed)
                .iter()
                .map(|i| pool[i])
                .collect();
            support.extend(picked[..k_shot].iter().map(|&s| (s, label)));
            query.extend(picked[k_shot..].iter().map(|&s| (s, label)));
        } else {
            let spool = &support_pool[class];
            if spool.len() < k_shot {
                return Err(DataError::InsufficientSamples {
                    class,
                    available: spool.len(),
                    needed: k_shot,
                });
            }
            let s_picked: Vec<usize> = index_sample(rng, spool.len(), k_shot)
                .iter()
                .map(|i| spool[i])
                .collect();
            // keep identities disjoint even when the filters overlap
            let qpool: Vec<usize> = query_pool[class]
                .iter()
                .copied()
                .filter(|i| !s_picked.contains(i))
                .collect();
            if qpool.len() < q_queries {
                return Err(DataError::InsufficientSamples {
                    class,
                    available: qpool.len(),
                    needed: q_queries,
                });
            }
            let q_picked: Vec<usize> = index_sample(rng, qpool.len(), q_queries)
                .iter()
                .map(|i| qpool[i])
                .collect();
            support.extend(s_picked.iter().map(|&s| (s, label)));
            query.extend(q_picked.iter().map(|&s| (s, label)));
        }
    }

    Ok(Episode {
        support,
        query,
        n_way,
        k_shot,
        q_queries,
        class_remap: chosen,
    })
}
