use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::nd::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeMode {
    #[default]
    Transductive,
    Inductive,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes_per_epoch: usize,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { n_way: 5, k_shot: 1, queries_per_class: 15, episodes_per_epoch: 100, seed: 0 }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 {
            return Err(Error::Config(format!("n_way must be at least 2, got {}", self.n_way)));
        }
        if self.k_shot < 1 || self.queries_per_class < 1 {
            return Err(Error::Config("k_shot and queries_per_class must be at least 1".into()));
        }
        Ok(())
    }
}

/// RNG for one episode, independent of every other episode index.
pub fn episode_rng(seed: u64, episode_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode_index);
    rng
}

/// One N-way K-shot task. Rows of `support` and `query` are class-major:
/// rows `k*K..(k+1)*K` of the support belong to local class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub mode: EpisodeMode,
    /// Dataset class id of each local class index.
    pub class_ids: Vec<u32>,
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// Dataset record index of each support and query row.
    pub support_records: Vec<usize>,
    pub query_records: Vec<usize>,
}

impl Episode {
    pub fn dim(&self) -> usize {
        self.support.cols()
    }

    pub fn with_mode(mut self, mode: EpisodeMode) -> Self {
        self.mode = mode;
        self
    }

    /// Unlabeled query vectors the flow may look at: all of them when
    /// transductive, none when inductive.
    pub fn unlabeled(&self) -> Option<&Tensor> {
        match self.mode {
            EpisodeMode::Transductive => Some(&self.query),
            EpisodeMode::Inductive => None,
        }
    }

    /// Number of vectors visible to a flow.
    pub fn visible_count(&self) -> usize {
        self.support.rows() + self.unlabeled().map_or(0, Tensor::rows)
    }
}

pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &EmbeddingDataset,
    config: &EpisodeConfig,
    rng: &mut R,
) -> Result<Episode> {
    config.validate()?;
    let (n, k, q) = (config.n_way, config.k_shot, config.queries_per_class);
    let ids = dataset.class_ids();
    if ids.len() < n {
        return Err(Error::Sampling(format!(
            "{n}-way episode from a {} split with {} classes",
            dataset.split(),
            ids.len()
        )));
    }
    let chosen: Vec<u32> = index::sample(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect();
    let dim = dataset.dim();
    let mut support = Vec::with_capacity(n * k * dim);
    let mut query = Vec::with_capacity(n * q * dim);
    let mut support_records = Vec::with_capacity(n * k);
    let mut query_records = Vec::with_capacity(n * q);
    for &class in &chosen {
        let records = dataset.class_records(class);
        if records.len() < k + q {
            return Err(Error::Sampling(format!(
                "class {class} has {} samples, episode needs {}",
                records.len(),
                k + q
            )));
        }
        let picks = index::sample(rng, records.len(), k + q);
        for (j, p) in picks.into_iter().enumerate() {
            let r = records[p];
            let v = dataset.record(r).1;
            if j < k {
                support.extend_from_slice(v);
                support_records.push(r);
            } else {
                query.extend_from_slice(v);
                query_records.push(r);
            }
        }
    }
    Ok(Episode {
        n_way: n,
        k_shot: k,
        queries_per_class: q,
        mode: EpisodeMode::Transductive,
        class_ids: chosen,
        support: Tensor::from_parts(vec![n * k, dim], support),
        support_labels: (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect(),
        query: Tensor::from_parts(vec![n * q, dim], query),
        query_labels: (0..n).flat_map(|c| std::iter::repeat_n(c, q)).collect(),
        support_records,
        query_records,
    })
}
