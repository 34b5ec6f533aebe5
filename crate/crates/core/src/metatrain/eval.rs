use rayon::prelude::*;

use super::model::Model;
use super::train::final_prototypes;
use crate::episodes::{episode_rng, sample_episode, EmbeddingDataset, EpisodeConfig, EpisodeMode};
use crate::error::Result;
use crate::gradflow::FlowInput;
use crate::nd::Tensor;
use crate::protoclass::{accuracy, analytic_flow, classify_batch, init_prototypes, mean_gradient, FlowMode, PrototypeState};

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
    pub episodes: usize,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let (mean, ci95) = mean_ci95(&accuracies);
        Self { mean_accuracy: mean, ci95, episodes: accuracies.len(), accuracies }
    }

    /// True if the two 95% intervals do not intersect.
    pub fn separated_from(&self, other: &EvalReport) -> bool {
        let (lo, hi) = (self.mean_accuracy - self.ci95, self.mean_accuracy + self.ci95);
        let (olo, ohi) = (other.mean_accuracy - other.ci95, other.mean_accuracy + other.ci95);
        lo > ohi || olo > hi
    }
}

/// Mean and `1.96 * s / sqrt(n)` with the sample standard deviation.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Settings shared by evaluation and the diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episode: EpisodeConfig,
    pub mode: EpisodeMode,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(episode: EpisodeConfig, mode: EpisodeMode, episodes: usize, seed: u64) -> Self {
        Self { episode, mode, episodes, seed }
    }
}

fn per_episode<T: Send>(
    dataset: &EmbeddingDataset,
    config: &EvalConfig,
    f: impl Fn(&crate::episodes::Episode) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    (0..config.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = sample_episode(dataset, &config.episode, &mut episode_rng(config.seed, i))?.with_mode(config.mode);
            f(&ep)
        })
        .collect()
}

/// Per-episode query accuracy of the final prototypes. Episodes depend
/// only on `(seed, index)`, so two models evaluated with the same config
/// see identical episodes.
pub fn evaluate(dataset: &EmbeddingDataset, model: &Model, config: &EvalConfig) -> Result<EvalReport> {
    model.check_compatible(config.episode.n_way, dataset.dim())?;
    let acc = per_episode(dataset, config, |ep| {
        let state = PrototypeState::new(final_prototypes(model, ep)?, model.solver.integral_time)?;
        let probs = classify_batch(&state, &ep.query, &model.classifier)?;
        Ok(accuracy(&probs, &ep.query_labels))
    })?;
    Ok(EvalReport::from_accuracies(acc))
}

/// Nearest-support-mean accuracy on the same episodes as [`evaluate`].
pub fn evaluate_baseline(dataset: &EmbeddingDataset, config: &EvalConfig) -> Result<EvalReport> {
    let classifier = crate::protoclass::ClassifierConfig::default();
    let acc = per_episode(dataset, config, |ep| {
        let probs = classify_batch(&init_prototypes(ep)?, &ep.query, &classifier)?;
        Ok(accuracy(&probs, &ep.query_labels))
    })?;
    Ok(EvalReport::from_accuracies(acc))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean over classes of the row-wise cosine similarity.
fn mean_row_cosine(a: &Tensor, b: &Tensor) -> f64 {
    (0..a.rows()).map(|k| cosine(a.row(k), b.row(k))).sum::<f64>() / a.rows() as f64
}

/// All-sample class means of an episode's classes, in local order.
fn real_prototypes(dataset: &EmbeddingDataset, class_ids: &[u32]) -> Tensor {
    let rows: Vec<Vec<f64>> = class_ids.iter().map(|&c| dataset.class_mean(c).expect("sampled class")).collect();
    Tensor::from_rows(&rows).expect("equal dims")
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct BiasReport {
    /// Similarity of the initial estimate (support means / support gradient).
    pub initial: f64,
    /// Similarity of the model's estimate (final prototypes / inferred flow).
    pub model: f64,
    pub episodes: usize,
}

/// Cosine similarity of `p(0)` and `p(T)` to the all-sample class means.
pub fn prototype_bias(dataset: &EmbeddingDataset, model: &Model, config: &EvalConfig) -> Result<BiasReport> {
    model.check_compatible(config.episode.n_way, dataset.dim())?;
    let pairs = per_episode(dataset, config, |ep| {
        let real = real_prototypes(dataset, &ep.class_ids);
        let init = init_prototypes(ep)?.prototypes;
        let last = final_prototypes(model, ep)?;
        Ok((mean_row_cosine(&init, &real), mean_row_cosine(&last, &real)))
    })?;
    Ok(summarize(pairs))
}

/// Cosine similarity of the support-set gradient and of the model's flow at
/// `t = 0` to the closed-form flow over every sample of the episode classes.
pub fn gradient_bias(dataset: &EmbeddingDataset, model: &Model, config: &EvalConfig) -> Result<BiasReport> {
    model.check_compatible(config.episode.n_way, dataset.dim())?;
    let pairs = per_episode(dataset, config, |ep| {
        let state = init_prototypes(ep)?;
        let (feats, labels) = population(dataset, &ep.class_ids);
        let real = analytic_flow(&state, &feats, &labels, &model.classifier, FlowMode::Absorbed)?;
        let support = mean_gradient(&state, &ep.support, &ep.support_labels, &model.classifier)?;
        let inferred = model.flow.evaluate(&FlowInput::from_episode(ep), &state, &model.classifier)?;
        Ok((mean_row_cosine(&support, &real), mean_row_cosine(&inferred, &real)))
    })?;
    Ok(summarize(pairs))
}

fn population(dataset: &EmbeddingDataset, class_ids: &[u32]) -> (Tensor, Vec<usize>) {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (local, &c) in class_ids.iter().enumerate() {
        let m = dataset.class_matrix(c);
        data.extend_from_slice(m.data());
        labels.extend(std::iter::repeat_n(local, m.rows()));
    }
    (Tensor::new(vec![labels.len(), dataset.dim()], data).expect("finite dataset"), labels)
}

fn summarize(pairs: Vec<(f64, f64)>) -> BiasReport {
    let n = pairs.len();
    let (a, b) = pairs.iter().fold((0.0, 0.0), |(x, y), (p, q)| (x + p, y + q));
    BiasReport { initial: a / n as f64, model: b / n as f64, episodes: n }
}
