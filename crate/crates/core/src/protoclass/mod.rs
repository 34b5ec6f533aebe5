//! Prototype initialization, the scaled-cosine classifier and the
//! closed-form prototype gradient flow.

mod flow;
mod graph;

pub use flow::{
    analytic_flow, analytic_flow_with_targets, euclid_from_cos, euclidean_cross_entropy,
    euclidean_probs, mean_gradient, sphere_features, FlowMode,
};
pub use graph::{cosine_cross_entropy_var, cosine_log_probs_var, difference_flow_var, euclidean_cross_entropy_var};

use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::nd::Tensor;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub gamma: f64,
    pub radius: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { gamma: 10.0, radius: 1.0 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be finite and positive, got {}", self.gamma)));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Config(format!("radius must be positive, got {}", self.radius)));
        }
        Ok(())
    }
}

/// Prototype matrix `p(t)` (one row per class) at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeState {
    pub prototypes: Tensor,
    pub time: f64,
}

impl PrototypeState {
    pub fn new(prototypes: Tensor, time: f64) -> Result<Self> {
        if prototypes.rank() != 2 {
            return Err(Error::dim("prototypes", format!("expected N x d, got {:?}", prototypes.shape())));
        }
        if let Some(k) = (0..prototypes.rows()).find(|&k| row_norm(prototypes.row(k)) == 0.0) {
            return Err(Error::domain("prototypes", format!("prototype {k} is the zero vector")));
        }
        Ok(Self { prototypes, time })
    }

    pub fn n_way(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn radii(&self) -> Vec<f64> {
        (0..self.n_way()).map(|k| row_norm(self.prototypes.row(k))).collect()
    }
}

pub(crate) fn row_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-class mean of `features` rows. Errors if a class has no rows.
pub fn class_means(features: &Tensor, labels: &[usize], n_way: usize) -> Result<Tensor> {
    if features.rows() != labels.len() {
        return Err(Error::dim("class_means", format!("{} rows, {} labels", features.rows(), labels.len())));
    }
    let d = features.cols();
    let mut sums = vec![0.0; n_way * d];
    let mut counts = vec![0usize; n_way];
    for (i, &c) in labels.iter().enumerate() {
        if c >= n_way {
            return Err(Error::Validation(format!("label {c} outside 0..{n_way}")));
        }
        counts[c] += 1;
        sums[c * d..(c + 1) * d].iter_mut().zip(features.row(i)).for_each(|(s, v)| *s += v);
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!("class {c} has no support samples")));
    }
    for (c, &n) in counts.iter().enumerate() {
        sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(Tensor::from_parts(vec![n_way, d], sums))
}

/// Support-set means at `t = 0`.
pub fn init_prototypes(episode: &Episode) -> Result<PrototypeState> {
    let means = class_means(&episode.support, &episode.support_labels, episode.n_way)?;
    PrototypeState::new(means, 0.0)
}

/// `gamma * cos(x_i, p_k)` for every row `x_i`, shape `M x N`.
pub fn cosine_logits(prototypes: &Tensor, features: &Tensor, gamma: f64) -> Result<Tensor> {
    if prototypes.cols() != features.cols() {
        return Err(Error::dim(
            "cosine_logits",
            format!("prototypes {:?} vs features {:?}", prototypes.shape(), features.shape()),
        ));
    }
    let n = prototypes.rows();
    let pn: Vec<f64> = (0..n).map(|k| row_norm(prototypes.row(k))).collect();
    if let Some(k) = pn.iter().position(|&v| v == 0.0) {
        return Err(Error::domain("classify", format!("prototype {k} has zero norm")));
    }
    let mut out = Vec::with_capacity(features.rows() * n);
    for i in 0..features.rows() {
        let x = features.row(i);
        let xn = row_norm(x);
        if xn == 0.0 {
            return Err(Error::domain("classify", format!("sample {i} has zero norm")));
        }
        for k in 0..n {
            let dot: f64 = x.iter().zip(prototypes.row(k)).map(|(a, b)| a * b).sum();
            out.push(gamma * dot / (xn * pn[k]));
        }
    }
    Ok(Tensor::from_parts(vec![features.rows(), n], out))
}

pub(crate) fn softmax_rows(logits: &mut Tensor) {
    let cols = logits.cols();
    for row in logits.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

/// Class probabilities for every row of `features`, shape `M x N`.
pub fn classify_batch(state: &PrototypeState, features: &Tensor, config: &ClassifierConfig) -> Result<Tensor> {
    let mut p = cosine_logits(&state.prototypes, features, config.gamma)?;
    softmax_rows(&mut p);
    Ok(p)
}

pub fn classify(state: &PrototypeState, x: &[f64], config: &ClassifierConfig) -> Result<Vec<f64>> {
    let x = Tensor::from_parts(vec![1, x.len()], x.to_vec());
    Ok(classify_batch(state, &x, config)?.into_data())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels.iter().enumerate().filter(|&(i, &y)| argmax(probs.row(i)) == y).count();
    hits as f64 / labels.len() as f64
}

/// Mean negative log-likelihood of the labels under the cosine classifier.
pub fn cross_entropy(
    state: &PrototypeState,
    features: &Tensor,
    labels: &[usize],
    config: &ClassifierConfig,
) -> Result<f64> {
    if labels.is_empty() || labels.len() != features.rows() {
        return Err(Error::dim("cross_entropy", format!("{} rows, {} labels", features.rows(), labels.len())));
    }
    let logits = cosine_logits(&state.prototypes, features, config.gamma)?;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        if y >= row.len() {
            return Err(Error::Validation(format!("label {y} outside 0..{}", row.len())));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

pub fn one_hot(labels: &[usize], n_way: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![labels.len(), n_way]);
    for (i, &c) in labels.iter().enumerate() {
        t.data_mut()[i * n_way + c] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(rows: &[Vec<f64>]) -> PrototypeState {
        PrototypeState::new(Tensor::from_rows(rows).unwrap(), 0.0).unwrap()
    }

    #[test]
    fn means_of_two_points() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![5.0, 1.0]]).unwrap();
        let m = class_means(&f, &[0, 0, 1], 2).unwrap();
        assert_eq!(m.data(), &[1.0, 1.0, 5.0, 1.0]);
        assert!(class_means(&f, &[0, 0, 0], 2).is_err());
    }

    #[test]
    fn zero_prototype_rejected() {
        assert!(PrototypeState::new(Tensor::zeros(vec![2, 2]), 0.0).is_err());
    }

    #[test]
    fn classify_examples() {
        let cfg = ClassifierConfig::default();
        let s = state(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]]);
        let p = classify(&s, &[1.0, 0.0], &cfg).unwrap();
        assert_eq!(argmax(&p), 0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let flat = ClassifierConfig { gamma: 1e-12, ..cfg.clone() };
        for v in classify(&s, &[0.3, 0.7], &flat).unwrap() {
            assert!((v - 1.0 / 3.0).abs() < 1e-9);
        }

        let sym = state(&[vec![1.0, 1.0], vec![1.0, -1.0]]);
        let p = classify(&sym, &[1.0, 0.0], &cfg).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!(classify(&sym, &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.3, 0.3]), 1);
    }

    #[test]
    fn uniform_predictions_give_ln_n() {
        let cfg = ClassifierConfig { gamma: 1e-14, ..Default::default() };
        let s = state(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let f = Tensor::from_rows(&[vec![0.2, 0.9], vec![-0.4, 0.1]]).unwrap();
        let l = cross_entropy(&s, &f, &[0, 2], &cfg).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn saturated_loss_is_small() {
        let cfg = ClassifierConfig { gamma: 1e4, ..Default::default() };
        let s = state(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let f = Tensor::from_rows(&[vec![2.0, 0.1], vec![0.1, 3.0]]).unwrap();
        assert!(cross_entropy(&s, &f, &[0, 1], &cfg).unwrap() <= 1e-3);
    }
}
