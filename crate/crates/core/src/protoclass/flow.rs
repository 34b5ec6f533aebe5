use super::{one_hot, row_norm, softmax_rows, ClassifierConfig, PrototypeState};
use crate::error::{Error, Result};
use crate::nd::Tensor;

/// Scaling of the closed-form flow.
///
/// `Absorbed` drops the constant `2 * gamma` factor; `Exact` keeps it, making
/// the flow the negative gradient of [`euclidean_cross_entropy`] with the
/// sphere radii held fixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    #[default]
    Absorbed,
    Exact,
}

/// Euclidean distance between two points of norm `r` whose cosine is `cos_ab`.
pub fn euclid_from_cos(cos_ab: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::domain("euclid_from_cos", format!("radius {r} must be positive")));
    }
    if !cos_ab.is_finite() || cos_ab.abs() > 1.0 + 1e-12 {
        return Err(Error::domain("euclid_from_cos", format!("cosine {cos_ab} outside [-1, 1]")));
    }
    let c = cos_ab.clamp(-1.0, 1.0);
    Ok((2.0 * r * r - 2.0 * r * r * c).max(0.0).sqrt())
}

/// Every feature projected onto every class sphere: row `i * N + k` is
/// `f_i * radii[k] / |f_i|`.
pub fn sphere_features(features: &Tensor, radii: &[f64]) -> Result<Tensor> {
    let (m, d, n) = (features.rows(), features.cols(), radii.len());
    let mut out = Vec::with_capacity(m * n * d);
    for i in 0..m {
        let f = features.row(i);
        let norm = row_norm(f);
        if norm == 0.0 {
            return Err(Error::domain("sphere_features", format!("sample {i} has zero norm")));
        }
        for &r in radii {
            out.extend(f.iter().map(|v| v * r / norm));
        }
    }
    Ok(Tensor::from_parts(vec![m * n, d], out))
}

fn check_shapes(prototypes: &Tensor, radii: &[f64], features: &Tensor) -> Result<()> {
    if prototypes.rank() != 2 || prototypes.cols() != features.cols() || radii.len() != prototypes.rows() {
        return Err(Error::dim(
            "euclidean classifier",
            format!(
                "prototypes {:?}, {} radii, features {:?}",
                prototypes.shape(),
                radii.len(),
                features.shape()
            ),
        ));
    }
    Ok(())
}

/// `softmax_k(-gamma * |f~_ik - p_k|^2)`, shape `M x N`.
pub fn euclidean_probs(prototypes: &Tensor, radii: &[f64], features: &Tensor, gamma: f64) -> Result<Tensor> {
    check_shapes(prototypes, radii, features)?;
    let mut logits = euclidean_logits(prototypes, &sphere_features(features, radii)?, gamma);
    softmax_rows(&mut logits);
    Ok(logits)
}

fn euclidean_logits(prototypes: &Tensor, sphere: &Tensor, gamma: f64) -> Tensor {
    let n = prototypes.rows();
    let m = sphere.rows() / n;
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for k in 0..n {
            let sq: f64 = sphere
                .row(i * n + k)
                .iter()
                .zip(prototypes.row(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            out.push(-gamma * sq);
        }
    }
    Tensor::from_parts(vec![m, n], out)
}

/// Mean NLL of the Euclidean-form classifier at fixed sphere radii.
pub fn euclidean_cross_entropy(
    prototypes: &Tensor,
    radii: &[f64],
    features: &Tensor,
    labels: &[usize],
    gamma: f64,
) -> Result<f64> {
    check_shapes(prototypes, radii, features)?;
    if labels.is_empty() || labels.len() != features.rows() {
        return Err(Error::dim("euclidean_cross_entropy", format!("{} labels", labels.len())));
    }
    let logits = euclidean_logits(prototypes, &sphere_features(features, radii)?, gamma);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok(total / labels.len() as f64)
}

/// `dp_k/dt = c/M * sum_i (y_ik - P_ik) (f~_ik - p_k)` with `c = 1`
/// (absorbed form) or `c = 2 gamma` (exact form); `targets` is `M x N`.
pub fn analytic_flow_with_targets(
    state: &PrototypeState,
    features: &Tensor,
    targets: &Tensor,
    config: &ClassifierConfig,
    mode: FlowMode,
) -> Result<Tensor> {
    let radii = state.radii();
    let p = &state.prototypes;
    check_shapes(p, &radii, features)?;
    let (m, n, d) = (features.rows(), p.rows(), p.cols());
    if m == 0 {
        return Err(Error::Validation("analytic flow over an empty batch".into()));
    }
    if targets.shape() != [m, n] {
        return Err(Error::dim("analytic_flow", format!("targets {:?}, expected [{m}, {n}]", targets.shape())));
    }
    let sphere = sphere_features(features, &radii)?;
    let mut probs = euclidean_logits(p, &sphere, config.gamma);
    softmax_rows(&mut probs);
    let scale = match mode {
        FlowMode::Absorbed => 1.0,
        FlowMode::Exact => 2.0 * config.gamma,
    } / m as f64;
    let mut flow = vec![0.0; n * d];
    for i in 0..m {
        for k in 0..n {
            let c = targets.get(i, k) - probs.get(i, k);
            let dst = &mut flow[k * d..(k + 1) * d];
            for ((o, f), pk) in dst.iter_mut().zip(sphere.row(i * n + k)).zip(p.row(k)) {
                *o += c * (f - pk);
            }
        }
    }
    flow.iter_mut().for_each(|v| *v *= scale);
    Ok(Tensor::from_parts(vec![n, d], flow))
}

pub fn analytic_flow(
    state: &PrototypeState,
    features: &Tensor,
    labels: &[usize],
    config: &ClassifierConfig,
    mode: FlowMode,
) -> Result<Tensor> {
    let n = state.n_way();
    if labels.len() != features.rows() {
        return Err(Error::Validation(format!(
            "{} samples but {} labels; every sample must be labeled",
            features.rows(),
            labels.len()
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Validation(format!("label {y} outside 0..{n}")));
    }
    analytic_flow_with_targets(state, features, &one_hot(labels, n), config, mode)
}

/// Absorbed-form flow over the support set alone.
pub fn mean_gradient(
    state: &PrototypeState,
    support: &Tensor,
    labels: &[usize],
    config: &ClassifierConfig,
) -> Result<Tensor> {
    analytic_flow(state, support, labels, config, FlowMode::Absorbed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn euclid_examples() {
        assert_eq!(euclid_from_cos(1.0, 3.0).unwrap(), 0.0);
        assert!((euclid_from_cos(-1.0, 1.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((euclid_from_cos(0.0, 1.0).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(euclid_from_cos(1.0 + 1e-13, 1.0).is_ok());
        assert!(euclid_from_cos(1.0 + 1e-9, 1.0).is_err());
        assert!(euclid_from_cos(0.5, 0.0).is_err());
    }

    #[test]
    fn single_class_flow_vanishes() {
        let s = PrototypeState::new(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap(), 0.0).unwrap();
        let f = Tensor::from_rows(&[vec![-3.0, 0.5]]).unwrap();
        let flow = analytic_flow(&s, &f, &[0], &ClassifierConfig::default(), FlowMode::Absorbed).unwrap();
        assert_eq!(flow.data(), &[0.0, 0.0]);
    }

    #[test]
    fn sample_at_prototype_contributes_nothing_to_its_class() {
        let s = PrototypeState::new(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap(), 0.0).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let flow = analytic_flow(&s, &f, &[1], &ClassifierConfig::default(), FlowMode::Absorbed).unwrap();
        assert_eq!(flow.row(0), &[0.0, 0.0]);
        assert!(flow.row(1).iter().any(|v| *v != 0.0));
    }

    #[test]
    fn labels_must_cover_every_sample() {
        let s = PrototypeState::new(Tensor::eye(2), 0.0).unwrap();
        let f = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let cfg = ClassifierConfig::default();
        assert!(analytic_flow(&s, &f, &[0], &cfg, FlowMode::Absorbed).is_err());
        assert!(analytic_flow(&s, &f, &[0, 2], &cfg, FlowMode::Absorbed).is_err());
    }
}
