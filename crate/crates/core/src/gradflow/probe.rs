use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{E2GradNetParams, Flow, FlowInput, FlowKind, GradNetConfig, GradNetParams};
use crate::error::{Error, Result};
use crate::nd::Tensor;
use crate::protoclass::{ClassifierConfig, PrototypeState};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig {
    pub kind: FlowKind,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub dim: usize,
    /// GradNet inference modules.
    pub modules: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            kind: FlowKind::E2GradNet,
            n_way: 5,
            k_shot: 5,
            queries_per_class: 15,
            dim: 64,
            modules: 4,
            repeats: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ProbeStats {
    pub median_secs: f64,
    pub min_secs: f64,
    pub max_secs: f64,
    /// Visible vectors per evaluation.
    pub samples: usize,
}

/// Median wall time of one transductive flow evaluation on random data.
pub fn flow_complexity_probe(config: &ProbeConfig) -> Result<ProbeStats> {
    if config.repeats < 3 {
        return Err(Error::Config("the probe needs at least 3 repeats".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (n, k, q, d) = (config.n_way, config.k_shot, config.queries_per_class, config.dim);
    let mut random = |rows: usize| {
        let data = (0..rows * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![rows, d], data).expect("finite")
    };
    let support = random(n * k);
    let query = random(n * q);
    let protos = random(n);
    let labels = (0..n).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let input = FlowInput::labeled(support, labels, n)?.with_unlabeled(query)?;
    let state = PrototypeState::new(protos, 0.0)?;
    let flow = match config.kind {
        FlowKind::Zero => Flow::Zero,
        FlowKind::MeanGrad => Flow::MeanGrad,
        FlowKind::E2GradNet => Flow::E2GradNet(E2GradNetParams::near_zero(n, &mut rng)),
        FlowKind::GradNet => {
            let cfg = GradNetConfig { modules: config.modules, ..Default::default() };
            Flow::GradNet(GradNetParams::new(cfg, n, d, 1.0, &mut rng)?)
        }
    };
    let classifier = ClassifierConfig::default();
    flow.evaluate(&input, &state, &classifier)?;
    let mut times: Vec<f64> = (0..config.repeats)
        .map(|_| {
            let start = Instant::now();
            flow.evaluate(&input, &state, &classifier).map(|_| start.elapsed().as_secs_f64())
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 { times[mid] } else { 0.5 * (times[mid - 1] + times[mid]) };
    Ok(ProbeStats { median_secs: median, min_secs: times[0], max_secs: times[times.len() - 1], samples: input.len() })
}
