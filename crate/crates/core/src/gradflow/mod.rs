//! Learned gradient flows `dp/dt` over prototype states.

mod e2gradnet;
mod gradnet;
mod input;
mod probe;

pub use e2gradnet::{e2gradnet_flow_with_targets, BoundE2GradNet, E2GradNetParams};
pub use gradnet::{BoundGradNet, GradNetConfig, GradNetModule, GradNetParams, ModuleTrace};
pub use input::FlowInput;
pub use probe::{flow_complexity_probe, ProbeConfig, ProbeStats};


use crate::error::{Error, Result};
use crate::nd::{Module, Parameter, Tape, Tensor, Var};
use crate::protoclass::{difference_flow_var, ClassifierConfig, PrototypeState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowKind {
    Zero,
    MeanGrad,
    GradNet,
    E2GradNet,
}

impl FlowKind {
    pub fn code(self) -> f64 {
        match self {
            FlowKind::Zero => 0.0,
            FlowKind::MeanGrad => 1.0,
            FlowKind::GradNet => 2.0,
            FlowKind::E2GradNet => 3.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        [FlowKind::Zero, FlowKind::MeanGrad, FlowKind::GradNet, FlowKind::E2GradNet]
            .into_iter()
            .find(|k| k.code() == code)
    }
}

impl std::str::FromStr for FlowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "zero" | "none" => Ok(FlowKind::Zero),
            "meangrad" => Ok(FlowKind::MeanGrad),
            "gradnet" => Ok(FlowKind::GradNet),
            "e2gradnet" => Ok(FlowKind::E2GradNet),
            other => Err(Error::Config(format!("unknown flow {other:?} (zero, meangrad, gradnet, e2gradnet)"))),
        }
    }
}

impl std::fmt::Display for FlowKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FlowKind::Zero => "zero",
            FlowKind::MeanGrad => "meangrad",
            FlowKind::GradNet => "gradnet",
            FlowKind::E2GradNet => "e2gradnet",
        })
    }
}

/// A gradient-flow model.
#[derive(Clone, Debug, PartialEq)]
pub enum Flow {
    /// `dp/dt = 0`: prototypes stay at the support means.
    Zero,
    /// Closed-form flow of the support-set loss.
    MeanGrad,
    GradNet(GradNetParams),
    E2GradNet(E2GradNetParams),
}

impl Flow {
    pub fn kind(&self) -> FlowKind {
        match self {
            Flow::Zero => FlowKind::Zero,
            Flow::MeanGrad => FlowKind::MeanGrad,
            Flow::GradNet(_) => FlowKind::GradNet,
            Flow::E2GradNet(_) => FlowKind::E2GradNet,
        }
    }

    /// Binds the flow to one episode on `tape`.
    pub fn bind<'t>(
        &self,
        tape: &'t Tape,
        input: &FlowInput,
        classifier: &ClassifierConfig,
    ) -> Result<BoundFlow<'t>> {
        Ok(match self {
            Flow::Zero => BoundFlow::Zero { tape },
            Flow::MeanGrad => {
                let labeled = FlowInput::labeled(input.support.clone(), input.support_labels.clone(), input.n_way)?;
                let support = tape.constant(labeled.support.clone());
                BoundFlow::MeanGrad {
                    tape,
                    unit: support.normalize_rows()?,
                    targets: tape.constant(labeled.targets()),
                    ones: tape.constant(Tensor::ones(vec![1, labeled.len()])),
                    gamma: classifier.gamma,
                }
            }
            Flow::GradNet(p) => BoundFlow::GradNet(p.bind(tape, input)?),
            Flow::E2GradNet(p) => BoundFlow::E2GradNet(p.bind(tape, input, classifier)?),
        })
    }

    /// `dp/dt` at `state`, evaluated on a private tape.
    pub fn evaluate(&self, input: &FlowInput, state: &PrototypeState, classifier: &ClassifierConfig) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, input, classifier)?;
        let out = bound.eval(tape.constant(state.prototypes.clone()), state.time)?;
        Ok((*out.value()).clone())
    }
}

impl Module for Flow {
    fn params(&self) -> Vec<&Parameter> {
        match self {
            Flow::Zero | Flow::MeanGrad => Vec::new(),
            Flow::GradNet(p) => p.params(),
            Flow::E2GradNet(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Flow::Zero | Flow::MeanGrad => Vec::new(),
            Flow::GradNet(p) => p.params_mut(),
            Flow::E2GradNet(p) => p.params_mut(),
        }
    }
}

/// A flow bound to one episode's constants on a tape.
pub enum BoundFlow<'t> {
    Zero {
        tape: &'t Tape,
    },
    MeanGrad {
        tape: &'t Tape,
        unit: Var<'t>,
        targets: Var<'t>,
        ones: Var<'t>,
        gamma: f64,
    },
    GradNet(BoundGradNet<'t>),
    E2GradNet(BoundE2GradNet<'t>),
}

impl<'t> BoundFlow<'t> {
    pub fn eval(&self, p: Var<'t>, t: f64) -> Result<Var<'t>> {
        match self {
            BoundFlow::Zero { tape } => Ok(tape.constant(Tensor::zeros(p.shape()))),
            BoundFlow::MeanGrad { unit, targets, ones, gamma, .. } => {
                // With r_k = |p_k| and A = p f^_i:
                // -gamma |f^_i r_k - p_k|^2 = 2 gamma r_k (A_ki - r_k).
                let r = p.square().sum_cols()?.sqrt()?;
                let a = p.matmul(unit.t()?)?;
                let logits = a.sub(r.matmul(*ones)?)?.mul_col(r)?.scale(2.0 * gamma).t()?;
                let coeffs = targets.sub(logits.softmax(1)?)?;
                difference_flow_var(p, *unit, coeffs, Some(r))
            }
            BoundFlow::GradNet(g) => g.eval(p, t),
            BoundFlow::E2GradNet(e) => e.eval(p),
        }
    }
}
