use rand::Rng;

use super::FlowInput;
use crate::error::{Error, Result};
use crate::nd::{BoundMlp2, Linear, Mlp2, Module, Parameter, Tape, Tensor, Var};
use crate::protoclass::{difference_flow_var, ClassifierConfig, PrototypeState};

/// Residual flow network: a learned correction of the cosine-classifier
/// probabilities times the closed-form difference `f_i - p_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct E2GradNetParams {
    pub residual: Mlp2,
}

impl E2GradNetParams {
    /// Identity weights in both layers. Since probabilities are positive
    /// and ELU is the identity there, the residual returns its input and
    /// the flow starts at exactly zero.
    pub fn identity(n_way: usize) -> Self {
        Self {
            residual: Mlp2 {
                hidden: Linear::identity("e2gradnet.residual.hidden", n_way),
                output: Linear::identity("e2gradnet.residual.output", n_way),
            },
        }
    }

    /// Random hidden layer and a near-zero output layer.
    pub fn near_zero(n_way: usize, rng: &mut impl Rng) -> Self {
        let mut residual = Mlp2::new("e2gradnet.residual", n_way, n_way, n_way, rng);
        residual.output.weight.value = residual.output.weight.value.scale(1e-3);
        Self { residual }
    }

    pub fn n_way(&self) -> usize {
        self.residual.fan_in()
    }

    pub(crate) fn bind<'t>(
        &self,
        tape: &'t Tape,
        input: &FlowInput,
        classifier: &ClassifierConfig,
    ) -> Result<BoundE2GradNet<'t>> {
        if input.n_way != self.n_way() || self.residual.fan_out() != self.n_way() {
            return Err(Error::Config(format!(
                "E2GradNet residual width {} does not match a {}-way episode",
                self.n_way(),
                input.n_way
            )));
        }
        let feats = tape.constant(input.visible());
        let unit = feats.normalize_rows()?;
        Ok(BoundE2GradNet { residual: Some(self.residual.bind(tape)), feats, unit, gamma: classifier.gamma, target: None })
    }
}

impl Module for E2GradNetParams {
    fn params(&self) -> Vec<&Parameter> {
        self.residual.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.residual.params_mut()
    }
}

pub struct BoundE2GradNet<'t> {
    residual: Option<BoundMlp2<'t>>,
    feats: Var<'t>,
    unit: Var<'t>,
    gamma: f64,
    target: Option<Var<'t>>,
}

impl<'t> BoundE2GradNet<'t> {
    pub(crate) fn eval(&self, p: Var<'t>) -> Result<Var<'t>> {
        let probs = self.unit.matmul(p.normalize_rows()?.t()?)?.scale(self.gamma).softmax(1)?;
        let corrected = match (&self.residual, self.target) {
            (_, Some(target)) => target,
            (Some(mlp), None) => mlp.forward(probs)?,
            (None, None) => unreachable!("bound with a residual or a fixed target"),
        };
        difference_flow_var(p, self.feats, corrected.sub(probs)?, None)
    }
}

/// The flow with the residual output replaced by fixed `targets`
/// (`visible x N`), as if the residual predicted them exactly.
pub fn e2gradnet_flow_with_targets(
    input: &FlowInput,
    state: &PrototypeState,
    targets: &Tensor,
    classifier: &ClassifierConfig,
) -> Result<Tensor> {
    if targets.shape() != [input.len(), input.n_way] {
        return Err(Error::dim("e2gradnet targets", format!("{:?}", targets.shape())));
    }
    let tape = Tape::new();
    let feats = tape.constant(input.visible());
    let bound = BoundE2GradNet {
        residual: None,
        feats,
        unit: feats.normalize_rows()?,
        gamma: classifier.gamma,
        target: Some(tape.constant(targets.clone())),
    };
    let out = bound.eval(tape.constant(state.prototypes.clone()))?;
    Ok((*out.value()).clone())
}
