//! Dense layers built from tape operations.

use rand::Rng;

use super::param::Parameter;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// A set of named trainable parameters in a fixed order.
pub trait Module: Clone {
    fn params(&self) -> Vec<&Parameter>;
    fn params_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

pub struct BoundLinear<'t> {
    weight: Var<'t>,
    bias: Var<'t>,
}

impl Linear {
    pub fn new(name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Parameter::glorot(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: Parameter::zeros(format!("{name}.bias"), vec![fan_out]),
        }
    }

    pub fn zeroed(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Parameter::zeros(format!("{name}.weight"), vec![fan_in, fan_out]),
            bias: Parameter::zeros(format!("{name}.bias"), vec![fan_out]),
        }
    }

    pub fn identity(name: &str, width: usize) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), Tensor::eye(width)),
            bias: Parameter::zeros(format!("{name}.bias"), vec![width]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLinear<'t> {
        BoundLinear { weight: tape.param(&self.weight), bias: tape.param(&self.bias) }
    }

}

impl Module for Linear {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight)?.add_row(self.bias)
    }
}

/// Two linear layers with an ELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub output: Linear,
}

pub struct BoundMlp2<'t> {
    hidden: BoundLinear<'t>,
    output: BoundLinear<'t>,
}

impl Mlp2 {
    pub fn new(name: &str, fan_in: usize, hidden: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(&format!("{name}.hidden"), fan_in, hidden, rng),
            output: Linear::new(&format!("{name}.output"), hidden, fan_out, rng),
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp2<'t> {
        BoundMlp2 { hidden: self.hidden.bind(tape), output: self.output.bind(tape) }
    }

    pub fn fan_in(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn fan_out(&self) -> usize {
        self.output.fan_out()
    }

}

impl Module for Mlp2 {
    fn params(&self) -> Vec<&Parameter> {
        self.hidden.params().into_iter().chain(self.output.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.hidden.params_mut().into_iter().chain(self.output.params_mut()).collect()
    }
}

impl<'t> BoundMlp2<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.hidden.forward(x)?.elu();
        self.output.forward(h)
    }
}
