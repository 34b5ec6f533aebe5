use rand::Rng;

use super::FlowInput;
use crate::error::{Error, Result};
use crate::nd::{BoundLinear, BoundMlp2, Linear, Mlp2, Module, Parameter, Tape, Tensor, Var};
use crate::protoclass::PrototypeState;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradNetConfig {
    pub modules: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub beta0: f64,
    pub xi: f64,
    pub var_floor: f64,
}

impl Default for GradNetConfig {
    fn default() -> Self {
        Self { modules: 4, hidden: 512, heads: 8, head_dim: 16, beta0: 0.1, xi: 0.1, var_floor: 1e-8 }
    }
}

impl GradNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modules == 0 || self.hidden == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("GradNet sizes must be positive".into()));
        }
        if !(self.beta0 > 0.0 && self.xi > 0.0 && self.var_floor > 0.0) {
            return Err(Error::Config("beta0, xi and var_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn beta(&self, t: f64, integral_time: f64) -> f64 {
        self.beta0 * self.xi.powf(t / integral_time)
    }
}

/// One inference module: gradient estimator plus attention weight generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GradNetModule {
    pub scale: Mlp2,
    pub embed: Linear,
    pub query: Parameter,
    pub key: Parameter,
    pub value: Parameter,
    pub output: Linear,
}

impl GradNetModule {
    fn new(name: &str, n_way: usize, dim: usize, cfg: &GradNetConfig, rng: &mut impl Rng) -> Self {
        let width = cfg.heads * cfg.head_dim;
        Self {
            scale: Mlp2::new(&format!("{name}.scale"), 2 * dim, cfg.hidden, dim, rng),
            embed: Linear::new(&format!("{name}.embed"), 2 * n_way + 3 * dim, cfg.hidden, rng),
            query: Parameter::glorot(format!("{name}.query"), cfg.hidden, width, rng),
            key: Parameter::glorot(format!("{name}.key"), cfg.hidden, width, rng),
            value: Parameter::glorot(format!("{name}.value"), cfg.hidden, width, rng),
            output: Linear::new(&format!("{name}.output"), width, 1, rng),
        }
    }
}

impl Module for GradNetModule {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.scale.params();
        v.extend(self.embed.params());
        v.extend([&self.query, &self.key, &self.value]);
        v.extend(self.output.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.scale.params_mut();
        v.extend(self.embed.params_mut());
        v.extend([&mut self.query, &mut self.key, &mut self.value]);
        v.extend(self.output.params_mut());
        v
    }
}

/// Multi-module gradient-flow network with an exponentially decaying step.
#[derive(Clone, Debug, PartialEq)]
pub struct GradNetParams {
    pub config: GradNetConfig,
    pub n_way: usize,
    pub dim: usize,
    /// Horizon `T` of the decay `beta0 * xi^(t/T)`.
    pub integral_time: f64,
    pub modules: Vec<GradNetModule>,
}

impl GradNetParams {
    pub fn new(
        config: GradNetConfig,
        n_way: usize,
        dim: usize,
        integral_time: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let modules =
            (0..config.modules).map(|l| GradNetModule::new(&format!("gradnet.{l}"), n_way, dim, &config, rng)).collect();
        Ok(Self { config, n_way, dim, integral_time, modules })
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, input: &FlowInput) -> Result<BoundGradNet<'t>> {
        if input.n_way != self.n_way || input.dim() != self.dim {
            return Err(Error::Config(format!(
                "GradNet built for {}-way dim {}, input is {}-way dim {}",
                self.n_way,
                self.dim,
                input.n_way,
                input.dim()
            )));
        }
        let (n, classes) = (input.len(), self.n_way);
        let feats = tape.constant(input.visible()).tile_rows(classes)?;
        let class_code = tape.constant(Tensor::eye(classes)).repeat_rows(n)?;
        let targets = tape.constant(input.targets()).tile_rows(classes)?;
        let modules = self
            .modules
            .iter()
            .map(|m| BoundModule {
                scale: m.scale.bind(tape),
                embed: m.embed.bind(tape),
                query: tape.param(&m.query),
                key: tape.param(&m.key),
                value: tape.param(&m.value),
                output: m.output.bind(tape),
            })
            .collect();
        Ok(BoundGradNet {
            config: self.config.clone(),
            n_way: self.n_way,
            dim: self.dim,
            integral_time: self.integral_time,
            tape,
            modules,
            feats,
            class_code,
            targets,
            n,
        })
    }

    /// Per-module sample weights, means and variances at `state`.
    pub fn inspect(&self, input: &FlowInput, state: &PrototypeState) -> Result<Vec<ModuleTrace>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, input)?;
        let p = tape.constant(state.prototypes.clone());
        (0..self.modules.len())
            .map(|l| {
                let out = bound.module(l, p)?;
                Ok(ModuleTrace {
                    weights: out.weights.value().reshape(vec![self.n_way, input.len()])?,
                    mean: (*out.mean.value()).clone(),
                    variance: (*out.variance.value()).clone(),
                })
            })
            .collect()
    }
}

impl Module for GradNetParams {
    fn params(&self) -> Vec<&Parameter> {
        self.modules.iter().flat_map(Module::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.modules.iter_mut().flat_map(Module::params_mut).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleTrace {
    /// `N x n`, each row a distribution over visible samples.
    pub weights: Tensor,
    pub mean: Tensor,
    /// Variance after flooring.
    pub variance: Tensor,
}

struct BoundModule<'t> {
    scale: BoundMlp2<'t>,
    embed: BoundLinear<'t>,
    query: Var<'t>,
    key: Var<'t>,
    value: Var<'t>,
    output: BoundLinear<'t>,
}

struct ModuleOut<'t> {
    weights: Var<'t>,
    mean: Var<'t>,
    variance: Var<'t>,
}

pub struct BoundGradNet<'t> {
    config: GradNetConfig,
    n_way: usize,
    dim: usize,
    integral_time: f64,
    tape: &'t Tape,
    modules: Vec<BoundModule<'t>>,
    /// Rows are `(class k, sample i)` pairs, class-major.
    feats: Var<'t>,
    class_code: Var<'t>,
    targets: Var<'t>,
    n: usize,
}

impl<'t> BoundGradNet<'t> {
    fn module(&self, l: usize, p: Var<'t>) -> Result<ModuleOut<'t>> {
        let m = &self.modules[l];
        let (classes, n) = (self.n_way, self.n);
        let protos = p.repeat_rows(n)?;
        let pair = self.tape.concat(&[self.feats, protos], 1)?;
        let diff = m.scale.forward(pair)?.mul(self.feats)?.sub(protos)?;
        let embed_in =
            self.tape.concat(&[self.class_code, protos, self.targets, self.feats, protos.mul(self.feats)?], 1)?;
        let h = m.embed.forward(embed_in)?.elu();
        let (q, k, v) = (h.matmul(m.query)?, h.matmul(m.key)?, h.matmul(m.value)?);
        let att = q.grouped_attention(k, v, classes, self.config.heads)?;
        let logits = m.output.forward(att)?.reshape(vec![classes, n])?;
        let weights = logits.softmax(1)?.reshape(vec![classes * n, 1])?;
        let mean = diff.mul_col(weights)?.group_sum_rows(classes)?;
        let dev = diff.sub(mean.repeat_rows(n)?)?;
        let variance = dev.square().mul_col(weights)?.group_sum_rows(classes)?.clamp_min(self.config.var_floor);
        self.check_finite(l, &[diff, weights], &[mean, variance])?;
        Ok(ModuleOut { weights, mean, variance })
    }

    fn check_finite(&self, module: usize, per_pair: &[Var<'t>], per_class: &[Var<'t>]) -> Result<()> {
        for v in per_pair {
            let t = v.value();
            if let Some(r) = (0..t.rows()).find(|&r| t.row(r).iter().any(|x| !x.is_finite())) {
                return Err(Error::FlowNan { module, class: r / self.n, sample: r % self.n });
            }
        }
        for v in per_class {
            let t = v.value();
            if let Some(r) = (0..t.rows()).find(|&r| t.row(r).iter().any(|x| !x.is_finite())) {
                return Err(Error::FlowNan { module, class: r, sample: 0 });
            }
        }
        Ok(())
    }

    /// `beta(t) * [sum_l 1/var_l]^-1 * sum_l mean_l/var_l`.
    pub(crate) fn eval(&self, p: Var<'t>, t: f64) -> Result<Var<'t>> {
        let outs = (0..self.modules.len()).map(|l| self.module(l, p)).collect::<Result<Vec<_>>>()?;
        let ones = self.tape.constant(Tensor::ones(vec![self.n_way, self.dim]));
        let inv = outs.iter().map(|o| ones.div(o.variance)).collect::<Result<Vec<_>>>()?;
        let mut total = inv[0];
        for &v in &inv[1..] {
            total = total.add(v)?;
        }
        let mut flow: Option<Var<'t>> = None;
        for (o, &v) in outs.iter().zip(&inv) {
            let term = v.div(total)?.mul(o.mean)?;
            flow = Some(match flow {
                None => term,
                Some(f) => f.add(term)?,
            });
        }
        let beta = self.config.beta(t, self.integral_time);
        Ok(flow.expect("at least one module").scale(beta))
    }
}
