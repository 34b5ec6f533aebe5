use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::episodes::{episode_rng, EpisodeMode};
use crate::error::{Error, Result};
use crate::gradflow::{E2GradNetParams, Flow, FlowKind, GradNetConfig, GradNetParams};
use crate::nd::{Module, Parameter, Tensor};
use crate::protoclass::ClassifierConfig;
use crate::solvers::{E2SolverParams, SolverConfig, SolverKind};

/// Initialization of the E²GradNet residual.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualInit {
    #[default]
    Identity,
    NearZero,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub flow: FlowKind,
    pub solver: SolverConfig,
    pub classifier: ClassifierConfig,
    pub gradnet: GradNetConfig,
    pub residual_init: ResidualInit,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            flow: FlowKind::E2GradNet,
            solver: SolverConfig { kind: SolverKind::E2, ..Default::default() },
            classifier: ClassifierConfig::default(),
            gradnet: GradNetConfig::default(),
            residual_init: ResidualInit::Identity,
        }
    }
}

/// A meta-optimizer: flow network, integrator and classifier settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub flow: Flow,
    pub solver: SolverConfig,
    pub correction: Option<E2SolverParams>,
    pub classifier: ClassifierConfig,
    pub n_way: usize,
    pub dim: usize,
}

impl Model {
    pub fn new(config: &ModelConfig, n_way: usize, dim: usize, seed: u64) -> Result<Self> {
        config.solver.validate()?;
        config.classifier.validate()?;
        let mut rng = episode_rng(seed, u64::MAX);
        let flow = match config.flow {
            FlowKind::Zero => Flow::Zero,
            FlowKind::MeanGrad => Flow::MeanGrad,
            FlowKind::GradNet => Flow::GradNet(GradNetParams::new(
                config.gradnet.clone(),
                n_way,
                dim,
                config.solver.integral_time,
                &mut rng,
            )?),
            FlowKind::E2GradNet => Flow::E2GradNet(match config.residual_init {
                ResidualInit::Identity => E2GradNetParams::identity(n_way),
                ResidualInit::NearZero => E2GradNetParams::near_zero(n_way, &mut rng),
            }),
        };
        let correction = (config.solver.kind == SolverKind::E2).then(|| E2SolverParams::new(dim, &mut rng));
        Ok(Self {
            flow,
            solver: config.solver.clone(),
            correction,
            classifier: config.classifier.clone(),
            n_way,
            dim,
        })
    }

    /// Zero flow: prototypes stay at the support means.
    pub fn baseline(n_way: usize, dim: usize) -> Self {
        Self {
            flow: Flow::Zero,
            solver: SolverConfig { kind: SolverKind::Euler, integral_time: 1.0, steps: 1 },
            correction: None,
            classifier: ClassifierConfig::default(),
            n_way,
            dim,
        }
    }

    pub fn check_compatible(&self, n_way: usize, dim: usize) -> Result<()> {
        if self.n_way != n_way || self.dim != dim {
            return Err(Error::Mismatch(format!(
                "model is {}-way with dim {}, data is {n_way}-way with dim {dim}",
                self.n_way, self.dim
            )));
        }
        Ok(())
    }
}

impl Module for Model {
    fn params(&self) -> Vec<&Parameter> {
        let mut v = self.flow.params();
        if let Some(c) = &self.correction {
            v.extend(c.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.flow.params_mut();
        if let Some(c) = &mut self.correction {
            v.extend(c.params_mut());
        }
        v
    }
}

/// A model plus the training state it was selected at.
///
/// Serialized as PFPW: `b"PFPW"`, `u32` version, `u32` tensor count, then
/// per tensor a `u16` name length, the name, `u32` rank, `u32` dims and
/// `f64` data, all little-endian. Settings are stored as `meta.*` scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub mode: EpisodeMode,
    pub epoch: usize,
    pub val_accuracy: f64,
}

pub const PFPW_MAGIC: &[u8; 4] = b"PFPW";
pub const PFPW_VERSION: u32 = 1;

fn mode_code(mode: EpisodeMode) -> f64 {
    match mode {
        EpisodeMode::Transductive => 0.0,
        EpisodeMode::Inductive => 1.0,
    }
}

impl Checkpoint {
    fn meta(&self) -> Vec<(String, f64)> {
        let m = &self.model;
        let mut meta = vec![
            ("meta.flow", m.flow.kind().code()),
            ("meta.solver", m.solver.kind.code()),
            ("meta.integral_time", m.solver.integral_time),
            ("meta.steps", m.solver.steps as f64),
            ("meta.n_way", m.n_way as f64),
            ("meta.dim", m.dim as f64),
            ("meta.gamma", m.classifier.gamma),
            ("meta.radius", m.classifier.radius),
            ("meta.mode", mode_code(self.mode)),
            ("meta.epoch", self.epoch as f64),
            ("meta.val_accuracy", self.val_accuracy),
            ("meta.correction", if m.correction.is_some() { 1.0 } else { 0.0 }),
        ];
        if let Flow::GradNet(g) = &m.flow {
            let c = &g.config;
            meta.extend([
                ("meta.gradnet.modules", c.modules as f64),
                ("meta.gradnet.hidden", c.hidden as f64),
                ("meta.gradnet.heads", c.heads as f64),
                ("meta.gradnet.head_dim", c.head_dim as f64),
                ("meta.gradnet.beta0", c.beta0),
                ("meta.gradnet.xi", c.xi),
                ("meta.gradnet.var_floor", c.var_floor),
                ("meta.gradnet.integral_time", g.integral_time),
            ]);
        }
        meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta();
        let params = self.model.params();
        let mut out = Vec::new();
        out.extend_from_slice(PFPW_MAGIC);
        out.extend_from_slice(&PFPW_VERSION.to_le_bytes());
        out.extend_from_slice(&((meta.len() + params.len()) as u32).to_le_bytes());
        let mut write = |name: &str, t: &Tensor| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (k, v) in &meta {
            write(k, &Tensor::scalar(*v));
        }
        for p in params {
            write(&p.name, &p.value);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let tensors = parse_pfpw(bytes)?;
        let scalar = |key: &str| -> Result<f64> {
            tensors
                .get(key)
                .filter(|t| t.len() == 1)
                .map(Tensor::item)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks scalar {key}")))
        };
        let count = |key: &str| -> Result<usize> {
            let v = scalar(key)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("{key} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let flow = FlowKind::from_code(scalar("meta.flow")?)
            .ok_or_else(|| Error::Format("unknown flow code".into()))?;
        let solver_kind = SolverKind::from_code(scalar("meta.solver")?)
            .ok_or_else(|| Error::Format("unknown solver code".into()))?;
        let mode = match scalar("meta.mode")? {
            0.0 => EpisodeMode::Transductive,
            1.0 => EpisodeMode::Inductive,
            m => return Err(Error::Format(format!("unknown mode code {m}"))),
        };
        let mut config = ModelConfig {
            flow,
            solver: SolverConfig {
                kind: solver_kind,
                integral_time: scalar("meta.integral_time")?,
                steps: count("meta.steps")?,
            },
            classifier: ClassifierConfig { gamma: scalar("meta.gamma")?, radius: scalar("meta.radius")? },
            ..Default::default()
        };
        if flow == FlowKind::GradNet {
            config.gradnet = GradNetConfig {
                modules: count("meta.gradnet.modules")?,
                hidden: count("meta.gradnet.hidden")?,
                heads: count("meta.gradnet.heads")?,
                head_dim: count("meta.gradnet.head_dim")?,
                beta0: scalar("meta.gradnet.beta0")?,
                xi: scalar("meta.gradnet.xi")?,
                var_floor: scalar("meta.gradnet.var_floor")?,
            };
        }
        let (n_way, dim) = (count("meta.n_way")?, count("meta.dim")?);
        let mut model = Model::new(&config, n_way, dim, 0)?;
        if let Flow::GradNet(g) = &mut model.flow {
            g.integral_time = scalar("meta.gradnet.integral_time")?;
        }
        if (scalar("meta.correction")? == 1.0) != model.correction.is_some() {
            return Err(Error::Format("correction flag disagrees with the solver kind".into()));
        }
        let mut expected = 0;
        for p in model.params_mut() {
            let t = tensors
                .get(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
            p.zero_grad();
            expected += 1;
        }
        let extra = tensors.keys().filter(|k| !k.starts_with("meta.")).count();
        if extra != expected {
            return Err(Error::Format(format!("checkpoint holds {extra} parameters, model has {expected}")));
        }
        Ok(Self { model, mode, epoch: count("meta.epoch")?, val_accuracy: scalar("meta.val_accuracy")? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse_pfpw(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| {
            Error::Io(std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated checkpoint"))
        })?;
        pos += n;
        Ok(s)
    };
    if take(4)? != PFPW_MAGIC {
        return Err(Error::Format("bad checkpoint magic, expected \"PFPW\"".into()));
    }
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != PFPW_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = u32_at(take(4)?);
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let rank = u32_at(take(4)?) as usize;
        let shape = (0..rank).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = take(numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Validation(format!("tensor {name}: {e}")))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}
