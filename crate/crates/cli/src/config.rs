use std::path::{Path, PathBuf};

use protoflow::episodes::EpisodeConfig;
use protoflow::metatrain::{MetaConfig, ModelConfig};
use serde_json::Value;

use crate::CliError;

/// Everything `train` needs, loaded from JSON. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset file (PFEB, or CSV by extension).
    pub data: Option<PathBuf>,
    /// Class counts for the train/val/test partition, taken in ascending class id order.
    pub split: [usize; 3],
    /// Best checkpoint is written here.
    pub output: PathBuf,
    /// Per-epoch JSON lines; a CSV copy is written next to it.
    pub metrics: PathBuf,
    /// Seeds sampling, initialization and validation. Overrides `meta.seed` and `episode.seed`.
    pub seed: u64,
    pub episode: EpisodeConfig,
    pub meta: MetaConfig,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            split: [20, 5, 5],
            output: PathBuf::from("model.pfpw"),
            metrics: PathBuf::from("metrics.jsonl"),
            seed: 0,
            episode: EpisodeConfig::default(),
            meta: MetaConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

/// Short names accepted by `--set`.
const ALIASES: &[(&str, &str)] = &[
    ("flow", "model.flow"),
    ("solver", "model.solver.kind"),
    ("steps", "model.solver.steps"),
    ("integral_time", "model.solver.integral_time"),
    ("T", "model.solver.integral_time"),
    ("gamma", "model.classifier.gamma"),
    ("residual_init", "model.residual_init"),
    ("modules", "model.gradnet.modules"),
    ("hidden", "model.gradnet.hidden"),
    ("heads", "model.gradnet.heads"),
    ("head_dim", "model.gradnet.head_dim"),
    ("beta0", "model.gradnet.beta0"),
    ("xi", "model.gradnet.xi"),
    ("epochs", "meta.epochs"),
    ("lr", "meta.lr"),
    ("weight_decay", "meta.weight_decay"),
    ("lr_decay_epochs", "meta.lr_decay_epochs"),
    ("lr_decay_factor", "meta.lr_decay_factor"),
    ("batch_episodes", "meta.batch_episodes"),
    ("val_episodes", "meta.val_episodes"),
    ("mode", "meta.mode"),
    ("n_way", "episode.n_way"),
    ("k_shot", "episode.k_shot"),
    ("queries_per_class", "episode.queries_per_class"),
    ("episodes_per_epoch", "episode.episodes_per_epoch"),
];

fn resolve(key: &str) -> &str {
    ALIASES.iter().find(|(k, _)| *k == key).map_or(key, |(_, path)| path)
}

pub fn alias_help() -> String {
    ALIASES.iter().map(|(k, v)| format!("  {k:<20} {v}")).collect::<Vec<_>>().join("\n")
}

/// Applies `key=value` overrides to a JSON document. Values parse as JSON
/// when possible and as strings otherwise.
pub fn apply_overrides(mut doc: Value, overrides: &[String]) -> Result<Value, CliError> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("override `{item}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let path: Vec<&str> = resolve(key.trim()).split('.').collect();
        let mut node = &mut doc;
        for (i, part) in path.iter().enumerate() {
            let obj = node
                .as_object_mut()
                .ok_or_else(|| CliError::usage(format!("`{key}`: `{}` is not an object", path[..i].join("."))))?;
            if i + 1 == path.len() {
                obj.insert(part.to_string(), value.clone());
                break;
            }
            node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        }
    }
    Ok(doc)
}

pub fn load_run_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig, CliError> {
    let doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", p.display())))?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };
    let doc = apply_overrides(doc, overrides)?;
    let mut cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::usage(format!("config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.meta.seed = cfg.seed;
    cfg.episode.seed = cfg.seed;
    Ok(cfg)
}
