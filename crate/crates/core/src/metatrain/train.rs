use super::adam::{adam_step, AdamState};
use super::config::MetaConfig;
use super::eval::{evaluate, EvalConfig};
use super::model::{Checkpoint, Model};
use crate::episodes::{episode_rng, sample_episode, EmbeddingDataset, Episode, EpisodeConfig};
use crate::error::{Error, Result};
use crate::gradflow::FlowInput;
use crate::nd::{Module, Tape, Tensor, Var};
use crate::protoclass::{cosine_cross_entropy_var, cross_entropy, init_prototypes, PrototypeState};
use crate::solvers::integrate;

/// Prototypes at `t = 0` and `t = T` on `tape`.
pub fn solve_episode<'t>(tape: &'t Tape, model: &Model, episode: &Episode) -> Result<(Var<'t>, Var<'t>)> {
    model.check_compatible(episode.n_way, episode.dim())?;
    let p0 = tape.constant(init_prototypes(episode)?.prototypes);
    let input = FlowInput::from_episode(episode);
    let flow = model.flow.bind(tape, &input, &model.classifier)?;
    let eta = model.correction.as_ref().map(|c| c.eta.bind(tape));
    let p_t = integrate(|p, t| flow.eval(p, t), p0, &model.solver, eta.as_ref())?;
    Ok((p0, p_t))
}

/// Query NLL of the solved prototypes, on `tape`.
pub fn episode_loss_var<'t>(tape: &'t Tape, model: &Model, episode: &Episode) -> Result<Var<'t>> {
    let (_, p_t) = solve_episode(tape, model, episode)?;
    let query = tape.constant(episode.query.clone());
    cosine_cross_entropy_var(p_t, query, &episode.query_labels, model.classifier.gamma)
}

/// Query NLL computed directly from the final prototypes, as in evaluation.
pub fn episode_loss(model: &Model, episode: &Episode) -> Result<f64> {
    let state = PrototypeState::new(final_prototypes(model, episode)?, model.solver.integral_time)?;
    cross_entropy(&state, &episode.query, &episode.query_labels, &model.classifier)
}

pub fn final_prototypes(model: &Model, episode: &Episode) -> Result<Tensor> {
    let tape = Tape::new();
    let (_, p_t) = solve_episode(&tape, model, episode)?;
    Ok((*p_t.value()).clone())
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain numbers serialize")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint by validation accuracy (the initialization counts as
    /// epoch 0).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochMetrics>,
    /// Every training episode loss, in order.
    pub episode_losses: Vec<f64>,
}

/// Episodic meta-training with Adam; single-threaded and deterministic.
pub fn meta_train(
    train: &EmbeddingDataset,
    val: &EmbeddingDataset,
    episode: &EpisodeConfig,
    config: &MetaConfig,
    init: Model,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    episode.validate()?;
    train.ensure_disjoint(val)?;
    init.check_compatible(episode.n_way, train.dim())?;
    let val_cfg = EvalConfig::new(episode.clone(), config.mode, config.val_episodes, config.seed ^ VAL_SEED_SALT);
    let val_acc = |m: &Model| -> Result<f64> {
        if config.val_episodes == 0 { Ok(0.0) } else { Ok(evaluate(val, m, &val_cfg)?.mean_accuracy) }
    };

    let mut model = init;
    model.zero_grad();
    let mut best = Checkpoint { model: model.clone(), mode: config.mode, epoch: 0, val_accuracy: val_acc(&model)? };
    let mut history = Vec::with_capacity(config.epochs);
    let mut episode_losses = Vec::with_capacity(config.epochs * episode.episodes_per_epoch);
    let mut adam = AdamState::default();
    let trainable = !model.params().is_empty();
    let mut index = 0u64;
    let mut prev_acc = best.val_accuracy;
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        let last_good = Checkpoint { model: model.clone(), mode: config.mode, epoch: epoch - 1, val_accuracy: prev_acc };
        let mut epoch_loss = 0.0;
        let mut in_batch = 0;
        for e in 0..episode.episodes_per_epoch {
            let ep = sample_episode(train, episode, &mut episode_rng(config.seed, index))?.with_mode(config.mode);
            index += 1;
            let tape = Tape::new();
            let loss = match episode_loss_var(&tape, &model, &ep) {
                Ok(l) if l.value().item().is_finite() => l,
                Ok(_) | Err(Error::Integration { .. } | Error::FlowNan { .. }) => {
                    return Err(Error::Diverged { epoch, episode: e, last_good: Box::new(last_good) });
                }
                Err(other) => return Err(other),
            };
            let value = loss.value().item();
            epoch_loss += value;
            episode_losses.push(value);
            if trainable {
                tape.backward(loss)?.accumulate_into(model.params_mut());
            }
            in_batch += 1;
            if in_batch == config.batch_episodes || e + 1 == episode.episodes_per_epoch {
                if trainable {
                    let scale = 1.0 / in_batch as f64;
                    for p in model.params_mut() {
                        p.grad = p.grad.scale(scale);
                    }
                    adam_step(model.params_mut(), &mut adam, lr, config.weight_decay);
                    model.zero_grad();
                    if model.params().iter().any(|p| !p.value.is_finite()) {
                        return Err(Error::Diverged { epoch, episode: e, last_good: Box::new(last_good) });
                    }
                }
                in_batch = 0;
            }
        }
        let acc = match val_acc(&model) {
            Err(Error::Integration { .. } | Error::FlowNan { .. }) => {
                let episode = episode.episodes_per_epoch;
                return Err(Error::Diverged { epoch, episode, last_good: Box::new(last_good) });
            }
            other => other?,
        };
        let metrics = EpochMetrics {
            epoch,
            train_loss: epoch_loss / episode.episodes_per_epoch.max(1) as f64,
            val_acc: acc,
            lr,
        };
        prev_acc = acc;
        on_epoch(&metrics);
        log::info!("epoch {epoch}: loss {:.5} val {:.4} lr {lr:e}", metrics.train_loss, acc);
        history.push(metrics);
        if acc > best.val_accuracy {
            best = Checkpoint { model: model.clone(), mode: config.mode, epoch, val_accuracy: acc };
        }
    }
    let last_acc = history.last().map_or(best.val_accuracy, |m| m.val_acc);
    let last = Checkpoint { model, mode: config.mode, epoch: config.epochs, val_accuracy: last_acc };
    Ok(TrainOutcome { best, last, history, episode_losses })
}

/// Keeps validation episodes independent of training episodes.
const VAL_SEED_SALT: u64 = 0x0005_eed0_f7a1;
