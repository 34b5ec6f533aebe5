//! Shared fixtures for the criterion benches.

use protoflow::episodes::{episode_rng, sample_episode, Episode, EpisodeConfig, SynthConfig};
use protoflow::gradflow::FlowInput;
use protoflow::protoclass::{init_prototypes, PrototypeState};

/// One transductive episode from the default synthetic dataset.
pub fn episode(n_way: usize, k_shot: usize, queries: usize, seed: u64) -> Episode {
    let data = SynthConfig { samples_per_class: (k_shot + queries).max(200), seed, ..Default::default() }
        .generate()
        .expect("valid synthetic config");
    let cfg = EpisodeConfig { n_way, k_shot, queries_per_class: queries, episodes_per_epoch: 1, seed };
    sample_episode(&data, &cfg, &mut episode_rng(seed, 0)).expect("enough samples")
}

pub fn flow_setup(episode: &Episode) -> (FlowInput, PrototypeState) {
    (FlowInput::from_episode(episode), init_prototypes(episode).expect("nonzero means"))
}
