//! Embedding datasets and episodic N-way K-shot sampling.

mod dataset;
mod format;
mod sampling;
mod synth;

pub use dataset::{EmbeddingDataset, Split};
pub use format::{
    from_pfeb_bytes, load_csv, load_embeddings, save_csv, save_pfeb, to_pfeb_bytes, PFEB_MAGIC,
    PFEB_VERSION,
};
pub use sampling::{episode_rng, sample_episode, Episode, EpisodeConfig, EpisodeMode};
pub use synth::{synth_gaussian, synth_with_centers, SynthConfig};
