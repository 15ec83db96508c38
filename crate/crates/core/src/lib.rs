//! Acoustic word embedding toolkit.
//!
//! Builds fixed-size embeddings for variable-length speech segments from
//! precomputed frame features. The crate covers pair mining from phone
//! alignments and nearest-neighbour search, contrastive training of a
//! learned pooler, k-means frame targets, and the same-different word
//! discrimination benchmark.

pub mod contrastive;
pub mod error;
pub mod evaluation;
pub mod featurestore;
pub mod gradcheck;
pub mod kmeans;
pub mod mining;
pub mod pooling;
pub mod rng;
pub mod synthcorpus;

pub use error::{Error, Result};
pub use featurestore::{
    open_features, seconds_to_segment, write_features, FeatureStore, FrameMatrix, PhoneAlignment, PhoneEntry,
    SegmentRef, WordSegment,
};
pub use pooling::{init_pooler, load_pooler, mean_pool, save_pooler, AweVector, PoolerConfig, PoolerParams};
