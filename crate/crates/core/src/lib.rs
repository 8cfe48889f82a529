//! Explainable recommendation over attribute networks.
//!
//! The co-purchase graph of items is split into one induced subgraph per
//! attribute field (items stay linked only when they also share a value on
//! that field). A sigmoid autoencoder per field embeds each item's adjacency
//! row, a user embedding scores the fields of every item with a softmax
//! attention, and items are ranked by the negative squared distance between
//! their attention-weighted representations and the user's history.
//!
//! Module map:
//!
//! * [`ingest`]: raw files, filtering, leave-one-out split, manifests.
//! * [`netbuild`]: co-purchase graph, attribute networks, cold-item attachment.
//! * [`encoder`]: per-field autoencoders and the weighted reconstruction loss.
//! * [`personalize`]: attention, personalized representations and similarity.
//! * [`trainer`]: negative sampling, joint loss, Adam, training loop, checkpoints.
//! * [`recommend`]: scoring, top-k ranking and explanations.
//! * [`evalkit`]: evaluation protocols and synthetic planted-preference data.

pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod ingest;
pub mod math;
pub mod netbuild;
pub mod personalize;
pub mod recommend;
pub mod trainer;

pub use error::{Error, Result};
