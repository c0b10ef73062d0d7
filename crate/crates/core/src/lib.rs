//! Grouping of multi-person keypoint candidates by online hierarchical
//! graph clustering.
//!
//! Candidates become nodes of a typed graph; an EdgeConv interaction network
//! embeds them, and an edge discriminator drives repeated greedy matching
//! and merging until no confident, type-compatible pair is left. A
//! macro-node discriminator scores the resulting persons.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`.

pub mod error;
pub mod eval;
pub mod graph;
pub mod greedy;
pub mod neural;
pub mod ohgc;
pub mod scalar;
pub mod scene;

pub use error::{Error, Result};
pub use eval::{evaluate, evaluate_records, oks, EvalReport};
pub use graph::{build_graph, GraphTopology, TopologyKind};
pub use greedy::greedy_decode;
pub use ohgc::{group, group_oracle, GroupingResult, OhgcConfig, PersonInstance};
pub use scalar::Scalar;
pub use scene::{KeypointCandidate, Scene, SceneGenerator, Skeleton, SynthConfig};

pub type Tensor = neural::Tensor<f64>;
pub type PoseGraph = graph::PoseGraph<f64>;
pub type ClusterState = graph::ClusterState<f64>;
pub type DiscriminatorBundle = neural::DiscriminatorBundle<f64>;
pub type Trainer = neural::Trainer<f64>;
