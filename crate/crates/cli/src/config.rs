//! The run configuration file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use ohgc_core::graph::{GraphTopology, TopologyKind};
use ohgc_core::greedy::DEFAULT_TAG_THRESHOLD;
use ohgc_core::neural::{AdamConfig, LossWeights, NetworkShape, TrainConfig};
use ohgc_core::scene::{Skeleton, SynthConfig, DEFAULT_EMBEDDING_DIM};
use ohgc_core::{Error, OhgcConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkeletonConfig {
    /// Number of keypoint types.
    pub num_types: usize,
    pub embedding_dim: usize,
    /// Per-type OKS sigmas; COCO values when empty.
    pub sigmas: Vec<f64>,
    /// Skeleton tree; COCO tree when empty.
    pub tree_edges: Vec<(usize, usize)>,
}

impl Default for SkeletonConfig {
    fn default() -> Self {
        SkeletonConfig {
            num_types: 17,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            sigmas: Vec::new(),
            tree_edges: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    /// Replace the default shortcut sets when present.
    pub bypass_extra: Option<Vec<(usize, usize)>>,
    pub extended_extra: Option<Vec<(usize, usize)>>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            kind: TopologyKind::Full,
            bypass_extra: None,
            extended_extra: None,
        }
    }
}

/// Network widths; the input width follows from the skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub edgeconv_widths: Vec<usize>,
    pub node_hidden: Vec<usize>,
    pub edge_hidden: Vec<usize>,
    pub macro_hidden: Vec<usize>,
    pub dropout_rate: f64,
    pub init_seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let s = NetworkShape::for_input(1);
        NetworkConfig {
            edgeconv_widths: s.edgeconv_widths,
            node_hidden: s.node_hidden,
            edge_hidden: s.edge_hidden,
            macro_hidden: s.macro_hidden,
            dropout_rate: s.dropout_rate,
            init_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub steps: usize,
    /// Write a checkpoint every this many steps; 0 writes only the last.
    pub checkpoint_every: usize,
    pub weights: LossWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingConfig {
            learning_rate: t.optimizer.learning_rate,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            epsilon: t.optimizer.epsilon,
            batch_size: t.batch_size,
            seed: t.seed,
            steps: 200,
            checkpoint_every: 50,
            weights: t.weights,
        }
    }
}

impl TrainingConfig {
    pub fn trainer(&self) -> TrainConfig {
        TrainConfig {
            optimizer: AdamConfig {
                learning_rate: self.learning_rate,
                beta1: self.beta1,
                beta2: self.beta2,
                epsilon: self.epsilon,
            },
            weights: self.weights,
            batch_size: self.batch_size,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreedyConfig {
    pub tag_threshold: f64,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig {
            tag_threshold: DEFAULT_TAG_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub skeleton: SkeletonConfig,
    pub synth: SynthConfig,
    pub topology: TopologyConfig,
    pub network: NetworkConfig,
    pub ohgc: Option<OhgcConfig>,
    pub train: TrainingConfig,
    pub greedy: GreedyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            skeleton: SkeletonConfig::default(),
            synth: SynthConfig::default(),
            topology: TopologyConfig::default(),
            network: NetworkConfig::default(),
            ohgc: None,
            train: TrainingConfig::default(),
            greedy: GreedyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        let j = self.skeleton.num_types;
        if j == 0 || j > 128 {
            return Err(Error::Config("skeleton.num_types must lie in 1..=128".into()));
        }
        if self.synth.num_types != j || self.synth.embedding_dim != self.skeleton.embedding_dim {
            return Err(Error::Config(
                "synth.num_types / synth.embedding_dim must match the skeleton section".into(),
            ));
        }
        self.synth.validate()?;
        self.skeleton().validate()?;
        self.topology().validate(j)?;
        self.shape().validate()?;
        self.ohgc().validate()?;
        self.train.trainer().validate()?;
        if !(self.greedy.tag_threshold > 0.0) {
            return Err(Error::Config("greedy.tag_threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn num_types(&self) -> usize {
        self.skeleton.num_types
    }

    pub fn skeleton(&self) -> Skeleton {
        let mut sk = Skeleton::with_types(self.skeleton.num_types);
        if !self.skeleton.sigmas.is_empty() {
            for (t, &s) in sk.types.iter_mut().zip(&self.skeleton.sigmas) {
                t.oks_sigma = s;
            }
        }
        if !self.skeleton.tree_edges.is_empty() {
            sk.tree_edges = self.skeleton.tree_edges.clone();
        }
        sk
    }

    pub fn topology(&self) -> GraphTopology {
        let mut t = GraphTopology::new(self.topology.kind, &self.skeleton());
        if let Some(e) = &self.topology.bypass_extra {
            t.bypass_extra = e.clone();
        }
        if let Some(e) = &self.topology.extended_extra {
            t.extended_extra = e.clone();
        }
        t
    }

    pub fn shape(&self) -> NetworkShape {
        let n = &self.network;
        NetworkShape {
            input_dim: self.skeleton.embedding_dim + self.skeleton.num_types + 2,
            edgeconv_widths: n.edgeconv_widths.clone(),
            node_hidden: n.node_hidden.clone(),
            edge_hidden: n.edge_hidden.clone(),
            macro_hidden: n.macro_hidden.clone(),
            dropout_rate: n.dropout_rate,
        }
    }

    pub fn ohgc(&self) -> OhgcConfig {
        self.ohgc
            .clone()
            .unwrap_or_else(|| OhgcConfig::for_types(self.skeleton.num_types))
    }

    /// Applies `--seed` to every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.rng_seed = seed;
        self.train.seed = seed;
        self.network.init_seed = seed;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(
            r#"
            version = 1
            [topology]
            kind = "tree"
            [ohgc]
            merge_threshold = 0.6
            max_iterations = 4
            [train]
            learning_rate = 1e-3
            steps = 3
            [train.weights]
            final_macro = 0.0
            "#,
        )
        .unwrap();
        assert_eq!(cfg.topology().kind, TopologyKind::Tree);
        assert_eq!(cfg.ohgc().merge_threshold, 0.6);
        assert_eq!(cfg.train.steps, 3);
        assert_eq!(cfg.train.weights.final_macro, 0.0);
        assert_eq!(cfg.train.weights.edge, 1.0);
    }

    #[test]
    fn unknown_keys_and_versions_are_rejected() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("version = 9").is_err());
        assert!(RunConfig::parse("[synth]\nkeypoint_drop_prob = 2.0").is_err());
    }

    #[test]
    fn default_iteration_cap() {
        assert_eq!(RunConfig::default().ohgc().max_iterations, 10);
    }
}
