//! Run configuration: one JSON document pins an entire experiment.
//!
//! Unknown keys are rejected everywhere so a typo cannot silently fall back
//! to a default, and the sha256 of the canonical serialization stamps every
//! artifact the run produces.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Activation;
use crate::episodes::synthetic::GaussianBlobsParams;
use crate::episodes::EpisodeSpec;
use crate::error::{Error, Result};
use crate::losses::DistanceKind;
use crate::maml::MamlConfig;
use crate::optim::OptimizerKind;
use crate::weights::{GainSchedule, WeightOptKind};

/// Which meta-learner the run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Maml,
    Protonet,
}

/// Which weight optimizer runs in the second training phase. `None` keeps
/// the weights at all-ones for the whole run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtmKind {
    #[default]
    None,
    Spsa,
    SpsaTrack,
    Backprop,
    InnerFirstOrder,
    SpsaCoarse,
}

impl MtmKind {
    pub fn weight_opt_kind(self) -> Option<WeightOptKind> {
        match self {
            MtmKind::None => None,
            MtmKind::Spsa => Some(WeightOptKind::Spsa),
            MtmKind::SpsaTrack => Some(WeightOptKind::SpsaTrack),
            MtmKind::Backprop => Some(WeightOptKind::Backprop),
            MtmKind::InnerFirstOrder => Some(WeightOptKind::InnerFirstOrder),
            MtmKind::SpsaCoarse => Some(WeightOptKind::SpsaCoarse),
        }
    }

    /// Label used in the trajectory CSV's kind column.
    pub fn label(self) -> &'static str {
        match self {
            MtmKind::None => "none",
            MtmKind::Spsa => "spsa",
            MtmKind::SpsaTrack => "spsa_track",
            MtmKind::Backprop => "backprop",
            MtmKind::InnerFirstOrder => "inner_first_order",
            MtmKind::SpsaCoarse => "spsa_coarse",
        }
    }
}

/// Hidden layer widths plus the embedding width. For the metric-based
/// algorithm the network ends in `embed_dim`; for the adaptation-based one
/// it ends in the episode's way count and `embed_dim` is unused.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dims: vec![64, 64],
            embed_dim: 64,
            activation: Activation::Relu,
        }
    }
}

/// Step decay of the model learning rate: multiply by `factor` once the
/// epoch index passes `at_fraction` of the total epoch count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    pub factor: f64,
    pub at_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Nesterov momentum; ignored by Adam.
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay: Option<LrDecay>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_decay: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("optimizer lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) || !(d.at_fraction > 0.0 && d.at_fraction < 1.0)
            {
                return Err(Error::Config(format!(
                    "lr decay needs factor in (0, 1] and at_fraction in (0, 1), got {d:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Adaptation hyperparameters exposed in the run config. The outer step is
/// owned by [`OptimizerConfig`], so no meta learning rate appears here.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamlSection {
    pub adapt_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_eval: usize,
    pub second_order: bool,
}

impl Default for MamlSection {
    fn default() -> Self {
        let d = MamlConfig::default();
        MamlSection {
            adapt_lr: d.adapt_lr,
            inner_steps_train: d.inner_steps_train,
            inner_steps_eval: d.inner_steps_eval,
            second_order: d.second_order,
        }
    }
}

impl MamlSection {
    pub fn to_maml_config(&self, meta_lr: f64) -> MamlConfig {
        MamlConfig {
            adapt_lr: self.adapt_lr,
            meta_lr,
            inner_steps_train: self.inner_steps_train,
            inner_steps_eval: self.inner_steps_eval,
            second_order: self.second_order,
        }
    }
}

/// Where the run's classes come from: a dataset directory on disk or a
/// generated benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(GaussianBlobsParams),
}

fn default_eval_episodes() -> usize {
    1000
}

fn default_val_episodes() -> usize {
    200
}

fn default_inner_weight_lr() -> f64 {
    0.01
}

fn default_true() -> bool {
    true
}

/// Everything a run needs, mirrored one-to-one in the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub mtm: MtmKind,
    pub episode: EpisodeSpec,
    /// Epoch count of the weighted phase; the weight optimizer runs only
    /// here.
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Unweighted warm-up epochs before the weighted phase.
    #[serde(default)]
    pub pretrain_epochs: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_val_episodes")]
    pub val_episodes: usize,
    pub seed: u64,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub maml: MamlSection,
    #[serde(default)]
    pub gains: GainSchedule,
    /// Rescale sampled-kind weights to the all-ones norm at each epoch
    /// boundary of the weighted phase.
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub distance: DistanceKind,
    /// Learning rate of the dedicated Adam used by the inner_first_order
    /// weight optimizer.
    #[serde(default = "default_inner_weight_lr")]
    pub inner_weight_lr: f64,
    pub data: DataSource,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        self.optimizer.validate()?;
        self.gains.validate()?;
        if self.epochs + self.pretrain_epochs == 0 {
            return Err(Error::Config("run needs at least one epoch".into()));
        }
        if self.episodes_per_epoch == 0 {
            return Err(Error::Config("episodes_per_epoch must be at least 1".into()));
        }
        if self.eval_episodes == 0 {
            return Err(Error::Config("eval_episodes must be at least 1".into()));
        }
        if self.val_episodes == 0 {
            return Err(Error::Config("val_episodes must be at least 1".into()));
        }
        if self.backbone.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be at least 1".into()));
        }
        if self.backbone.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        if !(self.maml.adapt_lr.is_finite() && self.maml.adapt_lr > 0.0) {
            return Err(Error::Config(format!(
                "adapt_lr must be positive, got {}",
                self.maml.adapt_lr
            )));
        }
        if self.maml.inner_steps_train == 0 || self.maml.inner_steps_eval == 0 {
            return Err(Error::Config("inner step counts must be at least 1".into()));
        }
        if !(self.inner_weight_lr.is_finite() && self.inner_weight_lr > 0.0) {
            return Err(Error::Config(format!(
                "inner_weight_lr must be positive, got {}",
                self.inner_weight_lr
            )));
        }
        if let DataSource::Synthetic(params) = &self.data {
            params.validate()?;
            if self.mtm == MtmKind::SpsaCoarse && params.coarse_groups == 0 {
                return Err(Error::Config(
                    "spsa_coarse needs a dataset with coarse ids; set coarse_groups >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Layer widths of the model this config trains.
    pub fn layer_dims(&self, feature_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.backbone.hidden_dims.len() + 2);
        dims.push(feature_dim);
        dims.extend_from_slice(&self.backbone.hidden_dims);
        dims.push(match self.algorithm {
            Algorithm::Maml => self.episode.n_way,
            Algorithm::Protonet => self.backbone.embed_dim,
        });
        dims
    }

    pub fn maml_config(&self) -> MamlConfig {
        self.maml.to_maml_config(self.optimizer.lr)
    }

    /// Hex sha256 of the canonical JSON form; stamps checkpoints and
    /// results so artifacts can be traced back to their exact config.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&json);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The documented desk-scale benchmark: 16-dim blobs with 20/6/8 class
    /// splits, 1-shot 5-way episodes of four tasks.
    pub fn desk_scale(algorithm: Algorithm, mtm: MtmKind, seed: u64) -> RunConfig {
        RunConfig {
            algorithm,
            mtm,
            episode: EpisodeSpec {
                n_way: 5,
                n_shot: 1,
                n_query: 15,
                tasks_per_episode: 4,
            },
            epochs: 20,
            episodes_per_epoch: 100,
            pretrain_epochs: 5,
            eval_episodes: 1000,
            val_episodes: 200,
            seed,
            backbone: BackboneConfig {
                hidden_dims: vec![32, 32],
                embed_dim: 32,
                activation: Activation::Relu,
            },
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 0.0,
                lr_decay: Some(LrDecay {
                    factor: 0.1,
                    at_fraction: 2.0 / 3.0,
                }),
            },
            maml: MamlSection::default(),
            gains: GainSchedule::default(),
            normalize: true,
            distance: DistanceKind::SquaredEuclidean,
            inner_weight_lr: 0.01,
            data: DataSource::Synthetic(GaussianBlobsParams {
                num_classes: 34,
                dim: 16,
                examples_per_class: 40,
                coarse_groups: 4,
                seed,
                radius: 4.0,
                sigma: 0.5,
                splits: (20, 6, 8),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config() -> RunConfig {
        let mut cfg = RunConfig::desk_scale(Algorithm::Protonet, MtmKind::Spsa, 7);
        cfg.epochs = 2;
        cfg.episodes_per_epoch = 3;
        cfg.pretrain_epochs = 1;
        cfg.val_episodes = 4;
        cfg.eval_episodes = 4;
        cfg
    }

    #[test]
    fn json_roundtrip_preserves_the_config() {
        let cfg = smoke_config();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(smoke_config()).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("typo_field".into(), serde_json::json!(1));
        assert!(serde_json::from_value::<RunConfig>(value).is_err());
    }

    #[test]
    fn optional_fields_fall_back_to_defaults() {
        let json = r#"{
            "algorithm": "protonet",
            "episode": {"n_way": 2, "n_shot": 1, "n_query": 3, "tasks_per_episode": 2},
            "epochs": 1,
            "episodes_per_epoch": 5,
            "seed": 3,
            "data": {"synthetic": {"num_classes": 8, "dim": 4, "examples_per_class": 10, "coarse_groups": 0, "seed": 3}}
        }"#;
        let cfg: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.mtm, MtmKind::None);
        assert_eq!(cfg.eval_episodes, 1000);
        assert_eq!(cfg.val_episodes, 200);
        assert!(cfg.normalize);
        assert_eq!(cfg.gains, GainSchedule::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_fields() {
        let mut cfg = smoke_config();
        cfg.eval_episodes = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = smoke_config();
        cfg.epochs = 0;
        cfg.pretrain_epochs = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = smoke_config();
        cfg.optimizer.lr = -1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = smoke_config();
        cfg.mtm = MtmKind::SpsaCoarse;
        if let DataSource::Synthetic(p) = &mut cfg.data {
            p.coarse_groups = 0;
        }
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_is_stable_and_field_sensitive() {
        let cfg = smoke_config();
        let h1 = cfg.config_hash();
        assert_eq!(h1.len(), 64);
        assert_eq!(h1, cfg.config_hash());
        let mut other = smoke_config();
        other.seed += 1;
        assert_ne!(h1, other.config_hash());
    }

    #[test]
    fn layer_dims_end_in_the_algorithm_head() {
        let cfg = smoke_config();
        let dims = cfg.layer_dims(16);
        assert_eq!(dims.first(), Some(&16));
        assert_eq!(dims.last(), Some(&cfg.backbone.embed_dim));

        let mut maml = smoke_config();
        maml.algorithm = Algorithm::Maml;
        let dims = maml.layer_dims(16);
        assert_eq!(dims.last(), Some(&maml.episode.n_way));
    }
}
