//! Model checkpoints: flat parameters plus the shape needed to rebuild the
//! network, stamped with the config hash of the run that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Activation, Backbone};
use crate::error::{Error, Result};
use crate::params::{ParamVector, ShapeTable};
use crate::scalar::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub values: Vec<f64>,
    pub config_hash: String,
}

impl Checkpoint {
    pub fn from_backbone<S: Scalar>(backbone: &Backbone<S>, config_hash: &str) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            layer_dims: backbone.layer_dims(),
            activation: backbone.activation(),
            values: backbone.params().values().iter().map(|v| v.as_f64()).collect(),
            config_hash: config_hash.to_string(),
        }
    }

    pub fn to_backbone<S: Scalar>(&self) -> Result<Backbone<S>> {
        self.check()?;
        let shape = ShapeTable::from_layer_dims(&self.layer_dims);
        let values = self.values.iter().map(|&v| S::of(v)).collect();
        let params = ParamVector::from_values(values, shape)?;
        Ok(Backbone::from_params(self.activation, params))
    }

    fn check(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}, expected {}",
                self.format_version, CHECKPOINT_FORMAT_VERSION
            )));
        }
        if self.layer_dims.len() < 2 {
            return Err(Error::Checkpoint(
                "checkpoint needs at least an input and an output layer".into(),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json("checkpoint", e))?;
        fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::json("checkpoint", e))?;
        ckpt.check()?;
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, StreamKind};

    #[test]
    fn file_roundtrip_recovers_the_model_exactly() {
        let mut rng = derive_stream(5, StreamKind::Init);
        let net: Backbone<f64> = Backbone::new_seeded(&[4, 8, 3], Activation::Tanh, &mut rng);
        let ckpt = Checkpoint::from_backbone(&net, "abc123");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let back: Backbone<f64> = loaded.to_backbone().unwrap();
        assert_eq!(back.params().values(), net.params().values());
        assert_eq!(back.activation(), Activation::Tanh);
        assert_eq!(back.layer_dims(), vec![4, 8, 3]);
    }

    #[test]
    fn wrong_version_or_shape_is_rejected() {
        let mut rng = derive_stream(5, StreamKind::Init);
        let net: Backbone<f64> = Backbone::new_seeded(&[4, 3], Activation::Relu, &mut rng);
        let mut ckpt = Checkpoint::from_backbone(&net, "h");
        ckpt.format_version = 9;
        assert!(ckpt.to_backbone::<f64>().is_err());

        let mut ckpt = Checkpoint::from_backbone(&net, "h");
        ckpt.values.pop();
        assert!(ckpt.to_backbone::<f64>().is_err());
    }
}
