//! Synthetic Gaussian-blob datasets for end-to-end runs without real data.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_stream, StreamKind};

use super::dataset::{ClassRecord, Dataset, Splits};

/// Generator parameters. Class means sit on the sphere of radius `radius`;
/// examples are the mean plus isotropic noise of scale `sigma`. When
/// `coarse_groups > 0`, each class's coarse id is the nearest of that many
/// random anchor directions, giving geometrically coherent groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianBlobsParams {
    pub num_classes: usize,
    pub dim: usize,
    pub examples_per_class: usize,
    pub coarse_groups: usize,
    pub seed: u64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Class counts per split, assigned in class-id order: the first
    /// `splits.0` classes go to train, the next to val, the rest to test.
    #[serde(default = "default_split_counts")]
    pub splits: (usize, usize, usize),
}

fn default_radius() -> f64 {
    4.0
}

fn default_sigma() -> f64 {
    1.0
}

fn default_split_counts() -> (usize, usize, usize) {
    (0, 0, 0)
}

impl GaussianBlobsParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 || self.examples_per_class == 0 {
            return Err(Error::Config(
                "num_classes, dim, and examples_per_class must be at least 1".into(),
            ));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::Config(format!(
                "radius must be finite and positive, got {}",
                self.radius
            )));
        }
        // sigma = 0 is a legal degenerate case: every example equals its
        // class mean. Only negative or non-finite scales are invalid.
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        let (tr, va, te) = self.effective_splits();
        if tr + va + te != self.num_classes {
            return Err(Error::Config(format!(
                "split counts {}+{}+{} do not sum to num_classes {}",
                tr, va, te, self.num_classes
            )));
        }
        Ok(())
    }

    /// `(0, 0, 0)` means "default": roughly 60/20/20 with every remainder
    /// going to train.
    fn effective_splits(&self) -> (usize, usize, usize) {
        if self.splits != (0, 0, 0) {
            return self.splits;
        }
        let va = self.num_classes / 5;
        let te = self.num_classes / 5;
        (self.num_classes - va - te, va, te)
    }
}

fn unit_direction<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Builds a Gaussian-blob dataset. Fully determined by `params` (including
/// the seed); independent of call order because every stage draws from its
/// own derived stream.
pub fn gaussian_blobs(params: &GaussianBlobsParams) -> Result<Dataset> {
    params.validate()?;
    let mut mean_rng = derive_stream(params.seed, StreamKind::Synthetic(0));
    let means: Vec<Vec<f64>> = (0..params.num_classes)
        .map(|_| {
            unit_direction(params.dim, &mut mean_rng)
                .into_iter()
                .map(|x| x * params.radius)
                .collect()
        })
        .collect();

    let anchors: Vec<Vec<f64>> = if params.coarse_groups > 0 {
        let mut anchor_rng = derive_stream(params.seed, StreamKind::Synthetic(1));
        (0..params.coarse_groups)
            .map(|_| {
                unit_direction(params.dim, &mut anchor_rng)
                    .into_iter()
                    .map(|x| x * params.radius)
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut classes = Vec::with_capacity(params.num_classes);
    for (id, mean) in means.iter().enumerate() {
        let coarse_id = (!anchors.is_empty()).then(|| {
            anchors
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    squared_distance(mean, a)
                        .partial_cmp(&squared_distance(mean, b))
                        .expect("distances are finite")
                })
                .map(|(k, _)| k)
                .expect("at least one anchor")
        });
        let mut noise_rng = derive_stream(params.seed, StreamKind::Synthetic(2 + id as u64));
        let examples = (0..params.examples_per_class)
            .map(|_| {
                mean.iter()
                    .map(|&m| m + params.sigma * noise_rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        classes.push(ClassRecord {
            id,
            coarse_id,
            examples,
        });
    }

    let (tr, va, _te) = params.effective_splits();
    let splits = Splits {
        train: (0..tr).collect(),
        val: (tr..tr + va).collect(),
        test: (tr + va..params.num_classes).collect(),
    };
    Dataset::new(
        format!("gaussian_blobs_seed{}", params.seed),
        params.dim,
        classes,
        splits,
    )
}
