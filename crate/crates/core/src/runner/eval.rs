//! Episode-level evaluation: mean accuracy over many seeded single-task
//! episodes with a normal-approximation 95% confidence interval.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::episodes::dataset::{Dataset, Split};
use crate::episodes::{sample_episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::losses::DistanceKind;
use crate::maml::{maml_eval, MamlConfig};
use crate::protonet::protonet_eval;
use crate::rng::{derive_stream, StreamKind};
use crate::runner::config::Algorithm;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_acc: f64,
    /// 1.96 times the standard error of the per-episode accuracies. A
    /// single episode has no spread, so its half-width is zero.
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

/// Mean and 95% half-width of a sample, using the n-1 variance estimate.
pub fn mean_and_ci95(per_episode: &[f64]) -> Result<(f64, f64)> {
    if per_episode.is_empty() {
        return Err(Error::EmptyBatch {
            context: "evaluation episodes",
        });
    }
    let n = per_episode.len() as f64;
    let mean = per_episode.iter().sum::<f64>() / n;
    if per_episode.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = per_episode.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, 1.96 * var.sqrt() / n.sqrt()))
}

/// Which derived stream family supplies episode randomness, so validation
/// and final evaluation never share draws with training or each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalStream {
    Validation,
    Test,
}

impl EvalStream {
    fn stream(self, index: u64) -> StreamKind {
        match self {
            EvalStream::Validation => StreamKind::ValEpisode(index),
            EvalStream::Test => StreamKind::EvalEpisode(index),
        }
    }
}

/// Everything the episode scorer needs besides the model itself.
pub struct EvalSetup<'a> {
    pub algorithm: Algorithm,
    pub maml: MamlConfig,
    pub distance: DistanceKind,
    pub dataset: &'a Dataset,
    pub split: Split,
    pub spec: EpisodeSpec,
    pub episodes: usize,
    pub seed: u64,
    pub stream: EvalStream,
}

/// Scores `episodes` single-task episodes. Episode i always comes from the
/// stream (seed, family, i), so the same setup replays identically and one
/// epoch's validation set matches the next epoch's.
pub fn evaluate<S: Scalar>(backbone: &Backbone<S>, setup: &EvalSetup) -> Result<EvalReport> {
    let spec = setup.spec.single_task();
    let mut per_episode = Vec::with_capacity(setup.episodes);
    for i in 0..setup.episodes as u64 {
        let mut rng = derive_stream(setup.seed, setup.stream.stream(i));
        let episode = sample_episode(setup.dataset, setup.split, &spec, i, &mut rng)?;
        let eval = match setup.algorithm {
            Algorithm::Maml => maml_eval(backbone, &episode, &setup.maml)?,
            Algorithm::Protonet => protonet_eval(backbone, &episode, setup.distance)?,
        };
        per_episode.push(eval.accuracy);
    }
    let (mean_acc, ci95) = mean_and_ci95(&per_episode)?;
    Ok(EvalReport {
        mean_acc,
        ci95,
        per_episode,
    })
}
