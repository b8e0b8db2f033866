//! Episodic sampling: N-way K-shot tasks drawn from a class-indexed dataset.

pub mod dataset;
pub mod synthetic;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

pub use dataset::{load_dataset, write_dataset, ClassRecord, Dataset, Split, Splits};
pub use synthetic::{gaussian_blobs, GaussianBlobsParams};

/// Shape of one episode: M tasks, each N-way with K support and Q query
/// examples per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
    pub tasks_per_episode: usize,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_way", self.n_way),
            ("n_shot", self.n_shot),
            ("n_query", self.n_query),
            ("tasks_per_episode", self.tasks_per_episode),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Same task shape with a single task per episode.
    pub fn single_task(&self) -> EpisodeSpec {
        EpisodeSpec {
            tasks_per_episode: 1,
            ..*self
        }
    }
}

/// One example inside a task. `example_index` is its row within the source
/// class, kept so disjointness is checkable without comparing floats.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    pub features: Vec<f64>,
    pub local_label: usize,
    pub example_index: usize,
}

/// One N-way classification problem. Local label `l` corresponds to the
/// global class `class_ids[l]`; `coarse_ids`, when present, aligns with
/// `class_ids`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub class_ids: Vec<usize>,
    pub coarse_ids: Option<Vec<usize>>,
    pub support: Vec<TaskExample>,
    pub query: Vec<TaskExample>,
}

impl Task {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    /// Coarse id of the class behind a local label. Errors when the task
    /// carries no coarse ids.
    pub fn coarse_of_local(&self, local_label: usize) -> Result<usize> {
        self.coarse_ids
            .as_ref()
            .and_then(|ids| ids.get(local_label).copied())
            .ok_or(Error::MissingPartials)
    }

    pub fn support_matrix<S: Scalar>(&self) -> (Matrix<S>, Vec<usize>) {
        examples_to_matrix(&self.support)
    }

    pub fn query_matrix<S: Scalar>(&self) -> (Matrix<S>, Vec<usize>) {
        examples_to_matrix(&self.query)
    }
}

fn examples_to_matrix<S: Scalar>(examples: &[TaskExample]) -> (Matrix<S>, Vec<usize>) {
    let rows = examples.len();
    let cols = examples.first().map_or(0, |e| e.features.len());
    let mut m = Matrix::zeros(rows, cols);
    let mut labels = Vec::with_capacity(rows);
    for (r, ex) in examples.iter().enumerate() {
        for (c, &v) in ex.features.iter().enumerate() {
            m.row_mut(r)[c] = S::of(v);
        }
        labels.push(ex.local_label);
    }
    (m, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub tasks: Vec<Task>,
}

/// Draws one task: `n_way` classes uniformly without replacement from the
/// split, then `n_shot + n_query` distinct examples per class, support
/// first. Consumes the rng sequentially, so a fixed rng state fixes the
/// task.
pub fn sample_task<R: Rng>(dataset: &Dataset, split: Split, spec: &EpisodeSpec, rng: &mut R) -> Result<Task> {
    spec.validate()?;
    let split_ids = dataset.splits().get(split);
    if split_ids.len() < spec.n_way {
        return Err(Error::SplitTooSmall {
            split: split.to_string(),
            available: split_ids.len(),
            needed: spec.n_way,
        });
    }
    let chosen = index_sample(rng, split_ids.len(), spec.n_way);
    let mut class_ids = Vec::with_capacity(spec.n_way);
    let mut coarse_ids = Vec::with_capacity(spec.n_way);
    let mut all_coarse = true;
    let mut support = Vec::with_capacity(spec.n_way * spec.n_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.n_query);
    let per_class = spec.n_shot + spec.n_query;
    for (local, idx) in chosen.iter().enumerate() {
        let class_id = split_ids[idx];
        let class = dataset
            .class_by_id(class_id)
            .expect("split ids validated against classes");
        if class.examples.len() < per_class {
            return Err(Error::ClassTooSmall {
                class_id,
                available: class.examples.len(),
                needed: per_class,
            });
        }
        let picks = index_sample(rng, class.examples.len(), per_class);
        for (j, ex_idx) in picks.iter().enumerate() {
            let example = TaskExample {
                features: class.examples[ex_idx].clone(),
                local_label: local,
                example_index: ex_idx,
            };
            if j < spec.n_shot {
                support.push(example);
            } else {
                query.push(example);
            }
        }
        class_ids.push(class_id);
        match class.coarse_id {
            Some(c) => coarse_ids.push(c),
            None => all_coarse = false,
        }
    }
    Ok(Task {
        class_ids,
        coarse_ids: all_coarse.then_some(coarse_ids),
        support,
        query,
    })
}

/// Draws `tasks_per_episode` tasks independently from the same stream.
/// Classes may repeat across tasks within an episode; within a task they
/// cannot.
pub fn sample_episode<R: Rng>(
    dataset: &Dataset,
    split: Split,
    spec: &EpisodeSpec,
    index: u64,
    rng: &mut R,
) -> Result<Episode> {
    let mut tasks = Vec::with_capacity(spec.tasks_per_episode);
    for _ in 0..spec.tasks_per_episode {
        tasks.push(sample_task(dataset, split, spec, rng)?);
    }
    Ok(Episode { index, tasks })
}
