//! Prototype-based episodic training: embed support and query sets with the
//! backbone, classify queries by distance to class-mean prototypes, and take
//! one meta-optimizer step per episode on the combined task objective.

use crate::backbone::Backbone;
use crate::episodes::{Episode, Task};
use crate::error::{Error, Result};
use crate::losses::{
    bucket_partials_by_coarse, protonet_outcome, DistanceKind, MultiTaskWeights, TaskLosses,
    WeightMode,
};
use crate::optim::Optimizer;
use crate::params::ParamVector;
use crate::scalar::Scalar;
use crate::EpisodeEval;

/// One task pushed through the backbone and scored against prototypes.
#[derive(Clone, Debug)]
pub struct ProtoTaskOutcome<S> {
    /// Unweighted mean query loss.
    pub loss: S,
    /// Partials of `loss` by local class; they sum to `loss`.
    pub per_class_local: Vec<S>,
    /// The value the gradient differentiates (equals `loss` without class
    /// weights).
    pub weighted_loss: S,
    pub grad: ParamVector<S>,
    pub correct: usize,
    pub total: usize,
}

/// Embeds support and query rows in one batch, computes the prototype loss,
/// and backpropagates to the backbone parameters. `class_weights`, indexed
/// by local class, scale each query row's share of the differentiated loss
/// by its true class's weight.
pub fn protonet_task_outcome<S: Scalar>(
    backbone: &Backbone<S>,
    task: &Task,
    distance: DistanceKind,
    class_weights: Option<&[S]>,
) -> Result<ProtoTaskOutcome<S>> {
    if task.support.is_empty() {
        return Err(Error::EmptyBatch {
            context: "task support set",
        });
    }
    if task.query.is_empty() {
        return Err(Error::EmptyBatch {
            context: "task query set",
        });
    }
    let (support, support_labels) = task.support_matrix::<S>();
    let (query, query_labels) = task.query_matrix::<S>();
    if support.cols() != backbone.input_dim() {
        return Err(Error::Dimension {
            context: "backbone input width",
            expected: backbone.input_dim(),
            actual: support.cols(),
        });
    }
    let n_support = support.rows();
    let batch = support.vstack(&query)?;
    let trace = backbone.forward_trace(&batch)?;
    let embeddings = trace.output();
    let support_emb = embeddings.slice_rows(0, n_support);
    let query_emb = embeddings.slice_rows(n_support, embeddings.rows());
    let outcome = protonet_outcome(
        &support_emb,
        &support_labels,
        &query_emb,
        &query_labels,
        task.n_way(),
        distance,
        class_weights,
    )?;
    let d_embeddings = outcome.d_support.vstack(&outcome.d_query)?;
    let grad = backbone.backward(&trace, &d_embeddings);
    Ok(ProtoTaskOutcome {
        loss: outcome.loss,
        per_class_local: outcome.per_class,
        weighted_loss: outcome.weighted_loss,
        grad,
        correct: outcome.correct,
        total: query_labels.len(),
    })
}

fn coarse_class_weights<S: Scalar>(
    task: &Task,
    weights: &MultiTaskWeights<S>,
) -> Result<Vec<S>> {
    let coarse = task.coarse_ids.as_ref().ok_or(Error::MissingPartials)?;
    coarse
        .iter()
        .enumerate()
        .map(|(local, &id)| {
            if id >= weights.len() {
                return Err(Error::LabelOutOfRange {
                    label: id,
                    n_classes: weights.len(),
                    row: local,
                });
            }
            Ok(weights.model_scale(id))
        })
        .collect()
}

/// Gradient of the combined episode objective and the per-task losses it
/// was built from. Without weights the objective is the mean of task
/// losses; per-task weights produce the weighted sum of task losses, and
/// per-coarse weights scale every query row by its class's coarse weight.
/// Weight log terms do not depend on the parameters and are omitted.
pub fn episode_grad<S: Scalar>(
    backbone: &Backbone<S>,
    episode: &Episode,
    distance: DistanceKind,
    weights: Option<&MultiTaskWeights<S>>,
) -> Result<(ParamVector<S>, TaskLosses<S>)> {
    if episode.tasks.is_empty() {
        return Err(Error::EmptyBatch {
            context: "episode tasks",
        });
    }
    if let Some(w) = weights {
        if w.mode() == WeightMode::PerTask && w.len() != episode.tasks.len() {
            return Err(Error::Dimension {
                context: "per-task weights",
                expected: episode.tasks.len(),
                actual: w.len(),
            });
        }
    }
    let inv_m = S::one() / S::of(episode.tasks.len() as f64);
    let mut total: Option<ParamVector<S>> = None;
    let mut values = Vec::with_capacity(episode.tasks.len());
    let mut buckets = Vec::with_capacity(episode.tasks.len());
    let mut all_coarse = true;
    for (i, task) in episode.tasks.iter().enumerate() {
        let class_weights = match weights {
            Some(w) if w.mode() == WeightMode::PerCoarse => {
                Some(coarse_class_weights(task, w)?)
            }
            _ => None,
        };
        let outcome = protonet_task_outcome(backbone, task, distance, class_weights.as_deref())?;
        let scale = match weights {
            None => inv_m,
            Some(w) if w.mode() == WeightMode::PerTask => w.model_scale(i),
            Some(_) => S::one(),
        };
        let mut g = outcome.grad;
        match total.as_mut() {
            None => {
                g.scale(scale);
                total = Some(g);
            }
            Some(tot) => tot.add_scaled(scale, &g)?,
        }
        values.push(outcome.loss);
        match &task.coarse_ids {
            Some(coarse) => {
                let (_, query_labels) = task.query_matrix::<S>();
                buckets.push(bucket_partials_by_coarse(
                    &outcome.per_class_local,
                    &query_labels,
                    coarse,
                ));
            }
            None => all_coarse = false,
        }
    }
    let task_losses = TaskLosses {
        values,
        per_class: all_coarse.then_some(buckets),
    };
    Ok((total.expect("episode has at least one task"), task_losses))
}

/// Forward-only pass: per-task losses (and coarse partials) at the current
/// parameters, for the weight optimizer's measurement step.
pub fn episode_task_losses<S: Scalar>(
    backbone: &Backbone<S>,
    episode: &Episode,
    distance: DistanceKind,
) -> Result<TaskLosses<S>> {
    episode_grad(backbone, episode, distance, None).map(|(_, losses)| losses)
}

/// One meta-optimizer step on the combined episode objective. Returns the
/// per-task losses measured at the pre-step parameters.
pub fn protonet_train_step<S: Scalar>(
    backbone: &mut Backbone<S>,
    episode: &Episode,
    distance: DistanceKind,
    weights: Option<&MultiTaskWeights<S>>,
    optimizer: &mut Optimizer<S>,
) -> Result<TaskLosses<S>> {
    let (grad, losses) = episode_grad(backbone, episode, distance, weights)?;
    optimizer.step(backbone.params_mut().values_mut(), grad.values())?;
    Ok(losses)
}

/// Scores every task's query rows by nearest prototype.
pub fn protonet_eval<S: Scalar>(
    backbone: &Backbone<S>,
    episode: &Episode,
    distance: DistanceKind,
) -> Result<EpisodeEval<S>> {
    if episode.tasks.is_empty() {
        return Err(Error::EmptyBatch {
            context: "episode tasks",
        });
    }
    let mut per_task = Vec::with_capacity(episode.tasks.len());
    let mut correct = 0usize;
    let mut rows = 0usize;
    let mut loss_sum = S::zero();
    for task in &episode.tasks {
        let outcome = protonet_task_outcome(backbone, task, distance, None)?;
        per_task.push(outcome.correct as f64 / outcome.total as f64);
        correct += outcome.correct;
        rows += outcome.total;
        loss_sum += outcome.loss;
    }
    Ok(EpisodeEval {
        per_task,
        accuracy: correct as f64 / rows as f64,
        mean_query_loss: loss_sum / S::of(episode.tasks.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Activation;
    use crate::episodes::{
        gaussian_blobs, sample_episode, EpisodeSpec, GaussianBlobsParams, Split, TaskExample,
    };
    use crate::optim::OptimizerKind;
    use crate::params::ShapeTable;
    use crate::rng::{derive_stream, StreamKind};
    use approx::assert_relative_eq;

    fn mk(features: &[f64], local: usize, idx: usize) -> TaskExample {
        TaskExample {
            features: features.to_vec(),
            local_label: local,
            example_index: idx,
        }
    }

    fn separated_task() -> Task {
        Task {
            class_ids: vec![0, 1],
            coarse_ids: Some(vec![0, 1]),
            support: vec![
                mk(&[2.0, 2.0], 0, 0),
                mk(&[2.2, 1.8], 0, 1),
                mk(&[-2.0, -2.0], 1, 0),
                mk(&[-1.8, -2.2], 1, 1),
            ],
            query: vec![
                mk(&[2.1, 2.1], 0, 2),
                mk(&[1.9, 2.0], 0, 3),
                mk(&[-2.1, -1.9], 1, 2),
                mk(&[-2.0, -2.1], 1, 3),
            ],
        }
    }

    fn identity_net() -> Backbone<f64> {
        // Single linear layer with identity weights: embeddings equal inputs.
        let shape = ShapeTable::from_layer_dims(&[2, 2]);
        let mut params = ParamVector::zeros(shape);
        params.layer_weights_mut(0)[0] = 1.0;
        params.layer_weights_mut(0)[3] = 1.0;
        Backbone::from_params(Activation::Relu, params)
    }

    fn seeded_net(dims: &[usize], activation: Activation, seed: u64) -> Backbone<f64> {
        let mut rng = derive_stream(seed, StreamKind::Init);
        Backbone::new_seeded(dims, activation, &mut rng)
    }

    #[test]
    fn identity_embedding_classifies_separated_clusters_perfectly() {
        let net = identity_net();
        let outcome = protonet_task_outcome(
            &net,
            &separated_task(),
            DistanceKind::SquaredEuclidean,
            None,
        )
        .unwrap();
        assert_eq!(outcome.correct, 4);
        assert_eq!(outcome.total, 4);
        assert!(outcome.loss < 0.01, "clusters are far apart: {}", outcome.loss);
    }

    #[test]
    fn duplicate_prototypes_cost_at_least_log_two_per_query() {
        // Both classes share the same single support point, so every query
        // sees equidistant prototypes and an exactly uniform softmax.
        let task = Task {
            class_ids: vec![0, 1],
            coarse_ids: None,
            support: vec![mk(&[0.0, 0.0], 0, 0), mk(&[0.0, 0.0], 1, 0)],
            query: vec![mk(&[1.0, 0.5], 0, 1), mk(&[-0.3, 0.9], 1, 1)],
        };
        let net = identity_net();
        let outcome =
            protonet_task_outcome(&net, &task, DistanceKind::SquaredEuclidean, None).unwrap();
        assert_relative_eq!(outcome.loss, 2.0f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn task_gradient_matches_finite_differences() {
        for distance in [DistanceKind::SquaredEuclidean, DistanceKind::Euclidean] {
            let net = seeded_net(&[2, 5, 3], Activation::Tanh, 7);
            let task = separated_task();
            let class_weights = vec![0.25, 1.5];
            let outcome =
                protonet_task_outcome(&net, &task, distance, Some(&class_weights)).unwrap();
            let h = 1e-5;
            for i in 0..net.params().len() {
                let eval = |delta: f64| {
                    let mut p = net.params().clone();
                    p.values_mut()[i] += delta;
                    let shifted = net.with_params(p);
                    protonet_task_outcome(&shifted, &task, distance, Some(&class_weights))
                        .unwrap()
                        .weighted_loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let g = outcome.grad.values()[i];
                let denom = fd.abs().max(1.0);
                assert!(
                    (g - fd).abs() / denom < 1e-4,
                    "{distance:?} param {i}: analytic {g} vs finite difference {fd}"
                );
            }
        }
    }

    #[test]
    fn single_task_unit_weight_step_matches_unweighted_step_exactly() {
        let task = separated_task();
        let episode = Episode {
            index: 0,
            tasks: vec![task],
        };
        let net = seeded_net(&[2, 4, 3], Activation::Relu, 13);
        let mut plain = net.clone();
        let mut weighted = net;
        let mut opt_a = Optimizer::from_kind(OptimizerKind::SgdNesterov, 0.1, 0.9, 5e-4);
        let mut opt_b = Optimizer::from_kind(OptimizerKind::SgdNesterov, 0.1, 0.9, 5e-4);
        let ones = MultiTaskWeights::ones(1, WeightMode::PerTask);
        protonet_train_step(
            &mut plain,
            &episode,
            DistanceKind::SquaredEuclidean,
            None,
            &mut opt_a,
        )
        .unwrap();
        protonet_train_step(
            &mut weighted,
            &episode,
            DistanceKind::SquaredEuclidean,
            Some(&ones),
            &mut opt_b,
        )
        .unwrap();
        assert_eq!(plain.params().values(), weighted.params().values());
    }

    fn blob_episode(seed: u64, m: usize) -> (Backbone<f64>, Episode) {
        let ds = gaussian_blobs(&GaussianBlobsParams {
            num_classes: 8,
            dim: 4,
            examples_per_class: 6,
            coarse_groups: 2,
            seed,
            radius: 3.0,
            sigma: 0.4,
            splits: (8, 0, 0),
        })
        .unwrap();
        let spec = EpisodeSpec {
            n_way: 3,
            n_shot: 2,
            n_query: 2,
            tasks_per_episode: m,
        };
        let mut rng = derive_stream(seed, StreamKind::TrainEpisode(0));
        let episode = sample_episode(&ds, Split::Train, &spec, 0, &mut rng).unwrap();
        let net = seeded_net(&[4, 8, 3], Activation::Relu, seed);
        (net, episode)
    }

    #[test]
    fn per_task_weights_scale_task_gradients_linearly() {
        let (net, episode) = blob_episode(17, 2);
        let single = |i: usize| {
            let ep = Episode {
                index: 0,
                tasks: vec![episode.tasks[i].clone()],
            };
            // Single-task mean = the task gradient itself.
            episode_grad(&net, &ep, DistanceKind::SquaredEuclidean, None)
                .unwrap()
                .0
        };
        let g0 = single(0);
        let g1 = single(1);
        let weights = MultiTaskWeights::new(vec![2.0, 1.0], WeightMode::PerTask).unwrap();
        let (combined, _) =
            episode_grad(&net, &episode, DistanceKind::SquaredEuclidean, Some(&weights)).unwrap();
        for ((c, a), b) in combined.values().iter().zip(g0.values()).zip(g1.values()) {
            assert_relative_eq!(*c, 0.25 * a + b, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn frozen_parameters_give_identical_losses_per_episode_seed() {
        let (net, episode) = blob_episode(23, 3);
        let mut a = net.clone();
        let mut b = net;
        let mut opt_a = Optimizer::from_kind(OptimizerKind::SgdNesterov, 0.0, 0.9, 0.0);
        let mut opt_b = Optimizer::from_kind(OptimizerKind::SgdNesterov, 0.0, 0.9, 0.0);
        let la = protonet_train_step(
            &mut a,
            &episode,
            DistanceKind::SquaredEuclidean,
            None,
            &mut opt_a,
        )
        .unwrap();
        let lb = protonet_train_step(
            &mut b,
            &episode,
            DistanceKind::SquaredEuclidean,
            None,
            &mut opt_b,
        )
        .unwrap();
        assert_eq!(la.values, lb.values);
        assert_eq!(a.params().values(), b.params().values());
    }

    #[test]
    fn coarse_partials_bucket_by_group_and_sum_to_task_loss() {
        let (net, episode) = blob_episode(29, 2);
        let (_, losses) =
            episode_grad(&net, &episode, DistanceKind::SquaredEuclidean, None).unwrap();
        let per_class = losses.per_class.as_ref().expect("blobs carry coarse ids");
        for (map, &value) in per_class.iter().zip(&losses.values) {
            let total: f64 = map.values().sum();
            assert_relative_eq!(total, value, max_relative = 1e-12);
            for &id in map.keys() {
                assert!(id < 2);
            }
        }
    }

    /// 2x2 rotation by angle t, applied after the embedding layer.
    fn rotated_net(net: &Backbone<f64>, t: f64) -> Backbone<f64> {
        // Compose the final linear layer with a rotation: W R, b R. The
        // network then produces exactly rotated embeddings.
        let mut params = net.params().clone();
        let last = params.shape().n_layers() - 1;
        let (cos, sin) = (t.cos(), t.sin());
        let rotate = |x: f64, y: f64| (x * cos - y * sin, x * sin + y * cos);
        let shape = params.shape().layer(last);
        assert_eq!(shape.out_dim, 2);
        let w = params.layer_weights_mut(last);
        for r in 0..shape.in_dim {
            let (a, b) = rotate(w[r * 2], w[r * 2 + 1]);
            w[r * 2] = a;
            w[r * 2 + 1] = b;
        }
        let bias = params.layer_bias_mut(last);
        let (a, b) = rotate(bias[0], bias[1]);
        bias[0] = a;
        bias[1] = b;
        net.with_params(params)
    }

    #[test]
    fn predictions_are_invariant_under_embedding_rotations() {
        let (_, episode) = blob_episode(37, 3);
        // A 2-d embedding so a planar rotation covers the whole space.
        let net = seeded_net(&[4, 8, 2], Activation::Relu, 37);
        let base = protonet_eval(&net, &episode, DistanceKind::SquaredEuclidean).unwrap();
        for t in [0.3, 1.2, 2.5] {
            let rotated = rotated_net(&net, t);
            let eval = protonet_eval(&rotated, &episode, DistanceKind::SquaredEuclidean).unwrap();
            assert_eq!(eval.per_task, base.per_task, "rotation by {t} changed predictions");
            assert_relative_eq!(eval.mean_query_loss, base.mean_query_loss, max_relative = 1e-9);
        }
    }

    #[test]
    fn untrained_network_scores_near_chance() {
        // Class means nearly coincide relative to the noise, so the features
        // carry no class signal and any classifier sits at chance. (With
        // separated means even a random embedding beats chance, since random
        // projections roughly preserve the geometry.)
        let ds = gaussian_blobs(&GaussianBlobsParams {
            num_classes: 16,
            dim: 6,
            examples_per_class: 8,
            coarse_groups: 0,
            seed: 41,
            radius: 1e-6,
            sigma: 1.0,
            splits: (16, 0, 0),
        })
        .unwrap();
        let spec = EpisodeSpec {
            n_way: 4,
            n_shot: 1,
            n_query: 3,
            tasks_per_episode: 1,
        };
        let net = seeded_net(&[6, 8, 4], Activation::Relu, 41);
        let episodes = 200u64;
        let mut acc_sum = 0.0;
        for i in 0..episodes {
            let mut rng = derive_stream(41, StreamKind::EvalEpisode(i));
            let ep = sample_episode(&ds, Split::Train, &spec, i, &mut rng).unwrap();
            acc_sum += protonet_eval(&net, &ep, DistanceKind::SquaredEuclidean)
                .unwrap()
                .accuracy;
        }
        let mean = acc_sum / episodes as f64;
        let se = (0.25 * 0.75 / episodes as f64).sqrt();
        assert!(
            (mean - 0.25).abs() < 3.0 * se,
            "untrained accuracy {mean} not within 3 standard errors of chance"
        );
    }

    #[test]
    fn short_training_run_improves_validation_accuracy() {
        // Overlapping clusters: the untrained embedding starts well away
        // from the optimum so a short run has room to improve.
        let ds = gaussian_blobs(&GaussianBlobsParams {
            num_classes: 12,
            dim: 4,
            examples_per_class: 10,
            coarse_groups: 0,
            seed: 43,
            radius: 2.0,
            sigma: 1.5,
            splits: (8, 4, 0),
        })
        .unwrap();
        let spec = EpisodeSpec {
            n_way: 3,
            n_shot: 2,
            n_query: 3,
            tasks_per_episode: 2,
        };
        let mut net = seeded_net(&[4, 16, 4], Activation::Relu, 43);
        let mut opt = Optimizer::from_kind(OptimizerKind::SgdNesterov, 0.02, 0.9, 5e-4);

        let val = |net: &Backbone<f64>| -> f64 {
            let mut total = 0.0;
            for i in 0..10u64 {
                let mut rng = derive_stream(43, StreamKind::ValEpisode(i));
                let ep = sample_episode(&ds, Split::Val, &spec, i, &mut rng).unwrap();
                total += protonet_eval(net, &ep, DistanceKind::SquaredEuclidean)
                    .unwrap()
                    .mean_query_loss;
            }
            total / 10.0
        };

        let before = val(&net);
        for i in 0..80u64 {
            let mut rng = derive_stream(43, StreamKind::TrainEpisode(i));
            let ep = sample_episode(&ds, Split::Train, &spec, i, &mut rng).unwrap();
            protonet_train_step(&mut net, &ep, DistanceKind::SquaredEuclidean, None, &mut opt)
                .unwrap();
        }
        let after = val(&net);
        assert!(
            after < before,
            "validation loss should drop: before {before}, after {after}"
        );
    }
}
