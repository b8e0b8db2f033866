//! Gradient-based meta-learning: per-task inner-loop adaptation and
//! meta-gradients that differentiate through it.
//!
//! The inner loop runs plain gradient descent on a task's support loss. The
//! meta-gradient of the query loss at the adapted parameters is obtained by
//! reverse accumulation over the recorded inner iterates: each step
//! `theta_next = theta - alpha * g(theta)` has Jacobian `I - alpha * H`, so
//! the backward pass repeatedly subtracts `alpha * H(theta_j) * v`, with
//! every Hessian-vector product computed exactly by evaluating the support
//! gradient over dual numbers. A first-order mode skips the correction and
//! treats the adapted parameters as constants.

use serde::{Deserialize, Serialize};

use crate::backbone::{backprop_grads, Backbone, ForwardTrace};
use crate::dual::Dual;
use crate::episodes::{Episode, Task};
use crate::error::{Error, Result};
use crate::losses::{
    bucket_partials_by_coarse, cross_entropy_stats, CrossEntropyHead, CrossEntropyStats,
    MultiTaskWeights, TaskLosses, WeightMode,
};
use crate::matrix::Matrix;
use crate::params::ParamVector;
use crate::scalar::Scalar;
use crate::EpisodeEval;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamlConfig {
    /// Inner-loop learning rate alpha.
    pub adapt_lr: f64,
    /// Meta learning rate beta, consumed by the caller's meta-optimizer.
    pub meta_lr: f64,
    pub inner_steps_train: usize,
    pub inner_steps_eval: usize,
    /// When false, the meta-gradient ignores the dependence of the adapted
    /// parameters on the initialization (first-order approximation).
    pub second_order: bool,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            adapt_lr: 0.01,
            meta_lr: 1e-3,
            inner_steps_train: 5,
            inner_steps_eval: 10,
            second_order: true,
        }
    }
}

impl MamlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adapt_lr > 0.0 && self.adapt_lr.is_finite()) {
            return Err(Error::Config(format!(
                "adapt_lr must be positive, got {}",
                self.adapt_lr
            )));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::Config(format!(
                "meta_lr must be positive, got {}",
                self.meta_lr
            )));
        }
        if self.inner_steps_train == 0 || self.inner_steps_eval == 0 {
            return Err(Error::Config("inner step counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// A task objective adaptable by the inner loop. The support side must be
/// evaluable both on plain scalars and on dual numbers (the latter carries
/// the exact Hessian-vector products the second-order meta-gradient needs).
pub trait AdaptObjective<S: Scalar> {
    fn support_loss_grad(&self, params: &ParamVector<S>) -> Result<(S, ParamVector<S>)>;

    /// Support gradient over dual numbers; input tangents define the
    /// direction, output tangents carry `H . v`.
    fn support_grad_dual(&self, params: &ParamVector<Dual<S>>) -> Result<ParamVector<Dual<S>>>;

    fn query_loss_grad(&self, params: &ParamVector<S>) -> Result<(S, ParamVector<S>)>;
}

/// Outcome of the inner loop. `support_losses[j]` is the loss at iterate j
/// before its update; the tape stores those iterates when retained.
#[derive(Clone, Debug)]
pub struct AdaptedParams<S> {
    pub theta_prime: ParamVector<S>,
    pub tape: Option<Vec<ParamVector<S>>>,
    pub support_losses: Vec<S>,
}

/// Runs `steps` gradient steps on the support objective starting at
/// `theta`. Retains the pre-update iterates when `keep_tape` is set so a
/// meta-gradient can later be propagated back through the trajectory.
pub fn inner_adapt<S: Scalar, O: AdaptObjective<S> + ?Sized>(
    objective: &O,
    theta: &ParamVector<S>,
    adapt_lr: S,
    steps: usize,
    keep_tape: bool,
) -> Result<AdaptedParams<S>> {
    let mut current = theta.clone();
    let mut tape = keep_tape.then(|| Vec::with_capacity(steps));
    let mut support_losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grad) = objective.support_loss_grad(&current)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteInner { step });
        }
        support_losses.push(loss);
        if let Some(t) = tape.as_mut() {
            t.push(current.clone());
        }
        current.add_scaled(-adapt_lr, &grad)?;
    }
    Ok(AdaptedParams {
        theta_prime: current,
        tape,
        support_losses,
    })
}

/// Exact Hessian-vector product of the support loss at `at` along `v`,
/// from one dual-number evaluation of the support gradient.
pub fn support_hvp<S: Scalar, O: AdaptObjective<S> + ?Sized>(
    objective: &O,
    at: &ParamVector<S>,
    v: &ParamVector<S>,
) -> Result<ParamVector<S>> {
    if at.len() != v.len() {
        return Err(Error::Dimension {
            context: "hessian-vector direction",
            expected: at.len(),
            actual: v.len(),
        });
    }
    let duals: Vec<Dual<S>> = at
        .values()
        .iter()
        .zip(v.values())
        .map(|(&a, &t)| Dual::seeded(a, t))
        .collect();
    let dual_params = ParamVector::from_values(duals, at.shape().clone())?;
    let grad = objective.support_grad_dual(&dual_params)?;
    let tangents: Vec<S> = grad.values().iter().map(|d| d.d).collect();
    ParamVector::from_values(tangents, at.shape().clone())
}

/// Pulls a gradient at the adapted parameters back to the initialization by
/// reverse accumulation over the tape. Errors when the tape was not kept.
pub fn backprop_through_tape<S: Scalar, O: AdaptObjective<S> + ?Sized>(
    objective: &O,
    adapted: &AdaptedParams<S>,
    query_grad: ParamVector<S>,
    adapt_lr: S,
) -> Result<ParamVector<S>> {
    let tape = adapted.tape.as_ref().ok_or(Error::MissingTape)?;
    let mut v = query_grad;
    for iterate in tape.iter().rev() {
        let hv = support_hvp(objective, iterate, &v)?;
        v.add_scaled(-adapt_lr, &hv)?;
    }
    Ok(v)
}

/// Meta-gradient of one task's query loss with respect to the
/// initialization.
#[derive(Clone, Debug)]
pub struct TaskOuter<S> {
    pub query_loss: S,
    pub grad: ParamVector<S>,
    pub adapted: ParamVector<S>,
    pub support_losses: Vec<S>,
}

/// Adapts on the support set, then differentiates the query loss with
/// respect to `theta`, through the adaptation when `second_order`.
pub fn task_outer_grad<S: Scalar, O: AdaptObjective<S> + ?Sized>(
    objective: &O,
    theta: &ParamVector<S>,
    adapt_lr: S,
    steps: usize,
    second_order: bool,
) -> Result<TaskOuter<S>> {
    let adapted = inner_adapt(objective, theta, adapt_lr, steps, second_order)?;
    let (query_loss, direct) = objective.query_loss_grad(&adapted.theta_prime)?;
    let grad = if second_order {
        backprop_through_tape(objective, &adapted, direct, adapt_lr)?
    } else {
        direct
    };
    Ok(TaskOuter {
        query_loss,
        grad,
        adapted: adapted.theta_prime,
        support_losses: adapted.support_losses,
    })
}

// ---------------------------------------------------------------------------
// Episodic objective on an MLP backbone
// ---------------------------------------------------------------------------

/// Cross-entropy task objective over a backbone: support rows drive the
/// inner loop, query rows the meta-objective. Optional query row weights
/// scale each row's share of the differentiated query loss.
pub struct EpisodeTaskObjective<S: Scalar> {
    activation: crate::backbone::Activation,
    support: Matrix<S>,
    support_dual: Matrix<Dual<S>>,
    support_labels: Vec<usize>,
    query: Matrix<S>,
    query_labels: Vec<usize>,
    query_row_weights: Option<Vec<S>>,
}

impl<S: Scalar> EpisodeTaskObjective<S> {
    pub fn new(
        backbone: &Backbone<S>,
        task: &Task,
        query_row_weights: Option<Vec<S>>,
    ) -> Result<Self> {
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
        if backbone.output_dim() != task.n_way() {
            return Err(Error::Dimension {
                context: "backbone output width",
                expected: task.n_way(),
                actual: backbone.output_dim(),
            });
        }
        if let Some(w) = &query_row_weights {
            if w.len() != query.rows() {
                return Err(Error::Dimension {
                    context: "query row weights",
                    expected: query.rows(),
                    actual: w.len(),
                });
            }
        }
        let support_dual = support.map(Dual::constant);
        Ok(EpisodeTaskObjective {
            activation: backbone.activation(),
            support,
            support_dual,
            support_labels,
            query,
            query_labels,
            query_row_weights,
        })
    }

    fn net(&self, params: &ParamVector<S>) -> Backbone<S> {
        Backbone::from_params(self.activation, params.clone())
    }
}

impl<S: Scalar> AdaptObjective<S> for EpisodeTaskObjective<S> {
    fn support_loss_grad(&self, params: &ParamVector<S>) -> Result<(S, ParamVector<S>)> {
        let head = CrossEntropyHead {
            labels: &self.support_labels,
            row_weights: None,
        };
        backprop_grads(&self.net(params), &self.support, &head)
    }

    fn support_grad_dual(&self, params: &ParamVector<Dual<S>>) -> Result<ParamVector<Dual<S>>> {
        let net: Backbone<Dual<S>> = Backbone::from_params(self.activation, params.clone());
        let head = CrossEntropyHead {
            labels: &self.support_labels,
            row_weights: None,
        };
        let (_, grad) = backprop_grads(&net, &self.support_dual, &head)?;
        Ok(grad)
    }

    fn query_loss_grad(&self, params: &ParamVector<S>) -> Result<(S, ParamVector<S>)> {
        let head = CrossEntropyHead {
            labels: &self.query_labels,
            row_weights: self.query_row_weights.as_deref(),
        };
        backprop_grads(&self.net(params), &self.query, &head)
    }
}

// ---------------------------------------------------------------------------
// Episode-level adaptation and meta-gradient
// ---------------------------------------------------------------------------

struct TaskAdaptState<S: Scalar> {
    objective: EpisodeTaskObjective<S>,
    adapted_net: Backbone<S>,
    tape: Option<Vec<ParamVector<S>>>,
    support_losses: Vec<S>,
    query_trace: ForwardTrace<S>,
    query_stats: CrossEntropyStats<S>,
    /// Coarse id per local class, when the task carries them.
    coarse_local: Option<Vec<usize>>,
}

/// Every task of an episode adapted once from the same initialization. The
/// per-task query losses are available before any meta-gradient is formed,
/// so a weight update can happen in between and the gradient is then
/// combined under the new weights without re-adapting.
pub struct EpisodeAdaptation<S: Scalar> {
    tasks: Vec<TaskAdaptState<S>>,
    adapt_lr: S,
    second_order: bool,
}

pub fn adapt_episode<S: Scalar>(
    backbone: &Backbone<S>,
    episode: &Episode,
    cfg: &MamlConfig,
) -> Result<EpisodeAdaptation<S>> {
    if episode.tasks.is_empty() {
        return Err(Error::EmptyBatch {
            context: "episode tasks",
        });
    }
    let adapt_lr = S::of(cfg.adapt_lr);
    let mut tasks = Vec::with_capacity(episode.tasks.len());
    for task in &episode.tasks {
        let objective = EpisodeTaskObjective::new(backbone, task, None)?;
        let adapted = inner_adapt(
            &objective,
            backbone.params(),
            adapt_lr,
            cfg.inner_steps_train,
            cfg.second_order,
        )?;
        let adapted_net = Backbone::from_params(objective.activation, adapted.theta_prime);
        let query_trace = adapted_net.forward_trace(&objective.query)?;
        let query_stats = cross_entropy_stats(query_trace.output(), &objective.query_labels, None)?;
        tasks.push(TaskAdaptState {
            objective,
            adapted_net,
            tape: adapted.tape,
            support_losses: adapted.support_losses,
            query_trace,
            query_stats,
            coarse_local: task.coarse_ids.clone(),
        });
    }
    Ok(EpisodeAdaptation {
        tasks,
        adapt_lr,
        second_order: cfg.second_order,
    })
}

impl<S: Scalar> EpisodeAdaptation<S> {
    /// Unweighted per-task query losses, with per-class partials keyed by
    /// coarse id when every task carries coarse ids. A coarse id is present
    /// only when some query row's true class maps to it.
    pub fn task_losses(&self) -> TaskLosses<S> {
        let values: Vec<S> = self.tasks.iter().map(|t| t.query_stats.loss).collect();
        let all_coarse = self.tasks.iter().all(|t| t.coarse_local.is_some());
        let per_class = all_coarse.then(|| {
            self.tasks
                .iter()
                .map(|t| {
                    let coarse = t.coarse_local.as_ref().expect("checked above");
                    bucket_partials_by_coarse(
                        &t.query_stats.per_class,
                        &t.objective.query_labels,
                        coarse,
                    )
                })
                .collect()
        });
        TaskLosses { values, per_class }
    }

    pub fn mean_query_loss(&self) -> S {
        let total: S = self.tasks.iter().map(|t| t.query_stats.loss).sum();
        total / S::of(self.tasks.len() as f64)
    }

    pub fn support_losses(&self, task: usize) -> &[S] {
        &self.tasks[task].support_losses
    }

    /// Meta-gradient of the combined episode objective under the given
    /// weighting: the plain sum of task query losses when `weights` is
    /// absent, the weighted sum of task losses for per-task weights, or the
    /// coarse-class weighted sum for per-coarse weights. Log-of-weight
    /// terms are independent of the parameters and contribute nothing here.
    pub fn combined_grad(&self, weights: Option<&MultiTaskWeights<S>>) -> Result<ParamVector<S>> {
        if let Some(w) = weights {
            if w.mode() == WeightMode::PerTask && w.len() != self.tasks.len() {
                return Err(Error::Dimension {
                    context: "per-task weights",
                    expected: self.tasks.len(),
                    actual: w.len(),
                });
            }
        }
        let mut total: Option<ParamVector<S>> = None;
        for (i, t) in self.tasks.iter().enumerate() {
            let mut seed = t.query_stats.d_logits.clone();
            if let Some(w) = weights {
                if w.mode() == WeightMode::PerCoarse {
                    let coarse = t.coarse_local.as_ref().ok_or(Error::MissingPartials)?;
                    for (r, &label) in t.objective.query_labels.iter().enumerate() {
                        let id = coarse[label];
                        if id >= w.len() {
                            return Err(Error::LabelOutOfRange {
                                label: id,
                                n_classes: w.len(),
                                row: r,
                            });
                        }
                        let scale = w.model_scale(id);
                        for v in seed.row_mut(r) {
                            *v *= scale;
                        }
                    }
                }
            }
            let mut g = t.adapted_net.backward(&t.query_trace, &seed);
            if self.second_order {
                let tape = t.tape.as_ref().ok_or(Error::MissingTape)?;
                let mut v = g;
                for iterate in tape.iter().rev() {
                    let hv = support_hvp(&t.objective, iterate, &v)?;
                    v.add_scaled(-self.adapt_lr, &hv)?;
                }
                g = v;
            }
            let task_scale = match weights {
                Some(w) if w.mode() == WeightMode::PerTask => w.model_scale(i),
                _ => S::one(),
            };
            match total.as_mut() {
                None => {
                    g.scale(task_scale);
                    total = Some(g);
                }
                Some(tot) => tot.add_scaled(task_scale, &g)?,
            }
        }
        Ok(total.expect("episode has at least one task"))
    }
}

/// One-call meta-gradient: adapt every task, then combine. Returns the
/// gradient together with the unweighted task losses.
pub fn outer_grad<S: Scalar>(
    backbone: &Backbone<S>,
    episode: &Episode,
    cfg: &MamlConfig,
    weights: Option<&MultiTaskWeights<S>>,
) -> Result<(ParamVector<S>, TaskLosses<S>)> {
    let state = adapt_episode(backbone, episode, cfg)?;
    let grad = state.combined_grad(weights)?;
    Ok((grad, state.task_losses()))
}

/// Adapts each task with the evaluation step count and scores argmax
/// predictions on its query set.
pub fn maml_eval<S: Scalar>(
    backbone: &Backbone<S>,
    episode: &Episode,
    cfg: &MamlConfig,
) -> Result<EpisodeEval<S>> {
    if episode.tasks.is_empty() {
        return Err(Error::EmptyBatch {
            context: "episode tasks",
        });
    }
    let adapt_lr = S::of(cfg.adapt_lr);
    let mut per_task = Vec::with_capacity(episode.tasks.len());
    let mut correct = 0usize;
    let mut rows = 0usize;
    let mut loss_sum = S::zero();
    for task in &episode.tasks {
        let objective = EpisodeTaskObjective::new(backbone, task, None)?;
        let adapted = inner_adapt(
            &objective,
            backbone.params(),
            adapt_lr,
            cfg.inner_steps_eval,
            false,
        )?;
        let net = Backbone::from_params(objective.activation, adapted.theta_prime);
        let trace = net.forward_trace(&objective.query)?;
        let stats = cross_entropy_stats(trace.output(), &objective.query_labels, None)?;
        let n = objective.query_labels.len();
        per_task.push(stats.correct as f64 / n as f64);
        correct += stats.correct;
        rows += n;
        loss_sum += stats.loss;
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
    use crate::episodes::{gaussian_blobs, sample_episode, GaussianBlobsParams, Split, TaskExample};
    use crate::optim::Adam;
    use crate::params::ShapeTable;
    use crate::rng::{derive_stream, StreamKind};
    use approx::assert_relative_eq;

    /// `L(theta) = sum_i (theta_i - target_i)^2`, gradient `2 (theta - target)`,
    /// evaluable on any scalar, so the dual path shares the code.
    struct Quadratic {
        support_target: Vec<f64>,
        query_target: Vec<f64>,
        shape: ShapeTable,
    }

    impl Quadratic {
        fn new(support_target: Vec<f64>, query_target: Vec<f64>) -> Self {
            assert_eq!(support_target.len(), 2);
            assert_eq!(query_target.len(), 2);
            Quadratic {
                support_target,
                query_target,
                shape: ShapeTable::from_layer_dims(&[1, 1]),
            }
        }

        fn eval<T: Scalar>(params: &ParamVector<T>, target: &[f64]) -> (T, ParamVector<T>) {
            let mut loss = T::zero();
            let mut grads = Vec::with_capacity(params.len());
            for (&p, &t) in params.values().iter().zip(target) {
                let diff = p - T::of(t);
                loss += diff * diff;
                grads.push(T::of(2.0) * diff);
            }
            let grad = ParamVector::from_values(grads, params.shape().clone()).unwrap();
            (loss, grad)
        }

        fn params(&self, values: [f64; 2]) -> ParamVector<f64> {
            ParamVector::from_values(values.to_vec(), self.shape.clone()).unwrap()
        }
    }

    impl AdaptObjective<f64> for Quadratic {
        fn support_loss_grad(&self, params: &ParamVector<f64>) -> Result<(f64, ParamVector<f64>)> {
            Ok(Self::eval(params, &self.support_target))
        }

        fn support_grad_dual(
            &self,
            params: &ParamVector<Dual<f64>>,
        ) -> Result<ParamVector<Dual<f64>>> {
            Ok(Self::eval(params, &self.support_target).1)
        }

        fn query_loss_grad(&self, params: &ParamVector<f64>) -> Result<(f64, ParamVector<f64>)> {
            Ok(Self::eval(params, &self.query_target))
        }
    }

    #[test]
    fn zero_rate_adaptation_is_identity() {
        let obj = Quadratic::new(vec![0.3, -0.7], vec![0.0, 0.0]);
        let theta = obj.params([1.5, -2.5]);
        let adapted = inner_adapt(&obj, &theta, 0.0, 3, true).unwrap();
        assert_eq!(adapted.theta_prime.values(), theta.values());
        assert_eq!(adapted.support_losses.len(), 3);
    }

    #[test]
    fn single_step_on_squared_parameters_shrinks_by_two_alpha() {
        // L = theta^2 per coordinate, alpha = 0.01: 1 - 0.01 * 2 = 0.98.
        let obj = Quadratic::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let theta = obj.params([1.0, 1.0]);
        let adapted = inner_adapt(&obj, &theta, 0.01, 1, false).unwrap();
        for &v in adapted.theta_prime.values() {
            assert_relative_eq!(v, 0.98, max_relative = 1e-15);
        }
        assert!(adapted.tape.is_none());
    }

    #[test]
    fn analytic_outer_gradient_one_inner_step() {
        // Support and query both (theta - c)^2 with c = 0. One step maps
        // theta to (1 - 2a) theta, so d/d theta of query loss is
        // 2 (1-2a) theta * (1-2a): at theta=1, a=0.1 that is 1.28. The
        // first-order value drops one (1-2a) factor: 1.6.
        let obj = Quadratic::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let theta = obj.params([1.0, 1.0]);
        let so = task_outer_grad(&obj, &theta, 0.1, 1, true).unwrap();
        let fo = task_outer_grad(&obj, &theta, 0.1, 1, false).unwrap();
        for &g in so.grad.values() {
            assert_relative_eq!(g, 1.28, max_relative = 1e-12);
        }
        for &g in fo.grad.values() {
            assert_relative_eq!(g, 1.6, max_relative = 1e-12);
        }
    }

    #[test]
    fn first_and_second_order_coincide_at_zero_rate() {
        let obj = Quadratic::new(vec![0.4, -1.1], vec![-0.2, 0.9]);
        let theta = obj.params([0.7, 0.3]);
        let so = task_outer_grad(&obj, &theta, 0.0, 3, true).unwrap();
        let fo = task_outer_grad(&obj, &theta, 0.0, 3, false).unwrap();
        for (a, b) in so.grad.values().iter().zip(fo.grad.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central finite differences of the full two-level objective.
    fn fd_outer_grad<O: AdaptObjective<f64>>(
        obj: &O,
        theta: &ParamVector<f64>,
        adapt_lr: f64,
        steps: usize,
        h: f64,
    ) -> Vec<f64> {
        let eval = |p: &ParamVector<f64>| -> f64 {
            let adapted = inner_adapt(obj, p, adapt_lr, steps, false).unwrap();
            obj.query_loss_grad(&adapted.theta_prime).unwrap().0
        };
        (0..theta.len())
            .map(|i| {
                let mut plus = theta.clone();
                plus.values_mut()[i] += h;
                let mut minus = theta.clone();
                minus.values_mut()[i] -= h;
                (eval(&plus) - eval(&minus)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn multi_step_outer_gradient_matches_finite_differences() {
        let obj = Quadratic::new(vec![0.3, -0.2], vec![-1.0, 0.5]);
        let theta = obj.params([0.7, -0.4]);
        let outer = task_outer_grad(&obj, &theta, 0.15, 3, true).unwrap();
        let fd = fd_outer_grad(&obj, &theta, 0.15, 3, 1e-5);
        for (g, f) in outer.grad.values().iter().zip(&fd) {
            assert_relative_eq!(g, f, max_relative = 1e-6);
        }
    }

    #[test]
    fn divergent_inner_loop_reports_the_failing_step() {
        let obj = Quadratic::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let theta = obj.params([1.0, 1.0]);
        match inner_adapt(&obj, &theta, 1e8, 40, false) {
            Err(Error::NonFiniteInner { step }) => assert!(step > 0, "diverges after step 0"),
            other => panic!("expected non-finite inner loss, got {other:?}"),
        }
        let nan_theta = obj.params([f64::NAN, 0.0]);
        match inner_adapt(&obj, &nan_theta, 0.01, 1, false) {
            Err(Error::NonFiniteInner { step: 0 }) => {}
            other => panic!("expected failure at step 0, got {other:?}"),
        }
    }

    // -- backbone-based tasks ------------------------------------------------

    fn separated_task() -> Task {
        let mk = |features: [f64; 2], local: usize, idx: usize| TaskExample {
            features: features.to_vec(),
            local_label: local,
            example_index: idx,
        };
        Task {
            class_ids: vec![0, 1],
            coarse_ids: Some(vec![0, 1]),
            support: vec![
                mk([3.0, 0.2], 0, 0),
                mk([2.8, -0.1], 0, 1),
                mk([-3.0, 0.1], 1, 0),
                mk([-2.9, -0.2], 1, 1),
            ],
            query: vec![
                mk([3.2, 0.1], 0, 2),
                mk([2.7, 0.0], 0, 3),
                mk([-3.1, 0.2], 1, 2),
                mk([-2.8, -0.1], 1, 3),
            ],
        }
    }

    fn seeded_net(dims: &[usize], seed: u64) -> Backbone<f64> {
        let mut rng = derive_stream(seed, StreamKind::Init);
        Backbone::new_seeded(dims, Activation::Relu, &mut rng)
    }

    #[test]
    fn support_loss_decreases_strictly_on_a_separable_task() {
        let net = seeded_net(&[2, 4, 2], 3);
        let obj = EpisodeTaskObjective::new(&net, &separated_task(), None).unwrap();
        let adapted = inner_adapt(&obj, net.params(), 0.05, 5, false).unwrap();
        let (final_loss, _) = obj.support_loss_grad(&adapted.theta_prime).unwrap();
        let mut seq = adapted.support_losses.clone();
        seq.push(final_loss);
        for pair in seq.windows(2) {
            assert!(pair[1] < pair[0], "support loss not decreasing: {seq:?}");
        }
    }

    #[test]
    fn backbone_outer_gradient_matches_finite_differences() {
        let net = seeded_net(&[2, 3, 2], 11);
        let obj = EpisodeTaskObjective::new(&net, &separated_task(), None).unwrap();
        let outer = task_outer_grad(&obj, net.params(), 0.05, 2, true).unwrap();
        let fd = fd_outer_grad(&obj, net.params(), 0.05, 2, 1e-5);
        for (g, f) in outer.grad.values().iter().zip(&fd) {
            let denom = f.abs().max(1.0);
            assert!(
                (g - f).abs() / denom < 1e-4,
                "analytic {g} vs finite difference {f}"
            );
        }
    }

    #[test]
    fn coarse_weighted_outer_gradient_matches_finite_differences() {
        // Row-weighted query objective: rows of class 0 (coarse 0) carry
        // weight 1/4 via omega_0 = 2, class 1 rows weight 1.
        let net = seeded_net(&[2, 3, 2], 19);
        let task = separated_task();
        let weights =
            MultiTaskWeights::new(vec![2.0, 1.0], WeightMode::PerCoarse).unwrap();
        let row_weights: Vec<f64> = task
            .query
            .iter()
            .map(|ex| weights.model_scale(ex.local_label))
            .collect();
        let weighted_obj =
            EpisodeTaskObjective::new(&net, &task, Some(row_weights)).unwrap();
        let fd = fd_outer_grad(&weighted_obj, net.params(), 0.05, 2, 1e-5);

        let cfg = MamlConfig {
            adapt_lr: 0.05,
            inner_steps_train: 2,
            ..MamlConfig::default()
        };
        let episode = Episode {
            index: 0,
            tasks: vec![task],
        };
        let state = adapt_episode(&net, &episode, &cfg).unwrap();
        let grad = state.combined_grad(Some(&weights)).unwrap();
        for (g, f) in grad.values().iter().zip(&fd) {
            let denom = f.abs().max(1.0);
            assert!(
                (g - f).abs() / denom < 1e-4,
                "analytic {g} vs finite difference {f}"
            );
        }
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
        let spec = crate::episodes::EpisodeSpec {
            n_way: 3,
            n_shot: 1,
            n_query: 2,
            tasks_per_episode: m,
        };
        let mut rng = derive_stream(seed, StreamKind::TrainEpisode(0));
        let episode = sample_episode(&ds, Split::Train, &spec, 0, &mut rng).unwrap();
        let net = seeded_net(&[4, 8, 3], seed);
        (net, episode)
    }

    #[test]
    fn all_ones_weights_reproduce_the_unweighted_gradient_exactly() {
        let (net, episode) = blob_episode(5, 3);
        let cfg = MamlConfig {
            inner_steps_train: 2,
            ..MamlConfig::default()
        };
        let ones = MultiTaskWeights::ones(3, WeightMode::PerTask);
        let (g_plain, l_plain) = outer_grad(&net, &episode, &cfg, None).unwrap();
        let (g_ones, l_ones) = outer_grad(&net, &episode, &cfg, Some(&ones)).unwrap();
        assert_eq!(g_plain.values(), g_ones.values());
        assert_eq!(l_plain.values, l_ones.values);
    }

    #[test]
    fn per_task_weights_scale_task_gradients_linearly() {
        let (net, episode) = blob_episode(9, 2);
        let cfg = MamlConfig {
            inner_steps_train: 2,
            ..MamlConfig::default()
        };
        let single = |i: usize| {
            let ep = Episode {
                index: 0,
                tasks: vec![episode.tasks[i].clone()],
            };
            outer_grad(&net, &ep, &cfg, None).unwrap().0
        };
        let g0 = single(0);
        let g1 = single(1);
        // omega = (2, 1): task 0 contributes at scale 1/4.
        let weights = MultiTaskWeights::new(vec![2.0, 1.0], WeightMode::PerTask).unwrap();
        let (combined, _) = outer_grad(&net, &episode, &cfg, Some(&weights)).unwrap();
        for ((c, a), b) in combined.values().iter().zip(g0.values()).zip(g1.values()) {
            assert_relative_eq!(*c, 0.25 * a + b, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn task_losses_bucket_partials_by_coarse_id() {
        let (net, episode) = blob_episode(13, 2);
        let cfg = MamlConfig::default();
        let state = adapt_episode(&net, &episode, &cfg).unwrap();
        let losses = state.task_losses();
        let per_class = losses.per_class.as_ref().expect("blobs carry coarse ids");
        assert_eq!(per_class.len(), 2);
        for (map, &value) in per_class.iter().zip(&losses.values) {
            let total: f64 = map.values().sum();
            assert_relative_eq!(total, value, max_relative = 1e-12);
            for &id in map.keys() {
                assert!(id < 2);
            }
        }
    }

    #[test]
    fn eval_adapts_to_a_cleanly_separated_task() {
        let net = seeded_net(&[2, 4, 2], 21);
        let episode = Episode {
            index: 0,
            tasks: vec![separated_task()],
        };
        let cfg = MamlConfig {
            adapt_lr: 0.1,
            inner_steps_eval: 50,
            ..MamlConfig::default()
        };
        let eval = maml_eval(&net, &episode, &cfg).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        assert_eq!(eval.per_task, vec![1.0]);

        // Swapping the query labels inverts every prediction.
        let mut swapped = separated_task();
        for ex in &mut swapped.query {
            ex.local_label = 1 - ex.local_label;
        }
        let episode = Episode {
            index: 0,
            tasks: vec![swapped],
        };
        let eval = maml_eval(&net, &episode, &cfg).unwrap();
        assert!(eval.accuracy < 0.5);
    }

    #[test]
    fn short_meta_training_run_reduces_validation_loss() {
        let ds = gaussian_blobs(&GaussianBlobsParams {
            num_classes: 12,
            dim: 4,
            examples_per_class: 8,
            coarse_groups: 0,
            seed: 31,
            radius: 3.0,
            sigma: 0.6,
            splits: (8, 4, 0),
        })
        .unwrap();
        let spec = crate::episodes::EpisodeSpec {
            n_way: 3,
            n_shot: 2,
            n_query: 3,
            tasks_per_episode: 2,
        };
        let cfg = MamlConfig {
            adapt_lr: 0.05,
            inner_steps_train: 3,
            inner_steps_eval: 5,
            ..MamlConfig::default()
        };
        let mut net = seeded_net(&[4, 16, 3], 31);
        let mut adam = Adam::with_defaults(1e-2);

        let val_loss = |net: &Backbone<f64>| -> f64 {
            let mut total = 0.0;
            for i in 0..10u64 {
                let mut rng = derive_stream(31, StreamKind::ValEpisode(i));
                let ep = sample_episode(&ds, Split::Val, &spec, i, &mut rng).unwrap();
                total += maml_eval(net, &ep, &cfg).unwrap().mean_query_loss;
            }
            total / 10.0
        };

        let before = val_loss(&net);
        for i in 0..40u64 {
            let mut rng = derive_stream(31, StreamKind::TrainEpisode(i));
            let ep = sample_episode(&ds, Split::Train, &spec, i, &mut rng).unwrap();
            let (grad, _) = outer_grad(&net, &ep, &cfg, None).unwrap();
            adam.step(net.params_mut().values_mut(), grad.values()).unwrap();
        }
        let after = val_loss(&net);
        assert!(
            after < before,
            "validation loss should drop: before {before}, after {after}"
        );
    }
}
