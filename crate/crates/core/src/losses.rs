//! Loss heads and the weighted multi-task combination.
//!
//! Three layers of machinery live here:
//! * per-row classification losses (cross-entropy on logits, prototype
//!   distances on embeddings), each with exact gradients and per-class
//!   partial losses that sum to the total;
//! * the weighted multi-task objective
//!   `L(w) = sum_i L_i / w_i^2 + sum_i log w_i^2`, whose stationary point in
//!   `w_i` is `sqrt(L_i)`;
//! * the coarse variant that buckets per-class partials by coarse class id
//!   and only charges classes that are present.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Maps network outputs to a scalar loss and its gradient with respect to
/// those outputs. The bridge between the backbone and any objective.
pub trait LossHead<S: Scalar> {
    fn loss_and_grad(&self, outputs: &Matrix<S>) -> Result<(S, Matrix<S>)>;
}

// ---------------------------------------------------------------------------
// Cross-entropy on logits
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CrossEntropyStats<S> {
    /// Mean negative log-likelihood over rows (unweighted).
    pub loss: S,
    /// Per-class partials of the unweighted loss, indexed by true label;
    /// they sum to `loss`.
    pub per_class: Vec<S>,
    /// Mean of row losses scaled by the row weights (equals `loss` when no
    /// weights are given). This is the value the gradient differentiates.
    pub weighted_loss: S,
    /// Gradient of `weighted_loss` with respect to the logits.
    pub d_logits: Matrix<S>,
    /// Rows whose argmax logit matches the label.
    pub correct: usize,
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    for (row, &label) in labels.iter().enumerate() {
        if label >= n_classes {
            return Err(Error::LabelOutOfRange {
                label,
                n_classes,
                row,
            });
        }
    }
    Ok(())
}

/// Softmax cross-entropy with optional per-row weights. Row weights scale
/// each row's contribution to the differentiated objective; the reported
/// `loss` and `per_class` partials stay unweighted so they remain comparable
/// across weighting schemes.
pub fn cross_entropy_stats<S: Scalar>(
    logits: &Matrix<S>,
    labels: &[usize],
    row_weights: Option<&[S]>,
) -> Result<CrossEntropyStats<S>> {
    let rows = logits.rows();
    let n_classes = logits.cols();
    if rows == 0 {
        return Err(Error::EmptyBatch {
            context: "cross-entropy",
        });
    }
    if labels.len() != rows {
        return Err(Error::Dimension {
            context: "cross-entropy labels",
            expected: rows,
            actual: labels.len(),
        });
    }
    if let Some(w) = row_weights {
        if w.len() != rows {
            return Err(Error::Dimension {
                context: "cross-entropy row weights",
                expected: rows,
                actual: w.len(),
            });
        }
    }
    check_labels(labels, n_classes)?;

    let inv_rows = S::one() / S::of(rows as f64);
    let mut loss = S::zero();
    let mut weighted_loss = S::zero();
    let mut per_class = vec![S::zero(); n_classes];
    let mut d_logits = Matrix::zeros(rows, n_classes);
    let mut correct = 0usize;

    for r in 0..rows {
        let row = logits.row(r);
        let label = labels[r];
        let mut max = row[0];
        let mut argmax = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > max {
                max = v;
                argmax = k;
            }
        }
        if argmax == label {
            correct += 1;
        }
        let mut denom = S::zero();
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln();
        let row_loss = log_denom - (row[label] - max);
        loss += row_loss * inv_rows;
        per_class[label] += row_loss * inv_rows;

        let w = row_weights.map_or(S::one(), |w| w[r]);
        weighted_loss += w * row_loss * inv_rows;
        let scale = w * inv_rows;
        let d_row = d_logits.row_mut(r);
        for (k, &v) in row.iter().enumerate() {
            let p = (v - max).exp() / denom;
            let indicator = if k == label { S::one() } else { S::zero() };
            d_row[k] = scale * (p - indicator);
        }
    }

    Ok(CrossEntropyStats {
        loss,
        per_class,
        weighted_loss,
        d_logits,
        correct,
    })
}

/// Mean negative log-likelihood without gradients.
pub fn cross_entropy<S: Scalar>(logits: &Matrix<S>, labels: &[usize]) -> Result<S> {
    Ok(cross_entropy_stats(logits, labels, None)?.loss)
}

/// Cross-entropy head over a fixed label set, usable as a backbone loss
/// tail. With row weights the differentiated value is the weighted mean.
pub struct CrossEntropyHead<'a, S> {
    pub labels: &'a [usize],
    pub row_weights: Option<&'a [S]>,
}

impl<'a, S: Scalar> LossHead<S> for CrossEntropyHead<'a, S> {
    fn loss_and_grad(&self, outputs: &Matrix<S>) -> Result<(S, Matrix<S>)> {
        let stats = cross_entropy_stats(outputs, self.labels, self.row_weights)?;
        Ok((stats.weighted_loss, stats.d_logits))
    }
}

// ---------------------------------------------------------------------------
// Prototype classification on embeddings
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    /// Squared Euclidean distance (the default scoring rule).
    #[default]
    SquaredEuclidean,
    /// Plain Euclidean distance, selectable for comparison runs.
    Euclidean,
}

/// Class means of the support embeddings. Every class in `0..n_classes`
/// must own at least one support row.
pub fn compute_prototypes<S: Scalar>(
    support: &Matrix<S>,
    support_labels: &[usize],
    n_classes: usize,
) -> Result<Matrix<S>> {
    if support.rows() == 0 {
        return Err(Error::EmptyBatch {
            context: "prototype support set",
        });
    }
    if support_labels.len() != support.rows() {
        return Err(Error::Dimension {
            context: "prototype support labels",
            expected: support.rows(),
            actual: support_labels.len(),
        });
    }
    check_labels(support_labels, n_classes)?;
    let dim = support.cols();
    let mut protos = Matrix::zeros(n_classes, dim);
    let mut counts = vec![0usize; n_classes];
    for (r, &label) in support_labels.iter().enumerate() {
        counts[label] += 1;
        let row = support.row(r);
        let proto = protos.row_mut(label);
        for (p, &v) in proto.iter_mut().zip(row) {
            *p += v;
        }
    }
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptySupportClass { local_class: k });
        }
        let inv = S::one() / S::of(count as f64);
        for p in protos.row_mut(k) {
            *p *= inv;
        }
    }
    Ok(protos)
}

#[derive(Clone, Debug)]
pub struct ProtoOutcome<S> {
    /// Mean over query rows of the negative log-softmax of negated
    /// distances (unweighted).
    pub loss: S,
    /// Per-class partials of `loss` indexed by true query label.
    pub per_class: Vec<S>,
    /// Row-weighted mean when class weights are given; equals `loss`
    /// otherwise. The gradients differentiate this value.
    pub weighted_loss: S,
    pub d_support: Matrix<S>,
    pub d_query: Matrix<S>,
    pub correct: usize,
}

/// Prototype loss with exact gradients for both embedding batches.
///
/// `class_weights`, when given, scales every query row by the weight of its
/// true class; this is how coarse-class weighting reaches individual rows.
pub fn protonet_outcome<S: Scalar>(
    support: &Matrix<S>,
    support_labels: &[usize],
    query: &Matrix<S>,
    query_labels: &[usize],
    n_classes: usize,
    distance: DistanceKind,
    class_weights: Option<&[S]>,
) -> Result<ProtoOutcome<S>> {
    if query.rows() == 0 {
        return Err(Error::EmptyBatch {
            context: "prototype query set",
        });
    }
    if query_labels.len() != query.rows() {
        return Err(Error::Dimension {
            context: "prototype query labels",
            expected: query.rows(),
            actual: query_labels.len(),
        });
    }
    if query.cols() != support.cols() {
        return Err(Error::Dimension {
            context: "prototype embedding width",
            expected: support.cols(),
            actual: query.cols(),
        });
    }
    if let Some(w) = class_weights {
        if w.len() != n_classes {
            return Err(Error::Dimension {
                context: "prototype class weights",
                expected: n_classes,
                actual: w.len(),
            });
        }
    }
    check_labels(query_labels, n_classes)?;
    let protos = compute_prototypes(support, support_labels, n_classes)?;

    let dim = support.cols();
    let n_query = query.rows();
    let inv_q = S::one() / S::of(n_query as f64);
    let mut loss = S::zero();
    let mut weighted_loss = S::zero();
    let mut per_class = vec![S::zero(); n_classes];
    let mut d_query = Matrix::zeros(n_query, dim);
    let mut d_protos: Matrix<S> = Matrix::zeros(n_classes, dim);
    let mut correct = 0usize;
    // Euclidean distance has a kink at zero; keep the direction bounded.
    let dist_floor = S::of(1e-12);

    for (r, &label) in query_labels.iter().enumerate() {
        let z = query.row(r);
        let mut dists = vec![S::zero(); n_classes];
        for (k, dist) in dists.iter_mut().enumerate() {
            let proto = protos.row(k);
            let mut sq = S::zero();
            for (&a, &b) in z.iter().zip(proto) {
                let diff = a - b;
                sq += diff * diff;
            }
            *dist = match distance {
                DistanceKind::SquaredEuclidean => sq,
                DistanceKind::Euclidean => sq.sqrt(),
            };
        }
        // logits are negated distances; smallest distance wins.
        let mut max_logit = -dists[0];
        let mut argmax = 0;
        for (k, &d) in dists.iter().enumerate() {
            if -d > max_logit {
                max_logit = -d;
                argmax = k;
            }
        }
        if argmax == label {
            correct += 1;
        }
        let mut denom = S::zero();
        for &d in &dists {
            denom += (-d - max_logit).exp();
        }
        let row_loss = denom.ln() - (-dists[label] - max_logit);
        loss += row_loss * inv_q;
        per_class[label] += row_loss * inv_q;

        let w = class_weights.map_or(S::one(), |w| w[label]);
        weighted_loss += w * row_loss * inv_q;
        let scale = w * inv_q;
        for (k, &dist) in dists.iter().enumerate() {
            let p = (-dist - max_logit).exp() / denom;
            let indicator = if k == label { S::one() } else { S::zero() };
            // d(row_loss)/d(logit_k) = p_k - indicator; logit_k = -dist_k.
            let d_dist = -(p - indicator) * scale;
            let proto = protos.row(k);
            match distance {
                DistanceKind::SquaredEuclidean => {
                    for i in 0..dim {
                        let diff = z[i] - proto[i];
                        let two = S::of(2.0);
                        d_query.row_mut(r)[i] += d_dist * two * diff;
                        d_protos.row_mut(k)[i] -= d_dist * two * diff;
                    }
                }
                DistanceKind::Euclidean => {
                    let d = dist.max(dist_floor);
                    for i in 0..dim {
                        let dir = (z[i] - proto[i]) / d;
                        d_query.row_mut(r)[i] += d_dist * dir;
                        d_protos.row_mut(k)[i] -= d_dist * dir;
                    }
                }
            }
        }
    }

    // Prototypes are class means, so each support row receives its class
    // prototype gradient divided by the class count.
    let mut counts = vec![0usize; n_classes];
    for &label in support_labels {
        counts[label] += 1;
    }
    let mut d_support = Matrix::zeros(support.rows(), dim);
    for (r, &label) in support_labels.iter().enumerate() {
        let inv = S::one() / S::of(counts[label] as f64);
        let dp = d_protos.row(label);
        for (g, &v) in d_support.row_mut(r).iter_mut().zip(dp) {
            *g = v * inv;
        }
    }

    Ok(ProtoOutcome {
        loss,
        per_class,
        weighted_loss,
        d_support,
        d_query,
        correct,
    })
}

/// Loss value and per-class partials only.
pub fn protonet_loss<S: Scalar>(
    support: &Matrix<S>,
    support_labels: &[usize],
    query: &Matrix<S>,
    query_labels: &[usize],
    n_classes: usize,
    distance: DistanceKind,
) -> Result<(S, Vec<S>)> {
    let out = protonet_outcome(
        support,
        support_labels,
        query,
        query_labels,
        n_classes,
        distance,
        None,
    )?;
    Ok((out.loss, out.per_class))
}

// ---------------------------------------------------------------------------
// Weighted multi-task combination
// ---------------------------------------------------------------------------

/// Which index set the weight vector ranges over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// One weight per task slot in the episode.
    PerTask,
    /// One weight per coarse class id.
    PerCoarse,
}

/// The positive weight estimate the optimizers maintain. Perturbed
/// candidates evaluated during search are plain slices and may leave the
/// positive orthant; the committed estimate never does.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskWeights<S> {
    values: Vec<S>,
    mode: WeightMode,
}

impl<S: Scalar> MultiTaskWeights<S> {
    pub fn new(values: Vec<S>, mode: WeightMode) -> Result<Self> {
        for (index, &v) in values.iter().enumerate() {
            if !(v.is_finite() && v > S::zero()) {
                return Err(Error::NonPositiveWeight {
                    index,
                    value: v.as_f64(),
                });
            }
        }
        Ok(MultiTaskWeights { values, mode })
    }

    pub fn ones(len: usize, mode: WeightMode) -> Self {
        MultiTaskWeights {
            values: vec![S::one(); len],
            mode,
        }
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Replaces the values after an optimizer step, re-validating
    /// positivity.
    pub fn set_values(&mut self, values: Vec<S>) -> Result<()> {
        *self = MultiTaskWeights::new(values, self.mode)?;
        Ok(())
    }

    /// Scaling applied to a component's loss inside the model objective.
    pub fn model_scale(&self, index: usize) -> S {
        let w = self.values[index];
        S::one() / (w * w)
    }
}

/// Per-task losses from one episode, with optional per-class partials keyed
/// by coarse class id. Partial maps never hold entries for absent classes,
/// and per task the entries sum to the task loss.
#[derive(Clone, Debug, Default)]
pub struct TaskLosses<S> {
    pub values: Vec<S>,
    pub per_class: Option<Vec<BTreeMap<usize, S>>>,
}

impl<S: Scalar> TaskLosses<S> {
    pub fn from_values(values: Vec<S>) -> Self {
        TaskLosses {
            values,
            per_class: None,
        }
    }
}

/// `sum_i losses[i] / w_i^2 + sum_i log w_i^2`.
///
/// Accepts any nonzero weight values so search procedures can evaluate
/// perturbed candidates; the estimate's positivity is enforced by
/// [`MultiTaskWeights`] instead.
pub fn multitask_loss<S: Scalar>(weights: &[S], task_losses: &[S]) -> Result<S> {
    if weights.len() != task_losses.len() {
        return Err(Error::Dimension {
            context: "multi-task weights",
            expected: task_losses.len(),
            actual: weights.len(),
        });
    }
    let mut total = S::zero();
    for (&w, &l) in weights.iter().zip(task_losses) {
        let w2 = w * w;
        total += l / w2 + w2.ln();
    }
    Ok(total)
}

/// Analytic gradient of [`multitask_loss`] in the weights:
/// `dL/dw_i = -2 losses[i] / w_i^3 + 2 / w_i`.
pub fn multitask_weight_grad<S: Scalar>(weights: &[S], task_losses: &[S]) -> Result<Vec<S>> {
    if weights.len() != task_losses.len() {
        return Err(Error::Dimension {
            context: "multi-task weights",
            expected: task_losses.len(),
            actual: weights.len(),
        });
    }
    let two = S::of(2.0);
    Ok(weights
        .iter()
        .zip(task_losses)
        .map(|(&w, &l)| -two * l / (w * w * w) + two / w)
        .collect())
}

/// Coarse-class variant: partials are bucketed by coarse id across tasks and
/// only ids present in the episode contribute, including their log term.
pub fn coarse_multitask_loss<S: Scalar>(
    weights: &[S],
    per_class: &[BTreeMap<usize, S>],
) -> Result<S> {
    let mut sums: BTreeMap<usize, S> = BTreeMap::new();
    for (task, map) in per_class.iter().enumerate() {
        for (&id, &v) in map {
            if id >= weights.len() {
                return Err(Error::LabelOutOfRange {
                    label: id,
                    n_classes: weights.len(),
                    row: task,
                });
            }
            *sums.entry(id).or_insert_with(S::zero) += v;
        }
    }
    let mut total = S::zero();
    for (&id, &sum) in &sums {
        let w = weights[id];
        let w2 = w * w;
        total += sum / w2 + w2.ln();
    }
    Ok(total)
}

/// Buckets per-local-class partials by coarse id. A coarse id counts as
/// present only when some query row's true class maps to it; absent ids get
/// no entry, so downstream weighting skips them entirely.
pub fn bucket_partials_by_coarse<S: Scalar>(
    per_class_local: &[S],
    query_labels: &[usize],
    coarse_local: &[usize],
) -> BTreeMap<usize, S> {
    let mut map: BTreeMap<usize, S> = BTreeMap::new();
    for &label in query_labels {
        map.entry(coarse_local[label]).or_insert_with(S::zero);
    }
    for (local, &partial) in per_class_local.iter().enumerate() {
        if let Some(slot) = map.get_mut(&coarse_local[local]) {
            *slot += partial;
        }
    }
    map
}

/// Coarse ids present in a set of per-class partials.
pub fn present_coarse_ids<S: Scalar>(per_class: &[BTreeMap<usize, S>]) -> Vec<usize> {
    let mut ids: Vec<usize> = per_class
        .iter()
        .flat_map(|m| m.keys().copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}
