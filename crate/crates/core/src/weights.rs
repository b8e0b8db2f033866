//! Optimizers for the task-weight vector.
//!
//! Two families share one state type. The sampled family (plain, tracking,
//! and coarse-masked two-measurement search) treats the weighted loss as a
//! black box: each update draws one random direction, probes the loss at two
//! symmetric candidates, and moves along the direction by the measured
//! slope. The gradient family (shared-optimizer and dedicated-Adam steps)
//! uses the analytic weight gradient instead. Search candidates may leave
//! the positive orthant; the committed estimate never does, because every
//! update ends with a floor clamp.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{multitask_weight_grad, MultiTaskWeights, WeightMode};
use crate::optim::{Adam, Optimizer};
use crate::rng::{derive_stream, StreamKind};
use crate::scalar::Scalar;

/// Floor applied to every committed weight after an update.
pub const WEIGHT_FLOOR: f64 = 1e-3;

/// Decaying gain pair for the sampled updates: step size `a0 / n^a_exp` and
/// perturbation radius `b0 / n^b_exp`, indexed from one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainSchedule {
    pub a0: f64,
    pub b0: f64,
    pub a_exp: f64,
    pub b_exp: f64,
}

impl Default for GainSchedule {
    /// Slow decay tuned for following a drifting objective rather than
    /// settling on a static one.
    fn default() -> Self {
        GainSchedule {
            a0: 0.25,
            b0: 15.0,
            a_exp: 1.0 / 6.0,
            b_exp: 1.0 / 24.0,
        }
    }
}

impl GainSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.a0 > 0.0
            && self.a0.is_finite()
            && self.b0 > 0.0
            && self.b0.is_finite()
            && self.a_exp >= 0.0
            && self.a_exp.is_finite()
            && self.b_exp >= 0.0
            && self.b_exp.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid gain schedule: {self:?}")))
        }
    }

    /// Gain pair `(step, radius)` for update `n`. The sequence starts at
    /// one; index zero would make both gains infinite.
    pub fn gains(&self, n: u64) -> Result<(f64, f64)> {
        if n == 0 {
            return Err(Error::GainIndexZero { n });
        }
        let nf = n as f64;
        Ok((self.a0 / nf.powf(self.a_exp), self.b0 / nf.powf(self.b_exp)))
    }
}

/// Which update rule maintains the weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOptKind {
    Spsa,
    SpsaTrack,
    Backprop,
    InnerFirstOrder,
    SpsaCoarse,
}

impl WeightOptKind {
    /// Sampled kinds probe the loss at perturbed candidates and take part
    /// in epoch-boundary renormalization; gradient kinds do neither.
    pub fn is_sampled(self) -> bool {
        matches!(
            self,
            WeightOptKind::Spsa | WeightOptKind::SpsaTrack | WeightOptKind::SpsaCoarse
        )
    }
}

/// One raw two-measurement update on a plain estimate slice.
///
/// Probes `loss_eval` at `estimate + beta * delta` and `estimate - beta *
/// delta`, then moves every coordinate with a nonzero direction entry by
/// `alpha * delta_i * (l_plus - l_minus) / (2 * beta)` and clamps it to the
/// floor. Coordinates with a zero direction entry are left bitwise intact.
/// `loss_eval` is called exactly twice and only ever sees candidate values.
pub fn two_point_step<S: Scalar>(
    estimate: &mut [S],
    delta: &[S],
    alpha: S,
    beta: S,
    mut loss_eval: impl FnMut(&[S]) -> Result<S>,
) -> Result<()> {
    if delta.len() != estimate.len() {
        return Err(Error::Dimension {
            context: "perturbation direction",
            expected: estimate.len(),
            actual: delta.len(),
        });
    }
    if !(alpha.is_finite() && beta.is_finite() && beta > S::zero()) {
        return Err(Error::Config(format!(
            "two-measurement step needs finite alpha and positive beta, got alpha {}, beta {}",
            alpha.as_f64(),
            beta.as_f64()
        )));
    }
    let plus: Vec<S> = estimate
        .iter()
        .zip(delta)
        .map(|(&e, &d)| e + beta * d)
        .collect();
    let minus: Vec<S> = estimate
        .iter()
        .zip(delta)
        .map(|(&e, &d)| e - beta * d)
        .collect();
    let l_plus = loss_eval(&plus)?;
    if !l_plus.is_finite() {
        return Err(Error::NonFiniteObservation);
    }
    let l_minus = loss_eval(&minus)?;
    if !l_minus.is_finite() {
        return Err(Error::NonFiniteObservation);
    }
    let scale = alpha * (l_plus - l_minus) / (S::of(2.0) * beta);
    let floor = S::of(WEIGHT_FLOOR);
    for (e, &d) in estimate.iter_mut().zip(delta) {
        if d == S::zero() {
            continue;
        }
        *e -= scale * d;
        if *e < floor {
            *e = floor;
        }
    }
    Ok(())
}

/// Rescales a positive weight vector to the norm of the all-ones vector of
/// the same length, preserving ratios and therefore the argmin.
pub fn renormalize<S: Scalar>(values: &mut [S]) -> Result<()> {
    let norm = values.iter().map(|&v| v * v).sum::<S>().sqrt();
    if !(norm.is_finite() && norm > S::zero()) {
        return Err(Error::ZeroWeightNorm);
    }
    let scale = S::of(values.len() as f64).sqrt() / norm;
    for v in values.iter_mut() {
        *v *= scale;
    }
    Ok(())
}

/// Mutable state for one run's weight optimizer: the positive estimate, the
/// gain schedule with its update counter, the owned perturbation stream,
/// and whichever auxiliary optimizer the kind needs.
#[derive(Clone, Debug)]
pub struct WeightOptState<S: Scalar> {
    kind: WeightOptKind,
    weights: MultiTaskWeights<S>,
    schedule: GainSchedule,
    n: u64,
    normalize: bool,
    rng: ChaCha12Rng,
    shared_optim: Option<Optimizer<S>>,
    inner_adam: Option<Adam<S>>,
    history: Option<Vec<Vec<S>>>,
}

impl<S: Scalar> WeightOptState<S> {
    /// The perturbation stream is derived from the run seed, so weight
    /// draws never shift episode sampling and vice versa.
    pub fn new(
        kind: WeightOptKind,
        weights: MultiTaskWeights<S>,
        schedule: GainSchedule,
        normalize: bool,
        seed: u64,
    ) -> Result<Self> {
        schedule.validate()?;
        let want = if kind == WeightOptKind::SpsaCoarse {
            WeightMode::PerCoarse
        } else {
            WeightMode::PerTask
        };
        if weights.mode() != want {
            return Err(Error::Config(format!(
                "weight optimizer {kind:?} expects {want:?} weights, got {:?}",
                weights.mode()
            )));
        }
        Ok(WeightOptState {
            kind,
            weights,
            schedule,
            n: 1,
            normalize,
            rng: derive_stream(seed, StreamKind::Perturbation),
            shared_optim: None,
            inner_adam: None,
            history: None,
        })
    }

    /// Attaches the optimizer the gradient update shares with the model
    /// parameters: same kind, same learning rate, zero weight decay.
    pub fn with_shared_optimizer(mut self, optim: Optimizer<S>) -> Self {
        self.shared_optim = Some(optim);
        self
    }

    /// Attaches the dedicated Adam instance for the inner-objective update.
    pub fn with_inner_adam(mut self, lr: f64) -> Self {
        self.inner_adam = Some(Adam::with_defaults(lr));
        self
    }

    /// Keeps the shared optimizer's rate in lockstep with the model's when
    /// the run decays it. No-op for kinds without a shared optimizer.
    pub fn set_shared_lr(&mut self, lr: S) {
        if let Some(o) = &mut self.shared_optim {
            o.set_lr(lr);
        }
    }

    pub fn kind(&self) -> WeightOptKind {
        self.kind
    }

    pub fn weights(&self) -> &MultiTaskWeights<S> {
        &self.weights
    }

    pub fn values(&self) -> &[S] {
        self.weights.values()
    }

    /// Index of the next update, starting at one.
    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn schedule(&self) -> &GainSchedule {
        &self.schedule
    }

    /// Starts recording the estimate sequence, beginning with the current
    /// value. Tracking updates record two entries each, the held estimate
    /// while the measurement pair is taken and then the moved one; every
    /// other update records one.
    pub fn enable_history(&mut self) {
        self.history = Some(vec![self.weights.values().to_vec()]);
    }

    pub fn history(&self) -> Option<&[Vec<S>]> {
        self.history.as_deref()
    }

    fn record(&mut self, entry: Vec<S>) {
        if let Some(h) = &mut self.history {
            h.push(entry);
        }
    }

    fn expect_kind(&self, want: WeightOptKind) -> Result<()> {
        if self.kind == want {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "update for {want:?} called on a {:?} state",
                self.kind
            )))
        }
    }

    /// Direction entries are unit magnitude with independent random signs;
    /// masked-out coordinates get zero and consume no randomness.
    fn draw_delta(&mut self, mask: Option<&BTreeSet<usize>>) -> Vec<S> {
        let len = self.weights.len();
        (0..len)
            .map(|i| {
                if mask.is_some_and(|m| !m.contains(&i)) {
                    S::zero()
                } else if self.rng.gen::<bool>() {
                    S::one()
                } else {
                    -S::one()
                }
            })
            .collect()
    }

    fn sampled_update(
        &mut self,
        mask: Option<&BTreeSet<usize>>,
        loss_eval: impl FnMut(&[S]) -> Result<S>,
    ) -> Result<()> {
        let (alpha, beta) = self.schedule.gains(self.n)?;
        let delta = self.draw_delta(mask);
        let mut values = self.weights.values().to_vec();
        two_point_step(&mut values, &delta, S::of(alpha), S::of(beta), loss_eval)?;
        self.weights.set_values(values)?;
        self.n += 1;
        Ok(())
    }

    /// Epoch-boundary renormalization, a no-op unless enabled and the kind
    /// is sampled. Returns whether the weights were rescaled. Does not
    /// advance the update counter.
    pub fn end_epoch(&mut self) -> Result<bool> {
        if !(self.normalize && self.kind.is_sampled()) {
            return Ok(false);
        }
        let mut values = self.weights.values().to_vec();
        renormalize(&mut values)?;
        self.weights.set_values(values)?;
        let entry = self.weights.values().to_vec();
        self.record(entry);
        Ok(true)
    }
}

/// One plain sampled update: fresh direction, two probes, move, clamp.
pub fn spsa_update<S: Scalar>(
    state: &mut WeightOptState<S>,
    loss_eval: impl FnMut(&[S]) -> Result<S>,
) -> Result<()> {
    state.expect_kind(WeightOptKind::Spsa)?;
    state.sampled_update(None, loss_eval)?;
    let entry = state.weights.values().to_vec();
    state.record(entry);
    Ok(())
}

/// One tracking update. The single-step arithmetic is identical to
/// [`spsa_update`]; the tracking behavior comes from running it under a
/// slowly decaying schedule, and the recorded sequence keeps the estimate
/// bitwise constant over the index where the measurement pair is taken.
pub fn spsa_track_update<S: Scalar>(
    state: &mut WeightOptState<S>,
    loss_eval: impl FnMut(&[S]) -> Result<S>,
) -> Result<()> {
    state.expect_kind(WeightOptKind::SpsaTrack)?;
    let held = state.weights.values().to_vec();
    state.sampled_update(None, loss_eval)?;
    state.record(held);
    let entry = state.weights.values().to_vec();
    state.record(entry);
    Ok(())
}

/// Sampled update restricted to the coarse classes present in the episode:
/// absent coordinates get no perturbation and stay bitwise untouched.
pub fn spsa_coarse_update<S: Scalar>(
    state: &mut WeightOptState<S>,
    present: &[usize],
    loss_eval: impl FnMut(&[S]) -> Result<S>,
) -> Result<()> {
    state.expect_kind(WeightOptKind::SpsaCoarse)?;
    if present.is_empty() {
        return Err(Error::EmptyBatch {
            context: "coarse weight update",
        });
    }
    let mask: BTreeSet<usize> = present.iter().copied().collect();
    if let Some(&max) = mask.iter().next_back() {
        if max >= state.weights.len() {
            return Err(Error::Config(format!(
                "coarse id {max} out of range for {} weights",
                state.weights.len()
            )));
        }
    }
    state.sampled_update(Some(&mask), loss_eval)?;
    let entry = state.weights.values().to_vec();
    state.record(entry);
    Ok(())
}

/// One analytic-gradient step through the shared optimizer, followed by the
/// floor clamp.
pub fn backprop_weight_step<S: Scalar>(
    state: &mut WeightOptState<S>,
    task_losses: &[S],
) -> Result<()> {
    state.expect_kind(WeightOptKind::Backprop)?;
    let grad = multitask_weight_grad(state.weights.values(), task_losses)?;
    let optim = state.shared_optim.as_mut().ok_or_else(|| {
        Error::Config("gradient weight update needs the shared optimizer attached".into())
    })?;
    let mut values = state.weights.values().to_vec();
    optim.step(&mut values, &grad)?;
    commit_clamped(state, values)
}

/// One analytic-gradient step through the dedicated Adam instance.
pub fn inner_first_order_step<S: Scalar>(
    state: &mut WeightOptState<S>,
    task_losses: &[S],
) -> Result<()> {
    state.expect_kind(WeightOptKind::InnerFirstOrder)?;
    let grad = multitask_weight_grad(state.weights.values(), task_losses)?;
    let adam = state.inner_adam.as_mut().ok_or_else(|| {
        Error::Config("inner-objective weight update needs its dedicated Adam attached".into())
    })?;
    let mut values = state.weights.values().to_vec();
    adam.step(&mut values, &grad)?;
    commit_clamped(state, values)
}

fn commit_clamped<S: Scalar>(state: &mut WeightOptState<S>, mut values: Vec<S>) -> Result<()> {
    let floor = S::of(WEIGHT_FLOOR);
    for v in &mut values {
        if *v < floor {
            *v = floor;
        }
    }
    state.weights.set_values(values)?;
    state.n += 1;
    let entry = state.weights.values().to_vec();
    state.record(entry);
    Ok(())
}
