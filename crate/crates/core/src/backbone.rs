//! Fully connected backbone with exact reverse-mode gradients.
//!
//! Hidden layers apply the configured activation; the final layer is linear
//! so outputs can serve as logits or embeddings. The backward pass consumes
//! a loss head's output gradient and returns gradients in the same flat
//! layout as the parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossHead;
use crate::matrix::Matrix;
use crate::params::{ParamVector, ShapeTable};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Relu => {
                if z > S::zero() {
                    z
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the post-activation value `a`.
    fn grad_from_output<S: Scalar>(self, a: S) -> S {
        match self {
            Activation::Relu => {
                if a > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => S::one() - a * a,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<S> {
    activation: Activation,
    params: ParamVector<S>,
}

pub type Backbone64 = Backbone<f64>;

/// Per-layer activations retained by [`Backbone::forward_trace`]:
/// `activations[0]` is the input batch, `activations[L]` the output.
#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    activations: Vec<Matrix<S>>,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn output(&self) -> &Matrix<S> {
        self.activations.last().expect("trace holds the output")
    }
}

impl<S: Scalar> Backbone<S> {
    /// Random initialization: He-uniform weights under ReLU, Xavier-uniform
    /// under tanh, zero biases.
    pub fn new_seeded(layer_dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let shape = ShapeTable::from_layer_dims(layer_dims);
        let mut params = ParamVector::zeros(shape.clone());
        for l in 0..shape.n_layers() {
            let s = shape.layer(l);
            let limit = match activation {
                Activation::Relu => (6.0 / s.in_dim as f64).sqrt(),
                Activation::Tanh => (6.0 / (s.in_dim + s.out_dim) as f64).sqrt(),
            };
            for w in params.layer_weights_mut(l) {
                *w = S::of(rng.gen_range(-limit..limit));
            }
        }
        Backbone { activation, params }
    }

    pub fn from_params(activation: Activation, params: ParamVector<S>) -> Self {
        Backbone { activation, params }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &ParamVector<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector<S> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamVector<S> {
        self.params
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        self.params.shape().layer_dims()
    }

    pub fn input_dim(&self) -> usize {
        self.params.shape().layer(0).in_dim
    }

    pub fn output_dim(&self) -> usize {
        let shape = self.params.shape();
        shape.layer(shape.n_layers() - 1).out_dim
    }

    /// With the same activation, swaps in a different parameter vector.
    /// Panics if the shape table differs; callers only pass gradients or
    /// adapted parameters produced from this backbone.
    pub fn with_params(&self, params: ParamVector<S>) -> Backbone<S> {
        assert_eq!(
            params.shape(),
            self.params.shape(),
            "parameter shape must match the backbone"
        );
        Backbone {
            activation: self.activation,
            params,
        }
    }

    /// The finiteness check runs on pre-activations: relu would squash a
    /// NaN to zero, so checking afterwards could mask a poisoned input.
    fn layer_forward(&self, l: usize, input: &Matrix<S>, is_last: bool) -> Result<Matrix<S>> {
        let s = self.params.shape().layer(l);
        let weights = self.params.layer_weights(l);
        let bias = self.params.layer_bias(l);
        let mut out = Matrix::zeros(input.rows(), s.out_dim);
        for r in 0..input.rows() {
            let in_row = input.row(r);
            let out_row = out.row_mut(r);
            out_row.copy_from_slice(bias);
            for (i, &x) in in_row.iter().enumerate() {
                let w_row = &weights[i * s.out_dim..(i + 1) * s.out_dim];
                for (o, &w) in out_row.iter_mut().zip(w_row) {
                    *o += x * w;
                }
            }
            if out_row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteForward { layer: l });
            }
            if !is_last {
                for o in out_row.iter_mut() {
                    *o = self.activation.apply(*o);
                }
            }
        }
        Ok(out)
    }

    /// Batch forward pass. Rows are independent samples.
    pub fn forward(&self, batch: &Matrix<S>) -> Result<Matrix<S>> {
        self.check_input(batch)?;
        let n_layers = self.params.shape().n_layers();
        let mut current = batch.clone();
        for l in 0..n_layers {
            current = self.layer_forward(l, &current, l + 1 == n_layers)?;
        }
        Ok(current)
    }

    /// Forward pass retaining every layer's activations for the backward
    /// pass. Non-finite values are reported with the producing layer index.
    pub fn forward_trace(&self, batch: &Matrix<S>) -> Result<ForwardTrace<S>> {
        self.check_input(batch)?;
        let n_layers = self.params.shape().n_layers();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(batch.clone());
        for l in 0..n_layers {
            let next = self.layer_forward(l, &activations[l], l + 1 == n_layers)?;
            activations.push(next);
        }
        Ok(ForwardTrace { activations })
    }

    /// Reverse pass from `d_output = dL/d(output)`. Returns parameter
    /// gradients in the flat layout.
    pub fn backward(&self, trace: &ForwardTrace<S>, d_output: &Matrix<S>) -> ParamVector<S> {
        let shape = self.params.shape();
        let n_layers = shape.n_layers();
        assert_eq!(
            trace.activations.len(),
            n_layers + 1,
            "trace does not match this backbone"
        );
        let out = trace.output();
        assert_eq!(d_output.rows(), out.rows(), "output gradient batch size");
        assert_eq!(d_output.cols(), out.cols(), "output gradient width");

        let mut grads = ParamVector::zeros(shape.clone());
        let mut delta = d_output.clone();
        for l in (0..n_layers).rev() {
            let s = shape.layer(l);
            let input = &trace.activations[l];
            {
                let gw = grads.layer_weights_mut(l);
                for r in 0..input.rows() {
                    let in_row = input.row(r);
                    let d_row = delta.row(r);
                    for (i, &x) in in_row.iter().enumerate() {
                        let gw_row = &mut gw[i * s.out_dim..(i + 1) * s.out_dim];
                        for (g, &d) in gw_row.iter_mut().zip(d_row) {
                            *g += x * d;
                        }
                    }
                }
            }
            {
                let gb = grads.layer_bias_mut(l);
                for r in 0..delta.rows() {
                    for (g, &d) in gb.iter_mut().zip(delta.row(r)) {
                        *g += d;
                    }
                }
            }
            if l > 0 {
                let weights = self.params.layer_weights(l);
                let mut prev = Matrix::zeros(delta.rows(), s.in_dim);
                for r in 0..delta.rows() {
                    let d_row = delta.row(r);
                    let a_row = input.row(r);
                    let p_row = prev.row_mut(r);
                    for i in 0..s.in_dim {
                        let w_row = &weights[i * s.out_dim..(i + 1) * s.out_dim];
                        let mut acc = S::zero();
                        for (&w, &d) in w_row.iter().zip(d_row) {
                            acc += w * d;
                        }
                        p_row[i] = acc * self.activation.grad_from_output(a_row[i]);
                    }
                }
                delta = prev;
            }
        }
        grads
    }

    fn check_input(&self, batch: &Matrix<S>) -> Result<()> {
        let expected = self.input_dim();
        if batch.cols() != expected {
            return Err(Error::Dimension {
                context: "backbone input features",
                expected,
                actual: batch.cols(),
            });
        }
        Ok(())
    }
}

/// Forward, head evaluation, and reverse pass in one call: returns the head
/// loss and the exact gradient with respect to every parameter.
pub fn backprop_grads<S: Scalar>(
    backbone: &Backbone<S>,
    batch: &Matrix<S>,
    head: &dyn LossHead<S>,
) -> Result<(S, ParamVector<S>)> {
    let trace = backbone.forward_trace(batch)?;
    let (loss, d_output) = head.loss_and_grad(trace.output())?;
    let grads = backbone.backward(&trace, &d_output);
    Ok((loss, grads))
}
