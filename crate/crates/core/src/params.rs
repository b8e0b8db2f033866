//! Flat parameter storage with a shape table describing the layer layout.
//!
//! All parameters of a network live in one contiguous vector: per layer the
//! row-major `in_dim x out_dim` weight block followed by the `out_dim` bias
//! block. Optimizers and the adaptation loop treat parameters as plain
//! vectors; the shape table recovers the per-layer views.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTable {
    layers: Vec<LayerShape>,
    total_len: usize,
}

impl ShapeTable {
    /// Builds the layout for a fully connected net with the given widths,
    /// e.g. `[16, 32, 5]` for one hidden layer.
    pub fn from_layer_dims(layer_dims: &[usize]) -> Self {
        assert!(
            layer_dims.len() >= 2,
            "a network needs at least input and output widths"
        );
        assert!(
            layer_dims.iter().all(|&d| d > 0),
            "layer widths must be positive"
        );
        let mut layers = Vec::with_capacity(layer_dims.len() - 1);
        let mut offset = 0;
        for w in layer_dims.windows(2) {
            let (in_dim, out_dim) = (w[0], w[1]);
            layers.push(LayerShape {
                in_dim,
                out_dim,
                weight_offset: offset,
                bias_offset: offset + in_dim * out_dim,
            });
            offset += in_dim * out_dim + out_dim;
        }
        ShapeTable {
            layers,
            total_len: offset,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> LayerShape {
        self.layers[l]
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].in_dim];
        dims.extend(self.layers.iter().map(|l| l.out_dim));
        dims
    }
}

/// One layer's parameters in structured form, produced by
/// [`ParamVector::unflatten`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub weights: Matrix<S>,
    pub bias: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<S> {
    values: Vec<S>,
    shape: ShapeTable,
}

pub type ParamVector64 = ParamVector<f64>;

impl<S: Scalar> ParamVector<S> {
    pub fn zeros(shape: ShapeTable) -> Self {
        let values = vec![S::zero(); shape.total_len()];
        ParamVector { values, shape }
    }

    pub fn from_values(values: Vec<S>, shape: ShapeTable) -> Result<Self> {
        if values.len() != shape.total_len() {
            return Err(Error::Dimension {
                context: "parameter vector length",
                expected: shape.total_len(),
                actual: values.len(),
            });
        }
        Ok(ParamVector { values, shape })
    }

    pub fn shape(&self) -> &ShapeTable {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer_weights(&self, l: usize) -> &[S] {
        let s = self.shape.layer(l);
        &self.values[s.weight_offset..s.weight_offset + s.in_dim * s.out_dim]
    }

    pub fn layer_bias(&self, l: usize) -> &[S] {
        let s = self.shape.layer(l);
        &self.values[s.bias_offset..s.bias_offset + s.out_dim]
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [S] {
        let s = self.shape.layer(l);
        &mut self.values[s.weight_offset..s.weight_offset + s.in_dim * s.out_dim]
    }

    pub fn layer_bias_mut(&mut self, l: usize) -> &mut [S] {
        let s = self.shape.layer(l);
        &mut self.values[s.bias_offset..s.bias_offset + s.out_dim]
    }

    /// Splits the flat vector into per-layer weight matrices and bias vectors.
    pub fn unflatten(&self) -> Vec<LayerParams<S>> {
        (0..self.shape.n_layers())
            .map(|l| {
                let s = self.shape.layer(l);
                LayerParams {
                    weights: Matrix::from_vec(
                        s.in_dim,
                        s.out_dim,
                        self.layer_weights(l).to_vec(),
                    )
                    .expect("layer weight block has in_dim*out_dim entries"),
                    bias: self.layer_bias(l).to_vec(),
                }
            })
            .collect()
    }

    /// Rebuilds a flat vector from per-layer parameters. The inverse of
    /// [`ParamVector::unflatten`], bit for bit.
    pub fn flatten(layers: &[LayerParams<S>], shape: &ShapeTable) -> Result<Self> {
        if layers.len() != shape.n_layers() {
            return Err(Error::Dimension {
                context: "flatten layer count",
                expected: shape.n_layers(),
                actual: layers.len(),
            });
        }
        let mut values = Vec::with_capacity(shape.total_len());
        for (l, lp) in layers.iter().enumerate() {
            let s = shape.layer(l);
            if lp.weights.rows() != s.in_dim || lp.weights.cols() != s.out_dim {
                return Err(Error::Dimension {
                    context: "flatten weight block",
                    expected: s.in_dim * s.out_dim,
                    actual: lp.weights.rows() * lp.weights.cols(),
                });
            }
            if lp.bias.len() != s.out_dim {
                return Err(Error::Dimension {
                    context: "flatten bias block",
                    expected: s.out_dim,
                    actual: lp.bias.len(),
                });
            }
            values.extend_from_slice(lp.weights.data());
            values.extend_from_slice(&lp.bias);
        }
        Ok(ParamVector {
            values,
            shape: shape.clone(),
        })
    }

    /// `self += a * other`, the workhorse of gradient steps.
    pub fn add_scaled(&mut self, a: S, other: &ParamVector<S>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Dimension {
                context: "parameter vector arithmetic",
                expected: self.len(),
                actual: other.len(),
            });
        }
        for (x, &y) in self.values.iter_mut().zip(other.values.iter()) {
            *x += a * y;
        }
        Ok(())
    }

    pub fn scale(&mut self, a: S) {
        for x in self.values.iter_mut() {
            *x *= a;
        }
    }

    pub fn l2_norm(&self) -> S {
        self.values
            .iter()
            .map(|&v| v * v)
            .fold(S::zero(), |a, b| a + b)
            .sqrt()
    }

    /// Element-wise scalar conversion, preserving the shape table.
    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> ParamVector<T> {
        ParamVector {
            values: self.values.iter().map(|&v| f(v)).collect(),
            shape: self.shape.clone(),
        }
    }
}
