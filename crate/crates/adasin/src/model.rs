//! A deliberately tiny embedding backbone: one or two affine layers with a
//! tanh between them, followed by row normalization onto the unit sphere.
//!
//! The point is not capacity — it is having a differentiable map from raw
//! inputs to unit embeddings so the losses can be exercised end to end, with
//! a backward pass that is small enough to verify by finite differences.

use crate::geometry::{normalize_rows, GeometryError};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One affine layer, stored as `in x out` weight plus bias.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weight = Array2::from_shape_fn((d_in, d_out), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * scale
        });
        Layer { weight, bias: Array1::zeros(d_out) }
    }
}

/// Gradients matching [`Layer`], produced by [`Backbone::backward`].
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Intermediates saved by [`Backbone::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Array2<f64>,
    /// Hidden activation after tanh (two-layer backbones only).
    hidden: Option<Array2<f64>>,
    /// Pre-normalization output rows.
    raw: Array2<f64>,
    /// Unit-norm embeddings.
    pub embeddings: Array2<f64>,
}

/// The backbone: `affine` or `affine -> tanh -> affine`, then row-normalize.
#[derive(Debug, Clone)]
pub struct Backbone {
    layers: Vec<Layer>,
}

impl Backbone {
    /// Random initialization: weights N(0, 1/fan_in), zero biases. `hidden`
    /// picks the two-layer variant with that hidden width.
    pub fn new(d_in: usize, hidden: Option<usize>, d_out: usize, rng: &mut impl Rng) -> Self {
        let layers = match hidden {
            Some(width) => vec![
                Layer::random(d_in, width, rng),
                Layer::random(width, d_out, rng),
            ],
            None => vec![Layer::random(d_in, d_out, rng)],
        };
        Backbone { layers }
    }

    /// A fixed-point backbone: single layer with identity weights. Unit-norm
    /// inputs pass through unchanged, which makes trainer behavior easy to
    /// reason about in tests.
    pub fn identity(dim: usize) -> Self {
        Backbone {
            layers: vec![Layer { weight: Array2::eye(dim), bias: Array1::zeros(dim) }],
        }
    }

    /// Rebuild a backbone from deserialized layers, validating shape chains.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self, ModelError> {
        if layers.is_empty() || layers.len() > 2 {
            return Err(ModelError::Shape(format!(
                "backbone needs 1 or 2 layers, got {}",
                layers.len()
            )));
        }
        for layer in &layers {
            if layer.weight.ncols() != layer.bias.len() {
                return Err(ModelError::Shape(format!(
                    "layer weight is {}x{} but bias has {} entries",
                    layer.weight.nrows(),
                    layer.weight.ncols(),
                    layer.bias.len()
                )));
            }
        }
        if layers.len() == 2 && layers[0].weight.ncols() != layers[1].weight.nrows() {
            return Err(ModelError::Shape(format!(
                "layer 0 outputs {} features but layer 1 expects {}",
                layers[0].weight.ncols(),
                layers[1].weight.nrows()
            )));
        }
        Ok(Backbone { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").weight.ncols()
    }

    /// Map a batch of raw inputs to unit embeddings, keeping intermediates.
    pub fn forward_cached(&self, input: &Array2<f64>) -> Result<ForwardCache, ModelError> {
        if input.ncols() != self.input_dim() {
            return Err(ModelError::Shape(format!(
                "input has {} columns, backbone expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        let (hidden, raw) = match self.layers.len() {
            1 => (None, input.dot(&self.layers[0].weight) + &self.layers[0].bias),
            2 => {
                let pre = input.dot(&self.layers[0].weight) + &self.layers[0].bias;
                let act = pre.mapv(f64::tanh);
                let raw = act.dot(&self.layers[1].weight) + &self.layers[1].bias;
                (Some(act), raw)
            }
            n => return Err(ModelError::Shape(format!("backbone has {n} layers"))),
        };
        let embeddings = normalize_rows(&raw.view())?;
        Ok(ForwardCache { input: input.clone(), hidden, raw, embeddings })
    }

    /// Backpropagate `grad_embeddings` (d loss / d unit embeddings) to
    /// per-layer parameter gradients.
    ///
    /// Through the normalization `y = u / |u|` the incoming gradient `g`
    /// becomes `(g - (g . y) y) / |u|` -- the component of `g` tangent to the
    /// sphere, shrunk by the norm.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_embeddings: &Array2<f64>,
    ) -> Result<Vec<LayerGrads>, ModelError> {
        if grad_embeddings.dim() != cache.embeddings.dim() {
            return Err(ModelError::Shape(format!(
                "gradient is {:?}, embeddings are {:?}",
                grad_embeddings.dim(),
                cache.embeddings.dim()
            )));
        }
        let b = cache.embeddings.nrows();
        let mut grad_raw = Array2::zeros(cache.raw.dim());
        for i in 0..b {
            let y = cache.embeddings.row(i);
            let g = grad_embeddings.row(i);
            let norm = cache.raw.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let g_dot_y = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum::<f64>();
            for (j, slot) in grad_raw.row_mut(i).iter_mut().enumerate() {
                *slot = (g[j] - g_dot_y * y[j]) / norm;
            }
        }

        match self.layers.len() {
            1 => Ok(vec![LayerGrads {
                weight: cache.input.t().dot(&grad_raw),
                bias: grad_raw.sum_axis(ndarray::Axis(0)),
            }]),
            2 => {
                let hidden = cache.hidden.as_ref().expect("two-layer cache has hidden");
                let grad_out = LayerGrads {
                    weight: hidden.t().dot(&grad_raw),
                    bias: grad_raw.sum_axis(ndarray::Axis(0)),
                };
                // Through tanh: 1 - act^2.
                let grad_hidden = grad_raw.dot(&self.layers[1].weight.t());
                let grad_pre = &grad_hidden * &hidden.mapv(|a| 1.0 - a * a);
                let grad_in = LayerGrads {
                    weight: cache.input.t().dot(&grad_pre),
                    bias: grad_pre.sum_axis(ndarray::Axis(0)),
                };
                Ok(vec![grad_in, grad_out])
            }
            n => Err(ModelError::Shape(format!("backbone has {n} layers"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn outputs_are_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let backbone = Backbone::new(5, Some(8), 4, &mut rng);
        let input = Array2::from_shape_fn((6, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37).sin());
        let cache = backbone.forward_cached(&input).unwrap();
        for row in cache.embeddings.rows() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_backbone_passes_unit_inputs_through() {
        let backbone = Backbone::identity(3);
        let input = array![[0.6, 0.8, 0.0], [0.0, 0.0, 1.0]];
        let cache = backbone.forward_cached(&input).unwrap();
        for (a, b) in input.iter().zip(cache.embeddings.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Backbone::new(4, Some(6), 3, &mut ChaCha8Rng::seed_from_u64(11));
        let b = Backbone::new(4, Some(6), 3, &mut ChaCha8Rng::seed_from_u64(11));
        let c = Backbone::new(4, Some(6), 3, &mut ChaCha8Rng::seed_from_u64(12));
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            assert_eq!(la.weight, lb.weight);
            assert_eq!(la.bias, lb.bias);
        }
        assert_ne!(a.layers()[0].weight, c.layers()[0].weight);
    }

    #[test]
    fn forward_checks_input_width() {
        let backbone = Backbone::identity(3);
        let input = Array2::zeros((2, 4));
        assert!(matches!(
            backbone.forward_cached(&input),
            Err(ModelError::Shape(_))
        ));
    }

    /// Finite-difference probe of every parameter gradient, for both
    /// architectures, against the linear functional `L = sum(R * Y)`.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        for hidden in [None, Some(6)] {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut backbone = Backbone::new(4, hidden, 3, &mut rng);
            let input = Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64 * 0.61).cos());
            let probe = Array2::from_shape_fn((5, 3), |(i, j)| ((i * 3 + j) as f64 * 0.29).sin());

            let cache = backbone.forward_cached(&input).unwrap();
            let grads = backbone.backward(&cache, &probe).unwrap();

            let step = 1e-6;
            for layer_idx in 0..backbone.layers().len() {
                let (rows, cols) = backbone.layers()[layer_idx].weight.dim();
                for r in 0..rows {
                    for c in 0..cols {
                        let original = backbone.layers()[layer_idx].weight[[r, c]];
                        backbone.layers_mut()[layer_idx].weight[[r, c]] = original + step;
                        let up = (&backbone.forward_cached(&input).unwrap().embeddings * &probe).sum();
                        backbone.layers_mut()[layer_idx].weight[[r, c]] = original - step;
                        let down = (&backbone.forward_cached(&input).unwrap().embeddings * &probe).sum();
                        backbone.layers_mut()[layer_idx].weight[[r, c]] = original;
                        let fd = (up - down) / (2.0 * step);
                        let analytic = grads[layer_idx].weight[[r, c]];
                        let scale = analytic.abs().max(fd.abs()).max(1e-2);
                        assert!(
                            (analytic - fd).abs() / scale < 1e-6,
                            "hidden={hidden:?} layer {layer_idx} weight [{r},{c}]: {analytic} vs {fd}"
                        );
                    }
                }
                for c in 0..backbone.layers()[layer_idx].bias.len() {
                    let original = backbone.layers()[layer_idx].bias[c];
                    backbone.layers_mut()[layer_idx].bias[c] = original + step;
                    let up = (&backbone.forward_cached(&input).unwrap().embeddings * &probe).sum();
                    backbone.layers_mut()[layer_idx].bias[c] = original - step;
                    let down = (&backbone.forward_cached(&input).unwrap().embeddings * &probe).sum();
                    backbone.layers_mut()[layer_idx].bias[c] = original;
                    let fd = (up - down) / (2.0 * step);
                    let analytic = grads[layer_idx].bias[c];
                    let scale = analytic.abs().max(fd.abs()).max(1e-2);
                    assert!(
                        (analytic - fd).abs() / scale < 1e-6,
                        "hidden={hidden:?} layer {layer_idx} bias [{c}]: {analytic} vs {fd}"
                    );
                }
            }
        }
    }
}
