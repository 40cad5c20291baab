//! Parameter storage and initialization.

use rand::Rng;

use crate::scalar::Scalar;

use super::layer::{expand_model, LayerSpec, ModelSpec};

/// Weights `[offset][in_ch][out_ch]` flat, plus optional per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub w: Vec<T>,
    pub b: Option<Vec<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn zeros(spec: &LayerSpec) -> Self {
        LayerParams {
            w: vec![T::zero(); spec.weight_len()],
            b: spec.bias.then(|| vec![T::zero(); spec.out_ch]),
        }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.as_ref().map_or(0, |b| b.len())
    }
}

/// One entry per expanded convolution of a model spec, in model order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.len()).sum()
    }
}

// Box-Muller; only used at initialization, never on a coding path.
fn normal_sample<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// He-style init: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_store<T: Scalar>(spec: &ModelSpec, rng: &mut impl Rng) -> ParameterStore<T> {
    let layers = expand_model(spec)
        .iter()
        .map(|l| {
            let fan_in = (l.kernel as usize).pow(3) * l.in_ch;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = (0..l.weight_len()).map(|_| T::from_dbl(normal_sample(rng) * std)).collect();
            LayerParams { w, b: l.bias.then(|| vec![T::zero(); l.out_ch]) }
        })
        .collect();
    ParameterStore { layers }
}
