//! Fully connected networks with hand-derived backpropagation.
//!
//! Layers are stored as `(out × in)` weight matrices plus a bias vector. A batch
//! of inputs is a `(batch × in)` matrix, so a layer computes `X·Wᵀ + b`.
//! Hidden layers apply the configured activation; the last layer is linear
//! unless `activate_output` is set (used for encoders whose output feeds
//! further heads).

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::SeededRng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub hidden_activation: Activation,
    #[serde(default)]
    pub activate_output: bool,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, hidden_activation: Activation) -> Self {
        Self {
            layer_dims,
            hidden_activation,
            activate_output: false,
        }
    }

    pub fn with_activated_output(mut self) -> Self {
        self.activate_output = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output dims"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid("MLP layer dims must be >= 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Parameter gradients, shaped like [`MlpParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub layers: Vec<Layer>,
}

/// Per-layer values retained by the forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    outputs: Matrix,
}

impl MlpCache {
    pub fn outputs(&self) -> &Matrix {
        &self.outputs
    }
}

impl MlpParams {
    /// Uniform Glorot initialization with zero biases.
    pub fn init(spec: MlpSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let mut layer = Layer::zeros(fan_out, fan_in);
                for v in layer.weight.data_mut() {
                    *v = rng.uniform_range(-a, a);
                }
                layer
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims
            .windows(2)
            .map(|w| Layer::zeros(w[1], w[0]))
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// All parameters, layer by layer (weights then bias).
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        assign_layers(&mut self.layers, flat)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.spec.activate_output
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<(MlpCache, Matrix)> {
        mlp_forward(self, inputs)
    }

    /// Forward pass without retaining the cache.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        mlp_forward(self, inputs).map(|(_, out)| out)
    }
}

impl MlpGradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(layers.iter().map(Layer::param_count).sum());
    for l in layers {
        flat.extend_from_slice(l.weight.data());
        flat.extend_from_slice(&l.bias);
    }
    flat
}

fn assign_layers(layers: &mut [Layer], flat: &[f64]) -> Result<()> {
    let total: usize = layers.iter().map(Layer::param_count).sum();
    if flat.len() != total {
        return Err(Error::invalid(format!(
            "flat parameter length {} does not match {total}",
            flat.len()
        )));
    }
    let mut offset = 0;
    for l in layers {
        let n = l.weight.data().len();
        l.weight.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&flat[offset..offset + nb]);
        offset += nb;
    }
    Ok(())
}

pub fn mlp_forward(params: &MlpParams, inputs: &Matrix) -> Result<(MlpCache, Matrix)> {
    if inputs.cols() != params.input_dim() {
        return Err(Error::invalid(format!(
            "MLP expects {} input columns, got {}",
            params.input_dim(),
            inputs.cols()
        )));
    }
    let act = params.spec.hidden_activation;
    let mut layer_inputs = Vec::with_capacity(params.layers.len());
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    let mut current = inputs.clone();
    for (li, layer) in params.layers.iter().enumerate() {
        let mut z = current.matmul_transpose_b(&layer.weight)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        let next = if params.activated(li) {
            let mut a = z.clone();
            a.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
            a
        } else {
            z.clone()
        };
        layer_inputs.push(current);
        pre_activations.push(z);
        current = next;
    }
    if !current.is_finite() {
        return Err(Error::Numeric("MLP forward produced non-finite outputs".into()));
    }
    let cache = MlpCache {
        layer_inputs,
        pre_activations,
        outputs: current.clone(),
    };
    Ok((cache, current))
}

/// Backpropagates `output_gradient` (dLoss/dOutputs) to parameter gradients.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &MlpCache,
    output_gradient: &Matrix,
) -> Result<MlpGradients> {
    mlp_backward_with_input(params, cache, output_gradient).map(|(g, _)| g)
}

/// Like [`mlp_backward`], also returning dLoss/dInputs.
pub fn mlp_backward_with_input(
    params: &MlpParams,
    cache: &MlpCache,
    output_gradient: &Matrix,
) -> Result<(MlpGradients, Matrix)> {
    if cache.layer_inputs.len() != params.layers.len() {
        return Err(Error::invalid("cache does not come from this network"));
    }
    if output_gradient.shape() != cache.outputs.shape() {
        return Err(Error::invalid(format!(
            "output gradient shape {:?} does not match outputs {:?}",
            output_gradient.shape(),
            cache.outputs.shape()
        )));
    }
    let act = params.spec.hidden_activation;
    let mut grads = MlpGradients::zeros_like(params);
    let mut delta = output_gradient.clone();
    for li in (0..params.layers.len()).rev() {
        if params.activated(li) {
            let z = &cache.pre_activations[li];
            for (d, &zv) in delta.data_mut().iter_mut().zip(z.data()) {
                *d *= act.derivative(zv, act.apply(zv));
            }
        }
        let input = &cache.layer_inputs[li];
        grads.layers[li].weight = delta.transpose_a_matmul(input)?;
        grads.layers[li].bias = delta.column_sums();
        delta = delta.matmul(&params.layers[li].weight)?;
    }
    Ok((grads, delta))
}
