//! Dense ReLU multilayer perceptrons with hand-written reverse mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative at a pre-activation; the ReLU kink at 0 gets 0.
    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `act(W x + b)` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRepr {
    /// `[out, in]`
    shape: [usize; 2],
    /// Row-major `out × in`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl TryFrom<LayerRepr> for Layer {
    type Error = Error;
    fn try_from(r: LayerRepr) -> Result<Self> {
        let [out, inp] = r.shape;
        if out == 0
            || inp == 0
            || out.checked_mul(inp) != Some(r.weight.len())
            || r.bias.len() != out
        {
            return Err(Error::Dimension(format!(
                "layer shape {:?} does not match its arrays",
                r.shape
            )));
        }
        if r.weight.iter().chain(&r.bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "layer parameters must be finite".into(),
            ));
        }
        Ok(Layer {
            weight: DenseMatrix::from_row_major(out, inp, r.weight)?,
            bias: r.bias,
            activation: r.activation,
        })
    }
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        LayerRepr {
            shape: [l.weight.rows(), l.weight.cols()],
            weight: l.weight.as_slice().to_vec(),
            bias: l.bias,
            activation: l.activation,
        }
    }
}

impl Layer {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        inputs: usize,
        outputs: usize,
        activation: Activation,
    ) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut weight = DenseMatrix::zeros(outputs, inputs);
        for i in 0..outputs {
            for w in weight.row_mut(i) {
                *w = rng.random_range(-bound..bound);
            }
        }
        let bias = (0..outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn n_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }

    /// Returns `(pre_activation, output)`.
    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.weight.mul_vec(x);
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let out = pre.iter().map(|&v| self.activation.apply(v)).collect();
        (pre, out)
    }

    /// Backpropagate `g_out` through the layer. Parameter gradients are added
    /// to `grad` when given; returns the gradient with respect to the input.
    pub fn backward(
        &self,
        x: &[f64],
        pre: &[f64],
        g_out: &[f64],
        grad: Option<&mut LayerGrad>,
    ) -> Vec<f64> {
        let g_pre: Vec<f64> = g_out
            .iter()
            .zip(pre)
            .map(|(g, &p)| g * self.activation.derivative(p))
            .collect();
        if let Some(grad) = grad {
            for (i, &gp) in g_pre.iter().enumerate() {
                if gp != 0.0 {
                    crate::linalg::axpy(gp, x, grad.weight.row_mut(i));
                    grad.bias[i] += gp;
                }
            }
        }
        self.weight.tr_mul_vec(&g_pre)
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        Self {
            weight: DenseMatrix::zeros(layer.outputs(), layer.inputs()),
            bias: vec![0.0; layer.outputs()],
        }
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.weight.as_slice().iter().chain(&self.bias).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Activations recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub inputs: Vec<Vec<f64>>,
    pub pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Hidden layers use ReLU; the last layer is affine.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize]) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let act = if k + 1 == n {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::init(rng, sizes[k], sizes[k + 1], act)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Layer::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::outputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("network has no layers".into()));
        }
        for (k, w) in self.layers.windows(2).enumerate() {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Dimension(format!(
                    "layer {k} outputs {} but layer {} expects {}",
                    w[0].outputs(),
                    k + 1,
                    w[1].inputs()
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &self.layers {
            h = layer.forward(&h).1;
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let (p, out) = layer.forward(&h);
            inputs.push(h);
            pre.push(p);
            h = out;
        }
        MlpTrace {
            inputs,
            pre,
            output: h,
        }
    }

    /// Reverse pass; accumulates into `grads` when given.
    pub fn backward(
        &self,
        trace: &MlpTrace,
        g_out: &[f64],
        mut grads: Option<&mut [LayerGrad]>,
    ) -> Vec<f64> {
        let mut g = g_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let lg = grads.as_deref_mut().map(|gs| &mut gs[k]);
            g = self.layers[k].backward(&trace.inputs[k], &trace.pre[k], &g, lg);
        }
        g
    }

    pub fn zero_grads(&self) -> Vec<LayerGrad> {
        self.layers.iter().map(LayerGrad::zeros_like).collect()
    }
}
