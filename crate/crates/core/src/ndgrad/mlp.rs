use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, Unary};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math;

/// Hidden-layer nonlinearity. `Silu` is composed as `x * sigmoid(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Softplus,
    Sigmoid,
    Silu,
}

impl Activation {
    fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Tanh => Unary::Tanh.forward(x),
            Activation::Softplus => Unary::Softplus.forward(x),
            Activation::Sigmoid => Unary::Sigmoid.forward(x),
            Activation::Silu => kernels::mul(x, &Unary::Sigmoid.forward(x)).expect("same shape"),
        }
    }

    fn on_tape(self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Softplus => tape.softplus(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Silu => {
                let s = tape.sigmoid(x);
                tape.mul(x, s)?
            }
        })
    }
}

/// One affine layer: `y = x W + b` with `W: (in, out)` and `b: (1, out)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Multi-layer perceptron; `activations[i]` follows layer `i`, the last
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr")]
pub struct MlpParams {
    layers: Vec<Layer>,
    activations: Vec<Activation>,
}

#[derive(Deserialize)]
struct MlpRepr {
    layers: Vec<Layer>,
    activations: Vec<Activation>,
}

impl TryFrom<MlpRepr> for MlpParams {
    type Error = Error;
    fn try_from(r: MlpRepr) -> Result<Self> {
        MlpParams::new(r.layers, r.activations)
    }
}

/// Layer-local parameter names, in a fixed order.
const WEIGHT: &str = "weight";
const BIAS: &str = "bias";

impl MlpParams {
    pub fn new(layers: Vec<Layer>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::contract("an MLP needs at least one layer"));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::contract(format!(
                "{} layers need {} activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.dims() != (1, l.out_dim()) {
                return Err(Error::Shape {
                    op: "mlp bias",
                    left: l.weight.shape().to_vec(),
                    right: l.bias.shape().to_vec(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.in_dim() != l.out_dim() {
                    return Err(Error::Shape {
                        op: "mlp layers",
                        left: l.weight.shape().to_vec(),
                        right: next.weight.shape().to_vec(),
                    });
                }
            }
        }
        Ok(MlpParams {
            layers,
            activations,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for layer sizes `sizes`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        Self::build(sizes, activation, |fan_in| {
            let bound = 1.0 / math::sqrt(fan_in as f64);
            (rng.random::<f64>() * 2.0 - 1.0) * bound
        })
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Self {
        Self::build(sizes, activation, |_| 0.0)
    }

    fn build(sizes: &[usize], activation: Activation, mut draw: impl FnMut(usize) -> f64) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (i, o) = (w[0], w[1]);
                let weight = (0..i * o).map(|_| draw(i)).collect();
                let bias = (0..o).map(|_| draw(i)).collect();
                Layer {
                    weight: Tensor::matrix(i, o, weight).expect("dims"),
                    bias: Tensor::row(bias),
                }
            })
            .collect::<Vec<_>>();
        let activations = alloc::vec![activation; layers.len() - 1];
        MlpParams {
            layers,
            activations,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.cols() != self.in_dim() {
            return Err(Error::Shape {
                op: "mlp_apply",
                left: input.shape().to_vec(),
                right: self.layers[0].weight.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Tape-free forward pass over a `(batch, in)` input.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = kernels::add(&kernels::matmul(&h, &layer.weight)?, &layer.bias)?;
            if let Some(act) = self.activations.get(i) {
                h = act.forward(&h);
            }
        }
        Ok(h)
    }

    /// Registers every tensor as a named parameter on `tape`.
    pub fn register(&self, tape: &mut Tape, prefix: &str) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let w = tape.param(param_name(prefix, i, WEIGHT), l.weight.clone());
                let b = tape.param(param_name(prefix, i, BIAS), l.bias.clone());
                (w, b)
            })
            .collect();
        MlpVars {
            layers,
            activations: self.activations.clone(),
        }
    }

    /// Forward pass recorded on `tape`; parameters are registered under `prefix`.
    pub fn apply_on_tape(&self, tape: &mut Tape, prefix: &str, input: Var) -> Result<Var> {
        self.check_input(tape.value(input))?;
        let vars = self.register(tape, prefix);
        vars.apply(tape, input)
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((param_name(prefix, i, WEIGHT), &l.weight));
            out.push((param_name(prefix, i, BIAS), &l.bias));
        }
        out
    }

    pub fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((param_name(prefix, i, WEIGHT), &mut l.weight));
            out.push((param_name(prefix, i, BIAS), &mut l.bias));
        }
        out
    }
}

fn param_name(prefix: &str, layer: usize, kind: &str) -> String {
    format!("{prefix}.{layer}.{kind}")
}

/// Parameter handles of an MLP registered on a tape; reusable for several
/// forward passes within one step.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
    activations: Vec<Activation>,
}

impl MlpVars {
    pub fn apply(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let mut h = input;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add(z, b)?;
            if let Some(act) = self.activations.get(i) {
                h = act.on_tape(tape, h)?;
            }
        }
        Ok(h)
    }

    pub fn layer_vars(&self) -> &[(Var, Var)] {
        &self.layers
    }
}
