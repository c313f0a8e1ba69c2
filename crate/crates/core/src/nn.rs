//! Small tanh feed-forward networks and the Adam optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Gradients, Mat, Tape, TapeError, Var};

/// Width of each hidden layer.
pub const HIDDEN_WIDTH: usize = 11;
/// Number of hidden layers.
pub const HIDDEN_LAYERS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },
    #[error("non-finite gradient in layer {layer} ({tensor})")]
    NonFiniteGradient { layer: usize, tensor: &'static str },
    #[error("non-finite parameter in layer {layer} ({tensor}) after update")]
    NonFiniteParameter { layer: usize, tensor: &'static str },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Affine layer `y = W x + b` with `W` stored row-major as `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }
}

/// Parameters of a network with tanh hidden layers and a linear output.
/// Input is `(t, x₁, …, xₙ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<DenseLayer>,
}

/// Layer sizes `[n+1, 11, 11, out]`.
pub fn standard_sizes(dim: usize, out: usize) -> Vec<usize> {
    let mut sizes = vec![dim + 1];
    sizes.extend(std::iter::repeat(HIDDEN_WIDTH).take(HIDDEN_LAYERS));
    sizes.push(out);
    sizes
}

impl MlpParams {
    pub fn zeros(sizes: &[usize]) -> Self {
        MlpParams {
            layers: sizes.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect(),
        }
    }

    /// Glorot-uniform weights with bound `√(6/(fan_in+fan_out))`, zero biases.
    pub fn glorot<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let mut p = MlpParams::zeros(sizes);
        for layer in &mut p.layers {
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.layers.iter().map(|l| l.inputs).collect();
        if let Some(last) = self.layers.last() {
            s.push(last.outputs);
        }
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.inputs).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks buffer lengths, chaining of layer sizes, and finiteness.
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Shape {
                layer: 0,
                detail: "network has no layers".into(),
            });
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs {
                return Err(NnError::Shape {
                    layer: i,
                    detail: format!(
                        "{} weights for a {}x{} matrix",
                        l.weights.len(),
                        l.outputs,
                        l.inputs
                    ),
                });
            }
            if l.bias.len() != l.outputs {
                return Err(NnError::Shape {
                    layer: i,
                    detail: format!("{} biases for {} outputs", l.bias.len(), l.outputs),
                });
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(NnError::Shape {
                    layer: i,
                    detail: format!(
                        "expects {} inputs but previous layer has {} outputs",
                        l.inputs,
                        self.layers[i - 1].outputs
                    ),
                });
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(NnError::Shape {
                    layer: i,
                    detail: "non-finite parameter".into(),
                });
            }
        }
        Ok(())
    }

    /// Plain forward pass for a single input, writing into `out`.
    /// `scratch` is resized as needed and may be reused across calls.
    pub fn forward_into(&self, t: f64, x: &[f64], out: &mut [f64], scratch: &mut ForwardScratch) {
        let a = &mut scratch.a;
        let b = &mut scratch.b;
        a.clear();
        a.push(t);
        a.extend_from_slice(x);
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            b.clear();
            for o in 0..layer.outputs {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let mut acc = layer.bias[o];
                for (w, v) in row.iter().zip(a.iter()) {
                    acc += w * v;
                }
                b.push(if li < last { acc.tanh() } else { acc });
            }
            std::mem::swap(a, b);
        }
        out.copy_from_slice(a);
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_dim()];
        self.forward_into(t, x, &mut out, &mut ForwardScratch::default());
        out
    }

    /// Registers every weight and bias as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let w = tape.leaf(Mat::from_vec(l.outputs, l.inputs, l.weights.clone()));
                    let b = tape.leaf(Mat::from_vec(1, l.outputs, l.bias.clone()));
                    (w, b)
                })
                .collect(),
        }
    }

    fn zip_tensors<'a>(&'a mut self, other: &'a MlpParams) -> impl Iterator<Item = (usize, &'static str, &'a mut Vec<f64>, &'a Vec<f64>)> {
        self.layers
            .iter_mut()
            .zip(&other.layers)
            .enumerate()
            .flat_map(|(i, (a, b))| {
                [(i, "weights", &mut a.weights, &b.weights), (i, "bias", &mut a.bias, &b.bias)]
            })
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &MlpParams) {
        for (_, _, a, b) in self.zip_tensors(other) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.iter().any(|v| !v.is_finite()) {
                return Some((i, "weights"));
            }
            if l.bias.iter().any(|v| !v.is_finite()) {
                return Some((i, "bias"));
            }
        }
        None
    }
}

#[derive(Debug, Default, Clone)]
pub struct ForwardScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Tape handles for a registered network.
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    /// Batched forward pass on `x` (`rows × n`) with the raw time prepended.
    pub fn forward(&self, tape: &mut Tape, t: f64, x: Var) -> Result<Var, TapeError> {
        let mut h = tape.prepend_column(x, t);
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.linear(h, w, b)?;
            if i < last {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }

    /// Collects the parameter gradients into the network's shape.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> MlpParams {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| {
                    let gw = grads.get_or_zeros(tape, w);
                    let gb = grads.get_or_zeros(tape, b);
                    DenseLayer {
                        inputs: gw.cols,
                        outputs: gw.rows,
                        weights: gw.data,
                        bias: gb.data,
                    }
                })
                .collect(),
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: MlpParams,
    second: MlpParams,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        let zeros = MlpParams::zeros(&params.sizes());
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies one update. A non-finite gradient leaves both the parameters
    /// and the optimizer state untouched.
    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams) -> Result<(), NnError> {
        if params.sizes() != grads.sizes() || grads.sizes() != self.first.sizes() {
            return Err(NnError::Shape {
                layer: 0,
                detail: format!("gradient sizes {:?} vs parameter sizes {:?}", grads.sizes(), params.sizes()),
            });
        }
        if let Some((layer, tensor)) = grads.first_non_finite() {
            return Err(NnError::NonFiniteGradient { layer, tensor });
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (lr, eps) = (self.lr, self.eps);
        let moments = self.first.zip_tensors(grads).zip(self.second.zip_tensors(grads));
        let updates = params.layers.iter_mut().flat_map(|l| [&mut l.weights, &mut l.bias]);
        for (((_, _, m, g), (_, _, v, _)), p) in moments.zip(updates) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        if let Some((layer, tensor)) = params.first_non_finite() {
            return Err(NnError::NonFiniteParameter { layer, tensor });
        }
        Ok(())
    }
}
