//! Dense layers, batch normalization and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::LearnError;
use crate::calibrate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in × out`.
    pub weight: Tensor,
    /// `1 × out`.
    pub bias: Tensor,
}

impl Linear {
    /// Uniform init with bound `1/√in` for weights and biases.
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.gen_range(-bound..bound)).collect::<Vec<_>>();
        let weight = Tensor::new(input, output, draw(input * output));
        let bias = Tensor::new(1, output, draw(output));
        Self { weight, bias }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(input, output), bias: Tensor::zeros(1, output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols
    }
}

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// An [`Mlp`] whose parameters live in a graph.
#[derive(Debug, Clone)]
pub struct BoundMlp {
    vars: Vec<(Var, Var)>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. The output layer starts scaled by
    /// `out_scale` with zero bias, so a fresh residual head is near zero.
    pub fn new(dims: &[usize], out_scale: f64, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2);
        let mut layers: Vec<Linear> = dims.windows(2).map(|d| Linear::new(d[0], d[1], rng)).collect();
        let last = layers.last_mut().unwrap();
        last.weight.scale(out_scale);
        last.bias = Tensor::zeros(1, last.bias.cols);
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self { layers: dims.windows(2).map(|d| Linear::zeros(d[0], d[1])).collect() }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|t| t.is_finite())
    }

    /// Adds the parameters to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let vars = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.param(l.weight.clone()), g.param(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        BoundMlp { vars }
    }

    /// Forward pass on plain values.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor, LearnError> {
        if x.cols != self.input_dim() {
            return Err(LearnError::ShapeMismatch { what: "mlp input", expected: self.input_dim(), got: x.cols });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = b.forward(&mut g, xv);
        Ok(g.value(y).clone())
    }
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (k, &(w, b)) in self.vars.iter().enumerate() {
            let z = g.matmul(h, w);
            h = g.add(z, b);
            if k + 1 < self.vars.len() {
                h = g.relu(h);
            }
        }
        h
    }

    /// Parameter nodes in the order of [`Mlp::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Per-column batch normalization with running statistics for inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(cols: usize) -> Self {
        Self {
            gamma: Tensor::filled(1, cols, 1.0),
            beta: Tensor::zeros(1, cols),
            running_mean: vec![0.0; cols],
            running_var: vec![1.0; cols],
        }
    }

    /// Training-mode normalization with batch statistics.
    pub fn forward_train(&self, g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
        let n = g.batch_std(x);
        let s = g.mul(n, gamma);
        g.add(s, beta)
    }

    /// Inference-mode normalization with the running statistics.
    pub fn forward_eval(&self, g: &mut Graph, x: Var, gamma: Var, beta: Var) -> Var {
        let cols = self.running_mean.len();
        let mean = g.constant(Tensor::row_vector(self.running_mean.clone()));
        let inv = g.constant(Tensor::new(1, cols, self.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect()));
        let c = g.sub(x, mean);
        let n = g.mul(c, inv);
        let s = g.mul(n, gamma);
        g.add(s, beta)
    }

    /// Folds one batch into the running statistics (unbiased variance).
    pub fn update_running(&mut self, x: &Tensor) {
        let n = x.rows as f64;
        for c in 0..x.cols {
            let mean = (0..x.rows).map(|r| x.get(r, c)).sum::<f64>() / n;
            let var = if x.rows > 1 {
                (0..x.rows).map(|r| (x.get(r, c) - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean;
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var;
        }
    }
}

/// Depth predictor: an MLP to one raw activation, optional batch norm,
/// then the bounded head `10 · sigmoid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FocalNet {
    pub mlp: Mlp,
    pub bn: Option<BatchNorm>,
}

impl FocalNet {
    pub fn new(input: usize, hidden: usize, batch_norm: bool, rng: &mut impl Rng) -> Self {
        Self { mlp: Mlp::new(&[input, hidden, hidden, 1], 0.01, rng), bn: batch_norm.then(|| BatchNorm::new(1)) }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.mlp.params();
        if let Some(bn) = &self.bn {
            p.push(&bn.gamma);
            p.push(&bn.beta);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.mlp.params_mut();
        if let Some(bn) = &mut self.bn {
            p.push(&mut bn.gamma);
            p.push(&mut bn.beta);
        }
        p
    }

    /// Builds the head on `x` (`B × input`). Returns the depth node, the
    /// pre-normalization activation, and the parameter nodes.
    pub fn forward(&self, g: &mut Graph, x: Var, trainable: bool, training: bool) -> (Var, Var, Vec<Var>) {
        let bound = self.mlp.bind(g, trainable);
        let raw = bound.forward(g, x);
        let mut vars = bound.vars();
        let mut h = raw;
        if let Some(bn) = &self.bn {
            let (gamma, beta) = if trainable {
                (g.param(bn.gamma.clone()), g.param(bn.beta.clone()))
            } else {
                (g.constant(bn.gamma.clone()), g.constant(bn.beta.clone()))
            };
            vars.extend([gamma, beta]);
            h = if training { bn.forward_train(g, raw, gamma, beta) } else { bn.forward_eval(g, raw, gamma, beta) };
        }
        let s = g.sigmoid(h);
        (g.scale(s, calibrate::TZ_MAX), raw, vars)
    }

    /// Depth for one input vector, inference mode.
    pub fn predict(&self, input: &[f64]) -> Result<f64, LearnError> {
        Ok(self.predict_batch(&Tensor::row_vector(input.to_vec()))?[0])
    }

    pub fn predict_batch(&self, x: &Tensor) -> Result<Vec<f64>, LearnError> {
        if x.cols != self.input_dim() {
            return Err(LearnError::ShapeMismatch { what: "focal input", expected: self.input_dim(), got: x.cols });
        }
        if !x.is_finite() {
            return Err(LearnError::Invalid("non-finite focal input".into()));
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (tz, _, _) = self.forward(&mut g, xv, false, false);
        Ok(g.value(tz).data.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam state for one ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.rows, p.cols);
        Self { config, step: 0, m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect() }
    }

    /// One update. `grads[k]` pairs with `params[k]`; `None` means no gradient reached it.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "adam parameter count changed");
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let zero;
            let g = match &grads[k] {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.rows, p.cols);
                    &zero
                }
            };
            for i in 0..p.data.len() {
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Rescales all gradients together so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(Tensor::norm_squared).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.scale(k);
        }
    }
    norm
}
