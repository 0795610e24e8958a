//! Feed-forward scoring network `g: R^d -> (0,1)`.
//!
//! Hidden layers use tanh with optional inverted dropout; the output is a
//! single sigmoid unit. Gradients are hand-derived reverse mode for this
//! fixed architecture family, both with respect to the input vector (used
//! by the recourse LP and gradient-descent recourse) and with respect to
//! all weights and biases (used by training).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Scores are kept inside `[SCORE_FLOOR, 1 - SCORE_FLOOR]`.
pub const SCORE_FLOOR: f64 = 1e-12;

pub const DEFAULT_HIDDEN: [usize; 3] = [100, 100, 100];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: &[usize]) -> Self {
        Architecture {
            input_dim,
            hidden: hidden.to_vec(),
            activation: Activation::Tanh,
        }
    }

    pub fn standard(input_dim: usize) -> Self {
        Self::new(input_dim, &DEFAULT_HIDDEN)
    }

    /// `(fan_in, fan_out)` of every dense layer, output layer last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &width in &self.hidden {
            shapes.push((fan_in, width));
            fan_in = width;
        }
        shapes.push((fan_in, 1));
        shapes
    }
}

/// Dense layer; `weights` is `outputs × inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn affine(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.bias[o];
            for (w, a) in row.iter().zip(input) {
                acc += w * a;
            }
            out.push(acc);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub architecture: Architecture,
    pub layers: Vec<Dense>,
    /// Decision threshold: `f(x) = 1` iff `g(x) >= threshold`.
    pub threshold: f64,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_score(s: f64) -> f64 {
    s.clamp(SCORE_FLOOR, 1.0 - SCORE_FLOOR)
}

/// Binary cross-entropy with the score clamped away from 0 and 1.
pub fn bce_loss(score: f64, label: u8) -> f64 {
    let s = clamp_score(score);
    if label == 1 {
        -s.ln()
    } else {
        -(1.0 - s).ln()
    }
}

/// Per-hidden-unit multipliers: 0 for dropped units, `1/(1-rate)` for kept.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub layers: Vec<Vec<f64>>,
}

impl DropoutMask {
    pub fn sample<R: Rng + ?Sized>(arch: &Architecture, rate: f64, rng: &mut R) -> Self {
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        DropoutMask {
            layers: arch
                .hidden
                .iter()
                .map(|&w| {
                    (0..w)
                        .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                        .collect()
                })
                .collect(),
        }
    }
}

/// Activations recorded on the forward pass for reverse mode.
struct Trace {
    /// Input followed by each masked hidden activation.
    inputs: Vec<Vec<f64>>,
    /// Unmasked tanh outputs per hidden layer.
    tanh: Vec<Vec<f64>>,
    raw_score: f64,
}

/// Same shape as the layer list of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Dense>,
}

impl Gradient {
    pub fn zeros_like(params: &Mlp) -> Self {
        Gradient {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= factor);
        }
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

/// One term of a weighted loss sum.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub label: u8,
    pub weight: f64,
    pub mask: Option<&'a DropoutMask>,
}

impl<'a> Example<'a> {
    pub fn new(x: &'a [f64], label: u8) -> Self {
        Example {
            x,
            label,
            weight: 1.0,
            mask: None,
        }
    }
}

impl Mlp {
    pub fn zeros(architecture: Architecture) -> Self {
        let layers = architecture
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| Dense::zeros(i, o))
            .collect();
        Mlp {
            architecture,
            layers,
            threshold: 0.5,
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and biases.
    pub fn init<R: Rng + ?Sized>(architecture: Architecture, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(architecture);
        for layer in &mut mlp.layers {
            let bound = 1.0 / (layer.inputs.max(1) as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = rng.gen_range(-bound..=bound);
            }
        }
        mlp
    }

    pub fn input_dim(&self) -> usize {
        self.architecture.input_dim
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("flat parameter vector", self.num_params(), flat.len())?;
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_dim("network input", self.input_dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    fn check_mask(&self, mask: &DropoutMask) -> Result<()> {
        check_dim("dropout mask layers", self.architecture.hidden.len(), mask.layers.len())?;
        for (m, &w) in mask.layers.iter().zip(&self.architecture.hidden) {
            check_dim("dropout mask width", w, m.len())?;
        }
        Ok(())
    }

    fn trace(&self, x: &[f64], mask: Option<&DropoutMask>) -> Trace {
        let hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(hidden + 1);
        let mut tanh = Vec::with_capacity(hidden);
        inputs.push(x.to_vec());
        let mut z = Vec::new();
        for (l, layer) in self.layers[..hidden].iter().enumerate() {
            layer.affine(&inputs[l], &mut z);
            let h: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
            let a = match mask {
                Some(m) => h.iter().zip(&m.layers[l]).map(|(h, m)| h * m).collect(),
                None => h.clone(),
            };
            tanh.push(h);
            inputs.push(a);
        }
        self.layers[hidden].affine(&inputs[hidden], &mut z);
        Trace {
            inputs,
            tanh,
            raw_score: sigmoid(z[0]),
        }
    }

    /// `g(x)`; no mask means inference mode.
    pub fn forward(&self, x: &[f64], mask: Option<&DropoutMask>) -> Result<f64> {
        self.check_input(x)?;
        if let Some(m) = mask {
            self.check_mask(m)?;
        }
        Ok(clamp_score(self.trace(x, mask).raw_score))
    }

    /// Inference-mode score without shape checks; callers guarantee `x.len()`.
    pub fn score(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.input_dim());
        clamp_score(self.trace(x, None).raw_score)
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.score(x) >= self.threshold
    }

    /// Reverse pass from `d loss / d logit`. Accumulates parameter gradients
    /// into `grad` when given and returns the input gradient.
    fn backward(
        &self,
        trace: &Trace,
        mask: Option<&DropoutMask>,
        dlogit: f64,
        mut grad: Option<&mut Gradient>,
    ) -> Vec<f64> {
        let hidden = self.layers.len() - 1;
        let mut delta = vec![dlogit];
        for l in (0..=hidden).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            if let Some(g) = grad.as_deref_mut() {
                let gl = &mut g.layers[l];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gl.bias[o] += d;
                    let row = &mut gl.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, a) in row.iter_mut().zip(input) {
                        *w += d * a;
                    }
                }
            }
            let mut upstream = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                for (u, w) in upstream.iter_mut().zip(row) {
                    *u += d * w;
                }
            }
            if l == 0 {
                return upstream;
            }
            let h = &trace.tanh[l - 1];
            delta = match mask {
                Some(m) => upstream
                    .iter()
                    .zip(h)
                    .zip(&m.layers[l - 1])
                    .map(|((u, h), m)| u * m * (1.0 - h * h))
                    .collect(),
                None => upstream.iter().zip(h).map(|(u, h)| u * (1.0 - h * h)).collect(),
            };
        }
        unreachable!("layer list always contains the output layer")
    }

    /// `∇_x bce(g(x), label)` with dropout disabled.
    pub fn grad_input(&self, x: &[f64], label: u8) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x, None);
        let dlogit = trace.raw_score - f64::from(label);
        Ok(self.backward(&trace, None, dlogit, None))
    }

    /// `∇_x g(x)` with dropout disabled.
    pub fn grad_score_input(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let trace = self.trace(x, None);
        let s = trace.raw_score;
        Ok(self.backward(&trace, None, s * (1.0 - s), None))
    }

    /// Gradient of `Σ weight · bce(g(x), label)` over the batch, accumulated
    /// in batch order.
    pub fn grad_params(&self, batch: &[Example<'_>]) -> Result<Gradient> {
        if batch.is_empty() {
            return Err(Error::Domain("grad_params needs a non-empty batch".into()));
        }
        let mut grad = Gradient::zeros_like(self);
        for ex in batch {
            self.accumulate(ex, &mut grad)?;
        }
        Ok(grad)
    }

    /// Adds one example's weighted loss gradient into `grad`; returns the
    /// example's unweighted loss.
    pub fn accumulate(&self, ex: &Example<'_>, grad: &mut Gradient) -> Result<f64> {
        self.check_input(ex.x)?;
        if let Some(m) = ex.mask {
            self.check_mask(m)?;
        }
        let trace = self.trace(ex.x, ex.mask);
        let dlogit = ex.weight * (trace.raw_score - f64::from(ex.label));
        self.backward(&trace, ex.mask, dlogit, Some(grad));
        Ok(bce_loss(trace.raw_score, ex.label))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Mlp) -> Self {
        let n = params.num_params();
        Adam {
            config,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// One descent step. A non-finite gradient leaves both the parameters
    /// and the optimizer state untouched.
    pub fn step(&mut self, params: &mut Mlp, grad: &Gradient) -> Result<()> {
        check_dim("Adam state", self.m.len(), params.num_params())?;
        check_dim(
            "gradient",
            params.num_params(),
            grad.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum(),
        )?;
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient; Adam step refused".into()));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut k = 0;
        for (pl, gl) in params.layers.iter_mut().zip(&grad.layers) {
            let p_iter = pl.weights.iter_mut().chain(pl.bias.iter_mut());
            let g_iter = gl.weights.iter().chain(&gl.bias);
            for (p, &g) in p_iter.zip(g_iter) {
                let m = &mut self.m[k];
                let v = &mut self.v[k];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                k += 1;
            }
        }
        Ok(())
    }
}
