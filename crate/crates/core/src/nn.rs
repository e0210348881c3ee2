//! Minimal dense-network engine.
//!
//! Networks are stacks of affine layers with a fixed activation each. The
//! forward pass records a [`Tape`] of layer inputs and pre-activations so that
//! [`DenseNet::backward`] can produce exact reverse-mode gradients. Everything
//! runs in `f64`; the networks in this crate are small enough that exact
//! finite-difference checks matter more than throughput.

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;

/// Floor applied to the denominator of the relative error in gradient checks.
///
/// Central differences with `h = 1e-5` carry roughly `1e-11` of absolute
/// round-off, so gradients smaller than this are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
    /// Only valid as the last layer of a classifier head.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `outputs x inputs`.
    pub weight: Matrix,
    pub bias: Vector,
    pub activation: Activation,
}

impl Layer {
    /// Kaiming-uniform for relu layers, Xavier-uniform otherwise; zero biases.
    pub fn init<R: Rng + ?Sized>(
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = match activation {
            Activation::Relu => (6.0 / inputs as f64).sqrt(),
            Activation::Linear | Activation::Softmax => (6.0 / (inputs + outputs) as f64).sqrt(),
        };
        let weight = Matrix::from_shape_simple_fn((outputs, inputs), || rng.random_range(-bound..bound));
        Layer {
            weight,
            bias: Vector::zeros(outputs),
            activation,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer {
            weight: Matrix::zeros((outputs, inputs)),
            bias: Vector::zeros(outputs),
            activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }
}

pub fn relu(v: &Vector) -> Vector {
    v.mapv(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn softmax(logits: &Vector) -> Vector {
    let max = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let exp = logits.mapv(|x| (x - max).exp());
    let total = exp.sum();
    exp / total
}

fn activate(activation: Activation, pre: &Vector) -> Vector {
    match activation {
        Activation::Linear => pre.clone(),
        Activation::Relu => relu(pre),
        Activation::Softmax => softmax(pre),
    }
}

/// Cached activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    inputs: Vec<Vector>,
    pre: Vec<Vector>,
    output: Vector,
}

impl Tape {
    pub fn output(&self) -> &Vector {
        &self.output
    }

    pub fn pre_activations(&self) -> &[Vector] {
        &self.pre
    }
}

/// Per-layer `(dW, db)`, shape-congruent with the network that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub layers: Vec<(Matrix, Vector)>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        GradientSet {
            layers: net
                .layers
                .iter()
                .map(|l| (Matrix::zeros(l.weight.raw_dim()), Vector::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn is_congruent(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|((dw, db), l)| dw.dim() == l.weight.dim() && db.len() == l.bias.len())
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for ((dw, db), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *dw += ow;
            *db += ob;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (dw, db) in &mut self.layers {
            dw.mapv_inplace(|g| g * factor);
            db.mapv_inplace(|g| g * factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.layers
            .iter()
            .all(|(dw, db)| dw.iter().chain(db.iter()).all(|&g| g == 0.0))
    }
}

/// Flat, ordered access to every trainable scalar of a model.
///
/// The order is fixed per type, so a parameter vector and a gradient vector
/// collected from congruent values line up index by index.
pub trait Parameters {
    fn collect_params(&self, out: &mut Vec<f64>);
    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>);

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter();
        self.assign_params(&mut it);
        debug_assert!(it.next().is_none(), "parameter vector too long");
    }
}

impl Parameters for DenseNet {
    fn collect_params(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = *src.next().expect("parameter vector too short");
            }
        }
    }
}

impl Parameters for GradientSet {
    fn collect_params(&self, out: &mut Vec<f64>) {
        for (dw, db) in &self.layers {
            out.extend(dw.iter());
            out.extend(db.iter());
        }
    }

    fn assign_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        for (dw, db) in &mut self.layers {
            for w in dw.iter_mut().chain(db.iter_mut()) {
                *w = *src.next().expect("gradient vector too short");
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

impl DenseNet {
    /// Builds a network from `(width, activation)` pairs, one per layer.
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        shape: &[(usize, Activation)],
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(shape.len());
        let mut width = input_dim;
        for &(out, act) in shape {
            layers.push(Layer::init(width, out, act, rng));
            width = out;
        }
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            ensure_dim("layer composition", pair[0].outputs(), pair[1].inputs())?;
        }
        for (i, l) in layers.iter().enumerate() {
            ensure_dim("layer bias", l.outputs(), l.bias.len())?;
            if l.activation == Activation::Softmax && i + 1 != layers.len() {
                return Err(Error::InvalidArgument(
                    "softmax is only allowed as the terminal activation".into(),
                ));
            }
        }
        Ok(DenseNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Vector) -> Result<(Vector, Tape)> {
        ensure_dim("network input", self.input_dim(), x.len())?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let z = l.weight.dot(&h) + &l.bias;
            let out = activate(l.activation, &z);
            inputs.push(h);
            pre.push(z);
            h = out;
        }
        let tape = Tape {
            inputs,
            pre,
            output: h.clone(),
        };
        Ok((h, tape))
    }

    /// Forward pass without recording a tape.
    pub fn infer(&self, x: &Vector) -> Result<Vector> {
        ensure_dim("network input", self.input_dim(), x.len())?;
        let mut h = x.clone();
        for l in &self.layers {
            let z = l.weight.dot(&h) + &l.bias;
            h = activate(l.activation, &z);
        }
        Ok(h)
    }

    pub fn backward(&self, tape: &Tape, d_output: &Vector) -> Result<(GradientSet, Vector)> {
        ensure_dim("tape depth", self.layers.len(), tape.pre.len())?;
        ensure_dim("upstream gradient", self.output_dim(), d_output.len())?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = d_output.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let z = &tape.pre[i];
            ensure_dim("tape activation", l.outputs(), z.len())?;
            let dz = match l.activation {
                Activation::Linear => g,
                Activation::Relu => {
                    let mut dz = g;
                    Zip::from(&mut dz).and(z).for_each(|d, &zi| {
                        if zi <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    dz
                }
                Activation::Softmax => {
                    let y = softmax(z);
                    let dot = y.dot(&g);
                    &y * &(&g - dot)
                }
            };
            let input = &tape.inputs[i];
            let dw = outer(&dz, input);
            let dx = l.weight.t().dot(&dz);
            grads.push((dw, dz));
            g = dx;
        }
        grads.reverse();
        Ok((GradientSet { layers: grads }, g))
    }
}

pub fn outer(a: &Vector, b: &Vector) -> Matrix {
    let mut m = Matrix::zeros((a.len(), b.len()));
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        m.row_mut(i).zip_mut_with(b, |w, &bj| *w = ai * bj);
    }
    m
}

/// Gradient reversal: identity forward, `-lambda * upstream` backward.
pub fn grl(upstream: &Vector, lambda: f64) -> Vector {
    upstream.mapv(|g| -(lambda * g))
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient with
/// respect to the logits.
pub fn softmax_xent(logits: &Vector, label: usize) -> Result<(f64, Vector)> {
    if label >= logits.len() {
        return Err(Error::OutOfRange {
            what: "class label",
            value: label as i64,
            lo: 0,
            hi: logits.len() as i64 - 1,
        });
    }
    let (argmax, max) = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
    // log-sum-exp written as max + ln(1 + sum over the rest) to keep tiny losses exact
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    let loss = (max - logits[label]) + rest.ln_1p();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet) -> Self {
        AdamState {
            m: GradientSet::zeros_like(net),
            v: GradientSet::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(net: &mut DenseNet, grads: &GradientSet, state: &mut AdamState, lr: f64) -> Result<()> {
    if !grads.is_congruent(net) || !state.m.is_congruent(net) || !state.v.is_congruent(net) {
        return Err(Error::InvalidArgument(
            "gradient or optimizer state not shape-congruent with network".into(),
        ));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (i, layer) in net.layers.iter_mut().enumerate() {
        let (gw, gb) = &grads.layers[i];
        let (mw, mb) = &mut state.m.layers[i];
        let (vw, vb) = &mut state.v.layers[i];
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        Zip::from(&mut layer.weight)
            .and(gw)
            .and(mw)
            .and(vw)
            .for_each(|p, &g, m, v| update(p, g, m, v));
        Zip::from(&mut layer.bias)
            .and(gb)
            .and(mb)
            .and(vb)
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

/// Adam over every parameter of a composite model, addressed through
/// [`Parameters`]. Same update rule and defaults as [`adam_step`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(param_count: usize) -> Self {
        Adam {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step<P: Parameters>(&mut self, model: &mut P, grads: &[f64], lr: f64) -> Result<()> {
        let mut params = model.to_flat();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim("optimizer parameters", self.m.len(), params.len().max(grads.len())));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        model.set_flat(&params);
        Ok(())
    }
}

/// Relative error `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`, maximised over entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Central-difference gradient of `loss` at `params`.
pub fn numeric_gradient<F>(params: &[f64], h: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = params.to_vec();
    (0..params.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = loss(&work);
            work[i] = orig - h;
            let down = loss(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares analytic parameter gradients of `loss_fn(net(x))` against central
/// differences and returns the worst relative error.
///
/// `loss_fn` maps the network output to `(loss, dloss/doutput)`.
pub fn grad_check<F>(net: &DenseNet, loss_fn: F, x: &Vector, h: f64) -> Result<f64>
where
    F: Fn(&Vector) -> (f64, Vector),
{
    let (out, tape) = net.forward(x)?;
    let (_, d_out) = loss_fn(&out);
    let (grads, _) = net.backward(&tape, &d_out)?;
    let analytic = grads.to_flat();

    let mut probe = net.clone();
    let params = net.to_flat();
    let numeric = numeric_gradient(&params, h, |p| {
        probe.set_flat(p);
        let out = probe.infer(x).expect("dimension checked above");
        loss_fn(&out).0
    });
    Ok(max_relative_error(&analytic, &numeric))
}
