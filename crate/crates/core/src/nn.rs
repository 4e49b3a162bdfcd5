//! Small dense feedforward networks with hand-written reverse mode and an
//! Adam trainer.
//!
//! Hidden layers use `tanh`, the output layer is affine. Inputs can carry an
//! affine scaling to `[-1, 1]` computed from training ranges; it is applied
//! inside [`Mlp::forward`] and persisted with the weights.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::linalg::{dot, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputScaling {
    /// Per-coordinate ranges of `rows`.
    pub fn from_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut it = rows.into_iter();
        let first = it.next().ok_or_else(|| Error::Data("cannot scale an empty input set".into()))?;
        let mut lo = first.to_vec();
        let mut hi = first.to_vec();
        for r in it {
            if r.len() != lo.len() {
                return Err(Error::Argument("input rows have different lengths".into()));
            }
            for (i, v) in r.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (lo, hi))| {
                let w = hi - lo;
                if w > 0.0 { 2.0 * (v - lo) / w - 1.0 } else { 0.0 }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    /// Layer `l` maps `sizes[l] -> sizes[l + 1]`; stored `out x in`.
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    scaling: Option<InputScaling>,
}

/// Gradient with the same layout as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradient {
    fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    fn scale(&mut self, s: f64) {
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let rows = w.rows();
            for i in 0..rows {
                for v in w.row_mut(i) {
                    *v *= s;
                }
            }
            for v in b {
                *v *= s;
            }
        }
    }

    fn add(&mut self, other: &Gradient) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            for i in 0..w.rows() {
                for (a, b) in w.row_mut(i).iter_mut().zip(o.row(i)) {
                    *a += b;
                }
            }
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            for (a, v) in b.iter_mut().zip(o) {
                *a += v;
            }
        }
    }

    fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Argument(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound))
            })
            .collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self { sizes: sizes.to_vec(), weights, biases, scaling: None })
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Argument("need one bias vector per weight matrix".into()));
        }
        let mut sizes = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *sizes.last().unwrap() || w.rows() != b.len() {
                return Err(Error::Argument("layer shapes are not compatible".into()));
            }
            sizes.push(w.rows());
        }
        Ok(Self { sizes, weights, biases, scaling: None })
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Result<Self> {
        if scaling.lo.len() != self.sizes[0] || scaling.hi.len() != self.sizes[0] {
            return Err(Error::Argument("input scaling width does not match the input layer".into()));
        }
        self.scaling = Some(scaling);
        Ok(self)
    }

    /// Zeroes the output layer so the network starts as the zero map.
    pub fn zero_output_layer(mut self) -> Self {
        let last = self.weights.len() - 1;
        let (r, c) = self.weights[last].shape();
        self.weights[last] = Matrix::zeros(r, c);
        self.biases[last].iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn scaling(&self) -> Option<&InputScaling> {
        self.scaling.as_ref()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn n_parameters(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.data().len() + b.len()).sum()
    }

    pub fn parameters(&self) -> Vec<f64> {
        Gradient { weights: self.weights.clone(), biases: self.biases.clone() }.flat()
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_parameters() {
            return Err(Error::Argument(format!(
                "expected {} parameters, got {}",
                self.n_parameters(),
                flat.len()
            )));
        }
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let (r, c) = w.shape();
            *w = Matrix::new(r, c, flat[pos..pos + r * c].to_vec())?;
            pos += r * c;
            let nb = b.len();
            b.copy_from_slice(&flat[pos..pos + nb]);
            pos += nb;
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.sizes[0] {
            return Err(Error::Argument(format!(
                "input of length {} does not match input layer width {}",
                x.len(),
                self.sizes[0]
            )));
        }
        Ok(())
    }

    fn scaled(&self, x: &[f64]) -> Vec<f64> {
        match &self.scaling {
            Some(s) => s.apply(x),
            None => x.to_vec(),
        }
    }

    /// Activations of every layer, input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.weights.len() + 1);
        acts.push(self.scaled(x));
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let prev = acts.last().unwrap();
            let z: Vec<f64> = (0..w.rows()).map(|i| dot(w.row(i), prev) + b[i]).collect();
            acts.push(if l == last { z } else { z.into_iter().map(f64::tanh).collect() });
        }
        acts
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.activations(x).pop().unwrap())
    }

    /// Accumulates `dL/dtheta` for one sample into `grad`, given `dL/dy`.
    fn backward_into(&self, acts: &[Vec<f64>], dy: &[f64], grad: &mut Gradient) {
        let mut delta = dy.to_vec();
        for l in (0..self.weights.len()).rev() {
            let input = &acts[l];
            let gw = &mut grad.weights[l];
            for (i, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (g, a) in gw.row_mut(i).iter_mut().zip(input) {
                    *g += d * a;
                }
                grad.biases[l][i] += d;
            }
            if l > 0 {
                let w = &self.weights[l];
                let mut next = vec![0.0; input.len()];
                for (i, d) in delta.iter().enumerate() {
                    if *d == 0.0 {
                        continue;
                    }
                    for (n, wv) in next.iter_mut().zip(w.row(i)) {
                        *n += d * wv;
                    }
                }
                for (n, a) in next.iter_mut().zip(input) {
                    *n *= 1.0 - a * a;
                }
                delta = next;
            }
        }
    }

    /// Parameter gradient of an arbitrary per-sample loss given `dL/dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64]) -> Result<Gradient> {
        self.check_input(x)?;
        if dy.len() != self.output_dim() {
            return Err(Error::Argument("output gradient has the wrong length".into()));
        }
        let acts = self.activations(x);
        let mut g = Gradient::zeros_like(self);
        self.backward_into(&acts, dy, &mut g);
        Ok(g)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::ensure_dir(dir)?;
        let meta = MlpMeta {
            sizes: self.sizes.clone(),
            hidden_activation: "tanh".into(),
            scaling: self.scaling.clone(),
        };
        io::write_json(&dir.join("mlp.json"), &meta)?;
        io::write_f64s(&dir.join("params.f64"), &self.parameters())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("mlp.json");
        let meta: MlpMeta = io::read_json(&path)?;
        if meta.hidden_activation != "tanh" {
            return Err(Error::Format { path, msg: format!("unsupported activation {}", meta.hidden_activation) });
        }
        let mut net = Mlp::new(&meta.sizes, 0)?;
        let n = net.n_parameters();
        net.set_parameters(&io::read_f64s(&dir.join("params.f64"), n)?)?;
        match meta.scaling {
            Some(s) => net.with_scaling(s),
            None => Ok(net),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpMeta {
    sizes: Vec<usize>,
    hidden_activation: String,
    scaling: Option<InputScaling>,
}

/// A per-sample differentiable objective; the batch loss is the mean.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn input(&self, i: usize) -> &[f64];

    /// Loss of sample `i` at network output `y`, with `dL/dy`.
    fn loss_and_grad(&self, i: usize, y: &[f64]) -> (f64, Vec<f64>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `||y - t||^2 / m` per sample.
    MeanSquared,
    /// `||y - t||^2 / ||t||^2` per sample.
    MeanRelativeSquared,
}

/// Input/target pairs under a built-in loss.
#[derive(Debug, Clone)]
pub struct Supervised {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub loss: Loss,
    denom_floor: f64,
}

impl Supervised {
    pub fn new(inputs: Matrix, targets: Matrix, loss: Loss) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return Err(Error::Argument(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::Data("empty training set".into()));
        }
        let floor = 1e-12 * targets.frobenius_norm().powi(2) / targets.rows() as f64;
        Ok(Self { inputs, targets, loss, denom_floor: floor.max(f64::MIN_POSITIVE) })
    }
}

impl Objective for Supervised {
    fn len(&self) -> usize {
        self.inputs.rows()
    }

    fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    fn loss_and_grad(&self, i: usize, y: &[f64]) -> (f64, Vec<f64>) {
        let t = self.targets.row(i);
        let scale = match self.loss {
            Loss::MeanSquared => 1.0 / t.len() as f64,
            Loss::MeanRelativeSquared => 1.0 / dot(t, t).max(self.denom_floor),
        };
        let r: Vec<f64> = y.iter().zip(t).map(|(a, b)| a - b).collect();
        let loss = scale * dot(&r, &r);
        (loss, r.into_iter().map(|v| 2.0 * scale * v).collect())
    }
}

fn accumulate(net: &Mlp, obj: &dyn Objective, idx: &[usize]) -> (f64, Gradient) {
    let mut g = Gradient::zeros_like(net);
    let mut loss = 0.0;
    for &i in idx {
        let acts = net.activations(obj.input(i));
        let (l, dy) = obj.loss_and_grad(i, acts.last().unwrap());
        loss += l;
        net.backward_into(&acts, &dy, &mut g);
    }
    (loss, g)
}

/// Samples per work unit when a batch is split across threads. The partial
/// sums are combined in chunk order, so results do not depend on scheduling.
const GRAD_CHUNK: usize = 64;

/// Mean loss and parameter gradient over the samples `idx`.
pub fn batch_grad(net: &Mlp, obj: &dyn Objective, idx: &[usize]) -> (f64, Gradient) {
    let (loss, mut g) = if idx.len() <= GRAD_CHUNK {
        accumulate(net, obj, idx)
    } else {
        let parts: Vec<(f64, Gradient)> = idx.par_chunks(GRAD_CHUNK).map(|c| accumulate(net, obj, c)).collect();
        let mut it = parts.into_iter();
        let (mut loss, mut g) = it.next().expect("nonempty batch");
        for (l, part) in it {
            loss += l;
            g.add(&part);
        }
        (loss, g)
    };
    let inv = 1.0 / idx.len() as f64;
    g.scale(inv);
    (loss * inv, g)
}

/// Gradient of a built-in loss over a whole batch.
pub fn grad(net: &Mlp, batch: &Supervised) -> Result<(f64, Gradient)> {
    if batch.inputs.cols() != net.input_dim() || batch.targets.cols() != net.output_dim() {
        return Err(Error::Argument("batch shape does not match the network".into()));
    }
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(batch_grad(net, batch, &idx))
}

pub fn mean_loss(net: &Mlp, obj: &dyn Objective) -> f64 {
    let n = obj.len();
    let idx: Vec<usize> = (0..n).collect();
    let partial: Vec<f64> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|c| {
            c.iter()
                .map(|&i| {
                    let y = net.activations(obj.input(i)).pop().unwrap();
                    obj.loss_and_grad(i, &y).0
                })
                .sum::<f64>()
        })
        .collect();
    partial.iter().sum::<f64>() / n as f64
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` trains full-batch below 1024 samples and in batches of 256 above.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5000,
            batch_size: None,
            learning_rate: default_lr(),
            seed: 0,
            grad_clip: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    fn effective_batch(&self, n: usize) -> usize {
        self.batch_size.unwrap_or(if n < 1024 { n } else { 256 }).min(n)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Selected iterate: lowest full-data loss seen, start included, or the
    /// validation rule of [`train_with_validation`].
    pub net: Mlp,
    /// Mean batch loss per epoch.
    pub history: Vec<f64>,
    /// Best selection score so far, per epoch; nonincreasing. This is the
    /// full-data training loss, or the validation loss when one is supplied.
    pub best_so_far: Vec<f64>,
    pub initial_loss: f64,
    /// Training loss of the returned iterate.
    pub best_loss: f64,
    pub initial_validation: Option<f64>,
    pub best_validation: Option<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Adam on the mean per-sample loss with a seeded shuffle per epoch.
///
/// The returned network is the best iterate by full-data loss, so the final
/// loss never exceeds the initial one.
pub fn train(net: Mlp, obj: &dyn Objective, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_validation(net, obj, None, cfg)
}

/// Like [`train`], but when `validation` is given the returned iterate is the
/// one with the lowest validation loss among iterates whose training loss does
/// not exceed the initial training loss.
pub fn train_with_validation(
    net: Mlp,
    obj: &dyn Objective,
    validation: Option<&dyn Objective>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = obj.len();
    if n == 0 {
        return Err(Error::Data("empty training set".into()));
    }
    if validation.is_some_and(|v| v.is_empty()) {
        return Err(Error::Data("empty validation set".into()));
    }
    let batch = cfg.effective_batch(n);
    let full_batch = batch == n;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut params = net.parameters();
    let mut work = net;
    let mut adam = Adam { m: vec![0.0; params.len()], v: vec![0.0; params.len()], t: 0 };

    let initial_loss = mean_loss(&work, obj);
    if !initial_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0 });
    }
    let initial_validation = validation.map(|v| mean_loss(&work, v));
    let mut best = Best { score: initial_validation.unwrap_or(initial_loss), loss: initial_loss, params: params.clone() };
    // Offers the iterate held in `work`/`params` whose training loss is `loss`.
    let offer = |best: &mut Best, work: &Mlp, params: &[f64], loss: f64| {
        let score = match validation {
            Some(v) if loss <= initial_loss => mean_loss(work, v),
            Some(_) => return,
            None => loss,
        };
        if score < best.score {
            *best = Best { score, loss, params: params.to_vec() };
        }
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_so_far = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, mut g) = batch_grad(&work, obj, chunk);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * chunk.len() as f64;
            if full_batch {
                offer(&mut best, &work, &params, loss);
            }
            if let Some(clip) = cfg.grad_clip {
                let norm = g.norm();
                if norm > clip {
                    g.scale(clip / norm);
                }
            }
            adam.t += 1;
            let (b1, b2) = (cfg.beta1, cfg.beta2);
            let c1 = 1.0 - b1.powi(adam.t);
            let c2 = 1.0 - b2.powi(adam.t);
            for (k, gk) in g.flat().into_iter().enumerate() {
                adam.m[k] = b1 * adam.m[k] + (1.0 - b1) * gk;
                adam.v[k] = b2 * adam.v[k] + (1.0 - b2) * gk * gk;
                let mh = adam.m[k] / c1;
                let vh = adam.v[k] / c2;
                params[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
            }
            work.set_parameters(&params)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch });
            }
        }
        history.push(total / n as f64);
        if !full_batch || epoch + 1 == cfg.epochs {
            let loss = mean_loss(&work, obj);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            offer(&mut best, &work, &params, loss);
        }
        best_so_far.push(best.score);
    }
    work.set_parameters(&best.params)?;
    Ok(TrainOutcome {
        net: work,
        history,
        best_so_far,
        initial_loss,
        best_loss: best.loss,
        initial_validation,
        best_validation: validation.map(|_| best.score),
    })
}

struct Best {
    /// Selection criterion: validation loss if present, else training loss.
    score: f64,
    loss: f64,
    params: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, din: usize, dout: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(n, din, |_, _| rng.random_range(-1.0..1.0));
        let y = Matrix::from_fn(n, dout, |_, _| rng.random_range(-1.0..1.0));
        (x, y)
    }

    #[test]
    fn zero_weights_output_bias() {
        let w = vec![Matrix::zeros(4, 3), Matrix::zeros(2, 4)];
        let b = vec![vec![0.0; 4], vec![0.5, -1.5]];
        let net = Mlp::from_parts(w, b).unwrap();
        assert_eq!(net.forward(&[3.0, -7.0, 1.0]).unwrap(), vec![0.5, -1.5]);
    }

    #[test]
    fn single_affine_layer() {
        let w = Matrix::new(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let net = Mlp::from_parts(vec![w], vec![vec![0.1, 0.2]]).unwrap();
        let y = net.forward(&[2.0, 4.0]).unwrap();
        assert_eq!(y, vec![1.0 * 2.0 + 2.0 * 4.0 + 0.1, -2.0 + 2.0 + 0.2]);
        assert!(matches!(net.forward(&[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Mlp::new(&[3, 8, 8, 2], 42).unwrap();
        let a = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let b = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(a, b);
        assert_eq!(Mlp::new(&[3, 8, 8, 2], 42).unwrap(), net);
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let net = Mlp::new(&[2, 5, 3], 1).unwrap();
        let (x, _) = random_batch(6, 2, 3, 2);
        let y = Matrix::from_rows(&(0..6).map(|i| net.forward(x.row(i)).unwrap()).collect::<Vec<_>>()).unwrap();
        let (loss, g) = grad(&net, &Supervised::new(x, y, Loss::MeanSquared).unwrap()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.flat().iter().all(|v| *v == 0.0));
    }

    /// Central-difference oracle over every parameter.
    pub(crate) fn fd_check(net: &Mlp, obj: &dyn Objective) -> f64 {
        let idx: Vec<usize> = (0..obj.len()).collect();
        let (_, g) = batch_grad(net, obj, &idx);
        let g = g.flat();
        let p0 = net.parameters();
        let mut probe = net.clone();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..p0.len() {
            let mut p = p0.clone();
            p[k] += h;
            probe.set_parameters(&p).unwrap();
            let up = mean_loss(&probe, obj);
            p[k] -= 2.0 * h;
            probe.set_parameters(&p).unwrap();
            let down = mean_loss(&probe, obj);
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-7);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (seed, sizes) in [(1u64, vec![2, 16, 16, 3]), (2, vec![5, 8, 1]), (3, vec![3, 4])] {
            let net = Mlp::new(&sizes, seed).unwrap();
            let (x, y) = random_batch(7, sizes[0], *sizes.last().unwrap(), seed + 10);
            for loss in [Loss::MeanSquared, Loss::MeanRelativeSquared] {
                let data = Supervised::new(x.clone(), y.clone(), loss).unwrap();
                let worst = fd_check(&net, &data);
                assert!(worst <= 1e-5, "{sizes:?} {loss:?}: {worst}");
            }
        }
    }

    #[test]
    fn chunked_gradient_matches_serial_sum() {
        let net = Mlp::new(&[3, 10, 2], 4).unwrap();
        let (x, y) = random_batch(300, 3, 2, 5);
        let data = Supervised::new(x, y, Loss::MeanRelativeSquared).unwrap();
        let idx: Vec<usize> = (0..300).collect();
        let (l1, g1) = batch_grad(&net, &data, &idx);
        let (l2, g2) = batch_grad(&net, &data, &idx);
        assert_eq!((l1, g1.flat()), (l2, g2.flat()));
        let (ls, gs) = accumulate(&net, &data, &idx);
        assert!((ls / 300.0 - l1).abs() <= 1e-12 * l1);
        for (a, b) in gs.flat().iter().zip(g1.flat()) {
            assert!((a / 300.0 - b).abs() <= 1e-12 * b.abs().max(1e-3));
        }
    }

    struct Doubled(Supervised);

    impl Objective for Doubled {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn input(&self, i: usize) -> &[f64] {
            self.0.input(i)
        }
        fn loss_and_grad(&self, i: usize, y: &[f64]) -> (f64, Vec<f64>) {
            let (l, g) = self.0.loss_and_grad(i, y);
            (2.0 * l, g.into_iter().map(|v| 2.0 * v).collect())
        }
    }

    #[test]
    fn gradient_scales_with_loss() {
        let net = Mlp::new(&[3, 6, 2], 5).unwrap();
        let (x, y) = random_batch(5, 3, 2, 6);
        let base = Supervised::new(x, y, Loss::MeanSquared).unwrap();
        let idx: Vec<usize> = (0..5).collect();
        let g1 = batch_grad(&net, &base, &idx).1.flat();
        let g2 = batch_grad(&net, &Doubled(base.clone()), &idx).1.flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    fn line_data() -> Supervised {
        let x = Matrix::from_fn(100, 1, |i, _| -1.0 + 2.0 * i as f64 / 99.0);
        let y = Matrix::from_fn(100, 1, |i, _| 2.0 * x.get(i, 0));
        Supervised::new(x, y, Loss::MeanSquared).unwrap()
    }

    #[test]
    fn learns_linear_map() {
        let cfg = TrainConfig { epochs: 2000, learning_rate: 1e-2, seed: 3, ..TrainConfig::default() };
        let out = train(Mlp::new(&[1, 1], 7).unwrap(), &line_data(), &cfg).unwrap();
        let w = out.net.weights()[0].get(0, 0);
        assert!((w - 2.0).abs() <= 1e-3, "weight {w}");
        assert!(out.best_so_far.windows(2).all(|p| p[1] <= p[0]));
        assert!(out.best_loss <= out.initial_loss);
    }

    #[test]
    fn validation_selects_iterate_without_raising_training_loss() {
        let cfg = TrainConfig { epochs: 300, learning_rate: 1e-2, seed: 3, ..TrainConfig::default() };
        let data = line_data();
        let same = train_with_validation(Mlp::new(&[1, 1], 7).unwrap(), &data, Some(&data), &cfg).unwrap();
        let plain = train(Mlp::new(&[1, 1], 7).unwrap(), &data, &cfg).unwrap();
        assert_eq!(same.net, plain.net);
        assert_eq!(same.best_validation, Some(same.best_loss));

        // A validation target that only the initial map fits keeps the start.
        let net = Mlp::new(&[1, 1], 7).unwrap();
        let x = Matrix::from_fn(5, 1, |i, _| i as f64 / 4.0);
        let start = Matrix::from_fn(5, 1, |i, _| net.forward(x.row(i)).unwrap()[0]);
        let val = Supervised::new(x, start, Loss::MeanSquared).unwrap();
        let out = train_with_validation(net.clone(), &data, Some(&val), &cfg).unwrap();
        assert_eq!(out.net, net);
        assert_eq!(out.best_validation, Some(0.0));
        assert!(out.best_loss <= out.initial_loss);
        assert!(out.best_so_far.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn one_epoch_one_entry_and_zero_epochs_rejected() {
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let out = train(Mlp::new(&[1, 1], 7).unwrap(), &line_data(), &cfg).unwrap();
        assert_eq!(out.history.len(), 1);
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(matches!(train(Mlp::new(&[1, 1], 7).unwrap(), &line_data(), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_history() {
        let (x, y) = random_batch(40, 2, 2, 9);
        let data = Supervised::new(x, y, Loss::MeanSquared).unwrap();
        let cfg = TrainConfig { epochs: 50, batch_size: Some(8), seed: 11, grad_clip: Some(1.0), ..TrainConfig::default() };
        let a = train(Mlp::new(&[2, 8, 2], 1).unwrap(), &data, &cfg).unwrap();
        let b = train(Mlp::new(&[2, 8, 2], 1).unwrap(), &data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn diverging_training_reports_epoch() {
        let x = Matrix::new(1, 1, vec![1.0]).unwrap();
        let y = Matrix::new(1, 1, vec![1e300]).unwrap();
        let data = Supervised::new(x, y, Loss::MeanSquared).unwrap();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        assert!(matches!(train(Mlp::new(&[1, 1], 0).unwrap(), &data, &cfg), Err(Error::Diverged { epoch: 0 })));
    }

    #[test]
    fn scaling_and_persistence() {
        let s = InputScaling::from_rows([&[0.0, 10.0][..], &[2.0, 10.0][..]]).unwrap();
        assert_eq!(s.apply(&[1.0, 10.0]), vec![0.0, 0.0]);
        assert_eq!(s.apply(&[2.0, 3.0]), vec![1.0, 0.0]);
        let net = Mlp::new(&[2, 4, 3], 8).unwrap().with_scaling(s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        assert_eq!(Mlp::load(dir.path()).unwrap(), net);
    }

    #[test]
    fn zero_output_layer_gives_zero_map() {
        let net = Mlp::new(&[3, 5, 2], 4).unwrap().zero_output_layer();
        assert_eq!(net.forward(&[0.3, -0.2, 0.9]).unwrap(), vec![0.0, 0.0]);
    }
}
