//! Dense rectifier networks with analytic gradients, Adam, and a minibatch
//! training loop with plateau learning-rate decay and early stopping.
//!
//! Parameters live in one flat vector, layer by layer: the row-major
//! `out x in` weight matrix followed by the `out` biases. Gradients, Adam
//! moments and finite-difference checks all use the same layout.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};

/// Probability floor used by the KL loss.
pub const PROBABILITY_FLOOR: f64 = 1e-9;

/// Number of samples per gradient chunk. Chunks are reduced in index order,
/// so the summation tree is independent of the thread count.
const GRADIENT_CHUNK: usize = 8;

const MODEL_FORMAT: &str = "dense-net/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    format: String,
    /// Layer widths, input first: `[in, hidden.., out]`.
    sizes: Vec<usize>,
    head: OutputHead,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[l]` is the input to layer `l`; the last entry is the network output.
    activations: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

impl DenseNet {
    /// Network with He-style uniform fan-in initialization and zero biases.
    pub fn new(sizes: &[usize], head: OutputHead, rng: &mut Rng) -> Result<Self> {
        Self::check_sizes(sizes)?;
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            format: MODEL_FORMAT.into(),
            sizes: sizes.to_vec(),
            head,
            params,
        })
    }

    /// Builds a network from explicit `(weights, biases)` per layer; weights are row-major `out x in`.
    pub fn from_layers(input_size: usize, layers: Vec<(Vec<f64>, Vec<f64>)>, head: OutputHead) -> Result<Self> {
        let mut sizes = vec![input_size];
        let mut params = Vec::new();
        for (w, b) in layers {
            let fan_in = *sizes.last().unwrap();
            if w.len() != b.len() * fan_in {
                return Err(Error::ShapeMismatch {
                    expected: b.len() * fan_in,
                    actual: w.len(),
                });
            }
            sizes.push(b.len());
            params.extend(w);
            params.extend(b);
        }
        Self::check_sizes(&sizes)?;
        Ok(Self {
            format: MODEL_FORMAT.into(),
            sizes,
            head,
            params,
        })
    }

    fn check_sizes(sizes: &[usize]) -> Result<()> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network needs at least one layer of nonzero widths, got {sizes:?}"
            )));
        }
        Ok(())
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.sizes[..=layer])
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let start = self.layer_offset(l);
        let w_end = start + fan_in * fan_out;
        (&self.params[start..w_end], &self.params[w_end..w_end + fan_out])
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut trace = self.forward_trace(x)?;
        Ok(trace.activations.pop().unwrap())
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.input_size() {
            return Err(Error::ShapeMismatch {
                expected: self.input_size(),
                actual: x.len(),
            });
        }
        let n_layers = self.num_layers();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let input = &activations[l];
            let fan_in = input.len();
            let mut z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            } else if self.head == OutputHead::Softmax {
                softmax_in_place(&mut z);
            }
            activations.push(z);
        }
        Ok(ForwardTrace { activations })
    }

    /// Accumulates into `grad` the parameter gradient of a scalar loss whose
    /// gradient with respect to the network output is `upstream`.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[f64], grad: &mut [f64]) -> Result<()> {
        if upstream.len() != self.output_size() {
            return Err(Error::ShapeMismatch {
                expected: self.output_size(),
                actual: upstream.len(),
            });
        }
        if grad.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: self.num_params(),
                actual: grad.len(),
            });
        }
        let n_layers = self.num_layers();
        let mut delta: Vec<f64> = match self.head {
            OutputHead::Linear => upstream.to_vec(),
            OutputHead::Softmax => {
                let p = trace.output();
                let dot: f64 = p.iter().zip(upstream).map(|(a, b)| a * b).sum();
                p.iter().zip(upstream).map(|(pi, gi)| pi * (gi - dot)).collect()
            }
        };
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let start = self.layer_offset(l);
            let input = &trace.activations[l];
            {
                let (gw, gb) = grad[start..start + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if l > 0 {
                let (w, _) = self.layer(l);
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wv;
                    }
                }
                // rectifier derivative; activation is zero exactly where it was clamped
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        net.validate()?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Schema(format!("unknown model format {:?}", self.format)));
        }
        Self::check_sizes(&self.sizes)?;
        if self.params.len() != param_count(&self.sizes) {
            return Err(Error::ShapeMismatch {
                expected: param_count(&self.sizes),
                actual: self.params.len(),
            });
        }
        Ok(())
    }
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// A model mapping a feature vector to class probabilities.
pub trait Classifier: Send + Sync {
    fn num_features(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Vec<f64>;
}

impl Classifier for DenseNet {
    fn num_features(&self) -> usize {
        self.input_size()
    }

    fn num_classes(&self) -> usize {
        self.output_size()
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).expect("input width matches the network")
    }
}

/// Sum of squared errors and its gradient with respect to `prediction`.
pub fn squared_error(prediction: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            loss += r * r;
            2.0 * r
        })
        .collect();
    (loss, grad)
}

/// `KL(target || prediction)` with the prediction clipped at [`PROBABILITY_FLOOR`],
/// and its gradient with respect to `prediction`.
pub fn kl_divergence(target: &[f64], prediction: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = target
        .iter()
        .zip(prediction)
        .map(|(&p, &q)| {
            let clipped = q.max(PROBABILITY_FLOOR);
            if p > 0.0 {
                loss += p * (p.ln() - clipped.ln());
            }
            if q > PROBABILITY_FLOOR {
                -p / q
            } else {
                0.0
            }
        })
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            plateau_patience: 3,
            plateau_factor: 0.5,
            early_stop_patience: 10,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("train config: {m}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience values must be at least 1");
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// A minibatch training objective.
///
/// Each step the trainer picks example indices, lets the objective draw any
/// per-step randomness in [`Objective::prepare`] (sequentially, from the
/// trainer's stream), then evaluates prepared samples independently. The
/// minibatch loss is the mean of the per-sample losses.
pub trait Objective: Sync {
    type Sample: Send + Sync;

    fn num_examples(&self) -> usize;

    fn prepare(&self, indices: &[usize], rng: &mut Rng) -> Result<Vec<Self::Sample>>;

    /// Loss of one sample; its parameter gradient is added into `grad`.
    fn sample_loss_grad(&self, net: &DenseNet, sample: &Self::Sample, grad: &mut [f64]) -> Result<f64>;

    fn validation_loss(&self, net: &DenseNet) -> Result<f64>;
}

/// Mean loss and mean gradient over prepared samples, reduced in a fixed order.
pub fn batch_loss_grad<O: Objective>(net: &DenseNet, objective: &O, samples: &[O::Sample]) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_params = net.num_params();
    let partials: Vec<Result<(f64, Vec<f64>)>> = samples
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for sample in chunk {
                loss += objective.sample_loss_grad(net, sample, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_params];
    for part in partials {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / samples.len() as f64;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainLog {
    pub initial_validation_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored; 0 means the initial parameters.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_early: bool,
}

/// Relative decrease in validation loss that counts as an improvement.
const IMPROVEMENT_THRESHOLD: f64 = 1e-6;

/// Minibatch Adam training with plateau learning-rate decay, early stopping,
/// and restoration of the best-validation parameters.
pub fn train<O: Objective>(mut net: DenseNet, objective: &O, config: &TrainConfig) -> Result<(DenseNet, TrainLog)> {
    config.validate()?;
    let n = objective.num_examples();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = seeded(config.seed);
    let mut adam = AdamState::new(net.num_params());
    let mut lr = config.learning_rate;

    let initial = objective.validation_loss(&net)?;
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss(format!("initial validation loss {initial}")));
    }
    let mut log = TrainLog {
        initial_validation_loss: initial,
        best_validation_loss: initial,
        ..Default::default()
    };
    let mut best_params = net.params.clone();
    let mut plateau_reference = initial;
    let mut plateau_bad = 0usize;
    let mut stop_bad = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let samples = objective.prepare(batch, &mut rng)?;
            let (loss, grad) = batch_loss_grad(&net, objective, &samples)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss(format!("epoch {epoch}, step {step}: loss {loss}")));
            }
            weighted_loss += loss * batch.len() as f64;
            adam.step(&mut net.params, &grad, lr);
        }
        let validation_loss = objective.validation_loss(&net)?;
        if !validation_loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "epoch {epoch}: validation loss {validation_loss}"
            )));
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: weighted_loss / n as f64,
            validation_loss,
            learning_rate: lr,
        });

        if validation_loss < log.best_validation_loss {
            log.best_validation_loss = validation_loss;
            log.best_epoch = epoch;
            best_params.copy_from_slice(&net.params);
        }
        if validation_loss < plateau_reference - IMPROVEMENT_THRESHOLD * plateau_reference.abs() {
            plateau_reference = validation_loss;
            plateau_bad = 0;
            stop_bad = 0;
        } else {
            plateau_bad += 1;
            stop_bad += 1;
        }
        if stop_bad >= config.early_stop_patience {
            log.stopped_early = true;
            break;
        }
        if plateau_bad >= config.plateau_patience {
            lr *= config.plateau_factor;
            plateau_bad = 0;
        }
    }
    net.params = best_params;
    Ok((net, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedLoss {
    SquaredError,
    /// KL divergence from the target distribution to the softmax output.
    KlDivergence,
}

/// Fits outputs to fixed targets.
#[derive(Debug, Clone)]
pub struct SupervisedObjective {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub validation_inputs: Vec<Vec<f64>>,
    pub validation_targets: Vec<Vec<f64>>,
    pub loss: SupervisedLoss,
}

impl SupervisedObjective {
    fn loss_and_upstream(&self, output: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        match self.loss {
            SupervisedLoss::SquaredError => squared_error(output, target),
            SupervisedLoss::KlDivergence => kl_divergence(target, output),
        }
    }
}

impl Objective for SupervisedObjective {
    type Sample = usize;

    fn num_examples(&self) -> usize {
        self.inputs.len()
    }

    fn prepare(&self, indices: &[usize], _rng: &mut Rng) -> Result<Vec<usize>> {
        Ok(indices.to_vec())
    }

    fn sample_loss_grad(&self, net: &DenseNet, &i: &usize, grad: &mut [f64]) -> Result<f64> {
        let trace = net.forward_trace(&self.inputs[i])?;
        let (loss, upstream) = self.loss_and_upstream(trace.output(), &self.targets[i]);
        net.backward(&trace, &upstream, grad)?;
        Ok(loss)
    }

    fn validation_loss(&self, net: &DenseNet) -> Result<f64> {
        let (inputs, targets) = if self.validation_inputs.is_empty() {
            (&self.inputs, &self.targets)
        } else {
            (&self.validation_inputs, &self.validation_targets)
        };
        let mut total = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            total += self.loss_and_upstream(&net.forward(x)?, t).0;
        }
        Ok(total / inputs.len().max(1) as f64)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::DenseNet;

    /// Central finite-difference gradient of `loss` with respect to the parameters.
    pub fn finite_difference<F: Fn(&DenseNet) -> f64>(net: &DenseNet, h: f64, loss: F) -> Vec<f64> {
        let mut probe = net.clone();
        (0..net.num_params())
            .map(|i| {
                let orig = probe.params()[i];
                probe.params_mut()[i] = orig + h;
                let up = loss(&probe);
                probe.params_mut()[i] = orig - h;
                let down = loss(&probe);
                probe.params_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Perturbs every parameter so no rectifier sits exactly at its kink.
    pub fn jitter(net: &mut DenseNet, seed: u64) {
        use rand::Rng as _;
        let mut rng = crate::rng::seeded(seed);
        for p in net.params_mut() {
            *p += rng.random_range(-0.1..0.1);
        }
    }

    /// Largest per-coordinate relative error, ignoring coordinates where both are negligible.
    pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| {
                let scale = a.abs().max(n.abs());
                if scale < 1e-7 {
                    0.0
                } else {
                    (a - n).abs() / scale
                }
            })
            .fold(0.0, f64::max)
    }
}
