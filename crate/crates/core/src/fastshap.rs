//! Amortized Shapley explainers.
//!
//! An explainer network maps an input to a `d x K` attribution matrix in one
//! forward pass. It is trained on the kernel-weighted least-squares objective
//! with subsets drawn from the Shapley kernel, so no ground-truth attributions
//! are ever computed. Output index `i * K + y` holds feature `i`, class `y`.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::Attribution;
use crate::game::{sample_subset, ShapleyKernelDistribution, SubsetMask};
use crate::nn::{train, DenseNet, Objective, OutputHead, TrainConfig, TrainLog};
use crate::rng::{derive, Rng};
use crate::valuefn::{LinkFunction, ValueFunction};

const EXPLAINER_FORMAT: &str = "fastshap-explainer/v1";

/// Fixed validation masks per held-out instance, drawn in complementary pairs.
pub const VALIDATION_MASKS_PER_INSTANCE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FastShapConfig {
    /// Subsets drawn per input per step.
    pub samples_per_input: usize,
    /// Every second subset is the complement of the one before it.
    pub paired: bool,
    pub normalize_train: bool,
    pub normalize_inference: bool,
    /// Weight of the squared efficiency gap penalty.
    pub gamma: f64,
    pub link: LinkFunction,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for FastShapConfig {
    fn default() -> Self {
        Self {
            samples_per_input: 32,
            paired: true,
            normalize_train: true,
            normalize_inference: true,
            gamma: 0.0,
            link: LinkFunction::Identity,
            hidden: vec![128, 128],
            train: TrainConfig::default(),
        }
    }
}

impl FastShapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_input == 0 {
            return Err(Error::InvalidArgument("samples_per_input must be at least 1".into()));
        }
        if self.paired && !self.samples_per_input.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "paired sampling needs an even samples_per_input, got {}",
                self.samples_per_input
            )));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma must be finite and nonnegative, got {}",
                self.gamma
            )));
        }
        self.train.validate()
    }
}

/// Adds an equal share of the efficiency gap to every coordinate.
pub fn additive_normalize(phi: &[f64], grand: f64, null: f64) -> Vec<f64> {
    let share = (grand - null - phi.iter().sum::<f64>()) / phi.len() as f64;
    phi.iter().map(|p| p + share).collect()
}

/// Network from inputs to a `d x K` attribution matrix with a linear head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerNet {
    format: String,
    num_classes: usize,
    net: DenseNet,
}

impl ExplainerNet {
    pub fn new(dimension: usize, num_classes: usize, hidden: &[usize], rng: &mut Rng) -> Result<Self> {
        let mut sizes = vec![dimension];
        sizes.extend(hidden);
        sizes.push(dimension * num_classes);
        Self::from_net(DenseNet::new(&sizes, OutputHead::Linear, rng)?, num_classes)
    }

    pub fn from_net(net: DenseNet, num_classes: usize) -> Result<Self> {
        if net.head() != OutputHead::Linear {
            return Err(Error::InvalidArgument("explainer network needs a linear head".into()));
        }
        if num_classes == 0 || net.output_size() != net.input_size() * num_classes {
            return Err(Error::ShapeMismatch {
                expected: net.input_size() * num_classes,
                actual: net.output_size(),
            });
        }
        Ok(Self {
            format: EXPLAINER_FORMAT.into(),
            num_classes,
            net,
        })
    }

    pub fn dimension(&self) -> usize {
        self.net.input_size()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    /// Raw attributions, one column per class, without normalization.
    pub fn columns(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let out = self.net.forward(x)?;
        Ok(split_columns(&out, self.dimension(), self.num_classes))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format != EXPLAINER_FORMAT {
            return Err(Error::Schema(format!("unknown explainer format {:?}", model.format)));
        }
        let net = DenseNet::from_json(&model.net.to_json()?)?;
        Self::from_net(net, model.num_classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn split_columns(out: &[f64], d: usize, k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|y| (0..d).map(|i| out[i * k + y]).collect()).collect()
}

/// Attribution for class `y` from a single forward pass.
pub fn explain(
    explainer: &ExplainerNet,
    x: &[f64],
    y: usize,
    null: f64,
    grand: f64,
    normalize: bool,
) -> Result<Attribution> {
    if y >= explainer.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {y} out of range for {} classes",
            explainer.num_classes()
        )));
    }
    let out = explainer.net.forward(x)?;
    let k = explainer.num_classes();
    let phi: Vec<f64> = (0..explainer.dimension()).map(|i| out[i * k + y]).collect();
    Ok(finish_attribution(phi, null, grand, normalize).with_class(y))
}

/// Attributions for every class from a single forward pass; `nulls` and
/// `grands` hold the game endpoints per class.
pub fn explain_all(
    explainer: &ExplainerNet,
    x: &[f64],
    nulls: &[f64],
    grands: &[f64],
    normalize: bool,
) -> Result<Vec<Attribution>> {
    let k = explainer.num_classes();
    for len in [nulls.len(), grands.len()] {
        if len != k {
            return Err(Error::ShapeMismatch {
                expected: k,
                actual: len,
            });
        }
    }
    Ok(explainer
        .columns(x)?
        .into_iter()
        .enumerate()
        .map(|(y, phi)| finish_attribution(phi, nulls[y], grands[y], normalize).with_class(y))
        .collect())
}

fn finish_attribution(phi: Vec<f64>, null: f64, grand: f64, normalize: bool) -> Attribution {
    let values = if normalize {
        additive_normalize(&phi, grand, null)
    } else {
        phi
    };
    Attribution::new(values, null, grand)
}

/// Weighted mean of squared residuals `v(s) - v(0) - sᵀφ` over `masks`, and
/// its gradient with respect to the raw `phi`. With `normalize`, the residuals
/// use the normalized `phi` and the gradient flows through the projection.
pub fn residual_loss(
    phi: &[f64],
    null: f64,
    grand: f64,
    masks: &[SubsetMask],
    targets: &[f64],
    weights: Option<&[f64]>,
    normalize: bool,
) -> (f64, Vec<f64>) {
    let d = phi.len();
    let used = if normalize {
        additive_normalize(phi, grand, null)
    } else {
        phi.to_vec()
    };
    let total_weight: f64 = match weights {
        Some(w) => w.iter().sum(),
        None => masks.len() as f64,
    };
    let mut loss = 0.0;
    let mut grad = vec![0.0; d];
    for (j, (s, &v)) in masks.iter().zip(targets).enumerate() {
        let w = weights.map_or(1.0, |w| w[j]) / total_weight;
        let r = v - null - s.iter_ones().map(|i| used[i]).sum::<f64>();
        loss += w * r * r;
        for i in s.iter_ones() {
            grad[i] -= 2.0 * w * r;
        }
    }
    if normalize {
        let mean = grad.iter().sum::<f64>() / d as f64;
        for g in grad.iter_mut() {
            *g -= mean;
        }
    }
    (loss, grad)
}

/// Loss of one instance averaged over `classes`, with the gradient with
/// respect to the flat network output.
#[allow(clippy::too_many_arguments)]
fn instance_loss(
    output: &[f64],
    d: usize,
    k: usize,
    classes: &[usize],
    masks: &[SubsetMask],
    values: &[Vec<f64>],
    nulls: &[f64],
    grands: &[f64],
    normalize: bool,
    gamma: f64,
) -> (f64, Vec<f64>) {
    let scale = 1.0 / classes.len() as f64;
    let mut loss = 0.0;
    let mut upstream = vec![0.0; output.len()];
    for &y in classes {
        let phi: Vec<f64> = (0..d).map(|i| output[i * k + y]).collect();
        let targets: Vec<f64> = values.iter().map(|v| v[y]).collect();
        let (l, mut g) = residual_loss(&phi, nulls[y], grands[y], masks, &targets, None, normalize);
        let gap = grands[y] - nulls[y] - phi.iter().sum::<f64>();
        loss += scale * (l + gamma * gap * gap);
        for gi in g.iter_mut() {
            *gi -= 2.0 * gamma * gap;
        }
        for (i, gi) in g.into_iter().enumerate() {
            upstream[i * k + y] = scale * gi;
        }
    }
    (loss, upstream)
}

/// `m` subsets from the Shapley kernel; with `paired`, odd positions hold the
/// complement of the preceding draw.
pub fn draw_masks(kernel: &ShapleyKernelDistribution, m: usize, paired: bool, rng: &mut Rng) -> Vec<SubsetMask> {
    let mut masks: Vec<SubsetMask> = Vec::with_capacity(m);
    for j in 0..m {
        let s = if paired && j % 2 == 1 {
            masks[j - 1].complement()
        } else {
            sample_subset(kernel, rng)
        };
        masks.push(s);
    }
    masks
}

struct ValidationInstance {
    x: Vec<f64>,
    masks: Vec<SubsetMask>,
    values: Vec<Vec<f64>>,
    null: Vec<f64>,
    grand: Vec<f64>,
}

fn endpoints(value_fn: &dyn ValueFunction) -> (Vec<f64>, Vec<f64>) {
    let d = value_fn.dimension();
    (
        value_fn.evaluate_all(&SubsetMask::empty(d)),
        value_fn.evaluate_all(&SubsetMask::full(d)),
    )
}

/// The amortized objective over a training set; the empty- and full-subset
/// values of every instance are computed once up front.
pub struct FastShapObjective {
    inputs: Vec<Vec<f64>>,
    value_fns: Vec<Arc<dyn ValueFunction>>,
    nulls: Vec<Vec<f64>>,
    grands: Vec<Vec<f64>>,
    validation: Vec<ValidationInstance>,
    kernel: ShapleyKernelDistribution,
    dimension: usize,
    num_classes: usize,
    classes: Vec<usize>,
    samples_per_input: usize,
    paired: bool,
    normalize: bool,
    gamma: f64,
}

impl FastShapObjective {
    pub fn new(
        inputs: Vec<Vec<f64>>,
        value_fns: Vec<Arc<dyn ValueFunction>>,
        validation_inputs: Vec<Vec<f64>>,
        validation_fns: Vec<Arc<dyn ValueFunction>>,
        config: &FastShapConfig,
    ) -> Result<Self> {
        config.validate()?;
        if inputs.len() != value_fns.len() {
            return Err(Error::ShapeMismatch {
                expected: inputs.len(),
                actual: value_fns.len(),
            });
        }
        if validation_inputs.len() != validation_fns.len() {
            return Err(Error::ShapeMismatch {
                expected: validation_inputs.len(),
                actual: validation_fns.len(),
            });
        }
        let first = value_fns.first().ok_or(Error::EmptyDataset)?;
        let (d, k) = (first.dimension(), first.num_classes());
        if d < 2 {
            return Err(Error::InvalidArgument(format!(
                "amortized training needs at least two features, got {d}"
            )));
        }
        for (x, f) in inputs
            .iter()
            .zip(&value_fns)
            .chain(validation_inputs.iter().zip(&validation_fns))
        {
            if x.len() != d || f.dimension() != d {
                return Err(Error::ShapeMismatch {
                    expected: d,
                    actual: x.len().max(f.dimension()),
                });
            }
            if f.num_classes() != k {
                return Err(Error::ShapeMismatch {
                    expected: k,
                    actual: f.num_classes(),
                });
            }
        }
        let kernel = ShapleyKernelDistribution::new(d)?;
        let (nulls, grands): (Vec<_>, Vec<_>) = value_fns.par_iter().map(|f| endpoints(f.as_ref())).unzip();

        let mut rng = derive(config.train.seed, &[0x7a11d]);
        let mask_sets: Vec<Vec<SubsetMask>> = validation_inputs
            .iter()
            .map(|_| draw_masks(&kernel, VALIDATION_MASKS_PER_INSTANCE, true, &mut rng))
            .collect();
        let validation = validation_inputs
            .into_par_iter()
            .zip(validation_fns)
            .zip(mask_sets)
            .map(|((x, f), masks)| {
                let (null, grand) = endpoints(f.as_ref());
                let values = masks.iter().map(|s| f.evaluate_all(s)).collect();
                ValidationInstance {
                    x,
                    masks,
                    values,
                    null,
                    grand,
                }
            })
            .collect();

        Ok(Self {
            inputs,
            value_fns,
            nulls,
            grands,
            validation,
            kernel,
            dimension: d,
            num_classes: k,
            classes: (0..k).collect(),
            samples_per_input: config.samples_per_input,
            paired: config.paired,
            normalize: config.normalize_train,
            gamma: config.gamma,
        })
    }

    /// Restricts the loss to a single class.
    pub fn restrict_to_class(mut self, y: usize) -> Result<Self> {
        if y >= self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {y} out of range for {} classes",
                self.num_classes
            )));
        }
        self.classes = vec![y];
        Ok(self)
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Training-set endpoints `(v(0), v(1))` per class of instance `i`.
    pub fn endpoints(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.nulls[i], &self.grands[i])
    }

    fn loss_for(
        &self,
        net: &DenseNet,
        x: &[f64],
        masks: &[SubsetMask],
        values: &[Vec<f64>],
        null: &[f64],
        grand: &[f64],
    ) -> Result<(f64, Vec<f64>, crate::nn::ForwardTrace)> {
        let trace = net.forward_trace(x)?;
        let (loss, upstream) = instance_loss(
            trace.output(),
            self.dimension,
            self.num_classes,
            &self.classes,
            masks,
            values,
            null,
            grand,
            self.normalize,
            self.gamma,
        );
        Ok((loss, upstream, trace))
    }
}

impl Objective for FastShapObjective {
    type Sample = (usize, Vec<SubsetMask>);

    fn num_examples(&self) -> usize {
        self.inputs.len()
    }

    fn prepare(&self, indices: &[usize], rng: &mut Rng) -> Result<Vec<Self::Sample>> {
        Ok(indices
            .iter()
            .map(|&i| (i, draw_masks(&self.kernel, self.samples_per_input, self.paired, rng)))
            .collect())
    }

    fn sample_loss_grad(&self, net: &DenseNet, (i, masks): &Self::Sample, grad: &mut [f64]) -> Result<f64> {
        let f = &self.value_fns[*i];
        let values: Vec<Vec<f64>> = masks.iter().map(|s| f.evaluate_all(s)).collect();
        let (loss, upstream, trace) =
            self.loss_for(net, &self.inputs[*i], masks, &values, &self.nulls[*i], &self.grands[*i])?;
        if !loss.is_finite() {
            let culprit = masks
                .iter()
                .zip(&values)
                .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
                .map(|(s, _)| format!("{s:?}"))
                .unwrap_or_else(|| "none (explainer output)".into());
            return Err(Error::NonFiniteLoss(format!(
                "amortized loss at instance {i}; non-finite value at subset {culprit}"
            )));
        }
        net.backward(&trace, &upstream, grad)?;
        Ok(loss)
    }

    fn validation_loss(&self, net: &DenseNet) -> Result<f64> {
        if self.validation.is_empty() {
            return Ok(0.0);
        }
        let losses: Vec<Result<f64>> = self
            .validation
            .par_iter()
            .map(|v| Ok(self.loss_for(net, &v.x, &v.masks, &v.values, &v.null, &v.grand)?.0))
            .collect();
        let mut total = 0.0;
        for l in losses {
            total += l?;
        }
        Ok(total / self.validation.len() as f64)
    }
}

/// Mean amortized loss over a batch and its parameter gradient; `masks[i]`
/// are the subsets used for `inputs[i]`.
pub fn fastshap_batch_loss(
    explainer: &ExplainerNet,
    inputs: &[Vec<f64>],
    value_fns: &[Arc<dyn ValueFunction>],
    masks: &[Vec<SubsetMask>],
    config: &FastShapConfig,
) -> Result<(f64, Vec<f64>)> {
    if masks.len() != inputs.len() {
        return Err(Error::ShapeMismatch {
            expected: inputs.len(),
            actual: masks.len(),
        });
    }
    let objective = FastShapObjective::new(inputs.to_vec(), value_fns.to_vec(), Vec::new(), Vec::new(), config)?;
    let samples: Vec<_> = masks.iter().cloned().enumerate().collect();
    crate::nn::batch_loss_grad(explainer.net(), &objective, &samples)
}

/// Builds the value function of one input.
pub type ValueFunctionFactory<'a> = dyn Fn(&[f64]) -> Result<Arc<dyn ValueFunction>> + Sync + 'a;

/// Trains an explainer on `train_x`, early-stopping on `validation_x`.
pub fn train_fastshap(
    factory: &ValueFunctionFactory<'_>,
    train_x: &[Vec<f64>],
    validation_x: &[Vec<f64>],
    config: &FastShapConfig,
) -> Result<(ExplainerNet, TrainLog)> {
    config.validate()?;
    if train_x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let build =
        |rows: &[Vec<f64>]| -> Result<Vec<Arc<dyn ValueFunction>>> { rows.par_iter().map(|x| factory(x)).collect() };
    let objective = FastShapObjective::new(
        train_x.to_vec(),
        build(train_x)?,
        validation_x.to_vec(),
        build(validation_x)?,
        config,
    )?;
    let explainer = ExplainerNet::new(
        objective.dimension(),
        objective.num_classes(),
        &config.hidden,
        &mut derive(config.train.seed, &[0xe7a1]),
    )?;
    let (net, log) = train(explainer.net, &objective, &config.train)?;
    Ok((ExplainerNet::from_net(net, objective.num_classes())?, log))
}

/// Everything needed to reproduce an explainer's training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerManifest {
    pub value_function: String,
    pub config: FastShapConfig,
}
