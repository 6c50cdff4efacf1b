//! Masked-input surrogate models.
//!
//! A surrogate sees `(x * s, s)`: held-out features are zeroed and the mask is
//! appended as an indicator channel. Observed inputs always carry an all-ones
//! indicator, so no masked encoding can collide with an observed one. Training
//! minimizes `KL(f(x) || surrogate(m(x, s)))` over subsets drawn from the
//! configured distribution, which makes the surrogate approximate the
//! conditional expectation of `f` given the present features.

use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{sample_subset, sample_uniform_subset, CooperativeGame, ShapleyKernelDistribution, SubsetMask};
use crate::nn::{kl_divergence, train, Classifier, DenseNet, Objective, OutputHead, TrainConfig, TrainLog};
use crate::rng::{derive, Rng};
use crate::valuefn::{game_for_class, LinkFunction, ValueFunction};

/// Fixed validation masks drawn per validation instance.
const VALIDATION_MASKS_PER_INSTANCE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedInput {
    pub masked_features: Vec<f64>,
    pub mask_indicator: Vec<f64>,
}

impl MaskedInput {
    /// Network input: masked features followed by the indicator.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = self.masked_features.clone();
        v.extend_from_slice(&self.mask_indicator);
        v
    }
}

pub fn mask_input(x: &[f64], s: &SubsetMask) -> MaskedInput {
    assert_eq!(x.len(), s.len(), "feature and mask lengths differ");
    MaskedInput {
        masked_features: x
            .iter()
            .enumerate()
            .map(|(i, &v)| if s.get(i) { v } else { 0.0 })
            .collect(),
        mask_indicator: s.to_f64(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetDistribution {
    /// Shapley kernel, with the empty and full masks each mixed in at rate `1/(d+1)`.
    ShapleyKernel,
    /// Every feature present independently with probability 1/2.
    Uniform,
    /// Always the full mask; a fidelity baseline for the unmasked input.
    Full,
}

impl SubsetDistribution {
    pub fn name(self) -> &'static str {
        match self {
            SubsetDistribution::ShapleyKernel => "shapley_kernel",
            SubsetDistribution::Uniform => "uniform",
            SubsetDistribution::Full => "full",
        }
    }
}

/// Draws masks for surrogate training.
#[derive(Debug, Clone)]
pub struct MaskSampler {
    distribution: SubsetDistribution,
    dimension: usize,
    kernel: Option<ShapleyKernelDistribution>,
}

impl MaskSampler {
    pub fn new(distribution: SubsetDistribution, dimension: usize) -> Result<Self> {
        let kernel = match distribution {
            SubsetDistribution::ShapleyKernel if dimension >= 2 => Some(ShapleyKernelDistribution::new(dimension)?),
            _ => None,
        };
        Ok(Self {
            distribution,
            dimension,
            kernel,
        })
    }

    pub fn sample(&self, rng: &mut Rng) -> SubsetMask {
        let d = self.dimension;
        match self.distribution {
            SubsetDistribution::Uniform => sample_uniform_subset(d, rng),
            SubsetDistribution::Full => SubsetMask::full(d),
            SubsetDistribution::ShapleyKernel => {
                let endpoint = 1.0 / (d + 1) as f64;
                let u: f64 = rng.random();
                match (&self.kernel, u) {
                    (_, u) if u < endpoint => SubsetMask::empty(d),
                    (_, u) if u < 2.0 * endpoint => SubsetMask::full(d),
                    (Some(kernel), _) => sample_subset(kernel, rng),
                    // d = 1 has no proper subsets
                    (None, _) => SubsetMask::full(d),
                }
            }
        }
    }
}

const SURROGATE_FORMAT: &str = "masked-surrogate/v1";

/// A softmax network over `2d` masked inputs, tagged with the subset
/// distribution it was trained under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    format: String,
    pub distribution: SubsetDistribution,
    pub net: DenseNet,
}

impl SurrogateModel {
    pub fn new(net: DenseNet, distribution: SubsetDistribution) -> Result<Self> {
        if net.head() != OutputHead::Softmax || !net.input_size().is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "surrogate network needs an even input width and a softmax head".into(),
            ));
        }
        Ok(Self {
            format: SURROGATE_FORMAT.into(),
            distribution,
            net,
        })
    }

    pub fn dimension(&self) -> usize {
        self.net.input_size() / 2
    }

    pub fn num_classes(&self) -> usize {
        self.net.output_size()
    }

    pub fn predict_masked(&self, input: &MaskedInput) -> Vec<f64> {
        self.net.forward(&input.encode()).expect("surrogate input width")
    }

    pub fn predict(&self, x: &[f64], s: &SubsetMask) -> Vec<f64> {
        self.predict_masked(&mask_input(x, s))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        if model.format != SURROGATE_FORMAT {
            return Err(Error::Schema(format!("unknown surrogate format {:?}", model.format)));
        }
        // re-validate the embedded network
        let net = DenseNet::from_json(&model.net.to_json()?)?;
        Self::new(net, model.distribution)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            train: TrainConfig::default(),
        }
    }
}

/// KL objective between a frozen classifier and the surrogate on masked inputs.
pub struct SurrogateObjective {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    validation: Vec<(Vec<f64>, Vec<f64>)>,
    sampler: MaskSampler,
}

impl SurrogateObjective {
    pub fn new(
        f: &dyn Classifier,
        train_x: &[Vec<f64>],
        validation_x: &[Vec<f64>],
        distribution: SubsetDistribution,
        seed: u64,
    ) -> Result<Self> {
        let d = f.num_features();
        for x in train_x.iter().chain(validation_x) {
            if x.len() != d {
                return Err(Error::ShapeMismatch {
                    expected: d,
                    actual: x.len(),
                });
            }
        }
        let sampler = MaskSampler::new(distribution, d)?;
        let mut rng = derive(seed, &[0x5a11]);
        let mut validation = Vec::new();
        for x in validation_x {
            let target = f.predict(x);
            for _ in 0..VALIDATION_MASKS_PER_INSTANCE {
                let s = sampler.sample(&mut rng);
                validation.push((mask_input(x, &s).encode(), target.clone()));
            }
        }
        Ok(Self {
            targets: train_x.iter().map(|x| f.predict(x)).collect(),
            inputs: train_x.to_vec(),
            validation,
            sampler,
        })
    }
}

impl Objective for SurrogateObjective {
    type Sample = (usize, SubsetMask);

    fn num_examples(&self) -> usize {
        self.inputs.len()
    }

    fn prepare(&self, indices: &[usize], rng: &mut Rng) -> Result<Vec<Self::Sample>> {
        Ok(indices.iter().map(|&i| (i, self.sampler.sample(rng))).collect())
    }

    fn sample_loss_grad(&self, net: &DenseNet, (i, s): &Self::Sample, grad: &mut [f64]) -> Result<f64> {
        let trace = net.forward_trace(&mask_input(&self.inputs[*i], s).encode())?;
        let (loss, upstream) = kl_divergence(&self.targets[*i], trace.output());
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(format!(
                "surrogate KL at instance {i}, mask {s:?}"
            )));
        }
        net.backward(&trace, &upstream, grad)?;
        Ok(loss)
    }

    fn validation_loss(&self, net: &DenseNet) -> Result<f64> {
        if self.validation.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (input, target) in &self.validation {
            total += kl_divergence(target, &net.forward(input)?).0;
        }
        Ok(total / self.validation.len() as f64)
    }
}

/// Trains a surrogate of `f` on masked versions of `train_x`.
pub fn train_surrogate(
    f: &dyn Classifier,
    train_x: &[Vec<f64>],
    validation_x: &[Vec<f64>],
    distribution: SubsetDistribution,
    config: &SurrogateConfig,
) -> Result<(SurrogateModel, TrainLog)> {
    if train_x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = f.num_features();
    let objective = SurrogateObjective::new(f, train_x, validation_x, distribution, config.train.seed)?;
    let mut sizes = vec![2 * d];
    sizes.extend(&config.hidden);
    sizes.push(f.num_classes());
    let net = DenseNet::new(&sizes, OutputHead::Softmax, &mut derive(config.train.seed, &[0x1417]))?;
    let (net, log) = train(net, &objective, &config.train)?;
    Ok((SurrogateModel::new(net, distribution)?, log))
}

/// `v(s) = link(surrogate(m(x, s))_y)` for every class.
pub struct SurrogateValueFunction {
    surrogate: Arc<SurrogateModel>,
    x: Vec<f64>,
    link: LinkFunction,
}

impl SurrogateValueFunction {
    pub fn new(surrogate: Arc<SurrogateModel>, x: &[f64], link: LinkFunction) -> Result<Self> {
        if x.len() != surrogate.dimension() {
            return Err(Error::ShapeMismatch {
                expected: surrogate.dimension(),
                actual: x.len(),
            });
        }
        Ok(Self {
            surrogate,
            x: x.to_vec(),
            link,
        })
    }
}

impl ValueFunction for SurrogateValueFunction {
    fn dimension(&self) -> usize {
        self.x.len()
    }

    fn num_classes(&self) -> usize {
        self.surrogate.num_classes()
    }

    fn evaluate_all(&self, s: &SubsetMask) -> Vec<f64> {
        self.surrogate
            .predict(&self.x, s)
            .into_iter()
            .map(|p| self.link.apply(p))
            .collect()
    }
}

pub fn surrogate_value_function(
    surrogate: Arc<SurrogateModel>,
    x: &[f64],
    y: usize,
    link: LinkFunction,
) -> Result<CooperativeGame> {
    game_for_class(Arc::new(SurrogateValueFunction::new(surrogate, x, link)?), y)
}
