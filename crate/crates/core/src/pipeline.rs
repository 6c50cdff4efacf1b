//! Training steps and value-function construction shared by the command
//! line and the acceptance suite.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{train, Classifier, DenseNet, OutputHead, SupervisedLoss, SupervisedObjective, TrainConfig, TrainLog};
use crate::rng::derive;
use crate::surrogate::{SurrogateModel, SurrogateValueFunction};
use crate::valuefn::{
    compute_baseline, sample_background, BaselinePoint, BaselineValueFunction, LinkFunction, MarginalValueFunction,
    ValueFunction,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            train: TrainConfig::default(),
        }
    }
}

/// Fits a softmax classifier to the training split by cross-entropy, early
/// stopping on the validation split.
pub fn train_classifier(dataset: &Dataset, config: &ClassifierConfig) -> Result<(DenseNet, TrainLog)> {
    let objective = SupervisedObjective {
        inputs: dataset.train_rows(),
        targets: dataset.one_hot(&dataset.split.train),
        validation_inputs: dataset.validation_rows(),
        validation_targets: dataset.one_hot(&dataset.split.validation),
        loss: SupervisedLoss::KlDivergence,
    };
    let mut sizes = vec![dataset.num_features()];
    sizes.extend(&config.hidden);
    sizes.push(dataset.num_classes());
    let net = DenseNet::new(&sizes, OutputHead::Softmax, &mut derive(config.train.seed, &[0xc1a5]))?;
    train(net, &objective, &config.train)
}

/// How held-out features are removed when explaining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ValueFunctionKind {
    /// A masked-input surrogate of the classifier.
    Surrogate,
    /// A fixed reference point computed from the training split.
    Baseline,
    /// An average over a background sample of training rows.
    Marginal { background_size: usize },
}

impl ValueFunctionKind {
    pub fn name(self) -> &'static str {
        match self {
            ValueFunctionKind::Surrogate => "surrogate",
            ValueFunctionKind::Baseline => "baseline",
            ValueFunctionKind::Marginal { .. } => "marginal",
        }
    }
}

enum Removal {
    Surrogate(Arc<SurrogateModel>),
    Baseline(BaselinePoint),
    Marginal(Arc<Vec<Vec<f64>>>),
}

/// Builds per-instance value functions of one kind.
pub struct ValueFunctionBuilder {
    model: Arc<dyn Classifier>,
    link: LinkFunction,
    removal: Removal,
}

impl ValueFunctionBuilder {
    /// `surrogate` is required for the surrogate kind; baseline and background
    /// are derived from the training split, the background from `seed`.
    pub fn new(
        kind: ValueFunctionKind,
        link: LinkFunction,
        model: Arc<dyn Classifier>,
        surrogate: Option<Arc<SurrogateModel>>,
        dataset: &Dataset,
        seed: u64,
    ) -> Result<Self> {
        let removal = match kind {
            ValueFunctionKind::Surrogate => Removal::Surrogate(surrogate.ok_or_else(|| {
                Error::InvalidArgument("the surrogate value function needs a trained surrogate".into())
            })?),
            ValueFunctionKind::Baseline => {
                Removal::Baseline(compute_baseline(&dataset.train_rows(), &dataset.schema.kinds())?)
            }
            ValueFunctionKind::Marginal { background_size } => {
                if background_size == 0 {
                    return Err(Error::InvalidArgument("background size must be positive".into()));
                }
                let rows = dataset.train_rows();
                Removal::Marginal(Arc::new(sample_background(
                    &rows,
                    background_size,
                    &mut derive(seed, &[0xbac6]),
                )))
            }
        };
        Ok(Self { model, link, removal })
    }

    pub fn link(&self) -> LinkFunction {
        self.link
    }

    pub fn build(&self, x: &[f64]) -> Result<Arc<dyn ValueFunction>> {
        Ok(match &self.removal {
            Removal::Surrogate(s) => Arc::new(SurrogateValueFunction::new(s.clone(), x, self.link)?),
            Removal::Baseline(b) => Arc::new(BaselineValueFunction::new(self.model.clone(), x, b, self.link)?),
            Removal::Marginal(bg) => Arc::new(MarginalValueFunction::new(
                self.model.clone(),
                x,
                bg.clone(),
                self.link,
            )?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ingest_bytes, synthetic_logistic, SplitFractions, SyntheticSpec};
    use crate::eval::argmax;
    use crate::game::SubsetMask;

    fn small_dataset() -> Dataset {
        let synth = synthetic_logistic(&SyntheticSpec {
            instances: 600,
            ..Default::default()
        })
        .unwrap();
        ingest_bytes(synth.csv.as_bytes(), &synth.schema, &SplitFractions::default(), 1).unwrap()
    }

    #[test]
    fn classifier_beats_chance_on_synthetic_data() {
        let ds = small_dataset();
        let config = ClassifierConfig {
            hidden: vec![16],
            train: TrainConfig {
                max_epochs: 30,
                batch_size: 32,
                ..Default::default()
            },
        };
        let (net, _) = train_classifier(&ds, &config).unwrap();
        let test = &ds.split.test;
        let correct = test
            .iter()
            .filter(|&&i| argmax(&net.predict(&ds.features[i])) == ds.labels[i])
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.7);
    }

    #[test]
    fn builders_produce_games_with_model_endpoints() {
        let ds = small_dataset();
        let model: Arc<dyn Classifier> =
            Arc::new(DenseNet::new(&[8, 4, 2], OutputHead::Softmax, &mut crate::rng::seeded(2)).unwrap());
        let x = &ds.features[0];
        for kind in [
            ValueFunctionKind::Baseline,
            ValueFunctionKind::Marginal { background_size: 5 },
        ] {
            let b = ValueFunctionBuilder::new(kind, LinkFunction::Identity, model.clone(), None, &ds, 3).unwrap();
            let v = b.build(x).unwrap();
            for (a, b) in v.evaluate_all(&SubsetMask::full(8)).iter().zip(model.predict(x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert!(ValueFunctionBuilder::new(
            ValueFunctionKind::Surrogate,
            LinkFunction::Identity,
            model,
            None,
            &ds,
            3
        )
        .is_err());
    }
}
