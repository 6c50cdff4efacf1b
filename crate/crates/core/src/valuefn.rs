//! Value functions: how a classifier's output is evaluated with features removed.

use std::sync::Arc;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::FeatureKind;
use crate::error::{Error, Result};
use crate::game::{CooperativeGame, SubsetMask};
use crate::nn::Classifier;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkFunction {
    Identity,
    Logit,
}

impl LinkFunction {
    /// Probabilities are clipped to `[eps, 1 - eps]` before the logit.
    pub const LOGIT_EPSILON: f64 = 1e-6;

    pub fn apply(self, p: f64) -> f64 {
        match self {
            LinkFunction::Identity => p,
            LinkFunction::Logit => {
                let q = p.clamp(Self::LOGIT_EPSILON, 1.0 - Self::LOGIT_EPSILON);
                (q / (1.0 - q)).ln()
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Logit => "logit",
        }
    }
}

/// Linked values of every class for the same instance, evaluated jointly.
pub trait ValueFunction: Send + Sync {
    fn dimension(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// `link(p_y)` for every class `y` with only the features in `s` present.
    fn evaluate_all(&self, s: &SubsetMask) -> Vec<f64>;

    /// Model evaluations consumed by one call of [`ValueFunction::evaluate_all`].
    fn cost_per_evaluation(&self) -> usize {
        1
    }
}

/// The single-class game `v_{x,y}` of a joint value function.
pub fn game_for_class(value_fn: Arc<dyn ValueFunction>, class: usize) -> Result<CooperativeGame> {
    if class >= value_fn.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} classes",
            value_fn.num_classes()
        )));
    }
    let d = value_fn.dimension();
    CooperativeGame::new(d, move |s| value_fn.evaluate_all(s)[class])
}

/// Fixed reference point: mean of continuous and mode of discrete features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinePoint {
    pub values: Vec<f64>,
}

/// Columnwise mean (continuous) or mode (discrete, ties to the smallest value).
pub fn compute_baseline(rows: &[Vec<f64>], kinds: &[FeatureKind]) -> Result<BaselinePoint> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let d = kinds.len();
    let mut values = Vec::with_capacity(d);
    for (j, kind) in kinds.iter().enumerate() {
        let column: Vec<f64> = rows
            .iter()
            .map(|r| {
                r.get(j).copied().ok_or(Error::ShapeMismatch {
                    expected: d,
                    actual: r.len(),
                })
            })
            .collect::<Result<_>>()?;
        let v = match kind {
            FeatureKind::Continuous => column.iter().sum::<f64>() / column.len() as f64,
            FeatureKind::Discrete => {
                let mut sorted = column.clone();
                sorted.sort_by(f64::total_cmp);
                let (mut best, mut best_count) = (sorted[0], 0usize);
                let mut i = 0;
                while i < sorted.len() {
                    let mut j = i;
                    while j < sorted.len() && sorted[j] == sorted[i] {
                        j += 1;
                    }
                    // ascending scan with strict comparison keeps the smallest tied value
                    if j - i > best_count {
                        best = sorted[i];
                        best_count = j - i;
                    }
                    i = j;
                }
                best
            }
        };
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("baseline for column {j} is not finite")));
        }
        values.push(v);
    }
    Ok(BaselinePoint { values })
}

/// `x_i` where `s_i = 1`, else `fill_i`.
pub fn compose(x: &[f64], fill: &[f64], s: &SubsetMask) -> Vec<f64> {
    x.iter()
        .zip(fill)
        .enumerate()
        .map(|(i, (&xi, &fi))| if s.get(i) { xi } else { fi })
        .collect()
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::ShapeMismatch { expected, actual });
    }
    Ok(())
}

/// Held-out features replaced by a fixed baseline point.
pub struct BaselineValueFunction {
    model: Arc<dyn Classifier>,
    x: Vec<f64>,
    baseline: Vec<f64>,
    link: LinkFunction,
}

impl BaselineValueFunction {
    pub fn new(model: Arc<dyn Classifier>, x: &[f64], baseline: &BaselinePoint, link: LinkFunction) -> Result<Self> {
        check_len(model.num_features(), x.len())?;
        check_len(x.len(), baseline.values.len())?;
        Ok(Self {
            model,
            x: x.to_vec(),
            baseline: baseline.values.clone(),
            link,
        })
    }
}

impl ValueFunction for BaselineValueFunction {
    fn dimension(&self) -> usize {
        self.x.len()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn evaluate_all(&self, s: &SubsetMask) -> Vec<f64> {
        let probs = self.model.predict(&compose(&self.x, &self.baseline, s));
        probs.into_iter().map(|p| self.link.apply(p)).collect()
    }
}

/// Held-out features marginalized over a fixed background sample; the link is
/// applied to the averaged output.
pub struct MarginalValueFunction {
    model: Arc<dyn Classifier>,
    x: Vec<f64>,
    background: Arc<Vec<Vec<f64>>>,
    link: LinkFunction,
}

impl MarginalValueFunction {
    pub fn new(
        model: Arc<dyn Classifier>,
        x: &[f64],
        background: Arc<Vec<Vec<f64>>>,
        link: LinkFunction,
    ) -> Result<Self> {
        if background.is_empty() {
            return Err(Error::InvalidArgument("background sample is empty".into()));
        }
        check_len(model.num_features(), x.len())?;
        for b in background.iter() {
            check_len(x.len(), b.len())?;
        }
        Ok(Self {
            model,
            x: x.to_vec(),
            background,
            link,
        })
    }
}

impl ValueFunction for MarginalValueFunction {
    fn dimension(&self) -> usize {
        self.x.len()
    }

    fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    fn evaluate_all(&self, s: &SubsetMask) -> Vec<f64> {
        let k = self.model.num_classes();
        let mut mean = vec![0.0; k];
        for b in self.background.iter() {
            for (m, p) in mean.iter_mut().zip(self.model.predict(&compose(&self.x, b, s))) {
                *m += p;
            }
        }
        let n = self.background.len() as f64;
        mean.into_iter().map(|m| self.link.apply(m / n)).collect()
    }

    fn cost_per_evaluation(&self) -> usize {
        self.background.len()
    }
}

pub fn baseline_value_function(
    f: Arc<dyn Classifier>,
    x: &[f64],
    y: usize,
    baseline: &BaselinePoint,
    link: LinkFunction,
) -> Result<CooperativeGame> {
    game_for_class(Arc::new(BaselineValueFunction::new(f, x, baseline, link)?), y)
}

pub fn marginal_value_function(
    f: Arc<dyn Classifier>,
    x: &[f64],
    y: usize,
    background: Arc<Vec<Vec<f64>>>,
    link: LinkFunction,
) -> Result<CooperativeGame> {
    game_for_class(Arc::new(MarginalValueFunction::new(f, x, background, link)?), y)
}

/// Draws `size` distinct rows (all rows if fewer) to serve as a background sample.
pub fn sample_background(rows: &[Vec<f64>], size: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = size.min(rows.len());
    let mut idx: Vec<usize> = sample(rng, rows.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::shapley_brute_force;

    /// Two-class model returning raw linear scores `(w.x + b, -(w.x + b))`.
    struct LinearScores {
        w: Vec<f64>,
        b: f64,
    }

    impl Classifier for LinearScores {
        fn num_features(&self) -> usize {
            self.w.len()
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn predict(&self, x: &[f64]) -> Vec<f64> {
            let z = self.b + self.w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            vec![z, -z]
        }
    }

    /// Two-class logistic model.
    struct Logistic {
        w: Vec<f64>,
    }

    impl Classifier for Logistic {
        fn num_features(&self) -> usize {
            self.w.len()
        }
        fn num_classes(&self) -> usize {
            2
        }
        fn predict(&self, x: &[f64]) -> Vec<f64> {
            let z: f64 = self.w.iter().zip(x).map(|(a, b)| a * b).sum();
            let p = 1.0 / (1.0 + (-z).exp());
            vec![1.0 - p, p]
        }
    }

    #[test]
    fn link_functions() {
        assert_eq!(LinkFunction::Logit.apply(0.5), 0.0);
        assert_eq!(LinkFunction::Identity.apply(0.3), 0.3);
        let hi = LinkFunction::Logit.apply(1.0);
        assert!(hi.is_finite() && (hi - (1.0f64 / 1e-6 - 1.0).ln()).abs() < 1e-6);
        assert!(LinkFunction::Logit.apply(0.0).is_finite());
    }

    #[test]
    fn baseline_examples() {
        use FeatureKind::*;
        let rows = vec![vec![1.0, 0.0, 1.0], vec![2.0, 0.0, 0.0], vec![3.0, 1.0, 1.0]];
        let b = compute_baseline(&rows, &[Continuous, Discrete, Discrete]).unwrap();
        assert_eq!(b.values, vec![2.0, 0.0, 1.0]);
        let tie = compute_baseline(&[vec![1.0], vec![0.0]], &[Discrete]).unwrap();
        assert_eq!(tie.values, vec![0.0]);
        assert!(compute_baseline(&[], &[Continuous]).is_err());
    }

    #[test]
    fn baseline_game_endpoints_and_dummy() {
        let model: Arc<dyn Classifier> = Arc::new(Logistic {
            w: vec![1.0, -2.0, 0.5],
        });
        let x = [0.3, 1.0, -1.0];
        let baseline = BaselinePoint {
            values: vec![0.0, 0.5, 0.0],
        };
        for link in [LinkFunction::Identity, LinkFunction::Logit] {
            let g = baseline_value_function(model.clone(), &x, 1, &baseline, link).unwrap();
            assert_eq!(g.grand_value(), link.apply(model.predict(&x)[1]));
            assert_eq!(g.null_value(), link.apply(model.predict(&baseline.values)[1]));
        }
        let same = BaselinePoint { values: x.to_vec() };
        let g = baseline_value_function(model, &x, 0, &same, LinkFunction::Identity).unwrap();
        let phi = shapley_brute_force(&g).unwrap();
        assert!(phi.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn marginal_game_reduces_to_baseline_with_one_background_row() {
        let model: Arc<dyn Classifier> = Arc::new(Logistic {
            w: vec![1.5, -0.7, 2.0, 0.1],
        });
        let x = [1.0, -1.0, 0.4, 2.0];
        let baseline = BaselinePoint {
            values: vec![0.1, 0.2, 0.3, 0.4],
        };
        let marginal = marginal_value_function(
            model.clone(),
            &x,
            1,
            Arc::new(vec![baseline.values.clone()]),
            LinkFunction::Logit,
        )
        .unwrap();
        let base = baseline_value_function(model, &x, 1, &baseline, LinkFunction::Logit).unwrap();
        for idx in 0..16 {
            let s = SubsetMask::from_index(idx, 4);
            assert_eq!(marginal.evaluate(&s).to_bits(), base.evaluate(&s).to_bits());
        }
        assert_eq!(marginal.grand_value(), base.grand_value());
    }

    #[test]
    fn marginal_game_matches_closed_form_for_linear_scores() {
        let w = vec![0.5, -1.25, 2.0];
        let b = 0.3;
        let model: Arc<dyn Classifier> = Arc::new(LinearScores { w: w.clone(), b });
        let x = [1.0, 2.0, -1.0];
        let background = vec![vec![0.0, 1.0, 3.0], vec![2.0, -1.0, 0.5], vec![-1.0, 0.25, 1.0]];
        let means: Vec<f64> = (0..3)
            .map(|j| background.iter().map(|r| r[j]).sum::<f64>() / 3.0)
            .collect();
        let game = marginal_value_function(model, &x, 0, Arc::new(background), LinkFunction::Identity).unwrap();
        for idx in 0..8 {
            let s = SubsetMask::from_index(idx, 3);
            let expected = b
                + (0..3)
                    .map(|j| w[j] * if s.get(j) { x[j] } else { means[j] })
                    .sum::<f64>();
            assert!((game.evaluate(&s) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn marginal_applies_link_after_averaging() {
        let model: Arc<dyn Classifier> = Arc::new(Logistic { w: vec![3.0] });
        let background = Arc::new(vec![vec![-2.0], vec![2.0], vec![1.0]]);
        let game = marginal_value_function(model.clone(), &[0.0], 1, background.clone(), LinkFunction::Logit).unwrap();
        let mean_p = background.iter().map(|b| model.predict(b)[1]).sum::<f64>() / 3.0;
        assert_eq!(game.null_value(), LinkFunction::Logit.apply(mean_p));
        let vf = MarginalValueFunction::new(model, &[0.0], background, LinkFunction::Logit).unwrap();
        assert_eq!(vf.cost_per_evaluation(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model: Arc<dyn Classifier> = Arc::new(Logistic { w: vec![1.0, 1.0] });
        assert!(
            marginal_value_function(model.clone(), &[0.0, 0.0], 0, Arc::new(vec![]), LinkFunction::Identity).is_err()
        );
        let baseline = BaselinePoint { values: vec![0.0] };
        assert!(baseline_value_function(model.clone(), &[0.0, 0.0], 0, &baseline, LinkFunction::Identity).is_err());
        let baseline = BaselinePoint { values: vec![0.0, 0.0] };
        assert!(baseline_value_function(model, &[0.0, 0.0], 2, &baseline, LinkFunction::Identity).is_err());
    }
}
