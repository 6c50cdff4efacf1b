//! Benchmark harness: converged ground truth, accuracy against evaluation
//! budgets, and inclusion/exclusion curves scored by a uniform-subset
//! evaluation model.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{kernelshap, kernelshap_subsets_for_budget, permutation_shap, permutations_for_budget};
use crate::exact::{Attribution, NormalEquations};
use crate::game::{sample_subset, CooperativeGame, ShapleyKernelDistribution, SubsetMask};
use crate::nn::Classifier;
use crate::rng::{derive, Rng};
use crate::surrogate::SurrogateModel;
use crate::valuefn::LinkFunction;

/// z-value of a two-sided 95% normal interval.
const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundTruthConfig {
    /// Stop once every coordinate's standard error is below this.
    pub se_threshold: f64,
    pub max_evaluations: usize,
    /// Chunks in the first round; each later round doubles the total.
    pub initial_chunks: usize,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self {
            se_threshold: 1e-3,
            max_evaluations: 1 << 22,
            initial_chunks: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub attribution: Attribution,
    pub evaluations_used: usize,
    /// Largest per-coordinate standard error when sampling stopped.
    pub convergence_stat: f64,
    /// False when the evaluation budget ran out first.
    pub converged: bool,
}

/// Paired subsets per chunk of the ground-truth sampler.
fn chunk_size(d: usize) -> usize {
    let n = (4 * d).max(64);
    n + n % 2
}

fn max_standard_error(estimates: &[Vec<f64>]) -> f64 {
    let r = estimates.len();
    if r < 2 {
        return f64::INFINITY;
    }
    let d = estimates[0].len();
    (0..d)
        .map(|j| {
            let mean = estimates.iter().map(|e| e[j]).sum::<f64>() / r as f64;
            let var = estimates.iter().map(|e| (e[j] - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
            (var / r as f64).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Paired KernelSHAP run in growing rounds of fixed-size chunks. The estimate
/// pools every chunk; standard errors come from the spread of the per-chunk
/// estimates.
pub fn ground_truth(game: &CooperativeGame, config: &GroundTruthConfig, rng: &mut Rng) -> Result<GroundTruthRecord> {
    if config.se_threshold.is_nan() || config.se_threshold <= 0.0 || config.initial_chunks < 2 {
        return Err(Error::InvalidArgument(
            "ground truth needs a positive threshold and at least two initial chunks".into(),
        ));
    }
    let d = game.dimension();
    let null = game.null_value();
    let gap = game.grand_value() - null;
    if d == 1 {
        return Ok(GroundTruthRecord {
            attribution: Attribution::for_game(vec![gap], game),
            evaluations_used: 2,
            convergence_stat: 0.0,
            converged: true,
        });
    }
    let dist = ShapleyKernelDistribution::new(d)?;
    let chunk = chunk_size(d);
    let mut pooled = NormalEquations::new(d);
    let mut pending = NormalEquations::new(d);
    let mut estimates: Vec<Vec<f64>> = Vec::new();
    let mut evaluations = 2usize;
    let mut target = config.initial_chunks;

    let converged = 'rounds: loop {
        while estimates.len() < target {
            if evaluations + chunk > config.max_evaluations {
                break 'rounds false;
            }
            for _ in 0..chunk / 2 {
                let s = sample_subset(&dist, rng);
                let c = s.complement();
                pending.add(&s, game.evaluate(&s) - null, 1.0);
                pending.add(&c, game.evaluate(&c) - null, 1.0);
            }
            evaluations += chunk;
            match pending.solve(gap, false) {
                Ok(v) => {
                    estimates.push(v);
                    pooled.merge(&pending);
                    pending = NormalEquations::new(d);
                }
                // keep accumulating into the same chunk
                Err(Error::RankDeficient { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if max_standard_error(&estimates) < config.se_threshold {
            break true;
        }
        target *= 2;
    };
    pooled.merge(&pending);
    let values = pooled.solve(gap, false)?;
    Ok(GroundTruthRecord {
        attribution: Attribution::for_game(values, game),
        evaluations_used: evaluations,
        convergence_stat: max_standard_error(&estimates),
        converged,
    })
}

/// Sampling baselines compared against the amortized explainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    KernelShap,
    KernelShapPaired,
    Permutation,
    PermutationAntithetic,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::KernelShap,
        Estimator::KernelShapPaired,
        Estimator::Permutation,
        Estimator::PermutationAntithetic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::KernelShap => "kernelshap",
            Estimator::KernelShapPaired => "kernelshap_paired",
            Estimator::Permutation => "permutation",
            Estimator::PermutationAntithetic => "permutation_antithetic",
        }
    }

    fn id(self) -> u64 {
        self as u64
    }

    /// Runs within `budget` game evaluations; `None` when the budget is too small.
    pub fn run(self, game: &CooperativeGame, budget: usize, rng: &mut Rng) -> Option<Result<Attribution>> {
        let d = game.dimension();
        let report = match self {
            Estimator::KernelShap | Estimator::KernelShapPaired => {
                let paired = self == Estimator::KernelShapPaired;
                let n = kernelshap_subsets_for_budget(d, budget, paired)?;
                kernelshap(game, n, paired, rng, &[])
            }
            Estimator::Permutation | Estimator::PermutationAntithetic => {
                let antithetic = self == Estimator::PermutationAntithetic;
                let n = permutations_for_budget(d, budget, antithetic)?;
                permutation_shap(game, n, antithetic, rng, &[])
            }
        };
        Some(report.map(|r| r.estimate))
    }
}

/// One explained instance: its game, a reference attribution, and the model
/// evaluations consumed by one game evaluation.
pub struct BenchmarkInstance {
    pub game: CooperativeGame,
    pub truth: Attribution,
    pub cost_per_evaluation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub count: usize,
}

/// Mean with a 95% normal-approximation interval.
pub fn summarize(values: &[f64]) -> Summary {
    let n = values.len();
    if n == 0 {
        return Summary {
            mean: f64::NAN,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            count: 0,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let half = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Z_95 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    Summary {
        mean,
        ci_low: mean - half,
        ci_high: mean + half,
        count: n,
    }
}

pub const FASTSHAP_METHOD: &str = "fastshap";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub method: String,
    /// Model evaluations; the amortized explainer reports its single forward pass.
    pub budget: usize,
    pub metric: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    pub method: String,
    /// First budget whose mean l2 distance matches the explainer's; `None` if no budget in the grid does.
    pub budget: Option<usize>,
    pub fastshap_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub rows: Vec<AccuracyRow>,
    pub crossovers: Vec<Crossover>,
}

/// Distance of every method to the reference attributions at every budget.
/// Instance `i` under method `m` at budget `b` draws from the stream derived
/// from `(seed, m, b, i)`, so results do not depend on scheduling.
pub fn accuracy_benchmark(
    instances: &[BenchmarkInstance],
    methods: &[Estimator],
    budgets: &[usize],
    fastshap: Option<&[Attribution]>,
    seed: u64,
) -> Result<AccuracyReport> {
    for inst in instances {
        if inst.truth.dimension() != inst.game.dimension() {
            return Err(Error::ShapeMismatch {
                expected: inst.game.dimension(),
                actual: inst.truth.dimension(),
            });
        }
        if inst.cost_per_evaluation == 0 {
            return Err(Error::InvalidArgument("cost per evaluation must be positive".into()));
        }
    }
    let mut rows = Vec::new();
    let push = |rows: &mut Vec<AccuracyRow>, method: &str, budget: usize, l2: &[f64], l1: &[f64]| {
        for (metric, values) in [("l2", l2), ("l1", l1)] {
            rows.push(AccuracyRow {
                method: method.into(),
                budget,
                metric: metric.into(),
                summary: summarize(values),
            });
        }
    };

    let mut fastshap_l2 = None;
    if let Some(estimates) = fastshap {
        if estimates.len() != instances.len() {
            return Err(Error::ShapeMismatch {
                expected: instances.len(),
                actual: estimates.len(),
            });
        }
        let mut l2 = Vec::new();
        let mut l1 = Vec::new();
        for (inst, est) in instances.iter().zip(estimates) {
            if est.dimension() != inst.truth.dimension() {
                return Err(Error::ShapeMismatch {
                    expected: inst.truth.dimension(),
                    actual: est.dimension(),
                });
            }
            l2.push(inst.truth.l2_distance(&est.values));
            l1.push(inst.truth.l1_distance(&est.values));
        }
        fastshap_l2 = Some(summarize(&l2).mean);
        push(&mut rows, FASTSHAP_METHOD, 1, &l2, &l1);
    }

    let mut crossovers = Vec::new();
    for &method in methods {
        let mut crossover = None;
        for &budget in budgets {
            let results: Vec<Option<Result<(f64, f64)>>> = instances
                .par_iter()
                .enumerate()
                .map(|(i, inst)| {
                    let mut rng = derive(seed, &[method.id(), budget as u64, i as u64]);
                    method
                        .run(&inst.game, budget / inst.cost_per_evaluation, &mut rng)
                        .map(|r| r.map(|e| (inst.truth.l2_distance(&e.values), inst.truth.l1_distance(&e.values))))
                })
                .collect();
            if results.iter().any(Option::is_none) {
                continue;
            }
            let mut l2 = Vec::with_capacity(results.len());
            let mut l1 = Vec::with_capacity(results.len());
            for r in results.into_iter().flatten() {
                let (a, b) = r?;
                l2.push(a);
                l1.push(b);
            }
            let mean = summarize(&l2).mean;
            if let Some(target) = fastshap_l2 {
                if crossover.is_none() && mean <= target {
                    crossover = Some(budget);
                }
            }
            push(&mut rows, method.name(), budget, &l2, &l1);
        }
        if let Some(target) = fastshap_l2 {
            crossovers.push(Crossover {
                method: method.name().into(),
                budget: crossover,
                fastshap_l2: target,
            });
        }
    }
    Ok(AccuracyReport { rows, crossovers })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalMetric {
    /// Fraction of instances where the evaluation model's argmax equals the label.
    Top1,
    /// Mean log-odds of the label under the evaluation model.
    LogOdds,
}

impl RemovalMetric {
    pub fn name(self) -> &'static str {
        match self {
            RemovalMetric::Top1 => "top1",
            RemovalMetric::LogOdds => "log_odds",
        }
    }

    fn score(self, probs: &[f64], label: usize) -> f64 {
        match self {
            RemovalMetric::Top1 => f64::from(u8::from(argmax(probs) == label)),
            RemovalMetric::LogOdds => LinkFunction::Logit.apply(probs[label]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    pub metric: RemovalMetric,
    pub fractions: Vec<f64>,
    pub inclusion_curve: Vec<f64>,
    pub exclusion_curve: Vec<f64>,
    pub inclusion_auc: f64,
    pub exclusion_auc: f64,
}

/// `n` evenly spaced fractions covering `[0, 1]`.
pub fn fraction_grid(n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![0.0, 1.0];
    }
    (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
}

pub const DEFAULT_GRID_POINTS: usize = 21;

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Feature indices by descending attribution, ties broken by ascending index.
pub fn ranking(attribution: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..attribution.len()).collect();
    order.sort_by(|&a, &b| attribution[b].total_cmp(&attribution[a]).then(a.cmp(&b)));
    order
}

/// Number of top-ranked features selected at fraction `t`: `ceil(t d)`, with
/// a small tolerance so grid points that are exact multiples of `1/d` are not
/// rounded up by floating-point error.
pub fn features_at(t: f64, d: usize) -> usize {
    ((t * d as f64 - 1e-9).ceil().max(0.0) as usize).min(d)
}

/// Masks keeping (inclusion) and dropping (exclusion) the top `k` ranked features.
pub fn removal_masks(order: &[usize], k: usize) -> (SubsetMask, SubsetMask) {
    let mut include = SubsetMask::empty(order.len());
    for &i in &order[..k] {
        include.set(i, true);
    }
    let exclude = include.complement();
    (include, exclude)
}

/// Labels assigned by the original model.
pub fn predicted_labels(f: &dyn Classifier, instances: &[Vec<f64>]) -> Vec<usize> {
    instances.par_iter().map(|x| argmax(&f.predict(x))).collect()
}

fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

fn check_grid(fractions: &[f64]) -> Result<()> {
    let ok = fractions.len() >= 2
        && fractions[0] == 0.0
        && *fractions.last().unwrap() == 1.0
        && fractions.windows(2).all(|w| w[0] < w[1]);
    if !ok {
        return Err(Error::InvalidArgument(
            "fraction grid must increase strictly from 0 to 1".into(),
        ));
    }
    Ok(())
}

/// Per-instance inclusion and exclusion scores at every fraction.
fn instance_curves(
    eval_model: &SurrogateModel,
    x: &[f64],
    label: usize,
    order: &[usize],
    fractions: &[f64],
    metric: RemovalMetric,
) -> (Vec<f64>, Vec<f64>) {
    let d = x.len();
    fractions
        .iter()
        .map(|&t| {
            let (include, exclude) = removal_masks(order, features_at(t, d));
            (
                metric.score(&eval_model.predict(x, &include), label),
                metric.score(&eval_model.predict(x, &exclude), label),
            )
        })
        .unzip()
}

fn curves_for_orders(
    eval_model: &SurrogateModel,
    instances: &[Vec<f64>],
    labels: &[usize],
    orders: &[Vec<usize>],
    fractions: &[f64],
    metric: RemovalMetric,
) -> (Vec<f64>, Vec<f64>) {
    let per_instance: Vec<(Vec<f64>, Vec<f64>)> = instances
        .par_iter()
        .zip(labels)
        .zip(orders)
        .map(|((x, &y), order)| instance_curves(eval_model, x, y, order, fractions, metric))
        .collect();
    let n = per_instance.len() as f64;
    let mut inclusion = vec![0.0; fractions.len()];
    let mut exclusion = vec![0.0; fractions.len()];
    for (inc, exc) in &per_instance {
        for (a, b) in inclusion.iter_mut().zip(inc) {
            *a += b;
        }
        for (a, b) in exclusion.iter_mut().zip(exc) {
            *a += b;
        }
    }
    for v in inclusion.iter_mut().chain(exclusion.iter_mut()) {
        *v /= n;
    }
    (inclusion, exclusion)
}

fn check_instances(eval_model: &SurrogateModel, instances: &[Vec<f64>], n_other: usize) -> Result<()> {
    if instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if n_other != instances.len() {
        return Err(Error::ShapeMismatch {
            expected: instances.len(),
            actual: n_other,
        });
    }
    for x in instances {
        if x.len() != eval_model.dimension() {
            return Err(Error::ShapeMismatch {
                expected: eval_model.dimension(),
                actual: x.len(),
            });
        }
    }
    Ok(())
}

fn auc_result(fractions: &[f64], metric: RemovalMetric, inclusion: Vec<f64>, exclusion: Vec<f64>) -> AucResult {
    AucResult {
        metric,
        fractions: fractions.to_vec(),
        inclusion_auc: trapezoid(fractions, &inclusion),
        exclusion_auc: trapezoid(fractions, &exclusion),
        inclusion_curve: inclusion,
        exclusion_curve: exclusion,
    }
}

/// Inclusion and exclusion curves for features ranked by `attributions[i]`
/// (the attribution of `labels[i]`), scored by `eval_model` against `labels`.
pub fn inclusion_exclusion(
    attributions: &[Vec<f64>],
    eval_model: &SurrogateModel,
    instances: &[Vec<f64>],
    labels: &[usize],
    fractions: &[f64],
    metric: RemovalMetric,
) -> Result<AucResult> {
    check_grid(fractions)?;
    check_instances(eval_model, instances, attributions.len())?;
    check_instances(eval_model, instances, labels.len())?;
    let orders: Vec<Vec<usize>> = attributions.iter().map(|a| ranking(a)).collect();
    let (inclusion, exclusion) = curves_for_orders(eval_model, instances, labels, &orders, fractions, metric);
    Ok(auc_result(fractions, metric, inclusion, exclusion))
}

/// Curves averaged over `rounds` independent uniformly random rankings per instance.
pub fn random_ranking_baseline(
    eval_model: &SurrogateModel,
    instances: &[Vec<f64>],
    labels: &[usize],
    fractions: &[f64],
    metric: RemovalMetric,
    rounds: usize,
    seed: u64,
) -> Result<AucResult> {
    check_grid(fractions)?;
    check_instances(eval_model, instances, labels.len())?;
    if rounds == 0 {
        return Err(Error::InvalidArgument("need at least one random ranking".into()));
    }
    let d = eval_model.dimension();
    let mut inclusion = vec![0.0; fractions.len()];
    let mut exclusion = vec![0.0; fractions.len()];
    for r in 0..rounds {
        let mut rng = derive(seed, &[0x4a4d, r as u64]);
        let orders: Vec<Vec<usize>> = instances
            .iter()
            .map(|_| {
                let mut o: Vec<usize> = (0..d).collect();
                o.shuffle(&mut rng);
                o
            })
            .collect();
        let (inc, exc) = curves_for_orders(eval_model, instances, labels, &orders, fractions, metric);
        for (a, b) in inclusion.iter_mut().zip(inc) {
            *a += b / rounds as f64;
        }
        for (a, b) in exclusion.iter_mut().zip(exc) {
            *a += b / rounds as f64;
        }
    }
    Ok(auc_result(fractions, metric, inclusion, exclusion))
}

fn csv_string<F>(header: &[&str], fill: F) -> Result<String>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    fill(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per method, budget and metric.
pub fn accuracy_csv(report: &AccuracyReport) -> Result<String> {
    csv_string(
        &["method", "budget", "metric", "mean", "ci_low", "ci_high", "count"],
        |w| {
            for r in &report.rows {
                let s = &r.summary;
                w.write_record([
                    r.method.clone(),
                    r.budget.to_string(),
                    r.metric.clone(),
                    s.mean.to_string(),
                    s.ci_low.to_string(),
                    s.ci_high.to_string(),
                    s.count.to_string(),
                ])?;
            }
            Ok(())
        },
    )
}

pub fn crossover_csv(report: &AccuracyReport) -> Result<String> {
    csv_string(&["method", "crossover_budget", "fastshap_l2"], |w| {
        for c in &report.crossovers {
            w.write_record([
                c.method.clone(),
                c.budget.map_or_else(|| "none".into(), |b| b.to_string()),
                c.fastshap_l2.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Curves of several rankings, one row per ranking, metric and fraction,
/// followed by the areas (fraction left empty).
pub fn auc_csv(results: &[(String, AucResult)]) -> Result<String> {
    csv_string(&["ranking", "metric", "fraction", "inclusion", "exclusion"], |w| {
        for (name, r) in results {
            for ((t, inc), exc) in r.fractions.iter().zip(&r.inclusion_curve).zip(&r.exclusion_curve) {
                w.write_record([
                    name.clone(),
                    r.metric.name().into(),
                    t.to_string(),
                    inc.to_string(),
                    exc.to_string(),
                ])?;
            }
            w.write_record([
                name.clone(),
                r.metric.name().into(),
                "auc".into(),
                r.inclusion_auc.to_string(),
                r.exclusion_auc.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// Machine-readable record of how a result table was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_fingerprint: Option<String>,
    pub crate_version: String,
    pub settings: serde_json::Value,
}

impl RunManifest {
    pub fn new<T: Serialize>(
        command: &str,
        seed: u64,
        settings: &T,
        dataset_fingerprint: Option<String>,
    ) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            seed,
            config_hash: config_hash(settings)?,
            dataset_fingerprint,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            settings: serde_json::to_value(settings)?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
