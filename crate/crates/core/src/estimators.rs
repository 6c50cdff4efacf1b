//! Sampling-based Shapley estimators: KernelSHAP and permutation sampling.
//!
//! Both report the number of distinct value-function calls they made and an
//! estimate at each requested checkpoint, so accuracy can be traced as a
//! function of the evaluation budget.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{kernel_normal_equations, Attribution, NormalEquations};
use crate::game::{sample_subset, CooperativeGame, ShapleyKernelDistribution, SubsetMask};
use crate::rng::Rng;

/// Extra sampling rounds attempted when the sampled regression is rank-deficient.
const MAX_RESAMPLE_ROUNDS: usize = 16;

pub const MAX_ENUMERATED_PERMUTATION_DIMENSION: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub evaluations: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimate: Attribution,
    pub model_evaluations: usize,
    pub trajectory: Vec<Checkpoint>,
}

impl EstimatorReport {
    fn finish(estimate: Attribution, model_evaluations: usize, mut trajectory: Vec<Checkpoint>) -> Self {
        trajectory.retain(|c| c.evaluations < model_evaluations);
        trajectory.push(Checkpoint {
            evaluations: model_evaluations,
            values: estimate.values.clone(),
        });
        Self {
            estimate,
            model_evaluations,
            trajectory,
        }
    }
}

/// `d, 2d, 4d, ...` up to and including `limit`.
pub fn default_checkpoints(d: usize, limit: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut c = d.max(1);
    while c <= limit {
        out.push(c);
        c *= 2;
    }
    out
}

/// Number of sampled subsets affordable with `budget` evaluations (the two endpoints included).
pub fn kernelshap_subsets_for_budget(d: usize, budget: usize, paired: bool) -> Option<usize> {
    let mut n = budget.checked_sub(2)?;
    if paired {
        n -= n % 2;
    }
    (n >= d).then_some(n)
}

/// Number of permutations affordable with `budget` evaluations.
pub fn permutations_for_budget(d: usize, budget: usize, antithetic: bool) -> Option<usize> {
    let mut n = budget.checked_sub(1)? / d.max(1);
    if antithetic {
        n -= n % 2;
    }
    (n >= 1).then_some(n)
}

fn exact_single_player(game: &CooperativeGame) -> EstimatorReport {
    let estimate = Attribution::for_game(vec![game.grand_value() - game.null_value()], game);
    EstimatorReport::finish(estimate, 2, Vec::new())
}

/// KernelSHAP: regression on subsets drawn from the Shapley kernel with uniform
/// row weights, constrained to be efficient. `checkpoints` are subset counts.
pub fn kernelshap(
    game: &CooperativeGame,
    n_subsets: usize,
    paired: bool,
    rng: &mut Rng,
    checkpoints: &[usize],
) -> Result<EstimatorReport> {
    let d = game.dimension();
    if d == 1 {
        return Ok(exact_single_player(game));
    }
    if n_subsets < d {
        return Err(Error::InvalidArgument(format!(
            "KernelSHAP needs at least d = {d} subsets, got {n_subsets}"
        )));
    }
    if paired && !n_subsets.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "paired sampling needs an even number of subsets, got {n_subsets}"
        )));
    }
    let dist = ShapleyKernelDistribution::new(d)?;
    let null = game.null_value();
    let gap = game.grand_value() - null;
    let mut normal = NormalEquations::new(d);
    let mut drawn = 0usize;

    let draw = |normal: &mut NormalEquations, drawn: &mut usize, rng: &mut Rng| {
        let s = sample_subset(&dist, rng);
        if paired {
            let c = s.complement();
            normal.add(&c, game.evaluate(&c) - null, 1.0);
            *drawn += 1;
        }
        normal.add(&s, game.evaluate(&s) - null, 1.0);
        *drawn += 1;
    };

    let mut marks: Vec<usize> = checkpoints
        .iter()
        .copied()
        .filter(|&c| c >= d && c < n_subsets && (!paired || c % 2 == 0))
        .collect();
    marks.sort_unstable();
    marks.dedup();

    let mut trajectory = Vec::new();
    for mark in marks {
        while drawn < mark {
            draw(&mut normal, &mut drawn, rng);
        }
        // an underdetermined intermediate regression is simply not recorded
        if let Ok(values) = normal.solve(gap, false) {
            trajectory.push(Checkpoint {
                evaluations: drawn + 2,
                values,
            });
        }
    }
    while drawn < n_subsets {
        draw(&mut normal, &mut drawn, rng);
    }
    let mut rounds = 0;
    let values = loop {
        match normal.solve(gap, false) {
            Ok(v) => break v,
            Err(Error::RankDeficient { .. }) if rounds < MAX_RESAMPLE_ROUNDS => {
                rounds += 1;
                let target = drawn + d + d % 2;
                while drawn < target {
                    draw(&mut normal, &mut drawn, rng);
                }
            }
            Err(e) => return Err(e),
        }
    };
    Ok(EstimatorReport::finish(
        Attribution::for_game(values, game),
        drawn + 2,
        trajectory,
    ))
}

/// KernelSHAP over every proper subset exactly once with exact kernel weights.
pub fn kernelshap_enumerated(game: &CooperativeGame) -> Result<EstimatorReport> {
    if game.dimension() == 1 {
        return Ok(exact_single_player(game));
    }
    let (normal, evaluations) = kernel_normal_equations(game)?;
    let values = normal.solve(game.grand_value() - game.null_value(), false)?;
    Ok(EstimatorReport::finish(
        Attribution::for_game(values, game),
        evaluations + 2,
        Vec::new(),
    ))
}

/// Adds the marginal contributions along `order` into `totals`.
fn walk(game: &CooperativeGame, order: &[usize], totals: &mut [f64]) {
    let d = game.dimension();
    let mut s = SubsetMask::empty(d);
    let mut prev = game.null_value();
    for (step, &i) in order.iter().enumerate() {
        s.set(i, true);
        let cur = if step + 1 == d {
            game.grand_value()
        } else {
            game.evaluate(&s)
        };
        totals[i] += cur - prev;
        prev = cur;
    }
}

/// Permutation sampling; with `antithetic`, every second permutation is the
/// reversal of the one before it. `checkpoints` are permutation counts.
pub fn permutation_shap(
    game: &CooperativeGame,
    n_permutations: usize,
    antithetic: bool,
    rng: &mut Rng,
    checkpoints: &[usize],
) -> Result<EstimatorReport> {
    if n_permutations == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    if antithetic && !n_permutations.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "antithetic sampling needs an even number of permutations, got {n_permutations}"
        )));
    }
    let d = game.dimension();
    let mut totals = vec![0.0; d];
    let mut order: Vec<usize> = (0..d).collect();
    let mut trajectory = Vec::new();
    let mut marks: Vec<usize> = checkpoints
        .iter()
        .copied()
        .filter(|&c| c >= 1 && c < n_permutations && (!antithetic || c % 2 == 0))
        .collect();
    marks.sort_unstable();
    marks.dedup();
    let mut marks = marks.into_iter().peekable();

    for k in 0..n_permutations {
        if antithetic && k % 2 == 1 {
            order.reverse();
        } else {
            order.shuffle(rng);
        }
        walk(game, &order, &mut totals);
        let done = k + 1;
        if marks.peek() == Some(&done) {
            marks.next();
            trajectory.push(Checkpoint {
                evaluations: done * d + 1,
                values: totals.iter().map(|t| t / done as f64).collect(),
            });
        }
    }
    let values = totals.iter().map(|t| t / n_permutations as f64).collect();
    Ok(EstimatorReport::finish(
        Attribution::for_game(values, game),
        n_permutations * d + 1,
        trajectory,
    ))
}

/// Average over all `d!` orderings, generated by Heap's algorithm.
pub fn permutation_shap_enumerated(game: &CooperativeGame) -> Result<EstimatorReport> {
    let d = game.dimension();
    if d > MAX_ENUMERATED_PERMUTATION_DIMENSION {
        return Err(Error::DimensionTooLarge {
            operation: "permutation_shap_enumerated",
            dimension: d,
            limit: MAX_ENUMERATED_PERMUTATION_DIMENSION,
        });
    }
    let mut totals = vec![0.0; d];
    let mut order: Vec<usize> = (0..d).collect();
    let mut counters = vec![0usize; d];
    let mut count = 1usize;
    walk(game, &order, &mut totals);
    let mut i = 1;
    while i < d {
        if counters[i] < i {
            if i % 2 == 0 {
                order.swap(0, i);
            } else {
                order.swap(counters[i], i);
            }
            walk(game, &order, &mut totals);
            count += 1;
            counters[i] += 1;
            i = 1;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    let values = totals.iter().map(|t| t / count as f64).collect();
    Ok(EstimatorReport::finish(
        Attribution::for_game(values, game),
        count * d + 1,
        Vec::new(),
    ))
}
