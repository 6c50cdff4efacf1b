//! Ground-truth Shapley values: brute-force enumeration of marginal
//! contributions and the constrained weighted-least-squares characterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{kernel_weight, CooperativeGame, SubsetMask};
use crate::linalg;

pub const MAX_BRUTE_FORCE_DIMENSION: usize = 24;
pub const MAX_WLS_FULL_DIMENSION: usize = 20;

/// Diagonal loading applied to the normal matrix when the caller opts in.
pub const RIDGE: f64 = 1e-10;

/// Per-feature Shapley estimates for one (x, y) together with the game endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub values: Vec<f64>,
    pub null_value: f64,
    pub grand_value: f64,
    pub class_index: usize,
}

impl Attribution {
    pub fn new(values: Vec<f64>, null_value: f64, grand_value: f64) -> Self {
        Self {
            values,
            null_value,
            grand_value,
            class_index: 0,
        }
    }

    pub fn for_game(values: Vec<f64>, game: &CooperativeGame) -> Self {
        Self::new(values, game.null_value(), game.grand_value())
    }

    pub fn with_class(mut self, class_index: usize) -> Self {
        self.class_index = class_index;
        self
    }

    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    /// `v(1) - v(0) - 1'phi`.
    pub fn efficiency_gap(&self) -> f64 {
        self.grand_value - self.null_value - self.values.iter().sum::<f64>()
    }

    pub fn l2_distance(&self, other: &[f64]) -> f64 {
        l2_distance(&self.values, other)
    }

    pub fn l1_distance(&self, other: &[f64]) -> f64 {
        self.values.iter().zip(other).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn linf_distance(&self, other: &[f64]) -> f64 {
        self.values
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_dimension(game: &CooperativeGame, limit: usize, operation: &'static str) -> Result<usize> {
    let d = game.dimension();
    if d > limit {
        return Err(Error::DimensionTooLarge {
            operation,
            dimension: d,
            limit,
        });
    }
    Ok(d)
}

/// Evaluates `v` on every subset, indexed by integer mask encoding.
pub fn enumerate_values(game: &CooperativeGame) -> Vec<f64> {
    let d = game.dimension();
    (0..1u64 << d)
        .map(|idx| match idx {
            0 => game.null_value(),
            i if i == (1u64 << d) - 1 => game.grand_value(),
            i => game.evaluate(&SubsetMask::from_index(i, d)),
        })
        .collect()
}

/// Exact Shapley values by enumerating all `2^d` subsets once.
pub fn shapley_brute_force(game: &CooperativeGame) -> Result<Attribution> {
    let d = check_dimension(game, MAX_BRUTE_FORCE_DIMENSION, "shapley_brute_force")?;
    let values = enumerate_values(game);
    Ok(Attribution::for_game(shapley_from_table(d, &values), game))
}

/// Shapley values of a game given as a full value table.
pub fn shapley_from_table(d: usize, values: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), 1usize << d);
    // weight of a coalition of size k not containing i: 1 / (d * C(d-1, k))
    let mut coalition_weight = vec![0.0; d];
    let mut binom = 1.0f64;
    for (k, w) in coalition_weight.iter_mut().enumerate() {
        *w = 1.0 / (d as f64 * binom);
        binom = binom * (d - 1 - k) as f64 / (k + 1) as f64;
    }
    let mut phi = vec![0.0; d];
    for (idx, &v) in values.iter().enumerate() {
        let w = coalition_weight.get(idx.count_ones() as usize).copied().unwrap_or(0.0);
        for (i, p) in phi.iter_mut().enumerate() {
            if idx >> i & 1 == 0 {
                *p += w * (values[idx | 1 << i] - v);
            }
        }
    }
    phi
}

/// Accumulated weighted normal equations `A = sum w s s'`, `b = sum w s (v(s) - v(0))`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    dimension: usize,
    gram: Vec<f64>,
    moment: Vec<f64>,
    total_weight: f64,
    rows: usize,
}

impl NormalEquations {
    pub fn new(dimension: usize) -> Self {
        Self {
            dimension,
            gram: vec![0.0; dimension * dimension],
            moment: vec![0.0; dimension],
            total_weight: 0.0,
            rows: 0,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Adds one regression row; `target` is `v(s) - v(0)`.
    pub fn add(&mut self, s: &SubsetMask, target: f64, weight: f64) {
        debug_assert_eq!(s.len(), self.dimension);
        let d = self.dimension;
        let ones: Vec<usize> = s.iter_ones().collect();
        for &i in &ones {
            self.moment[i] += weight * target;
            for &j in &ones {
                self.gram[i * d + j] += weight;
            }
        }
        self.total_weight += weight;
        self.rows += 1;
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.moment.iter_mut().zip(&other.moment) {
            *a += b;
        }
        self.total_weight += other.total_weight;
        self.rows += other.rows;
    }

    /// Minimizer subject to `1'phi = gap`, from the Lagrangian (KKT) system
    /// `[A 1; 1' 0] [phi; nu] = [b; gap]`.
    pub fn solve(&self, gap: f64, ridge: bool) -> Result<Vec<f64>> {
        let d = self.dimension;
        if self.total_weight <= 0.0 {
            return Err(Error::RankDeficient {
                column: 0,
                size: d + 1,
                pivot: 0.0,
            });
        }
        let n = d + 1;
        let scale = 1.0 / self.total_weight;
        let mut kkt = vec![0.0; n * n];
        let mut rhs = vec![0.0; n];
        for i in 0..d {
            for j in 0..d {
                kkt[i * n + j] = self.gram[i * d + j] * scale;
            }
            if ridge {
                kkt[i * n + i] += RIDGE;
            }
            kkt[i * n + d] = 1.0;
            kkt[d * n + i] = 1.0;
            rhs[i] = self.moment[i] * scale;
        }
        rhs[d] = gap;
        let mut solution = linalg::solve(&kkt, &rhs, n)?;
        solution.truncate(d);
        Ok(solution)
    }
}

/// Minimizes `sum_j w_j (values_j - null - s_j' phi)^2` subject to `1'phi = grand - null`.
pub fn solve_constrained_wls(
    masks: &[SubsetMask],
    values: &[f64],
    weights: &[f64],
    grand: f64,
    null: f64,
    ridge: bool,
) -> Result<Vec<f64>> {
    if masks.is_empty() {
        return Err(Error::InvalidArgument("no regression rows".into()));
    }
    if values.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            expected: masks.len(),
            actual: values.len(),
        });
    }
    if weights.len() != masks.len() {
        return Err(Error::ShapeMismatch {
            expected: masks.len(),
            actual: weights.len(),
        });
    }
    if weights.iter().any(|&w| w.is_nan() || w <= 0.0) {
        return Err(Error::InvalidArgument("weights must be positive".into()));
    }
    let d = masks[0].len();
    let mut normal = NormalEquations::new(d);
    for ((s, &v), &w) in masks.iter().zip(values).zip(weights) {
        if s.len() != d {
            return Err(Error::ShapeMismatch {
                expected: d,
                actual: s.len(),
            });
        }
        normal.add(s, v - null, w);
    }
    normal.solve(grand - null, ridge)
}

/// Normal equations over every proper subset with exact Shapley kernel weights.
pub fn kernel_normal_equations(game: &CooperativeGame) -> Result<(NormalEquations, usize)> {
    let d = check_dimension(game, MAX_WLS_FULL_DIMENSION, "shapley_wls_full")?;
    if d < 2 {
        return Err(Error::InvalidArgument(
            "the weighted least squares characterization needs d >= 2".into(),
        ));
    }
    let weights: Vec<f64> = (1..d).map(|k| kernel_weight(d, k)).collect::<Result<_>>()?;
    let mut normal = NormalEquations::new(d);
    let null = game.null_value();
    let mut evaluations = 0;
    for idx in 1..(1u64 << d) - 1 {
        let s = SubsetMask::from_index(idx, d);
        let w = weights[s.cardinality() - 1];
        normal.add(&s, game.evaluate(&s) - null, w);
        evaluations += 1;
    }
    Ok((normal, evaluations))
}

/// Shapley values as the solution of the kernel-weighted least squares problem
/// over all proper subsets.
pub fn shapley_wls_full(game: &CooperativeGame) -> Result<Attribution> {
    let (normal, _) = kernel_normal_equations(game)?;
    let phi = normal.solve(game.grand_value() - game.null_value(), false)?;
    Ok(Attribution::for_game(phi, game))
}
