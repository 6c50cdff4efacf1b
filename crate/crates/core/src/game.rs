//! Feature subsets, cooperative games and the Shapley kernel.

use std::fmt;
use std::sync::Arc;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

const WORD_BITS: usize = 64;

/// Above this dimension kernel weights are evaluated in log space.
const LOG_SPACE_DIMENSION: usize = 30;

/// Membership vector over `d` features, packed into 64-bit words.
///
/// Bit `i` is feature `i`; for `d <= 64` the mask has an integer encoding
/// (see [`SubsetMask::from_index`]) used for enumeration and caching.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct SubsetMask {
    words: Vec<u64>,
    len: usize,
}

impl SubsetMask {
    /// The all-false mask `0`.
    pub fn empty(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(WORD_BITS)],
            len,
        }
    }

    /// The all-true mask `1`.
    pub fn full(len: usize) -> Self {
        let mut mask = Self::empty(len);
        for w in mask.words.iter_mut() {
            *w = u64::MAX;
        }
        mask.clear_padding();
        mask
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut mask = Self::empty(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                mask.set(i, true);
            }
        }
        mask
    }

    /// Mask whose bit `i` is bit `i` of `index`. Requires `len <= 64`.
    pub fn from_index(index: u64, len: usize) -> Self {
        assert!(len <= WORD_BITS, "integer encoding needs len <= 64");
        let mut mask = Self::empty(len);
        if len > 0 {
            mask.words[0] = index;
            mask.clear_padding();
        }
        mask
    }

    /// Integer encoding, available when `len <= 64`.
    pub fn index(&self) -> Option<u64> {
        match self.len {
            0 => Some(0),
            l if l <= WORD_BITS => Some(self.words[0]),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "feature index {i} out of range {}", self.len);
        self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "feature index {i} out of range {}", self.len);
        let bit = 1u64 << (i % WORD_BITS);
        if value {
            self.words[i / WORD_BITS] |= bit;
        } else {
            self.words[i / WORD_BITS] &= !bit;
        }
    }

    /// Copy of this mask with feature `i` switched on (`s + e_i`).
    pub fn with(&self, i: usize) -> Self {
        let mut out = self.clone();
        out.set(i, true);
        out
    }

    pub fn cardinality(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// `1 - s`.
    pub fn complement(&self) -> Self {
        let mut out = Self {
            words: self.words.iter().map(|w| !w).collect(),
            len: self.len,
        };
        out.clear_padding();
        out
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(move |&i| self.get(i))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    /// 0/1 indicator vector.
    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }

    fn clear_padding(&mut self) {
        let rem = self.len % WORD_BITS;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}

impl fmt::Debug for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bits: String = (0..self.len).map(|i| if self.get(i) { '1' } else { '0' }).collect();
        write!(f, "SubsetMask({bits})")
    }
}

/// `1 - s`, the complement used by paired sampling.
pub fn paired_complement(s: &SubsetMask) -> SubsetMask {
    s.complement()
}

type Evaluator = dyn Fn(&SubsetMask) -> f64 + Send + Sync;

/// A set function `v(s)` over `d` players with cached endpoints `v(0)` and `v(1)`.
#[derive(Clone)]
pub struct CooperativeGame {
    dimension: usize,
    evaluator: Arc<Evaluator>,
    null_value: f64,
    grand_value: f64,
}

impl CooperativeGame {
    pub fn new<F>(dimension: usize, evaluate: F) -> Result<Self>
    where
        F: Fn(&SubsetMask) -> f64 + Send + Sync + 'static,
    {
        if dimension == 0 {
            return Err(Error::InvalidArgument("game dimension must be positive".into()));
        }
        let null_value = evaluate(&SubsetMask::empty(dimension));
        let grand_value = evaluate(&SubsetMask::full(dimension));
        Ok(Self {
            dimension,
            evaluator: Arc::new(evaluate),
            null_value,
            grand_value,
        })
    }

    /// Game defined by a lookup table indexed by the integer mask encoding.
    pub fn from_table(dimension: usize, table: Vec<f64>) -> Result<Self> {
        if dimension > 30 || table.len() != 1usize << dimension {
            return Err(Error::InvalidArgument(format!(
                "table of length {} does not match dimension {dimension}",
                table.len()
            )));
        }
        Self::new(dimension, move |s| table[s.index().unwrap() as usize])
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn evaluate(&self, s: &SubsetMask) -> f64 {
        debug_assert_eq!(s.len(), self.dimension);
        (self.evaluator)(s)
    }

    pub fn null_value(&self) -> f64 {
        self.null_value
    }

    pub fn grand_value(&self) -> f64 {
        self.grand_value
    }

    /// The game `c * v`.
    pub fn scaled(&self, c: f64) -> Self {
        let inner = self.evaluator.clone();
        Self {
            dimension: self.dimension,
            evaluator: Arc::new(move |s| c * inner(s)),
            null_value: c * self.null_value,
            grand_value: c * self.grand_value,
        }
    }
}

impl fmt::Debug for CooperativeGame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CooperativeGame")
            .field("dimension", &self.dimension)
            .field("null_value", &self.null_value)
            .field("grand_value", &self.grand_value)
            .finish()
    }
}

fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).map(|i| ((n - i) as f64).ln() - ((i + 1) as f64).ln()).sum()
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    let mut acc = 1.0;
    for i in 0..k {
        acc = acc * (n - i) as f64 / (i + 1) as f64;
    }
    acc.round()
}

fn check_cardinality(d: usize, k: usize) -> Result<()> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("Shapley kernel needs d >= 2, got {d}")));
    }
    if k == 0 || k >= d {
        return Err(Error::InvalidArgument(format!(
            "kernel weight is infinite for cardinality {k} of {d}"
        )));
    }
    Ok(())
}

/// Natural log of the Shapley kernel weight of a single subset of size `k`.
pub fn log_kernel_weight(d: usize, k: usize) -> Result<f64> {
    check_cardinality(d, k)?;
    // canonical operand order keeps the k <-> d-k symmetry exact
    let (lo, hi) = (k.min(d - k), k.max(d - k));
    Ok(((d - 1) as f64).ln() - ln_binomial(d, k) - ((lo as f64).ln() + (hi as f64).ln()))
}

/// Unnormalized Shapley kernel weight `(d-1) / (C(d,k) k (d-k))` of one subset of size `k`.
pub fn kernel_weight(d: usize, k: usize) -> Result<f64> {
    check_cardinality(d, k)?;
    if d > LOG_SPACE_DIMENSION {
        return Ok(log_kernel_weight(d, k)?.exp());
    }
    Ok((d - 1) as f64 / (binomial(d, k) * k as f64 * (d - k) as f64))
}

/// The Shapley kernel as a distribution over masks with `0 < |s| < d`,
/// factorized into a cardinality distribution and a uniform subset of that size.
#[derive(Debug, Clone)]
pub struct ShapleyKernelDistribution {
    dimension: usize,
    /// Probability of cardinality `k` is `cardinality_weights[k - 1]`.
    cardinality_weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ShapleyKernelDistribution {
    pub fn new(dimension: usize) -> Result<Self> {
        if dimension < 2 {
            return Err(Error::InvalidArgument(format!(
                "Shapley kernel needs d >= 2, got {dimension}"
            )));
        }
        // count(k) * weight(d, k), accumulated in log space and normalized by log-sum-exp
        let logs: Vec<f64> = (1..dimension)
            .map(|k| Ok(ln_binomial(dimension, k) + log_kernel_weight(dimension, k)?))
            .collect::<Result<_>>()?;
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let mut cardinality_weights: Vec<f64> = unnorm.iter().map(|u| u / total).collect();
        // enforce exact k <-> d-k symmetry against rounding
        for k in 1..dimension {
            let (a, b) = (k - 1, dimension - k - 1);
            if a < b {
                let avg = 0.5 * (cardinality_weights[a] + cardinality_weights[b]);
                cardinality_weights[a] = avg;
                cardinality_weights[b] = avg;
            }
        }
        let mut cumulative = Vec::with_capacity(cardinality_weights.len());
        let mut acc = 0.0;
        for w in &cardinality_weights {
            acc += w;
            cumulative.push(acc);
        }
        Ok(Self {
            dimension,
            cardinality_weights,
            cumulative,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Probability of drawing a subset of cardinality `k`.
    pub fn cardinality_probability(&self, k: usize) -> f64 {
        if k == 0 || k >= self.dimension {
            0.0
        } else {
            self.cardinality_weights[k - 1]
        }
    }

    pub fn cardinality_weights(&self) -> &[f64] {
        &self.cardinality_weights
    }

    /// Normalized probability of one particular mask.
    pub fn mask_probability(&self, s: &SubsetMask) -> f64 {
        let k = s.cardinality();
        if k == 0 || k >= self.dimension {
            return 0.0;
        }
        (-ln_binomial(self.dimension, k)).exp() * self.cardinality_probability(k)
    }

    fn sample_cardinality(&self, rng: &mut Rng) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let idx = self.cumulative.partition_point(|&c| c <= u);
        idx.min(self.cardinality_weights.len() - 1) + 1
    }
}

/// Draws one mask from the Shapley kernel: a cardinality, then a uniform subset of it.
pub fn sample_subset(dist: &ShapleyKernelDistribution, rng: &mut Rng) -> SubsetMask {
    let d = dist.dimension;
    let k = dist.sample_cardinality(rng);
    let mut mask = SubsetMask::empty(d);
    for i in rand::seq::index::sample(rng, d, k) {
        mask.set(i, true);
    }
    mask
}

/// Each feature independently present with probability 1/2.
pub fn sample_uniform_subset(d: usize, rng: &mut Rng) -> SubsetMask {
    let mut mask = SubsetMask::empty(d);
    for i in 0..d {
        if rng.random::<bool>() {
            mask.set(i, true);
        }
    }
    mask
}

/// Game with an independent uniform value in `[0, 1)` for every subset.
pub fn random_table_game(d: usize, rng: &mut Rng) -> CooperativeGame {
    let table: Vec<f64> = (0..1usize << d).map(|_| rng.random::<f64>()).collect();
    CooperativeGame::from_table(d, table).expect("table matches dimension")
}

/// Game `v(s) = c + sum_i a_i s_i + sum_{i<j} b_ij s_i s_j` with standard-normal-scale
/// main effects and smaller pairwise interactions.
pub fn random_quadratic_game(d: usize, rng: &mut Rng) -> CooperativeGame {
    let offset: f64 = rng.random_range(-1.0..1.0);
    let main: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pair: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.3..0.3)).collect();
    CooperativeGame::new(d, move |s| {
        let ones: Vec<usize> = s.iter_ones().collect();
        let mut v = offset;
        for (a, &i) in ones.iter().enumerate() {
            v += main[i];
            for &j in &ones[a + 1..] {
                v += pair[i * d + j];
            }
        }
        v
    })
    .expect("positive dimension")
}

/// Classifier-like game `v(s) = sigmoid(c + sum_i a_i s_i + sum_{i<j} b_ij s_i s_j)`:
/// a probability output under feature removal, with interactions of every order.
pub fn random_logistic_game(d: usize, rng: &mut Rng) -> CooperativeGame {
    let offset: f64 = rng.random_range(-1.0..1.0);
    let main: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    let pair: Vec<f64> = (0..d * d).map(|_| rng.random_range(-0.5..0.5)).collect();
    CooperativeGame::new(d, move |s| {
        let ones: Vec<usize> = s.iter_ones().collect();
        let mut z = offset;
        for (a, &i) in ones.iter().enumerate() {
            z += main[i];
            for &j in &ones[a + 1..] {
                z += pair[i * d + j];
            }
        }
        1.0 / (1.0 + (-z).exp())
    })
    .expect("positive dimension")
}
