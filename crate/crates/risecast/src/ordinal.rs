//! Ordinal output machinery.
//!
//! The model predicts which of `n+1` ordered ranges the weekly rise falls
//! into, decomposed into `n` binary exceedance classifiers: classifier `i`
//! estimates the probability that the rise is at least the `i`-th boundary.
//! The class distribution is recovered by telescoping differences of the
//! exceedance probabilities; negative differences (non-monotone classifier
//! outputs) are clamped to zero and the distribution renormalized, which
//! never demotes the argmax among the non-negative entries.
//!
//! Training combines binary cross-entropy over the `n` classifiers with a
//! weighted multi-class cross-entropy over the recovered distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon inside every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Default weight of the multi-class cross-entropy term.
pub const DEFAULT_LAMBDA_CE: f64 = 1.0;

/// Sorted positive rise thresholds defining the ordered output ranges.
///
/// With thresholds `[c1, .., cn]` the classes are the half-open intervals
/// `[0, c1), [c1, c2), .., [cn, inf)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassBoundaries {
    thresholds: Vec<u64>,
}

impl ClassBoundaries {
    pub fn new(thresholds: Vec<u64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::DegenerateBoundaries("no thresholds".into()));
        }
        if thresholds[0] == 0 {
            return Err(Error::DegenerateBoundaries(
                "thresholds must be positive".into(),
            ));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::DegenerateBoundaries(format!(
                "thresholds must be strictly increasing, got {thresholds:?}"
            )));
        }
        Ok(ClassBoundaries { thresholds })
    }

    pub fn thresholds(&self) -> &[u64] {
        &self.thresholds
    }

    /// Number of binary classifiers (n).
    pub fn num_classifiers(&self) -> usize {
        self.thresholds.len()
    }

    /// Number of output classes (n + 1).
    pub fn num_classes(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Human-readable half-open range of a class, e.g. `[13,93)` or `[93,inf)`.
    pub fn range_label(&self, class: usize) -> String {
        let lo = if class == 0 {
            0
        } else {
            self.thresholds[class - 1]
        };
        if class == self.thresholds.len() {
            format!("[{lo},inf)")
        } else {
            format!("[{lo},{})", self.thresholds[class])
        }
    }
}

/// Derive boundaries from an observed rise distribution by nearest-rank
/// percentiles (the ceil(p*N)-th order statistic).
///
/// Boundary values are clamped to at least 1 and deduplicated upward so the
/// resulting thresholds are strictly increasing; if all raw percentile
/// values coincide the distribution cannot support distinct classes.
pub fn derive_boundaries(rises: &[u64], percentiles: &[f64]) -> Result<ClassBoundaries> {
    if rises.is_empty() {
        return Err(Error::Data("cannot derive boundaries from no rises".into()));
    }
    if percentiles.is_empty() {
        return Err(Error::Config("no percentiles given".into()));
    }
    if percentiles.iter().any(|p| !(0.0 < *p && *p < 1.0))
        || percentiles.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::Config(format!(
            "percentiles must be strictly increasing within (0, 1), got {percentiles:?}"
        )));
    }

    let mut sorted = rises.to_vec();
    sorted.sort_unstable();
    if sorted.first() == sorted.last() {
        return Err(Error::DegenerateBoundaries(format!(
            "every observed rise equals {}",
            sorted[0]
        )));
    }
    let n = sorted.len() as f64;
    let raw: Vec<u64> = percentiles
        .iter()
        .map(|p| {
            let rank = (p * n).ceil().max(1.0) as usize;
            sorted[rank.min(sorted.len()) - 1]
        })
        .collect();

    if raw.len() > 1 && raw.windows(2).all(|w| w[0] == w[1]) {
        return Err(Error::DegenerateBoundaries(format!(
            "all percentiles land on the same rise value {}",
            raw[0]
        )));
    }

    let mut thresholds = Vec::with_capacity(raw.len());
    for v in raw {
        let floor = thresholds.last().map_or(1, |&prev: &u64| prev + 1);
        thresholds.push(v.max(floor));
    }
    ClassBoundaries::new(thresholds)
}

/// The unique class whose half-open interval contains `rise`.
pub fn assign_class(rise: u64, boundaries: &ClassBoundaries) -> usize {
    boundaries
        .thresholds()
        .iter()
        .take_while(|&&c| c <= rise)
        .count()
}

/// Telescope `n` exceedance probabilities into an `n+1`-class distribution.
///
/// Raw entries are `1 - p1`, `p1 - p2`, .., `p(n-1) - pn`, `pn`; negative
/// entries are clamped to zero and the vector renormalized. The raw vector
/// always sums to exactly 1, so the clamped sum is at least 1.
pub fn to_class_distribution(binary_probs: &[f64]) -> Vec<f64> {
    let n = binary_probs.len();
    let mut raw = Vec::with_capacity(n + 1);
    raw.push(1.0 - binary_probs[0]);
    for j in 1..n {
        raw.push(binary_probs[j - 1] - binary_probs[j]);
    }
    raw.push(binary_probs[n - 1]);

    for v in &mut raw {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = raw.iter().sum();
    for v in &mut raw {
        *v /= total;
    }
    raw
}

/// Index of the largest entry, ties broken toward the lower class.
pub fn argmax_class(class_probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in class_probs.iter().enumerate().skip(1) {
        if p > class_probs[best] {
            best = i;
        }
    }
    best
}

/// The full ordinal read-out of one sample.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrdinalPrediction {
    pub binary_probs: Vec<f64>,
    pub class_probs: Vec<f64>,
    pub predicted_class: usize,
}

impl OrdinalPrediction {
    pub fn from_binary(binary_probs: Vec<f64>) -> Self {
        let class_probs = to_class_distribution(&binary_probs);
        let predicted_class = argmax_class(&class_probs);
        OrdinalPrediction {
            binary_probs,
            class_probs,
            predicted_class,
        }
    }
}

/// Binary targets for the `n` exceedance classifiers: classifier `i`
/// (0-indexed) fires iff the true class is above it.
pub fn binary_targets(true_class: usize, num_classifiers: usize) -> Vec<f64> {
    (0..num_classifiers)
        .map(|i| if true_class > i { 1.0 } else { 0.0 })
        .collect()
}

/// Loss of one sample, split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub bce_part: f64,
    pub ce_part: f64,
}

/// Summed binary cross-entropy over the classifiers plus `lambda_ce` times
/// the multi-class cross-entropy of the telescoped distribution.
pub fn combined_loss(
    binary_probs: &[f64],
    true_class: usize,
    lambda_ce: f64,
) -> Result<LossValue> {
    let n = binary_probs.len();
    if true_class > n {
        return Err(Error::Data(format!(
            "class index {true_class} out of range for {n} classifiers"
        )));
    }
    let targets = binary_targets(true_class, n);
    let mut bce = 0.0;
    for (&p, &t) in binary_probs.iter().zip(&targets) {
        bce -= t * (p + LOG_EPS).ln() + (1.0 - t) * (1.0 - p + LOG_EPS).ln();
    }
    let class_probs = to_class_distribution(binary_probs);
    let ce = -(class_probs[true_class] + LOG_EPS).ln();
    Ok(LossValue {
        total: bce + lambda_ce * ce,
        bce_part: bce,
        ce_part: ce,
    })
}
