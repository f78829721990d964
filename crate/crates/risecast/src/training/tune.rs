//! Hyperparameter search: Gaussian-process surrogate with expected
//! improvement.
//!
//! Search points live in the unit cube; dimensions decode to hyperparameter
//! values (log-scaled where ranges span decades, rounded where integral).
//! The first five evaluations are a Latin hypercube; after that the
//! surrogate is refit on all successful trials and the next point is the
//! expected-improvement argmax over a 1024-point random sweep of the box.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::rng::substream;

use super::{train, Hyperparams, SplitSpec};

/// Number of random (Latin hypercube) trials before the surrogate kicks in.
pub const INITIAL_DESIGN: usize = 5;
/// Candidate sweep size for maximizing expected improvement.
const EI_CANDIDATES: usize = 1024;
const GP_NOISE: f64 = 1e-6;
const GP_LENGTH_SCALE: f64 = 0.3;

// ---------------------------------------------------------------------------
// Search space
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SearchDim {
    pub name: &'static str,
    pub lo: f64,
    pub hi: f64,
    pub log: bool,
    pub integer: bool,
}

impl SearchDim {
    fn decode(&self, unit: f64) -> f64 {
        let v = if self.log {
            (self.lo.ln() + unit * (self.hi.ln() - self.lo.ln())).exp()
        } else {
            self.lo + unit * (self.hi - self.lo)
        };
        if self.integer {
            v.round()
        } else {
            v
        }
    }

    fn pinned(&self) -> bool {
        self.hi <= self.lo
    }
}

/// The tunable box. Dimensions with `lo == hi` are pinned to that value and
/// excluded from the surrogate's distance metric.
#[derive(Clone, Debug)]
pub struct SearchSpace {
    pub dims: Vec<SearchDim>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            dims: vec![
                SearchDim { name: "embed_dim", lo: 4.0, hi: 64.0, log: false, integer: true },
                SearchDim { name: "snn_depth", lo: 1.0, hi: 4.0, log: false, integer: true },
                SearchDim { name: "snn_width", lo: 16.0, hi: 256.0, log: false, integer: true },
                SearchDim { name: "dropout_rate", lo: 0.0, hi: 0.2, log: false, integer: false },
                SearchDim { name: "learning_rate", lo: 1e-4, hi: 1e-2, log: true, integer: false },
                SearchDim { name: "lambda_ce", lo: 0.0, hi: 2.0, log: false, integer: false },
            ],
        }
    }
}

impl SearchSpace {
    /// Apply a unit-cube point to a base configuration.
    pub fn decode(&self, unit: &[f64], base: &Hyperparams) -> Result<Hyperparams> {
        if unit.len() != self.dims.len() {
            return Err(Error::Tuning(format!(
                "point has {} coordinates for {} dimensions",
                unit.len(),
                self.dims.len()
            )));
        }
        let mut hp = base.clone();
        for (dim, &u) in self.dims.iter().zip(unit) {
            let v = if dim.pinned() { dim.lo } else { dim.decode(u) };
            match dim.name {
                "embed_dim" => hp.embed_dim = v as usize,
                "snn_depth" => hp.snn_depth = v as usize,
                "snn_width" => hp.snn_width = v as usize,
                "dropout_rate" => hp.dropout_rate = v,
                "learning_rate" => hp.learning_rate = v,
                "lambda_ce" => hp.lambda_ce = v,
                other => {
                    return Err(Error::Tuning(format!("unknown search dimension {other:?}")))
                }
            }
        }
        Ok(hp)
    }

    fn active(&self) -> Vec<usize> {
        self.dims
            .iter()
            .enumerate()
            .filter(|(_, d)| !d.pinned())
            .map(|(i, _)| i)
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Gaussian process surrogate
// ---------------------------------------------------------------------------

/// Exact GP regression with a shared-length-scale RBF kernel over the
/// active dimensions and a fixed noise floor.
pub struct GpSurrogate {
    points: Vec<Vec<f64>>,
    y_centered: Vec<f64>,
    y_mean: f64,
    signal_var: f64,
    noise_var: f64,
    length_scale: f64,
    chol: Vec<f64>,
    alpha: Vec<f64>,
    n: usize,
}

fn rbf(a: &[f64], b: &[f64], signal_var: f64, length_scale: f64) -> f64 {
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        d2 += d * d;
    }
    signal_var * (-0.5 * d2 / (length_scale * length_scale)).exp()
}

/// Dense Cholesky factorization (lower triangular); fails on non-PD input.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Some(l)
}

fn solve_lower(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            x[i] -= l[i * n + k] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

fn solve_upper_t(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    // Solves L^T x = b given lower-triangular L.
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            x[i] -= l[k * n + i] * x[k];
        }
        x[i] /= l[i * n + i];
    }
    x
}

impl GpSurrogate {
    /// Fit on observed (point, value) pairs. Points must already be
    /// restricted to active dimensions.
    pub fn fit(points: Vec<Vec<f64>>, values: Vec<f64>) -> Result<GpSurrogate> {
        if points.is_empty() || points.len() != values.len() {
            return Err(Error::Tuning(format!(
                "surrogate needs matching observations, got {} points / {} values",
                points.len(),
                values.len()
            )));
        }
        let n = points.len();
        let y_mean = values.iter().sum::<f64>() / n as f64;
        let y_centered: Vec<f64> = values.iter().map(|v| v - y_mean).collect();
        let var = y_centered.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let signal_var = var.max(1e-4);

        let mut kernel = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                kernel[i * n + j] = rbf(&points[i], &points[j], signal_var, GP_LENGTH_SCALE);
            }
        }
        // Positive definiteness via noise plus escalating jitter.
        let mut jitter = 1e-8;
        let chol = loop {
            let mut k = kernel.clone();
            for i in 0..n {
                k[i * n + i] += GP_NOISE + jitter;
            }
            if let Some(l) = cholesky(&k, n) {
                break l;
            }
            jitter *= 10.0;
            if jitter > 1e-2 {
                return Err(Error::Tuning(
                    "kernel matrix not positive definite even with jitter".into(),
                ));
            }
        };
        let tmp = solve_lower(&chol, &y_centered, n);
        let alpha = solve_upper_t(&chol, &tmp, n);

        Ok(GpSurrogate {
            points,
            y_centered,
            y_mean,
            signal_var,
            noise_var: GP_NOISE,
            length_scale: GP_LENGTH_SCALE,
            chol,
            alpha,
            n,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Posterior mean and standard deviation at a point.
    pub fn posterior(&self, point: &[f64]) -> (f64, f64) {
        let k_star: Vec<f64> = self
            .points
            .iter()
            .map(|p| rbf(p, point, self.signal_var, self.length_scale))
            .collect();
        let mean = self.y_mean
            + k_star
                .iter()
                .zip(&self.alpha)
                .map(|(k, a)| k * a)
                .sum::<f64>();
        let v = solve_lower(&self.chol, &k_star, self.n);
        let explained: f64 = v.iter().map(|x| x * x).sum();
        let var = (self.signal_var - explained).max(0.0) + self.noise_var;
        (mean, var.sqrt())
    }

    /// Largest observed value (the incumbent for improvement).
    pub fn best_observed(&self) -> f64 {
        self.y_centered
            .iter()
            .map(|v| v + self.y_mean)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

// Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Expected improvement of a candidate over the incumbent `best_so_far`,
/// for maximization. Zero when the posterior is certain.
pub fn expected_improvement(surrogate: &GpSurrogate, point: &[f64], best_so_far: f64) -> f64 {
    let (mean, std) = surrogate.posterior(point);
    expected_improvement_from_moments(mean, std, best_so_far)
}

pub fn expected_improvement_from_moments(mean: f64, std: f64, best_so_far: f64) -> f64 {
    if std <= 0.0 {
        return 0.0;
    }
    let z = (mean - best_so_far) / std;
    ((mean - best_so_far) * normal_cdf(z) + std * normal_pdf(z)).max(0.0)
}

// ---------------------------------------------------------------------------
// Bayesian optimization loop
// ---------------------------------------------------------------------------

/// What one objective evaluation reports back.
#[derive(Clone, Copy, Debug)]
pub struct TrialEval {
    pub score: f64,
    pub best_epoch: usize,
}

/// One completed (or failed) trial.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub index: usize,
    pub unit: Vec<f64>,
    pub hp: Hyperparams,
    /// None when the trial diverged.
    pub score: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub best_hp: Hyperparams,
    pub best_epochs: usize,
    pub best_score: f64,
    pub trials: Vec<TrialRecord>,
}

/// Maximize a black-box objective over the search box.
///
/// Diverged trials (a `Diverged` error from the objective) are recorded and
/// excluded from the surrogate; any other error aborts. At least
/// [`INITIAL_DESIGN`] evaluations are required.
pub fn bayes_opt<F>(
    mut objective: F,
    space: &SearchSpace,
    base: &Hyperparams,
    budget: usize,
    seed: u64,
) -> Result<TuneOutcome>
where
    F: FnMut(usize, &Hyperparams) -> Result<TrialEval>,
{
    if budget < INITIAL_DESIGN {
        return Err(Error::Tuning(format!(
            "budget {budget} is below the initial design size {INITIAL_DESIGN}"
        )));
    }
    let d = space.dims.len();
    let active = space.active();
    let mut lhs_rng = substream(seed, "tune/lhs");
    let mut ei_rng = substream(seed, "tune/ei");

    // Latin hypercube over the active dims: one stratum per initial trial.
    let mut strata: Vec<Vec<usize>> = Vec::new();
    for _ in 0..d {
        let mut order: Vec<usize> = (0..INITIAL_DESIGN).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut lhs_rng);
        strata.push(order);
    }
    let mut initial_points = Vec::with_capacity(INITIAL_DESIGN);
    for trial in 0..INITIAL_DESIGN {
        let mut unit = vec![0.5; d];
        for (dim_idx, dim_strata) in strata.iter().enumerate() {
            let u: f64 = lhs_rng.random();
            unit[dim_idx] = (dim_strata[trial] as f64 + u) / INITIAL_DESIGN as f64;
        }
        initial_points.push(unit);
    }

    let mut trials: Vec<TrialRecord> = Vec::with_capacity(budget);
    let evaluate = |index: usize,
                        unit: Vec<f64>,
                        objective: &mut F,
                        trials: &mut Vec<TrialRecord>|
     -> Result<()> {
        let hp = space.decode(&unit, base)?;
        match objective(index, &hp) {
            Ok(eval) => trials.push(TrialRecord {
                index,
                unit,
                hp,
                score: Some(eval.score),
                best_epoch: Some(eval.best_epoch),
            }),
            Err(Error::Diverged { .. }) => trials.push(TrialRecord {
                index,
                unit,
                hp,
                score: None,
                best_epoch: None,
            }),
            Err(e) => return Err(e),
        }
        Ok(())
    };

    for (i, unit) in initial_points.into_iter().enumerate() {
        evaluate(i, unit, &mut objective, &mut trials)?;
    }

    for index in INITIAL_DESIGN..budget {
        let observed: Vec<(&Vec<f64>, f64)> = trials
            .iter()
            .filter_map(|t| t.score.map(|s| (&t.unit, s)))
            .collect();

        let proposal = if observed.len() >= 2 {
            let points: Vec<Vec<f64>> = observed
                .iter()
                .map(|(u, _)| active.iter().map(|&i| u[i]).collect())
                .collect();
            let values: Vec<f64> = observed.iter().map(|(_, s)| *s).collect();
            let surrogate = GpSurrogate::fit(points, values)?;
            let incumbent = surrogate.best_observed();

            let mut best_unit: Option<Vec<f64>> = None;
            let mut best_ei = f64::NEG_INFINITY;
            for _ in 0..EI_CANDIDATES {
                let unit: Vec<f64> = (0..d).map(|_| ei_rng.random::<f64>()).collect();
                let projected: Vec<f64> = active.iter().map(|&i| unit[i]).collect();
                let ei = expected_improvement(&surrogate, &projected, incumbent);
                if ei > best_ei {
                    best_ei = ei;
                    best_unit = Some(unit);
                }
            }
            best_unit.expect("at least one candidate")
        } else {
            (0..d).map(|_| ei_rng.random::<f64>()).collect()
        };

        evaluate(index, proposal, &mut objective, &mut trials)?;
    }

    let best = trials
        .iter()
        .filter(|t| t.score.is_some())
        .max_by(|a, b| a.score.unwrap().total_cmp(&b.score.unwrap()))
        .ok_or_else(|| Error::Tuning("all trials diverged".into()))?;

    Ok(TuneOutcome {
        best_hp: best.hp.clone(),
        best_epochs: best.best_epoch.unwrap_or(1),
        best_score: best.score.unwrap(),
        trials: trials.clone(),
    })
}

/// Tune on a dataset: each trial is a full step-one training run scored by
/// its best validation accuracy.
pub fn tune(
    dataset: &Dataset,
    split: &SplitSpec,
    base: &Hyperparams,
    space: &SearchSpace,
    budget: usize,
    seed: u64,
) -> Result<TuneOutcome> {
    bayes_opt(
        |index, hp| {
            let trial_seed = seed
                .wrapping_mul(0x100000001b3)
                .wrapping_add(index as u64);
            let outcome = train(dataset, split, hp, trial_seed)?;
            Ok(TrialEval {
                score: outcome.report.best_val_accuracy,
                best_epoch: outcome.report.best_epoch,
            })
        },
        space,
        base,
        budget,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gp_reproduces_observations_within_noise() {
        let points = vec![vec![0.1], vec![0.5], vec![0.9]];
        let values = vec![0.3, 0.8, 0.5];
        let gp = GpSurrogate::fit(points.clone(), values.clone()).unwrap();
        for (p, v) in points.iter().zip(&values) {
            let (mean, std) = gp.posterior(p);
            assert!((mean - v).abs() < 1e-3, "mean {mean} vs {v}");
            assert!(std < 0.05, "posterior std {std} at an observation");
        }
    }

    #[test]
    fn gp_posterior_matches_hand_algebra_on_three_points() {
        // Independent route: solve the 3x3 system with explicit inversion.
        let points = [[0.2], [0.4], [0.7]];
        let values = [0.1, 0.6, 0.2];
        let gp = GpSurrogate::fit(
            points.iter().map(|p| p.to_vec()).collect(),
            values.to_vec(),
        )
        .unwrap();

        let y_mean: f64 = values.iter().sum::<f64>() / 3.0;
        let centered: Vec<f64> = values.iter().map(|v| v - y_mean).collect();
        let var = centered.iter().map(|v| v * v).sum::<f64>() / 3.0;
        let sig = var.max(1e-4);
        let k = |a: f64, b: f64| sig * (-0.5 * (a - b) * (a - b) / (0.3 * 0.3)).exp();
        let mut m = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = k(points[i][0], points[j][0]);
            }
            m[i][i] += GP_NOISE + 1e-8;
        }
        // 3x3 inverse by adjugate.
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        let mut inv = [[0.0f64; 3]; 3];
        inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
        inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
        inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
        inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
        inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
        inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
        inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
        inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
        inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;

        let probe = [0.55];
        let ks: Vec<f64> = (0..3).map(|i| k(points[i][0], probe[0])).collect();
        let alpha: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| inv[i][j] * centered[j]).sum())
            .collect();
        let want_mean: f64 = y_mean + ks.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();

        let (mean, _) = gp.posterior(&probe);
        assert!((mean - want_mean).abs() < 1e-9, "{mean} vs {want_mean}");
    }

    #[test]
    fn ei_spot_values() {
        // No uncertainty, no improvement.
        assert_eq!(expected_improvement_from_moments(0.5, 0.0, 0.5), 0.0);
        // mean at incumbent, unit std: EI = pdf(0).
        let ei = expected_improvement_from_moments(0.5, 1.0, 0.5);
        assert!((ei - 0.3989).abs() < 1e-4, "{ei}");
        // Certain improvement of 2 in the vanishing-std limit.
        let ei = expected_improvement_from_moments(2.5, 1e-9, 0.5);
        assert!((ei - 2.0).abs() < 1e-6, "{ei}");
    }

    #[test]
    fn ei_is_nonnegative_everywhere() {
        let gp = GpSurrogate::fit(vec![vec![0.2], vec![0.8]], vec![0.1, 0.9]).unwrap();
        let best = gp.best_observed();
        for i in 0..100 {
            let p = [i as f64 / 99.0];
            assert!(expected_improvement(&gp, &p, best) >= 0.0);
        }
    }

    #[test]
    fn budget_below_initial_design_is_rejected() {
        let space = SearchSpace::default();
        let base = Hyperparams::default();
        let err = bayes_opt(
            |_, _| {
                Ok(TrialEval {
                    score: 0.0,
                    best_epoch: 1,
                })
            },
            &space,
            &base,
            3,
            1,
        );
        assert!(err.is_err());
    }

    #[test]
    fn one_dimensional_objective_is_located() {
        // All dims pinned except dropout_rate in [0, 1]; the objective
        // peaks at 0.5.
        let space = SearchSpace {
            dims: vec![
                SearchDim { name: "embed_dim", lo: 8.0, hi: 8.0, log: false, integer: true },
                SearchDim { name: "snn_depth", lo: 2.0, hi: 2.0, log: false, integer: true },
                SearchDim { name: "snn_width", lo: 32.0, hi: 32.0, log: false, integer: true },
                SearchDim { name: "dropout_rate", lo: 0.0, hi: 1.0, log: false, integer: false },
                SearchDim { name: "learning_rate", lo: 1e-3, hi: 1e-3, log: true, integer: false },
                SearchDim { name: "lambda_ce", lo: 1.0, hi: 1.0, log: false, integer: false },
            ],
        };
        let base = Hyperparams::default();
        let outcome = bayes_opt(
            |_, hp| {
                let x = hp.dropout_rate;
                Ok(TrialEval {
                    score: -(x - 0.5) * (x - 0.5),
                    best_epoch: 1,
                })
            },
            &space,
            &base,
            30,
            42,
        )
        .unwrap();
        assert_eq!(outcome.trials.len(), 30);
        assert!(
            (outcome.best_hp.dropout_rate - 0.5).abs() < 0.05,
            "found {}",
            outcome.best_hp.dropout_rate
        );

        // The searched optimum beats the random initial design.
        let init_best = outcome.trials[..INITIAL_DESIGN]
            .iter()
            .filter_map(|t| t.score)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(outcome.best_score >= init_best);
    }

    #[test]
    fn diverged_trials_are_skipped_not_fatal() {
        let space = SearchSpace::default();
        let base = Hyperparams::default();
        let outcome = bayes_opt(
            |index, _| {
                if index % 2 == 0 {
                    Err(Error::Diverged {
                        epoch: 1,
                        detail: "test".into(),
                    })
                } else {
                    Ok(TrialEval {
                        score: index as f64,
                        best_epoch: 2,
                    })
                }
            },
            &space,
            &base,
            8,
            7,
        )
        .unwrap();
        assert_eq!(outcome.trials.len(), 8);
        assert_eq!(outcome.trials.iter().filter(|t| t.score.is_none()).count(), 4);
        assert_eq!(outcome.best_score, 7.0);
    }

    #[test]
    fn all_diverged_is_a_tuning_error() {
        let space = SearchSpace::default();
        let base = Hyperparams::default();
        let err = bayes_opt(
            |_, _| {
                Err(Error::Diverged {
                    epoch: 1,
                    detail: "test".into(),
                })
            },
            &space,
            &base,
            5,
            7,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Tuning(_)));
    }
}
