//! Finite-difference gradient oracle.
//!
//! Compares a closure's analytic gradients against central differences,
//! element by element, and reports the worst relative error per parameter.
//! The closure must be deterministic (dropout disabled or seed-pinned);
//! the checker runs two loss-only evaluations first and refuses to proceed
//! if they disagree bitwise.

use crate::error::{Error, Result};

use super::ParamSet;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Both gradients below this magnitude count as agreeing (zero vs noise).
    pub absolute_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            absolute_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat element index of the worst disagreement.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    if a.abs() < floor && n.abs() < floor {
        0.0
    } else {
        (a - n).abs() / (a.abs() + n.abs()).max(floor)
    }
}

/// Check every trainable parameter element of `params`.
///
/// The closure computes the scalar loss; when `grads` is true it must also
/// accumulate analytic gradients into the parameter set (which arrives
/// zeroed). Loss-only calls must not touch gradients.
pub fn check_gradients<F>(
    params: &mut ParamSet,
    mut loss_fn: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamSet, bool) -> Result<f64>,
{
    let l1 = loss_fn(params, false)?;
    let l2 = loss_fn(params, false)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::Oracle(format!(
            "closure is not deterministic: two forward passes gave {l1} and {l2}"
        )));
    }

    params.zero_grads();
    loss_fn(params, true)?;
    let analytic: Vec<(String, Vec<f64>, bool)> = params
        .iter()
        .map(|p| (p.name.clone(), p.grad.data().to_vec(), p.trainable))
        .collect();

    let mut reports = Vec::new();
    let mut overall: f64 = 0.0;
    for (pi, (name, grads, trainable)) in analytic.iter().enumerate() {
        if !trainable {
            continue;
        }
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for (j, &analytic_grad) in grads.iter().enumerate() {
            let orig = params.iter().nth(pi).unwrap().value.data()[j];

            set_elem(params, pi, j, orig + cfg.step);
            let plus = loss_fn(params, false)?;
            set_elem(params, pi, j, orig - cfg.step);
            let minus = loss_fn(params, false)?;
            set_elem(params, pi, j, orig);

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = rel_err(analytic_grad, numeric, cfg.absolute_floor);
            if err > worst.max_rel_err {
                worst.max_rel_err = err;
                worst.worst_index = j;
                worst.analytic_at_worst = analytic_grad;
                worst.numeric_at_worst = numeric;
            }
        }
        overall = overall.max(worst.max_rel_err);
        reports.push(worst);
    }

    Ok(GradCheckReport {
        params: reports,
        max_rel_err: overall,
    })
}

fn set_elem(params: &mut ParamSet, param_index: usize, elem: usize, value: f64) {
    let p = params.iter_mut().nth(param_index).unwrap();
    p.value.data_mut()[elem] = value;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Activation, Parameter, Tape, Tensor};
    use crate::rng::substream;
    use rand::Rng;

    #[test]
    fn quadratic_scalar_matches() {
        let mut params = ParamSet::new();
        params
            .add(Parameter::new("w", Tensor::scalar(3.0)))
            .unwrap();
        let report = check_gradients(
            &mut params,
            |ps, grads| {
                let w = ps.get("w")?.value.data()[0];
                if grads {
                    ps.get_mut("w")?.grad.data_mut()[0] += 2.0 * w;
                }
                Ok(w * w)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "max {}", report.max_rel_err);
        assert!((report.params[0].analytic_at_worst - 6.0).abs() < 1e-9);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut params = ParamSet::new();
        params
            .add(Parameter::new("w", Tensor::scalar(3.0)))
            .unwrap();
        let report = check_gradients(
            &mut params,
            |ps, grads| {
                let w = ps.get("w")?.value.data()[0];
                if grads {
                    ps.get_mut("w")?.grad.data_mut()[0] += 2.0 * w + 0.1;
                }
                Ok(w * w)
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passes(1e-5));
        assert!(report.max_rel_err > 1e-3);
    }

    #[test]
    fn nondeterministic_closure_is_rejected() {
        let mut params = ParamSet::new();
        params
            .add(Parameter::new("w", Tensor::scalar(1.0)))
            .unwrap();
        let mut calls = 0usize;
        let err = check_gradients(
            &mut params,
            |_, _| {
                calls += 1;
                Ok(calls as f64)
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("not deterministic"));
    }

    /// Every primitive op's analytic gradient agrees with central
    /// differences on randomized inputs.
    #[test]
    fn primitive_ops_match_finite_differences() {
        let mut rng = substream(11, "gradcheck-ops");
        for trial in 0..100 {
            let op_pick = trial % 11;
            let mut params = ParamSet::new();
            let rand_tensor = |shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
                Tensor::new(shape, data).unwrap()
            };

            match op_pick {
                0 => {
                    params
                        .add(Parameter::new("a", rand_tensor(vec![3, 4], &mut rng)))
                        .unwrap();
                    params
                        .add(Parameter::new("b", rand_tensor(vec![4, 2], &mut rng)))
                        .unwrap();
                }
                1 | 2 | 3 | 7 | 9 => {
                    params
                        .add(Parameter::new("a", rand_tensor(vec![3, 4], &mut rng)))
                        .unwrap();
                    params
                        .add(Parameter::new("b", rand_tensor(vec![3, 4], &mut rng)))
                        .unwrap();
                }
                4 => {
                    params
                        .add(Parameter::new("a", rand_tensor(vec![6, 3], &mut rng)))
                        .unwrap();
                    params
                        .add(Parameter::new("b", rand_tensor(vec![2, 3], &mut rng)))
                        .unwrap();
                }
                5 | 6 | 8 | 10 => {
                    params
                        .add(Parameter::new("a", rand_tensor(vec![4, 3], &mut rng)))
                        .unwrap();
                }
                _ => unreachable!(),
            }

            let closure = |ps: &mut ParamSet, grads: bool| -> crate::Result<f64> {
                let mut tape = Tape::new();
                let a = tape.param(ps.get("a")?);
                let out = match op_pick {
                    0 => {
                        let b = tape.param(ps.get("b")?);
                        tape.matmul(a, b)?
                    }
                    1 => {
                        let b = tape.param(ps.get("b")?);
                        tape.add(a, b)?
                    }
                    2 => {
                        let b = tape.param(ps.get("b")?);
                        tape.mul(a, b)?
                    }
                    3 => {
                        let b = tape.param(ps.get("b")?);
                        tape.rowwise_dot(a, b)?
                    }
                    4 => {
                        let b = tape.param(ps.get("b")?);
                        let prod = tape.mul_tiled_rows(a, b)?;
                        tape.sum_row_groups(prod, 3)?
                    }
                    5 => tape.activation(a, Activation::Selu)?,
                    6 => tape.activation(a, Activation::Tanh)?,
                    7 => {
                        let b = tape.param(ps.get("b")?);
                        let cat = tape.concat_cols(&[a, b])?;
                        tape.activation(cat, Activation::Sigmoid)?
                    }
                    8 => {
                        // Exercise clamp / row ops away from the kink.
                        let shifted = tape.scale(a, 3.0)?;
                        let clamped = tape.clamp_min(shifted, 0.5)?;
                        let s = tape.row_sum(clamped)?;
                        tape.div_row_broadcast(clamped, s)?
                    }
                    9 => {
                        let b = tape.param(ps.get("b")?);
                        let h = tape.mul(a, b)?;
                        let sig = tape.activation(h, Activation::Sigmoid)?;
                        tape.ln_eps(sig, 1e-12)?
                    }
                    10 => {
                        // Seed-pinned mask keeps the closure deterministic.
                        let mut drop_rng = substream(trial as u64, "gradcheck-dropout");
                        tape.alpha_dropout(a, 0.3, true, &mut drop_rng)?
                    }
                    _ => unreachable!(),
                };
                // Weighted mean keeps per-element gradients distinct.
                let loss = tape.mean_all(out)?;
                if grads {
                    tape.backward(loss)?;
                    ps.absorb_grads(&tape)?;
                }
                Ok(tape.value(loss).data()[0])
            };

            let report = check_gradients(&mut params, closure, &GradCheckConfig::default())
                .unwrap_or_else(|e| panic!("trial {trial}: {e}"));
            assert!(
                report.max_rel_err < 1e-5,
                "trial {trial} op {op_pick}: rel err {}",
                report.max_rel_err
            );
        }
    }
}
