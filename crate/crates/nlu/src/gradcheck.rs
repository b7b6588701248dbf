//! Central finite-difference verification of analytic gradients.
//!
//! Used both as a test oracle and as a user-facing CLI subcommand: any model
//! change that breaks a backward rule shows up here as a relative error far
//! above the threshold.

use crate::error::{NluError, Result};
use crate::tensor::{ParamId, ParamSet};

/// Default perturbation for central differences. Chosen where the two error
/// sources of the numeric estimate roughly balance in double precision:
/// truncation shrinks as `eps^2` while rounding noise grows as `1/eps`.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Default pass threshold on the relative error.
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Worst disagreement within one named parameter tensor.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GroupReport> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// Errors unless every group is at or below `threshold`.
    pub fn require(&self, threshold: f64) -> Result<()> {
        match self.worst() {
            Some(w) if w.max_rel_err > threshold => Err(NluError::GradCheckFailed {
                param: w.name.clone(),
                max_rel_err: w.max_rel_err,
                threshold,
            }),
            _ => Ok(()),
        }
    }
}

/// Relative error with an absolute floor. The floor keeps gradients near zero
/// from blowing the ratio up on noise that is inherent to the numeric
/// estimate, which carries absolute error around `1e-10` at the default step
/// (truncation plus rounding) no matter how small the true derivative is.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares analytic gradients against central finite differences for every
/// scalar in `params`.
///
/// `forward_backward` must populate `grad` on the parameters (it is called
/// once, after `zero_grads`); `forward` must return the loss at the current
/// parameter values without touching gradients (it is called twice per
/// scalar). Both must be deterministic for fixed parameters: any internal
/// randomness has to be re-seeded identically on every call.
pub fn grad_check<F, FB>(
    params: &mut ParamSet,
    eps: f64,
    mut forward: F,
    mut forward_backward: FB,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
    FB: FnMut(&mut ParamSet) -> Result<f64>,
{
    params.zero_grads();
    let loss = forward_backward(params)?;
    if !loss.is_finite() {
        return Err(NluError::NonFinite {
            context: "evaluating loss at the unperturbed parameters".into(),
        });
    }

    // Freeze the analytic gradients before perturbing anything.
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|(_, t)| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();

    let mut groups = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let pid = ParamId(pi);
        let n = params.get(pid).numel();
        let mut worst = GroupReport {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for idx in 0..n {
            let orig = params.get(pid).data()[idx];
            params.get_mut(pid).data_mut()[idx] = orig + eps;
            let up = forward(params)?;
            params.get_mut(pid).data_mut()[idx] = orig - eps;
            let down = forward(params)?;
            params.get_mut(pid).data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(NluError::NonFinite {
                    context: format!("perturbing {name}[{idx}] during gradient check"),
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[pi][idx];
            let e = rel_err(a, numeric);
            if e > worst.max_rel_err {
                worst.max_rel_err = e;
                worst.worst_index = idx;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        groups.push(worst);
    }
    Ok(GradCheckReport { loss, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn quadratic_at_three_gives_tiny_relative_error() {
        // f(x) = x^2 at x = 3: derivative 6, central differences
        // (f(3.0001) - f(2.9999)) / 0.0002 = 6 to ten digits
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(vec![3.0], vec![1]));
        let report = grad_check(
            &mut params,
            DEFAULT_EPS,
            |p| {
                let v = p.get(x).data()[0];
                Ok(v * v)
            },
            |p| {
                let v = p.get(x).data()[0];
                p.get_mut(x).accumulate_grad(&[2.0 * v]);
                Ok(v * v)
            },
        )
        .unwrap();
        assert_eq!(report.groups.len(), 1);
        assert!(
            report.max_rel_err() < 1e-9,
            "rel err {:.3e} should be far below 1e-9",
            report.max_rel_err()
        );
        assert!((report.groups[0].numeric - 6.0).abs() < 1e-8);
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        let mut params = ParamSet::new();
        let x = params.add("x", Tensor::from_vec(vec![1.0, -0.5], vec![2]));
        let report = grad_check(
            &mut params,
            DEFAULT_EPS,
            |p| Ok(p.get(x).data().iter().map(|v| v * v).sum()),
            |p| {
                let wrong: Vec<f64> = p.get(x).data().iter().map(|v| 2.0 * v + 0.05).collect();
                let loss = p.get(x).data().iter().map(|v| v * v).sum();
                p.get_mut(x).accumulate_grad(&wrong);
                Ok(loss)
            },
        )
        .unwrap();
        assert!(report.max_rel_err() > 1e-2, "bias of 0.05 must be detected");
        assert!(report.require(DEFAULT_THRESHOLD).is_err());
    }

    #[test]
    fn tape_built_quadratic_matches_finite_differences() {
        let mut params = ParamSet::new();
        let x = params.add(
            "theta",
            Tensor::from_vec(vec![0.7, -1.3, 2.1, 0.0], vec![1, 4]),
        );
        let run = |p: &ParamSet, want_grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let mut tape = Tape::new();
            let leaf = tape.leaf(p.get(x).data().to_vec(), vec![1, 4], true);
            let sq = tape.mul(leaf, leaf)?;
            let loss = tape.sum(sq)?;
            if want_grad {
                tape.backward(loss)?;
                return Ok((tape.scalar(loss)?, tape.grad(leaf).map(<[f64]>::to_vec)));
            }
            Ok((tape.scalar(loss)?, None))
        };
        let report = grad_check(
            &mut params,
            DEFAULT_EPS,
            |p| run(p, false).map(|(l, _)| l),
            |p| {
                let (loss, g) = run(p, true)?;
                p.get_mut(x).accumulate_grad(&g.unwrap());
                Ok(loss)
            },
        )
        .unwrap();
        assert!(report.require(DEFAULT_THRESHOLD).is_ok());
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn non_finite_loss_during_perturbation_names_the_parameter() {
        let mut params = ParamSet::new();
        // ln(x) at x = eps/2 goes to -inf when perturbed below zero
        params.add("fragile", Tensor::from_vec(vec![DEFAULT_EPS / 2.0], vec![1]));
        let err = grad_check(
            &mut params,
            DEFAULT_EPS,
            |p| Ok(p.iter().next().unwrap().1.data()[0].ln()),
            |p| {
                let v = p.iter().next().unwrap().1.data()[0];
                let g = vec![1.0 / v];
                p.iter_mut().next().unwrap().1.accumulate_grad(&g);
                Ok(v.ln())
            },
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fragile"), "error should name the parameter: {msg}");
    }
}
