use serde::Serialize;

use super::model::{eval_batch, ParamGroup, Params, PreparedTriple};
use super::TrainConfig;

/// Denominator floor for the relative error, so components whose true gradient
/// is zero are judged by absolute error instead of amplified round-off.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Component {
    pub group: &'static str,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub component: Component,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub checked: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    pub failures: Vec<ComponentCheck>,
    /// Components whose perturbation crosses a ReLU, clamp or argmax boundary.
    pub excluded: Vec<Component>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn pass_rate(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients of the total loss with central differences on
/// every trainable component. Frozen groups are skipped.
pub fn grad_check(
    params: &Params,
    batch: &[PreparedTriple],
    config: &TrainConfig,
    eps: f64,
    tol: f64,
) -> GradCheckReport {
    assert!(eps > 0.0, "eps must be positive");
    let eval = |p: &Params, grads: bool| {
        eval_batch(p, batch, &config.weights, config.em, config.uni_nonneg, &config.freeze, grads)
    };
    let base = eval(params, true);
    let analytic = base.grads.expect("gradients requested");
    let near_kink: Vec<usize> = base
        .z
        .iter()
        .enumerate()
        .filter(|(_, z)| z.abs() < 10.0 * eps)
        .map(|(i, _)| i)
        .collect();

    let mut report = GradCheckReport {
        eps,
        tol,
        checked: 0,
        passed: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
        excluded: Vec::new(),
    };
    let mut probe = params.clone();
    for group in ParamGroup::ALL {
        if group.frozen(&config.freeze) {
            continue;
        }
        for index in 0..params.group(group).len() {
            let component = Component {
                group: group.name(),
                index,
            };
            let orig = params.group(group)[index];
            probe.group_mut(group)[index] = orig + eps;
            let plus = eval(&probe, false);
            probe.group_mut(group)[index] = orig - eps;
            let minus = eval(&probe, false);
            probe.group_mut(group)[index] = orig;

            let crosses = plus.patterns != base.patterns || minus.patterns != base.patterns;
            let touches_kink = near_kink
                .iter()
                .any(|&i| plus.z[i] != base.z[i] || minus.z[i] != base.z[i]);
            if crosses || touches_kink {
                report.excluded.push(component);
                continue;
            }
            let numeric = (plus.eval.total - minus.eval.total) / (2.0 * eps);
            let a = analytic.group(group)[index];
            let rel_err = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel_err);
            if rel_err <= tol {
                report.passed += 1;
            } else {
                report.failures.push(ComponentCheck {
                    component,
                    analytic: a,
                    numeric,
                    rel_err,
                });
            }
        }
    }
    report
}
