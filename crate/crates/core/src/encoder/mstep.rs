//! Hyperparameter updates by gradient ascent with backtracking.

use super::bound::bound_and_grad;
use super::{InducingSet, TraceEvent, TrainingSet};
use crate::error::Result;
use crate::kernel::{AzimuthMetric, LogParams, RqHyperparams, RqKernel, PARAM_COUNT};

const MAX_HALVINGS: usize = 10;

/// Settings of one M-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MStepConfig {
    pub iterations: usize,
    /// Length of the first trial step in log-parameter space.
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub hyperparams: RqHyperparams,
    /// One event per accepted step.
    pub trace: Vec<TraceEvent>,
    /// Set when a numerical failure cut the optimization short.
    pub warning: Option<String>,
    pub final_gradient: [f64; PARAM_COUNT],
}

/// Gradient ascent of the bound over the log hyperparameters.
pub fn optimize_hyperparams(
    data: &TrainingSet,
    inducing: &InducingSet,
    hp: &RqHyperparams,
    cfg: &MStepConfig,
) -> Result<MStepOutcome> {
    optimize_with(data, inducing, hp, AzimuthMetric::Raw, cfg)
}

pub(crate) fn optimize_with(
    data: &TrainingSet,
    inducing: &InducingSet,
    hp: &RqHyperparams,
    metric: AzimuthMetric,
    cfg: &MStepConfig,
) -> Result<MStepOutcome> {
    let locs = inducing.locations();
    let mut current = *hp;
    let mut trace = Vec::new();
    let mut warning = None;
    if cfg.iterations == 0 {
        return Ok(MStepOutcome {
            hyperparams: current,
            trace,
            warning,
            final_gradient: [0.0; PARAM_COUNT],
        });
    }
    let (mut f, mut grad) = bound_and_grad(data, locs, &RqKernel::with_metric(current, metric))?;

    'outer: for _ in 0..cfg.iterations {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            warning = Some("non-finite gradient".to_string());
            break;
        }
        if norm == 0.0 {
            break;
        }
        let base = current.log_params();
        let mut scale = cfg.step_size / norm.max(1.0);
        for _ in 0..=MAX_HALVINGS {
            let mut trial = base;
            for (t, g) in trial.0.iter_mut().zip(grad) {
                *t += scale * g;
            }
            if let Some(candidate) = evaluate(data, locs, trial, metric) {
                if candidate.0 >= f {
                    trace.push(TraceEvent {
                        before: f,
                        after: candidate.0,
                    });
                    current = candidate.2;
                    f = candidate.0;
                    grad = candidate.1;
                    continue 'outer;
                }
            }
            scale *= 0.5;
        }
        log::debug!("m-step stalled after {} accepted steps", trace.len());
        break;
    }
    if warning.is_some() {
        log::warn!("m-step stopped early: {}", warning.as_deref().unwrap_or(""));
    }
    Ok(MStepOutcome {
        hyperparams: current,
        trace,
        warning,
        final_gradient: grad,
    })
}

/// Bound and gradient at trial parameters; `None` on any numerical failure.
fn evaluate(
    data: &TrainingSet,
    locs: &[crate::geometry::Direction],
    lp: LogParams,
    metric: AzimuthMetric,
) -> Option<(f64, [f64; PARAM_COUNT], RqHyperparams)> {
    let hp = lp.to_hyperparams().ok()?;
    let (f, g) = bound_and_grad(data, locs, &RqKernel::with_metric(hp, metric)).ok()?;
    (f.is_finite() && g.iter().all(|v| v.is_finite())).then_some((f, g, hp))
}
