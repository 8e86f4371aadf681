//! Priority-weighted greedy mitigation.
//!
//! Each step audits the current prompt set, scores the overall bias `τ` as
//! the priority-weighted sum of deviations, and stops once `τ < ε`.
//! Otherwise it picks the axis whose sensitivity row (restricted to the
//! priority axes) best aligns with the priorities, mitigates it by prompt
//! modification, and repeats. Each axis is mitigated at most once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audit::{audit_matrix, person_rate, Auditor, AUDIT_STREAM};
use crate::counterfactuals::{pm_mitigate, PromptComposer, PromptSet};
use crate::error::{ConfigError, Error, Result};
use crate::metrics::bias_deviation;
use crate::model::{AuditConfig, BiasAxis, BiasDeviation, SensitivityMatrix, SIMPLEX_TOLERANCE};

/// User weights over the axes to mitigate; weights sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriorityVector {
    pub entries: BTreeMap<String, f64>,
}

impl PriorityVector {
    pub fn new(entries: BTreeMap<String, f64>) -> Result<Self, ConfigError> {
        if entries.is_empty() {
            return Err(ConfigError::single("priority vector is empty"));
        }
        if let Some((axis, w)) = entries.iter().find(|(_, w)| !w.is_finite() || **w < 0.0) {
            return Err(ConfigError::single(format!("priority weight {w} for `{axis}` is negative")));
        }
        let sum: f64 = entries.values().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(ConfigError::single(format!("priority weights sum to {sum}, expected 1")));
        }
        Ok(Self { entries })
    }

    /// Rescale weights to sum to one. Returns whether rescaling was needed.
    pub fn normalized(mut entries: BTreeMap<String, f64>) -> Result<(Self, bool), ConfigError> {
        let sum: f64 = entries.values().sum();
        if sum.is_nan() || sum <= 0.0 || entries.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ConfigError::single("priority weights must be non-negative with a positive sum"));
        }
        let rescaled = (sum - 1.0).abs() > SIMPLEX_TOLERANCE;
        if rescaled {
            for w in entries.values_mut() {
                *w /= sum;
            }
        }
        Ok((Self::new(entries)?, rescaled))
    }

    /// Parse `axis=weight,axis=weight`.
    pub fn parse_entries(spec: &str) -> Result<BTreeMap<String, f64>, ConfigError> {
        let mut entries = BTreeMap::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (axis, weight) = part
                .split_once('=')
                .ok_or_else(|| ConfigError::single(format!("priority entry `{part}` is not axis=weight")))?;
            let weight: f64 = weight
                .trim()
                .parse()
                .map_err(|_| ConfigError::single(format!("priority weight `{weight}` is not a number")))?;
            if entries.insert(axis.trim().to_string(), weight).is_some() {
                return Err(ConfigError::single(format!("axis `{axis}` listed twice in priority")));
            }
        }
        Ok(entries)
    }

    pub fn check_axes(&self, axes: &[BiasAxis]) -> Result<(), ConfigError> {
        let unknown: Vec<_> = self
            .entries
            .keys()
            .filter(|id| !axes.iter().any(|a| &a.id == *id))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::single(format!("priority references undeclared axes {unknown:?}")))
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `τ`: priority-weighted sum of normalized deviations.
pub fn bias_score(deviations: &BTreeMap<String, BiasDeviation>, p: &PriorityVector) -> Result<f64> {
    p.entries
        .iter()
        .map(|(axis, weight)| {
            deviations
                .get(axis)
                .map(|d| d.w_bar * weight)
                .ok_or_else(|| Error::Metrics(format!("no deviation for priority axis `{axis}`")))
        })
        .sum()
}

/// Deviations of every column axis in the matrix, keyed by axis id.
pub fn matrix_deviations(matrix: &SensitivityMatrix) -> BTreeMap<String, BiasDeviation> {
    matrix.col_axes.iter().cloned().zip(matrix.init.iter().copied()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub axis: String,
    /// Alignment score per row in matrix order; `None` for excluded rows.
    pub gammas: Vec<(String, Option<f64>)>,
    /// Every candidate scored `γ ≤ 0`: mitigation is predicted to hurt.
    pub stalled: bool,
}

/// Pick the row of `matrix` best aligned with `p`, over all non-excluded rows.
pub fn select_axis(matrix: &SensitivityMatrix, p: &PriorityVector, excluded: &[String]) -> Result<Selection> {
    let cols = p
        .entries
        .iter()
        .map(|(axis, w)| {
            matrix
                .col_index(axis)
                .map(|c| (c, *w))
                .ok_or_else(|| Error::Metrics(format!("priority axis `{axis}` is not a matrix column")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut best: Option<(usize, f64)> = None;
    let mut gammas = Vec::with_capacity(matrix.row_axes.len());
    for (row, axis) in matrix.row_axes.iter().enumerate() {
        if excluded.contains(axis) {
            gammas.push((axis.clone(), None));
            continue;
        }
        let gamma: f64 = cols.iter().map(|&(c, w)| matrix.value(row, c) * w).sum();
        if best.is_none_or(|(_, g)| gamma > g) {
            best = Some((row, gamma));
        }
        gammas.push((axis.clone(), Some(gamma)));
    }
    let (row, gamma) = best.ok_or_else(|| Error::Metrics("no candidate axes left to mitigate".into()))?;
    Ok(Selection {
        axis: matrix.row_axes[row].clone(),
        gammas,
        stalled: gamma <= 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Alert {
    /// Mitigating `intervened` is predicted to push priority axis `measured`
    /// away from its ideal.
    TradeOff {
        step: usize,
        intervened: String,
        measured: String,
        is_value: f64,
    },
    /// No remaining axis has a positive alignment score.
    Stall { step: usize, axis: String, gamma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BelowThreshold,
    AllAxesMitigated,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub tau: f64,
    pub selected: String,
    pub gammas: Vec<(String, Option<f64>)>,
    /// Predicted `w̄` of every column axis after mitigating `selected`.
    pub predicted_w_bar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationState {
    pub step: usize,
    pub prompt_set: PromptSet,
    pub mitigated: Vec<String>,
    pub tau_trace: Vec<f64>,
    /// Deviations of every axis at each audited step.
    pub deviation_trace: Vec<Vec<BiasDeviation>>,
    pub matrix_trace: Vec<SensitivityMatrix>,
    pub steps: Vec<StepRecord>,
    pub alerts: Vec<Alert>,
    /// Person-present share in the last audit of the current prompt set.
    pub final_person_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub priority: PriorityVector,
    pub epsilon: f64,
    /// Final `τ`.
    pub mit_amt: f64,
    pub mit_steps: usize,
    pub mit_steps_ratio: f64,
    pub converged: bool,
    pub stop_reason: StopReason,
    pub frozen_matrix: bool,
    pub state: MitigationState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntermitOptions {
    /// Reuse the first sensitivity matrix for every selection. Deviations
    /// and `τ` are still re-audited at each step.
    pub frozen_matrix: bool,
}

#[derive(Debug, thiserror::Error)]
#[error("mitigation failed at step {}: {source}", state.step)]
pub struct IntermitError {
    pub state: Box<MitigationState>,
    #[source]
    pub source: Error,
}

fn current_deviations(
    auditor: &mut dyn Auditor,
    config: &AuditConfig,
    set: &PromptSet,
) -> Result<(Vec<BiasDeviation>, Option<f64>)> {
    let sample = auditor.audit(set, AUDIT_STREAM)?;
    let deviations = config
        .axes
        .iter()
        .map(|axis| {
            let d = sample.distribution(axis)?;
            bias_deviation(&d, &config.ideal_for(axis), axis.transport(config.transport))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((deviations, person_rate(&sample)))
}

pub fn run_intermit(
    config: &AuditConfig,
    p: &PriorityVector,
    auditor: &mut dyn Auditor,
    options: IntermitOptions,
) -> Result<MitigationReport, IntermitError> {
    let composer = PromptComposer::new(config);
    let fail = |state: &MitigationState, source: Error| IntermitError {
        state: Box::new(state.clone()),
        source,
    };
    let initial = composer.initial_set().map_err(|e| IntermitError {
        state: Box::new(MitigationState {
            step: 0,
            prompt_set: PromptSet {
                variants: Vec::new(),
                provenance: crate::counterfactuals::Provenance::Initial,
            },
            mitigated: Vec::new(),
            tau_trace: Vec::new(),
            deviation_trace: Vec::new(),
            matrix_trace: Vec::new(),
            steps: Vec::new(),
            alerts: Vec::new(),
            final_person_rate: None,
        }),
        source: e,
    })?;
    let mut state = MitigationState {
        step: 0,
        prompt_set: initial,
        mitigated: Vec::new(),
        tau_trace: Vec::new(),
        deviation_trace: Vec::new(),
        matrix_trace: Vec::new(),
        steps: Vec::new(),
        alerts: Vec::new(),
        final_person_rate: None,
    };
    if let Err(e) = p.check_axes(&config.axes) {
        return Err(fail(&state, e.into()));
    }

    let stop_reason = loop {
        let (matrix, deviations) = if options.frozen_matrix && !state.matrix_trace.is_empty() {
            let (deviations, rate) =
                current_deviations(auditor, config, &state.prompt_set).map_err(|e| fail(&state, e))?;
            state.final_person_rate = rate;
            (state.matrix_trace[0].clone(), deviations)
        } else {
            let (matrix, data) = audit_matrix(auditor, config, &state.prompt_set).map_err(|e| fail(&state, e))?;
            state.final_person_rate = person_rate(&data.init);
            let deviations = matrix.init.clone();
            state.matrix_trace.push(matrix.clone());
            (matrix, deviations)
        };
        let by_axis: BTreeMap<String, BiasDeviation> =
            config.axes.iter().map(|a| a.id.clone()).zip(deviations.iter().copied()).collect();
        let tau = bias_score(&by_axis, p).map_err(|e| fail(&state, e))?;
        state.tau_trace.push(tau);
        state.deviation_trace.push(deviations);
        log::info!("step {}: tau = {tau:.4}", state.step);

        if tau < config.epsilon {
            break StopReason::BelowThreshold;
        }
        if state.mitigated.len() == config.axes.len() {
            break StopReason::AllAxesMitigated;
        }
        let selection = select_axis(&matrix, p, &state.mitigated).map_err(|e| fail(&state, e))?;
        let row = matrix.row_index(&selection.axis).expect("selected row exists");
        if selection.stalled {
            let gamma = selection
                .gammas
                .iter()
                .find(|(a, _)| a == &selection.axis)
                .and_then(|(_, g)| *g)
                .unwrap_or(0.0);
            state.alerts.push(Alert::Stall {
                step: state.step,
                axis: selection.axis.clone(),
                gamma,
            });
        }
        for axis in p.entries.keys() {
            let col = matrix.col_index(axis).expect("priority axes are columns");
            let is_value = matrix.value(row, col);
            if is_value < 0.0 {
                state.alerts.push(Alert::TradeOff {
                    step: state.step,
                    intervened: selection.axis.clone(),
                    measured: axis.clone(),
                    is_value,
                });
            }
        }

        let axis = config.axis(&selection.axis).expect("selected axis is declared");
        let next = match pm_mitigate(&composer, &state.prompt_set, axis, config.image_budget) {
            Ok(next) => next,
            Err(Error::BudgetExhausted { .. }) => break StopReason::BudgetExhausted,
            Err(e) => return Err(fail(&state, e)),
        };
        state.steps.push(StepRecord {
            step: state.step,
            tau,
            selected: selection.axis.clone(),
            gammas: selection.gammas,
            predicted_w_bar: (0..matrix.col_axes.len())
                .map(|c| matrix.entry(row, c).w_intervened.w_bar)
                .collect(),
        });
        state.mitigated.push(selection.axis);
        state.prompt_set = next;
        state.step += 1;
    };

    let mit_steps = state.mitigated.len();
    Ok(MitigationReport {
        priority: p.clone(),
        epsilon: config.epsilon,
        mit_amt: *state.tau_trace.last().expect("at least one audit"),
        mit_steps,
        mit_steps_ratio: mit_steps as f64 / p.len() as f64,
        converged: stop_reason == StopReason::BelowThreshold,
        stop_reason,
        frozen_matrix: options.frozen_matrix,
        state,
    })
}

/// Aggregates over a batch of prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationSummary {
    pub prompts: usize,
    /// Mean final `τ`.
    pub mit_amt: f64,
    pub mean_steps: f64,
    pub mean_priority_axes: f64,
    /// `mean_steps / mean_priority_axes`.
    pub mit_steps_ratio: f64,
    /// Mean of the per-prompt step ratios.
    pub mean_step_ratio: f64,
    /// Mean person-present share of the final audits; `None` when no report
    /// carries annotated images.
    pub isp_rate: Option<f64>,
    pub converged_fraction: f64,
}

pub fn evaluate_mitigation(reports: &[MitigationReport]) -> Result<MitigationSummary> {
    if reports.is_empty() {
        return Err(Error::Metrics("no mitigation reports to evaluate".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&MitigationReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean_steps = mean(&|r| r.mit_steps as f64);
    let mean_priority_axes = mean(&|r| r.priority.len() as f64);
    let rates: Vec<f64> = reports.iter().filter_map(|r| r.state.final_person_rate).collect();
    Ok(MitigationSummary {
        prompts: reports.len(),
        mit_amt: mean(&|r| r.mit_amt),
        mean_steps,
        mean_priority_axes,
        mit_steps_ratio: mean_steps / mean_priority_axes,
        mean_step_ratio: mean(&|r| r.mit_steps_ratio),
        isp_rate: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
        converged_fraction: mean(&|r| f64::from(u8::from(r.converged))),
    })
}
