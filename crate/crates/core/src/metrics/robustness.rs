//! Perturbations for sensitivity-robustness sweeps: dropping images and
//! corrupting annotator answers.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sensitivity::{build_matrix, AuditData, RowData, Sample};
use crate::backends::derive_seed;
use crate::error::{Error, Result};
use crate::model::{AnnotationRecord, BiasAxis, IdealDistribution, SensitivityMatrix, Transport};

/// Keep `round(keep_fraction * n)` records chosen uniformly without
/// replacement; surviving records keep their original order.
pub fn perturb_subsample(records: &[AnnotationRecord], keep_fraction: f64, seed: u64) -> Result<Vec<AnnotationRecord>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Metrics(format!("keep_fraction {keep_fraction} outside (0, 1]")));
    }
    let keep = (records.len() as f64 * keep_fraction).round() as usize;
    if keep < 1 {
        return Err(Error::Metrics(format!(
            "keeping {keep_fraction} of {} records leaves none",
            records.len()
        )));
    }
    if keep == records.len() {
        return Ok(records.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, records.len(), keep).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| records[i].clone()).collect())
}

/// Replace each on-list attribute, independently with probability
/// `error_rate`, by a uniformly chosen *different* category.
pub fn perturb_answers(
    records: &[AnnotationRecord],
    axes: &[BiasAxis],
    error_rate: f64,
    seed: u64,
) -> Result<Vec<AnnotationRecord>> {
    if !(0.0..1.0).contains(&error_rate) {
        return Err(Error::Metrics(format!("error_rate {error_rate} outside [0, 1)")));
    }
    let mut out = records.to_vec();
    if error_rate == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for record in &mut out {
        for axis in axes {
            let Some(current) = record.attributes.get(&axis.id).and_then(|l| axis.category_index(l)) else {
                continue;
            };
            if rng.gen::<f64>() < error_rate {
                let mut other = rng.gen_range(0..axis.k() - 1);
                if other >= current {
                    other += 1;
                }
                record.attributes.insert(axis.id.clone(), axis.categories[other].clone());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    /// Level is the fraction of images removed.
    RemoveImages,
    /// Level is the answer error rate.
    AnswerErrors,
}

impl Perturbation {
    pub fn as_str(self) -> &'static str {
        match self {
            Perturbation::RemoveImages => "remove_images",
            Perturbation::AnswerErrors => "answer_errors",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub perturbation: Perturbation,
    pub level: f64,
    /// Mean over seeds of the mean absolute change of all matrix entries.
    pub mean_abs_delta: f64,
    /// `mean_abs_delta` relative to the mean |IS| of the unperturbed matrix.
    pub relative_change: f64,
    pub seeds: usize,
}

fn perturb_data(
    data: &AuditData,
    axes: &[BiasAxis],
    perturbation: Perturbation,
    level: f64,
    seed: u64,
) -> Result<AuditData> {
    let mut index = 0u64;
    let mut perturb = |s: &Sample| -> Result<Sample> {
        let Some(records) = s.records() else {
            return Err(Error::Metrics("robustness sweeps need annotated records, not exact distributions".into()));
        };
        index += 1;
        let stream = derive_seed(seed, &format!("{perturbation:?}/{level}/{index}"));
        Ok(Sample::Records(match perturbation {
            Perturbation::RemoveImages => perturb_subsample(records, 1.0 - level, stream)?,
            Perturbation::AnswerErrors => perturb_answers(records, axes, level, stream)?,
        }))
    };
    let init = perturb(&data.init)?;
    let mut rows = Vec::with_capacity(data.rows.len());
    for (axis, row) in &data.rows {
        let row = match row {
            RowData::AlreadyMitigated => RowData::AlreadyMitigated,
            RowData::Counterfactuals { samples } => RowData::Counterfactuals {
                samples: samples
                    .iter()
                    .map(|(c, s)| Ok((c.clone(), perturb(s)?)))
                    .collect::<Result<Vec<_>>>()?,
            },
        };
        rows.push((axis.clone(), row));
    }
    Ok(AuditData { init, rows })
}

fn mean_abs_delta(base: &SensitivityMatrix, other: &SensitivityMatrix) -> f64 {
    let n = base.entries.len() as f64;
    base.entries
        .iter()
        .zip(&other.entries)
        .map(|(a, b)| (a.is_value - b.is_value).abs())
        .sum::<f64>()
        / n
}

/// Mean |ΔIS| for every (perturbation, level), averaged over `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn robustness_sweep(
    axes: &[BiasAxis],
    ideals: &[IdealDistribution],
    transport: Transport,
    data: &AuditData,
    removal_levels: &[f64],
    error_levels: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepPoint>> {
    let base = build_matrix(axes, ideals, transport, data)?;
    let scale = base.entries.iter().map(|e| e.is_value.abs()).sum::<f64>() / base.entries.len() as f64;
    let grid = removal_levels
        .iter()
        .map(|&l| (Perturbation::RemoveImages, l))
        .chain(error_levels.iter().map(|&l| (Perturbation::AnswerErrors, l)));
    let mut points = Vec::new();
    for (perturbation, level) in grid {
        let mut total = 0.0;
        for &seed in seeds {
            let perturbed = perturb_data(data, axes, perturbation, level, seed)?;
            let m = build_matrix(axes, ideals, transport, &perturbed)?;
            total += mean_abs_delta(&base, &m);
        }
        let mean = total / seeds.len().max(1) as f64;
        points.push(SweepPoint {
            perturbation,
            level,
            mean_abs_delta: mean,
            relative_change: if scale > 0.0 { mean / scale } else { mean },
            seeds: seeds.len(),
        });
    }
    Ok(points)
}
