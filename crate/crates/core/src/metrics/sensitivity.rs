//! Empirical and intervened distributions, intersectional sensitivity, and
//! the sensitivity matrix.

use serde::{Deserialize, Serialize};

use super::wasserstein::bias_deviation;
use crate::error::{Error, Result};
use crate::model::{
    AnnotationRecord, AttributeDistribution, BiasAxis, BiasDeviation, IdealDistribution, SensitivityEntry,
    SensitivityMatrix, Transport,
};

/// Normalized category counts over person-present records with an on-list
/// answer for `axis`.
pub fn empirical_distribution(records: &[AnnotationRecord], axis: &BiasAxis) -> Result<AttributeDistribution> {
    let mut counts = vec![0usize; axis.k()];
    for record in records.iter().filter(|r| r.person_present) {
        if let Some(c) = record.attributes.get(&axis.id).and_then(|l| axis.category_index(l)) {
            counts[c] += 1;
        }
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::EmptyDistribution {
            axis: axis.id.clone(),
            context: String::new(),
        });
    }
    Ok(AttributeDistribution {
        axis_id: axis.id.clone(),
        probs: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        n_samples: n,
    })
}

/// Sum of `values` independent of their order.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Equal-weight mixture of the measured axis's distribution across every
/// counterfactual of the intervened axis.
///
/// Each coordinate is summed in sorted order so the result does not depend
/// on the order of the inputs.
pub fn intervened_distribution(cf_distributions: &[AttributeDistribution]) -> Result<AttributeDistribution> {
    let first = cf_distributions
        .first()
        .ok_or_else(|| Error::Metrics("missing counterfactual distribution".into()))?;
    if let Some(bad) = cf_distributions
        .iter()
        .find(|d| d.axis_id != first.axis_id || d.probs.len() != first.probs.len())
    {
        return Err(Error::Metrics(format!(
            "counterfactual distributions disagree on the measured axis: `{}` vs `{}`",
            first.axis_id, bad.axis_id
        )));
    }
    let n = cf_distributions.len() as f64;
    let mut probs: Vec<f64> = (0..first.probs.len())
        .map(|i| {
            let mut column: Vec<f64> = cf_distributions.iter().map(|d| d.probs[i]).collect();
            order_free_sum(&mut column) / n
        })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(AttributeDistribution {
        axis_id: first.axis_id.clone(),
        probs,
        n_samples: cf_distributions.iter().map(|d| d.n_samples).sum(),
    })
}

pub fn intersectional_sensitivity(
    intervened_axis: &str,
    measured_axis: &str,
    init: BiasDeviation,
    intervened: BiasDeviation,
    intervened_distribution: Vec<f64>,
) -> SensitivityEntry {
    SensitivityEntry {
        intervened: intervened_axis.to_string(),
        measured: measured_axis.to_string(),
        is_value: init.w_bar - intervened.w_bar,
        w_init: init,
        w_intervened: intervened,
        intervened_distribution,
    }
}

/// Attribute evidence from one audited prompt set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum Sample {
    /// Annotated images from a backend.
    Records(Vec<AnnotationRecord>),
    /// Exact distributions, one per declared axis (analytic worlds).
    Exact(Vec<AttributeDistribution>),
}

impl Sample {
    pub fn distribution(&self, axis: &BiasAxis) -> Result<AttributeDistribution> {
        match self {
            Sample::Records(records) => empirical_distribution(records, axis),
            Sample::Exact(dists) => dists
                .iter()
                .find(|d| d.axis_id == axis.id)
                .cloned()
                .ok_or_else(|| Error::EmptyDistribution {
                    axis: axis.id.clone(),
                    context: " (no exact distribution supplied)".into(),
                }),
        }
    }

    pub fn records(&self) -> Option<&[AnnotationRecord]> {
        match self {
            Sample::Records(r) => Some(r),
            Sample::Exact(_) => None,
        }
    }
}

/// Audit evidence for one row (intervened axis) of the matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowData {
    /// One sample per category of the intervened axis, labelled by category.
    Counterfactuals { samples: Vec<(String, Sample)> },
    /// The axis is already uniformly represented in the audited prompt set;
    /// intervening again leaves every distribution unchanged.
    AlreadyMitigated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditData {
    pub init: Sample,
    pub rows: Vec<(String, RowData)>,
}

/// Full `|B| x |B|` sensitivity matrix in axis declaration order.
pub fn build_matrix(
    axes: &[BiasAxis],
    ideals: &[IdealDistribution],
    transport: Transport,
    data: &AuditData,
) -> Result<SensitivityMatrix> {
    let ideal_for = |axis: &BiasAxis| {
        ideals
            .iter()
            .find(|i| i.axis_id == axis.id)
            .ok_or_else(|| Error::Metrics(format!("no ideal distribution for `{}`", axis.id)))
    };

    let mut init_distributions = Vec::with_capacity(axes.len());
    let mut init = Vec::with_capacity(axes.len());
    for axis in axes {
        let d = data.init.distribution(axis)?;
        init.push(bias_deviation(&d, ideal_for(axis)?, axis.transport(transport))?);
        init_distributions.push(d);
    }

    let mut entries = Vec::with_capacity(axes.len() * axes.len());
    for row in axes {
        let row_data = data
            .rows
            .iter()
            .find(|(id, _)| id == &row.id)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::Metrics(format!("no counterfactual audit for row axis `{}`", row.id)))?;
        let samples = match row_data {
            RowData::AlreadyMitigated => None,
            RowData::Counterfactuals { samples } => {
                let mut ordered: Vec<Option<&Sample>> = vec![None; row.k()];
                for (category, sample) in samples {
                    let c = row.category_index(category).ok_or_else(|| {
                        Error::Metrics(format!("`{category}` is not a category of `{}`", row.id))
                    })?;
                    if ordered[c].replace(sample).is_some() {
                        return Err(Error::Metrics(format!("duplicate counterfactual `{category}` for `{}`", row.id)));
                    }
                }
                let ordered = ordered
                    .into_iter()
                    .enumerate()
                    .map(|(c, s)| {
                        s.ok_or_else(|| {
                            Error::Metrics(format!(
                                "missing counterfactual distribution for `{}` = `{}`",
                                row.id, row.categories[c]
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Some(ordered)
            }
        };

        for (col_idx, col) in axes.iter().enumerate() {
            let intervened = match &samples {
                None => init_distributions[col_idx].clone(),
                Some(samples) => {
                    let cfs = samples
                        .iter()
                        .map(|s| s.distribution(col))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| e.with_pair_context(&row.id, &col.id))?;
                    intervened_distribution(&cfs)?
                }
            };
            let w_intervened = bias_deviation(&intervened, ideal_for(col)?, col.transport(transport))?;
            entries.push(intersectional_sensitivity(
                &row.id,
                &col.id,
                init[col_idx],
                w_intervened,
                intervened.probs,
            ));
        }
    }

    let ids: Vec<String> = axes.iter().map(|a| a.id.clone()).collect();
    Ok(SensitivityMatrix {
        row_axes: ids.clone(),
        col_axes: ids,
        entries,
        init,
        init_distributions,
        transport,
    })
}

/// Sensitivity measured after actually mitigating `intervened`: the
/// intervened distribution is replaced by the post-mitigation one.
pub fn post_mitigation_sensitivity(
    pre: &Sample,
    post: &Sample,
    intervened: &BiasAxis,
    measured: &BiasAxis,
    ideal: &IdealDistribution,
    transport: Transport,
) -> Result<SensitivityEntry> {
    let transport = measured.transport(transport);
    let init = bias_deviation(&pre.distribution(measured)?, ideal, transport)?;
    let post_dist = post
        .distribution(measured)
        .map_err(|e| e.with_pair_context(&intervened.id, &measured.id))?;
    let after = bias_deviation(&post_dist, ideal, transport)?;
    Ok(intersectional_sensitivity(&intervened.id, &measured.id, init, after, post_dist.probs))
}

/// Fraction of strictly negative values.
pub fn negative_fraction(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| **v < 0.0).count() as f64 / values.len() as f64
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::model::Fragment;

    fn axis(id: &str, cats: &[&str]) -> BiasAxis {
        BiasAxis {
            id: id.into(),
            categories: cats.iter().map(|s| s.to_string()).collect(),
            prompt_fragments: cats.iter().map(|s| Fragment::Before(s.to_string())).collect(),
            question: None,
            ordinal: true,
        }
    }

    fn record(i: usize, person: bool, attrs: &[(&str, &str)]) -> AnnotationRecord {
        AnnotationRecord {
            image_id: format!("img{i:03}"),
            prompt_variant: "p".into(),
            person_present: person,
            attributes: attrs.iter().map(|(a, c)| (a.to_string(), c.to_string())).collect(),
            off_list: BTreeMap::new(),
        }
    }

    fn dist(id: &str, p: &[f64]) -> AttributeDistribution {
        AttributeDistribution::new(id, p.to_vec(), 0).unwrap()
    }

    #[test]
    fn empirical_counts() {
        let gender = axis("gender_bias", &["male", "female"]);
        let recs: Vec<_> = (0..48)
            .map(|i| record(i, true, &[("gender_bias", if i < 24 { "male" } else { "female" })]))
            .collect();
        let d = empirical_distribution(&recs, &gender).unwrap();
        assert_eq!(d.probs, vec![0.5, 0.5]);
        assert_eq!(d.n_samples, 48);
    }

    #[test]
    fn person_filter_shrinks_denominator() {
        let gender = axis("gender_bias", &["male", "female"]);
        let mut recs: Vec<_> = (0..48).map(|i| record(i, true, &[("gender_bias", "female")])).collect();
        recs.push(record(48, false, &[]));
        recs.push(record(49, false, &[]));
        let d = empirical_distribution(&recs, &gender).unwrap();
        assert_eq!(d.n_samples, 48);
        assert_eq!(d.probs, vec![0.0, 1.0]);
    }

    #[test]
    fn point_mass_age() {
        let age = axis("age_bias", &["young", "middle", "old"]);
        let recs: Vec<_> = (0..48).map(|i| record(i, true, &[("age_bias", "young")])).collect();
        assert_eq!(empirical_distribution(&recs, &age).unwrap().probs, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_distribution_is_an_error() {
        let age = axis("age_bias", &["young", "old"]);
        let recs = vec![record(0, false, &[])];
        assert!(matches!(empirical_distribution(&recs, &age), Err(Error::EmptyDistribution { .. })));
    }

    #[test]
    fn intervened_is_the_mean() {
        let d = intervened_distribution(&[dist("age", &[0.8, 0.2]), dist("age", &[0.4, 0.6])]).unwrap();
        assert!((d.probs[0] - 0.6).abs() < 1e-15 && (d.probs[1] - 0.4).abs() < 1e-15);
        let same = intervened_distribution(&vec![dist("age", &[0.3, 0.7]); 3]).unwrap();
        assert!((same.probs[0] - 0.3).abs() < 1e-15);
        assert!(intervened_distribution(&[]).is_err());
    }

    #[test]
    fn intervened_is_order_free_bitwise() {
        let a = dist("x", &[0.1, 0.2, 0.7]);
        let b = dist("x", &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
        let c = dist("x", &[0.77, 0.13, 0.1]);
        let one = intervened_distribution(&[a.clone(), b.clone(), c.clone()]).unwrap();
        let two = intervened_distribution(&[c, a, b]).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn unchanged_intervention_gives_zero_is() {
        let dev = BiasDeviation { w: 0.3, w_bar: 0.6 };
        let e = intersectional_sensitivity("a", "b", dev, dev, vec![]);
        assert_eq!(e.is_value, 0.0);
    }

    #[test]
    fn already_mitigated_rows_are_zero() {
        let axes = vec![axis("g", &["m", "f"]), axis("a", &["y", "o"])];
        let ideals: Vec<_> = axes.iter().map(|a| IdealDistribution::uniform(&a.id, 2)).collect();
        let data = AuditData {
            init: Sample::Exact(vec![dist("g", &[0.9, 0.1]), dist("a", &[0.2, 0.8])]),
            rows: vec![
                ("g".into(), RowData::AlreadyMitigated),
                (
                    "a".into(),
                    RowData::Counterfactuals {
                        samples: vec![
                            ("y".into(), Sample::Exact(vec![dist("g", &[0.5, 0.5]), dist("a", &[1.0, 0.0])])),
                            ("o".into(), Sample::Exact(vec![dist("g", &[1.0, 0.0]), dist("a", &[0.0, 1.0])])),
                        ],
                    },
                ),
            ],
        };
        let m = build_matrix(&axes, &ideals, Transport::Ordinal, &data).unwrap();
        assert_eq!(m.values()[0], vec![0.0, 0.0]);
        // a -> g: init w_bar 0.8, intervened [0.75, 0.25] -> w_bar 0.5
        assert!((m.value(1, 0) - 0.3).abs() < 1e-12);
        // a -> a: intervened uniform
        assert!((m.value(1, 1) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn missing_counterfactual_is_reported() {
        let axes = vec![axis("g", &["m", "f"])];
        let ideals = vec![IdealDistribution::uniform("g", 2)];
        let data = AuditData {
            init: Sample::Exact(vec![dist("g", &[0.9, 0.1])]),
            rows: vec![(
                "g".into(),
                RowData::Counterfactuals {
                    samples: vec![("m".into(), Sample::Exact(vec![dist("g", &[1.0, 0.0])]))],
                },
            )],
        };
        let err = build_matrix(&axes, &ideals, Transport::Ordinal, &data).unwrap_err();
        assert!(err.to_string().contains("missing counterfactual"));
    }

    #[test]
    fn empty_counterfactual_names_the_pair() {
        let axes = vec![axis("g", &["m", "f"]), axis("a", &["y", "o"])];
        let ideals: Vec<_> = axes.iter().map(|a| IdealDistribution::uniform(&a.id, 2)).collect();
        let full = |g: &str, a: &str| record(0, true, &[("g", g), ("a", a)]);
        let data = AuditData {
            init: Sample::Records(vec![full("m", "y")]),
            rows: vec![
                (
                    "g".into(),
                    RowData::Counterfactuals {
                        samples: vec![
                            ("m".into(), Sample::Records(vec![full("m", "y")])),
                            ("f".into(), Sample::Records(vec![record(1, false, &[])])),
                        ],
                    },
                ),
                ("a".into(), RowData::AlreadyMitigated),
            ],
        };
        let err = build_matrix(&axes, &ideals, Transport::Ordinal, &data).unwrap_err();
        assert!(err.to_string().contains("intervened `g`, measured `g`"), "{err}");
    }

    #[test]
    fn negative_share() {
        assert_eq!(negative_fraction(&[0.1, -0.2, 0.0, -0.5]), 0.5);
        assert_eq!(negative_fraction(&[]), 0.0);
    }
}
