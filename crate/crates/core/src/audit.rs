//! Audit orchestration: turn prompt sets into attribute evidence and
//! evidence into sensitivity matrices.

use crate::backends::synthetic::SyntheticWorld;
use crate::backends::{derive_seed, generate_and_annotate, AnnotationStats, Backend};
use crate::counterfactuals::{expand_counterfactuals, pm_mitigate, PromptComposer, PromptSet};
use crate::error::Result;
use crate::metrics::{build_matrix, post_mitigation_sensitivity, AuditData, RowData, Sample};
use crate::model::{AuditConfig, BiasAxis, SensitivityMatrix};

/// Stream label for ordinary audits.
pub const AUDIT_STREAM: &str = "audit";
/// Stream label for images generated after an actual mitigation.
pub const MITIGATED_STREAM: &str = "mitigated";

/// Produces attribute evidence for a prompt set.
pub trait Auditor {
    fn id(&self) -> String;
    /// `stream` separates independent generation runs of the same prompts.
    fn audit(&mut self, set: &PromptSet, stream: &str) -> Result<Sample>;
}

/// Exact distributions read off an analytic synthetic world.
pub struct AnalyticAuditor {
    world: SyntheticWorld,
}

impl AnalyticAuditor {
    pub fn new(world: SyntheticWorld) -> Self {
        Self { world }
    }
}

impl Auditor for AnalyticAuditor {
    fn id(&self) -> String {
        "synthetic:analytic".into()
    }

    fn audit(&mut self, set: &PromptSet, _stream: &str) -> Result<Sample> {
        Ok(Sample::Exact(self.world.analytic_distributions(set)?))
    }
}

/// Generates and annotates images through a [`Backend`].
pub struct BackendAuditor<B> {
    backend: B,
    axes: Vec<BiasAxis>,
    budget: usize,
    seed: u64,
    max_retries: u32,
    pub stats: AnnotationStats,
}

impl<B: Backend> BackendAuditor<B> {
    pub fn new(backend: B, config: &AuditConfig) -> Self {
        Self {
            backend,
            axes: config.axes.clone(),
            budget: config.image_budget,
            seed: config.seed,
            max_retries: config.max_retries,
            stats: AnnotationStats::default(),
        }
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn into_backend(self) -> B {
        self.backend
    }
}

impl<B: Backend> Auditor for BackendAuditor<B> {
    fn id(&self) -> String {
        self.backend.id()
    }

    fn audit(&mut self, set: &PromptSet, stream: &str) -> Result<Sample> {
        let seed = derive_seed(self.seed, stream);
        let (records, stats) =
            generate_and_annotate(set, &self.axes, self.budget, seed, self.max_retries, &mut self.backend)?;
        self.stats.images += stats.images;
        self.stats.persons += stats.persons;
        self.stats.off_list_answers += stats.off_list_answers;
        Ok(Sample::Records(records))
    }
}

impl<A: Auditor + ?Sized> Auditor for Box<A> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn audit(&mut self, set: &PromptSet, stream: &str) -> Result<Sample> {
        (**self).audit(set, stream)
    }
}

/// Audit `base` and every counterfactual set needed for a full matrix.
///
/// Axes already forced throughout `base` (mitigated ones) get
/// [`RowData::AlreadyMitigated`] rows and no extra audits.
pub fn collect_audit_data(
    auditor: &mut dyn Auditor,
    composer: &PromptComposer,
    base: &PromptSet,
    stream: &str,
) -> Result<AuditData> {
    let init = auditor.audit(base, stream)?;
    let mut rows = Vec::with_capacity(composer.axes().len());
    for axis in composer.axes() {
        let forced_everywhere = base.variants.iter().all(|v| v.modifiers.contains_key(&axis.id));
        if forced_everywhere || base.history().contains(&axis.id) {
            rows.push((axis.id.clone(), RowData::AlreadyMitigated));
            continue;
        }
        let expansion = expand_counterfactuals(composer, base, axis)?;
        let samples = axis
            .categories
            .iter()
            .zip(&expansion.sets)
            .map(|(category, set)| Ok((category.clone(), auditor.audit(set, stream)?)))
            .collect::<Result<Vec<_>>>()?;
        rows.push((axis.id.clone(), RowData::Counterfactuals { samples }));
    }
    Ok(AuditData { init, rows })
}

/// Audit `base` and compute its sensitivity matrix against the config's ideals.
pub fn audit_matrix(
    auditor: &mut dyn Auditor,
    config: &AuditConfig,
    base: &PromptSet,
) -> Result<(SensitivityMatrix, AuditData)> {
    let composer = PromptComposer::new(config);
    let data = collect_audit_data(auditor, &composer, base, AUDIT_STREAM)?;
    let matrix = build_matrix(&config.axes, &config.ideals(), config.transport, &data)?;
    Ok((matrix, data))
}

/// Share of person-present images in a sample; `None` for exact samples.
pub fn person_rate(sample: &Sample) -> Option<f64> {
    let records = sample.records()?;
    if records.is_empty() {
        return None;
    }
    Some(records.iter().filter(|r| r.person_present).count() as f64 / records.len() as f64)
}

/// One (intervened, measured) pair of the validation study.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValidationPair {
    pub intervened: String,
    pub measured: String,
    /// Predicted sensitivity from the counterfactual audit.
    pub is_value: f64,
    /// Sensitivity observed after actually mitigating `intervened`.
    pub is_mit: f64,
}

/// Audit the initial prompt set, then mitigate each axis in turn on a fresh
/// image stream and pair every predicted entry with its observed value.
pub fn validation_pairs(
    auditor: &mut dyn Auditor,
    config: &AuditConfig,
) -> Result<(SensitivityMatrix, Vec<ValidationPair>)> {
    let composer = PromptComposer::new(config);
    let base = composer.initial_set()?;
    let (matrix, data) = audit_matrix(auditor, config, &base)?;
    let mut pairs = Vec::new();
    for (row, intervened) in config.axes.iter().enumerate() {
        if matches!(data.rows[row].1, RowData::AlreadyMitigated) {
            continue;
        }
        let mitigated = pm_mitigate(&composer, &base, intervened, config.image_budget)?;
        let post = auditor.audit(&mitigated, MITIGATED_STREAM)?;
        for (col, measured) in config.axes.iter().enumerate() {
            let entry = post_mitigation_sensitivity(
                &data.init,
                &post,
                intervened,
                measured,
                &config.ideal_for(measured),
                config.transport,
            )?;
            pairs.push(ValidationPair {
                intervened: intervened.id.clone(),
                measured: measured.id.clone(),
                is_value: matrix.value(row, col),
                is_mit: entry.is_value,
            });
        }
    }
    Ok((matrix, pairs))
}
