//! Run orchestration: pick a backend, run a command, write the report
//! bundle and its manifest, and replay a bundle from its manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::audit::{audit_matrix, validation_pairs, AnalyticAuditor, Auditor, BackendAuditor};
use crate::backends::remote::{Endpoint, RemoteBackend, DEFAULT_TIMEOUT};
use crate::backends::store::{Recorder, ReplayBackend};
use crate::backends::synthetic::{SyntheticBackend, SyntheticWorld, WorldMode, WorldSpec};
use crate::backends::{derive_seed, Backend};
use crate::counterfactuals::PromptComposer;
use crate::error::{ConfigError, Error, Result};
use crate::intermit::{evaluate_mitigation, run_intermit, IntermitOptions, MitigationReport, PriorityVector};
use crate::metrics::{negative_fraction, robustness_sweep, validate_correlation, SweepPoint};
use crate::model::{AuditConfig, SensitivityMatrix, Transport};

pub const MANIFEST: &str = "manifest.json";
pub const STORE: &str = "store.jsonl";
/// Environment variable consulted for the backend when no flag is given.
pub const BACKEND_ENV: &str = "CROSSBIAS_BACKEND";

/// Strength of the random world used when a config names no world.
const DEFAULT_WORLD_STRENGTH: f64 = 1.0;

/// Round to 9 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { 0.0 } else { x };
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Decimal text of `round_sig(x)`; parses back to the same `f64` as the JSON.
pub fn fmt_num(x: f64) -> String {
    format!("{:?}", round_sig(x))
}

/// Round every non-integer number in a JSON document.
pub fn round_json(value: Value) -> Value {
    match value {
        Value::Number(n) if n.is_f64() => json!(round_sig(n.as_f64().expect("f64 number"))),
        Value::Array(items) => Value::Array(items.into_iter().map(round_json).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the config with the backend left out, so recorded and replayed
/// runs of the same audit share it.
pub fn config_hash(config: &AuditConfig) -> String {
    let mut c = config.clone();
    c.backend.clear();
    sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    /// Synthetic world; `None` keeps the mode of the config's world.
    Synthetic(Option<WorldMode>),
    Remote(Endpoint),
    /// Replay from a store file.
    Replay(PathBuf),
}

impl std::str::FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(BackendSpec::Synthetic(None)),
            "synthetic:analytic" => Ok(BackendSpec::Synthetic(Some(WorldMode::Analytic))),
            "synthetic:sampled" => Ok(BackendSpec::Synthetic(Some(WorldMode::Sampled))),
            _ => {
                if let Some(ep) = s.strip_prefix("remote:") {
                    Ok(BackendSpec::Remote(ep.parse()?))
                } else if let Some(path) = s.strip_prefix("replay:") {
                    Ok(BackendSpec::Replay(PathBuf::from(path)))
                } else {
                    Err(format!(
                        "unknown backend `{s}` (expected synthetic[:analytic|:sampled], remote:<endpoint> or replay:<store>)"
                    ))
                }
            }
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Synthetic(None) => write!(f, "synthetic"),
            BackendSpec::Synthetic(Some(WorldMode::Analytic)) => write!(f, "synthetic:analytic"),
            BackendSpec::Synthetic(Some(WorldMode::Sampled)) => write!(f, "synthetic:sampled"),
            BackendSpec::Remote(Endpoint::Http(url)) => write!(f, "remote:{url}"),
            BackendSpec::Remote(Endpoint::Stdio(cmd)) => write!(f, "remote:stdio:{cmd}"),
            BackendSpec::Replay(path) => write!(f, "replay:{}", path.display()),
        }
    }
}

/// The world a config describes, or a random one seeded by the config.
pub fn world_spec(config: &AuditConfig) -> WorldSpec {
    config.synthetic.clone().unwrap_or_else(|| {
        WorldSpec::random(
            &config.axes,
            derive_seed(config.seed, &config.base_prompt),
            DEFAULT_WORLD_STRENGTH,
        )
    })
}

struct Session {
    auditor: Box<dyn Auditor>,
    id: String,
    store: Option<PathBuf>,
    records: bool,
}

fn recorded<B: Backend + 'static>(backend: B, config: &AuditConfig, out: &Path, hash: &str) -> Result<Session> {
    let path = out.join(STORE);
    if path.exists() {
        fs::remove_file(&path)?;
    }
    let id = backend.id();
    let recorder = Recorder::open(backend, &path, hash)?;
    Ok(Session {
        auditor: Box::new(BackendAuditor::new(recorder, config)),
        id,
        store: Some(PathBuf::from(STORE)),
        records: true,
    })
}

fn open_session(spec: &BackendSpec, config: &AuditConfig, out: &Path, hash: &str) -> Result<Session> {
    match spec {
        BackendSpec::Synthetic(mode) => {
            let mut world = world_spec(config);
            if let Some(mode) = mode {
                world.mode = *mode;
            }
            let world = SyntheticWorld::new(&config.axes, &world)
                .map_err(|e| ConfigError::single(format!("synthetic world: {e}")))?;
            match world.mode {
                WorldMode::Analytic => Ok(Session {
                    auditor: Box::new(AnalyticAuditor::new(world)),
                    id: "synthetic:analytic".into(),
                    store: None,
                    records: false,
                }),
                WorldMode::Sampled => recorded(SyntheticBackend::new(world), config, out, hash),
            }
        }
        BackendSpec::Remote(endpoint) => recorded(RemoteBackend::connect(endpoint, DEFAULT_TIMEOUT)?, config, out, hash),
        BackendSpec::Replay(path) => {
            let replay = ReplayBackend::load(&[path], hash)?;
            if replay.is_empty() {
                return Err(ConfigError::single(format!(
                    "store {} holds no exchanges for config {hash}",
                    path.display()
                ))
                .into());
            }
            let store = fs::canonicalize(path)?;
            Ok(Session {
                auditor: Box::new(BackendAuditor::new(replay, config)),
                id: "replay".into(),
                store: Some(store),
                records: true,
            })
        }
    }
}

/// What to run; recorded in the manifest so a replay can repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunSpec {
    Audit,
    Mitigate {
        priority: BTreeMap<String, f64>,
        #[serde(default)]
        frozen_matrix: bool,
    },
    Validate,
    Robustness {
        removal_levels: Vec<f64>,
        error_levels: Vec<f64>,
        seeds: usize,
    },
}

impl RunSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RunSpec::Audit => "audit",
            RunSpec::Mitigate { .. } => "mitigate",
            RunSpec::Validate => "validate",
            RunSpec::Robustness { .. } => "robustness",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: RunSpec,
    pub config: AuditConfig,
    pub config_hash: String,
    pub seed: u64,
    pub backend: String,
    pub backend_id: String,
    pub transport: Transport,
    /// Annotation store, relative to the manifest's directory unless absolute.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// SHA-256 of the answer store, so runs against nondeterministic
    /// backends can be told apart.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_hash: Option<String>,
    /// SHA-256 of every numeric output file.
    pub outputs: BTreeMap<String, String>,
    pub bundle_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Completed,
    NotConverged,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub out_dir: PathBuf,
    pub status: RunStatus,
    /// One-line human summary.
    pub summary: String,
}

#[derive(Default)]
struct Bundle {
    files: BTreeMap<String, Vec<u8>>,
}

impl Bundle {
    fn json(&mut self, name: &str, value: Value) {
        let mut text = serde_json::to_string_pretty(&round_json(value)).expect("json serializes");
        text.push('\n');
        self.files.insert(name.into(), text.into_bytes());
    }

    fn csv(&mut self, name: &str, header: &[String], rows: Vec<Vec<String>>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(header).map_err(io)?;
        for row in rows {
            w.write_record(&row).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        self.files.insert(name.into(), bytes);
        Ok(())
    }

    fn matrix(&mut self, prefix: &str, config: &AuditConfig, m: &SensitivityMatrix) -> Result<()> {
        let mut header = vec!["intervened".to_string()];
        header.extend(m.col_axes.iter().cloned());
        let rows = m
            .row_axes
            .iter()
            .enumerate()
            .map(|(r, axis)| {
                let mut row = vec![axis.clone()];
                row.extend((0..m.col_axes.len()).map(|c| fmt_num(m.value(r, c))));
                row
            })
            .collect();
        self.csv(&format!("{prefix}matrix.csv"), &header, rows)?;

        let entries: Vec<Value> = m
            .entries
            .iter()
            .map(|e| {
                json!({
                    "intervened": e.intervened,
                    "measured": e.measured,
                    "is": e.is_value,
                    "w_init": e.w_init.w,
                    "w_bar_init": e.w_init.w_bar,
                    "w_intervened": e.w_intervened.w,
                    "w_bar_intervened": e.w_intervened.w_bar,
                    "intervened_distribution": e.intervened_distribution,
                })
            })
            .collect();
        let init: Vec<Value> = m
            .col_axes
            .iter()
            .zip(&m.init)
            .zip(&m.init_distributions)
            .map(|((axis, d), dist)| {
                json!({ "axis": axis, "w": d.w, "w_bar": d.w_bar, "distribution": dist.probs, "n_samples": dist.n_samples })
            })
            .collect();
        self.json(
            &format!("{prefix}matrix.json"),
            json!({
                "transport": m.transport,
                "rows": m.row_axes,
                "columns": m.col_axes,
                "values": m.values(),
                "init": init,
                "entries": entries,
            }),
        );

        let names = |ids: &[String]| -> Vec<String> {
            ids.iter()
                .map(|id| config.axis(id).map_or_else(|| id.clone(), |a| a.display_name()))
                .collect()
        };
        self.json(
            &format!("{prefix}heatmap.json"),
            json!({
                "title": config.base_prompt,
                "rows": names(&m.row_axes),
                "columns": names(&m.col_axes),
                "values": m.values(),
                "range": [-1.0, 1.0],
            }),
        );

        let header = ["axis", "w", "w_bar", "distribution", "n_samples"].map(String::from);
        let rows = m
            .col_axes
            .iter()
            .zip(&m.init)
            .zip(&m.init_distributions)
            .map(|((axis, d), dist)| {
                vec![
                    axis.clone(),
                    fmt_num(d.w),
                    fmt_num(d.w_bar),
                    dist.probs.iter().map(|p| fmt_num(*p)).collect::<Vec<_>>().join(";"),
                    dist.n_samples.to_string(),
                ]
            })
            .collect();
        self.csv(&format!("{prefix}deviations.csv"), &header, rows)
    }

    fn write(&self, dir: &Path) -> Result<BTreeMap<String, String>> {
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &self.files {
            fs::write(dir.join(name), bytes)?;
            hashes.insert(name.clone(), sha256_hex(bytes));
        }
        Ok(hashes)
    }
}

fn bundle_hash(outputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (name, hash) in outputs {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(hash.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Default removal grid: 8, 16, 24 and 32 of 48 images.
pub const DEFAULT_REMOVAL_LEVELS: [f64; 4] = [8.0 / 48.0, 16.0 / 48.0, 24.0 / 48.0, 32.0 / 48.0];
pub const DEFAULT_ERROR_LEVELS: [f64; 4] = [0.05, 0.10, 0.20, 0.40];
pub const DEFAULT_ROBUSTNESS_SEEDS: usize = 20;

fn mitigation_files(bundle: &mut Bundle, config: &AuditConfig, report: &MitigationReport) -> Result<()> {
    let summary = evaluate_mitigation(std::slice::from_ref(report))?;
    bundle.json(
        "trace.json",
        json!({
            "prompt": config.base_prompt,
            "report": serde_json::to_value(report)?,
            "summary": serde_json::to_value(&summary)?,
        }),
    );
    let header = ["step", "tau"].map(String::from);
    let rows = report
        .state
        .tau_trace
        .iter()
        .enumerate()
        .map(|(i, t)| vec![i.to_string(), fmt_num(*t)])
        .collect();
    bundle.csv("tau.csv", &header, rows)?;
    bundle.json("final_prompts.json", serde_json::to_value(&report.state.prompt_set)?);
    if let Some(first) = report.state.matrix_trace.first() {
        bundle.matrix("", config, first)?;
    }
    Ok(())
}

/// Run `run` on `config` through `backend` and write the bundle into `out`.
pub fn execute(run: &RunSpec, config: &AuditConfig, backend: &BackendSpec, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let mut config = config.clone();
    config.backend = backend.to_string();
    let hash = config_hash(&config);
    let mut session = open_session(backend, &config, out, &hash)?;
    let mut bundle = Bundle::default();
    let mut status = RunStatus::Completed;

    let summary = match run {
        RunSpec::Audit => {
            let base = PromptComposer::new(&config).initial_set()?;
            let (matrix, _) = audit_matrix(session.auditor.as_mut(), &config, &base)?;
            bundle.matrix("", &config, &matrix)?;
            format!("audited {} axes for \"{}\"", matrix.row_axes.len(), config.base_prompt)
        }
        RunSpec::Mitigate { priority, frozen_matrix } => {
            let p = PriorityVector::new(priority.clone())?;
            p.check_axes(&config.axes)?;
            let options = IntermitOptions {
                frozen_matrix: *frozen_matrix,
            };
            match run_intermit(&config, &p, session.auditor.as_mut(), options) {
                Ok(report) => {
                    mitigation_files(&mut bundle, &config, &report)?;
                    if !report.converged {
                        status = RunStatus::NotConverged;
                    }
                    format!(
                        "{} step(s) {:?}, tau {} -> {} ({:?})",
                        report.mit_steps,
                        report.state.mitigated,
                        fmt_num(report.state.tau_trace[0]),
                        fmt_num(report.mit_amt),
                        report.stop_reason
                    )
                }
                Err(e) => {
                    let partial = json!({ "error": e.source.to_string(), "state": serde_json::to_value(&*e.state)? });
                    let mut text = serde_json::to_string_pretty(&round_json(partial))?;
                    text.push('\n');
                    fs::write(out.join("trace.partial.json"), text)?;
                    return Err(e.source);
                }
            }
        }
        RunSpec::Validate => {
            let (matrix, pairs) = validation_pairs(session.auditor.as_mut(), &config)?;
            let pre: Vec<f64> = pairs.iter().map(|p| p.is_value).collect();
            let post: Vec<f64> = pairs.iter().map(|p| p.is_mit).collect();
            let report = validate_correlation(&[(config.base_prompt.clone(), pre, post.clone())])?;
            bundle.matrix("", &config, &matrix)?;
            let header = ["intervened", "measured", "is", "is_mit"].map(String::from);
            let rows = pairs
                .iter()
                .map(|p| vec![p.intervened.clone(), p.measured.clone(), fmt_num(p.is_value), fmt_num(p.is_mit)])
                .collect();
            bundle.csv("correlation.csv", &header, rows)?;
            bundle.json(
                "correlation.json",
                json!({
                    "prompts": serde_json::to_value(&report.prompts)?,
                    "mean_r": report.mean_r,
                    "negative_is_mit_fraction": negative_fraction(&post),
                    "pairs": serde_json::to_value(&pairs)?,
                }),
            );
            match report.mean_r {
                Some(r) => format!("pearson r = {} over {} pairs", fmt_num(r), pairs.len()),
                None => format!("pearson r undefined (constant sensitivities) over {} pairs", pairs.len()),
            }
        }
        RunSpec::Robustness {
            removal_levels,
            error_levels,
            seeds,
        } => {
            if !session.records {
                return Err(ConfigError::single(
                    "robustness sweeps perturb annotated images; use a sampling backend such as synthetic:sampled",
                )
                .into());
            }
            let base = PromptComposer::new(&config).initial_set()?;
            let (matrix, data) = audit_matrix(session.auditor.as_mut(), &config, &base)?;
            let seeds: Vec<u64> = (0..*seeds).map(|i| derive_seed(config.seed, &format!("robustness/{i}"))).collect();
            let points = robustness_sweep(
                &config.axes,
                &config.ideals(),
                config.transport,
                &data,
                removal_levels,
                error_levels,
                &seeds,
            )?;
            bundle.matrix("", &config, &matrix)?;
            robustness_files(&mut bundle, &points)?;
            format!("{} sweep points over {} seeds", points.len(), seeds.len())
        }
    };

    let outputs = bundle.write(out)?;
    let store = session.store.take();
    let backend_id = session.id.clone();
    // Dropping the auditor flushes any recorder.
    drop(session);
    let answer_hash = match &store {
        Some(path) => Some(sha256_hex(&fs::read(out.join(path))?)),
        None => None,
    };
    let manifest = Manifest {
        run: run.clone(),
        seed: config.seed,
        transport: config.transport,
        backend: config.backend.clone(),
        backend_id,
        config_hash: hash,
        config,
        store,
        answer_hash,
        bundle_hash: bundle_hash(&outputs),
        outputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(out.join(MANIFEST), text)?;
    Ok(RunOutcome {
        manifest,
        out_dir: out.to_path_buf(),
        status,
        summary,
    })
}

fn robustness_files(bundle: &mut Bundle, points: &[SweepPoint]) -> Result<()> {
    let header = ["perturbation", "level", "mean_abs_delta", "relative_change", "seeds"].map(String::from);
    let rows = points
        .iter()
        .map(|p| {
            vec![
                p.perturbation.as_str().to_string(),
                fmt_num(p.level),
                fmt_num(p.mean_abs_delta),
                fmt_num(p.relative_change),
                p.seeds.to_string(),
            ]
        })
        .collect();
    bundle.csv("robustness.csv", &header, rows)?;
    bundle.json("robustness.json", serde_json::to_value(points)?);
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    pub original: Manifest,
    pub outcome: RunOutcome,
    /// Output files whose hash differs from the original run.
    pub mismatches: Vec<String>,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-run a bundle from its manifest and compare every output hash.
///
/// Runs that recorded a store are answered from it; analytic runs are
/// recomputed from the embedded config.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ReplayOutcome> {
    let original = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let backend = match &original.store {
        Some(store) => BackendSpec::Replay(if store.is_absolute() { store.clone() } else { dir.join(store) }),
        None => original.backend.parse().map_err(ConfigError::single)?,
    };
    let mut config = original.config.clone();
    config.backend = original.backend.clone();
    if config_hash(&config) != original.config_hash {
        return Err(ConfigError::single("manifest config does not match its config_hash").into());
    }
    let outcome = execute(&original.run, &config, &backend, out)?;
    let mut mismatches: Vec<String> = original
        .outputs
        .iter()
        .filter(|(name, hash)| outcome.manifest.outputs.get(*name) != Some(*hash))
        .map(|(name, _)| name.clone())
        .collect();
    mismatches.extend(
        outcome
            .manifest
            .outputs
            .keys()
            .filter(|name| !original.outputs.contains_key(*name))
            .cloned(),
    );
    if original.answer_hash.is_some() && original.answer_hash != outcome.manifest.answer_hash {
        mismatches.push(original.store.as_ref().map_or(STORE.into(), |s| s.display().to_string()));
    }
    Ok(ReplayOutcome {
        original,
        outcome,
        mismatches,
    })
}

/// Process exit code for a failed run.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) | Error::Prompt(_) | Error::BudgetExhausted { .. } => 3,
        Error::Backend(_) | Error::EmptyDistribution { .. } => 4,
        _ => 1,
    }
}
