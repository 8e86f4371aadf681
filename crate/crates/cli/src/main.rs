use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use crossbias::backends::remote::{handle_line, run_transcript, Endpoint, DEFAULT_TIMEOUT, GOLDEN_TRANSCRIPT};
use crossbias::backends::synthetic::{SyntheticBackend, SyntheticWorld, WorldMode};
use crossbias::bank::OccupationBank;
use crossbias::intermit::PriorityVector;
use crossbias::report::{
    self, BackendSpec, RunSpec, RunStatus, BACKEND_ENV, DEFAULT_ERROR_LEVELS, DEFAULT_REMOVAL_LEVELS,
    DEFAULT_ROBUSTNESS_SEEDS,
};
use crossbias::{validate_config, AuditConfig, ConfigError, Transport};

const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_CONFIG: u8 = 3;

#[derive(Parser)]
#[command(name = "crossbias", version, about = "Intersectional bias audits and mitigation for text-to-image pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the sensitivity matrix and per-axis deviations.
    Audit(Common),
    /// Run the priority-weighted greedy mitigation loop.
    Mitigate {
        #[command(flatten)]
        common: Common,
        /// Priority weights, e.g. `age_bias=0.5,environment_bias=0.5`.
        #[arg(long)]
        priority: String,
        /// Reuse the first sensitivity matrix for every step.
        #[arg(long)]
        frozen_matrix: bool,
    },
    /// Correlate predicted sensitivities with post-mitigation ones.
    Validate(Common),
    /// Sweep image removal and answer errors and report sensitivity drift.
    Robustness {
        #[command(flatten)]
        common: Common,
        /// Fractions of images removed.
        #[arg(long, value_delimiter = ',')]
        remove: Option<Vec<f64>>,
        /// Annotator answer error rates.
        #[arg(long, value_delimiter = ',')]
        error_rates: Option<Vec<f64>>,
        #[arg(long, default_value_t = DEFAULT_ROBUSTNESS_SEEDS)]
        seeds: usize,
    },
    /// Re-run a bundle from its manifest and compare outputs.
    Replay {
        manifest: PathBuf,
        /// Output directory; defaults to `replay/` next to the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a backend endpoint against the golden protocol transcript.
    Conformance {
        /// `http://host:port` or `stdio:<command>`.
        #[arg(long)]
        endpoint: String,
        /// Transcript file; defaults to the built-in one.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Serve a sampled synthetic world over the stdio protocol.
    Serve {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the built-in occupations.
    Occupations,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Audit config file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the built-in occupation bank.
    #[arg(long)]
    occupation: Option<String>,
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    source: Source,
    /// synthetic[:analytic|:sampled], remote:<endpoint> or replay:<store>.
    #[arg(long, env = BACKEND_ENV)]
    backend: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Images per audited prompt set.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// JSON object mapping axis ids to ideal distributions.
    #[arg(long)]
    ideal: Option<PathBuf>,
    #[arg(long)]
    transport: Option<Transport>,
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn read_input(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::single(format!("reading {}: {e}", path.display())))
}

fn load_source(source: &Source) -> anyhow::Result<AuditConfig> {
    Ok(match (&source.config, &source.occupation) {
        (Some(path), _) => {
            AuditConfig::from_json(&read_input(path)?)?
        }
        (None, Some(name)) => OccupationBank::load().config_for(name)?,
        (None, None) => unreachable!("clap requires a source"),
    })
}

fn load_config(common: &Common) -> anyhow::Result<(AuditConfig, BackendSpec)> {
    let mut config = load_source(&common.source)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(budget) = common.budget {
        config.image_budget = budget;
    }
    if let Some(epsilon) = common.epsilon {
        config.epsilon = epsilon;
    }
    if let Some(transport) = common.transport {
        config.transport = transport;
    }
    if let Some(path) = &common.ideal {
        let text = read_input(path)?;
        let ideal: std::collections::BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)
            .map_err(|e| ConfigError::single(format!("{}: {e}", path.display())))?;
        config.ideal.extend(ideal);
    }
    if let Some(backend) = &common.backend {
        config.backend = backend.clone();
    }
    let config = validate_config(config)?;
    let backend: BackendSpec = config.backend.parse().map_err(ConfigError::single)?;
    Ok((config, backend))
}

fn run_spec(common: &Common, run: RunSpec) -> anyhow::Result<ExitCode> {
    let (config, backend) = load_config(common)?;
    log::info!("{} via {backend}", run.name());
    let outcome = report::execute(&run, &config, &backend, &common.out)?;
    println!("{}", outcome.summary);
    println!("wrote {}", outcome.out_dir.display());
    Ok(match outcome.status {
        RunStatus::Completed => ExitCode::SUCCESS,
        RunStatus::NotConverged => ExitCode::from(EXIT_NOT_CONVERGED),
    })
}

fn priority(spec: &str) -> anyhow::Result<std::collections::BTreeMap<String, f64>> {
    let (p, rescaled) = PriorityVector::normalized(PriorityVector::parse_entries(spec)?)?;
    if rescaled {
        log::warn!("priority weights did not sum to 1; normalized to {:?}", p.entries);
    }
    Ok(p.entries)
}

fn serve(source: &Source, seed: Option<u64>) -> anyhow::Result<ExitCode> {
    let mut config = load_source(source)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let mut spec = report::world_spec(&config);
    spec.mode = WorldMode::Sampled;
    let world = SyntheticWorld::new(&config.axes, &spec).map_err(ConfigError::single)?;
    let mut backend = SyntheticBackend::new(world);
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(stdout, "{}", handle_line(&mut backend, &line))?;
        stdout.flush()?;
    }
    Ok(ExitCode::SUCCESS)
}

fn conformance(endpoint: &str, transcript: Option<&Path>) -> anyhow::Result<ExitCode> {
    let endpoint: Endpoint = endpoint.parse().map_err(ConfigError::single)?;
    let text = match transcript {
        Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        None => GOLDEN_TRANSCRIPT.to_string(),
    };
    let mut exchange = endpoint.connect(DEFAULT_TIMEOUT).map_err(crossbias::Error::from)?;
    let outcomes = run_transcript(exchange.as_mut(), &text).map_err(ConfigError::single)?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        if o.passed {
            println!("PASS {}", o.name);
        } else {
            println!("FAIL {}: {}", o.name, o.detail);
        }
    }
    println!("{} of {} cases passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Audit(common) => run_spec(&common, RunSpec::Audit),
        Command::Validate(common) => run_spec(&common, RunSpec::Validate),
        Command::Mitigate {
            common,
            priority: spec,
            frozen_matrix,
        } => {
            let priority = priority(&spec)?;
            run_spec(&common, RunSpec::Mitigate { priority, frozen_matrix })
        }
        Command::Robustness {
            common,
            remove,
            error_rates,
            seeds,
        } => {
            if seeds == 0 {
                bail!(ConfigError::single("--seeds must be at least 1"));
            }
            let run = RunSpec::Robustness {
                removal_levels: remove.unwrap_or_else(|| DEFAULT_REMOVAL_LEVELS.to_vec()),
                error_levels: error_rates.unwrap_or_else(|| DEFAULT_ERROR_LEVELS.to_vec()),
                seeds,
            };
            run_spec(&common, run)
        }
        Command::Replay { manifest, out } => {
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("replay"));
            let r = report::replay(&manifest, &out)?;
            if r.identical() {
                println!(
                    "replay identical: {} outputs, bundle {}",
                    r.outcome.manifest.outputs.len(),
                    r.outcome.manifest.bundle_hash
                );
                Ok(ExitCode::SUCCESS)
            } else {
                println!("replay differs in {}", r.mismatches.join(", "));
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Conformance { endpoint, transcript } => conformance(&endpoint, transcript.as_deref()),
        Command::Serve { source, seed } => serve(&source, seed),
        Command::Occupations => {
            for name in OccupationBank::load().occupations {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn exit_code(error: &anyhow::Error) -> u8 {
    if let Some(e) = error.downcast_ref::<crossbias::Error>() {
        report::exit_code(e) as u8
    } else if error.downcast_ref::<ConfigError>().is_some() {
        EXIT_CONFIG
    } else {
        1
    }
}

/// Error chain without causes that the previous message already includes.
fn describe(error: &anyhow::Error) -> String {
    let mut out = error.to_string();
    let mut last = out.clone();
    for cause in error.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out = format!("{out}: {text}");
        }
        last = text;
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
