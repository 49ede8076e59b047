use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Serialize;

use selfserve_core::features::FeatureVector;
use selfserve_core::rl::State;
use selfserve_core::simlab::{oracle_optimal, oracle_value, preset, preset_names, simulate_cohort, EnvKind, SimPolicy};
use selfserve_core::usecase::UseCaseSpec;
use selfserve_gateway::api::{DecideRequest, DeployRequest, ObserveRequest};
use selfserve_gateway::scenarios::{self, DriftConfig};
use selfserve_gateway::{JobRequest, Platform};

#[derive(Parser)]
#[command(name = "selfserve", version, about = "Self-serve decision platform")]
struct Cli {
    /// Root of the platform's durable state.
    #[arg(long, env = "PLATFORM_DATA_DIR", default_value = "./platform-data", global = true)]
    data_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Require `Authorization: Bearer <token>` on every request.
        #[arg(long, env = "PLATFORM_TOKEN")]
        token: Option<String>,
    },
    /// Register a use case from a JSON spec file.
    Onboard { spec: PathBuf },
    #[command(subcommand)]
    Usecase(UsecaseCmd),
    Decide {
        use_case: String,
        unit_id: String,
        /// Feature vector as a JSON object.
        features: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        idempotency_key: Option<String>,
    },
    Observe {
        use_case: String,
        decision_id: String,
        /// Metric values as a JSON object.
        metrics: String,
    },
    #[command(subcommand)]
    Job(JobCmd),
    Candidates { use_case: String },
    Deploy {
        use_case: String,
        candidate: String,
        /// Deploy without a passing canary; the reason is audited.
        #[arg(long = "override")]
        override_reason: Option<String>,
    },
    Rollback { use_case: String },
    Health {
        use_case: String,
        #[arg(long)]
        window: Option<i64>,
    },
    Audit { use_case: String },
    #[command(subcommand)]
    Sim(SimCmd),
    /// Run an end-to-end scenario in a fresh directory under the data root.
    Scenario {
        name: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum UsecaseCmd {
    Get { id: String },
    List,
}

#[derive(Subcommand)]
enum JobCmd {
    /// Submit a job and wait for it. The request is a JSON object tagged by
    /// `kind`: train, tune_reward, tune_policy or canary.
    Submit {
        use_case: String,
        request: String,
        #[arg(long)]
        no_wait: bool,
    },
    Get { id: String },
}

#[derive(Subcommand)]
enum SimCmd {
    /// List the environment presets.
    List,
    /// Simulate a uniformly random cohort and report oracle values.
    Run {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        /// Write the trace as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Ingest the trace as logged traffic of this use case.
        #[arg(long)]
        use_case: Option<String>,
    },
}

fn print<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn json<T: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_str(s).with_context(|| format!("parsing {what}"))
}

fn open(cli: &Cli) -> Result<Arc<Platform>> {
    Ok(Platform::open(&cli.data_dir)?)
}

fn sim_run(cli: &Cli, env: &str, seed: u64, n: usize, time: f64, out: Option<&PathBuf>, use_case: Option<&str>) -> Result<()> {
    let env = preset(env)?;
    let k = env.n_actions();
    let uniform_x = move |_: &[f64]| vec![1.0 / k as f64; k];
    let uniform_s = move |_: &State| vec![1.0 / k as f64; k];
    let policy = match env.env {
        EnvKind::Bandit(_) | EnvKind::Hte(_) => SimPolicy::Context(&uniform_x),
        EnvKind::Chain(_) | EnvKind::Mdp(_) => SimPolicy::State(&uniform_s),
    };
    let trace = simulate_cohort(&env, policy, n, time, seed)?;
    let behavior = oracle_value(&env, policy, time, seed)?;
    let mut weights = vec![0.0; env.metrics().len()];
    weights[0] = 1.0;
    let optimal = oracle_optimal(&env, &weights, time, seed)?;
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_vec(&trace)?)?;
    }
    let ingested = match use_case {
        Some(uc) => Some(open(cli)?.ingest_trace(uc, &trace, &format!("sim{seed}-"), "uniform", 0)?),
        None => None,
    };
    print(&serde_json::json!({
        "env": env.name,
        "rows": trace.rows.len(),
        "metrics": trace.metrics,
        "actions": trace.action_names,
        "mean_outcomes": trace.mean_outcomes(),
        "oracle_uniform": behavior,
        "oracle_optimal": optimal,
        "ingested": ingested,
    }))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Serve { addr, token } => {
            let platform = open(&cli)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(selfserve_gateway::http::serve(platform, addr, token.clone()))
        }
        Command::Onboard { spec } => {
            let spec: UseCaseSpec = json(&std::fs::read_to_string(spec)?, "use-case spec")?;
            print(&open(&cli)?.onboard(spec)?)
        }
        Command::Usecase(UsecaseCmd::Get { id }) => print(&open(&cli)?.use_case(id)?),
        Command::Usecase(UsecaseCmd::List) => print(&open(&cli)?.use_case_ids()),
        Command::Decide { use_case, unit_id, features, seed, idempotency_key } => {
            let features: FeatureVector = json(features, "features")?;
            let req = DecideRequest { unit_id: unit_id.clone(), features, seed: *seed, timestamp: None, idempotency_key: idempotency_key.clone() };
            print(&open(&cli)?.decide(use_case, req)?)
        }
        Command::Observe { use_case, decision_id, metrics } => {
            let req = ObserveRequest { decision_id: decision_id.clone(), metric_values: json(metrics, "metric values")?, timestamp: None };
            print(&open(&cli)?.observe(use_case, req)?)
        }
        Command::Job(JobCmd::Submit { use_case, request, no_wait }) => {
            let request: JobRequest = json(request, "job request")?;
            let p = open(&cli)?;
            let rec = p.submit_job(use_case, request)?;
            print(&if *no_wait { rec } else { p.wait_job(&rec.id)? })
        }
        Command::Job(JobCmd::Get { id }) => print(&open(&cli)?.job(id)?),
        Command::Candidates { use_case } => print(&open(&cli)?.candidates(use_case)?),
        Command::Deploy { use_case, candidate, override_reason } => {
            print(&open(&cli)?.deploy(use_case, DeployRequest { candidate: candidate.clone(), override_reason: override_reason.clone() })?)
        }
        Command::Rollback { use_case } => print(&open(&cli)?.rollback(use_case)?),
        Command::Health { use_case, window } => print(&open(&cli)?.health(use_case, *window)?),
        Command::Audit { use_case } => print(&open(&cli)?.audit_log(use_case)?),
        Command::Sim(SimCmd::List) => print(&preset_names()),
        Command::Sim(SimCmd::Run { env, seed, n, time, out, use_case }) => sim_run(&cli, env, *seed, *n, *time, out.as_ref(), use_case.as_deref()),
        Command::Scenario { name, seed } => {
            let dir = cli.data_dir.join("scenarios").join(format!("{name}-{seed}"));
            if dir.exists() {
                bail!("{} already exists; remove it to rerun the scenario", dir.display());
            }
            std::fs::create_dir_all(&dir)?;
            match name.as_str() {
                "drift-lifecycle" => print(&scenarios::drift_lifecycle(&dir, DriftConfig { seed: *seed, ..Default::default() })?),
                "custody" => print(&scenarios::custody(&dir, *seed, 500)?),
                other => bail!("unknown scenario `{other}`; expected one of {:?}", scenarios::SCENARIOS),
            }
        }
    }
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
