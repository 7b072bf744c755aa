use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use comal::agent::{MemoryStore, ReasonBackend, ScriptedBackend};
use comal::harness::{export, run_with_memory, sweep};
use comal::llm_client::{BackendConfig, RemoteBackend, ReplayBackend, Transcript};
use comal::scenario::{catalog, find, ScenarioConfig};

#[derive(Parser)]
#[command(
    name = "comal",
    version,
    about = "Mixed-autonomy traffic runs with collaborating CAV agents"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and export metrics, trajectories and transcript.
    Run(RunArgs),
    /// List the scenario catalog.
    List,
    /// Run scenarios over a seed range and print mean ± standard error.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Scripted,
    Replay,
    Remote,
}

#[derive(Args)]
struct Toggles {
    /// Skip the brainstorm; every CAV acts alone.
    #[arg(long)]
    no_collab: bool,
    /// Do not recall stored experiences.
    #[arg(long)]
    no_memory: bool,
    /// Prompts carry only the ego's own speed.
    #[arg(long)]
    no_perception: bool,
    /// JSON object merged over the catalog config, or @path to a JSON file.
    #[arg(long)]
    config: Option<String>,
}

#[derive(Args)]
struct RemoteArgs {
    /// Base URL of an OpenAI-compatible chat completions API.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Recorded transcript.jsonl to answer from (replay backend).
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Directory of experience files to use instead of the built-in set.
    #[arg(long)]
    memory_dir: Option<PathBuf>,
    #[command(flatten)]
    toggles: Toggles,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, num_args = 1.., required = true)]
    scenarios: Vec<String>,
    /// Half-open range `a..b`, or a comma-separated list.
    #[arg(long, default_value = "0..5")]
    seeds: String,
    /// Penetration rates applied to every scenario (merge only).
    #[arg(long, value_delimiter = ',')]
    penetrations: Vec<f64>,
    #[arg(long, value_enum, default_value = "scripted")]
    backend: BackendKind,
    /// Also write the table as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    toggles: Toggles,
    #[command(flatten)]
    remote: RemoteArgs,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let bad = || format!("bad seed range {text:?}; use a..b or a,b,c");
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (
            a.trim().parse().map_err(|_| bad())?,
            b.trim().parse().map_err(|_| bad())?,
        );
        if a >= b {
            return Err(bad());
        }
        return Ok((a..b).collect());
    }
    text.split(',')
        .map(|s| s.trim().parse().map_err(|_| bad()))
        .collect()
}

fn configure(name: &str, t: &Toggles) -> Result<ScenarioConfig, String> {
    let mut cfg = find(name).map_err(|e| e.to_string())?;
    if let Some(over) = &t.config {
        let text = match over.strip_prefix('@') {
            Some(path) => std::fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?,
            None => over.clone(),
        };
        cfg = cfg.with_overrides(&text).map_err(|e| e.to_string())?;
    }
    cfg.features.collaboration &= !t.no_collab;
    cfg.features.memory &= !t.no_memory;
    cfg.features.perception &= !t.no_perception;
    Ok(cfg)
}

fn remote(args: &RemoteArgs) -> Result<RemoteBackend, String> {
    let mut cfg = BackendConfig::default();
    if let Some(e) = &args.endpoint {
        cfg.endpoint = e.clone();
    }
    if let Some(m) = &args.model {
        cfg.model = m.clone();
    }
    if let Some(k) = &args.api_key_env {
        cfg.api_key_env = k.clone();
    }
    RemoteBackend::new(cfg).map_err(|e| e.to_string())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, String> {
    let cfg = configure(&args.scenario, &args.toggles)?.with_seed(args.seed);
    let backend: Box<dyn ReasonBackend> = match args.backend {
        BackendKind::Scripted => Box::new(ScriptedBackend),
        BackendKind::Remote => Box::new(remote(&args.remote)?),
        BackendKind::Replay => {
            let path = args
                .transcript
                .as_ref()
                .ok_or("--backend replay needs --transcript FILE")?;
            Box::new(ReplayBackend::new(
                &Transcript::load(path).map_err(|e| e.to_string())?,
            ))
        }
    };
    let mut memory = match &args.memory_dir {
        Some(dir) => MemoryStore::load_dir(dir).map_err(|e| e.to_string())?,
        None => MemoryStore::builtin(),
    };
    let result = run_with_memory(&cfg, &backend, &mut memory, args.memory_dir.as_deref())
        .map_err(|e| e.to_string())?;
    export(&result, &args.out).map_err(|e| e.to_string())?;

    println!("run        {}", result.run_id);
    println!("avg speed  {:.4} m/s", result.avg_speed);
    println!("speed std  {:.4} m/s", result.speed_std);
    for a in &result.roles {
        println!("role       {}: {}", a.vehicle_id, a.role);
    }
    let f = &result.flags;
    println!(
        "flags      brainstorm_fallback={} reason_fallbacks={} parse_failures={} transport_failures={}",
        f.brainstorm_fallback, f.reason_fallbacks, f.parse_failures, f.transport_failures
    );
    println!("output     {}", args.out.display());
    if let Some(c) = &f.collision {
        eprintln!("run stopped early: {c}");
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_list() {
    println!(
        "{:<9} {:<12} {:>6} {:>5} {:>8}",
        "name", "topology", "humans", "cavs", "horizon"
    );
    for c in catalog() {
        let (h, v) = if c.topology == comal::network::Topology::Merge {
            (
                "inflow".to_string(),
                format!("{:.0}%", c.penetration * 100.0),
            )
        } else {
            (c.humans.to_string(), c.cavs.to_string())
        };
        println!(
            "{:<9} {:<12} {:>6} {:>5} {:>7.0}s",
            c.name,
            c.topology.tag(),
            h,
            v,
            c.horizon
        );
    }
}

fn cmd_sweep(args: SweepArgs) -> Result<ExitCode, String> {
    let seeds = parse_seeds(&args.seeds)?;
    let templates = args
        .scenarios
        .iter()
        .map(|s| configure(s, &args.toggles))
        .collect::<Result<Vec<_>, _>>()?;
    let backend: Box<dyn ReasonBackend> = match args.backend {
        BackendKind::Scripted => Box::new(ScriptedBackend),
        BackendKind::Remote => Box::new(remote(&args.remote)?),
        BackendKind::Replay => return Err("sweep does not support the replay backend".into()),
    };
    let table =
        sweep(&templates, &seeds, &args.penetrations, &backend).map_err(|e| e.to_string())?;
    print!("{}", table.to_text());
    for c in &table.cells {
        for e in &c.errors {
            eprintln!("{}: {e}", c.scenario);
        }
    }
    if let Some(path) = &args.csv {
        std::fs::write(path, table.to_csv()).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let out = match Cli::parse().command {
        Command::Run(a) => cmd_run(a),
        Command::List => {
            cmd_list();
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep(a) => cmd_sweep(a),
    };
    out.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::FAILURE
    })
}
