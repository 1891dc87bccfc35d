use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use envforge::agent::{
    run_build_with, BuildConfig, LlmPolicy, Policy, RepoSource, RepoSpec, ScriptedPolicy,
};
use envforge::classify::classify;
use envforge::classify::shell::quote;
use envforge::eval::{
    default_jobs, emit_dockerfile, entry_stem, read_bench, run_eval, verify_dockerfile, BenchEntry,
    EvalConfig,
};
use envforge::sandbox::container::docker_available;
use envforge::sandbox::{Backend, SimWorld};
use envforge::synth::{synthesize_with, write_program, SynthOptions};
use envforge::trace::{parse_trace, serialize_trace, Command, Outcome};
use tracing_subscriber::EnvFilter;

const SIM_WORLD_FILE: &str = ".envforge/sim.json";
const ACTIONS_FILE: &str = ".envforge/actions.json";

#[derive(Parser)]
#[command(
    name = "envforge",
    version,
    about = "Build executable test environments and compile them into Dockerfiles"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Docker,
}

#[derive(clap::Args)]
struct BudgetArgs {
    /// Maximum policy turns.
    #[arg(long, default_value_t = 100)]
    budget_turns: u32,
    /// Wall-clock limit for one build.
    #[arg(long, default_value_t = 7200)]
    budget_seconds: u64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build one repository and emit its trace and Dockerfile.
    Build(BuildArgs),
    /// Compile a trace file into a Dockerfile directory.
    Synthesize {
        trace: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Local checkout to copy in as the build context's `src/`.
        #[arg(long)]
        source: Option<PathBuf>,
        /// Synthesize even when the trace did not reach a verified test run.
        #[arg(long)]
        allow_unverified: bool,
    },
    /// Build every entry of a JSON-lines bench file and score it.
    Eval(EvalArgs),
    /// Print how a shell command is classified.
    Classify {
        #[arg(required = true, num_args = 1.., trailing_var_arg = true, allow_hyphen_values = true)]
        command: Vec<String>,
    },
    /// Build a Dockerfile directory and check whether the tests run in it.
    Replay {
        dir: PathBuf,
        #[arg(long, value_enum, default_value = "sim")]
        backend: BackendArg,
        #[arg(long)]
        world: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct BuildArgs {
    /// Local checkout to build.
    #[arg(long, conflicts_with = "remote", required_unless_present = "remote")]
    repo: Option<PathBuf>,
    /// GitHub repository as owner/repo.
    #[arg(long, requires = "sha")]
    remote: Option<String>,
    #[arg(long)]
    sha: Option<String>,
    /// `scripted:FILE` or `llm`. Defaults to the repository's .envforge/actions.json.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    /// Sim world JSON. Defaults to the repository's .envforge/sim.json.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long, default_value = "envforge-out")]
    out: PathBuf,
    #[command(flatten)]
    budget: BudgetArgs,
}

#[derive(clap::Args)]
struct EvalArgs {
    bench: PathBuf,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Where traces and Dockerfiles go.
    #[arg(long, default_value = "envforge-eval")]
    work_dir: PathBuf,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    world: Option<PathBuf>,
    #[command(flatten)]
    budget: BudgetArgs,
}

fn load_world(path: &Path) -> Result<SimWorld> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading sim world {}", path.display()))?;
    SimWorld::from_json(&text).with_context(|| format!("parsing sim world {}", path.display()))
}

fn backend(kind: BackendArg, world: Option<&Path>, repo_dir: Option<&Path>) -> Result<Backend> {
    match kind {
        BackendArg::Docker => {
            if !docker_available() {
                bail!("docker backend requested but no container runtime is reachable");
            }
            Ok(Backend::Container)
        }
        BackendArg::Sim => {
            let path = match (world, repo_dir) {
                (Some(w), _) => w.to_path_buf(),
                (None, Some(dir)) => dir.join(SIM_WORLD_FILE),
                (None, None) => bail!("the sim backend needs --world for remote repositories"),
            };
            Ok(Backend::Sim(Arc::new(load_world(&path)?)))
        }
    }
}

fn policy(spec: Option<&str>, repo_dir: Option<&Path>) -> Result<Box<dyn Policy>> {
    let script = match spec {
        Some("llm") => return Ok(Box::new(LlmPolicy::from_env()?)),
        Some(s) => match s.strip_prefix("scripted:") {
            Some(file) => PathBuf::from(file),
            None => bail!("unknown policy {s:?}; use scripted:FILE or llm"),
        },
        None => match repo_dir {
            Some(dir) => dir.join(ACTIONS_FILE),
            None => bail!("no --policy given and no local action script to fall back on"),
        },
    };
    let text = fs::read_to_string(&script)
        .with_context(|| format!("reading action script {}", script.display()))?;
    Ok(Box::new(ScriptedPolicy::from_json(&text)?))
}

fn build_config(budget: &BudgetArgs) -> BuildConfig {
    let mut cfg = BuildConfig::default();
    cfg.budget.max_turns = budget.budget_turns;
    cfg.budget.max_wall_seconds = budget.budget_seconds;
    cfg
}

fn local_spec(dir: &Path) -> Result<RepoSpec> {
    let dir = dir
        .canonicalize()
        .with_context(|| format!("repository {}", dir.display()))?;
    let name = dir
        .file_name()
        .map_or("repo".into(), |n| n.to_string_lossy().into_owned());
    Ok(RepoSpec {
        full_name: format!("local/{name}"),
        sha: "HEAD".into(),
        source: RepoSource::Local(dir),
    })
}

fn local_dir(entry: &BenchEntry) -> Option<&Path> {
    match &entry.source {
        RepoSource::Local(p) => Some(p.as_path()),
        RepoSource::Remote => None,
    }
}

fn cmd_build(args: BuildArgs) -> Result<bool> {
    let BuildArgs {
        repo,
        remote,
        sha,
        policy: policy_spec,
        backend: backend_kind,
        world,
        out,
        budget,
    } = args;
    let spec = match (repo, remote) {
        (Some(dir), _) => local_spec(&dir)?,
        (None, Some(name)) => RepoSpec::remote(name, sha.unwrap_or_default()),
        (None, None) => unreachable!("clap enforces one of --repo or --remote"),
    };
    let backend = backend(backend_kind, world.as_deref(), local_dir(&spec))?;
    let mut policy = policy(policy_spec.as_deref(), local_dir(&spec))?;
    let cfg = build_config(&budget);
    let trace = run_build_with(&spec, policy.as_mut(), &backend, &cfg, &mut |records| {
        for r in records {
            eprintln!("[{}] rc={} {}", r.turn, r.return_code, r.command.raw());
        }
    })?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let trace_path = out.join(format!("{}.trace.jsonl", entry_stem(&spec)));
    fs::write(&trace_path, serialize_trace(&trace))
        .with_context(|| format!("writing {}", trace_path.display()))?;
    println!("outcome: {:?}", trace.outcome);
    println!("trace: {}", trace_path.display());
    if trace.outcome != Outcome::Verified {
        println!("no Dockerfile: the build did not reach a passing test run");
        return Ok(false);
    }
    let dockerfile = emit_dockerfile(&trace, &spec, &out)?;
    println!("dockerfile: {}", dockerfile.display());
    Ok(true)
}

fn cmd_synthesize(
    trace_path: PathBuf,
    out: PathBuf,
    source: Option<PathBuf>,
    allow_unverified: bool,
) -> Result<bool> {
    let bytes =
        fs::read(&trace_path).with_context(|| format!("reading {}", trace_path.display()))?;
    let trace = parse_trace(&bytes).with_context(|| format!("parsing {}", trace_path.display()))?;
    if trace.outcome != Outcome::Verified && !allow_unverified {
        bail!(
            "trace outcome is {:?}; pass --allow-unverified to synthesize anyway",
            trace.outcome
        );
    }
    let dockerfile = match source {
        Some(src) => {
            let entry = RepoSpec {
                full_name: trace.repo.full_name.clone(),
                sha: trace.repo.sha.clone(),
                source: RepoSource::Local(src),
            };
            emit_dockerfile(&trace, &entry, &out)?
        }
        None => {
            let program = synthesize_with(
                &trace,
                SynthOptions {
                    copy_repo: false,
                    allow_unverified,
                },
            )?;
            write_program(&program, &out).with_context(|| format!("writing {}", out.display()))?;
            out.join("Dockerfile")
        }
    };
    println!("{}", dockerfile.display());
    Ok(true)
}

fn cmd_eval(args: EvalArgs) -> Result<bool> {
    let EvalArgs {
        bench,
        backend: backend_kind,
        jobs,
        out,
        work_dir,
        policy: policy_spec,
        world,
        budget,
    } = args;
    let text =
        fs::read_to_string(&bench).with_context(|| format!("reading {}", bench.display()))?;
    let base = bench.parent().unwrap_or(Path::new("."));
    let entries: Vec<BenchEntry> = read_bench(&text)?
        .into_iter()
        .map(|mut e| {
            if let RepoSource::Local(p) = &mut e.source {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
            e
        })
        .collect();
    let shared_world = match (backend_kind, &world) {
        (BackendArg::Sim, Some(w)) => Some(Arc::new(load_world(w)?)),
        _ => None,
    };
    if matches!(backend_kind, BackendArg::Docker) && !docker_available() {
        bail!("docker backend requested but no container runtime is reachable");
    }
    let cfg = EvalConfig {
        build: build_config(&budget),
        out_dir: work_dir,
        jobs: jobs.unwrap_or_else(default_jobs).max(1),
        backend_for: Box::new(move |entry| match (&shared_world, backend_kind) {
            (Some(w), _) => Ok(Backend::Sim(w.clone())),
            (None, kind) => backend(kind, None, local_dir(entry)).map_err(|e| format!("{e:#}")),
        }),
        policy_for: Box::new(move |entry| {
            policy(policy_spec.as_deref(), local_dir(entry)).map_err(|e| format!("{e:#}"))
        }),
    };
    let report = run_eval(&entries, &cfg)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&out, format!("{json}\n")).with_context(|| format!("writing {}", out.display()))?;
    let agg = &report.aggregate;
    let rate = |r: Option<f64>| r.map_or("n/a".to_string(), |v| format!("{v:.3}"));
    println!(
        "n={} dgsr={} ebsr={} report={}",
        agg.n,
        rate(agg.dgsr),
        rate(agg.ebsr),
        out.display()
    );
    Ok(true)
}

fn cmd_classify(words: Vec<String>) -> Result<bool> {
    let raw = match words.as_slice() {
        [one] => one.clone(),
        many => many.iter().map(|w| quote(w)).collect::<Vec<_>>().join(" "),
    };
    let command = Command::parse(raw.as_str())?;
    let classification = classify(&command)?;
    println!("{}", serde_json::to_string_pretty(&classification)?);
    Ok(true)
}

fn cmd_replay(dir: PathBuf, backend_kind: BackendArg, world: Option<PathBuf>) -> Result<bool> {
    let backend = backend(backend_kind, world.as_deref(), None)?;
    let (built, ran) = verify_dockerfile(&dir, &backend)?;
    println!(
        "{}",
        serde_json::json!({ "dockerfile_built": built, "tests_ran": ran })
    );
    Ok(built && ran)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Cmd::Build(args) => cmd_build(args),
        Cmd::Synthesize {
            trace,
            out,
            source,
            allow_unverified,
        } => cmd_synthesize(trace, out, source, allow_unverified),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Classify { command } => cmd_classify(command),
        Cmd::Replay {
            dir,
            backend,
            world,
        } => cmd_replay(dir, backend, world),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::from_env("ENVFORGE_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
