//! Benchmark runs and the DGSR/EBSR metrics.
//!
//! DGSR is the share of entries whose Dockerfile builds; EBSR is the share
//! whose Dockerfile builds and lets the full pytest run finish.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{drive, start_session, AgentError, BuildConfig, Policy, RepoSource, RepoSpec};
use crate::classify::Kind;
use crate::sandbox::container::{build_image, remove_image, ContainerSandbox};
use crate::sandbox::{Backend, SandboxError, TIMEOUT_RC};
use crate::synth::{
    self, parse_dockerfile, verify_sim, write_program, ReplayContext, SynthOptions, REPO_COPY_DIR,
};
use crate::trace::{BaseImage, Outcome, Trace, TraceWriter};

pub type BenchEntry = RepoSpec;

pub const BUCKET_MINUTES: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureCategory {
    Hardware,
    MissingToken,
    RepoDefect,
    InstallTimeout,
    RuntestTimeout,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub entry: BenchEntry,
    /// Absent when the build never started.
    pub trace_path: Option<PathBuf>,
    pub dockerfile_path: Option<PathBuf>,
    pub dockerfile_built: bool,
    pub tests_ran: bool,
    pub wall_seconds: f64,
    pub failure_category: Option<FailureCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub n: usize,
    /// `None` when `n` is zero.
    pub dgsr: Option<f64>,
    pub ebsr: Option<f64>,
    pub bucket_minutes: u64,
    /// Entry counts per bucket of wall time; bucket `i` covers `[i*10, (i+1)*10)` minutes.
    pub time_histogram: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub entries: Vec<BuildReport>,
    pub aggregate: AggregateReport,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("bench line {line_no}: {reason}")]
    BadBenchLine { line_no: usize, reason: String },
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("{0}")]
    Dockerfile(String),
    #[error(transparent)]
    Backend(#[from] SandboxError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Reads a JSON-lines bench file; blank lines and `#` comments are skipped.
pub fn read_bench(text: &str) -> Result<Vec<BenchEntry>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let entry: BenchEntry =
            serde_json::from_str(line).map_err(|e| EvalError::BadBenchLine {
                line_no: i + 1,
                reason: e.to_string(),
            })?;
        if !entry.full_name.contains('/') {
            return Err(EvalError::BadBenchLine {
                line_no: i + 1,
                reason: format!("full_name {:?} is not owner/repo", entry.full_name),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

pub fn score(reports: &[BuildReport]) -> AggregateReport {
    let n = reports.len();
    let rate = |count: usize| (n > 0).then(|| count as f64 / n as f64);
    let mut time_histogram = Vec::new();
    for r in reports {
        let bucket = (r.wall_seconds.max(0.0) / (BUCKET_MINUTES * 60) as f64) as usize;
        if time_histogram.len() <= bucket {
            time_histogram.resize(bucket + 1, 0);
        }
        time_histogram[bucket] += 1;
    }
    AggregateReport {
        n,
        dgsr: rate(reports.iter().filter(|r| r.dockerfile_built).count()),
        ebsr: rate(reports.iter().filter(|r| r.tests_ran).count()),
        bucket_minutes: BUCKET_MINUTES,
        time_histogram,
    }
}

const HARDWARE_MARKERS: &[&str] = &[
    "cuda",
    "nvidia",
    "no cuda gpus",
    "gpu",
    "out of memory",
    "no space left on device",
    "illegal instruction",
];
const TOKEN_MARKERS: &[&str] = &[
    "api key",
    "api_key",
    "token",
    "credentials",
    "unauthorized",
    "authentication",
    "permission denied (publickey)",
];
const REPO_MARKERS: &[&str] = &[
    "repository unavailable",
    "syntaxerror",
    "did not match any file",
    "not a git repository",
    "repository not found",
];

/// Picks a failure category from the trace and any build error text.
pub fn categorize_failure(trace: Option<&Trace>, error: Option<&str>) -> FailureCategory {
    if let Some(trace) = trace {
        let timed_out = |r: &&crate::trace::CommandRecord| r.return_code == TIMEOUT_RC;
        if trace
            .records
            .iter()
            .rev()
            .find(|r| r.command.is_test_run())
            .is_some_and(|r| timed_out(&r))
        {
            return FailureCategory::RuntestTimeout;
        }
        if trace
            .records
            .iter()
            .filter(|r| r.classification == Kind::Install)
            .any(|r| timed_out(&r))
        {
            return FailureCategory::InstallTimeout;
        }
    }
    let mut text = error.unwrap_or("").to_lowercase();
    if let Some(trace) = trace {
        if let Some(last) = trace.records.iter().rev().find(|r| r.command.is_test_run()) {
            text.push('\n');
            text.push_str(&last.stdout_excerpt.to_lowercase());
            text.push_str(&last.stderr_excerpt.to_lowercase());
        }
    }
    let hit = |markers: &[&str]| markers.iter().any(|m| text.contains(m));
    if hit(HARDWARE_MARKERS) {
        FailureCategory::Hardware
    } else if hit(TOKEN_MARKERS) {
        FailureCategory::MissingToken
    } else if hit(REPO_MARKERS) {
        FailureCategory::RepoDefect
    } else {
        FailureCategory::Other
    }
}

/// Builds the Dockerfile in `dir` and checks whether the tests run in it.
pub fn verify_dockerfile(dir: &Path, backend: &Backend) -> Result<(bool, bool), EvalError> {
    let path = dir.join("Dockerfile");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    match backend {
        Backend::Sim(world) => {
            let statements =
                parse_dockerfile(&text).map_err(|e| EvalError::Dockerfile(e.to_string()))?;
            let context = ReplayContext::from_dir(dir)?;
            Ok(verify_sim(&statements, &context, world.clone()))
        }
        Backend::Container => {
            static SEQ: AtomicUsize = AtomicUsize::new(0);
            let id = format!(
                "{}-{}",
                std::process::id(),
                SEQ.fetch_add(1, Ordering::SeqCst)
            );
            let tag = format!("envforge-verify-{id}");
            if let Err(log) = build_image(dir, &tag)? {
                tracing::info!(log = %log.lines().last().unwrap_or(""), "docker build failed");
                return Ok((false, false));
            }
            let ran = ContainerSandbox::start_from_tag(&tag, format!("verify-{id}"))
                .and_then(|mut sb| synth::tests_run_in(&mut sb));
            remove_image(&tag);
            Ok((true, ran?))
        }
    }
}

/// File-name-safe stem for an entry, e.g. `owner__repo`.
pub fn entry_stem(entry: &BenchEntry) -> String {
    entry
        .full_name
        .split('/')
        .map(|part| {
            part.chars()
                .map(|c| {
                    if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '_') {
                        c
                    } else {
                        '-'
                    }
                })
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join("__")
}

fn copy_tree(from: &Path, to: &Path) -> std::io::Result<()> {
    fs::create_dir_all(to)?;
    for entry in fs::read_dir(from)? {
        let entry = entry?;
        let name = entry.file_name();
        if name == ".git" || name == ".envforge" {
            continue;
        }
        let dest = to.join(&name);
        if entry.file_type()?.is_dir() {
            copy_tree(&entry.path(), &dest)?;
        } else {
            fs::copy(entry.path(), dest)?;
        }
    }
    Ok(())
}

/// Writes the Dockerfile directory for `trace`; local repositories are copied in under `src/`.
pub fn emit_dockerfile(
    trace: &Trace,
    entry: &BenchEntry,
    dir: &Path,
) -> Result<PathBuf, EvalError> {
    let copy_repo = matches!(entry.source, RepoSource::Local(_));
    let program = synth::synthesize_with(
        trace,
        SynthOptions {
            copy_repo,
            allow_unverified: true,
        },
    )
    .map_err(|e| EvalError::Dockerfile(e.to_string()))?;
    write_program(&program, dir).map_err(io_err(dir))?;
    if let RepoSource::Local(src) = &entry.source {
        copy_tree(src, &dir.join(REPO_COPY_DIR)).map_err(io_err(src))?;
    }
    Ok(dir.join("Dockerfile"))
}

pub type BackendFactory = Box<dyn Fn(&BenchEntry) -> Result<Backend, String> + Send + Sync>;
pub type PolicyFactory = Box<dyn Fn(&BenchEntry) -> Result<Box<dyn Policy>, String> + Send + Sync>;

/// Everything a worker needs to build one entry.
pub struct EvalConfig {
    pub build: BuildConfig,
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub backend_for: BackendFactory,
    pub policy_for: PolicyFactory,
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(4)
}

fn failed_report(
    entry: &BenchEntry,
    started: Instant,
    error: String,
    category: FailureCategory,
) -> BuildReport {
    BuildReport {
        entry: entry.clone(),
        trace_path: None,
        dockerfile_path: None,
        dockerfile_built: false,
        tests_ran: false,
        wall_seconds: started.elapsed().as_secs_f64(),
        failure_category: Some(category),
        outcome: None,
        error: Some(error),
    }
}

/// Builds one entry, writing `<stem>.trace.jsonl` and `<stem>/Dockerfile` under the output directory.
pub fn run_entry(entry: &BenchEntry, index: usize, cfg: &EvalConfig) -> BuildReport {
    let started = Instant::now();
    let stem = entry_stem(entry);
    let backend = match (cfg.backend_for)(entry) {
        Ok(b) => b,
        Err(e) => return failed_report(entry, started, e, FailureCategory::Other),
    };
    let mut policy = match (cfg.policy_for)(entry) {
        Ok(p) => p,
        Err(e) => return failed_report(entry, started, e, FailureCategory::Other),
    };
    let build_cfg = BuildConfig {
        session_id: format!("{}-{index}-{}", cfg.build.session_id, std::process::id()),
        ..cfg.build.clone()
    };
    let mut session = match start_session(entry, &backend, &build_cfg) {
        Ok(s) => s,
        Err(e) => {
            let category = match &e {
                AgentError::RepoUnavailable(_) => FailureCategory::RepoDefect,
                AgentError::BackendUnavailable(_) => categorize_failure(None, Some(&e.to_string())),
            };
            return failed_report(entry, started, e.to_string(), category);
        }
    };

    let trace_path = cfg.out_dir.join(format!("{stem}.trace.jsonl"));
    let writer = fs::File::create(&trace_path)
        .map_err(|e| e.to_string())
        .and_then(|f| {
            TraceWriter::start(BufWriter::new(f), &entry.repo_ref(), &BaseImage::default())
                .map_err(|e| e.to_string())
        });
    let mut writer = match writer {
        Ok(w) => w,
        Err(e) => return failed_report(entry, started, e, FailureCategory::Other),
    };
    let mut write_error: Option<String> = None;
    let mut append = |records: &[crate::trace::CommandRecord]| {
        for r in records {
            if let Err(e) = writer.append(r) {
                write_error.get_or_insert(e.to_string());
            }
        }
    };
    append(session.records());
    let outcome = drive(
        &mut session,
        policy.as_mut(),
        &build_cfg.budget,
        &mut append,
    );
    let trace = session.into_trace(outcome);
    if let Err(e) = writer.finish(&trace.final_base_image, outcome) {
        write_error.get_or_insert(e.to_string());
    }
    let build_seconds = started.elapsed().as_secs_f64();

    let mut report = BuildReport {
        entry: entry.clone(),
        trace_path: Some(trace_path),
        dockerfile_path: None,
        dockerfile_built: false,
        tests_ran: false,
        wall_seconds: build_seconds,
        failure_category: None,
        outcome: Some(outcome),
        error: write_error,
    };
    let dir = cfg.out_dir.join(&stem);
    match emit_dockerfile(&trace, entry, &dir).and_then(|path| {
        let pair = verify_dockerfile(&dir, &backend)?;
        Ok((path, pair))
    }) {
        Ok((path, (built, ran))) => {
            report.dockerfile_path = Some(path);
            report.dockerfile_built = built;
            report.tests_ran = built && ran;
        }
        Err(e) => report.error = Some(e.to_string()),
    }
    if !report.tests_ran {
        report.failure_category = Some(categorize_failure(Some(&trace), report.error.as_deref()));
    }
    report
}

/// Runs every entry on a pool of `cfg.jobs` workers; reports keep bench order.
pub fn run_eval(entries: &[BenchEntry], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    fs::create_dir_all(&cfg.out_dir).map_err(io_err(&cfg.out_dir))?;
    let next = AtomicUsize::new(0);
    let slots: Arc<Mutex<Vec<Option<BuildReport>>>> =
        Arc::new(Mutex::new(vec![None; entries.len()]));
    let jobs = cfg.jobs.clamp(1, entries.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(entry) = entries.get(i) else {
                    break;
                };
                tracing::info!(repo = %entry.full_name, "building");
                let report = run_entry(entry, i, cfg);
                slots.lock().expect("not poisoned")[i] = Some(report);
            });
        }
    });
    let entries: Vec<BuildReport> = Arc::try_unwrap(slots)
        .expect("workers joined")
        .into_inner()
        .expect("not poisoned")
        .into_iter()
        .map(|r| r.expect("every entry reported"))
        .collect();
    let aggregate = score(&entries);
    Ok(EvalReport { entries, aggregate })
}
