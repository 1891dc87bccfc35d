//! Shared vocabulary: commands, execution records, traces, base images,
//! and the `*.trace.jsonl` file format.
//!
//! A trace file is one JSON object per line: a header, one line per
//! executed command, and a footer. It is written as the build progresses
//! so a crashed build still leaves every completed record on disk.

use std::fmt;
use std::io::{self, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::classify::{parse_line, Kind, ShellError};

pub const SCHEMA_VERSION: &str = "1";
pub const DEFAULT_IMAGE: &str = "python:3.10";
pub const TEST_VERBS: [&str; 2] = ["runtest", "poetryruntest"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tool {
    Pip,
    Apt,
}

impl Tool {
    pub fn as_str(self) -> &'static str {
        match self {
            Tool::Pip => "pip",
            Tool::Apt => "apt",
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Tool {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pip" | "pip3" => Ok(Tool::Pip),
            "apt" | "apt-get" => Ok(Tool::Apt),
            other => Err(format!("unknown tool '{other}'")),
        }
    }
}

/// A prebuilt environment a build starts from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BaseImage {
    name: String,
    python_version: Option<String>,
}

impl BaseImage {
    pub fn new(name: impl Into<String>) -> Result<Self, String> {
        let name = name.into().trim().to_string();
        if name.is_empty() {
            return Err("base image name is empty".into());
        }
        let python_version = name.strip_prefix("python:").and_then(|tag| {
            let version: String = tag
                .chars()
                .take_while(|c| c.is_ascii_digit() || *c == '.')
                .collect();
            let parts: Vec<&str> = version.split('.').collect();
            (parts.len() >= 2 && parts.iter().all(|p| !p.is_empty()))
                .then(|| format!("{}.{}", parts[0], parts[1]))
        });
        Ok(Self {
            name,
            python_version,
        })
    }

    pub fn python(version: &str) -> Result<Self, String> {
        Self::new(format!("python:{version}"))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn python_version(&self) -> Option<&str> {
        self.python_version.as_deref()
    }
}

impl Default for BaseImage {
    fn default() -> Self {
        Self::new(DEFAULT_IMAGE).expect("default image name is valid")
    }
}

impl fmt::Display for BaseImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl Serialize for BaseImage {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.name)
    }
}

impl<'de> Deserialize<'de> for BaseImage {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = String::deserialize(d)?;
        BaseImage::new(name).map_err(serde::de::Error::custom)
    }
}

/// One shell line as issued to the sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Command {
    raw: String,
    argv0: String,
    redirects_output: bool,
}

impl Command {
    pub fn parse(raw: impl Into<String>) -> Result<Self, ShellError> {
        let raw = raw.into();
        if raw.trim().is_empty() {
            return Err(ShellError::Syntax("empty command".into()));
        }
        let line = parse_line(&raw)?;
        let argv0 = line
            .chain
            .first()
            .and_then(|item| item.stages.first())
            .map(|stage| match stage.program() {
                Some(p) => p.to_string(),
                None => raw
                    .split_whitespace()
                    .next()
                    .unwrap_or_default()
                    .to_string(),
            })
            .unwrap_or_default();
        Ok(Self {
            redirects_output: line.redirects_output(),
            raw,
            argv0,
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn argv0(&self) -> &str {
        &self.argv0
    }

    pub fn redirects_output(&self) -> bool {
        self.redirects_output
    }

    pub fn is_test_run(&self) -> bool {
        TEST_VERBS.contains(&self.argv0.as_str())
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SnapshotId(pub String);

impl fmt::Display for SnapshotId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A file the command needed uploaded into the sandbox before it ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Asset {
    pub path: String,
    pub content: String,
}

/// (tool, package, resolved version)
pub type InstalledPackage = (Tool, String, String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandRecord {
    pub turn: u32,
    pub command: Command,
    pub cwd: String,
    pub return_code: i32,
    pub classification: Kind,
    pub stdout_excerpt: String,
    pub stderr_excerpt: String,
    pub snapshot_before: Option<SnapshotId>,
    pub rolled_back: bool,
    pub env_delta: Vec<(String, String)>,
    pub installed: Vec<InstalledPackage>,
    pub assets: Vec<Asset>,
    pub thought: Option<String>,
}

impl CommandRecord {
    pub fn succeeded(&self) -> bool {
        self.return_code == 0
    }

    fn check(&self) -> Result<(), String> {
        let at = |msg: &str| format!("record {}: {msg}", self.turn);
        if self.turn < 1 {
            return Err(at("turn must be >= 1"));
        }
        if !self.cwd.starts_with('/') {
            return Err(at("cwd must be absolute"));
        }
        if self.rolled_back && self.return_code == 0 {
            return Err(at("rolled back with return code 0"));
        }
        if self.rolled_back && self.snapshot_before.is_none() {
            return Err(at("rolled back without a snapshot"));
        }
        if self.classification == Kind::Safe && self.snapshot_before.is_some() {
            return Err(at("safe command carries a snapshot"));
        }
        if !self.env_delta.is_empty() && self.classification != Kind::Export {
            return Err(at("env_delta on a non-export command"));
        }
        if self.classification == Kind::Export && self.succeeded() && self.env_delta.is_empty() {
            return Err(at("successful export without env_delta"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Verified,
    BudgetExhausted,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoRef {
    pub full_name: String,
    pub sha: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub repo: RepoRef,
    pub initial_base_image: BaseImage,
    pub records: Vec<CommandRecord>,
    pub final_base_image: BaseImage,
    pub outcome: Outcome,
}

impl Trace {
    pub fn validate(&self) -> Result<(), String> {
        let mut last_turn = 0;
        for record in &self.records {
            if record.turn <= last_turn {
                return Err(format!(
                    "turn {} does not follow turn {last_turn}",
                    record.turn
                ));
            }
            last_turn = record.turn;
            record.check()?;
        }
        let changed = self
            .records
            .iter()
            .any(|r| r.classification == Kind::BaseImageChange);
        if !changed && self.final_base_image != self.initial_base_image {
            return Err("final base image differs without a base-image change".into());
        }
        if self.outcome == Outcome::Verified {
            let last_test = self.records.iter().rev().find(|r| r.command.is_test_run());
            match last_test {
                Some(r) if r.succeeded() => {}
                Some(_) => return Err("verified trace whose last test run failed".into()),
                None => return Err("verified trace without a test run".into()),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("malformed trace line {line_no}: {reason}")]
    MalformedLine { line_no: usize, reason: String },
    #[error("trace invariant violated: {0}")]
    InvariantViolation(String),
    #[error("unsupported trace schema version {found:?}")]
    VersionMismatch { found: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    schema_version: String,
    repo_full_name: String,
    sha: String,
    initial_base_image: BaseImage,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    turn: u32,
    raw: String,
    cwd: String,
    return_code: i32,
    classification: Kind,
    stdout_excerpt: String,
    stderr_excerpt: String,
    snapshot_before: Option<SnapshotId>,
    rolled_back: bool,
    env_delta: Vec<(String, String)>,
    installed: Vec<InstalledPackage>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    assets: Vec<Asset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thought: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FooterLine {
    final_base_image: BaseImage,
    outcome: Outcome,
}

impl From<&CommandRecord> for RecordLine {
    fn from(r: &CommandRecord) -> Self {
        Self {
            turn: r.turn,
            raw: r.command.raw().to_string(),
            cwd: r.cwd.clone(),
            return_code: r.return_code,
            classification: r.classification,
            stdout_excerpt: r.stdout_excerpt.clone(),
            stderr_excerpt: r.stderr_excerpt.clone(),
            snapshot_before: r.snapshot_before.clone(),
            rolled_back: r.rolled_back,
            env_delta: r.env_delta.clone(),
            installed: r.installed.clone(),
            assets: r.assets.clone(),
            thought: r.thought.clone(),
        }
    }
}

fn json_line<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string(value).expect("trace lines always serialize");
    s.push('\n');
    s
}

fn header_line(repo: &RepoRef, image: &BaseImage) -> String {
    json_line(&HeaderLine {
        schema_version: SCHEMA_VERSION.to_string(),
        repo_full_name: repo.full_name.clone(),
        sha: repo.sha.clone(),
        initial_base_image: image.clone(),
    })
}

pub fn record_line(record: &CommandRecord) -> String {
    json_line(&RecordLine::from(record))
}

fn footer_line(image: &BaseImage, outcome: Outcome) -> String {
    json_line(&FooterLine {
        final_base_image: image.clone(),
        outcome,
    })
}

pub fn serialize_trace(trace: &Trace) -> Vec<u8> {
    let mut out = header_line(&trace.repo, &trace.initial_base_image);
    for record in &trace.records {
        out.push_str(&record_line(record));
    }
    out.push_str(&footer_line(&trace.final_base_image, trace.outcome));
    out.into_bytes()
}

pub fn parse_trace(bytes: &[u8]) -> Result<Trace, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::MalformedLine {
        line_no: 1,
        reason: format!("not UTF-8: {e}"),
    })?;
    let lines: Vec<&str> = text.lines().collect();
    let malformed = |line_no: usize, reason: String| TraceError::MalformedLine { line_no, reason };
    if lines.len() < 2 {
        return Err(malformed(
            lines.len() + 1,
            "expected header and footer lines".into(),
        ));
    }

    let header_value: serde_json::Value =
        serde_json::from_str(lines[0]).map_err(|e| malformed(1, e.to_string()))?;
    match header_value.get("schema_version").and_then(|v| v.as_str()) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => {
            return Err(TraceError::VersionMismatch {
                found: other.to_string(),
            })
        }
        None => return Err(malformed(1, "missing schema_version".into())),
    }
    let header: HeaderLine =
        serde_json::from_value(header_value).map_err(|e| malformed(1, e.to_string()))?;

    let last = lines.len() - 1;
    let footer: FooterLine =
        serde_json::from_str(lines[last]).map_err(|e| malformed(last + 1, e.to_string()))?;

    let mut records = Vec::with_capacity(last.saturating_sub(1));
    for (idx, line) in lines.iter().enumerate().take(last).skip(1) {
        let line_no = idx + 1;
        let rec: RecordLine =
            serde_json::from_str(line).map_err(|e| malformed(line_no, e.to_string()))?;
        let command = Command::parse(rec.raw).map_err(|e| malformed(line_no, e.to_string()))?;
        if let Some(prev) = records.last().map(|r: &CommandRecord| r.turn) {
            if rec.turn <= prev {
                return Err(TraceError::InvariantViolation(format!(
                    "line {line_no}: turn {} after turn {prev}",
                    rec.turn
                )));
            }
        }
        records.push(CommandRecord {
            turn: rec.turn,
            command,
            cwd: rec.cwd,
            return_code: rec.return_code,
            classification: rec.classification,
            stdout_excerpt: rec.stdout_excerpt,
            stderr_excerpt: rec.stderr_excerpt,
            snapshot_before: rec.snapshot_before,
            rolled_back: rec.rolled_back,
            env_delta: rec.env_delta,
            installed: rec.installed,
            assets: rec.assets,
            thought: rec.thought,
        });
    }

    let trace = Trace {
        repo: RepoRef {
            full_name: header.repo_full_name,
            sha: header.sha,
        },
        initial_base_image: header.initial_base_image,
        records,
        final_base_image: footer.final_base_image,
        outcome: footer.outcome,
    };
    trace.validate().map_err(TraceError::InvariantViolation)?;
    Ok(trace)
}

/// Streams a trace to disk one line at a time.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn start(mut out: W, repo: &RepoRef, image: &BaseImage) -> io::Result<Self> {
        out.write_all(header_line(repo, image).as_bytes())?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, record: &CommandRecord) -> io::Result<()> {
        self.out.write_all(record_line(record).as_bytes())?;
        self.out.flush()
    }

    pub fn finish(mut self, image: &BaseImage, outcome: Outcome) -> io::Result<W> {
        self.out.write_all(footer_line(image, outcome).as_bytes())?;
        self.out.flush()?;
        Ok(self.out)
    }
}
