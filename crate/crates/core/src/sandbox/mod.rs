//! Isolated execution environments with snapshot and rollback.
//!
//! Two backends share the [`Sandbox`] trait: [`container::ContainerSandbox`]
//! drives a real container through the `docker` CLI, and [`sim::SimSandbox`]
//! is a deterministic in-memory model used by the property suites.
//!
//! Each `exec` runs in a fresh shell, so the sandbox itself tracks the
//! working directory (changed only by a bare `cd`) and the exported
//! environment (changed only by a pure `export` line).

pub mod container;
pub mod guard;
pub mod helpers;
pub mod sim;
mod sim_shell;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::classify::{classify_line, parse_line, Kind};
use crate::trace::{BaseImage, Command, SnapshotId, Tool};

pub use guard::{exec_guarded, exec_guarded_by, exec_guarded_with, GuardConfig, GuardError};
pub use sim::{SimSandbox, SimState, SimWorld};

pub const DEFAULT_COMMAND_TIMEOUT: Duration = Duration::from_secs(600);
/// Return code recorded for a command that hit its time limit.
pub const TIMEOUT_RC: i32 = 124;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Container,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub return_code: i32,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
}

impl ExecResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        Self {
            return_code: 0,
            stdout: stdout.into(),
            stderr: String::new(),
            duration_ms: 0,
        }
    }

    pub fn failed(return_code: i32, stderr: impl Into<String>) -> Self {
        Self {
            return_code,
            stdout: String::new(),
            stderr: stderr.into(),
            duration_ms: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("command timed out after {limit:?}")]
    Timeout { limit: Duration },
    #[error("backend i/o error: {0}")]
    BackendIo(String),
    #[error("unknown snapshot {0}")]
    UnknownSnapshot(SnapshotId),
}

pub trait Sandbox: Send {
    fn backend(&self) -> BackendKind;
    fn session_id(&self) -> &str;
    fn base_image(&self) -> &BaseImage;
    fn cwd(&self) -> &str;
    /// Variables set by earlier `export` lines.
    fn exported_env(&self) -> &BTreeMap<String, String>;

    fn exec(&mut self, command: &Command) -> Result<ExecResult, SandboxError>;
    fn snapshot(&mut self) -> Result<SnapshotId, SandboxError>;
    /// Keeps a snapshot alive past the next `snapshot` call.
    fn pin_snapshot(&mut self, id: &SnapshotId) -> Result<(), SandboxError>;
    fn rollback(&mut self, id: &SnapshotId) -> Result<(), SandboxError>;
    fn reset_with_base_image(&mut self, image: &BaseImage) -> Result<(), SandboxError>;
    fn installed_versions(&mut self, tool: Tool) -> Result<BTreeMap<String, String>, SandboxError>;

    fn write_file(&mut self, path: &str, content: &str) -> Result<(), SandboxError>;
    fn read_file(&mut self, path: &str) -> Result<Option<String>, SandboxError>;
    /// Copies a host directory tree into the sandbox.
    fn upload_dir(&mut self, host: &Path, dest: &str) -> Result<(), SandboxError>;
    fn set_command_timeout(&mut self, limit: Duration);

    fn as_sim(&self) -> Option<&SimSandbox> {
        None
    }
}

/// Starts sandboxes of one kind.
#[derive(Debug, Clone)]
pub enum Backend {
    Sim(Arc<SimWorld>),
    Container,
}

impl Backend {
    pub fn kind(&self) -> BackendKind {
        match self {
            Backend::Sim(_) => BackendKind::Sim,
            Backend::Container => BackendKind::Container,
        }
    }

    pub fn start(
        &self,
        image: &BaseImage,
        session_id: &str,
    ) -> Result<Box<dyn Sandbox>, SandboxError> {
        Ok(match self {
            Backend::Sim(world) => {
                Box::new(SimSandbox::start(world.clone(), image.clone(), session_id)?)
            }
            Backend::Container => Box::new(container::ContainerSandbox::start(
                image.clone(),
                session_id,
            )?),
        })
    }
}

/// What a line does to the session bookkeeping besides running.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum SessionEffect {
    None,
    Cd(String),
    Export(Vec<(String, String)>),
}

pub(crate) fn session_effect(command: &Command) -> SessionEffect {
    let Ok(line) = parse_line(command.raw()) else {
        return SessionEffect::None;
    };
    if line.is_single_stage() && !line.complex {
        let stage = &line.chain[0].stages[0];
        if stage.program() == Some("cd")
            && stage.redirects.is_empty()
            && stage.assignments.is_empty()
        {
            let target = stage.args().next().unwrap_or("/root").to_string();
            return SessionEffect::Cd(target);
        }
    }
    let class = classify_line(&line);
    if class.kind == Kind::Export {
        return SessionEffect::Export(class.export_pairs().to_vec());
    }
    SessionEffect::None
}

/// Lexically resolves `path` against `cwd`.
pub fn resolve_path(cwd: &str, path: &str) -> String {
    let joined = if path.starts_with('/') {
        path.to_string()
    } else {
        format!("{}/{}", cwd.trim_end_matches('/'), path)
    };
    let mut parts: Vec<&str> = Vec::new();
    for part in joined.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            p => parts.push(p),
        }
    }
    format!("/{}", parts.join("/"))
}

pub fn parent_dir(path: &str) -> String {
    match path.rfind('/') {
        Some(0) | None => "/".to_string(),
        Some(i) => path[..i].to_string(),
    }
}

/// pip's canonical project name.
pub fn normalize_package(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut last_dash = false;
    for c in name.trim().chars() {
        if matches!(c, '-' | '_' | '.') {
            if !last_dash {
                out.push('-');
            }
            last_dash = true;
        } else {
            out.push(c.to_ascii_lowercase());
            last_dash = false;
        }
    }
    out
}

pub fn normalize_for(tool: Tool, name: &str) -> String {
    match tool {
        Tool::Pip => normalize_package(name),
        Tool::Apt => name.trim().to_string(),
    }
}
