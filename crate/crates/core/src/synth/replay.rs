//! Runs Dockerfile statements against a fresh sim sandbox.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{parse_env_payload, DockerfileProgram, Keyword, Statement, ASSETS_DIR};
use crate::agent::REPO_DIR;
use crate::classify::shell::quote;
use crate::sandbox::sim::read_host_tree;
use crate::sandbox::{Sandbox, SandboxError, SimSandbox, SimWorld};
use crate::trace::{BaseImage, Command};

/// COPY sources, keyed by path relative to the Dockerfile.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayContext {
    pub files: BTreeMap<String, String>,
}

impl ReplayContext {
    pub fn from_program(program: &DockerfileProgram) -> Self {
        Self {
            files: program
                .assets
                .iter()
                .map(|(name, content)| (format!("{ASSETS_DIR}/{name}"), content.clone()))
                .collect(),
        }
    }

    pub fn from_dir(dir: &Path) -> Result<Self, SandboxError> {
        let mut files = read_host_tree(dir)?;
        files.remove("Dockerfile");
        Ok(Self { files })
    }

    /// Adds a tree under `prefix`, e.g. a checkout under `src`.
    pub fn with_tree(mut self, prefix: &str, tree: &BTreeMap<String, String>) -> Self {
        for (rel, content) in tree {
            self.files
                .insert(format!("{prefix}/{rel}"), content.clone());
        }
        self
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("statement {index} `{statement}` exited with {return_code}: {stderr}")]
    StepFailed {
        index: usize,
        statement: String,
        return_code: i32,
        stderr: String,
    },
    #[error("statement {index}: {reason}")]
    BadStatement { index: usize, reason: String },
    #[error("COPY source {0} not found")]
    MissingSource(String),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

/// Builds the image statement by statement; the sandbox is the result.
pub fn replay_sim(
    statements: &[Statement],
    context: &ReplayContext,
    world: Arc<SimWorld>,
) -> Result<SimSandbox, ReplayError> {
    let Some((first, rest)) = statements
        .split_first()
        .filter(|(f, _)| f.keyword == Keyword::From)
    else {
        return Err(ReplayError::BadStatement {
            index: 0,
            reason: "the first statement must be FROM".into(),
        });
    };
    let image = BaseImage::new(first.payload.clone())
        .map_err(|reason| ReplayError::BadStatement { index: 0, reason })?;
    let mut sb = SimSandbox::start(world, image, "replay")?;
    for (i, stmt) in rest.iter().enumerate() {
        let index = i + 1;
        let bad = |reason: &str| ReplayError::BadStatement {
            index,
            reason: reason.into(),
        };
        let raw = match stmt.keyword {
            Keyword::From => return Err(bad("only one FROM is supported")),
            Keyword::Copy => {
                let (src, dest) = stmt
                    .payload
                    .split_once(' ')
                    .map(|(s, d)| (s.trim(), d.trim()))
                    .ok_or_else(|| bad("COPY needs a source and a destination"))?;
                if let Some(content) = context.files.get(src) {
                    sb.write_file(dest, content)?;
                } else {
                    let prefix = format!("{}/", src.trim_end_matches('/'));
                    let tree: BTreeMap<String, String> = context
                        .files
                        .iter()
                        .filter_map(|(k, v)| {
                            k.strip_prefix(&prefix)
                                .map(|rel| (rel.to_string(), v.clone()))
                        })
                        .collect();
                    if tree.is_empty() {
                        return Err(ReplayError::MissingSource(src.to_string()));
                    }
                    sb.load_files(dest, &tree);
                }
                continue;
            }
            Keyword::Env => {
                let (key, value) =
                    parse_env_payload(&stmt.payload).ok_or_else(|| bad("malformed ENV"))?;
                format!("export {}", quote(&format!("{key}={value}")))
            }
            Keyword::Run => stmt.payload.clone(),
        };
        let command = Command::parse(raw.as_str()).map_err(|e| bad(&e.to_string()))?;
        let result = sb.exec(&command)?;
        if result.return_code != 0 {
            return Err(ReplayError::StepFailed {
                index,
                statement: format!("{} {}", stmt.keyword, stmt.payload),
                return_code: result.return_code,
                stderr: result.stderr,
            });
        }
    }
    Ok(sb)
}

/// Whether the full pytest run starts and finishes with exit 0 or 1.
pub fn tests_run_in(sb: &mut dyn Sandbox) -> Result<bool, SandboxError> {
    for prefix in ["", "poetry run "] {
        let exec = |sb: &mut dyn Sandbox, args: &str| {
            sb.exec(
                &Command::parse(format!("cd {REPO_DIR} && {prefix}pytest{args}"))
                    .expect("test command parses"),
            )
        };
        let probe = match exec(sb, " --collect-only -q") {
            Ok(r) => r,
            Err(SandboxError::Timeout { .. }) => return Ok(false),
            Err(e) => return Err(e),
        };
        if probe.return_code == 127 {
            continue;
        }
        if probe.return_code != 0 {
            return Ok(false);
        }
        return match exec(sb, "") {
            Ok(r) => Ok(matches!(r.return_code, 0 | 1)),
            Err(SandboxError::Timeout { .. }) => Ok(false),
            Err(e) => Err(e),
        };
    }
    Ok(false)
}

/// The (dockerfile_built, tests_ran) pair for the sim backend.
pub fn verify_sim(
    statements: &[Statement],
    context: &ReplayContext,
    world: Arc<SimWorld>,
) -> (bool, bool) {
    match replay_sim(statements, context, world) {
        Ok(mut sb) => (true, tests_run_in(&mut sb).unwrap_or(false)),
        Err(e) => {
            tracing::debug!(error = %e, "sim replay failed");
            (false, false)
        }
    }
}
