//! Command classification for rollback and Dockerfile synthesis.
//!
//! Every executed line is put in one bucket: `safe` lines skip the
//! snapshot and never reach the Dockerfile, `export` lines become `ENV`,
//! `install` lines get their package specs pinned, `code-edit` lines pull
//! in their patch assets, and `base-image-change` lines restart synthesis.

pub mod install;
pub mod shell;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use install::{parse_install_specs, InstallSpec, InstallTarget};
pub use shell::{parse_line, Line, ShellError, Stage};

use crate::trace::Command;

/// Commands that are treated as read-only when they do not redirect output.
///
/// `tee` writes files even without redirection; the list is kept verbatim.
pub const SAFE_COMMANDS: [&str; 44] = [
    "cd",
    "ls",
    "cat",
    "echo",
    "pwd",
    "whoami",
    "who",
    "date",
    "cal",
    "df",
    "du",
    "free",
    "uname",
    "uptime",
    "w",
    "ps",
    "pgrep",
    "top",
    "dmesg",
    "tail",
    "head",
    "grep",
    "find",
    "locate",
    "which",
    "file",
    "stat",
    "cmp",
    "diff",
    "xz",
    "unxz",
    "sort",
    "wc",
    "tr",
    "cut",
    "paste",
    "tee",
    "awk",
    "env",
    "printenv",
    "hostname",
    "ping",
    "traceroute",
    "ssh",
];

/// Agent verbs that swap the base image.
pub const BASE_IMAGE_VERBS: [&str; 2] = ["change_python_version", "clear_configuration"];
pub const EDIT_VERB: &str = "edit_file";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Unparsable(#[from] ShellError),
    #[error("unsupported flag: {0}")]
    UnsupportedFlag(String),
    #[error("not an install command")]
    NotInstall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Safe,
    Mutating,
    Export,
    Install,
    CodeEdit,
    BaseImageChange,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Safe => "safe",
            Kind::Mutating => "mutating",
            Kind::Export => "export",
            Kind::Install => "install",
            Kind::CodeEdit => "code-edit",
            Kind::BaseImageChange => "base-image-change",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detail {
    None,
    Export(Vec<(String, String)>),
    Install(Vec<InstallSpec>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classification {
    pub kind: Kind,
    pub detail: Detail,
}

impl Classification {
    fn plain(kind: Kind) -> Self {
        Self {
            kind,
            detail: Detail::None,
        }
    }

    pub fn export_pairs(&self) -> &[(String, String)] {
        match &self.detail {
            Detail::Export(pairs) => pairs,
            _ => &[],
        }
    }

    pub fn install_specs(&self) -> &[InstallSpec] {
        match &self.detail {
            Detail::Install(specs) => specs,
            _ => &[],
        }
    }
}

pub fn safe_list() -> BTreeSet<&'static str> {
    SAFE_COMMANDS.iter().copied().collect()
}

pub fn is_safe_program(name: &str) -> bool {
    SAFE_COMMANDS.contains(&name)
}

/// Parses `export K=V ...` arguments; `None` unless every argument is an assignment.
fn export_pairs(stage: &Stage) -> Option<Vec<(String, String)>> {
    if stage.program() != Some("export")
        || !stage.assignments.is_empty()
        || !stage.redirects.is_empty()
    {
        return None;
    }
    let mut pairs = Vec::new();
    for word in stage.argv.iter().skip(1) {
        if word.expands {
            return None;
        }
        let (key, value) = word.text.split_once('=')?;
        let valid = key
            .chars()
            .next()
            .is_some_and(|c| c == '_' || c.is_ascii_alphabetic())
            && key.chars().all(|c| c == '_' || c.is_ascii_alphanumeric());
        if !valid {
            return None;
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    (!pairs.is_empty()).then_some(pairs)
}

fn classify_stage(stage: &Stage) -> Classification {
    let Some(program) = stage.program() else {
        return Classification::plain(Kind::Mutating);
    };
    if BASE_IMAGE_VERBS.contains(&program) {
        return Classification::plain(Kind::BaseImageChange);
    }
    if program == EDIT_VERB {
        return Classification::plain(Kind::CodeEdit);
    }
    if let Some(pairs) = export_pairs(stage) {
        return Classification {
            kind: Kind::Export,
            detail: Detail::Export(pairs),
        };
    }
    if install::install_tool(stage).is_some() {
        return match install::stage_specs(stage) {
            Ok(specs) => Classification {
                kind: Kind::Install,
                detail: Detail::Install(specs),
            },
            Err(_) => Classification::plain(Kind::Mutating),
        };
    }
    if is_safe_program(program) {
        return Classification::plain(Kind::Safe);
    }
    Classification::plain(Kind::Mutating)
}

/// Classifies a parsed line. A chain takes its most dangerous member.
pub fn classify_line(line: &Line) -> Classification {
    if line.complex || line.chain.is_empty() {
        return Classification::plain(Kind::Mutating);
    }
    let stages: Vec<Classification> = line.stages().map(classify_stage).collect();
    let has = |k: Kind| stages.iter().any(|c| c.kind == k);

    if has(Kind::BaseImageChange) {
        return Classification::plain(Kind::BaseImageChange);
    }
    if has(Kind::CodeEdit) {
        return Classification::plain(Kind::CodeEdit);
    }
    if has(Kind::Install) {
        let specs = stages
            .iter()
            .flat_map(|c| c.install_specs().iter().cloned())
            .collect();
        return Classification {
            kind: Kind::Install,
            detail: Detail::Install(specs),
        };
    }
    let plain_chain = line
        .chain
        .iter()
        .all(|item| item.stages.len() == 1 && item.connector != shell::Connector::Or);
    if plain_chain && stages.iter().all(|c| c.kind == Kind::Export) {
        let pairs = stages
            .iter()
            .flat_map(|c| c.export_pairs().iter().cloned())
            .collect();
        return Classification {
            kind: Kind::Export,
            detail: Detail::Export(pairs),
        };
    }
    if !line.redirects_output() && stages.iter().all(|c| c.kind == Kind::Safe) {
        return Classification::plain(Kind::Safe);
    }
    Classification::plain(Kind::Mutating)
}

pub fn classify(command: &Command) -> Result<Classification, ClassifyError> {
    let line = parse_line(command.raw())?;
    Ok(classify_line(&line))
}

/// Renders export pairs back into a single `export` line.
pub fn render_export(pairs: &[(String, String)]) -> String {
    let mut out = String::from("export");
    for (k, v) in pairs {
        out.push(' ');
        out.push_str(&shell::quote(&format!("{k}={v}")));
    }
    out
}
