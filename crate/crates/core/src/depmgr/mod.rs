//! Waiting-list / conflict-list dependency protocol.
//!
//! Packages are queued on a waiting list and installed together by
//! [`DepLists::download`]. A second request for a queued package with a
//! different constraint is parked on the conflict list until the policy
//! settles it with [`DepLists::cl_solve`].

pub mod version;

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::classify::install::split_requirement;
use crate::classify::shell::quote;
use crate::sandbox::{
    exec_guarded_with, normalize_for, GuardConfig, GuardError, Sandbox, SandboxError,
};
use crate::trace::{Command, CommandRecord, Tool};
pub use version::{
    constraint_conflicts, constraint_satisfies, BadConstraint, Version, VersionConstraint,
};

#[derive(Debug, Error)]
pub enum DepError {
    #[error(transparent)]
    BadConstraint(#[from] BadConstraint),
    #[error("file not found: {0}")]
    FileMissing(String),
    #[error("line {line_no}: {reason}")]
    ParseError { line_no: usize, reason: String },
    #[error("no conflict pending for {0}")]
    NoSuchConflict(String),
    #[error("the conflict list must be empty before downloading ({0} pending)")]
    ConflictsPending(usize),
    #[error("the waiting list is empty")]
    EmptyWaitingList,
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WaitingItem {
    pub package: String,
    /// Extras in brackets, e.g. `[socks]`; pip only.
    pub extras: String,
    pub constraint: VersionConstraint,
    pub tool: Tool,
}

impl WaitingItem {
    pub fn new(package: &str, constraint: &str, tool: Tool) -> Result<Self, DepError> {
        let (name, extras, _) = split_requirement(package);
        if name.is_empty() {
            return Err(DepError::ParseError {
                line_no: 0,
                reason: "package name is empty".into(),
            });
        }
        let constraint: VersionConstraint = constraint.parse()?;
        if tool == Tool::Apt && !constraint.is_latest() {
            return Err(BadConstraint {
                text: constraint.to_string(),
                reason: "apt packages take no version constraints".into(),
            }
            .into());
        }
        Ok(Self {
            package: normalize_for(tool, &name),
            extras,
            constraint,
            tool,
        })
    }

    /// The requirement as pip would take it, e.g. `numpy>=1.21`.
    pub fn requirement(&self) -> String {
        format!("{}{}{}", self.package, self.extras, self.constraint)
    }

    pub fn install_command(&self) -> String {
        match self.tool {
            Tool::Pip => format!("pip install {}", quote(&self.requirement())),
            Tool::Apt => format!("apt-get install -y {}", self.package),
        }
    }
}

fn constraint_text(c: &VersionConstraint) -> String {
    if c.is_latest() {
        "latest".into()
    } else {
        c.to_string()
    }
}

impl fmt::Display for WaitingItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}{} {}",
            self.tool,
            self.package,
            self.extras,
            constraint_text(&self.constraint)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictItem {
    pub package: String,
    pub tool: Tool,
    pub existing: VersionConstraint,
    pub incoming: VersionConstraint,
}

impl fmt::Display for ConflictItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: existing {} | incoming {}",
            self.tool,
            self.package,
            constraint_text(&self.existing),
            constraint_text(&self.incoming)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AddOutcome {
    Added,
    /// Same package and constraint already queued.
    Unchanged,
    ConflictQueued,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    UseVersion(VersionConstraint),
    KeepOriginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownloadStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DownloadItem {
    pub package: String,
    pub tool: Tool,
    pub version: Option<String>,
    pub status: DownloadStatus,
}

#[derive(Debug, Clone, Default)]
pub struct DownloadReport {
    pub items: Vec<DownloadItem>,
    pub records: Vec<CommandRecord>,
    /// Combined output of the install commands, in order.
    pub log: String,
}

#[derive(Debug, Clone, Default)]
pub struct DepLists {
    waiting: Vec<WaitingItem>,
    conflicts: VecDeque<ConflictItem>,
}

impl DepLists {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn waiting(&self) -> &[WaitingItem] {
        &self.waiting
    }

    pub fn conflicts(&self) -> impl Iterator<Item = &ConflictItem> {
        self.conflicts.iter()
    }

    pub fn wl_add(&mut self, item: WaitingItem) -> AddOutcome {
        let Some(existing) = self
            .waiting
            .iter()
            .find(|w| w.package == item.package && w.tool == item.tool)
        else {
            self.waiting.push(item);
            return AddOutcome::Added;
        };
        if existing.constraint.to_string() == item.constraint.to_string() {
            return AddOutcome::Unchanged;
        }
        let conflict = ConflictItem {
            package: item.package,
            tool: item.tool,
            existing: existing.constraint.clone(),
            incoming: item.constraint,
        };
        if !self.conflicts.contains(&conflict) {
            self.conflicts.push_back(conflict);
        }
        AddOutcome::ConflictQueued
    }

    /// Adds every requirement line of `text`; returns how many were new.
    ///
    /// Option lines such as `-e .` or `--index-url` are skipped.
    pub fn wl_add_requirements(&mut self, text: &str) -> Result<usize, DepError> {
        let mut items = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let line = line.split(';').next().unwrap_or("").trim();
            if line.is_empty() || line.starts_with('-') {
                continue;
            }
            let (name, extras, constraint) = split_requirement(line);
            let valid = !name.is_empty()
                && name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
            if !valid {
                return Err(DepError::ParseError {
                    line_no: i + 1,
                    reason: format!("not a requirement: {raw:?}"),
                });
            }
            let item = WaitingItem::new(&format!("{name}{extras}"), &constraint, Tool::Pip)
                .map_err(|e| DepError::ParseError {
                    line_no: i + 1,
                    reason: e.to_string(),
                })?;
            items.push(item);
        }
        Ok(items
            .into_iter()
            .filter(|item| self.wl_add(item.clone()) == AddOutcome::Added)
            .count())
    }

    /// Reads a requirements-style file from the sandbox and queues its entries.
    pub fn wl_addfile(&mut self, sb: &mut dyn Sandbox, path: &str) -> Result<usize, DepError> {
        let text = sb
            .read_file(path)?
            .ok_or_else(|| DepError::FileMissing(path.to_string()))?;
        self.wl_add_requirements(&text)
    }

    pub fn wl_clear(&mut self) {
        self.waiting.clear();
    }

    pub fn cl_clear(&mut self) {
        self.conflicts.clear();
    }

    /// Settles the first pending conflict, which must concern `package`.
    pub fn cl_solve(
        &mut self,
        package: &str,
        tool: Tool,
        resolution: Resolution,
    ) -> Result<ConflictItem, DepError> {
        let key = normalize_for(tool, package);
        let head_matches = self
            .conflicts
            .front()
            .is_some_and(|c| c.package == key && c.tool == tool);
        if !head_matches {
            return Err(DepError::NoSuchConflict(format!("{tool} {key}")));
        }
        if let Resolution::UseVersion(c) = &resolution {
            if tool == Tool::Apt && !c.is_latest() {
                return Err(BadConstraint {
                    text: c.to_string(),
                    reason: "apt packages take no version constraints".into(),
                }
                .into());
            }
            if let Some(entry) = self
                .waiting
                .iter_mut()
                .find(|w| w.package == key && w.tool == tool)
            {
                entry.constraint = c.clone();
            }
        }
        Ok(self.conflicts.pop_front().expect("checked non-empty"))
    }

    /// Settles whatever conflict is first in line.
    pub fn cl_solve_next(&mut self, resolution: Resolution) -> Result<ConflictItem, DepError> {
        let Some(head) = self.conflicts.front() else {
            return Err(DepError::NoSuchConflict("(conflict list is empty)".into()));
        };
        let (package, tool) = (head.package.clone(), head.tool);
        self.cl_solve(&package, tool, resolution)
    }

    pub fn show_waiting(&self) -> String {
        if self.waiting.is_empty() {
            return "waiting list is empty\n".into();
        }
        self.waiting
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{}. {w}\n", i + 1))
            .collect()
    }

    pub fn show_conflicts(&self) -> String {
        if self.conflicts.is_empty() {
            return "conflict list is empty\n".into();
        }
        self.conflicts
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {c}\n", i + 1))
            .collect()
    }

    /// Installs every queued item through guarded execution, FIFO.
    ///
    /// A failed item is rolled back and reported; the rest still run.
    /// Records are numbered from `first_turn`.
    pub fn download(
        &mut self,
        sb: &mut dyn Sandbox,
        first_turn: u32,
        cfg: &GuardConfig,
    ) -> Result<DownloadReport, DepError> {
        if !self.conflicts.is_empty() {
            return Err(DepError::ConflictsPending(self.conflicts.len()));
        }
        if self.waiting.is_empty() {
            return Err(DepError::EmptyWaitingList);
        }
        let mut report = DownloadReport::default();
        let items = std::mem::take(&mut self.waiting);
        for (i, item) in items.iter().enumerate() {
            let command = Command::parse(item.install_command()).expect("generated command parses");
            let (result, record) =
                exec_guarded_with(sb, &command, &[], first_turn + i as u32, cfg)?;
            let version = (result.return_code == 0)
                .then(|| {
                    record
                        .installed
                        .iter()
                        .find(|(t, name, _)| *t == item.tool && *name == item.package)
                        .map(|(_, _, v)| v.clone())
                })
                .flatten();
            let status = if result.return_code == 0 {
                DownloadStatus::Ok
            } else {
                DownloadStatus::Failed
            };
            report.log.push_str(&format!(
                "$ {}\n{}{}",
                command.raw(),
                result.stdout,
                result.stderr
            ));
            let shown = match (&status, &version) {
                (DownloadStatus::Ok, Some(v)) => format!("ok {v}"),
                (DownloadStatus::Ok, None) => "ok".into(),
                (DownloadStatus::Failed, _) => {
                    format!("failed (exit {}, rolled back)", result.return_code)
                }
            };
            report
                .log
                .push_str(&format!("=> {} {}\n", item.package, shown));
            report.items.push(DownloadItem {
                package: item.package.clone(),
                tool: item.tool,
                version,
                status,
            });
            report.records.push(record);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::sandbox::sim::PackageEntry;
    use crate::sandbox::{SimSandbox, SimWorld};
    use crate::trace::BaseImage;

    fn item(p: &str, c: &str) -> WaitingItem {
        WaitingItem::new(p, c, Tool::Pip).unwrap()
    }

    fn sandbox() -> SimSandbox {
        let world = SimWorld::default()
            .with_package("pytest", PackageEntry::ok("8.0.0"))
            .with_package("requests", PackageEntry::ok("2.31.0"))
            .with_package(
                "cupy",
                PackageEntry::fail_polluting(&["fastrlock", "numpy"]),
            )
            .with_package(
                "numpy",
                PackageEntry::ok("1.26.4").with_versions(&["1.19.5"]),
            );
        SimSandbox::start(Arc::new(world), BaseImage::default(), "d").unwrap()
    }

    #[test]
    fn add_and_conflict() {
        let mut dl = DepLists::new();
        assert_eq!(dl.wl_add(item("numpy", ">=1.21")), AddOutcome::Added);
        assert_eq!(
            dl.wl_add(item("NumPy", "<1.20")),
            AddOutcome::ConflictQueued
        );
        assert_eq!(dl.waiting().len(), 1);
        assert_eq!(dl.wl_add(item("numpy", ">=1.21")), AddOutcome::Unchanged);
        let c = dl.conflicts().next().unwrap();
        assert_eq!(c.existing.to_string(), ">=1.21");
        assert_eq!(c.incoming.to_string(), "<1.20");
    }

    #[test]
    fn solve_use_and_keep() {
        let mut dl = DepLists::new();
        dl.wl_add(item("numpy", ">=1.21"));
        dl.wl_add(item("numpy", "<1.20"));
        dl.cl_solve(
            "numpy",
            Tool::Pip,
            Resolution::UseVersion("==1.19.5".parse().unwrap()),
        )
        .unwrap();
        assert_eq!(dl.waiting()[0].constraint.to_string(), "==1.19.5");

        let mut dl = DepLists::new();
        dl.wl_add(item("numpy", ">=1.21"));
        dl.wl_add(item("numpy", "<1.20"));
        dl.cl_solve_next(Resolution::KeepOriginal).unwrap();
        assert_eq!(dl.waiting()[0].constraint.to_string(), ">=1.21");
        assert!(matches!(
            dl.cl_solve_next(Resolution::KeepOriginal),
            Err(DepError::NoSuchConflict(_))
        ));
    }

    #[test]
    fn requirements_text() {
        let mut dl = DepLists::new();
        assert_eq!(dl.wl_add_requirements("A\nB>=1.0,<2.0\n").unwrap(), 2);
        assert_eq!(dl.wl_add_requirements("A\nB>=1.0,<2.0\n").unwrap(), 0);
        assert_eq!(dl.conflicts().count(), 0);
        assert_eq!(
            dl.wl_add_requirements("# only\n\n   # comments\n").unwrap(),
            0
        );
        assert!(matches!(
            dl.wl_add_requirements("ok\nbad name here!\n"),
            Err(DepError::ParseError { line_no: 2, .. })
        ));
        assert!(matches!(
            dl.wl_add_requirements("x>=1.q\n"),
            Err(DepError::ParseError { line_no: 1, .. })
        ));
    }

    #[test]
    fn apt_takes_no_constraint() {
        assert!(WaitingItem::new("libgl1", ">=1", Tool::Apt).is_err());
        let apt = WaitingItem::new("libgl1", "", Tool::Apt).unwrap();
        assert_eq!(apt.install_command(), "apt-get install -y libgl1");
    }

    #[test]
    fn show_is_line_per_item() {
        let mut dl = DepLists::new();
        assert_eq!(dl.show_waiting(), "waiting list is empty\n");
        dl.wl_add(item("numpy", ">=1.21"));
        dl.wl_add(item("pytest", ""));
        dl.wl_add(item("numpy", "<1.20"));
        assert_eq!(
            dl.show_waiting(),
            "1. pip numpy >=1.21\n2. pip pytest latest\n"
        );
        assert_eq!(
            dl.show_conflicts(),
            "1. pip numpy: existing >=1.21 | incoming <1.20\n"
        );
    }

    #[test]
    fn download_refuses_with_conflicts() {
        let mut sb = sandbox();
        let mut dl = DepLists::new();
        assert!(matches!(
            dl.download(&mut sb, 1, &GuardConfig::default()),
            Err(DepError::EmptyWaitingList)
        ));
        dl.wl_add(item("numpy", ">=1.21"));
        dl.wl_add(item("numpy", "<1.20"));
        let before = sb.state().clone();
        assert!(matches!(
            dl.download(&mut sb, 1, &GuardConfig::default()),
            Err(DepError::ConflictsPending(1))
        ));
        assert_eq!(sb.state(), &before);
    }

    #[test]
    fn download_continues_after_failure() {
        let mut sb = sandbox();
        let mut dl = DepLists::new();
        dl.wl_add(item("cupy", ""));
        dl.wl_add(item("requests", ""));
        let report = dl.download(&mut sb, 4, &GuardConfig::default()).unwrap();
        assert_eq!(report.items[0].status, DownloadStatus::Failed);
        assert_eq!(report.items[1].status, DownloadStatus::Ok);
        assert_eq!(report.items[1].version.as_deref(), Some("2.31.0"));
        assert!(report.records[0].rolled_back);
        assert_eq!(report.records[1].turn, 5);
        let pip = sb.state().installed_for(Tool::Pip);
        assert!(!pip.contains_key("numpy") && !pip.contains_key("fastrlock"));
        assert!(dl.waiting().is_empty());
    }

    #[test]
    fn download_respects_constraint() {
        let mut sb = sandbox();
        let mut dl = DepLists::new();
        dl.wl_add(item("numpy", "<1.20"));
        let report = dl.download(&mut sb, 1, &GuardConfig::default()).unwrap();
        assert_eq!(report.items[0].version.as_deref(), Some("1.19.5"));
        assert_eq!(report.records[0].command.raw(), "pip install 'numpy<1.20'");
    }
}
