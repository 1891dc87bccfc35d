//! Snapshot-guarded execution.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use super::{normalize_for, ExecResult, Sandbox, SandboxError, TIMEOUT_RC};
use crate::agent::{truncate, DEFAULT_HEAD_LIMIT, DEFAULT_TAIL_LIMIT};
use crate::classify::{classify, ClassifyError, InstallTarget, Kind};
use crate::trace::{Asset, Command, CommandRecord, InstalledPackage, Tool};

#[derive(Debug, Error)]
pub enum GuardError {
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GuardConfig {
    /// Turning this off keeps the effects of failed commands.
    pub rollback: bool,
    pub head_limit: usize,
    pub tail_limit: usize,
}

impl Default for GuardConfig {
    fn default() -> Self {
        Self {
            rollback: true,
            head_limit: DEFAULT_HEAD_LIMIT,
            tail_limit: DEFAULT_TAIL_LIMIT,
        }
    }
}

pub fn exec_guarded(
    sb: &mut dyn Sandbox,
    command: &Command,
    turn: u32,
) -> Result<(ExecResult, CommandRecord), GuardError> {
    exec_guarded_with(sb, command, &[], turn, &GuardConfig::default())
}

pub fn exec_guarded_with(
    sb: &mut dyn Sandbox,
    command: &Command,
    assets: &[Asset],
    turn: u32,
    cfg: &GuardConfig,
) -> Result<(ExecResult, CommandRecord), GuardError> {
    exec_guarded_by(sb, command, assets, turn, cfg, |sb| sb.exec(command))
}

/// Guards `run`, recording it under `command`.
///
/// `run` performs the physical work; it may differ from `command` when the
/// recorded form is an agent verb such as `edit_file`.
pub fn exec_guarded_by<F>(
    sb: &mut dyn Sandbox,
    command: &Command,
    assets: &[Asset],
    turn: u32,
    cfg: &GuardConfig,
    run: F,
) -> Result<(ExecResult, CommandRecord), GuardError>
where
    F: FnOnce(&mut dyn Sandbox) -> Result<ExecResult, SandboxError>,
{
    let class = classify(command)?;
    let cwd = sb.cwd().to_string();
    let safe = class.kind == Kind::Safe;

    let snapshot = if safe { None } else { Some(sb.snapshot()?) };
    for asset in assets {
        sb.write_file(&asset.path, &asset.content)?;
    }
    let tools: BTreeSet<Tool> = class.install_specs().iter().map(|s| s.tool).collect();
    let mut before = BTreeMap::new();
    for tool in &tools {
        before.insert(*tool, sb.installed_versions(*tool)?);
    }

    let result = match run(sb) {
        Ok(r) => r,
        Err(SandboxError::Timeout { limit }) => ExecResult::failed(
            TIMEOUT_RC,
            format!("command timed out after {}s\n", limit.as_secs()),
        ),
        Err(e) => return Err(e.into()),
    };

    let failed = result.return_code != 0;
    let rolled_back = match (&snapshot, failed && cfg.rollback) {
        (Some(id), true) => {
            sb.rollback(id)?;
            true
        }
        _ => false,
    };

    let mut installed: Vec<InstalledPackage> = Vec::new();
    if !failed {
        for tool in &tools {
            let after = sb.installed_versions(*tool)?;
            let prior = &before[tool];
            let named: BTreeSet<String> = class
                .install_specs()
                .iter()
                .filter(|s| s.tool == *tool)
                .filter_map(|s| match &s.target {
                    InstallTarget::Package { name, .. } => Some(normalize_for(*tool, name)),
                    _ => None,
                })
                .collect();
            for (name, version) in &after {
                if prior.get(name) != Some(version) || named.contains(name) {
                    installed.push((*tool, name.clone(), version.clone()));
                }
            }
        }
    }

    let env_delta = if class.kind == Kind::Export && !failed {
        class.export_pairs().to_vec()
    } else {
        Vec::new()
    };

    let record = CommandRecord {
        turn,
        command: command.clone(),
        cwd,
        return_code: result.return_code,
        classification: class.kind,
        stdout_excerpt: truncate(&result.stdout, cfg.head_limit, cfg.tail_limit),
        stderr_excerpt: truncate(&result.stderr, cfg.head_limit, cfg.tail_limit),
        snapshot_before: snapshot,
        rolled_back,
        env_delta,
        installed,
        assets: assets.to_vec(),
        thought: None,
    };
    Ok((result, record))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;
    use std::time::Duration;

    use super::*;
    use crate::sandbox::sim::PackageEntry;
    use crate::sandbox::{SimSandbox, SimWorld};
    use crate::trace::BaseImage;

    fn sandbox() -> SimSandbox {
        let world = SimWorld::default()
            .with_package(
                "cupy",
                PackageEntry::fail_polluting(&["fastrlock", "numpy"]),
            )
            .with_package(
                "pytest",
                PackageEntry::ok("8.0.0").with_requires(&["pluggy"]),
            )
            .with_package("pluggy", PackageEntry::ok("1.4.0"));
        SimSandbox::start(Arc::new(world), BaseImage::default(), "g").unwrap()
    }

    fn guarded(sb: &mut SimSandbox, raw: &str) -> CommandRecord {
        exec_guarded(sb, &Command::parse(raw).unwrap(), 1)
            .unwrap()
            .1
    }

    #[test]
    fn polluting_install_rolls_back() {
        let mut sb = sandbox();
        let before = sb.state().clone();
        let rec = guarded(&mut sb, "pip install cupy");
        assert!(rec.rolled_back);
        assert!(rec.snapshot_before.is_some());
        assert_eq!(sb.state(), &before);
    }

    #[test]
    fn safe_failure_takes_no_snapshot() {
        let mut sb = sandbox();
        let before = sb.state().clone();
        let rec = guarded(&mut sb, "cat missing.txt");
        assert_eq!(rec.return_code, 1);
        assert!(rec.snapshot_before.is_none());
        assert!(!rec.rolled_back);
        assert_eq!(sb.state(), &before);
    }

    #[test]
    fn install_records_versions() {
        let mut sb = sandbox();
        let rec = guarded(&mut sb, "pip install pytest");
        assert!(!rec.rolled_back);
        assert_eq!(
            rec.installed,
            vec![
                (Tool::Pip, "pluggy".to_string(), "1.4.0".to_string()),
                (Tool::Pip, "pytest".to_string(), "8.0.0".to_string()),
            ]
        );
        let again = guarded(&mut sb, "pip install pytest");
        assert_eq!(
            again.installed,
            vec![(Tool::Pip, "pytest".into(), "8.0.0".into())]
        );
    }

    #[test]
    fn export_delta() {
        let mut sb = sandbox();
        let rec = guarded(&mut sb, "export A=1 B=2");
        assert_eq!(
            rec.env_delta,
            vec![("A".into(), "1".into()), ("B".into(), "2".into())]
        );
        assert_eq!(rec.classification, Kind::Export);
    }

    #[test]
    fn ablation_keeps_pollution() {
        let mut sb = sandbox();
        let cfg = GuardConfig {
            rollback: false,
            ..GuardConfig::default()
        };
        let (_, rec) = exec_guarded_with(
            &mut sb,
            &Command::parse("pip install cupy").unwrap(),
            &[],
            1,
            &cfg,
        )
        .unwrap();
        assert!(!rec.rolled_back);
        assert!(sb.state().installed_for(Tool::Pip).contains_key("numpy"));
    }

    #[test]
    fn timeout_maps_to_124() {
        let mut sb = sandbox();
        sb.set_command_timeout(Duration::from_secs(1));
        let rec = guarded(&mut sb, "touch /tmp/x && sleep 5");
        assert_eq!(rec.return_code, TIMEOUT_RC);
        assert!(rec.rolled_back);
        assert!(!sb.state().is_file("/tmp/x"));
    }

    #[test]
    fn assets_uploaded_and_kept() {
        let mut sb = sandbox();
        let asset = Asset {
            path: "/envforge/assets/note.txt".into(),
            content: "hi\n".into(),
        };
        let cmd = Command::parse("cp /envforge/assets/note.txt /tmp/n").unwrap();
        let (_, rec) = exec_guarded_with(
            &mut sb,
            &cmd,
            std::slice::from_ref(&asset),
            4,
            &GuardConfig::default(),
        )
        .unwrap();
        assert_eq!(rec.return_code, 0);
        assert_eq!(rec.assets, vec![asset]);
        assert_eq!(sb.state().files["/tmp/n"], "hi\n");
    }
}
