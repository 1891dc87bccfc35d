//! Deterministic in-memory sandbox.
//!
//! A [`SimWorld`] is the scripted outside world (package catalog, remote
//! repositories, test-suite behaviour); a [`SimState`] is everything a
//! command can observe or change. Snapshots are deep copies, so rollback
//! is exact structural restoration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::sim_shell;
use super::{
    normalize_for, parent_dir, resolve_path, session_effect, BackendKind, ExecResult, Sandbox,
    SandboxError, SessionEffect, DEFAULT_COMMAND_TIMEOUT,
};
use crate::classify::parse_line;
use crate::trace::{BaseImage, Command, SnapshotId, Tool};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Ok,
    FailClean,
    FailPolluting,
}

/// One package in the scripted catalog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackageEntry {
    #[serde(default = "default_tool")]
    pub tool: Tool,
    pub behavior: Behavior,
    /// Version installed when no constraint narrows the choice.
    pub version: String,
    /// Other published versions a constraint may select.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub versions: Vec<String>,
    /// Packages left behind when an install of this package fails.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub side_installs: Vec<String>,
    /// Dependencies installed alongside on success.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
}

fn default_tool() -> Tool {
    Tool::Pip
}

impl PackageEntry {
    pub fn ok(version: &str) -> Self {
        Self {
            tool: Tool::Pip,
            behavior: Behavior::Ok,
            version: version.into(),
            versions: Vec::new(),
            side_installs: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn fail_clean() -> Self {
        Self {
            behavior: Behavior::FailClean,
            ..Self::ok("0.0.0")
        }
    }

    pub fn fail_polluting(side_installs: &[&str]) -> Self {
        Self {
            behavior: Behavior::FailPolluting,
            side_installs: side_installs.iter().map(|s| s.to_string()).collect(),
            ..Self::ok("0.0.0")
        }
    }

    pub fn apt(mut self) -> Self {
        self.tool = Tool::Apt;
        self
    }

    pub fn with_versions(mut self, versions: &[&str]) -> Self {
        self.versions = versions.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_requires(mut self, requires: &[&str]) -> Self {
        self.requires = requires.iter().map(|s| s.to_string()).collect();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestOutcome {
    RunsPass,
    RunsFail,
    CollectError,
    NoTests,
}

/// How `pytest` behaves against the staged repository.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestProfile {
    pub outcome: TestOutcome,
    /// Modules the tests import; a missing one is a collection error.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub requires: Vec<String>,
    /// Oldest Python the code imports cleanly under, e.g. "3.11".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_python: Option<String>,
    #[serde(default = "default_test_count")]
    pub tests: u32,
    #[serde(default)]
    pub duration_secs: u64,
}

fn default_test_count() -> u32 {
    4
}

impl TestProfile {
    pub fn new(outcome: TestOutcome) -> Self {
        Self {
            outcome,
            requires: Vec::new(),
            min_python: None,
            tests: default_test_count(),
            duration_secs: 0,
        }
    }
}

impl Default for TestProfile {
    fn default() -> Self {
        Self::new(TestOutcome::RunsPass)
    }
}

/// A repository `git clone` can fetch inside the sim.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RemoteRepo {
    pub files: BTreeMap<String, String>,
    /// Commits `git checkout` accepts; empty accepts any.
    #[serde(default)]
    pub shas: Vec<String>,
}

/// The scripted world a sim sandbox runs against. Survives resets.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimWorld {
    #[serde(default)]
    pub registry: BTreeMap<String, PackageEntry>,
    #[serde(default)]
    pub remotes: BTreeMap<String, RemoteRepo>,
    #[serde(default)]
    pub test_profile: TestProfile,
    /// Images `start` accepts; `None` accepts any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<BTreeSet<String>>,
}

impl SimWorld {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut world: SimWorld = serde_json::from_str(text)?;
        world.registry = world
            .registry
            .into_iter()
            .map(|(k, v)| (normalize_for(v.tool, &k), v))
            .collect();
        Ok(world)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn with_package(mut self, name: &str, entry: PackageEntry) -> Self {
        self.registry.insert(normalize_for(entry.tool, name), entry);
        self
    }

    pub fn with_remote(mut self, url: &str, repo: RemoteRepo) -> Self {
        self.remotes.insert(url.to_string(), repo);
        self
    }

    pub fn with_tests(mut self, profile: TestProfile) -> Self {
        self.test_profile = profile;
        self
    }

    pub fn package(&self, tool: Tool, name: &str) -> Option<&PackageEntry> {
        self.registry
            .get(&normalize_for(tool, name))
            .filter(|e| e.tool == tool)
    }
}

/// Everything a command can observe.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SimState {
    pub files: BTreeMap<String, String>,
    pub dirs: BTreeSet<String>,
    pub env: BTreeMap<String, String>,
    pub cwd: String,
    pub installed: BTreeMap<Tool, BTreeMap<String, String>>,
}

impl SimState {
    /// The empty environment: only `/` exists.
    pub fn empty() -> Self {
        Self {
            dirs: BTreeSet::from(["/".to_string()]),
            cwd: "/".into(),
            ..Self::default()
        }
    }

    /// The state a freshly started base image presents.
    pub fn boot(image: &BaseImage) -> Self {
        let mut state = Self::empty();
        for dir in [
            "/tmp",
            "/root",
            "/usr",
            "/usr/local",
            "/usr/local/bin",
            "/etc",
        ] {
            state.dirs.insert(dir.into());
        }
        state
            .env
            .insert("PATH".into(), "/usr/local/bin:/usr/bin:/bin".into());
        state.env.insert("HOME".into(), "/root".into());
        if let Some(v) = image.python_version() {
            state.env.insert("PYTHON_VERSION".into(), v.into());
        }
        state
    }

    pub fn is_dir(&self, path: &str) -> bool {
        self.dirs.contains(path)
    }

    pub fn is_file(&self, path: &str) -> bool {
        self.files.contains_key(path)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.is_dir(path) || self.is_file(path)
    }

    pub fn mkdir_p(&mut self, path: &str) {
        let mut cur = String::new();
        for part in path.split('/').filter(|p| !p.is_empty()) {
            cur.push('/');
            cur.push_str(part);
            self.dirs.insert(cur.clone());
        }
    }

    pub fn installed_for(&self, tool: Tool) -> BTreeMap<String, String> {
        self.installed.get(&tool).cloned().unwrap_or_default()
    }

    pub fn install(&mut self, tool: Tool, name: &str, version: &str) {
        self.installed
            .entry(tool)
            .or_default()
            .insert(normalize_for(tool, name), version.to_string());
    }

    /// Comparison view that ignores the working directory.
    pub fn without_cwd(&self) -> SimState {
        SimState {
            cwd: String::new(),
            ..self.clone()
        }
    }

    /// Files strictly below `dir`.
    pub fn files_under(&self, dir: &str) -> impl Iterator<Item = (&String, &String)> {
        let prefix = if dir == "/" {
            "/".to_string()
        } else {
            format!("{dir}/")
        };
        self.files
            .iter()
            .filter(move |(p, _)| p.starts_with(&prefix))
    }
}

/// Most-recent snapshot plus any pinned ones are retained.
#[derive(Debug)]
struct SnapshotStore {
    states: BTreeMap<SnapshotId, SimState>,
    pinned: BTreeSet<SnapshotId>,
    latest: Option<SnapshotId>,
    counter: u64,
}

pub struct SimSandbox {
    world: Arc<SimWorld>,
    state: SimState,
    image: BaseImage,
    session_id: String,
    snapshots: SnapshotStore,
    timeout: Duration,
}

impl std::fmt::Debug for SimSandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimSandbox")
            .field("session_id", &self.session_id)
            .field("image", &self.image)
            .field("cwd", &self.state.cwd)
            .finish()
    }
}

impl SimSandbox {
    pub fn start(
        world: Arc<SimWorld>,
        image: BaseImage,
        session_id: impl Into<String>,
    ) -> Result<Self, SandboxError> {
        check_image(&world, &image)?;
        Ok(Self {
            state: SimState::boot(&image),
            world,
            image,
            session_id: session_id.into(),
            snapshots: SnapshotStore {
                states: BTreeMap::new(),
                pinned: BTreeSet::new(),
                latest: None,
                counter: 0,
            },
            timeout: DEFAULT_COMMAND_TIMEOUT,
        })
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn world(&self) -> &Arc<SimWorld> {
        &self.world
    }

    /// Copies a file tree straight into the state, bypassing commands.
    pub fn load_files(&mut self, dest: &str, files: &BTreeMap<String, String>) {
        for (rel, content) in files {
            let path = resolve_path(dest, rel);
            self.state.mkdir_p(&parent_dir(&path));
            self.state.files.insert(path, content.clone());
        }
        self.state.mkdir_p(dest);
    }
}

fn check_image(world: &SimWorld, image: &BaseImage) -> Result<(), SandboxError> {
    match &world.images {
        Some(allowed) if !allowed.contains(image.name()) => {
            Err(SandboxError::ImageUnavailable(image.name().to_string()))
        }
        _ => Ok(()),
    }
}

/// Reads a host directory into (relative path, content) pairs, skipping `.git` and `.envforge`.
pub fn read_host_tree(host: &Path) -> Result<BTreeMap<String, String>, SandboxError> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let name = entry.file_name().to_string_lossy().to_string();
            if name == ".git" || name == ".envforge" {
                continue;
            }
            let path = entry.path();
            if entry.file_type()?.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                let bytes = std::fs::read(&path)?;
                out.insert(
                    rel.to_string_lossy().replace('\\', "/"),
                    String::from_utf8_lossy(&bytes).into_owned(),
                );
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(host, host, &mut out)
        .map_err(|e| SandboxError::BackendIo(format!("{}: {e}", host.display())))?;
    Ok(out)
}

impl Sandbox for SimSandbox {
    fn backend(&self) -> BackendKind {
        BackendKind::Sim
    }

    fn session_id(&self) -> &str {
        &self.session_id
    }

    fn base_image(&self) -> &BaseImage {
        &self.image
    }

    fn cwd(&self) -> &str {
        &self.state.cwd
    }

    fn exported_env(&self) -> &BTreeMap<String, String> {
        &self.state.env
    }

    fn exec(&mut self, command: &Command) -> Result<ExecResult, SandboxError> {
        let line = match parse_line(command.raw()) {
            Ok(line) => line,
            Err(e) => return Ok(ExecResult::failed(2, format!("sh: {e}\n"))),
        };
        let run = sim_shell::run_line(
            &self.world,
            &self.image,
            &mut self.state,
            &line,
            self.timeout,
        )?;
        if run.result.return_code == 0 {
            match session_effect(command) {
                SessionEffect::Cd(_) => self.state.cwd = run.cwd,
                SessionEffect::Export(pairs) => self.state.env.extend(pairs),
                SessionEffect::None => {}
            }
        }
        Ok(run.result)
    }

    fn snapshot(&mut self) -> Result<SnapshotId, SandboxError> {
        let store = &mut self.snapshots;
        store.counter += 1;
        let id = SnapshotId(format!("sim-{}-{}", self.session_id, store.counter));
        if let Some(prev) = store.latest.take() {
            if !store.pinned.contains(&prev) {
                store.states.remove(&prev);
            }
        }
        store.states.insert(id.clone(), self.state.clone());
        store.latest = Some(id.clone());
        Ok(id)
    }

    fn pin_snapshot(&mut self, id: &SnapshotId) -> Result<(), SandboxError> {
        if !self.snapshots.states.contains_key(id) {
            return Err(SandboxError::UnknownSnapshot(id.clone()));
        }
        self.snapshots.pinned.insert(id.clone());
        Ok(())
    }

    fn rollback(&mut self, id: &SnapshotId) -> Result<(), SandboxError> {
        let state = self
            .snapshots
            .states
            .get(id)
            .ok_or_else(|| SandboxError::UnknownSnapshot(id.clone()))?;
        self.state = state.clone();
        Ok(())
    }

    fn reset_with_base_image(&mut self, image: &BaseImage) -> Result<(), SandboxError> {
        check_image(&self.world, image)?;
        self.image = image.clone();
        self.state = SimState::boot(image);
        self.snapshots.states.clear();
        self.snapshots.pinned.clear();
        self.snapshots.latest = None;
        Ok(())
    }

    fn installed_versions(&mut self, tool: Tool) -> Result<BTreeMap<String, String>, SandboxError> {
        Ok(self.state.installed_for(tool))
    }

    fn write_file(&mut self, path: &str, content: &str) -> Result<(), SandboxError> {
        let path = resolve_path(&self.state.cwd, path);
        self.state.mkdir_p(&parent_dir(&path));
        self.state.files.insert(path, content.to_string());
        Ok(())
    }

    fn read_file(&mut self, path: &str) -> Result<Option<String>, SandboxError> {
        let path = resolve_path(&self.state.cwd, path);
        Ok(self.state.files.get(&path).cloned())
    }

    fn upload_dir(&mut self, host: &Path, dest: &str) -> Result<(), SandboxError> {
        let files = read_host_tree(host)?;
        let dest = resolve_path(&self.state.cwd, dest);
        self.load_files(&dest, &files);
        Ok(())
    }

    fn set_command_timeout(&mut self, limit: Duration) {
        self.timeout = limit;
    }

    fn as_sim(&self) -> Option<&SimSandbox> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> Arc<SimWorld> {
        Arc::new(
            SimWorld::default()
                .with_package(
                    "cupy",
                    PackageEntry::fail_polluting(&["fastrlock", "numpy"]),
                )
                .with_package("pytest", PackageEntry::ok("8.0.0"))
                .with_package(
                    "B",
                    PackageEntry::ok("1.5.1").with_versions(&["2.1.0", "0.9"]),
                ),
        )
    }

    fn start() -> SimSandbox {
        SimSandbox::start(world(), BaseImage::default(), "t").unwrap()
    }

    fn run(sb: &mut SimSandbox, raw: &str) -> ExecResult {
        sb.exec(&Command::parse(raw).unwrap()).unwrap()
    }

    #[test]
    fn fresh_state() {
        let sb = start();
        assert!(sb.state().installed.is_empty());
        assert!(sb.state().env.contains_key("PATH"));
        assert_eq!(sb.cwd(), "/");
        assert_eq!(SimState::empty().dirs.len(), 1);
    }

    #[test]
    fn independent_handles() {
        let mut a = start();
        let b = start();
        run(&mut a, "touch /tmp/x");
        assert!(a.state().is_file("/tmp/x"));
        assert!(!b.state().is_file("/tmp/x"));
    }

    #[test]
    fn polluting_install() {
        let mut sb = start();
        let res = run(&mut sb, "pip install cupy");
        assert_ne!(res.return_code, 0);
        let pip = sb.state().installed_for(Tool::Pip);
        assert!(pip.contains_key("fastrlock") && pip.contains_key("numpy"));
        assert!(!pip.contains_key("cupy"));
    }

    #[test]
    fn export_and_cd() {
        let mut sb = start();
        assert_eq!(run(&mut sb, "export PYTHONPATH=/repo/src").return_code, 0);
        assert_eq!(sb.state().env["PYTHONPATH"], "/repo/src");
        run(&mut sb, "mkdir /repo");
        run(&mut sb, "cd /repo");
        assert_eq!(run(&mut sb, "pwd").stdout, "/repo\n");
        // cd inside a chain is local to that line.
        run(&mut sb, "cd /tmp && pwd");
        assert_eq!(sb.cwd(), "/repo");
    }

    #[test]
    fn constraint_selects_version() {
        let mut sb = start();
        assert_eq!(run(&mut sb, "pip install 'B>=1.0,<2.0'").return_code, 0);
        assert_eq!(sb.installed_versions(Tool::Pip).unwrap()["b"], "1.5.1");
        let res = run(&mut sb, "pip install 'B>=3'");
        assert_ne!(res.return_code, 0);
    }

    #[test]
    fn snapshot_retention_and_rollback() {
        let mut sb = start();
        let s1 = sb.snapshot().unwrap();
        run(&mut sb, "touch /tmp/a");
        sb.rollback(&s1).unwrap();
        assert!(!sb.state().is_file("/tmp/a"));
        let s2 = sb.snapshot().unwrap();
        assert!(matches!(
            sb.rollback(&s1),
            Err(SandboxError::UnknownSnapshot(_))
        ));
        sb.pin_snapshot(&s2).unwrap();
        let _s3 = sb.snapshot().unwrap();
        sb.rollback(&s2).unwrap();
        sb.reset_with_base_image(&BaseImage::python("3.11").unwrap())
            .unwrap();
        assert!(matches!(
            sb.rollback(&s2),
            Err(SandboxError::UnknownSnapshot(_))
        ));
        assert_eq!(sb.state().env["PYTHON_VERSION"], "3.11");
    }

    #[test]
    fn restricted_images() {
        let w = SimWorld {
            images: Some(BTreeSet::from(["python:3.10".to_string()])),
            ..SimWorld::default()
        };
        let err =
            SimSandbox::start(Arc::new(w), BaseImage::python("3.9").unwrap(), "x").unwrap_err();
        assert!(matches!(err, SandboxError::ImageUnavailable(_)));
    }

    #[test]
    fn world_json_roundtrip() {
        let w = world();
        let again = SimWorld::from_json(&w.to_json()).unwrap();
        assert_eq!(&again, w.as_ref());
        let parsed = SimWorld::from_json(
            r#"{"registry": {"Cupy": {"behavior": "fail_polluting", "version": "13.0.0", "side_installs": ["fastrlock", "numpy"]}}}"#,
        )
        .unwrap();
        assert_eq!(
            parsed.package(Tool::Pip, "cupy").unwrap().behavior,
            Behavior::FailPolluting
        );
    }
}
