//! The build phase: a policy proposes actions, the session runs them.
//!
//! Every step goes through [`Session::dispatch`], which appends zero or
//! more [`CommandRecord`]s and returns the truncated [`Observation`] the
//! policy sees next. [`run_build`] drives the loop until the tests run,
//! the budget is spent or the backend fails.

pub mod action;
mod observe;
pub mod policy;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::shell::RedirectMode;
use crate::classify::{parse_line, BASE_IMAGE_VERBS, EDIT_VERB};
use crate::depmgr::{AddOutcome, DepError, DepLists, Resolution, WaitingItem};
use crate::sandbox::helpers::{
    asset_path, pipreqs_script, CODE_EDIT_NAME, CODE_EDIT_SCRIPT, PIPREQS_NAME,
};
use crate::sandbox::{
    exec_guarded_by, exec_guarded_with, resolve_path, Backend, ExecResult, GuardConfig, GuardError,
    Sandbox, SandboxError, DEFAULT_COMMAND_TIMEOUT, TIMEOUT_RC,
};
use crate::trace::{Asset, BaseImage, Command, CommandRecord, Outcome, RepoRef, Trace};
pub use action::{parse_action, Action, ActionError};
pub use observe::{truncate, DEFAULT_HEAD_LIMIT, DEFAULT_TAIL_LIMIT};
pub use policy::{
    HistoryEntry, LlmPolicy, Policy, PolicyContext, PolicyError, PolicyReply, ScriptedPolicy,
};

pub const REPO_DIR: &str = "/repo";
/// Where a local checkout is uploaded before being copied to [`REPO_DIR`].
pub const LOCAL_SOURCE_DIR: &str = "/envforge/src";
pub const PIPREQS_OUTPUT: &str = "requirements_pipreqs.txt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation {
    pub text: String,
    pub return_code: Option<i32>,
    pub terminal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildBudget {
    pub max_turns: u32,
    pub max_wall_seconds: u64,
    pub max_base_image_changes: u32,
}

impl Default for BuildBudget {
    fn default() -> Self {
        Self {
            max_turns: 100,
            max_wall_seconds: 7200,
            max_base_image_changes: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub budget: BuildBudget,
    pub guard: GuardConfig,
    pub command_timeout: Duration,
    pub session_id: String,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            budget: BuildBudget::default(),
            guard: GuardConfig::default(),
            command_timeout: DEFAULT_COMMAND_TIMEOUT,
            session_id: "build".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepoSource {
    Remote,
    Local(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoSpec {
    pub full_name: String,
    pub sha: String,
    pub source: RepoSource,
}

impl RepoSpec {
    pub fn remote(full_name: impl Into<String>, sha: impl Into<String>) -> Self {
        Self {
            full_name: full_name.into(),
            sha: sha.into(),
            source: RepoSource::Remote,
        }
    }

    pub fn clone_url(&self) -> String {
        format!("https://github.com/{}.git", self.full_name)
    }

    pub fn repo_ref(&self) -> RepoRef {
        RepoRef {
            full_name: self.full_name.clone(),
            sha: self.sha.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("repository unavailable: {0}")]
    RepoUnavailable(String),
    #[error(transparent)]
    BackendUnavailable(#[from] SandboxError),
}

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("guard violation: {0}")]
    GuardViolation(String),
    #[error("repository unavailable: {0}")]
    RepoUnavailable(String),
    #[error(transparent)]
    Backend(#[from] SandboxError),
}

impl DispatchError {
    /// Errors the policy can recover from by choosing another action.
    pub fn is_recoverable(&self) -> bool {
        matches!(
            self,
            DispatchError::InvalidAction(_) | DispatchError::GuardViolation(_)
        )
    }
}

impl From<GuardError> for DispatchError {
    fn from(e: GuardError) -> Self {
        match e {
            GuardError::Classify(c) => DispatchError::InvalidAction(c.to_string()),
            GuardError::Sandbox(s) => DispatchError::Backend(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TestResult {
    Verified,
    CollectError(String),
    NoTests,
    Timeout,
}

/// True for files the agent may not edit or delete.
pub fn is_protected_test(path: &str) -> bool {
    let name = path
        .trim_end_matches('/')
        .rsplit('/')
        .next()
        .unwrap_or(path);
    name.starts_with("test_") || name.ends_with("_test.py")
}

/// Rejects bash lines that delete, move or overwrite a protected test file.
pub fn check_bash_guard(raw: &str) -> Result<(), DispatchError> {
    let Ok(line) = parse_line(raw) else {
        return Ok(());
    };
    let violation =
        |path: &str| DispatchError::GuardViolation(format!("{path} is a protected test file"));
    for stage in line.stages() {
        let program = stage.program().unwrap_or("");
        let operands: Vec<&str> = stage.args().filter(|a| !a.starts_with('-')).collect();
        let touches = match program {
            "rm" | "mv" | "unlink" | "truncate" => true,
            "sed" => stage
                .args()
                .any(|a| a.starts_with("-i") || a == "--in-place"),
            _ => false,
        };
        if touches {
            if let Some(p) = operands.iter().find(|p| is_protected_test(p)) {
                return Err(violation(p));
            }
        }
        for r in &stage.redirects {
            if matches!(r.mode, RedirectMode::Write | RedirectMode::Append) {
                if let Some(target) = r.target.as_ref().filter(|t| is_protected_test(&t.text)) {
                    return Err(violation(&target.text));
                }
            }
        }
    }
    Ok(())
}

fn command(raw: &str) -> Command {
    Command::parse(raw).expect("generated command parses")
}

fn exec_text(result: &ExecResult, rolled_back: bool) -> String {
    let mut text = String::new();
    text.push_str(&result.stdout);
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&result.stderr);
    if !text.is_empty() && !text.ends_with('\n') {
        text.push('\n');
    }
    text.push_str(&format!("[exit code {}]", result.return_code));
    if rolled_back {
        text.push_str("\n[rolled back to the state before this command]");
    }
    text
}

/// One build: the sandbox, the dependency lists and the records so far.
pub struct Session {
    sandbox: Box<dyn Sandbox>,
    lists: DepLists,
    records: Vec<CommandRecord>,
    guard: GuardConfig,
    repo: RepoSpec,
    initial_image: BaseImage,
    base_changes: u32,
    max_base_changes: u32,
    last_test: Option<TestResult>,
}

impl Session {
    /// Stages the repository at [`REPO_DIR`] in a freshly started sandbox.
    pub fn start(
        sandbox: Box<dyn Sandbox>,
        repo: RepoSpec,
        cfg: &BuildConfig,
    ) -> Result<Self, AgentError> {
        let mut session = Self {
            initial_image: sandbox.base_image().clone(),
            sandbox,
            lists: DepLists::new(),
            records: Vec::new(),
            guard: cfg.guard,
            repo,
            base_changes: 0,
            max_base_changes: cfg.budget.max_base_image_changes,
            last_test: None,
        };
        match session.stage() {
            Ok(()) => Ok(session),
            Err(DispatchError::Backend(e)) => Err(AgentError::BackendUnavailable(e)),
            Err(e) => Err(AgentError::RepoUnavailable(e.to_string())),
        }
    }

    pub fn records(&self) -> &[CommandRecord] {
        &self.records
    }

    pub fn sandbox(&self) -> &dyn Sandbox {
        self.sandbox.as_ref()
    }

    pub fn lists(&self) -> &DepLists {
        &self.lists
    }

    pub fn last_test(&self) -> Option<&TestResult> {
        self.last_test.as_ref()
    }

    pub fn into_trace(self, outcome: Outcome) -> Trace {
        Trace {
            repo: self.repo.repo_ref(),
            initial_base_image: self.initial_image,
            final_base_image: self.sandbox.base_image().clone(),
            records: self.records,
            outcome,
        }
    }

    fn next_turn(&self) -> u32 {
        self.records.last().map_or(1, |r| r.turn + 1)
    }

    fn staging_commands(&mut self) -> Result<Vec<String>, DispatchError> {
        Ok(match &self.repo.source {
            RepoSource::Remote => vec![
                format!("git clone {} {REPO_DIR}", self.repo.clone_url()),
                format!(
                    "git -C {REPO_DIR} checkout {}",
                    crate::classify::shell::quote(&self.repo.sha)
                ),
                format!("cd {REPO_DIR}"),
            ],
            RepoSource::Local(path) => {
                let path = path.clone();
                self.sandbox.upload_dir(&path, LOCAL_SOURCE_DIR)?;
                vec![
                    format!("cp -r {LOCAL_SOURCE_DIR} {REPO_DIR}"),
                    format!("cd {REPO_DIR}"),
                ]
            }
        })
    }

    fn stage(&mut self) -> Result<(), DispatchError> {
        for raw in self.staging_commands()? {
            let turn = self.next_turn();
            let (result, record) = exec_guarded_with(
                self.sandbox.as_mut(),
                &command(&raw),
                &[],
                turn,
                &self.guard,
            )?;
            self.records.push(record);
            if result.return_code != 0 {
                return Err(DispatchError::RepoUnavailable(format!(
                    "`{raw}` exited with {}: {}",
                    result.return_code,
                    result.stderr.trim()
                )));
            }
        }
        Ok(())
    }

    fn observe(&self, text: String, return_code: Option<i32>, terminal: bool) -> Observation {
        Observation {
            text: truncate(&text, self.guard.head_limit, self.guard.tail_limit),
            return_code,
            terminal,
        }
    }

    fn guarded(&mut self, cmd: &Command, assets: &[Asset]) -> Result<Observation, DispatchError> {
        let turn = self.next_turn();
        let (result, record) =
            exec_guarded_with(self.sandbox.as_mut(), cmd, assets, turn, &self.guard)?;
        let text = exec_text(&result, record.rolled_back);
        self.records.push(record);
        Ok(self.observe(text, Some(result.return_code), false))
    }

    fn dep_error(&self, e: DepError) -> Result<Observation, DispatchError> {
        match e {
            DepError::Guard(g) => Err(g.into()),
            DepError::Sandbox(s) => Err(s.into()),
            other => Ok(self.observe(format!("error: {other}"), Some(1), false)),
        }
    }

    pub fn dispatch(&mut self, action: &Action) -> Result<Observation, DispatchError> {
        match action {
            Action::Bash(raw) => {
                check_bash_guard(raw)?;
                let cmd = Command::parse(raw.as_str())
                    .map_err(|e| DispatchError::InvalidAction(e.to_string()))?;
                let argv0 = cmd.argv0();
                if argv0 == EDIT_VERB
                    || BASE_IMAGE_VERBS.contains(&argv0)
                    || crate::trace::TEST_VERBS.contains(&argv0)
                {
                    return Err(DispatchError::InvalidAction(format!(
                        "`{argv0}` cannot be combined with other commands"
                    )));
                }
                self.guarded(&cmd, &[])
            }
            Action::WaitingListAdd {
                package,
                constraint,
                tool,
            } => {
                let item = match WaitingItem::new(package, constraint, *tool) {
                    Ok(item) => item,
                    Err(e) => return self.dep_error(e),
                };
                let shown = item.to_string();
                let text = match self.lists.wl_add(item) {
                    AddOutcome::Added => format!("added {shown} to the waiting list"),
                    AddOutcome::Unchanged => format!("{shown} is already on the waiting list"),
                    AddOutcome::ConflictQueued => format!(
                        "{shown} conflicts with the queued constraint; added to the conflict list:\n{}",
                        self.lists.show_conflicts()
                    ),
                };
                Ok(self.observe(text, Some(0), false))
            }
            Action::WaitingListAddFile(path) => {
                let abs = resolve_path(self.sandbox.cwd(), path);
                match self.lists.wl_addfile(self.sandbox.as_mut(), &abs) {
                    Ok(n) => Ok(self.observe(
                        format!(
                            "queued {n} entries from {abs}\n{}",
                            self.lists.show_waiting()
                        ),
                        Some(0),
                        false,
                    )),
                    Err(e) => self.dep_error(e),
                }
            }
            Action::WaitingListClear => {
                self.lists.wl_clear();
                Ok(self.observe("waiting list cleared".into(), Some(0), false))
            }
            Action::WaitingListShow => Ok(self.observe(self.lists.show_waiting(), Some(0), false)),
            Action::ConflictListSolve(choice) => {
                let resolution = match choice {
                    None => Resolution::KeepOriginal,
                    Some(text) => match text.parse() {
                        Ok(c) => Resolution::UseVersion(c),
                        Err(e) => return self.dep_error(DepError::BadConstraint(e)),
                    },
                };
                match self.lists.cl_solve_next(resolution) {
                    Ok(settled) => {
                        let now = self
                            .lists
                            .waiting()
                            .iter()
                            .find(|w| w.package == settled.package && w.tool == settled.tool)
                            .map(|w| w.to_string())
                            .unwrap_or_default();
                        Ok(self.observe(
                            format!("resolved {settled}\nwaiting: {now}"),
                            Some(0),
                            false,
                        ))
                    }
                    Err(e) => self.dep_error(e),
                }
            }
            Action::ConflictListClear => {
                self.lists.cl_clear();
                Ok(self.observe("conflict list cleared".into(), Some(0), false))
            }
            Action::ConflictListShow => {
                Ok(self.observe(self.lists.show_conflicts(), Some(0), false))
            }
            Action::Download => {
                let first = self.next_turn();
                match self
                    .lists
                    .download(self.sandbox.as_mut(), first, &self.guard)
                {
                    Ok(report) => {
                        let failed = report.records.iter().filter(|r| r.return_code != 0).count();
                        self.records.extend(report.records);
                        let rc = if failed == 0 { 0 } else { 1 };
                        let summary = format!(
                            "{}downloaded {} of {} packages",
                            report.log,
                            report.items.len() - failed,
                            report.items.len()
                        );
                        Ok(self.observe(summary, Some(rc), false))
                    }
                    Err(e) => self.dep_error(e),
                }
            }
            Action::RunTest => self.run_tests(false).map(|(_, obs)| obs),
            Action::PoetryRunTest => self.run_tests(true).map(|(_, obs)| obs),
            Action::RunPipreqs => {
                let script = asset_path(PIPREQS_NAME);
                let asset = Asset {
                    path: script.clone(),
                    content: pipreqs_script(),
                };
                self.guarded(&command(&format!("python3 {script} {REPO_DIR}")), &[asset])
            }
            Action::ChangePythonVersion(v) => {
                let image = BaseImage::python(v).map_err(DispatchError::InvalidAction)?;
                self.change_base(image, &format!("{} {v}", BASE_IMAGE_VERBS[0]))
            }
            Action::ClearConfiguration => {
                self.change_base(BaseImage::default(), BASE_IMAGE_VERBS[1])
            }
            Action::EditFile { path, patch } => self.edit_file(path, patch),
        }
    }

    /// Runs the collection probe and then the full suite in [`REPO_DIR`].
    pub fn run_tests(&mut self, poetry: bool) -> Result<(TestResult, Observation), DispatchError> {
        let verb = crate::trace::TEST_VERBS[usize::from(poetry)];
        let prefix = if poetry { "poetry run " } else { "" };
        let turn = self.next_turn();
        let (result, record) = exec_guarded_by(
            self.sandbox.as_mut(),
            &command(verb),
            &[],
            turn,
            &self.guard,
            |sb| {
                let probe = sb.exec(&command(&format!(
                    "cd {REPO_DIR} && {prefix}pytest --collect-only -q"
                )))?;
                if probe.return_code != 0 {
                    return Ok(probe);
                }
                let full = sb.exec(&command(&format!("cd {REPO_DIR} && {prefix}pytest")))?;
                let return_code = match full.return_code {
                    0 | 1 => 0,
                    rc => rc,
                };
                Ok(ExecResult {
                    return_code,
                    stdout: format!(
                        "{}{}pytest exited with {}\n",
                        probe.stdout, full.stdout, full.return_code
                    ),
                    stderr: format!("{}{}", probe.stderr, full.stderr),
                    duration_ms: probe.duration_ms + full.duration_ms,
                })
            },
        )?;
        let outcome = match result.return_code {
            0 => TestResult::Verified,
            TIMEOUT_RC => TestResult::Timeout,
            5 => TestResult::NoTests,
            _ => TestResult::CollectError(record.stdout_excerpt.clone() + &record.stderr_excerpt),
        };
        let headline = match &outcome {
            TestResult::Verified => "tests ran: the environment is verified",
            TestResult::Timeout => "the test run timed out",
            TestResult::NoTests => "no tests were collected",
            TestResult::CollectError(_) => "pytest could not collect or run the tests",
        };
        let text = format!("{headline}\n{}", exec_text(&result, record.rolled_back));
        self.records.push(record);
        self.last_test = Some(outcome.clone());
        let terminal = outcome == TestResult::Verified;
        Ok((
            outcome,
            self.observe(text, Some(result.return_code), terminal),
        ))
    }

    fn change_base(&mut self, image: BaseImage, raw: &str) -> Result<Observation, DispatchError> {
        if self.base_changes >= self.max_base_changes {
            return Ok(self.observe(
                format!(
                    "base image change refused: the limit of {} changes is used up",
                    self.max_base_changes
                ),
                Some(1),
                false,
            ));
        }
        let cwd = self.sandbox.cwd().to_string();
        match self.sandbox.reset_with_base_image(&image) {
            Ok(()) => {}
            Err(SandboxError::ImageUnavailable(name)) => {
                return Ok(self.observe(format!("image {name} is not available"), Some(1), false));
            }
            Err(e) => return Err(e.into()),
        }
        self.base_changes += 1;
        self.records.push(CommandRecord {
            turn: self.next_turn(),
            command: command(raw),
            cwd,
            return_code: 0,
            classification: crate::classify::Kind::BaseImageChange,
            stdout_excerpt: String::new(),
            stderr_excerpt: String::new(),
            snapshot_before: None,
            rolled_back: false,
            env_delta: Vec::new(),
            installed: Vec::new(),
            assets: Vec::new(),
            thought: None,
        });
        self.stage()?;
        Ok(self.observe(
            format!("switched to {image}; all earlier work was discarded and the repository re-staged at {REPO_DIR}"),
            Some(0),
            false,
        ))
    }

    fn edit_file(&mut self, path: &str, patch: &str) -> Result<Observation, DispatchError> {
        if is_protected_test(path) {
            return Err(DispatchError::GuardViolation(format!(
                "{path} is a protected test file"
            )));
        }
        let target = resolve_path(self.sandbox.cwd(), path);
        let turn = self.next_turn();
        let script = asset_path(CODE_EDIT_NAME);
        let patch_path = asset_path(&format!("patch_{turn}.diff"));
        let assets = [
            Asset {
                path: script.clone(),
                content: CODE_EDIT_SCRIPT.to_string(),
            },
            Asset {
                path: patch_path.clone(),
                content: patch.to_string(),
            },
        ];
        let q = crate::classify::shell::quote;
        let recorded = Command::parse(format!("{EDIT_VERB} {} {}", q(&target), q(&patch_path)))
            .map_err(|e| DispatchError::InvalidAction(e.to_string()))?;
        let physical = command(&format!(
            "python3 {script} {} {}",
            q(&target),
            q(&patch_path)
        ));
        let (result, record) = exec_guarded_by(
            self.sandbox.as_mut(),
            &recorded,
            &assets,
            turn,
            &self.guard,
            |sb| sb.exec(&physical),
        )?;
        let text = exec_text(&result, record.rolled_back);
        self.records.push(record);
        Ok(self.observe(text, Some(result.return_code), false))
    }
}

/// The physical command an `edit_file` record stands for.
pub fn edit_file_physical(record: &Command) -> Option<String> {
    let line = parse_line(record.raw()).ok()?;
    let stage = line.stages().next()?;
    if stage.program() != Some(EDIT_VERB) {
        return None;
    }
    let args: Vec<&str> = stage.args().collect();
    let [target, patch] = args.as_slice() else {
        return None;
    };
    let q = crate::classify::shell::quote;
    Some(format!(
        "python3 {} {} {}",
        asset_path(CODE_EDIT_NAME),
        q(target),
        q(patch)
    ))
}

/// Runs the policy loop on a staged session until a terminal outcome.
///
/// `on_step` sees each step's new records as they land.
pub fn drive(
    session: &mut Session,
    policy: &mut dyn Policy,
    budget: &BuildBudget,
    on_step: &mut dyn FnMut(&[CommandRecord]),
) -> Outcome {
    let started = Instant::now();
    let mut history: Vec<HistoryEntry> = Vec::new();
    for step in 0..budget.max_turns {
        if started.elapsed().as_secs() >= budget.max_wall_seconds {
            break;
        }
        let context = PolicyContext {
            repo_full_name: session.repo.full_name.clone(),
            sha: session.repo.sha.clone(),
            base_image: session.sandbox().base_image().to_string(),
            turns_left: budget.max_turns - step,
        };
        let reply = match policy.next_action(&history, &context) {
            Ok(reply) => reply,
            Err(PolicyError::NoMoreActions) => break,
            Err(e) => {
                tracing::warn!(error = %e, "policy failed; aborting build");
                return Outcome::Aborted;
            }
        };
        let before = session.records.len();
        let observation = match &reply.action {
            Err(e) => session.observe(policy::parse_feedback(e), None, false),
            Ok(action) => match session.dispatch(action) {
                Ok(obs) => obs,
                Err(e) if e.is_recoverable() => session.observe(format!("error: {e}"), None, false),
                Err(e) => {
                    tracing::warn!(error = %e, "unrecoverable dispatch error; aborting build");
                    on_step(&session.records[before..]);
                    return Outcome::Aborted;
                }
            },
        };
        if let Some(first) = session.records.get_mut(before) {
            first.thought = reply.thought.clone();
        }
        on_step(&session.records[before..]);
        tracing::info!(step = step + 1, action = %reply.text, rc = ?observation.return_code, "step");
        let terminal = observation.terminal;
        history.push(HistoryEntry {
            action: reply.text,
            thought: reply.thought,
            observation,
        });
        if terminal {
            return Outcome::Verified;
        }
    }
    Outcome::BudgetExhausted
}

/// Starts a sandbox on the default image and stages the repository.
pub fn start_session(
    repo: &RepoSpec,
    backend: &Backend,
    cfg: &BuildConfig,
) -> Result<Session, AgentError> {
    let mut sandbox = backend.start(&BaseImage::default(), &cfg.session_id)?;
    sandbox.set_command_timeout(cfg.command_timeout);
    Session::start(sandbox, repo.clone(), cfg)
}

pub fn run_build_with(
    repo: &RepoSpec,
    policy: &mut dyn Policy,
    backend: &Backend,
    cfg: &BuildConfig,
    on_step: &mut dyn FnMut(&[CommandRecord]),
) -> Result<Trace, AgentError> {
    let mut session = start_session(repo, backend, cfg)?;
    on_step(session.records());
    let outcome = drive(&mut session, policy, &cfg.budget, on_step);
    Ok(session.into_trace(outcome))
}

pub fn run_build(
    repo: &RepoSpec,
    policy: &mut dyn Policy,
    backend: &Backend,
    cfg: &BuildConfig,
) -> Result<Trace, AgentError> {
    run_build_with(repo, policy, backend, cfg, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::classify::Kind;
    use crate::sandbox::helpers::make_patch;
    use crate::sandbox::sim::{PackageEntry, RemoteRepo, TestOutcome, TestProfile};
    use crate::sandbox::{SimSandbox, SimWorld};

    const URL: &str = "https://github.com/acme/widget.git";

    fn world(outcome: TestOutcome) -> SimWorld {
        let files = [
            (
                "src/app.py",
                "def greet(name):\n    return f\"hi {name}\"\n",
            ),
            (
                "tests/test_api.py",
                "from src.app import greet\n\ndef test_greet():\n    assert greet('a')\n",
            ),
            ("requirements.txt", "numpy>=1.21\n"),
        ];
        SimWorld::default()
            .with_package("pytest", PackageEntry::ok("8.0.0"))
            .with_package("numpy", PackageEntry::ok("1.26.4"))
            .with_package(
                "cupy",
                PackageEntry::fail_polluting(&["fastrlock", "numpy"]),
            )
            .with_remote(
                URL,
                RemoteRepo {
                    files: files
                        .iter()
                        .map(|(k, v)| (k.to_string(), v.to_string()))
                        .collect(),
                    shas: vec!["abc1234".into()],
                },
            )
            .with_tests(TestProfile::new(outcome))
    }

    fn repo() -> RepoSpec {
        RepoSpec::remote("acme/widget", "abc1234")
    }

    fn build(actions: &[&str], outcome: TestOutcome, cfg: &BuildConfig) -> Trace {
        let backend = Backend::Sim(Arc::new(world(outcome)));
        let mut policy = ScriptedPolicy::new(actions.iter().copied());
        run_build(&repo(), &mut policy, &backend, cfg).unwrap()
    }

    fn session(outcome: TestOutcome) -> Session {
        let sb = SimSandbox::start(Arc::new(world(outcome)), BaseImage::default(), "t").unwrap();
        Session::start(Box::new(sb), repo(), &BuildConfig::default()).unwrap()
    }

    #[test]
    fn scripted_build_verifies() {
        let trace = build(
            &["pip install pytest", "runtest"],
            TestOutcome::RunsPass,
            &BuildConfig::default(),
        );
        assert_eq!(trace.outcome, Outcome::Verified);
        assert_eq!(trace.records.len(), 5);
        let issued: Vec<&str> = trace.records[3..].iter().map(|r| r.command.raw()).collect();
        assert_eq!(issued, ["pip install pytest", "runtest"]);
        assert_eq!(
            trace.records[0].command.raw(),
            format!("git clone {URL} /repo")
        );
        trace.validate().unwrap();
    }

    #[test]
    fn budget_runs_out() {
        let cfg = BuildConfig {
            budget: BuildBudget {
                max_turns: 3,
                ..BuildBudget::default()
            },
            ..BuildConfig::default()
        };
        let trace = build(&["ls", "pwd", "ls", "runtest"], TestOutcome::RunsPass, &cfg);
        assert_eq!(trace.outcome, Outcome::BudgetExhausted);
        assert!(trace.records.iter().all(|r| !r.command.is_test_run()));
    }

    #[test]
    fn script_end_is_budget_exhausted() {
        let trace = build(&["ls"], TestOutcome::RunsPass, &BuildConfig::default());
        assert_eq!(trace.outcome, Outcome::BudgetExhausted);
    }

    #[test]
    fn base_image_change_mid_run() {
        let trace = build(
            &[
                "pip install numpy",
                "change_python_version 3.11",
                "pip install pytest",
                "runtest",
            ],
            TestOutcome::RunsPass,
            &BuildConfig::default(),
        );
        assert_eq!(trace.outcome, Outcome::Verified);
        assert_eq!(trace.final_base_image.name(), "python:3.11");
        let change = trace
            .records
            .iter()
            .position(|r| r.classification == Kind::BaseImageChange)
            .unwrap();
        assert_eq!(change, 4);
        assert_eq!(
            trace.records[change + 1].command.raw(),
            format!("git clone {URL} /repo")
        );
        trace.validate().unwrap();
    }

    #[test]
    fn runs_fail_still_verifies() {
        let mut s = session(TestOutcome::RunsFail);
        s.dispatch(&Action::Bash("pip install pytest".into()))
            .unwrap();
        let (result, obs) = s.run_tests(false).unwrap();
        assert_eq!(result, TestResult::Verified);
        assert!(obs.terminal);
        assert!(obs.text.contains("pytest exited with 1"));
    }

    #[test]
    fn collect_error_and_no_tests() {
        let mut s = session(TestOutcome::CollectError);
        s.dispatch(&Action::Bash("pip install pytest".into()))
            .unwrap();
        let (result, obs) = s.run_tests(false).unwrap();
        assert!(matches!(result, TestResult::CollectError(ref log) if !log.is_empty()));
        assert!(!obs.terminal);
        assert!(s.records().last().unwrap().rolled_back);

        let mut s = session(TestOutcome::NoTests);
        s.dispatch(&Action::Bash("pip install pytest".into()))
            .unwrap();
        assert_eq!(s.run_tests(false).unwrap().0, TestResult::NoTests);

        let mut s = session(TestOutcome::RunsPass);
        assert!(matches!(
            s.run_tests(false).unwrap().0,
            TestResult::CollectError(_)
        ));
    }

    #[test]
    fn download_with_conflict_pending() {
        let mut s = session(TestOutcome::RunsPass);
        for a in [
            "waitinglist add -p numpy -v >=1.21 -t pip",
            "waitinglist add -p numpy -v <1.20 -t pip",
        ] {
            s.dispatch(&parse_action(a).unwrap()).unwrap();
        }
        let obs = s.dispatch(&Action::Download).unwrap();
        assert!(
            obs.text.contains("conflict list must be empty"),
            "{}",
            obs.text
        );
        assert_eq!(obs.return_code, Some(1));

        s.dispatch(&parse_action("conflictlist solve -u").unwrap())
            .unwrap();
        let obs = s.dispatch(&Action::Download).unwrap();
        assert_eq!(obs.return_code, Some(0), "{}", obs.text);
        let last = s.records().last().unwrap();
        assert_eq!(last.command.raw(), "pip install 'numpy>=1.21'");
    }

    #[test]
    fn addfile_is_relative_to_cwd() {
        let mut s = session(TestOutcome::RunsPass);
        let obs = s
            .dispatch(&parse_action("waitinglist addfile requirements.txt").unwrap())
            .unwrap();
        assert!(obs.text.contains("queued 1 entries"), "{}", obs.text);
    }

    #[test]
    fn edit_guard() {
        let mut s = session(TestOutcome::RunsPass);
        let patch = make_patch("x", "y");
        for path in [
            "tests/test_api.py",
            "tests/test_core.py",
            "pkg/core_test.py",
        ] {
            let err = s
                .dispatch(&Action::EditFile {
                    path: path.into(),
                    patch: patch.clone(),
                })
                .unwrap_err();
            assert!(matches!(err, DispatchError::GuardViolation(_)));
        }
        for raw in [
            "rm tests/test_api.py",
            "mv tests/test_api.py /tmp",
            "echo x > tests/test_api.py",
            "sed -i s/a/b/ tests/test_api.py",
        ] {
            assert!(
                matches!(
                    s.dispatch(&Action::Bash(raw.into())),
                    Err(DispatchError::GuardViolation(_))
                ),
                "{raw}"
            );
        }
        assert!(s
            .dispatch(&Action::Bash("cat tests/test_api.py".into()))
            .is_ok());
    }

    #[test]
    fn edit_applies_and_records_assets() {
        let mut s = session(TestOutcome::RunsPass);
        let patch = make_patch("return f\"hi {name}\"", "return f'hi {name}'");
        let obs = s
            .dispatch(&Action::EditFile {
                path: "src/app.py".into(),
                patch: patch.clone(),
            })
            .unwrap();
        assert_eq!(obs.return_code, Some(0), "{}", obs.text);
        let rec = s.records().last().unwrap();
        assert_eq!(rec.classification, Kind::CodeEdit);
        assert_eq!(
            rec.command.raw(),
            format!(
                "edit_file /repo/src/app.py /envforge/assets/patch_{}.diff",
                rec.turn
            )
        );
        assert_eq!(rec.assets.len(), 2);
        assert_eq!(rec.assets[1].content, patch);
        let sim = s.sandbox().as_sim().unwrap();
        assert!(sim.state().files["/repo/src/app.py"].contains("f'hi {name}'"));
        assert_eq!(
            edit_file_physical(&rec.command).unwrap(),
            format!("python3 /envforge/assets/code_edit.py /repo/src/app.py /envforge/assets/patch_{}.diff", rec.turn)
        );
    }

    #[test]
    fn malformed_patch_rolls_back() {
        let mut s = session(TestOutcome::RunsPass);
        let obs = s
            .dispatch(&Action::EditFile {
                path: "src/app.py".into(),
                patch: "not a patch\n".into(),
            })
            .unwrap();
        assert_ne!(obs.return_code, Some(0));
        assert!(s.records().last().unwrap().rolled_back);
        assert!(!s
            .sandbox()
            .as_sim()
            .unwrap()
            .state()
            .is_file("/envforge/assets/code_edit.py"));
    }

    #[test]
    fn pipreqs_writes_requirements() {
        let mut s = session(TestOutcome::RunsPass);
        let obs = s.dispatch(&Action::RunPipreqs).unwrap();
        assert_eq!(obs.return_code, Some(0), "{}", obs.text);
        let sim = s.sandbox().as_sim().unwrap();
        assert!(sim.state().is_file(&format!("/repo/{PIPREQS_OUTPUT}")));
    }

    #[test]
    fn base_change_limit() {
        let backend = Backend::Sim(Arc::new(world(TestOutcome::RunsPass)));
        let cfg = BuildConfig {
            budget: BuildBudget {
                max_base_image_changes: 1,
                ..BuildBudget::default()
            },
            ..BuildConfig::default()
        };
        let mut policy = ScriptedPolicy::new(["change_python_version 3.11", "clear_configuration"]);
        let trace = run_build(&repo(), &mut policy, &backend, &cfg).unwrap();
        let changes = trace
            .records
            .iter()
            .filter(|r| r.classification == Kind::BaseImageChange)
            .count();
        assert_eq!(changes, 1);
        assert_eq!(trace.final_base_image.name(), "python:3.11");
    }

    #[test]
    fn observation_is_bounded() {
        let mut s = session(TestOutcome::RunsPass);
        let long = "x".repeat(9000);
        let obs = s.dispatch(&Action::Bash(format!("echo {long}"))).unwrap();
        assert!(obs.text.chars().count() <= DEFAULT_HEAD_LIMIT + DEFAULT_TAIL_LIMIT + 40);
        assert!(obs.text.contains("chars omitted"));
    }

    #[test]
    fn missing_repo_is_unavailable() {
        let backend = Backend::Sim(Arc::new(world(TestOutcome::RunsPass)));
        let mut policy = ScriptedPolicy::new(["runtest"]);
        let err = run_build(
            &RepoSpec::remote("acme/missing", "abc"),
            &mut policy,
            &backend,
            &BuildConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, AgentError::RepoUnavailable(_)));
    }

    #[test]
    fn thoughts_attach_to_first_record() {
        let backend = Backend::Sim(Arc::new(world(TestOutcome::RunsPass)));
        let mut policy = ScriptedPolicy::from_json(
            r#"[{"action": "pip install pytest", "thought": "need the runner"}, "runtest"]"#,
        )
        .unwrap();
        let trace = run_build(&repo(), &mut policy, &backend, &BuildConfig::default()).unwrap();
        assert_eq!(trace.records[3].thought.as_deref(), Some("need the runner"));
        assert_eq!(trace.records[4].thought, None);
    }
}
