//! Container backend driven through the `docker` CLI.
//!
//! Snapshots are committed images; rollback replaces the container with a
//! fresh one started from the committed image.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::process::{Command as Process, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::{
    parent_dir, resolve_path, session_effect, BackendKind, ExecResult, Sandbox, SandboxError,
    SessionEffect, DEFAULT_COMMAND_TIMEOUT,
};
use crate::classify::shell::quote;
use crate::trace::{BaseImage, Command, SnapshotId, Tool};

const DOCKER: &str = "docker";

/// Output of one CLI invocation.
#[derive(Debug)]
pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
    pub elapsed: Duration,
}

/// Runs `docker ARGS`, feeding `stdin`; `None` on timeout (the child is killed).
pub fn docker(
    args: &[&str],
    stdin: Option<&str>,
    limit: Option<Duration>,
) -> Result<Option<CliOutput>, SandboxError> {
    let mut child = Process::new(DOCKER)
        .args(args)
        .stdin(if stdin.is_some() {
            Stdio::piped()
        } else {
            Stdio::null()
        })
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| SandboxError::BackendUnavailable(format!("cannot run {DOCKER}: {e}")))?;
    let started = Instant::now();
    if let (Some(text), Some(mut pipe)) = (stdin, child.stdin.take()) {
        let text = text.to_string();
        thread::spawn(move || {
            let _ = pipe.write_all(text.as_bytes());
        });
    }
    let drain = |mut r: Box<dyn Read + Send>| {
        thread::spawn(move || {
            let mut buf = Vec::new();
            let _ = r.read_to_end(&mut buf);
            String::from_utf8_lossy(&buf).into_owned()
        })
    };
    let out = drain(Box::new(child.stdout.take().expect("piped")));
    let err = drain(Box::new(child.stderr.take().expect("piped")));
    let status = loop {
        if let Some(status) = child
            .try_wait()
            .map_err(|e| SandboxError::BackendIo(e.to_string()))?
        {
            break status;
        }
        if limit.is_some_and(|l| started.elapsed() > l) {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(None);
        }
        thread::sleep(Duration::from_millis(20));
    };
    Ok(Some(CliOutput {
        code: status.code().unwrap_or(255),
        stdout: out.join().unwrap_or_default(),
        stderr: err.join().unwrap_or_default(),
        elapsed: started.elapsed(),
    }))
}

fn docker_ok(args: &[&str]) -> Result<CliOutput, SandboxError> {
    let out = docker(args, None, None)?.expect("no limit");
    if out.code != 0 {
        return Err(SandboxError::BackendIo(format!(
            "docker {} failed: {}",
            args.first().unwrap_or(&""),
            out.stderr.trim()
        )));
    }
    Ok(out)
}

/// Whether a usable container runtime is reachable.
pub fn docker_available() -> bool {
    matches!(docker(&["version", "--format", "{{.Server.Version}}"], None, Some(Duration::from_secs(20))), Ok(Some(o)) if o.code == 0)
}

/// Builds `dir/Dockerfile` into `tag`. Returns the build log on failure.
pub fn build_image(dir: &Path, tag: &str) -> Result<Result<(), String>, SandboxError> {
    let dir = dir.to_string_lossy();
    let out = docker(&["build", "-t", tag, &dir], None, None)?.expect("no limit");
    Ok(if out.code == 0 {
        Ok(())
    } else {
        Err(out.stderr)
    })
}

pub fn remove_image(tag: &str) {
    let _ = docker(&["rmi", "-f", tag], None, None);
}

struct Saved {
    image: String,
    cwd: String,
    env: BTreeMap<String, String>,
}

pub struct ContainerSandbox {
    session_id: String,
    image: BaseImage,
    cwd: String,
    env: BTreeMap<String, String>,
    snapshots: BTreeMap<SnapshotId, Saved>,
    pinned: Vec<SnapshotId>,
    latest: Option<SnapshotId>,
    counter: u64,
    timeout: Duration,
}

impl std::fmt::Debug for ContainerSandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContainerSandbox")
            .field("session_id", &self.session_id)
            .field("image", &self.image)
            .field("cwd", &self.cwd)
            .finish()
    }
}

impl ContainerSandbox {
    pub fn start(image: BaseImage, session_id: impl Into<String>) -> Result<Self, SandboxError> {
        if !docker_available() {
            return Err(SandboxError::BackendUnavailable(
                "docker daemon not reachable".into(),
            ));
        }
        let sb = Self {
            session_id: session_id.into(),
            image: image.clone(),
            cwd: "/".into(),
            env: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            pinned: Vec::new(),
            latest: None,
            counter: 0,
            timeout: DEFAULT_COMMAND_TIMEOUT,
        };
        sb.launch(image.name())?;
        Ok(sb)
    }

    /// Starts a session from an already built image tag.
    pub fn start_from_tag(tag: &str, session_id: impl Into<String>) -> Result<Self, SandboxError> {
        let image = BaseImage::new(tag).map_err(SandboxError::ImageUnavailable)?;
        let sb = Self::start(image, session_id)?;
        let inspect = docker_ok(&[
            "image",
            "inspect",
            "--format",
            "{{.Config.WorkingDir}}",
            tag,
        ])?;
        let mut sb = sb;
        let wd = inspect.stdout.trim();
        if wd.starts_with('/') {
            sb.cwd = wd.to_string();
        }
        Ok(sb)
    }

    pub fn container_name(&self) -> String {
        format!("envforge-{}", self.session_id)
    }

    fn ensure_image(name: &str) -> Result<(), SandboxError> {
        let present = docker(&["image", "inspect", name], None, None)?.is_some_and(|o| o.code == 0);
        if present {
            return Ok(());
        }
        let pulled = docker(&["pull", name], None, None)?.is_some_and(|o| o.code == 0);
        if pulled {
            Ok(())
        } else {
            Err(SandboxError::ImageUnavailable(name.to_string()))
        }
    }

    fn launch(&self, image: &str) -> Result<(), SandboxError> {
        Self::ensure_image(image)?;
        let name = self.container_name();
        let _ = docker(&["rm", "-f", &name], None, None);
        docker_ok(&[
            "run",
            "-d",
            "--name",
            &name,
            "--entrypoint",
            "sleep",
            image,
            "infinity",
        ])?;
        Ok(())
    }

    fn drop_snapshot(&mut self, id: &SnapshotId) {
        if let Some(saved) = self.snapshots.remove(id) {
            remove_image(&saved.image);
        }
    }

    fn raw_exec(
        &self,
        script: &str,
        stdin: Option<&str>,
        limit: Option<Duration>,
    ) -> Result<Option<CliOutput>, SandboxError> {
        let name = self.container_name();
        let mut args: Vec<String> = vec!["exec".into()];
        if stdin.is_some() {
            args.push("-i".into());
        }
        args.extend(["-w".into(), self.cwd.clone()]);
        for (k, v) in &self.env {
            args.extend(["-e".into(), format!("{k}={v}")]);
        }
        args.extend([name, "sh".into(), "-c".into(), script.to_string()]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        docker(&refs, stdin, limit)
    }
}

impl Drop for ContainerSandbox {
    fn drop(&mut self) {
        let _ = docker(&["rm", "-f", &self.container_name()], None, None);
        let ids: Vec<SnapshotId> = self.snapshots.keys().cloned().collect();
        for id in ids {
            self.drop_snapshot(&id);
        }
    }
}

impl Sandbox for ContainerSandbox {
    fn backend(&self) -> BackendKind {
        BackendKind::Container
    }

    fn session_id(&self) -> &str {
        &self.session_id
    }

    fn base_image(&self) -> &BaseImage {
        &self.image
    }

    fn cwd(&self) -> &str {
        &self.cwd
    }

    fn exported_env(&self) -> &BTreeMap<String, String> {
        &self.env
    }

    fn exec(&mut self, command: &Command) -> Result<ExecResult, SandboxError> {
        let out = self
            .raw_exec(command.raw(), None, Some(self.timeout))?
            .ok_or(SandboxError::Timeout {
                limit: self.timeout,
            })?;
        let result = ExecResult {
            return_code: out.code.clamp(0, 255),
            stdout: out.stdout,
            stderr: out.stderr,
            duration_ms: out.elapsed.as_millis() as u64,
        };
        if result.return_code == 0 {
            match session_effect(command) {
                SessionEffect::Cd(target) => self.cwd = resolve_path(&self.cwd, &target),
                SessionEffect::Export(pairs) => self.env.extend(pairs),
                SessionEffect::None => {}
            }
        }
        Ok(result)
    }

    fn snapshot(&mut self) -> Result<SnapshotId, SandboxError> {
        self.counter += 1;
        let tag = format!("envforge-snap-{}:{}", self.session_id, self.counter);
        docker_ok(&["commit", &self.container_name(), &tag])?;
        let id = SnapshotId(tag.clone());
        if let Some(prev) = self.latest.take() {
            if !self.pinned.contains(&prev) {
                self.drop_snapshot(&prev);
            }
        }
        self.snapshots.insert(
            id.clone(),
            Saved {
                image: tag,
                cwd: self.cwd.clone(),
                env: self.env.clone(),
            },
        );
        self.latest = Some(id.clone());
        Ok(id)
    }

    fn pin_snapshot(&mut self, id: &SnapshotId) -> Result<(), SandboxError> {
        if !self.snapshots.contains_key(id) {
            return Err(SandboxError::UnknownSnapshot(id.clone()));
        }
        self.pinned.push(id.clone());
        Ok(())
    }

    fn rollback(&mut self, id: &SnapshotId) -> Result<(), SandboxError> {
        let saved = self
            .snapshots
            .get(id)
            .ok_or_else(|| SandboxError::UnknownSnapshot(id.clone()))?;
        let (image, cwd, env) = (saved.image.clone(), saved.cwd.clone(), saved.env.clone());
        self.launch(&image)?;
        self.cwd = cwd;
        self.env = env;
        Ok(())
    }

    fn reset_with_base_image(&mut self, image: &BaseImage) -> Result<(), SandboxError> {
        self.launch(image.name())?;
        self.image = image.clone();
        self.cwd = "/".into();
        self.env.clear();
        let ids: Vec<SnapshotId> = self.snapshots.keys().cloned().collect();
        for id in ids {
            self.drop_snapshot(&id);
        }
        self.pinned.clear();
        self.latest = None;
        Ok(())
    }

    fn installed_versions(&mut self, tool: Tool) -> Result<BTreeMap<String, String>, SandboxError> {
        let script = match tool {
            Tool::Pip => "python -m pip freeze --all 2>/dev/null || pip freeze 2>/dev/null || true",
            Tool::Apt => "dpkg-query -W -f='${Package} ${Version}\\n' 2>/dev/null || true",
        };
        let out =
            self.raw_exec(script, None, Some(self.timeout))?
                .ok_or(SandboxError::Timeout {
                    limit: self.timeout,
                })?;
        let mut map = BTreeMap::new();
        for line in out.stdout.lines() {
            let pair = match tool {
                Tool::Pip => line.split_once("=="),
                Tool::Apt => line.split_once(' '),
            };
            if let Some((name, version)) = pair {
                map.insert(super::normalize_for(tool, name), version.trim().to_string());
            }
        }
        Ok(map)
    }

    fn write_file(&mut self, path: &str, content: &str) -> Result<(), SandboxError> {
        let path = resolve_path(&self.cwd, path);
        let script = format!(
            "mkdir -p {} && cat > {}",
            quote(&parent_dir(&path)),
            quote(&path)
        );
        let out = self
            .raw_exec(&script, Some(content), None)?
            .expect("no limit");
        if out.code != 0 {
            return Err(SandboxError::BackendIo(format!(
                "write {path}: {}",
                out.stderr.trim()
            )));
        }
        Ok(())
    }

    fn read_file(&mut self, path: &str) -> Result<Option<String>, SandboxError> {
        let path = resolve_path(&self.cwd, path);
        let out = self
            .raw_exec(&format!("cat {}", quote(&path)), None, None)?
            .expect("no limit");
        Ok((out.code == 0).then_some(out.stdout))
    }

    fn upload_dir(&mut self, host: &Path, dest: &str) -> Result<(), SandboxError> {
        let dest = resolve_path(&self.cwd, dest);
        self.raw_exec(&format!("mkdir -p {}", quote(&dest)), None, None)?;
        let src = format!("{}/.", host.to_string_lossy().trim_end_matches('/'));
        docker_ok(&["cp", &src, &format!("{}:{dest}", self.container_name())])?;
        self.raw_exec(&format!("rm -rf {0}/.envforge", quote(&dest)), None, None)?;
        Ok(())
    }

    fn set_command_timeout(&mut self, limit: Duration) {
        self.timeout = limit;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_image_or_missing_runtime() {
        let image = BaseImage::new("envforge-no-such-image:0").unwrap();
        match ContainerSandbox::start(image, "t-missing") {
            Err(SandboxError::BackendUnavailable(_)) | Err(SandboxError::ImageUnavailable(_)) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
