//! The command interpreter behind [`super::SimSandbox`].
//!
//! Each line runs with its own copy of the working directory and
//! environment; only the filesystem and installed-package tables are
//! shared with the state. Unknown programs exit 127.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use super::helpers::{self, EditOutcome};
use super::sim::{Behavior, SimState, SimWorld, TestOutcome};
use super::{normalize_for, parent_dir, resolve_path, ExecResult, SandboxError};
use crate::classify::install::{split_requirement, stage_specs};
use crate::classify::shell::{Connector, RedirectMode, Stage, Word};
use crate::classify::{is_safe_program, parse_line, ClassifyError, InstallTarget, Line};
use crate::depmgr::version::{Version, VersionConstraint};
use crate::trace::{BaseImage, Tool};

pub(super) struct LineRun {
    pub result: ExecResult,
    /// Working directory at the end of the line.
    pub cwd: String,
}

pub(super) fn run_line(
    world: &SimWorld,
    image: &BaseImage,
    state: &mut SimState,
    line: &Line,
    limit: Duration,
) -> Result<LineRun, SandboxError> {
    let mut sh = Shell {
        world,
        image,
        cwd: state.cwd.clone(),
        env: state.env.clone(),
        state,
        limit,
        elapsed: 0,
        exited: None,
    };
    let out = sh.run(line)?;
    Ok(LineRun {
        result: ExecResult {
            return_code: out.rc,
            stdout: out.stdout,
            stderr: out.stderr,
            duration_ms: sh.elapsed * 1000,
        },
        cwd: sh.cwd,
    })
}

#[derive(Debug, Default)]
struct Out {
    rc: i32,
    stdout: String,
    stderr: String,
}

impl Out {
    fn ok(stdout: impl Into<String>) -> Self {
        Self {
            stdout: stdout.into(),
            ..Self::default()
        }
    }

    fn err(rc: i32, stderr: impl Into<String>) -> Self {
        Self {
            rc,
            stderr: stderr.into(),
            ..Self::default()
        }
    }

    fn code(rc: i32) -> Self {
        Self {
            rc,
            ..Self::default()
        }
    }
}

type Res = Result<Out, SandboxError>;

#[derive(Debug, Clone)]
enum Sink {
    Stdout,
    Stderr,
    Null,
    File(String),
}

struct Shell<'a> {
    world: &'a SimWorld,
    image: &'a BaseImage,
    state: &'a mut SimState,
    cwd: String,
    env: BTreeMap<String, String>,
    limit: Duration,
    elapsed: u64,
    exited: Option<i32>,
}

/// Splits `-abc` style switches from operands. `--` ends switches.
fn split_flags(args: &[String]) -> (BTreeSet<char>, Vec<String>) {
    let mut flags = BTreeSet::new();
    let mut operands = Vec::new();
    let mut done = false;
    for a in args {
        if !done && a == "--" {
            done = true;
        } else if !done && a.starts_with('-') && a.len() > 1 && !a.starts_with("--") {
            flags.extend(a[1..].chars());
        } else if !done && a.starts_with("--") {
        } else {
            operands.push(a.clone());
        }
    }
    (flags, operands)
}

fn basename(path: &str) -> &str {
    let p = path.trim_end_matches('/');
    p.rsplit('/').next().unwrap_or(p)
}

fn lines_of(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    if text.ends_with('\n') || text.is_empty() {
        lines.pop();
    }
    lines
}

fn join_lines(lines: &[&str]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

fn python_tuple(v: &str) -> Vec<u64> {
    v.split('.').map(|p| p.parse().unwrap_or(0)).collect()
}

impl Shell<'_> {
    fn run(&mut self, line: &Line) -> Res {
        let mut total = Out::default();
        for item in &line.chain {
            if self.exited.is_some() {
                break;
            }
            let go = match item.connector {
                Connector::Seq => true,
                Connector::And => total.rc == 0,
                Connector::Or => total.rc != 0,
            };
            if !go {
                continue;
            }
            let out = self.pipeline(&item.stages)?;
            total.rc = out.rc;
            total.stdout.push_str(&out.stdout);
            total.stderr.push_str(&out.stderr);
        }
        if let Some(code) = self.exited {
            total.rc = code;
        }
        Ok(total)
    }

    fn pipeline(&mut self, stages: &[Stage]) -> Res {
        let mut data = String::new();
        let mut stderr = String::new();
        let mut rc = 0;
        for stage in stages {
            let out = self.stage(stage, std::mem::take(&mut data))?;
            data = out.stdout;
            stderr.push_str(&out.stderr);
            rc = out.rc;
            if self.exited.is_some() {
                break;
            }
        }
        Ok(Out {
            rc,
            stdout: data,
            stderr,
        })
    }

    fn tick(&mut self, secs: u64) -> Result<(), SandboxError> {
        self.elapsed += secs;
        if self.elapsed > self.limit.as_secs() {
            return Err(SandboxError::Timeout { limit: self.limit });
        }
        Ok(())
    }

    fn expand_str(&self, text: &str) -> String {
        let chars: Vec<char> = text.chars().collect();
        let mut out = String::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i] != '$' {
                out.push(chars[i]);
                i += 1;
                continue;
            }
            let (name, next) = if chars.get(i + 1) == Some(&'{') {
                match chars[i + 2..].iter().position(|c| *c == '}') {
                    Some(end) => (
                        chars[i + 2..i + 2 + end].iter().collect::<String>(),
                        i + 3 + end,
                    ),
                    None => (String::new(), i + 1),
                }
            } else {
                let len = chars[i + 1..]
                    .iter()
                    .take_while(|c| c.is_ascii_alphanumeric() || **c == '_')
                    .count();
                (chars[i + 1..i + 1 + len].iter().collect(), i + 1 + len)
            };
            if name.is_empty() {
                out.push('$');
                i += 1;
            } else {
                out.push_str(self.env.get(&name).map(String::as_str).unwrap_or(""));
                i = next;
            }
        }
        out
    }

    fn expand(&self, word: &Word) -> String {
        if word.expands {
            self.expand_str(&word.text)
        } else {
            word.text.clone()
        }
    }

    fn path(&self, p: &str) -> String {
        resolve_path(&self.cwd, p)
    }

    fn stage(&mut self, stage: &Stage, input: String) -> Res {
        let argv: Vec<String> = stage.argv.iter().map(|w| self.expand(w)).collect();
        let assignments: Vec<(String, String)> = stage
            .assignments
            .iter()
            .map(|(k, v)| (k.clone(), self.expand_str(v)))
            .collect();
        if argv.is_empty() {
            self.env.extend(assignments);
            return self.route(stage, Out::default());
        }
        let mut stdin = input;
        for r in &stage.redirects {
            if r.mode == RedirectMode::Read {
                let target = r
                    .target
                    .as_ref()
                    .map(|w| self.expand(w))
                    .unwrap_or_default();
                match self.state.files.get(&self.path(&target)) {
                    Some(content) => stdin = content.clone(),
                    None => {
                        return Ok(Out::err(
                            1,
                            format!("sh: 1: cannot open {target}: No such file\n"),
                        ));
                    }
                }
            }
        }
        let saved = (!assignments.is_empty()).then(|| self.env.clone());
        self.env.extend(assignments);
        let out = self.command(&argv, &stdin);
        if let Some(env) = saved {
            self.env = env;
        }
        let out = out?;
        self.route(stage, out)
    }

    fn route(&mut self, stage: &Stage, out: Out) -> Res {
        let mut fd1 = Sink::Stdout;
        let mut fd2 = Sink::Stderr;
        for r in &stage.redirects {
            match r.mode {
                RedirectMode::Read => {}
                RedirectMode::Write | RedirectMode::Append => {
                    let raw = r
                        .target
                        .as_ref()
                        .map(|w| self.expand(w))
                        .unwrap_or_default();
                    let sink = if raw == "/dev/null" {
                        Sink::Null
                    } else {
                        let path = self.path(&raw);
                        if self.state.is_dir(&path) {
                            return Ok(Out::err(
                                2,
                                format!("sh: 1: cannot create {raw}: Is a directory\n"),
                            ));
                        }
                        if !self.state.is_dir(&parent_dir(&path)) {
                            return Ok(Out::err(
                                2,
                                format!("sh: 1: cannot create {raw}: Directory nonexistent\n"),
                            ));
                        }
                        let entry = self.state.files.entry(path.clone()).or_default();
                        if r.mode == RedirectMode::Write {
                            entry.clear();
                        }
                        Sink::File(path)
                    };
                    if r.both {
                        fd1 = sink.clone();
                        fd2 = sink;
                    } else if r.fd == 2 {
                        fd2 = sink;
                    } else {
                        fd1 = sink;
                    }
                }
                RedirectMode::Dup(m) => {
                    let src = match m {
                        1 => fd1.clone(),
                        2 => fd2.clone(),
                        _ => continue,
                    };
                    if r.fd == 2 {
                        fd2 = src;
                    } else {
                        fd1 = src;
                    }
                }
            }
        }
        let mut result = Out::code(out.rc);
        for (text, sink) in [(out.stdout, fd1), (out.stderr, fd2)] {
            match sink {
                Sink::Stdout => result.stdout.push_str(&text),
                Sink::Stderr => result.stderr.push_str(&text),
                Sink::Null => {}
                Sink::File(p) => self.state.files.entry(p).or_default().push_str(&text),
            }
        }
        Ok(result)
    }

    fn has_python(&self) -> bool {
        self.image.python_version().is_some()
    }

    fn pip_has(&self, name: &str) -> bool {
        self.state
            .installed
            .get(&Tool::Pip)
            .is_some_and(|m| m.contains_key(&normalize_for(Tool::Pip, name)))
    }

    fn command(&mut self, argv: &[String], stdin: &str) -> Res {
        let prog = argv[0].as_str();
        let args = &argv[1..];
        Ok(match prog {
            "cd" => self.cd(args),
            "pwd" => Out::ok(format!("{}\n", self.cwd)),
            "echo" => {
                let (newline, words) = match args.first().map(String::as_str) {
                    Some("-n") => (false, &args[1..]),
                    _ => (true, args),
                };
                let mut text = words.join(" ");
                if newline {
                    text.push('\n');
                }
                Out::ok(text)
            }
            "true" | ":" => Out::code(0),
            "false" => Out::code(1),
            "exit" => {
                let code = args.first().and_then(|a| a.parse().ok()).unwrap_or(0);
                self.exited = Some(code);
                Out::code(code)
            }
            "sleep" => {
                let secs: f64 = args.first().and_then(|a| a.parse().ok()).unwrap_or(0.0);
                self.tick(secs.ceil() as u64)?;
                Out::code(0)
            }
            "cat" => self.cat(args, stdin),
            "ls" => self.ls(args),
            "mkdir" => self.mkdir(args),
            "touch" => self.touch(args),
            "rm" => self.rm(args),
            "cp" => self.cp(args, false),
            "mv" => self.cp(args, true),
            "chmod" => {
                let (_, ops) = split_flags(args);
                match ops
                    .iter()
                    .skip(1)
                    .find(|p| !self.state.exists(&self.path(p)))
                {
                    Some(p) => Out::err(
                        1,
                        format!("chmod: cannot access '{p}': No such file or directory\n"),
                    ),
                    None => Out::code(0),
                }
            }
            "export" => self.export(args),
            "env" | "printenv" => return self.env_cmd(prog, args, stdin),
            "grep" => self.grep(args, stdin),
            "head" | "tail" => self.head_tail(prog == "head", args, stdin),
            "wc" => self.wc(args, stdin),
            "sort" => {
                let (flags, ops) = split_flags(args);
                let text = match self.read_inputs(&ops, stdin, "sort") {
                    Ok(t) => t,
                    Err(o) => return Ok(o),
                };
                let mut lines = lines_of(&text);
                lines.sort();
                if flags.contains(&'u') {
                    lines.dedup();
                }
                if flags.contains(&'r') {
                    lines.reverse();
                }
                Out::ok(join_lines(&lines))
            }
            "tee" => Out::ok(stdin),
            "which" => self.which(args),
            "whoami" => Out::ok("root\n"),
            "uname" => {
                if args.iter().any(|a| a == "-a") {
                    Out::ok("Linux sandbox 6.1.0 #1 SMP x86_64 GNU/Linux\n")
                } else {
                    Out::ok("Linux\n")
                }
            }
            "hostname" => Out::ok("sandbox\n"),
            "date" => Out::ok("Thu Jan  1 00:00:00 UTC 2026\n"),
            "sh" | "bash" => return self.sub_shell(prog, args),
            "source" | "." => match args.first() {
                Some(p) if self.state.is_file(&self.path(p)) => Out::code(0),
                Some(p) => Out::err(1, format!("sh: 1: {prog}: cannot open {p}: No such file\n")),
                None => Out::err(2, format!("sh: 1: {prog}: filename argument required\n")),
            },
            "sed" => self.sed(args, stdin),
            "curl" | "wget" => Out::err(
                6,
                format!("{prog}: could not resolve host: network is unavailable\n"),
            ),
            "python" | "python3" if self.has_python() => return self.python(args),
            "pip" | "pip3" if self.has_python() => self.pip(args),
            "apt-get" | "apt" => self.apt(args),
            "git" => self.git(args),
            "pytest" if self.pip_has("pytest") => return self.pytest(args),
            "poetry" if self.pip_has("poetry") => return self.poetry(args, stdin),
            p if is_safe_program(p) => Out::code(0),
            p => Out::err(127, format!("sh: 1: {p}: not found\n")),
        })
    }

    fn cd(&mut self, args: &[String]) -> Out {
        let target = args.first().cloned().unwrap_or_else(|| "/root".into());
        let path = self.path(&target);
        if self.state.is_dir(&path) {
            self.cwd = path;
            Out::code(0)
        } else {
            Out::err(2, format!("sh: 1: cd: can't cd to {target}\n"))
        }
    }

    fn children(&self, dir: &str) -> Vec<String> {
        let prefix = if dir == "/" {
            "/".to_string()
        } else {
            format!("{dir}/")
        };
        let direct = |p: &String| {
            p.strip_prefix(&prefix)
                .filter(|rest| !rest.is_empty() && !rest.contains('/'))
                .map(str::to_string)
        };
        let names: BTreeSet<String> = self
            .state
            .dirs
            .iter()
            .filter_map(direct)
            .chain(self.state.files.keys().filter_map(direct))
            .collect();
        names.into_iter().collect()
    }

    fn read_inputs(&self, ops: &[String], stdin: &str, prog: &str) -> Result<String, Out> {
        if ops.is_empty() {
            return Ok(stdin.to_string());
        }
        let mut text = String::new();
        for op in ops {
            let path = self.path(op);
            if self.state.is_dir(&path) {
                return Err(Out::err(1, format!("{prog}: {op}: Is a directory\n")));
            }
            match self.state.files.get(&path) {
                Some(c) => text.push_str(c),
                None => {
                    return Err(Out::err(
                        1,
                        format!("{prog}: {op}: No such file or directory\n"),
                    ))
                }
            }
        }
        Ok(text)
    }

    fn cat(&self, args: &[String], stdin: &str) -> Out {
        let (_, ops) = split_flags(args);
        match self.read_inputs(&ops, stdin, "cat") {
            Ok(t) => Out::ok(t),
            Err(o) => o,
        }
    }

    fn ls(&self, args: &[String]) -> Out {
        let (flags, mut ops) = split_flags(args);
        if ops.is_empty() {
            ops.push(".".into());
        }
        let mut out = Out::default();
        let many = ops.len() > 1;
        for op in &ops {
            let path = self.path(op);
            if self.state.is_file(&path) {
                out.stdout.push_str(&format!("{op}\n"));
            } else if self.state.is_dir(&path) {
                if many {
                    out.stdout.push_str(&format!("{op}:\n"));
                }
                for name in self.children(&path) {
                    if flags.contains(&'a') || !name.starts_with('.') {
                        out.stdout.push_str(&format!("{name}\n"));
                    }
                }
            } else {
                out.rc = 2;
                out.stderr.push_str(&format!(
                    "ls: cannot access '{op}': No such file or directory\n"
                ));
            }
        }
        out
    }

    fn mkdir(&mut self, args: &[String]) -> Out {
        let (flags, ops) = split_flags(args);
        if ops.is_empty() {
            return Out::err(1, "mkdir: missing operand\n");
        }
        for op in &ops {
            let path = self.path(op);
            if flags.contains(&'p') {
                if self.state.is_file(&path) {
                    return Out::err(
                        1,
                        format!("mkdir: cannot create directory '{op}': File exists\n"),
                    );
                }
                self.state.mkdir_p(&path);
            } else if self.state.exists(&path) {
                return Out::err(
                    1,
                    format!("mkdir: cannot create directory '{op}': File exists\n"),
                );
            } else if !self.state.is_dir(&parent_dir(&path)) {
                return Out::err(
                    1,
                    format!("mkdir: cannot create directory '{op}': No such file or directory\n"),
                );
            } else {
                self.state.dirs.insert(path);
            }
        }
        Out::code(0)
    }

    fn touch(&mut self, args: &[String]) -> Out {
        let (_, ops) = split_flags(args);
        for op in &ops {
            let path = self.path(op);
            if !self.state.is_dir(&parent_dir(&path)) {
                return Out::err(
                    1,
                    format!("touch: cannot touch '{op}': No such file or directory\n"),
                );
            }
            if !self.state.is_dir(&path) {
                self.state.files.entry(path).or_default();
            }
        }
        Out::code(0)
    }

    fn remove_tree(&mut self, path: &str) {
        let prefix = format!("{path}/");
        self.state
            .files
            .retain(|p, _| p != path && !p.starts_with(&prefix));
        self.state
            .dirs
            .retain(|p| p != path && !p.starts_with(&prefix));
    }

    fn rm(&mut self, args: &[String]) -> Out {
        let (flags, ops) = split_flags(args);
        let recursive = flags.contains(&'r') || flags.contains(&'R');
        let force = flags.contains(&'f');
        let mut out = Out::default();
        for op in &ops {
            let path = self.path(op);
            if path == "/" {
                out = Out::err(1, "rm: refusing to remove '/'\n");
            } else if self.state.is_dir(&path) {
                if recursive {
                    self.remove_tree(&path);
                } else {
                    out = Out::err(1, format!("rm: cannot remove '{op}': Is a directory\n"));
                }
            } else if self.state.files.remove(&path).is_none() && !force {
                out = Out::err(
                    1,
                    format!("rm: cannot remove '{op}': No such file or directory\n"),
                );
            }
        }
        out
    }

    fn copy_tree(&mut self, src: &str, dest: &str) {
        let prefix = format!("{src}/");
        let dirs: Vec<String> = self
            .state
            .dirs
            .iter()
            .filter(|d| d.starts_with(&prefix))
            .map(|d| format!("{dest}/{}", &d[prefix.len()..]))
            .collect();
        let files: Vec<(String, String)> = self
            .state
            .files
            .iter()
            .filter(|(p, _)| p.starts_with(&prefix))
            .map(|(p, c)| (format!("{dest}/{}", &p[prefix.len()..]), c.clone()))
            .collect();
        self.state.dirs.insert(dest.to_string());
        self.state.dirs.extend(dirs);
        self.state.files.extend(files);
    }

    fn cp(&mut self, args: &[String], moving: bool) -> Out {
        let prog = if moving { "mv" } else { "cp" };
        let (flags, ops) = split_flags(args);
        let recursive =
            moving || flags.contains(&'r') || flags.contains(&'R') || flags.contains(&'a');
        if ops.len() < 2 {
            return Out::err(1, format!("{prog}: missing destination file operand\n"));
        }
        let (srcs, dest) = ops.split_at(ops.len() - 1);
        let dest_path = self.path(&dest[0]);
        let into_dir = self.state.is_dir(&dest_path);
        if srcs.len() > 1 && !into_dir {
            return Out::err(
                1,
                format!("{prog}: target '{}' is not a directory\n", dest[0]),
            );
        }
        for src in srcs {
            let src_path = self.path(src);
            let target = if into_dir {
                resolve_path(&dest_path, basename(&src_path))
            } else {
                dest_path.clone()
            };
            if !self.state.is_dir(&parent_dir(&target)) {
                return Out::err(
                    1,
                    format!(
                        "{prog}: cannot create '{}': No such file or directory\n",
                        dest[0]
                    ),
                );
            }
            if let Some(content) = self.state.files.get(&src_path).cloned() {
                self.state.files.insert(target, content);
                if moving {
                    self.state.files.remove(&src_path);
                }
            } else if self.state.is_dir(&src_path) {
                if !recursive {
                    return Out::err(
                        1,
                        format!("cp: -r not specified; omitting directory '{src}'\n"),
                    );
                }
                if target == src_path || target.starts_with(&format!("{src_path}/")) {
                    return Out::err(
                        1,
                        format!("{prog}: cannot copy a directory, '{src}', into itself\n"),
                    );
                }
                self.copy_tree(&src_path, &target);
                if moving {
                    self.remove_tree(&src_path);
                }
            } else {
                return Out::err(
                    1,
                    format!("{prog}: cannot stat '{src}': No such file or directory\n"),
                );
            }
        }
        Out::code(0)
    }

    fn export(&mut self, args: &[String]) -> Out {
        for a in args {
            let (key, value) = match a.split_once('=') {
                Some((k, v)) => (k, Some(v)),
                None => (a.as_str(), None),
            };
            let valid = key
                .chars()
                .next()
                .is_some_and(|c| c == '_' || c.is_ascii_alphabetic())
                && key.chars().all(|c| c == '_' || c.is_ascii_alphanumeric());
            if !valid {
                return Out::err(2, format!("sh: 1: export: {a}: bad variable name\n"));
            }
            if let Some(v) = value {
                self.env.insert(key.to_string(), v.to_string());
            }
        }
        Out::code(0)
    }

    fn env_cmd(&mut self, prog: &str, args: &[String], stdin: &str) -> Res {
        if prog == "printenv" {
            return Ok(match args.first() {
                Some(name) => match self.env.get(name) {
                    Some(v) => Out::ok(format!("{v}\n")),
                    None => Out::code(1),
                },
                None => Out::ok(
                    self.env
                        .iter()
                        .map(|(k, v)| format!("{k}={v}\n"))
                        .collect::<String>(),
                ),
            });
        }
        let split = args
            .iter()
            .position(|a| !a.contains('='))
            .unwrap_or(args.len());
        let saved = self.env.clone();
        for a in &args[..split] {
            if let Some((k, v)) = a.split_once('=') {
                self.env.insert(k.into(), v.into());
            }
        }
        let out = if split < args.len() {
            self.command(&args[split..], stdin)
        } else {
            Ok(Out::ok(
                self.env
                    .iter()
                    .map(|(k, v)| format!("{k}={v}\n"))
                    .collect::<String>(),
            ))
        };
        self.env = saved;
        out
    }

    fn grep(&self, args: &[String], stdin: &str) -> Out {
        let mut flags = BTreeSet::new();
        let mut ops = Vec::new();
        let mut patterns = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            if a == "-e" {
                patterns.extend(args.get(i + 1).cloned());
                i += 2;
                continue;
            }
            if a.starts_with('-') && a.len() > 1 && !a.starts_with("--") {
                flags.extend(a[1..].chars());
            } else if !a.starts_with("--") {
                ops.push(a.clone());
            }
            i += 1;
        }
        if patterns.is_empty() {
            if ops.is_empty() {
                return Out::err(2, "Usage: grep [OPTION]... PATTERNS [FILE]...\n");
            }
            patterns.push(ops.remove(0));
        }
        let ignore = flags.contains(&'i');
        let alternatives: Vec<String> = patterns
            .iter()
            .flat_map(|p| {
                let parts: Vec<String> = if flags.contains(&'E') {
                    p.split('|').map(str::to_string).collect()
                } else {
                    p.split("\\|").map(str::to_string).collect()
                };
                parts
            })
            .map(|p| if ignore { p.to_lowercase() } else { p })
            .collect();
        let matches = |line: &str| {
            let line = if ignore {
                line.to_lowercase()
            } else {
                line.to_string()
            };
            alternatives.iter().any(|p| line.contains(p.as_str())) != flags.contains(&'v')
        };
        let mut sources: Vec<(Option<String>, String)> = Vec::new();
        let mut out = Out::default();
        if ops.is_empty() {
            sources.push((None, stdin.to_string()));
        }
        for op in &ops {
            let path = self.path(op);
            if let Some(c) = self.state.files.get(&path) {
                sources.push((Some(op.clone()), c.clone()));
            } else if self.state.is_dir(&path) && (flags.contains(&'r') || flags.contains(&'R')) {
                let prefix = format!("{}/", path.trim_end_matches('/'));
                for (p, c) in self
                    .state
                    .files
                    .iter()
                    .filter(|(p, _)| p.starts_with(&prefix))
                {
                    let shown = format!("{}/{}", op.trim_end_matches('/'), &p[prefix.len()..]);
                    sources.push((Some(shown), c.clone()));
                }
            } else {
                out.rc = 2;
                let why = if self.state.is_dir(&path) {
                    "Is a directory"
                } else {
                    "No such file or directory"
                };
                out.stderr.push_str(&format!("grep: {op}: {why}\n"));
            }
        }
        let label = sources.len() > 1 || flags.contains(&'r') || flags.contains(&'R');
        let mut found = false;
        for (name, text) in &sources {
            let mut count = 0;
            for (n, line) in lines_of(text).into_iter().enumerate() {
                if !matches(line) {
                    continue;
                }
                found = true;
                count += 1;
                if flags.contains(&'q') || flags.contains(&'c') || flags.contains(&'l') {
                    continue;
                }
                let mut shown = String::new();
                if let (true, Some(name)) = (label, name) {
                    shown.push_str(&format!("{name}:"));
                }
                if flags.contains(&'n') {
                    shown.push_str(&format!("{}:", n + 1));
                }
                out.stdout.push_str(&format!("{shown}{line}\n"));
            }
            if flags.contains(&'c') {
                match (label, name) {
                    (true, Some(name)) => out.stdout.push_str(&format!("{name}:{count}\n")),
                    _ => out.stdout.push_str(&format!("{count}\n")),
                }
            }
            if flags.contains(&'l') && count > 0 {
                out.stdout.push_str(&format!(
                    "{}\n",
                    name.as_deref().unwrap_or("(standard input)")
                ));
            }
        }
        if flags.contains(&'q') {
            out.stdout.clear();
        }
        if out.rc == 0 && !found {
            out.rc = 1;
        }
        out
    }

    fn head_tail(&self, head: bool, args: &[String], stdin: &str) -> Out {
        let prog = if head { "head" } else { "tail" };
        let mut n = 10usize;
        let mut ops = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            if a == "-n" {
                n = args
                    .get(i + 1)
                    .and_then(|v| v.trim_start_matches('+').parse().ok())
                    .unwrap_or(10);
                i += 2;
                continue;
            }
            if let Some(v) = a.strip_prefix("-n").or_else(|| a.strip_prefix('-')) {
                if let Ok(v) = v.parse() {
                    n = v;
                }
            } else {
                ops.push(a.clone());
            }
            i += 1;
        }
        let text = match self.read_inputs(&ops, stdin, prog) {
            Ok(t) => t,
            Err(o) => return o,
        };
        let lines = lines_of(&text);
        let picked = if head {
            &lines[..n.min(lines.len())]
        } else {
            &lines[lines.len().saturating_sub(n)..]
        };
        Out::ok(join_lines(picked))
    }

    fn wc(&self, args: &[String], stdin: &str) -> Out {
        let (flags, ops) = split_flags(args);
        let text = match self.read_inputs(&ops, stdin, "wc") {
            Ok(t) => t,
            Err(o) => return o,
        };
        let l = text.matches('\n').count();
        let w = text.split_whitespace().count();
        let c = text.len();
        let mut nums = Vec::new();
        if flags.is_empty() {
            nums = vec![l, w, c];
        } else {
            for (f, v) in [('l', l), ('w', w), ('c', c)] {
                if flags.contains(&f) {
                    nums.push(v);
                }
            }
        }
        let mut text: Vec<String> = nums.iter().map(usize::to_string).collect();
        if ops.len() == 1 {
            text.push(ops[0].clone());
        }
        Out::ok(format!("{}\n", text.join(" ")))
    }

    fn which(&self, args: &[String]) -> Out {
        let mut out = Out::default();
        for name in args {
            let found = match name.as_str() {
                "python" | "python3" | "pip" | "pip3" => {
                    self.has_python().then_some("/usr/local/bin")
                }
                "pytest" | "poetry" => self.pip_has(name).then_some("/usr/local/bin"),
                "git" | "apt-get" | "apt" | "sh" | "bash" | "sed" => Some("/usr/bin"),
                n if is_safe_program(n) => Some("/usr/bin"),
                _ => None,
            };
            match found {
                Some(dir) => out.stdout.push_str(&format!("{dir}/{name}\n")),
                None => out.rc = 1,
            }
        }
        out
    }

    fn sub_shell(&mut self, prog: &str, args: &[String]) -> Res {
        let source = match args.first().map(String::as_str) {
            Some("-c") => match args.get(1) {
                Some(s) => s.clone(),
                None => {
                    return Ok(Out::err(
                        2,
                        format!("{prog}: -c: option requires an argument\n"),
                    ))
                }
            },
            Some(script) => match self.state.files.get(&self.path(script)) {
                Some(c) => c.clone(),
                None => {
                    return Ok(Out::err(
                        127,
                        format!("{prog}: {script}: No such file or directory\n"),
                    ))
                }
            },
            None => return Ok(Out::code(0)),
        };
        let saved = (self.cwd.clone(), self.env.clone(), self.exited);
        let mut total = Out::default();
        for raw in source
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let line = match parse_line(raw) {
                Ok(l) => l,
                Err(e) => {
                    total.rc = 2;
                    total.stderr.push_str(&format!("{prog}: {e}\n"));
                    break;
                }
            };
            let out = self.run(&line)?;
            total.rc = out.rc;
            total.stdout.push_str(&out.stdout);
            total.stderr.push_str(&out.stderr);
            if self.exited.is_some() {
                break;
            }
        }
        (self.cwd, self.env, self.exited) = saved;
        Ok(total)
    }

    fn sed(&mut self, args: &[String], stdin: &str) -> Out {
        let mut in_place = false;
        let mut script = None;
        let mut files = Vec::new();
        for a in args {
            if a.starts_with("-i") {
                in_place = true;
            } else if a == "-e" || a == "-E" || a == "-r" {
            } else if script.is_none() {
                script = Some(a.clone());
            } else {
                files.push(a.clone());
            }
        }
        let Some(script) = script else {
            return Out::err(
                1,
                "Usage: sed [OPTION]... {script-only-if-no-other-script} [input-file]...\n",
            );
        };
        let mut chars = script.chars();
        let parsed = match (chars.next(), chars.next()) {
            (Some('s'), Some(delim)) => {
                let body: Vec<&str> = script[1 + delim.len_utf8()..].split(delim).collect();
                (body.len() == 3).then(|| {
                    (
                        body[0].to_string(),
                        body[1].to_string(),
                        body[2].contains('g'),
                    )
                })
            }
            _ => None,
        };
        let Some((from, to, global)) = parsed else {
            return Out::err(
                1,
                format!("sed: -e expression #1, char 1: unknown command: `{script}'\n"),
            );
        };
        let edit = |text: &str| -> String {
            lines_of(text)
                .into_iter()
                .map(|l| {
                    if from.is_empty() {
                        l.to_string()
                    } else if global {
                        l.replace(&from, &to)
                    } else {
                        l.replacen(&from, &to, 1)
                    }
                })
                .map(|l| format!("{l}\n"))
                .collect()
        };
        if files.is_empty() {
            return Out::ok(edit(stdin));
        }
        let mut out = Out::default();
        for f in &files {
            let path = self.path(f);
            let Some(content) = self.state.files.get(&path).cloned() else {
                return Out::err(
                    2,
                    format!("sed: can't read {f}: No such file or directory\n"),
                );
            };
            let edited = edit(&content);
            if in_place {
                self.state.files.insert(path, edited);
            } else {
                out.stdout.push_str(&edited);
            }
        }
        out
    }

    fn missing_module(&self, code: &str) -> Option<String> {
        for line in code.split(['\n', ';']) {
            for module in helpers::module_names(line) {
                if module.is_empty() || helpers::STDLIB_MODULES.contains(&module.as_str()) {
                    continue;
                }
                let dist = helpers::IMPORT_ALIASES
                    .iter()
                    .find(|(k, _)| *k == module)
                    .map(|(_, v)| *v)
                    .unwrap_or(&module);
                let local = self.state.is_file(&self.path(&format!("{module}.py")))
                    || self.state.is_dir(&self.path(&module));
                if !self.pip_has(dist) && !self.pip_has(&module) && !local {
                    return Some(module);
                }
            }
        }
        None
    }

    fn python(&mut self, args: &[String]) -> Res {
        let Some(first) = args.first() else {
            return Ok(Out::code(0));
        };
        match first.as_str() {
            "--version" | "-V" => {
                let v = self.image.python_version().unwrap_or("3");
                Ok(Out::ok(format!("Python {v}\n")))
            }
            "-c" => {
                let code = args.get(1).cloned().unwrap_or_default();
                Ok(match self.missing_module(&code) {
                    Some(m) => Out::err(
                        1,
                        format!(
                            "Traceback (most recent call last):\n  File \"<string>\", line 1, in <module>\nModuleNotFoundError: No module named '{m}'\n"
                        ),
                    ),
                    None => Out::code(0),
                })
            }
            "-m" => {
                let module = args.get(1).map(String::as_str).unwrap_or("");
                let rest = &args[2.min(args.len())..];
                match module {
                    "pip" => Ok(self.pip(rest)),
                    "pytest" if self.pip_has("pytest") => self.pytest(rest),
                    "venv" => {
                        let Some(dir) = rest.iter().find(|a| !a.starts_with('-')) else {
                            return Ok(Out::err(2, "usage: venv ENV_DIR\n"));
                        };
                        let dir = self.path(dir);
                        self.state.mkdir_p(&format!("{dir}/bin"));
                        self.state
                            .files
                            .insert(format!("{dir}/bin/activate"), String::new());
                        Ok(Out::code(0))
                    }
                    m if helpers::STDLIB_MODULES.contains(&m) || self.pip_has(m) => {
                        Ok(Out::code(0))
                    }
                    m => Ok(Out::err(
                        1,
                        format!("/usr/local/bin/python: No module named {m}\n"),
                    )),
                }
            }
            script => {
                let path = self.path(script);
                let Some(body) = self.state.files.get(&path).cloned() else {
                    return Ok(Out::err(
                        2,
                        format!("python: can't open file '{path}': [Errno 2] No such file or directory\n"),
                    ));
                };
                if path == helpers::asset_path(helpers::CODE_EDIT_NAME) {
                    return Ok(self.code_edit(&args[1..]));
                }
                if path == helpers::asset_path(helpers::PIPREQS_NAME) {
                    return Ok(self.pipreqs(&args[1..]));
                }
                Ok(match self.missing_module(&body) {
                    Some(m) => Out::err(
                        1,
                        format!(
                            "Traceback (most recent call last):\n  File \"{path}\", line 1, in <module>\nModuleNotFoundError: No module named '{m}'\n"
                        ),
                    ),
                    None => Out::code(0),
                })
            }
        }
    }

    fn code_edit(&mut self, args: &[String]) -> Out {
        let [target, patch] = args else {
            return Out::err(2, "usage: code_edit.py TARGET PATCH\n");
        };
        let Some(patch_text) = self.state.files.get(&self.path(patch)).cloned() else {
            return Out::err(2, format!("code_edit: no such patch {patch}\n"));
        };
        let path = self.path(target);
        let current = self.state.files.get(&path).cloned();
        match helpers::apply_patch(target, current.as_deref(), &patch_text) {
            EditOutcome::Applied { content, message } => {
                if !self.state.is_dir(&parent_dir(&path)) {
                    return Out::err(1, format!("code_edit: no such directory for {target}\n"));
                }
                self.state.files.insert(path, content);
                Out::ok(message)
            }
            EditOutcome::Failed {
                return_code,
                message,
            } => Out::err(return_code, message),
        }
    }

    fn pipreqs(&mut self, args: &[String]) -> Out {
        let repo = match args {
            [repo] if self.state.is_dir(&self.path(repo)) => repo.clone(),
            _ => return Out::err(1, "pipreqs_scan: repository directory required\n"),
        };
        let root = self.path(&repo);
        let prefix = if root == "/" {
            "/".to_string()
        } else {
            format!("{root}/")
        };
        let files: Vec<(String, String)> = self
            .state
            .files_under(&root)
            .map(|(p, c)| (p[prefix.len()..].to_string(), c.clone()))
            .collect();
        let reqs = helpers::scan_requirements(files.iter().map(|(p, c)| (p.as_str(), c.as_str())));
        let shown = {
            let r = repo.trim_end_matches('/');
            if r.is_empty() { "/" } else { r }.to_string()
        };
        let message = format!(
            "INFO: Successfully saved requirements file in {shown}/requirements_pipreqs.txt\n"
        );
        let write = |name: &str| resolve_path(&root, name);
        self.state.files.insert(
            write("requirements_pipreqs.txt"),
            reqs.iter().map(|r| format!("{r}\n")).collect(),
        );
        self.state
            .files
            .insert(write("pipreqs_output.txt"), message.clone());
        self.state
            .files
            .insert(write("pipreqs_error.txt"), String::new());
        Out::ok(message)
    }

    fn word_stage(argv: &[&str]) -> Stage {
        Stage {
            argv: argv
                .iter()
                .map(|t| Word {
                    text: t.to_string(),
                    span: 0..0,
                    expands: false,
                    quoted: false,
                })
                .collect(),
            ..Stage::default()
        }
    }

    fn pip(&mut self, args: &[String]) -> Out {
        let sub = args.iter().position(|a| !a.starts_with('-'));
        if sub.is_none() && args.iter().any(|a| a == "--version" || a == "-V") {
            let v = self.image.python_version().unwrap_or("3");
            return Out::ok(format!(
                "pip 24.0 from /usr/local/lib/python{v}/site-packages/pip (python {v})\n"
            ));
        }
        let Some(sub) = sub else {
            return Out::ok("\nUsage:   \n  pip <command> [options]\n");
        };
        let rest = &args[sub + 1..];
        match args[sub].as_str() {
            "install" => {
                let mut argv = vec!["pip"];
                argv.extend(args.iter().map(String::as_str));
                self.pip_install(&Self::word_stage(&argv))
            }
            "uninstall" => {
                let (_, ops) = split_flags(rest);
                let mut out = Out::default();
                for name in ops {
                    let key = normalize_for(Tool::Pip, &name);
                    let removed = self
                        .state
                        .installed
                        .get_mut(&Tool::Pip)
                        .and_then(|m| m.remove(&key));
                    match removed {
                        Some(v) => out
                            .stdout
                            .push_str(&format!("Successfully uninstalled {key}-{v}\n")),
                        None => out.stderr.push_str(&format!(
                            "WARNING: Skipping {name} as it is not installed.\n"
                        )),
                    }
                }
                out
            }
            "list" => {
                let mut text = String::from("Package    Version\n---------- -------\n");
                for (k, v) in self.state.installed_for(Tool::Pip) {
                    text.push_str(&format!("{k} {v}\n"));
                }
                Out::ok(text)
            }
            "freeze" => Out::ok(
                self.state
                    .installed_for(Tool::Pip)
                    .iter()
                    .map(|(k, v)| format!("{k}=={v}\n"))
                    .collect::<String>(),
            ),
            "show" => {
                let (_, ops) = split_flags(rest);
                let installed = self.state.installed_for(Tool::Pip);
                let mut out = Out::default();
                for name in ops {
                    match installed.get(&normalize_for(Tool::Pip, &name)) {
                        Some(v) => out
                            .stdout
                            .push_str(&format!("Name: {name}\nVersion: {v}\n")),
                        None => {
                            out.rc = 1;
                            out.stderr
                                .push_str(&format!("WARNING: Package(s) not found: {name}\n"));
                        }
                    }
                }
                out
            }
            "check" | "cache" | "config" | "help" | "index" | "inspect" | "download" | "wheel" => {
                Out::code(0)
            }
            other => Out::err(1, format!("ERROR: unknown command \"{other}\"\n")),
        }
    }

    fn pip_install(&mut self, stage: &Stage) -> Out {
        let specs = match stage_specs(stage) {
            Ok(s) => s,
            Err(ClassifyError::UnsupportedFlag(f)) => {
                return Out::err(2, format!("\nUsage:   \n  pip install [options] <requirement specifier> ...\n\nno such option: {f}\n"));
            }
            Err(e) => return Out::err(2, format!("ERROR: {e}\n")),
        };
        let mut reqs = Vec::new();
        let mut locals = Vec::new();
        for spec in specs {
            match spec.target {
                InstallTarget::Package {
                    name, constraint, ..
                } => reqs.push((name, constraint)),
                InstallTarget::Requirements(file) => {
                    let Some(text) = self.state.files.get(&self.path(&file)) else {
                        return Out::err(
                            1,
                            format!("ERROR: Could not open requirements file: [Errno 2] No such file or directory: '{file}'\n"),
                        );
                    };
                    for line in text.lines() {
                        let line = line.split('#').next().unwrap_or("").trim();
                        if line.is_empty() || line.starts_with('-') {
                            continue;
                        }
                        let line = line.split(';').next().unwrap_or("");
                        let (name, _, constraint) = split_requirement(line);
                        reqs.push((name, constraint));
                    }
                }
                InstallTarget::Local(p) => locals.push(p),
            }
        }
        if reqs.is_empty() && locals.is_empty() {
            return Out::err(1, "ERROR: You must give at least one requirement to install (see \"pip help install\")\n");
        }
        let mut local_pkgs = Vec::new();
        for p in &locals {
            let name = if p.contains("://") || p.starts_with("git+") {
                basename(p).trim_end_matches(".git").to_string()
            } else {
                let path = self.path(p);
                if !self.state.exists(&path) {
                    return Out::err(1, format!("ERROR: Invalid requirement: '{p}'\nHint: It looks like a path. File '{p}' does not exist.\n"));
                }
                let base = basename(&path);
                base.split('-')
                    .next()
                    .unwrap_or(base)
                    .trim_end_matches(".whl")
                    .to_string()
            };
            let name = if name.is_empty() {
                "root".to_string()
            } else {
                name
            };
            local_pkgs.push((name, "0.0.0".to_string()));
        }
        self.resolve_and_install(Tool::Pip, reqs, local_pkgs)
    }

    /// All-or-nothing resolution followed by installation.
    fn resolve_and_install(
        &mut self,
        tool: Tool,
        reqs: Vec<(String, String)>,
        extra: Vec<(String, String)>,
    ) -> Out {
        let fail_rc = if tool == Tool::Apt { 100 } else { 1 };
        let mut plan: Vec<(String, String)> = Vec::new();
        let mut polluting: Vec<String> = Vec::new();
        let installed = self.state.installed_for(tool);
        for (name, constraint) in &reqs {
            let Some(entry) = self.world.package(tool, name) else {
                return Out::err(fail_rc, not_found(tool, name, constraint, &[]));
            };
            match entry.behavior {
                Behavior::FailClean => {
                    let msg = match tool {
                        Tool::Pip => format!(
                            "  error: subprocess-exited-with-error\n  × Building wheel for {name} did not run successfully.\nERROR: Failed building wheel for {name}\nERROR: Could not build wheels for {name}, which is required to install pyproject.toml-based projects\n"
                        ),
                        Tool::Apt => format!("E: Unable to correct problems, you have held broken packages.\nE: {name} has unmet dependencies\n"),
                    };
                    return Out::err(fail_rc, msg);
                }
                Behavior::FailPolluting => {
                    polluting.push(name.clone());
                    continue;
                }
                Behavior::Ok => {}
            }
            let Ok(c) = constraint.parse::<VersionConstraint>() else {
                return Out::err(
                    fail_rc,
                    format!("ERROR: Invalid requirement: '{name}{constraint}'\n"),
                );
            };
            let key = normalize_for(tool, name);
            let current = installed.get(&key).and_then(|v| v.parse::<Version>().ok());
            if let Some(cur) = current.filter(|v| c.satisfied_by(v)) {
                plan.push((key, cur.to_string()));
                continue;
            }
            let candidates: Vec<&String> = std::iter::once(&entry.version)
                .chain(entry.versions.iter())
                .collect();
            let chosen = if c.is_latest() {
                Some(entry.version.clone())
            } else {
                candidates
                    .iter()
                    .filter_map(|v| v.parse::<Version>().ok().map(|p| (p, v)))
                    .filter(|(p, _)| c.satisfied_by(p))
                    .max_by(|a, b| a.0.cmp(&b.0))
                    .map(|(_, v)| v.to_string())
            };
            match chosen {
                Some(v) => plan.push((key, v)),
                None => {
                    let all: Vec<&str> = candidates.iter().map(|s| s.as_str()).collect();
                    return Out::err(fail_rc, not_found(tool, name, constraint, &all));
                }
            }
        }
        if !polluting.is_empty() {
            let mut out = Out::code(fail_rc);
            for name in &polluting {
                let entry = self.world.package(tool, name).expect("resolved above");
                for side in &entry.side_installs {
                    let (side_name, _, c) = split_requirement(side);
                    let version = c
                        .strip_prefix("==")
                        .map(str::to_string)
                        .or_else(|| {
                            self.world
                                .package(tool, &side_name)
                                .map(|e| e.version.clone())
                        })
                        .unwrap_or_else(|| "1.0.0".into());
                    self.state.install(tool, &side_name, &version);
                }
                out.stderr.push_str(&match tool {
                    Tool::Pip => format!(
                        "  error: subprocess-exited-with-error\nERROR: Failed building wheel for {name}\nERROR: Could not build wheels for {name}, which is required to install pyproject.toml-based projects\n"
                    ),
                    Tool::Apt => format!("E: Sub-process /usr/bin/dpkg returned an error code (1)\nE: {name} failed to configure\n"),
                });
            }
            return out;
        }
        plan.extend(extra.into_iter().map(|(n, v)| (normalize_for(tool, &n), v)));
        let mut fresh = Vec::new();
        let mut seen = BTreeSet::new();
        let mut queue: Vec<(String, String)> =
            plan.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        while let Some((key, version)) = queue.pop() {
            if !seen.insert(key.clone()) {
                continue;
            }
            if installed.get(&key) != Some(&version) {
                fresh.push(format!("{key}-{version}"));
            }
            self.state.install(tool, &key, &version);
            if let Some(entry) = self.world.package(tool, &key) {
                for dep in &entry.requires {
                    let (dep_name, _, c) = split_requirement(dep);
                    let dep_key = normalize_for(tool, &dep_name);
                    if seen.contains(&dep_key) {
                        continue;
                    }
                    let Some(dep_entry) = self
                        .world
                        .package(tool, &dep_name)
                        .filter(|e| e.behavior == Behavior::Ok)
                    else {
                        continue;
                    };
                    let c: VersionConstraint = c.parse().unwrap_or_default();
                    let have = self
                        .state
                        .installed_for(tool)
                        .get(&dep_key)
                        .and_then(|v| v.parse::<Version>().ok())
                        .filter(|v| c.satisfied_by(v));
                    let version = match have {
                        Some(v) => v.to_string(),
                        None => std::iter::once(&dep_entry.version)
                            .chain(dep_entry.versions.iter())
                            .filter_map(|v| v.parse::<Version>().ok().map(|p| (p, v.clone())))
                            .filter(|(p, _)| c.satisfied_by(p))
                            .max_by(|a, b| a.0.cmp(&b.0))
                            .map(|(_, v)| v)
                            .unwrap_or_else(|| dep_entry.version.clone()),
                    };
                    queue.push((dep_key, version));
                }
            }
        }
        fresh.sort();
        let stdout = match (tool, fresh.is_empty()) {
            (Tool::Pip, true) => "Requirement already satisfied\n".to_string(),
            (Tool::Pip, false) => format!("Successfully installed {}\n", fresh.join(" ")),
            (Tool::Apt, true) => {
                "0 upgraded, 0 newly installed, 0 to remove and 0 not upgraded.\n".to_string()
            }
            (Tool::Apt, false) => fresh
                .iter()
                .map(|f| format!("Setting up {f} ...\n"))
                .collect(),
        };
        Out::ok(stdout)
    }

    fn apt(&mut self, args: &[String]) -> Out {
        let Some(sub) = args.iter().find(|a| !a.starts_with('-')) else {
            return Out::err(1, "E: Invalid operation\n");
        };
        match sub.as_str() {
            "update" => Out::ok("Reading package lists... Done\n"),
            "install" => {
                let mut argv = vec!["apt-get"];
                argv.extend(args.iter().map(String::as_str));
                let specs = match stage_specs(&Self::word_stage(&argv)) {
                    Ok(s) => s,
                    Err(e) => return Out::err(100, format!("E: {e}\n")),
                };
                let reqs: Vec<(String, String)> = specs
                    .into_iter()
                    .filter_map(|s| match s.target {
                        InstallTarget::Package {
                            name, constraint, ..
                        } => Some((name, constraint)),
                        _ => None,
                    })
                    .collect();
                if reqs.is_empty() {
                    return Out::ok(
                        "0 upgraded, 0 newly installed, 0 to remove and 0 not upgraded.\n",
                    );
                }
                self.resolve_and_install(Tool::Apt, reqs, Vec::new())
            }
            "remove" | "purge" => {
                let (_, ops) = split_flags(args);
                if let Some(m) = self.state.installed.get_mut(&Tool::Apt) {
                    for name in ops.iter().skip(1) {
                        m.remove(name);
                    }
                }
                Out::code(0)
            }
            "clean" | "autoremove" | "upgrade" => Out::code(0),
            other => Out::err(100, format!("E: Invalid operation {other}\n")),
        }
    }

    fn git_dir(&self, start: &str) -> Option<String> {
        let mut dir = start.to_string();
        loop {
            if self
                .state
                .is_dir(&format!("{}/.git", dir.trim_end_matches('/')))
            {
                return Some(dir);
            }
            if dir == "/" {
                return None;
            }
            dir = parent_dir(&dir);
        }
    }

    fn git(&mut self, args: &[String]) -> Out {
        let mut args: Vec<String> = args.to_vec();
        let mut dir = self.cwd.clone();
        while args.first().map(String::as_str) == Some("-C") && args.len() >= 2 {
            dir = resolve_path(&dir, &args[1]);
            args.drain(..2);
        }
        let Some(sub) = args.first().cloned() else {
            return Out::err(1, "usage: git [--version] <command> [<args>]\n");
        };
        let rest = &args[1..];
        if sub == "clone" {
            return self.git_clone(&dir, rest);
        }
        if sub == "--version" {
            return Out::ok("git version 2.39.2\n");
        }
        let Some(root) = self.git_dir(&dir) else {
            return Out::err(
                128,
                "fatal: not a git repository (or any of the parent directories): .git\n",
            );
        };
        let git = |name: &str| format!("{}/.git/{name}", root.trim_end_matches('/'));
        match sub.as_str() {
            "checkout" | "switch" => {
                let Some(rev) = rest.iter().find(|a| !a.starts_with('-')) else {
                    return Out::code(0);
                };
                let url = self.state.files.get(&git("config")).and_then(|c| {
                    c.lines()
                        .find_map(|l| l.trim().strip_prefix("url = ").map(str::to_string))
                });
                let known = url
                    .and_then(|u| self.world.remotes.get(&u))
                    .map(|r| {
                        r.shas.is_empty() || r.shas.iter().any(|s| s.starts_with(rev.as_str()))
                    })
                    .unwrap_or(true);
                if !known {
                    return Out::err(
                        1,
                        format!("error: pathspec '{rev}' did not match any file(s) known to git\n"),
                    );
                }
                self.state.files.insert(git("HEAD"), format!("{rev}\n"));
                let short: String = rev.chars().take(7).collect();
                Out::err(0, format!("HEAD is now at {short}\n"))
            }
            "rev-parse" => Out::ok(
                self.state
                    .files
                    .get(&git("HEAD"))
                    .cloned()
                    .unwrap_or_default(),
            ),
            _ => Out::code(0),
        }
    }

    fn git_clone(&mut self, dir: &str, args: &[String]) -> Out {
        let mut ops = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let a = &args[i];
            if matches!(
                a.as_str(),
                "--depth" | "-b" | "--branch" | "--origin" | "-o"
            ) {
                i += 2;
                continue;
            }
            if !a.starts_with('-') {
                ops.push(a.clone());
            }
            i += 1;
        }
        let Some(url) = ops.first().cloned() else {
            return Out::err(129, "fatal: You must specify a repository to clone.\n");
        };
        let dest_name = ops
            .get(1)
            .cloned()
            .unwrap_or_else(|| basename(&url).trim_end_matches(".git").to_string());
        let dest = resolve_path(dir, &dest_name);
        let non_empty = self.state.is_file(&dest)
            || (self.state.is_dir(&dest) && !self.children(&dest).is_empty());
        if non_empty {
            return Out::err(128, format!("fatal: destination path '{dest_name}' already exists and is not an empty directory.\n"));
        }
        if !self.state.is_dir(&parent_dir(&dest)) {
            return Out::err(128, format!("fatal: could not create work tree dir '{dest_name}': No such file or directory\n"));
        }
        let head;
        if let Some(remote) = self.world.remotes.get(&url) {
            for (rel, content) in &remote.files {
                let path = resolve_path(&dest, rel);
                self.state.mkdir_p(&parent_dir(&path));
                self.state.files.insert(path, content.clone());
            }
            head = remote
                .shas
                .first()
                .cloned()
                .unwrap_or_else(|| "ref: refs/heads/main".into());
        } else {
            let src = resolve_path(dir, &url);
            if url.contains("://") || !self.state.is_dir(&src) {
                return Out::err(128, format!("fatal: repository '{url}' not found\n"));
            }
            self.copy_tree(&src, &dest);
            head = "ref: refs/heads/main".into();
        }
        self.state.mkdir_p(&format!("{dest}/.git"));
        self.state
            .files
            .insert(format!("{dest}/.git/HEAD"), format!("{head}\n"));
        self.state.files.insert(
            format!("{dest}/.git/config"),
            format!("[remote \"origin\"]\n\turl = {url}\n"),
        );
        Out::err(0, format!("Cloning into '{dest_name}'...\n"))
    }

    fn pytest(&mut self, args: &[String]) -> Res {
        let collect_only = args.iter().any(|a| a == "--collect-only" || a == "--co");
        for a in args.iter().filter(|a| !a.starts_with('-')) {
            let target = a.split("::").next().unwrap_or(a);
            if !self.state.exists(&self.path(target)) {
                return Ok(Out::err(
                    4,
                    format!("ERROR: file or directory not found: {a}\n"),
                ));
            }
        }
        let profile = &self.world.test_profile;
        let header =
            "============================= test session starts ==============================\n";
        let collect_error = |detail: String| {
            Out {
                rc: 2,
                stdout: format!(
                    "{header}collected 0 items / 1 error\n\n==================================== ERRORS ====================================\n{detail}=========================== short test summary info ============================\nERROR tests\n!!!!!!!!!!!!!!!!!!!! Interrupted: 1 error during collection !!!!!!!!!!!!!!!!!!!!!\n"
                ),
                stderr: String::new(),
            }
        };
        if let (Some(min), Some(have)) = (&profile.min_python, self.image.python_version()) {
            if python_tuple(have) < python_tuple(min) {
                return Ok(collect_error(
                    "E   ImportError: cannot import name 'StrEnum' from 'enum'\n".to_string(),
                ));
            }
        }
        if let Some(missing) = profile.requires.iter().find(|r| !self.pip_has(r)) {
            return Ok(collect_error(format!(
                "E   ModuleNotFoundError: No module named '{missing}'\n"
            )));
        }
        let n = profile.tests;
        let out = match (profile.outcome, collect_only) {
            (TestOutcome::CollectError, _) => collect_error("E   SyntaxError: invalid syntax\n".to_string()),
            (TestOutcome::NoTests, _) => Out {
                rc: 5,
                stdout: format!("{header}collected 0 items\n\n============================ no tests ran in 0.01s =============================\n"),
                stderr: String::new(),
            },
            (_, true) => Out::ok(format!("{header}collected {n} items\n\n========================= {n} tests collected in 0.05s ==========================\n")),
            (TestOutcome::RunsPass, false) => {
                Out::ok(format!("{header}collected {n} items\n\n============================== {n} passed in 0.50s ===============================\n"))
            }
            (TestOutcome::RunsFail, false) => Out {
                rc: 1,
                stdout: format!(
                    "{header}collected {n} items\n\n=========================== 1 failed, {} passed in 0.50s ===========================\n",
                    n.saturating_sub(1)
                ),
                stderr: String::new(),
            },
        };
        if !collect_only {
            let secs = profile.duration_secs;
            self.tick(secs)?;
        }
        Ok(out)
    }

    fn poetry(&mut self, args: &[String], stdin: &str) -> Res {
        match args.first().map(String::as_str) {
            Some("run") if args.len() > 1 => self.command(&args[1..], stdin),
            Some("--version") => Ok(Out::ok("Poetry (version 1.8.2)\n")),
            Some("install") => {
                let Some(text) = self.state.files.get(&self.path("pyproject.toml")).cloned() else {
                    return Ok(Out::err(
                        1,
                        format!(
                            "Poetry could not find a pyproject.toml file in {} or its parents\n",
                            self.cwd
                        ),
                    ));
                };
                let mut in_deps = false;
                let mut reqs = Vec::new();
                for line in text.lines().map(str::trim) {
                    if line.starts_with('[') {
                        in_deps = line == "[tool.poetry.dependencies]";
                        continue;
                    }
                    if let Some((key, _)) = line.split_once('=').filter(|_| in_deps) {
                        let key = key.trim().trim_matches('"');
                        if !key.is_empty() && key != "python" {
                            reqs.push((key.to_string(), String::new()));
                        }
                    }
                }
                if reqs.is_empty() {
                    return Ok(Out::ok("No dependencies to install or update\n"));
                }
                Ok(self.resolve_and_install(Tool::Pip, reqs, Vec::new()))
            }
            Some("lock" | "check" | "show" | "env" | "config") => Ok(Out::code(0)),
            _ => Ok(Out::err(1, "Command not found\n")),
        }
    }
}

fn not_found(tool: Tool, name: &str, constraint: &str, versions: &[&str]) -> String {
    match tool {
        Tool::Pip => {
            let listed = if versions.is_empty() {
                "none".to_string()
            } else {
                versions.join(", ")
            };
            format!(
                "ERROR: Could not find a version that satisfies the requirement {name}{constraint} (from versions: {listed})\nERROR: No matching distribution found for {name}{constraint}\n"
            )
        }
        Tool::Apt => {
            if versions.is_empty() {
                format!("E: Unable to locate package {name}\n")
            } else {
                format!(
                    "E: Version '{}' for '{name}' was not found\n",
                    constraint.trim_start_matches("==")
                )
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::super::sim::{PackageEntry, RemoteRepo, TestProfile};
    use super::super::{Sandbox, SimSandbox};
    use super::*;
    use crate::trace::Command;

    fn sandbox(world: SimWorld) -> SimSandbox {
        SimSandbox::start(Arc::new(world), BaseImage::default(), "s").unwrap()
    }

    fn run(sb: &mut SimSandbox, raw: &str) -> ExecResult {
        sb.exec(&Command::parse(raw).unwrap()).unwrap()
    }

    #[test]
    fn redirections() {
        let mut sb = sandbox(SimWorld::default());
        run(&mut sb, "echo hi > /tmp/a");
        run(&mut sb, "echo there >> /tmp/a");
        assert_eq!(run(&mut sb, "cat /tmp/a").stdout, "hi\nthere\n");
        let res = run(&mut sb, "cat /nope > /tmp/err 2>&1");
        assert_eq!(res.return_code, 1);
        assert!(sb.state().files["/tmp/err"].contains("No such file"));
        let res = run(&mut sb, "ls /nope 2>/dev/null");
        assert_eq!((res.return_code, res.stderr.as_str()), (2, ""));
        assert_eq!(run(&mut sb, "echo x > /missing/dir/f").return_code, 2);
    }

    #[test]
    fn chains_and_pipes() {
        let mut sb = sandbox(SimWorld::default());
        assert_eq!(run(&mut sb, "false && echo no || echo yes").stdout, "yes\n");
        assert_eq!(run(&mut sb, "printf x; echo a").return_code, 0);
        assert_eq!(run(&mut sb, "echo b; printf x").return_code, 127);
        run(&mut sb, "mkdir -p /w && echo 'c\na\nb' > /w/f");
        let res = run(&mut sb, "printenv HOME | wc -l");
        assert_eq!(res.stdout, "1\n");
        assert_eq!(run(&mut sb, "cat /w/f | sort | head -n 1").stdout, "a\n");
        assert_eq!(run(&mut sb, "exit 3; echo never").return_code, 3);
    }

    #[test]
    fn variables() {
        let mut sb = sandbox(SimWorld::default());
        run(&mut sb, "export GREETING=hello");
        assert_eq!(
            run(&mut sb, "echo $GREETING ${GREETING}!").stdout,
            "hello hello!\n"
        );
        assert_eq!(run(&mut sb, "echo '$GREETING'").stdout, "$GREETING\n");
        assert_eq!(run(&mut sb, "FOO=1 printenv FOO").stdout, "1\n");
        assert_eq!(run(&mut sb, "printenv FOO").return_code, 1);
    }

    #[test]
    fn file_ops() {
        let mut sb = sandbox(SimWorld::default());
        run(
            &mut sb,
            "mkdir -p /a/b && touch /a/b/f && cp -r /a /c && mv /c/b/f /c/g",
        );
        assert!(sb.state().is_file("/a/b/f"));
        assert!(sb.state().is_file("/c/g"));
        assert!(!sb.state().is_file("/c/b/f"));
        assert_eq!(run(&mut sb, "rm /a").return_code, 1);
        run(&mut sb, "rm -rf /a");
        assert!(!sb.state().exists("/a/b"));
        run(&mut sb, "echo 'x = 1' > /c/g && sed -i 's/1/2/g' /c/g");
        assert_eq!(sb.state().files["/c/g"], "x = 2\n");
        assert_eq!(run(&mut sb, "grep -n 2 /c/g").stdout, "1:x = 2\n");
    }

    #[test]
    fn pip_and_python() {
        let world = SimWorld::default()
            .with_package(
                "requests",
                PackageEntry::ok("2.31.0").with_requires(&["urllib3>=1.21", "idna"]),
            )
            .with_package(
                "urllib3",
                PackageEntry::ok("2.2.1").with_versions(&["1.26.18"]),
            )
            .with_package("idna", PackageEntry::ok("3.6"))
            .with_package("PyYAML", PackageEntry::ok("6.0.1"))
            .with_package("broken", PackageEntry::fail_clean());
        let mut sb = sandbox(world);
        assert_eq!(run(&mut sb, "python -c 'import yaml'").return_code, 1);
        let res = run(&mut sb, "pip install requests PyYAML");
        assert_eq!(res.return_code, 0, "{res:?}");
        let pip = sb.state().installed_for(Tool::Pip);
        assert_eq!(pip["urllib3"], "2.2.1");
        assert_eq!(pip["pyyaml"], "6.0.1");
        assert_eq!(
            run(&mut sb, "python -c 'import yaml, requests'").return_code,
            0
        );
        let before = sb.state().clone();
        assert_eq!(run(&mut sb, "pip install idna broken").return_code, 1);
        assert_eq!(sb.state(), &before);
        assert_eq!(run(&mut sb, "pip install --frobnicate x").return_code, 2);
        assert_eq!(run(&mut sb, "pip install -r /nope.txt").return_code, 1);
        run(&mut sb, "echo 'urllib3<2' > /tmp/r.txt");
        assert_eq!(run(&mut sb, "pip install -r /tmp/r.txt").return_code, 0);
        assert_eq!(sb.state().installed_for(Tool::Pip)["urllib3"], "1.26.18");
        assert_eq!(run(&mut sb, "pip freeze | grep idna").stdout, "idna==3.6\n");
    }

    #[test]
    fn apt() {
        let world = SimWorld::default().with_package("libgl1", PackageEntry::ok("1.6.0").apt());
        let mut sb = sandbox(world);
        assert_eq!(
            run(&mut sb, "apt-get update && apt-get install -y libgl1").return_code,
            0
        );
        assert_eq!(sb.state().installed_for(Tool::Apt)["libgl1"], "1.6.0");
        assert_eq!(run(&mut sb, "apt-get install -y nosuch").return_code, 100);
    }

    #[test]
    fn clone_checkout_and_tests() {
        let url = "https://github.com/o/r.git";
        let mut files = BTreeMap::new();
        files.insert("tests/test_a.py".to_string(), "import numpy\n".to_string());
        let mut profile = TestProfile::new(TestOutcome::RunsFail);
        profile.requires = vec!["numpy".into()];
        let world = SimWorld::default()
            .with_remote(
                url,
                RemoteRepo {
                    files,
                    shas: vec!["abc1234".into()],
                },
            )
            .with_package("pytest", PackageEntry::ok("8.0.0"))
            .with_package("numpy", PackageEntry::ok("1.26.4"))
            .with_tests(profile);
        let mut sb = sandbox(world);
        assert_eq!(
            run(&mut sb, &format!("git clone {url} /repo")).return_code,
            0
        );
        assert_eq!(
            run(&mut sb, "git -C /repo checkout deadbeef").return_code,
            1
        );
        assert_eq!(run(&mut sb, "git -C /repo checkout abc1234").return_code, 0);
        run(&mut sb, "cd /repo");
        assert_eq!(run(&mut sb, "pytest").return_code, 127);
        run(&mut sb, "pip install pytest");
        let res = run(&mut sb, "pytest --collect-only -q");
        assert_eq!(res.return_code, 2);
        assert!(res.stdout.contains("No module named 'numpy'"));
        run(&mut sb, "pip install numpy");
        assert_eq!(run(&mut sb, "python -m pytest --co").return_code, 0);
        assert_eq!(run(&mut sb, "pytest tests").return_code, 1);
        assert_eq!(run(&mut sb, "pytest missing_dir").return_code, 4);
    }

    #[test]
    fn timeouts() {
        let mut sb = sandbox(SimWorld::default());
        sb.set_command_timeout(Duration::from_secs(5));
        assert_eq!(run(&mut sb, "sleep 3").return_code, 0);
        let err = sb
            .exec(&Command::parse("sleep 3 && sleep 3").unwrap())
            .unwrap_err();
        assert!(matches!(err, SandboxError::Timeout { .. }));
    }

    #[test]
    fn helper_scripts() {
        let mut sb = sandbox(SimWorld::default());
        sb.write_file(
            &helpers::asset_path(helpers::CODE_EDIT_NAME),
            helpers::CODE_EDIT_SCRIPT,
        )
        .unwrap();
        sb.write_file(
            &helpers::asset_path(helpers::PIPREQS_NAME),
            &helpers::pipreqs_script(),
        )
        .unwrap();
        sb.write_file("/repo/app.py", "import yaml\nx = 1\n")
            .unwrap();
        sb.write_file("/tmp/p.diff", &helpers::make_patch("x = 1\n", "x = 2\n"))
            .unwrap();
        let res = run(
            &mut sb,
            "python3 /envforge/assets/code_edit.py /repo/app.py /tmp/p.diff",
        );
        assert_eq!(
            res.stdout,
            "code_edit: applied 1 block(s) to /repo/app.py\n"
        );
        assert_eq!(sb.state().files["/repo/app.py"], "import yaml\nx = 2\n");
        assert_eq!(
            run(
                &mut sb,
                "python3 /envforge/assets/code_edit.py /repo/app.py /tmp/p.diff"
            )
            .return_code,
            1
        );
        let res = run(&mut sb, "python3 /envforge/assets/pipreqs_scan.py /repo");
        assert_eq!(res.return_code, 0);
        assert_eq!(
            sb.state().files["/repo/requirements_pipreqs.txt"],
            "PyYAML\n"
        );
    }
}
