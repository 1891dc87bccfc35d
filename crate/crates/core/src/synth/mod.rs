//! Compiles a verified trace into a Dockerfile.

mod replay;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::agent::{edit_file_physical, LOCAL_SOURCE_DIR};
use crate::classify::install::{install_tool, stage_spec_words};
use crate::classify::shell::quote;
use crate::classify::{classify, parse_line, InstallTarget, Kind, BASE_IMAGE_VERBS};
use crate::sandbox::normalize_for;
use crate::trace::{BaseImage, CommandRecord, Outcome, Tool, Trace, TEST_VERBS};
pub use replay::{replay_sim, tests_run_in, verify_sim, ReplayContext, ReplayError};

/// Name of the directory next to the Dockerfile holding COPY sources.
pub const ASSETS_DIR: &str = "assets";
/// Where `--copy-repo` puts the local checkout next to the Dockerfile.
pub const REPO_COPY_DIR: &str = "src";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Keyword {
    From,
    Env,
    Copy,
    Run,
}

impl Keyword {
    pub fn as_str(self) -> &'static str {
        match self {
            Keyword::From => "FROM",
            Keyword::Env => "ENV",
            Keyword::Copy => "COPY",
            Keyword::Run => "RUN",
        }
    }
}

impl fmt::Display for Keyword {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Statement {
    pub keyword: Keyword,
    pub payload: String,
    pub origin_turn: Option<u32>,
}

impl Statement {
    fn new(keyword: Keyword, payload: impl Into<String>, origin_turn: Option<u32>) -> Self {
        Self {
            keyword,
            payload: payload.into(),
            origin_turn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DockerfileProgram {
    pub statements: Vec<Statement>,
    pub pin_ledger: BTreeMap<(Tool, String), String>,
    /// COPY sources under `assets/`, by file name.
    pub assets: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("trace outcome is {0:?}, not verified")]
    UnverifiedTrace(Outcome),
    #[error("turn {turn}: no recorded version for {package}")]
    MissingPin { turn: u32, package: String },
    #[error("turn {turn}: {reason}")]
    BadRecord { turn: u32, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SynthOptions {
    /// Emit `COPY src /envforge/src` after FROM for locally staged repositories.
    pub copy_repo: bool,
    /// Accept traces that did not end verified.
    pub allow_unverified: bool,
}

fn is_base_change(r: &CommandRecord) -> bool {
    r.classification == Kind::BaseImageChange
}

/// Records from the last base-image change on; earlier ones are superseded.
pub fn supersession_filter(records: &[CommandRecord]) -> &[CommandRecord] {
    match records.iter().rposition(is_base_change) {
        Some(i) => &records[i..],
        None => records,
    }
}

/// One flag per record: true when a later base-image change discards it.
pub fn superseded(records: &[CommandRecord]) -> Vec<bool> {
    let cut = records.iter().rposition(is_base_change).unwrap_or(0);
    (0..records.len()).map(|i| i < cut).collect()
}

/// The image a base-image-change record switches to.
pub fn target_image(record: &CommandRecord) -> Option<BaseImage> {
    let line = parse_line(record.command.raw()).ok()?;
    let stage = line.stages().next()?;
    match (
        stage.program()?,
        stage.args().collect::<Vec<_>>().as_slice(),
    ) {
        (verb, [version]) if verb == BASE_IMAGE_VERBS[0] => BaseImage::python(version).ok(),
        (verb, []) if verb == BASE_IMAGE_VERBS[1] => Some(BaseImage::default()),
        _ => None,
    }
}

/// `KEY="VALUE"` with `\`, `"` and `$` escaped.
pub fn env_payload(key: &str, value: &str) -> String {
    let mut out = format!("{key}=\"");
    for c in value.chars() {
        if matches!(c, '\\' | '"' | '$') {
            out.push('\\');
        }
        out.push(c);
    }
    out.push('"');
    out
}

pub fn parse_env_payload(payload: &str) -> Option<(String, String)> {
    let (key, rest) = payload.split_once('=')?;
    let inner = rest.strip_prefix('"')?.strip_suffix('"')?;
    let mut value = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            value.push(chars.next()?);
        } else {
            value.push(c);
        }
    }
    Some((key.to_string(), value))
}

fn mentions_apt_update(raw: &str) -> bool {
    parse_line(raw).is_ok_and(|line| {
        line.stages().any(|s| {
            let argv: Vec<&str> = s.argv.iter().map(|w| w.text.as_str()).collect();
            matches!(argv.as_slice(), ["apt-get" | "apt", "update", ..])
        })
    })
}

/// Rewrites every pip package spec in `raw` to `name==version`.
fn pin_install(
    record: &CommandRecord,
    ledger: &mut BTreeMap<(Tool, String), String>,
) -> Result<String, SynthError> {
    let raw = record.command.raw();
    let bad = |reason: String| SynthError::BadRecord {
        turn: record.turn,
        reason,
    };
    let line = parse_line(raw).map_err(|e| bad(e.to_string()))?;
    let mut edits = Vec::new();
    for stage in line.stages() {
        let Some(tool) = install_tool(stage) else {
            continue;
        };
        for (spec, span) in stage_spec_words(stage).map_err(|e| bad(e.to_string()))? {
            let InstallTarget::Package { name, extras, .. } = &spec.target else {
                continue;
            };
            let key = normalize_for(tool, name);
            let version = record
                .installed
                .iter()
                .find(|(t, n, _)| *t == tool && *n == key)
                .map(|(_, _, v)| v.clone())
                .ok_or_else(|| SynthError::MissingPin {
                    turn: record.turn,
                    package: name.clone(),
                })?;
            ledger.insert((tool, key), version.clone());
            if tool == Tool::Pip {
                edits.push((span, quote(&format!("{name}{extras}=={version}"))));
            }
        }
    }
    let mut out = raw.to_string();
    edits.sort_by_key(|(span, _)| std::cmp::Reverse(span.start));
    for (span, text) in edits {
        out.replace_range(span, &text);
    }
    Ok(out)
}

fn asset_name(program: &mut DockerfileProgram, path: &str, content: &str, turn: u32) -> String {
    let base = path.rsplit('/').next().unwrap_or(path).to_string();
    match program.assets.get(&base) {
        Some(existing) if existing != content => {
            let (stem, ext) = match base.rsplit_once('.') {
                Some((s, e)) => (s.to_string(), format!(".{e}")),
                None => (base.clone(), String::new()),
            };
            let renamed = format!("{stem}_{turn}{ext}");
            program.assets.insert(renamed.clone(), content.to_string());
            renamed
        }
        _ => {
            program.assets.insert(base.clone(), content.to_string());
            base
        }
    }
}

pub fn synthesize(trace: &Trace) -> Result<DockerfileProgram, SynthError> {
    synthesize_with(trace, SynthOptions::default())
}

pub fn synthesize_with(trace: &Trace, opts: SynthOptions) -> Result<DockerfileProgram, SynthError> {
    if trace.outcome != Outcome::Verified && !opts.allow_unverified {
        return Err(SynthError::UnverifiedTrace(trace.outcome));
    }
    let records = supersession_filter(&trace.records);
    let mut program = DockerfileProgram::default();
    let (image, from_turn) = match records.first().filter(|r| is_base_change(r)) {
        Some(change) => (
            target_image(change).ok_or_else(|| SynthError::BadRecord {
                turn: change.turn,
                reason: format!("cannot read the image from `{}`", change.command.raw()),
            })?,
            Some(change.turn),
        ),
        None => (trace.initial_base_image.clone(), None),
    };
    program
        .statements
        .push(Statement::new(Keyword::From, image.name(), from_turn));
    if opts.copy_repo {
        program.statements.push(Statement::new(
            Keyword::Copy,
            format!("{REPO_COPY_DIR} {LOCAL_SOURCE_DIR}"),
            None,
        ));
    }

    let mut apt_updated = false;
    for record in records {
        let turn = Some(record.turn);
        if record.return_code != 0 || record.rolled_back {
            continue;
        }
        if matches!(record.classification, Kind::Safe | Kind::BaseImageChange) {
            continue;
        }
        if TEST_VERBS.contains(&record.command.argv0()) {
            continue;
        }
        if record.classification == Kind::Export {
            for (key, value) in &record.env_delta {
                let payload = env_payload(key, value);
                let existing = program.statements.iter_mut().find(|s| {
                    s.keyword == Keyword::Env
                        && parse_env_payload(&s.payload).is_some_and(|(k, _)| &k == key)
                });
                match existing {
                    Some(stmt) => stmt.payload = payload,
                    None => program
                        .statements
                        .push(Statement::new(Keyword::Env, payload, turn)),
                }
            }
            continue;
        }

        for asset in &record.assets {
            let name = asset_name(&mut program, &asset.path, &asset.content, record.turn);
            let payload = format!("{ASSETS_DIR}/{name} {}", asset.path);
            if !program
                .statements
                .iter()
                .any(|s| s.keyword == Keyword::Copy && s.payload == payload)
            {
                program
                    .statements
                    .push(Statement::new(Keyword::Copy, payload, turn));
            }
        }

        let mut body = match record.classification {
            Kind::CodeEdit => {
                edit_file_physical(&record.command).ok_or_else(|| SynthError::BadRecord {
                    turn: record.turn,
                    reason: format!("malformed edit record `{}`", record.command.raw()),
                })?
            }
            Kind::Install => pin_install(record, &mut program.pin_ledger)?,
            _ => record.command.raw().to_string(),
        };
        if record.classification == Kind::Install {
            let specs = classify(&record.command)
                .map(|c| c.install_specs().to_vec())
                .unwrap_or_default();
            if specs.iter().any(|s| s.tool == Tool::Apt)
                && !apt_updated
                && !mentions_apt_update(&body)
            {
                body = format!("apt-get update && {body}");
            }
        }
        if mentions_apt_update(&body) {
            apt_updated = true;
        }
        let payload = if record.cwd == "/" {
            body
        } else {
            format!("cd {} && {body}", quote(&record.cwd))
        };
        program
            .statements
            .push(Statement::new(Keyword::Run, payload, turn));
    }
    Ok(program)
}

pub fn render(program: &DockerfileProgram) -> Vec<u8> {
    render_statements(&program.statements).into_bytes()
}

pub fn render_statements(statements: &[Statement]) -> String {
    statements
        .iter()
        .map(|s| format!("{} {}\n", s.keyword, s.payload))
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("Dockerfile line {line_no}: {reason}")]
pub struct DockerfileParseError {
    pub line_no: usize,
    pub reason: String,
}

/// Reads back the subset of Dockerfile syntax [`render`] produces.
pub fn parse_dockerfile(text: &str) -> Result<Vec<Statement>, DockerfileParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |reason: &str| DockerfileParseError {
            line_no: i + 1,
            reason: reason.into(),
        };
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (word, payload) = trimmed
            .split_once(' ')
            .ok_or_else(|| err("missing payload"))?;
        let keyword = match word.to_ascii_uppercase().as_str() {
            "FROM" => Keyword::From,
            "ENV" => Keyword::Env,
            "COPY" => Keyword::Copy,
            "RUN" => Keyword::Run,
            other => return Err(err(&format!("unsupported instruction {other}"))),
        };
        let payload = payload.trim();
        if payload.is_empty() {
            return Err(err("missing payload"));
        }
        if keyword == Keyword::Env && parse_env_payload(payload).is_none() {
            return Err(err("ENV must look like KEY=\"VALUE\""));
        }
        out.push(Statement::new(keyword, payload, None));
    }
    if out.first().map(|s| s.keyword) != Some(Keyword::From) {
        return Err(DockerfileParseError {
            line_no: 1,
            reason: "the first instruction must be FROM".into(),
        });
    }
    Ok(out)
}

/// Writes `Dockerfile` and `assets/` into `dir`.
pub fn write_program(program: &DockerfileProgram, dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("Dockerfile"), render(program))?;
    if !program.assets.is_empty() {
        let assets = dir.join(ASSETS_DIR);
        std::fs::create_dir_all(&assets)?;
        for (name, content) in &program.assets {
            std::fs::write(assets.join(name), content)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{Command, RepoRef};

    fn rec(turn: u32, raw: &str, cwd: &str, rc: i32) -> CommandRecord {
        let command = Command::parse(raw).unwrap();
        let class = classify(&command).unwrap();
        CommandRecord {
            turn,
            cwd: cwd.into(),
            return_code: rc,
            classification: class.kind,
            stdout_excerpt: String::new(),
            stderr_excerpt: String::new(),
            snapshot_before: None,
            rolled_back: false,
            env_delta: if rc == 0 {
                class.export_pairs().to_vec()
            } else {
                Vec::new()
            },
            installed: Vec::new(),
            assets: Vec::new(),
            thought: None,
            command,
        }
    }

    fn trace(records: Vec<CommandRecord>) -> Trace {
        Trace {
            repo: RepoRef {
                full_name: "a/b".into(),
                sha: "1".into(),
            },
            initial_base_image: BaseImage::default(),
            final_base_image: BaseImage::default(),
            records,
            outcome: Outcome::Verified,
        }
    }

    fn text(t: &Trace) -> String {
        String::from_utf8(render(&synthesize(t).unwrap())).unwrap()
    }

    #[test]
    fn empty_trace_is_bare_from() {
        assert_eq!(text(&trace(vec![])), "FROM python:3.10\n");
    }

    #[test]
    fn unverified_refused() {
        let mut t = trace(vec![]);
        t.outcome = Outcome::BudgetExhausted;
        assert_eq!(
            synthesize(&t),
            Err(SynthError::UnverifiedTrace(Outcome::BudgetExhausted))
        );
    }

    #[test]
    fn supersession() {
        let recs = vec![
            rec(1, "touch /a", "/", 0),
            rec(2, "change_python_version 3.11", "/", 0),
            rec(3, "touch /b", "/", 0),
            rec(4, "clear_configuration", "/", 0),
            rec(5, "touch /c", "/", 0),
        ];
        assert_eq!(supersession_filter(&recs[..1]).len(), 1);
        let kept: Vec<u32> = supersession_filter(&recs).iter().map(|r| r.turn).collect();
        assert_eq!(kept, [4, 5]);
        assert_eq!(superseded(&recs), [true, true, true, false, false]);
        assert_eq!(supersession_filter(&recs[..4]).len(), 1);
        assert_eq!(text(&trace(recs[..2].to_vec())), "FROM python:3.11\n");
    }

    #[test]
    fn env_replaced_in_place() {
        let t = trace(vec![
            rec(1, "export A=1", "/", 0),
            rec(2, "touch /x", "/", 0),
            rec(3, "export A='two words' B='$x'", "/", 0),
        ]);
        assert_eq!(
            text(&t),
            "FROM python:3.10\nENV A=\"two words\"\nRUN touch /x\nENV B=\"\\$x\"\n"
        );
    }

    #[test]
    fn cd_prefix_and_apt_update() {
        let mut install = rec(2, "apt-get install -y libgl1", "/repo", 0);
        install.installed = vec![(Tool::Apt, "libgl1".into(), "1.7.0".into())];
        let mut again = rec(3, "apt-get install -y curl", "/", 0);
        again.installed = vec![(Tool::Apt, "curl".into(), "7.88".into())];
        let t = trace(vec![
            rec(1, "mkdir -p /repo/out", "/repo", 0),
            install,
            again,
        ]);
        assert_eq!(
            text(&t),
            "FROM python:3.10\nRUN cd /repo && mkdir -p /repo/out\nRUN cd /repo && apt-get update && apt-get install -y libgl1\nRUN apt-get install -y curl\n"
        );
    }

    #[test]
    fn pins_and_missing_pin() {
        let mut r = rec(
            1,
            "pip install -U 'req[socks]>=2' numpy -r requirements.txt",
            "/",
            0,
        );
        r.installed = vec![
            (Tool::Pip, "numpy".into(), "1.26.4".into()),
            (Tool::Pip, "req".into(), "2.31.0".into()),
        ];
        let program = synthesize(&trace(vec![r.clone()])).unwrap();
        assert_eq!(
            program.statements[1].payload,
            "pip install -U 'req[socks]==2.31.0' numpy==1.26.4 -r requirements.txt"
        );
        assert_eq!(program.pin_ledger[&(Tool::Pip, "numpy".into())], "1.26.4");
        r.installed.pop();
        assert_eq!(
            synthesize(&trace(vec![r])),
            Err(SynthError::MissingPin {
                turn: 1,
                package: "req".into()
            })
        );
    }

    #[test]
    fn failed_safe_and_test_records_omitted() {
        let mut failed = rec(2, "pip install cupy", "/", 1);
        failed.rolled_back = true;
        failed.snapshot_before = Some(crate::trace::SnapshotId("s".into()));
        let t = trace(vec![
            rec(1, "cat README.md", "/", 0),
            failed,
            rec(3, "runtest", "/repo", 0),
        ]);
        assert_eq!(text(&t), "FROM python:3.10\n");
    }

    #[test]
    fn parse_roundtrip() {
        let t = trace(vec![
            rec(1, "export K='a \"b\" \\c'", "/", 0),
            rec(2, "touch /x", "/repo", 0),
        ]);
        let program = synthesize(&t).unwrap();
        let parsed = parse_dockerfile(&text(&t)).unwrap();
        let strip = |s: &[Statement]| {
            s.iter()
                .map(|s| (s.keyword, s.payload.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&parsed), strip(&program.statements));
        assert_eq!(
            parse_env_payload(&program.statements[1].payload).unwrap(),
            ("K".to_string(), "a \"b\" \\c".to_string())
        );
        assert!(parse_dockerfile("RUN ls\n").is_err());
        assert!(parse_dockerfile("FROM x\nWORKDIR /a\n").is_err());
    }
}
