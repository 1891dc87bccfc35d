//! The agent's action vocabulary and its text form.

use std::fmt;

use thiserror::Error;

use crate::classify::{BASE_IMAGE_VERBS, EDIT_VERB};
use crate::trace::{Command, Tool};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ActionError {
    #[error("empty action")]
    Empty,
    #[error("found {0} commands; reply with only a SINGLE command")]
    MultipleCommands(usize),
    #[error("invalid action: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Bash(String),
    WaitingListAdd {
        package: String,
        constraint: String,
        tool: Tool,
    },
    WaitingListAddFile(String),
    WaitingListClear,
    WaitingListShow,
    /// `None` keeps the original constraint (`-u`).
    ConflictListSolve(Option<String>),
    ConflictListClear,
    ConflictListShow,
    Download,
    RunTest,
    PoetryRunTest,
    RunPipreqs,
    ChangePythonVersion(String),
    ClearConfiguration,
    EditFile {
        path: String,
        patch: String,
    },
}

fn invalid(msg: impl Into<String>) -> ActionError {
    ActionError::Invalid(msg.into())
}

fn words(line: &str) -> Result<Vec<String>, ActionError> {
    shlex::split(line).ok_or_else(|| invalid(format!("unbalanced quotes in {line:?}")))
}

fn no_args(verb: &str, rest: &[String]) -> Result<(), ActionError> {
    if rest.is_empty() {
        Ok(())
    } else {
        Err(invalid(format!("{verb} takes no arguments")))
    }
}

/// Joins constraint words, so `>=1.0, <2.0` becomes `>=1.0,<2.0`.
fn join_constraint(parts: &[String]) -> String {
    parts
        .concat()
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect()
}

fn parse_waitinglist_add(args: &[String]) -> Result<Action, ActionError> {
    let mut package = None;
    let mut constraint = Vec::new();
    let mut tool = None;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "-p" => {
                package = Some(
                    args.get(i + 1)
                        .ok_or_else(|| invalid("-p needs a package name"))?
                        .clone(),
                );
                i += 2;
            }
            "-t" => {
                let name = args
                    .get(i + 1)
                    .ok_or_else(|| invalid("-t needs a tool (pip or apt)"))?;
                tool = Some(name.parse::<Tool>().map_err(invalid)?);
                i += 2;
            }
            "-v" => {
                i += 1;
                while i < args.len() && !matches!(args[i].as_str(), "-p" | "-t") {
                    constraint.push(args[i].clone());
                    i += 1;
                }
            }
            other => {
                return Err(invalid(format!(
                    "unexpected argument {other:?} to waitinglist add"
                )))
            }
        }
    }
    let package = package.ok_or_else(|| invalid("waitinglist add needs -p PACKAGE"))?;
    Ok(Action::WaitingListAdd {
        package,
        constraint: join_constraint(&constraint),
        tool: tool.unwrap_or(Tool::Pip),
    })
}

fn is_python_version(v: &str) -> bool {
    let parts: Vec<&str> = v.split('.').collect();
    (2..=3).contains(&parts.len())
        && parts
            .iter()
            .all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_digit()))
}

/// Parses one action. `edit_file PATH` takes the patch on the following lines.
pub fn parse_action(text: &str) -> Result<Action, ActionError> {
    let text = text.trim_matches(|c| c == '\n' || c == '\r');
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(ActionError::Empty);
    }
    let (first, rest) = match trimmed.split_once('\n') {
        Some((a, b)) => (a.trim(), b),
        None => (trimmed, ""),
    };
    let head = words(first)?;
    let verb = head.first().map(String::as_str).unwrap_or("");

    if verb == EDIT_VERB {
        let [_, path] = head.as_slice() else {
            return Err(invalid(
                "usage: edit_file PATH followed by SEARCH/REPLACE blocks",
            ));
        };
        if rest.trim().is_empty() {
            return Err(invalid(
                "edit_file needs a patch on the lines after the path",
            ));
        }
        return Ok(Action::EditFile {
            path: path.clone(),
            patch: format!("{}\n", rest.trim_end_matches('\n')),
        });
    }

    let lines = trimmed.lines().filter(|l| !l.trim().is_empty()).count();
    if lines > 1 {
        return Err(ActionError::MultipleCommands(lines));
    }
    let args = &head[1.min(head.len())..];
    let sub = args.first().map(String::as_str);
    let sub_args = &args[1.min(args.len())..];
    match verb {
        "waitinglist" => match sub {
            Some("add") => parse_waitinglist_add(sub_args),
            Some("addfile") => match sub_args {
                [path] => Ok(Action::WaitingListAddFile(path.clone())),
                _ => Err(invalid("usage: waitinglist addfile FILE")),
            },
            Some("clear") => {
                no_args("waitinglist clear", sub_args).map(|_| Action::WaitingListClear)
            }
            Some("show") => no_args("waitinglist show", sub_args).map(|_| Action::WaitingListShow),
            _ => Err(invalid("usage: waitinglist add|addfile|clear|show")),
        },
        "conflictlist" => match sub {
            Some("solve") => match sub_args.first().map(String::as_str) {
                Some("-u") if sub_args.len() == 1 => Ok(Action::ConflictListSolve(None)),
                Some("-v") => Ok(Action::ConflictListSolve(Some(join_constraint(
                    &sub_args[1..],
                )))),
                _ => Err(invalid(
                    "usage: conflictlist solve -v \"CONSTRAINTS\" | conflictlist solve -u",
                )),
            },
            Some("clear") => {
                no_args("conflictlist clear", sub_args).map(|_| Action::ConflictListClear)
            }
            Some("show") => {
                no_args("conflictlist show", sub_args).map(|_| Action::ConflictListShow)
            }
            _ => Err(invalid("usage: conflictlist solve|clear|show")),
        },
        "download" => no_args(verb, args).map(|_| Action::Download),
        "runtest" => no_args(verb, args).map(|_| Action::RunTest),
        "poetryruntest" => no_args(verb, args).map(|_| Action::PoetryRunTest),
        "runpipreqs" => no_args(verb, args).map(|_| Action::RunPipreqs),
        v if v == BASE_IMAGE_VERBS[0] => match args {
            [version] if is_python_version(version) => {
                Ok(Action::ChangePythonVersion(version.clone()))
            }
            _ => Err(invalid(
                "usage: change_python_version X.Y (digits and dots, no quotes)",
            )),
        },
        v if v == BASE_IMAGE_VERBS[1] => no_args(verb, args).map(|_| Action::ClearConfiguration),
        _ => {
            Command::parse(first).map_err(|e| invalid(e.to_string()))?;
            Ok(Action::Bash(first.to_string()))
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = |s: &str| crate::classify::shell::quote(s);
        match self {
            Action::Bash(cmd) => f.write_str(cmd),
            Action::WaitingListAdd {
                package,
                constraint,
                tool,
            } => {
                write!(f, "waitinglist add -p {}", q(package))?;
                if !constraint.is_empty() {
                    write!(f, " -v {}", q(constraint))?;
                }
                write!(f, " -t {tool}")
            }
            Action::WaitingListAddFile(path) => write!(f, "waitinglist addfile {}", q(path)),
            Action::WaitingListClear => f.write_str("waitinglist clear"),
            Action::WaitingListShow => f.write_str("waitinglist show"),
            Action::ConflictListSolve(None) => f.write_str("conflictlist solve -u"),
            Action::ConflictListSolve(Some(c)) => write!(f, "conflictlist solve -v {}", q(c)),
            Action::ConflictListClear => f.write_str("conflictlist clear"),
            Action::ConflictListShow => f.write_str("conflictlist show"),
            Action::Download => f.write_str("download"),
            Action::RunTest => f.write_str("runtest"),
            Action::PoetryRunTest => f.write_str("poetryruntest"),
            Action::RunPipreqs => f.write_str("runpipreqs"),
            Action::ChangePythonVersion(v) => write!(f, "change_python_version {v}"),
            Action::ClearConfiguration => f.write_str("clear_configuration"),
            Action::EditFile { path, patch } => {
                write!(f, "edit_file {}\n{}", q(path), patch.trim_end_matches('\n'))
            }
        }
    }
}
