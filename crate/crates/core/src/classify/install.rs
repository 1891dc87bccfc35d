//! Package-spec extraction for `pip install` and `apt-get install` lines.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::shell::{parse_line, Stage};
use super::ClassifyError;
use crate::trace::{Command, Tool};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstallTarget {
    Package {
        name: String,
        /// Extras including brackets, e.g. `[security]`.
        extras: String,
        constraint: String,
    },
    /// `-r FILE`
    Requirements(String),
    /// `-e PATH`, `.` or a URL: installed as given, never pinned.
    Local(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstallSpec {
    pub tool: Tool,
    pub target: InstallTarget,
}

const PIP_SWITCHES: &[&str] = &[
    "-U",
    "--upgrade",
    "-q",
    "--quiet",
    "-qq",
    "-v",
    "--verbose",
    "--no-cache-dir",
    "--user",
    "--no-deps",
    "--pre",
    "--force-reinstall",
    "--ignore-installed",
    "-I",
    "--no-input",
    "--disable-pip-version-check",
    "--no-build-isolation",
    "--break-system-packages",
    "--prefer-binary",
];
const PIP_VALUED: &[&str] = &[
    "-i",
    "--index-url",
    "--extra-index-url",
    "-f",
    "--find-links",
    "--timeout",
    "-c",
    "--constraint",
    "--trusted-host",
];
const APT_SWITCHES: &[&str] = &[
    "-y",
    "--yes",
    "--assume-yes",
    "-q",
    "-qq",
    "--no-install-recommends",
    "--fix-missing",
    "--allow-downgrades",
];

/// The tool for a stage that runs an install subcommand.
pub fn install_tool(stage: &Stage) -> Option<Tool> {
    install_args_start(stage).map(|(tool, _)| tool)
}

/// Tool and index of the first argument after `install`.
fn install_args_start(stage: &Stage) -> Option<(Tool, usize)> {
    let argv: Vec<&str> = stage.argv.iter().map(|w| w.text.as_str()).collect();
    let (tool, sub) = match argv.as_slice() {
        ["pip" | "pip3", ..] => (Tool::Pip, 1),
        ["python" | "python3", "-m", "pip", ..] => (Tool::Pip, 3),
        ["apt-get" | "apt", ..] => (Tool::Apt, 1),
        _ => return None,
    };
    // apt-get allows switches before the subcommand.
    let mut i = sub;
    while i < argv.len() && argv[i].starts_with('-') {
        i += 1;
    }
    (argv.get(i) == Some(&"install")).then_some((tool, i + 1))
}

/// Splits `name[extras]<constraint>` at the first operator character.
pub fn split_requirement(spec: &str) -> (String, String, String) {
    let spec = spec.trim();
    let cut = spec
        .find(['=', '<', '>', '!', '~', ' ', '['])
        .unwrap_or(spec.len());
    let name = spec[..cut].trim().to_string();
    let mut rest = &spec[cut..];
    let mut extras = String::new();
    if rest.starts_with('[') {
        if let Some(end) = rest.find(']') {
            extras = rest[..=end].to_string();
            rest = &rest[end + 1..];
        }
    }
    let constraint: String = rest.chars().filter(|c| !c.is_whitespace()).collect();
    (name, extras, constraint)
}

fn looks_local(arg: &str) -> bool {
    arg.starts_with('.')
        || arg.starts_with('/')
        || arg.contains("://")
        || arg.starts_with("git+")
        || arg.ends_with(".whl")
        || arg.ends_with(".tar.gz")
}

/// Install specs of one stage, each with the byte span of the word it came from.
pub fn stage_spec_words(stage: &Stage) -> Result<Vec<(InstallSpec, Range<usize>)>, ClassifyError> {
    let Some((tool, start)) = install_args_start(stage) else {
        return Err(ClassifyError::NotInstall);
    };
    let words = &stage.argv;
    let mut out = Vec::new();
    let mut i = start;
    while i < words.len() {
        let word = &words[i];
        let arg = word.text.as_str();
        i += 1;
        match tool {
            Tool::Pip => {
                if arg == "-r" || arg == "--requirement" || arg == "-e" || arg == "--editable" {
                    let value = words.get(i).ok_or_else(|| {
                        ClassifyError::UnsupportedFlag(format!("{arg} without value"))
                    })?;
                    i += 1;
                    let target = if matches!(arg, "-r" | "--requirement") {
                        InstallTarget::Requirements(value.text.clone())
                    } else {
                        InstallTarget::Local(value.text.clone())
                    };
                    out.push((InstallSpec { tool, target }, value.span.clone()));
                } else if let Some(file) = arg
                    .strip_prefix("--requirement=")
                    .or_else(|| arg.strip_prefix("-r").filter(|f| !f.is_empty()))
                {
                    out.push((
                        InstallSpec {
                            tool,
                            target: InstallTarget::Requirements(file.to_string()),
                        },
                        word.span.clone(),
                    ));
                } else if PIP_SWITCHES.contains(&arg) {
                } else if PIP_VALUED.contains(&arg) {
                    i += 1;
                } else if arg.starts_with('-') {
                    let known = PIP_VALUED
                        .iter()
                        .any(|f| f.starts_with("--") && arg.starts_with(&format!("{f}=")));
                    if !known {
                        return Err(ClassifyError::UnsupportedFlag(arg.to_string()));
                    }
                } else if looks_local(arg) {
                    out.push((
                        InstallSpec {
                            tool,
                            target: InstallTarget::Local(arg.to_string()),
                        },
                        word.span.clone(),
                    ));
                } else {
                    let (name, extras, constraint) = split_requirement(arg);
                    out.push((
                        InstallSpec {
                            tool,
                            target: InstallTarget::Package {
                                name,
                                extras,
                                constraint,
                            },
                        },
                        word.span.clone(),
                    ));
                }
            }
            Tool::Apt => {
                if APT_SWITCHES.contains(&arg) {
                } else if arg.starts_with('-') {
                    return Err(ClassifyError::UnsupportedFlag(arg.to_string()));
                } else {
                    let (name, constraint) = match arg.split_once('=') {
                        Some((n, v)) => (n.to_string(), format!("=={v}")),
                        None => (arg.to_string(), String::new()),
                    };
                    out.push((
                        InstallSpec {
                            tool,
                            target: InstallTarget::Package {
                                name,
                                extras: String::new(),
                                constraint,
                            },
                        },
                        word.span.clone(),
                    ));
                }
            }
        }
    }
    Ok(out)
}

pub fn stage_specs(stage: &Stage) -> Result<Vec<InstallSpec>, ClassifyError> {
    Ok(stage_spec_words(stage)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// Package specs of every install stage in the command.
pub fn parse_install_specs(command: &Command) -> Result<Vec<InstallSpec>, ClassifyError> {
    let line = parse_line(command.raw())?;
    let mut found = false;
    let mut out = Vec::new();
    for stage in line.stages() {
        if install_tool(stage).is_some() {
            found = true;
            out.extend(stage_specs(stage)?);
        }
    }
    if !found {
        return Err(ClassifyError::NotInstall);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs(src: &str) -> Result<Vec<InstallSpec>, ClassifyError> {
        parse_install_specs(&Command::parse(src).unwrap())
    }

    fn pkg(tool: Tool, name: &str, constraint: &str) -> InstallSpec {
        InstallSpec {
            tool,
            target: InstallTarget::Package {
                name: name.into(),
                extras: String::new(),
                constraint: constraint.into(),
            },
        }
    }

    #[test]
    fn pip_constraint() {
        assert_eq!(
            specs("pip install 'B>=1.0,<2.0'").unwrap(),
            [pkg(Tool::Pip, "B", ">=1.0,<2.0")]
        );
        assert_eq!(
            specs("pip3 install -U numpy==1.26.4 requests").unwrap(),
            [
                pkg(Tool::Pip, "numpy", "==1.26.4"),
                pkg(Tool::Pip, "requests", "")
            ]
        );
    }

    #[test]
    fn apt_flags() {
        assert_eq!(
            specs("apt-get install -y curl").unwrap(),
            [pkg(Tool::Apt, "curl", "")]
        );
        assert_eq!(
            specs("apt-get -y install git").unwrap(),
            [pkg(Tool::Apt, "git", "")]
        );
    }

    #[test]
    fn requirement_files_and_locals() {
        assert_eq!(
            specs("pip install -r requirements.txt").unwrap(),
            [InstallSpec {
                tool: Tool::Pip,
                target: InstallTarget::Requirements("requirements.txt".into())
            }]
        );
        assert_eq!(
            specs("cd /repo && pip install -e .").unwrap(),
            [InstallSpec {
                tool: Tool::Pip,
                target: InstallTarget::Local(".".into())
            }]
        );
    }

    #[test]
    fn extras_split() {
        assert_eq!(
            split_requirement("requests[socks]>=2.0"),
            ("requests".into(), "[socks]".into(), ">=2.0".into())
        );
    }

    #[test]
    fn errors() {
        assert_eq!(
            specs("pip install --bogus x"),
            Err(ClassifyError::UnsupportedFlag("--bogus".into()))
        );
        assert_eq!(specs("ls"), Err(ClassifyError::NotInstall));
        assert!(specs("pip install --index-url=https://x y").is_ok());
    }
}
