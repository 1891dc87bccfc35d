//! Helper scripts uploaded into the sandbox, plus native equivalents the
//! simulated backend runs in their place.
//!
//! `code_edit.py` applies SEARCH/REPLACE blocks to one file;
//! `pipreqs_scan.py` writes `requirements_pipreqs.txt` from the imports of
//! a repository. The Rust functions below implement the same behaviour
//! byte for byte so sim replays and container runs agree.

use std::collections::BTreeSet;

pub const ASSET_DIR: &str = "/envforge/assets";
pub const CODE_EDIT_NAME: &str = "code_edit.py";
pub const PIPREQS_NAME: &str = "pipreqs_scan.py";

pub const SEARCH_MARK: &str = "<<<<<<< SEARCH";
pub const SPLIT_MARK: &str = "=======";
pub const REPLACE_MARK: &str = ">>>>>>> REPLACE";

pub fn asset_path(name: &str) -> String {
    format!("{ASSET_DIR}/{name}")
}

pub const CODE_EDIT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Apply SEARCH/REPLACE blocks to a single file.

usage: code_edit.py TARGET PATCH
"""
import os
import sys

START = "<<<<<<< SEARCH"
MID = "======="
END = ">>>>>>> REPLACE"


def join(lines):
    return "".join(line + "\n" for line in lines)


def parse(text):
    blocks = []
    state = None
    search, replace = [], []
    for line in text.split("\n"):
        if state is None:
            if line == START:
                state, search, replace = "search", [], []
            elif line.strip():
                return None
        elif state == "search":
            if line == MID:
                state = "replace"
            else:
                search.append(line)
        else:
            if line == END:
                blocks.append((join(search), join(replace)))
                state = None
            else:
                replace.append(line)
    if state is not None or not blocks:
        return None
    return blocks


def main(argv):
    if len(argv) != 3:
        print("usage: code_edit.py TARGET PATCH", file=sys.stderr)
        return 2
    target, patch_path = argv[1], argv[2]
    try:
        with open(patch_path, encoding="utf-8") as fh:
            patch = fh.read()
    except OSError:
        print("code_edit: cannot read patch " + patch_path, file=sys.stderr)
        return 2
    blocks = parse(patch)
    if blocks is None:
        print("code_edit: malformed patch", file=sys.stderr)
        return 2
    content = None
    if os.path.isfile(target):
        with open(target, encoding="utf-8") as fh:
            content = fh.read()
    for search, replace in blocks:
        if search == "":
            content = replace
            continue
        if content is None:
            print("code_edit: no such file " + target, file=sys.stderr)
            return 1
        idx = content.find(search)
        if idx < 0:
            print("code_edit: search text not found in " + target, file=sys.stderr)
            return 1
        content = content[:idx] + replace + content[idx + len(search):]
    parent = os.path.dirname(target) or "."
    if not os.path.isdir(parent):
        print("code_edit: no such directory " + parent, file=sys.stderr)
        return 1
    with open(target, "w", encoding="utf-8") as fh:
        fh.write(content)
    print("code_edit: applied %d block(s) to %s" % (len(blocks), target))
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
"#;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditBlock {
    pub search: String,
    pub replace: String,
}

fn join_lines(lines: &[&str]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

/// Parses SEARCH/REPLACE blocks; `None` when the patch is malformed.
pub fn parse_patch(text: &str) -> Option<Vec<EditBlock>> {
    enum State {
        Outside,
        Search,
        Replace,
    }
    let mut blocks = Vec::new();
    let mut state = State::Outside;
    let mut search: Vec<&str> = Vec::new();
    let mut replace: Vec<&str> = Vec::new();
    for line in text.split('\n') {
        match state {
            State::Outside => {
                if line == SEARCH_MARK {
                    state = State::Search;
                    search.clear();
                    replace.clear();
                } else if !line.trim().is_empty() {
                    return None;
                }
            }
            State::Search => {
                if line == SPLIT_MARK {
                    state = State::Replace;
                } else {
                    search.push(line);
                }
            }
            State::Replace => {
                if line == REPLACE_MARK {
                    blocks.push(EditBlock {
                        search: join_lines(&search),
                        replace: join_lines(&replace),
                    });
                    state = State::Outside;
                } else {
                    replace.push(line);
                }
            }
        }
    }
    if !matches!(state, State::Outside) || blocks.is_empty() {
        return None;
    }
    Some(blocks)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditOutcome {
    Applied { content: String, message: String },
    Failed { return_code: i32, message: String },
}

/// Applies a patch to the current content of `target` (`None` when absent).
pub fn apply_patch(target: &str, current: Option<&str>, patch: &str) -> EditOutcome {
    let Some(blocks) = parse_patch(patch) else {
        return EditOutcome::Failed {
            return_code: 2,
            message: "code_edit: malformed patch\n".into(),
        };
    };
    let mut content = current.map(str::to_string);
    for block in &blocks {
        if block.search.is_empty() {
            content = Some(block.replace.clone());
            continue;
        }
        let Some(text) = content.as_mut() else {
            return EditOutcome::Failed {
                return_code: 1,
                message: format!("code_edit: no such file {target}\n"),
            };
        };
        let Some(idx) = text.find(&block.search) else {
            return EditOutcome::Failed {
                return_code: 1,
                message: format!("code_edit: search text not found in {target}\n"),
            };
        };
        text.replace_range(idx..idx + block.search.len(), &block.replace);
    }
    EditOutcome::Applied {
        content: content.unwrap_or_default(),
        message: format!("code_edit: applied {} block(s) to {target}\n", blocks.len()),
    }
}

/// Builds a patch that replaces `search` with `replace`.
pub fn make_patch(search: &str, replace: &str) -> String {
    let body = |s: &str| -> String {
        let s = s.strip_suffix('\n').unwrap_or(s);
        if s.is_empty() {
            String::new()
        } else {
            format!("{s}\n")
        }
    };
    format!(
        "{SEARCH_MARK}\n{}{SPLIT_MARK}\n{}{REPLACE_MARK}\n",
        body(search),
        body(replace)
    )
}

/// Top-level modules that ship with CPython.
pub const STDLIB_MODULES: &[&str] = &[
    "__future__",
    "abc",
    "argparse",
    "array",
    "ast",
    "asyncio",
    "atexit",
    "base64",
    "binascii",
    "bisect",
    "builtins",
    "bz2",
    "calendar",
    "cmath",
    "codecs",
    "collections",
    "concurrent",
    "configparser",
    "contextlib",
    "contextvars",
    "copy",
    "csv",
    "ctypes",
    "dataclasses",
    "datetime",
    "decimal",
    "difflib",
    "dis",
    "email",
    "enum",
    "errno",
    "fcntl",
    "filecmp",
    "fnmatch",
    "fractions",
    "ftplib",
    "functools",
    "gc",
    "getopt",
    "getpass",
    "gettext",
    "glob",
    "gzip",
    "hashlib",
    "heapq",
    "hmac",
    "html",
    "http",
    "imaplib",
    "importlib",
    "inspect",
    "io",
    "ipaddress",
    "itertools",
    "json",
    "keyword",
    "linecache",
    "locale",
    "logging",
    "lzma",
    "math",
    "mimetypes",
    "multiprocessing",
    "numbers",
    "operator",
    "os",
    "pathlib",
    "pickle",
    "pkgutil",
    "platform",
    "plistlib",
    "pprint",
    "profile",
    "queue",
    "random",
    "re",
    "sched",
    "secrets",
    "select",
    "selectors",
    "shelve",
    "shlex",
    "shutil",
    "signal",
    "site",
    "smtplib",
    "socket",
    "socketserver",
    "sqlite3",
    "ssl",
    "stat",
    "statistics",
    "string",
    "struct",
    "subprocess",
    "sys",
    "sysconfig",
    "tarfile",
    "tempfile",
    "textwrap",
    "threading",
    "time",
    "timeit",
    "tkinter",
    "token",
    "tokenize",
    "traceback",
    "types",
    "typing",
    "unicodedata",
    "unittest",
    "urllib",
    "uuid",
    "venv",
    "warnings",
    "weakref",
    "xml",
    "zipfile",
    "zlib",
    "zoneinfo",
];

/// Import names whose distribution is published under another name.
pub const IMPORT_ALIASES: &[(&str, &str)] = &[
    ("PIL", "Pillow"),
    ("bs4", "beautifulsoup4"),
    ("cv2", "opencv-python"),
    ("dateutil", "python-dateutil"),
    ("sklearn", "scikit-learn"),
    ("yaml", "PyYAML"),
];

const SKIP_DIRS: &[&str] = &["__pycache__", "venv", "node_modules", "site-packages"];

pub fn pipreqs_script() -> String {
    let stdlib: Vec<String> = STDLIB_MODULES
        .iter()
        .map(|m| format!("    {m:?},"))
        .collect();
    let aliases: Vec<String> = IMPORT_ALIASES
        .iter()
        .map(|(k, v)| format!("    {k:?}: {v:?},"))
        .collect();
    let skip: Vec<String> = SKIP_DIRS.iter().map(|d| format!("{d:?}")).collect();
    format!(
        r##"#!/usr/bin/env python3
"""Write requirements_pipreqs.txt from the third-party imports of a repository.

usage: pipreqs_scan.py REPO
"""
import os
import sys

STDLIB = {{
{stdlib}
}}
ALIASES = {{
{aliases}
}}
SKIP = {{{skip}}}


def module_names(line):
    s = line.strip()
    if s.startswith("import "):
        body = s[len("import "):].split("#", 1)[0]
        out = []
        for part in body.split(","):
            tokens = part.split()
            if tokens:
                out.append(tokens[0].split(".")[0])
        return out
    if s.startswith("from "):
        tokens = s[len("from "):].split()
        if tokens and not tokens[0].startswith("."):
            return [tokens[0].split(".")[0]]
    return []


def is_identifier(name):
    return bool(name) and (name[0].isalpha() or name[0] == "_") and all(
        c.isalnum() or c == "_" for c in name
    )


def main(argv):
    if len(argv) != 2 or not os.path.isdir(argv[1]):
        print("pipreqs_scan: repository directory required", file=sys.stderr)
        return 1
    repo = argv[1].rstrip("/") or "/"
    files = []
    for root, dirs, names in os.walk(repo):
        dirs[:] = sorted(d for d in dirs if not d.startswith(".") and d not in SKIP)
        for name in sorted(names):
            if name.endswith(".py"):
                files.append(os.path.relpath(os.path.join(root, name), repo))
    local = set()
    imports = set()
    for rel in files:
        parts = rel.split(os.sep)
        local.update(parts[:-1])
        local.add(parts[-1][:-3])
        with open(os.path.join(repo, rel), encoding="utf-8", errors="replace") as fh:
            for line in fh.read().split("\n"):
                for name in module_names(line):
                    if is_identifier(name):
                        imports.add(name)
    reqs = sorted(
        {{ALIASES.get(n, n) for n in imports if n not in STDLIB and n not in local}}
    )
    out_path = repo + "/requirements_pipreqs.txt"
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("".join(r + "\n" for r in reqs))
    message = "INFO: Successfully saved requirements file in " + out_path + "\n"
    with open(repo + "/pipreqs_output.txt", "w", encoding="utf-8") as fh:
        fh.write(message)
    with open(repo + "/pipreqs_error.txt", "w", encoding="utf-8") as fh:
        fh.write("")
    sys.stdout.write(message)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
"##,
        stdlib = stdlib.join("\n"),
        aliases = aliases.join("\n"),
        skip = skip.join(", "),
    )
}

fn is_identifier(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || c == '_')
}

pub fn module_names(line: &str) -> Vec<String> {
    let s = line.trim();
    if let Some(body) = s.strip_prefix("import ") {
        let body = body.split('#').next().unwrap_or("");
        return body
            .split(',')
            .filter_map(|part| part.split_whitespace().next())
            .map(|tok| tok.split('.').next().unwrap_or("").to_string())
            .collect();
    }
    if let Some(rest) = s.strip_prefix("from ") {
        if let Some(tok) = rest.split_whitespace().next() {
            if !tok.starts_with('.') {
                return vec![tok.split('.').next().unwrap_or("").to_string()];
            }
        }
    }
    Vec::new()
}

/// Whether a repo-relative path is visited by the scan.
pub fn scanned_path(rel: &str) -> bool {
    let parts: Vec<&str> = rel.split('/').collect();
    let (dirs, file) = parts.split_at(parts.len() - 1);
    file[0].ends_with(".py")
        && dirs
            .iter()
            .all(|d| !d.starts_with('.') && !SKIP_DIRS.contains(d))
}

/// Requirement names from `(repo-relative path, content)` pairs.
pub fn scan_requirements<'a>(files: impl IntoIterator<Item = (&'a str, &'a str)>) -> Vec<String> {
    let mut local = BTreeSet::new();
    let mut imports = BTreeSet::new();
    for (rel, content) in files {
        if !scanned_path(rel) {
            continue;
        }
        let parts: Vec<&str> = rel.split('/').collect();
        local.extend(parts[..parts.len() - 1].iter().map(|s| s.to_string()));
        let file = parts[parts.len() - 1];
        local.insert(file[..file.len() - 3].to_string());
        for line in content.split('\n') {
            imports.extend(module_names(line).into_iter().filter(|n| is_identifier(n)));
        }
    }
    let reqs: BTreeSet<String> = imports
        .into_iter()
        .filter(|n| !STDLIB_MODULES.contains(&n.as_str()) && !local.contains(n))
        .map(|n| {
            IMPORT_ALIASES
                .iter()
                .find(|(k, _)| *k == n)
                .map(|(_, v)| v.to_string())
                .unwrap_or(n)
        })
        .collect();
    reqs.into_iter().collect()
}
