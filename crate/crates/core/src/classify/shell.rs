//! Minimal shell-line tokenizer and parser.
//!
//! Understands single and double quotes, backslash escapes, pipelines,
//! `&&`/`||`/`;` chains, leading `NAME=value` assignments and the usual
//! redirections (`>`, `>>`, `<`, `2>`, `2>&1`, `&>`). It does not expand
//! variables, globs or command substitutions; words that would need
//! expansion are flagged so callers can treat them conservatively.

use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShellError {
    #[error("unparsable line: unbalanced {0} quote")]
    UnbalancedQuote(char),
    #[error("unparsable line: {0}")]
    Syntax(String),
}

/// A single shell word after quote removal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Word {
    pub text: String,
    /// Byte range of the word in the source line, quotes included.
    pub span: Range<usize>,
    /// Contains an unquoted or double-quoted `$`, or a backtick.
    pub expands: bool,
    pub quoted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RedirectMode {
    Write,
    Append,
    Read,
    /// `N>&M`
    Dup(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Redirect {
    pub fd: u32,
    pub mode: RedirectMode,
    /// `&>` and `&>>` redirect stdout and stderr together.
    pub both: bool,
    pub target: Option<Word>,
}

impl Redirect {
    pub fn is_output(&self) -> bool {
        !matches!(self.mode, RedirectMode::Read)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Stage {
    pub assignments: Vec<(String, String)>,
    pub argv: Vec<Word>,
    pub redirects: Vec<Redirect>,
}

impl Stage {
    pub fn program(&self) -> Option<&str> {
        self.argv.first().map(|w| w.text.as_str())
    }

    pub fn args(&self) -> impl Iterator<Item = &str> {
        self.argv.iter().skip(1).map(|w| w.text.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connector {
    /// First pipeline of the line, or after `;` / `&`.
    Seq,
    And,
    Or,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainItem {
    pub connector: Connector,
    pub stages: Vec<Stage>,
}

/// A parsed command line.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Line {
    pub chain: Vec<ChainItem>,
    /// Subshells, groups, heredocs, background jobs or expansions appear.
    pub complex: bool,
}

impl Line {
    pub fn stages(&self) -> impl Iterator<Item = &Stage> {
        self.chain.iter().flat_map(|item| item.stages.iter())
    }

    pub fn redirects_output(&self) -> bool {
        self.stages()
            .any(|s| s.redirects.iter().any(Redirect::is_output))
    }

    pub fn is_single_stage(&self) -> bool {
        self.chain.len() == 1 && self.chain[0].stages.len() == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(Word),
    Pipe,
    And,
    Or,
    Semi,
    Background,
    Redirect {
        fd: u32,
        mode: RedirectMode,
        both: bool,
    },
    Group,
    Heredoc,
}

fn is_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_ascii_alphabetic())
        && chars.all(|c| c == '_' || c.is_ascii_alphanumeric())
}

struct Lexer<'a> {
    src: &'a str,
    chars: Vec<(usize, char)>,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            chars: src.char_indices().collect(),
            pos: 0,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn peek_at(&self, off: usize) -> Option<char> {
        self.chars.get(self.pos + off).map(|&(_, c)| c)
    }

    fn offset(&self) -> usize {
        self.chars
            .get(self.pos)
            .map(|&(i, _)| i)
            .unwrap_or(self.src.len())
    }

    fn tokens(mut self) -> Result<Vec<Tok>, ShellError> {
        let mut out = Vec::new();
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' | '\n' | '\r' => self.pos += 1,
                '#' => break,
                '|' => {
                    self.pos += 1;
                    match self.peek() {
                        Some('|') => {
                            self.pos += 1;
                            out.push(Tok::Or);
                        }
                        Some('&') => {
                            self.pos += 1;
                            out.push(Tok::Pipe);
                        }
                        _ => out.push(Tok::Pipe),
                    }
                }
                '&' => {
                    self.pos += 1;
                    match self.peek() {
                        Some('&') => {
                            self.pos += 1;
                            out.push(Tok::And);
                        }
                        Some('>') => {
                            self.pos += 1;
                            let mode = if self.peek() == Some('>') {
                                self.pos += 1;
                                RedirectMode::Append
                            } else {
                                RedirectMode::Write
                            };
                            out.push(Tok::Redirect {
                                fd: 1,
                                mode,
                                both: true,
                            });
                        }
                        _ => out.push(Tok::Background),
                    }
                }
                ';' => {
                    self.pos += 1;
                    out.push(Tok::Semi);
                }
                '(' | ')' | '{' | '}' if self.word_boundary_char(c) => {
                    self.pos += 1;
                    out.push(Tok::Group);
                }
                '>' | '<' => out.push(self.redirect(None)?),
                _ => {
                    let word = self.word()?;
                    // `2>file`: a bare digit word glued to a redirection.
                    if matches!(self.peek(), Some('>') | Some('<'))
                        && !word.quoted
                        && !word.text.is_empty()
                        && word.text.chars().all(|c| c.is_ascii_digit())
                    {
                        let fd = word.text.parse().unwrap_or(1);
                        out.push(self.redirect(Some(fd))?);
                    } else {
                        out.push(Tok::Word(word));
                    }
                }
            }
        }
        Ok(out)
    }

    fn word_boundary_char(&self, c: char) -> bool {
        // Braces only group when standing alone; `{a,b}` in a word is literal.
        match c {
            '(' | ')' => true,
            _ => matches!(self.peek_at(1), None | Some(' ') | Some('\t') | Some(';')),
        }
    }

    fn redirect(&mut self, fd: Option<u32>) -> Result<Tok, ShellError> {
        let c = self.peek().unwrap_or('>');
        self.pos += 1;
        if c == '<' {
            if self.peek() == Some('<') {
                self.pos += 1;
                return Ok(Tok::Heredoc);
            }
            return Ok(Tok::Redirect {
                fd: fd.unwrap_or(0),
                mode: RedirectMode::Read,
                both: false,
            });
        }
        let fd = fd.unwrap_or(1);
        match self.peek() {
            Some('>') => {
                self.pos += 1;
                Ok(Tok::Redirect {
                    fd,
                    mode: RedirectMode::Append,
                    both: false,
                })
            }
            Some('&') => {
                self.pos += 1;
                let start = self.pos;
                while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
                    self.pos += 1;
                }
                if start == self.pos {
                    return Err(ShellError::Syntax("expected fd after >&".into()));
                }
                let digits: String = self.chars[start..self.pos]
                    .iter()
                    .map(|&(_, c)| c)
                    .collect();
                Ok(Tok::Redirect {
                    fd,
                    mode: RedirectMode::Dup(digits.parse().unwrap_or(1)),
                    both: false,
                })
            }
            Some('|') => {
                self.pos += 1;
                Ok(Tok::Redirect {
                    fd,
                    mode: RedirectMode::Write,
                    both: false,
                })
            }
            _ => Ok(Tok::Redirect {
                fd,
                mode: RedirectMode::Write,
                both: false,
            }),
        }
    }

    fn word(&mut self) -> Result<Word, ShellError> {
        let start = self.offset();
        let mut text = String::new();
        let mut expands = false;
        let mut quoted = false;
        while let Some(c) = self.peek() {
            match c {
                ' ' | '\t' | '\n' | '\r' | '|' | '&' | ';' | '<' | '>' | '(' | ')' => break,
                '\'' => {
                    quoted = true;
                    self.pos += 1;
                    loop {
                        match self.peek() {
                            None => return Err(ShellError::UnbalancedQuote('\'')),
                            Some('\'') => {
                                self.pos += 1;
                                break;
                            }
                            Some(c) => {
                                text.push(c);
                                self.pos += 1;
                            }
                        }
                    }
                }
                '"' => {
                    quoted = true;
                    self.pos += 1;
                    loop {
                        match self.peek() {
                            None => return Err(ShellError::UnbalancedQuote('"')),
                            Some('"') => {
                                self.pos += 1;
                                break;
                            }
                            Some('\\') => match self.peek_at(1) {
                                Some(n @ ('"' | '\\' | '$' | '`')) => {
                                    text.push(n);
                                    self.pos += 2;
                                }
                                Some('\n') => self.pos += 2,
                                _ => {
                                    text.push('\\');
                                    self.pos += 1;
                                }
                            },
                            Some(c) => {
                                if c == '$' || c == '`' {
                                    expands = true;
                                }
                                text.push(c);
                                self.pos += 1;
                            }
                        }
                    }
                }
                '\\' => {
                    self.pos += 1;
                    match self.peek() {
                        Some('\n') => self.pos += 1,
                        Some(n) => {
                            text.push(n);
                            self.pos += 1;
                        }
                        None => text.push('\\'),
                    }
                }
                '$' => {
                    expands = true;
                    text.push('$');
                    self.pos += 1;
                    match self.peek() {
                        Some('(') => self.balanced(&mut text, '(', ')')?,
                        Some('{') => self.balanced(&mut text, '{', '}')?,
                        _ => {}
                    }
                }
                '`' => {
                    expands = true;
                    text.push('`');
                    self.pos += 1;
                    loop {
                        match self.peek() {
                            None => return Err(ShellError::UnbalancedQuote('`')),
                            Some('`') => {
                                text.push('`');
                                self.pos += 1;
                                break;
                            }
                            Some(c) => {
                                text.push(c);
                                self.pos += 1;
                            }
                        }
                    }
                }
                c => {
                    text.push(c);
                    self.pos += 1;
                }
            }
        }
        Ok(Word {
            text,
            span: start..self.offset(),
            expands,
            quoted,
        })
    }

    fn balanced(&mut self, text: &mut String, open: char, close: char) -> Result<(), ShellError> {
        let mut depth = 0usize;
        while let Some(c) = self.peek() {
            text.push(c);
            self.pos += 1;
            if c == open {
                depth += 1;
            } else if c == close {
                depth -= 1;
                if depth == 0 {
                    return Ok(());
                }
            }
        }
        Err(ShellError::Syntax(format!("unterminated ${open}")))
    }
}

/// Parses one shell line.
pub fn parse_line(src: &str) -> Result<Line, ShellError> {
    let toks = Lexer::new(src).tokens()?;
    let mut line = Line::default();
    let mut connector = Connector::Seq;
    let mut stages: Vec<Stage> = Vec::new();
    let mut stage = Stage::default();
    let mut in_args = false;
    let mut iter = toks.into_iter().peekable();

    fn finish_stage(stage: &mut Stage, stages: &mut Vec<Stage>, in_args: &mut bool) -> bool {
        *in_args = false;
        let empty =
            stage.argv.is_empty() && stage.assignments.is_empty() && stage.redirects.is_empty();
        if !empty {
            stages.push(std::mem::take(stage));
        }
        !empty
    }

    while let Some(tok) = iter.next() {
        match tok {
            Tok::Word(w) => {
                if !in_args {
                    if let Some((name, value)) = w.text.split_once('=') {
                        if is_name(name) && src[w.span.clone()].starts_with(&format!("{name}=")) {
                            if w.expands {
                                line.complex = true;
                            }
                            stage
                                .assignments
                                .push((name.to_string(), value.to_string()));
                            continue;
                        }
                    }
                }
                if w.expands {
                    line.complex = true;
                }
                in_args = true;
                stage.argv.push(w);
            }
            Tok::Redirect { fd, mode, both } => {
                let target = match mode {
                    RedirectMode::Dup(_) => None,
                    _ => match iter.next() {
                        Some(Tok::Word(w)) => {
                            if w.expands {
                                line.complex = true;
                            }
                            Some(w)
                        }
                        _ => return Err(ShellError::Syntax("redirection without target".into())),
                    },
                };
                stage.redirects.push(Redirect {
                    fd,
                    mode,
                    both,
                    target,
                });
            }
            Tok::Pipe => {
                if !finish_stage(&mut stage, &mut stages, &mut in_args) {
                    return Err(ShellError::Syntax("empty pipeline stage".into()));
                }
            }
            Tok::And | Tok::Or | Tok::Semi | Tok::Background => {
                if matches!(tok, Tok::Background) {
                    line.complex = true;
                }
                let had = finish_stage(&mut stage, &mut stages, &mut in_args);
                if !had {
                    if matches!(tok, Tok::And | Tok::Or) || !stages.is_empty() {
                        return Err(ShellError::Syntax("operator without command".into()));
                    }
                    if line.chain.is_empty() {
                        return Err(ShellError::Syntax("operator without command".into()));
                    }
                    continue;
                }
                line.chain.push(ChainItem {
                    connector,
                    stages: std::mem::take(&mut stages),
                });
                connector = match tok {
                    Tok::And => Connector::And,
                    Tok::Or => Connector::Or,
                    _ => Connector::Seq,
                };
                if matches!(tok, Tok::And | Tok::Or) && iter.peek().is_none() {
                    return Err(ShellError::Syntax("dangling operator".into()));
                }
            }
            Tok::Group | Tok::Heredoc => {
                line.complex = true;
            }
        }
    }
    if finish_stage(&mut stage, &mut stages, &mut in_args) || !stages.is_empty() {
        line.chain.push(ChainItem { connector, stages });
    } else if matches!(connector, Connector::And | Connector::Or) {
        return Err(ShellError::Syntax("dangling operator".into()));
    }
    Ok(line)
}

/// Quotes `s` for a POSIX shell if it contains anything special.
pub fn quote(s: &str) -> String {
    let plain = !s.is_empty()
        && s.chars().all(|c| {
            c.is_ascii_alphanumeric()
                || matches!(c, '-' | '_' | '.' | '/' | ':' | '=' | '+' | ',' | '@' | '%')
        });
    if plain {
        s.to_string()
    } else {
        format!("'{}'", s.replace('\'', r"'\''"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(line: &Line, i: usize) -> Vec<String> {
        line.stages()
            .nth(i)
            .unwrap()
            .argv
            .iter()
            .map(|w| w.text.clone())
            .collect()
    }

    #[test]
    fn quotes_and_escapes() {
        let line = parse_line(r#"pip install 'B>=1.0,<2.0' "a b" c\ d"#).unwrap();
        assert_eq!(
            argv(&line, 0),
            ["pip", "install", "B>=1.0,<2.0", "a b", "c d"]
        );
        assert!(!line.redirects_output());
    }

    #[test]
    fn redirect_forms() {
        for src in [
            "cat a > b",
            "cat a >> b",
            "cat a 2> err",
            "cat a &> all",
            "cat a>b",
            "ls 2>&1",
        ] {
            let line = parse_line(src).unwrap();
            assert!(line.redirects_output(), "{src}");
        }
        let line = parse_line("sort < in.txt").unwrap();
        assert!(!line.redirects_output());
        assert!(!parse_line("grep '>' file").unwrap().redirects_output());
    }

    #[test]
    fn chains_and_pipes() {
        let line = parse_line("cd /repo && pip install -e . || echo no; ls | wc -l").unwrap();
        let conns: Vec<_> = line.chain.iter().map(|c| c.connector).collect();
        assert_eq!(
            conns,
            [
                Connector::Seq,
                Connector::And,
                Connector::Or,
                Connector::Seq
            ]
        );
        assert_eq!(line.chain[3].stages.len(), 2);
    }

    #[test]
    fn assignments_prefix() {
        let line = parse_line("FOO=1 BAR='x y' python run.py").unwrap();
        let stage = line.stages().next().unwrap();
        assert_eq!(
            stage.assignments,
            [("FOO".into(), "1".into()), ("BAR".into(), "x y".into())]
        );
        assert_eq!(stage.program(), Some("python"));
    }

    #[test]
    fn unbalanced_quotes_fail() {
        assert_eq!(
            parse_line("echo 'abc"),
            Err(ShellError::UnbalancedQuote('\''))
        );
        assert_eq!(
            parse_line("echo \"abc"),
            Err(ShellError::UnbalancedQuote('"'))
        );
        assert!(parse_line("ls &&").is_err());
        assert!(parse_line("&& ls").is_err());
    }

    #[test]
    fn expansion_marks_complex() {
        assert!(parse_line("echo $HOME").unwrap().complex);
        assert!(parse_line("echo $(whoami)").unwrap().complex);
        assert!(!parse_line("echo '$HOME'").unwrap().complex);
        assert!(parse_line("(cd x; make)").unwrap().complex);
    }

    #[test]
    fn spans_cover_quotes() {
        let src = "pip install 'B>=1.0,<2.0'";
        let line = parse_line(src).unwrap();
        let w = &line.stages().next().unwrap().argv[2];
        assert_eq!(&src[w.span.clone()], "'B>=1.0,<2.0'");
    }

    #[test]
    fn quote_roundtrip() {
        for s in ["plain", "a b", "it's", "B>=1.0,<2.0", ""] {
            let line = parse_line(&format!("echo {}", quote(s))).unwrap();
            let got = line
                .stages()
                .next()
                .unwrap()
                .argv
                .get(1)
                .map(|w| w.text.clone())
                .unwrap_or_default();
            assert_eq!(got, s);
        }
    }
}
