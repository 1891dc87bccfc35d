//! Where actions come from: a scripted list or a chat-completion model.

use std::collections::VecDeque;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::action::{parse_action, Action, ActionError};
use super::Observation;

pub const DEFAULT_TEMPERATURE: f64 = 0.2;
pub const MAX_PARSE_RETRIES: usize = 3;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("http error: {0}")]
    Http(String),
    #[error("no parseable action after {0} attempts: {1}")]
    ParseExhausted(usize, String),
    #[error("the action script is exhausted")]
    NoMoreActions,
    #[error("policy configuration: {0}")]
    Config(String),
}

/// One completed step as the policy sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistoryEntry {
    /// The action text as issued, even when it failed to parse.
    pub action: String,
    pub thought: Option<String>,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyContext {
    pub repo_full_name: String,
    pub sha: String,
    pub base_image: String,
    pub turns_left: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyReply {
    pub text: String,
    pub action: Result<Action, ActionError>,
    pub thought: Option<String>,
}

impl PolicyReply {
    pub fn parse(text: impl Into<String>, thought: Option<String>) -> Self {
        let text = text.into();
        Self {
            action: parse_action(&text),
            text,
            thought,
        }
    }
}

pub trait Policy: Send {
    fn next_action(
        &mut self,
        history: &[HistoryEntry],
        context: &PolicyContext,
    ) -> Result<PolicyReply, PolicyError>;
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum ScriptStep {
    Text(String),
    WithThought {
        action: String,
        thought: Option<String>,
    },
}

/// Replays a fixed action list; unparsable entries reach the loop as parse failures.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    steps: VecDeque<(String, Option<String>)>,
}

impl ScriptedPolicy {
    pub fn new<I, S>(actions: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            steps: actions.into_iter().map(|a| (a.into(), None)).collect(),
        }
    }

    /// Reads a JSON array of strings or `{"action": .., "thought": ..}` objects.
    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let steps: Vec<ScriptStep> = serde_json::from_str(text)
            .map_err(|e| PolicyError::Config(format!("action script: {e}")))?;
        Ok(Self {
            steps: steps
                .into_iter()
                .map(|s| match s {
                    ScriptStep::Text(a) => (a, None),
                    ScriptStep::WithThought { action, thought } => (action, thought),
                })
                .collect(),
        })
    }

    pub fn remaining(&self) -> usize {
        self.steps.len()
    }
}

impl Policy for ScriptedPolicy {
    fn next_action(
        &mut self,
        _: &[HistoryEntry],
        _: &PolicyContext,
    ) -> Result<PolicyReply, PolicyError> {
        let (text, thought) = self.steps.pop_front().ok_or(PolicyError::NoMoreActions)?;
        Ok(PolicyReply::parse(text, thought))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        Self {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

pub trait ChatTransport: Send {
    /// Returns the assistant message text.
    fn complete(&mut self, request: &ChatRequest) -> Result<String, PolicyError>;
}

/// OpenAI-style `chat/completions` endpoint.
pub struct HttpTransport {
    url: String,
    key: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, key: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .build();
        Self {
            url: url.into(),
            key,
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

impl ChatTransport for HttpTransport {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, PolicyError> {
        let body = serde_json::to_string(request).expect("request serializes");
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::StatusCode(code) => {
                PolicyError::Http(format!("{} returned status {code}", self.url))
            }
            other => PolicyError::Http(format!("{}: {other}", self.url)),
        })?;
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| PolicyError::Http(format!("reading response: {e}")))?;
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| PolicyError::Http(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| PolicyError::Http("response has no choices".into()))
    }
}

/// Serves canned replies in order and keeps every request it saw.
#[derive(Debug, Clone, Default)]
pub struct ReplayTransport {
    replies: VecDeque<String>,
    pub requests: Vec<ChatRequest>,
}

impl ReplayTransport {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: replies.into_iter().map(Into::into).collect(),
            requests: Vec::new(),
        }
    }
}

impl ChatTransport for ReplayTransport {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, PolicyError> {
        self.requests.push(request.clone());
        self.replies
            .pop_front()
            .ok_or_else(|| PolicyError::Http("replay transcript exhausted".into()))
    }
}

pub const SYSTEM_PROMPT: &str = r#"You are setting up an environment in which the test suite of a Python repository can run.
The repository is checked out at /repo inside a container. Each reply must contain your reasoning followed by exactly ONE command in a single fenced code block.

Commands:
  waitinglist add -p NAME [-v CONSTRAINTS] -t pip|apt   queue a package
  waitinglist addfile PATH                             queue every line of a requirements file
  waitinglist clear | waitinglist show
  conflictlist solve -v "CONSTRAINTS"                  settle the first conflict with these constraints
  conflictlist solve -u                                keep the originally queued constraint
  conflictlist clear | conflictlist show
  download                                             install everything on the waiting list
  runtest                                              run pytest in /repo
  poetryruntest                                        run pytest through poetry
  runpipreqs                                           write requirements_pipreqs.txt from the imports
  change_python_version X.Y                            restart from python:X.Y, discarding all work
  clear_configuration                                  restart from python:3.10, discarding all work
  edit_file PATH                                       followed by SEARCH/REPLACE blocks on the next lines
Any other line is run as a bash command. A failed command is rolled back.
Never modify or delete test files (test_*.py, *_test.py)."#;

/// Chat-completion policy with parse-error feedback.
pub struct LlmPolicy<T: ChatTransport> {
    transport: T,
    model: String,
    temperature: f64,
    system_prompt: String,
}

impl LlmPolicy<HttpTransport> {
    /// Reads `ENVFORGE_LLM_URL`, `ENVFORGE_LLM_MODEL` and `ENVFORGE_LLM_KEY`.
    pub fn from_env() -> Result<Self, PolicyError> {
        let var = |name: &str| std::env::var(name).ok().filter(|v| !v.is_empty());
        let url = var("ENVFORGE_LLM_URL")
            .ok_or_else(|| PolicyError::Config("ENVFORGE_LLM_URL is not set".into()))?;
        let model = var("ENVFORGE_LLM_MODEL")
            .ok_or_else(|| PolicyError::Config("ENVFORGE_LLM_MODEL is not set".into()))?;
        Ok(Self::new(
            HttpTransport::new(url, var("ENVFORGE_LLM_KEY")),
            model,
            DEFAULT_TEMPERATURE,
        ))
    }
}

impl<T: ChatTransport> LlmPolicy<T> {
    pub fn new(transport: T, model: impl Into<String>, temperature: f64) -> Self {
        Self {
            transport,
            model: model.into(),
            temperature,
            system_prompt: SYSTEM_PROMPT.to_string(),
        }
    }

    pub fn with_system_prompt(mut self, prompt: impl Into<String>) -> Self {
        self.system_prompt = prompt.into();
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn messages(&self, history: &[HistoryEntry], context: &PolicyContext) -> Vec<ChatMessage> {
        let mut messages = vec![
            ChatMessage::new("system", self.system_prompt.clone()),
            ChatMessage::new(
                "user",
                format!(
                    "Repository {} at {} is staged in /repo. Base image: {}. Turns left: {}.",
                    context.repo_full_name, context.sha, context.base_image, context.turns_left
                ),
            ),
        ];
        for entry in history {
            let mut said = String::new();
            if let Some(thought) = &entry.thought {
                said.push_str(thought);
                said.push('\n');
            }
            said.push_str(&format!("```\n{}\n```", entry.action));
            messages.push(ChatMessage::new("assistant", said));
            messages.push(ChatMessage::new("user", entry.observation.text.clone()));
        }
        messages
    }
}

/// Splits a reply into its single fenced block and the surrounding prose.
pub fn extract_command(reply: &str) -> Result<(String, Option<String>), ActionError> {
    let mut blocks = Vec::new();
    let mut prose = Vec::new();
    let mut current: Option<Vec<&str>> = None;
    for line in reply.lines() {
        let fence = line.trim_start().starts_with("```");
        match (&mut current, fence) {
            (None, true) => current = Some(Vec::new()),
            (Some(body), true) => {
                blocks.push(body.join("\n"));
                current = None;
            }
            (Some(body), false) => body.push(line),
            (None, false) => prose.push(line),
        }
    }
    if current.is_some() {
        return Err(ActionError::Invalid("unterminated code block".into()));
    }
    match blocks.len() {
        0 => Err(ActionError::Invalid("no fenced command block found".into())),
        1 => {
            let thought = prose.join("\n").trim().to_string();
            Ok((blocks.remove(0), (!thought.is_empty()).then_some(thought)))
        }
        n => Err(ActionError::MultipleCommands(n)),
    }
}

pub fn parse_feedback(err: &ActionError) -> String {
    format!(
        "Your reply could not be used: {err}. Please include a SINGLE command in one fenced code block, with any discussion outside it."
    )
}

impl<T: ChatTransport> Policy for LlmPolicy<T> {
    fn next_action(
        &mut self,
        history: &[HistoryEntry],
        context: &PolicyContext,
    ) -> Result<PolicyReply, PolicyError> {
        let mut messages = self.messages(history, context);
        let mut last_error = String::new();
        for _ in 0..=MAX_PARSE_RETRIES {
            let request = ChatRequest {
                model: self.model.clone(),
                messages: messages.clone(),
                temperature: self.temperature,
            };
            let reply = self.transport.complete(&request)?;
            let parsed = extract_command(&reply).and_then(|(text, thought)| {
                let action = parse_action(&text)?;
                Ok(PolicyReply {
                    text,
                    action: Ok(action),
                    thought,
                })
            });
            match parsed {
                Ok(reply) => return Ok(reply),
                Err(e) => {
                    tracing::debug!(error = %e, "unparsable model reply");
                    last_error = e.to_string();
                    messages.push(ChatMessage::new("assistant", reply));
                    messages.push(ChatMessage::new("user", parse_feedback(&e)));
                }
            }
        }
        Err(PolicyError::ParseExhausted(
            MAX_PARSE_RETRIES + 1,
            last_error,
        ))
    }
}

#[cfg(test)]
mod tests {
    use std::io::{Read, Write};
    use std::net::TcpListener;

    use super::*;

    fn ctx() -> PolicyContext {
        PolicyContext {
            repo_full_name: "acme/widget".into(),
            sha: "abc123".into(),
            base_image: "python:3.10".into(),
            turns_left: 10,
        }
    }

    fn seen(action: &str, text: &str) -> HistoryEntry {
        HistoryEntry {
            action: action.into(),
            thought: None,
            observation: Observation {
                text: text.into(),
                return_code: Some(0),
                terminal: false,
            },
        }
    }

    #[test]
    fn scripted_json_forms() {
        let mut p =
            ScriptedPolicy::from_json(r#"["ls", {"action": "runtest", "thought": "try it"}]"#)
                .unwrap();
        let a = p.next_action(&[], &ctx()).unwrap();
        assert_eq!(a.action, Ok(Action::Bash("ls".into())));
        let b = p.next_action(&[], &ctx()).unwrap();
        assert_eq!(b.action, Ok(Action::RunTest));
        assert_eq!(b.thought.as_deref(), Some("try it"));
        assert!(matches!(
            p.next_action(&[], &ctx()),
            Err(PolicyError::NoMoreActions)
        ));
    }

    #[test]
    fn replay_is_deterministic() {
        let replies = [
            "Install the runner first.\n```\npip install pytest\n```",
            "Now test.\n```bash\nruntest\n```",
        ];
        let run = || {
            let mut p = LlmPolicy::new(ReplayTransport::new(replies), "m", DEFAULT_TEMPERATURE);
            let first = p.next_action(&[], &ctx()).unwrap();
            let history = [seen(&first.text, "ok")];
            let second = p.next_action(&history, &ctx()).unwrap();
            (
                vec![first.action.unwrap(), second.action.unwrap()],
                p.transport().requests.clone(),
            )
        };
        let (a, req_a) = run();
        let (b, req_b) = run();
        assert_eq!(
            a,
            vec![Action::Bash("pip install pytest".into()), Action::RunTest]
        );
        assert_eq!(a, b);
        assert_eq!(req_a, req_b);
        assert_eq!(req_a[1].messages.len(), 4);
        assert_eq!(req_a[0].temperature, 0.2);
    }

    #[test]
    fn two_commands_get_feedback() {
        let replies = ["```\nls\n```\n```\npwd\n```", "```\nls\n```"];
        let mut p = LlmPolicy::new(ReplayTransport::new(replies), "m", DEFAULT_TEMPERATURE);
        let reply = p.next_action(&[], &ctx()).unwrap();
        assert_eq!(reply.action, Ok(Action::Bash("ls".into())));
        let retry = &p.transport().requests[1];
        let feedback = &retry.messages.last().unwrap().content;
        assert!(feedback.contains("SINGLE command"), "{feedback}");

        let mut p = LlmPolicy::new(
            ReplayTransport::new(["```\nls\npwd\n```"; 4]),
            "m",
            DEFAULT_TEMPERATURE,
        );
        assert!(matches!(
            p.next_action(&[], &ctx()),
            Err(PolicyError::ParseExhausted(4, _))
        ));
    }

    #[test]
    fn unauthorized_is_http_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut buf = [0u8; 4096];
            let _ = stream.read(&mut buf);
            let body = r#"{"error":"bad key"}"#;
            let _ = write!(
                stream,
                "HTTP/1.1 401 Unauthorized\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
        });
        let transport = HttpTransport::new(
            format!("http://{addr}/v1/chat/completions"),
            Some("nope".into()),
        );
        let mut p = LlmPolicy::new(transport, "m", DEFAULT_TEMPERATURE);
        let err = p.next_action(&[], &ctx()).unwrap_err();
        server.join().unwrap();
        match err {
            PolicyError::Http(msg) => assert!(msg.contains("401"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fence_extraction() {
        let (cmd, thought) = extract_command("why\n```sh\nls -la\n```\nafter").unwrap();
        assert_eq!(cmd, "ls -la");
        assert_eq!(thought.as_deref(), Some("why\nafter"));
        assert!(extract_command("just text").is_err());
        assert_eq!(
            extract_command("```\na\n```\n```\nb\n```"),
            Err(ActionError::MultipleCommands(2))
        );
    }
}
