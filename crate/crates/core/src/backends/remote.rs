//! Remote backends speaking the JSON-lines protocol over a child process's
//! stdio or over HTTP POST, and the golden-transcript conformance runner.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{AnnotateRequest, AnnotateResponse, Backend, BackendError, GenerateRequest, GenerateResponse, Message, UNKNOWN};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Generate,
    Annotate,
}

impl Route {
    pub fn path(self) -> &'static str {
        match self {
            Route::Generate => "/generate",
            Route::Annotate => "/annotate",
        }
    }
}

/// Sends one request line and returns one response line.
pub trait Exchange {
    fn describe(&self) -> String;
    fn exchange(&mut self, route: Route, line: &str) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `http://host:port` base URL.
    Http(String),
    /// Shell command whose stdin/stdout carry the protocol.
    Stdio(String),
}

impl std::str::FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.starts_with("http://") || s.starts_with("https://") {
            Ok(Endpoint::Http(s.trim_end_matches('/').to_string()))
        } else if let Some(cmd) = s.strip_prefix("stdio:") {
            if cmd.trim().is_empty() {
                return Err("stdio endpoint needs a command".into());
            }
            Ok(Endpoint::Stdio(cmd.to_string()))
        } else {
            Err(format!("unrecognized endpoint `{s}` (expected http://... or stdio:<command>)"))
        }
    }
}

impl Endpoint {
    pub fn connect(&self, timeout: Duration) -> Result<Box<dyn Exchange>, BackendError> {
        Ok(match self {
            Endpoint::Http(base) => Box::new(HttpExchange::new(base, timeout)),
            Endpoint::Stdio(cmd) => Box::new(StdioExchange::spawn(cmd, timeout)?),
        })
    }
}

pub struct StdioExchange {
    command: String,
    timeout: Duration,
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl StdioExchange {
    pub fn spawn(command: &str, timeout: Duration) -> Result<Self, BackendError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Transport(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self {
            command: command.to_string(),
            timeout,
            child,
            stdin,
            lines: rx,
        })
    }

    fn restart(&mut self) -> Result<(), BackendError> {
        let _ = self.child.kill();
        let _ = self.child.wait();
        *self = Self::spawn(&self.command, self.timeout)?;
        Ok(())
    }
}

impl Drop for StdioExchange {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Exchange for StdioExchange {
    fn describe(&self) -> String {
        format!("stdio:{}", self.command)
    }

    fn exchange(&mut self, _route: Route, line: &str) -> Result<String, BackendError> {
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| BackendError::Transport(format!("write to `{}` failed: {e}", self.command)))?;
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(response)) => Ok(response),
            Ok(Err(e)) => Err(BackendError::Transport(format!("read from `{}` failed: {e}", self.command))),
            Err(RecvTimeoutError::Timeout) => {
                // A late answer would desynchronize the line stream.
                self.restart()?;
                Err(BackendError::Timeout(format!("no response from `{}` within {:?}", self.command, self.timeout)))
            }
            Err(RecvTimeoutError::Disconnected) => {
                Err(BackendError::Transport(format!("`{}` closed its stdout", self.command)))
            }
        }
    }
}

pub struct HttpExchange {
    base: String,
    agent: ureq::Agent,
}

impl HttpExchange {
    pub fn new(base: &str, timeout: Duration) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Exchange for HttpExchange {
    fn describe(&self) -> String {
        self.base.clone()
    }

    fn exchange(&mut self, route: Route, line: &str) -> Result<String, BackendError> {
        let url = format!("{}{}", self.base, route.path());
        match self
            .agent
            .post(&url)
            .set("Content-Type", "application/json")
            .send_string(line)
        {
            Ok(resp) => resp
                .into_string()
                .map_err(|e| BackendError::Transport(format!("reading {url}: {e}"))),
            // Error objects may come back with a non-2xx status.
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                if body.trim_start().starts_with('{') {
                    Ok(body)
                } else {
                    Err(BackendError::Transport(format!("{url} returned HTTP {code}")))
                }
            }
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") {
                    Err(BackendError::Timeout(msg))
                } else {
                    Err(BackendError::Transport(msg))
                }
            }
        }
    }
}

/// Backend client over any [`Exchange`].
pub struct RemoteBackend {
    exchange: Box<dyn Exchange>,
}

impl RemoteBackend {
    pub fn new(exchange: Box<dyn Exchange>) -> Self {
        Self { exchange }
    }

    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self, BackendError> {
        Ok(Self::new(endpoint.connect(timeout)?))
    }

    fn call(&mut self, route: Route, message: &Message) -> Result<Message, BackendError> {
        let line = serde_json::to_string(message).expect("messages serialize");
        let response = self.exchange.exchange(route, &line)?;
        serde_json::from_str(response.trim())
            .map_err(|e| BackendError::Protocol(format!("unparseable response `{}`: {e}", response.trim())))
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!("remote:{}", self.exchange.describe())
    }

    fn generate(&mut self, request: &GenerateRequest) -> Result<GenerateResponse, BackendError> {
        match self.call(Route::Generate, &Message::Generate(request.clone()))? {
            Message::GenerateResult(r) => Ok(r),
            Message::Error { message } => Err(BackendError::Remote(message)),
            other => Err(BackendError::Protocol(format!("expected generate_result, got {other:?}"))),
        }
    }

    fn annotate(&mut self, request: &AnnotateRequest) -> Result<AnnotateResponse, BackendError> {
        match self.call(Route::Annotate, &Message::Annotate(request.clone()))? {
            Message::AnnotateResult(r) => Ok(r),
            Message::Error { message } => Err(BackendError::Remote(message)),
            other => Err(BackendError::Protocol(format!("expected annotate_result, got {other:?}"))),
        }
    }
}

/// Serve one protocol line with `backend`; malformed input yields an
/// `error` message rather than a failure.
pub fn handle_line(backend: &mut dyn Backend, line: &str) -> String {
    let reply = match serde_json::from_str::<Message>(line.trim()) {
        Ok(Message::Generate(req)) => match backend.generate(&req) {
            Ok(r) => Message::GenerateResult(r),
            Err(e) => Message::Error { message: e.to_string() },
        },
        Ok(Message::Annotate(req)) => match backend.annotate(&req) {
            Ok(r) => Message::AnnotateResult(r),
            Err(e) => Message::Error { message: e.to_string() },
        },
        Ok(other) => Message::Error {
            message: format!("not a request: {other:?}"),
        },
        Err(e) => Message::Error {
            message: format!("malformed request: {e}"),
        },
    };
    serde_json::to_string(&reply).expect("messages serialize")
}

/// Exchange answered in-process by a [`Backend`].
pub struct LocalExchange<B> {
    pub backend: B,
}

impl<B: Backend> Exchange for LocalExchange<B> {
    fn describe(&self) -> String {
        format!("local:{}", self.backend.id())
    }

    fn exchange(&mut self, _route: Route, line: &str) -> Result<String, BackendError> {
        Ok(handle_line(&mut self.backend, line))
    }
}

/// Golden conformance transcript shipped with the engine.
pub const GOLDEN_TRANSCRIPT: &str = include_str!("../../tests/golden/transcript.jsonl");

/// What a conformance case asserts about the response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    /// `generate_result` with exactly `count` ids, identical when repeated.
    Generate,
    /// `annotate_result` whose answer is a listed choice or `UNKNOWN`.
    ChoiceClosure,
    /// `annotate_result` with the `UNKNOWN` sentinel.
    Unknown,
    /// An `error` object; the connection must stay usable afterwards.
    Error,
}

/// One line of a golden transcript file.
///
/// `request` is sent as JSON; `raw` is sent verbatim (for malformed input).
/// The string `$image` inside a request is replaced by the first image id
/// returned by the most recent generate case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptCase {
    pub name: String,
    pub route: Route,
    #[serde(default)]
    pub request: Option<Value>,
    #[serde(default)]
    pub raw: Option<String>,
    pub check: Check,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn substitute(value: &Value, image: &str) -> Value {
    match value {
        Value::String(s) if s == "$image" => Value::String(image.to_string()),
        Value::Array(items) => Value::Array(items.iter().map(|v| substitute(v, image)).collect()),
        Value::Object(map) => Value::Object(map.iter().map(|(k, v)| (k.clone(), substitute(v, image))).collect()),
        other => other.clone(),
    }
}

/// Run a golden transcript (one [`TranscriptCase`] per line) against an endpoint.
pub fn run_transcript(exchange: &mut dyn Exchange, transcript: &str) -> Result<Vec<CaseOutcome>, String> {
    let mut outcomes = Vec::new();
    let mut last_image = String::new();
    for (n, line) in transcript.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with("//") {
            continue;
        }
        let case: TranscriptCase = serde_json::from_str(line).map_err(|e| format!("transcript line {}: {e}", n + 1))?;
        let payload = match (&case.request, &case.raw) {
            (Some(v), _) => serde_json::to_string(&substitute(v, &last_image)).expect("json value"),
            (None, Some(raw)) => raw.clone(),
            (None, None) => return Err(format!("case `{}` has neither request nor raw", case.name)),
        };
        let verdict = check_case(exchange, &case, &payload, &mut last_image);
        outcomes.push(CaseOutcome {
            name: case.name.clone(),
            passed: verdict.is_ok(),
            detail: verdict.err().unwrap_or_default(),
        });
    }
    Ok(outcomes)
}

fn check_case(exchange: &mut dyn Exchange, case: &TranscriptCase, payload: &str, last_image: &mut String) -> Result<(), String> {
    let send = |ex: &mut dyn Exchange| -> Result<Message, String> {
        let text = ex.exchange(case.route, payload).map_err(|e| e.to_string())?;
        serde_json::from_str(text.trim()).map_err(|e| format!("response is not a protocol message: {e}"))
    };
    let response = send(exchange)?;
    match case.check {
        Check::Generate => {
            let count = serde_json::from_str::<Value>(payload)
                .ok()
                .and_then(|v| v.get("count").and_then(Value::as_u64))
                .ok_or("generate case without count")? as usize;
            let Message::GenerateResult(first) = response else {
                return Err(format!("expected generate_result, got {response:?}"));
            };
            if first.image_ids.len() != count {
                return Err(format!("asked for {count} ids, got {}", first.image_ids.len()));
            }
            match send(exchange)? {
                Message::GenerateResult(second) if second == first => {}
                other => return Err(format!("repeated request gave a different answer: {other:?}")),
            }
            if let Some(id) = first.image_ids.first() {
                *last_image = id.clone();
            }
            Ok(())
        }
        Check::ChoiceClosure | Check::Unknown => {
            let Message::AnnotateResult(r) = response else {
                return Err(format!("expected annotate_result, got {response:?}"));
            };
            let choices: Vec<String> = serde_json::from_str::<Value>(payload)
                .ok()
                .and_then(|v| v.get("choices").cloned())
                .and_then(|c| serde_json::from_value(c).ok())
                .unwrap_or_default();
            let ok = match case.check {
                Check::Unknown => r.answer == UNKNOWN,
                _ => r.answer == UNKNOWN || choices.contains(&r.answer),
            };
            ok.then_some(()).ok_or(format!("answer `{}` violates {:?}", r.answer, case.check))
        }
        Check::Error => match response {
            Message::Error { .. } => Ok(()),
            other => Err(format!("expected error object, got {other:?}")),
        },
    }
}
