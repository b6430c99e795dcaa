//! Generation backends: a chat-completions HTTP client and three local,
//! deterministic stand-ins (heuristic, oracle, scripted).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::correction::splice_correct;
use crate::denoising::{McqItem, FALLBACK_RATIONALE};
use crate::error::{BackendError, Error, Result};
use crate::sync::Semaphore;
use crate::tagging::EntitySpan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn user(prompt: &str, params: &GenParams) -> Self {
        Self {
            messages: vec![Message {
                role: Role::User,
                content: prompt.to_owned(),
            }],
            temperature: params.temperature,
            max_tokens: params.max_tokens,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), BackendError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(BackendError::Unsupported("request has no user message".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Unsupported(format!("temperature {}", self.temperature)));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::Unsupported("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// The structured task behind a request, used by local backends in place
/// of reading the prompt.
#[derive(Debug, Clone, Copy)]
pub enum TaskContext<'a> {
    Mcq {
        key: &'a str,
        mcq: &'a McqItem,
    },
    Rationale {
        key: &'a str,
        mcq: &'a McqItem,
        answer: char,
    },
    Gec(GecContext<'a>),
}

#[derive(Debug, Clone, Copy)]
pub struct GecContext<'a> {
    pub key: &'a str,
    /// The transcript being corrected (h1, or the previous span's output).
    pub h1: &'a str,
    pub hypotheses: &'a [String],
    /// The span of `h1` under correction and the entity chosen for it.
    pub edit: Option<(&'a EntitySpan, &'a str)>,
    /// Entity surfaces supplied in the prompt.
    pub entities: &'a [String],
    pub reference: Option<&'a str>,
    pub gold: &'a [String],
}

impl TaskContext<'_> {
    pub fn key(&self) -> &str {
        match self {
            TaskContext::Mcq { key, .. } | TaskContext::Rationale { key, .. } => key,
            TaskContext::Gec(g) => g.key,
        }
    }
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest, ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError>;
}

fn mcq_reply(rationale: &str, letter: char, mcq: &McqItem) -> String {
    let surface = mcq.option(letter).map(|c| c.surface()).unwrap_or_default();
    format!("<think>{rationale}</think><answer>{letter}: {surface}</answer>")
}

fn templated_rationale(mcq: &McqItem, answer: char) -> String {
    let Some(c) = mcq.option(answer) else {
        return format!("<think>No option {answer}.</think><answer>{answer}</answer>");
    };
    let best = mcq.argmax().0 == answer;
    let mut why = format!(
        "The sentence reads \"{}\". Option {answer} ({}) has phonetic score {:.2}",
        mcq.cloze,
        c.surface(),
        c.ps
    );
    why.push_str(if best { ", the highest among the options" } else { ", close to the spoken form" });
    if !c.definition().is_empty() {
        why.push_str(&format!(", and its definition \"{}\" fits the context", c.definition()));
    }
    why.push('.');
    mcq_reply(&why, answer, mcq)
}

fn splice_or_h1(g: &GecContext<'_>) -> String {
    match g.edit {
        Some((span, entity)) => splice_correct(g.h1, span, entity).unwrap_or_else(|_| g.h1.to_owned()),
        None => g.h1.to_owned(),
    }
}

/// Picks the highest-similarity option known to the entity database and
/// splices the selected entity.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicBackend;

impl LlmBackend for HeuristicBackend {
    fn complete(&self, request: &ChatRequest, ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError> {
        request.validate()?;
        Ok(match ctx {
            TaskContext::Mcq { mcq, .. } => mcq_reply(FALLBACK_RATIONALE, mcq.argmax_known().0, mcq),
            TaskContext::Rationale { mcq, answer, .. } => templated_rationale(mcq, *answer),
            TaskContext::Gec(g) => splice_or_h1(g),
        })
    }
}

/// Answers from the evaluation labels; behaves like the heuristic backend
/// where labels are absent.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleBackend;

impl LlmBackend for OracleBackend {
    fn complete(&self, request: &ChatRequest, ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError> {
        request.validate()?;
        Ok(match ctx {
            TaskContext::Mcq { mcq, .. } => match mcq.gold_letter {
                Some(l) => mcq_reply("ground truth named entity", l, mcq),
                None => mcq_reply(FALLBACK_RATIONALE, mcq.argmax_known().0, mcq),
            },
            TaskContext::Rationale { mcq, answer, .. } => templated_rationale(mcq, *answer),
            TaskContext::Gec(g) => {
                let has_gold = g
                    .gold
                    .iter()
                    .any(|gold| g.entities.iter().any(|e| e.trim().eq_ignore_ascii_case(gold.trim())));
                match g.reference {
                    Some(reference) if has_gold => reference.to_owned(),
                    _ => splice_or_h1(g),
                }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    pub key: String,
    pub reply: String,
}

/// Replays replies recorded in a JSONL transcript, keyed by task.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    replies: HashMap<String, String>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptedReply>) -> Self {
        Self {
            replies: entries.into_iter().map(|e| (e.key, e.reply)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries: Vec<ScriptedReply> = crate::corpus::read_jsonl(path)?;
        let mut seen = std::collections::HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e.key.as_str()) {
                return Err(Error::Data {
                    path: path.to_owned(),
                    line: i + 1,
                    message: format!("duplicate key {:?}", e.key),
                });
            }
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest, ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError> {
        request.validate()?;
        self.replies
            .get(ctx.key())
            .cloned()
            .ok_or_else(|| BackendError::MissingTranscript(ctx.key().to_owned()))
    }
}

/// Wraps a backend and keeps every reply under its task key, so a run can
/// be replayed later through [`ScriptedBackend`].
pub struct Recorder<B> {
    inner: B,
    log: Mutex<Vec<ScriptedReply>>,
}

impl<B: LlmBackend> Recorder<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Recorded replies sorted by key; a repeated key keeps its last reply.
    pub fn into_replies(self) -> Vec<ScriptedReply> {
        let log = self.log.into_inner().unwrap_or_else(|e| e.into_inner());
        let map: std::collections::BTreeMap<String, String> = log.into_iter().map(|r| (r.key, r.reply)).collect();
        map.into_iter().map(|(key, reply)| ScriptedReply { key, reply }).collect()
    }
}

impl<B: LlmBackend> LlmBackend for Recorder<B> {
    fn complete(&self, request: &ChatRequest, ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError> {
        let reply = self.inner.complete(request, ctx)?;
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(ScriptedReply {
            key: ctx.key().to_owned(),
            reply: reply.clone(),
        });
        Ok(reply)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for &B {
    fn complete(&self, request: &ChatRequest, ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError> {
        (**self).complete(request, ctx)
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, request: &ChatRequest, ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError> {
        (**self).complete(request, ctx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Runs `op` until it succeeds, fails with a non-retryable error, or
    /// the attempt budget runs out, doubling the delay between attempts.
    pub fn run<T>(&self, mut op: impl FnMut() -> std::result::Result<T, BackendError>) -> std::result::Result<T, BackendError> {
        let mut delay = self.base_delay;
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts.max(1) => {
                    log::warn!("attempt {attempt} failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay = (delay * 2).min(self.max_delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    in_flight: Semaphore,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
        max_in_flight: usize,
    ) -> std::result::Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Connection {
                endpoint: endpoint.to_owned(),
                message: e.to_string(),
            })?;
        Ok(Self {
            endpoint: endpoint.to_owned(),
            model: model.to_owned(),
            api_key,
            client,
            retry,
            in_flight: Semaphore::new(max_in_flight.max(1)),
        })
    }

    fn attempt(&self, request: &ChatRequest) -> std::result::Result<String, BackendError> {
        let endpoint = || self.endpoint.clone();
        let mut builder = self.client.post(&self.endpoint).json(&WireRequest {
            model: &self.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        });
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { endpoint: endpoint() }
            } else {
                BackendError::Connection {
                    endpoint: endpoint(),
                    message: e.to_string(),
                }
            }
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout { endpoint: endpoint() }
            } else {
                BackendError::Connection {
                    endpoint: endpoint(),
                    message: e.to_string(),
                }
            }
        })?;
        if !status.is_success() {
            let mut body = text;
            body.truncate(body.char_indices().nth(300).map_or(body.len(), |(i, _)| i));
            return Err(BackendError::Status {
                endpoint: endpoint(),
                status: status.as_u16(),
                body,
            });
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| BackendError::MalformedBody {
            endpoint: endpoint(),
            message: e.to_string(),
        })?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedBody {
                endpoint: endpoint(),
                message: "no choices[0].message.content".into(),
            })
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest, _ctx: &TaskContext<'_>) -> std::result::Result<String, BackendError> {
        request.validate()?;
        let _permit = self.in_flight.acquire();
        self.retry.run(|| self.attempt(request))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Oracle,
    Scripted,
    Heuristic,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Http => "http",
            Self::Oracle => "oracle",
            Self::Scripted => "scripted",
            Self::Heuristic => "heuristic",
        }
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Http, Self::Oracle, Self::Scripted, Self::Heuristic]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown backend {s:?}; expected http, oracle, scripted or heuristic")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_attempts() -> u32 {
    4
}

fn default_backoff() -> u64 {
    500
}

fn default_in_flight() -> usize {
    4
}

impl BackendSpec {
    pub fn local(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model: None,
            api_key_env: None,
            transcript: None,
            timeout_secs: default_timeout(),
            max_attempts: default_attempts(),
            backoff_ms: default_backoff(),
            max_in_flight: default_in_flight(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let need = |field: &str, present: bool| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("{:?} backend requires `{field}`", self.kind)))
            }
        };
        match self.kind {
            BackendKind::Http => {
                need("endpoint", self.endpoint.is_some())?;
                need("model", self.model.is_some())?;
                if self.timeout_secs.is_nan() || self.timeout_secs <= 0.0 {
                    return Err(Error::Config("timeout_secs must be positive".into()));
                }
                if self.max_attempts == 0 {
                    return Err(Error::Config("max_attempts must be at least 1".into()));
                }
                Ok(())
            }
            BackendKind::Scripted => need("transcript", self.transcript.is_some()),
            BackendKind::Oracle | BackendKind::Heuristic => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn LlmBackend>> {
        self.validate()?;
        Ok(match self.kind {
            BackendKind::Heuristic => Box::new(HeuristicBackend),
            BackendKind::Oracle => Box::new(OracleBackend),
            BackendKind::Scripted => Box::new(ScriptedBackend::load(self.transcript.as_deref().expect("validated"))?),
            BackendKind::Http => {
                let api_key = match &self.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredential(var.clone()))?),
                    None => None,
                };
                Box::new(HttpBackend::new(
                    self.endpoint.as_deref().expect("validated"),
                    self.model.as_deref().expect("validated"),
                    api_key,
                    Duration::from_secs_f64(self.timeout_secs),
                    RetryPolicy {
                        max_attempts: self.max_attempts,
                        base_delay: Duration::from_millis(self.backoff_ms),
                        ..RetryPolicy::default()
                    },
                    self.max_in_flight,
                )?)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoising::parse_rationale_answer;
    use crate::ne_index::{Candidate, NamedEntityRecord};
    use crate::phonetics::embedded_lexicon;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn mcq(ps: &[f64]) -> McqItem {
        let cands: Vec<Candidate> = ps
            .iter()
            .enumerate()
            .map(|(i, &ps)| Candidate {
                record: NamedEntityRecord::new(&format!("Name{i}"), "", "", embedded_lexicon()),
                ps,
            })
            .collect();
        McqItem::new("x [BLANK]", &cands).unwrap()
    }

    fn req() -> ChatRequest {
        ChatRequest::user("prompt", &GenParams::default())
    }

    #[test]
    fn heuristic_picks_argmax() {
        let m = mcq(&[0.3, 0.9, 0.5]);
        let reply = HeuristicBackend.complete(&req(), &TaskContext::Mcq { key: "k", mcq: &m }).unwrap();
        assert_eq!(reply, "<think>fallback: highest phonetic score</think><answer>B: Name1</answer>");
    }

    #[test]
    fn heuristic_prefers_database_entries() {
        let mut m = mcq(&[1.0, 0.8, 0.5]);
        m.options[0].1.record.source = crate::denoising::HYPOTHESIS_SOURCE.into();
        let reply = HeuristicBackend.complete(&req(), &TaskContext::Mcq { key: "k", mcq: &m }).unwrap();
        assert!(reply.ends_with("<answer>B: Name1</answer>"));
    }

    #[test]
    fn oracle_picks_gold() {
        let mut m = mcq(&[0.3, 0.9, 0.5]);
        m.gold_letter = Some('C');
        let reply = OracleBackend.complete(&req(), &TaskContext::Mcq { key: "k", mcq: &m }).unwrap();
        assert_eq!(parse_rationale_answer(&reply, &m).unwrap().letter, 'C');
    }

    #[test]
    fn local_rationales_parse() {
        let m = mcq(&[0.3, 0.9, 0.5]);
        for answer in ['A', 'B', 'C'] {
            let ctx = TaskContext::Rationale { key: "k", mcq: &m, answer };
            for b in [&HeuristicBackend as &dyn LlmBackend, &OracleBackend] {
                let reply = b.complete(&req(), &ctx).unwrap();
                assert!(reply.contains("<think>") && reply.contains("</think>"));
                assert_eq!(parse_rationale_answer(&reply, &m).unwrap().letter, answer);
            }
        }
    }

    #[test]
    fn gec_rules() {
        let h1 = "play songs by adel";
        let span = EntitySpan::over(h1, 3, 4).unwrap();
        let hyps = vec![h1.to_string(); 5];
        let entities = vec!["Adele".to_string()];
        let gold = vec!["Adele".to_string()];
        let ctx = GecContext {
            key: "s:gec",
            h1,
            hypotheses: &hyps,
            edit: Some((&span, "Adele")),
            entities: &entities,
            reference: Some("play songs by Adele please"),
            gold: &gold,
        };
        let h = HeuristicBackend.complete(&req(), &TaskContext::Gec(ctx)).unwrap();
        assert_eq!(h, "play songs by Adele");
        let o = OracleBackend.complete(&req(), &TaskContext::Gec(ctx)).unwrap();
        assert_eq!(o, "play songs by Adele please");
        let plain = GecContext {
            edit: None,
            entities: &[],
            ..ctx
        };
        assert_eq!(HeuristicBackend.complete(&req(), &TaskContext::Gec(plain)).unwrap(), h1);
        assert_eq!(OracleBackend.complete(&req(), &TaskContext::Gec(plain)).unwrap(), h1);
    }

    #[test]
    fn scripted_replays_and_reports_missing() {
        let b = ScriptedBackend::new([ScriptedReply {
            key: "a:0".into(),
            reply: "r".into(),
        }]);
        let m = mcq(&[0.5]);
        assert_eq!(b.complete(&req(), &TaskContext::Mcq { key: "a:0", mcq: &m }).unwrap(), "r");
        assert!(matches!(
            b.complete(&req(), &TaskContext::Mcq { key: "a:1", mcq: &m }),
            Err(BackendError::MissingTranscript(k)) if k == "a:1"
        ));
    }

    #[test]
    fn recorder_round_trip() {
        let rec = Recorder::new(HeuristicBackend);
        let m = mcq(&[0.2, 0.4]);
        let first = rec.complete(&req(), &TaskContext::Mcq { key: "s:0", mcq: &m }).unwrap();
        let replay = ScriptedBackend::new(rec.into_replies());
        assert_eq!(replay.complete(&req(), &TaskContext::Mcq { key: "s:0", mcq: &m }).unwrap(), first);
    }

    #[test]
    fn request_validation() {
        let mut r = req();
        r.messages[0].role = Role::System;
        assert!(r.validate().is_err());
        let mut r = req();
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(BackendSpec::local(BackendKind::Http).validate().is_err());
        assert!(BackendSpec::local(BackendKind::Scripted).validate().is_err());
        assert!(BackendSpec::local(BackendKind::Heuristic).build().is_ok());
        let mut s = BackendSpec::local(BackendKind::Http);
        s.endpoint = Some("http://127.0.0.1:9".into());
        s.model = Some("m".into());
        s.api_key_env = Some("DERAGEC_TEST_SURELY_UNSET_VAR".into());
        assert!(matches!(s.build(), Err(Error::Backend(BackendError::MissingCredential(_)))));
    }

    /// Serves canned HTTP responses, counting requests.
    fn serve(responses: Vec<(u16, &'static str)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else { return };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut buf = Vec::new();
                let mut chunk = [0u8; 4096];
                loop {
                    let n = stream.read(&mut chunk).unwrap_or(0);
                    if n == 0 {
                        break;
                    }
                    buf.extend_from_slice(&chunk[..n]);
                    let text = String::from_utf8_lossy(&buf);
                    if let Some(head_end) = text.find("\r\n\r\n") {
                        let len = text[..head_end]
                            .lines()
                            .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                            .unwrap_or(0);
                        if buf.len() >= head_end + 4 + len {
                            break;
                        }
                    }
                }
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (format!("http://{addr}/v1/chat/completions"), hits)
    }

    fn http(endpoint: &str, attempts: u32) -> HttpBackend {
        let retry = RetryPolicy {
            max_attempts: attempts,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(4),
        };
        HttpBackend::new(endpoint, "m", Some("secret".into()), Duration::from_secs(5), retry, 2).unwrap()
    }

    fn gec_ctx() -> TaskContext<'static> {
        TaskContext::Gec(GecContext {
            key: "k",
            h1: "",
            hypotheses: &[],
            edit: None,
            entities: &[],
            reference: None,
            gold: &[],
        })
    }

    const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}]}"#;

    #[test]
    fn http_reads_first_choice() {
        let (url, hits) = serve(vec![(200, OK)]);
        assert_eq!(http(&url, 3).complete(&req(), &gec_ctx()).unwrap(), "hello");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn http_retries_server_errors() {
        let (url, hits) = serve(vec![(500, "{}"), (429, "{}"), (200, OK)]);
        assert_eq!(http(&url, 3).complete(&req(), &gec_ctx()).unwrap(), "hello");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_fails_fast_on_auth_error() {
        let (url, hits) = serve(vec![(401, "{\"error\":\"bad key\"}"), (200, OK)]);
        match http(&url, 5).complete(&req(), &gec_ctx()) {
            Err(BackendError::Status { status: 401, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn http_malformed_body() {
        let (url, _) = serve(vec![(200, "{\"choices\":[]}")]);
        assert!(matches!(
            http(&url, 1).complete(&req(), &gec_ctx()),
            Err(BackendError::MalformedBody { .. })
        ));
    }

    #[test]
    fn retry_stops_at_cap() {
        let calls = AtomicUsize::new(0);
        let policy = RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(1),
        };
        let out: std::result::Result<(), _> = policy.run(|| {
            calls.fetch_add(1, Ordering::SeqCst);
            Err(BackendError::Timeout { endpoint: "e".into() })
        });
        assert!(matches!(out, Err(BackendError::Timeout { .. })));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn backend_kind_names_round_trip() {
        for kind in [BackendKind::Http, BackendKind::Oracle, BackendKind::Scripted, BackendKind::Heuristic] {
            assert_eq!(kind.to_string().parse::<BackendKind>().unwrap(), kind);
            assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{kind}\""));
        }
        assert!("gpt".parse::<BackendKind>().is_err());
    }
}
