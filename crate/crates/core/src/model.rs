//! Foundation-model abstraction: signatures, prompts, pluggable backends,
//! and a registry that hands out handles with retry and failover.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{MediaKind, MediaRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

impl FromStr for Modality {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "audio" => Ok(Modality::Audio),
            other => Err(ModelError::BadSignature(format!("unknown modality {other:?}"))),
        }
    }
}

impl From<MediaKind> for Modality {
    fn from(k: MediaKind) -> Self {
        match k {
            MediaKind::Image => Modality::Image,
            MediaKind::Audio => Modality::Audio,
        }
    }
}

/// Input/output type signature, written `a+b->c` with inputs sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModelSignature {
    inputs: BTreeSet<Modality>,
    output: Modality,
}

impl ModelSignature {
    pub fn new(inputs: impl IntoIterator<Item = Modality>, output: Modality) -> Result<Self, ModelError> {
        let inputs: BTreeSet<_> = inputs.into_iter().collect();
        if inputs.is_empty() {
            return Err(ModelError::BadSignature("signature needs at least one input".into()));
        }
        if output != Modality::Text {
            return Err(ModelError::BadSignature(format!("output must be text, got {}", output.as_str())));
        }
        Ok(ModelSignature { inputs, output })
    }

    pub fn inputs(&self) -> &BTreeSet<Modality> {
        &self.inputs
    }

    pub fn output(&self) -> Modality {
        self.output
    }

    pub fn accepts(&self, m: Modality) -> bool {
        m == Modality::Text || self.inputs.contains(&m)
    }
}

impl FromStr for ModelSignature {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lhs, rhs) = s
            .split_once("->")
            .ok_or_else(|| ModelError::BadSignature(format!("{s:?} is not of the form in->out")))?;
        let inputs = lhs.split('+').map(Modality::from_str).collect::<Result<Vec<_>, _>>()?;
        ModelSignature::new(inputs, rhs.parse()?)
    }
}

impl fmt::Display for ModelSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<_> = self.inputs.iter().map(|m| m.as_str()).collect();
        write!(f, "{}->{}", ins.join("+"), self.output.as_str())
    }
}

impl Serialize for ModelSignature {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelSignature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PromptPart {
    Text { text: String },
    Media { kind: MediaKind, locator: String },
}

/// Ordered multi-modal prompt.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prompt {
    pub parts: Vec<PromptPart>,
}

impl Prompt {
    pub fn text(s: impl Into<String>) -> Self {
        Prompt { parts: vec![PromptPart::Text { text: s.into() }] }
    }

    /// Appends text, merging with a trailing text part.
    pub fn push_text(&mut self, s: &str) {
        if s.is_empty() {
            return;
        }
        if let Some(PromptPart::Text { text }) = self.parts.last_mut() {
            text.push_str(s);
        } else {
            self.parts.push(PromptPart::Text { text: s.to_string() });
        }
    }

    pub fn push_media(&mut self, m: &MediaRef) {
        self.parts.push(PromptPart::Media { kind: m.kind, locator: m.locator.clone() });
    }

    /// Flat text used for rule matching and logging; media shows as `[kind:locator]`.
    pub fn rendered_text(&self) -> String {
        let mut out = String::new();
        for p in &self.parts {
            match p {
                PromptPart::Text { text } => out.push_str(text),
                PromptPart::Media { kind, locator } => {
                    out.push_str(&format!("[{kind}:{locator}]"));
                }
            }
        }
        out
    }

    pub fn media_kinds(&self) -> impl Iterator<Item = MediaKind> + '_ {
        self.parts.iter().filter_map(|p| match p {
            PromptPart::Media { kind, .. } => Some(*kind),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Transport failure, 5xx or rate limiting. Eligible for retry.
    #[error("transient backend error: {0}")]
    Transient(String),
    #[error("backend error: {0}")]
    Fatal(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(s: impl Into<String>) -> Self {
        Completion { text: s.into(), prompt_tokens: None, completion_tokens: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryOptions {
    pub temperature: Option<f32>,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn supports(&self, signature: &ModelSignature) -> bool;
    fn complete(&self, prompt: &Prompt, opts: &QueryOptions) -> Result<Completion, BackendError>;

    /// True when identical prompts always produce identical completions.
    fn deterministic(&self) -> bool {
        false
    }

    /// Whether the backend can take several prompts in one request.
    fn supports_batching(&self) -> bool {
        false
    }

    fn complete_batch(&self, prompts: &[Prompt], opts: &QueryOptions) -> Vec<Result<Completion, BackendError>> {
        prompts.iter().map(|p| self.complete(p, opts)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Substring,
    Regex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    #[serde(rename = "match")]
    pub pattern: String,
    #[serde(default = "default_match_kind")]
    pub kind: MatchKind,
    pub response: String,
}

fn default_match_kind() -> MatchKind {
    MatchKind::Substring
}

/// JSON-loadable rule set for [`ScriptedBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScriptedRules {
    #[serde(default)]
    pub rules: Vec<RuleSpec>,
    #[serde(default)]
    pub default: String,
}

impl ScriptedRules {
    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))
    }
}

enum Matcher {
    Substring(String),
    Regex(Regex),
}

/// Deterministic test double: the first rule matching the rendered prompt wins.
pub struct ScriptedBackend {
    id: String,
    rules: Vec<(Matcher, String)>,
    default: String,
    modalities: BTreeSet<Modality>,
}

impl ScriptedBackend {
    pub fn new(id: impl Into<String>, rules: &ScriptedRules) -> Result<Self, ModelError> {
        let compiled = rules
            .rules
            .iter()
            .map(|r| {
                let m = match r.kind {
                    MatchKind::Substring => Matcher::Substring(r.pattern.clone()),
                    MatchKind::Regex => Matcher::Regex(
                        Regex::new(&r.pattern).map_err(|e| ModelError::Config(format!("bad rule regex: {e}")))?,
                    ),
                };
                Ok((m, r.response.clone()))
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(ScriptedBackend {
            id: id.into(),
            rules: compiled,
            default: rules.default.clone(),
            modalities: [Modality::Text, Modality::Image, Modality::Audio].into_iter().collect(),
        })
    }

    /// Restricts the input modalities this backend claims to support.
    pub fn with_modalities(mut self, modalities: impl IntoIterator<Item = Modality>) -> Self {
        self.modalities = modalities.into_iter().collect();
        self
    }

    pub fn respond(&self, text: &str) -> &str {
        for (m, resp) in &self.rules {
            let hit = match m {
                Matcher::Substring(s) => text.contains(s.as_str()),
                Matcher::Regex(r) => r.is_match(text),
            };
            if hit {
                return resp;
            }
        }
        &self.default
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports(&self, signature: &ModelSignature) -> bool {
        signature.inputs().iter().all(|m| self.modalities.contains(m))
    }

    fn complete(&self, prompt: &Prompt, _opts: &QueryOptions) -> Result<Completion, BackendError> {
        Ok(Completion::text(self.respond(&prompt.rendered_text())))
    }

    fn deterministic(&self) -> bool {
        true
    }
}

/// OpenAI-compatible chat-completions backend.
pub struct HttpBackend {
    id: String,
    base_url: String,
    model: String,
    api_key_env: Option<String>,
    modalities: BTreeSet<Modality>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, ModelError> {
        let base_url = cfg
            .base_url
            .clone()
            .ok_or_else(|| ModelError::Config(format!("backend {} needs base_url", cfg.id)))?;
        let model = cfg.model.clone().ok_or_else(|| ModelError::Config(format!("backend {} needs model", cfg.id)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.unwrap_or(120)))
            .build()
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(HttpBackend {
            id: cfg.id.clone(),
            base_url: base_url.trim_end_matches('/').to_string(),
            model,
            api_key_env: cfg.api_key_env.clone(),
            modalities: cfg.modality_set(),
            client,
        })
    }

    /// Builds the request body for one prompt.
    pub fn request_body(&self, prompt: &Prompt, opts: &QueryOptions) -> Result<serde_json::Value, BackendError> {
        let mut content = Vec::new();
        for part in &prompt.parts {
            content.push(match part {
                PromptPart::Text { text } => serde_json::json!({"type": "text", "text": text}),
                PromptPart::Media { kind: MediaKind::Image, locator } => {
                    serde_json::json!({"type": "image_url", "image_url": {"url": image_url(locator)?}})
                }
                PromptPart::Media { kind: MediaKind::Audio, locator } => {
                    let data = std::fs::read(locator)
                        .map_err(|e| BackendError::Fatal(format!("cannot read audio {locator}: {e}")))?;
                    let format = Path::new(locator).extension().and_then(|e| e.to_str()).unwrap_or("wav");
                    serde_json::json!({"type": "input_audio", "input_audio": {
                        "data": base64::engine::general_purpose::STANDARD.encode(data),
                        "format": format,
                    }})
                }
            });
        }
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "stream": false,
        });
        if let Some(t) = opts.temperature {
            body["temperature"] = serde_json::json!(t);
        }
        Ok(body)
    }
}

fn image_url(locator: &str) -> Result<String, BackendError> {
    if locator.starts_with("http://") || locator.starts_with("https://") || locator.starts_with("data:") {
        return Ok(locator.to_string());
    }
    let data = std::fs::read(locator).map_err(|e| BackendError::Fatal(format!("cannot read image {locator}: {e}")))?;
    let mime = match Path::new(locator).extension().and_then(|e| e.to_str()) {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(data)))
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    #[serde(default)]
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn supports(&self, signature: &ModelSignature) -> bool {
        signature.inputs().iter().all(|m| self.modalities.contains(m))
    }

    fn complete(&self, prompt: &Prompt, opts: &QueryOptions) -> Result<Completion, BackendError> {
        let body = self.request_body(prompt, opts)?;
        let mut req = self.client.post(format!("{}/chat/completions", self.base_url)).json(&body);
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var).map_err(|_| BackendError::Fatal(format!("environment variable {var} not set")))?;
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| BackendError::Fatal(format!("bad response body: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("response has no message content".into()))?;
        let (prompt_tokens, completion_tokens) =
            parsed.usage.map(|u| (u.prompt_tokens, u.completion_tokens)).unwrap_or((None, None));
        Ok(Completion { text, prompt_tokens, completion_tokens })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 2, base_delay_ms: 250 }
    }
}

impl RetryPolicy {
    pub fn no_delay() -> Self {
        RetryPolicy { base_delay_ms: 0, ..Default::default() }
    }

    fn delay(&self, retry: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << retry.min(16)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptFailure {
    pub backend: String,
    pub error: String,
}

/// One line of the append-only query log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub seq: u64,
    pub signature: String,
    pub backend: Option<String>,
    pub ok: bool,
    pub latency_ms: f64,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub failures: Vec<AttemptFailure>,
}

#[derive(Default)]
pub struct QueryLog {
    records: Mutex<Vec<QueryRecord>>,
}

impl QueryLog {
    fn push(&self, mut rec: QueryRecord) {
        let mut g = self.records.lock().expect("query log poisoned");
        rec.seq = g.len() as u64;
        g.push(rec);
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("query log poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<QueryRecord> {
        self.records.lock().expect("query log poisoned").clone()
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("BAD_SIGNATURE: {0}")]
    BadSignature(String),
    #[error("UNSUPPORTED_SIGNATURE: no backend supports {0}")]
    UnsupportedSignature(String),
    #[error("SIGNATURE_MISMATCH: prompt contains {found} input but handle is {signature}")]
    SignatureMismatch { signature: String, found: String },
    #[error("ALL_BACKENDS_FAILED: {}", .0.iter().map(|f| format!("{}: {}", f.backend, f.error)).collect::<Vec<_>>().join("; "))]
    AllBackendsFailed(Vec<AttemptFailure>),
    #[error("EMPTY_PROMPT: prompt has no parts")]
    EmptyPrompt,
    #[error("model config error: {0}")]
    Config(String),
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::BadSignature(_) => "BAD_SIGNATURE",
            ModelError::UnsupportedSignature(_) => "UNSUPPORTED_SIGNATURE",
            ModelError::SignatureMismatch { .. } => "SIGNATURE_MISMATCH",
            ModelError::AllBackendsFailed(_) => "ALL_BACKENDS_FAILED",
            ModelError::EmptyPrompt => "EMPTY_PROMPT",
            ModelError::Config(_) => "CONFIG_ERROR",
        }
    }
}

#[derive(Clone)]
struct Registered {
    backend: Arc<dyn Backend>,
    priority: i32,
}

/// Set of backends ordered by priority, plus the shared query log.
#[derive(Clone)]
pub struct ModelRegistry {
    backends: Vec<Registered>,
    retry: RetryPolicy,
    log: Arc<QueryLog>,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::new(RetryPolicy::default())
    }
}

impl ModelRegistry {
    pub fn new(retry: RetryPolicy) -> Self {
        ModelRegistry { backends: Vec::new(), retry, log: Arc::new(QueryLog::default()) }
    }

    /// Registry with a single scripted backend and no retry delay.
    pub fn scripted(rules: &ScriptedRules) -> Result<Self, ModelError> {
        let mut r = ModelRegistry::new(RetryPolicy::no_delay());
        r.register(Arc::new(ScriptedBackend::new("scripted", rules)?), 0);
        Ok(r)
    }

    /// Adds a backend; higher priority wins, ties keep registration order.
    pub fn register(&mut self, backend: Arc<dyn Backend>, priority: i32) {
        let pos = self.backends.iter().position(|r| r.priority < priority).unwrap_or(self.backends.len());
        self.backends.insert(pos, Registered { backend, priority });
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends.iter().map(|r| r.backend.id().to_string()).collect()
    }

    pub fn log(&self) -> &Arc<QueryLog> {
        &self.log
    }

    pub fn retry_policy(&self) -> &RetryPolicy {
        &self.retry
    }

    pub fn get_fm(&self, signature: &ModelSignature) -> Result<ModelHandle, ModelError> {
        let chain: Vec<Arc<dyn Backend>> = self
            .backends
            .iter()
            .filter(|r| r.backend.supports(signature))
            .map(|r| r.backend.clone())
            .collect();
        if chain.is_empty() {
            return Err(ModelError::UnsupportedSignature(signature.to_string()));
        }
        Ok(ModelHandle {
            signature: signature.clone(),
            chain: Arc::new(chain),
            retry: self.retry.clone(),
            log: self.log.clone(),
        })
    }

    pub fn from_config(cfg: &RegistryConfig, base_dir: &Path) -> Result<Self, ModelError> {
        let mut reg = ModelRegistry::new(cfg.retry.clone());
        for b in &cfg.backends {
            let backend: Arc<dyn Backend> = match b.kind {
                BackendKind::Scripted => {
                    let rules = match (&b.rules_file, &b.rules) {
                        (Some(f), _) => ScriptedRules::from_file(&base_dir.join(f))?,
                        (None, Some(r)) => r.clone(),
                        (None, None) => ScriptedRules::default(),
                    };
                    Arc::new(ScriptedBackend::new(b.id.clone(), &rules)?.with_modalities(b.modality_set()))
                }
                BackendKind::Http => Arc::new(HttpBackend::new(b)?),
            };
            reg.register(backend, b.priority);
        }
        Ok(reg)
    }

    /// Restricts the registry to one backend id, keeping the log.
    pub fn only(&self, id: &str) -> Result<Self, ModelError> {
        let picked: Vec<Registered> = self.backends.iter().filter(|r| r.backend.id() == id).cloned().collect();
        if picked.is_empty() {
            return Err(ModelError::Config(format!("no backend with id {id:?}")));
        }
        Ok(ModelRegistry { backends: picked, retry: self.retry.clone(), log: self.log.clone() })
    }
}

/// A model obtained by signature. Cheap to clone and share across threads.
#[derive(Clone)]
pub struct ModelHandle {
    signature: ModelSignature,
    chain: Arc<Vec<Arc<dyn Backend>>>,
    retry: RetryPolicy,
    log: Arc<QueryLog>,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("signature", &self.signature.to_string())
            .field("chain", &self.fallback_chain())
            .finish()
    }
}

impl ModelHandle {
    pub fn signature(&self) -> &ModelSignature {
        &self.signature
    }

    /// Primary backend id.
    pub fn backend_id(&self) -> &str {
        self.chain[0].id()
    }

    pub fn is_deterministic(&self) -> bool {
        self.chain.iter().all(|b| b.deterministic())
    }

    pub fn fallback_chain(&self) -> Vec<String> {
        self.chain.iter().map(|b| b.id().to_string()).collect()
    }

    pub fn query(&self, prompt: &Prompt) -> Result<String, ModelError> {
        self.query_with(prompt, &QueryOptions::default()).map(|c| c.text)
    }

    pub fn query_with(&self, prompt: &Prompt, opts: &QueryOptions) -> Result<Completion, ModelError> {
        let started = Instant::now();
        let mut record = QueryRecord {
            seq: 0,
            signature: self.signature.to_string(),
            backend: None,
            ok: false,
            latency_ms: 0.0,
            prompt_tokens: None,
            completion_tokens: None,
            failures: Vec::new(),
        };
        let result = self.dispatch(prompt, opts, &mut record);
        record.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
        if let Ok(c) = &result {
            record.ok = true;
            record.prompt_tokens = c.prompt_tokens;
            record.completion_tokens = c.completion_tokens;
        }
        self.log.push(record);
        result
    }

    fn dispatch(&self, prompt: &Prompt, opts: &QueryOptions, record: &mut QueryRecord) -> Result<Completion, ModelError> {
        if prompt.parts.is_empty() {
            return Err(ModelError::EmptyPrompt);
        }
        if let Some(bad) = prompt.media_kinds().find(|k| !self.signature.accepts((*k).into())) {
            return Err(ModelError::SignatureMismatch {
                signature: self.signature.to_string(),
                found: bad.as_str().to_string(),
            });
        }
        for backend in self.chain.iter() {
            let mut retry = 0;
            loop {
                match backend.complete(prompt, opts) {
                    Ok(c) => {
                        record.backend = Some(backend.id().to_string());
                        if !record.failures.is_empty() {
                            log::warn!(
                                "model query for {} failed over to {} after {} failed attempts",
                                self.signature,
                                backend.id(),
                                record.failures.len()
                            );
                        }
                        return Ok(c);
                    }
                    Err(e) => {
                        record.failures.push(AttemptFailure { backend: backend.id().to_string(), error: e.to_string() });
                        match e {
                            BackendError::Transient(_) if retry < self.retry.max_retries => {
                                std::thread::sleep(self.retry.delay(retry));
                                retry += 1;
                            }
                            _ => break,
                        }
                    }
                }
            }
        }
        Err(ModelError::AllBackendsFailed(record.failures.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Scripted,
    Http,
}

/// One backend entry of a registry config file. Secrets come only from
/// the environment variable named by `api_key_env`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub id: String,
    pub kind: BackendKind,
    #[serde(default)]
    pub priority: i32,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub rules_file: Option<String>,
    #[serde(default)]
    pub rules: Option<ScriptedRules>,
    #[serde(default)]
    pub modalities: Option<Vec<Modality>>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
}

impl BackendConfig {
    fn modality_set(&self) -> BTreeSet<Modality> {
        match &self.modalities {
            Some(m) => m.iter().copied().collect(),
            None => [Modality::Text, Modality::Image, Modality::Audio].into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryConfig {
    pub backends: Vec<BackendConfig>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl RegistryConfig {
    /// Loads TOML (`.toml`) or JSON (anything else).
    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))?;
        if path.extension().and_then(|e| e.to_str()) == Some("toml") {
            toml::from_str(&text).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| ModelError::Config(format!("{}: {e}", path.display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn rules(pairs: &[(&str, &str)]) -> ScriptedRules {
        ScriptedRules {
            rules: pairs
                .iter()
                .map(|(m, r)| RuleSpec { pattern: m.to_string(), kind: MatchKind::Substring, response: r.to_string() })
                .collect(),
            default: "unknown".into(),
        }
    }

    struct Flaky {
        id: &'static str,
        failures: u32,
        calls: AtomicU32,
        transient: bool,
    }

    impl Backend for Flaky {
        fn id(&self) -> &str {
            self.id
        }
        fn supports(&self, _: &ModelSignature) -> bool {
            true
        }
        fn complete(&self, _: &Prompt, _: &QueryOptions) -> Result<Completion, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                if self.transient {
                    Err(BackendError::Transient("connection reset".into()))
                } else {
                    Err(BackendError::Fatal("bad request".into()))
                }
            } else {
                Ok(Completion::text(format!("{} ok", self.id)))
            }
        }
    }

    #[test]
    fn signature_forms() {
        let s: ModelSignature = "image+audio->text".parse().unwrap();
        assert_eq!(s.to_string(), "audio+image->text");
        assert!("video->text".parse::<ModelSignature>().is_err());
        assert!("text->image".parse::<ModelSignature>().is_err());
        assert!("->text".parse::<ModelSignature>().is_err());
        assert!("text".parse::<ModelSignature>().is_err());
    }

    #[test]
    fn get_fm_by_signature() {
        let reg = ModelRegistry::scripted(&rules(&[])).unwrap();
        assert_eq!(reg.get_fm(&"image->text".parse().unwrap()).unwrap().backend_id(), "scripted");
        assert!(reg.get_fm(&"text->text".parse().unwrap()).is_ok());

        let mut text_only = ModelRegistry::new(RetryPolicy::no_delay());
        text_only.register(
            Arc::new(ScriptedBackend::new("t", &rules(&[])).unwrap().with_modalities([Modality::Text])),
            0,
        );
        let err = text_only.get_fm(&"audio+image->text".parse().unwrap()).unwrap_err();
        assert_eq!(err.code(), "UNSUPPORTED_SIGNATURE");
    }

    #[test]
    fn priority_orders_chain() {
        let mut reg = ModelRegistry::new(RetryPolicy::no_delay());
        reg.register(Arc::new(ScriptedBackend::new("low", &rules(&[])).unwrap()), 1);
        reg.register(Arc::new(ScriptedBackend::new("high", &rules(&[])).unwrap()), 5);
        reg.register(Arc::new(ScriptedBackend::new("text", &rules(&[])).unwrap().with_modalities([Modality::Text])), 9);
        let h = reg.get_fm(&"image->text".parse().unwrap()).unwrap();
        assert_eq!(h.fallback_chain(), vec!["high", "low"]);
        let t = reg.get_fm(&"text->text".parse().unwrap()).unwrap();
        assert_eq!(t.fallback_chain(), vec!["text", "high", "low"]);
    }

    #[test]
    fn scripted_first_match_and_mismatch() {
        let reg = ModelRegistry::scripted(&rules(&[("describe", "a dog"), ("desc", "never")])).unwrap();
        let h = reg.get_fm(&"text->text".parse().unwrap()).unwrap();
        assert_eq!(h.query(&Prompt::text("describe: a photo")).unwrap(), "a dog");
        assert_eq!(h.query(&Prompt::text("hello")).unwrap(), "unknown");

        let mut p = Prompt::text("describe: ");
        p.push_media(&MediaRef { kind: MediaKind::Image, locator: "cam/1.png".into() });
        let err = h.query(&p).unwrap_err();
        assert_eq!(err.code(), "SIGNATURE_MISMATCH");
        // every call, including the failed one, is logged exactly once
        assert_eq!(reg.log().len(), 3);
    }

    #[test]
    fn scripted_is_pure() {
        let reg = ModelRegistry::scripted(&rules(&[("a", "x")])).unwrap();
        let h = reg.get_fm(&"text->text".parse().unwrap()).unwrap();
        let p = Prompt::text("banana");
        let first = h.query(&p).unwrap();
        assert!((0..50).all(|_| h.query(&p).unwrap() == first));
    }

    #[test]
    fn failover_after_transient_errors() {
        let mut reg = ModelRegistry::new(RetryPolicy::no_delay());
        reg.register(Arc::new(Flaky { id: "primary", failures: 100, calls: AtomicU32::new(0), transient: true }), 10);
        reg.register(Arc::new(Flaky { id: "secondary", failures: 0, calls: AtomicU32::new(0), transient: true }), 1);
        let h = reg.get_fm(&"text->text".parse().unwrap()).unwrap();
        assert_eq!(h.query(&Prompt::text("hi")).unwrap(), "secondary ok");
        let log = reg.log().snapshot();
        assert_eq!(log.len(), 1);
        // 1 initial attempt + 2 retries on the primary
        assert_eq!(log[0].failures.len(), 3);
        assert!(log[0].failures.iter().all(|f| f.backend == "primary"));
        assert_eq!(log[0].backend.as_deref(), Some("secondary"));
    }

    #[test]
    fn retry_recovers_on_same_backend() {
        let mut reg = ModelRegistry::new(RetryPolicy::no_delay());
        reg.register(Arc::new(Flaky { id: "primary", failures: 2, calls: AtomicU32::new(0), transient: true }), 10);
        reg.register(Arc::new(Flaky { id: "secondary", failures: 0, calls: AtomicU32::new(0), transient: true }), 1);
        let h = reg.get_fm(&"text->text".parse().unwrap()).unwrap();
        assert_eq!(h.query(&Prompt::text("hi")).unwrap(), "primary ok");
    }

    #[test]
    fn fatal_errors_skip_retries_and_all_failed() {
        let mut reg = ModelRegistry::new(RetryPolicy::no_delay());
        reg.register(Arc::new(Flaky { id: "a", failures: 100, calls: AtomicU32::new(0), transient: false }), 1);
        reg.register(Arc::new(Flaky { id: "b", failures: 100, calls: AtomicU32::new(0), transient: true }), 0);
        let h = reg.get_fm(&"text->text".parse().unwrap()).unwrap();
        let err = h.query(&Prompt::text("hi")).unwrap_err();
        assert_eq!(err.code(), "ALL_BACKENDS_FAILED");
        let log = reg.log().snapshot();
        assert_eq!(log[0].failures.len(), 1 + 3);
        assert!(!log[0].ok);
    }

    #[test]
    fn config_rejects_inline_keys() {
        let bad = r#"{"backends":[{"id":"x","kind":"http","api_key":"sk-123"}]}"#;
        assert!(serde_json::from_str::<RegistryConfig>(bad).is_err());
        let good = r#"
            [[backends]]
            id = "s"
            kind = "scripted"
            priority = 2
            rules = { rules = [{ match = "hi", response = "yo" }], default = "?" }
        "#;
        let cfg: RegistryConfig = toml::from_str(good).unwrap();
        let reg = ModelRegistry::from_config(&cfg, Path::new(".")).unwrap();
        let h = reg.get_fm(&"text->text".parse().unwrap()).unwrap();
        assert_eq!(h.query(&Prompt::text("hi there")).unwrap(), "yo");
        assert_eq!(cfg.retry, RetryPolicy::default());
    }

    #[test]
    fn http_request_body_shape() {
        let cfg = BackendConfig {
            id: "h".into(),
            kind: BackendKind::Http,
            priority: 0,
            base_url: Some("http://localhost:1/v1/".into()),
            model: Some("m".into()),
            api_key_env: None,
            rules_file: None,
            rules: None,
            modalities: None,
            timeout_secs: None,
        };
        let b = HttpBackend::new(&cfg).unwrap();
        let mut p = Prompt::text("describe: ");
        p.push_media(&MediaRef { kind: MediaKind::Image, locator: "https://x/y.png".into() });
        let body = b.request_body(&p, &QueryOptions { temperature: Some(0.5) }).unwrap();
        assert_eq!(body["messages"][0]["content"][0]["text"], "describe: ");
        assert_eq!(body["messages"][0]["content"][1]["image_url"]["url"], "https://x/y.png");
        assert_eq!(body["temperature"], 0.5);
    }
}
