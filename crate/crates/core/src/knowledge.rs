//! Knowledge decomposition: clinical definitions are rendered into a
//! distillation prompt, sent to a completion endpoint for N candidate visual
//! descriptions, and one candidate per class is selected into the prompt
//! dictionary.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{LazyLock, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::class_key;
use crate::promptgen::{Attribute, Lexicons};

pub const ENV_LLM_URL: &str = "ATTRGROUND_LLM_URL";
pub const ENV_LLM_KEY: &str = "ATTRGROUND_LLM_KEY";
pub const ENV_LLM_MODEL: &str = "ATTRGROUND_LLM_MODEL";

const MIN_CANDIDATE_WORDS: usize = 5;

const REFUSAL_PHRASES: [&str; 8] = [
    "i'm sorry",
    "i am sorry",
    "i cannot",
    "i can't",
    "i am unable",
    "i'm unable",
    "as an ai",
    "cannot provide",
];

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid definition: {0}")]
    InvalidDefinition(String),
    #[error("duplicate class {0:?} in definition store")]
    DuplicateClass(String),
    #[error("class {class_name:?}: {source}")]
    Llm {
        class_name: String,
        #[source]
        source: LlmError,
    },
    #[error("class {class_name:?}: all {requested} completions were unusable")]
    NoUsableCandidates { class_name: String, requested: usize },
    #[error("no candidate pool for class {0:?}")]
    UnknownClass(String),
    #[error("index {index} out of range for pool of {len} candidates (valid 0..={})", .len.saturating_sub(1))]
    IndexOutOfRange { index: usize, len: usize },
    #[error("no selection for: {}", .0.join(", "))]
    Uncovered(Vec<String>),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> KnowledgeError + '_ {
    move |source| KnowledgeError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn json_err(path: &Path) -> impl FnOnce(serde_json::Error) -> KnowledgeError + '_ {
    move |source| KnowledgeError::Json {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbnormalityDefinition {
    pub class_name: String,
    pub definition: String,
    #[serde(default)]
    pub source: String,
}

/// Definitions keyed by class, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DefinitionStore {
    definitions: Vec<AbnormalityDefinition>,
}

impl DefinitionStore {
    pub fn new(definitions: Vec<AbnormalityDefinition>) -> Result<Self, KnowledgeError> {
        let mut seen = BTreeSet::new();
        for d in &definitions {
            if d.class_name.trim().is_empty() {
                return Err(KnowledgeError::InvalidDefinition("empty class name".into()));
            }
            if d.definition.trim().is_empty() {
                return Err(KnowledgeError::InvalidDefinition(format!(
                    "empty definition for {:?}",
                    d.class_name
                )));
            }
            if !seen.insert(class_key(&d.class_name)) {
                return Err(KnowledgeError::DuplicateClass(d.class_name.clone()));
            }
        }
        Ok(Self { definitions })
    }

    /// The bundled 22-class VinDr-CXR definitions.
    pub fn vindr() -> Self {
        let defs = serde_json::from_str(include_str!("../assets/definitions_vindr.json"))
            .expect("shipped definitions are valid JSON");
        Self::new(defs).expect("shipped definitions are valid")
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let defs = serde_json::from_str(&text).map_err(json_err(path))?;
        Self::new(defs)
    }

    pub fn len(&self) -> usize {
        self.definitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.definitions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &AbnormalityDefinition> {
        self.definitions.iter()
    }

    pub fn get(&self, class_name: &str) -> Option<&AbnormalityDefinition> {
        let key = class_key(class_name);
        self.definitions.iter().find(|d| class_key(&d.class_name) == key)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.definitions.iter().map(|d| d.class_name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillationPrompt {
    pub class_name: String,
    pub rendered_text: String,
}

/// Renders the distillation prompt for one definition.
pub fn render_prompt(def: &AbnormalityDefinition) -> Result<DistillationPrompt, KnowledgeError> {
    let a = def.class_name.trim();
    let d = def.definition.trim();
    if a.is_empty() {
        return Err(KnowledgeError::InvalidDefinition("empty class name".into()));
    }
    if d.is_empty() {
        return Err(KnowledgeError::InvalidDefinition(format!("empty definition for {a:?}")));
    }
    let rendered_text = format!(
        "Here is the medical definition of {a}: \"{d}\" Based on this definition, and focusing on \
         shape, intensity, density, and location, provide a concise visual description that \
         could guide image recognition."
    );
    Ok(DistillationPrompt {
        class_name: a.to_string(),
        rendered_text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 0.7,
            repetition_penalty: 1.1,
            max_tokens: 1024,
            n: 5,
            seed: 0,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), KnowledgeError> {
        let bad = |m: &str| Err(KnowledgeError::InvalidParams(m.to_string()));
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a non-negative number");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must be in (0, 1]");
        }
        if !(self.repetition_penalty.is_finite() && self.repetition_penalty > 0.0) {
            return bad("repetition_penalty must be positive");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub sample_index: usize,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("endpoint unavailable after {} attempt(s): {}", .attempts.len(), .attempts.join("; "))]
    Transport { attempts: Vec<String> },
    #[error("endpoint rejected the request: {0}")]
    Rejected(String),
    #[error("unexpected endpoint response: {0}")]
    Malformed(String),
    #[error("no recorded completion for sample {sample_index} of this prompt")]
    ReplayMiss { sample_index: usize },
    #[error("endpoint not configured: set {ENV_LLM_URL}")]
    NotConfigured,
}

/// A text-completion backend.
pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

/// Retry schedule for transient endpoint failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

/// Outcome of one attempt inside [`with_retry`].
pub enum Attempt<T> {
    Done(T),
    Retryable(String),
    Fatal(LlmError),
}

/// Runs `op` until it succeeds, fails fatally, or attempts run out. The delay
/// doubles after every retryable failure.
pub fn with_retry<T>(policy: RetryPolicy, mut op: impl FnMut(u32) -> Attempt<T>) -> Result<T, LlmError> {
    let mut attempts = Vec::new();
    let mut delay = policy.initial_backoff;
    for n in 1..=policy.max_attempts.max(1) {
        match op(n) {
            Attempt::Done(v) => return Ok(v),
            Attempt::Fatal(e) => return Err(e),
            Attempt::Retryable(msg) => {
                log::warn!("completion attempt {n} failed: {msg}");
                attempts.push(format!("attempt {n}: {msg}"));
                if n < policy.max_attempts {
                    std::thread::sleep(delay);
                    delay = delay.saturating_mul(2);
                }
            }
        }
    }
    Err(LlmError::Transport { attempts })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointConfig {
    /// Base URL of an OpenAI-compatible API, e.g. `http://localhost:8000/v1`.
    pub url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            model: "default".into(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
        }
    }

    pub fn from_env() -> Result<Self, LlmError> {
        let url = std::env::var(ENV_LLM_URL).map_err(|_| LlmError::NotConfigured)?;
        let mut cfg = Self::new(url);
        cfg.api_key = std::env::var(ENV_LLM_KEY).ok().filter(|k| !k.is_empty());
        if let Ok(model) = std::env::var(ENV_LLM_MODEL) {
            cfg.model = model;
        }
        Ok(cfg)
    }

    fn completions_url(&self) -> String {
        let base = self.url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Chat-completions client for OpenAI-compatible servers.
pub struct HttpClient {
    config: EndpointConfig,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(config: EndpointConfig) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        Ok(Self { config, http })
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "repetition_penalty": req.repetition_penalty,
            "max_tokens": req.max_tokens,
            "seed": req.seed,
            "n": 1,
        })
    }
}

fn extract_message(payload: &Value) -> Result<String, LlmError> {
    payload
        .pointer("/choices/0/message/content")
        .or_else(|| payload.pointer("/choices/0/text"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| {
            let mut excerpt = payload.to_string();
            excerpt.truncate(200);
            LlmError::Malformed(excerpt)
        })
}

impl LlmClient for HttpClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let url = self.config.completions_url();
        let body = self.body(request);
        with_retry(self.config.retry, |_| {
            let mut call = self.http.post(&url).json(&body);
            if let Some(key) = &self.config.api_key {
                call = call.bearer_auth(key);
            }
            let resp = match call.send() {
                Ok(r) => r,
                Err(e) => return Attempt::Retryable(e.to_string()),
            };
            let status = resp.status();
            if status.is_server_error() {
                return Attempt::Retryable(format!("HTTP {status}"));
            }
            if !status.is_success() {
                let text = resp.text().unwrap_or_default();
                return Attempt::Fatal(LlmError::Rejected(format!("HTTP {status}: {}", text.trim())));
            }
            match resp.json::<Value>() {
                Ok(v) => match extract_message(&v) {
                    Ok(s) => Attempt::Done(s),
                    Err(e) => Attempt::Fatal(e),
                },
                Err(e) => Attempt::Fatal(LlmError::Malformed(e.to_string())),
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub prompt: String,
    pub sample_index: usize,
    pub completion: String,
}

/// Recorded completions, matched on (prompt, sample index).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: u32,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(json_err(path))
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let text = serde_json::to_string_pretty(self).expect("transcript serializes");
        write_atomic(path, text.as_bytes())
    }
}

/// Answers from a transcript; never touches the network.
pub struct ReplayClient {
    entries: HashMap<(String, usize), String>,
}

impl ReplayClient {
    pub fn new(transcript: Transcript) -> Self {
        let entries = transcript
            .entries
            .into_iter()
            .map(|e| ((e.prompt, e.sample_index), e.completion))
            .collect();
        Self { entries }
    }
}

impl LlmClient for ReplayClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        self.entries
            .get(&(request.prompt.clone(), request.sample_index))
            .cloned()
            .ok_or(LlmError::ReplayMiss {
                sample_index: request.sample_index,
            })
    }
}

/// Forwards to another client and keeps every successful exchange.
pub struct RecordingClient<C> {
    inner: C,
    recorded: Mutex<Vec<TranscriptEntry>>,
}

impl<C: LlmClient> RecordingClient<C> {
    pub fn new(inner: C) -> Self {
        Self {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    /// Entries sorted by (prompt, sample index) so concurrent runs record identically.
    pub fn transcript(&self) -> Transcript {
        let mut entries = self.recorded.lock().expect("recorder lock").clone();
        entries.sort_by(|a, b| (&a.prompt, a.sample_index).cmp(&(&b.prompt, b.sample_index)));
        Transcript { version: 1, entries }
    }
}

impl<C: LlmClient> LlmClient for RecordingClient<C> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let completion = self.inner.complete(request)?;
        self.recorded.lock().expect("recorder lock").push(TranscriptEntry {
            prompt: request.prompt.clone(),
            sample_index: request.sample_index,
            completion: completion.clone(),
        });
        Ok(completion)
    }
}

/// Returns `responses[sample_index % len]`.
pub struct ScriptedClient {
    responses: Vec<String>,
}

impl ScriptedClient {
    pub fn new<S: Into<String>>(responses: impl IntoIterator<Item = S>) -> Self {
        Self {
            responses: responses.into_iter().map(Into::into).collect(),
        }
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        if self.responses.is_empty() {
            return Ok(String::new());
        }
        Ok(self.responses[request.sample_index % self.responses.len()].clone())
    }
}

/// Offline generator that composes lexicon terms into plausible
/// descriptions. Output depends only on the seed, prompt and sample index.
pub struct SyntheticClient {
    lexicons: Lexicons,
}

impl Default for SyntheticClient {
    fn default() -> Self {
        Self {
            lexicons: Lexicons::shipped(),
        }
    }
}

fn prompt_class(prompt: &str) -> &str {
    prompt
        .strip_prefix("Here is the medical definition of ")
        .and_then(|rest| rest.split_once(": \""))
        .map_or("this finding", |(a, _)| a)
}

impl LlmClient for SyntheticClient {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let mut hasher = Sha256::new();
        hasher.update(request.seed.to_le_bytes());
        hasher.update(request.sample_index.to_le_bytes());
        hasher.update(request.prompt.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);

        let mut pick = |a: Attribute| -> String {
            self.lexicons
                .terms(a)
                .and_then(|t| t.choose(&mut rng))
                .cloned()
                .unwrap_or_default()
        };
        let shape = pick(Attribute::Shape);
        let intensity = pick(Attribute::Intensity);
        let density = pick(Attribute::Density);
        let location = pick(Attribute::Location);
        let class = prompt_class(&request.prompt).to_lowercase();
        let text = match rng.random_range(0..3) {
            0 => format!("A {shape} {intensity} area of {density} appearance, seen {location}, typical of {class}."),
            1 => format!("Appears as a {shape} region that is {intensity} with {density} character, located {location}."),
            _ => format!("{class} shows a {shape} outline and {intensity} signal, {density} in texture, found {location}."),
        };
        let mut chars = text.chars();
        Ok(match chars.next() {
            Some(c) => c.to_uppercase().chain(chars).collect(),
            None => text,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Empty,
    TooShort,
    Refusal,
}

static FENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^\s*```[^\n]*$").unwrap());
static LEADING_LABEL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^(?:(?:visual\s+description|description|answer|response|output)\s*:\s*|\d+\s*[.)]\s+|[-•]\s+)")
        .unwrap()
});

fn strip_wrapping_quotes(s: &str) -> &str {
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”')] {
        if let Some(inner) = s.strip_prefix(open).and_then(|r| r.strip_suffix(close)) {
            if !inner.contains(close) {
                return inner.trim();
            }
        }
    }
    s
}

/// Strips formatting artifacts from one completion, or says why it is unusable.
pub fn clean_candidate(raw: &str) -> Result<String, DropReason> {
    let no_fences = FENCE.replace_all(raw, " ");
    let no_emphasis: String = no_fences.chars().filter(|c| !matches!(c, '*' | '`')).collect();
    let no_emphasis = no_emphasis.replace("__", "");
    let mut text = no_emphasis.split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let stripped = LEADING_LABEL.replace(&text, "").trim().to_string();
        let unquoted = strip_wrapping_quotes(&stripped).to_string();
        if unquoted == text {
            break;
        }
        text = unquoted;
    }
    if !text.ends_with(['.', '!', '?']) {
        if let Some(cut) = text.rfind(['.', '!', '?']) {
            text.truncate(cut + 1);
        }
    }
    if text.is_empty() {
        return Err(DropReason::Empty);
    }
    let lower = text.to_lowercase();
    if REFUSAL_PHRASES.iter().any(|p| lower.contains(p)) {
        return Err(DropReason::Refusal);
    }
    if text.split_whitespace().count() < MIN_CANDIDATE_WORDS {
        return Err(DropReason::TooShort);
    }
    Ok(text)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedCandidate {
    pub sample_index: usize,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePool {
    pub class_name: String,
    pub prompt: String,
    pub candidates: Vec<String>,
    pub generation_params: GenerationParams,
    #[serde(default)]
    pub dropped: Vec<DroppedCandidate>,
}

/// Requests `params.n` completions and cleans them. Any transport failure
/// aborts the class; unusable completions are dropped with a warning.
pub fn generate_candidates(
    prompt: &DistillationPrompt,
    client: &dyn LlmClient,
    params: &GenerationParams,
) -> Result<CandidatePool, KnowledgeError> {
    params.validate()?;
    let mut candidates = Vec::with_capacity(params.n);
    let mut dropped = Vec::new();
    for sample_index in 0..params.n {
        let request = CompletionRequest {
            prompt: prompt.rendered_text.clone(),
            temperature: params.temperature,
            top_p: params.top_p,
            repetition_penalty: params.repetition_penalty,
            max_tokens: params.max_tokens,
            seed: params.seed.wrapping_add(sample_index as u64),
            sample_index,
        };
        let raw = client.complete(&request).map_err(|source| KnowledgeError::Llm {
            class_name: prompt.class_name.clone(),
            source,
        })?;
        match clean_candidate(&raw) {
            Ok(text) => candidates.push(text),
            Err(reason) => {
                log::warn!("{}: dropped candidate {sample_index} ({reason:?})", prompt.class_name);
                dropped.push(DroppedCandidate { sample_index, reason });
            }
        }
    }
    if candidates.is_empty() {
        return Err(KnowledgeError::NoUsableCandidates {
            class_name: prompt.class_name.clone(),
            requested: params.n,
        });
    }
    Ok(CandidatePool {
        class_name: prompt.class_name.clone(),
        prompt: prompt.rendered_text.clone(),
        candidates,
        generation_params: *params,
        dropped,
    })
}

/// Generates pools for every definition with at most `max_in_flight`
/// concurrent classes. Results come back in store order.
pub fn generate_all(
    store: &DefinitionStore,
    client: &dyn LlmClient,
    params: &GenerationParams,
    max_in_flight: usize,
) -> Vec<(String, Result<CandidatePool, KnowledgeError>)> {
    let defs: Vec<&AbnormalityDefinition> = store.iter().collect();
    let mut results: Vec<Option<Result<CandidatePool, KnowledgeError>>> = (0..defs.len()).map(|_| None).collect();
    for (chunk_idx, chunk) in defs.chunks(max_in_flight.max(1)).enumerate() {
        let outcomes: Vec<_> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|def| scope.spawn(move || render_prompt(def).and_then(|p| generate_candidates(&p, client, params))))
                .collect();
            handles.into_iter().map(|h| h.join().expect("generation thread panicked")).collect()
        });
        for (i, outcome) in outcomes.into_iter().enumerate() {
            results[chunk_idx * max_in_flight.max(1) + i] = Some(outcome);
        }
    }
    defs.iter()
        .zip(results)
        .map(|(d, r)| (d.class_name.clone(), r.expect("every slot filled")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Human,
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePrompt {
    pub class_name: String,
    pub description: String,
    pub selected_index: usize,
    pub selected_by: Selector,
    pub timestamp: DateTime<Utc>,
}

/// Candidate with the most lexicon term occurrences; ties go to the lowest index.
pub fn auto_select(pool: &CandidatePool, lexicons: &Lexicons) -> usize {
    let mut best = (0, 0);
    for (i, c) in pool.candidates.iter().enumerate() {
        let score: usize = Attribute::ALL.iter().map(|a| lexicons.count_matches(c, *a)).sum();
        if score > best.1 {
            best = (i, score);
        }
    }
    best.0
}

/// Builds the dictionary for `classes` from the latest selections.
pub fn export_prompt_dictionary(
    selections: &BTreeMap<String, AttributePrompt>,
    classes: &[String],
) -> Result<PromptDictionary, KnowledgeError> {
    let by_key: HashMap<String, &AttributePrompt> =
        selections.values().map(|s| (class_key(&s.class_name), s)).collect();
    let mut entries = BTreeMap::new();
    let mut uncovered = BTreeSet::new();
    for class in classes {
        match by_key.get(&class_key(class)) {
            Some(sel) => {
                entries.insert(class.clone(), sel.description.clone());
            }
            None => {
                uncovered.insert(class.clone());
            }
        }
    }
    if !uncovered.is_empty() {
        return Err(KnowledgeError::Uncovered(uncovered.into_iter().collect()));
    }
    Ok(PromptDictionary {
        version: 1,
        entries,
        aliases: BTreeMap::new(),
    })
}

/// Class name to selected attribute description.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDictionary {
    pub version: u32,
    pub entries: BTreeMap<String, String>,
    /// Alternative spellings mapped to entry names.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aliases: BTreeMap<String, String>,
}

impl PromptDictionary {
    /// The curated 22-class VinDr-CXR descriptions.
    pub fn vindr() -> Self {
        serde_json::from_str(include_str!("../assets/dictionary_vindr.json")).expect("shipped dictionary is valid")
    }

    /// The curated PadChest-GR descriptions, keyed by PadChest class names.
    pub fn padchest() -> Self {
        serde_json::from_str(include_str!("../assets/dictionary_padchest.json")).expect("shipped dictionary is valid")
    }

    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(json_err(path))
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let mut text = serde_json::to_string_pretty(self).expect("dictionary serializes");
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Looks up a class by exact name, alias, then case/spacing-insensitive match.
    pub fn get(&self, class_name: &str) -> Option<&str> {
        if let Some(d) = self.entries.get(class_name) {
            return Some(d);
        }
        let key = class_key(class_name);
        let target = self
            .aliases
            .iter()
            .find(|(alias, _)| class_key(alias) == key)
            .map_or(key, |(_, t)| class_key(t));
        self.entries
            .iter()
            .find(|(name, _)| class_key(name) == target)
            .map(|(_, d)| d.as_str())
    }

    /// Sorted distinct names with no entry.
    pub fn missing<'a>(&self, classes: impl IntoIterator<Item = &'a str>) -> Vec<String> {
        classes
            .into_iter()
            .filter(|c| self.get(c).is_none())
            .map(str::to_string)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), KnowledgeError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// On-disk workspace holding candidate pools and the selection ledger.
///
/// ```text
/// root/pools/<class>.json
/// root/selections.jsonl
/// root/.lock
/// ```
#[derive(Debug, Clone)]
pub struct KnowledgeStore {
    root: PathBuf,
}

/// Held while the ledger is being written.
struct WriterLock(File);

impl Drop for WriterLock {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

fn pool_file_name(class_name: &str) -> String {
    let key = class_key(class_name);
    let slug: String = key
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    let digest = Sha256::digest(key.as_bytes());
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{}-{tag}.json", slug.trim_matches('-'))
}

impl KnowledgeStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, KnowledgeError> {
        let root = root.into();
        let pools = root.join("pools");
        fs::create_dir_all(&pools).map_err(io_err(&pools))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("selections.jsonl")
    }

    fn pool_path(&self, class_name: &str) -> PathBuf {
        self.root.join("pools").join(pool_file_name(class_name))
    }

    fn lock(&self) -> Result<WriterLock, KnowledgeError> {
        let path = self.root.join(".lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(WriterLock(file))
    }

    pub fn save_pool(&self, pool: &CandidatePool) -> Result<PathBuf, KnowledgeError> {
        let path = self.pool_path(&pool.class_name);
        let mut text = serde_json::to_string_pretty(pool).expect("pool serializes");
        text.push('\n');
        let _guard = self.lock()?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    pub fn load_pool(&self, class_name: &str) -> Result<Option<CandidatePool>, KnowledgeError> {
        let path = self.pool_path(class_name);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(serde_json::from_str(&text).map_err(json_err(&path))?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// All stored pools, sorted by class name.
    pub fn pools(&self) -> Result<Vec<CandidatePool>, KnowledgeError> {
        let dir = self.root.join("pools");
        let mut pools = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = fs::read_to_string(&path).map_err(io_err(&path))?;
                pools.push(serde_json::from_str::<CandidatePool>(&text).map_err(json_err(&path))?);
            }
        }
        pools.sort_by(|a, b| a.class_name.cmp(&b.class_name));
        Ok(pools)
    }

    /// Every ledger entry in append order.
    pub fn ledger(&self) -> Result<Vec<AttributePrompt>, KnowledgeError> {
        let path = self.ledger_path();
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(json_err(&path))?);
        }
        Ok(out)
    }

    /// Latest selection per class, keyed by the pool's class name.
    pub fn current_selections(&self) -> Result<BTreeMap<String, AttributePrompt>, KnowledgeError> {
        let mut latest: BTreeMap<String, AttributePrompt> = BTreeMap::new();
        for entry in self.ledger()? {
            latest.insert(class_key(&entry.class_name), entry);
        }
        Ok(latest.into_values().map(|e| (e.class_name.clone(), e)).collect())
    }

    pub fn current_selection(&self, class_name: &str) -> Result<Option<AttributePrompt>, KnowledgeError> {
        let key = class_key(class_name);
        Ok(self
            .ledger()?
            .into_iter()
            .rev()
            .find(|e| class_key(&e.class_name) == key))
    }

    /// Records a selection. Repeating the current selection appends nothing
    /// and returns the stored entry.
    pub fn select(&self, class_name: &str, index: usize, who: Selector) -> Result<AttributePrompt, KnowledgeError> {
        let pool = self
            .load_pool(class_name)?
            .ok_or_else(|| KnowledgeError::UnknownClass(class_name.to_string()))?;
        let description = pool
            .candidates
            .get(index)
            .ok_or(KnowledgeError::IndexOutOfRange {
                index,
                len: pool.candidates.len(),
            })?
            .clone();

        let _guard = self.lock()?;
        if let Some(current) = self.current_selection(&pool.class_name)? {
            if current.selected_index == index && current.description == description && current.selected_by == who {
                return Ok(current);
            }
        }
        let entry = AttributePrompt {
            class_name: pool.class_name.clone(),
            description,
            selected_index: index,
            selected_by: who,
            timestamp: Utc::now(),
        };
        let path = self.ledger_path();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut line = serde_json::to_string(&entry).expect("selection serializes");
        line.push('\n');
        file.write_all(line.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))?;
        Ok(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lung_opacity() -> AbnormalityDefinition {
        AbnormalityDefinition {
            class_name: "lung opacity".into(),
            definition: "Any area of increased attenuation in the lung.".into(),
            source: String::new(),
        }
    }

    #[test]
    fn prompt_template() {
        let p = render_prompt(&lung_opacity()).unwrap();
        assert!(p.rendered_text.starts_with("Here is the medical definition of lung opacity: \"Any area"));
        assert!(p
            .rendered_text
            .ends_with("provide a concise visual description that could guide image recognition."));
        for w in ["shape", "intensity", "density", "location"] {
            assert!(p.rendered_text.contains(w));
        }
        let mut bad = lung_opacity();
        bad.class_name = " ".into();
        assert!(render_prompt(&bad).is_err());
    }

    #[test]
    fn prompt_is_injective_on_swapped_fields() {
        let a = AbnormalityDefinition {
            class_name: "x".into(),
            definition: "y z".into(),
            source: String::new(),
        };
        let b = AbnormalityDefinition {
            class_name: "x: \"y".into(),
            definition: "z".into(),
            source: String::new(),
        };
        // different pairs can only collide if the separator appears in the name
        assert_ne!(render_prompt(&a).unwrap(), render_prompt(&b).unwrap());
    }

    #[test]
    fn cleaning_rules() {
        assert_eq!(
            clean_candidate("```text\n**Description:** A round, bright spot in the upper lobe.\n```").unwrap(),
            "A round, bright spot in the upper lobe."
        );
        assert_eq!(
            clean_candidate("1. \"Patchy hazy opacity in the lower zone.\"").unwrap(),
            "Patchy hazy opacity in the lower zone."
        );
        assert_eq!(
            clean_candidate("Irregular dense area near the hilum. It may also").unwrap(),
            "Irregular dense area near the hilum."
        );
        assert_eq!(clean_candidate("   "), Err(DropReason::Empty));
        assert_eq!(clean_candidate("Round opacity."), Err(DropReason::TooShort));
        assert_eq!(
            clean_candidate("I'm sorry, but I cannot describe medical images here."),
            Err(DropReason::Refusal)
        );
    }

    #[test]
    fn scripted_pool_keeps_order() {
        let texts = [
            "A round bright spot in the lung.",
            "A patchy hazy area near the base.",
            "",
            "Linear dense band along the pleura.",
            "Ok.",
        ];
        let client = ScriptedClient::new(texts);
        let prompt = render_prompt(&lung_opacity()).unwrap();
        let pool = generate_candidates(&prompt, &client, &GenerationParams::default()).unwrap();
        assert_eq!(pool.candidates, vec![texts[0], texts[1], texts[3]]);
        assert_eq!(
            pool.dropped,
            vec![
                DroppedCandidate { sample_index: 2, reason: DropReason::Empty },
                DroppedCandidate { sample_index: 4, reason: DropReason::TooShort },
            ]
        );
        let all_bad = ScriptedClient::new(["no"]);
        assert!(matches!(
            generate_candidates(&prompt, &all_bad, &GenerationParams::default()),
            Err(KnowledgeError::NoUsableCandidates { .. })
        ));
    }

    #[test]
    fn synthetic_client_is_reproducible() {
        let prompt = render_prompt(&lung_opacity()).unwrap();
        let params = GenerationParams { seed: 7, ..Default::default() };
        let a = generate_candidates(&prompt, &SyntheticClient::default(), &params).unwrap();
        let b = generate_candidates(&prompt, &SyntheticClient::default(), &params).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.candidates.len(), 5);
    }

    #[test]
    fn retry_counts_attempts_and_stops_on_fatal() {
        let policy = RetryPolicy { max_attempts: 3, initial_backoff: Duration::ZERO };
        let mut calls = 0;
        let err = with_retry::<()>(policy, |_| {
            calls += 1;
            Attempt::Retryable("HTTP 503".into())
        })
        .unwrap_err();
        assert_eq!(calls, 3);
        assert!(matches!(&err, LlmError::Transport { attempts } if attempts.len() == 3));

        let mut calls = 0;
        let ok = with_retry(policy, |n| {
            calls += 1;
            if n < 2 { Attempt::Retryable("reset".into()) } else { Attempt::Done(n) }
        });
        assert_eq!((ok.unwrap(), calls), (2, 2));

        let mut calls = 0;
        let err = with_retry::<()>(policy, |_| {
            calls += 1;
            Attempt::Fatal(LlmError::Rejected("HTTP 401".into()))
        });
        assert!(matches!(err, Err(LlmError::Rejected(_))));
        assert_eq!(calls, 1);
    }

    #[test]
    fn auto_select_prefers_lexicon_overlap() {
        let pool = CandidatePool {
            class_name: "x".into(),
            prompt: String::new(),
            candidates: vec![
                "Something visible on the film today.".into(),
                "A round bright dense spot in the upper lobe.".into(),
                "A round bright dense spot in the lower lobe.".into(),
            ],
            generation_params: GenerationParams::default(),
            dropped: vec![],
        };
        assert_eq!(auto_select(&pool, &Lexicons::shipped()), 1);
    }

    #[test]
    fn dictionary_lookup_and_missing() {
        let d = PromptDictionary::vindr();
        assert_eq!(d.len(), 22);
        assert_eq!(
            d.get("lung opacity"),
            Some("An area of increased density in the lung fields, typically appearing as a white or grayish patch.")
        );
        assert!(d.get("Enlarged PA").is_some());
        assert!(d.get("ild").is_some());
        assert_eq!(d.missing(["Edema", "Unicorn", "Unicorn"]), vec!["Unicorn"]);
        assert_eq!(PromptDictionary::padchest().len(), 24);
    }

    #[test]
    fn export_reports_uncovered() {
        let sel = AttributePrompt {
            class_name: "Edema".into(),
            description: "d".into(),
            selected_index: 0,
            selected_by: Selector::Human,
            timestamp: Utc::now(),
        };
        let map = BTreeMap::from([("Edema".to_string(), sel)]);
        let dict = export_prompt_dictionary(&map, &["edema".into()]).unwrap();
        assert_eq!(dict.entries["edema"], "d");
        let err = export_prompt_dictionary(&map, &["Edema".into(), "Nodule/Mass".into()]).unwrap_err();
        assert!(matches!(err, KnowledgeError::Uncovered(c) if c == vec!["Nodule/Mass"]));
        assert!(export_prompt_dictionary(&map, &[]).unwrap().is_empty());
    }

    #[test]
    fn pool_file_names_are_distinct_and_safe() {
        let a = pool_file_name("Nodule/Mass");
        let b = pool_file_name("Nodule Mass");
        assert_ne!(a, b);
        assert!(!a.contains('/'));
        assert_eq!(pool_file_name("ILD"), pool_file_name("ild"));
    }
}
