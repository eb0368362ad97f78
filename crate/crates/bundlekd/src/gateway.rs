//! OpenAI-compatible chat completions with retries, an on-disk response
//! cache and a scriptable mock.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use bundlekd_core::digest::sha256_hex;
use bundlekd_core::distiller::ChatModel;
use bundlekd_core::ChatMessage;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("authentication failed (HTTP {status}): {body}")]
    Auth { status: u16, body: String },
    #[error("gave up after {attempts} attempts, last status {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("malformed response body: {0}")]
    MalformedBody(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("mock has no reply scripted for prompt hash {0}")]
    Unscripted(String),
    #[error("invalid provider config: {0}")]
    Config(String),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Openai,
    Mock,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    1000
}
fn default_backoff_max() -> u64 {
    30_000
}
fn default_concurrency() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    #[serde(default)]
    pub kind: ProviderKind,
    #[serde(default)]
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Mock only: JSON script file, see [`MockScript`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn mock(model: &str) -> Self {
        ProviderConfig {
            kind: ProviderKind::Mock,
            base_url: String::new(),
            model: model.into(),
            api_key_env: None,
            temperature: 0.0,
            max_tokens: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            backoff_ms: default_backoff(),
            backoff_max_ms: default_backoff_max(),
            cache_dir: None,
            max_concurrency: default_concurrency(),
            mock_script: None,
        }
    }

    pub fn openai(base_url: &str, model: &str) -> Self {
        ProviderConfig { kind: ProviderKind::Openai, base_url: base_url.into(), ..Self::mock(model) }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: String| Err(GatewayError::Config(m));
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be >= 1".into());
        }
        if self.model.is_empty() {
            return bad("model is empty".into());
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return bad(format!("timeout_secs must be positive, got {}", self.timeout_secs));
        }
        if self.kind == ProviderKind::Openai && self.base_url.is_empty() {
            return bad("base_url is required for openai providers".into());
        }
        Ok(())
    }

    pub fn request(&self, messages: &[ChatMessage]) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: messages.to_vec(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }

    /// Delay before retry `k` (0-based): `backoff_ms * 2^k`, capped.
    pub fn backoff(&self, k: u32) -> Duration {
        let ms = self.backoff_ms.saturating_mul(1u64.checked_shl(k.min(63)).unwrap_or(u64::MAX));
        Duration::from_millis(ms.min(self.backoff_max_ms.max(self.backoff_ms)))
    }
}

/// Wire body of a chat completion request. Field order is fixed, which makes
/// its JSON the canonical form hashed for cache keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn cache_key(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("request serializes").as_bytes())
    }
}

/// Hash identifying a prompt independent of model settings; mock scripts
/// are keyed by it.
pub fn prompt_hash(messages: &[ChatMessage]) -> String {
    sha256_hex(serde_json::to_string(messages).expect("messages serialize").as_bytes())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default)]
    pub usage: Option<Usage>,
    pub fingerprint: String,
    #[serde(default)]
    pub cache_hit: bool,
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn fingerprint(&self) -> String;
}

impl<P: ChatProvider + ?Sized> ChatProvider for Arc<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }

    fn fingerprint(&self) -> String {
        (**self).fingerprint()
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}

pub struct HttpProvider {
    cfg: ProviderConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    limit: Semaphore,
    sleep: Box<dyn Fn(Duration) + Send + Sync>,
}

#[derive(Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

impl HttpProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let limit = Semaphore::new(cfg.max_concurrency);
        Ok(HttpProvider { cfg, client, api_key, limit, sleep: Box::new(std::thread::sleep) })
    }

    /// Replaces the sleep used between retries.
    pub fn with_sleep(mut self, sleep: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleep = Box::new(sleep);
        self
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, request: &ChatRequest) -> Result<Result<ChatResponse, GatewayError>, String> {
        let body = serde_json::to_vec(request).expect("request serializes");
        let mut builder = self.client.post(self.url()).header("content-type", "application/json").body(body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() => return Err(format!("transport: {e}")),
            Err(e) => return Ok(Err(GatewayError::Transport(e.to_string()))),
        };
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| format!("transport: {e}"))?;
        match status {
            200..=299 => Ok(parse_reply(&body, &self.fingerprint())),
            401 | 403 => Ok(Err(GatewayError::Auth { status, body })),
            429 | 500..=599 => Err(format!("HTTP {status}")),
            _ => Ok(Err(GatewayError::Http { status, body })),
        }
    }
}

fn parse_reply(body: &str, fingerprint: &str) -> Result<ChatResponse, GatewayError> {
    let reply: WireReply = serde_json::from_str(body).map_err(|e| GatewayError::MalformedBody(format!("{e}: {body}")))?;
    let content = reply
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| GatewayError::MalformedBody(format!("no choices[0].message.content: {body}")))?;
    Ok(ChatResponse { content, usage: reply.usage, fingerprint: fingerprint.into(), cache_hit: false })
}

impl ChatProvider for HttpProvider {
    /// Retries 429, 5xx, timeouts and connection failures with exponential
    /// backoff; everything else fails immediately.
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let _permit = self.limit.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok(result) => return result,
                Err(last) if attempts > self.cfg.max_retries => {
                    return Err(GatewayError::ExhaustedRetries { attempts, last });
                }
                Err(last) => {
                    let delay = self.cfg.backoff(attempts - 1);
                    log::warn!("{} failed with {last}; retrying in {delay:?}", self.url());
                    (self.sleep)(delay);
                }
            }
        }
    }

    fn fingerprint(&self) -> String {
        format!("openai:{}@{}", self.cfg.model, self.cfg.base_url)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockReply {
    One(String),
    /// Returned in order on successive calls; the last one repeats.
    Sequence(Vec<String>),
}

/// Script file for the mock provider.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub replies: BTreeMap<String, MockReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<String>,
    /// Unscripted prompts are errors rather than getting `default`.
    #[serde(default)]
    pub strict: bool,
}

type Responder = Box<dyn Fn(&ChatRequest) -> Option<String> + Send + Sync>;

/// Deterministic provider answering from a script keyed by [`prompt_hash`],
/// then from an optional responder function, then from the default reply.
pub struct MockProvider {
    name: String,
    script: MockScript,
    responder: Option<Responder>,
    positions: Mutex<BTreeMap<String, usize>>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(name: &str, script: MockScript) -> Self {
        MockProvider {
            name: name.into(),
            script,
            responder: None,
            positions: Mutex::new(BTreeMap::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn from_file(name: &str, path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)?;
        let script = serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::new(name, script))
    }

    pub fn with_responder(mut self, f: impl Fn(&ChatRequest) -> Option<String> + Send + Sync + 'static) -> Self {
        self.responder = Some(Box::new(f));
        self
    }

    /// Number of `complete` calls received so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatProvider for MockProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let hash = prompt_hash(&request.messages);
        let scripted = self.script.replies.get(&hash).map(|reply| match reply {
            MockReply::One(s) => s.clone(),
            MockReply::Sequence(seq) => {
                let mut pos = self.positions.lock().unwrap_or_else(|e| e.into_inner());
                let k = pos.entry(hash.clone()).or_insert(0);
                let s = seq.get(*k).or(seq.last()).cloned().unwrap_or_default();
                *k += 1;
                s
            }
        });
        let content = scripted
            .or_else(|| self.responder.as_ref().and_then(|f| f(request)))
            .or_else(|| if self.script.strict { None } else { self.script.default.clone() })
            .ok_or(GatewayError::Unscripted(hash))?;
        Ok(ChatResponse { content, usage: None, fingerprint: self.fingerprint(), cache_hit: false })
    }

    fn fingerprint(&self) -> String {
        format!("mock:{}", self.name)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: ChatRequest,
    response: ChatResponse,
}

/// Read-through response cache at `<dir>/<first two hex>/<hash>.json`.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<P: ChatProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> Self {
        CachedProvider { inner, dir: dir.into(), hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) }
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    fn lookup(&self, key: &str, path: &Path) -> Option<ChatResponse> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache entry {} unreadable ({e}); treating as miss", path.display());
                return None;
            }
        };
        match serde_json::from_str::<CacheEntry>(&text) {
            Ok(entry) if entry.key == key => Some(entry.response),
            Ok(_) => {
                log::warn!("cache entry {} has a mismatched key; treating as miss", path.display());
                None
            }
            Err(e) => {
                log::warn!("cache entry {} is corrupt ({e}); treating as miss", path.display());
                None
            }
        }
    }

    fn store(&self, path: &Path, entry: &CacheEntry) -> Result<(), GatewayError> {
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        tmp.write_all(serde_json::to_string_pretty(entry).expect("entry serializes").as_bytes())?;
        tmp.persist(path).map_err(|e| GatewayError::Cache(e.error))?;
        Ok(())
    }
}

impl<P: ChatProvider> ChatProvider for CachedProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let key = request.cache_key();
        let path = self.path_for(&key);
        if let Some(mut hit) = self.lookup(&key, &path) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            hit.cache_hit = true;
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let mut response = self.inner.complete(request)?;
        response.cache_hit = false;
        self.store(&path, &CacheEntry { key, request: request.clone(), response: response.clone() })?;
        Ok(response)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// Builds the provider described by `cfg`, wrapped in the cache when
/// `cfg.cache_dir` is set.
pub fn build_provider(cfg: &ProviderConfig) -> Result<Arc<dyn ChatProvider>, GatewayError> {
    cfg.validate()?;
    let base: Arc<dyn ChatProvider> = match cfg.kind {
        ProviderKind::Openai => Arc::new(HttpProvider::new(cfg.clone())?),
        ProviderKind::Mock => match &cfg.mock_script {
            Some(path) => Arc::new(MockProvider::from_file(&cfg.model, path)?),
            None => Arc::new(MockProvider::new(&cfg.model, MockScript::default())),
        },
    };
    Ok(match &cfg.cache_dir {
        Some(dir) => Arc::new(CachedProvider::new(base, dir.clone())),
        None => base,
    })
}

/// A provider bound to one model configuration, usable as a teacher or student.
pub struct Model<'a> {
    pub provider: &'a dyn ChatProvider,
    pub cfg: &'a ProviderConfig,
}

impl Model<'_> {
    pub fn complete(&self, messages: &[ChatMessage]) -> Result<ChatResponse, GatewayError> {
        self.provider.complete(&self.cfg.request(messages))
    }
}

impl ChatModel for Model<'_> {
    type Error = GatewayError;

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, GatewayError> {
        self.complete(messages).map(|r| r.content)
    }

    fn now_ms(&self) -> Option<u64> {
        u64::try_from(chrono::Utc::now().timestamp_millis()).ok()
    }
}
