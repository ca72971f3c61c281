//! Read-only DICOMweb header ingestion: QIDO-RS search with paging, a
//! content-addressed on-disk cache and an append-only access log.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::deid::{apply_policy, audit_phi, DeidPolicy, PatientKey, UidMapLog};
use crate::dicom::json::{dataset_to_json, parse_dicom_json_list};
use crate::dicom::{dictionary, DataSet, Tag};

#[derive(Debug, Error)]
pub enum PacsError {
    #[error("HTTP status {0}")]
    HttpError(u16),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("corrupt cache entry {0}")]
    CacheCorrupt(PathBuf),
    #[error("{count} PHI violation(s) in response, first at {first}")]
    PhiDetected { count: usize, first: Tag },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryLevel {
    Studies,
    Series,
}

impl QueryLevel {
    fn path(self) -> &'static str {
        match self {
            QueryLevel::Studies => "studies",
            QueryLevel::Series => "series",
        }
    }
}

/// A QIDO-RS search. `limit` is the page size; the total pulled is capped
/// by [`ClientConfig::max_total`].
#[derive(Clone, Debug, PartialEq)]
pub struct QidoQuery {
    pub base: String,
    pub level: QueryLevel,
    pub filters: BTreeMap<Tag, String>,
    pub include_fields: Vec<Tag>,
    pub offset: usize,
    pub limit: usize,
}

/// Accepts a dictionary keyword or an 8-digit hex tag.
pub fn resolve_tag(name: &str) -> Result<Tag, PacsError> {
    dictionary::by_keyword(name)
        .or_else(|| Tag::parse_json_key(name).ok())
        .ok_or_else(|| PacsError::InvalidQuery(format!("unknown attribute {name:?}")))
}

impl QidoQuery {
    pub fn new(base: &str, level: QueryLevel) -> Self {
        QidoQuery {
            base: base.trim_end_matches('/').to_string(),
            level,
            filters: BTreeMap::new(),
            include_fields: Vec::new(),
            offset: 0,
            limit: 100,
        }
    }

    pub fn filter(mut self, attribute: &str, value: &str) -> Result<Self, PacsError> {
        self.filters.insert(resolve_tag(attribute)?, value.to_string());
        Ok(self)
    }

    pub fn include(mut self, attribute: &str) -> Result<Self, PacsError> {
        let tag = resolve_tag(attribute)?;
        if !self.include_fields.contains(&tag) {
            self.include_fields.push(tag);
        }
        Ok(self)
    }

    pub fn validate(&self, max_limit: usize) -> Result<(), PacsError> {
        if !(self.base.starts_with("http://") || self.base.starts_with("https://")) {
            return Err(PacsError::InvalidQuery(format!("base {:?} is not an http(s) URL", self.base)));
        }
        if self.limit == 0 || self.limit > max_limit {
            return Err(PacsError::InvalidQuery(format!(
                "limit {} outside 1..={max_limit}",
                self.limit
            )));
        }
        Ok(())
    }

    /// Stable text form: sorted filters and include fields.
    pub fn canonical(&self) -> String {
        let mut inc: Vec<String> = self.include_fields.iter().map(|t| t.json_key()).collect();
        inc.sort();
        inc.dedup();
        let filters: BTreeMap<String, &String> =
            self.filters.iter().map(|(t, v)| (t.json_key(), v)).collect();
        serde_json::json!({
            "base": self.base,
            "level": self.level,
            "filters": filters,
            "include": inc,
            "offset": self.offset,
            "limit": self.limit,
        })
        .to_string()
    }

    /// SHA-256 of the canonical form, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn params(&self, offset: usize, limit: usize) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> =
            self.filters.iter().map(|(t, v)| (t.json_key(), v.clone())).collect();
        for t in &self.include_fields {
            out.push(("includefield".into(), t.json_key()));
        }
        out.push(("offset".into(), offset.to_string()));
        out.push(("limit".into(), limit.to_string()));
        out
    }

    fn endpoint(&self) -> String {
        let rest = self.base.split_once("://").map_or(self.base.as_str(), |(_, r)| r);
        rest.split('/').next().unwrap_or(rest).to_string()
    }
}

/// What happens to a response that fails the PHI audit.
#[derive(Clone, Debug)]
pub enum PhiGate {
    /// The whole search fails and nothing is persisted.
    Reject,
    /// Each data set is de-identified first; UID remappings are appended to
    /// `uid_log` when set. Anything still flagged afterwards is rejected.
    Deidentify {
        policy: DeidPolicy,
        secret: Vec<u8>,
        uid_log: Option<PathBuf>,
    },
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    pub timeout: Duration,
    pub max_limit: usize,
    pub max_total: usize,
    /// Per endpoint (host:port); 0 disables the limit.
    pub requests_per_second: f64,
    pub access_log: Option<PathBuf>,
    pub gate: PhiGate,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            timeout: Duration::from_secs(30),
            max_limit: 1000,
            max_total: 10_000,
            requests_per_second: 10.0,
            access_log: None,
            gate: PhiGate::Reject,
        }
    }
}

/// Where a result came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Network,
    Cache,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub timestamp: String,
    pub query_hash: String,
    pub result_count: usize,
    pub source: Source,
}

/// Anything that yields header data sets for a query.
pub trait HeaderSource {
    fn search(&self, query: &QidoQuery) -> Result<Vec<DataSet>, PacsError>;
    /// Instance metadata for one study (WADO-RS).
    fn metadata(&self, base: &str, study_uid: &str) -> Result<Vec<DataSet>, PacsError>;
}

pub struct QidoClient {
    agent: ureq::Agent,
    cfg: ClientConfig,
    next_slot: Mutex<HashMap<String, Instant>>,
    log_lock: Mutex<()>,
}

impl QidoClient {
    pub fn new(cfg: ClientConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        QidoClient {
            agent,
            cfg,
            next_slot: Mutex::new(HashMap::new()),
            log_lock: Mutex::new(()),
        }
    }

    pub fn config(&self) -> &ClientConfig {
        &self.cfg
    }

    fn throttle(&self, endpoint: &str) {
        if self.cfg.requests_per_second <= 0.0 {
            return;
        }
        let interval = Duration::from_secs_f64(1.0 / self.cfg.requests_per_second);
        let slot = {
            let mut map = self.next_slot.lock().unwrap_or_else(|p| p.into_inner());
            let now = Instant::now();
            let slot = map.get(endpoint).copied().map_or(now, |t| t.max(now));
            map.insert(endpoint.to_string(), slot + interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }

    fn get(&self, endpoint: &str, url: &str, params: &[(String, String)]) -> Result<String, PacsError> {
        self.throttle(endpoint);
        let mut req = self.agent.get(url).header("Accept", "application/dicom+json");
        for (k, v) in params {
            req = req.query(k, v);
        }
        let mut resp = req.call().map_err(transport)?;
        let status = resp.status().as_u16();
        if status >= 400 {
            return Err(PacsError::HttpError(status));
        }
        if status == 204 {
            return Ok("[]".into());
        }
        resp.body_mut()
            .with_config()
            .limit(256 << 20)
            .read_to_string()
            .map_err(transport)
    }

    fn parse_page(body: &str) -> Result<Vec<DataSet>, PacsError> {
        if body.trim().is_empty() {
            return Ok(Vec::new());
        }
        parse_dicom_json_list(body).map_err(|e| PacsError::MalformedResponse(e.to_string()))
    }

    /// Pages through the search until a short page or `max_total`.
    pub fn qido_search(&self, query: &QidoQuery) -> Result<Vec<DataSet>, PacsError> {
        query.validate(self.cfg.max_limit)?;
        let url = format!("{}/{}", query.base, query.level.path());
        let endpoint = query.endpoint();
        let mut out = Vec::new();
        let mut offset = query.offset;
        while out.len() < self.cfg.max_total {
            let want = query.limit.min(self.cfg.max_total - out.len());
            let body = self.get(&endpoint, &url, &query.params(offset, want))?;
            let page = Self::parse_page(&body)?;
            let n = page.len();
            out.extend(page.into_iter().take(want));
            if n < want {
                break;
            }
            offset += n;
        }
        self.log_access(&query.hash(), out.len(), Source::Network)?;
        Ok(out)
    }

    /// Unpaged WADO-RS study metadata request.
    pub fn wado_metadata(&self, base: &str, study_uid: &str) -> Result<Vec<DataSet>, PacsError> {
        let q = QidoQuery::new(base, QueryLevel::Studies);
        q.validate(self.cfg.max_limit)?;
        if study_uid.is_empty() || !study_uid.chars().all(|c| c.is_ascii_digit() || c == '.') {
            return Err(PacsError::InvalidQuery(format!("bad study UID {study_uid:?}")));
        }
        let url = format!("{}/studies/{study_uid}/metadata", q.base);
        let body = self.get(&q.endpoint(), &url, &[])?;
        Self::parse_page(&body)
    }

    fn log_access(&self, query_hash: &str, count: usize, source: Source) -> Result<(), PacsError> {
        let Some(path) = &self.cfg.access_log else {
            return Ok(());
        };
        let rec = AccessRecord {
            timestamp: chrono::Utc::now().to_rfc3339(),
            query_hash: query_hash.to_string(),
            result_count: count,
            source,
        };
        let line = serde_json::to_string(&rec).expect("record serializes") + "\n";
        let _guard = self.log_lock.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        OpenOptions::new().create(true).append(true).open(path)?.write_all(line.as_bytes())?;
        Ok(())
    }

    /// Runs the configured gate over a response about to be persisted.
    pub fn gate(&self, datasets: Vec<DataSet>) -> Result<Vec<DataSet>, PacsError> {
        let datasets = match &self.cfg.gate {
            PhiGate::Reject => datasets,
            PhiGate::Deidentify { policy, secret, uid_log } => {
                let mut out = Vec::with_capacity(datasets.len());
                let mut records = Vec::new();
                for ds in &datasets {
                    let pid = ds
                        .get(Tag::new(0x0010, 0x0020))
                        .and_then(|e| e.as_str())
                        .unwrap_or("");
                    let outcome = apply_policy(ds, policy, &PatientKey::derive(pid, secret));
                    records.extend(outcome.map_records(secret));
                    out.push(outcome.dataset);
                }
                if let Some(p) = uid_log {
                    UidMapLog::new(p)
                        .append(&records)
                        .map_err(|e| PacsError::Transport(e.to_string()))?;
                }
                out
            }
        };
        let violations: Vec<_> = datasets.iter().flat_map(audit_phi).collect();
        if let Some(v) = violations.first() {
            return Err(PacsError::PhiDetected {
                count: violations.len(),
                first: v.tag,
            });
        }
        Ok(datasets)
    }

    /// Searches through the cache in `dir`. A hit makes no request; a miss
    /// or a corrupt entry fetches, gates and atomically rewrites the entry.
    pub fn cached_search(&self, query: &QidoQuery, dir: &Path) -> Result<Vec<DataSet>, PacsError> {
        query.validate(self.cfg.max_limit)?;
        let key = query.hash();
        match cache_lookup(query, dir) {
            Ok(Some(hit)) => {
                self.log_access(&key, hit.len(), Source::Cache)?;
                return Ok(hit);
            }
            Ok(None) => {}
            Err(PacsError::CacheCorrupt(p)) => {
                log::warn!("cache entry {} is corrupt; refetching", p.display());
            }
            Err(e) => return Err(e),
        }
        let fetched = self.gate(self.qido_search(query)?)?;
        let payload = serde_json::to_string_pretty(&serde_json::Value::Array(
            fetched.iter().map(dataset_to_json).collect(),
        ))
        .expect("JSON values always serialize");
        fs::create_dir_all(dir)?;
        write_atomic(&cache_path(dir, &key), payload.as_bytes())?;
        let index = serde_json::json!({
            "key": key,
            "query": query.canonical(),
            "count": fetched.len(),
            "stored": chrono::Utc::now().to_rfc3339(),
        });
        let _guard = self.log_lock.lock().unwrap_or_else(|p| p.into_inner());
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("index.ndjson"))?
            .write_all(format!("{index}\n").as_bytes())?;
        Ok(fetched)
    }
}

impl HeaderSource for QidoClient {
    fn search(&self, query: &QidoQuery) -> Result<Vec<DataSet>, PacsError> {
        self.qido_search(query)
    }

    fn metadata(&self, base: &str, study_uid: &str) -> Result<Vec<DataSet>, PacsError> {
        self.wado_metadata(base, study_uid)
    }
}

fn transport(e: ureq::Error) -> PacsError {
    match e {
        ureq::Error::Timeout(_) => PacsError::Timeout,
        ureq::Error::StatusCode(s) => PacsError::HttpError(s),
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => PacsError::Timeout,
        other => PacsError::Transport(other.to_string()),
    }
}

pub fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

/// `Ok(None)` on a miss; `CacheCorrupt` when the entry does not parse.
pub fn cache_lookup(query: &QidoQuery, dir: &Path) -> Result<Option<Vec<DataSet>>, PacsError> {
    let path = cache_path(dir, &query.hash());
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) if e.kind() == std::io::ErrorKind::InvalidData => return Err(PacsError::CacheCorrupt(path)),
        Err(e) => return Err(e.into()),
    };
    parse_dicom_json_list(&text)
        .map(Some)
        .map_err(|_| PacsError::CacheCorrupt(path))
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PacsError> {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp.{}.{n}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests;
