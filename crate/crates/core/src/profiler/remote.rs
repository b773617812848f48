//! HTTP embedding client with batching, bounded concurrency, retries and a
//! content-addressed JSONL cache.
//!
//! Request body: `{"model": "<name>", "input": ["text", ...]}`.
//! Accepted responses: `{"embeddings": [[f64, ...], ...]}` in input order, or
//! the `{"data": [{"index": i, "embedding": [...]}, ...]}` layout.
//! When the environment variable named by `api_key_env` is set, its value is
//! sent as a bearer token.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    /// Extra attempts per batch after the first failure.
    pub retry_budget: u32,
    pub batch_size: usize,
    /// First backoff delay; doubles on every retry.
    pub backoff_ms: u64,
    pub cache_path: Option<PathBuf>,
    pub api_key_env: String,
}

impl Default for EmbeddingClientConfig {
    fn default() -> Self {
        EmbeddingClientConfig {
            endpoint: "http://127.0.0.1:8080/v1/embeddings".into(),
            model: "text-embedding".into(),
            timeout_secs: 30.0,
            max_in_flight: 4,
            retry_budget: 3,
            batch_size: 32,
            backoff_ms: 200,
            cache_path: None,
            api_key_env: "GROUPCVR_EMBED_API_KEY".into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    content_hash: String,
    dim: usize,
    vector: Vec<f64>,
}

/// Append-only cache keyed by the SHA-256 of `model || 0x00 || text`.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    path: Option<PathBuf>,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let mut entries = HashMap::new();
        if let Some(p) = path.filter(|p| p.exists()) {
            let corrupt = |line: usize, reason: String| Error::CacheCorrupt {
                path: p.to_path_buf(),
                reason: format!("line {line}: {reason}"),
            };
            for (i, line) in BufReader::new(File::open(p)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| corrupt(i + 1, e.to_string()))?;
                if rec.vector.len() != rec.dim || rec.dim == 0 {
                    return Err(corrupt(
                        i + 1,
                        format!("dim {} but {} values", rec.dim, rec.vector.len()),
                    ));
                }
                entries.insert(rec.content_hash, rec.vector);
            }
        }
        Ok(EmbeddingCache {
            path: path.map(Path::to_path_buf),
            entries,
        })
    }

    pub fn get(&self, hash: &str) -> Option<&Vec<f64>> {
        self.entries.get(hash)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores new entries in memory and appends them to the cache file.
    pub fn extend(&mut self, new: Vec<(String, Vec<f64>)>) -> Result<()> {
        if let Some(p) = &self.path {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?);
            for (hash, v) in &new {
                let rec = CacheRecord {
                    content_hash: hash.clone(),
                    dim: v.len(),
                    vector: v.clone(),
                };
                serde_json::to_writer(&mut w, &rec)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
        }
        self.entries.extend(new);
        Ok(())
    }
}

pub fn content_hash(model: &str, text: &str) -> String {
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0u8]);
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct EmbeddingClient {
    config: EmbeddingClientConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl EmbeddingClient {
    pub fn new(config: EmbeddingClientConfig) -> Result<Self> {
        if config.max_in_flight == 0 || config.batch_size == 0 {
            return Err(Error::Config(
                "embedding client needs max_in_flight >= 1 and batch_size >= 1".into(),
            ));
        }
        if !(config.timeout_secs > 0.0) {
            return Err(Error::Config("embedding client timeout must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .build()
            .into();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(EmbeddingClient { config, agent, api_key })
    }

    /// Embeds `(user_id, text)` pairs, returning vectors in input order.
    pub fn embed(&self, texts: &[(usize, String)]) -> Result<Vec<Vec<f64>>> {
        let mut cache = EmbeddingCache::open(self.config.cache_path.as_deref())?;
        let hashes: Vec<String> = texts.iter().map(|(_, t)| content_hash(&self.config.model, t)).collect();

        let mut pending: Vec<usize> = Vec::new();
        let mut seen = HashMap::new();
        for (i, h) in hashes.iter().enumerate() {
            if cache.get(h).is_none() && !seen.contains_key(h) {
                seen.insert(h.clone(), i);
                pending.push(i);
            }
        }
        let batches: Vec<&[usize]> = pending.chunks(self.config.batch_size).collect();
        let results: Mutex<Vec<Option<Result<Vec<Vec<f64>>>>>> = Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(batches.len());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let b = next.fetch_add(1, Ordering::SeqCst);
                    if b >= batches.len() {
                        break;
                    }
                    let inputs: Vec<&str> = batches[b].iter().map(|&i| texts[i].1.as_str()).collect();
                    let out = self.request_with_retry(&inputs).map_err(|reason| Error::Embedding {
                        user_id: texts[batches[b][0]].0,
                        reason,
                    });
                    results.lock().expect("no poisoned workers")[b] = Some(out);
                });
            }
        });

        let mut fresh = Vec::with_capacity(pending.len());
        for (batch, res) in batches.iter().zip(results.into_inner().expect("workers joined")) {
            let vectors = res.expect("every batch ran")?;
            for (&i, v) in batch.iter().zip(vectors) {
                fresh.push((hashes[i].clone(), v));
            }
        }
        cache.extend(fresh)?;
        hashes
            .iter()
            .zip(texts)
            .map(|(h, (user_id, _))| {
                cache.get(h).cloned().ok_or_else(|| Error::Embedding {
                    user_id: *user_id,
                    reason: "no vector after encoding".into(),
                })
            })
            .collect()
    }

    fn request_with_retry(&self, inputs: &[&str]) -> std::result::Result<Vec<Vec<f64>>, String> {
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.request(inputs) {
                Ok(v) => return Ok(v),
                Err((reason, retryable)) => {
                    if !retryable || attempt >= self.config.retry_budget {
                        return Err(format!("{reason} after {} attempt(s)", attempt + 1));
                    }
                }
            }
            std::thread::sleep(delay);
            delay *= 2;
            attempt += 1;
        }
    }

    fn request(&self, inputs: &[&str]) -> std::result::Result<Vec<Vec<f64>>, (String, bool)> {
        let body = serde_json::json!({ "model": self.config.model, "input": inputs });
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| {
            let retryable = match &e {
                ureq::Error::StatusCode(code) => *code == 429 || *code >= 500,
                _ => true,
            };
            (e.to_string(), retryable)
        })?;
        let value: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| (format!("unreadable response: {e}"), true))?;
        parse_embeddings(&value, inputs.len()).map_err(|e| (e, false))
    }
}

fn parse_vector(v: &Value) -> std::result::Result<Vec<f64>, String> {
    let arr = v.as_array().ok_or("embedding is not an array")?;
    arr.iter()
        .map(|x| {
            x.as_f64()
                .filter(|f| f.is_finite())
                .ok_or_else(|| "non-numeric embedding value".to_string())
        })
        .collect()
}

pub(crate) fn parse_embeddings(value: &Value, expected: usize) -> std::result::Result<Vec<Vec<f64>>, String> {
    let vectors: Vec<Vec<f64>> = if let Some(list) = value.get("embeddings").and_then(Value::as_array) {
        list.iter().map(parse_vector).collect::<std::result::Result<_, _>>()?
    } else if let Some(data) = value.get("data").and_then(Value::as_array) {
        let mut rows: Vec<(u64, Vec<f64>)> = data
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let idx = d.get("index").and_then(Value::as_u64).unwrap_or(i as u64);
                let emb = d.get("embedding").ok_or("data entry without `embedding`")?;
                Ok((idx, parse_vector(emb)?))
            })
            .collect::<std::result::Result<_, String>>()?;
        rows.sort_by_key(|r| r.0);
        rows.into_iter().map(|r| r.1).collect()
    } else {
        return Err("response has neither `embeddings` nor `data`".into());
    };
    if vectors.len() != expected {
        return Err(format!("expected {expected} embeddings, got {}", vectors.len()));
    }
    let dim = vectors.first().map_or(0, Vec::len);
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err("embeddings are empty or have mixed dimensions".into());
    }
    Ok(vectors)
}
