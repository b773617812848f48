//! User profile text, profile embeddings and Matryoshka truncation.
//!
//! A profile is kept as structured sections and rendered to text on demand.
//! The offline encoder reads the structure directly, so it is a pure function
//! of the profile content; the remote client sends the rendered text.

mod remote;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::synthworld::{category_token, AttrValue, AttributeField, UserRecord};

pub use remote::{EmbeddingCache, EmbeddingClient, EmbeddingClientConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowBounds {
    /// Reference time; windows reach back from here.
    pub now: f64,
    pub recent: f64,
    pub medium: f64,
    /// Queries older than `now - queries` are dropped.
    pub queries: f64,
}

impl Default for WindowBounds {
    fn default() -> Self {
        WindowBounds {
            now: 13.0,
            recent: 1.0,
            medium: 4.0,
            queries: 7.0,
        }
    }
}

impl WindowBounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.recent > 0.0 && self.recent < self.medium && self.queries > 0.0) {
            return Err(Error::Config(format!(
                "profile windows must satisfy 0 < recent < medium and queries > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

pub const WINDOW_NAMES: [&str; 3] = ["recent", "medium", "long"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileText {
    pub user_id: usize,
    /// `(field, value)` in schema order; `None` renders as `unknown`.
    pub static_attributes: Vec<(String, Option<String>)>,
    /// Category id → purchase count, one map per entry of [`WINDOW_NAMES`].
    pub windowed_behaviors: [BTreeMap<usize, usize>; 3],
    /// Query token → count.
    pub recent_queries: BTreeMap<String, usize>,
}

fn render_attr(v: &AttrValue) -> String {
    match v {
        AttrValue::Discrete(x) => x.to_string(),
        AttrValue::Continuous(x) => format!("{x:.2}"),
    }
}

pub fn build_profile_text(user: &UserRecord, schema: &[AttributeField], bounds: &WindowBounds) -> ProfileText {
    let static_attributes = schema
        .iter()
        .zip(&user.attributes)
        .map(|(f, v)| (f.name.clone(), v.as_ref().map(render_attr)))
        .collect();
    let starts = [
        bounds.now - bounds.recent,
        bounds.now - bounds.medium,
        f64::NEG_INFINITY,
    ];
    let mut windowed_behaviors: [BTreeMap<usize, usize>; 3] = Default::default();
    for p in &user.purchase_log {
        for (w, &start) in starts.iter().enumerate() {
            if p.timestamp >= start {
                *windowed_behaviors[w].entry(p.category_id).or_default() += 1;
            }
        }
    }
    let mut recent_queries = BTreeMap::new();
    for q in &user.search_queries {
        if q.timestamp >= bounds.now - bounds.queries {
            for t in &q.tokens {
                *recent_queries.entry(t.clone()).or_default() += 1;
            }
        }
    }
    ProfileText {
        user_id: user.user_id,
        static_attributes,
        windowed_behaviors,
        recent_queries,
    }
}

impl ProfileText {
    pub fn render(&self) -> String {
        let mut s = String::from("profile\nattributes:");
        for (name, v) in &self.static_attributes {
            let _ = write!(s, " {name}={}", v.as_deref().unwrap_or("unknown"));
        }
        for (name, counts) in WINDOW_NAMES.iter().zip(&self.windowed_behaviors) {
            let _ = write!(s, "\n{name} purchases:");
            if counts.is_empty() {
                s.push_str(" none");
            }
            for (c, n) in counts {
                let _ = write!(s, " {} x{n}", category_token(*c));
            }
        }
        s.push_str("\nrecent queries:");
        if self.recent_queries.is_empty() {
            s.push_str(" none");
        }
        for (t, n) in &self.recent_queries {
            let _ = write!(s, " {t} x{n}");
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Remote,
    OfflineStub,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticEmbedding {
    pub user_id: usize,
    pub source: EmbeddingSource,
    /// Set when the truncated prefix was all zeros; the vector is then zero.
    pub degenerate: bool,
    pub vector: Vec<f64>,
}

/// Keeps the first `target_dim` coordinates and rescales them to unit norm.
/// A zero prefix is returned as zeros with the flag set.
pub fn truncate_matryoshka(vector: &[f64], target_dim: usize) -> Result<(Vec<f64>, bool)> {
    if target_dim == 0 || target_dim > vector.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot truncate a {}-dim vector to {target_dim} dims",
            vector.len()
        )));
    }
    let mut out = vector[..target_dim].to_vec();
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((out, true));
    }
    out.iter_mut().for_each(|x| *x /= norm);
    Ok((out, false))
}

/// Deterministic stand-in for an LLM embedding model.
///
/// Every token gets a fixed Gaussian direction derived from its text. The
/// embedding mixes the normalized interest distribution (long-window purchases
/// plus recent queries, both as category tokens, so the two reinforce each
/// other), the medium-window purchases, and hashed attribute tokens.
#[derive(Clone, Debug)]
pub struct OfflineEncoder {
    pub source_dim: usize,
    pub attribute_weight: f64,
    pub recent_weight: f64,
    directions: HashMap<String, Vec<f64>>,
}

impl OfflineEncoder {
    pub fn new(source_dim: usize) -> Self {
        OfflineEncoder {
            source_dim,
            attribute_weight: 0.3,
            recent_weight: 0.25,
            directions: HashMap::new(),
        }
    }

    fn direction(&mut self, token: &str) -> &[f64] {
        let dim = self.source_dim;
        self.directions.entry(token.to_owned()).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0, &format!("token/{token}")));
            let scale = 1.0 / (dim as f64).sqrt();
            (0..dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>()
        })
    }

    fn add_bag(&mut self, acc: &mut [f64], bag: &BTreeMap<String, f64>, weight: f64) {
        let total: f64 = bag.values().sum();
        if total <= 0.0 {
            return;
        }
        for (tok, &n) in bag {
            let w = weight * n / total;
            let d = self.direction(tok);
            acc.iter_mut().zip(d).for_each(|(a, x)| *a += w * x);
        }
    }

    pub fn encode(&mut self, profile: &ProfileText) -> Vec<f64> {
        let mut interests: BTreeMap<String, f64> = BTreeMap::new();
        for (&c, &n) in &profile.windowed_behaviors[2] {
            *interests.entry(category_token(c)).or_default() += n as f64;
        }
        let n_purchases: f64 = interests.values().sum();
        let n_queries: usize = profile.recent_queries.values().sum();
        for (t, &n) in &profile.recent_queries {
            // Queries count as much as purchases in total once both exist.
            let w = if n_purchases > 0.0 {
                n_purchases / n_queries as f64
            } else {
                1.0
            };
            *interests.entry(t.clone()).or_default() += w * n as f64;
        }
        let mut medium: BTreeMap<String, f64> = BTreeMap::new();
        for (&c, &n) in &profile.windowed_behaviors[1] {
            *medium.entry(category_token(c)).or_default() += n as f64;
        }
        let mut attrs: BTreeMap<String, f64> = BTreeMap::new();
        for (name, v) in &profile.static_attributes {
            let tok = format!("{name}={}", v.as_deref().unwrap_or("unknown"));
            attrs.insert(tok, 1.0);
        }
        if interests.is_empty() {
            interests.insert("<no-history>".into(), 1.0);
        }

        let mut v = vec![0.0; self.source_dim];
        let mut part = vec![0.0; self.source_dim];
        for (bag, weight) in [
            (&interests, 1.0),
            (&medium, self.recent_weight),
            (&attrs, self.attribute_weight),
        ] {
            part.iter_mut().for_each(|x| *x = 0.0);
            self.add_bag(&mut part, bag, 1.0);
            let norm = part.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().zip(&part).for_each(|(a, x)| *a += weight * x / norm);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfilerConfig {
    pub windows: WindowBounds,
    /// Dimension kept after Matryoshka truncation.
    pub embedding_dim: usize,
    /// Native dimension of the offline encoder.
    pub offline_source_dim: usize,
    pub offline: bool,
    pub client: EmbeddingClientConfig,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            windows: WindowBounds::default(),
            embedding_dim: 512,
            offline_source_dim: 1024,
            offline: true,
            client: EmbeddingClientConfig::default(),
        }
    }
}

/// Profiles and embeds every user, in input order.
pub fn encode_users(
    users: &[UserRecord],
    schema: &[AttributeField],
    config: &ProfilerConfig,
) -> Result<Vec<SemanticEmbedding>> {
    config.windows.validate()?;
    let profiles: Vec<ProfileText> = users
        .iter()
        .map(|u| build_profile_text(u, schema, &config.windows))
        .collect();
    let (raw, source) = if config.offline {
        let mut enc = OfflineEncoder::new(config.offline_source_dim);
        (
            profiles.iter().map(|p| enc.encode(p)).collect::<Vec<_>>(),
            EmbeddingSource::OfflineStub,
        )
    } else {
        let client = EmbeddingClient::new(config.client.clone())?;
        let texts: Vec<(usize, String)> = profiles.iter().map(|p| (p.user_id, p.render())).collect();
        (client.embed(&texts)?, EmbeddingSource::Remote)
    };
    profiles
        .iter()
        .zip(raw)
        .map(|(p, v)| {
            let (vector, degenerate) = truncate_matryoshka(&v, config.embedding_dim).map_err(|e| Error::Embedding {
                user_id: p.user_id,
                reason: e.to_string(),
            })?;
            Ok(SemanticEmbedding {
                user_id: p.user_id,
                source,
                degenerate,
                vector,
            })
        })
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
