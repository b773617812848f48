//! Seeded synthetic e-commerce world.
//!
//! Users belong to hidden archetypes that fix their category affinity and
//! typical attributes. Interaction volume follows a Zipf law over a random
//! user ranking; purchases are a concave thinning of that volume, so the
//! purchase counts of the sparse tail stay non-trivial. Conversion labels are
//! drawn from `sigmoid(bias + affinity + popularity)`.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::seed::stage_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_archetypes: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    /// Total time units; the last one is the evaluation period.
    pub n_days: usize,
    /// Purchases and queries fall in `[0, history_days)`.
    pub history_days: usize,
    /// Zipf exponent of the interaction-volume law.
    pub zipf_exponent: f64,
    /// Interaction volume of the rank-1 user.
    pub max_interactions: f64,
    /// Expected purchases = `purchase_scale * interactions^purchase_exponent`.
    pub purchase_scale: f64,
    pub purchase_exponent: f64,
    /// Probability a purchase or query ignores the archetype affinity.
    pub noise_rate: f64,
    /// Size of each archetype's affinity support.
    pub core_categories: usize,
    /// Probability an observed attribute takes the archetype's canonical value.
    pub attribute_fidelity: f64,
    pub missing_rate_low: f64,
    pub missing_rate_high: f64,
    /// Fraction of users (by purchase count) generated with the higher missing rate.
    pub low_activity_quantile: f64,
    pub query_rate: f64,
    /// Queries fall in the last `query_span` units of the history.
    pub query_span: f64,
    /// Expected training impressions per user per unit are
    /// `impression_rate_base * (1 + ln(1 + purchases))`.
    pub impression_rate_base: f64,
    /// Impressions per user in the final (evaluation) unit.
    pub eval_impressions: usize,
    /// Share of impressions whose category follows the archetype affinity.
    pub relevant_impression_share: f64,
    pub base_logit: f64,
    pub affinity_weight: f64,
    pub popularity_weight: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_archetypes: 200,
            n_users: 5000,
            n_items: 2000,
            n_categories: 50,
            n_days: 14,
            history_days: 13,
            zipf_exponent: 1.2,
            max_interactions: 10000.0,
            purchase_scale: 2.23,
            purchase_exponent: 0.8,
            noise_rate: 0.1,
            core_categories: 4,
            attribute_fidelity: 0.7,
            missing_rate_low: 0.35,
            missing_rate_high: 0.10,
            low_activity_quantile: 0.55,
            query_rate: 4.0,
            query_span: 7.0,
            impression_rate_base: 0.2,
            eval_impressions: 8,
            relevant_impression_share: 0.5,
            base_logit: -2.5,
            affinity_weight: 2.5,
            popularity_weight: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("world: {m}")));
        if self.n_archetypes == 0 || self.n_users == 0 || self.n_items == 0 || self.n_categories == 0 {
            return bad("counts must be positive");
        }
        if self.n_items < self.n_categories {
            return bad("need at least one item per category");
        }
        if self.history_days == 0 || self.history_days >= self.n_days {
            return bad("history_days must be in [1, n_days)");
        }
        if !(self.zipf_exponent > 0.0) {
            return bad("zipf_exponent must be > 0");
        }
        if self.core_categories == 0 || self.core_categories > self.n_categories {
            return bad("core_categories must be in [1, n_categories]");
        }
        for (name, p) in [
            ("noise_rate", self.noise_rate),
            ("attribute_fidelity", self.attribute_fidelity),
            ("missing_rate_low", self.missing_rate_low),
            ("missing_rate_high", self.missing_rate_high),
            ("relevant_impression_share", self.relevant_impression_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must be a probability"));
            }
        }
        if !(self.low_activity_quantile > 0.0 && self.low_activity_quantile < 1.0) {
            return bad("low_activity_quantile must be in (0, 1)");
        }
        if self.max_interactions < 1.0 || self.purchase_scale < 0.0 || self.query_rate < 0.0 {
            return bad("rates must be nonnegative");
        }
        if self.query_span <= 0.0 || self.query_span > self.history_days as f64 {
            return bad("query_span must be in (0, history_days]");
        }
        if self.eval_impressions == 0 {
            return bad("eval_impressions must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Discrete { cardinality: u32 },
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeField {
    pub name: String,
    pub kind: FieldKind,
}

/// Attribute schema used by the generator. Field order is the order of
/// `UserRecord::attributes`.
pub fn attribute_schema() -> Vec<AttributeField> {
    let d = |name: &str, c| AttributeField {
        name: name.into(),
        kind: FieldKind::Discrete { cardinality: c },
    };
    vec![
        d("gender", 2),
        d("age_band", 7),
        d("city_tier", 5),
        d("device", 4),
        AttributeField {
            name: "spend_level".into(),
            kind: FieldKind::Continuous,
        },
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Discrete(u32),
    Continuous(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Archetype {
    pub id: usize,
    pub category_affinity: Vec<f64>,
    pub attribute_profile: Vec<AttrValue>,
    pub conversion_bias: f64,
}

impl Archetype {
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.category_affinity
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(c, _)| c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Purchase {
    pub item_id: usize,
    pub category_id: usize,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchQuery {
    pub tokens: Vec<String>,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: usize,
    /// Ground truth; never fed to a model.
    pub archetype_id: usize,
    /// One slot per schema field, `None` when missing.
    pub attributes: Vec<Option<AttrValue>>,
    pub purchase_log: Vec<Purchase>,
    pub search_queries: Vec<SearchQuery>,
    /// Total interaction volume (clicks and views) behind the Zipf law.
    pub interaction_count: u64,
    pub activity_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub item_id: usize,
    pub category_id: usize,
    pub popularity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impression {
    pub user_id: usize,
    pub item_id: usize,
    pub timestamp: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub schema: Vec<AttributeField>,
    pub archetypes: Vec<Archetype>,
    pub items: Vec<Item>,
    pub users: Vec<UserRecord>,
    pub impressions: Vec<Impression>,
}

pub fn category_token(c: usize) -> String {
    format!("cat{c:02}")
}

fn random_attr<R: Rng>(kind: FieldKind, rng: &mut R) -> AttrValue {
    match kind {
        FieldKind::Discrete { cardinality } => AttrValue::Discrete(rng.random_range(0..cardinality)),
        FieldKind::Continuous => AttrValue::Continuous(rng.random::<f64>()),
    }
}

/// Flags the `floor(quantile * N)` users with the lowest activity; ties are
/// broken by ascending user id.
pub fn label_low_activity(users: &[UserRecord], quantile: f64) -> Vec<bool> {
    let counts: Vec<usize> = users.iter().map(|u| u.activity_count).collect();
    let ids: Vec<usize> = users.iter().map(|u| u.user_id).collect();
    lowest_fraction(&counts, &ids, quantile)
}

pub(crate) fn lowest_fraction(counts: &[usize], ids: &[usize], quantile: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&i| (counts[i], ids[i]));
    let n_low = (quantile * counts.len() as f64).floor() as usize;
    let mut flags = vec![false; counts.len()];
    for &i in order.iter().take(n_low) {
        flags[i] = true;
    }
    flags
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let schema = attribute_schema();
    let n_cat = config.n_categories;

    let mut rng = stage_rng(seed, "world/items");
    let mut cats: Vec<usize> = (0..config.n_items)
        .map(|i| if i < n_cat { i } else { rng.random_range(0..n_cat) })
        .collect();
    cats.shuffle(&mut rng);
    let pop_dist = Normal::<f64>::new(0.0, 1.0).expect("unit normal");
    let items: Vec<Item> = cats
        .iter()
        .enumerate()
        .map(|(item_id, &category_id)| Item {
            item_id,
            category_id,
            popularity: pop_dist.sample(&mut rng).exp(),
        })
        .collect();
    let mut by_category: Vec<Vec<usize>> = vec![Vec::new(); n_cat];
    for it in &items {
        by_category[it.category_id].push(it.item_id);
    }
    let item_samplers: Vec<WeightedIndex<f64>> = by_category
        .iter()
        .map(|ids| WeightedIndex::new(ids.iter().map(|&i| items[i].popularity)).expect("nonempty category"))
        .collect();

    let mut rng = stage_rng(seed, "world/archetypes");
    let archetypes: Vec<Archetype> = (0..config.n_archetypes)
        .map(|id| {
            let mut all: Vec<usize> = (0..n_cat).collect();
            all.shuffle(&mut rng);
            let mut affinity = vec![0.0; n_cat];
            let draws: Vec<f64> = (0..config.core_categories).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            for (&c, w) in all.iter().zip(&draws) {
                affinity[c] = w / total;
            }
            let attribute_profile = schema.iter().map(|f| random_attr(f.kind, &mut rng)).collect();
            let conversion_bias = rng.random_range(-0.3..0.3);
            Archetype {
                id,
                category_affinity: affinity,
                attribute_profile,
                conversion_bias,
            }
        })
        .collect();
    let affinity_samplers: Vec<WeightedIndex<f64>> = archetypes
        .iter()
        .map(|a| WeightedIndex::new(&a.category_affinity).expect("affinity sums to 1"))
        .collect();

    // Interaction volume by Zipf rank over a random user order.
    let mut rng = stage_rng(seed, "world/activity");
    let mut ranks: Vec<usize> = (1..=config.n_users).collect();
    ranks.shuffle(&mut rng);
    let interactions: Vec<u64> = ranks.iter().map(|&r| zipf_volume(config, r)).collect();
    let activity: Vec<usize> = interactions
        .iter()
        .map(|&v| {
            let mean = config.purchase_scale * (v as f64).powf(config.purchase_exponent);
            if mean <= 0.0 {
                0
            } else {
                Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize
            }
        })
        .collect();
    let ids: Vec<usize> = (0..config.n_users).collect();
    let sparse = lowest_fraction(&activity, &ids, config.low_activity_quantile);

    let mut rng = stage_rng(seed, "world/users");
    let history = config.history_days as f64;
    let mut users = Vec::with_capacity(config.n_users);
    for user_id in 0..config.n_users {
        let archetype_id = rng.random_range(0..config.n_archetypes);
        let arch = &archetypes[archetype_id];
        let missing = if sparse[user_id] {
            config.missing_rate_low
        } else {
            config.missing_rate_high
        };
        let attributes = schema
            .iter()
            .zip(&arch.attribute_profile)
            .map(|(field, &canon)| {
                if rng.random::<f64>() < missing {
                    return None;
                }
                let faithful = rng.random::<f64>() < config.attribute_fidelity;
                Some(match (field.kind, canon) {
                    (FieldKind::Continuous, AttrValue::Continuous(c)) if faithful => {
                        AttrValue::Continuous((c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
                    }
                    _ if faithful => canon,
                    (kind, _) => random_attr(kind, &mut rng),
                })
            })
            .collect();

        let draw_category = |rng: &mut ChaCha8Rng| {
            if rng.random::<f64>() < config.noise_rate {
                rng.random_range(0..n_cat)
            } else {
                affinity_samplers[archetype_id].sample(rng)
            }
        };
        let mut purchase_log: Vec<Purchase> = (0..activity[user_id])
            .map(|_| {
                let category_id = draw_category(&mut rng);
                let item_id = by_category[category_id][item_samplers[category_id].sample(&mut rng)];
                Purchase {
                    item_id,
                    category_id,
                    timestamp: rng.random_range(0.0..history),
                }
            })
            .collect();
        purchase_log.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

        let n_queries = if config.query_rate > 0.0 {
            Poisson::new(config.query_rate).expect("positive rate").sample(&mut rng) as usize
        } else {
            0
        };
        let mut search_queries: Vec<SearchQuery> = (0..n_queries)
            .map(|_| {
                let n_tokens = rng.random_range(1..=2);
                let tokens = (0..n_tokens).map(|_| category_token(draw_category(&mut rng))).collect();
                SearchQuery {
                    tokens,
                    timestamp: rng.random_range(history - config.query_span..history),
                }
            })
            .collect();
        search_queries.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));

        users.push(UserRecord {
            user_id,
            archetype_id,
            attributes,
            activity_count: purchase_log.len(),
            purchase_log,
            search_queries,
            interaction_count: interactions[user_id],
        });
    }

    let mut rng = stage_rng(seed, "world/impressions");
    let log_pop: Vec<f64> = items.iter().map(|i| i.popularity.ln()).collect();
    let mean_lp = log_pop.iter().sum::<f64>() / log_pop.len() as f64;
    let std_lp = (log_pop.iter().map(|x| (x - mean_lp).powi(2)).sum::<f64>() / log_pop.len() as f64)
        .sqrt()
        .max(1e-12);
    let mut impressions = Vec::new();
    for u in &users {
        let arch = &archetypes[u.archetype_id];
        let rate = config.impression_rate_base * (1.0 + (u.activity_count as f64).ln_1p());
        let emit = |rng: &mut ChaCha8Rng, timestamp: f64| {
            let category = if rng.random::<f64>() < config.relevant_impression_share {
                affinity_samplers[u.archetype_id].sample(rng)
            } else {
                rng.random_range(0..n_cat)
            };
            let item_id = by_category[category][item_samplers[category].sample(rng)];
            let logit = config.base_logit
                + arch.conversion_bias
                + config.affinity_weight * (arch.category_affinity[category] * config.core_categories as f64).sqrt()
                + config.popularity_weight * (log_pop[item_id] - mean_lp) / std_lp;
            let p = 1.0 / (1.0 + (-logit).exp());
            let label = u8::from(rng.random::<f64>() < p);
            Impression {
                user_id: u.user_id,
                item_id,
                timestamp,
                label,
            }
        };
        for day in 0..config.history_days {
            let n = if rate > 0.0 {
                Poisson::new(rate).expect("positive rate").sample(&mut rng) as usize
            } else {
                0
            };
            for _ in 0..n {
                let t = day as f64 + rng.random::<f64>();
                impressions.push(emit(&mut rng, t));
            }
        }
        for day in config.history_days..config.n_days {
            for _ in 0..config.eval_impressions {
                let t = day as f64 + rng.random::<f64>();
                impressions.push(emit(&mut rng, t));
            }
        }
    }
    impressions.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.user_id.cmp(&b.user_id)));

    Ok(World {
        config: config.clone(),
        schema,
        archetypes,
        items,
        users,
        impressions,
    })
}

fn zipf_volume(config: &WorldConfig, rank: usize) -> u64 {
    (config.max_interactions * (rank as f64).powf(-config.zipf_exponent))
        .round()
        .max(1.0) as u64
}

/// Temporal split: the first `train_units` of every `train_units + test_units`
/// integer time units go to training.
pub fn split_train_test(
    impressions: &[Impression],
    train_units: usize,
    test_units: usize,
) -> Result<(Vec<Impression>, Vec<Impression>)> {
    if impressions.is_empty() || train_units == 0 || test_units == 0 {
        return Err(Error::Degenerate("split: nothing to split".into()));
    }
    let first = impressions
        .iter()
        .map(|i| i.timestamp)
        .fold(f64::INFINITY, f64::min)
        .floor();
    let last = impressions
        .iter()
        .map(|i| i.timestamp)
        .fold(f64::NEG_INFINITY, f64::max)
        .floor();
    let span = (last - first) as usize + 1;
    let train_span = ((span * train_units) as f64 / (train_units + test_units) as f64).round() as usize;
    let cutoff = first + train_span as f64;
    let (train, test): (Vec<Impression>, Vec<Impression>) = impressions.iter().partition(|i| i.timestamp < cutoff);
    if train.is_empty() {
        return Err(Error::Degenerate("split: empty training side".into()));
    }
    if test.is_empty() {
        return Err(Error::Degenerate("split: empty test side".into()));
    }
    Ok((train, test))
}

/// Share of total interaction volume held by the top `fraction` of users.
pub fn top_share(users: &[UserRecord], fraction: f64) -> f64 {
    let mut v: Vec<u64> = users.iter().map(|u| u.interaction_count).collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    let k = (fraction * v.len() as f64).round() as usize;
    let total: u64 = v.iter().sum();
    v[..k].iter().sum::<u64>() as f64 / total as f64
}

impl World {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        jsonl::write_records(&dir.join("archetypes.jsonl"), &self.archetypes)?;
        jsonl::write_records(&dir.join("items.jsonl"), &self.items)?;
        jsonl::write_records(&dir.join("users.jsonl"), &self.users)?;
        jsonl::write_records(&dir.join("impressions.jsonl"), &self.impressions)?;
        Ok(())
    }

    pub fn read(dir: &Path, config: &WorldConfig) -> Result<World> {
        Ok(World {
            config: config.clone(),
            schema: attribute_schema(),
            archetypes: jsonl::read_records(&dir.join("archetypes.jsonl"))?,
            items: jsonl::read_records(&dir.join("items.jsonl"))?,
            users: jsonl::read_records(&dir.join("users.jsonl"))?,
            impressions: jsonl::read_records(&dir.join("impressions.jsonl"))?,
        })
    }

    pub fn item_category(&self, item: usize) -> usize {
        self.items[item].category_id
    }
}
