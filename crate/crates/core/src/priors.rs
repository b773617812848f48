//! Group-level priors: the hierarchy-aware group ID network, attribute
//! completion from group statistics, and group behavior sequences.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::grouper::GroupCode;
use crate::jsonl;
use crate::synthworld::{AttrValue, AttributeField, FieldKind, UserRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorsConfig {
    /// Categories kept for a group sequence.
    pub top_categories: usize,
    pub sequence_len: usize,
    /// Groups smaller than this borrow the statistics of their parent prefix.
    pub min_group_size: usize,
    /// Per-level code embedding width.
    pub id_dim: usize,
    /// Output width of the fused group ID.
    pub group_dim: usize,
}

impl Default for PriorsConfig {
    fn default() -> Self {
        PriorsConfig {
            top_categories: 10,
            sequence_len: 50,
            min_group_size: 5,
            id_dim: 16,
            group_dim: 32,
        }
    }
}

/// Per-level code tables, prefix fusion layers and the aggregation MLP.
#[derive(Clone, Debug)]
pub struct GroupIdFusionNet {
    pub levels: usize,
    pub codebook_size: usize,
    pub id_dim: usize,
    pub group_dim: usize,
    pub tables: Vec<ParamId>,
    /// `fuse[l - 1]` combines level `l` with the fused level `l - 1` (l >= 1).
    pub fuse: Vec<Linear>,
    pub hidden: Linear,
    pub out: Linear,
}

impl GroupIdFusionNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        levels: usize,
        codebook_size: usize,
        id_dim: usize,
        group_dim: usize,
        rng: &mut R,
    ) -> Self {
        let tables = (0..levels)
            .map(|l| {
                store.add(
                    format!("{name}.table{}", l + 1),
                    Tensor::uniform(&[codebook_size, id_dim], 0.1, rng),
                )
            })
            .collect();
        let fuse = (1..levels)
            .map(|l| Linear::new(store, &format!("{name}.fuse{}", l + 1), 2 * id_dim, id_dim, rng))
            .collect();
        let width = 2 * levels * id_dim;
        let hidden = Linear::new(store, &format!("{name}.mlp1"), levels * id_dim, width, rng);
        let out = Linear::new(store, &format!("{name}.mlp2"), width, group_dim, rng);
        GroupIdFusionNet {
            levels,
            codebook_size,
            id_dim,
            group_dim,
            tables,
            fuse,
            hidden,
            out,
        }
    }

    /// Per-level fused embeddings, each `[n, id_dim]`.
    pub fn fused_levels(&self, g: &mut Graph, store: &ParamStore, codes: &[GroupCode]) -> Result<Vec<Var>> {
        for c in codes {
            if c.len() != self.levels || c.0.iter().any(|&k| k >= self.codebook_size) {
                return Err(Error::InvalidArgument(format!(
                    "group code {c} does not fit {} levels of {} codes",
                    self.levels, self.codebook_size
                )));
            }
        }
        let mut levels = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            let idx: Rc<[usize]> = codes.iter().map(|c| c.0[l]).collect();
            let table = g.param(store, self.tables[l]);
            let base = g.gather(table, idx)?;
            let fused = if l == 0 {
                base
            } else {
                let x = g.concat(&[levels[l - 1], base], 1)?;
                let z = self.fuse[l - 1].forward(g, store, x)?;
                g.tanh(z)
            };
            levels.push(fused);
        }
        Ok(levels)
    }

    /// Unit-norm fused group ID embedding, `[n, group_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, codes: &[GroupCode]) -> Result<Var> {
        let levels = self.fused_levels(g, store, codes)?;
        let cat = g.concat(&levels, 1)?;
        let h = self.hidden.forward(g, store, cat)?;
        let h = g.relu(h);
        let o = self.out.forward(g, store, h)?;
        Ok(g.l2_normalize(o))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAttributePrior {
    /// Representative value per schema field; `None` when no member has it.
    pub values: Vec<Option<AttrValue>>,
    pub member_count: usize,
}

pub fn complete_attributes(members: &[&UserRecord], schema: &[AttributeField]) -> GroupAttributePrior {
    let values = schema
        .iter()
        .enumerate()
        .map(|(f, field)| match field.kind {
            FieldKind::Discrete { .. } => {
                let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
                for m in members {
                    if let Some(Some(AttrValue::Discrete(v))) = m.attributes.get(f) {
                        *counts.entry(*v).or_default() += 1;
                    }
                }
                // max_by_key keeps the last maximum; iterate descending so the
                // smallest value wins ties.
                counts
                    .iter()
                    .rev()
                    .max_by_key(|(_, &n)| n)
                    .map(|(&v, _)| AttrValue::Discrete(v))
            }
            FieldKind::Continuous => {
                let mut xs: Vec<f64> = members
                    .iter()
                    .filter_map(|m| match m.attributes.get(f) {
                        Some(Some(AttrValue::Continuous(x))) => Some(*x),
                        _ => None,
                    })
                    .collect();
                if xs.is_empty() {
                    None
                } else {
                    xs.sort_by(f64::total_cmp);
                    Some(AttrValue::Continuous(xs.iter().sum::<f64>() / xs.len() as f64))
                }
            }
        })
        .collect();
    GroupAttributePrior {
        values,
        member_count: members.len(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Own,
    Group,
    Absent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletedAttributes {
    pub values: Vec<Option<AttrValue>>,
    pub provenance: Vec<Provenance>,
}

pub fn apply_attribute_completion(user: &UserRecord, prior: &GroupAttributePrior) -> CompletedAttributes {
    let (values, provenance) = user
        .attributes
        .iter()
        .zip(&prior.values)
        .map(|(own, group)| match (own, group) {
            (Some(v), _) => (Some(*v), Provenance::Own),
            (None, Some(v)) => (Some(*v), Provenance::Group),
            (None, None) => (None, Provenance::Absent),
        })
        .unzip();
    CompletedAttributes { values, provenance }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceItem {
    pub item_id: usize,
    pub category_id: usize,
    pub avg_timestamp: f64,
}

/// Popular items from the group's most purchased categories, oldest first.
pub fn build_group_sequence(members: &[&UserRecord], top_categories: usize, max_len: usize) -> Vec<SequenceItem> {
    let mut cat_counts: HashMap<usize, usize> = HashMap::new();
    let mut item_times: HashMap<usize, (usize, Vec<f64>)> = HashMap::new();
    for m in members {
        for p in &m.purchase_log {
            *cat_counts.entry(p.category_id).or_default() += 1;
            item_times
                .entry(p.item_id)
                .or_insert_with(|| (p.category_id, Vec::new()))
                .1
                .push(p.timestamp);
        }
    }
    let mut cats: Vec<(usize, usize)> = cat_counts.into_iter().collect();
    cats.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let keep: Vec<usize> = cats.iter().take(top_categories).map(|c| c.0).collect();

    let mut items: Vec<(usize, usize, Vec<f64>)> = item_times
        .into_iter()
        .filter(|(_, (c, _))| keep.contains(c))
        .map(|(i, (c, ts))| (i, c, ts))
        .collect();
    items.sort_by(|a, b| b.2.len().cmp(&a.2.len()).then(a.0.cmp(&b.0)));
    items.truncate(max_len);
    let mut seq: Vec<SequenceItem> = items
        .into_iter()
        .map(|(item_id, category_id, mut ts)| {
            ts.sort_by(f64::total_cmp);
            SequenceItem {
                item_id,
                category_id,
                avg_timestamp: ts.iter().sum::<f64>() / ts.len() as f64,
            }
        })
        .collect();
    seq.sort_by(|a, b| {
        a.avg_timestamp
            .total_cmp(&b.avg_timestamp)
            .then(a.item_id.cmp(&b.item_id))
    });
    seq
}

/// Group used for statistics: the full code when it has at least `min_size`
/// members, else the longest prefix that does. The one-level prefix is used
/// regardless of size.
pub fn resolve_groups(codes: &[GroupCode], min_size: usize) -> Vec<GroupCode> {
    let levels = codes.first().map_or(0, GroupCode::len);
    let mut counts: HashMap<GroupCode, usize> = HashMap::new();
    for c in codes {
        for l in 1..=levels {
            *counts.entry(c.prefix(l)).or_default() += 1;
        }
    }
    codes
        .iter()
        .map(|c| {
            (1..=levels)
                .rev()
                .map(|l| c.prefix(l))
                .find(|p| p.len() == 1 || counts[p] >= min_size)
                .unwrap_or_else(|| c.clone())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPriors {
    pub code: GroupCode,
    pub attributes: GroupAttributePrior,
    pub sequence: Vec<SequenceItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Membership {
    pub user_id: usize,
    /// Full hierarchical code.
    pub code: GroupCode,
    /// Group whose statistics the user receives.
    pub prior_group: GroupCode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    pub groups: BTreeMap<GroupCode, GroupPriors>,
    /// Indexed by position in the user list.
    pub membership: Vec<Membership>,
}

impl PriorSet {
    pub fn build(
        users: &[UserRecord],
        codes: &[GroupCode],
        schema: &[AttributeField],
        config: &PriorsConfig,
    ) -> Result<PriorSet> {
        if users.len() != codes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} users but {} group codes",
                users.len(),
                codes.len()
            )));
        }
        let resolved = resolve_groups(codes, config.min_group_size);
        let mut members: BTreeMap<GroupCode, Vec<&UserRecord>> = BTreeMap::new();
        for (u, g) in users.iter().zip(&resolved) {
            members.entry(g.clone()).or_default().push(u);
        }
        let groups = members
            .into_iter()
            .map(|(code, ms)| {
                let p = GroupPriors {
                    code: code.clone(),
                    attributes: complete_attributes(&ms, schema),
                    sequence: build_group_sequence(&ms, config.top_categories, config.sequence_len),
                };
                (code, p)
            })
            .collect();
        let membership = users
            .iter()
            .zip(codes)
            .zip(resolved)
            .map(|((u, c), g)| Membership {
                user_id: u.user_id,
                code: c.clone(),
                prior_group: g,
            })
            .collect();
        Ok(PriorSet { groups, membership })
    }

    pub fn prior_for(&self, group: &GroupCode) -> Result<&GroupPriors> {
        self.groups
            .get(group)
            .ok_or_else(|| Error::MissingPrior(group.to_string()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        jsonl::write_records(&dir.join("priors.jsonl"), self.groups.values())?;
        jsonl::write_records(&dir.join("membership.jsonl"), &self.membership)
    }

    pub fn read(dir: &Path) -> Result<PriorSet> {
        let groups: Vec<GroupPriors> = jsonl::read_records(&dir.join("priors.jsonl"))?;
        Ok(PriorSet {
            groups: groups.into_iter().map(|g| (g.code.clone(), g)).collect(),
            membership: jsonl::read_records(&dir.join("membership.jsonl"))?,
        })
    }
}
