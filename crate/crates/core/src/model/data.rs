//! Per-user feature bundles and batch assembly.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::grouper::GroupCode;
use crate::priors::{apply_attribute_completion, PriorSet, Provenance};
use crate::synthworld::{AttrValue, FieldKind, Impression, World};

/// Context buckets: day of week.
pub const CONTEXTS: usize = 7;

/// Vocabulary sizes the network is built against.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSpace {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub item_category: Vec<usize>,
    /// Cardinality of each discrete field; index `cardinality` means missing.
    pub discrete_cardinality: Vec<usize>,
    pub n_continuous: usize,
    pub levels: usize,
    pub codebook_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserFeatures {
    pub user_id: usize,
    pub activity: usize,
    pub own_discrete: Vec<usize>,
    /// `(value, missing)` pairs per continuous field.
    pub own_continuous: Vec<f64>,
    /// Most recent purchases, oldest first.
    pub sequence: Vec<usize>,
    pub code: GroupCode,
    pub group_discrete: Vec<usize>,
    pub group_continuous: Vec<f64>,
    /// `(filled from group, absent)` flags per field.
    pub provenance: Vec<f64>,
    pub group_sequence: Vec<usize>,
    /// Log activity, sequence fill ratio, attribute completeness.
    pub reliability: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Example {
    /// Position in the user feature list.
    pub user: usize,
    pub item: usize,
    pub context: usize,
    pub label: f64,
}

fn encode_attrs(values: &[Option<AttrValue>], kinds: &[FieldKind]) -> (Vec<usize>, Vec<f64>) {
    let mut disc = Vec::new();
    let mut cont = Vec::new();
    for (v, k) in values.iter().zip(kinds) {
        match (k, v) {
            (FieldKind::Discrete { .. }, Some(AttrValue::Discrete(x))) => disc.push(*x as usize),
            (FieldKind::Discrete { cardinality }, _) => disc.push(*cardinality as usize),
            (FieldKind::Continuous, Some(AttrValue::Continuous(x))) => cont.extend([*x, 0.0]),
            (FieldKind::Continuous, _) => cont.extend([0.0, 1.0]),
        }
    }
    (disc, cont)
}

impl FeatureSpace {
    pub fn build(world: &World, priors: &PriorSet, max_sequence: usize) -> Result<(FeatureSpace, Vec<UserFeatures>)> {
        let kinds: Vec<FieldKind> = world.schema.iter().map(|f| f.kind).collect();
        let levels = priors.membership.first().map_or(0, |m| m.code.len());
        let codebook_size = priors
            .membership
            .iter()
            .flat_map(|m| m.code.0.iter().copied())
            .max()
            .map_or(1, |k| k + 1);
        let by_id: HashMap<usize, usize> = priors
            .membership
            .iter()
            .enumerate()
            .map(|(i, m)| (m.user_id, i))
            .collect();
        let mut users = Vec::with_capacity(world.users.len());
        for u in &world.users {
            let m = by_id
                .get(&u.user_id)
                .map(|&i| &priors.membership[i])
                .ok_or_else(|| Error::MissingPrior(format!("user {} has no group", u.user_id)))?;
            let prior = priors.prior_for(&m.prior_group)?;
            let (own_discrete, own_continuous) = encode_attrs(&u.attributes, &kinds);
            let completed = apply_attribute_completion(u, &prior.attributes);
            let (group_discrete, group_continuous) = encode_attrs(&completed.values, &kinds);
            let provenance = completed
                .provenance
                .iter()
                .flat_map(|p| [f64::from(*p == Provenance::Group), f64::from(*p == Provenance::Absent)])
                .collect();
            let start = u.purchase_log.len().saturating_sub(max_sequence);
            let sequence: Vec<usize> = u.purchase_log[start..].iter().map(|p| p.item_id).collect();
            let observed = u.attributes.iter().filter(|a| a.is_some()).count();
            let reliability = [
                (u.activity_count as f64).ln_1p() / 5.0,
                sequence.len() as f64 / max_sequence.max(1) as f64,
                observed as f64 / u.attributes.len().max(1) as f64,
            ];
            users.push(UserFeatures {
                user_id: u.user_id,
                activity: u.activity_count,
                own_discrete,
                own_continuous,
                sequence,
                code: m.code.clone(),
                group_discrete,
                group_continuous,
                provenance,
                group_sequence: prior.sequence.iter().map(|s| s.item_id).collect(),
                reliability,
            });
        }
        let space = FeatureSpace {
            n_users: world.users.len(),
            n_items: world.items.len(),
            n_categories: world.config.n_categories,
            item_category: world.items.iter().map(|i| i.category_id).collect(),
            discrete_cardinality: kinds
                .iter()
                .filter_map(|k| match k {
                    FieldKind::Discrete { cardinality } => Some(*cardinality as usize),
                    FieldKind::Continuous => None,
                })
                .collect(),
            n_continuous: kinds.iter().filter(|k| matches!(k, FieldKind::Continuous)).count(),
            levels,
            codebook_size,
        };
        Ok((space, users))
    }
}

/// Maps impressions onto user feature rows.
pub fn examples_from(impressions: &[Impression], users: &[UserFeatures]) -> Result<Vec<Example>> {
    let by_id: HashMap<usize, usize> = users.iter().enumerate().map(|(i, u)| (u.user_id, i)).collect();
    impressions
        .iter()
        .map(|imp| {
            let user = *by_id
                .get(&imp.user_id)
                .ok_or_else(|| Error::InvalidArgument(format!("impression for unknown user {}", imp.user_id)))?;
            Ok(Example {
                user,
                item: imp.item_id,
                context: (imp.timestamp.floor() as usize) % CONTEXTS,
                label: f64::from(imp.label),
            })
        })
        .collect()
}

/// Index arrays and constant features for one minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub len: usize,
    pub users: Rc<[usize]>,
    pub activity: Vec<usize>,
    pub items: Rc<[usize]>,
    pub item_categories: Rc<[usize]>,
    pub contexts: Rc<[usize]>,
    pub labels: Rc<[f64]>,
    pub own_discrete: Vec<Rc<[usize]>>,
    pub own_continuous: Vec<f64>,
    pub seq_items: Rc<[usize]>,
    pub seq_categories: Rc<[usize]>,
    pub seq_offsets: Rc<[usize]>,
    /// Distinct full codes in the batch and each row's index into them.
    pub codes: Vec<GroupCode>,
    pub code_index: Rc<[usize]>,
    pub group_discrete: Vec<Rc<[usize]>>,
    pub group_continuous: Vec<f64>,
    pub provenance: Vec<f64>,
    pub gseq_items: Rc<[usize]>,
    pub gseq_categories: Rc<[usize]>,
    pub gseq_offsets: Rc<[usize]>,
    pub reliability: Vec<f64>,
}

impl Batch {
    pub fn assemble(space: &FeatureSpace, users: &[UserFeatures], examples: &[Example]) -> Batch {
        let n_disc = space.discrete_cardinality.len();
        let mut own_discrete = vec![Vec::with_capacity(examples.len()); n_disc];
        let mut group_discrete = vec![Vec::with_capacity(examples.len()); n_disc];
        let mut own_continuous = Vec::new();
        let mut group_continuous = Vec::new();
        let mut provenance = Vec::new();
        let mut reliability = Vec::new();
        let (mut seq_items, mut seq_offsets) = (Vec::new(), vec![0]);
        let (mut gseq_items, mut gseq_offsets) = (Vec::new(), vec![0]);
        let mut code_ids: BTreeMap<&GroupCode, usize> = BTreeMap::new();
        let mut code_index = Vec::with_capacity(examples.len());
        let mut codes = Vec::new();
        for ex in examples {
            let u = &users[ex.user];
            for f in 0..n_disc {
                own_discrete[f].push(u.own_discrete[f]);
                group_discrete[f].push(u.group_discrete[f]);
            }
            own_continuous.extend_from_slice(&u.own_continuous);
            group_continuous.extend_from_slice(&u.group_continuous);
            provenance.extend_from_slice(&u.provenance);
            reliability.extend_from_slice(&u.reliability);
            seq_items.extend_from_slice(&u.sequence);
            seq_offsets.push(seq_items.len());
            gseq_items.extend_from_slice(&u.group_sequence);
            gseq_offsets.push(gseq_items.len());
            let next = code_ids.len();
            let id = *code_ids.entry(&u.code).or_insert_with(|| {
                codes.push(u.code.clone());
                next
            });
            code_index.push(id);
        }
        let cat = |items: &[usize]| -> Rc<[usize]> { items.iter().map(|&i| space.item_category[i]).collect() };
        let items: Vec<usize> = examples.iter().map(|e| e.item).collect();
        Batch {
            len: examples.len(),
            users: examples.iter().map(|e| e.user).collect(),
            activity: examples.iter().map(|e| users[e.user].activity).collect(),
            item_categories: cat(&items),
            items: items.into(),
            contexts: examples.iter().map(|e| e.context).collect(),
            labels: examples.iter().map(|e| e.label).collect(),
            own_discrete: own_discrete.into_iter().map(Rc::from).collect(),
            own_continuous,
            seq_categories: cat(&seq_items),
            seq_items: seq_items.into(),
            seq_offsets: seq_offsets.into(),
            codes,
            code_index: code_index.into(),
            group_discrete: group_discrete.into_iter().map(Rc::from).collect(),
            group_continuous,
            provenance,
            gseq_categories: cat(&gseq_items),
            gseq_items: gseq_items.into(),
            gseq_offsets: gseq_offsets.into(),
            reliability,
        }
    }
}
