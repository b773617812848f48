//! Hand-rolled reference implementations shared by the test targets. None of
//! these call into the library's arithmetic.
#![allow(dead_code)]

use std::collections::BTreeMap;

use groupcvr_core::autograd::{Linear, ParamStore};
use groupcvr_core::priors::GroupIdFusionNet;
use groupcvr_core::synthworld::{AttrValue, AttributeField, FieldKind, Purchase, UserRecord};

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn oracle_margin(zi: f64, zg: f64, t: f64, m: f64) -> f64 {
    let d = (sig(zi / t) - sig(zg / t)).abs() - m;
    if d > 0.0 {
        d * d
    } else {
        0.0
    }
}

pub fn oracle_gate(activity: usize, z_ind: f64, theta_act: usize, theta_conf: f64) -> f64 {
    if activity >= theta_act && (sig(z_ind) - 0.5).abs() > theta_conf {
        1.0
    } else {
        0.0
    }
}

pub fn oracle_fusion(zi: f64, zg: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * zi + alpha * zg
}

pub fn affine(store: &ParamStore, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.weight).values();
    let b = store.get(l.bias).values();
    (0..l.out_dim)
        .map(|o| b[o] + (0..l.in_dim).map(|i| x[i] * w[i * l.out_dim + o]).sum::<f64>())
        .collect()
}

/// Prefix fusion of a group code followed by the output MLP, one code at a time.
pub fn oracle_fuse(net: &GroupIdFusionNet, store: &ParamStore, code: &[usize]) -> Vec<f64> {
    let d = net.id_dim;
    let base = |l: usize| store.get(net.tables[l]).values()[code[l] * d..(code[l] + 1) * d].to_vec();
    let mut fused = vec![base(0)];
    for l in 1..net.levels {
        let mut x = fused[l - 1].clone();
        x.extend(base(l));
        fused.push(affine(store, &net.fuse[l - 1], &x).into_iter().map(f64::tanh).collect());
    }
    let cat: Vec<f64> = fused.concat();
    let h: Vec<f64> = affine(store, &net.hidden, &cat)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let o = affine(store, &net.out, &h);
    let n = o.iter().map(|v| v * v).sum::<f64>().sqrt();
    o.iter().map(|v| if n == 0.0 { 0.0 } else { v / n }).collect()
}

pub fn member(id: usize, attrs: Vec<Option<AttrValue>>, purchases: &[(usize, usize, f64)]) -> UserRecord {
    UserRecord {
        user_id: id,
        archetype_id: 0,
        attributes: attrs,
        purchase_log: purchases
            .iter()
            .map(|&(item_id, category_id, timestamp)| Purchase {
                item_id,
                category_id,
                timestamp,
            })
            .collect(),
        search_queries: vec![],
        interaction_count: 1,
        activity_count: purchases.len(),
    }
}

pub fn two_field_schema() -> Vec<AttributeField> {
    vec![
        AttributeField {
            name: "d".into(),
            kind: FieldKind::Discrete { cardinality: 5 },
        },
        AttributeField {
            name: "c".into(),
            kind: FieldKind::Continuous,
        },
    ]
}

/// Most frequent value, smallest on ties.
pub fn oracle_mode(values: &[u32]) -> Option<u32> {
    let mut best: Option<(u32, usize)> = None;
    for v in 0..100u32 {
        let n = values.iter().filter(|&&x| x == v).count();
        if n > 0 && best.is_none_or(|b| n > b.1) {
            best = Some((v, n));
        }
    }
    best.map(|b| b.0)
}

/// `(item, mean timestamp)` of the group sequence built from `(item, category, t)` rows.
pub fn oracle_sequence(purchases: &[(usize, usize, f64)], k_cat: usize, l_g: usize) -> Vec<(usize, f64)> {
    let mut cat: BTreeMap<usize, usize> = BTreeMap::new();
    for p in purchases {
        *cat.entry(p.1).or_default() += 1;
    }
    let mut cats: Vec<(usize, usize)> = cat.into_iter().collect();
    cats.sort_by_key(|&(c, n)| (std::cmp::Reverse(n), c));
    let keep: Vec<usize> = cats.iter().take(k_cat).map(|x| x.0).collect();
    let mut items: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for p in purchases.iter().filter(|p| keep.contains(&p.1)) {
        items.entry(p.0).or_default().push(p.2);
    }
    let mut ranked: Vec<(usize, Vec<f64>)> = items.into_iter().collect();
    ranked.sort_by_key(|(i, ts)| (std::cmp::Reverse(ts.len()), *i));
    ranked.truncate(l_g);
    let mut out: Vec<(usize, f64)> = ranked
        .into_iter()
        .map(|(i, mut ts)| {
            ts.sort_by(f64::total_cmp);
            (i, ts.iter().sum::<f64>() / ts.len() as f64)
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}
