//! Ranking metrics, activity stratification and report tables.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredExample {
    pub user_id: usize,
    pub score: f64,
    pub label: u8,
}

/// Mann-Whitney AUC with ties counted as one half; `None` unless both
/// classes are present.
pub fn auc(examples: &[ScoredExample]) -> Option<f64> {
    let n_pos = examples.iter().filter(|e| e.label == 1).count();
    let n_neg = examples.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<&ScoredExample> = examples.iter().collect();
    order.sort_by(|a, b| a.score.total_cmp(&b.score));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay
    // integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && order[j + 1].score == order[i].score {
            j += 1;
        }
        let pos = order[i..=j].iter().filter(|e| e.label == 1).count() as u128;
        // Average rank of the tie block is (i + 1 + j + 1) / 2.
        twice_rank_sum += pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let np = n_pos as u128;
    let twice_u = twice_rank_sum - np * (np + 1);
    Some(twice_u as f64 / 2.0 / (n_pos as f64 * n_neg as f64))
}

/// Impression-weighted mean of per-user AUCs over users with both classes.
pub fn gauc(examples: &[ScoredExample]) -> Option<f64> {
    let mut by_user: BTreeMap<usize, Vec<ScoredExample>> = BTreeMap::new();
    for e in examples {
        by_user.entry(e.user_id).or_default().push(*e);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for ex in by_user.values() {
        if let Some(a) = auc(ex) {
            num += a * ex.len() as f64;
            den += ex.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Level (1 = least active) per user: users sorted by `(activity, user_id)`
/// and cut into `n_levels` buckets whose sizes differ by at most one.
pub fn stratify_by_activity(users: &[(usize, usize)], n_levels: usize) -> Result<HashMap<usize, usize>> {
    if n_levels < 2 {
        return Err(Error::InvalidArgument("need at least two activity levels".into()));
    }
    if users.len() < n_levels {
        return Err(Error::InvalidArgument(format!(
            "{} users cannot fill {n_levels} levels",
            users.len()
        )));
    }
    let mut order: Vec<(usize, usize)> = users.iter().map(|&(id, a)| (a, id)).collect();
    order.sort_unstable();
    let n = order.len();
    Ok(order
        .iter()
        .enumerate()
        .map(|(rank, &(_, id))| (id, rank * n_levels / n + 1))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub level: usize,
    pub users: usize,
    pub examples: usize,
    pub gauc: Option<f64>,
    pub mean_alpha_fusion: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub low_activity_gauc: Option<f64>,
    pub levels: Vec<LevelStats>,
    pub examples: usize,
    pub low_activity_examples: usize,
}

/// One scored test row together with the fusion weight, when the model has one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub example: ScoredExample,
    pub alpha_fusion: Option<f64>,
}

/// `levels` maps user id to activity level; `low_activity` holds the ids of
/// users flagged as low-activity.
pub fn evaluate(
    rows: &[EvalRow],
    levels: &HashMap<usize, usize>,
    n_levels: usize,
    low_activity: &std::collections::HashSet<usize>,
) -> MetricReport {
    let all: Vec<ScoredExample> = rows.iter().map(|r| r.example).collect();
    let low: Vec<ScoredExample> = all
        .iter()
        .copied()
        .filter(|e| low_activity.contains(&e.user_id))
        .collect();
    let mut per_level: Vec<Vec<&EvalRow>> = vec![Vec::new(); n_levels];
    for r in rows {
        if let Some(&l) = levels.get(&r.example.user_id) {
            per_level[l - 1].push(r);
        }
    }
    let mut level_users = vec![0usize; n_levels];
    for &l in levels.values() {
        level_users[l - 1] += 1;
    }
    let level_stats = per_level
        .iter()
        .enumerate()
        .map(|(i, rs)| {
            let ex: Vec<ScoredExample> = rs.iter().map(|r| r.example).collect();
            let alphas: Vec<f64> = rs.iter().filter_map(|r| r.alpha_fusion).collect();
            LevelStats {
                level: i + 1,
                users: level_users[i],
                examples: ex.len(),
                gauc: gauc(&ex),
                mean_alpha_fusion: (!alphas.is_empty()).then(|| alphas.iter().sum::<f64>() / alphas.len() as f64),
            }
        })
        .collect();
    MetricReport {
        auc: auc(&all),
        gauc: gauc(&all),
        low_activity_gauc: gauc(&low),
        levels: level_stats,
        examples: all.len(),
        low_activity_examples: low.len(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

impl MetricReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples            {}", self.examples);
        let _ = writeln!(s, "AUC                 {}", fmt_opt(self.auc));
        let _ = writeln!(s, "GAUC                {}", fmt_opt(self.gauc));
        let _ = writeln!(
            s,
            "low-activity GAUC   {}  ({} examples)",
            fmt_opt(self.low_activity_gauc),
            self.low_activity_examples
        );
        let _ = writeln!(s, "level  users  examples  GAUC    mean alpha_fusion");
        for l in &self.levels {
            let _ = writeln!(
                s,
                "{:>5}  {:>5}  {:>8}  {:<6}  {}",
                l.level,
                l.users,
                l.examples,
                fmt_opt(l.gauc),
                fmt_opt(l.mean_alpha_fusion)
            );
        }
        s
    }

    pub fn level_gauc(&self, level: usize) -> Option<f64> {
        self.levels.get(level - 1).and_then(|l| l.gauc)
    }

    pub fn level_alpha(&self, level: usize) -> Option<f64> {
        self.levels.get(level - 1).and_then(|l| l.mean_alpha_fusion)
    }
}

/// Relative change `(variant - reference) / reference`.
pub fn relative_delta(variant: Option<f64>, reference: Option<f64>) -> Option<f64> {
    match (variant, reference) {
        (Some(v), Some(r)) if r != 0.0 => Some((v - r) / r),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: String,
    pub label: String,
    pub gauc: Option<f64>,
    pub low_activity_gauc: Option<f64>,
    pub delta_gauc: Option<f64>,
    pub delta_low_activity_gauc: Option<f64>,
}

/// Builds ablation rows relative to the row named `full`.
pub fn ablation_table(results: &[(String, String, MetricReport)]) -> Result<Vec<AblationRow>> {
    let full = results
        .iter()
        .find(|r| r.0 == "full")
        .ok_or_else(|| Error::InvalidArgument("ablation table needs a `full` row".into()))?;
    Ok(results
        .iter()
        .map(|(mode, label, r)| AblationRow {
            mode: mode.clone(),
            label: label.clone(),
            gauc: r.gauc,
            low_activity_gauc: r.low_activity_gauc,
            delta_gauc: relative_delta(r.gauc, full.2.gauc),
            delta_low_activity_gauc: relative_delta(r.low_activity_gauc, full.2.low_activity_gauc),
        })
        .collect())
}

pub fn render_ablation(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "n/a".into(), |x| format!("{:+.2}%", 100.0 * x));
    let mut s = String::from("variant                    GAUC    delta     low GAUC  delta\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<25}  {:<6}  {:>8}  {:<8}  {:>8}",
            r.label,
            fmt_opt(r.gauc),
            pct(r.delta_gauc),
            fmt_opt(r.low_activity_gauc),
            pct(r.delta_low_activity_gauc)
        );
    }
    s
}
