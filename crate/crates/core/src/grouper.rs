//! Residual-quantization k-means.
//!
//! Stage `m` clusters the residuals left by stage `m - 1`; a user's group code
//! is the tuple of chosen centroid indices. Distances are Euclidean.
//!
//! All inputs and centroids are snapped to a fixed-point grid of `2^-40`.
//! For values of magnitude below `2^12` every residual subtraction and every
//! reconstruction sum on that grid is exact in `f64`, so
//! `r[m] + c[m] == r[m - 1]` holds bit for bit.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;
use crate::seed::stage_rng;

const GRID: f64 = 1099511627776.0; // 2^40

pub fn snap(x: f64) -> f64 {
    (x * GRID).round() / GRID
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (lowest index on ties) and its squared distance.
pub fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Nearest centroid and the residual `point - centroid`.
pub fn assign(point: &[f64], centroids: &[Vec<f64>]) -> Result<(usize, Vec<f64>)> {
    if centroids.is_empty() {
        return Err(Error::InvalidArgument("assign: empty codebook".into()));
    }
    if centroids[0].len() != point.len() {
        return Err(Error::shape(
            "assign",
            format!("point dim {} vs centroid dim {}", point.len(), centroids[0].len()),
        ));
    }
    let (k, _) = nearest(point, centroids);
    let residual = point.iter().zip(&centroids[k]).map(|(p, c)| p - c).collect();
    Ok((k, residual))
}

/// k-means++ seeding: first centroid uniform, then proportional to squared
/// distance from the nearest chosen centroid.
pub fn kmeans_pp_init<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    check_fit_args(points, k)?;
    let mut chosen = vec![rng.random_range(0..points.len())];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // Every point coincides with a chosen centroid.
            (0..points.len()).find(|i| !chosen.contains(i)).expect("k <= #points")
        };
        chosen.push(next);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[next]));
        }
    }
    Ok(chosen.iter().map(|&i| points[i].clone()).collect())
}

fn check_fit_args(points: &[Vec<f64>], k: usize) -> Result<()> {
    if points.is_empty() || k == 0 {
        return Err(Error::InvalidArgument(
            "k-means needs at least one point and k >= 1".into(),
        ));
    }
    if k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {} points",
            points.len()
        )));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("kmeans", "points must share one positive dimension"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Within-cluster squared error after each assignment step.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

impl KMeansFit {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("at least one assignment step")
    }
}

/// Lloyd iterations from the given centroids. Stops when no centroid moves
/// more than `tol` (Euclidean) or after `max_iters` updates. A cluster left
/// empty is reseeded with the point farthest from its own centroid.
pub fn lloyd(points: &[Vec<f64>], init: Vec<Vec<f64>>, max_iters: usize, tol: f64) -> Result<KMeansFit> {
    check_fit_args(points, init.len())?;
    let dim = points[0].len();
    let k = init.len();
    let mut centroids: Vec<Vec<f64>> = init.into_iter().map(|c| c.into_iter().map(snap).collect()).collect();
    let mut assignments = vec![0usize; points.len()];
    let mut dists = vec![0.0; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        for (i, p) in points.iter().enumerate() {
            let (a, d) = nearest(p, &centroids);
            assignments[i] = a;
            dists[i] = d;
        }
        trace.push(dists.iter().sum());
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        let mut shift: f64 = 0.0;
        let mut updated = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                updated[c] = sums[c].iter().map(|s| snap(s / n)).collect();
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = points
                .iter()
                .enumerate()
                .map(|(i, p)| (sq_dist(p, &updated[assignments[i]]), i))
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (c, &(_, i)) in empty.iter().zip(&far) {
                updated[*c] = points[i].clone();
            }
        }
        for (old, new) in centroids.iter().zip(&updated) {
            shift = shift.max(sq_dist(old, new).sqrt());
        }
        centroids = updated;
        if shift < tol && empty.is_empty() {
            for (i, p) in points.iter().enumerate() {
                let (a, d) = nearest(p, &centroids);
                assignments[i] = a;
                dists[i] = d;
            }
            trace.push(dists.iter().sum());
            break;
        }
    }
    Ok(KMeansFit {
        centroids,
        assignments,
        objective_trace: trace,
        iterations,
    })
}

pub fn kmeans_fit<R: Rng + ?Sized>(
    points: &[Vec<f64>],
    k: usize,
    rng: &mut R,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansFit> {
    let init = kmeans_pp_init(points, k, rng)?;
    lloyd(points, init, max_iters, tol)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrouperConfig {
    /// Number of residual stages (code length).
    pub stages: usize,
    /// Centroids per stage. 256 is the production setting; 16 suits a few
    /// thousand users.
    pub codebook_size: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for GrouperConfig {
    fn default() -> Self {
        GrouperConfig {
            stages: 3,
            codebook_size: 16,
            max_iters: 25,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupCode(pub Vec<usize>);

impl GroupCode {
    pub fn prefix(&self, len: usize) -> GroupCode {
        GroupCode(self.0[..len].to_vec())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for GroupCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub stage: usize,
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RqFit {
    pub codebooks: Vec<Codebook>,
    pub codes: Vec<GroupCode>,
    /// Mean residual norm after each stage.
    pub mean_residual_norms: Vec<f64>,
    pub stage_objectives: Vec<Vec<f64>>,
    /// Final residuals `r[M]` per point.
    pub residuals: Vec<Vec<f64>>,
}

pub fn rq_kmeans_fit(embeddings: &[Vec<f64>], config: &GrouperConfig, seed: u64) -> Result<RqFit> {
    if config.stages == 0 {
        return Err(Error::Config("grouper needs at least one stage".into()));
    }
    let mut residuals: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| e.iter().copied().map(snap).collect())
        .collect();
    let mut codes = vec![Vec::with_capacity(config.stages); embeddings.len()];
    let mut codebooks = Vec::with_capacity(config.stages);
    let mut norms = Vec::with_capacity(config.stages);
    let mut objectives = Vec::with_capacity(config.stages);
    for m in 0..config.stages {
        let mut rng = stage_rng(seed, &format!("grouper/stage{}", m + 1));
        let fit = kmeans_fit(&residuals, config.codebook_size, &mut rng, config.max_iters, config.tol)?;
        for (i, r) in residuals.iter_mut().enumerate() {
            let (k, next) = assign(r, &fit.centroids)?;
            codes[i].push(k);
            *r = next;
        }
        norms.push(
            residuals
                .iter()
                .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
                .sum::<f64>()
                / residuals.len() as f64,
        );
        objectives.push(fit.objective_trace);
        codebooks.push(Codebook {
            stage: m + 1,
            centroids: fit.centroids,
        });
    }
    Ok(RqFit {
        codebooks,
        codes: codes.into_iter().map(GroupCode).collect(),
        mean_residual_norms: norms,
        stage_objectives: objectives,
        residuals,
    })
}

/// Sum of the selected centroids, one per stage.
pub fn reconstruct(code: &GroupCode, codebooks: &[Codebook]) -> Result<Vec<f64>> {
    if code.len() != codebooks.len() || codebooks.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "code {code} has {} levels, codebooks have {}",
            code.len(),
            codebooks.len()
        )));
    }
    let mut out = vec![0.0; codebooks[0].centroids[0].len()];
    for (&k, book) in code.0.iter().zip(codebooks) {
        let c = book
            .centroids
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("index {k} out of range at stage {}", book.stage)))?;
        out.iter_mut().zip(c).for_each(|(o, x)| *o += x);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CodebookHeader {
    stages: usize,
    codebook_size: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct CentroidRow {
    stage: usize,
    index: usize,
    values: Vec<f64>,
}

/// Codebook file: a `{stages, codebook_size, dim}` header line followed by one
/// `{stage, index, values}` line per centroid.
pub fn write_codebooks(path: &Path, codebooks: &[Codebook]) -> Result<()> {
    let dim = codebooks.first().map_or(0, |b| b.centroids[0].len());
    let header = serde_json::to_value(CodebookHeader {
        stages: codebooks.len(),
        codebook_size: codebooks.first().map_or(0, |b| b.centroids.len()),
        dim,
    })?;
    let rows = codebooks.iter().flat_map(|b| {
        b.centroids.iter().enumerate().map(move |(index, c)| {
            serde_json::to_value(CentroidRow {
                stage: b.stage,
                index,
                values: c.clone(),
            })
        })
    });
    let mut lines = vec![header];
    for r in rows {
        lines.push(r?);
    }
    jsonl::write_records(path, &lines)
}

pub fn read_codebooks(path: &Path) -> Result<Vec<Codebook>> {
    let lines: Vec<serde_json::Value> = jsonl::read_records(path)?;
    let bad = |reason: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        reason: reason.into(),
    };
    let (first, rest) = lines.split_first().ok_or_else(|| bad("empty codebook file"))?;
    let header: CodebookHeader = serde_json::from_value(first.clone()).map_err(|e| bad(&e.to_string()))?;
    let mut books: Vec<Codebook> = (1..=header.stages)
        .map(|stage| Codebook {
            stage,
            centroids: Vec::new(),
        })
        .collect();
    for v in rest {
        let row: CentroidRow = serde_json::from_value(v.clone()).map_err(|e| bad(&e.to_string()))?;
        if row.stage == 0 || row.stage > header.stages || row.values.len() != header.dim {
            return Err(bad("centroid row does not match header"));
        }
        let book = &mut books[row.stage - 1];
        if row.index != book.centroids.len() {
            return Err(bad("centroid rows out of order"));
        }
        book.centroids.push(row.values);
    }
    if books.iter().any(|b| b.centroids.len() != header.codebook_size) {
        return Err(bad("codebook size does not match header"));
    }
    Ok(books)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub user_id: usize,
    pub code: Vec<usize>,
}
