use std::collections::HashMap;

use groupcvr_core::grouper::{
    assign, kmeans_fit, kmeans_pp_init, lloyd, read_codebooks, reconstruct, rq_kmeans_fit, snap, write_codebooks,
    GroupCode, GrouperConfig,
};
use groupcvr_core::profiler::{encode_users, ProfilerConfig};
use groupcvr_core::seed::stage_rng;
use groupcvr_core::synthworld::{generate_world, WorldConfig};
use proptest::prelude::*;
use rand::Rng;

fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stage_rng(seed, "points");
    (0..n)
        .map(|_| (0..d).map(|_| snap(rng.random_range(-1.0..1.0))).collect())
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Textbook Lloyd without snapping or empty-cluster handling.
fn naive_lloyd(points: &[Vec<f64>], mut cs: Vec<Vec<f64>>, iters: usize) -> f64 {
    let obj = |cs: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut total = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let mut best = (0, f64::INFINITY);
                for (k, c) in cs.iter().enumerate() {
                    let d = sq(p, c);
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                total += best.1;
                best.0
            })
            .collect();
        (a, total)
    };
    for _ in 0..iters {
        let (a, _) = obj(&cs);
        for (k, c) in cs.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = points.iter().zip(&a).filter(|(_, &x)| x == k).map(|(p, _)| p).collect();
            if !members.is_empty() {
                for (j, v) in c.iter_mut().enumerate() {
                    *v = members.iter().map(|m| m[j]).sum::<f64>() / members.len() as f64;
                }
            }
        }
    }
    obj(&cs).1
}

#[test]
fn single_cluster_is_the_mean() {
    let pts = random_points(50, 3, 1);
    let fit = kmeans_fit(&pts, 1, &mut stage_rng(1, "k"), 10, 1e-12).unwrap();
    for j in 0..3 {
        let mean = pts.iter().map(|p| p[j]).sum::<f64>() / 50.0;
        assert!((fit.centroids[0][j] - mean).abs() < 1e-11);
    }
}

#[test]
fn separated_clusters_are_found() {
    let mut pts = vec![vec![0.0; 4]; 10];
    pts.extend(vec![vec![10.0; 4]; 10]);
    let fit = kmeans_fit(&pts, 2, &mut stage_rng(2, "k"), 10, 1e-12).unwrap();
    let mut cs = fit.centroids.clone();
    cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
    assert_eq!(cs, vec![vec![0.0; 4], vec![10.0; 4]]);
}

#[test]
fn matches_naive_lloyd_oracle() {
    for seed in 0..5 {
        let pts = random_points(200, 4, seed);
        let init = kmeans_pp_init(&pts, 6, &mut stage_rng(seed, "init")).unwrap();
        let fit = lloyd(&pts, init.clone(), 50, 0.0).unwrap();
        let oracle = naive_lloyd(&pts, init, 50);
        assert!(
            fit.objective() <= oracle + 1e-9,
            "seed {seed}: {} vs {oracle}",
            fit.objective()
        );
    }
}

#[test]
fn objective_never_increases() {
    for seed in 0..10 {
        let pts = random_points(300, 5, 100 + seed);
        let fit = kmeans_fit(&pts, 12, &mut stage_rng(seed, "k"), 40, 0.0).unwrap();
        for w in fit.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {:?}", fit.objective_trace);
        }
    }
}

#[test]
fn empty_clusters_are_repaired() {
    // Duplicate-heavy data with an init that leaves a centroid stranded.
    let mut pts = vec![vec![0.0, 0.0]; 20];
    pts.extend(vec![vec![1.0, 0.0]; 20]);
    pts.push(vec![5.0, 5.0]);
    let init = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![100.0, 100.0]];
    let fit = lloyd(&pts, init, 10, 1e-12).unwrap();
    assert_eq!(fit.centroids[2], vec![5.0, 5.0]);
    assert_eq!(fit.objective(), 0.0);
}

#[test]
fn assignments_match_brute_force_scan() {
    let pts = random_points(1000, 8, 7);
    let cs = random_points(16, 8, 8);
    for p in &pts {
        let (k, r) = assign(p, &cs).unwrap();
        let mut best = 0;
        for j in 1..cs.len() {
            if sq(p, &cs[j]) < sq(p, &cs[best]) {
                best = j;
            }
        }
        assert_eq!(k, best);
        for ((x, c), y) in p.iter().zip(&cs[k]).zip(&r) {
            assert_eq!(*y, x - c);
        }
    }
}

#[test]
fn one_stage_equals_flat_kmeans() {
    let pts = random_points(150, 3, 3);
    let cfg = GrouperConfig {
        stages: 1,
        codebook_size: 5,
        ..GrouperConfig::default()
    };
    let rq = rq_kmeans_fit(&pts, &cfg, 9).unwrap();
    let flat = kmeans_fit(&pts, 5, &mut stage_rng(9, "grouper/stage1"), cfg.max_iters, cfg.tol).unwrap();
    let codes: Vec<usize> = rq.codes.iter().map(|c| c.0[0]).collect();
    assert_eq!(codes, flat.assignments);
    for code in &rq.codes {
        let rec = reconstruct(code, &rq.codebooks).unwrap();
        assert_eq!(rec, rq.codebooks[0].centroids[code.0[0]]);
    }
}

#[test]
fn residual_identity_is_bit_exact() {
    let pts = random_points(400, 6, 11);
    let cfg = GrouperConfig {
        stages: 3,
        codebook_size: 8,
        ..GrouperConfig::default()
    };
    let fit = rq_kmeans_fit(&pts, &cfg, 2).unwrap();
    for w in fit.mean_residual_norms.windows(2) {
        assert!(w[1] <= w[0]);
    }
    for ((p, code), last) in pts.iter().zip(&fit.codes).zip(&fit.residuals) {
        let mut r = p.clone();
        for (m, &k) in code.0.iter().enumerate() {
            let c = &fit.codebooks[m].centroids[k];
            let next: Vec<f64> = r.iter().zip(c).map(|(a, b)| a - b).collect();
            let back: Vec<f64> = next.iter().zip(c).map(|(a, b)| a + b).collect();
            assert_eq!(back, r);
            r = next;
        }
        assert_eq!(&r, last);
        let rec = reconstruct(code, &fit.codebooks).unwrap();
        let err: Vec<f64> = p.iter().zip(&rec).map(|(a, b)| a - b).collect();
        assert_eq!(&err, last);
    }
}

#[test]
fn production_shape_is_accepted() {
    let pts = random_points(600, 4, 5);
    let cfg = GrouperConfig {
        stages: 3,
        codebook_size: 256,
        max_iters: 3,
        ..GrouperConfig::default()
    };
    let fit = rq_kmeans_fit(&pts, &cfg, 1).unwrap();
    assert!(fit.codes.iter().all(|c| c.len() == 3 && c.0.iter().all(|&k| k < 256)));
}

#[test]
fn larger_codebooks_reconstruct_better() {
    let pts = random_points(1200, 6, 21);
    let err = |k| {
        let cfg = GrouperConfig {
            stages: 3,
            codebook_size: k,
            ..GrouperConfig::default()
        };
        rq_kmeans_fit(&pts, &cfg, 4).unwrap().mean_residual_norms[2]
    };
    assert!(err(256) < err(32));
}

#[test]
fn fit_is_deterministic_and_file_round_trips() {
    let pts = random_points(120, 3, 13);
    let cfg = GrouperConfig {
        codebook_size: 4,
        ..GrouperConfig::default()
    };
    let a = rq_kmeans_fit(&pts, &cfg, 3).unwrap();
    let b = rq_kmeans_fit(&pts, &cfg, 3).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("codebooks.jsonl");
    write_codebooks(&path, &a.codebooks).unwrap();
    assert_eq!(read_codebooks(&path).unwrap(), a.codebooks);
    assert!(reconstruct(&GroupCode(vec![0, 0, 9]), &a.codebooks).is_err());
}

fn purity(labels: &[usize], groups: &[usize]) -> f64 {
    let mut tallies: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&g, &l) in groups.iter().zip(labels) {
        *tallies.entry(g).or_default().entry(l).or_default() += 1;
    }
    let majority: usize = tallies.values().map(|t| *t.values().max().unwrap()).sum();
    majority as f64 / labels.len() as f64
}

#[test]
fn stage_one_groups_follow_archetypes() {
    // As many archetypes as centroids, so a perfect grouping has purity 1.
    let cfg = WorldConfig {
        n_archetypes: 16,
        n_users: 1600,
        noise_rate: 0.0,
        ..WorldConfig::default()
    };
    let w = generate_world(&cfg, 8).unwrap();
    let pcfg = ProfilerConfig {
        embedding_dim: 128,
        offline_source_dim: 256,
        ..ProfilerConfig::default()
    };
    let embs: Vec<Vec<f64>> = encode_users(&w.users, &w.schema, &pcfg)
        .unwrap()
        .into_iter()
        .map(|e| e.vector)
        .collect();
    let fit = rq_kmeans_fit(&embs, &GrouperConfig::default(), 8).unwrap();
    let labels: Vec<usize> = w.users.iter().map(|u| u.archetype_id).collect();
    let groups: Vec<usize> = fit.codes.iter().map(|c| c.0[0]).collect();
    let p = purity(&labels, &groups);
    assert!(p >= 5.0 / 16.0, "stage-1 purity {p}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assign_picks_a_nearest_centroid(
        point in prop::collection::vec(-3.0f64..3.0, 3),
        cs in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 1..10),
    ) {
        let (k, _) = assign(&point, &cs).unwrap();
        let d = sq(&point, &cs[k]);
        for (j, c) in cs.iter().enumerate() {
            let dj = sq(&point, c);
            prop_assert!(d <= dj);
            if j < k { prop_assert!(dj > d); }
        }
    }
}
