mod oracles;

use std::collections::HashMap;

use groupcvr_core::autograd::{grad_check, Graph, ParamStore};
use groupcvr_core::grouper::{rq_kmeans_fit, GroupCode, GrouperConfig};
use groupcvr_core::priors::{
    apply_attribute_completion, build_group_sequence, complete_attributes, resolve_groups, GroupAttributePrior,
    GroupIdFusionNet, PriorSet, PriorsConfig, Provenance,
};
use groupcvr_core::profiler::{encode_users, ProfilerConfig};
use groupcvr_core::seed::stage_rng;
use groupcvr_core::synthworld::{attribute_schema, generate_world, AttrValue, UserRecord, WorldConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use oracles::{member, oracle_fuse, oracle_mode, oracle_sequence, two_field_schema};

// ---- forward oracle for the group ID network ----

fn run_net(net: &GroupIdFusionNet, store: &ParamStore, codes: &[GroupCode]) -> Vec<f64> {
    let mut g = Graph::new();
    let v = net.forward(&mut g, store, codes).unwrap();
    g.value(v).to_vec()
}

#[test]
fn fusion_matches_hand_evaluation() {
    let mut cases = 0;
    for seed in 0..120u64 {
        let mut rng = stage_rng(seed, "fusion");
        let levels = rng.random_range(1..=3);
        let k = rng.random_range(2..=4);
        let d_e = rng.random_range(2..=3);
        let d_g = rng.random_range(2..=4);
        let mut store = ParamStore::new();
        let net = GroupIdFusionNet::new(&mut store, "gid", levels, k, d_e, d_g, &mut rng);
        let codes: Vec<GroupCode> = (0..3)
            .map(|_| GroupCode((0..levels).map(|_| rng.random_range(0..k)).collect()))
            .collect();
        let got = run_net(&net, &store, &codes);
        for (i, c) in codes.iter().enumerate() {
            let want = oracle_fuse(&net, &store, &c.0);
            for j in 0..d_g {
                assert!((got[i * d_g + j] - want[j]).abs() < 1e-12, "seed {seed}");
            }
        }
        cases += 1;
    }
    assert!(cases >= 100);
}

#[test]
fn fixed_toy_weights_match_oracle() {
    let mut store = ParamStore::new();
    let mut rng = stage_rng(0, "toy");
    let net = GroupIdFusionNet::new(&mut store, "gid", 2, 2, 2, 2, &mut rng);
    let set = |store: &mut ParamStore, id, vals: &[f64]| store.get_mut(id).values_mut().copy_from_slice(vals);
    set(&mut store, net.tables[0], &[0.1, -0.2, 0.3, 0.4]);
    set(&mut store, net.tables[1], &[-0.5, 0.25, 0.05, 0.6]);
    set(
        &mut store,
        net.fuse[0].weight,
        &[0.2, -0.1, 0.3, 0.4, -0.6, 0.5, 0.7, 0.1],
    );
    set(&mut store, net.fuse[0].bias, &[0.01, -0.02]);
    let code = [1usize, 0];
    // Level 2 by hand: x = [0.3, 0.4, -0.5, 0.25].
    let x = [0.3, 0.4, -0.5, 0.25];
    let w = [[0.2, -0.1], [0.3, 0.4], [-0.6, 0.5], [0.7, 0.1]];
    let b = [0.01, -0.02];
    let e2: Vec<f64> = (0..2)
        .map(|o| (b[o] + (0..4).map(|i| x[i] * w[i][o]).sum::<f64>()).tanh())
        .collect();
    let mut g = Graph::new();
    let levels = net.fused_levels(&mut g, &store, &[GroupCode(code.to_vec())]).unwrap();
    assert_eq!(g.value(levels[0]), &[0.3, 0.4]);
    for (a, b) in g.value(levels[1]).iter().zip(&e2) {
        assert!((a - b).abs() < 1e-12);
    }
    let out = run_net(&net, &store, &[GroupCode(code.to_vec())]);
    let want = oracle_fuse(&net, &store, &code);
    for (a, b) in out.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_level_uses_base_embedding_only() {
    let mut store = ParamStore::new();
    let mut rng = stage_rng(1, "m1");
    let net = GroupIdFusionNet::new(&mut store, "gid", 1, 4, 3, 5, &mut rng);
    assert!(net.fuse.is_empty());
    let code = GroupCode(vec![2]);
    let out = run_net(&net, &store, &[code.clone()]);
    let want = oracle_fuse(&net, &store, &code.0);
    for (a, b) in out.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_fusion_weights_collapse_to_level_one() {
    let mut store = ParamStore::new();
    let mut rng = stage_rng(2, "zero");
    let net = GroupIdFusionNet::new(&mut store, "gid", 3, 4, 3, 4, &mut rng);
    for l in &net.fuse {
        store.get_mut(l.weight).values_mut().fill(0.0);
        store.get_mut(l.bias).values_mut().fill(0.0);
    }
    let a = run_net(&net, &store, &[GroupCode(vec![1, 0, 3])]);
    let b = run_net(&net, &store, &[GroupCode(vec![1, 2, 2])]);
    assert_eq!(a, b);
    let mut g = Graph::new();
    let lv = net.fused_levels(&mut g, &store, &[GroupCode(vec![1, 0, 3])]).unwrap();
    assert!(g.value(lv[1]).iter().chain(g.value(lv[2])).all(|&x| x == 0.0));
}

#[test]
fn fused_embedding_ranges() {
    let mut store = ParamStore::new();
    let mut rng = stage_rng(3, "range");
    let net = GroupIdFusionNet::new(&mut store, "gid", 3, 8, 4, 6, &mut rng);
    let codes: Vec<GroupCode> = (0..40)
        .map(|i| GroupCode(vec![i % 8, (i / 8) % 8, (i * 3) % 8]))
        .collect();
    let mut g = Graph::new();
    let lv = net.fused_levels(&mut g, &store, &codes).unwrap();
    for l in &lv[1..] {
        assert!(g.value(*l).iter().all(|x| x.abs() < 1.0));
    }
    let out = run_net(&net, &store, &codes);
    for row in out.chunks(6) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
    assert!(net
        .forward(&mut Graph::new(), &store, &[GroupCode(vec![8, 0, 0])])
        .is_err());
    assert!(net
        .forward(&mut Graph::new(), &store, &[GroupCode(vec![0, 0])])
        .is_err());
}

#[test]
fn fusion_gradients_match_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = stage_rng(seed, "gc");
        let mut store = ParamStore::new();
        let net = GroupIdFusionNet::new(&mut store, "gid", 3, 3, 2, 3, &mut rng);
        let codes: Vec<GroupCode> = (0..4)
            .map(|i| GroupCode(vec![i % 3, (i + 1) % 3, (2 * i) % 3]))
            .collect();
        let target: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let report = grad_check(
            &mut store,
            |g, s| {
                let out = net.forward(g, s, &codes)?;
                let t = g.constant(&[4, 3], target.clone())?;
                let p = g.mul(out, t)?;
                Ok(g.sum(p))
            },
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {report:?}");
    }
}

// ---- attribute completion ----

#[test]
fn completion_examples() {
    let schema = two_field_schema();
    let d = |v| Some(AttrValue::Discrete(v));
    let c = |v| Some(AttrValue::Continuous(v));
    let ms = [
        member(0, vec![d(2), c(1.0)], &[]),
        member(1, vec![d(2), c(3.0)], &[]),
        member(2, vec![d(4), None], &[]),
    ];
    let refs: Vec<&UserRecord> = ms.iter().collect();
    let p = complete_attributes(&refs, &schema);
    assert_eq!(p.values, vec![d(2), c(2.0)]);
    assert_eq!(p.member_count, 3);

    let tie = [member(0, vec![d(3), None], &[]), member(1, vec![d(1), None], &[])];
    let p = complete_attributes(&tie.iter().collect::<Vec<_>>(), &schema);
    assert_eq!(p.values, vec![d(1), None]);
}

#[test]
fn completion_matches_counting_oracle() {
    let schema = two_field_schema();
    for seed in 0..150u64 {
        let mut rng = stage_rng(seed, "attrs");
        let n = rng.random_range(1..8);
        let ms: Vec<UserRecord> = (0..n)
            .map(|i| {
                let dv = (rng.random::<f64>() < 0.7).then(|| AttrValue::Discrete(rng.random_range(0..5)));
                let cv = (rng.random::<f64>() < 0.6).then(|| AttrValue::Continuous(rng.random::<f64>()));
                member(i, vec![dv, cv], &[])
            })
            .collect();
        let refs: Vec<&UserRecord> = ms.iter().collect();
        let p = complete_attributes(&refs, &schema);
        let ds: Vec<u32> = ms
            .iter()
            .filter_map(|m| match m.attributes[0] {
                Some(AttrValue::Discrete(v)) => Some(v),
                _ => None,
            })
            .collect();
        let cs: Vec<f64> = ms
            .iter()
            .filter_map(|m| match m.attributes[1] {
                Some(AttrValue::Continuous(v)) => Some(v),
                _ => None,
            })
            .collect();
        assert_eq!(p.values[0], oracle_mode(&ds).map(AttrValue::Discrete), "seed {seed}");
        match p.values[1] {
            None => assert!(cs.is_empty()),
            Some(AttrValue::Continuous(m)) => {
                let want = cs.iter().sum::<f64>() / cs.len() as f64;
                assert!((m - want).abs() < 1e-10);
            }
            other => panic!("unexpected {other:?}"),
        }
        if let Some(AttrValue::Discrete(v)) = p.values[0] {
            assert!(ds.contains(&v));
        }
        // Substitution check against the prior.
        let user = member(99, vec![None, ms[0].attributes[1]], &[]);
        let done = apply_attribute_completion(&user, &p);
        match p.values[0] {
            Some(v) => {
                assert_eq!(done.values[0], Some(v));
                assert_eq!(done.provenance[0], Provenance::Group);
            }
            None => assert_eq!(done.provenance[0], Provenance::Absent),
        }
        if user.attributes[1].is_some() {
            assert_eq!(done.values[1], user.attributes[1]);
            assert_eq!(done.provenance[1], Provenance::Own);
        }
    }
}

#[test]
fn completion_of_complete_user_is_identity() {
    let u = member(
        0,
        vec![Some(AttrValue::Discrete(1)), Some(AttrValue::Continuous(0.3))],
        &[],
    );
    let prior = GroupAttributePrior {
        values: vec![Some(AttrValue::Discrete(4)), None],
        member_count: 2,
    };
    let done = apply_attribute_completion(&u, &prior);
    assert_eq!(done.values, u.attributes);
    assert_eq!(done.provenance, vec![Provenance::Own, Provenance::Own]);
    let empty = member(1, vec![None, None], &[]);
    let done = apply_attribute_completion(&empty, &prior);
    assert_eq!(done.provenance, vec![Provenance::Group, Provenance::Absent]);
    assert_eq!(done.values[1], None);
}

// ---- group sequences ----

#[test]
fn sequence_examples() {
    // catA = 0 with i1 x2, i2 x1; catB = 1 with i3 x1.
    let m = member(0, vec![], &[(1, 0, 4.0), (2, 0, 2.0), (1, 0, 6.0), (3, 1, 1.0)]);
    let seq = build_group_sequence(&[&m], 1, 2);
    let ids: Vec<usize> = seq.iter().map(|s| s.item_id).collect();
    assert_eq!(ids, vec![2, 1]);
    assert_eq!(seq[1].avg_timestamp, 5.0);
    assert!(build_group_sequence(&[&member(1, vec![], &[])], 3, 5).is_empty());
}

#[test]
fn sequence_matches_frequency_oracle() {
    for seed in 0..150u64 {
        let mut rng = stage_rng(seed, "seq");
        let n_members = rng.random_range(1..5);
        let ms: Vec<UserRecord> = (0..n_members)
            .map(|i| {
                let ps: Vec<(usize, usize, f64)> = (0..rng.random_range(0..12))
                    .map(|_| {
                        let item = rng.random_range(0..15);
                        (item, item % 5, (rng.random_range(0..26) as f64) / 2.0)
                    })
                    .collect();
                member(i, vec![], &ps)
            })
            .collect();
        let all: Vec<(usize, usize, f64)> = ms
            .iter()
            .flat_map(|m| m.purchase_log.iter().map(|p| (p.item_id, p.category_id, p.timestamp)))
            .collect();
        let k_cat = rng.random_range(1..4);
        let l_g = rng.random_range(1..8);
        let got: Vec<(usize, f64)> = build_group_sequence(&ms.iter().collect::<Vec<_>>(), k_cat, l_g)
            .iter()
            .map(|s| (s.item_id, s.avg_timestamp))
            .collect();
        assert_eq!(got, oracle_sequence(&all, k_cat, l_g), "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sequences_ignore_member_order(seed in 0u64..1000) {
        let mut rng = stage_rng(seed, "order");
        let mut ms: Vec<UserRecord> = (0..5)
            .map(|i| {
                let ps: Vec<(usize, usize, f64)> = (0..rng.random_range(0..10))
                    .map(|_| { let it = rng.random_range(0..20); (it, it % 6, rng.random::<f64>() * 13.0) })
                    .collect();
                member(i, vec![Some(AttrValue::Discrete(rng.random_range(0..3))), Some(AttrValue::Continuous(rng.random()))], &ps)
            })
            .collect();
        let a = build_group_sequence(&ms.iter().collect::<Vec<_>>(), 3, 6);
        let pa = complete_attributes(&ms.iter().collect::<Vec<_>>(), &two_field_schema());
        ms.shuffle(&mut rng);
        let b = build_group_sequence(&ms.iter().collect::<Vec<_>>(), 3, 6);
        let pb = complete_attributes(&ms.iter().collect::<Vec<_>>(), &two_field_schema());
        prop_assert_eq!(a, b);
        prop_assert_eq!(pa, pb);
    }
}

#[test]
fn sparse_groups_fall_back_to_parent_prefix() {
    let mut codes = vec![GroupCode(vec![0, 0, 0]); 6];
    codes.extend(vec![GroupCode(vec![0, 1, 0]); 2]);
    codes.extend(vec![GroupCode(vec![0, 1, 1]); 3]);
    codes.push(GroupCode(vec![1, 0, 0]));
    let r = resolve_groups(&codes, 5);
    assert_eq!(r[0], GroupCode(vec![0, 0, 0]));
    assert_eq!(r[6], GroupCode(vec![0, 1]));
    assert_eq!(r[8], GroupCode(vec![0, 1]));
    assert_eq!(r[11], GroupCode(vec![1]));
}

#[test]
fn group_top_categories_cover_archetype_mass() {
    let cfg = WorldConfig {
        n_users: 1500,
        n_archetypes: 40,
        noise_rate: 0.0,
        ..WorldConfig::default()
    };
    let w = generate_world(&cfg, 6).unwrap();
    let pcfg = ProfilerConfig {
        embedding_dim: 64,
        offline_source_dim: 128,
        ..ProfilerConfig::default()
    };
    let embs: Vec<Vec<f64>> = encode_users(&w.users, &w.schema, &pcfg)
        .unwrap()
        .into_iter()
        .map(|e| e.vector)
        .collect();
    let fit = rq_kmeans_fit(&embs, &GrouperConfig::default(), 6).unwrap();
    let priors = PriorSet::build(
        &w.users,
        &fit.codes,
        &attribute_schema(),
        &PriorsConfig {
            top_categories: 3,
            ..PriorsConfig::default()
        },
    )
    .unwrap();
    let mut by_group: HashMap<&GroupCode, Vec<&UserRecord>> = HashMap::new();
    for (m, u) in priors.membership.iter().zip(&w.users) {
        by_group.entry(&m.prior_group).or_default().push(u);
    }
    for (code, members) in by_group {
        let purchases: Vec<usize> = members
            .iter()
            .flat_map(|u| u.purchase_log.iter().map(|p| p.category_id))
            .collect();
        if purchases.is_empty() {
            continue;
        }
        let mut counts: HashMap<usize, usize> = HashMap::new();
        for &c in &purchases {
            *counts.entry(c).or_default() += 1;
        }
        let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
        ranked.sort_by_key(|&(c, n)| (std::cmp::Reverse(n), c));
        let group_cover: usize = ranked.iter().take(3).map(|x| x.1).sum();
        let mut arch_counts: HashMap<usize, usize> = HashMap::new();
        for u in &members {
            *arch_counts.entry(u.archetype_id).or_default() += 1;
        }
        let major = arch_counts
            .iter()
            .max_by_key(|(a, n)| (**n, std::cmp::Reverse(**a)))
            .unwrap()
            .0;
        let mut aff: Vec<(usize, f64)> = w.archetypes[*major]
            .category_affinity
            .iter()
            .copied()
            .enumerate()
            .collect();
        aff.sort_by(|a, b| b.1.total_cmp(&a.1));
        let arch_top: Vec<usize> = aff.iter().take(3).map(|x| x.0).collect();
        let arch_cover = purchases.iter().filter(|c| arch_top.contains(c)).count();
        assert!(group_cover >= arch_cover, "group {code}");
        assert!(!priors.prior_for(code).unwrap().sequence.is_empty());
    }
    assert!(priors.prior_for(&GroupCode(vec![99, 99])).is_err());
}

#[test]
fn priors_round_trip() {
    let cfg = WorldConfig {
        n_users: 300,
        n_archetypes: 10,
        ..WorldConfig::default()
    };
    let w = generate_world(&cfg, 2).unwrap();
    let codes: Vec<GroupCode> = w
        .users
        .iter()
        .map(|u| GroupCode(vec![u.user_id % 4, u.user_id % 3]))
        .collect();
    let p = PriorSet::build(&w.users, &codes, &w.schema, &PriorsConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    p.write(dir.path()).unwrap();
    assert_eq!(PriorSet::read(dir.path()).unwrap(), p);
}
