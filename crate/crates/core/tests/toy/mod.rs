//! A three-archetype toy world and a small model for gradient checks.
#![allow(dead_code)]

use groupcvr_core::autograd::{grad_check, Graph};
use groupcvr_core::grouper::{rq_kmeans_fit, GrouperConfig};
use groupcvr_core::model::{examples_from, Batch, CvrModel, Example, FeatureSpace, Mode, ModelConfig, UserFeatures};
use groupcvr_core::priors::{PriorSet, PriorsConfig};
use groupcvr_core::profiler::{encode_users, ProfilerConfig};
use groupcvr_core::synthworld::{generate_world, WorldConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Toy {
    pub space: FeatureSpace,
    pub users: Vec<UserFeatures>,
    pub examples: Vec<Example>,
    pub priors: PriorSet,
}

pub fn toy_world(seed: u64) -> Toy {
    let wc = WorldConfig {
        n_archetypes: 3,
        n_users: 30,
        n_items: 20,
        n_categories: 5,
        core_categories: 2,
        max_interactions: 300.0,
        eval_impressions: 2,
        ..WorldConfig::default()
    };
    let world = generate_world(&wc, seed).unwrap();
    let pc = ProfilerConfig {
        embedding_dim: 16,
        offline_source_dim: 32,
        ..ProfilerConfig::default()
    };
    let emb: Vec<Vec<f64>> = encode_users(&world.users, &world.schema, &pc)
        .unwrap()
        .into_iter()
        .map(|e| e.vector)
        .collect();
    let gc = GrouperConfig {
        stages: 2,
        codebook_size: 2,
        ..GrouperConfig::default()
    };
    let rq = rq_kmeans_fit(&emb, &gc, seed).unwrap();
    let prc = PriorsConfig {
        top_categories: 2,
        sequence_len: 4,
        min_group_size: 2,
        id_dim: 2,
        group_dim: 3,
    };
    let priors = PriorSet::build(&world.users, &rq.codes, &world.schema, &prc).unwrap();
    let (space, users) = FeatureSpace::build(&world, &priors, 3).unwrap();
    let examples = examples_from(&world.impressions, &users).unwrap();
    Toy {
        space,
        users,
        examples,
        priors,
    }
}

pub fn toy_config(mode: Mode) -> ModelConfig {
    ModelConfig {
        mode,
        item_dim: 3,
        user_dim: 2,
        attr_dim: 2,
        ctx_dim: 2,
        attention_hidden: 3,
        tower_hidden: [5, 4],
        injection_hidden: 3,
        reliability_hidden: 3,
        max_sequence: 3,
        temperature: 1.0,
        margin: 0.001,
        theta_act: Some(0),
        theta_conf: 0.001,
        lambda: 0.5,
        init_scale: 0.5,
        ..ModelConfig::default()
    }
}

pub fn toy_model(toy: &Toy, mode: Mode, seed: u64) -> CvrModel {
    CvrModel::new(toy_config(mode), toy.space.clone(), 3, 2, 0, seed)
}

/// A small batch mixing both labels and both sequence states.
pub fn toy_batch(toy: &Toy, n: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Example> = (0..n)
        .map(|_| toy.examples[rng.random_range(0..toy.examples.len())])
        .collect();
    rows[0].label = 1.0;
    rows[1].label = 0.0;
    Batch::assemble(&toy.space, &toy.users, &rows)
}

/// Worst relative error against central differences over `seeds`.
pub fn check_model_gradients(mode: Mode, seeds: std::ops::Range<u64>) -> f64 {
    let toy = toy_world(77);
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut model = toy_model(&toy, mode, seed);
        // Zero-initialised biases put dead rows exactly on a ReLU kink;
        // check at a generic point instead.
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let biases: Vec<_> = model
            .params
            .ids()
            .filter(|&id| model.params.name(id).ends_with(".bias"))
            .collect();
        for id in biases {
            for v in model.params.get_mut(id).values_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
        let batch = toy_batch(&toy, 6, seed);
        let teacher: Vec<f64> = {
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch).unwrap();
            match out.z_ind {
                Some(z) => g.value(z).to_vec(),
                None => vec![0.0; batch.len],
            }
        };
        let m = model.clone();
        let report = grad_check(
            &mut model.params,
            |g, store| Ok(m.forward_with_teacher(g, store, &batch, &teacher)?.loss),
            1e-4,
        )
        .unwrap();
        worst = worst.max(report.max_rel_error);
    }
    worst
}
