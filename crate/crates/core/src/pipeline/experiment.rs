//! In-memory experiment driver shared by the CLI stages, sweeps and tests.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::evalkit::{
    ablation_table, evaluate, stratify_by_activity, AblationRow, EvalRow, MetricReport, ScoredExample,
};
use crate::grouper::{rq_kmeans_fit, GroupCode, GrouperConfig, RqFit};
use crate::model::{
    examples_from, train, Example, FeatureSpace, Mode, ModelConfig, Prediction, TrainReport, UserFeatures,
};
use crate::priors::PriorSet;
use crate::profiler::{encode_users, SemanticEmbedding};
use crate::seed::derive_seed;
use crate::synthworld::{generate_world, label_low_activity, split_train_test, Impression, World};

use super::config::RunConfig;

pub fn world_seed(root: u64) -> u64 {
    derive_seed(root, "world")
}

pub fn grouper_seed(root: u64) -> u64 {
    derive_seed(root, "grouper")
}

pub fn model_seed(root: u64) -> u64 {
    derive_seed(root, "model")
}

pub fn synth(config: &RunConfig) -> Result<World> {
    generate_world(&config.world, world_seed(config.seed))
}

pub fn split(world: &World) -> Result<(Vec<Impression>, Vec<Impression>)> {
    let train_units = world.config.history_days;
    split_train_test(&world.impressions, train_units, world.config.n_days - train_units)
}

pub fn embed(world: &World, config: &RunConfig) -> Result<Vec<SemanticEmbedding>> {
    encode_users(&world.users, &world.schema, &config.profiler)
}

pub fn group(embeddings: &[Vec<f64>], grouper: &GrouperConfig, root: u64) -> Result<RqFit> {
    rq_kmeans_fit(embeddings, grouper, grouper_seed(root))
}

/// Everything the model needs for one grouping of the users.
#[derive(Clone, Debug)]
pub struct Grouping {
    pub codes: Vec<GroupCode>,
    pub priors: PriorSet,
    pub space: FeatureSpace,
    pub users: Vec<UserFeatures>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Grouping {
    pub fn build(world: &World, codes: Vec<GroupCode>, config: &RunConfig) -> Result<Grouping> {
        let priors = PriorSet::build(&world.users, &codes, &world.schema, &config.priors)?;
        Grouping::from_priors(world, codes, priors, config)
    }

    pub fn from_priors(world: &World, codes: Vec<GroupCode>, priors: PriorSet, config: &RunConfig) -> Result<Grouping> {
        let (space, users) = FeatureSpace::build(world, &priors, config.model.max_sequence)?;
        let (train_imps, test_imps) = split(world)?;
        let train = examples_from(&train_imps, &users)?;
        let test = examples_from(&test_imps, &users)?;
        Ok(Grouping {
            codes,
            priors,
            space,
            users,
            train,
            test,
        })
    }
}

/// A world with its default semantic grouping.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: RunConfig,
    pub world: World,
    pub embeddings: Vec<Vec<f64>>,
    pub grouping: Grouping,
    pub levels: HashMap<usize, usize>,
    pub low_activity: HashSet<usize>,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Prepared> {
        config.validate()?;
        let world = synth(config)?;
        let embeddings: Vec<Vec<f64>> = embed(&world, config)?.into_iter().map(|e| e.vector).collect();
        Prepared::from_parts(config, world, embeddings)
    }

    pub fn from_parts(config: &RunConfig, world: World, embeddings: Vec<Vec<f64>>) -> Result<Prepared> {
        let rq = group(&embeddings, &config.grouper, config.seed)?;
        let grouping = Grouping::build(&world, rq.codes, config)?;
        Prepared::assemble(config, world, embeddings, grouping)
    }

    /// Wraps an already-built grouping, e.g. one read back from disk.
    pub fn assemble(
        config: &RunConfig,
        world: World,
        embeddings: Vec<Vec<f64>>,
        grouping: Grouping,
    ) -> Result<Prepared> {
        config.validate()?;
        let (levels, low_activity) = segments(&world, config)?;
        Ok(Prepared {
            config: config.clone(),
            world,
            embeddings,
            grouping,
            levels,
            low_activity,
        })
    }

    /// Regroups the same embeddings with a different grouper config.
    pub fn regroup(&self, grouper: &GrouperConfig) -> Result<Grouping> {
        let rq = group(&self.embeddings, grouper, self.config.seed)?;
        Grouping::build(&self.world, rq.codes, &self.config)
    }
}

/// Activity level per user id and the set of low-activity user ids.
pub fn segments(world: &World, config: &RunConfig) -> Result<(HashMap<usize, usize>, HashSet<usize>)> {
    let activity: Vec<(usize, usize)> = world.users.iter().map(|u| (u.user_id, u.activity_count)).collect();
    let levels = stratify_by_activity(&activity, config.eval.levels)?;
    let low = label_low_activity(&world.users, config.eval.low_activity_quantile);
    let low_activity = world
        .users
        .iter()
        .zip(low)
        .filter(|(_, l)| *l)
        .map(|(u, _)| u.user_id)
        .collect();
    Ok((levels, low_activity))
}

#[derive(Clone, Debug)]
pub struct ModeRun {
    pub mode: Mode,
    pub train: TrainReport,
    pub predictions: Vec<Prediction>,
    pub report: MetricReport,
}

pub fn report_for(predictions: &[Prediction], prep: &Prepared) -> MetricReport {
    let rows: Vec<EvalRow> = predictions
        .iter()
        .map(|p| EvalRow {
            example: ScoredExample {
                user_id: p.user_id,
                score: p.z_fused,
                label: p.label,
            },
            alpha_fusion: p.alpha_fusion,
        })
        .collect();
    evaluate(&rows, &prep.levels, prep.config.eval.levels, &prep.low_activity)
}

/// Trains `model` on `grouping` and evaluates on its test examples.
pub fn train_eval(prep: &Prepared, grouping: &Grouping, model: &ModelConfig) -> Result<ModeRun> {
    let trained = train(
        grouping.space.clone(),
        &grouping.users,
        &grouping.train,
        model,
        prep.config.priors.group_dim,
        prep.config.priors.id_dim,
        model_seed(prep.config.seed),
    )?;
    let predictions = trained
        .model
        .predict(&grouping.users, &grouping.test, prep.config.eval.predict_batch)?;
    let report = report_for(&predictions, prep);
    Ok(ModeRun {
        mode: model.mode,
        train: trained.report,
        predictions,
        report,
    })
}

/// Grouping built from the user-ID embeddings of an individual-only model
/// trained with the same seed, in place of the semantic embeddings.
pub fn id_embedding_grouping(prep: &Prepared) -> Result<Grouping> {
    let base = ModelConfig {
        mode: Mode::IndividualOnly,
        ..prep.config.model.clone()
    };
    let trained = train(
        prep.grouping.space.clone(),
        &prep.grouping.users,
        &prep.grouping.train,
        &base,
        prep.config.priors.group_dim,
        prep.config.priors.id_dim,
        model_seed(prep.config.seed),
    )?;
    let rq = group(&trained.model.user_embeddings(), &prep.config.grouper, prep.config.seed)?;
    Grouping::build(&prep.world, rq.codes, &prep.config)
}

pub fn run_mode(prep: &Prepared, mode: Mode) -> Result<ModeRun> {
    let model = ModelConfig {
        mode,
        ..prep.config.model.clone()
    };
    if mode == Mode::NoLlmEmb {
        let grouping = id_embedding_grouping(prep)?;
        // The network itself is the full model.
        let mut run = train_eval(
            prep,
            &grouping,
            &ModelConfig {
                mode: Mode::Full,
                ..model
            },
        )?;
        run.mode = mode;
        return Ok(run);
    }
    train_eval(prep, &prep.grouping, &model)
}

/// Runs every named mode; `full` is always included as the reference row.
pub fn run_ablation_suite(prep: &Prepared, modes: &[String]) -> Result<(Vec<ModeRun>, Vec<AblationRow>)> {
    let mut parsed: Vec<Mode> = vec![Mode::Full];
    for m in modes {
        let mode: Mode = m.parse()?;
        if !parsed.contains(&mode) {
            parsed.push(mode);
        }
    }
    let runs = parsed.iter().map(|&m| run_mode(prep, m)).collect::<Result<Vec<_>>>()?;
    let table = ablation_table(
        &runs
            .iter()
            .map(|r| (r.mode.name().to_string(), r.mode.label().to_string(), r.report.clone()))
            .collect::<Vec<_>>(),
    )?;
    Ok((runs, table))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SweepPoint {
    pub parameter: String,
    pub value: f64,
    pub gauc: Option<f64>,
    pub low_activity_gauc: Option<f64>,
}

fn point(parameter: &str, value: f64, r: &MetricReport) -> SweepPoint {
    SweepPoint {
        parameter: parameter.to_string(),
        value,
        gauc: r.gauc,
        low_activity_gauc: r.low_activity_gauc,
    }
}

/// Full model at each codebook size.
pub fn sweep_k(prep: &Prepared, ks: &[usize]) -> Result<Vec<SweepPoint>> {
    let model = ModelConfig {
        mode: Mode::Full,
        ..prep.config.model.clone()
    };
    ks.iter()
        .map(|&k| {
            if k < 1 {
                return Err(Error::Config("sweep k must be positive".into()));
            }
            let grouping = prep.regroup(&GrouperConfig {
                codebook_size: k,
                ..prep.config.grouper.clone()
            })?;
            Ok(point("k", k as f64, &train_eval(prep, &grouping, &model)?.report))
        })
        .collect()
}

/// Full model at each distillation weight.
pub fn sweep_lambda(prep: &Prepared, lambdas: &[f64]) -> Result<Vec<SweepPoint>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let model = ModelConfig {
                mode: Mode::Full,
                lambda,
                ..prep.config.model.clone()
            };
            Ok(point(
                "lambda",
                lambda,
                &train_eval(prep, &prep.grouping, &model)?.report,
            ))
        })
        .collect()
}
