//! On-disk pipeline stages.
//!
//! Each stage lives in its own directory below `paths.out_dir` and ends by
//! writing `manifest.json`: the stage name, root seed, a hash of the config
//! sections the stage depends on, the config itself, and SHA-256 digests of
//! every file it read and wrote. A stage refuses to start when a predecessor
//! manifest is missing, and refuses (unless told otherwise) when the
//! predecessor was produced under a different config.
//!
//! ```text
//! synth/     archetypes, items, users, impressions (.jsonl)
//! profile/   embeddings.jsonl
//! group/     codebooks.jsonl, assignments.jsonl, stats.json
//! priors/    priors.jsonl, membership.jsonl
//! train/M/   params.jsonl, report.json (+ assignments.jsonl for no_llm_emb)
//! eval/M/    report.json, report.jsonl, report.txt
//! ablate/    ablation.jsonl, ablation.txt
//! sweep/     sweep.jsonl, sweep.txt
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::checkpoint::{load_params, restore_into, save_params};
use crate::error::{Error, Result};
use crate::evalkit::{render_ablation, AblationRow, MetricReport};
use crate::grouper::{read_codebooks, write_codebooks, Assignment, GroupCode};
use crate::jsonl;
use crate::model::{train, CvrModel, Mode, ModelConfig, TrainReport};
use crate::priors::PriorSet;
use crate::profiler::SemanticEmbedding;
use crate::synthworld::World;

use super::config::{hex, RunConfig};
use super::experiment::{
    embed, group, id_embedding_grouping, model_seed, report_for, run_ablation_suite, sweep_k, sweep_lambda, synth,
    Grouping, Prepared, SweepPoint,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Profile,
    Group,
    Priors,
    Train,
    Eval,
    Ablate,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Profile => "profile",
            Stage::Group => "group",
            Stage::Priors => "priors",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Ablate => "ablate",
            Stage::Sweep => "sweep",
        }
    }

    /// Config sections whose values can change this stage's output, its own
    /// and its predecessors'.
    fn sections(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &["seed", "world"],
            Stage::Profile => &["seed", "world", "profiler"],
            Stage::Group => &["seed", "world", "profiler", "grouper"],
            Stage::Priors => &["seed", "world", "profiler", "grouper", "priors"],
            Stage::Train => &["seed", "world", "profiler", "grouper", "priors", "model"],
            Stage::Eval | Stage::Ablate | Stage::Sweep => {
                &["seed", "world", "profiler", "grouper", "priors", "model", "eval"]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    /// TOML of the config sections this stage depends on.
    pub config: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

/// The config sections `stage` depends on, as TOML.
pub fn stage_config(config: &RunConfig, stage: Stage) -> String {
    let full: toml::Table = toml::from_str(&config.to_toml()).expect("config round-trips");
    let scoped: toml::Table = stage
        .sections()
        .iter()
        .filter_map(|k| full.get(*k).map(|v| (k.to_string(), v.clone())))
        .collect();
    toml::to_string(&scoped).expect("table serializes")
}

pub fn stage_config_hash(config: &RunConfig, stage: Stage) -> String {
    hex(&Sha256::digest(stage_config(config, stage).as_bytes()))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

#[derive(Clone, Debug, Default)]
pub struct StageOptions {
    /// Proceed (with a warning) when a predecessor was built from a different config.
    pub allow_config_mismatch: bool,
    /// Also write `(x, y)` series as tab-separated files.
    pub plot_data: bool,
}

/// What a stage did, for the caller to print.
#[derive(Clone, Debug, Default)]
pub struct StageOutcome {
    pub outputs: Vec<PathBuf>,
    pub warnings: Vec<String>,
    /// Human-readable report, when the stage produces one.
    pub summary: Option<String>,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub root: PathBuf,
    pub options: StageOptions,
}

/// Tracks inputs and outputs of one stage run.
struct Run<'a> {
    pipe: &'a Pipeline,
    stage: Stage,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    warnings: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(pipe: &'a Pipeline, stage: Stage, dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir)?;
        // A stale manifest must not vouch for half-written outputs.
        let manifest = dir.join("manifest.json");
        if manifest.exists() {
            fs::remove_file(&manifest)?;
        }
        Ok(Run {
            pipe,
            stage,
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
        })
    }

    /// Checks that `dep` finished under a compatible config and records its
    /// outputs as inputs of this stage.
    fn require(&mut self, dep: Stage, dep_dir: &Path) -> Result<()> {
        let path = dep_dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingArtifact {
                stage: dep.name(),
                path,
            });
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path)?)?;
        let expected = stage_config_hash(&self.pipe.config, dep);
        if manifest.config_hash != expected {
            let msg = format!(
                "`{}` artifacts in {} were built from a different config than this `{}` run",
                dep.name(),
                dep_dir.display(),
                self.stage.name()
            );
            if !self.pipe.options.allow_config_mismatch {
                return Err(Error::ConfigMismatch(msg));
            }
            self.warnings.push(msg);
        }
        for f in &manifest.outputs {
            let p = self.pipe.root.join(&f.path);
            if !p.exists() {
                return Err(Error::MissingArtifact {
                    stage: dep.name(),
                    path: p,
                });
            }
            self.inputs.push(p);
        }
        Ok(())
    }

    fn out(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.out(name);
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(p, text)?;
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.out(name);
        fs::write(p, text)?;
        Ok(())
    }

    fn digest(&self, paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
        paths
            .iter()
            .map(|p| {
                let rel = p.strip_prefix(&self.pipe.root).unwrap_or(p);
                Ok(FileDigest {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    sha256: file_sha256(p)?,
                })
            })
            .collect()
    }

    fn finish(self, summary: Option<String>) -> Result<StageOutcome> {
        let manifest = Manifest {
            stage: self.stage.name().to_string(),
            seed: self.pipe.config.seed,
            config_hash: stage_config_hash(&self.pipe.config, self.stage),
            config: stage_config(&self.pipe.config, self.stage),
            inputs: self.digest(&self.inputs)?,
            outputs: self.digest(&self.outputs)?,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join("manifest.json");
        fs::write(&path, text)?;
        let mut outputs = self.outputs;
        outputs.push(path);
        Ok(StageOutcome {
            outputs,
            warnings: self.warnings,
            summary,
        })
    }
}

fn plot_tsv(header: &str, points: impl IntoIterator<Item = (f64, Option<f64>)>) -> String {
    let mut s = format!("{header}\n");
    for (x, y) in points {
        if let Some(y) = y {
            s.push_str(&format!("{x}\t{y}\n"));
        }
    }
    s
}

/// One line of the machine-readable evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "segment", rename_all = "snake_case")]
pub enum ReportRecord {
    Overall {
        mode: String,
        auc: Option<f64>,
        gauc: Option<f64>,
        examples: usize,
    },
    LowActivity {
        mode: String,
        gauc: Option<f64>,
        examples: usize,
    },
    Level {
        mode: String,
        level: usize,
        users: usize,
        examples: usize,
        gauc: Option<f64>,
        mean_alpha_fusion: Option<f64>,
    },
}

pub fn report_records(mode: Mode, r: &MetricReport) -> Vec<ReportRecord> {
    let mode = mode.name().to_string();
    let mut out = vec![
        ReportRecord::Overall {
            mode: mode.clone(),
            auc: r.auc,
            gauc: r.gauc,
            examples: r.examples,
        },
        ReportRecord::LowActivity {
            mode: mode.clone(),
            gauc: r.low_activity_gauc,
            examples: r.low_activity_examples,
        },
    ];
    out.extend(r.levels.iter().map(|l| ReportRecord::Level {
        mode: mode.clone(),
        level: l.level,
        users: l.users,
        examples: l.examples,
        gauc: l.gauc,
        mean_alpha_fusion: l.mean_alpha_fusion,
    }));
    out
}

impl Pipeline {
    pub fn new(config: RunConfig, options: StageOptions) -> Result<Pipeline> {
        config.validate()?;
        let root = config.paths.out_dir.clone();
        Ok(Pipeline { config, root, options })
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn mode_dir(&self, stage: Stage, mode: Mode) -> PathBuf {
        self.stage_dir(stage).join(mode.name())
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        match stage {
            Stage::Synth => self.synth(),
            Stage::Profile => self.profile(),
            Stage::Group => self.group(),
            Stage::Priors => self.priors(),
            Stage::Train => self.train(),
            Stage::Eval => self.eval().map(|(o, _)| o),
            Stage::Ablate => self.ablate(),
            Stage::Sweep => self.sweep(),
        }
    }

    /// Runs every stage up to and including `eval` for the configured mode.
    pub fn run_all(&self) -> Result<(Vec<StageOutcome>, MetricReport)> {
        let mut outcomes = Vec::new();
        for s in [Stage::Synth, Stage::Profile, Stage::Group, Stage::Priors, Stage::Train] {
            outcomes.push(self.run(s)?);
        }
        let (o, report) = self.eval()?;
        outcomes.push(o);
        Ok((outcomes, report))
    }

    pub fn synth(&self) -> Result<StageOutcome> {
        let mut run = Run::new(self, Stage::Synth, self.stage_dir(Stage::Synth))?;
        let world = synth(&self.config)?;
        world.write(&run.dir)?;
        for f in ["archetypes.jsonl", "items.jsonl", "users.jsonl", "impressions.jsonl"] {
            run.out(f);
        }
        let summary = format!(
            "{} users, {} items, {} impressions",
            world.users.len(),
            world.items.len(),
            world.impressions.len()
        );
        run.finish(Some(summary))
    }

    fn load_world(&self, run: &mut Run) -> Result<World> {
        let dir = self.stage_dir(Stage::Synth);
        run.require(Stage::Synth, &dir)?;
        World::read(&dir, &self.config.world)
    }

    pub fn profile(&self) -> Result<StageOutcome> {
        let mut run = Run::new(self, Stage::Profile, self.stage_dir(Stage::Profile))?;
        let world = self.load_world(&mut run)?;
        let embeddings = embed(&world, &self.config)?;
        let degenerate = embeddings.iter().filter(|e| e.degenerate).count();
        let path = run.out("embeddings.jsonl");
        jsonl::write_records(&path, &embeddings)?;
        if degenerate > 0 {
            run.warnings
                .push(format!("{degenerate} users have an all-zero embedding prefix"));
        }
        run.finish(Some(format!(
            "{} embeddings of dim {}",
            embeddings.len(),
            self.config.profiler.embedding_dim
        )))
    }

    fn load_embeddings(&self, run: &mut Run) -> Result<Vec<Vec<f64>>> {
        let dir = self.stage_dir(Stage::Profile);
        run.require(Stage::Profile, &dir)?;
        let records: Vec<SemanticEmbedding> = jsonl::read_records(&dir.join("embeddings.jsonl"))?;
        Ok(records.into_iter().map(|e| e.vector).collect())
    }

    pub fn group(&self) -> Result<StageOutcome> {
        let mut run = Run::new(self, Stage::Group, self.stage_dir(Stage::Group))?;
        let world = self.load_world(&mut run)?;
        let embeddings = self.load_embeddings(&mut run)?;
        let fit = group(&embeddings, &self.config.grouper, self.config.seed)?;
        let path = run.out("codebooks.jsonl");
        write_codebooks(&path, &fit.codebooks)?;
        let path = run.out("assignments.jsonl");
        write_assignments(&path, &world, &fit.codes)?;
        #[derive(Serialize)]
        struct Stats<'a> {
            mean_residual_norms: &'a [f64],
            stage_objectives: &'a [Vec<f64>],
        }
        run.write_json(
            "stats.json",
            &Stats {
                mean_residual_norms: &fit.mean_residual_norms,
                stage_objectives: &fit.stage_objectives,
            },
        )?;
        let distinct: std::collections::BTreeSet<&GroupCode> = fit.codes.iter().collect();
        run.finish(Some(format!(
            "{} users in {} groups; mean residual norm per stage {:?}",
            fit.codes.len(),
            distinct.len(),
            fit.mean_residual_norms
        )))
    }

    pub fn priors(&self) -> Result<StageOutcome> {
        let mut run = Run::new(self, Stage::Priors, self.stage_dir(Stage::Priors))?;
        let world = self.load_world(&mut run)?;
        let group_dir = self.stage_dir(Stage::Group);
        run.require(Stage::Group, &group_dir)?;
        // The codebooks are not needed here, but a corrupt file should fail early.
        read_codebooks(&group_dir.join("codebooks.jsonl"))?;
        let codes = read_assignments(&group_dir.join("assignments.jsonl"), &world)?;
        let priors = PriorSet::build(&world.users, &codes, &world.schema, &self.config.priors)?;
        priors.write(&run.dir)?;
        run.out("priors.jsonl");
        run.out("membership.jsonl");
        let fallback = priors.membership.iter().filter(|m| m.prior_group != m.code).count();
        run.finish(Some(format!(
            "{} group priors; {fallback} users resolved to a parent group",
            priors.groups.len()
        )))
    }

    /// World, embeddings and the semantic grouping, all read from disk.
    fn load_prepared(&self, run: &mut Run) -> Result<Prepared> {
        let world = self.load_world(run)?;
        let embeddings = self.load_embeddings(run)?;
        let group_dir = self.stage_dir(Stage::Group);
        run.require(Stage::Group, &group_dir)?;
        let codes = read_assignments(&group_dir.join("assignments.jsonl"), &world)?;
        let priors_dir = self.stage_dir(Stage::Priors);
        run.require(Stage::Priors, &priors_dir)?;
        let priors = PriorSet::read(&priors_dir)?;
        let grouping = Grouping::from_priors(&world, codes, priors, &self.config)?;
        Prepared::assemble(&self.config, world, embeddings, grouping)
    }

    fn mode(&self) -> Mode {
        self.config.model.mode
    }

    /// Grouping a mode trains on; `no_llm_emb` regroups by user-ID embeddings.
    fn grouping_for(&self, prep: &Prepared, mode: Mode) -> Result<Grouping> {
        if mode == Mode::NoLlmEmb {
            id_embedding_grouping(prep)
        } else {
            Ok(prep.grouping.clone())
        }
    }

    /// The network a mode trains; `no_llm_emb` only changes the grouping.
    fn network_config(&self) -> ModelConfig {
        let mode = match self.mode() {
            Mode::NoLlmEmb => Mode::Full,
            m => m,
        };
        ModelConfig {
            mode,
            ..self.config.model.clone()
        }
    }

    pub fn train(&self) -> Result<StageOutcome> {
        let mode = self.mode();
        let mut run = Run::new(self, Stage::Train, self.mode_dir(Stage::Train, mode))?;
        let prep = self.load_prepared(&mut run)?;
        let grouping = self.grouping_for(&prep, mode)?;
        if mode == Mode::NoLlmEmb {
            let path = run.out("assignments.jsonl");
            write_assignments(&path, &prep.world, &grouping.codes)?;
        }
        let trained = train(
            grouping.space.clone(),
            &grouping.users,
            &grouping.train,
            &self.network_config(),
            self.config.priors.group_dim,
            self.config.priors.id_dim,
            model_seed(self.config.seed),
        )?;
        let path = run.out("params.jsonl");
        save_params(&trained.model.params, &path)?;
        run.write_json("report.json", &trained.report)?;
        let losses: Vec<String> = trained.report.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
        run.finish(Some(format!(
            "{}: {} steps, epoch losses [{}]",
            mode.name(),
            trained.report.steps,
            losses.join(", ")
        )))
    }

    pub fn eval(&self) -> Result<(StageOutcome, MetricReport)> {
        let mode = self.mode();
        let mut run = Run::new(self, Stage::Eval, self.mode_dir(Stage::Eval, mode))?;
        let prep = self.load_prepared(&mut run)?;
        let train_dir = self.mode_dir(Stage::Train, mode);
        run.require(Stage::Train, &train_dir)?;
        let grouping = if mode == Mode::NoLlmEmb {
            let codes = read_assignments(&train_dir.join("assignments.jsonl"), &prep.world)?;
            Grouping::build(&prep.world, codes, &self.config)?
        } else {
            prep.grouping.clone()
        };
        let report: TrainReport = serde_json::from_slice(&fs::read(train_dir.join("report.json"))?)?;
        let mut model = CvrModel::new(
            self.network_config(),
            grouping.space.clone(),
            self.config.priors.group_dim,
            self.config.priors.id_dim,
            report.theta_act,
            model_seed(self.config.seed),
        );
        restore_into(&mut model.params, &load_params(&train_dir.join("params.jsonl"))?)?;
        let predictions = model.predict(&grouping.users, &grouping.test, self.config.eval.predict_batch)?;
        let metrics = report_for(&predictions, &prep);
        run.write_json("report.json", &metrics)?;
        let path = run.out("report.jsonl");
        jsonl::write_records(&path, &report_records(mode, &metrics))?;
        let text = format!("mode {}\n{}", mode.name(), metrics.render());
        run.write_text("report.txt", &text)?;
        if self.options.plot_data {
            let series = plot_tsv("level\tgauc", metrics.levels.iter().map(|l| (l.level as f64, l.gauc)));
            run.write_text("plot_gauc_by_level.tsv", &series)?;
            let alpha = plot_tsv(
                "level\tmean_alpha_fusion",
                metrics.levels.iter().map(|l| (l.level as f64, l.mean_alpha_fusion)),
            );
            run.write_text("plot_alpha_by_level.tsv", &alpha)?;
        }
        Ok((run.finish(Some(text))?, metrics))
    }

    /// Runs `modes` (plus `full`) on the shared world and grouping.
    pub fn ablate_modes(&self, modes: &[String]) -> Result<(StageOutcome, Vec<AblationRow>)> {
        let mut run = Run::new(self, Stage::Ablate, self.stage_dir(Stage::Ablate))?;
        let prep = self.load_prepared(&mut run)?;
        let (_, rows) = run_ablation_suite(&prep, modes)?;
        let path = run.out("ablation.jsonl");
        jsonl::write_records(&path, &rows)?;
        let text = render_ablation(&rows);
        run.write_text("ablation.txt", &text)?;
        Ok((run.finish(Some(text))?, rows))
    }

    /// Every ablation mode.
    pub fn ablate(&self) -> Result<StageOutcome> {
        let modes: Vec<String> = Mode::ALL.iter().map(|m| m.name().to_string()).collect();
        self.ablate_modes(&modes).map(|(o, _)| o)
    }

    pub fn sweep(&self) -> Result<StageOutcome> {
        let mut run = Run::new(self, Stage::Sweep, self.stage_dir(Stage::Sweep))?;
        let prep = self.load_prepared(&mut run)?;
        let mut points = sweep_k(&prep, &self.config.eval.sweep_k)?;
        points.extend(sweep_lambda(&prep, &self.config.eval.sweep_lambda)?);
        let path = run.out("sweep.jsonl");
        jsonl::write_records(&path, &points)?;
        let text = render_sweep(&points);
        run.write_text("sweep.txt", &text)?;
        if self.options.plot_data {
            for (param, file) in [("k", "plot_gauc_vs_k.tsv"), ("lambda", "plot_gauc_vs_lambda.tsv")] {
                let series = plot_tsv(
                    &format!("{param}\tlow_activity_gauc"),
                    points
                        .iter()
                        .filter(|p| p.parameter == param)
                        .map(|p| (p.value, p.low_activity_gauc)),
                );
                run.write_text(file, &series)?;
            }
        }
        run.finish(Some(text))
    }
}

pub fn render_sweep(points: &[SweepPoint]) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    let mut s = String::from("parameter  value    GAUC    low GAUC\n");
    for p in points {
        s.push_str(&format!(
            "{:<9}  {:<7}  {:<6}  {}\n",
            p.parameter,
            p.value,
            f(p.gauc),
            f(p.low_activity_gauc)
        ));
    }
    s
}

fn write_assignments(path: &Path, world: &World, codes: &[GroupCode]) -> Result<()> {
    let rows: Vec<Assignment> = world
        .users
        .iter()
        .zip(codes)
        .map(|(u, c)| Assignment {
            user_id: u.user_id,
            code: c.0.clone(),
        })
        .collect();
    jsonl::write_records(path, &rows)
}

/// Codes in world user order.
fn read_assignments(path: &Path, world: &World) -> Result<Vec<GroupCode>> {
    let rows: Vec<Assignment> = jsonl::read_records(path)?;
    if rows.len() != world.users.len() || rows.iter().zip(&world.users).any(|(a, u)| a.user_id != u.user_id) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            reason: "assignments do not match the world's users".into(),
        });
    }
    Ok(rows.into_iter().map(|a| GroupCode(a.code)).collect())
}
