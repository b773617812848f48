use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::data::{Batch, Example, FeatureSpace, UserFeatures};
use super::net::CvrModel;
use super::ModelConfig;
use crate::autograd::{AdagradState, Graph, LrSchedule};
use crate::error::{Error, Result};
use crate::seed::stage_rng;

/// Purchase count at quantile `q` of the users (nearest rank on the sorted
/// counts).
pub fn activity_percentile(users: &[UserFeatures], q: f64) -> usize {
    let mut a: Vec<usize> = users.iter().map(|u| u.activity).collect();
    if a.is_empty() {
        return 0;
    }
    a.sort_unstable();
    a[((a.len() - 1) as f64 * q).floor() as usize]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub theta_act: usize,
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Share of training rows whose distillation gate was open, per epoch.
    pub gate_open_rate: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub model: CvrModel,
    pub report: TrainReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub user_id: usize,
    pub item_id: usize,
    pub label: u8,
    pub z_fused: f64,
    pub z_ind: Option<f64>,
    pub z_group: Option<f64>,
    pub alpha_fusion: Option<f64>,
    pub alpha_distill: Option<f64>,
}

pub fn train(
    space: FeatureSpace,
    users: &[UserFeatures],
    examples: &[Example],
    config: &ModelConfig,
    group_dim: usize,
    id_dim: usize,
    seed: u64,
) -> Result<TrainedModel> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::Degenerate("no training examples".into()));
    }
    let theta_act = config.theta_act.unwrap_or_else(|| activity_percentile(users, 0.7));
    let mut model = CvrModel::new(config.clone(), space, group_dim, id_dim, theta_act, seed);
    let per_epoch = examples.len().div_ceil(config.batch_size);
    let schedule = LrSchedule {
        base_lr: config.base_lr,
        lr_floor: config.lr_floor,
        total_steps: per_epoch * config.epochs,
    };
    let mut opt = AdagradState::new(&model.params, schedule, config.adagrad_eps);
    let mut rng = stage_rng(seed, "model/shuffle");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        steps: 0,
        theta_act,
        epoch_losses: Vec::new(),
        gate_open_rate: Vec::new(),
    };
    let mut rows = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut open) = (0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            rows.clear();
            rows.extend(chunk.iter().map(|&i| examples[i]));
            let batch = Batch::assemble(&model.space, users, &rows);
            let mut g = Graph::new();
            let out = model.forward(&mut g, &batch)?;
            loss_sum += g.item(out.loss) * chunk.len() as f64;
            open += out.gate.iter().sum::<f64>();
            g.backward(out.loss, &mut model.params)?;
            opt.step(&mut model.params);
            report.steps += 1;
        }
        report.epoch_losses.push(loss_sum / examples.len() as f64);
        report.gate_open_rate.push(open / examples.len() as f64);
    }
    Ok(TrainedModel { model, report })
}

impl CvrModel {
    pub fn predict(&self, users: &[UserFeatures], examples: &[Example], batch_size: usize) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(batch_size.max(1)) {
            let batch = Batch::assemble(&self.space, users, chunk);
            let mut g = Graph::new();
            let f = self.forward(&mut g, &batch)?;
            let col = |v: Option<crate::autograd::Var>, i: usize| v.map(|v| g.value(v)[i]);
            for (i, ex) in chunk.iter().enumerate() {
                out.push(Prediction {
                    user_id: users[ex.user].user_id,
                    item_id: ex.item,
                    label: ex.label as u8,
                    z_fused: g.value(f.z_fused)[i],
                    z_ind: col(f.z_ind, i),
                    z_group: col(f.z_group, i),
                    alpha_fusion: col(f.alpha_fusion, i),
                    alpha_distill: col(f.alpha_distill, i),
                });
            }
        }
        Ok(out)
    }
}
