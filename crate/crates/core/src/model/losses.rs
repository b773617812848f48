//! Distillation, gating and fusion pieces, each on `[B, 1]` columns.

use crate::autograd::{scalar_sigmoid, scalar_softplus, Graph, Var};
use crate::error::Result;

pub fn sigmoid(x: f64) -> f64 {
    scalar_sigmoid(x)
}

/// 1 when the user is active enough and the individual prediction is
/// confident (strictly farther than `theta_conf` from 0.5), else 0.
pub fn qualification_gate(activity: usize, z_ind: f64, theta_act: usize, theta_conf: f64) -> f64 {
    let confident = (sigmoid(z_ind) - 0.5).abs() > theta_conf;
    if activity >= theta_act && confident {
        1.0
    } else {
        0.0
    }
}

/// `max(0, |s(z_ind / T) - s(z_group / T)| - m)^2` per row. The teacher
/// logit `z_ind` is detached.
pub fn margin_distill_loss(g: &mut Graph, z_ind: Var, z_group: Var, temperature: f64, margin: f64) -> Result<Var> {
    let teacher = g.detach(z_ind);
    let t = g.scale(teacher, 1.0 / temperature);
    let pt = g.sigmoid(t);
    let s = g.scale(z_group, 1.0 / temperature);
    let ps = g.sigmoid(s);
    let d = g.sub(pt, ps)?;
    let d = g.abs(d);
    let d = g.add_scalar(d, -margin);
    let h = g.relu(d);
    g.mul(h, h)
}

/// Temperature-scaled Bernoulli KL, `T^2 KL(s(z_ind / T) || s(z_group / T))`
/// per row, with the teacher detached.
pub fn kl_distill_loss(g: &mut Graph, z_ind: Var, z_group: Var, temperature: f64) -> Result<Var> {
    let teacher: Vec<f64> = g.value(z_ind).iter().map(|z| sigmoid(z / temperature)).collect();
    let rows = teacher.len();
    // Teacher entropy term: p ln p + (1 - p) ln(1 - p).
    let neg_entropy: Vec<f64> = g
        .value(z_ind)
        .iter()
        .zip(&teacher)
        .map(|(z, p)| {
            let a = z / temperature;
            -p * scalar_softplus(-a) - (1.0 - p) * scalar_softplus(a)
        })
        .collect();
    let p = g.constant(&[rows, 1], teacher.clone())?;
    let q = g.constant(&[rows, 1], teacher.iter().map(|p| 1.0 - p).collect())?;
    let h = g.constant(&[rows, 1], neg_entropy)?;
    let s = g.scale(z_group, 1.0 / temperature);
    // -ln s(x) = softplus(-x), -ln(1 - s(x)) = softplus(x)
    let neg_s = g.scale(s, -1.0);
    let nll_pos = g.softplus(neg_s);
    let nll_neg = g.softplus(s);
    let a = g.mul(nll_pos, p)?;
    let b = g.mul(nll_neg, q)?;
    let cross = g.add(a, b)?;
    let kl = g.add(cross, h)?;
    Ok(g.scale(kl, temperature * temperature))
}

/// `gate * alpha_distill * loss` per row.
pub fn kd_loss(g: &mut Graph, gate: &[f64], alpha_distill: Var, loss: Var) -> Result<Var> {
    let gate = g.constant(&[gate.len(), 1], gate.to_vec())?;
    let a = g.mul(alpha_distill, gate)?;
    g.mul(loss, a)
}

/// `(1 - alpha) z_ind + alpha z_group`
pub fn fuse_logits(g: &mut Graph, z_ind: Var, z_group: Var, alpha_fusion: Var) -> Result<Var> {
    let keep = g.one_minus(alpha_fusion);
    let a = g.mul(z_ind, keep)?;
    let b = g.mul(z_group, alpha_fusion)?;
    g.add(a, b)
}
