//! Dual-channel conversion model.
//!
//! The individual channel sees the user's own ID, attributes, context and
//! purchase sequence; the group channel sees the fused group ID, completed
//! attributes and the group sequence. Both share the item representation.
//! The group channel's first hidden layer is injected into the individual
//! tower (one way), the group channel is distilled from confident
//! individual predictions of active users, and a reliability network mixes
//! the two logits.

mod data;
mod losses;
mod net;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use data::{examples_from, Batch, Example, FeatureSpace, UserFeatures, CONTEXTS};
pub use losses::{fuse_logits, kd_loss, kl_distill_loss, margin_distill_loss, qualification_gate, sigmoid};
pub use net::{CvrModel, ForwardOutput, Injection, TargetAttention};
pub use train::{activity_percentile, train, Prediction, TrainReport, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Full,
    IndividualOnly,
    GroupOnly,
    /// Groups come from learned user-ID embeddings instead of profile
    /// embeddings; the network itself is the full one.
    NoLlmEmb,
    NoIdEmb,
    NoAttrEmb,
    NoSeqEmb,
    NoDualChannel,
    NoGatedDistill,
    NoInjection,
    KlLoss,
    NoMargin,
}

impl Mode {
    pub const ALL: [Mode; 12] = [
        Mode::Full,
        Mode::IndividualOnly,
        Mode::GroupOnly,
        Mode::NoLlmEmb,
        Mode::NoIdEmb,
        Mode::NoAttrEmb,
        Mode::NoSeqEmb,
        Mode::NoDualChannel,
        Mode::NoGatedDistill,
        Mode::NoInjection,
        Mode::KlLoss,
        Mode::NoMargin,
    ];

    /// The ablation table rows, in display order.
    pub const ABLATIONS: [Mode; 10] = [
        Mode::Full,
        Mode::NoLlmEmb,
        Mode::NoIdEmb,
        Mode::NoAttrEmb,
        Mode::NoSeqEmb,
        Mode::NoDualChannel,
        Mode::NoGatedDistill,
        Mode::NoInjection,
        Mode::KlLoss,
        Mode::NoMargin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::IndividualOnly => "individual_only",
            Mode::GroupOnly => "group_only",
            Mode::NoLlmEmb => "no_llm_emb",
            Mode::NoIdEmb => "no_id_emb",
            Mode::NoAttrEmb => "no_attr_emb",
            Mode::NoSeqEmb => "no_seq_emb",
            Mode::NoDualChannel => "no_dual_channel",
            Mode::NoGatedDistill => "no_gated_distill",
            Mode::NoInjection => "no_injection",
            Mode::KlLoss => "kl_loss",
            Mode::NoMargin => "no_margin",
        }
    }

    /// Human-readable ablation label.
    pub fn label(self) -> &'static str {
        match self {
            Mode::Full => "full model",
            Mode::IndividualOnly => "individual channel only",
            Mode::GroupOnly => "group channel only",
            Mode::NoLlmEmb => "w/o LLM Emb.",
            Mode::NoIdEmb => "w/o ID Emb.",
            Mode::NoAttrEmb => "w/o Attr. Emb.",
            Mode::NoSeqEmb => "w/o Seq. Emb.",
            Mode::NoDualChannel => "w/o Dual-Channel",
            Mode::NoGatedDistill => "w/o Gated Distillation",
            Mode::NoInjection => "w/o Asymmetric Injection",
            Mode::KlLoss => "w/ KL Loss",
            Mode::NoMargin => "w/o Margin",
        }
    }

    pub fn uses_individual(self) -> bool {
        self != Mode::GroupOnly
    }

    pub fn uses_group(self) -> bool {
        self != Mode::IndividualOnly
    }

    /// Separate towers mixed by the reliability network.
    pub fn dual(self) -> bool {
        !matches!(self, Mode::IndividualOnly | Mode::GroupOnly | Mode::NoDualChannel)
    }

    pub fn injection(self) -> bool {
        self.dual() && self != Mode::NoInjection
    }

    pub fn distillation(self) -> bool {
        self.dual() && self != Mode::NoGatedDistill
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub item_dim: usize,
    pub user_dim: usize,
    pub attr_dim: usize,
    pub ctx_dim: usize,
    pub attention_hidden: usize,
    pub tower_hidden: [usize; 2],
    pub injection_hidden: usize,
    pub reliability_hidden: usize,
    /// Most recent own purchases fed to the individual channel.
    pub max_sequence: usize,
    pub temperature: f64,
    pub margin: f64,
    /// Minimum purchase count for a teacher; `None` uses the 70th percentile
    /// of the training users' counts.
    pub theta_act: Option<usize>,
    pub theta_conf: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_floor: f64,
    pub adagrad_eps: f64,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Full,
            item_dim: 8,
            user_dim: 8,
            attr_dim: 4,
            ctx_dim: 4,
            attention_hidden: 16,
            tower_hidden: [64, 32],
            injection_hidden: 32,
            reliability_hidden: 16,
            max_sequence: 20,
            temperature: 2.0,
            margin: 0.05,
            theta_act: None,
            theta_conf: 0.3,
            lambda: 0.005,
            batch_size: 1024,
            epochs: 10,
            base_lr: 0.01,
            lr_floor: 0.001,
            adagrad_eps: 1e-8,
            init_scale: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if !(self.temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be nonnegative");
        }
        if !(self.theta_conf > 0.0 && self.theta_conf < 0.5) {
            return bad("theta_conf must lie in (0, 0.5)");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.base_lr > 0.0 && self.lr_floor > 0.0 && self.lr_floor <= self.base_lr) {
            return bad("need 0 < lr_floor <= base_lr");
        }
        Ok(())
    }
}
