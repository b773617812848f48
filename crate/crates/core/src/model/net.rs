use std::rc::Rc;

use rand::Rng;

use super::data::{Batch, FeatureSpace, CONTEXTS};
use super::losses::{fuse_logits, kd_loss, kl_distill_loss, margin_distill_loss, qualification_gate};
use super::{Mode, ModelConfig};
use crate::autograd::{Graph, Linear, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::priors::GroupIdFusionNet;
use crate::seed::stage_rng;

/// Scores each sequence item against the candidate with a one-hidden-layer
/// MLP on `[item, candidate, item * candidate]` and pools the sequence with
/// the softmax of those scores.
#[derive(Clone, Copy, Debug)]
pub struct TargetAttention {
    pub hidden: Linear,
    pub out: Linear,
}

impl TargetAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, width: usize, rng: &mut R) -> Self {
        TargetAttention {
            hidden: Linear::new(store, &format!("{name}.hidden"), 3 * dim, width, rng),
            out: Linear::new(store, &format!("{name}.score"), width, 1, rng),
        }
    }

    /// `seq` holds every batch row's items back to back (`[N, d]`), split by
    /// `offsets`; `cand` is `[B, d]`. Empty sequences pool to zeros.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: Option<Var>,
        cand: Var,
        offsets: &Rc<[usize]>,
    ) -> Result<Var> {
        let Some(seq) = seq else {
            return zeros_like(g, cand);
        };
        let w1 = g.param(store, self.hidden.weight);
        let b1 = g.param(store, self.hidden.bias);
        let w2 = g.param(store, self.out.weight);
        let b2 = g.param(store, self.out.bias);
        g.target_attention(seq, cand, offsets.clone(), w1, b1, w2, b2)
    }

    /// The same computation assembled from primitive ops; slower, kept as
    /// the reference the fused kernel is tested against.
    pub fn forward_reference(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: Option<Var>,
        cand: Var,
        offsets: &Rc<[usize]>,
    ) -> Result<Var> {
        let Some(seq) = seq else {
            return zeros_like(g, cand);
        };
        let cand_rep = g.repeat_rows(cand, offsets.clone())?;
        let inter = g.mul(seq, cand_rep)?;
        let x = g.concat(&[seq, cand_rep, inter], 1)?;
        let h = self.hidden.forward(g, store, x)?;
        let h = g.relu(h);
        let scores = self.out.forward(g, store, h)?;
        let weights = g.segment_softmax(scores, offsets.clone())?;
        let weighted = g.mul(seq, weights)?;
        g.segment_sum(weighted, offsets.clone())
    }
}

fn zeros_like(g: &mut Graph, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    g.constant(&shape, vec![0.0; shape.iter().product()])
}

#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub hidden: Linear,
    pub out: Linear,
}

impl Injection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, mid: usize, width: usize, post: usize, rng: &mut R) -> Self {
        Injection {
            hidden: Linear::new(store, "inject.hidden", 2 * mid, width, rng),
            out: Linear::new(store, "inject.out", width, post, rng),
        }
    }

    /// `h_fuse` for the given taps; errors when their widths do not match
    /// the layer.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, group_mid: Var, ind_mid: Var) -> Result<Var> {
        let joint = g.concat(&[group_mid, ind_mid], 1)?;
        let h = self.hidden.forward(g, store, joint)?;
        let h = g.relu(h);
        self.out.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct Tower {
    first: Linear,
    second: Linear,
    head: Linear,
}

struct TowerTaps {
    mid: Var,
    post: Var,
}

impl Tower {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: [usize; 2], rng: &mut R) -> Self {
        Tower {
            first: Linear::new(store, &format!("{name}.layer1"), input, hidden[0], rng),
            second: Linear::new(store, &format!("{name}.layer2"), hidden[0], hidden[1], rng),
            head: Linear::new(store, &format!("{name}.head"), hidden[1], 1, rng),
        }
    }

    fn taps(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<TowerTaps> {
        let a = self.first.forward(g, store, x)?;
        let mid = g.relu(a);
        let b = self.second.forward(g, store, mid)?;
        let post = g.relu(b);
        Ok(TowerTaps { mid, post })
    }
}

/// Outputs of one forward pass; channel-specific entries are `None` when the
/// mode does not have that channel.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub z_ind: Option<Var>,
    pub z_group: Option<Var>,
    pub z_fused: Var,
    pub alpha_distill: Option<Var>,
    pub alpha_fusion: Option<Var>,
    pub gate: Vec<f64>,
    pub bce: Var,
    /// Per-row gated distillation loss.
    pub kd: Option<Var>,
    pub loss: Var,
}

#[derive(Clone, Debug)]
pub struct CvrModel {
    pub config: ModelConfig,
    pub space: FeatureSpace,
    pub params: ParamStore,
    pub theta_act: usize,
    item_emb: ParamId,
    cat_emb: ParamId,
    user_emb: ParamId,
    ctx_emb: ParamId,
    own_attr: Vec<ParamId>,
    group_attr: Vec<ParamId>,
    ind_attention: TargetAttention,
    group_attention: TargetAttention,
    group_id: GroupIdFusionNet,
    ind_tower: Tower,
    group_tower: Tower,
    merged_tower: Tower,
    inject: Injection,
    rel_hidden: Linear,
    rel_distill: Linear,
    rel_fusion: Linear,
}

impl CvrModel {
    pub fn new(
        config: ModelConfig,
        space: FeatureSpace,
        group_dim: usize,
        id_dim: usize,
        theta_act: usize,
        seed: u64,
    ) -> Self {
        let mut rng = stage_rng(seed, "model/init");
        let mut p = ParamStore::new();
        let s = config.init_scale;
        let d = config.item_dim;
        let item_emb = p.add("item_emb", Tensor::uniform(&[space.n_items, d], s, &mut rng));
        let cat_emb = p.add("category_emb", Tensor::uniform(&[space.n_categories, d], s, &mut rng));
        let user_emb = p.add(
            "user_emb",
            Tensor::uniform(&[space.n_users, config.user_dim], s, &mut rng),
        );
        let ctx_emb = p.add("context_emb", Tensor::uniform(&[CONTEXTS, config.ctx_dim], s, &mut rng));
        let attr_tables = |p: &mut ParamStore, prefix: &str, rng: &mut _| -> Vec<ParamId> {
            space
                .discrete_cardinality
                .iter()
                .enumerate()
                .map(|(f, &c)| {
                    p.add(
                        format!("{prefix}{f}"),
                        Tensor::uniform(&[c + 1, config.attr_dim], s, rng),
                    )
                })
                .collect()
        };
        let own_attr = attr_tables(&mut p, "ind.attr", &mut rng);
        let group_attr = attr_tables(&mut p, "group.attr", &mut rng);
        let ind_attention = TargetAttention::new(&mut p, "ind.attention", d, config.attention_hidden, &mut rng);
        let group_attention = TargetAttention::new(&mut p, "group.attention", d, config.attention_hidden, &mut rng);
        let group_id = GroupIdFusionNet::new(
            &mut p,
            "group.id",
            space.levels.max(1),
            space.codebook_size,
            id_dim,
            group_dim,
            &mut rng,
        );
        let n_disc = space.discrete_cardinality.len();
        let attr_width = n_disc * config.attr_dim + 2 * space.n_continuous;
        let ind_in = config.user_dim + attr_width + config.ctx_dim + 2 * d;
        let mode = config.mode;
        let group_in = if mode == Mode::NoIdEmb { 0 } else { group_dim }
            + if mode == Mode::NoAttrEmb {
                0
            } else {
                attr_width + 2 * (n_disc + space.n_continuous)
            }
            + if mode == Mode::NoSeqEmb { 0 } else { d }
            + d;
        let ind_tower = Tower::new(&mut p, "ind.tower", ind_in, config.tower_hidden, &mut rng);
        let group_tower = Tower::new(&mut p, "group.tower", group_in, config.tower_hidden, &mut rng);
        let inject = Injection::new(
            &mut p,
            config.tower_hidden[0],
            config.injection_hidden,
            config.tower_hidden[1],
            &mut rng,
        );
        let rel_hidden = Linear::new(&mut p, "reliability.hidden", 3, config.reliability_hidden, &mut rng);
        let rel_distill = Linear::new(&mut p, "reliability.distill", config.reliability_hidden, 1, &mut rng);
        let rel_fusion = Linear::new(&mut p, "reliability.fusion", config.reliability_hidden, 1, &mut rng);
        let merged_tower = Tower::new(&mut p, "merged.tower", ind_in + group_in, config.tower_hidden, &mut rng);
        CvrModel {
            config,
            space,
            params: p,
            theta_act,
            item_emb,
            cat_emb,
            user_emb,
            ctx_emb,
            own_attr,
            group_attr,
            ind_attention,
            group_attention,
            group_id,
            ind_tower,
            group_tower,
            merged_tower,
            inject,
            rel_hidden,
            rel_distill,
            rel_fusion,
        }
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    /// Learned user-ID embedding rows.
    pub fn user_embeddings(&self) -> Vec<Vec<f64>> {
        let t = self.params.get(self.user_emb);
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    /// Injection weights, exposed for probes.
    pub fn injection(&self) -> Injection {
        self.inject
    }

    fn items(&self, g: &mut Graph, store: &ParamStore, items: &Rc<[usize]>, cats: &Rc<[usize]>) -> Result<Option<Var>> {
        if items.is_empty() {
            return Ok(None);
        }
        let it = g.param(store, self.item_emb);
        let ct = g.param(store, self.cat_emb);
        let a = g.gather(it, items.clone())?;
        let b = g.gather(ct, cats.clone())?;
        Ok(Some(g.add(a, b)?))
    }

    fn attrs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tables: &[ParamId],
        idx: &[Rc<[usize]>],
        cont: &[f64],
        rows: usize,
        out: &mut Vec<Var>,
    ) -> Result<()> {
        for (t, i) in tables.iter().zip(idx) {
            let table = g.param(store, *t);
            out.push(g.gather(table, i.clone())?);
        }
        if !cont.is_empty() {
            out.push(g.constant(&[rows, cont.len() / rows], cont.to_vec())?);
        }
        Ok(())
    }

    fn individual_input(&self, g: &mut Graph, store: &ParamStore, b: &Batch, cand: Var) -> Result<Var> {
        let ut = g.param(store, self.user_emb);
        let mut parts = vec![g.gather(ut, b.users.clone())?];
        self.attrs(
            g,
            store,
            &self.own_attr,
            &b.own_discrete,
            &b.own_continuous,
            b.len,
            &mut parts,
        )?;
        let ct = g.param(store, self.ctx_emb);
        parts.push(g.gather(ct, b.contexts.clone())?);
        let seq = self.items(g, store, &b.seq_items, &b.seq_categories)?;
        parts.push(self.ind_attention.forward(g, store, seq, cand, &b.seq_offsets)?);
        parts.push(cand);
        g.concat(&parts, 1)
    }

    fn group_input(&self, g: &mut Graph, store: &ParamStore, b: &Batch, cand: Var) -> Result<Var> {
        let mode = self.config.mode;
        let mut parts = Vec::new();
        if mode != Mode::NoIdEmb {
            let ids = self.group_id.forward(g, store, &b.codes)?;
            parts.push(g.gather(ids, b.code_index.clone())?);
        }
        if mode != Mode::NoAttrEmb {
            self.attrs(
                g,
                store,
                &self.group_attr,
                &b.group_discrete,
                &b.group_continuous,
                b.len,
                &mut parts,
            )?;
            let width = b.provenance.len() / b.len;
            parts.push(g.constant(&[b.len, width], b.provenance.clone())?);
        }
        if mode != Mode::NoSeqEmb {
            let seq = self.items(g, store, &b.gseq_items, &b.gseq_categories)?;
            parts.push(self.group_attention.forward(g, store, seq, cand, &b.gseq_offsets)?);
        }
        parts.push(cand);
        g.concat(&parts, 1)
    }

    pub fn forward(&self, g: &mut Graph, b: &Batch) -> Result<ForwardOutput> {
        self.forward_with(g, &self.params, b)
    }

    /// Forward pass against an explicit parameter store (used by gradient
    /// checks, which perturb a copy).
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, b: &Batch) -> Result<ForwardOutput> {
        self.forward_inner(g, store, b, None)
    }

    /// Like [`CvrModel::forward_with`], but the distillation teacher (and so
    /// the qualification gate) uses the given logits instead of this pass's
    /// `z_ind`. Backprop already treats the teacher as a constant; pinning it
    /// makes finite differences see the same function.
    pub fn forward_with_teacher(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &Batch,
        teacher: &[f64],
    ) -> Result<ForwardOutput> {
        self.forward_inner(g, store, b, Some(teacher))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        b: &Batch,
        teacher: Option<&[f64]>,
    ) -> Result<ForwardOutput> {
        let mode = self.config.mode;
        let cand = self
            .items(g, store, &b.items, &b.item_categories)?
            .expect("batch has at least one row");
        let mut out = ForwardOutput {
            z_ind: None,
            z_group: None,
            z_fused: cand,
            alpha_distill: None,
            alpha_fusion: None,
            gate: Vec::new(),
            bce: cand,
            kd: None,
            loss: cand,
        };

        if mode == Mode::NoDualChannel {
            let xi = self.individual_input(g, store, b, cand)?;
            let xg = self.group_input(g, store, b, cand)?;
            let x = g.concat(&[xi, xg], 1)?;
            let t = self.merged_tower.taps(g, store, x)?;
            out.z_fused = self.merged_tower.head.forward(g, store, t.post)?;
        } else {
            let group = if mode.uses_group() {
                let x = self.group_input(g, store, b, cand)?;
                let t = self.group_tower.taps(g, store, x)?;
                let z = self.group_tower.head.forward(g, store, t.post)?;
                out.z_group = Some(z);
                Some(t)
            } else {
                None
            };
            if mode.uses_individual() {
                let x = self.individual_input(g, store, b, cand)?;
                let t = self.ind_tower.taps(g, store, x)?;
                let mut post = t.post;
                if mode.injection() {
                    let gm = group.as_ref().expect("dual mode has a group channel").mid;
                    let fuse = self.inject.forward(g, store, gm, t.mid)?;
                    post = g.add(post, fuse)?;
                }
                out.z_ind = Some(self.ind_tower.head.forward(g, store, post)?);
            }
            out.z_fused = match (out.z_ind, out.z_group) {
                (Some(zi), Some(zg)) => {
                    let r = g.constant(&[b.len, 3], b.reliability.clone())?;
                    let h = self.rel_hidden.forward(g, store, r)?;
                    let h = g.relu(h);
                    let ad = self.rel_distill.forward(g, store, h)?;
                    let af = self.rel_fusion.forward(g, store, h)?;
                    let ad = g.sigmoid(ad);
                    let af = g.sigmoid(af);
                    out.alpha_distill = Some(ad);
                    out.alpha_fusion = Some(af);
                    fuse_logits(g, zi, zg, af)?
                }
                (Some(z), None) | (None, Some(z)) => z,
                (None, None) => unreachable!("every mode has a channel"),
            };
        }

        out.bce = g.bce_with_logits(out.z_fused, b.labels.clone())?;
        out.loss = out.bce;
        if mode.distillation() {
            let zg = out.z_group.expect("dual");
            let zi = match teacher {
                Some(t) => g.constant(&[b.len, 1], t.to_vec())?,
                None => out.z_ind.expect("dual"),
            };
            let cfg = &self.config;
            out.gate = g
                .value(zi)
                .iter()
                .zip(&b.activity)
                .map(|(&z, &a)| qualification_gate(a, z, self.theta_act, cfg.theta_conf))
                .collect();
            let per_row = match mode {
                Mode::KlLoss => kl_distill_loss(g, zi, zg, cfg.temperature)?,
                Mode::NoMargin => margin_distill_loss(g, zi, zg, cfg.temperature, 0.0)?,
                _ => margin_distill_loss(g, zi, zg, cfg.temperature, cfg.margin)?,
            };
            let kd = kd_loss(g, &out.gate, out.alpha_distill.expect("dual"), per_row)?;
            out.kd = Some(kd);
            let mean = g.mean(kd);
            let weighted = g.scale(mean, cfg.lambda);
            out.loss = g.add(out.bce, weighted)?;
        }
        Ok(out)
    }
}
