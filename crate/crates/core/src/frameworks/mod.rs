//! Desk-scale self-supervised frameworks with the dimensional regularizer
//! mixed into their objective: `total = λ·dimcl + (1 − λ)·base`.
//!
//! * SimCLR: base is batch InfoNCE between the two views, both through the
//!   online encoder.
//! * BYOL: online encoder + predictor against an EMA target encoder.
//! * SimSiam: online encoder + predictor against the same encoder with the
//!   gradient stopped.
//! * Supervised: cross-entropy of a linear head on the backbone features of
//!   the first view.
//!
//! For BYOL and SimSiam both the base loss and the regularizer are averaged
//! over the two view orders.

pub mod checkpoint;
pub mod nn;
pub mod optim;

use std::fmt;
use std::str::FromStr;

use crate::data::augment::Augmentation;
use crate::data::{augment_batch, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, graph, DimensionalConfig, EmbeddingPair, LossMixConfig, NegativeLogit};
use crate::numcore::rng::streams;
use crate::numcore::{Axis, Graph, ImageShape, Matrix, NodeId, Rng, NORM_EPS};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use nn::{bind, infer, Backbone, ConvNet, Dense, Encoder, EncoderNodes, Mlp, Network};
pub use optim::{CosineWarmup, Sgd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FrameworkKind {
    SimClr,
    Byol,
    SimSiam,
    Supervised,
}

impl FrameworkKind {
    pub const ALL: [FrameworkKind; 4] =
        [FrameworkKind::SimClr, FrameworkKind::Byol, FrameworkKind::SimSiam, FrameworkKind::Supervised];

    pub fn name(self) -> &'static str {
        match self {
            FrameworkKind::SimClr => "simclr",
            FrameworkKind::Byol => "byol",
            FrameworkKind::SimSiam => "simsiam",
            FrameworkKind::Supervised => "supervised",
        }
    }

    pub fn has_predictor(self) -> bool {
        matches!(self, FrameworkKind::Byol | FrameworkKind::SimSiam)
    }

    pub fn has_target(self) -> bool {
        self == FrameworkKind::Byol
    }

    /// Whether base loss and regularizer are averaged over both view orders.
    pub fn symmetric(self) -> bool {
        self.has_predictor()
    }
}

impl fmt::Display for FrameworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FrameworkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown framework `{s}`")))
    }
}

/// Which embeddings of the online branch the regularizer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DimclInput {
    #[default]
    Projector,
    /// Predictor outputs (BYOL/SimSiam only; falls back to the projector
    /// for frameworks without a predictor).
    Predictor,
}

/// Framework-level knobs besides the loss mix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameworkOptions {
    /// SimCLR's own InfoNCE temperature.
    pub base_tau: f64,
    pub negatives: NegativeLogit,
    pub center: bool,
    pub dimcl_input: DimclInput,
    /// EMA momentum of the BYOL target; `1` freezes the target.
    pub ema_momentum: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for FrameworkOptions {
    fn default() -> Self {
        Self {
            base_tau: 0.1,
            negatives: NegativeLogit::Dot,
            center: false,
            dimcl_input: DimclInput::Projector,
            ema_momentum: 0.99,
            momentum: 0.9,
            weight_decay: 1e-5,
        }
    }
}

impl FrameworkOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_tau > 0.0) || !self.base_tau.is_finite() {
            return Err(Error::NonpositiveTemperature(self.base_tau));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidArgument(format!("ema momentum {} out of [0,1]", self.ema_momentum)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("optimizer momentum must be in [0,1), weight decay ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneSpec {
    /// Dense layers with batch standardization and ReLU, widths `hidden`.
    Mlp { input: usize, hidden: Vec<usize> },
    /// Convolution blocks with the given channel counts.
    Conv { input: ImageShape, channels: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub backbone: BackboneSpec,
    pub proj_hidden: usize,
    /// Embedding dimension `D`.
    pub dim: usize,
    pub pred_hidden: usize,
}

impl Architecture {
    fn build_encoder(&self, rng: &mut Rng) -> Result<Encoder> {
        let backbone = match &self.backbone {
            BackboneSpec::Mlp { input, hidden } => {
                if hidden.is_empty() {
                    return Err(Error::InvalidArgument("mlp backbone needs at least one layer".into()));
                }
                let mut dims = vec![*input];
                dims.extend(hidden);
                Backbone::Mlp(Mlp::new(&dims, true, rng))
            }
            BackboneSpec::Conv { input, channels } => Backbone::Conv(ConvNet::new(*input, channels, rng)?),
        };
        Ok(Encoder::new(backbone, self.proj_hidden, self.dim, rng))
    }
}

/// Scalars of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub base_loss: f64,
    pub dimcl_loss: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Embeddings of both view orders: `ab = (f(A), f′(B))`, `ba = (f(B), f′(A))`
/// where `f′` is the target encoder (BYOL), the stop-gradient online
/// encoder (SimSiam) or the online encoder itself.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewEmbeddings {
    pub ab: EmbeddingPair,
    pub ba: EmbeddingPair,
    /// Backbone features of view A (consumed by the supervised head).
    pub representation_a: Matrix,
}

#[derive(Debug, Clone)]
pub struct FrameworkState {
    pub kind: FrameworkKind,
    pub encoder: Encoder,
    pub target: Option<Encoder>,
    pub predictor: Option<Mlp>,
    /// Linear classifier of the supervised framework.
    pub head: Option<Dense>,
    pub mix: LossMixConfig,
    pub options: FrameworkOptions,
    pub optimizer: Sgd,
    /// Number of completed training steps.
    pub step: usize,
}

/// Graph ids of every parameter group.
struct Bound {
    online: Vec<NodeId>,
    predictor: Vec<NodeId>,
    head: Vec<NodeId>,
    target: Vec<NodeId>,
}

/// Graph nodes of the mixed objective.
#[derive(Debug, Clone)]
pub struct ObjectiveNodes {
    pub base: NodeId,
    pub dim: NodeId,
    pub total: NodeId,
    pub views: ViewNodes,
    /// Parameter leaves in optimizer order: encoder, predictor, head.
    pub trainable: Vec<NodeId>,
}

/// Graph nodes of both branches for both views.
#[derive(Debug, Clone, Copy)]
pub struct ViewNodes {
    pub online_a: EncoderNodes,
    pub online_b: EncoderNodes,
    /// Key-branch projections of A and B.
    pub key_a: NodeId,
    pub key_b: NodeId,
}

impl FrameworkState {
    /// Fresh state; parameters come from the `INIT` stream of `rng`. The
    /// BYOL target starts as a copy of the online encoder.
    pub fn new(
        kind: FrameworkKind,
        arch: &Architecture,
        mix: LossMixConfig,
        options: FrameworkOptions,
        num_classes: usize,
        rng: &Rng,
    ) -> Result<Self> {
        options.validate()?;
        if arch.dim < 2 {
            return Err(Error::NeedsNegativeColumn(arch.dim));
        }
        let mut init = rng.split(streams::INIT);
        let encoder = arch.build_encoder(&mut init)?;
        let predictor = kind
            .has_predictor()
            .then(|| Mlp::new(&[arch.dim, arch.pred_hidden, arch.dim], false, &mut init));
        let head = (kind == FrameworkKind::Supervised).then(|| {
            Dense::new(encoder.representation_dim(), num_classes.max(2), false, false, &mut init)
        });
        let target = kind.has_target().then(|| encoder.clone());
        Ok(Self {
            kind,
            encoder,
            target,
            predictor,
            head,
            mix,
            options,
            optimizer: Sgd::new(options.momentum, options.weight_decay),
            step: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = |net: Option<&dyn Network>, g: &mut Graph, t: bool| net.map_or(Vec::new(), |n| bind(n, g, t));
        Bound {
            online: bind(&self.encoder, g, trainable),
            predictor: ids(self.predictor.as_ref().map(|p| p as &dyn Network), g, trainable),
            head: ids(self.head.as_ref().map(|h| h as &dyn Network), g, trainable),
            target: ids(self.target.as_ref().map(|t| t as &dyn Network), g, false),
        }
    }

    fn record_views(&self, g: &mut Graph, a: NodeId, b: NodeId, ids: &Bound) -> Result<ViewNodes> {
        let online_a = self.encoder.encode(g, a, &ids.online)?;
        let online_b = self.encoder.encode(g, b, &ids.online)?;
        let (key_a, key_b) = match (self.kind, &self.target) {
            (FrameworkKind::Byol, Some(target)) => (
                target.forward(g, a, &ids.target)?,
                target.forward(g, b, &ids.target)?,
            ),
            (FrameworkKind::SimSiam, _) => (g.detach(online_a.projection), g.detach(online_b.projection)),
            _ => (online_a.projection, online_b.projection),
        };
        Ok(ViewNodes { online_a, online_b, key_a, key_b })
    }

    fn predict(&self, g: &mut Graph, z: NodeId, ids: &Bound) -> Result<NodeId> {
        match &self.predictor {
            Some(p) => p.forward(g, z, &ids.predictor),
            None => Ok(z),
        }
    }

    fn record_base(&self, g: &mut Graph, v: &ViewNodes, labels: &[usize], ids: &Bound) -> Result<NodeId> {
        match self.kind {
            FrameworkKind::SimClr => graph::batch_infonce(g, v.online_a.projection, v.key_b, self.options.base_tau),
            FrameworkKind::Byol | FrameworkKind::SimSiam => {
                let pa = self.predict(g, v.online_a.projection, ids)?;
                let pb = self.predict(g, v.online_b.projection, ids)?;
                let lab = negative_cosine(g, pa, v.key_b)?;
                let lba = negative_cosine(g, pb, v.key_a)?;
                let s = g.add(lab, lba)?;
                Ok(g.scale(s, 0.5))
            }
            FrameworkKind::Supervised => {
                let head = self.head.as_ref().ok_or_else(|| Error::InvalidArgument("missing head".into()))?;
                let logits = head.forward(g, v.online_a.representation, &ids.head)?;
                g.softmax_cross_entropy(logits, labels)
            }
        }
    }

    fn record_dim(&self, g: &mut Graph, v: &ViewNodes, ids: &Bound) -> Result<NodeId> {
        let cfg = DimensionalConfig { tau: self.mix.tau(), negatives: self.options.negatives, center: self.options.center };
        let (qa, qb) = if self.options.dimcl_input == DimclInput::Predictor && self.predictor.is_some() {
            (self.predict(g, v.online_a.projection, ids)?, self.predict(g, v.online_b.projection, ids)?)
        } else {
            (v.online_a.projection, v.online_b.projection)
        };
        let ab = graph::dimensional_loss(g, qa, v.key_b, &cfg)?;
        if !self.kind.symmetric() {
            return Ok(ab);
        }
        let ba = graph::dimensional_loss(g, qb, v.key_a, &cfg)?;
        let s = g.add(ab, ba)?;
        Ok(g.scale(s, 0.5))
    }

    /// Embeddings of both view orders, with all parameters held constant.
    pub fn forward_views(&self, batch_a: &Matrix, batch_b: &Matrix) -> Result<ViewEmbeddings> {
        if batch_a.shape() != batch_b.shape() {
            return Err(Error::ShapeMismatch { op: "forward_views", left: batch_a.shape(), right: batch_b.shape() });
        }
        let mut g = Graph::new();
        let ids = self.bind(&mut g, false);
        let a = g.constant(batch_a.clone());
        let b = g.constant(batch_b.clone());
        let v = self.record_views(&mut g, a, b, &ids)?;
        let val = |id: NodeId| g.value(id).clone();
        Ok(ViewEmbeddings {
            ab: EmbeddingPair::new(val(v.online_a.projection), val(v.key_b))?,
            ba: EmbeddingPair::new(val(v.online_b.projection), val(v.key_a))?,
            representation_a: val(v.online_a.representation),
        })
    }

    /// Records both branches on `g` with trainable online parameters, for
    /// inspecting gradients. Returns the parameter ids of the online encoder
    /// alongside the view nodes.
    pub fn record_trainable(&self, g: &mut Graph, batch_a: &Matrix, batch_b: &Matrix) -> Result<(Vec<NodeId>, ViewNodes)> {
        let ids = self.bind(g, true);
        let a = g.constant(batch_a.clone());
        let b = g.constant(batch_b.clone());
        let v = self.record_views(g, a, b, &ids)?;
        Ok((ids.online, v))
    }

    /// Base objective of the framework on precomputed embeddings. `labels`
    /// is only read by the supervised framework.
    pub fn base_loss(&self, views: &ViewEmbeddings, labels: &[usize]) -> Result<f64> {
        match self.kind {
            FrameworkKind::SimClr => Ok(losses::batch_infonce(&views.ab, self.options.base_tau)?.value),
            FrameworkKind::Byol | FrameworkKind::SimSiam => {
                let predictor = self.predictor.as_ref().ok_or_else(|| Error::InvalidArgument("missing predictor".into()))?;
                let one = |pair: &EmbeddingPair| -> Result<f64> {
                    let p = infer(predictor, pair.za())?;
                    mean_negative_cosine(&p, pair.zb())
                };
                Ok(0.5 * (one(&views.ab)? + one(&views.ba)?))
            }
            FrameworkKind::Supervised => {
                let head = self.head.as_ref().ok_or_else(|| Error::InvalidArgument("missing head".into()))?;
                let mut g = Graph::new();
                let ids = bind(head, &mut g, false);
                let x = g.constant(views.representation_a.clone());
                let logits = head.forward(&mut g, x, &ids)?;
                let ce = g.softmax_cross_entropy(logits, labels)?;
                Ok(g.scalar(ce))
            }
        }
    }

    /// Regularizer on precomputed embeddings (averaged over both orders for
    /// symmetric frameworks).
    pub fn dimcl_value(&self, views: &ViewEmbeddings) -> Result<f64> {
        let cfg = DimensionalConfig { tau: self.mix.tau(), negatives: self.options.negatives, center: self.options.center };
        let predicted = |pair: &EmbeddingPair| -> Result<EmbeddingPair> {
            match (&self.predictor, self.options.dimcl_input) {
                (Some(p), DimclInput::Predictor) => EmbeddingPair::new(infer(p, pair.za())?, pair.zb().clone()),
                _ => Ok(pair.clone()),
            }
        };
        let ab = losses::dimensional_loss(&predicted(&views.ab)?, &cfg)?.value;
        if !self.kind.symmetric() {
            return Ok(ab);
        }
        let ba = losses::dimensional_loss(&predicted(&views.ba)?, &cfg)?.value;
        Ok(0.5 * (ab + ba))
    }

    /// Records the full objective on `g` with trainable online parameters.
    pub fn record_objective(&self, g: &mut Graph, a: &Matrix, b: &Matrix, labels: &[usize]) -> Result<ObjectiveNodes> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch { op: "objective", left: a.shape(), right: b.shape() });
        }
        let ids = self.bind(g, true);
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let views = self.record_views(g, an, bn, &ids)?;
        let base = self.record_base(g, &views, labels, &ids)?;
        let dim = self.record_dim(g, &views, &ids)?;
        let total = graph::combined(g, base, dim, &self.mix)?;
        let trainable = ids.online.iter().chain(&ids.predictor).chain(&ids.head).copied().collect();
        Ok(ObjectiveNodes { base, dim, total, views, trainable })
    }

    /// `(base, dimcl, total)` of the objective on two views.
    pub fn objective(&self, a: &Matrix, b: &Matrix, labels: &[usize]) -> Result<(f64, f64, f64)> {
        let mut g = Graph::new();
        let o = self.record_objective(&mut g, a, b, labels)?;
        Ok((g.scalar(o.base), g.scalar(o.dim), g.scalar(o.total)))
    }

    /// Augments the selected examples into two views and takes one step.
    pub fn training_step(
        &mut self,
        data: &Dataset,
        batch: &[usize],
        aug: &Augmentation,
        rng: &Rng,
        lr: f64,
    ) -> Result<StepReport> {
        let (a, b) = augment_batch(data, batch, aug, rng)?;
        let labels: Vec<usize> = batch.iter().map(|&i| data.examples()[i].label).collect();
        self.step_on_views(&a, &b, &labels, lr)
    }

    /// One optimization step on given views: forward, mixed objective,
    /// backward through online parameters, SGD update, then the EMA update
    /// of the BYOL target.
    pub fn step_on_views(&mut self, a: &Matrix, b: &Matrix, labels: &[usize], lr: f64) -> Result<StepReport> {
        let step = self.step;
        let mut g = Graph::new();
        let o = self.record_objective(&mut g, a, b, labels)?;

        let base_loss = g.scalar(o.base);
        let dimcl_loss = g.scalar(o.dim);
        let total_value = losses::combined_loss(base_loss, dimcl_loss, &self.mix)?;
        if !base_loss.is_finite() || !dimcl_loss.is_finite() || !g.scalar(o.total).is_finite() {
            return Err(Error::Diverged { step });
        }

        let mut grads_out = g.backward(o.total)?;
        let grads: Vec<Matrix> = o
            .trainable
            .iter()
            .map(|&id| {
                grads_out.take(id).unwrap_or_else(|| {
                    let (r, c) = g.value(id).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect();
        let grad_norm = grads.iter().map(|m| m.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step });
        }

        let mut params = self.encoder.params_mut();
        if let Some(p) = self.predictor.as_mut() {
            params.extend(p.params_mut());
        }
        if let Some(h) = self.head.as_mut() {
            params.extend(h.params_mut());
        }
        self.optimizer.step(params, &grads, lr)?;
        if !self.encoder.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Diverged { step });
        }

        if let Some(target) = self.target.as_mut() {
            let m = self.options.ema_momentum;
            if m < 1.0 {
                ema_update(target, &self.encoder, m)?;
            }
        }
        self.step += 1;
        Ok(StepReport { base_loss, dimcl_loss, total: total_value, grad_norm })
    }

    /// Backbone features of `x`, evaluated in chunks of `chunk` rows.
    pub fn represent(&self, x: &Matrix, chunk: usize) -> Result<Matrix> {
        self.encoder.represent(x, chunk)
    }
}

/// `−mean_i cos(p_i, z_i)` as a graph node.
pub fn negative_cosine(g: &mut Graph, p: NodeId, z: NodeId) -> Result<NodeId> {
    let pn = g.l2_normalize(p, Axis::Rows, NORM_EPS)?;
    let zn = g.l2_normalize(z, Axis::Rows, NORM_EPS)?;
    let prod = g.mul(pn, zn)?;
    let cos = g.row_sum(prod);
    let m = g.mean(cos);
    Ok(g.scale(m, -1.0))
}

fn mean_negative_cosine(p: &Matrix, z: &Matrix) -> Result<f64> {
    let mut g = Graph::new();
    let pn = g.constant(p.clone());
    let zn = g.constant(z.clone());
    let out = negative_cosine(&mut g, pn, zn)?;
    Ok(g.scalar(out))
}

/// `target ← m·target + (1 − m)·online`, computed as
/// `target + (1 − m)(online − target)` so that an already-equal target stays
/// bitwise fixed; `m = 0` copies exactly.
pub fn ema_update(target: &mut Encoder, online: &Encoder, m: f64) -> Result<()> {
    if !(0.0..1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!("ema momentum {m} out of [0,1)")));
    }
    let src = online.params();
    let dst = target.params_mut();
    if src.len() != dst.len() {
        return Err(Error::InvalidArgument("target and online encoders differ in layer count".into()));
    }
    for (t, o) in dst.into_iter().zip(src) {
        if t.shape() != o.shape() {
            return Err(Error::ShapeMismatch { op: "ema_update", left: t.shape(), right: o.shape() });
        }
        if m == 0.0 {
            t.data_mut().copy_from_slice(o.data());
            continue;
        }
        for (tv, ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv += (1.0 - m) * (ov - *tv);
        }
    }
    Ok(())
}
