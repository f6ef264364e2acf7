//! Relative pose regression from an image pair.
//!
//! Both images go through a small convolutional backbone and global average
//! pooling. The transformer head treats the two embeddings as a length-2
//! sequence: a Linear-ReLU-BatchNorm-Linear block, a learned positional
//! encoding concatenated per slot, pre-norm encoder layers, then translation
//! and quaternion regressors reading the neighbour's slot. The MLP baseline
//! concatenates the embeddings instead.

pub mod autodiff;
mod checkpoint;
mod train;

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::ImageBuffer;
use crate::error::{Error, Result};
use crate::geometry::{Quaternion, RelativePose, Vec3};

pub use autodiff::{gemm, BatchStats, Gradients, Graph, Tensor, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint, write_loss_csv, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    color_jitter, train, Adam, EpochLog, PairSource, SampledPairs, Schedule, StaticPairs, TrainReport,
};

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Transformer,
    Mlp,
}

impl FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "transformer" => Ok(Arch::Transformer),
            "mlp" => Ok(Arch::Mlp),
            other => Err(format!("unknown arch {other:?} (expected transformer or mlp)")),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Transformer => "transformer",
            Arch::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorConfig {
    pub arch: Arch,
    /// Embedding size `c`.
    pub embed_dim: usize,
    /// Positional encoding size `d`.
    pub pos_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    /// Output channels of the four backbone stages.
    pub backbone_channels: Vec<usize>,
    /// MLP hidden width; `None` picks the width matching the transformer
    /// head's parameter count.
    pub mlp_hidden: Option<usize>,
    /// Constant factor applied to the translation head output.
    pub translation_scale: f64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RegressorConfig {
    pub fn desk() -> Self {
        Self {
            arch: Arch::Transformer,
            embed_dim: 128,
            pos_dim: 32,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            dropout: 0.1,
            backbone_channels: vec![8, 16, 32, 64],
            mlp_hidden: None,
            translation_scale: 1.0,
        }
    }

    /// Full-size transformer dimensions (the backbone stays small).
    pub fn full_scale() -> Self {
        Self {
            embed_dim: 512,
            pos_dim: 128,
            layers: 6,
            heads: 8,
            ..Self::desk()
        }
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    pub fn model_dim(&self) -> usize {
        self.embed_dim + self.pos_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("regressor: {m}")));
        if self.embed_dim == 0 || self.heads == 0 || self.ff_mult == 0 {
            return bad("dimensions must be positive");
        }
        if self.model_dim() % self.heads != 0 {
            return bad("embed_dim + pos_dim must be divisible by heads");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return bad("backbone needs at least one non-empty stage");
        }
        if !(self.translation_scale > 0.0) {
            return bad("translation_scale must be positive");
        }
        Ok(())
    }

    /// Parameter count of everything after the backbone embedding.
    pub fn head_param_count(&self) -> usize {
        Builder::new(self).count_head()
    }

    /// MLP width whose head parameter count is closest to the transformer's.
    pub fn matched_mlp_hidden(&self) -> usize {
        let target = self.clone().with_arch(Arch::Transformer).head_param_count() as f64;
        let c = self.embed_dim as f64;
        // 3h^2 + (2c + 11) h + 7 = target
        let (a, b, k) = (3.0, 2.0 * c + 11.0, 7.0 - target);
        let h = (-b + (b * b - 4.0 * a * k).sqrt()) / (2.0 * a);
        let lo = h.floor().max(1.0) as usize;
        [lo, lo + 1]
            .into_iter()
            .min_by_key(|&h| {
                let cfg = RegressorConfig {
                    arch: Arch::Mlp,
                    mlp_hidden: Some(h),
                    ..self.clone()
                };
                (cfg.head_param_count() as f64 - target).abs() as u64
            })
            .unwrap()
    }

    fn mlp_width(&self) -> usize {
        self.mlp_hidden.unwrap_or_else(|| self.matched_mlp_hidden())
    }
}

/// Loss weights: rotation term scaled by `e^beta`, translation by `e^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub gamma: f64,
}

impl LossConfig {
    pub fn outdoor() -> Self {
        Self { beta: 3.0, gamma: 0.0 }
    }

    pub fn indoor() -> Self {
        Self { beta: 0.0, gamma: 0.0 }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::outdoor()
    }
}

/// Weighted L1 pose loss; both quaternions are sign-canonicalized first.
pub fn loss(pred: &RelativePose, target: &RelativePose, cfg: &LossConfig) -> f64 {
    let (p, t) = (pred.rotation.canonical().to_array(), target.rotation.canonical().to_array());
    let lq: f64 = p.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum();
    let lt = (pred.translation - target.translation).abs().sum();
    lq * cfg.beta.exp() + lt * cfg.gamma.exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Learnable tensors in declaration order plus batch-norm running buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub tensors: Vec<Param>,
    pub buffers: Vec<Param>,
}

impl RegressorParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
    /// Zero except entry 0 (quaternion bias starts at identity).
    UnitFirst,
}

#[derive(Debug, Clone)]
struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    lin: Lin,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln1: Norm,
    qkv: Lin,
    proj: Lin,
    ln2: Norm,
    ff1: Lin,
    ff2: Lin,
}

#[derive(Debug, Clone)]
enum Head {
    Transformer {
        pre1: Lin,
        bn: Norm,
        pre2: Lin,
        pos: usize,
        layers: Vec<EncoderLayer>,
        final_ln: Norm,
    },
    Mlp {
        l1: Lin,
        l2: Lin,
    },
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<Conv>,
    embed: Lin,
    head: Head,
    t1: Lin,
    t2: Lin,
    q1: Lin,
    q2: Lin,
    backbone_params: usize,
}

struct Builder<'a> {
    cfg: &'a RegressorConfig,
    specs: Vec<Spec>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a RegressorConfig) -> Self {
        Self { cfg, specs: Vec::new() }
    }

    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize, gain: f64) -> Lin {
        let std = gain / (din as f64).sqrt();
        Lin {
            w: self.add(format!("{name}.weight"), vec![dout, din], Init::Normal(std)),
            b: self.add(format!("{name}.bias"), vec![dout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            g: self.add(format!("{name}.gamma"), vec![dim], Init::Ones),
            b: self.add(format!("{name}.beta"), vec![dim], Init::Zeros),
        }
    }

    fn layout(&mut self) -> Layout {
        let cfg = self.cfg;
        let relu_gain = 2f64.sqrt();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in cfg.backbone_channels.iter().enumerate() {
            // patchify first, then stride-2 3x3 stages
            let (k, stride, pad) = if i == 0 { (4, 4, 0) } else { (3, 2, 1) };
            let lin = self.linear(&format!("backbone.conv{i}"), cin * k * k, cout, relu_gain);
            convs.push(Conv { lin, k, stride, pad });
            cin = cout;
        }
        let c = cfg.embed_dim;
        let embed = self.linear("backbone.embed", cin, c, 1.0);
        let backbone_params = self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();

        let e = cfg.model_dim();
        let (head, hh) = match cfg.arch {
            Arch::Transformer => {
                let pre1 = self.linear("pre.0", c, 4 * c, relu_gain);
                let bn = self.norm("pre.bn", 4 * c);
                let pre2 = self.linear("pre.1", 4 * c, c, 1.0);
                let pos = self.add("pos_encoding".into(), vec![2, cfg.pos_dim], Init::Normal(1.0));
                let f = cfg.ff_mult * e;
                let layers = (0..cfg.layers)
                    .map(|l| EncoderLayer {
                        ln1: self.norm(&format!("encoder.{l}.ln1"), e),
                        qkv: self.linear(&format!("encoder.{l}.qkv"), e, 3 * e, 1.0),
                        proj: self.linear(&format!("encoder.{l}.proj"), e, e, 1.0),
                        ln2: self.norm(&format!("encoder.{l}.ln2"), e),
                        ff1: self.linear(&format!("encoder.{l}.ff1"), e, f, relu_gain),
                        ff2: self.linear(&format!("encoder.{l}.ff2"), f, e, 1.0),
                    })
                    .collect();
                let final_ln = self.norm("encoder.ln", e);
                (
                    Head::Transformer {
                        pre1,
                        bn,
                        pre2,
                        pos,
                        layers,
                        final_ln,
                    },
                    e,
                )
            }
            Arch::Mlp => {
                let h = cfg.mlp_width();
                let l1 = self.linear("mlp.0", 2 * c, h, relu_gain);
                let l2 = self.linear("mlp.1", h, h, relu_gain);
                (Head::Mlp { l1, l2 }, h)
            }
        };
        let t1 = self.linear("translation.0", hh, hh, relu_gain);
        let t2 = self.linear("translation.1", hh, 3, 0.1);
        let q1 = self.linear("quaternion.0", hh, hh, relu_gain);
        let q2 = self.linear("quaternion.1", hh, 4, 0.1);
        self.specs[q2.b].init = Init::UnitFirst;
        Layout {
            convs,
            embed,
            head,
            t1,
            t2,
            q1,
            q2,
            backbone_params,
        }
    }

    fn count_head(mut self) -> usize {
        let layout = self.layout();
        let total: usize = self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum();
        total - layout.backbone_params
    }
}

/// Graph builder that binds each parameter to one leaf on first use.
struct Binder<'a> {
    g: Graph,
    params: &'a RegressorParams,
    vars: Vec<Option<Var>>,
}

impl<'a> Binder<'a> {
    fn new(params: &'a RegressorParams) -> Self {
        Self {
            g: Graph::new(),
            params,
            vars: vec![None; params.tensors.len()],
        }
    }

    fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = self.g.leaf(self.params.tensors[id].value.clone());
        self.vars[id] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, l: Lin) -> Var {
        let (w, b) = (self.p(l.w), self.p(l.b));
        self.g.linear(x, w, b)
    }

    fn layer_norm(&mut self, x: Var, n: Norm) -> Var {
        let (g, b) = (self.p(n.g), self.p(n.b));
        self.g.layer_norm(x, g, b, NORM_EPS)
    }

    fn grads(&self, grads: &Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, p)| match v.and_then(|v| grads.get(v)) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.len()],
            })
            .collect()
    }
}

/// Images as a `[n, 3, h, w]` tensor.
pub fn images_to_tensor(imgs: &[&ImageBuffer]) -> Tensor {
    let (w, h) = (imgs[0].width as usize, imgs[0].height as usize);
    let mut data = Vec::with_capacity(imgs.len() * 3 * w * h);
    for img in imgs {
        assert_eq!((img.width as usize, img.height as usize), (w, h), "batch images differ in size");
        for c in 0..3 {
            data.extend(img.data.iter().map(|px| px[c]));
        }
    }
    Tensor::new(vec![imgs.len(), 3, h, w], data)
}

/// Output of a batched forward pass.
#[derive(Debug)]
struct Forward {
    t: Var,
    q: Var,
    bn: Option<BatchStats>,
}

/// Loss and parameter gradients for one batch.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
    pub bn: Option<BatchStats>,
}

#[derive(Debug, Clone)]
pub struct Regressor {
    cfg: RegressorConfig,
    params: RegressorParams,
    layout: Layout,
}

impl Regressor {
    /// Seeded initialization.
    pub fn new(cfg: RegressorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder::new(&cfg);
        let layout = b.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = b
            .specs
            .iter()
            .map(|s| {
                let n = s.shape.iter().product();
                let data = match s.init {
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("finite std");
                        (0..n).map(|_| d.sample(&mut rng)).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::UnitFirst => {
                        let mut v = vec![0.0; n];
                        v[0] = 1.0;
                        v
                    }
                };
                Param {
                    name: s.name.clone(),
                    value: Tensor::new(s.shape.clone(), data),
                }
            })
            .collect();
        let buffers = match &layout.head {
            Head::Transformer { .. } => {
                let f = 4 * cfg.embed_dim;
                vec![
                    Param {
                        name: "pre.bn.running_mean".into(),
                        value: Tensor::zeros(vec![f]),
                    },
                    Param {
                        name: "pre.bn.running_var".into(),
                        value: Tensor::new(vec![f], vec![1.0; f]),
                    },
                ]
            }
            Head::Mlp { .. } => Vec::new(),
        };
        Ok(Self {
            cfg,
            params: RegressorParams { tensors, buffers },
            layout,
        })
    }

    /// Rebuilds a model from a configuration and stored tensors.
    pub fn from_params(cfg: RegressorConfig, params: RegressorParams) -> Result<Self> {
        let template = Self::new(cfg, 0)?;
        let same = |a: &[Param], b: &[Param]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.name == y.name && x.value.shape == y.value.shape)
        };
        if !same(&template.params.tensors, &params.tensors) || !same(&template.params.buffers, &params.buffers) {
            return Err(Error::CorruptCheckpoint("tensors do not match the configuration".into()));
        }
        Ok(Self { params, ..template })
    }

    pub fn config(&self) -> &RegressorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &RegressorParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut RegressorParams {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn head_param_count(&self) -> usize {
        self.param_count() - self.layout.backbone_params
    }

    fn backbone(&self, b: &mut Binder<'_>, x: Var) -> Var {
        let mut h = x;
        for conv in &self.layout.convs {
            let (w, bias) = (b.p(conv.lin.w), b.p(conv.lin.b));
            h = b.g.conv2d(h, w, bias, conv.k, conv.stride, conv.pad);
            h = b.g.relu(h);
        }
        let pooled = b.g.global_avg_pool(h);
        b.linear(pooled, self.layout.embed)
    }

    fn build(
        &self,
        b: &mut Binder<'_>,
        queries: &[&ImageBuffer],
        nns: &[&ImageBuffer],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Forward> {
        assert_eq!(queries.len(), nns.len(), "query and neighbour batches differ");
        let n = queries.len();
        let mut all = queries.to_vec();
        all.extend_from_slice(nns);
        let x = b.g.leaf(images_to_tensor(&all));
        // rows 0..n are queries, n..2n neighbours
        let emb = self.backbone(b, x);
        let train = mode == Mode::Train;
        let mut bn = None;
        let nn_tokens = match &self.layout.head {
            Head::Transformer {
                pre1,
                bn: norm,
                pre2,
                pos,
                layers,
                final_ln,
            } => {
                let order: Vec<usize> = (0..n).flat_map(|i| [i, n + i]).collect();
                let tokens = b.g.gather_rows(emb, order);
                let h = b.linear(tokens, *pre1);
                let h = b.g.relu(h);
                let (g, beta) = (b.p(norm.g), b.p(norm.b));
                let h = if train {
                    let (h, stats) = b.g.batch_norm_train(h, g, beta, NORM_EPS);
                    bn = Some(stats);
                    h
                } else {
                    let bufs = &self.params.buffers;
                    b.g.batch_norm_frozen(h, g, beta, &bufs[0].value.data, &bufs[1].value.data, NORM_EPS)
                };
                let h = b.linear(h, *pre2);
                let pe = b.p(*pos);
                let slots = b.g.gather_rows(pe, (0..2 * n).map(|r| r % 2).collect());
                let mut x = b.g.concat_cols(h, slots);
                for l in layers {
                    let a = b.layer_norm(x, l.ln1);
                    let a = b.linear(a, l.qkv);
                    let a = b.g.attention(a, 2, self.cfg.heads);
                    let a = b.linear(a, l.proj);
                    x = b.g.add(x, a);
                    let f = b.layer_norm(x, l.ln2);
                    let f = b.linear(f, l.ff1);
                    let f = b.g.relu(f);
                    let f = self.dropout(b, f, train, rng);
                    let f = b.linear(f, l.ff2);
                    let f = self.dropout(b, f, train, rng);
                    x = b.g.add(x, f);
                }
                let x = b.layer_norm(x, *final_ln);
                b.g.gather_rows(x, (0..n).map(|i| 2 * i + 1).collect())
            }
            Head::Mlp { l1, l2 } => {
                let q = b.g.gather_rows(emb, (0..n).collect());
                let r = b.g.gather_rows(emb, (n..2 * n).collect());
                let h = b.g.concat_cols(q, r);
                let h = b.linear(h, *l1);
                let h = b.g.relu(h);
                let h = b.linear(h, *l2);
                b.g.relu(h)
            }
        };
        let t = b.linear(nn_tokens, self.layout.t1);
        let t = b.g.relu(t);
        let t = b.linear(t, self.layout.t2);
        let t = if self.cfg.translation_scale != 1.0 {
            let len = b.g.value(t).len();
            b.g.mask(t, vec![self.cfg.translation_scale; len])
        } else {
            t
        };
        let q = b.linear(nn_tokens, self.layout.q1);
        let q = b.g.relu(q);
        let q = b.linear(q, self.layout.q2);
        let q = b.g.quat_normalize(q);
        if !b.g.value(t).is_finite() {
            return Err(Error::NonFiniteActivation("translation head"));
        }
        if !b.g.value(q).is_finite() {
            return Err(Error::NonFiniteActivation("quaternion head"));
        }
        Ok(Forward { t, q, bn })
    }

    fn dropout(&self, b: &mut Binder<'_>, x: Var, train: bool, rng: &mut ChaCha8Rng) -> Var {
        if train {
            b.g.dropout(x, self.cfg.dropout, rng)
        } else {
            x
        }
    }

    fn read_poses(g: &Graph, f: &Forward) -> Vec<RelativePose> {
        let (t, q) = (&g.value(f.t).data, &g.value(f.q).data);
        (0..t.len() / 3)
            .map(|i| RelativePose {
                rotation: Quaternion::new(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]),
                translation: Vec3::new(t[3 * i], t[3 * i + 1], t[3 * i + 2]),
            })
            .collect()
    }

    /// Backbone embedding of one image.
    pub fn embed(&self, img: &ImageBuffer) -> Vec<f64> {
        let mut b = Binder::new(&self.params);
        let x = b.g.leaf(images_to_tensor(&[img]));
        let e = self.backbone(&mut b, x);
        b.g.value(e).data.clone()
    }

    /// Batched relative pose prediction. `rng` drives dropout in train mode.
    pub fn forward_batch(
        &self,
        queries: &[&ImageBuffer],
        nns: &[&ImageBuffer],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<RelativePose>> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut b = Binder::new(&self.params);
        let f = self.build(&mut b, queries, nns, mode, rng)?;
        Ok(Self::read_poses(&b.g, &f))
    }

    /// Deterministic single-pair prediction.
    pub fn predict(&self, query: &ImageBuffer, nn: &ImageBuffer) -> Result<RelativePose> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward_batch(&[query], &[nn], Mode::Eval, &mut rng)?[0])
    }

    /// Batch-mean loss and its gradient for every parameter.
    pub fn loss_and_grads(
        &self,
        queries: &[&ImageBuffer],
        nns: &[&ImageBuffer],
        targets: &[RelativePose],
        loss_cfg: &LossConfig,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepResult> {
        let n = targets.len();
        let mut b = Binder::new(&self.params);
        let f = self.build(&mut b, queries, nns, mode, rng)?;
        let tq: Vec<f64> = targets.iter().flat_map(|t| t.rotation.canonical().to_array()).collect();
        let tt: Vec<f64> = targets.iter().flat_map(|t| [t.translation.x, t.translation.y, t.translation.z]).collect();
        let lq = b.g.l1(f.q, tq, loss_cfg.beta.exp() / n as f64);
        let lt = b.g.l1(f.t, tt, loss_cfg.gamma.exp() / n as f64);
        let total = b.g.add(lq, lt);
        let loss = b.g.value(total).data[0];
        let grads = b.g.backward(total);
        let grads = b.grads(&grads);
        for (g, p) in grads.iter().zip(&self.params.tensors) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        Ok(StepResult { loss, grads, bn: f.bn })
    }

    /// Blends batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, stats: &BatchStats, rows: usize) {
        if self.params.buffers.len() != 2 {
            return;
        }
        let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
        let (mean, var) = self.params.buffers.split_at_mut(1);
        for j in 0..stats.mean.len() {
            let m = &mut mean[0].value.data[j];
            *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * stats.mean[j];
            let v = &mut var[0].value.data[j];
            *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * stats.var[j] * unbias;
        }
    }

    /// Gradient of `weights . embed(img)` with respect to the image pixels,
    /// in `[3, h, w]` layout.
    pub fn embedding_input_gradient(&self, img: &ImageBuffer, weights: &[f64]) -> Vec<f64> {
        let mut b = Binder::new(&self.params);
        let x = b.g.leaf(images_to_tensor(&[img]));
        let e = self.backbone(&mut b, x);
        let w = b.g.leaf(Tensor::new(vec![1, weights.len()], weights.to_vec()));
        let zero = b.g.leaf(Tensor::zeros(vec![1]));
        let y = b.g.linear(e, w, zero);
        // far target: l1 reduces to -y + const
        let out = b.g.l1(y, vec![1e12], -1.0);
        let grads = b.g.backward(out);
        grads.get(x).map(|g| g.to_vec()).unwrap_or_default()
    }
}

/// Eval-mode transformer prediction for one pair.
pub fn forward(model: &Regressor, query: &ImageBuffer, nn: &ImageBuffer) -> Result<RelativePose> {
    model.predict(query, nn)
}

/// Eval-mode prediction of an MLP model.
pub fn forward_mlp(model: &Regressor, query: &ImageBuffer, nn: &ImageBuffer) -> Result<RelativePose> {
    if model.config().arch != Arch::Mlp {
        return Err(Error::InvalidConfig("forward_mlp needs an mlp model".into()));
    }
    model.predict(query, nn)
}

/// Random parameter indices `(tensor, entry)` for gradient checks.
pub fn sample_param_indices(params: &RegressorParams, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = params.count();
    let offsets: Vec<usize> = params
        .tensors
        .iter()
        .scan(0, |acc, p| {
            let o = *acc;
            *acc += p.value.len();
            Some(o)
        })
        .collect();
    (0..count)
        .map(|_| {
            let flat = rng.gen_range(0..total);
            let t = offsets.partition_point(|&o| o <= flat) - 1;
            (t, flat - offsets[t])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64, size: u32) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(size, size, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    fn tiny(arch: Arch) -> RegressorConfig {
        RegressorConfig {
            arch,
            embed_dim: 8,
            pos_dim: 4,
            layers: 1,
            heads: 2,
            ff_mult: 2,
            backbone_channels: vec![4, 6],
            ..RegressorConfig::desk()
        }
    }

    #[test]
    fn loss_examples() {
        let t = RelativePose::identity();
        assert_eq!(loss(&t, &t, &LossConfig::outdoor()), 0.0);
        // q-L1 0.1, t-L1 0.2
        let p = RelativePose {
            rotation: Quaternion::new(0.9, 0.0, 0.0, 0.0),
            translation: Vec3::new(0.2, 0.0, 0.0),
        };
        assert!((loss(&p, &t, &LossConfig::outdoor()) - (0.1 * 3f64.exp() + 0.2)).abs() < 1e-12);
        assert!((loss(&p, &t, &LossConfig::indoor()) - 0.3).abs() < 1e-12);
        assert!((loss(&p, &t, &LossConfig::outdoor()) - 2.2086).abs() < 1e-4);
        // sign ambiguity is not penalized
        let neg = RelativePose {
            rotation: Quaternion::new(-1.0, 0.0, 0.0, 0.0),
            translation: Vec3::zeros(),
        };
        assert_eq!(loss(&neg, &t, &LossConfig::outdoor()), 0.0);
    }

    #[test]
    fn desk_config_counts_and_mlp_match() {
        let cfg = RegressorConfig::desk();
        let th = cfg.head_param_count();
        let mlp = cfg.clone().with_arch(Arch::Mlp);
        let mh = mlp.head_param_count();
        assert!((mh as f64 / th as f64 - 1.0).abs() < 0.10, "{mh} vs {th}");
        let m = Regressor::new(cfg, 1).unwrap();
        assert_eq!(m.head_param_count(), th);
        assert!(RegressorConfig { heads: 7, ..RegressorConfig::desk() }.validate().is_err());
    }

    #[test]
    fn forward_contracts() {
        for arch in [Arch::Transformer, Arch::Mlp] {
            let m = Regressor::new(tiny(arch), 3).unwrap();
            let (a, b) = (img(1, 16), img(2, 16));
            let p = m.predict(&a, &b).unwrap();
            assert!((p.rotation.norm() - 1.0).abs() < 1e-12);
            assert!(p.rotation.w >= 0.0);
            assert_eq!(p, m.predict(&a, &b).unwrap());
            let swapped = m.predict(&b, &a).unwrap();
            let diff = (p.translation - swapped.translation).norm()
                + (0..4).map(|i| (p.rotation.to_array()[i] - swapped.rotation.to_array()[i]).abs()).sum::<f64>();
            assert!(diff > 1e-6);
        }
    }

    #[test]
    fn embedding_contracts() {
        let m = Regressor::new(tiny(Arch::Transformer), 4).unwrap();
        let zero = ImageBuffer::new(16, 16, [0.0; 3]);
        let e = m.embed(&zero);
        assert_eq!(e.len(), 8);
        assert!(e.iter().all(|v| v.is_finite()));
        assert_eq!(m.embed(&img(5, 16)), m.embed(&img(5, 16)));
    }

    #[test]
    fn embedding_jacobian_matches_finite_differences() {
        let m = Regressor::new(tiny(Arch::Transformer), 5).unwrap();
        let image = img(6, 8);
        let w: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        let analytic = m.embedding_input_gradient(&image, &w);
        let f = |im: &ImageBuffer| m.embed(im).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let h = 1e-6;
        for c in 0..3 {
            for px in 0..64 {
                let mut p = image.clone();
                p.data[px][c] += h;
                let mut q = image.clone();
                q.data[px][c] -= h;
                let num = (f(&p) - f(&q)) / (2.0 * h);
                let a = analytic[c * 64 + px];
                let err = (num - a).abs() / num.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-4, "pixel {px} channel {c}: {num} vs {a}");
            }
        }
    }

    #[test]
    fn quaternion_head_unit_for_scaled_weights() {
        let mut m = Regressor::new(tiny(Arch::Mlp), 6).unwrap();
        let id = m.params.tensors.iter().position(|p| p.name == "quaternion.1.weight").unwrap();
        m.params_mut().tensors[id].value.data.iter_mut().for_each(|v| *v *= 1e3);
        let p = m.predict(&img(1, 16), &img(2, 16)).unwrap();
        assert!((p.rotation.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_gradient_at_target_is_bounded() {
        let m = Regressor::new(tiny(Arch::Mlp), 7).unwrap();
        let (a, b) = (img(1, 16), img(2, 16));
        let pred = m.predict(&a, &b).unwrap();
        let cfg = LossConfig::outdoor();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let step = m.loss_and_grads(&[&a], &[&b], &[pred], &cfg, Mode::Eval, &mut rng).unwrap();
        assert!(step.loss.abs() < 1e-12);
        // pred == target exactly: the l1 subgradient picks 0, within [-e^beta, e^beta]
        for g in &step.grads {
            assert!(g.iter().all(|v| v.abs() <= cfg.beta.exp()));
        }
    }

    #[test]
    fn sampled_indices_in_range() {
        let m = Regressor::new(tiny(Arch::Transformer), 8).unwrap();
        for (t, i) in sample_param_indices(m.params(), 500, 1) {
            assert!(i < m.params().tensors[t].value.len());
        }
    }
}
