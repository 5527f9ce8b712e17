//! Per-modality transformer: patch embedder, pre-norm encoder, a light MAE
//! decoder and a projection head for the global embedding.

mod optim;

pub use optim::{cosine_lr, AdamW};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::container::{Container, DType, Tensor};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tokenizer::{embed_on_graph, positional_on_graph, Embedder, Layout, MaskPlan, PosMode, PosTables, PosVars};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ecg,
    Cmr,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Ecg => "ecg",
            Modality::Cmr => "cmr",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ecg" => Ok(Modality::Ecg),
            "cmr" => Ok(Modality::Cmr),
            _ => Err(Error::Config(format!("unknown modality `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_dim: usize,
    pub proj_dim: usize,
    pub pos_mode: PosMode,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return bad("encoder needs at least one layer".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed dim {} not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.decoder_heads == 0 || self.decoder_dim % self.decoder_heads != 0 {
            return bad(format!("decoder dim {} not divisible by {} heads", self.decoder_dim, self.decoder_heads));
        }
        if !(self.mlp_ratio > 0.0) || self.proj_dim == 0 {
            return bad("mlp ratio and projection dim must be positive".into());
        }
        Ok(())
    }

    fn hidden(&self, d: usize) -> usize {
        ((d as f64) * self.mlp_ratio).round().max(1.0) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub modality: Modality,
    pub patch_dim: usize,
    pub layout: Layout,
    pub encoder: EncoderConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Embed,
    Pos,
    Block(usize),
    Norm,
    Decoder,
    Proj,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub group: Group,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, value: Mat, group: Group, decay: bool) -> usize {
        self.params.push(Param { name, value, group, decay });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn value(&self, i: usize) -> &Mat {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.params[i].value
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PosIdx {
    Factorized(usize, usize),
    Flat(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Block {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Index {
    embed: Linear,
    pos: PosIdx,
    blocks: Vec<Block>,
    norm: Norm,
    dec_embed: Linear,
    mask_token: usize,
    dec_pos: PosIdx,
    dec_blocks: Vec<Block>,
    dec_norm: Norm,
    dec_head: Linear,
    proj: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    idx: Index,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Mat {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Mat::from_fn(fan_in, fan_out, |_, _| self.rng.random_range(-limit..limit))
    }

    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let n = Normal::new(0.0, std).expect("positive std");
        Mat::from_fn(rows, cols, |_, _| n.sample(&mut self.rng))
    }
}

fn add_linear(s: &mut ParamStore, init: &mut Init, name: &str, i: usize, o: usize, group: Group) -> Linear {
    let w = s.add(format!("{name}.weight"), init.xavier(i, o), group, true);
    let b = s.add(format!("{name}.bias"), Mat::zeros(1, o), group, false);
    Linear { w, b }
}

fn add_norm(s: &mut ParamStore, name: &str, d: usize, group: Group) -> Norm {
    let gamma = s.add(format!("{name}.gamma"), Mat::filled(1, d, 1.0), group, false);
    let beta = s.add(format!("{name}.beta"), Mat::zeros(1, d), group, false);
    Norm { gamma, beta }
}

fn add_pos(s: &mut ParamStore, init: &mut Init, name: &str, layout: Layout, d: usize, mode: PosMode, group: Group) -> PosIdx {
    match mode {
        PosMode::Factorized => {
            let (a, b) = layout.table_sizes();
            let ia = s.add(format!("{name}.a"), init.normal(a, d, 0.02), group, false);
            let ib = s.add(format!("{name}.b"), init.normal(b, d, 0.02), group, false);
            PosIdx::Factorized(ia, ib)
        }
        PosMode::Flat => PosIdx::Flat(s.add(format!("{name}.flat"), init.normal(layout.n_tokens(), d, 0.02), group, false)),
    }
}

fn add_block(s: &mut ParamStore, init: &mut Init, name: &str, d: usize, hidden: usize, group: Group) -> Block {
    Block {
        ln1: add_norm(s, &format!("{name}.ln1"), d, group),
        qkv: add_linear(s, init, &format!("{name}.qkv"), d, 3 * d, group),
        out: add_linear(s, init, &format!("{name}.out"), d, d, group),
        ln2: add_norm(s, &format!("{name}.ln2"), d, group),
        fc1: add_linear(s, init, &format!("{name}.fc1"), d, hidden, group),
        fc2: add_linear(s, init, &format!("{name}.fc2"), hidden, d, group),
    }
}

/// Graph leaves for every parameter of one model, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn pos(&self, p: PosIdx) -> PosVars {
        match p {
            PosIdx::Factorized(a, b) => PosVars::Factorized(self.v(a), self.v(b)),
            PosIdx::Flat(t) => PosVars::Flat(self.v(t)),
        }
    }
}

impl Model {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.encoder.validate()?;
        let e = &spec.encoder;
        let d = e.embed_dim;
        let dd = e.decoder_dim;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut s = ParamStore::default();
        let embed = add_linear(&mut s, &mut init, "embed", spec.patch_dim, d, Group::Embed);
        let pos = add_pos(&mut s, &mut init, "pos", spec.layout, d, e.pos_mode, Group::Pos);
        let blocks = (0..e.layers)
            .map(|i| add_block(&mut s, &mut init, &format!("blocks.{i}"), d, e.hidden(d), Group::Block(i)))
            .collect();
        let norm = add_norm(&mut s, "norm", d, Group::Norm);
        let dec_embed = add_linear(&mut s, &mut init, "decoder.embed", d, dd, Group::Decoder);
        let mask_token = s.add("decoder.mask_token".into(), init.normal(1, dd, 0.02), Group::Decoder, false);
        let dec_pos = add_pos(&mut s, &mut init, "decoder.pos", spec.layout, dd, e.pos_mode, Group::Decoder);
        let dec_blocks = (0..e.decoder_layers)
            .map(|i| add_block(&mut s, &mut init, &format!("decoder.blocks.{i}"), dd, e.hidden(dd), Group::Decoder))
            .collect();
        let dec_norm = add_norm(&mut s, "decoder.norm", dd, Group::Decoder);
        let dec_head = add_linear(&mut s, &mut init, "decoder.head", dd, spec.patch_dim, Group::Decoder);
        let proj = add_linear(&mut s, &mut init, "proj", d, e.proj_dim, Group::Proj);
        let idx = Index { embed, pos, blocks, norm, dec_embed, mask_token, dec_pos, dec_blocks, dec_norm, dec_head, proj };
        Ok(Model { spec, store: s, idx })
    }

    pub fn embedder(&self) -> Embedder {
        Embedder { weight: self.store.value(self.idx.embed.w).clone(), bias: self.store.value(self.idx.embed.b).clone() }
    }

    pub fn pos_tables(&self) -> PosTables {
        match self.idx.pos {
            PosIdx::Factorized(a, b) => PosTables::Factorized(self.store.value(a).clone(), self.store.value(b).clone()),
            PosIdx::Flat(t) => PosTables::Flat(self.store.value(t).clone()),
        }
    }

    /// Trainability flags with the embedder, positional tables and the first
    /// `k` encoder blocks frozen. `k = 0` leaves everything trainable.
    pub fn freeze_mask(&self, k: usize) -> Result<Vec<bool>> {
        if k > self.spec.encoder.layers {
            return Err(Error::Config(format!("cannot freeze {k} of {} layers", self.spec.encoder.layers)));
        }
        Ok(self
            .store
            .params()
            .iter()
            .map(|p| match p.group {
                Group::Embed | Group::Pos => k == 0,
                Group::Block(i) => i >= k,
                _ => true,
            })
            .collect())
    }

    pub fn bind(&self, g: &mut Graph, trainable: &[bool]) -> Bound {
        assert_eq!(trainable.len(), self.store.len());
        let vars = self.store.params().iter().zip(trainable).map(|(p, &t)| g.leaf(p.value.clone(), t)).collect();
        Bound { vars }
    }

    /// All tokens embedded with positions added.
    pub fn embed(&self, g: &mut Graph, b: &Bound, patches: &Mat) -> Result<Var> {
        if patches.shape() != (self.spec.layout.n_tokens(), self.spec.patch_dim) {
            return Err(Error::shape(format!(
                "patches {:?} do not match model input {}x{}",
                patches.shape(),
                self.spec.layout.n_tokens(),
                self.spec.patch_dim
            )));
        }
        let p = g.constant(patches.clone());
        Ok(embed_on_graph(g, p, b.v(self.idx.embed.w), b.v(self.idx.embed.b), b.pos(self.idx.pos), self.spec.layout))
    }

    /// Encoder stack plus final norm over whatever token rows `x` holds.
    pub fn encode(&self, g: &mut Graph, b: &Bound, x: Var) -> Var {
        let heads = self.spec.encoder.heads;
        let mut h = x;
        for blk in &self.idx.blocks {
            h = block(g, b, blk, h, heads);
        }
        layer_norm(g, b, self.idx.norm, h)
    }

    /// Embeds all patches and encodes every token.
    pub fn encode_all(&self, g: &mut Graph, b: &Bound, patches: &Mat) -> Result<Var> {
        let x = self.embed(g, b, patches)?;
        Ok(self.encode(g, b, x))
    }

    pub fn encode_visible(&self, g: &mut Graph, b: &Bound, patches: &Mat, plan: &MaskPlan) -> Result<Var> {
        if plan.n_tokens() != self.spec.layout.n_tokens() {
            return Err(Error::shape("mask plan does not cover the token grid"));
        }
        if plan.visible.is_empty() {
            return Err(Error::validation("mask plan leaves no visible tokens"));
        }
        let x = self.embed(g, b, patches)?;
        let vis = g.gather_rows(x, &plan.visible);
        Ok(self.encode(g, b, vis))
    }

    /// Reconstructions for the masked positions, in `plan.masked` order.
    pub fn decode_reconstruct(&self, g: &mut Graph, b: &Bound, encoded_visible: Var, plan: &MaskPlan) -> Result<Var> {
        let n = plan.n_tokens();
        if g.value(encoded_visible).rows() != plan.visible.len() {
            return Err(Error::shape("encoded rows do not match visible count"));
        }
        if plan.masked.is_empty() {
            return Ok(g.constant(Mat::zeros(0, self.spec.patch_dim)));
        }
        let x = g.matmul(encoded_visible, b.v(self.idx.dec_embed.w));
        let x = g.add_row(x, b.v(self.idx.dec_embed.b));
        let fill = g.repeat_row(b.v(self.idx.mask_token), plan.masked.len());
        let stacked = g.concat_rows(&[x, fill]);
        let mut order = vec![0; n];
        for (slot, &tok) in plan.visible.iter().chain(&plan.masked).enumerate() {
            order[tok] = slot;
        }
        let full = g.gather_rows(stacked, &order);
        let pos = positional_on_graph(g, b.pos(self.idx.dec_pos), self.spec.layout);
        let mut h = g.add(full, pos);
        for blk in &self.idx.dec_blocks {
            h = block(g, b, blk, h, self.spec.encoder.decoder_heads);
        }
        let h = layer_norm(g, b, self.idx.dec_norm, h);
        let hm = g.gather_rows(h, &plan.masked);
        let out = g.matmul(hm, b.v(self.idx.dec_head.w));
        Ok(g.add_row(out, b.v(self.idx.dec_head.b)))
    }

    /// Mean over tokens followed by the linear projection head.
    pub fn pool_project(&self, g: &mut Graph, b: &Bound, tokens: Var) -> Result<Var> {
        if g.value(tokens).rows() == 0 {
            return Err(Error::validation("cannot pool an empty token set"));
        }
        let m = g.mean_rows(tokens);
        let z = g.matmul(m, b.v(self.idx.proj.w));
        Ok(g.add_row(z, b.v(self.idx.proj.b)))
    }

    pub fn write_into(&self, c: &mut Container, prefix: &str) {
        for p in self.store.params() {
            c.insert(format!("{prefix}{}", p.name), Tensor::from_mat(&p.value, DType::F64));
        }
    }

    pub fn read_from(spec: ModelSpec, c: &Container, prefix: &str) -> Result<Self> {
        let mut m = Model::new(spec, 0)?;
        for p in m.store.params.iter_mut() {
            let t = c.require(&format!("{prefix}{}", p.name))?;
            let v = t.to_mat()?;
            if v.shape() != p.value.shape() {
                return Err(Error::shape(format!("checkpoint tensor {} has shape {:?}, expected {:?}", p.name, v.shape(), p.value.shape())));
            }
            p.value = v;
        }
        Ok(m)
    }
}

fn layer_norm(g: &mut Graph, b: &Bound, n: Norm, x: Var) -> Var {
    g.layer_norm(x, b.v(n.gamma), b.v(n.beta))
}

fn linear(g: &mut Graph, b: &Bound, l: Linear, x: Var) -> Var {
    let y = g.matmul(x, b.v(l.w));
    g.add_row(y, b.v(l.b))
}

fn attention(g: &mut Graph, b: &Bound, blk: &Block, x: Var, heads: usize) -> Var {
    let d = g.value(x).cols();
    let dh = d / heads;
    let qkv = linear(g, b, blk.qkv, x);
    let scale = 1.0 / (dh as f64).sqrt();
    let outs: Vec<Var> = (0..heads)
        .map(|h| {
            let q = g.col_slice(qkv, h * dh, dh);
            let k = g.col_slice(qkv, d + h * dh, dh);
            let v = g.col_slice(qkv, 2 * d + h * dh, dh);
            let s = g.matmul_t(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            g.matmul(a, v)
        })
        .collect();
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
    linear(g, b, blk.out, cat)
}

fn block(g: &mut Graph, b: &Bound, blk: &Block, x: Var, heads: usize) -> Var {
    let h = layer_norm(g, b, blk.ln1, x);
    let a = attention(g, b, blk, h, heads);
    let x = g.add(x, a);
    let h = layer_norm(g, b, blk.ln2, x);
    let h = linear(g, b, blk.fc1, h);
    let h = g.gelu(h);
    let h = linear(g, b, blk.fc2, h);
    g.add(x, h)
}

/// Mean squared error between reconstructions and targets, both holding
/// one row per masked token.
pub fn masked_mse(g: &mut Graph, recon: Var, target: Var) -> Result<Var> {
    let (r, t) = (g.value(recon).shape(), g.value(target).shape());
    if r != t {
        return Err(Error::shape(format!("reconstruction {r:?} vs target {t:?}")));
    }
    if r.0 * r.1 == 0 {
        return Err(Error::UndefinedLoss("no masked tokens".into()));
    }
    let diff = g.sub(recon, target);
    let sq = g.mul(diff, diff);
    let s = g.sum(sq);
    Ok(g.scale(s, 1.0 / (r.0 * r.1) as f64))
}

/// MAE loss over full-grid reconstructions and targets: only rows in
/// `plan.masked` contribute.
pub fn mae_loss(g: &mut Graph, recon_full: Var, target_full: Var, plan: &MaskPlan) -> Result<Var> {
    let n = plan.n_tokens();
    if g.value(recon_full).rows() != n || g.value(target_full).rows() != n {
        return Err(Error::shape("full-grid tensors must have one row per token"));
    }
    if plan.masked.is_empty() {
        return Err(Error::UndefinedLoss("no masked tokens".into()));
    }
    let r = g.gather_rows(recon_full, &plan.masked);
    let t = g.gather_rows(target_full, &plan.masked);
    masked_mse(g, r, t)
}
