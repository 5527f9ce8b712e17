//! Preprocessing, masked-autoencoder pretraining, joint contrastive training
//! and embedding extraction.
//!
//! Every random draw is seeded from the run seed plus the phase, epoch and
//! subject id, so a run is reproducible regardless of batch composition.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::align::{
    alignment_matrix, cmr_local_matrix, ecg_local_matrix, global_infonce, local_contrastive, local_cossim,
    local_per_segment, resample_matrix, total_loss, AlignmentMatrix, LocalMode, LossBreakdown,
};
use crate::autodiff::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{
    linear_probe, retrieval_metrics, similarity_heatmap, DbEntry, EmbeddingDatabase, Query, RegressionReport, RetrievalReport,
    SimilarityHeatmap,
};
use crate::model::{cosine_lr, AdamW};
use crate::model::{masked_mse, Bound, Modality, Model};
use crate::signal::{
    augment_clip, augment_signal_with_offset, detect_r_peaks, minmax_normalize, wavelet_denoise, zscore_normalize,
    ImageClip, MultiLeadSignal, RPeakConfig, RPeakList,
};
use crate::synth::{PairedSubject, PhenotypeVector};
use crate::tensor::Mat;
use crate::tokenizer::{cmr_patches, ecg_patches, make_mask};

pub const METRICS_SCHEMA: &str = "cardioalign.metrics/1";

const TAG_INIT: u64 = 1;
const TAG_SMP_VIEW: u64 = 2;
const TAG_MASK: u64 = 3;
const TAG_SHUFFLE: u64 = 4;
const TAG_JOINT_ECG: u64 = 5;
const TAG_JOINT_CMR: u64 = 6;

/// Splitmix-style combination of a base seed with a sequence of tags.
pub fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn modality_tag(m: Modality) -> u64 {
    match m {
        Modality::Ecg => 0,
        Modality::Cmr => 1,
    }
}

/// A subject after denoising, normalization and R-peak detection.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    pub ecg: MultiLeadSignal,
    pub r_peaks: RPeakList,
    pub cmr: ImageClip,
    pub phenotypes: PhenotypeVector,
}

pub fn prepare_subject(s: &PairedSubject, cfg: &RunConfig) -> Result<Prepared> {
    let ecg = zscore_normalize(&wavelet_denoise(&s.ecg, cfg.wavelet_levels)?)?;
    let r_peaks = detect_r_peaks(&ecg, &cfg.rpeak_lead, &RPeakConfig::default())?;
    let cmr = minmax_normalize(&s.cmr)?;
    Ok(Prepared { id: s.id, ecg, r_peaks, cmr, phenotypes: s.phenotypes })
}

pub fn prepare(subjects: &[PairedSubject], cfg: &RunConfig) -> Result<Vec<Prepared>> {
    subjects.iter().map(|s| prepare_subject(s, cfg)).collect()
}

/// Subjects with id below `n_train` train; the rest are held out.
pub fn split(data: &[Prepared], n_train: usize) -> (Vec<Prepared>, Vec<Prepared>) {
    data.iter().cloned().partition(|p| p.id < n_train)
}

/// Newline-delimited JSON metrics, kept in memory and optionally mirrored to a file.
pub struct MetricsLog {
    pub records: Vec<Value>,
    file: Option<BufWriter<File>>,
    echo: bool,
}

impl MetricsLog {
    pub fn memory() -> Self {
        MetricsLog { records: Vec::new(), file: None, echo: false }
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(MetricsLog { records: Vec::new(), file: Some(BufWriter::new(File::create(path)?)), echo: false })
    }

    /// Also prints epoch summaries to stderr.
    pub fn verbose(mut self) -> Self {
        self.echo = true;
        self
    }

    pub fn record(&mut self, mut v: Value) -> Result<()> {
        if let Value::Object(m) = &mut v {
            m.insert("schema".into(), Value::String(METRICS_SCHEMA.into()));
        }
        if let Some(f) = &mut self.file {
            serde_json::to_writer(&mut *f, &v)?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        if self.echo && v.get("kind").and_then(Value::as_str) == Some("epoch") {
            eprintln!("{v}");
        }
        self.records.push(v);
        Ok(())
    }
}

fn ecg_view(p: &Prepared, cfg: &RunConfig, seed: u64) -> Result<(Mat, Vec<usize>)> {
    let aug = augment_signal_with_offset(&p.ecg, &cfg.signal_aug(seed))?;
    let peaks = p.r_peaks.window(aug.crop_start, cfg.ecg_crop_len);
    Ok((ecg_patches(&aug.signal, cfg.ecg_patch)?.data, peaks))
}

fn cmr_view(p: &Prepared, cfg: &RunConfig, seed: u64) -> Result<Mat> {
    let clip = augment_clip(&p.cmr, &cfg.clip_aug(seed))?;
    Ok(cmr_patches(&clip, cfg.patch().cmr_patch)?.data)
}

fn view(m: Modality, p: &Prepared, cfg: &RunConfig, seed: u64) -> Result<Mat> {
    match m {
        Modality::Ecg => Ok(ecg_view(p, cfg, seed)?.0),
        Modality::Cmr => cmr_view(p, cfg, seed),
    }
}

fn gather(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), m.cols(), |r, c| m.get(rows[r], c))
}

fn schedule(n: usize, cfg: &RunConfig, epochs: usize) -> (usize, usize, usize) {
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * epochs;
    let warmup = (cfg.warmup_frac * total as f64).round() as usize;
    (per_epoch, total, warmup)
}

fn batches(n: usize, cfg: &RunConfig, tag: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[TAG_SHUFFLE, tag, epoch as u64])));
    order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect()
}

fn take_grads(g: &Graph, loss: Var, bound: &Bound) -> Vec<Option<Mat>> {
    let mut grads = g.backward(loss);
    bound.vars().iter().map(|&v| grads.take(v)).collect()
}

fn take_grads2(g: &Graph, loss: Var, a: &Bound, b: &Bound) -> (Vec<Option<Mat>>, Vec<Option<Mat>>) {
    let mut grads = g.backward(loss);
    let ga = a.vars().iter().map(|&v| grads.take(v)).collect();
    let gb = b.vars().iter().map(|&v| grads.take(v)).collect();
    (ga, gb)
}

fn mask_ratio(cfg: &RunConfig, m: Modality) -> f64 {
    match m {
        Modality::Ecg => cfg.ecg_mask_ratio,
        Modality::Cmr => cfg.cmr_mask_ratio,
    }
}

/// Masked-reconstruction loss for one subject at one epoch.
fn mae_subject_loss(model: &Model, g: &mut Graph, b: &Bound, p: &Prepared, epoch: usize, cfg: &RunConfig) -> Result<Var> {
    let m = model.spec.modality;
    let id = p.id as u64;
    let patches = view(m, p, cfg, mix_seed(cfg.seed, &[TAG_SMP_VIEW, modality_tag(m), epoch as u64, id]))?;
    let plan = make_mask(patches.rows(), mask_ratio(cfg, m), mix_seed(cfg.seed, &[TAG_MASK, modality_tag(m), epoch as u64, id]))?;
    let enc = model.encode_visible(g, b, &patches, &plan)?;
    let recon = model.decode_reconstruct(g, b, enc, &plan)?;
    let target = g.constant(gather(&patches, &plan.masked));
    masked_mse(g, recon, target)
}

pub struct Pretrained {
    pub model: Model,
    pub opt: AdamW,
}

/// Mean masked-reconstruction loss over `data` with epoch-`epoch` views, no update.
pub fn mae_eval(model: &Model, data: &[Prepared], cfg: &RunConfig, epoch: usize) -> Result<f64> {
    let frozen = vec![false; model.store.len()];
    let mut total = 0.0;
    for p in data {
        let mut g = Graph::new();
        let b = model.bind(&mut g, &frozen);
        let l = mae_subject_loss(model, &mut g, &b, p, epoch, cfg)?;
        total += g.scalar(l);
    }
    Ok(total / data.len() as f64)
}

pub fn init_model(m: Modality, cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg.model_spec(m), mix_seed(cfg.seed, &[TAG_INIT, modality_tag(m)]))
}

/// Single-modality masked-autoencoder pretraining. Epoch 0 is an evaluation
/// pass before any update.
pub fn pretrain(m: Modality, train: &[Prepared], cfg: &RunConfig, log: &mut MetricsLog) -> Result<Pretrained> {
    if train.is_empty() {
        return Err(Error::validation("no training subjects"));
    }
    let mut model = init_model(m, cfg)?;
    let mut opt = AdamW::new(&model.store, cfg.weight_decay);
    let (_, total, warmup) = schedule(train.len(), cfg, cfg.smp_epochs);
    let initial = mae_eval(&model, train, cfg, 0)?;
    log.record(json!({"kind": "epoch", "phase": "pretrain", "modality": m.name(), "epoch": 0, "step": 0, "loss": initial}))?;
    let trainable = vec![true; model.store.len()];
    let mut step = 0;
    for epoch in 1..=cfg.smp_epochs {
        let mut sum = 0.0;
        for batch in batches(train.len(), cfg, modality_tag(m), epoch) {
            let mut g = Graph::new();
            let b = model.bind(&mut g, &trainable);
            let losses = batch.iter().map(|&i| mae_subject_loss(&model, &mut g, &b, &train[i], epoch, cfg)).collect::<Result<Vec<_>>>()?;
            let cat = g.concat_rows(&losses);
            let s = g.sum(cat);
            let loss = g.scale(s, 1.0 / losses.len() as f64);
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::UndefinedLoss(format!("non-finite reconstruction loss at step {step}")));
            }
            let grads = take_grads(&g, loss, &b);
            let lr = cosine_lr(cfg.lr_smp, step, total, warmup);
            opt.update(&mut model.store, &grads, lr);
            log.record(json!({"kind": "step", "phase": "pretrain", "modality": m.name(), "epoch": epoch, "step": step, "lr": lr, "loss": value}))?;
            sum += value * batch.len() as f64;
            step += 1;
        }
        log.record(json!({"kind": "epoch", "phase": "pretrain", "modality": m.name(), "epoch": epoch, "step": step, "loss": sum / train.len() as f64}))?;
    }
    Ok(Pretrained { model, opt })
}

pub struct JointState {
    pub ecg: Model,
    pub cmr: Model,
    pub ecg_opt: AdamW,
    pub cmr_opt: AdamW,
    /// Subjects whose window held no complete heartbeat, summed over steps.
    pub skipped_local: usize,
}

/// Maps clip token embeddings to `local_steps` temporal rows.
pub fn cmr_local_selector(cfg: &RunConfig, cmr: &Model) -> Result<Mat> {
    let sel = cmr_local_matrix(cmr.spec.layout)?;
    if sel.rows() == cfg.local_steps {
        return Ok(sel);
    }
    if !cfg.local_resample {
        return Err(Error::Config(format!("clip has {} temporal tokens, local_steps is {}", sel.rows(), cfg.local_steps)));
    }
    Ok(resample_matrix(sel.rows(), cfg.local_steps)?.matmul(&sel))
}

struct SubjectNodes {
    ze: Var,
    zc: Var,
    local: Option<(Var, Var)>,
}

/// Joint contrastive training of both encoders. The first `freeze` encoder
/// blocks (and the embedders) of each model stay fixed.
pub fn train_joint(train: &[Prepared], cfg: &RunConfig, ecg: Model, cmr: Model, freeze: usize, log: &mut MetricsLog) -> Result<JointState> {
    if train.len() < 2 {
        return Err(Error::validation("joint training needs at least two subjects"));
    }
    let loss_cfg = cfg.loss();
    loss_cfg.validate()?;
    let (mut ecg, mut cmr) = (ecg, cmr);
    let fe = ecg.freeze_mask(freeze)?;
    let fc = cmr.freeze_mask(freeze)?;
    let mut ecg_opt = AdamW::new(&ecg.store, cfg.weight_decay);
    let mut cmr_opt = AdamW::new(&cmr.store, cfg.weight_decay);
    let p_align = alignment_matrix(cfg.local_steps, cfg.sigma)?;
    let cmr_sel = cmr_local_selector(cfg, &cmr)?;
    let (_, total, warmup) = schedule(train.len(), cfg, cfg.joint_epochs);
    let mut step = 0;
    let mut skipped_local = 0;
    for epoch in 1..=cfg.joint_epochs {
        let mut acc = LossBreakdown::default();
        let mut count = 0usize;
        for batch in batches(train.len(), cfg, 2, epoch) {
            let mut g = Graph::new();
            let be = ecg.bind(&mut g, &fe);
            let bc = cmr.bind(&mut g, &fc);
            let nodes = batch
                .iter()
                .map(|&i| joint_subject(&mut g, &ecg, &cmr, &be, &bc, &train[i], epoch, cfg, &cmr_sel))
                .collect::<Result<Vec<_>>>()?;
            let (loss, mut br) = batch_loss(&mut g, &nodes, cfg, &p_align)?;
            skipped_local += nodes.iter().filter(|n| n.local.is_none()).count();
            if !br.total.is_finite() {
                return Err(Error::UndefinedLoss(format!("non-finite joint loss at step {step}")));
            }
            let (ge, gc) = take_grads2(&g, loss, &be, &bc);
            let lr = cosine_lr(cfg.lr_joint, step, total, warmup);
            ecg_opt.update(&mut ecg.store, &ge, lr);
            cmr_opt.update(&mut cmr.store, &gc, lr);
            let mut rec = serde_json::to_value(&br)?;
            rec["kind"] = json!("step");
            rec["phase"] = json!("joint");
            rec["epoch"] = json!(epoch);
            rec["step"] = json!(step);
            rec["lr"] = json!(lr);
            log.record(rec)?;
            br.per_segment = None;
            accumulate(&mut acc, &br, batch.len() as f64);
            count += batch.len();
            step += 1;
        }
        let n = count as f64;
        log.record(json!({
            "kind": "epoch", "phase": "joint", "epoch": epoch, "step": step,
            "global_e2c": acc.global_e2c / n, "global_c2e": acc.global_c2e / n,
            "local_e2c": acc.local_e2c / n, "local_c2e": acc.local_c2e / n, "total": acc.total / n,
        }))?;
    }
    Ok(JointState { ecg, cmr, ecg_opt, cmr_opt, skipped_local })
}

fn accumulate(acc: &mut LossBreakdown, b: &LossBreakdown, w: f64) {
    acc.global_e2c += w * b.global_e2c;
    acc.global_c2e += w * b.global_c2e;
    acc.local_e2c += w * b.local_e2c;
    acc.local_c2e += w * b.local_c2e;
    acc.total += w * b.total;
}

#[allow(clippy::too_many_arguments)]
fn joint_subject(
    g: &mut Graph,
    ecg: &Model,
    cmr: &Model,
    be: &Bound,
    bc: &Bound,
    p: &Prepared,
    epoch: usize,
    cfg: &RunConfig,
    cmr_sel: &Mat,
) -> Result<SubjectNodes> {
    let id = p.id as u64;
    let (pe, peaks) = ecg_view(p, cfg, mix_seed(cfg.seed, &[TAG_JOINT_ECG, epoch as u64, id]))?;
    let te = ecg.encode_all(g, be, &pe)?;
    let ze = ecg.pool_project(g, be, te)?;
    let pc = cmr_view(p, cfg, mix_seed(cfg.seed, &[TAG_JOINT_CMR, epoch as u64, id]))?;
    let tc = cmr.encode_all(g, bc, &pc)?;
    let zc = cmr.pool_project(g, bc, tc)?;
    if cfg.local_mode == LocalMode::Off {
        return Ok(SubjectNodes { ze, zc, local: None });
    }
    let local = match ecg_local_matrix(ecg.spec.layout, &peaks, cfg.ecg_patch, cfg.local_steps) {
        Ok(sel) => {
            let se = g.constant(sel);
            let le = g.matmul(se, te);
            let sc = g.constant(cmr_sel.clone());
            let lc = g.matmul(sc, tc);
            Some((le, lc))
        }
        Err(Error::SegmentationInfeasible(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SubjectNodes { ze, zc, local })
}

fn batch_loss(g: &mut Graph, nodes: &[SubjectNodes], cfg: &RunConfig, p: &AlignmentMatrix) -> Result<(Var, LossBreakdown)> {
    let ze_rows: Vec<Var> = nodes.iter().map(|n| n.ze).collect();
    let zc_rows: Vec<Var> = nodes.iter().map(|n| n.zc).collect();
    let ze = g.concat_rows(&ze_rows);
    let zc = g.concat_rows(&zc_rows);
    let glob = global_infonce(g, ze, zc, cfg.tau_global, cfg.dir_weight)?;
    let mut br = LossBreakdown { global_e2c: g.scalar(glob.e2c), global_c2e: g.scalar(glob.c2e), ..Default::default() };
    let pairs: Vec<(Var, Var)> = nodes.iter().filter_map(|n| n.local).collect();
    if pairs.is_empty() {
        br.total = g.scalar(glob.combined);
        return Ok((glob.combined, br));
    }
    let mut combined = Vec::with_capacity(pairs.len());
    let mut segs = vec![0.0; cfg.local_steps];
    for &(le, lc) in &pairs {
        let d = match cfg.local_mode {
            LocalMode::Cossim => local_cossim(g, le, lc, p, cfg.dir_weight)?,
            _ => local_contrastive(g, le, lc, p, cfg.tau_local, cfg.dir_weight)?,
        };
        br.local_e2c += g.scalar(d.e2c) / pairs.len() as f64;
        br.local_c2e += g.scalar(d.c2e) / pairs.len() as f64;
        if cfg.local_mode == LocalMode::Infonce {
            let ps = local_per_segment(g.value(le), g.value(lc), p, cfg.tau_local)?;
            segs.iter_mut().zip(ps).for_each(|(s, v)| *s += v / pairs.len() as f64);
        }
        combined.push(d.combined);
    }
    let cat = g.concat_rows(&combined);
    let s = g.sum(cat);
    let local = g.scale(s, 1.0 / pairs.len() as f64);
    let total = total_loss(g, glob.combined, local, cfg.beta);
    br.total = g.scalar(total);
    if cfg.local_mode == LocalMode::Infonce {
        br.per_segment = Some(segs);
    }
    Ok((total, br))
}

/// Inference-time representations of one subject.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubjectEmbedding {
    pub id: usize,
    pub phenotypes: PhenotypeVector,
    /// Mean-pooled encoder output before the projection head.
    pub ecg_pooled: Vec<f64>,
    pub ecg_proj: Vec<f64>,
    pub cmr_pooled: Vec<f64>,
    pub cmr_proj: Vec<f64>,
    /// `None` when no evaluation window held a complete heartbeat.
    #[serde(skip)]
    pub ecg_local: Option<Mat>,
    #[serde(skip)]
    pub cmr_local: Option<Mat>,
}

fn forward_tokens(model: &Model, patches: &Mat) -> Result<Mat> {
    let mut g = Graph::new();
    let b = model.bind(&mut g, &vec![false; model.store.len()]);
    let t = model.encode_all(&mut g, &b, patches)?;
    Ok(g.value(t).clone())
}

fn pool(tokens: &Mat) -> Vec<f64> {
    let n = tokens.rows() as f64;
    (0..tokens.cols()).map(|c| (0..tokens.rows()).map(|r| tokens.get(r, c)).sum::<f64>() / n).collect()
}

fn project(model: &Model, pooled: &[f64]) -> Result<Vec<f64>> {
    let w = model.store.value(model.store.find("proj.weight").ok_or_else(|| Error::validation("model has no projection head"))?);
    let b = model.store.value(model.store.find("proj.bias").ok_or_else(|| Error::validation("model has no projection head"))?);
    Ok(Mat::from_vec(1, pooled.len(), pooled.to_vec()).matmul(w).data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// Start indices of `k` evenly spaced windows of `len` in `n` (centred for `k = 1`).
pub fn eval_windows(n: usize, len: usize, k: usize) -> Vec<usize> {
    let span = n.saturating_sub(len);
    if k <= 1 {
        return vec![span / 2];
    }
    (0..k).map(|i| ((i * span) as f64 / (k - 1) as f64).round() as usize).collect()
}

/// Deterministic embeddings: ECG features average evenly spaced crops, the
/// clip is used unaugmented.
pub fn embed_subject(p: &Prepared, cfg: &RunConfig, ecg: &Model, cmr: &Model, cmr_sel: &Mat) -> Result<SubjectEmbedding> {
    let d = ecg.spec.encoder.embed_dim;
    let mut pooled = vec![0.0; d];
    let mut local_sum: Option<Mat> = None;
    let mut beats = 0;
    let starts = eval_windows(p.ecg.len(), cfg.ecg_crop_len, cfg.eval_crops);
    for &s in &starts {
        let sig = p.ecg.crop(s, cfg.ecg_crop_len)?;
        let tokens = forward_tokens(ecg, &ecg_patches(&sig, cfg.ecg_patch)?.data)?;
        pooled.iter_mut().zip(pool(&tokens)).for_each(|(a, b)| *a += b / starts.len() as f64);
        match ecg_local_matrix(ecg.spec.layout, &p.r_peaks.window(s, cfg.ecg_crop_len), cfg.ecg_patch, cfg.local_steps) {
            Ok(sel) => {
                let l = sel.matmul(&tokens);
                match &mut local_sum {
                    Some(acc) => acc.add_assign(&l),
                    None => local_sum = Some(l),
                }
                beats += 1;
            }
            Err(Error::SegmentationInfeasible(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let ctoks = forward_tokens(cmr, &cmr_patches(&p.cmr, cfg.patch().cmr_patch)?.data)?;
    let cmr_pooled = pool(&ctoks);
    Ok(SubjectEmbedding {
        id: p.id,
        phenotypes: p.phenotypes,
        ecg_proj: project(ecg, &pooled)?,
        ecg_pooled: pooled,
        cmr_proj: project(cmr, &cmr_pooled)?,
        cmr_pooled,
        ecg_local: local_sum.map(|m| m.scale(1.0 / beats as f64)),
        cmr_local: Some(cmr_sel.matmul(&ctoks)),
    })
}

pub fn embed_subjects(data: &[Prepared], cfg: &RunConfig, ecg: &Model, cmr: &Model) -> Result<Vec<SubjectEmbedding>> {
    let sel = cmr_local_selector(cfg, cmr)?;
    data.iter().map(|p| embed_subject(p, cfg, ecg, cmr, &sel)).collect()
}

/// ECG→CMR retrieval: ECG projections query a database of clip projections.
pub fn evaluate_retrieval(test: &[SubjectEmbedding], ks: &[usize], seed: u64) -> Result<RetrievalReport> {
    let db = EmbeddingDatabase::new(
        test.iter().map(|e| DbEntry { subject_id: e.id, embedding: e.cmr_proj.clone(), phenotypes: e.phenotypes }).collect(),
    )?;
    let queries: Vec<Query> = test.iter().map(|e| Query { subject_id: e.id, embedding: e.ecg_proj.clone() }).collect();
    retrieval_metrics(&queries, &db, ks, seed)
}

fn feature_matrix(e: &[SubjectEmbedding]) -> Mat {
    let rows: Vec<Vec<f64>> = e.iter().map(|s| s.ecg_pooled.clone()).collect();
    Mat::from_rows(&rows)
}

/// Least-squares probes from pooled ECG features to every phenotype.
pub fn evaluate_regression(train: &[SubjectEmbedding], test: &[SubjectEmbedding]) -> Result<RegressionReport> {
    let (xtr, xte) = (feature_matrix(train), feature_matrix(test));
    let mut phenotypes = BTreeMap::new();
    for name in PhenotypeVector::NAMES {
        let y = |e: &[SubjectEmbedding]| e.iter().map(|s| s.phenotypes.get(name).unwrap_or(f64::NAN)).collect::<Vec<_>>();
        phenotypes.insert(name.to_string(), linear_probe(&xtr, &y(train), &xte, &y(test))?);
    }
    Ok(RegressionReport { phenotypes })
}

/// Per-subject local similarity heatmaps; subjects without an ECG local
/// embedding are left out.
pub fn evaluate_heatmaps(test: &[SubjectEmbedding]) -> Result<Vec<(usize, SimilarityHeatmap)>> {
    test.iter()
        .filter_map(|e| Some((e.id, e.ecg_local.as_ref()?, e.cmr_local.as_ref()?)))
        .map(|(id, le, lc)| Ok((id, similarity_heatmap(le, lc)?)))
        .collect()
}

pub fn mean_diag_score(maps: &[(usize, SimilarityHeatmap)]) -> f64 {
    maps.iter().map(|(_, h)| h.diag_score).sum::<f64>() / maps.len().max(1) as f64
}
