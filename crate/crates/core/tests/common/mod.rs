//! Shared fixtures: the finite-difference gradient suite, brute-force oracles
//! and signal helpers used by several test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use cardioalign::align::{alignment_matrix, global_infonce, local_contrastive, local_cossim, total_loss, AlignmentMatrix};
use cardioalign::autodiff::gradcheck::check;
use cardioalign::autodiff::{Graph, Var};
use cardioalign::eval::{population_std, Query, EmbeddingDatabase};
use cardioalign::model::{mae_loss, Bound, EncoderConfig, Group, Modality, Model, ModelSpec};
use cardioalign::signal::MultiLeadSignal;
use cardioalign::tokenizer::{embed_on_graph, make_mask, positional_on_graph, Layout, PosMode, PosVars};
use cardioalign::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Rows with entries in [-1, 1] and norm at least 0.5, away from the
/// singularity of cosine similarity at the origin.
pub fn embedding_rows(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    let mut m = rand_mat(rng, r, c);
    for i in 0..r {
        while m.row(i).iter().map(|x| x * x).sum::<f64>() < 0.25 {
            for x in m.row_mut(i) {
                *x = rng.random_range(-1.0..1.0);
            }
        }
    }
    m
}

/// Worst relative error of one op over its seeded instances.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub worst: f64,
}

/// Contracts an output with fixed random weights so every element reaches the scalar.
fn readout(g: &mut Graph, v: Var, w: &Mat) -> Var {
    g.weighted_sum(v, w.clone())
}

fn random_layout(rng: &mut ChaCha8Rng, m: Modality) -> Layout {
    match m {
        Modality::Ecg => Layout::Ecg { leads: rng.random_range(1..=3), steps: rng.random_range(2..=4) },
        Modality::Cmr => Layout::Cmr { temporal: rng.random_range(2..=3), spatial: rng.random_range(1..=3) },
    }
}

fn tokenizer_instance(rng: &mut ChaCha8Rng, m: Modality, mode: PosMode) -> f64 {
    let layout = random_layout(rng, m);
    let (n, pd, d) = (layout.n_tokens(), rng.random_range(2..=5), rng.random_range(2..=4));
    let (ta, tb) = layout.table_sizes();
    let mut inputs = vec![rand_mat(rng, n, pd), rand_mat(rng, pd, d), rand_mat(rng, 1, d)];
    match mode {
        PosMode::Factorized => inputs.extend([rand_mat(rng, ta, d), rand_mat(rng, tb, d)]),
        PosMode::Flat => inputs.push(rand_mat(rng, n, d)),
    }
    let w = rand_mat(rng, n, d);
    check(&inputs, |g, v| {
        let pos = match mode {
            PosMode::Factorized => PosVars::Factorized(v[3], v[4]),
            PosMode::Flat => PosVars::Flat(v[3]),
        };
        let out = embed_on_graph(g, v[0], v[1], v[2], pos, layout);
        readout(g, out, &w)
    })
}

fn positional_instance(rng: &mut ChaCha8Rng) -> f64 {
    let m = if rng.random_bool(0.5) { Modality::Ecg } else { Modality::Cmr };
    let layout = random_layout(rng, m);
    let (n, d) = (layout.n_tokens(), rng.random_range(2..=4));
    let (ta, tb) = layout.table_sizes();
    let inputs = vec![rand_mat(rng, n, d), rand_mat(rng, ta, d), rand_mat(rng, tb, d)];
    let w = rand_mat(rng, n, d);
    check(&inputs, |g, v| {
        let p = positional_on_graph(g, PosVars::Factorized(v[1], v[2]), layout);
        let out = g.add(v[0], p);
        readout(g, out, &w)
    })
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> ModelSpec {
    let m = if rng.random_bool(0.5) { Modality::Ecg } else { Modality::Cmr };
    let heads = rng.random_range(1..=2);
    let embed_dim = heads * rng.random_range(4 / heads..=8 / heads);
    ModelSpec {
        modality: m,
        patch_dim: rng.random_range(2..=4),
        layout: random_layout(rng, m),
        encoder: EncoderConfig {
            layers: rng.random_range(1..=2),
            heads,
            embed_dim,
            mlp_ratio: 2.0,
            decoder_layers: 1,
            decoder_heads: heads,
            decoder_dim: embed_dim,
            proj_dim: 3,
            pos_mode: if rng.random_bool(0.5) { PosMode::Factorized } else { PosMode::Flat },
        },
    }
}

/// A model whose parameters are all drawn uniformly from [-1, 1].
pub fn random_model(rng: &mut ChaCha8Rng) -> Model {
    let spec = random_spec(rng);
    let mut model = Model::new(spec, rng.random()).unwrap();
    for i in 0..model.store.len() {
        let (r, c) = model.store.value(i).shape();
        *model.store.value_mut(i) = rand_mat(rng, r, c);
    }
    model
}

/// Gradient check over the parameters selected by `pick`, plus any extra
/// inputs; unselected parameters enter as constants.
fn model_check<F>(model: &Model, pick: impl Fn(Group) -> bool, extra: Vec<Mat>, f: F) -> f64
where
    F: Fn(&mut Graph, &Model, &Bound, &[Var]) -> Var,
{
    let chosen: Vec<usize> = (0..model.store.len()).filter(|&i| pick(model.store.params()[i].group)).collect();
    let mut inputs: Vec<Mat> = chosen.iter().map(|&i| model.store.value(i).clone()).collect();
    let n_params = inputs.len();
    inputs.extend(extra);
    check(&inputs, |g, v| {
        let mut vars = Vec::with_capacity(model.store.len());
        let mut next = 0;
        for i in 0..model.store.len() {
            if chosen.get(next) == Some(&i) {
                vars.push(v[next]);
                next += 1;
            } else {
                vars.push(g.constant(model.store.value(i).clone()));
            }
        }
        let b = Bound::from_vars(vars);
        f(g, model, &b, &v[n_params..])
    })
}

fn encoder_instance(rng: &mut ChaCha8Rng) -> f64 {
    let model = random_model(rng);
    let (n, d) = (model.spec.layout.n_tokens(), model.spec.encoder.embed_dim);
    let patches = rand_mat(rng, n, model.spec.patch_dim);
    let w = rand_mat(rng, n, d);
    let enc = |grp: Group| matches!(grp, Group::Embed | Group::Pos | Group::Block(_) | Group::Norm);
    model_check(&model, enc, vec![], |g, m, b, _| {
        let t = m.encode_all(g, b, &patches).unwrap();
        readout(g, t, &w)
    })
}

fn decoder_instance(rng: &mut ChaCha8Rng) -> f64 {
    let model = random_model(rng);
    let n = model.spec.layout.n_tokens();
    let plan = make_mask(n, rng.random_range(0.3..0.7), rng.random()).unwrap();
    let plan = if plan.masked.is_empty() || plan.visible.is_empty() { make_mask(n, 0.5, 1).unwrap() } else { plan };
    let vis = rand_mat(rng, plan.visible.len(), model.spec.encoder.embed_dim);
    let w = rand_mat(rng, plan.masked.len(), model.spec.patch_dim);
    model_check(&model, |grp| grp == Group::Decoder, vec![vis], |g, m, b, v| {
        let r = m.decode_reconstruct(g, b, v[0], &plan).unwrap();
        readout(g, r, &w)
    })
}

fn pooling_instance(rng: &mut ChaCha8Rng) -> f64 {
    let model = random_model(rng);
    let rows = rng.random_range(1..=6);
    let tokens = rand_mat(rng, rows, model.spec.encoder.embed_dim);
    let w = rand_mat(rng, 1, model.spec.encoder.proj_dim);
    model_check(&model, |grp| grp == Group::Proj, vec![tokens], |g, m, b, v| {
        let z = m.pool_project(g, b, v[0]).unwrap();
        readout(g, z, &w)
    })
}

fn global_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (b, d) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let (tau, w) = (rng.random_range(0.1..1.0), rng.random_range(0.0..1.0));
    check(&[embedding_rows(rng, b, d), embedding_rows(rng, b, d)], |g, v| global_infonce(g, v[0], v[1], tau, w).unwrap().combined)
}

fn random_alignment(rng: &mut ChaCha8Rng, t: usize) -> AlignmentMatrix {
    let sigma = [0.0, 0.1, 0.5, 1.0][rng.random_range(0..4)];
    alignment_matrix(t, sigma).unwrap()
}

fn local_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (t, d) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let p = random_alignment(rng, t);
    let (tau, w) = (rng.random_range(0.1..1.0), rng.random_range(0.0..1.0));
    check(&[embedding_rows(rng, t, d), embedding_rows(rng, t, d)], |g, v| local_contrastive(g, v[0], v[1], &p, tau, w).unwrap().combined)
}

fn cossim_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (t, d) = (rng.random_range(2..=5), rng.random_range(2..=5));
    let p = random_alignment(rng, t);
    let w = rng.random_range(0.0..1.0);
    check(&[embedding_rows(rng, t, d), embedding_rows(rng, t, d)], |g, v| local_cossim(g, v[0], v[1], &p, w).unwrap().combined)
}

fn mae_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (n, pd) = (rng.random_range(3..=8), rng.random_range(1..=4));
    let plan = make_mask(n, rng.random_range(0.3..0.9), rng.random()).unwrap();
    let plan = if plan.masked.is_empty() { make_mask(n, 0.5, 1).unwrap() } else { plan };
    check(&[rand_mat(rng, n, pd), rand_mat(rng, n, pd)], |g, v| mae_loss(g, v[0], v[1], &plan).unwrap())
}

fn total_instance(rng: &mut ChaCha8Rng) -> f64 {
    let (b, t, d) = (rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4));
    let p = random_alignment(rng, t);
    let beta = rng.random_range(0.0..2.0);
    let inputs = [embedding_rows(rng, b, d), embedding_rows(rng, b, d), embedding_rows(rng, t, d), embedding_rows(rng, t, d)];
    check(&inputs, |g, v| {
        let gl = global_infonce(g, v[0], v[1], 0.1, 0.5).unwrap().combined;
        let lo = local_contrastive(g, v[2], v[3], &p, 1.0, 0.5).unwrap().combined;
        total_loss(g, gl, lo, beta)
    })
}

pub const GRADIENT_OPS: [&str; 12] = [
    "ecg tokenizer",
    "cmr tokenizer",
    "flat positional tokenizer",
    "positional add",
    "encoder",
    "decoder",
    "pooling + projection",
    "global infonce",
    "local contrastive",
    "local cossim",
    "masked reconstruction",
    "total loss",
];

/// Runs `instances` seeded checks of one op.
pub fn check_op(op: &'static str, instances: usize, seed: u64) -> OpCheck {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
        let e = match op {
            "ecg tokenizer" => tokenizer_instance(&mut rng, Modality::Ecg, PosMode::Factorized),
            "cmr tokenizer" => tokenizer_instance(&mut rng, Modality::Cmr, PosMode::Factorized),
            "flat positional tokenizer" => {
                let m = if rng.random_bool(0.5) { Modality::Ecg } else { Modality::Cmr };
                tokenizer_instance(&mut rng, m, PosMode::Flat)
            }
            "positional add" => positional_instance(&mut rng),
            "encoder" => encoder_instance(&mut rng),
            "decoder" => decoder_instance(&mut rng),
            "pooling + projection" => pooling_instance(&mut rng),
            "global infonce" => global_instance(&mut rng),
            "local contrastive" => local_instance(&mut rng),
            "local cossim" => cossim_instance(&mut rng),
            "masked reconstruction" => mae_instance(&mut rng),
            "total loss" => total_instance(&mut rng),
            _ => panic!("unknown op {op}"),
        };
        worst = worst.max(e);
    }
    OpCheck { op, instances, worst }
}

/// Local loss from its definition with explicit loops.
pub fn naive_local_loss(le: &Mat, lc: &Mat, p: &Mat, tau: f64, w: f64) -> f64 {
    let t = le.rows();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let s: Vec<Vec<f64>> = (0..t).map(|k| (0..t).map(|j| cos(le.row(k), lc.row(j)) / tau).collect()).collect();
    let mut e2c = 0.0;
    let mut c2e = 0.0;
    for k in 0..t {
        let z_row: f64 = (0..t).map(|j| s[k][j].exp()).sum();
        let z_col: f64 = (0..t).map(|j| s[j][k].exp()).sum();
        for j in 0..t {
            e2c -= p.get(k, j) * (s[k][j].exp() / z_row).ln();
            c2e -= p.get(j, k) * (s[j][k].exp() / z_col).ln();
        }
    }
    w * e2c / t as f64 + (1.0 - w) * c2e / t as f64
}

/// Brute-force P@k and mean rank for one phenotype: every candidate is scored
/// against the query with an explicit sort.
pub fn naive_retrieval(queries: &[Query], db: &EmbeddingDatabase, name: &str, ks: &[usize]) -> (BTreeMap<usize, f64>, f64) {
    let vals: Vec<f64> = db.entries.iter().map(|e| e.phenotypes.get(name).unwrap()).collect();
    let half = 0.5 * population_std(&vals);
    let mut prec = BTreeMap::new();
    let mut ranks = Vec::new();
    let mut hits_at: Vec<Vec<bool>> = Vec::new();
    for q in queries {
        let qv = db.get(q.subject_id).unwrap().phenotypes.get(name).unwrap();
        let mut scored: Vec<(f64, usize, f64)> = db
            .entries
            .iter()
            .filter(|e| e.subject_id != q.subject_id)
            .map(|e| {
                let dot: f64 = q.embedding.iter().zip(&e.embedding).map(|(a, b)| a * b).sum();
                let na = q.embedding.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nb = e.embedding.iter().map(|b| b * b).sum::<f64>().sqrt();
                (dot / (na * nb), e.subject_id, e.phenotypes.get(name).unwrap())
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = scored.iter().map(|s| (s.2 - qv).abs() <= half).collect();
        ranks.push(hits.iter().position(|&h| h).map(|p| p + 1).unwrap_or(db.entries.len()) as f64);
        hits_at.push(hits);
    }
    for &k in ks {
        let p = hits_at.iter().map(|h| h.iter().take(k).filter(|&&x| x).count() as f64 / k as f64).sum::<f64>() / queries.len() as f64;
        prec.insert(k, p);
    }
    (prec, ranks.iter().sum::<f64>() / ranks.len() as f64)
}

/// Adds white noise to every lead at 1% of the reference lead's power (20 dB SNR).
pub fn at_20db(sig: &MultiLeadSignal, seed: u64) -> MultiLeadSignal {
    let ii = sig.lead(1);
    let mean = ii.iter().sum::<f64>() / ii.len() as f64;
    let power = ii.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ii.len() as f64;
    let noise = Normal::new(0.0, (power / 100.0).sqrt()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leads = sig.leads().iter().map(|l| l.iter().map(|v| v + noise.sample(&mut rng)).collect()).collect();
    sig.with_samples(leads).unwrap()
}

/// Recall and precision of detected peaks against truth under a sample tolerance.
pub fn match_peaks(found: &[usize], truth: &[usize], tol: usize) -> (f64, f64) {
    let near = |a: usize, b: usize| a.abs_diff(b) <= tol;
    let recalled = truth.iter().filter(|&&t| found.iter().any(|&f| near(f, t))).count();
    let precise = found.iter().filter(|&&f| truth.iter().any(|&t| near(f, t))).count();
    (recalled as f64 / truth.len().max(1) as f64, precise as f64 / found.len().max(1) as f64)
}

/// A configuration small enough to run every command in seconds.
pub fn tiny_config(root: &std::path::Path) -> cardioalign::config::RunConfig {
    let mut cfg = cardioalign::config::RunConfig::desk();
    for (k, v) in [
        ("embed_dim", "8"),
        ("ecg_layers", "1"),
        ("cmr_layers", "1"),
        ("heads", "2"),
        ("decoder_layers", "1"),
        ("decoder_heads", "2"),
        ("decoder_dim", "8"),
        ("proj_dim", "4"),
        ("batch_size", "4"),
        ("smp_epochs", "1"),
        ("joint_epochs", "1"),
        ("eval_crops", "1"),
        ("n_train", "8"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.dataset = root.join("data");
    cfg.out = root.join("run");
    cfg.validate().unwrap();
    cfg
}
