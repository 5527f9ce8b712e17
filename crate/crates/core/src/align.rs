//! Local embeddings, the alignment matrix and the global/local contrastive
//! objectives.
//!
//! Local embeddings are linear in the encoder outputs, so each one is built as
//! a constant selection matrix times the token embeddings. That keeps them on
//! the autodiff graph without dedicated ops.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use crate::tokenizer::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMode {
    /// Within-subject contrast over time steps.
    Infonce,
    /// Pulls aligned time steps together with no negatives.
    Cossim,
    Off,
}

impl std::str::FromStr for LocalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "infonce" => Ok(LocalMode::Infonce),
            "cossim" => Ok(LocalMode::Cossim),
            "off" => Ok(LocalMode::Off),
            _ => Err(Error::Config(format!("unknown local mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau_global: f64,
    pub tau_local: f64,
    pub beta: f64,
    /// Weight of the ECG→CMR direction; CMR→ECG gets the rest.
    pub dir_weight_e2c: f64,
    pub sigma: f64,
    pub local_mode: LocalMode,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_global > 0.0 && self.tau_local > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.dir_weight_e2c) {
            return Err(Error::Config("direction weight must be in [0, 1]".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global_e2c: f64,
    pub global_c2e: f64,
    pub local_e2c: f64,
    pub local_c2e: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_segment: Option<Vec<f64>>,
}

/// `T × T` row-stochastic weights pairing ECG step `k` with clip step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    pub p: Mat,
    pub sigma: f64,
}

pub fn alignment_matrix(t: usize, sigma: f64) -> Result<AlignmentMatrix> {
    if t == 0 {
        return Err(Error::validation("alignment needs at least one time step"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::validation("sigma must be finite and non-negative"));
    }
    if sigma == 0.0 || t == 1 {
        return Ok(AlignmentMatrix { p: Mat::identity(t), sigma });
    }
    let mut p = Mat::from_fn(t, t, |k, j| {
        let dist = (k as f64 - j as f64).abs() / (t - 1) as f64;
        (-0.5 * (dist / sigma).powi(2)).exp()
    });
    for k in 0..t {
        let s: f64 = p.row(k).iter().sum();
        p.row_mut(k).iter_mut().for_each(|v| *v /= s);
    }
    Ok(AlignmentMatrix { p, sigma })
}

/// Linear interpolation of `seq` (K × d) at positions `k·(K−1)/(T−1)`.
pub fn resample_to_length(seq: &Mat, t: usize) -> Result<Mat> {
    Ok(resample_matrix(seq.rows(), t)?.matmul(seq))
}

/// `T × K` interpolation weights used by [`resample_to_length`].
pub fn resample_matrix(k: usize, t: usize) -> Result<Mat> {
    if k < 2 {
        return Err(Error::validation(format!("cannot resample a sequence of {k} rows")));
    }
    if t == 0 {
        return Err(Error::validation("target length must be positive"));
    }
    let mut w = Mat::zeros(t, k);
    for row in 0..t {
        let pos = if t == 1 { 0.0 } else { row as f64 * (k - 1) as f64 / (t - 1) as f64 };
        let lo = (pos.floor() as usize).min(k - 1);
        let frac = pos - lo as f64;
        if lo + 1 < k && frac > 0.0 {
            w.set(row, lo, 1.0 - frac);
            w.set(row, lo + 1, frac);
        } else {
            w.set(row, lo, 1.0);
        }
    }
    Ok(w)
}

/// `T × n_tokens` averaging matrix: each temporal slot is the mean of its
/// spatial tokens.
pub fn cmr_local_matrix(layout: Layout) -> Result<Mat> {
    let Layout::Cmr { temporal, spatial } = layout else {
        return Err(Error::validation("clip local embeddings need a clip token layout"));
    };
    let mut m = Mat::zeros(temporal, temporal * spatial);
    for t in 0..temporal {
        for s in 0..spatial {
            m.set(t, layout.index(t, s), 1.0 / spatial as f64);
        }
    }
    Ok(m)
}

/// `T × n_tokens` matrix for the per-beat ECG local embedding.
///
/// Beat `j` covers token steps `floor(R_j/p_t) .. floor(R_{j+1}/p_t)`. Each
/// step is averaged across leads, the beat is interpolated to `T` rows, and
/// beats are averaged. Beats shorter than two token steps are skipped.
/// `r_peaks` are sample indices in the tokenized window.
pub fn ecg_local_matrix(layout: Layout, r_peaks: &[usize], p_t: usize, t: usize) -> Result<Mat> {
    let Layout::Ecg { leads, steps } = layout else {
        return Err(Error::validation("ECG local embeddings need an ECG token layout"));
    };
    if p_t == 0 || t == 0 {
        return Err(Error::validation("patch length and target length must be positive"));
    }
    let mut m = Mat::zeros(t, leads * steps);
    let mut beats = 0;
    for pair in r_peaks.windows(2) {
        let (a, b) = (pair[0] / p_t, (pair[1] / p_t).min(steps));
        if b <= a + 1 {
            continue;
        }
        let w = resample_matrix(b - a, t)?;
        for row in 0..t {
            for (j, s) in (a..b).enumerate() {
                let v = w.get(row, j);
                if v == 0.0 {
                    continue;
                }
                for l in 0..leads {
                    let idx = layout.index(l, s);
                    m.set(row, idx, m.get(row, idx) + v / leads as f64);
                }
            }
        }
        beats += 1;
    }
    if beats == 0 {
        return Err(Error::SegmentationInfeasible(format!(
            "no complete heartbeat among {} R-peaks in the window",
            r_peaks.len()
        )));
    }
    Ok(m.scale(1.0 / beats as f64))
}

pub fn cmr_local_embeddings(embeddings: &Mat, layout: Layout) -> Result<Mat> {
    check_rows(embeddings, layout)?;
    Ok(cmr_local_matrix(layout)?.matmul(embeddings))
}

pub fn ecg_local_embeddings(embeddings: &Mat, layout: Layout, r_peaks: &[usize], p_t: usize, t: usize) -> Result<Mat> {
    check_rows(embeddings, layout)?;
    Ok(ecg_local_matrix(layout, r_peaks, p_t, t)?.matmul(embeddings))
}

fn check_rows(embeddings: &Mat, layout: Layout) -> Result<()> {
    if embeddings.rows() != layout.n_tokens() {
        return Err(Error::shape(format!("{} embedding rows for {} tokens", embeddings.rows(), layout.n_tokens())));
    }
    Ok(())
}

fn check_nonzero_rows(g: &Graph, v: Var) -> Result<()> {
    let m = g.value(v);
    for r in 0..m.rows() {
        let n2: f64 = m.row(r).iter().map(|x| x * x).sum();
        if !(n2 > 0.0) {
            return Err(Error::ZeroNorm);
        }
    }
    Ok(())
}

/// Per-direction loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct Directional {
    pub e2c: Var,
    pub c2e: Var,
    pub combined: Var,
}

fn combine(g: &mut Graph, e2c: Var, c2e: Var, w: f64) -> Var {
    let a = g.scale(e2c, w);
    let b = g.scale(c2e, 1.0 - w);
    g.add(a, b)
}

fn cosine_logits(g: &mut Graph, a: Var, b: Var, tau: f64) -> Result<Var> {
    check_nonzero_rows(g, a)?;
    check_nonzero_rows(g, b)?;
    let na = g.normalize_rows(a);
    let nb = g.normalize_rows(b);
    let s = g.matmul_t(na, nb);
    Ok(g.scale(s, 1.0 / tau))
}

/// Symmetric InfoNCE over a batch of projected embeddings (rows are subjects).
pub fn global_infonce(g: &mut Graph, ze: Var, zc: Var, tau: f64, dir_weight: f64) -> Result<Directional> {
    let (be, bc) = (g.value(ze).shape(), g.value(zc).shape());
    if be != bc || be.0 == 0 {
        return Err(Error::shape(format!("embedding batches {be:?} and {bc:?} must match and be nonempty")));
    }
    let b = be.0;
    let logits = cosine_logits(g, ze, zc, tau)?;
    let target = Mat::identity(b).scale(-1.0 / b as f64);
    let lse = g.log_softmax_rows(logits);
    let e2c = g.weighted_sum(lse, target.clone());
    let lt = g.transpose(logits);
    let lst = g.log_softmax_rows(lt);
    let c2e = g.weighted_sum(lst, target);
    Ok(Directional { e2c, c2e, combined: combine(g, e2c, c2e, dir_weight) })
}

/// Within-subject local loss for one subject. Rows of `le` are ECG steps
/// `k`, rows of `lc` clip steps `t`; `P[k][t]` weights the targets.
pub fn local_contrastive(g: &mut Graph, le: Var, lc: Var, p: &AlignmentMatrix, tau: f64, dir_weight: f64) -> Result<Directional> {
    let (t, pe, pc) = local_shapes(g, le, lc, p)?;
    let _ = (pe, pc);
    let logits = cosine_logits(g, le, lc, tau)?;
    let w = p.p.scale(-1.0 / t as f64);
    let lse = g.log_softmax_rows(logits);
    let e2c = g.weighted_sum(lse, w.clone());
    let lt = g.transpose(logits);
    let lst = g.log_softmax_rows(lt);
    let c2e = g.weighted_sum(lst, p.p.transpose().scale(-1.0 / t as f64));
    Ok(Directional { e2c, c2e, combined: combine(g, e2c, c2e, dir_weight) })
}

/// Cosine-maximization variant: `1 − Σ_t P[k][t]·cos(e_k, c_t)` averaged over
/// `k`, no negatives. Both directions coincide up to `Pᵀ`.
pub fn local_cossim(g: &mut Graph, le: Var, lc: Var, p: &AlignmentMatrix, dir_weight: f64) -> Result<Directional> {
    let (t, _, _) = local_shapes(g, le, lc, p)?;
    let cos = cosine_logits(g, le, lc, 1.0)?;
    let one = g.constant(Mat::filled(1, 1, 1.0));
    let se = g.weighted_sum(cos, p.p.scale(-1.0 / t as f64));
    let e2c = g.add(one, se);
    let sc = g.weighted_sum(cos, p.p.scale(-1.0 / t as f64));
    let c2e = g.add(one, sc);
    Ok(Directional { e2c, c2e, combined: combine(g, e2c, c2e, dir_weight) })
}

fn local_shapes(g: &Graph, le: Var, lc: Var, p: &AlignmentMatrix) -> Result<(usize, usize, usize)> {
    let (se, sc) = (g.value(le).shape(), g.value(lc).shape());
    if se != sc || se.0 == 0 {
        return Err(Error::shape(format!("local embeddings {se:?} and {sc:?} must match")));
    }
    if p.p.shape() != (se.0, se.0) {
        return Err(Error::shape("alignment matrix does not match the number of time steps"));
    }
    Ok((se.0, se.1, sc.1))
}

/// ECG→CMR per-segment losses `ℓ_k` for one subject, from values alone.
pub fn local_per_segment(le: &Mat, lc: &Mat, p: &AlignmentMatrix, tau: f64) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(le.clone()), g.constant(lc.clone()));
    local_shapes(&g, a, b, p)?;
    let logits = cosine_logits(&mut g, a, b, tau)?;
    let lse = g.log_softmax_rows(logits);
    let l = g.value(lse);
    Ok((0..l.rows()).map(|k| -(0..l.cols()).map(|t| p.p.get(k, t) * l.get(k, t)).sum::<f64>()).collect())
}

pub fn total_loss(g: &mut Graph, global: Var, local: Var, beta: f64) -> Var {
    let l = g.scale(local, beta);
    g.add(global, l)
}
