//! Retrieval, linear probing and similarity heatmaps over frozen embeddings.
//!
//! Mean and median rank use the rank of the first matching candidate.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::PhenotypeVector;
use crate::tensor::Mat;

pub const DEFAULT_KS: [usize; 5] = [1, 3, 5, 10, 15];
pub const RANDOM_TRIALS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbEntry {
    pub subject_id: usize,
    pub embedding: Vec<f64>,
    pub phenotypes: PhenotypeVector,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDatabase {
    pub entries: Vec<DbEntry>,
}

impl EmbeddingDatabase {
    pub fn new(entries: Vec<DbEntry>) -> Result<Self> {
        let mut ids: Vec<usize> = entries.iter().map(|e| e.subject_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::validation("duplicate subject id in embedding database"));
        }
        if let Some(first) = entries.first() {
            if entries.iter().any(|e| e.embedding.len() != first.embedding.len()) {
                return Err(Error::validation("embeddings have inconsistent dimensions"));
            }
        }
        Ok(EmbeddingDatabase { entries })
    }

    pub fn get(&self, id: usize) -> Option<&DbEntry> {
        self.entries.iter().find(|e| e.subject_id == id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub subject_id: usize,
    pub embedding: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::ZeroNorm);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Candidate ids by descending cosine similarity, ties by ascending id. The
/// query's own subject is not a candidate.
pub fn rank_by_cosine(query: &Query, db: &EmbeddingDatabase) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(db.entries.len());
    for e in &db.entries {
        if e.subject_id == query.subject_id {
            continue;
        }
        scored.push((cosine(&query.embedding, &e.embedding)?, e.subject_id));
    }
    if scored.is_empty() {
        return Err(Error::validation("no candidates to rank"));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, id)| id).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeRetrieval {
    pub precision_at: BTreeMap<usize, f64>,
    pub mean_rank: f64,
    pub median_rank: f64,
    pub random_precision_at: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub phenotypes: BTreeMap<String, PhenotypeRetrieval>,
}

pub fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Retrieval of `db` candidates for each query, scored per phenotype with
/// the ±0.5σ match rule. A query's phenotype is that of its own subject in
/// `db`. A query with no matching candidate contributes rank `|db|`.
pub fn retrieval_metrics(queries: &[Query], db: &EmbeddingDatabase, ks: &[usize], seed: u64) -> Result<RetrievalReport> {
    retrieval_metrics_with(queries, db, ks, &PhenotypeVector::NAMES, RANDOM_TRIALS, seed)
}

pub fn retrieval_metrics_with(
    queries: &[Query],
    db: &EmbeddingDatabase,
    ks: &[usize],
    names: &[&str],
    trials: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    if queries.is_empty() || db.entries.is_empty() {
        return Err(Error::validation("retrieval needs queries and a nonempty database"));
    }
    let rankings: Vec<Vec<usize>> = queries.iter().map(|q| rank_by_cosine(q, db)).collect::<Result<_>>()?;
    let mut out = BTreeMap::new();
    for &name in names {
        let value = |id: usize| -> Result<f64> {
            db.get(id)
                .and_then(|e| e.phenotypes.get(name))
                .ok_or_else(|| Error::validation(format!("no phenotype {name} for subject {id}")))
        };
        let all: Vec<f64> = db.entries.iter().map(|e| e.phenotypes.get(name).unwrap_or(f64::NAN)).collect();
        let half = 0.5 * population_std(&all);
        let matches: Vec<Vec<bool>> = queries
            .iter()
            .zip(&rankings)
            .map(|(q, r)| {
                let qv = value(q.subject_id)?;
                r.iter().map(|&c| Ok((value(c)? - qv).abs() <= half)).collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<_>>()?;
        out.insert(name.to_string(), score_matches(&matches, ks, db.entries.len(), trials, seed));
    }
    Ok(RetrievalReport { phenotypes: out })
}

/// Metrics from per-query match flags in ranked order.
pub fn score_matches(matches: &[Vec<bool>], ks: &[usize], db_len: usize, trials: usize, seed: u64) -> PhenotypeRetrieval {
    let mut precision_at = BTreeMap::new();
    for &k in ks {
        let p = matches
            .iter()
            .map(|m| {
                let top = k.min(m.len()).max(1);
                m.iter().take(top).filter(|&&x| x).count() as f64 / top as f64
            })
            .sum::<f64>()
            / matches.len() as f64;
        precision_at.insert(k, p);
    }
    let ranks: Vec<f64> =
        matches.iter().map(|m| m.iter().position(|&x| x).map_or(db_len as f64, |r| (r + 1) as f64)).collect();
    PhenotypeRetrieval {
        precision_at,
        mean_rank: ranks.iter().sum::<f64>() / ranks.len() as f64,
        median_rank: median(ranks),
        random_precision_at: random_baseline(matches, ks, trials, seed),
    }
}

/// Monte-Carlo P@k under a uniformly random candidate order: each trial draws
/// a query and shuffles its candidates.
pub fn random_baseline(matches: &[Vec<bool>], ks: &[usize], trials: usize, seed: u64) -> BTreeMap<usize, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let mut sums = vec![0.0; ks.len()];
    for _ in 0..trials {
        let m = &matches[rng.random_range(0..matches.len())];
        let mut order: Vec<bool> = m.clone();
        let take = kmax.min(order.len());
        for i in 0..take {
            let j = rng.random_range(i..order.len());
            order.swap(i, j);
        }
        for (s, &k) in sums.iter_mut().zip(ks) {
            let top = k.min(order.len()).max(1);
            *s += order.iter().take(top).filter(|&&x| x).count() as f64 / top as f64;
        }
    }
    ks.iter().zip(sums).map(|(&k, s)| (k, s / trials as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub r2: f64,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub phenotypes: BTreeMap<String, ProbeResult>,
}

pub const PROBE_RIDGE: f64 = 1e-8;

/// Ordinary least squares with intercept (ridge `1e-8` on the centred normal
/// equations), scored by R² on the test split.
pub fn linear_probe(train_x: &Mat, train_y: &[f64], test_x: &Mat, test_y: &[f64]) -> Result<ProbeResult> {
    let (n, d) = train_x.shape();
    if n != train_y.len() || test_x.rows() != test_y.len() || test_x.cols() != d || n == 0 || test_y.is_empty() {
        return Err(Error::shape("probe inputs have inconsistent shapes"));
    }
    if population_std(train_y) == 0.0 || population_std(test_y) == 0.0 {
        return Err(Error::validation("target has zero variance"));
    }
    let mean_x: Vec<f64> = (0..d).map(|c| (0..n).map(|r| train_x.get(r, c)).sum::<f64>() / n as f64).collect();
    let mean_y = train_y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |r, c| train_x.get(r, c) - mean_x[c]);
    let yc = DVector::from_iterator(n, train_y.iter().map(|y| y - mean_y));
    let mut xtx = xc.transpose() * &xc;
    for i in 0..d {
        xtx[(i, i)] += PROBE_RIDGE;
    }
    let xty = xc.transpose() * yc;
    let coef = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .or_else(|| xtx.lu().solve(&xty))
        .ok_or_else(|| Error::validation("probe normal equations are singular"))?;
    let intercept = mean_y - (0..d).map(|c| coef[c] * mean_x[c]).sum::<f64>();
    let pred: Vec<f64> = (0..test_x.rows()).map(|r| intercept + (0..d).map(|c| coef[c] * test_x.get(r, c)).sum::<f64>()).collect();
    Ok(ProbeResult { r2: r_squared(&pred, test_y), intercept, coefficients: coef.iter().copied().collect() })
}

pub fn r_squared(pred: &[f64], y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = pred.iter().zip(y).map(|(p, t)| (t - p).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|t| (t - m).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityHeatmap {
    pub grid: Mat,
    pub diag_score: f64,
}

/// `grid[k][t] = cos(le_k, lc_t)`; score = mean diagonal − mean off-diagonal.
pub fn similarity_heatmap(le: &Mat, lc: &Mat) -> Result<SimilarityHeatmap> {
    if le.shape() != lc.shape() || le.rows() == 0 {
        return Err(Error::shape(format!("local embeddings {:?} and {:?} must match", le.shape(), lc.shape())));
    }
    let t = le.rows();
    let mut grid = Mat::zeros(t, t);
    for k in 0..t {
        for j in 0..t {
            grid.set(k, j, cosine(le.row(k), lc.row(j))?.clamp(-1.0, 1.0));
        }
    }
    Ok(SimilarityHeatmap { diag_score: diag_score(&grid), grid })
}

pub fn diag_score(grid: &Mat) -> f64 {
    let t = grid.rows();
    let diag = (0..t).map(|i| grid.get(i, i)).sum::<f64>() / t as f64;
    if t < 2 {
        return diag;
    }
    let off = (grid.sum() - diag * t as f64) / (t * t - t) as f64;
    diag - off
}

/// 8-bit binary graymap with cosine −1 → 0 and +1 → 255.
pub fn pgm_bytes(grid: &Mat) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    out.extend(grid.data().iter().map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    out
}

pub fn grid_csv(grid: &Mat) -> String {
    let mut s = String::new();
    for r in 0..grid.rows() {
        let row: Vec<String> = grid.row(r).iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn retrieval_csv(r: &RetrievalReport) -> String {
    let ks: Vec<usize> = r.phenotypes.values().next().map(|p| p.precision_at.keys().copied().collect()).unwrap_or_default();
    let mut s = String::from("phenotype");
    ks.iter().for_each(|k| s.push_str(&format!(",P@{k}")));
    s.push_str(",MnR,MdR");
    ks.iter().for_each(|k| s.push_str(&format!(",random_P@{k}")));
    s.push('\n');
    for (name, p) in &r.phenotypes {
        s.push_str(name);
        p.precision_at.values().for_each(|v| s.push_str(&format!(",{v}")));
        s.push_str(&format!(",{},{}", p.mean_rank, p.median_rank));
        p.random_precision_at.values().for_each(|v| s.push_str(&format!(",{v}")));
        s.push('\n');
    }
    s
}

pub fn regression_csv(r: &RegressionReport) -> String {
    let mut s = String::from("phenotype,r2\n");
    for (name, p) in &r.phenotypes {
        s.push_str(&format!("{name},{}\n", p.r2));
    }
    s
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}
