//! Patch extraction, linear patch embedding, positional tables and masking.
//!
//! ECG tokens are ordered lead-major (`lead * steps + step`); clip tokens are
//! ordered temporal-major (`temporal * spatial + spatial_index`), with
//! spatial patches in raster order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::signal::{ImageClip, MultiLeadSignal};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub ecg_patch_pt: usize,
    /// `[t, p, p]`: frames per temporal token and spatial patch side.
    pub cmr_patch: [usize; 3],
    pub embed_dim: usize,
}

impl PatchConfig {
    pub fn ecg_patch_dim(&self) -> usize {
        self.ecg_patch_pt
    }

    pub fn cmr_patch_dim(&self) -> usize {
        self.cmr_patch.iter().product()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    Ecg { leads: usize, steps: usize },
    Cmr { temporal: usize, spatial: usize },
}

impl Layout {
    pub fn n_tokens(&self) -> usize {
        let (a, b) = self.dims();
        a * b
    }

    /// `(leads, steps)` or `(temporal, spatial)`.
    pub fn dims(&self) -> (usize, usize) {
        match *self {
            Layout::Ecg { leads, steps } => (leads, steps),
            Layout::Cmr { temporal, spatial } => (temporal, spatial),
        }
    }

    pub fn coords(&self, token: usize) -> (usize, usize) {
        let (_, b) = self.dims();
        (token / b, token % b)
    }

    pub fn index(&self, a: usize, b: usize) -> usize {
        let (na, nb) = self.dims();
        assert!(a < na && b < nb, "coordinate ({a}, {b}) outside layout");
        a * nb + b
    }

    /// Per-token row indices into the two factorized positional tables.
    /// ECG: (time, lead). Clip: (temporal, spatial).
    pub fn table_indices(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.n_tokens();
        match *self {
            Layout::Ecg { steps, .. } => ((0..n).map(|i| i % steps).collect(), (0..n).map(|i| i / steps).collect()),
            Layout::Cmr { spatial, .. } => ((0..n).map(|i| i / spatial).collect(), (0..n).map(|i| i % spatial).collect()),
        }
    }

    /// Row counts of the two factorized tables, in `table_indices` order.
    pub fn table_sizes(&self) -> (usize, usize) {
        match *self {
            Layout::Ecg { leads, steps } => (steps, leads),
            Layout::Cmr { temporal, spatial } => (temporal, spatial),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Mat,
    pub layout: Layout,
}

/// Raw patches, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub data: Mat,
    pub layout: Layout,
}

pub fn ecg_patches(sig: &MultiLeadSignal, p_t: usize) -> Result<Patches> {
    let n = sig.len();
    if p_t == 0 || n % p_t != 0 {
        return Err(Error::shape(format!("signal length {n} is not divisible by patch length {p_t}")));
    }
    let steps = n / p_t;
    let leads = sig.n_leads();
    let mut data = Vec::with_capacity(leads * n);
    for l in 0..leads {
        data.extend_from_slice(sig.lead(l));
    }
    Ok(Patches { data: Mat::from_vec(leads * steps, p_t, data), layout: Layout::Ecg { leads, steps } })
}

pub fn cmr_patches(clip: &ImageClip, patch: [usize; 3]) -> Result<Patches> {
    let [t, p, q] = patch;
    let (f, h, w) = (clip.n_frames(), clip.height(), clip.width());
    if t == 0 || p == 0 || q == 0 || f % t != 0 || h % p != 0 || w % q != 0 {
        return Err(Error::shape(format!("clip {f}x{h}x{w} is not divisible by patch {t}x{p}x{q}")));
    }
    let (gy, gx) = (h / p, w / q);
    let temporal = f / t;
    let spatial = gy * gx;
    let dim = t * p * q;
    let mut data = Vec::with_capacity(temporal * spatial * dim);
    for tt in 0..temporal {
        for sy in 0..gy {
            for sx in 0..gx {
                for df in 0..t {
                    for dy in 0..p {
                        for dx in 0..q {
                            data.push(clip.at(tt * t + df, sy * p + dy, sx * q + dx));
                        }
                    }
                }
            }
        }
    }
    Ok(Patches { data: Mat::from_vec(temporal * spatial, dim, data), layout: Layout::Cmr { temporal, spatial } })
}

/// Linear patch embedding: a non-overlapping convolution with stride equal to
/// its kernel, shared across leads.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedder {
    /// `patch_dim × d`
    pub weight: Mat,
    /// `1 × d`
    pub bias: Mat,
}

impl Embedder {
    pub fn apply(&self, patches: &Patches) -> Result<TokenGrid> {
        if patches.data.cols() != self.weight.rows() || self.bias.cols() != self.weight.cols() {
            return Err(Error::shape(format!(
                "patch dim {} does not match embedder {}x{}",
                patches.data.cols(),
                self.weight.rows(),
                self.weight.cols()
            )));
        }
        let mut tokens = patches.data.matmul(&self.weight);
        for r in 0..tokens.rows() {
            tokens.row_mut(r).iter_mut().zip(self.bias.data()).for_each(|(v, b)| *v += b);
        }
        Ok(TokenGrid { tokens, layout: patches.layout })
    }
}

pub fn tokenize_ecg(sig: &MultiLeadSignal, cfg: &PatchConfig, weights: &Embedder) -> Result<TokenGrid> {
    weights.apply(&ecg_patches(sig, cfg.ecg_patch_pt)?)
}

pub fn tokenize_cmr(clip: &ImageClip, cfg: &PatchConfig, weights: &Embedder) -> Result<TokenGrid> {
    weights.apply(&cmr_patches(clip, cfg.cmr_patch)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosMode {
    Factorized,
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PosTables {
    /// Tables indexed as in [`Layout::table_indices`].
    Factorized(Mat, Mat),
    Flat(Mat),
}

impl PosTables {
    pub fn zeros(layout: Layout, d: usize, mode: PosMode) -> Self {
        match mode {
            PosMode::Factorized => {
                let (a, b) = layout.table_sizes();
                PosTables::Factorized(Mat::zeros(a, d), Mat::zeros(b, d))
            }
            PosMode::Flat => PosTables::Flat(Mat::zeros(layout.n_tokens(), d)),
        }
    }

    fn check(&self, layout: Layout, d: usize) -> Result<()> {
        let ok = match self {
            PosTables::Factorized(a, b) => {
                let (na, nb) = layout.table_sizes();
                a.shape() == (na, d) && b.shape() == (nb, d)
            }
            PosTables::Flat(t) => t.shape() == (layout.n_tokens(), d),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::shape("positional tables do not match the token layout"))
        }
    }

    /// Positional component for every token, `n_tokens × d`.
    pub fn expand(&self, layout: Layout) -> Mat {
        match self {
            PosTables::Factorized(a, b) => {
                let (ia, ib) = layout.table_indices();
                Mat::from_fn(layout.n_tokens(), a.cols(), |r, c| a.get(ia[r], c) + b.get(ib[r], c))
            }
            PosTables::Flat(t) => t.clone(),
        }
    }
}

pub fn add_positional(grid: &TokenGrid, tables: &PosTables) -> Result<TokenGrid> {
    tables.check(grid.layout, grid.tokens.cols())?;
    let mut tokens = grid.tokens.clone();
    tokens.add_assign(&tables.expand(grid.layout));
    Ok(TokenGrid { tokens, layout: grid.layout })
}

/// Graph form of the positional tables.
#[derive(Clone, Copy, Debug)]
pub enum PosVars {
    Factorized(Var, Var),
    Flat(Var),
}

/// `patches · W + b + pos`, all tokens, on the graph.
pub fn embed_on_graph(g: &mut Graph, patches: Var, weight: Var, bias: Var, pos: PosVars, layout: Layout) -> Var {
    let x = g.matmul(patches, weight);
    let x = g.add_row(x, bias);
    let p = positional_on_graph(g, pos, layout);
    g.add(x, p)
}

pub fn positional_on_graph(g: &mut Graph, pos: PosVars, layout: Layout) -> Var {
    match pos {
        PosVars::Factorized(a, b) => {
            let (ia, ib) = layout.table_indices();
            let pa = g.gather_rows(a, &ia);
            let pb = g.gather_rows(b, &ib);
            g.add(pa, pb)
        }
        PosVars::Flat(t) => t,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

impl MaskPlan {
    pub fn n_tokens(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// Masks `round(ratio · n_tokens)` tokens chosen uniformly without replacement.
pub fn make_mask(n_tokens: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::validation(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let k = (ratio * n_tokens as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, n_tokens, k).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n_tokens];
    masked.iter().for_each(|&i| is_masked[i] = true);
    let visible = (0..n_tokens).filter(|&i| !is_masked[i]).collect();
    Ok(MaskPlan { visible, masked, ratio, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_signal(leads: usize, n: usize) -> MultiLeadSignal {
        let samples = (0..leads).map(|l| (0..n).map(|i| (l * 1000 + i) as f64).collect()).collect();
        let names = (0..leads).map(|l| format!("L{l}")).collect();
        MultiLeadSignal::new(samples, 100.0, names).unwrap()
    }

    #[test]
    fn full_scale_ecg_token_count() {
        let patches = ecg_patches(&ramp_signal(12, 2500), 50).unwrap();
        assert_eq!(patches.layout.n_tokens(), 600);
        assert_eq!(patches.layout, Layout::Ecg { leads: 12, steps: 50 });
    }

    #[test]
    fn identity_embedder_exposes_raw_samples() {
        let sig = ramp_signal(3, 400);
        let cfg = PatchConfig { ecg_patch_pt: 50, cmr_patch: [2, 12, 12], embed_dim: 50 };
        let emb = Embedder { weight: Mat::identity(50), bias: Mat::zeros(1, 50) };
        let grid = tokenize_ecg(&sig, &cfg, &emb).unwrap();
        for tok in 0..grid.layout.n_tokens() {
            let (lead, j) = grid.layout.coords(tok);
            assert_eq!(grid.tokens.row(tok), &sig.lead(lead)[j * 50..(j + 1) * 50]);
        }
    }

    #[test]
    fn indivisible_shapes_are_rejected() {
        assert!(ecg_patches(&ramp_signal(1, 410), 50).is_err());
        let clip = ImageClip::new(vec![0.0; 3 * 24 * 24], 3, 24, 24, 0.1).unwrap();
        assert!(cmr_patches(&clip, [2, 12, 12]).is_err());
    }

    #[test]
    fn clip_token_counts() {
        let clip = ImageClip::new(vec![0.0; 26 * 24 * 24], 26, 24, 24, 0.1).unwrap();
        assert_eq!(cmr_patches(&clip, [2, 12, 12]).unwrap().layout, Layout::Cmr { temporal: 13, spatial: 4 });
        let big = ImageClip::new(vec![0.0; 50 * 84 * 84], 50, 84, 84, 0.1).unwrap();
        assert_eq!(cmr_patches(&big, [2, 12, 12]).unwrap().layout, Layout::Cmr { temporal: 25, spatial: 49 });
    }

    #[test]
    fn clip_patch_contents() {
        let (f, h, w) = (4, 6, 6);
        let data = (0..f * h * w).map(|i| i as f64 / (f * h * w) as f64).collect();
        let clip = ImageClip::new(data, f, h, w, 0.1).unwrap();
        let p = cmr_patches(&clip, [2, 3, 3]).unwrap();
        let layout = p.layout;
        let (gy, gx) = (2, 2);
        for tok in 0..layout.n_tokens() {
            let (tt, sp) = layout.coords(tok);
            let (sy, sx) = (sp / gx, sp % gx);
            assert!(sy < gy);
            let mut k = 0;
            for df in 0..2 {
                for dy in 0..3 {
                    for dx in 0..3 {
                        assert_eq!(p.data.get(tok, k), clip.at(tt * 2 + df, sy * 3 + dy, sx * 3 + dx));
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn zero_clip_zero_bias_gives_zero_tokens() {
        let clip = ImageClip::new(vec![0.0; 26 * 24 * 24], 26, 24, 24, 0.1).unwrap();
        let cfg = PatchConfig { ecg_patch_pt: 50, cmr_patch: [2, 12, 12], embed_dim: 8 };
        let emb = Embedder { weight: Mat::filled(288, 8, 0.3), bias: Mat::zeros(1, 8) };
        let grid = tokenize_cmr(&clip, &cfg, &emb).unwrap();
        assert!(grid.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn positional_tables() {
        let layout = Layout::Ecg { leads: 2, steps: 3 };
        let grid = TokenGrid { tokens: Mat::from_fn(6, 4, |r, c| (r * 4 + c) as f64), layout };
        let zero = PosTables::zeros(layout, 4, PosMode::Factorized);
        assert_eq!(add_positional(&grid, &zero).unwrap(), grid);

        let time = Mat::from_fn(3, 4, |r, c| 10.0 * r as f64 + c as f64);
        let lead = Mat::from_fn(2, 4, |r, _| 100.0 * r as f64);
        let out = add_positional(&grid, &PosTables::Factorized(time.clone(), lead)).unwrap();
        // Tokens 1 (lead 0) and 4 (lead 1) share time index 1.
        let comp = |t: usize| -> Vec<f64> {
            out.tokens.row(t).iter().zip(grid.tokens.row(t)).map(|(a, b)| a - b).collect()
        };
        let (c1, c4) = (comp(1), comp(4));
        for k in 0..4 {
            assert_eq!(c4[k] - 100.0, c1[k]);
            assert_eq!(c1[k], time.get(1, k));
        }
        assert!(add_positional(&grid, &PosTables::zeros(Layout::Ecg { leads: 3, steps: 2 }, 4, PosMode::Flat)).is_ok());
        assert!(add_positional(&grid, &PosTables::Factorized(Mat::zeros(2, 4), Mat::zeros(2, 4))).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = make_mask(10, 0.0, 1).unwrap();
        assert!(m.masked.is_empty());
        assert_eq!(m.visible, (0..10).collect::<Vec<_>>());
        let m = make_mask(600, 0.75, 5).unwrap();
        assert_eq!((m.masked.len(), m.visible.len()), (450, 150));
        assert_eq!(make_mask(600, 0.75, 5).unwrap(), m);
        assert!(make_mask(10, 1.5, 0).is_err());
    }

    proptest! {
        #[test]
        fn mask_partitions_tokens(n in 0usize..300, ratio in 0.0f64..=1.0, seed in any::<u64>()) {
            let m = make_mask(n, ratio, seed).unwrap();
            prop_assert_eq!(m.masked.len(), (ratio * n as f64).round() as usize);
            let mut all: Vec<usize> = m.visible.iter().chain(&m.masked).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(m.visible.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.masked.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn layout_index_maps_are_bijective(a in 1usize..8, b in 1usize..8, ecg in any::<bool>()) {
            let layout = if ecg { Layout::Ecg { leads: a, steps: b } } else { Layout::Cmr { temporal: a, spatial: b } };
            for tok in 0..layout.n_tokens() {
                let (x, y) = layout.coords(tok);
                prop_assert_eq!(layout.index(x, y), tok);
            }
        }

        #[test]
        fn swapping_leads_swaps_token_rows(seed in any::<u64>(), i in 0usize..3, j in 0usize..3) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let leads: Vec<Vec<f64>> = (0..3).map(|_| (0..200).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let names: Vec<String> = (0..3).map(|l| format!("L{l}")).collect();
            let sig = MultiLeadSignal::new(leads.clone(), 100.0, names.clone()).unwrap();
            let mut swapped = leads;
            swapped.swap(i, j);
            let sig2 = MultiLeadSignal::new(swapped, 100.0, names).unwrap();
            let cfg = PatchConfig { ecg_patch_pt: 20, cmr_patch: [2, 2, 2], embed_dim: 5 };
            let emb = Embedder {
                weight: Mat::from_fn(20, 5, |_, _| rng.random_range(-1.0..1.0)),
                bias: Mat::from_fn(1, 5, |_, _| rng.random_range(-1.0..1.0)),
            };
            let (a, b) = (tokenize_ecg(&sig, &cfg, &emb).unwrap(), tokenize_ecg(&sig2, &cfg, &emb).unwrap());
            let lay = a.layout;
            for lead in 0..3 {
                let other = if lead == i { j } else if lead == j { i } else { lead };
                for s in 0..10 {
                    prop_assert_eq!(a.tokens.row(lay.index(lead, s)), b.tokens.row(lay.index(other, s)));
                }
            }
        }
    }
}
