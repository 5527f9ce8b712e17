//! Multi-level orthogonal wavelet denoising.
//!
//! The filter is the 4-tap Daubechies wavelet (db2, two vanishing moments):
//!
//! ```text
//! h = [1+√3, 3+√3, 3−√3, 1−√3] / (4√2)
//! g_k = (−1)^k h_{3−k}
//! ```
//!
//! The transform is undecimated (à trous): level `j` filters with taps spaced
//! `2^j` apart and keeps every sample, so it is shift-invariant and zeroing a
//! band does not alias into the others. Each lead is extended as
//! `x ++ [x_last; pad] ++ reverse(x)` and treated as periodic. The extension is
//! continuous under wrap-around, so a linear trend produces no boundary
//! discontinuity.

use super::MultiLeadSignal;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaveletFilter {
    pub lo: [f64; 4],
    pub hi: [f64; 4],
}

const S3: f64 = 1.732_050_807_568_877_2;
const NORM: f64 = 4.0 * std::f64::consts::SQRT_2;

/// Daubechies-4 (db2) analysis filters.
pub const DB2: WaveletFilter = {
    let lo = [(1.0 + S3) / NORM, (3.0 + S3) / NORM, (3.0 - S3) / NORM, (1.0 - S3) / NORM];
    WaveletFilter { lo, hi: [lo[3], -lo[2], lo[1], -lo[0]] }
};

impl WaveletFilter {
    /// One periodized decimated analysis step; `x.len()` must be even.
    pub fn analyze(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = x.len();
        debug_assert!(m % 2 == 0);
        let half = m / 2;
        let mut a = vec![0.0; half];
        let mut d = vec![0.0; half];
        for i in 0..half {
            for k in 0..4 {
                let v = x[(2 * i + k) % m];
                a[i] += self.lo[k] * v;
                d[i] += self.hi[k] * v;
            }
        }
        (a, d)
    }

    /// Inverse of [`WaveletFilter::analyze`].
    pub fn synthesize(&self, a: &[f64], d: &[f64]) -> Vec<f64> {
        let m = 2 * a.len();
        let mut x = vec![0.0; m];
        for i in 0..a.len() {
            for k in 0..4 {
                x[(2 * i + k) % m] += a[i] * self.lo[k] + d[i] * self.hi[k];
            }
        }
        x
    }

    /// Undecimated analysis at tap spacing `step`, periodic boundary.
    pub fn analyze_stationary(&self, x: &[f64], step: usize) -> (Vec<f64>, Vec<f64>) {
        let m = x.len();
        let mut a = vec![0.0; m];
        let mut d = vec![0.0; m];
        for i in 0..m {
            for k in 0..4 {
                let v = x[(i + k * step) % m];
                a[i] += self.lo[k] * v;
                d[i] += self.hi[k] * v;
            }
        }
        (a, d)
    }

    /// Inverse of [`WaveletFilter::analyze_stationary`] (the average of the
    /// two decimation phases).
    pub fn synthesize_stationary(&self, a: &[f64], d: &[f64], step: usize) -> Vec<f64> {
        let m = a.len();
        let mut x = vec![0.0; m];
        for i in 0..m {
            for k in 0..4 {
                x[(i + k * step) % m] += 0.5 * (a[i] * self.lo[k] + d[i] * self.hi[k]);
            }
        }
        x
    }
}

pub(crate) fn symmetric_extend(x: &[f64], levels: u32) -> Vec<f64> {
    let block = 1usize << levels;
    let n = x.len();
    let pad = (block - (2 * n) % block) % block;
    let last = x[n - 1];
    let mut e = Vec::with_capacity(2 * n + pad);
    e.extend_from_slice(x);
    e.extend(std::iter::repeat_n(last, pad));
    e.extend(x.iter().rev());
    e
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
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

fn denoise_lead(x: &[f64], levels: u32, f: &WaveletFilter) -> Vec<f64> {
    let n = x.len();
    let mut approx = symmetric_extend(x, levels);
    let mut details = Vec::with_capacity(levels as usize);
    for j in 0..levels {
        let (a, d) = f.analyze_stationary(&approx, 1 << j);
        approx = a;
        details.push(d);
    }
    // Baseline wander lives in the coarsest approximation band.
    approx.iter_mut().for_each(|v| *v = 0.0);
    // Universal threshold on the finest detail band.
    let sigma = median(details[0].iter().map(|v| v.abs()).collect()) / 0.6745;
    let thr = sigma * (2.0 * (n as f64).ln()).sqrt();
    details[0].iter_mut().for_each(|v| *v = soft_threshold(*v, thr));
    for (j, d) in details.iter().enumerate().rev() {
        approx = f.synthesize_stationary(&approx, d, 1 << j);
    }
    approx.truncate(n);
    approx
}

/// Removes baseline wander and high-frequency noise from every lead.
pub fn wavelet_denoise(sig: &MultiLeadSignal, levels: u32) -> Result<MultiLeadSignal> {
    if levels == 0 {
        return Err(Error::validation("wavelet levels must be at least 1"));
    }
    if levels >= usize::BITS || sig.len() < (1usize << levels) {
        return Err(Error::Length(format!("{} samples is shorter than 2^{levels}", sig.len())));
    }
    if sig.leads().iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite sample"));
    }
    let out = sig.leads().iter().map(|l| denoise_lead(l, levels, &DB2)).collect();
    sig.with_samples(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sig(x: Vec<f64>, rate: f64) -> MultiLeadSignal {
        MultiLeadSignal::new(vec![x], rate, vec!["II".into()]).unwrap()
    }

    fn rms(v: &[f64]) -> f64 {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    /// Reference transform: each level as an explicit dense matrix
    /// `[H; G]` of circularly shifted, dilated filters. Its left inverse is
    /// `[H; G]ᵀ / 2`.
    fn oracle_remove_approx(x: &[f64], levels: u32) -> Vec<f64> {
        let h = [(1.0 + S3) / NORM, (3.0 + S3) / NORM, (3.0 - S3) / NORM, (1.0 - S3) / NORM];
        let g = [h[3], -h[2], h[1], -h[0]];
        let e = symmetric_extend(x, levels);
        let m = e.len();
        let level_matrix = |step: usize| {
            let mut w = vec![vec![0.0; m]; 2 * m];
            for i in 0..m {
                for k in 0..4 {
                    w[i][(i + k * step) % m] += h[k];
                    w[m + i][(i + k * step) % m] += g[k];
                }
            }
            w
        };
        let mut a = e;
        let mut details = Vec::new();
        for j in 0..levels {
            let w = level_matrix(1 << j);
            let y: Vec<f64> = w.iter().map(|row| row.iter().zip(&a).map(|(p, q)| p * q).sum()).collect();
            details.push(y[m..].to_vec());
            a = y[..m].to_vec();
        }
        a.iter_mut().for_each(|v| *v = 0.0);
        for j in (0..levels).rev() {
            let w = level_matrix(1 << j);
            let y: Vec<f64> = a.iter().chain(details[j as usize].iter()).cloned().collect();
            a = (0..m).map(|c| 0.5 * (0..2 * m).map(|r| w[r][c] * y[r]).sum::<f64>()).collect();
        }
        a.truncate(x.len());
        a
    }

    #[test]
    fn stationary_round_trip() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        for step in [1, 2, 8] {
            let (a, d) = DB2.analyze_stationary(&x, step);
            let y = DB2.synthesize_stationary(&a, &d, step);
            for (p, q) in x.iter().zip(&y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn filters_are_orthonormal() {
        let f = DB2;
        let dot = |a: &[f64; 4], b: &[f64; 4]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!((dot(&f.lo, &f.lo) - 1.0).abs() < 1e-15);
        assert!(dot(&f.lo, &f.hi).abs() < 1e-15);
        assert!((f.lo.iter().sum::<f64>() - std::f64::consts::SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn analysis_synthesis_round_trip() {
        let x: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let (a, d) = DB2.analyze(&x);
        let y = DB2.synthesize(&a, &d);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_signal_stays_zero() {
        let out = wavelet_denoise(&sig(vec![0.0; 600], 100.0), 8).unwrap();
        assert!(out.lead(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_ramp_is_removed() {
        let n = 600;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let oracle = oracle_remove_approx(&ramp, 8);
        let oracle_ratio = rms(&oracle) / rms(&ramp);
        assert!(oracle_ratio <= 0.1, "oracle ratio {oracle_ratio}");
        let out = wavelet_denoise(&sig(ramp.clone(), 100.0), 8).unwrap();
        let ratio = rms(out.lead(0)) / rms(&ramp);
        assert!(ratio <= 0.1, "ratio {ratio}");
        // The ramp's finest detail band is ~0 away from the fold, so thresholding barely acts.
        assert!((ratio - oracle_ratio).abs() < 1e-3, "{ratio} vs {oracle_ratio}");
    }

    #[test]
    fn slow_sinusoid_under_spike_train_is_removed() {
        let rate = 500.0;
        let n = 5000;
        let clean: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                let phase = (t % 1.0) - 0.5;
                (-(phase * phase) / (2.0 * 0.012f64.powi(2))).exp()
            })
            .collect();
        let drift: Vec<f64> = (0..n).map(|i| 0.8 * (2.0 * std::f64::consts::PI * 0.05 * i as f64 / rate).sin()).collect();
        let noisy: Vec<f64> = clean.iter().zip(&drift).map(|(a, b)| a + b).collect();
        assert!(pearson(&noisy, &clean) < 0.6);
        let out = wavelet_denoise(&sig(noisy, rate), 8).unwrap();
        let r = pearson(out.lead(0), &clean);
        assert!(r >= 0.95, "correlation {r}");
    }

    #[test]
    fn rejects_short_signal() {
        let s = sig(vec![1.0; 200], 100.0);
        assert!(matches!(wavelet_denoise(&s, 8), Err(Error::Length(_))));
        assert!(wavelet_denoise(&s, 0).is_err());
    }
}
