//! R-peak detection: first difference, squaring, moving-window integration,
//! adaptive threshold, then refinement on the original lead.

use super::{MultiLeadSignal, RPeakList};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RPeakConfig {
    /// Moving-average window over the squared derivative.
    pub integration_window_s: f64,
    /// Fraction of the local envelope maximum a sample must reach.
    pub threshold_frac: f64,
    /// Width of the centred window the envelope maximum is taken over.
    pub envelope_window_s: f64,
    /// Floor on the threshold as a fraction of the global maximum, so beat-free
    /// stretches of noise do not trigger detections.
    pub global_floor_frac: f64,
    /// Half-width of the search window for the peak on the original lead.
    pub refine_window_s: f64,
    pub refractory_s: f64,
}

impl Default for RPeakConfig {
    fn default() -> Self {
        RPeakConfig {
            integration_window_s: 0.15,
            threshold_frac: 0.5,
            envelope_window_s: 2.0,
            global_floor_frac: 0.05,
            refine_window_s: 0.1,
            refractory_s: 0.25,
        }
    }
}

fn centred_mean(x: &[f64], w: usize) -> Vec<f64> {
    let n = x.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    let half = w / 2;
    let width = (2 * half + 1) as f64;
    // Zero padding past the ends: dividing by the truncated count would
    // inflate a beat sitting on the edge and mask its neighbours.
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / width
        })
        .collect()
}

fn centred_max(x: &[f64], w: usize) -> Vec<f64> {
    // Monotone deque sliding maximum over [i - half, i + half].
    let n = x.len();
    let half = w / 2;
    let mut out = vec![0.0; n];
    let mut dq: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let mut next = 0;
    for (i, o) in out.iter_mut().enumerate() {
        let hi = (i + half).min(n - 1);
        while next <= hi {
            while dq.back().is_some_and(|&b| x[b] <= x[next]) {
                dq.pop_back();
            }
            dq.push_back(next);
            next += 1;
        }
        let lo = i.saturating_sub(half);
        while dq.front().is_some_and(|&f| f < lo) {
            dq.pop_front();
        }
        *o = x[*dq.front().unwrap()];
    }
    out
}

/// Detects R-peaks on `lead`. Expects a denoised, normalized signal with
/// positive-polarity R-waves on that lead.
pub fn detect_r_peaks(sig: &MultiLeadSignal, lead: &str, cfg: &RPeakConfig) -> Result<RPeakList> {
    let li = sig.lead_index(lead).ok_or_else(|| Error::validation(format!("no lead named `{lead}`")))?;
    let x = sig.lead(li);
    let n = x.len();
    let rate = sig.rate_hz();
    let to_samples = |s: f64| ((s * rate).round() as usize).max(1);

    let mut energy = vec![0.0; n];
    for i in 0..n - 1 {
        let d = x[i + 1] - x[i];
        energy[i] = d * d;
    }
    let integrated = centred_mean(&energy, to_samples(cfg.integration_window_s));
    let envelope = centred_max(&integrated, to_samples(cfg.envelope_window_s));
    let global_max = integrated.iter().cloned().fold(0.0, f64::max);
    if global_max <= 0.0 {
        return Err(Error::SegmentationInfeasible("lead is flat".into()));
    }
    let floor = cfg.global_floor_frac * global_max;
    // Near the ends the window is partly padding, so the bar drops with it.
    let half = to_samples(cfg.integration_window_s) / 2;
    let cover = |i: usize| ((i + half + 1).min(n) - i.saturating_sub(half)) as f64 / (2 * half + 1) as f64;
    let above = |i: usize| integrated[i] >= cover(i) * (cfg.threshold_frac * envelope[i]).max(floor);

    // One candidate per supra-threshold run: its integrated maximum.
    let mut candidates = Vec::new();
    let mut i = 0;
    while i < n {
        if above(i) {
            let start = i;
            while i < n && above(i) {
                i += 1;
            }
            let best = (start..i).max_by(|&a, &b| integrated[a].total_cmp(&integrated[b]).then(b.cmp(&a))).unwrap();
            candidates.push(best);
        } else {
            i += 1;
        }
    }

    let radius = to_samples(cfg.refine_window_s);
    let mut refined: Vec<usize> = candidates
        .into_iter()
        .map(|c| {
            let lo = c.saturating_sub(radius);
            let hi = (c + radius + 1).min(n);
            (lo..hi).max_by(|&a, &b| x[a].total_cmp(&x[b]).then(b.cmp(&a))).unwrap()
        })
        // A maximum on the first or last sample belongs to a beat outside the window.
        .filter(|&p| p > 0 && p < n - 1)
        .collect();
    refined.sort_unstable();
    refined.dedup();

    let refractory = to_samples(cfg.refractory_s);
    let mut peaks: Vec<usize> = Vec::with_capacity(refined.len());
    for p in refined {
        match peaks.last_mut() {
            Some(last) if p - *last < refractory => {
                if x[p] > x[*last] {
                    *last = p;
                }
            }
            _ => peaks.push(p),
        }
    }
    if peaks.len() < 2 {
        return Err(Error::SegmentationInfeasible(format!("found {} R-peak(s), need at least 2", peaks.len())));
    }
    RPeakList::new(peaks, lead, n, refractory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{wavelet_denoise, zscore_normalize};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn spikes(n: usize, rate: f64, at: &[usize]) -> Vec<f64> {
        let s = 0.012 * rate;
        (0..n)
            .map(|i| at.iter().map(|&c| (-((i as f64 - c as f64).powi(2)) / (2.0 * s * s)).exp()).sum::<f64>())
            .collect()
    }

    fn prepared(x: Vec<f64>, rate: f64) -> MultiLeadSignal {
        let sig = MultiLeadSignal::new(vec![x.clone(), x], rate, vec!["I".into(), "II".into()]).unwrap();
        zscore_normalize(&wavelet_denoise(&sig, 8).unwrap()).unwrap()
    }

    #[test]
    fn finds_clean_gaussian_spikes() {
        let truth = [250, 750, 1250];
        let sig = prepared(spikes(1500, 500.0, &truth), 500.0);
        let peaks = detect_r_peaks(&sig, "II", &RPeakConfig::default()).unwrap();
        assert_eq!(peaks.len(), 3, "{:?}", peaks.indices());
        for (p, t) in peaks.indices().iter().zip(truth) {
            assert!((*p as i64 - t as i64).abs() <= 2, "{p} vs {t}");
        }
        assert_eq!(peaks.lead_used(), "II");
    }

    #[test]
    fn tolerates_white_noise_at_20db() {
        let truth = [250, 750, 1250];
        let clean = spikes(1500, 500.0, &truth);
        let power = clean.iter().map(|v| v * v).sum::<f64>() / clean.len() as f64;
        let noise = Normal::new(0.0, (power / 100.0).sqrt()).unwrap();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy: Vec<f64> = clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
            let peaks = detect_r_peaks(&prepared(noisy, 500.0), "II", &RPeakConfig::default()).unwrap();
            assert_eq!(peaks.len(), 3, "seed {seed}: {:?}", peaks.indices());
            for (p, t) in peaks.indices().iter().zip(truth) {
                assert!((*p as i64 - t as i64).abs() <= 5, "seed {seed}: {p} vs {t}");
            }
        }
    }

    #[test]
    fn single_spike_is_infeasible() {
        let sig = prepared(spikes(1500, 500.0, &[700]), 500.0);
        assert!(matches!(detect_r_peaks(&sig, "II", &RPeakConfig::default()), Err(Error::SegmentationInfeasible(_))));
    }

    #[test]
    fn unknown_lead_is_rejected() {
        let sig = prepared(spikes(1500, 500.0, &[250, 750]), 500.0);
        assert!(detect_r_peaks(&sig, "V9", &RPeakConfig::default()).is_err());
    }

    #[test]
    fn sliding_max_matches_brute_force() {
        let x: Vec<f64> = (0..50).map(|i| ((i * 17) % 13) as f64).collect();
        let fast = centred_max(&x, 7);
        for i in 0..x.len() {
            let lo = i.saturating_sub(3);
            let hi = (i + 4).min(x.len());
            assert_eq!(fast[i], x[lo..hi].iter().cloned().fold(f64::MIN, f64::max));
        }
    }
}
