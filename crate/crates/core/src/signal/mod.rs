//! Preprocessing and augmentation for multi-lead signals and image clips.

mod augment;
mod rpeaks;
mod wavelet;

pub use augment::{augment_clip, augment_signal, augment_signal_with_offset, AugConfig, AugmentedSignal, ClipAugConfig};
pub use rpeaks::{detect_r_peaks, RPeakConfig};
pub use wavelet::{wavelet_denoise, DB2, WaveletFilter};

use crate::error::{Error, Result};

/// L leads × N samples at a fixed sampling rate.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLeadSignal {
    samples: Vec<Vec<f64>>,
    rate_hz: f64,
    lead_names: Vec<String>,
}

impl MultiLeadSignal {
    /// Requires equal-length finite leads, one name per lead, and at least
    /// two seconds of signal.
    pub fn new(samples: Vec<Vec<f64>>, rate_hz: f64, lead_names: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::validation("signal has no leads"));
        }
        if !(rate_hz.is_finite() && rate_hz > 0.0) {
            return Err(Error::validation(format!("sampling rate must be positive, got {rate_hz}")));
        }
        if lead_names.len() != samples.len() {
            return Err(Error::validation(format!(
                "{} lead names for {} leads",
                lead_names.len(),
                samples.len()
            )));
        }
        let n = samples[0].len();
        if samples.iter().any(|l| l.len() != n) {
            return Err(Error::validation("leads have different lengths"));
        }
        if (n as f64) < 2.0 * rate_hz {
            return Err(Error::Length(format!("{n} samples is shorter than 2 s at {rate_hz} Hz")));
        }
        if samples.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::validation("signal contains non-finite samples"));
        }
        Ok(MultiLeadSignal { samples, rate_hz, lead_names })
    }

    pub fn n_leads(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn lead_names(&self) -> &[String] {
        &self.lead_names
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.samples[i]
    }

    pub fn leads(&self) -> &[Vec<f64>] {
        &self.samples
    }

    pub fn lead_index(&self, name: &str) -> Option<usize> {
        self.lead_names.iter().position(|n| n == name)
    }

    /// Same shape and metadata, new sample values. Re-validates.
    pub fn with_samples(&self, samples: Vec<Vec<f64>>) -> Result<Self> {
        MultiLeadSignal::new(samples, self.rate_hz, self.lead_names.clone())
    }

    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::validation(format!(
                "crop [{start}, {}) exceeds signal length {}",
                start + len,
                self.len()
            )));
        }
        self.with_samples(self.samples.iter().map(|l| l[start..start + len].to_vec()).collect())
    }
}

/// F frames of H × W intensities, stored frame-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageClip {
    frames: Vec<f64>,
    n_frames: usize,
    height: usize,
    width: usize,
    frame_period_s: f64,
}

impl ImageClip {
    pub fn new(frames: Vec<f64>, n_frames: usize, height: usize, width: usize, frame_period_s: f64) -> Result<Self> {
        if n_frames < 2 {
            return Err(Error::validation(format!("clip needs at least 2 frames, got {n_frames}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::validation("clip has an empty frame"));
        }
        if frames.len() != n_frames * height * width {
            return Err(Error::validation(format!(
                "clip buffer has {} values, expected {n_frames}x{height}x{width}",
                frames.len()
            )));
        }
        if !(frame_period_s.is_finite() && frame_period_s > 0.0) {
            return Err(Error::validation("frame period must be positive"));
        }
        if frames.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("clip contains non-finite values"));
        }
        Ok(ImageClip { frames, n_frames, height, width, frame_period_s })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn frame_period_s(&self) -> f64 {
        self.frame_period_s
    }

    pub fn data(&self) -> &[f64] {
        &self.frames
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let s = self.height * self.width;
        &self.frames[f * s..(f + 1) * s]
    }

    #[inline]
    pub fn at(&self, f: usize, y: usize, x: usize) -> f64 {
        self.frames[(f * self.height + y) * self.width + x]
    }

    pub fn in_unit_range(&self) -> bool {
        self.frames.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub(crate) fn with_data(&self, frames: Vec<f64>, n_frames: usize) -> Result<Self> {
        ImageClip::new(frames, n_frames, self.height, self.width, self.frame_period_s)
    }
}

/// Detected R-peak sample indices on one lead.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RPeakList {
    indices: Vec<usize>,
    lead_used: String,
}

impl RPeakList {
    /// Requires strictly increasing indices below `n` with gaps of at least `min_gap`.
    pub fn new(indices: Vec<usize>, lead_used: impl Into<String>, n: usize, min_gap: usize) -> Result<Self> {
        if indices.iter().any(|&i| i >= n) {
            return Err(Error::validation("R-peak index outside the signal"));
        }
        if indices.windows(2).any(|w| w[1] <= w[0] || w[1] - w[0] < min_gap) {
            return Err(Error::validation("R-peaks must be strictly increasing and respect the refractory gap"));
        }
        Ok(RPeakList { indices, lead_used: lead_used.into() })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn lead_used(&self) -> &str {
        &self.lead_used
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Peaks inside `[start, start + len)`, re-indexed relative to `start`.
    pub fn window(&self, start: usize, len: usize) -> Vec<usize> {
        self.indices.iter().filter(|&&i| i >= start && i < start + len).map(|&i| i - start).collect()
    }
}

/// Per-lead z-score with the population standard deviation.
pub fn zscore_normalize(sig: &MultiLeadSignal) -> Result<MultiLeadSignal> {
    let mut out = Vec::with_capacity(sig.n_leads());
    for (li, lead) in sig.leads().iter().enumerate() {
        let n = lead.len() as f64;
        let mean = lead.iter().sum::<f64>() / n;
        let var = lead.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if std <= 1e-12 * mean.abs().max(1.0) {
            return Err(Error::DegenerateVariance { lead: li });
        }
        out.push(lead.iter().map(|x| (x - mean) / std).collect());
    }
    sig.with_samples(out)
}

/// Maps the clip's global [min, max] onto [0, 1].
pub fn minmax_normalize(clip: &ImageClip) -> Result<ImageClip> {
    let (lo, hi) = clip.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range <= 1e-12 * hi.abs().max(1.0) {
        return Err(Error::DegenerateRange);
    }
    let data = clip.data().iter().map(|x| ((x - lo) / range).clamp(0.0, 1.0)).collect();
    clip.with_data(data, clip.n_frames())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_lead(x: Vec<f64>) -> MultiLeadSignal {
        MultiLeadSignal::new(vec![x], 1.0, vec!["II".into()]).unwrap()
    }

    #[test]
    fn zscore_examples() {
        let z = zscore_normalize(&one_lead(vec![1.0, 2.0, 3.0])).unwrap();
        let l = z.lead(0);
        let mean = l.iter().sum::<f64>() / 3.0;
        let std = (l.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-9 && (std - 1.0).abs() < 1e-9);

        let z = zscore_normalize(&one_lead(vec![-5.0, -5.0, 5.0, 5.0])).unwrap();
        for (a, b) in z.lead(0).iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zscore_rejects_constant_lead() {
        let sig = MultiLeadSignal::new(vec![vec![1.0, 2.0, 3.0], vec![0.3; 3]], 1.0, vec!["I".into(), "II".into()]).unwrap();
        assert!(matches!(zscore_normalize(&sig), Err(Error::DegenerateVariance { lead: 1 })));
    }

    #[test]
    fn minmax_examples() {
        let clip = ImageClip::new(vec![2.0, 4.0, 4.0, 2.0], 2, 1, 2, 0.1).unwrap();
        assert_eq!(minmax_normalize(&clip).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        let clip = ImageClip::new(vec![1.0, 2.0, 3.0, 1.0], 2, 2, 1, 0.1).unwrap();
        assert_eq!(minmax_normalize(&clip).unwrap().data(), &[0.0, 0.5, 1.0, 0.0]);
        let clip = ImageClip::new(vec![0.0, 0.25, 1.0, 0.7], 2, 1, 2, 0.1).unwrap();
        assert_eq!(minmax_normalize(&clip).unwrap().data(), clip.data());
        let flat = ImageClip::new(vec![0.5; 4], 2, 1, 2, 0.1).unwrap();
        assert!(matches!(minmax_normalize(&flat), Err(Error::DegenerateRange)));
    }

    #[test]
    fn signal_constructor_validates() {
        assert!(MultiLeadSignal::new(vec![vec![0.0; 3]], 2.0, vec!["II".into()]).is_err());
        assert!(MultiLeadSignal::new(vec![vec![f64::NAN; 4]], 1.0, vec!["II".into()]).is_err());
        assert!(MultiLeadSignal::new(vec![vec![0.0; 4], vec![0.0; 5]], 1.0, vec!["I".into(), "II".into()]).is_err());
        assert!(ImageClip::new(vec![0.0; 4], 1, 2, 2, 0.1).is_err());
    }

    #[test]
    fn rpeak_list_validates_order_and_gap() {
        assert!(RPeakList::new(vec![10, 20], "II", 100, 5).is_ok());
        assert!(RPeakList::new(vec![10, 12], "II", 100, 5).is_err());
        assert!(RPeakList::new(vec![20, 10], "II", 100, 5).is_err());
        assert!(RPeakList::new(vec![10, 100], "II", 100, 5).is_err());
        let p = RPeakList::new(vec![10, 40, 70], "II", 100, 5).unwrap();
        assert_eq!(p.window(30, 40), vec![10]);
    }

    proptest! {
        #[test]
        fn normalizers_are_idempotent(
            a in prop::collection::vec(-100.0f64..100.0, 8),
            b in prop::collection::vec(-3.0f64..3.0, 8),
        ) {
            prop_assume!(a.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - a.iter().cloned().fold(f64::INFINITY, f64::min) > 1e-3);
            let sig = MultiLeadSignal::new(vec![a.clone()], 1.0, vec!["II".into()]).unwrap();
            let z1 = zscore_normalize(&sig).unwrap();
            let z2 = zscore_normalize(&z1).unwrap();
            for (x, y) in z1.lead(0).iter().zip(z2.lead(0)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let mut data = a.clone();
            data.extend(b);
            let clip = ImageClip::new(data, 2, 2, 4, 0.1).unwrap();
            let m1 = minmax_normalize(&clip).unwrap();
            let m2 = minmax_normalize(&m1).unwrap();
            for (x, y) in m1.data().iter().zip(m2.data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
