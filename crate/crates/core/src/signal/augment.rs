//! Seeded augmentations. Every function here is a pure function of its
//! input and the seed carried in the config.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{ImageClip, MultiLeadSignal};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub crop_len: usize,
    pub jitter_std: f64,
    pub rescale_range: (f64, f64),
    pub surrogate_enabled: bool,
    /// Phases are perturbed by U(−π·s, π·s); `1.0` fully randomizes them.
    pub surrogate_phase_scale: f64,
    pub seed: u64,
}

impl AugConfig {
    /// Crop only; every other step is a no-op.
    pub fn identity(crop_len: usize) -> Self {
        AugConfig {
            crop_len,
            jitter_std: 0.0,
            rescale_range: (1.0, 1.0),
            surrogate_enabled: false,
            surrogate_phase_scale: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        AugConfig { seed, ..self.clone() }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.crop_len == 0 || self.crop_len > n {
            return Err(Error::validation(format!("crop_len {} must be in 1..={n}", self.crop_len)));
        }
        let (lo, hi) = self.rescale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::validation(format!("rescale range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return Err(Error::validation("jitter_std must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.surrogate_phase_scale) {
            return Err(Error::validation("surrogate_phase_scale must be in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSignal {
    pub signal: MultiLeadSignal,
    /// Index in the input that became sample 0 of the output.
    pub crop_start: usize,
}

/// Fourier surrogate, random crop, Gaussian jitter and rescaling, in that order.
pub fn augment_signal(sig: &MultiLeadSignal, cfg: &AugConfig) -> Result<MultiLeadSignal> {
    augment_signal_with_offset(sig, cfg).map(|a| a.signal)
}

pub fn augment_signal_with_offset(sig: &MultiLeadSignal, cfg: &AugConfig) -> Result<AugmentedSignal> {
    cfg.validate(sig.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut leads: Vec<Vec<f64>> = sig.leads().to_vec();

    if cfg.surrogate_enabled {
        let mut planner = FftPlanner::<f64>::new();
        for lead in leads.iter_mut() {
            *lead = fourier_surrogate(lead, cfg.surrogate_phase_scale, &mut rng, &mut planner);
        }
    }

    let n = sig.len();
    let crop_start = if cfg.crop_len < n { rng.random_range(0..=n - cfg.crop_len) } else { 0 };
    for lead in leads.iter_mut() {
        lead.drain(..crop_start);
        lead.truncate(cfg.crop_len);
    }

    if cfg.jitter_std > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter_std).expect("validated std");
        for v in leads.iter_mut().flatten() {
            *v += noise.sample(&mut rng);
        }
    }

    let (lo, hi) = cfg.rescale_range;
    if lo != 1.0 || hi != 1.0 {
        let factor = if lo < hi { rng.random_range(lo..hi) } else { lo };
        leads.iter_mut().flatten().for_each(|v| *v *= factor);
    }

    Ok(AugmentedSignal { signal: sig.with_samples(leads)?, crop_start })
}

fn fourier_surrogate(x: &[f64], scale: f64, rng: &mut ChaCha8Rng, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = x.len();
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    // DC and (for even n) Nyquist bins stay real; the rest keep Hermitian symmetry.
    let upper = n.div_ceil(2);
    for k in 1..upper {
        let phi = rng.random_range(-1.0..1.0) * std::f64::consts::PI * scale;
        let rot = Complex::from_polar(1.0, phi);
        buf[k] *= rot;
        buf[n - k] = buf[k].conj();
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipAugConfig {
    /// Contiguous window length; equal to the clip length disables time sampling.
    pub target_frames: usize,
    /// Area fraction range of the random resized crop; `(1, 1)` disables it.
    pub crop_scale: (f64, f64),
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub max_blur_sigma: f64,
    pub max_noise_std: f64,
    pub seed: u64,
}

impl ClipAugConfig {
    pub fn standard(target_frames: usize) -> Self {
        ClipAugConfig {
            target_frames,
            crop_scale: (0.8, 1.0),
            max_rotation_deg: 10.0,
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            max_blur_sigma: 1.0,
            max_noise_std: 0.02,
            seed: 0,
        }
    }

    pub fn disabled(target_frames: usize) -> Self {
        ClipAugConfig {
            target_frames,
            crop_scale: (1.0, 1.0),
            max_rotation_deg: 0.0,
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            max_blur_sigma: 0.0,
            max_noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        ClipAugConfig { seed, ..self.clone() }
    }

    pub fn validate(&self, n_frames: usize) -> Result<()> {
        if self.target_frames < 2 || self.target_frames > n_frames {
            return Err(Error::validation(format!(
                "target frame count {} must be in 2..={n_frames}",
                self.target_frames
            )));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::validation("crop scale must satisfy 0 < lo <= hi <= 1"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::validation("flip probability must be in [0, 1]"));
        }
        for (name, v) in [
            ("rotation", self.max_rotation_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("blur", self.max_blur_sigma),
            ("noise", self.max_noise_std),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{name} magnitude must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn bilinear(frame: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return 0.0;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = frame[y0 * w + x0] * (1.0 - fx) + frame[y0 * w + x1] * fx;
    let bot = frame[y1 * w + x0] * (1.0 - fx) + frame[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

fn gaussian_blur(frame: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ksum: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / ksum).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * frame[y * w + clampi(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clampi(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Time-window sampling, resized crop, rotation, flip, intensity jitter,
/// blur and noise, clamped to [0, 1]. Geometric steps share one bilinear
/// resampling per frame and are skipped entirely when all are disabled.
pub fn augment_clip(clip: &ImageClip, cfg: &ClipAugConfig) -> Result<ImageClip> {
    cfg.validate(clip.n_frames())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (clip.height(), clip.width());
    let f_out = cfg.target_frames;

    let start = if f_out < clip.n_frames() { rng.random_range(0..=clip.n_frames() - f_out) } else { 0 };

    let area = uniform(&mut rng, cfg.crop_scale.0, cfg.crop_scale.1);
    let side = area.sqrt();
    let crop_h = side * h as f64;
    let crop_w = side * w as f64;
    let off_y = uniform(&mut rng, 0.0, h as f64 - crop_h);
    let off_x = uniform(&mut rng, 0.0, w as f64 - crop_w);
    let angle = uniform(&mut rng, -cfg.max_rotation_deg, cfg.max_rotation_deg).to_radians();
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
    let geometric = side != 1.0 || angle != 0.0 || flip;

    let bright = uniform(&mut rng, -cfg.brightness, cfg.brightness);
    let contrast = uniform(&mut rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
    let blur = uniform(&mut rng, 0.0, cfg.max_blur_sigma);
    let noise_std = uniform(&mut rng, 0.0, cfg.max_noise_std);

    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(f_out * h * w);
    for f in start..start + f_out {
        let src = clip.frame(f);
        let mut frame: Vec<f64> = if geometric {
            let mut v = Vec::with_capacity(h * w);
            for y in 0..h {
                for x in 0..w {
                    let xf = if flip { (w - 1 - x) as f64 } else { x as f64 };
                    // Inverse rotation about the centre, then into crop coordinates.
                    let (dy, dx) = (y as f64 - cy, xf - cx);
                    let ry = cos * dy + sin * dx + cy;
                    let rx = -sin * dy + cos * dx + cx;
                    let sy = off_y + (ry + 0.5) * crop_h / h as f64 - 0.5;
                    let sx = off_x + (rx + 0.5) * crop_w / w as f64 - 0.5;
                    v.push(bilinear(src, h, w, sy, sx));
                }
            }
            v
        } else {
            src.to_vec()
        };

        if bright != 0.0 || contrast != 1.0 {
            let mean = frame.iter().sum::<f64>() / frame.len() as f64;
            frame.iter_mut().for_each(|v| *v = (*v - mean) * contrast + mean + bright);
        }
        if blur > 1e-3 {
            frame = gaussian_blur(&frame, h, w, blur);
        }
        out.extend(frame);
    }
    if noise_std > 0.0 {
        let noise = Normal::new(0.0, noise_std).expect("validated std");
        out.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    clip.with_data(out, f_out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn test_signal(n: usize) -> MultiLeadSignal {
        let l0: Vec<f64> = (0..n).map(|i| (i as f64 * 0.07).sin() + 0.3 * (i as f64 * 0.31).cos()).collect();
        let l1: Vec<f64> = (0..n).map(|i| ((i * 13) % 17) as f64 / 17.0).collect();
        MultiLeadSignal::new(vec![l0, l1], 100.0, vec!["I".into(), "II".into()]).unwrap()
    }

    fn magnitudes(x: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(x.len()).process(&mut buf);
        buf.iter().map(|c| c.norm()).collect()
    }

    fn test_clip() -> ImageClip {
        let (f, h, w) = (4, 12, 12);
        let data = (0..f * h * w).map(|i| ((i * 7) % 23) as f64 / 22.0).collect();
        ImageClip::new(data, f, h, w, 0.05).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let s = test_signal(300);
        let out = augment_signal(&s, &AugConfig::identity(300)).unwrap();
        assert_eq!(out, s);
        let c = test_clip();
        assert_eq!(augment_clip(&c, &ClipAugConfig::disabled(4).with_seed(9)).unwrap(), c);
    }

    #[test]
    fn same_seed_same_output() {
        let s = test_signal(300);
        let cfg = AugConfig {
            crop_len: 250,
            jitter_std: 0.05,
            rescale_range: (0.8, 1.2),
            surrogate_enabled: true,
            surrogate_phase_scale: 1.0,
            seed: 42,
        };
        let a = augment_signal_with_offset(&s, &cfg).unwrap();
        let b = augment_signal_with_offset(&s, &cfg).unwrap();
        assert_eq!(a, b);
        let other = augment_signal(&s, &cfg.with_seed(43)).unwrap();
        assert_ne!(a.signal, other);

        let c = test_clip();
        let ccfg = ClipAugConfig::standard(3).with_seed(5);
        assert_eq!(augment_clip(&c, &ccfg).unwrap(), augment_clip(&c, &ccfg).unwrap());
    }

    #[test]
    fn crop_longer_than_signal_is_rejected() {
        let s = test_signal(300);
        assert!(augment_signal(&s, &AugConfig::identity(301)).is_err());
        assert!(augment_clip(&test_clip(), &ClipAugConfig::disabled(5)).is_err());
    }

    #[test]
    fn crop_offset_matches_output() {
        let s = test_signal(400);
        let cfg = AugConfig { seed: 3, ..AugConfig::identity(250) };
        let a = augment_signal_with_offset(&s, &cfg).unwrap();
        assert_eq!(a.signal.lead(1), &s.lead(1)[a.crop_start..a.crop_start + 250]);
    }

    proptest! {
        #[test]
        fn surrogate_preserves_magnitude_spectrum(
            x in prop::collection::vec(-5.0f64..5.0, 200..260),
            seed in any::<u64>(),
            scale in 0.0f64..=1.0,
        ) {
            let n = x.len();
            let sig = MultiLeadSignal::new(vec![x.clone()], 100.0, vec!["II".into()]).unwrap();
            let cfg = AugConfig { surrogate_enabled: true, surrogate_phase_scale: scale, seed, ..AugConfig::identity(n) };
            let out = augment_signal(&sig, &cfg).unwrap();
            let (a, b) = (magnitudes(&x), magnitudes(out.lead(0)));
            let peak = a.iter().cloned().fold(0.0, f64::max).max(1e-300);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() / peak < 1e-6);
            }
        }

        #[test]
        fn clip_augmentation_stays_in_unit_range(seed in any::<u64>()) {
            let out = augment_clip(&test_clip(), &ClipAugConfig::standard(3).with_seed(seed)).unwrap();
            prop_assert!(out.in_unit_range());
            prop_assert_eq!(out.n_frames(), 3);
        }
    }
}
