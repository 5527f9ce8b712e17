//! Paired synthetic subjects: a multi-lead signal and a short-axis clip driven
//! by one latent cardiac cycle, with phenotypes known in closed form.
//!
//! Frame 0 of the clip is end-diastole and coincides with an R-peak. The
//! signal carries contractility in the T-wave amplitude relative to the QRS
//! and a faint trace of size in the QRS width, both of which survive per-lead
//! z-scoring. Per-subject wave gains and T/P timing jitter act as nuisance.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::signal::{ImageClip, MultiLeadSignal, RPeakList};

pub const GENERATOR_VERSION: &str = "2";

pub const HEART_RATE_RANGE: (f64, f64) = (50.0, 100.0);
pub const RADIUS_RANGE: (f64, f64) = (8.0, 16.0);
pub const CONTRACTION_RANGE: (f64, f64) = (0.2, 0.5);
pub const NOISE_RANGE: (f64, f64) = (0.0, 0.05);

/// Exponent that puts the systolic peak of `sin²(π φ^γ)` at φ = 0.35.
const SYSTOLE_GAMMA: f64 = 0.660_229_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectLatent {
    pub heart_rate_bpm: f64,
    pub base_radius: f64,
    pub contraction_frac: f64,
    pub noise_level: f64,
    pub phase_offset: f64,
    pub seed: u64,
}

impl SubjectLatent {
    /// `contraction_frac` may go down to 0 (a static disc) even though the
    /// sampling range starts at 0.2.
    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        if !within(self.heart_rate_bpm, HEART_RATE_RANGE.0, HEART_RATE_RANGE.1) {
            return Err(Error::validation(format!("heart rate {} outside [50, 100]", self.heart_rate_bpm)));
        }
        if !within(self.base_radius, RADIUS_RANGE.0, RADIUS_RANGE.1) {
            return Err(Error::validation(format!("radius {} outside [8, 16]", self.base_radius)));
        }
        if !within(self.contraction_frac, 0.0, CONTRACTION_RANGE.1) {
            return Err(Error::validation(format!("contraction {} outside [0, 0.5]", self.contraction_frac)));
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return Err(Error::validation("noise level must be finite and non-negative"));
        }
        if !(self.phase_offset >= 0.0 && self.phase_offset < 1.0) {
            return Err(Error::validation("phase offset must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn period_s(&self) -> f64 {
        60.0 / self.heart_rate_bpm
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhenotypeVector {
    pub edv: f64,
    pub esv: f64,
    pub sv: f64,
    pub ef: f64,
    pub mass: f64,
    pub co: f64,
}

impl PhenotypeVector {
    pub const NAMES: [&'static str; 6] = ["EDV", "ESV", "SV", "EF", "M", "CO"];

    pub fn from_latent(l: &SubjectLatent) -> Self {
        let edv = PI * l.base_radius * l.base_radius;
        let es_radius = l.base_radius * (1.0 - l.contraction_frac);
        let esv = PI * es_radius * es_radius;
        let sv = edv - esv;
        PhenotypeVector { edv, esv, sv, ef: sv / edv, mass: 2.0 * PI * l.base_radius, co: sv * l.heart_rate_bpm }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "EDV" => Some(self.edv),
            "ESV" => Some(self.esv),
            "SV" => Some(self.sv),
            "EF" => Some(self.ef),
            "M" => Some(self.mass),
            "CO" => Some(self.co),
            _ => None,
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.edv, self.esv, self.sv, self.ef, self.mass, self.co]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        PhenotypeVector { edv: a[0], esv: a[1], sv: a[2], ef: a[3], mass: a[4], co: a[5] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSubject {
    pub id: usize,
    pub latent: SubjectLatent,
    pub ecg: MultiLeadSignal,
    pub cmr: ImageClip,
    pub phenotypes: PhenotypeVector,
    pub true_r_peaks: RPeakList,
    pub true_phase: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub rate_hz: f64,
    pub duration_s: f64,
    pub lead_names: Vec<String>,
    pub n_frames: usize,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rate_hz: 500.0,
            duration_s: 10.0,
            lead_names: vec!["I".into(), "II".into(), "V2".into()],
            n_frames: 26,
            image_size: 36,
        }
    }
}

/// Systolic bump: 0 at end-diastole (φ = 0 and 1), 1 at end-systole.
pub fn systolic_profile(phase: f64) -> f64 {
    let s = (PI * phase.clamp(0.0, 1.0).powf(SYSTOLE_GAMMA)).sin();
    s * s
}

pub fn radius_at(latent: &SubjectLatent, phase: f64) -> f64 {
    latent.base_radius * (1.0 - latent.contraction_frac * systolic_profile(phase))
}

fn gauss(t: f64, sigma: f64) -> f64 {
    (-0.5 * (t / sigma).powi(2)).exp()
}

fn unit(v: f64, range: (f64, f64)) -> f64 {
    ((v - range.0) / (range.1 - range.0)).clamp(0.0, 1.0)
}

/// Per-subject multiplicative nuisance on every wave of every lead.
const WAVE_GAIN: (f64, f64) = (0.6, 1.4);

/// QRS width in seconds grows from the base by up to the span with cavity
/// size. The span is kept small so that size is only faintly visible in the
/// raw waveform.
const QRS_SIGMA_BASE: f64 = 0.0115;
const QRS_SIGMA_SPAN: f64 = 0.003;

/// Per-lead wave amplitudes (P, R, S, T) before subject-specific scaling.
const LEAD_WAVES: [[f64; 4]; 3] = [[0.10, 0.70, 0.10, 0.25], [0.15, 1.00, 0.20, 0.30], [0.08, 0.60, 0.70, 0.35]];

fn render_ecg(l: &SubjectLatent, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(MultiLeadSignal, Vec<usize>)> {
    let n = (cfg.duration_s * cfg.rate_hz).round() as usize;
    let period = l.period_s();
    let qrs_sigma = QRS_SIGMA_BASE + QRS_SIGMA_SPAN * unit(l.base_radius, RADIUS_RANGE);
    let t_gain = 0.3 + 0.9 * unit(l.contraction_frac, CONTRACTION_RANGE);
    let t_centre = 0.12 + 0.2 * period + rng.random_range(-0.03..0.03);
    let t_width = rng.random_range(0.04..0.07);
    let p_centre = -0.16;
    let p_width = rng.random_range(0.02..0.035);

    let mut beats = Vec::new();
    let mut j = -1i64;
    loop {
        let t = (j as f64 + l.phase_offset) * period;
        if t > cfg.duration_s + period {
            break;
        }
        beats.push(t);
        j += 1;
    }

    let mut leads = Vec::with_capacity(cfg.lead_names.len());
    for li in 0..cfg.lead_names.len() {
        let base = LEAD_WAVES[li % LEAD_WAVES.len()];
        let w: Vec<f64> = base.iter().map(|a| a * rng.random_range(WAVE_GAIN.0..WAVE_GAIN.1)).collect();
        let p_gain = rng.random_range(0.5..1.5);
        let wander = rng.random_range(0.05..0.3);
        let wander_phase = rng.random_range(0.0..2.0 * PI);
        let mut x = vec![0.0; n];
        for (i, v) in x.iter_mut().enumerate() {
            let t = i as f64 / cfg.rate_hz;
            let mut acc = wander * (2.0 * PI * 0.3 * t + wander_phase).sin();
            for &tb in &beats {
                let d = t - tb;
                if d < -0.4 || d > period + 0.1 {
                    continue;
                }
                acc += p_gain * w[0] * gauss(d - p_centre, p_width);
                acc += w[1] * gauss(d, qrs_sigma);
                acc -= w[2] * gauss(d - 2.5 * qrs_sigma, qrs_sigma);
                acc += t_gain * w[3] * gauss(d - t_centre, t_width);
            }
            *v = acc;
        }
        leads.push(x);
    }
    if l.noise_level > 0.0 {
        let noise = Normal::new(0.0, l.noise_level).expect("valid std");
        leads.iter_mut().flatten().for_each(|v| *v += noise.sample(rng));
    }
    let peaks: Vec<usize> = beats
        .iter()
        .map(|t| (t * cfg.rate_hz).round())
        .filter(|&s| s >= 0.0 && (s as usize) < n)
        .map(|s| s as usize)
        .collect();
    Ok((MultiLeadSignal::new(leads, cfg.rate_hz, cfg.lead_names.clone())?, peaks))
}

const BACKGROUND: f64 = 0.1;
const BLOOD_POOL: f64 = 0.9;

fn render_clip(l: &SubjectLatent, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<(ImageClip, Vec<f64>)> {
    let (f, s) = (cfg.n_frames, cfg.image_size);
    let centre = (s as f64 - 1.0) / 2.0;
    let phases: Vec<f64> = (0..f).map(|k| k as f64 / f as f64).collect();
    let mut data = Vec::with_capacity(f * s * s);
    for &phi in &phases {
        let r = radius_at(l, phi);
        for y in 0..s {
            for x in 0..s {
                let dist = ((y as f64 - centre).powi(2) + (x as f64 - centre).powi(2)).sqrt();
                let cover = (r - dist + 0.5).clamp(0.0, 1.0);
                data.push(BACKGROUND + (BLOOD_POOL - BACKGROUND) * cover);
            }
        }
    }
    if l.noise_level > 0.0 {
        let noise = Normal::new(0.0, l.noise_level).expect("valid std");
        data.iter_mut().for_each(|v| *v = (*v + noise.sample(rng)).clamp(0.0, 1.0));
    }
    Ok((ImageClip::new(data, f, s, s, l.period_s() / f as f64)?, phases))
}

pub fn gen_subject(latent: &SubjectLatent) -> Result<PairedSubject> {
    gen_subject_with(0, latent, &SynthConfig::default())
}

pub fn gen_subject_with(id: usize, latent: &SubjectLatent, cfg: &SynthConfig) -> Result<PairedSubject> {
    latent.validate()?;
    if cfg.image_size as f64 <= 2.0 * RADIUS_RANGE.1 {
        return Err(Error::Config(format!("image size {} cannot hold a radius-16 disc", cfg.image_size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(latent.seed);
    let (ecg, peaks) = render_ecg(latent, cfg, &mut rng)?;
    let (cmr, true_phase) = render_clip(latent, cfg, &mut rng)?;
    let min_gap = (0.25 * cfg.rate_hz).round() as usize;
    let lead = cfg.lead_names.get(1).or(cfg.lead_names.first()).cloned().unwrap_or_default();
    let true_r_peaks = RPeakList::new(peaks, lead, ecg.len(), min_gap)?;
    Ok(PairedSubject { id, phenotypes: PhenotypeVector::from_latent(latent), latent: latent.clone(), ecg, cmr, true_r_peaks, true_phase })
}

/// Per-index seed derivation so subject `i` does not depend on how many
/// subjects precede it.
pub fn subject_seed(master_seed: u64, index: usize) -> u64 {
    let mut z = master_seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_latent(master_seed: u64, index: usize) -> SubjectLatent {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(master_seed, index));
    SubjectLatent {
        heart_rate_bpm: rng.random_range(HEART_RATE_RANGE.0..HEART_RATE_RANGE.1),
        base_radius: rng.random_range(RADIUS_RANGE.0..RADIUS_RANGE.1),
        contraction_frac: rng.random_range(CONTRACTION_RANGE.0..CONTRACTION_RANGE.1),
        noise_level: rng.random_range(NOISE_RANGE.0..NOISE_RANGE.1),
        phase_offset: rng.random_range(0.0..1.0),
        seed: rng.random(),
    }
}

pub fn gen_dataset(n: usize, master_seed: u64) -> Result<Vec<PairedSubject>> {
    gen_dataset_with(n, master_seed, &SynthConfig::default())
}

pub fn gen_dataset_with(n: usize, master_seed: u64, cfg: &SynthConfig) -> Result<Vec<PairedSubject>> {
    if n == 0 {
        return Err(Error::validation("dataset size must be at least 1"));
    }
    (0..n).map(|i| gen_subject_with(i, &sample_latent(master_seed, i), cfg)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: usize,
    pub master_seed: u64,
    pub generator_version: String,
    pub config: SynthConfig,
}

pub fn subject_file_name(id: usize) -> String {
    format!("subject_{id:05}.ptac")
}

fn latent_record(l: &SubjectLatent) -> Tensor {
    // The seed is split into two exactly representable halves.
    let (hi, lo) = ((l.seed >> 32) as f64, (l.seed & 0xFFFF_FFFF) as f64);
    Tensor::f64(vec![7], vec![l.heart_rate_bpm, l.base_radius, l.contraction_frac, l.noise_level, l.phase_offset, hi, lo])
}

fn latent_from_record(t: &Tensor) -> Result<SubjectLatent> {
    let d = &t.data;
    if d.len() != 7 {
        return Err(Error::shape("latent record must hold 7 values"));
    }
    Ok(SubjectLatent {
        heart_rate_bpm: d[0],
        base_radius: d[1],
        contraction_frac: d[2],
        noise_level: d[3],
        phase_offset: d[4],
        seed: ((d[5] as u64) << 32) | d[6] as u64,
    })
}

pub fn subject_to_container(s: &PairedSubject) -> Container {
    let mut c = Container::new();
    let ecg: Vec<f64> = s.ecg.leads().iter().flatten().copied().collect();
    c.insert("ecg", Tensor::f32(vec![s.ecg.n_leads(), s.ecg.len()], ecg));
    c.insert("cmr", Tensor::f32(vec![s.cmr.n_frames(), s.cmr.height(), s.cmr.width()], s.cmr.data().to_vec()));
    c.insert("r_peaks", Tensor::f64(vec![s.true_r_peaks.len()], s.true_r_peaks.indices().iter().map(|&i| i as f64).collect()));
    c.insert("true_phase", Tensor::f64(vec![s.true_phase.len()], s.true_phase.clone()));
    c.insert("phenotypes", Tensor::f64(vec![6], s.phenotypes.to_array().to_vec()));
    c.insert("latent", latent_record(&s.latent));
    c.insert("frame_period_s", Tensor::f64(vec![1], vec![s.cmr.frame_period_s()]));
    c
}

pub fn subject_from_container(id: usize, c: &Container, cfg: &SynthConfig) -> Result<PairedSubject> {
    let ecg_t = c.require("ecg")?;
    let [l, n] = ecg_t.dims[..] else { return Err(Error::shape("ecg record must be rank 2")) };
    let leads = ecg_t.data.chunks(n.max(1)).take(l).map(|c| c.to_vec()).collect();
    let ecg = MultiLeadSignal::new(leads, cfg.rate_hz, cfg.lead_names.clone())?;
    let cmr_t = c.require("cmr")?;
    let [f, h, w] = cmr_t.dims[..] else { return Err(Error::shape("cmr record must be rank 3")) };
    let period = c.require("frame_period_s")?.data.first().copied().unwrap_or(0.0);
    let cmr = ImageClip::new(cmr_t.data.clone(), f, h, w, period)?;
    let peaks = c.require("r_peaks")?.data.iter().map(|&v| v as usize).collect();
    let lead = cfg.lead_names.get(1).or(cfg.lead_names.first()).cloned().unwrap_or_default();
    let true_r_peaks = RPeakList::new(peaks, lead, ecg.len(), (0.25 * cfg.rate_hz).round() as usize)?;
    let ph = &c.require("phenotypes")?.data;
    let phenotypes = PhenotypeVector::from_array(ph[..].try_into().map_err(|_| Error::shape("phenotype record must hold 6 values"))?);
    Ok(PairedSubject {
        id,
        latent: latent_from_record(c.require("latent")?)?,
        ecg,
        cmr,
        phenotypes,
        true_r_peaks,
        true_phase: c.require("true_phase")?.data.clone(),
    })
}

pub fn phenotype_csv(subjects: &[PairedSubject]) -> String {
    let mut out = String::from("subject_id,EDV,ESV,SV,EF,M,CO,heart_rate_bpm\n");
    for s in subjects {
        let p = &s.phenotypes;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.id, p.edv, p.esv, p.sv, p.ef, p.mass, p.co, s.latent.heart_rate_bpm
        ));
    }
    out
}

pub fn write_dataset(dir: &Path, subjects: &[PairedSubject], master_seed: u64, cfg: &SynthConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in subjects {
        subject_to_container(s).write(&dir.join(subject_file_name(s.id)))?;
    }
    fs::write(dir.join("phenotypes.csv"), phenotype_csv(subjects))?;
    let manifest = Manifest { n: subjects.len(), master_seed, generator_version: GENERATOR_VERSION.into(), config: cfg.clone() };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    f.write_all(serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<PairedSubject>)> {
    let m = read_manifest(dir)?;
    let subjects = (0..m.n)
        .map(|i| subject_from_container(i, &Container::read(&dir.join(subject_file_name(i)))?, &m.config))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, subjects))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn latent(r: f64, c: f64) -> SubjectLatent {
        SubjectLatent { heart_rate_bpm: 72.0, base_radius: r, contraction_frac: c, noise_level: 0.0, phase_offset: 0.3, seed: 11 }
    }

    #[test]
    fn analytic_phenotypes() {
        let p = PhenotypeVector::from_latent(&latent(10.0, 0.5));
        assert!((p.edv - 100.0 * PI).abs() < 1e-12);
        assert!((p.esv - 25.0 * PI).abs() < 1e-12);
        assert!((p.ef - 0.75).abs() < 1e-12);
        assert_eq!(p.sv, p.edv - p.esv);
        assert!((p.co - p.sv * 72.0).abs() < 1e-9);
    }

    #[test]
    fn no_contraction_gives_static_clip() {
        let s = gen_subject(&latent(12.0, 0.0)).unwrap();
        assert_eq!(s.phenotypes.ef, 0.0);
        for f in 1..s.cmr.n_frames() {
            assert_eq!(s.cmr.frame(f), s.cmr.frame(0));
        }
    }

    #[test]
    fn systolic_profile_shape() {
        assert_eq!(systolic_profile(0.0), 0.0);
        assert!((systolic_profile(0.35) - 1.0).abs() < 1e-6);
        assert!(systolic_profile(1.0) < 1e-20);
    }

    #[test]
    fn deterministic_and_in_range() {
        let a = gen_subject(&latent(9.0, 0.3)).unwrap();
        let b = gen_subject(&latent(9.0, 0.3)).unwrap();
        assert_eq!(a, b);
        assert!(a.cmr.in_unit_range());
        assert_eq!(a.true_phase[0], 0.0);
    }

    #[test]
    fn rejects_out_of_range_latent() {
        let mut l = latent(10.0, 0.3);
        l.heart_rate_bpm = 120.0;
        assert!(gen_subject(&l).is_err());
        let mut l = latent(10.0, 0.3);
        l.base_radius = 20.0;
        assert!(gen_subject(&l).is_err());
    }
}
