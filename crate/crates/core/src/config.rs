//! Run configuration: a named preset overridden by a flat `key = value` file.
//!
//! ```text
//! # comment
//! preset = desk
//! beta = 0
//! leads = I,II,V2
//! ```
//!
//! Keys are the field names of [`RunConfig`]. A `preset` line, if present,
//! must come first and selects the base values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::align::{LocalMode, LossConfig};
use crate::error::{Error, Result};
use crate::model::{EncoderConfig, Modality, ModelSpec};
use crate::signal::{AugConfig, ClipAugConfig};
use crate::synth::SynthConfig;
use crate::tokenizer::{Layout, PatchConfig, PosMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    /// Subjects with id below this train; the rest are held out.
    pub n_train: usize,

    pub rate_hz: f64,
    pub duration_s: f64,
    pub leads: Vec<String>,
    pub clip_frames: usize,
    pub image_size: usize,

    pub wavelet_levels: u32,
    pub rpeak_lead: String,
    pub ecg_crop_len: usize,
    pub ecg_patch: usize,
    pub jitter_std: f64,
    pub rescale_lo: f64,
    pub rescale_hi: f64,
    pub surrogate: bool,
    pub surrogate_phase_scale: f64,
    /// Evenly spaced crops averaged at evaluation time.
    pub eval_crops: usize,

    pub cmr_patch_t: usize,
    pub cmr_patch_p: usize,
    pub clip_augment: bool,
    pub clip_crop_scale_lo: f64,
    pub clip_crop_scale_hi: f64,
    pub clip_rotation_deg: f64,
    pub clip_flip_prob: f64,
    pub clip_brightness: f64,
    pub clip_contrast: f64,
    pub clip_blur_sigma: f64,
    pub clip_noise_std: f64,

    pub embed_dim: usize,
    pub ecg_layers: usize,
    pub cmr_layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_dim: usize,
    pub proj_dim: usize,
    pub pos_mode: PosMode,

    pub batch_size: usize,
    pub smp_epochs: usize,
    pub joint_epochs: usize,
    pub lr_smp: f64,
    pub lr_joint: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub ecg_mask_ratio: f64,
    pub cmr_mask_ratio: f64,
    pub freeze_layers: usize,

    pub local_steps: usize,
    /// Resample clip local embeddings to `local_steps` when the clip has a
    /// different number of temporal tokens.
    pub local_resample: bool,
    pub tau_global: f64,
    pub tau_local: f64,
    pub beta: f64,
    pub dir_weight: f64,
    pub sigma: f64,
    pub local_mode: LocalMode,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            preset: "desk".into(),
            dataset: PathBuf::from("data"),
            out: PathBuf::from("runs/desk"),
            seed: 0,
            n_train: 256,
            rate_hz: 500.0,
            duration_s: 10.0,
            leads: vec!["I".into(), "II".into(), "V2".into()],
            clip_frames: 26,
            image_size: 36,
            wavelet_levels: 8,
            rpeak_lead: "II".into(),
            ecg_crop_len: 1250,
            ecg_patch: 50,
            jitter_std: 0.02,
            rescale_lo: 0.9,
            rescale_hi: 1.1,
            surrogate: true,
            surrogate_phase_scale: 0.1,
            eval_crops: 4,
            cmr_patch_t: 2,
            cmr_patch_p: 18,
            clip_augment: true,
            clip_crop_scale_lo: 0.8,
            clip_crop_scale_hi: 1.0,
            clip_rotation_deg: 10.0,
            clip_flip_prob: 0.5,
            clip_brightness: 0.1,
            clip_contrast: 0.1,
            clip_blur_sigma: 1.0,
            clip_noise_std: 0.02,
            embed_dim: 64,
            ecg_layers: 2,
            cmr_layers: 2,
            heads: 4,
            mlp_ratio: 4.0,
            decoder_layers: 1,
            decoder_heads: 4,
            decoder_dim: 64,
            proj_dim: 128,
            pos_mode: PosMode::Factorized,
            batch_size: 32,
            smp_epochs: 50,
            joint_epochs: 30,
            lr_smp: 1e-3,
            lr_joint: 2e-3,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            ecg_mask_ratio: 0.75,
            cmr_mask_ratio: 0.9,
            freeze_layers: 1,
            local_steps: 13,
            local_resample: false,
            tau_global: 0.07,
            tau_local: 0.07,
            beta: 1.0,
            dir_weight: 0.5,
            sigma: 0.0,
            local_mode: LocalMode::Infonce,
        }
    }

    /// Published architecture and loss settings at full size. The clip has
    /// 25 temporal tokens, so clip local embeddings are resampled to 13.
    pub fn paper() -> Self {
        RunConfig {
            preset: "paper".into(),
            out: PathBuf::from("runs/paper"),
            leads: ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"].map(String::from).to_vec(),
            clip_frames: 50,
            image_size: 84,
            ecg_crop_len: 2500,
            cmr_patch_p: 12,
            embed_dim: 512,
            ecg_layers: 6,
            cmr_layers: 4,
            heads: 8,
            decoder_dim: 512,
            lr_smp: 1e-4,
            lr_joint: 1e-4,
            freeze_layers: 2,
            local_resample: true,
            ..RunConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "paper" => Ok(RunConfig::paper()),
            _ => Err(Error::Config(format!("unknown preset `{name}`"))),
        }
    }

    /// Applies `key = value` lines on top of the named preset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty())
            .peekable();
        let mut base = RunConfig::desk();
        if let Some((_, l)) = lines.peek() {
            if let Some(("preset", v)) = l.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
                base = RunConfig::preset(v)?;
                lines.next();
            }
        }
        let mut obj = serde_json::to_value(&base)?;
        for (no, line) in lines {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {no}: expected key = value")))?;
            set_key(&mut obj, k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {no}: {e}")))?;
        }
        let cfg: RunConfig = serde_json::from_value(obj)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = serde_json::to_value(&*self)?;
        set_key(&mut obj, key, value).map_err(Error::Config)?;
        *self = serde_json::from_value(obj)?;
        Ok(())
    }

    /// One `key = value` line per field, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let obj = serde_json::to_value(self).expect("config serializes");
        let mut s = format!("preset = {}\n", self.preset);
        if let Value::Object(m) = obj {
            for (k, v) in m {
                if k == "preset" {
                    continue;
                }
                let text = match v {
                    Value::String(s) => s,
                    Value::Array(a) => a.iter().map(|x| x.as_str().map(String::from).unwrap_or(x.to_string())).collect::<Vec<_>>().join(","),
                    other => other.to_string(),
                };
                s.push_str(&format!("{k} = {text}\n"));
            }
        }
        s
    }

    pub fn cmr_temporal_tokens(&self) -> usize {
        self.clip_frames / self.cmr_patch_t.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ecg_patch == 0 || self.ecg_crop_len % self.ecg_patch != 0 {
            return bad(format!("ecg_crop_len {} must be divisible by ecg_patch {}", self.ecg_crop_len, self.ecg_patch));
        }
        let n = (self.rate_hz * self.duration_s).round() as usize;
        if self.ecg_crop_len > n {
            return bad(format!("ecg_crop_len {} exceeds the signal length {n}", self.ecg_crop_len));
        }
        if self.cmr_patch_t == 0 || self.clip_frames % self.cmr_patch_t != 0 {
            return bad(format!("clip_frames {} must be divisible by cmr_patch_t {}", self.clip_frames, self.cmr_patch_t));
        }
        if self.cmr_patch_p == 0 || self.image_size % self.cmr_patch_p != 0 {
            return bad(format!("image_size {} must be divisible by cmr_patch_p {}", self.image_size, self.cmr_patch_p));
        }
        if !self.local_resample && self.cmr_temporal_tokens() != self.local_steps {
            return bad(format!(
                "clip has {} temporal tokens but local_steps is {}; set local_resample = true to interpolate",
                self.cmr_temporal_tokens(),
                self.local_steps
            ));
        }
        if self.local_steps < 2 {
            return bad("local_steps must be at least 2".into());
        }
        if !self.leads.iter().any(|l| *l == self.rpeak_lead) {
            return bad(format!("R-peak lead `{}` is not among the leads", self.rpeak_lead));
        }
        if self.batch_size == 0 || self.eval_crops == 0 {
            return bad("batch_size and eval_crops must be positive".into());
        }
        if self.freeze_layers > self.ecg_layers.min(self.cmr_layers) {
            return bad(format!("freeze_layers {} exceeds an encoder depth", self.freeze_layers));
        }
        for (name, r) in [("ecg_mask_ratio", self.ecg_mask_ratio), ("cmr_mask_ratio", self.cmr_mask_ratio)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must be in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad("warmup_frac must be in [0, 1)".into());
        }
        self.encoder(Modality::Ecg).validate()?;
        self.encoder(Modality::Cmr).validate()?;
        self.loss().validate()?;
        self.signal_aug(0).validate(n)?;
        self.clip_aug(0).validate(self.clip_frames)?;
        Ok(())
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            rate_hz: self.rate_hz,
            duration_s: self.duration_s,
            lead_names: self.leads.clone(),
            n_frames: self.clip_frames,
            image_size: self.image_size,
        }
    }

    pub fn patch(&self) -> PatchConfig {
        PatchConfig {
            ecg_patch_pt: self.ecg_patch,
            cmr_patch: [self.cmr_patch_t, self.cmr_patch_p, self.cmr_patch_p],
            embed_dim: self.embed_dim,
        }
    }

    pub fn encoder(&self, m: Modality) -> EncoderConfig {
        EncoderConfig {
            layers: match m {
                Modality::Ecg => self.ecg_layers,
                Modality::Cmr => self.cmr_layers,
            },
            heads: self.heads,
            embed_dim: self.embed_dim,
            mlp_ratio: self.mlp_ratio,
            decoder_layers: self.decoder_layers,
            decoder_heads: self.decoder_heads,
            decoder_dim: self.decoder_dim,
            proj_dim: self.proj_dim,
            pos_mode: self.pos_mode,
        }
    }

    pub fn model_spec(&self, m: Modality) -> ModelSpec {
        let (patch_dim, layout) = match m {
            Modality::Ecg => {
                (self.ecg_patch, Layout::Ecg { leads: self.leads.len(), steps: self.ecg_crop_len / self.ecg_patch })
            }
            Modality::Cmr => {
                let g = self.image_size / self.cmr_patch_p;
                (self.cmr_patch_t * self.cmr_patch_p * self.cmr_patch_p, Layout::Cmr { temporal: self.cmr_temporal_tokens(), spatial: g * g })
            }
        };
        ModelSpec { modality: m, patch_dim, layout, encoder: self.encoder(m) }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            tau_global: self.tau_global,
            tau_local: self.tau_local,
            beta: self.beta,
            dir_weight_e2c: self.dir_weight,
            sigma: self.sigma,
            local_mode: self.local_mode,
        }
    }

    pub fn signal_aug(&self, seed: u64) -> AugConfig {
        AugConfig {
            crop_len: self.ecg_crop_len,
            jitter_std: self.jitter_std,
            rescale_range: (self.rescale_lo, self.rescale_hi),
            surrogate_enabled: self.surrogate,
            surrogate_phase_scale: self.surrogate_phase_scale,
            seed,
        }
    }

    pub fn clip_aug(&self, seed: u64) -> ClipAugConfig {
        if !self.clip_augment {
            return ClipAugConfig::disabled(self.clip_frames).with_seed(seed);
        }
        ClipAugConfig {
            target_frames: self.clip_frames,
            crop_scale: (self.clip_crop_scale_lo, self.clip_crop_scale_hi),
            max_rotation_deg: self.clip_rotation_deg,
            flip_prob: self.clip_flip_prob,
            brightness: self.clip_brightness,
            contrast: self.clip_contrast,
            max_blur_sigma: self.clip_blur_sigma,
            max_noise_std: self.clip_noise_std,
            seed,
        }
    }
}

fn set_key(obj: &mut Value, key: &str, raw: &str) -> std::result::Result<(), String> {
    let Value::Object(map) = obj else { unreachable!("config serializes to an object") };
    let slot = map.get_mut(key).ok_or_else(|| format!("unknown key `{key}`"))?;
    let parsed = match slot {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| format!("`{key}` expects true or false"))?),
        Value::Number(n) if n.is_f64() => {
            let f: f64 = raw.parse().map_err(|_| format!("`{key}` expects a number"))?;
            serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(|| format!("`{key}` must be finite"))?
        }
        Value::Number(_) => {
            if let Ok(u) = raw.parse::<u64>() {
                Value::from(u)
            } else {
                // Float-typed fields whose default happens to be integral.
                let f: f64 = raw.parse().map_err(|_| format!("`{key}` expects a number"))?;
                serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(|| format!("`{key}` must be finite"))?
            }
        }
        Value::Array(_) => Value::Array(raw.split(',').map(|s| Value::String(s.trim().to_string())).collect()),
        _ => Value::String(raw.to_string()),
    };
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper().validate().unwrap();
        assert_eq!(RunConfig::desk().cmr_temporal_tokens(), 13);
    }

    #[test]
    fn parse_overrides() {
        let c = RunConfig::parse("preset = desk\n# comment\nbeta = 0\nleads = I, II\nsurrogate = false\nlocal_mode = cossim\nrpeak_lead = II\n").unwrap();
        assert_eq!(c.beta, 0.0);
        assert_eq!(c.leads, vec!["I".to_string(), "II".to_string()]);
        assert!(!c.surrogate);
        assert_eq!(c.local_mode, LocalMode::Cossim);
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("beta = x").is_err());
    }

    #[test]
    fn temporal_token_mismatch_requires_resampling() {
        assert!(RunConfig::parse("clip_frames = 24").is_err());
        assert!(RunConfig::parse("clip_frames = 24\nlocal_resample = true").is_ok());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::paper();
        c.seed = 17;
        c.tau_local = 1.0;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        let d = RunConfig::desk();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }
}
