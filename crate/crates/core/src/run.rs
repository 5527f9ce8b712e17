//! Run directories: dataset loading, checkpoints, the writer lock and the
//! command entry points used by the CLI.
//!
//! A checkpoint `name` is a tensor container `name.ptac` plus a JSON sidecar
//! `name.json` holding the config and model specs needed to rebuild it.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::container::{Container, Tensor};
use crate::error::{Error, Result};
use crate::eval::{grid_csv, pgm_bytes, regression_csv, retrieval_csv, write_file, RegressionReport, RetrievalReport, DEFAULT_KS};
use crate::model::{AdamW, Modality, Model, ModelSpec};
use crate::synth::{gen_dataset_with, read_dataset, write_dataset};
use crate::train::{
    embed_subjects, evaluate_heatmaps, evaluate_regression, evaluate_retrieval, init_model, mean_diag_score, prepare,
    pretrain, split, train_joint, MetricsLog, Prepared,
};

pub const CHECKPOINT_SCHEMA: &str = "cardioalign.checkpoint/1";

/// Exclusive writer lock on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(file) => Ok(RunLock { path, _file: file }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub kind: String,
    pub steps: u64,
    pub config: RunConfig,
    pub ecg: Option<ModelSpec>,
    pub cmr: Option<ModelSpec>,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub ecg: Option<Model>,
    pub cmr: Option<Model>,
    pub ecg_opt: Option<AdamW>,
    pub cmr_opt: Option<AdamW>,
}

fn stem_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("ptac"), stem.with_extension("json"))
}

impl Checkpoint {
    pub fn new(kind: &str, config: &RunConfig) -> Self {
        Checkpoint {
            meta: CheckpointMeta { schema: CHECKPOINT_SCHEMA.into(), kind: kind.into(), steps: 0, config: config.clone(), ecg: None, cmr: None },
            ecg: None,
            cmr: None,
            ecg_opt: None,
            cmr_opt: None,
        }
    }

    pub fn with_model(mut self, model: Model, opt: Option<AdamW>) -> Self {
        if let Some(o) = &opt {
            self.meta.steps = self.meta.steps.max(o.step);
        }
        match model.spec.modality {
            Modality::Ecg => {
                self.meta.ecg = Some(model.spec.clone());
                self.ecg = Some(model);
                self.ecg_opt = opt;
            }
            Modality::Cmr => {
                self.meta.cmr = Some(model.spec.clone());
                self.cmr = Some(model);
                self.cmr_opt = opt;
            }
        }
        self
    }

    /// Writes `stem.ptac` and `stem.json`.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let (bin, side) = stem_paths(stem);
        if let Some(dir) = bin.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut c = Container::new();
        for (name, model, opt) in [("ecg", &self.ecg, &self.ecg_opt), ("cmr", &self.cmr, &self.cmr_opt)] {
            if let Some(m) = model {
                m.write_into(&mut c, &format!("{name}."));
                if let Some(o) = opt {
                    o.write_into(&mut c, &format!("opt.{name}."), &m.store);
                }
            }
        }
        c.insert("meta.steps", Tensor::f64(vec![1], vec![self.meta.steps as f64]));
        c.write(&bin)?;
        let mut text = serde_json::to_string_pretty(&self.meta)?;
        text.push('\n');
        fs::write(side, text)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (bin, side) = stem_paths(stem);
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&side)?)?;
        if meta.schema != CHECKPOINT_SCHEMA {
            return Err(Error::Format { path: side, msg: format!("unsupported checkpoint schema `{}`", meta.schema) });
        }
        let c = Container::read(&bin)?;
        let load = |spec: &Option<ModelSpec>, name: &str| -> Result<(Option<Model>, Option<AdamW>)> {
            let Some(spec) = spec else { return Ok((None, None)) };
            let m = Model::read_from(spec.clone(), &c, &format!("{name}."))?;
            let opt = if c.get(&format!("opt.{name}.step")).is_some() {
                Some(AdamW::read_from(&c, &format!("opt.{name}."), &m.store)?)
            } else {
                None
            };
            Ok((Some(m), opt))
        };
        let (ecg, ecg_opt) = load(&meta.ecg, "ecg")?;
        let (cmr, cmr_opt) = load(&meta.cmr, "cmr")?;
        Ok(Checkpoint { meta, ecg, cmr, ecg_opt, cmr_opt })
    }
}

/// Generates `n` subjects into `dir`.
pub fn cmd_synth(cfg: &RunConfig, n: usize, dir: &Path) -> Result<()> {
    let _lock = RunLock::acquire(dir)?;
    let subjects = gen_dataset_with(n, cfg.seed, &cfg.synth())?;
    write_dataset(dir, &subjects, cfg.seed, &cfg.synth())
}

/// Reads and preprocesses the configured dataset, checking it was generated
/// with matching signal and clip settings.
pub fn load_prepared(cfg: &RunConfig) -> Result<Vec<Prepared>> {
    let (manifest, subjects) = read_dataset(&cfg.dataset)?;
    if manifest.config != cfg.synth() {
        return Err(Error::Config(format!(
            "dataset {} was generated with {:?}, config expects {:?}",
            cfg.dataset.display(),
            manifest.config,
            cfg.synth()
        )));
    }
    if manifest.n <= cfg.n_train {
        return Err(Error::Config(format!("dataset has {} subjects, n_train = {} leaves none held out", manifest.n, cfg.n_train)));
    }
    prepare(&subjects, cfg)
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join("config.txt"), cfg.to_text())?;
    Ok(())
}

pub fn pretrain_stem(out: &Path, m: Modality) -> PathBuf {
    out.join(format!("pretrain_{}", m.name()))
}

pub fn joint_stem(out: &Path) -> PathBuf {
    out.join("joint")
}

pub fn cmd_pretrain(cfg: &RunConfig, m: Modality, verbose: bool) -> Result<PathBuf> {
    let _lock = RunLock::acquire(&cfg.out)?;
    write_config(cfg)?;
    let data = load_prepared(cfg)?;
    let (train, _) = split(&data, cfg.n_train);
    let mut log = MetricsLog::to_file(&cfg.out.join(format!("metrics_pretrain_{}.jsonl", m.name())))?;
    if verbose {
        log = log.verbose();
    }
    let p = pretrain(m, &train, cfg, &mut log)?;
    let stem = pretrain_stem(&cfg.out, m);
    Checkpoint::new("pretrain", cfg).with_model(p.model, Some(p.opt)).save(&stem)?;
    Ok(stem)
}

#[derive(Clone, Debug, Default)]
pub struct JointInputs {
    pub no_smp: bool,
    pub ecg_checkpoint: Option<PathBuf>,
    pub cmr_checkpoint: Option<PathBuf>,
}

fn pretrained_model(stem: &Path, m: Modality, cfg: &RunConfig) -> Result<Model> {
    if !stem.with_extension("json").exists() {
        return Err(Error::Config(format!(
            "no {} pretraining checkpoint at {}; run `pretrain --modality {}` first or pass --no-smp",
            m.name(),
            stem.display(),
            m.name()
        )));
    }
    let ck = Checkpoint::load(stem)?;
    let model = match m {
        Modality::Ecg => ck.ecg,
        Modality::Cmr => ck.cmr,
    }
    .ok_or_else(|| Error::Config(format!("checkpoint {} holds no {} model", stem.display(), m.name())))?;
    if model.spec != cfg.model_spec(m) {
        return Err(Error::Config(format!("checkpoint {} does not match the configured {} model", stem.display(), m.name())));
    }
    Ok(model)
}

/// Joint training. Without pretraining nothing is frozen.
pub fn cmd_train_joint(cfg: &RunConfig, inputs: &JointInputs, verbose: bool) -> Result<PathBuf> {
    let _lock = RunLock::acquire(&cfg.out)?;
    let (ecg, cmr, freeze) = if inputs.no_smp {
        (init_model(Modality::Ecg, cfg)?, init_model(Modality::Cmr, cfg)?, 0)
    } else {
        let es = inputs.ecg_checkpoint.clone().unwrap_or_else(|| pretrain_stem(&cfg.out, Modality::Ecg));
        let cs = inputs.cmr_checkpoint.clone().unwrap_or_else(|| pretrain_stem(&cfg.out, Modality::Cmr));
        (pretrained_model(&es, Modality::Ecg, cfg)?, pretrained_model(&cs, Modality::Cmr, cfg)?, cfg.freeze_layers)
    };
    write_config(cfg)?;
    let data = load_prepared(cfg)?;
    let (train, _) = split(&data, cfg.n_train);
    let mut log = MetricsLog::to_file(&cfg.out.join("metrics_joint.jsonl"))?;
    if verbose {
        log = log.verbose();
    }
    let state = train_joint(&train, cfg, ecg, cmr, freeze, &mut log)?;
    let stem = joint_stem(&cfg.out);
    Checkpoint::new("joint", cfg)
        .with_model(state.ecg, Some(state.ecg_opt))
        .with_model(state.cmr, Some(state.cmr_opt))
        .save(&stem)?;
    Ok(stem)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTask {
    Retrieval,
    Regression,
    Heatmap,
}

impl std::str::FromStr for EvalTask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "retrieval" => Ok(EvalTask::Retrieval),
            "regression" => Ok(EvalTask::Regression),
            "heatmap" => Ok(EvalTask::Heatmap),
            _ => Err(Error::Config(format!("unknown eval task `{s}`"))),
        }
    }
}

/// Which encoders to evaluate.
#[derive(Clone, Debug)]
pub enum EvalSource {
    Checkpoint(PathBuf),
    RandomInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub mean_diag_score: f64,
    pub subjects: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    pub retrieval: Option<RetrievalReport>,
    pub regression: Option<RegressionReport>,
    pub heatmap: Option<HeatmapSummary>,
}

fn eval_models(cfg: &RunConfig, source: &EvalSource, task: EvalTask) -> Result<(Model, Model)> {
    match source {
        EvalSource::RandomInit => Ok((init_model(Modality::Ecg, cfg)?, init_model(Modality::Cmr, cfg)?)),
        EvalSource::Checkpoint(stem) => {
            let ck = Checkpoint::load(stem)?;
            let ecg = ck.ecg.ok_or_else(|| Error::Config(format!("checkpoint {} holds no ECG model", stem.display())))?;
            let cmr = match (ck.cmr, task) {
                (Some(c), _) => c,
                // The probe only reads ECG features.
                (None, EvalTask::Regression) => init_model(Modality::Cmr, cfg)?,
                (None, _) => return Err(Error::Config(format!("checkpoint {} holds no CMR model", stem.display()))),
            };
            Ok((ecg, cmr))
        }
    }
}

/// Runs one evaluation task and writes its reports under `out/eval/`.
pub fn cmd_eval(cfg: &RunConfig, task: EvalTask, source: &EvalSource) -> Result<EvalOutput> {
    let _lock = RunLock::acquire(&cfg.out)?;
    let (ecg, cmr) = eval_models(cfg, source, task)?;
    let data = load_prepared(cfg)?;
    let (train, test) = split(&data, cfg.n_train);
    let dir = cfg.out.join("eval");
    fs::create_dir_all(&dir)?;
    let test_emb = embed_subjects(&test, cfg, &ecg, &cmr)?;
    let mut out = EvalOutput::default();
    match task {
        EvalTask::Retrieval => {
            let r = evaluate_retrieval(&test_emb, &DEFAULT_KS, cfg.seed)?;
            write_json(&dir.join("retrieval.json"), &r)?;
            write_file(&dir.join("retrieval.csv"), retrieval_csv(&r).as_bytes())?;
            out.retrieval = Some(r);
        }
        EvalTask::Regression => {
            let train_emb = embed_subjects(&train, cfg, &ecg, &cmr)?;
            let r = evaluate_regression(&train_emb, &test_emb)?;
            write_json(&dir.join("regression.json"), &r)?;
            write_file(&dir.join("regression.csv"), regression_csv(&r).as_bytes())?;
            out.regression = Some(r);
        }
        EvalTask::Heatmap => {
            let maps = evaluate_heatmaps(&test_emb)?;
            let hdir = dir.join("heatmaps");
            fs::create_dir_all(&hdir)?;
            for (id, h) in &maps {
                write_file(&hdir.join(format!("subject_{id:05}.pgm")), &pgm_bytes(&h.grid))?;
                write_file(&hdir.join(format!("subject_{id:05}.csv")), grid_csv(&h.grid).as_bytes())?;
            }
            let summary = HeatmapSummary { mean_diag_score: mean_diag_score(&maps), subjects: maps.iter().map(|(id, h)| (*id, h.diag_score)).collect() };
            write_json(&dir.join("heatmap.json"), &summary)?;
            out.heatmap = Some(summary);
        }
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&json!(v))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
