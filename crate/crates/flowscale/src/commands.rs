//! The `generate`, `train`, `sample` and `evaluate` pipelines.
//!
//! Every command writes its effective configuration to `config.txt` in its
//! output directory; rerunning from that file reproduces every numeric artifact
//! byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use flowscale_core::eval::{evaluate, Predictor};
use flowscale_core::{build_dataset, FlowModel, GridField, MetricsReport, PairedSample, Trainer, TrainingLog};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grf::generate_grf;
use crate::grid::write_grid;
use crate::manifest::{load_corpus, Manifest};
use crate::output::{write_metrics_csv, write_png};

pub const CONFIG_FILE: &str = "config.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LOG_FILE: &str = "train.log";
pub const STATE_FILE: &str = "state.cnfm";
pub const FINAL_FILE: &str = "final.cnfm";
pub const EMA_FILE: &str = "ema.cnfm";
pub const BEST_FILE: &str = "best.cnfm";
pub const METRICS_FILE: &str = "metrics.csv";

/// Creates `dir`, refusing a non-empty one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if !force {
        if let Ok(mut entries) = fs::read_dir(dir) {
            if entries.next().is_some() {
                return Err(Error::NotEmpty(dir.to_path_buf()));
            }
        }
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config {
        line: 0,
        message: format!("{key} is not set"),
    })
}

/// Writes `num_fields` random fields with seeds `data_seed ..` and a manifest.
pub fn cmd_generate(cfg: &RunConfig, force: bool) -> Result<Manifest> {
    prepare_dir(&cfg.out, force)?;
    cfg.write(&cfg.out.join(CONFIG_FILE))?;
    let mut manifest = Manifest::default();
    for i in 0..cfg.num_fields {
        let field = generate_grf(cfg.data_seed.wrapping_add(i as u64), cfg.height, cfg.width, cfg.beta)?;
        let name = PathBuf::from(format!("field_{i:05}.cnfg"));
        write_grid(&cfg.out.join(&name), &field)?;
        manifest.files.push(name);
    }
    manifest.write(&cfg.out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: TrainingLog,
    pub final_checkpoint: PathBuf,
    pub ema_checkpoint: PathBuf,
    pub test_manifest: PathBuf,
}

fn write_split(dir: &Path, pairs: &[PairedSample]) -> Result<PathBuf> {
    mkdir(dir)?;
    let mut manifest = Manifest::default();
    for (i, p) in pairs.iter().enumerate() {
        let hr = PathBuf::from(format!("hr_{i:05}.cnfg"));
        write_grid(&dir.join(&hr), &p.y_hr)?;
        write_grid(&dir.join(format!("lr_{i:05}.cnfg")), &p.x_lr)?;
        manifest.files.push(hr);
    }
    let path = dir.join(MANIFEST_FILE);
    manifest.write(&path)?;
    Ok(path)
}

fn write_log(path: &Path, log: &TrainingLog) -> Result<()> {
    fs::write(path, log.to_text()).map_err(Error::io(path))
}

/// Builds the dataset from the corpus manifest and trains.
///
/// Per epoch it writes `checkpoints/epoch_NNN.cnfm` and `state.cnfm` (full
/// training state), refreshes `train.log`, and writes `best.cnfm` (EMA weights)
/// when validation improves. At the end it writes `final.cnfm` and `ema.cnfm`.
/// With `resume`, training continues from `state.cnfm` in the output directory.
pub fn cmd_train(cfg: &RunConfig, force: bool, resume: bool) -> Result<TrainOutcome> {
    let corpus = load_corpus(required(&cfg.corpus, "corpus")?)?;
    let dataset = build_dataset(&corpus, cfg.model.upsampling, cfg.split_seed)?;
    let out = &cfg.out;
    let state_path = out.join(STATE_FILE);
    let resuming = resume && state_path.exists();
    prepare_dir(out, force || resuming)?;
    cfg.write(&out.join(CONFIG_FILE))?;
    let test_manifest = write_split(&out.join("test"), &dataset.test)?;
    let ck_dir = out.join("checkpoints");
    mkdir(&ck_dir)?;

    let trainer = if resuming {
        Checkpoint::read(&state_path)?.into_trainer(cfg.train.clone())?
    } else {
        Trainer::new(FlowModel::new(cfg.model.clone(), cfg.model_seed)?, cfg.train.clone())?
    };
    let log_path = out.join(LOG_FILE);
    let mut io_error = None;
    let trained = flowscale_core::resume(trainer, &dataset, |t, r| {
        let save = || -> Result<()> {
            let ck = Checkpoint::from_trainer(t);
            ck.write(&ck_dir.join(format!("epoch_{:03}.cnfm", r.epoch)))?;
            ck.write(&state_path)?;
            write_log(&log_path, &t.log)?;
            if t.best_val.is_some_and(|(e, _)| e == r.epoch) {
                Checkpoint::from_model(&t.ema_model()?).write(&out.join(BEST_FILE))?;
            }
            Ok(())
        };
        save().map_err(|e| {
            io_error = Some(e);
            flowscale_core::Error::InvalidConfig("checkpoint output failed".into())
        })
    });
    if let Some(e) = io_error {
        return Err(e);
    }
    let trainer = trained?;
    write_log(&log_path, &trainer.log)?;
    let final_checkpoint = out.join(FINAL_FILE);
    let ema_checkpoint = out.join(EMA_FILE);
    Checkpoint::from_trainer(&trainer).write(&final_checkpoint)?;
    Checkpoint::from_model(&trainer.ema_model()?).write(&ema_checkpoint)?;
    Ok(TrainOutcome {
        log: trainer.log,
        final_checkpoint,
        ema_checkpoint,
        test_manifest,
    })
}

/// Draws `n` samples for one LR grid with the checkpoint's EMA weights, seeds
/// `seed .. seed + n - 1`, writing `sample_NNN.cnfg` and `.png` into `out`.
pub fn cmd_sample(checkpoint: &Path, input: &Path, tau: f64, n: usize, seed: u64, out: &Path, force: bool) -> Result<Vec<GridField>> {
    let model = Checkpoint::read(checkpoint)?.ema_model()?;
    let x = crate::grid::read_grid(input)?;
    let samples = model.sample_ensemble(&x, tau, n, seed)?;
    prepare_dir(out, force)?;
    for (i, s) in samples.iter().enumerate() {
        write_grid(&out.join(format!("sample_{i:03}.cnfg")), s)?;
        write_png(&out.join(format!("sample_{i:03}.png")), s)?;
    }
    Ok(samples)
}

/// Scores every requested variant on the test manifest and writes
/// `metrics.csv` plus per-sample maps under `maps/<variant>/`.
pub fn cmd_evaluate(cfg: &RunConfig, force: bool) -> Result<Vec<MetricsReport>> {
    let hr = load_corpus(required(&cfg.test_manifest, "test_manifest")?)?;
    let mut models = Vec::with_capacity(cfg.variants.len());
    for v in &cfg.variants {
        let ck = match v.as_str() {
            "bicubic" => None,
            "cnf" | "cnf+constraint" => Some(cfg.cnf_checkpoint.as_ref()),
            "cnf+perceptual" => Some(cfg.perceptual_checkpoint.as_ref()),
            other => return Err(Error::UnknownVariant(other.into())),
        };
        let model = match ck {
            None => None,
            Some(None) => return Err(Error::MissingCheckpoint(v.clone())),
            Some(Some(p)) => Some(Checkpoint::read(p)?.ema_model()?),
        };
        models.push(model);
    }
    prepare_dir(&cfg.out, force)?;
    cfg.write(&cfg.out.join(CONFIG_FILE))?;

    let mut reports = Vec::with_capacity(cfg.variants.len());
    for (v, model) in cfg.variants.iter().zip(&models) {
        let s = model.as_ref().map_or(cfg.model.upsampling, |m| m.config().upsampling);
        let test: Vec<PairedSample> = hr
            .iter()
            .map(|f| PairedSample::from_hr(f.clone(), s))
            .collect::<flowscale_core::Result<_>>()?;
        let predictor = match model {
            None => Predictor::Bicubic,
            Some(m) => Predictor::Flow {
                model: m,
                constrained: v == "cnf+constraint",
            },
        };
        let dir = cfg.out.join("maps").join(v);
        mkdir(&dir)?;
        let mut io_error = None;
        let report = evaluate(v, predictor, &test, cfg.tau, cfg.ensemble_n, cfg.sample_seed, |i, o| {
            let emit = || -> Result<()> {
                write_grid(&dir.join(format!("error_{i:05}.cnfg")), &o.error)?;
                write_png(&dir.join(format!("error_{i:05}.png")), &o.error)?;
                write_grid(&dir.join(format!("mean_{i:05}.cnfg")), &o.prediction)?;
                write_png(&dir.join(format!("mean_{i:05}.png")), &o.prediction)?;
                if let Some(std) = &o.std {
                    write_grid(&dir.join(format!("std_{i:05}.cnfg")), std)?;
                    write_png(&dir.join(format!("std_{i:05}.png")), std)?;
                    write_grid(&dir.join(format!("sample_{i:05}.cnfg")), &o.members[0])?;
                }
                Ok(())
            };
            emit().map_err(|e| {
                io_error = Some(e);
                flowscale_core::Error::InvalidConfig("map output failed".into())
            })
        });
        if let Some(e) = io_error {
            return Err(e);
        }
        reports.push(report?);
    }
    write_metrics_csv(&cfg.out.join(METRICS_FILE), &reports)?;
    Ok(reports)
}
