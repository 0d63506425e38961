//! CNFM model checkpoints.
//!
//! Layout (little-endian): `"CNFM"`, u32 version, six u32 model-config fields,
//! u32 parameter count and per parameter (name, trainable flag, rank, u32
//! extents, f64 values) in declaration order, the EMA shadow values, then an
//! optional optimizer block (step, first and second moments) and an optional
//! progress block (epoch, step, best validation score, log records).

use std::fs;
use std::path::Path;

use flowscale_core::{FlowModel, LogRecord, ModelConfig, OptimizerState, Tensor, TrainConfig, Trainer, TrainingLog};

use crate::binary::{Reader, Writer};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"CNFM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Progress {
    pub epoch: usize,
    pub step: usize,
    pub best_val: Option<(usize, f64)>,
    pub log: TrainingLog,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub ema: Vec<Tensor>,
    pub optimizer: Option<OptimizerState>,
    pub progress: Option<Progress>,
}

impl Checkpoint {
    /// A checkpoint whose EMA shadow equals the model weights.
    pub fn from_model(model: &FlowModel) -> Self {
        Self {
            ema: model.params().tensors().to_vec(),
            model: model.clone(),
            optimizer: None,
            progress: None,
        }
    }

    /// Complete training state, enough to resume.
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            model: t.model.clone(),
            ema: t.ema.shadow.clone(),
            optimizer: Some(t.optimizer.clone()),
            progress: Some(Progress {
                epoch: t.epoch,
                step: t.step,
                best_val: t.best_val,
                log: t.log.clone(),
            }),
        }
    }

    /// Rebuilds a trainer; fresh optimizer state when none was stored.
    pub fn into_trainer(self, config: TrainConfig) -> Result<Trainer> {
        let mut t = Trainer::new(self.model, config)?;
        t.ema.shadow = self.ema;
        if let Some(opt) = self.optimizer {
            t.optimizer = opt;
        }
        if let Some(p) = self.progress {
            t.epoch = p.epoch;
            t.step = p.step;
            t.best_val = p.best_val;
            t.log = p.log;
        }
        Ok(t)
    }

    /// The model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<FlowModel> {
        let mut m = self.model.clone();
        m.params_mut().load_values(self.ema.clone())?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        let c = self.model.config();
        for v in [c.upsampling, c.num_scales, c.steps_per_scale, c.hidden_channels, c.cond_channels, c.channels] {
            w.u32(v as u32);
        }
        let params = self.model.params();
        w.u32(params.len() as u32);
        for (i, t) in params.tensors().iter().enumerate() {
            w.str(params.name(i));
            w.u8(params.is_trainable(i) as u8);
            w.u32(t.rank() as u32);
            t.shape().iter().for_each(|&e| w.u32(e as u32));
            w.f64s(t.data());
        }
        self.ema.iter().for_each(|t| w.f64s(t.data()));
        match &self.optimizer {
            Some(o) => {
                w.u8(1);
                w.u64(o.t as u64);
                o.m.iter().chain(&o.v).for_each(|t| w.f64s(t.data()));
            }
            None => w.u8(0),
        }
        match &self.progress {
            Some(p) => {
                w.u8(1);
                w.u64(p.epoch as u64);
                w.u64(p.step as u64);
                match p.best_val {
                    Some((e, v)) => {
                        w.u8(1);
                        w.u64(e as u64);
                        w.f64(v);
                    }
                    None => w.u8(0),
                }
                w.u32(p.log.records.len() as u32);
                for r in &p.log.records {
                    w.u64(r.epoch as u64);
                    w.u64(r.step as u64);
                    w.f64s(&[r.lr, r.train_bpd, r.val_bpd]);
                }
            }
            None => w.u8(0),
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(MAGIC, VERSION)?;
        let mut f = [0usize; 6];
        for v in &mut f {
            *v = r.u32()? as usize;
        }
        let config = ModelConfig {
            upsampling: f[0],
            num_scales: f[1],
            steps_per_scale: f[2],
            hidden_channels: f[3],
            cond_channels: f[4],
            channels: f[5],
        };
        let mut model = FlowModel::new(config, 0)?;
        let expected = model.params().clone();
        let n = r.u32()? as usize;
        if n != expected.len() {
            return Err(Error::Malformed(format!("{n} parameter tensors, architecture has {}", expected.len())));
        }
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let name = r.str()?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            if name != expected.name(i) || trainable != expected.is_trainable(i) || shape != expected.tensors()[i].shape() {
                return Err(Error::Malformed(format!(
                    "parameter {i} is {name:?} {shape:?}, architecture expects {:?} {:?}",
                    expected.name(i),
                    expected.tensors()[i].shape()
                )));
            }
            let numel = shape.iter().product();
            values.push(Tensor::new(shape, r.f64s(numel)?)?);
        }
        model.params_mut().load_values(values)?;
        let shapes: Vec<Vec<usize>> = expected.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let read_all = |r: &mut Reader| -> Result<Vec<Tensor>> {
            shapes
                .iter()
                .map(|s| Ok(Tensor::new(s.clone(), r.f64s(s.iter().product())?)?))
                .collect()
        };
        let ema = read_all(&mut r)?;
        let optimizer = match r.u8()? {
            0 => None,
            _ => {
                let t = r.usize()?;
                let m = read_all(&mut r)?;
                let v = read_all(&mut r)?;
                Some(OptimizerState { m, v, t })
            }
        };
        let progress = match r.u8()? {
            0 => None,
            _ => {
                let epoch = r.usize()?;
                let step = r.usize()?;
                let best_val = match r.u8()? {
                    0 => None,
                    _ => Some((r.usize()?, r.f64()?)),
                };
                let count = r.u32()? as usize;
                let mut records = Vec::with_capacity(count);
                for _ in 0..count {
                    let epoch = r.usize()?;
                    let step = r.usize()?;
                    let v = r.f64s(3)?;
                    records.push(LogRecord {
                        epoch,
                        step,
                        lr: v[0],
                        train_bpd: v[1],
                        val_bpd: v[2],
                    });
                }
                Some(Progress {
                    epoch,
                    step,
                    best_val,
                    log: TrainingLog { records },
                })
            }
        };
        r.finish()?;
        Ok(Self {
            model,
            ema,
            optimizer,
            progress,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(Error::io(path))?)
    }
}
