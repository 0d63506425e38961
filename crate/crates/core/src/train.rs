//! Maximum-likelihood training with Adam, step-decay learning rate and an
//! exponential moving average of the weights.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, PairedSample};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::graph::{Graph, Var};
use crate::math;
use crate::model::FlowModel;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

/// Temperature of the sample scored by the MSE term.
pub const MSE_SAMPLE_TAU: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub decay_interval: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the sample-MSE term; 0 is pure maximum likelihood.
    pub perceptual_weight: f64,
    /// Standard deviation of the Gaussian noise added to training targets.
    pub jitter: f64,
    /// Global L2 gradient-norm bound.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 2e-4,
            decay: 0.5,
            decay_interval: 200_000,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            ema_decay: 0.999,
            epochs: 35,
            batch_size: 16,
            perceptual_weight: 0.0,
            jitter: 1e-3,
            clip_norm: 100.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidConfig(format!("invalid training config: {what}")));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.decay_interval == 0 {
            return bad("decay interval must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema decay must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.perceptual_weight >= 0.0) {
            return bad("perceptual weight must be non-negative");
        }
        if !(self.jitter >= 0.0) {
            return bad("jitter must be non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }

    /// `lr0 * decay^floor(step / decay_interval)`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let k = (step / self.decay_interval) as i32;
        self.lr0 * math::powi(self.decay, k)
    }

    pub fn adam(&self) -> Adam {
        Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Adam moments and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: usize,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&self, params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::InvalidConfig(format!(
                "adam: {} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite("gradient"));
        }
        state.t += 1;
        let t = state.t as i32;
        let c1 = 1.0 - math::powi(self.beta1, t);
        let c2 = 1.0 - math::powi(self.beta2, t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (math::sqrt(vh) + self.eps);
            }
        }
        Ok(())
    }
}

/// Shadow copy of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(params: &[Tensor]) -> Self {
        Self { shadow: params.to_vec() }
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &[Tensor], decay: f64) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::InvalidConfig(format!(
                "ema holds {} tensors, got {}",
                self.shadow.len(),
                params.len()
            )));
        }
        for (s, p) in self.shadow.iter().zip(params) {
            if s.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "ema",
                    left: s.shape().to_vec(),
                    right: p.shape().to_vec(),
                });
            }
        }
        for (s, p) in self.shadow.iter_mut().zip(params) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        Ok(())
    }
}

/// Decay actually applied at update `t` (0-based): ramps up as
/// `(1 + t) / (10 + t)` until it reaches `ema_decay`.
pub fn ema_decay_at(ema_decay: f64, t: usize) -> f64 {
    let warm = (1.0 + t as f64) / (10.0 + t as f64);
    ema_decay.min(warm)
}

/// Loss contribution of one pair: bits/dim of `y` plus `lambda` times the MSE
/// between a `tau = 0.8` sample for `x` and `truth`. `y` may be jittered;
/// `truth` is the clean target. Returns the loss node and the bits/dim value.
pub fn pair_loss<R: Rng + ?Sized>(
    model: &FlowModel,
    g: &mut Graph,
    p: &Bound,
    y: Var,
    x: Var,
    truth: Var,
    lambda: f64,
    rng: &mut R,
) -> Result<(Var, f64)> {
    let bpd = model.nll_graph(g, p, y, x)?;
    let nll = g.value(bpd).item();
    if lambda == 0.0 {
        return Ok((bpd, nll));
    }
    let pred = model.sample_graph(g, p, x, MSE_SAMPLE_TAU, rng)?;
    let diff = g.sub(pred, truth)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean_all(sq)?;
    let weighted = g.scale(mse, lambda)?;
    let total = g.add(bpd, weighted)?;
    if !g.value(total).is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((total, nll))
}

/// Mean over `batch` of bits/dim plus `lambda` times the sample MSE; the
/// samples draw from `seed`.
pub fn loss(model: &FlowModel, batch: &[(GridField, GridField)], lambda: f64, seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (y, x) in batch {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, false);
        let yv = g.constant(y.to_tensor());
        let xv = g.constant(x.to_tensor());
        let (l, _) = pair_loss(model, &mut g, &p, yv, xv, yv, lambda, &mut rng)?;
        total += g.value(l).item();
    }
    Ok(total / batch.len() as f64)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_bpd: f64,
    pub val_bpd: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "epoch,step,lr,train_bpd,val_bpd";
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:e},{},{}", self.epoch, self.step, self.lr, self.train_bpd, self.val_bpd)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from(LogRecord::HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!("{r}\n"));
        }
        s
    }
}

/// Mutable training state; everything needed to resume at an epoch boundary.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: FlowModel,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub ema: EmaState,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub log: TrainingLog,
    pub best_val: Option<(usize, f64)>,
    /// Per-step loss values, in order.
    pub losses: Vec<f64>,
}

impl Trainer {
    pub fn new(model: FlowModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params().tensors());
        let ema = EmaState::new(model.params().tensors());
        Ok(Self {
            model,
            config,
            optimizer,
            ema,
            epoch: 0,
            step: 0,
            log: TrainingLog::default(),
            best_val: None,
            losses: Vec::new(),
        })
    }

    /// A copy of the model carrying the EMA weights.
    pub fn ema_model(&self) -> Result<FlowModel> {
        let mut m = self.model.clone();
        m.params_mut().load_values(self.ema.shadow.clone())?;
        Ok(m)
    }

    /// Generator for epoch `epoch` (1-based): depends only on the seed and the
    /// epoch so a resumed run replays the same draws.
    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    fn jittered(&self, y: &GridField, rng: &mut ChaCha8Rng) -> Tensor {
        let a = self.config.jitter;
        let mut t = y.to_tensor();
        if a > 0.0 {
            for v in t.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += a * e;
            }
        }
        t
    }

    /// One optimizer update on `batch` with clean targets; returns the mean loss.
    pub fn train_step(&mut self, batch: &[(Tensor, &PairedSample)], sample_seed: u64) -> Result<f64> {
        let (epoch, step) = (self.epoch + 1, self.step);
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Diverged { epoch, step },
            other => other,
        };
        let lambda = self.config.perceptual_weight;
        let params = self.model.params();
        let mut acc: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let mut total = 0.0;
        for (y, pair) in batch {
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let yv = g.constant(y.clone());
            let xv = g.constant(pair.x_lr.to_tensor());
            let truth = g.constant(pair.y_hr.to_tensor());
            let (l, _) = pair_loss(&self.model, &mut g, &p, yv, xv, truth, lambda, &mut rng).map_err(diverged)?;
            total += g.value(l).item();
            g.backward(l)?;
            p.accumulate_grads(&g, &mut acc);
        }
        let n = batch.len() as f64;
        let loss = total / n;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, step });
        }
        let mut sq = 0.0;
        for a in acc.iter_mut() {
            for v in a.data_mut() {
                *v /= n;
                sq += *v * *v;
            }
        }
        let norm = math::sqrt(sq);
        if !norm.is_finite() {
            return Err(Error::Diverged { epoch, step });
        }
        if norm > self.config.clip_norm {
            let f = self.config.clip_norm / norm;
            acc.iter_mut().flat_map(|a| a.data_mut()).for_each(|v| *v *= f);
        }
        let lr = self.config.lr_at(self.step);
        let adam = self.config.adam();
        let trainable: Vec<bool> = (0..params.len()).map(|i| params.is_trainable(i)).collect();
        for (a, &tr) in acc.iter_mut().zip(&trainable) {
            if !tr {
                a.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        adam.step(self.model.params_mut().tensors_mut(), &acc, &mut self.optimizer, lr)?;
        let decay = ema_decay_at(self.config.ema_decay, self.step);
        self.ema.update(self.model.params().tensors(), decay)?;
        self.step += 1;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Runs one epoch and appends its log record.
    pub fn run_epoch(&mut self, dataset: &Dataset) -> Result<LogRecord> {
        if dataset.train.is_empty() {
            return Err(Error::InvalidConfig("empty training split".into()));
        }
        let epoch = self.epoch + 1;
        let mut rng = self.epoch_rng(epoch);
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng);

        if self.step == 0 {
            let first: Vec<(GridField, GridField)> = order
                .iter()
                .take(self.config.batch_size)
                .map(|&i| (dataset.train[i].y_hr.clone(), dataset.train[i].x_lr.clone()))
                .collect();
            self.model.initialize_actnorms(&first)?;
            self.ema = EmaState::new(self.model.params().tensors());
        }

        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<(Tensor, &PairedSample)> = chunk
                .iter()
                .map(|&i| (self.jittered(&dataset.train[i].y_hr, &mut rng), &dataset.train[i]))
                .collect();
            let sample_seed = rng.next_u64();
            sum += self.train_step(&batch, sample_seed)?;
            batches += 1;
        }
        self.epoch = epoch;
        let val_bpd = self.validation_bpd(dataset)?;
        let record = LogRecord {
            epoch,
            step: self.step,
            lr: self.config.lr_at(self.step),
            train_bpd: sum / batches as f64,
            val_bpd,
        };
        if val_bpd.is_finite() && self.best_val.is_none_or(|(_, b)| val_bpd < b) {
            self.best_val = Some((epoch, val_bpd));
        }
        self.log.records.push(record);
        Ok(record)
    }

    /// EMA-weight bits/dim averaged over the validation split; training split
    /// when there is no validation data.
    pub fn validation_bpd(&self, dataset: &Dataset) -> Result<f64> {
        let split = if dataset.validation.is_empty() {
            &dataset.train
        } else {
            &dataset.validation
        };
        mean_bpd(&self.ema_model()?, split)
    }
}

/// Mean bits/dim of clean targets under `model`.
pub fn mean_bpd(model: &FlowModel, pairs: &[PairedSample]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("empty split".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        total += model.nll(&p.y_hr, &p.x_lr)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each one (for
/// checkpointing). With at least one epoch the log opens with an epoch-0
/// record of the untrained model.
pub fn fit<F>(model: FlowModel, dataset: &Dataset, config: &TrainConfig, on_epoch: F) -> Result<Trainer>
where
    F: FnMut(&Trainer, &LogRecord) -> Result<()>,
{
    let trainer = Trainer::new(model, config.clone())?;
    resume(trainer, dataset, on_epoch)
}

/// Continues `trainer` until it has completed `trainer.config.epochs` epochs.
pub fn resume<F>(mut trainer: Trainer, dataset: &Dataset, mut on_epoch: F) -> Result<Trainer>
where
    F: FnMut(&Trainer, &LogRecord) -> Result<()>,
{
    if dataset.train.is_empty() {
        return Err(Error::InvalidConfig("empty training split".into()));
    }
    if trainer.epoch == 0 && trainer.log.records.is_empty() && trainer.config.epochs > 0 {
        let val = trainer.validation_bpd(dataset)?;
        let train = mean_bpd(&trainer.model, &dataset.train[..dataset.train.len().min(trainer.config.batch_size)])?;
        trainer.log.records.push(LogRecord {
            epoch: 0,
            step: 0,
            lr: trainer.config.lr_at(0),
            train_bpd: train,
            val_bpd: val,
        });
    }
    while trainer.epoch < trainer.config.epochs {
        let record = trainer.run_epoch(dataset)?;
        on_epoch(&trainer, &record)?;
    }
    Ok(trainer)
}

/// Parameters of `set` flattened in declaration order.
pub fn flatten(set: &ParamSet) -> Vec<f64> {
    set.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Vec<Tensor> {
        alloc::vec![Tensor::new([1], alloc::vec![v]).unwrap()]
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0), 2e-4);
        assert_eq!(c.lr_at(200_000), 1e-4);
        assert_eq!(c.lr_at(399_999), 1e-4);
        assert_eq!(c.lr_at(400_000), 5e-5);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { decay: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { decay: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { perceptual_weight: -0.1, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = scalar(1.5);
        let mut s = OptimizerState::new(&p);
        TrainConfig::default().adam().step(&mut p, &scalar(0.0), &mut s, 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.5]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p);
        let lr = 1e-3;
        TrainConfig::default().adam().step(&mut p, &scalar(2.0), &mut s, lr).unwrap();
        assert!((1.0 - p[0].data()[0] - lr).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = scalar(1.0);
        let mut s = OptimizerState::new(&p);
        let r = TrainConfig::default().adam().step(&mut p, &scalar(f64::NAN), &mut s, 0.1);
        assert_eq!(r.unwrap_err(), Error::NonFinite("gradient"));
        assert_eq!((s.t, p[0].data()[0]), (0, 1.0));
    }

    #[test]
    fn ema_examples() {
        let theta = scalar(1.0);
        let mut e = EmaState::new(&scalar(0.0));
        e.update(&theta, 0.9).unwrap();
        e.update(&theta, 0.9).unwrap();
        assert!((e.shadow[0].data()[0] - 0.19).abs() < 1e-15);
        let mut e = EmaState::new(&scalar(0.3));
        e.update(&theta, 1.0).unwrap();
        assert_eq!(e.shadow[0].data(), &[0.3]);
        e.update(&theta, 0.0).unwrap();
        assert_eq!(e.shadow[0].data(), &[1.0]);
        assert!(e.update(&[], 0.5).is_err());
    }

    #[test]
    fn ema_warmup_reaches_configured_decay() {
        assert_eq!(ema_decay_at(0.999, 0), 0.1);
        assert_eq!(ema_decay_at(0.999, 100_000), 0.999);
        assert_eq!(ema_decay_at(0.0, 5), 0.0);
        assert_eq!(ema_decay_at(1.0, 5), 0.4);
    }

    #[test]
    fn log_format() {
        let r = LogRecord {
            epoch: 1,
            step: 84,
            lr: 2e-4,
            train_bpd: -1.5,
            val_bpd: -1.25,
        };
        assert_eq!(r.to_string(), "1,84,2e-4,-1.5,-1.25");
    }
}
