//! Point and probabilistic scores, the bicubic baseline, the additive
//! block-mean constraint and ensemble statistics.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{downsample_avg, PairedSample};
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::math;
use crate::model::FlowModel;

/// Catmull-Rom cubic convolution kernel (`a = -0.5`).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = math::abs(x);
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Kernel weights for taps `i0 - 1 ..= i0 + 2` at fractional offset `t` past `i0`.
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    [
        cubic_kernel(t + 1.0),
        cubic_kernel(t),
        cubic_kernel(1.0 - t),
        cubic_kernel(2.0 - t),
    ]
}

/// Source taps and weights along one axis of length `n` upsampled by `s`.
fn axis_taps(n: usize, s: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n * s)
        .map(|dst| {
            let src = (dst as f64 + 0.5) / s as f64 - 0.5;
            let i0 = math::floor(src);
            let t = src - i0;
            let w = catmull_rom_weights(t);
            let mut idx = [0usize; 4];
            for (k, slot) in idx.iter_mut().enumerate() {
                let i = i0 as isize - 1 + k as isize;
                *slot = i.clamp(0, n as isize - 1) as usize;
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic upsampling with pixel-center alignment and edge clamping.
pub fn bicubic_upsample(x_lr: &GridField, s: usize) -> Result<GridField> {
    let (c, h, w) = x_lr.extents();
    if s == 0 {
        return Err(Error::InvalidConfig("upsampling factor must be positive".into()));
    }
    let rows = axis_taps(h, s);
    let cols = axis_taps(w, s);
    let (ho, wo) = (h * s, w * s);
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut tmp = vec![0.0; h * wo];
    for ch in 0..c {
        for y in 0..h {
            for (x, (idx, wt)) in cols.iter().enumerate() {
                tmp[y * wo + x] = (0..4).map(|k| wt[k] * x_lr.at(ch, y, idx[k])).sum();
            }
        }
        for (idx, wt) in &rows {
            for x in 0..wo {
                out.push((0..4).map(|k| wt[k] * tmp[idx[k] * wo + x]).sum());
            }
        }
    }
    Ok(GridField::new(c, ho, wo, out)?.with_range(x_lr.range))
}

pub fn mae(a: &GridField, b: &GridField) -> Result<f64> {
    a.same_extents(b, "mae")?;
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| math::abs(x - y)).sum::<f64>() / a.len() as f64)
}

pub fn rmse(a: &GridField, b: &GridField) -> Result<f64> {
    a.same_extents(b, "rmse")?;
    let mse = a.values().iter().zip(b.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(math::sqrt(mse))
}

/// Pixelwise `|prediction - truth|`.
pub fn error_map(prediction: &GridField, truth: &GridField) -> Result<GridField> {
    prediction.same_extents(truth, "error map")?;
    let (c, h, w) = truth.extents();
    let v = prediction
        .values()
        .iter()
        .zip(truth.values())
        .map(|(p, t)| math::abs(p - t))
        .collect();
    GridField::new(c, h, w, v)
}

/// Ensemble CRPS per pixel,
/// `(1/n) sum_i |x_i - y| - (1/(2 n^2)) sum_i sum_j |x_i - x_j|`, averaged over pixels.
pub fn crps_ensemble(members: &[GridField], y: &GridField) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    for m in members {
        m.same_extents(y, "crps")?;
    }
    let n = members.len() as f64;
    let mut sorted = vec![0.0; members.len()];
    let mut total = 0.0;
    for (p, &obs) in y.values().iter().enumerate() {
        for (slot, m) in sorted.iter_mut().zip(members) {
            *slot = m.values()[p];
        }
        let skill: f64 = sorted.iter().map(|x| math::abs(x - obs)).sum::<f64>() / n;
        // sum_i sum_j |x_i - x_j| = 2 sum_k (2k - n + 1) x_(k) over sorted values
        sorted.sort_by(f64::total_cmp);
        let spread: f64 = sorted
            .iter()
            .enumerate()
            .map(|(k, x)| (2.0 * k as f64 - n + 1.0) * x)
            .sum::<f64>()
            * 2.0;
        total += skill - spread / (2.0 * n * n);
    }
    Ok(total / y.len() as f64)
}

/// Per-pixel sample mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    pub mean: GridField,
    pub std: GridField,
    pub members: usize,
}

pub fn ensemble_stats(members: &[GridField]) -> Result<EnsembleStats> {
    let first = members.first().ok_or(Error::EmptyEnsemble)?;
    for m in members {
        m.same_extents(first, "ensemble")?;
    }
    let n = members.len() as f64;
    let (c, h, w) = first.extents();
    let mut mean = vec![0.0; first.len()];
    for m in members {
        mean.iter_mut().zip(m.values()).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= n);
    let mut var = vec![0.0; first.len()];
    for m in members {
        for ((v, x), mu) in var.iter_mut().zip(m.values()).zip(&mean) {
            *v += (x - mu) * (x - mu);
        }
    }
    let std = var.iter().map(|v| math::sqrt(v / n)).collect();
    Ok(EnsembleStats {
        mean: GridField::new(c, h, w, mean)?.with_range(first.range),
        std: GridField::new(c, h, w, std)?,
        members: members.len(),
    })
}

/// Shifts every `s x s` block of `y_hr` so its mean equals the LR pixel.
pub fn apply_additive_constraint(y_hr: &GridField, x_lr: &GridField, s: usize) -> Result<GridField> {
    let (c, h, w) = y_hr.extents();
    if x_lr.extents() != (c, h / s.max(1), w / s.max(1)) || h % s.max(1) != 0 || w % s.max(1) != 0 || s == 0 {
        return Err(Error::ExtentMismatch {
            detail: format!("HR {:?} and LR {:?} are not related by {s}", y_hr.extents(), x_lr.extents()),
        });
    }
    let block_means = downsample_avg(y_hr, s)?;
    let mut out = y_hr.clone();
    let (lh, lw) = (h / s, w / s);
    let v = out.values_mut();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let l = (ch * lh + y / s) * lw + x / s;
                v[(ch * h + y) * w + x] += x_lr.values()[l] - block_means.values()[l];
            }
        }
    }
    Ok(out)
}

/// Central-difference gradient magnitude with clamped neighbours.
pub fn gradient_magnitude(field: &GridField) -> GridField {
    let (c, h, w) = field.extents();
    let mut out = Vec::with_capacity(field.len());
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let gx = (field.at(ch, y, (x + 1).min(w - 1)) - field.at(ch, y, x.saturating_sub(1))) / 2.0;
                let gy = (field.at(ch, (y + 1).min(h - 1), x) - field.at(ch, y.saturating_sub(1), x)) / 2.0;
                out.push(math::sqrt(gx * gx + gy * gy));
            }
        }
    }
    GridField::new(c, h, w, out).expect("same extents as input")
}

/// Ranks starting at 0, ties receive their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut r = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / math::sqrt(va * vb)
    }
}

/// What produces high-resolution predictions.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Bicubic,
    Flow { model: &'a FlowModel, constrained: bool },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub crps: f64,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: math::sqrt(var),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub model: String,
    pub tau: f64,
    pub ensemble_size: usize,
    pub per_sample: Vec<SampleMetrics>,
}

impl MetricsReport {
    pub fn mae(&self) -> Summary {
        Summary::of(self.per_sample.iter().map(|m| m.mae))
    }

    pub fn rmse(&self) -> Summary {
        Summary::of(self.per_sample.iter().map(|m| m.rmse))
    }

    pub fn crps(&self) -> Summary {
        Summary::of(self.per_sample.iter().map(|m| m.crps))
    }
}

/// Everything computed for one test sample.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    /// Point prediction: the ensemble mean for flows.
    pub prediction: GridField,
    pub members: Vec<GridField>,
    pub error: GridField,
    /// Per-pixel ensemble spread; `None` for deterministic predictors.
    pub std: Option<GridField>,
    pub metrics: SampleMetrics,
}

/// Scores one sample. Flow ensembles use seeds `seed .. seed + n - 1`.
pub fn evaluate_sample(predictor: Predictor<'_>, sample: &PairedSample, tau: f64, n: usize, seed: u64) -> Result<SampleOutcome> {
    let s = sample.upsampling;
    let (members, std) = match predictor {
        Predictor::Bicubic => (vec![bicubic_upsample(&sample.x_lr, s)?], None),
        Predictor::Flow { model, constrained } => {
            let mut members = model.sample_ensemble(&sample.x_lr, tau, n, seed)?;
            if constrained {
                for m in members.iter_mut() {
                    *m = apply_additive_constraint(m, &sample.x_lr, s)?;
                }
            }
            (members, Some(()))
        }
    };
    for m in &members {
        if !m.values().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("prediction"));
        }
    }
    let stats = ensemble_stats(&members)?;
    let prediction = stats.mean;
    let metrics = SampleMetrics {
        mae: mae(&prediction, &sample.y_hr)?,
        rmse: rmse(&prediction, &sample.y_hr)?,
        crps: crps_ensemble(&members, &sample.y_hr)?,
    };
    Ok(SampleOutcome {
        error: error_map(&prediction, &sample.y_hr)?,
        prediction,
        members,
        std: std.map(|_| stats.std),
        metrics,
    })
}

/// Scores a predictor over a test split. Sample `i` draws its ensemble from
/// seeds starting at `base_seed + i * n`. `on_sample` sees every outcome.
pub fn evaluate<F>(
    name: &str,
    predictor: Predictor<'_>,
    test: &[PairedSample],
    tau: f64,
    n: usize,
    base_seed: u64,
    mut on_sample: F,
) -> Result<MetricsReport>
where
    F: FnMut(usize, &SampleOutcome) -> Result<()>,
{
    if test.is_empty() {
        return Err(Error::InvalidConfig("empty test split".into()));
    }
    let ensemble_size = match predictor {
        Predictor::Bicubic => 1,
        Predictor::Flow { .. } => n,
    };
    let mut per_sample = Vec::with_capacity(test.len());
    for (i, sample) in test.iter().enumerate() {
        let seed = base_seed.wrapping_add((i * ensemble_size) as u64);
        let outcome = evaluate_sample(predictor, sample, tau, ensemble_size, seed)?;
        on_sample(i, &outcome)?;
        per_sample.push(outcome.metrics);
    }
    Ok(MetricsReport {
        model: name.into(),
        tau,
        ensemble_size,
        per_sample,
    })
}
