//! Dataset construction: normalization, mean-preserving coarsening, splits.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{GridField, ValueRange};

/// Maps `field` affinely so that `zmin -> 0` and `zmax -> 1`.
///
/// The returned field's range metadata composes with the input's, so
/// [`minmax_denormalize`] (or `range.denormalize`) recovers source units.
pub fn minmax_normalize(field: &GridField, zmin: f64, zmax: f64) -> Result<GridField> {
    if !(zmax > zmin) {
        return Err(Error::InvalidConfig(format!("normalization needs zmax > zmin, got [{zmin}, {zmax}]")));
    }
    let span = zmax - zmin;
    let (c, h, w) = field.extents();
    let values = field.values().iter().map(|v| (v - zmin) / span).collect();
    let range = ValueRange {
        min: field.range.denormalize(zmin),
        max: field.range.denormalize(zmax),
    };
    Ok(GridField::new(c, h, w, values)?.with_range(range))
}

/// Inverse of [`minmax_normalize`] for the same `(zmin, zmax)`.
pub fn minmax_denormalize(field: &GridField, zmin: f64, zmax: f64, original: ValueRange) -> Result<GridField> {
    if !(zmax > zmin) {
        return Err(Error::InvalidConfig(format!("normalization needs zmax > zmin, got [{zmin}, {zmax}]")));
    }
    let (c, h, w) = field.extents();
    let values = field.values().iter().map(|v| v * (zmax - zmin) + zmin).collect();
    Ok(GridField::new(c, h, w, values)?.with_range(original))
}

/// Block-mean coarsening: every LR pixel is the mean of its `s x s` HR block.
pub fn downsample_avg(y_hr: &GridField, s: usize) -> Result<GridField> {
    let (c, h, w) = y_hr.extents();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::ExtentMismatch {
            detail: format!("{h}x{w} is not divisible by {s}"),
        });
    }
    let (ho, wo) = (h / s, w / s);
    let inv = 1.0 / (s * s) as f64;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for dy in 0..s {
                    for dx in 0..s {
                        acc += y_hr.at(ch, i * s + dy, j * s + dx);
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Ok(GridField::new(c, ho, wo, out)?.with_range(y_hr.range))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

/// Corpus-level min/max, tagged with the split it was computed on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub zmin: f64,
    pub zmax: f64,
    provenance: SplitKind,
}

impl NormStats {
    pub fn fit(fields: &[GridField], split: SplitKind) -> Result<Self> {
        let zmin = fields.iter().map(GridField::min).fold(f64::INFINITY, f64::min);
        let zmax = fields.iter().map(GridField::max).fold(f64::NEG_INFINITY, f64::max);
        if !(zmax > zmin) {
            return Err(Error::InvalidConfig(format!("degenerate value range [{zmin}, {zmax}]")));
        }
        Ok(Self {
            zmin,
            zmax,
            provenance: split,
        })
    }

    pub fn provenance(&self) -> SplitKind {
        self.provenance
    }

    /// Normalizes `field`; refuses statistics that were not fitted on the training split.
    pub fn apply(&self, field: &GridField) -> Result<GridField> {
        if self.provenance != SplitKind::Train {
            return Err(Error::NormProvenance);
        }
        minmax_normalize(field, self.zmin, self.zmax)
    }
}

/// A coarse input together with its fine target.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub x_lr: GridField,
    pub y_hr: GridField,
    pub upsampling: usize,
}

impl PairedSample {
    pub fn from_hr(y_hr: GridField, upsampling: usize) -> Result<Self> {
        let x_lr = downsample_avg(&y_hr, upsampling)?;
        Ok(Self { x_lr, y_hr, upsampling })
    }
}

/// Disjoint train/validation/test index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    /// Shuffled 4:1:1 split of `n` items.
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n < 6 {
            return Err(Error::CorpusTooSmall(n));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = n * 4 / 6;
        let n_val = n / 6;
        let test = idx.split_off(n_train + n_val);
        let validation = idx.split_off(n_train);
        Ok(Self {
            train: idx,
            validation,
            test,
            seed,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PairedSample>,
    pub validation: Vec<PairedSample>,
    pub test: Vec<PairedSample>,
    pub split: DatasetSplit,
    pub norm: NormStats,
}

/// Splits `corpus`, fits normalization on the training split, normalizes every
/// split with it and builds LR/HR pairs by block-mean coarsening.
pub fn build_dataset(corpus: &[GridField], upsampling: usize, split_seed: u64) -> Result<Dataset> {
    let split = DatasetSplit::new(corpus.len(), split_seed)?;
    let train_fields: Vec<GridField> = split.train.iter().map(|&i| corpus[i].clone()).collect();
    let norm = NormStats::fit(&train_fields, SplitKind::Train)?;
    let pairs = |idx: &[usize]| -> Result<Vec<PairedSample>> {
        idx.iter()
            .map(|&i| PairedSample::from_hr(norm.apply(&corpus[i])?, upsampling))
            .collect()
    };
    Ok(Dataset {
        train: pairs(&split.train)?,
        validation: pairs(&split.validation)?,
        test: pairs(&split.test)?,
        split,
        norm,
    })
}
