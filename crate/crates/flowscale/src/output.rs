//! Grayscale map images and the metrics table.

use std::fs;
use std::path::Path;

use flowscale_core::{GridField, MetricsReport};
use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// `round(255 * clamp(v, 0, 1))`.
pub fn to_byte(v: f64) -> u8 {
    let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (255.0 * c).round() as u8
}

/// Encodes the first channel of `field` as an 8-bit grayscale PNG.
pub fn write_png(path: &Path, field: &GridField) -> Result<()> {
    let (w, h) = (field.width() as u32, field.height() as u32);
    let img = GrayImage::from_fn(w, h, |x, y| Luma([to_byte(field.at(0, y as usize, x as usize))]));
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub const CSV_HEADER: &str = "model,MAE,MAE_std,RMSE,RMSE_std,CRPS,CRPS_std";

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        let (a, b, c) = (r.mae(), r.rmse(), r.crps());
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.model, a.mean, a.std, b.mean, b.std, c.mean, c.std
        ));
    }
    s
}

pub fn write_metrics_csv(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    fs::write(path, metrics_csv(reports)).map_err(Error::io(path))
}
