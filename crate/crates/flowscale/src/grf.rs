//! Gaussian random fields with a power-law spectrum.

use flowscale_core::{Error, GridField, Result, ValueRange};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Signed integer frequency of FFT bin `i` out of `n`.
pub fn fft_frequency(i: usize, n: usize) -> f64 {
    if i <= n / 2 {
        i as f64
    } else {
        i as f64 - n as f64
    }
}

/// Synthesizes a field whose power spectrum falls off as `|k|^-beta`, min-max
/// normalized to `[0, 1]`.
///
/// Complex white noise is shaped by `|k|^(-beta/2)` with the mean mode removed,
/// inverse transformed, and the real part kept. The returned range metadata is
/// the pre-normalization range.
pub fn generate_grf(seed: u64, height: usize, width: usize, beta: f64) -> Result<GridField> {
    if height < 8 || width < 8 {
        return Err(Error::ExtentMismatch {
            detail: format!("random fields need extents of at least 8, got {height}x{width}"),
        });
    }
    if !(beta >= 0.0) {
        return Err(Error::Domain {
            op: "generate_grf",
            detail: format!("spectral exponent must be non-negative, got {beta}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectrum: Vec<Complex64> = Vec::with_capacity(height * width);
    for y in 0..height {
        let ky = fft_frequency(y, height);
        for x in 0..width {
            let kx = fft_frequency(x, width);
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            let k2 = kx * kx + ky * ky;
            let amp = if k2 == 0.0 { 0.0 } else { k2.powf(-beta / 4.0) };
            spectrum.push(Complex64::new(re * amp, im * amp));
        }
    }
    ifft2(&mut spectrum, height, width);
    let raw: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let values = raw.iter().map(|v| (v - lo) / span).collect();
    Ok(GridField::new(1, height, width, values)?.with_range(ValueRange { min: lo, max: hi }))
}

fn ifft2(data: &mut [Complex64], height: usize, width: usize) {
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(width).process(data);
    let col_fft = planner.plan_fft_inverse(height);
    let mut col = vec![Complex64::new(0.0, 0.0); height];
    for x in 0..width {
        for y in 0..height {
            col[y] = data[y * width + x];
        }
        col_fft.process(&mut col);
        for y in 0..height {
            data[y * width + x] = col[y];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_normalized() {
        let a = generate_grf(7, 16, 24, 3.0).unwrap();
        let b = generate_grf(7, 16, 24, 3.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_grf(8, 16, 24, 3.0).unwrap());
        assert_eq!(a.min(), 0.0);
        assert_eq!(a.max(), 1.0);
        assert!(a.range.max > a.range.min);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(generate_grf(0, 4, 16, 3.0).is_err());
        assert!(generate_grf(0, 16, 16, -1.0).is_err());
        assert!(generate_grf(0, 8, 8, 0.0).is_ok());
    }

    #[test]
    fn frequencies() {
        let f: Vec<f64> = (0..6).map(|i| fft_frequency(i, 6)).collect();
        assert_eq!(f, [0.0, 1.0, 2.0, 3.0, -2.0, -1.0]);
    }
}
