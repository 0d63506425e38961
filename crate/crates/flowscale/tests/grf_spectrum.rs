//! Radially averaged periodogram slope of synthesized fields, computed with a
//! separable naive DFT so it shares nothing with the FFT-based generator.

use flowscale::generate_grf;

fn dft_power(values: &[f64], n: usize) -> Vec<f64> {
    let tw: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let a = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
            (a.cos(), a.sin())
        })
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    // rows
    let mut rows = vec![(0.0, 0.0); n * n];
    for y in 0..n {
        for k in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for x in 0..n {
                let v = values[y * n + x] - mean;
                let (c, s) = tw[(k * x) % n];
                re += v * c;
                im += v * s;
            }
            rows[y * n + k] = (re, im);
        }
    }
    let mut power = vec![0.0; n * n];
    for kx in 0..n {
        for ky in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..n {
                let (a, b) = rows[y * n + kx];
                let (c, s) = tw[(ky * y) % n];
                re += a * c - b * s;
                im += a * s + b * c;
            }
            power[ky * n + kx] = re * re + im * im;
        }
    }
    power
}

fn radial_slope(power: &[f64], n: usize, kmin: usize, kmax: usize) -> f64 {
    let mut sums = vec![0.0; kmax + 1];
    let mut counts = vec![0usize; kmax + 1];
    for ky in 0..n {
        for kx in 0..n {
            let fy = if ky <= n / 2 { ky as f64 } else { ky as f64 - n as f64 };
            let fx = if kx <= n / 2 { kx as f64 } else { kx as f64 - n as f64 };
            let r = (fx * fx + fy * fy).sqrt().round() as usize;
            if (kmin..=kmax).contains(&r) {
                sums[r] += power[ky * n + kx];
                counts[r] += 1;
            }
        }
    }
    let pts: Vec<(f64, f64)> = (kmin..=kmax).map(|k| ((k as f64).ln(), (sums[k] / counts[k] as f64).ln())).collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

#[test]
fn periodogram_slope_matches_spectral_exponent() {
    let n = 64;
    let mut mean_power = vec![0.0; n * n];
    for seed in 0..50 {
        let f = generate_grf(seed, n, n, 3.0).unwrap();
        for (m, p) in mean_power.iter_mut().zip(dft_power(f.values(), n)) {
            *m += p / 50.0;
        }
    }
    let slope = radial_slope(&mean_power, n, 2, 24);
    assert!((slope + 3.0).abs() < 0.5, "slope {slope}");
}

#[test]
fn flatter_spectrum_for_smaller_exponent() {
    let n = 64;
    let f = generate_grf(11, n, n, 1.0).unwrap();
    let slope = radial_slope(&dft_power(f.values(), n), n, 2, 24);
    assert!((slope + 1.0).abs() < 0.5, "slope {slope}");
}
