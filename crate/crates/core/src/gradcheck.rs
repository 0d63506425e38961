//! Central-difference verification of reverse-mode gradients.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::math;
use crate::tensor::Tensor;

/// Relative error used throughout: `|a - n| / max(1e-12, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    math::abs(analytic - numeric) / f64::max(1e-12, math::abs(analytic) + math::abs(numeric))
}

/// Gradient of `f` at `point` by central differences, one coordinate at a time.
pub fn numeric_gradient<F>(f: &F, point: &Tensor, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let y = f(&mut g, x)?;
        Ok(g.value(y).item())
    };
    let mut out = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        out.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }
    Ok(out)
}

/// Gradient of `f` at `point` from one backward pass.
pub fn analytic_gradient<F>(f: &F, point: &Tensor) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), true);
    let y = f(&mut g, x)?;
    g.backward(y)?;
    Ok(g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| alloc::vec![0.0; point.numel()]))
}

/// Max relative error between the backward-pass gradient and central differences
/// of the scalar function `f` at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let analytic = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, step)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Elementwise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    #[test]
    fn cubic_polynomial() {
        // sum(x^3 - 2x)
        let f = |g: &mut Graph, x: Var| {
            let x2 = g.mul(x, x)?;
            let x3 = g.mul(x2, x)?;
            let lin = g.scale(x, 2.0)?;
            let p = g.sub(x3, lin)?;
            g.sum_all(p)
        };
        let err = grad_check(f, &random(&[6], 1, -2.0, 2.0), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let w = random(&[5], 2, -1.0, 1.0);
        let f = move |g: &mut Graph, x: Var| {
            let wv = g.constant(w.clone());
            let p = g.mul(x, wv)?;
            g.sum_all(p)
        };
        let err = grad_check(f, &random(&[5], 3, -1.0, 1.0), 1e-3).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        let f = |g: &mut Graph, x: Var| {
            let y = g.mul(x, x)?;
            g.sum_all(y)
        };
        let point = random(&[4], 4, 0.5, 1.5);
        let mut g = Graph::new();
        g.mul_adjoint_fault = Some(1.1);
        let x = g.leaf(point.clone(), true);
        let y = f(&mut g, x).unwrap();
        g.backward(y).unwrap();
        let analytic = g.grad(x).unwrap().to_vec();
        let numeric = numeric_gradient(&f, &point, 1e-5).unwrap();
        let err = analytic
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        assert!(err > 1e-2, "{err}");
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        // Random weights so the loss exercises every output coordinate differently.
        let w = random(g.shape(y), seed, -1.0, 1.0);
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        g.sum_all(p)
    }

    #[test]
    fn every_elementwise_kind() {
        let kinds = [
            Elementwise::Add,
            Elementwise::Sub,
            Elementwise::Mul,
            Elementwise::Exp,
            Elementwise::Log,
            Elementwise::Tanh,
            Elementwise::Sigmoid,
            Elementwise::LeakyRelu(0.01),
        ];
        for (i, kind) in kinds.into_iter().enumerate() {
            let other = random(&[2, 3], 100 + i as u64, 0.5, 2.0);
            let f = move |g: &mut Graph, x: Var| {
                let y = if kind.is_binary() {
                    let o = g.constant(other.clone());
                    g.elementwise(kind, x, Some(o))?
                } else {
                    g.elementwise(kind, x, None)?
                };
                weighted_sum(g, y, 7)
            };
            // Leaky relu: stay away from the kink.
            let point = if let Elementwise::LeakyRelu(_) = kind {
                Tensor::new([2, 3], alloc::vec![-1.2, 0.7, -0.4, 1.9, 0.3, -2.0]).unwrap()
            } else {
                random(&[2, 3], 200 + i as u64, 0.3, 1.7)
            };
            let err = grad_check(f, &point, 1e-6).unwrap();
            assert!(err < 1e-5, "{kind:?}: {err}");
        }
    }

    #[test]
    fn scalar_broadcast_gradients() {
        let field = random(&[3, 2, 2], 11, -1.0, 1.0);
        let f = move |g: &mut Graph, s: Var| {
            let x = g.constant(field.clone());
            let y = g.mul(x, s)?;
            let z = g.sub(y, s)?;
            weighted_sum(g, z, 12)
        };
        let err = grad_check(f, &Tensor::new([1], alloc::vec![0.8]).unwrap(), 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn conv_input_kernel_and_bias() {
        let kernel = random(&[3, 2, 3, 3], 21, -0.5, 0.5);
        let bias = random(&[3], 22, -0.5, 0.5);
        let input = random(&[2, 5, 4], 23, -1.0, 1.0);
        let (k2, b2) = (kernel.clone(), bias.clone());
        let wrt_input = move |g: &mut Graph, x: Var| {
            let k = g.constant(k2.clone());
            let b = g.constant(b2.clone());
            let y = g.conv2d_same(x, k, b)?;
            g.sum_all(y)
        };
        assert!(grad_check(wrt_input, &input, 1e-5).unwrap() < 1e-6);

        let (x2, b3) = (input.clone(), bias.clone());
        let wrt_kernel = move |g: &mut Graph, k: Var| {
            let x = g.constant(x2.clone());
            let b = g.constant(b3.clone());
            let y = g.conv2d(x, k, b, 1, 2)?;
            weighted_sum(g, y, 24)
        };
        assert!(grad_check(wrt_kernel, &kernel, 1e-5).unwrap() < 1e-6);

        let wrt_bias = move |g: &mut Graph, b: Var| {
            let x = g.constant(input.clone());
            let k = g.constant(kernel.clone());
            let y = g.conv2d_same(x, k, b)?;
            let y2 = g.mul(y, y)?;
            g.sum_all(y2)
        };
        assert!(grad_check(wrt_bias, &bias, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn rearrangements() {
        let idx: alloc::sync::Arc<[usize]> = alloc::vec![3, 0, 0, 5, 2, 1, 4, 4].into();
        let f = move |g: &mut Graph, x: Var| {
            let (a, b) = g.split_channels(x, 1)?;
            let eb = g.exp(b)?;
            let c = g.concat(&[eb, a])?;
            let r = g.reshape(c, &[6])?;
            let gth = g.gather(r, idx.clone(), &[2, 4])?;
            let m = g.reduce(crate::graph::Reduce::Mean, gth, &[1])?;
            let v = g.reshape(m, &[2])?;
            let bc = g.broadcast_channels(v, 2, 3)?;
            weighted_sum(g, bc, 31)
        };
        let err = grad_check(f, &random(&[3, 2], 32, -1.0, 1.0), 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let point = random(&[2, 6, 6], 41, -1.0, 1.0);
        let kernel = random(&[4, 2, 3, 3], 42, -0.5, 0.5);
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(point.clone(), true);
            let k = g.leaf(kernel.clone(), true);
            let b = g.constant(Tensor::zeros([4]));
            let y = g.conv2d_same(x, k, b).unwrap();
            let t = g.tanh(y).unwrap();
            let s = g.sum_all(t).unwrap();
            g.backward(s).unwrap();
            (g.grad(x).unwrap().to_vec(), g.grad(k).unwrap().to_vec())
        };
        let (a, b) = (run(), run());
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
