//! Flow densities integrate to one (trapezoidal quadrature).

mod common;

use common::*;
use flowscale_core::{ActNorm, AffineCoupling, DensityFlow, FlowStack, FlowStep, ParamSet, Tensor};

fn trapezoid_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n - 1 {
        0.5
    } else {
        1.0
    }
}

#[test]
fn one_dimensional_actnorm_density() {
    let mut params = ParamSet::new();
    let a = ActNorm::with_values(&mut params, "a", &[1.8], &[-0.4]).unwrap();
    let flow = DensityFlow {
        params,
        stack: FlowStack::new(vec![FlowStep::ActNorm(a)]),
    };
    let (lo, step) = (-6.0, 0.01);
    let n = 1201;
    let mut total = 0.0;
    for i in 0..n {
        let y = Tensor::new([1, 1, 1], vec![lo + i as f64 * step]).unwrap();
        total += trapezoid_weight(i, n) * flow.log_prob(&y).unwrap().exp();
    }
    total *= step;
    assert!((total - 1.0).abs() < 0.02, "{total}");
}

#[test]
fn two_dimensional_flow_density() {
    let mut r = rng(11);
    let mut params = ParamSet::new();
    let mut steps = Vec::new();
    for i in 0..2 {
        steps.push(FlowStep::ActNorm(
            ActNorm::with_values(&mut params, &format!("a{i}"), &[1.3, 0.8], &[0.1, -0.2]).unwrap(),
        ));
        steps.push(FlowStep::Coupling(AffineCoupling::new(&mut params, &format!("c{i}"), 2, 0, 4, &mut r).unwrap()));
        steps.push(FlowStep::Permute);
    }
    perturb(&mut params, 0.3, &mut r);
    let flow = DensityFlow {
        params,
        stack: FlowStack::new(steps),
    };
    let (lo, step) = (-6.0, 0.05);
    let n = 241;
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let y = Tensor::new([2, 1, 1], vec![lo + i as f64 * step, lo + j as f64 * step]).unwrap();
            let w = trapezoid_weight(i, n) * trapezoid_weight(j, n);
            total += w * flow.log_prob(&y).unwrap().exp();
        }
    }
    total *= step * step;
    assert!((total - 1.0).abs() < 0.02, "{total}");
}
