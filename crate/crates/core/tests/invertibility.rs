mod common;

use common::*;
use flowscale_core::flow::{squeeze, unsqueeze};
use flowscale_core::{ActNorm, AffineCoupling, FlowStep, Graph, ParamSet, Tensor};
use rand::Rng;

fn round_trip(step: &FlowStep, params: &ParamSet, y: &Tensor, u: Option<&Tensor>) -> f64 {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let yv = g.constant(y.clone());
    let uv = u.map(|u| g.constant(u.clone()));
    let (z, _) = step.forward(&mut g, &p, yv, uv).unwrap();
    let back = step.inverse(&mut g, &p, z, uv).unwrap();
    g.value(back).max_abs_diff(y)
}

#[test]
fn each_layer_kind_inverts() {
    for seed in 0..100u64 {
        let mut r = rng(seed);
        let c = 2 * r.random_range(1..4);
        let (h, w) = (2 * r.random_range(1..4), 2 * r.random_range(1..4));
        let y = random_tensor(&[c, h, w], &mut r);
        let u = random_tensor(&[3, h, w], &mut r);
        let mut params = ParamSet::new();

        let scale: Vec<f64> = (0..c)
            .map(|_| {
                let m = r.random_range(0.2..3.0);
                if r.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let bias: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
        let act = FlowStep::ActNorm(ActNorm::with_values(&mut params, "a", &scale, &bias).unwrap());
        let coup = FlowStep::Coupling(AffineCoupling::new(&mut params, "c", c, 3, 5, &mut r).unwrap());
        perturb(&mut params, 0.5, &mut r);

        assert!(round_trip(&act, &params, &y, None) < 1e-6, "actnorm seed {seed}");
        assert!(round_trip(&coup, &params, &y, Some(&u)) < 1e-6, "coupling seed {seed}");
        assert!(round_trip(&FlowStep::Permute, &params, &y, None) < 1e-6);
        assert_eq!(round_trip(&FlowStep::Squeeze, &params, &y, None), 0.0);

        let mut g = Graph::new();
        let z = g.constant(random_tensor(&[4 * c, h / 2, w / 2], &mut r));
        let y2 = unsqueeze(&mut g, z).unwrap();
        let back = squeeze(&mut g, y2).unwrap();
        assert_eq!(g.value(back), g.value(z));
    }
}

#[test]
fn two_scale_models_invert() {
    let config = small_config(2, 6, 4);
    for seed in 0..100u64 {
        let m = random_model(config.clone(), seed, 0.3);
        let mut r = rng(1000 + seed);
        let y = random_field(8, 8, &mut r);
        let x = random_field(4, 4, &mut r);
        let (lat, _) = m.forward_flow(&y, &x).unwrap();
        let back = m.inverse_flow(&lat, &x).unwrap();
        let err = back
            .values()
            .iter()
            .zip(y.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-5, "seed {seed}: {err}");
    }
}
