//! Analytic log-determinants against `log|det J|` of a central-difference
//! Jacobian, with the determinant from partially pivoted LU.

mod common;

use common::*;
use flowscale_core::{ActNorm, AffineCoupling, FlowStack, FlowStep, Graph, ParamSet, Tensor};

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        let d = a[col][col];
        assert!(d != 0.0, "singular Jacobian");
        acc += d.abs().ln();
        for row in col + 1..n {
            let f = a[row][col] / d;
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    acc
}

fn fd_log_det(f: impl Fn(&Tensor) -> Vec<f64>, y: &Tensor) -> f64 {
    let n = y.numel();
    let h = 1e-5;
    let mut jac = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut plus = y.clone();
        plus.data_mut()[j] += h;
        let mut minus = y.clone();
        minus.data_mut()[j] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        assert_eq!(fp.len(), n);
        for i in 0..n {
            jac[i][j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    log_abs_det(jac)
}

fn check_stack(stack: &FlowStack, params: &ParamSet, y: &Tensor, u: Option<&Tensor>) {
    assert!(y.numel() <= 48);
    let run = |y: &Tensor| {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let yv = g.constant(y.clone());
        let uv = u.map(|u| g.constant(u.clone()));
        let (z, ld) = stack.forward(&mut g, &p, yv, uv).unwrap();
        (g.value(z).data().to_vec(), g.value(ld).item())
    };
    let analytic = run(y).1;
    let oracle = fd_log_det(|t| run(t).0, y);
    assert!((analytic - oracle).abs() < 1e-3, "analytic {analytic} vs oracle {oracle}");
}

#[test]
fn lu_oracle_on_known_matrix() {
    let a = vec![vec![2.0, 1.0, 0.0], vec![1.0, 3.0, 1.0], vec![0.0, 1.0, 4.0]];
    assert!((log_abs_det(a) - 18.0f64.ln()).abs() < 1e-12);
    let p = vec![vec![0.0, 1.0], vec![-5.0, 0.0]];
    assert!((log_abs_det(p) - 5.0f64.ln()).abs() < 1e-12);
}

#[test]
fn actnorm() {
    let mut params = ParamSet::new();
    let a = ActNorm::with_values(&mut params, "a", &[1.7, -0.4], &[0.3, -1.1]).unwrap();
    let stack = FlowStack::new(vec![FlowStep::ActNorm(a)]);
    check_stack(&stack, &params, &random_tensor(&[2, 2, 2], &mut rng(1)), None);
}

#[test]
fn coupling() {
    for (c, seed) in [(2, 2), (4, 3), (3, 4)] {
        let mut r = rng(seed);
        let mut params = ParamSet::new();
        let cp = AffineCoupling::new(&mut params, "c", c, 2, 4, &mut r).unwrap();
        perturb(&mut params, 0.6, &mut r);
        let stack = FlowStack::new(vec![FlowStep::Coupling(cp)]);
        let y = random_tensor(&[c, 2, 2], &mut r);
        let u = random_tensor(&[2, 2, 2], &mut r);
        check_stack(&stack, &params, &y, Some(&u));
    }
}

#[test]
fn permute_and_squeeze() {
    let params = ParamSet::new();
    let y = random_tensor(&[3, 2, 2], &mut rng(5));
    check_stack(&FlowStack::new(vec![FlowStep::Permute]), &params, &y, None);
    let y = random_tensor(&[2, 4, 4], &mut rng(6));
    check_stack(&FlowStack::new(vec![FlowStep::Squeeze]), &params, &y, None);
}

#[test]
fn full_stacks() {
    let mut r = rng(7);
    let mut params = ParamSet::new();
    let mut steps = vec![FlowStep::Squeeze];
    for i in 0..2 {
        steps.push(FlowStep::ActNorm(ActNorm::identity(&mut params, &format!("a{i}"), 4)));
        steps.push(FlowStep::Coupling(AffineCoupling::new(&mut params, &format!("c{i}"), 4, 0, 4, &mut r).unwrap()));
        steps.push(FlowStep::Permute);
    }
    perturb(&mut params, 0.5, &mut r);
    let stack = FlowStack::new(steps);
    check_stack(&stack, &params, &random_tensor(&[1, 4, 4], &mut r), None);
}

#[test]
fn conditional_model() {
    let m = random_model(small_config(2, 4, 3), 8, 0.4);
    let mut r = rng(9);
    let y = random_field(4, 4, &mut r);
    let x = random_field(2, 2, &mut r);
    let run = |t: &Tensor| {
        let yf = flowscale_core::GridField::from_tensor(t).unwrap();
        let (lat, ld) = m.forward_flow(&yf, &x).unwrap();
        (lat.latents.iter().flat_map(|z| z.data().to_vec()).collect::<Vec<_>>(), ld)
    };
    let y = y.to_tensor();
    let analytic = run(&y).1;
    let oracle = fd_log_det(|t| run(t).0, &y);
    assert!((analytic - oracle).abs() < 1e-3, "{analytic} vs {oracle}");
}
