mod common;

use common::*;
use flowscale_core::gradcheck::relative_error;
use flowscale_core::{FlowModel, GridField, Graph, ModelConfig};

fn bpd(m: &FlowModel, y: &GridField, x: &GridField) -> f64 {
    m.nll(y, x).unwrap()
}

#[test]
fn bits_per_dim_parameter_gradient() {
    let config = ModelConfig {
        upsampling: 2,
        num_scales: 1,
        steps_per_scale: 1,
        hidden_channels: 2,
        cond_channels: 1,
        channels: 1,
    };
    let mut m = random_model(config, 3, 1.0);
    assert!(m.params().trainable_count() <= 500, "{}", m.params().trainable_count());
    let mut r = rng(4);
    let y = random_field(4, 4, &mut r);
    let x = random_field(2, 2, &mut r);

    let mut g = Graph::new();
    let p = m.params().bind(&mut g, true);
    let yv = g.constant(y.to_tensor());
    let xv = g.constant(x.to_tensor());
    let loss = m.nll_graph(&mut g, &p, yv, xv).unwrap();
    g.backward(loss).unwrap();
    let mut grads: Vec<_> = m.params().tensors().iter().map(|t| flowscale_core::Tensor::zeros(t.shape().to_vec())).collect();
    p.accumulate_grads(&g, &mut grads);

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..m.params().len() {
        if !m.params().is_trainable(i) {
            continue;
        }
        for j in 0..m.params().tensors()[i].numel() {
            let orig = m.params().tensors()[i].data()[j];
            m.params_mut().tensors_mut()[i].data_mut()[j] = orig + h;
            let fp = bpd(&m, &y, &x);
            m.params_mut().tensors_mut()[i].data_mut()[j] = orig - h;
            let fm = bpd(&m, &y, &x);
            m.params_mut().tensors_mut()[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let e = relative_error(grads[i].data()[j], numeric);
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert_eq!(checked, m.params().trainable_count());
    assert!(worst < 1e-4, "max relative error {worst}");
}
