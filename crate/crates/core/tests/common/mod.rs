#![allow(dead_code)]

use corncount::model::ops::Tensor;
use corncount::model::{Network, NetworkConfig, Reduction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(reduction: Reduction, nonneg: bool) -> NetworkConfig {
    NetworkConfig {
        input_size: 12,
        input_channels: 3,
        stage_channel_widths: vec![3, 4],
        stage_depths: vec![1, 1],
        downsample_factor: 2,
        fusion_taps: vec![0, 1],
        head_channels: vec![4, 1],
        reduction,
        nonneg_output: nonneg,
        output_scale: 0.5,
        seed: 11,
        ..NetworkConfig::default()
    }
}

fn loss(net: &Network<f64>, batch: &[(Tensor<f64>, Vec<f64>)]) -> f64 {
    let mut total = 0.0;
    for (x, gt) in batch {
        let out = net.forward_tensor(x);
        total += out.data.iter().zip(gt).map(|(p, g)| (p - g).powi(2)).sum::<f64>();
    }
    total / batch.len() as f64
}

pub struct GradCheck {
    pub params: usize,
    pub worst_rel: f64,
    pub worst_name: String,
    /// Parameters whose analytic gradient is not negligible.
    pub nonzero: usize,
}

/// Compare analytic gradients of the batch loss with central differences
/// on every parameter of a small f64 network.
pub fn gradient_check(config: NetworkConfig, h: usize, w: usize) -> GradCheck {
    let mut net = Network::<f64>::build_xavier(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // non-zero biases keep a mix of active and inactive units
    let specs = net.param_specs().to_vec();
    for (p, s) in net.params_mut().iter_mut().zip(&specs) {
        if s.name.ends_with(".bias") {
            p.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let batch: Vec<(Tensor<f64>, Vec<f64>)> = (0..2)
        .map(|_| {
            let x = Tensor::from_data(3, h, w, (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect());
            let gt = (0..h * w).map(|_| rng.gen_range(0.0..0.2)).collect();
            (x, gt)
        })
        .collect();

    let mut grads = net.zero_gradients();
    let n = batch.len() as f64;
    for (x, gt) in &batch {
        let (pred, trace) = net.forward_train(x);
        let dout = Tensor::from_data(
            1,
            pred.h,
            pred.w,
            pred.data.iter().zip(gt).map(|(p, g)| 2.0 * (p - g) / n).collect(),
        );
        net.backward(&trace, &dout, &mut grads);
    }

    let step = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut count = 0;
    let mut nonzero = 0;
    for t in 0..specs.len() {
        for i in 0..specs[t].len() {
            let orig = net.params()[t][i];
            net.params_mut()[t][i] = orig + step;
            let plus = loss(&net, &batch);
            net.params_mut()[t][i] = orig - step;
            let minus = loss(&net, &batch);
            net.params_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.tensors[t][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}]", specs[t].name));
            }
            count += 1;
            if analytic.abs() > 1e-9 {
                nonzero += 1;
            }
        }
    }
    GradCheck {
        params: count,
        worst_rel: worst.0,
        worst_name: worst.1,
        nonzero,
    }
}
