//! Analytic gradients against central differences of an independent double-precision forward
//! pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tame_core::nn::{Layer, LayerSpec};
use tame_core::{Network, Tensor};

/// Forward pass of one sample in f64, with parameters overridden by `params` (one vector per
/// parameter tensor, weight then bias per parametric layer).
fn reference_logits(net: &Network, params: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let mut shape = net.input_shape().to_vec();
    let mut a = x.to_vec();
    let mut p = 0;
    for layer in net.layers() {
        let spec: LayerSpec = Layer::spec(layer);
        match spec {
            LayerSpec::Dense { inputs, outputs } => {
                let (w, b) = (&params[p], &params[p + 1]);
                p += 2;
                a = (0..outputs)
                    .map(|o| b[o] + (0..inputs).map(|i| w[o * inputs + i] * a[i]).sum::<f64>())
                    .collect();
                shape = vec![outputs];
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let (w, b) = (&params[p], &params[p + 1]);
                p += 2;
                let (h, wd) = (shape[1], shape[2]);
                let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
                let mut out = vec![0.0; out_channels * oh * ow];
                for oc in 0..out_channels {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut s = b[oc];
                            for c in 0..in_channels {
                                for ki in 0..kernel {
                                    for kj in 0..kernel {
                                        s += w
                                            [((oc * in_channels + c) * kernel + ki) * kernel + kj]
                                            * a[(c * h + y + ki) * wd + xx + kj];
                                    }
                                }
                            }
                            out[(oc * oh + y) * ow + xx] = s;
                        }
                    }
                }
                a = out;
                shape = vec![out_channels, oh, ow];
            }
            LayerSpec::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerSpec::Sigmoid => a.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            LayerSpec::Flatten => shape = vec![a.len()],
            LayerSpec::MaxPool2d { kernel } => {
                let (c, h, wd) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / kernel, wd / kernel);
                let mut out = vec![f64::NEG_INFINITY; c * oh * ow];
                for ch in 0..c {
                    for y in 0..oh * kernel {
                        for xx in 0..ow * kernel {
                            let o = &mut out[(ch * oh + y / kernel) * ow + xx / kernel];
                            *o = o.max(a[(ch * h + y) * wd + xx]);
                        }
                    }
                }
                a = out;
                shape = vec![c, oh, ow];
            }
        }
    }
    a
}

fn reference_loss(net: &Network, params: &[Vec<f64>], xs: &Tensor, ys: &[usize]) -> f64 {
    let n = ys.len();
    let total: f64 = (0..n)
        .map(|i| {
            let x: Vec<f64> = xs.row(i).iter().map(|&v| v as f64).collect();
            let s = reference_logits(net, params, &x);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - s[ys[i]]
        })
        .sum();
    total / n as f64
}

fn check(net: &Network, xs: &Tensor, ys: &[usize]) -> f64 {
    let (_, grads) = net.loss_and_grads(xs, ys).unwrap();
    let mut params: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|t| t.iter().map(|&v| v as f64).collect())
        .collect();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..params.len() {
        let mut numeric = vec![0.0; params[t].len()];
        for j in 0..params[t].len() {
            let orig = params[t][j];
            params[t][j] = orig + eps;
            let up = reference_loss(net, &params, xs, ys);
            params[t][j] = orig - eps;
            let down = reference_loss(net, &params, xs, ys);
            params[t][j] = orig;
            numeric[j] = (up - down) / (2.0 * eps);
        }
        let analytic: Vec<f64> = grads.tensors[t].iter().map(|&g| g as f64).collect();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = norm(&analytic).max(norm(&numeric));
        if scale > 1e-9 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn random_batch(
    rng: &mut ChaCha8Rng,
    item: &[usize],
    n: usize,
    classes: usize,
) -> (Tensor, Vec<usize>) {
    let len: usize = item.iter().product();
    let data = (0..n * len)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect();
    let mut shape = vec![n];
    shape.extend_from_slice(item);
    let ys = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (Tensor::new(shape, data).unwrap(), ys)
}

fn dense_net(rng: &mut ChaCha8Rng) -> Network {
    let specs = [
        LayerSpec::Dense {
            inputs: 6,
            outputs: 8,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 8,
            outputs: 5,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 5,
            outputs: 3,
        },
        LayerSpec::Sigmoid,
    ];
    Network::new(vec![6], &specs, rng).unwrap()
}

fn conv_net(rng: &mut ChaCha8Rng) -> Network {
    let specs = [
        LayerSpec::Conv2d {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2 },
        LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 2,
            kernel: 2,
        },
        LayerSpec::Flatten,
        LayerSpec::Dense {
            inputs: 8,
            outputs: 4,
        },
        LayerSpec::Sigmoid,
    ];
    Network::new(vec![2, 8, 8], &specs, rng).unwrap()
}

/// Largest per-tensor relative error over `nets` seeded networks, alternating dense and conv.
pub fn worst_relative_error(nets: u64) -> f64 {
    (0..nets)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (net, (xs, ys)) = if seed % 2 == 0 {
                let net = dense_net(&mut rng);
                (net, random_batch(&mut rng, &[6], 5, 3))
            } else {
                let net = conv_net(&mut rng);
                (net, random_batch(&mut rng, &[2, 8, 8], 3, 4))
            };
            check(&net, &xs, &ys)
        })
        .fold(0.0, f64::max)
}
