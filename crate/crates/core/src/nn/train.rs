use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Result, TameError};
use crate::tensor::Tensor;

use super::{sgd_step, Network, SgdConfig, Velocity};

const EVAL_CHUNK: usize = 256;

/// Minibatch SGD over `(inputs, labels)` for `epochs` passes, reshuffling every epoch. The last
/// partial batch is kept so that small buffers still train. Returns the mean loss per epoch.
pub fn fit<R: Rng + ?Sized>(
    net: &mut Network,
    velocity: &mut Velocity,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &SgdConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<Vec<f32>> {
    fit_with(net, velocity, inputs, labels, cfg, epochs, rng, |_, _| {})
}

/// [`fit`] with `transform` applied to every minibatch before the gradient step.
#[allow(clippy::too_many_arguments)]
pub fn fit_with<R: Rng + ?Sized, F: FnMut(&mut Tensor, &mut R)>(
    net: &mut Network,
    velocity: &mut Velocity,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &SgdConfig,
    epochs: usize,
    rng: &mut R,
    mut transform: F,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    if inputs.rows() != labels.len() {
        return Err(TameError::Shape {
            expected: vec![labels.len()],
            actual: vec![inputs.rows()],
        });
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = inputs.select_rows(chunk);
            transform(&mut x, rng);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = net.loss_and_grads(&x, &y)?;
            sgd_step(net, &grads, cfg, velocity)?;
            total += loss;
            batches += 1;
        }
        history.push(if batches > 0 {
            total / batches as f32
        } else {
            0.0
        });
    }
    Ok(history)
}

/// Translates every `[c, h, w]` item of `batch` by an independent random offset of up to
/// `max_shift` pixels along each axis, filling uncovered pixels with zero. Other shapes are left
/// alone.
pub fn random_shift<R: Rng + ?Sized>(batch: &mut Tensor, max_shift: usize, rng: &mut R) {
    let &[c, h, w] = batch.item_shape() else {
        return;
    };
    if max_shift == 0 {
        return;
    }
    let s = max_shift as i64;
    let item = c * h * w;
    let mut shifted = vec![0.0; item];
    for x in batch.data_mut().chunks_exact_mut(item) {
        let (dy, dx) = (
            rng.random_range(-s..=s) as isize,
            rng.random_range(-s..=s) as isize,
        );
        shifted.fill(0.0);
        for ch in 0..c {
            for y in 0..h as isize {
                let sy = y - dy;
                if !(0..h as isize).contains(&sy) {
                    continue;
                }
                for xx in 0..w as isize {
                    let sx = xx - dx;
                    if (0..w as isize).contains(&sx) {
                        shifted[(ch * h + y as usize) * w + xx as usize] =
                            x[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
        x.copy_from_slice(&shifted);
    }
}

/// Arg-max class per row. Ties resolve to the lowest index.
pub fn predict_classes(net: &Network, inputs: &Tensor) -> Result<Vec<usize>> {
    let k = net.output_dim();
    let mut out = Vec::with_capacity(inputs.rows());
    let all: Vec<usize> = (0..inputs.rows()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let scores = net.forward(&inputs.select_rows(chunk))?;
        out.extend(scores.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose arg-max class equals the label; 0 for an empty set.
pub fn accuracy(net: &Network, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let predicted = predict_classes(net, inputs)?;
    let correct = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::mlp_specs;

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.9, 0.9]), 1);
        assert_eq!(argmax(&[0.5]), 0);
    }

    #[test]
    fn random_shift_moves_content_without_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut data = vec![0.0; 2 * 7 * 7];
        for item in 0..2 {
            data[item * 49 + 3 * 7 + 3] = 1.0 + item as f32;
        }
        let original = Tensor::new(vec![2, 1, 7, 7], data).unwrap();
        let mut x = original.clone();
        random_shift(&mut x, 0, &mut rng);
        assert_eq!(x, original);
        for _ in 0..20 {
            let mut x = original.clone();
            random_shift(&mut x, 2, &mut rng);
            for (item, row) in x.data().chunks(49).enumerate() {
                let hot: Vec<usize> = (0..49).filter(|&i| row[i] != 0.0).collect();
                assert_eq!(hot.len(), 1);
                assert_eq!(row[hot[0]], 1.0 + item as f32);
                let (y, xx) = (hot[0] / 7, hot[0] % 7);
                assert!(y.abs_diff(3) <= 2 && xx.abs_diff(3) <= 2);
            }
        }
        let flat = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut f = flat.clone();
        random_shift(&mut f, 2, &mut rng);
        assert_eq!(f, flat);
    }

    #[test]
    fn fit_keeps_partial_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::new(vec![2], &mlp_specs(&[2], &[4], 2), &mut rng).unwrap();
        let before = net.clone();
        let mut v = Velocity::zeros_like(&net);
        let x = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let history = fit(
            &mut net,
            &mut v,
            &x,
            &[0, 1, 1],
            &SgdConfig::default(),
            2,
            &mut rng,
        )
        .unwrap();
        assert_eq!(history.len(), 2);
        assert_ne!(net, before);
    }
}
