//! Selector network (input → expert id), L1 magnitude pruning and masked retraining, and routed
//! prediction.

use rand::Rng;

use crate::buffers::{PruneSample, ReservoirBuffer, SelectorSample, SnapshotPayload};
use crate::error::{Result, TameError};
use crate::nn::{
    conv_expert_specs, fit_with, mlp_specs, predict_classes, random_shift, Network, SgdConfig,
    Velocity,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorArch {
    /// One hidden relu layer of `hidden` units.
    Mlp,
    /// The convolutional expert layout with one output per expert; image inputs only.
    Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectorConfig {
    pub arch: SelectorArch,
    pub hidden: usize,
    pub epochs: usize,
    /// Largest random translation in pixels applied to image inputs during training; 0 disables.
    pub max_shift: usize,
    pub sgd: SgdConfig,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            arch: SelectorArch::Mlp,
            hidden: 256,
            epochs: 10,
            max_shift: 0,
            sgd: SgdConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneConfig {
    /// Fraction of weights removed from every expert layer.
    pub expert_rate: f64,
    /// Fraction of weights removed from every selector layer.
    pub selector_rate: f64,
    pub retrain_epochs: usize,
    /// Lower bound on the number of expert retraining steps; small buffers get extra epochs.
    pub retrain_min_steps: usize,
    /// Cosine-anneal the expert retraining learning rate to zero, one value per epoch.
    pub retrain_anneal: bool,
    /// Largest random translation in pixels applied to image inputs while retraining experts.
    pub retrain_shift: usize,
    pub retrain_sgd: SgdConfig,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            expert_rate: 0.98,
            selector_rate: 0.5,
            retrain_epochs: 20,
            retrain_min_steps: 640,
            retrain_anneal: true,
            retrain_shift: 0,
            retrain_sgd: SgdConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                nesterov: true,
                weight_decay: 1e-4,
                batch_size: 32,
            },
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, rate) in [
            ("expert_rate", self.expert_rate),
            ("selector_rate", self.selector_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(TameError::config(format!(
                    "{name} must be in [0, 1), got {rate}"
                )));
            }
        }
        self.retrain_sgd.validate()
    }
}

/// Network classifying inputs into expert ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectorNet {
    net: Network,
}

impl SelectorNet {
    pub fn from_network(net: Network) -> Self {
        SelectorNet { net }
    }

    pub fn net(&self) -> &Network {
        &self.net
    }

    pub fn experts(&self) -> usize {
        self.net.output_dim()
    }

    /// Expert id per input row.
    pub fn route(&self, inputs: &Tensor) -> Result<Vec<usize>> {
        predict_classes(&self.net, inputs)
    }
}

fn stack_samples<T: SnapshotPayload>(samples: &[&T]) -> Result<(Tensor, Vec<usize>)> {
    let item_shape = samples[0].input().shape().to_vec();
    let x = Tensor::stack(&item_shape, samples.iter().map(|s| s.input().data()))?;
    let y = samples.iter().map(|s| s.label()).collect();
    Ok((x, y))
}

/// Trains a fresh selector on the buffer's `(x, expert_id)` pairs, then prunes it by
/// `prune.selector_rate` and retrains it on the same samples with the mask fixed.
pub fn train_selector<R: Rng + ?Sized>(
    buffer: &ReservoirBuffer<SelectorSample>,
    experts: usize,
    cfg: &SelectorConfig,
    prune: &PruneConfig,
    rng: &mut R,
) -> Result<SelectorNet> {
    let samples = buffer.drain();
    if samples.is_empty() {
        return Err(TameError::EmptyBuffer("selector buffer"));
    }
    if let Some(s) = samples.iter().find(|s| s.expert_id >= experts) {
        return Err(TameError::Label {
            label: s.expert_id,
            classes: experts,
        });
    }
    let (x, y) = stack_samples(&samples)?;
    let specs = match cfg.arch {
        SelectorArch::Mlp => mlp_specs(x.item_shape(), &[cfg.hidden], experts),
        SelectorArch::Conv => conv_expert_specs(x.item_shape(), experts)?,
    };
    let mut net = Network::new(x.item_shape().to_vec(), &specs, rng)?;
    let mut velocity = Velocity::zeros_like(&net);
    let shift = |b: &mut Tensor, r: &mut R| random_shift(b, cfg.max_shift, r);
    fit_with(
        &mut net,
        &mut velocity,
        &x,
        &y,
        &cfg.sgd,
        cfg.epochs,
        rng,
        shift,
    )?;

    if prune.selector_rate > 0.0 {
        prune_l1(&mut net, prune.selector_rate)?;
        let mut velocity = Velocity::zeros_like(&net);
        fit_with(
            &mut net,
            &mut velocity,
            &x,
            &y,
            &prune.retrain_sgd,
            prune.retrain_epochs,
            rng,
            shift,
        )?;
    }
    Ok(SelectorNet { net })
}

/// Number of weights removed from a layer of `n` weights at `rate`, so that exactly
/// `ceil(n · (1 − rate))` survive.
pub fn pruned_count(n: usize, rate: f64) -> usize {
    // The epsilon absorbs representation error in products like 100 · 0.98.
    ((n as f64 * rate + 1e-9).floor() as usize).min(n)
}

/// Zeroes the `rate` fraction of smallest-magnitude weights in every parametric layer and
/// records the survivors as the layer mask. Biases are untouched.
pub fn prune_l1(net: &mut Network, rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(TameError::config(format!(
            "prune rate must be in [0, 1), got {rate}"
        )));
    }
    for layer in net
        .layers_mut()
        .iter_mut()
        .filter(|l| l.spec().has_params())
    {
        let n = layer.weight.len();
        let drop = pruned_count(n, rate);
        let mut order: Vec<usize> = (0..n).collect();
        // Previously masked weights are zero and go first.
        order.sort_by(|&a, &b| {
            layer.weight[a]
                .abs()
                .total_cmp(&layer.weight[b].abs())
                .then(a.cmp(&b))
        });
        let mut mask = layer.mask.take().unwrap_or_else(|| vec![true; n]);
        for &i in &order[..drop] {
            mask[i] = false;
            layer.weight[i] = 0.0;
        }
        layer.mask = Some(mask);
    }
    Ok(())
}

const RETRAIN_WARMUP_EPOCHS: usize = 3;

/// Retrains a pruned network on its prune buffer with the mask held fixed. Returns `false`
/// without touching the network when the buffer is empty.
pub fn retrain_pruned<R: Rng + ?Sized>(
    net: &mut Network,
    buffer: &ReservoirBuffer<PruneSample>,
    cfg: &PruneConfig,
    rng: &mut R,
) -> Result<bool> {
    let samples = buffer.drain();
    if samples.is_empty() {
        return Ok(false);
    }
    let (x, y) = stack_samples(&samples)?;
    let mut velocity = Velocity::zeros_like(net);
    let shift = |b: &mut Tensor, r: &mut R| random_shift(b, cfg.retrain_shift, r);
    let per_epoch = y.len().div_ceil(cfg.retrain_sgd.batch_size.max(1));
    let epochs = cfg
        .retrain_epochs
        .max(cfg.retrain_min_steps.div_ceil(per_epoch));
    if !cfg.retrain_anneal {
        fit_with(
            net,
            &mut velocity,
            &x,
            &y,
            &cfg.retrain_sgd,
            epochs,
            rng,
            shift,
        )?;
        return Ok(true);
    }
    for e in 0..epochs {
        let mut sgd = cfg.retrain_sgd;
        let t = e as f32 / epochs as f32;
        let warm = ((e + 1) as f32 / RETRAIN_WARMUP_EPOCHS as f32).min(1.0);
        sgd.learning_rate *= warm * 0.5 * (1.0 + (std::f32::consts::PI * t).cos());
        fit_with(net, &mut velocity, &x, &y, &sgd, 1, rng, shift)?;
    }
    Ok(true)
}

/// Global class for every input row: the selector picks an expert, the expert picks a local
/// class, and `label_maps[expert][local]` translates it. Unmapped outputs yield `usize::MAX`.
pub fn predict(
    selector: &SelectorNet,
    experts: &[Network],
    inputs: &Tensor,
    label_maps: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let routes = selector.route(inputs)?;
    predict_routed(experts, inputs, &routes, label_maps)
}

/// Like [`predict`] with an explicit expert id per row.
pub fn predict_routed(
    experts: &[Network],
    inputs: &Tensor,
    routes: &[usize],
    label_maps: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let mut out = vec![usize::MAX; routes.len()];
    for (id, net) in experts.iter().enumerate() {
        let rows: Vec<usize> = (0..routes.len()).filter(|&i| routes[i] == id).collect();
        if rows.is_empty() {
            continue;
        }
        let local = predict_classes(net, &inputs.select_rows(&rows))?;
        let map = label_maps.get(id);
        for (&row, &l) in rows.iter().zip(&local) {
            out[row] = map.and_then(|m| m.get(l)).copied().unwrap_or(usize::MAX);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::LayerSpec;

    fn dense_net(inputs: usize, outputs: usize, weights: &[f32]) -> Network {
        let mut net = Network::zeroed(
            vec![inputs],
            &[LayerSpec::Dense { inputs, outputs }, LayerSpec::Sigmoid],
        )
        .unwrap();
        for (i, &w) in weights.iter().enumerate() {
            net.set_param(0, i, w);
        }
        net
    }

    #[test]
    fn rate_zero_is_identity_apart_from_mask() {
        let mut net = dense_net(2, 2, &[1.0, -2.0, 3.0, -4.0]);
        let before = net.params()[0].to_vec();
        prune_l1(&mut net, 0.0).unwrap();
        assert_eq!(net.params()[0], before.as_slice());
        assert!(net.layers()[0].mask().unwrap().iter().all(|&k| k));
    }

    #[test]
    fn half_rate_drops_smallest_magnitudes() {
        let mut net = dense_net(2, 2, &[1.0, -2.0, 3.0, -4.0]);
        prune_l1(&mut net, 0.5).unwrap();
        assert_eq!(net.params()[0], &[0.0, 0.0, 3.0, -4.0]);
        assert_eq!(net.layers()[0].mask().unwrap(), &[false, false, true, true]);
    }

    #[test]
    fn ninety_eight_percent_of_hundred_keeps_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let specs = [
            LayerSpec::Dense {
                inputs: 10,
                outputs: 10,
            },
            LayerSpec::Sigmoid,
        ];
        let mut net = Network::new(vec![10], &specs, &mut rng).unwrap();
        prune_l1(&mut net, 0.98).unwrap();
        assert_eq!(net.params()[0].iter().filter(|&&w| w != 0.0).count(), 2);
        assert_eq!(pruned_count(100, 0.98), 98);
        assert_eq!(pruned_count(144, 0.98), 141);
    }

    #[test]
    fn rejects_rate_of_one() {
        let mut net = dense_net(2, 1, &[1.0, 2.0]);
        assert!(prune_l1(&mut net, 1.0).is_err());
    }

    #[test]
    fn empty_buffers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sel: ReservoirBuffer<SelectorSample> = ReservoirBuffer::new(4, 0);
        assert!(matches!(
            train_selector(
                &sel,
                1,
                &SelectorConfig::default(),
                &PruneConfig::default(),
                &mut rng
            ),
            Err(TameError::EmptyBuffer(_))
        ));
        let mut net = dense_net(2, 1, &[1.0, 2.0]);
        let before = net.clone();
        let prune: ReservoirBuffer<PruneSample> = ReservoirBuffer::new(4, 0);
        assert!(!retrain_pruned(&mut net, &prune, &PruneConfig::default(), &mut rng).unwrap());
        assert_eq!(net, before);
    }

    #[test]
    fn single_expert_selector_routes_everything_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut buf = ReservoirBuffer::new(20, 0);
        for i in 0..20 {
            let x = Tensor::new(vec![3], vec![i as f32, 1.0, -1.0]).unwrap();
            buf.offer(SelectorSample { x, expert_id: 0 });
        }
        let cfg = SelectorConfig {
            hidden: 8,
            epochs: 2,
            ..Default::default()
        };
        let sel = train_selector(&buf, 1, &cfg, &PruneConfig::default(), &mut rng).unwrap();
        let probe = Tensor::new(vec![2, 3], vec![5.0, 0.0, 0.0, -3.0, 2.0, 1.0]).unwrap();
        assert_eq!(sel.route(&probe).unwrap(), vec![0, 0]);
    }

    #[test]
    fn routed_prediction_maps_local_to_global() {
        // expert 0 always answers local 1, expert 1 always local 0
        let e0 = {
            let mut n = dense_net(1, 2, &[0.0, 0.0]);
            n.set_param(1, 1, 5.0);
            n
        };
        let e1 = {
            let mut n = dense_net(1, 2, &[0.0, 0.0]);
            n.set_param(1, 0, 5.0);
            n
        };
        let x = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
        let maps = vec![vec![0, 1], vec![2, 3]];
        let out = predict_routed(&[e0, e1], &x, &[0, 1, 0], &maps).unwrap();
        assert_eq!(out, vec![1, 2, 1]);
    }
}
