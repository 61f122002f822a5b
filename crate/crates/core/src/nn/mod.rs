//! Small CPU neural-network substrate: dense and convolutional layers, a sigmoid output head,
//! softmax cross-entropy, and Nesterov SGD.

mod checkpoint;
mod gemm;
mod loss;
mod sgd;
mod train;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Result, TameError};
use crate::tensor::Tensor;

use gemm::gemm;

pub use loss::softmax_cross_entropy;
pub use sgd::{sgd_step, SgdConfig, Velocity};
pub use train::{accuracy, fit, fit_with, predict_classes, random_shift};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Valid (unpadded) stride-1 convolution with a square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    /// Non-overlapping square max pooling; trailing rows/columns that do not fill a window are
    /// dropped.
    MaxPool2d {
        kernel: usize,
    },
    Flatten,
    Sigmoid,
}

impl LayerSpec {
    fn weight_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, outputs } => inputs * outputs,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel,
            _ => 0,
        }
    }

    fn bias_len(&self) -> usize {
        match *self {
            LayerSpec::Dense { outputs, .. } => outputs,
            LayerSpec::Conv2d { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    pub fn has_params(&self) -> bool {
        self.weight_len() > 0
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| TameError::Shape {
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(mismatch(vec![inputs]));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => match *input {
                [c, h, w] if c == in_channels && h >= kernel && w >= kernel && kernel > 0 => {
                    Ok(vec![out_channels, h - kernel + 1, w - kernel + 1])
                }
                _ => Err(mismatch(vec![in_channels, kernel, kernel])),
            },
            LayerSpec::MaxPool2d { kernel } => match *input {
                [c, h, w] if kernel > 0 && h >= kernel && w >= kernel => {
                    Ok(vec![c, h / kernel, w / kernel])
                }
                _ => Err(mismatch(vec![0, kernel, kernel])),
            },
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
        }
    }
}

/// One layer with its (possibly empty) parameters and optional pruning mask over the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    pub(crate) weight: Vec<f32>,
    pub(crate) bias: Vec<f32>,
    pub(crate) mask: Option<Vec<bool>>,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        self.spec
    }

    pub fn weight(&self) -> &[f32] {
        &self.weight
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }
}

/// Feed-forward network over fixed-shape inputs ending in a sigmoid head.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Output shape of every layer, excluding the batch dimension.
    shapes: Vec<Vec<usize>>,
}

/// Per-parameter-tensor gradients, ordered as weight then bias for every parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f32>>,
}

impl Network {
    /// Builds a network with Kaiming-uniform (fan-in) weights and zero biases. The negative-slope
    /// parameter is √5, giving the bound `1 / sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(
        input_shape: Vec<usize>,
        specs: &[LayerSpec],
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Self::zeroed(input_shape, specs)?;
        for layer in &mut net.layers {
            let fan_in = layer.spec.fan_in();
            if fan_in == 0 {
                continue;
            }
            let bound = (1.0 / fan_in as f32).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            layer.weight.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        Ok(net)
    }

    /// Builds a network with every parameter set to zero.
    pub fn zeroed(input_shape: Vec<usize>, specs: &[LayerSpec]) -> Result<Self> {
        if specs.last() != Some(&LayerSpec::Sigmoid) {
            return Err(TameError::config("network must end with a sigmoid layer"));
        }
        let mut shapes = Vec::with_capacity(specs.len());
        let mut current = input_shape.clone();
        for spec in specs {
            current = spec.output_shape(&current)?;
            shapes.push(current.clone());
        }
        if current.len() != 1 || current[0] == 0 {
            return Err(TameError::config(format!(
                "network output must be a non-empty vector, got {current:?}"
            )));
        }
        let layers = specs
            .iter()
            .map(|&spec| Layer {
                spec,
                weight: vec![0.0; spec.weight_len()],
                bias: vec![0.0; spec.bias_len()],
                mask: None,
            })
            .collect();
        Ok(Network {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Immutable views of every parameter tensor (weight, bias per parametric layer).
    pub fn params(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .filter(|l| l.spec.has_params())
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    /// Mutable parameter views paired with the weight mask that applies to them (biases are
    /// never masked).
    pub(crate) fn params_mut(&mut self) -> Vec<(&mut [f32], Option<&[bool]>)> {
        let mut out = Vec::new();
        for layer in self.layers.iter_mut().filter(|l| l.spec.has_params()) {
            out.push((layer.weight.as_mut_slice(), layer.mask.as_deref()));
            out.push((layer.bias.as_mut_slice(), None));
        }
        out
    }

    /// Sets parameter `index` (in [`Network::params`] order) element `offset` to `value`.
    pub fn set_param(&mut self, index: usize, offset: usize, value: f32) {
        let mut params = self.params_mut();
        params[index].0[offset] = value;
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Number of weights that are not masked out plus all biases.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let weights = match &l.mask {
                    Some(m) => m.iter().filter(|&&keep| keep).count(),
                    None => l.weight.len(),
                };
                weights + l.bias.len()
            })
            .sum()
    }

    pub fn is_pruned(&self) -> bool {
        self.layers.iter().any(|l| l.mask.is_some())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.item_shape() != self.input_shape.as_slice()
        {
            let mut expected = vec![batch.rows()];
            expected.extend_from_slice(&self.input_shape);
            return Err(TameError::Shape {
                expected,
                actual: batch.shape().to_vec(),
            });
        }
        Ok(batch.rows())
    }

    /// Per-class sigmoid scores, shape `[batch, output_dim]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        let mut trace = self.forward_trace(batch)?;
        Ok(trace.activations.pop().expect("at least one layer"))
    }

    fn forward_trace(&self, batch: &Tensor) -> Result<Trace> {
        let n = self.check_batch(batch)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = if i == 0 {
                &self.input_shape
            } else {
                &self.shapes[i - 1]
            };
            let input = activations.last().expect("input pushed");
            let (out, extra) = layer_forward(layer, in_shape, &self.shapes[i], n, input.data());
            let mut shape = Vec::with_capacity(self.shapes[i].len() + 1);
            shape.push(n);
            shape.extend_from_slice(&self.shapes[i]);
            activations.push(Tensor::new(shape, out)?);
            aux.push(extra);
        }
        Ok(Trace { activations, aux })
    }

    /// Mean batch loss without computing gradients.
    pub fn loss(&self, batch: &Tensor, labels: &[usize]) -> Result<f32> {
        let scores = self.forward(batch)?;
        let (loss, _) = softmax_cross_entropy(&scores, labels)?;
        Ok(loss)
    }

    /// Mean softmax cross-entropy over the sigmoid scores and its gradients.
    pub fn loss_and_grads(&self, batch: &Tensor, labels: &[usize]) -> Result<(f32, Gradients)> {
        let trace = self.forward_trace(batch)?;
        let n = batch.rows();
        let scores = trace.activations.last().expect("at least one layer");
        let (loss, d_scores) = softmax_cross_entropy(scores, labels)?;

        let mut grads: Vec<(Vec<f32>, Vec<f32>)> = Vec::new();
        let mut upstream = d_scores.into_data();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let in_shape = if i == 0 {
                &self.input_shape
            } else {
                &self.shapes[i - 1]
            };
            let need_input_grad = i > 0;
            let back = layer_backward(
                layer,
                in_shape,
                &self.shapes[i],
                n,
                trace.activations[i].data(),
                trace.activations[i + 1].data(),
                &trace.aux[i],
                &upstream,
                need_input_grad,
            );
            if let Some(pg) = back.params {
                grads.push(pg);
            }
            upstream = back.input;
        }
        grads.reverse();
        let tensors = grads.into_iter().flat_map(|(w, b)| [w, b]).collect();
        Ok((loss, Gradients { tensors }))
    }
}

struct Trace {
    activations: Vec<Tensor>,
    aux: Vec<Aux>,
}

enum Aux {
    None,
    /// im2col matrices for every sample, `[batch][c*k*k, oh*ow]`.
    Cols(Vec<f32>),
    /// Flat input index of the maximum for every pooled output.
    Argmax(Vec<u32>),
}

struct Backward {
    input: Vec<f32>,
    params: Option<(Vec<f32>, Vec<f32>)>,
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                let row = &mut cols[r * p..(r + 1) * p];
                for y in 0..oh {
                    let src = &x[ch * h * w + (y + ki) * w + kj..][..ow];
                    row[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, dx: &mut [f32]) {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let p = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ch * k + ki) * k + kj;
                let row = &cols[r * p..(r + 1) * p];
                for y in 0..oh {
                    let dst = &mut dx[ch * h * w + (y + ki) * w + kj..][..ow];
                    for (d, s) in dst.iter_mut().zip(&row[y * ow..(y + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

fn layer_forward(
    layer: &Layer,
    in_shape: &[usize],
    out_shape: &[usize],
    n: usize,
    x: &[f32],
) -> (Vec<f32>, Aux) {
    let out_len: usize = out_shape.iter().product();
    match layer.spec {
        LayerSpec::Dense { inputs, outputs } => {
            let mut y = Vec::with_capacity(n * outputs);
            for _ in 0..n {
                y.extend_from_slice(&layer.bias);
            }
            gemm(
                n,
                inputs,
                outputs,
                x,
                (inputs, 1),
                &layer.weight,
                (1, inputs),
                1.0,
                &mut y,
            );
            (y, Aux::None)
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let p = out_shape[1] * out_shape[2];
            let ckk = in_channels * kernel * kernel;
            let in_len = in_channels * h * w;
            let mut cols = vec![0.0; n * ckk * p];
            let mut y = vec![0.0; n * out_len];
            for s in 0..n {
                let c = &mut cols[s * ckk * p..(s + 1) * ckk * p];
                im2col(
                    &x[s * in_len..(s + 1) * in_len],
                    in_channels,
                    h,
                    w,
                    kernel,
                    c,
                );
                let ys = &mut y[s * out_len..(s + 1) * out_len];
                for (oc, row) in ys.chunks_exact_mut(p).enumerate() {
                    row.fill(layer.bias[oc]);
                }
                gemm(
                    out_channels,
                    ckk,
                    p,
                    &layer.weight,
                    (ckk, 1),
                    c,
                    (p, 1),
                    1.0,
                    ys,
                );
            }
            (y, Aux::Cols(cols))
        }
        LayerSpec::Relu => (x.iter().map(|&v| v.max(0.0)).collect(), Aux::None),
        LayerSpec::Sigmoid => (x.iter().map(|&v| sigmoid(v)).collect(), Aux::None),
        LayerSpec::Flatten => (x.to_vec(), Aux::None),
        LayerSpec::MaxPool2d { kernel } => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let in_len = c * h * w;
            let mut y = vec![0.0; n * out_len];
            let mut argmax = vec![0u32; n * out_len];
            for s in 0..n {
                let xs = &x[s * in_len..(s + 1) * in_len];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_idx = 0;
                            for ki in 0..kernel {
                                for kj in 0..kernel {
                                    let idx =
                                        ch * h * w + (oy * kernel + ki) * w + ox * kernel + kj;
                                    if xs[idx] > best {
                                        best = xs[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = s * out_len + (ch * oh + oy) * ow + ox;
                            y[o] = best;
                            argmax[o] = best_idx as u32;
                        }
                    }
                }
            }
            (y, Aux::Argmax(argmax))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    layer: &Layer,
    in_shape: &[usize],
    out_shape: &[usize],
    n: usize,
    x: &[f32],
    y: &[f32],
    aux: &Aux,
    dy: &[f32],
    need_input_grad: bool,
) -> Backward {
    let in_len: usize = in_shape.iter().product();
    let out_len: usize = out_shape.iter().product();
    match layer.spec {
        LayerSpec::Dense { inputs, outputs } => {
            let mut dw = vec![0.0; inputs * outputs];
            gemm(
                outputs,
                n,
                inputs,
                dy,
                (1, outputs),
                x,
                (inputs, 1),
                0.0,
                &mut dw,
            );
            let mut db = vec![0.0; outputs];
            for row in dy.chunks_exact(outputs) {
                db.iter_mut().zip(row).for_each(|(b, d)| *b += d);
            }
            let mut dx = Vec::new();
            if need_input_grad {
                dx = vec![0.0; n * inputs];
                gemm(
                    n,
                    outputs,
                    inputs,
                    dy,
                    (outputs, 1),
                    &layer.weight,
                    (inputs, 1),
                    0.0,
                    &mut dx,
                );
            }
            Backward {
                input: dx,
                params: Some((dw, db)),
            }
        }
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let Aux::Cols(cols) = aux else {
                unreachable!("conv forward stores im2col buffers")
            };
            let (h, w) = (in_shape[1], in_shape[2]);
            let p = out_shape[1] * out_shape[2];
            let ckk = in_channels * kernel * kernel;
            let mut dw = vec![0.0; out_channels * ckk];
            let mut db = vec![0.0; out_channels];
            let mut dx = if need_input_grad {
                vec![0.0; n * in_len]
            } else {
                Vec::new()
            };
            let mut dcols = vec![0.0; if need_input_grad { ckk * p } else { 0 }];
            for s in 0..n {
                let c = &cols[s * ckk * p..(s + 1) * ckk * p];
                let dys = &dy[s * out_len..(s + 1) * out_len];
                gemm(out_channels, p, ckk, dys, (p, 1), c, (1, p), 1.0, &mut dw);
                for (oc, row) in dys.chunks_exact(p).enumerate() {
                    db[oc] += row.iter().sum::<f32>();
                }
                if need_input_grad {
                    gemm(
                        ckk,
                        out_channels,
                        p,
                        &layer.weight,
                        (1, ckk),
                        dys,
                        (p, 1),
                        0.0,
                        &mut dcols,
                    );
                    col2im(
                        &dcols,
                        in_channels,
                        h,
                        w,
                        kernel,
                        &mut dx[s * in_len..(s + 1) * in_len],
                    );
                }
            }
            Backward {
                input: dx,
                params: Some((dw, db)),
            }
        }
        LayerSpec::Relu => Backward {
            input: dy
                .iter()
                .zip(x)
                .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                .collect(),
            params: None,
        },
        LayerSpec::Sigmoid => Backward {
            input: dy.iter().zip(y).map(|(&d, &s)| d * s * (1.0 - s)).collect(),
            params: None,
        },
        LayerSpec::Flatten => Backward {
            input: dy.to_vec(),
            params: None,
        },
        LayerSpec::MaxPool2d { .. } => {
            let Aux::Argmax(argmax) = aux else {
                unreachable!("max pool forward stores argmax indices")
            };
            let mut dx = vec![0.0; n * in_len];
            for s in 0..n {
                for o in 0..out_len {
                    let idx = s * out_len + o;
                    dx[s * in_len + argmax[idx] as usize] += dy[idx];
                }
            }
            Backward {
                input: dx,
                params: None,
            }
        }
    }
}

/// Expert architecture for 1×28×28 inputs: two conv/relu/pool stages, a 100-unit hidden layer
/// and a sigmoid head.
pub fn conv_expert_specs(input_shape: &[usize], output_dim: usize) -> Result<Vec<LayerSpec>> {
    let &[c, h, w] = input_shape else {
        return Err(TameError::config(format!(
            "conv expert needs a [channels, height, width] input, got {input_shape:?}"
        )));
    };
    let mut specs = vec![
        LayerSpec::Conv2d {
            in_channels: c,
            out_channels: 16,
            kernel: 3,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2 },
        LayerSpec::Conv2d {
            in_channels: 16,
            out_channels: 32,
            kernel: 3,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d { kernel: 2 },
        LayerSpec::Flatten,
    ];
    let mut shape = vec![c, h, w];
    for s in &specs {
        shape = s.output_shape(&shape)?;
    }
    specs.extend([
        LayerSpec::Dense {
            inputs: shape[0],
            outputs: 100,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 100,
            outputs: output_dim,
        },
        LayerSpec::Sigmoid,
    ]);
    Ok(specs)
}

/// Flatten, then `hidden.len()` relu layers, then a sigmoid head.
pub fn mlp_specs(input_shape: &[usize], hidden: &[usize], output_dim: usize) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width: usize = input_shape.iter().product();
    if input_shape.len() != 1 {
        specs.push(LayerSpec::Flatten);
    }
    for &h in hidden {
        specs.push(LayerSpec::Dense {
            inputs: width,
            outputs: h,
        });
        specs.push(LayerSpec::Relu);
        width = h;
    }
    specs.push(LayerSpec::Dense {
        inputs: width,
        outputs: output_dim,
    });
    specs.push(LayerSpec::Sigmoid);
    specs
}
