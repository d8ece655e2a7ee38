//! The seven-layer convolutional motor-state classifier.
//!
//! Each layer is convolution, batch normalization and ReLU. Strided valid
//! convolutions shrink the 3600×3 minute to a 27×1 feature map, which is
//! averaged per channel and mapped to three logits by a linear head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{SensorWindow, StateLabel, AXES, WINDOW_SAMPLES};
use crate::tensor::{
    adam_step, batchnorm_backward, conv2d_backward, conv_output_extent, global_average_pool,
    global_average_pool_backward, linear, linear_backward, relu, relu_backward, softmax, softmax_cross_entropy,
    AdamState, BatchNormCache, BnMode, Differentiable, LayerParams, Tensor,
};

pub const LAYERS: usize = 7;
pub const CLASSES: usize = StateLabel::CLASS_COUNT;
/// Spatial extent of the final feature map.
pub const FEATURE_EXTENT: (usize, usize) = (27, 1);
/// Full-size channel counts.
pub const FULL_WIDTH_CHANNELS: [usize; LAYERS] = [64, 128, 256, 512, 1024, 1024, 1024];
/// Windows per forward pass at inference.
const INFERENCE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Full-size channel count per layer, before `width_scale`.
    pub channels: Vec<usize>,
    /// (time, width) kernel per layer.
    pub kernels: Vec<(usize, usize)>,
    /// (time, width) stride per layer.
    pub strides: Vec<(usize, usize)>,
    /// Divisor applied to every channel count (rounded down).
    pub width_scale: f64,
    pub class_count: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        let mut kernels = vec![(3, 1); LAYERS];
        kernels[0] = (3, 3);
        Self {
            channels: FULL_WIDTH_CHANNELS.to_vec(),
            kernels,
            strides: vec![(2, 1); LAYERS],
            width_scale: 1.0,
            class_count: CLASSES,
            epochs: 40,
            batch_size: 32,
            lr: AdamState::DEFAULT_LR,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn with_width_scale(width_scale: f64) -> Self {
        Self {
            width_scale,
            ..Self::default()
        }
    }

    /// Channel counts after `width_scale`.
    pub fn effective_channels(&self) -> Result<Vec<usize>> {
        if !(self.width_scale >= 1.0 && self.width_scale.is_finite()) {
            return Err(Error::Config(format!(
                "width_scale must be >= 1, got {}",
                self.width_scale
            )));
        }
        self.channels
            .iter()
            .map(|&c| {
                let scaled = (c as f64 / self.width_scale).floor() as usize;
                if scaled == 0 {
                    Err(Error::Config(format!(
                        "width_scale {} leaves no channels of a {c}-channel layer",
                        self.width_scale
                    )))
                } else {
                    Ok(scaled)
                }
            })
            .collect()
    }

    /// Spatial extents from the input through every layer:
    /// `[(3600, 3), ..., (27, 1)]` for the default schedule.
    pub fn extent_chain(&self) -> Result<Vec<(usize, usize)>> {
        let mut chain = vec![(WINDOW_SAMPLES, AXES)];
        for (i, (&k, &s)) in self.kernels.iter().zip(&self.strides).enumerate() {
            let &(h, w) = chain.last().unwrap();
            match (conv_output_extent(h, k.0, s.0), conv_output_extent(w, k.1, s.1)) {
                (Some(oh), Some(ow)) => chain.push((oh, ow)),
                _ => {
                    return Err(Error::Architecture(format!(
                        "layer {} with kernel {k:?} stride {s:?} does not fit a {h}x{w} input",
                        i + 1
                    )))
                }
            }
        }
        Ok(chain)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != LAYERS || self.kernels.len() != LAYERS || self.strides.len() != LAYERS {
            return Err(Error::Config(format!(
                "expected {LAYERS} channel counts, kernels and strides, got {}, {}, {}",
                self.channels.len(),
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.class_count != CLASSES {
            return Err(Error::Config(format!("class_count must be {CLASSES}")));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 for batch normalization".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.kernels.iter().chain(&self.strides).any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::Config("kernels and strides must be positive".into()));
        }
        self.effective_channels()?;
        let last = *self.extent_chain()?.last().unwrap();
        if last != FEATURE_EXTENT {
            return Err(Error::Architecture(format!(
                "final feature map is {}x{}, expected {}x{}",
                last.0, last.1, FEATURE_EXTENT.0, FEATURE_EXTENT.1
            )));
        }
        Ok(())
    }
}

/// Weights, batch-norm statistics and optimizer state of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    /// `[3, C_last]`
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub adam: AdamState,
}

/// Logits and the final feature map `[1, C_last, 27, 1]` of one window.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: [f64; CLASSES],
    pub feature_map: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub logits: [f64; CLASSES],
    pub softmax: [f64; CLASSES],
}

impl Prediction {
    pub fn from_logits(logits: [f64; CLASSES]) -> Self {
        let p = softmax(&logits);
        Self {
            label: argmax(&logits),
            logits,
            softmax: [p[0], p[1], p[2]],
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// Accuracy of the training-mode predictions seen during the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochStats>,
    pub warnings: Vec<String>,
}

struct Activations {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    acts: Vec<Tensor>,
    bn: Vec<BatchNormCache>,
    pooled: Tensor,
    logits: Tensor,
}

pub fn build(config: &NetConfig) -> Result<NetworkParams> {
    config.validate()?;
    let channels = config.effective_channels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::with_capacity(LAYERS);
    let mut in_ch = 1;
    for ((&out_ch, &kernel), &stride) in channels.iter().zip(&config.kernels).zip(&config.strides) {
        let mut layer = LayerParams::new(out_ch, in_ch, kernel, stride);
        let fan_in = (in_ch * kernel.0 * kernel.1) as f64;
        let he = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        layer
            .kernel
            .data_mut()
            .iter_mut()
            .for_each(|w| *w = he.sample(&mut rng));
        layers.push(layer);
        in_ch = out_ch;
    }
    let head = Normal::new(0.0, (1.0 / in_ch as f64).sqrt()).unwrap();
    let head_weight = Tensor::from_fn(&[CLASSES, in_ch], |_| head.sample(&mut rng));
    let head_bias = Tensor::zeros(&[CLASSES]);
    let mut net = NetworkParams {
        layers,
        head_weight,
        head_bias,
        adam: AdamState::new(std::iter::empty(), config.lr),
    };
    net.adam = AdamState::new(net.params(), config.lr);
    Ok(net)
}

/// Stacks windows into a `[N, 1, 3600, 3]` batch.
pub fn batch_tensor(windows: &[&SensorWindow]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(windows.len() * WINDOW_SAMPLES * AXES);
    for w in windows {
        data.extend_from_slice(w.values());
    }
    Tensor::new(&[windows.len(), 1, WINDOW_SAMPLES, AXES], data)
}

fn labels_of(windows: &[&SensorWindow]) -> Result<Vec<usize>> {
    windows
        .iter()
        .map(|w| {
            w.label.class_index().ok_or_else(|| {
                Error::Precondition(format!(
                    "unlabeled minute {} of patient {} in training data",
                    w.minute_index, w.patient_id
                ))
            })
        })
        .collect()
}

impl NetworkParams {
    pub fn last_channels(&self) -> usize {
        self.head_weight.shape()[1]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Convolution kernels and the head weight, the tensors inference-time
    /// connection dropout acts on.
    pub fn connection_weights_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.layers.iter_mut().map(|l| &mut l.kernel).collect();
        out.push(&mut self.head_weight);
        out
    }

    fn run(&self, input: &Tensor, mode: BnMode) -> Result<Activations> {
        let [_, c, h, w] = input.dims4()?;
        if (c, h, w) != (1, WINDOW_SAMPLES, AXES) {
            return Err(Error::shape(
                "network input",
                format!("[N, 1, {WINDOW_SAMPLES}, {AXES}]"),
                format!("{:?}", input.shape()),
            ));
        }
        let mut acts = Vec::with_capacity(LAYERS + 1);
        let mut bn = Vec::with_capacity(LAYERS);
        acts.push(input.clone());
        for layer in &self.layers {
            let z = layer.conv(acts.last().unwrap())?;
            let (y, cache) = layer.batchnorm(&z, mode)?;
            acts.push(relu(&y));
            bn.push(cache);
        }
        let pooled = global_average_pool(acts.last().unwrap())?;
        let logits = linear(&pooled, &self.head_weight, &self.head_bias)?;
        Ok(Activations {
            acts,
            bn,
            pooled,
            logits,
        })
    }

    /// Gradients in parameter order for a `[N, 3]` upstream logit gradient.
    fn backward(&self, a: &Activations, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let head = linear_backward(&a.pooled, &self.head_weight, grad_logits)?;
        let mut g = global_average_pool_backward(a.acts[LAYERS].shape(), &head.input)?;
        let mut per_layer = Vec::with_capacity(LAYERS);
        for i in (0..LAYERS).rev() {
            let layer = &self.layers[i];
            let g_bn = relu_backward(&a.acts[i + 1], &g);
            let (g_conv, dgamma, dbeta) = batchnorm_backward(&g_bn, &layer.bn_gamma, &a.bn[i])?;
            let conv = conv2d_backward(&a.acts[i], &layer.kernel, layer.stride, &g_conv, i > 0)?;
            per_layer.push([conv.kernel, conv.bias, dgamma, dbeta]);
            if let Some(gi) = conv.input {
                g = gi;
            }
        }
        let mut grads: Vec<Tensor> = per_layer.into_iter().rev().flatten().collect();
        grads.push(head.weight);
        grads.push(head.bias);
        Ok(grads)
    }

    /// Inference-mode logits and final feature map for one window.
    pub fn forward(&self, window: &SensorWindow) -> Result<ForwardOutput> {
        let a = self.run(&batch_tensor(&[window])?, BnMode::Eval)?;
        let l = a.logits.data();
        Ok(ForwardOutput {
            logits: [l[0], l[1], l[2]],
            feature_map: a.acts[LAYERS].clone(),
        })
    }

    pub fn predict(&self, window: &SensorWindow) -> Result<Prediction> {
        Ok(self.predict_many(&[window])?.remove(0))
    }

    /// Inference-mode predictions, evaluated in chunks.
    pub fn predict_many(&self, windows: &[&SensorWindow]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_CHUNK) {
            let a = self.run(&batch_tensor(chunk)?, BnMode::Eval)?;
            out.extend(
                a.logits
                    .data()
                    .chunks_exact(CLASSES)
                    .map(|l| Prediction::from_logits([l[0], l[1], l[2]])),
            );
        }
        Ok(out)
    }

    /// Fraction of labelled windows whose inference-mode prediction is correct.
    pub fn accuracy(&self, windows: &[&SensorWindow]) -> Result<f64> {
        let labels = labels_of(windows)?;
        if labels.is_empty() {
            return Err(Error::InsufficientData("no windows to score".into()));
        }
        let preds = self.predict_many(windows)?;
        let hits = preds.iter().zip(&labels).filter(|(p, l)| p.label == **l).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// One Adam step on the mean cross-entropy of a batch, with batch-norm in
    /// training mode. Returns the batch loss and the training-mode hits.
    fn train_step(&mut self, windows: &[&SensorWindow], labels: &[usize]) -> Result<(f64, usize)> {
        let a = self.run(&batch_tensor(windows)?, BnMode::Train)?;
        let (loss, grad) = softmax_cross_entropy(&a.logits, labels)?;
        let hits = a
            .logits
            .data()
            .chunks_exact(CLASSES)
            .zip(labels)
            .filter(|(l, y)| argmax(l) == **y)
            .count();
        let grads = self.backward(&a, &grad)?;
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        let mut adam = std::mem::replace(&mut self.adam, AdamState::new(std::iter::empty(), 0.0));
        adam_step(&mut self.params_mut(), &grad_refs, &mut adam);
        self.adam = adam;
        for (layer, cache) in self.layers.iter_mut().zip(&a.bn) {
            layer.update_running_stats(cache);
        }
        Ok((loss, hits))
    }
}

/// Index ranges of the mini-batches for one epoch. A trailing batch of one
/// window is folded into the previous batch, since batch normalization needs
/// two samples.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    let mut ranges: Vec<_> = (0..n).step_by(batch_size).map(|s| s..(s + batch_size).min(n)).collect();
    if ranges.len() > 1 && ranges.last().unwrap().len() == 1 {
        let last = ranges.pop().unwrap();
        ranges.last_mut().unwrap().end = last.end;
    }
    ranges
}

/// Shuffled mini-batch Adam on cross-entropy for `config.epochs` epochs.
/// Unlabeled windows are rejected. Shuffling is seeded by `config.seed`.
pub fn train(params: &mut NetworkParams, windows: &[&SensorWindow], config: &NetConfig) -> Result<TrainTrace> {
    config.validate()?;
    if windows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "training needs at least 2 windows, got {}",
            windows.len()
        )));
    }
    let labels = labels_of(windows)?;
    let mut trace = TrainTrace::default();
    for class in StateLabel::CLASSES {
        let idx = class.class_index().unwrap();
        if !labels.contains(&idx) {
            trace.warnings.push(format!(
                "no {class} windows in training data; the model cannot learn that class"
            ));
        }
    }
    params.adam.lr = config.lr;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let ranges = batch_ranges(windows.len(), config.batch_size);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for r in &ranges {
            let batch: Vec<&SensorWindow> = order[r.clone()].iter().map(|&i| windows[i]).collect();
            let batch_labels: Vec<usize> = order[r.clone()].iter().map(|&i| labels[i]).collect();
            let (loss, h) = params.train_step(&batch, &batch_labels)?;
            loss_sum += loss * batch.len() as f64;
            hits += h;
        }
        let n = windows.len() as f64;
        trace.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
        });
        log::debug!("epoch {epoch}: loss {:.4} acc {:.3}", loss_sum / n, hits as f64 / n);
    }
    Ok(trace)
}

/// Default starting step for [`gradient_check`].
pub const GRADIENT_CHECK_STEP: f64 = 1e-3;

/// Finite-difference check of a small network's analytic gradient on one
/// synthetic minute. The network first takes a few training steps: at the
/// zero-bias initialization, channels fed only by dead ReLUs sit exactly on
/// a ReLU kink, where no finite difference agrees with any subgradient.
pub fn gradient_check(width_scale: f64, seed: u64, h: f64) -> Result<f64> {
    use crate::data::{render_minute, MinutePlan, SynthProfile};
    use crate::signal::PatientId;
    use crate::tensor::finite_difference_check;

    let config = NetConfig {
        epochs: 2,
        batch_size: 6,
        seed,
        ..NetConfig::with_width_scale(width_scale)
    };
    let profile = SynthProfile::new(PatientId(0), seed);
    let warmup: Vec<SensorWindow> = (0..6u32)
        .map(|m| {
            let state = StateLabel::CLASSES[m as usize % CLASSES];
            render_minute(
                &profile,
                m,
                MinutePlan {
                    state,
                    no_motion: false,
                },
            )
        })
        .collect();
    let refs: Vec<&SensorWindow> = warmup.iter().collect();
    let mut net = build(&config)?;
    train(&mut net, &refs, &config)?;
    let label = (seed % CLASSES as u64) as usize;
    let probe = render_minute(
        &profile,
        100,
        MinutePlan {
            state: StateLabel::CLASSES[label],
            no_motion: false,
        },
    );
    finite_difference_check(&mut net, &batch_tensor(&[&probe])?, label, h)
}

/// Parameter order: for each layer kernel, bias, gamma, beta; then the head
/// weight and bias. The loss runs batch normalization in inference mode.
impl Differentiable for NetworkParams {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(4 * LAYERS + 2);
        for l in &self.layers {
            out.extend([&l.kernel, &l.bias, &l.bn_gamma, &l.bn_beta]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(4 * LAYERS + 2);
        for l in &mut self.layers {
            out.extend([&mut l.kernel, &mut l.bias, &mut l.bn_gamma, &mut l.bn_beta]);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    fn loss(&self, input: &Tensor, label: usize) -> Result<f64> {
        let a = self.run(input, BnMode::Eval)?;
        Ok(softmax_cross_entropy(&a.logits, &vec![label; input.shape()[0]])?.0)
    }

    fn loss_and_pattern(&self, input: &Tensor, label: usize) -> Result<(f64, Option<Vec<bool>>)> {
        let a = self.run(input, BnMode::Eval)?;
        let loss = softmax_cross_entropy(&a.logits, &vec![label; input.shape()[0]])?.0;
        let pattern = a.acts[1..]
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect();
        Ok((loss, Some(pattern)))
    }

    fn loss_and_grad(&self, input: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
        let a = self.run(input, BnMode::Eval)?;
        let (loss, grad) = softmax_cross_entropy(&a.logits, &vec![label; input.shape()[0]])?;
        Ok((loss, self.backward(&a, &grad)?))
    }
}
