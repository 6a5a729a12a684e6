//! Trainable layers built on the tensor primitives, and the sequential
//! container that chains them.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{self, check_axis, check_same_shape, ConvSpec, PoolIndices, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A named tensor owned by a layer, with a gradient buffer of the same shape.
/// Non-trainable params (batch-norm running statistics) are checkpointed but
/// never touched by the optimizer.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Tensor4,
    pub grad: Tensor4,
    pub trainable: bool,
}

impl Param {
    fn new(value: Tensor4, trainable: bool) -> Self {
        let grad = Tensor4::zeros(value.shape());
        Param {
            value,
            grad,
            trainable,
        }
    }

    fn vector(values: Vec<f64>, trainable: bool) -> Self {
        let shape = Shape4::new(values.len(), 1, 1, 1).expect("non-empty parameter vector");
        Self::new(Tensor4::from_vec(shape, values).expect("length matches"), trainable)
    }
}

pub trait Layer: Send + Sync {
    fn kind(&self) -> &'static str;

    /// Forward pass that records whatever `backward` needs.
    fn forward(&mut self, input: &Tensor4, mode: Mode) -> Result<Tensor4>;

    /// Inference-mode forward pass without caching; safe to share.
    fn infer(&self, input: &Tensor4) -> Result<Tensor4>;

    /// Gradient with respect to the last forward input. Parameter gradients
    /// are overwritten, not accumulated.
    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4>;

    fn visit_params(&self, _prefix: &str, _f: &mut dyn FnMut(&str, &Param)) {}

    fn visit_params_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Param)) {}

    /// Rewind any internal random stream to its initial state.
    fn reset_rng(&mut self) {}
}

fn not_run(kind: &str) -> Error {
    Error::Contract(format!("{kind} backward called before a forward pass"))
}

pub struct Conv2d {
    weight: Param,
    bias: Param,
    spec: ConvSpec,
    cached_input: Option<Tensor4>,
}

impl Conv2d {
    /// Kaiming-normal weights with `std = sqrt(2 / fan_in)`, zero bias.
    pub fn new(c_in: usize, c_out: usize, spec: ConvSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let shape = Shape4::new(c_out, c_in, spec.kernel.0, spec.kernel.1)?;
        let fan_in = (c_in * spec.kernel.0 * spec.kernel.1) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let weights = (0..shape.len()).map(|_| normal.sample(rng)).collect();
        Self::with_weights(Tensor4::from_vec(shape, weights)?, vec![0.0; c_out], spec)
    }

    pub fn with_weights(weights: Tensor4, bias: Vec<f64>, spec: ConvSpec) -> Result<Self> {
        check_axis("bias", weights.shape().n, bias.len())?;
        check_axis("kernel height", spec.kernel.0, weights.shape().h)?;
        check_axis("kernel width", spec.kernel.1, weights.shape().w)?;
        Ok(Conv2d {
            weight: Param::new(weights, true),
            bias: Param::vector(bias, true),
            spec,
            cached_input: None,
        })
    }

    pub fn spec(&self) -> ConvSpec {
        self.spec
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }
}

impl Layer for Conv2d {
    fn kind(&self) -> &'static str {
        "conv"
    }

    fn forward(&mut self, input: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let out = self.infer(input)?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        tensor::conv2d_forward(input, &self.weight.value, self.bias.value.data(), &self.spec)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let input = self.cached_input.as_ref().ok_or_else(|| not_run("conv"))?;
        let grads = tensor::conv2d_backward(input, &self.weight.value, &self.spec, grad_out)?;
        self.weight.grad = grads.weights;
        self.bias.grad.data_mut().copy_from_slice(&grads.bias);
        Ok(grads.input)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}weight"), &self.weight);
        f(&format!("{prefix}bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        f(&format!("{prefix}bias"), &mut self.bias);
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch-norm parameters and running statistics.
///
/// Running statistics follow `running = momentum * running + (1 - momentum) * batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: BN_EPSILON,
            momentum: BN_MOMENTUM,
        }
    }
}

/// What batch-norm backward needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Tensor4,
    inv_std: Vec<f64>,
    gamma: Vec<f64>,
}

struct BnView<'a> {
    gamma: &'a [f64],
    beta: &'a [f64],
    running_mean: &'a mut [f64],
    running_var: &'a mut [f64],
    epsilon: f64,
    momentum: f64,
}

fn bn_forward(input: &Tensor4, bn: BnView<'_>, mode: Mode) -> Result<(Tensor4, BatchNormCache)> {
    let s = input.shape();
    check_axis("channels", s.c, bn.gamma.len())?;
    check_axis("channels", s.c, bn.beta.len())?;
    let count = s.n * s.plane_len();
    if mode == Mode::Train && count < 2 {
        return Err(Error::Parameter(format!(
            "train-mode batch norm needs at least 2 values per channel, got {count}"
        )));
    }
    let plane = s.plane_len();
    let x = input.data();
    let mut x_hat = vec![0.0; s.len()];
    let mut out = vec![0.0; s.len()];
    let mut inv_std = vec![0.0; s.c];
    let planes = |c: usize| (0..s.n).map(move |n| (n * s.c + c) * plane);

    for (c, inv) in inv_std.iter_mut().enumerate() {
        let (mean, var) = match mode {
            Mode::Train => {
                let sum: f64 = planes(c).map(|o| x[o..o + plane].iter().sum::<f64>()).sum();
                let mean = sum / count as f64;
                let sq: f64 = planes(c)
                    .map(|o| x[o..o + plane].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>())
                    .sum();
                let var = sq / count as f64;
                bn.running_mean[c] = bn.momentum * bn.running_mean[c] + (1.0 - bn.momentum) * mean;
                bn.running_var[c] = bn.momentum * bn.running_var[c] + (1.0 - bn.momentum) * var;
                (mean, var)
            }
            Mode::Infer => (bn.running_mean[c], bn.running_var[c]),
        };
        let denom = var + bn.epsilon;
        if denom <= 0.0 {
            return Err(Error::Singularity { channel: c });
        }
        let is = 1.0 / denom.sqrt();
        *inv = is;
        let (g, b) = (bn.gamma[c], bn.beta[c]);
        for o in planes(c) {
            let r = o..o + plane;
            for ((xv, xh), y) in x[r.clone()].iter().zip(&mut x_hat[r.clone()]).zip(&mut out[r]) {
                *xh = (xv - mean) * is;
                *y = *xh * g + b;
            }
        }
    }
    let x_hat = Tensor4::from_vec(s, x_hat)?;
    let out = Tensor4::from_vec(s, out)?;
    Ok((
        out,
        BatchNormCache {
            mode,
            x_hat,
            inv_std,
            gamma: bn.gamma.to_vec(),
        },
    ))
}

/// Batch normalization over `(n, h, w)` per channel. Train mode uses batch
/// statistics (biased variance) and updates the running averages; infer mode
/// uses the running averages only.
pub fn batchnorm_forward(input: &Tensor4, state: &mut BatchNormState, mode: Mode) -> Result<(Tensor4, BatchNormCache)> {
    let view = BnView {
        gamma: &state.gamma,
        beta: &state.beta,
        running_mean: &mut state.running_mean,
        running_var: &mut state.running_var,
        epsilon: state.epsilon,
        momentum: state.momentum,
    };
    bn_forward(input, view, mode)
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(cache: &BatchNormCache, grad_out: &Tensor4) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    if cache.mode != Mode::Train {
        return Err(Error::Contract(
            "batch-norm backward needs a train-mode forward cache".into(),
        ));
    }
    let s = cache.x_hat.shape();
    check_same_shape(s, grad_out.shape())?;
    let plane = s.plane_len();
    let count = (s.n * plane) as f64;
    let (xh, gy) = (cache.x_hat.data(), grad_out.data());
    let mut grad_in = vec![0.0; s.len()];
    let mut grad_gamma = vec![0.0; s.c];
    let mut grad_beta = vec![0.0; s.c];

    for c in 0..s.c {
        let planes = (0..s.n).map(|n| (n * s.c + c) * plane);
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for o in planes.clone() {
            for (g, x) in gy[o..o + plane].iter().zip(&xh[o..o + plane]) {
                sum_g += g;
                sum_gx += g * x;
            }
        }
        grad_beta[c] = sum_g;
        grad_gamma[c] = sum_gx;
        let k = cache.gamma[c] * cache.inv_std[c] / count;
        for o in planes {
            let r = o..o + plane;
            for ((gi, g), x) in grad_in[r.clone()].iter_mut().zip(&gy[r.clone()]).zip(&xh[r]) {
                *gi = k * (count * g - sum_g - x * sum_gx);
            }
        }
    }
    let grad_in = Tensor4::from_vec(s, grad_in)?;
    Ok((grad_in, grad_gamma, grad_beta))
}

pub struct BatchNorm2d {
    gamma: Param,
    beta: Param,
    running_mean: Param,
    running_var: Param,
    epsilon: f64,
    momentum: f64,
    cache: Option<BatchNormCache>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self::from_state(BatchNormState::new(channels))
    }

    pub fn from_state(state: BatchNormState) -> Self {
        BatchNorm2d {
            gamma: Param::vector(state.gamma, true),
            beta: Param::vector(state.beta, true),
            running_mean: Param::vector(state.running_mean, false),
            running_var: Param::vector(state.running_var, false),
            epsilon: state.epsilon,
            momentum: state.momentum,
            cache: None,
        }
    }

    pub fn state(&self) -> BatchNormState {
        BatchNormState {
            gamma: self.gamma.value.data().to_vec(),
            beta: self.beta.value.data().to_vec(),
            running_mean: self.running_mean.value.data().to_vec(),
            running_var: self.running_var.value.data().to_vec(),
            epsilon: self.epsilon,
            momentum: self.momentum,
        }
    }
}

impl Layer for BatchNorm2d {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, input: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let view = BnView {
            gamma: self.gamma.value.data(),
            beta: self.beta.value.data(),
            running_mean: self.running_mean.value.data_mut(),
            running_var: self.running_var.value.data_mut(),
            epsilon: self.epsilon,
            momentum: self.momentum,
        };
        let (out, cache) = bn_forward(input, view, mode)?;
        self.cache = Some(cache);
        Ok(out)
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut rm = self.running_mean.value.data().to_vec();
        let mut rv = self.running_var.value.data().to_vec();
        let view = BnView {
            gamma: self.gamma.value.data(),
            beta: self.beta.value.data(),
            running_mean: &mut rm,
            running_var: &mut rv,
            epsilon: self.epsilon,
            momentum: self.momentum,
        };
        Ok(bn_forward(input, view, Mode::Infer)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.as_ref().ok_or_else(|| not_run("batchnorm"))?;
        let (gi, gg, gb) = batchnorm_backward(cache, grad_out)?;
        self.gamma.grad.data_mut().copy_from_slice(&gg);
        self.beta.grad.data_mut().copy_from_slice(&gb);
        Ok(gi)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&format!("{prefix}gamma"), &self.gamma);
        f(&format!("{prefix}beta"), &self.beta);
        f(&format!("{prefix}running_mean"), &self.running_mean);
        f(&format!("{prefix}running_var"), &self.running_var);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
        f(&format!("{prefix}running_mean"), &mut self.running_mean);
        f(&format!("{prefix}running_var"), &mut self.running_var);
    }
}

/// Caches only the sign pattern of its input.
#[derive(Default)]
pub struct Relu {
    positive: Option<(Shape4, Vec<bool>)>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Layer for Relu {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, input: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        self.positive = Some((input.shape(), input.data().iter().map(|&v| v > 0.0).collect()));
        Ok(tensor::relu_forward(input))
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::relu_forward(input))
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let (shape, mask) = self.positive.as_ref().ok_or_else(|| not_run("relu"))?;
        check_same_shape(*shape, grad_out.shape())?;
        let data = grad_out.data().iter().zip(mask).map(|(&g, &p)| if p { g } else { 0.0 }).collect();
        Tensor4::from_vec(*shape, data)
    }
}

pub struct MaxPool2d {
    spec: ConvSpec,
    indices: Option<PoolIndices>,
}

impl MaxPool2d {
    pub fn new(spec: ConvSpec) -> Self {
        MaxPool2d { spec, indices: None }
    }
}

impl Layer for MaxPool2d {
    fn kind(&self) -> &'static str {
        "maxpool"
    }

    fn forward(&mut self, input: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let (out, idx) = tensor::maxpool2d_forward(input, &self.spec)?;
        self.indices = Some(idx);
        Ok(out)
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::maxpool2d_forward(input, &self.spec)?.0)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let idx = self.indices.as_ref().ok_or_else(|| not_run("maxpool"))?;
        tensor::maxpool2d_backward(idx, grad_out)
    }
}

/// Per-unit multipliers applied by a dropout forward pass: `0` for dropped
/// units and `1 / (1 - ratio)` for survivors.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub multipliers: Vec<f64>,
}

impl DropoutMask {
    pub fn survivors(&self) -> usize {
        self.multipliers.iter().filter(|&&m| m != 0.0).count()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Parameter(format!("dropout ratio {ratio} must lie in [0, 1)")));
    }
    Ok(())
}

/// Inverted dropout. Infer mode is the exact identity.
pub fn dropout_forward(input: &Tensor4, ratio: f64, mode: Mode, seed: u64) -> Result<(Tensor4, DropoutMask)> {
    check_ratio(ratio)?;
    if mode == Mode::Infer || ratio == 0.0 {
        return Ok((
            input.clone(),
            DropoutMask {
                multipliers: vec![1.0; input.len()],
            },
        ));
    }
    let mut rng = seed::stream(seed, 0);
    let keep = 1.0 / (1.0 - ratio);
    let multipliers: Vec<f64> = (0..input.len())
        .map(|_| if rng.random::<f64>() < ratio { 0.0 } else { keep })
        .collect();
    let out = Tensor4::from_vec(
        input.shape(),
        input.data().iter().zip(&multipliers).map(|(x, m)| x * m).collect(),
    )?;
    Ok((out, DropoutMask { multipliers }))
}

pub fn dropout_backward(mask: &DropoutMask, grad_out: &Tensor4) -> Result<Tensor4> {
    check_axis("dropout mask", mask.multipliers.len(), grad_out.len())?;
    Tensor4::from_vec(
        grad_out.shape(),
        grad_out.data().iter().zip(&mask.multipliers).map(|(g, m)| g * m).collect(),
    )
}

/// Dropout layer. Each train-mode forward call draws a fresh mask from its
/// own stream, keyed by the layer seed and the call count.
pub struct Dropout {
    ratio: f64,
    seed: u64,
    calls: u64,
    mask: Option<DropoutMask>,
}

impl Dropout {
    pub fn new(ratio: f64, seed: u64) -> Result<Self> {
        check_ratio(ratio)?;
        Ok(Dropout {
            ratio,
            seed,
            calls: 0,
            mask: None,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

impl Layer for Dropout {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, input: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let call_seed = seed::derive_seed(self.seed, self.calls);
        if mode == Mode::Train {
            self.calls += 1;
        }
        let (out, mask) = dropout_forward(input, self.ratio, mode, call_seed)?;
        self.mask = Some(mask);
        Ok(out)
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(input.clone())
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let mask = self.mask.as_ref().ok_or_else(|| not_run("dropout"))?;
        dropout_backward(mask, grad_out)
    }

    fn reset_rng(&mut self) {
        self.calls = 0;
    }
}

/// Multiplies by a constant.
pub struct Scale {
    factor: f64,
    ran: bool,
}

impl Scale {
    pub fn new(factor: f64) -> Self {
        Scale { factor, ran: false }
    }
}

impl Layer for Scale {
    fn kind(&self) -> &'static str {
        "scale"
    }

    fn forward(&mut self, input: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        self.ran = true;
        Ok(tensor::scale(input, self.factor))
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::scale(input, self.factor))
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        if !self.ran {
            return Err(not_run("scale"));
        }
        Ok(tensor::scale(grad_out, self.factor))
    }
}

/// Averages over the height axis, producing a height-1 map.
#[derive(Default)]
pub struct HeightMean {
    input_shape: Option<Shape4>,
}

impl HeightMean {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn height_mean(input: &Tensor4) -> Tensor4 {
    let s = input.shape();
    let mut out = Tensor4::zeros(Shape4 { h: 1, ..s });
    let inv = 1.0 / s.h as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let o = input.offset(n, c, y, 0);
                let row = &input.data()[o..o + s.w];
                let d = out.offset(n, c, 0, 0);
                for (acc, v) in out.data_mut()[d..d + s.w].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let d = out.offset(n, c, 0, 0);
            out.data_mut()[d..d + s.w].iter_mut().for_each(|v| *v *= inv);
        }
    }
    out
}

impl Layer for HeightMean {
    fn kind(&self) -> &'static str {
        "heightmean"
    }

    fn forward(&mut self, input: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        self.input_shape = Some(input.shape());
        Ok(height_mean(input))
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        Ok(height_mean(input))
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let s = self.input_shape.ok_or_else(|| not_run("heightmean"))?;
        check_same_shape(Shape4 { h: 1, ..s }, grad_out.shape())?;
        let mut grad = Tensor4::zeros(s);
        let inv = 1.0 / s.h as f64;
        for n in 0..s.n {
            for c in 0..s.c {
                let g = grad_out.offset(n, c, 0, 0);
                for y in 0..s.h {
                    let o = grad.offset(n, c, y, 0);
                    for x in 0..s.w {
                        grad.data_mut()[o + x] = grad_out.data()[g + x] * inv;
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Averages non-overlapping runs of `k` columns; trailing columns that do not
/// fill a run are dropped.
pub struct WidthPool {
    k: usize,
    input_shape: Option<Shape4>,
}

impl WidthPool {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Parameter("width pool factor must be positive".into()));
        }
        Ok(WidthPool { k, input_shape: None })
    }
}

pub fn width_pool(input: &Tensor4, k: usize) -> Result<Tensor4> {
    let s = input.shape();
    let w = s.w / k;
    if w == 0 {
        return Err(Error::Shape(format!("width {} is narrower than the pool factor {k}", s.w)));
    }
    let mut out = Tensor4::zeros(Shape4 { w, ..s });
    let inv = 1.0 / k as f64;
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let row = &input.data()[input.offset(n, c, y, 0)..][..w * k];
                let o = out.offset(n, c, y, 0);
                for (dst, run) in out.data_mut()[o..o + w].iter_mut().zip(row.chunks_exact(k)) {
                    *dst = run.iter().sum::<f64>() * inv;
                }
            }
        }
    }
    Ok(out)
}

impl Layer for WidthPool {
    fn kind(&self) -> &'static str {
        "widthpool"
    }

    fn forward(&mut self, input: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        let out = width_pool(input, self.k)?;
        self.input_shape = Some(input.shape());
        Ok(out)
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        width_pool(input, self.k)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        let s = self.input_shape.ok_or_else(|| not_run("widthpool"))?;
        let w = s.w / self.k;
        check_same_shape(Shape4 { w, ..s }, grad_out.shape())?;
        let mut grad = Tensor4::zeros(s);
        let inv = 1.0 / self.k as f64;
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h {
                    let g = grad_out.offset(n, c, y, 0);
                    let o = grad.offset(n, c, y, 0);
                    for t in 0..w {
                        let v = grad_out.data()[g + t] * inv;
                        grad.data_mut()[o + t * self.k..o + (t + 1) * self.k].fill(v);
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Ordered chain of layers. Parameters are named `<index>.<name>`, nesting
/// through inner sequences (`3.1.weight`).
#[derive(Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
    ran_forward: bool,
}

impl Sequential {
    pub fn new(layers: Vec<Box<dyn Layer>>) -> Self {
        Sequential {
            layers,
            ran_forward: false,
        }
    }

    pub fn push(&mut self, layer: Box<dyn Layer>) {
        self.layers.push(layer);
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[Box<dyn Layer>] {
        &self.layers
    }

    pub fn layer_kinds(&self) -> Vec<&'static str> {
        self.layers.iter().map(|l| l.kind()).collect()
    }

    /// Number of scalar parameters, trainable or not.
    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p| total += p.value.len());
        total
    }

    pub fn trainable_parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p| {
            if p.trainable {
                total += p.value.len()
            }
        });
        total
    }

    /// All parameter tensors in visiting order.
    pub fn state_tensors(&self) -> Vec<(String, Tensor4)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    /// Replace parameter values; names and shapes must match exactly.
    pub fn load_state(&mut self, tensors: &[(String, Tensor4)]) -> Result<()> {
        let mut expected = Vec::new();
        self.visit_params("", &mut |name, p| expected.push((name.to_string(), p.value.shape())));
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.iter().zip(tensors) {
            if name != got_name || *shape != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {} does not match {name} {shape}",
                    got.shape()
                )));
            }
        }
        let mut i = 0;
        self.visit_params_mut("", &mut |_, p| {
            p.value = tensors[i].1.clone();
            i += 1;
        });
        Ok(())
    }
}

impl Layer for Sequential {
    fn kind(&self) -> &'static str {
        "sequential"
    }

    fn forward(&mut self, input: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let mut layers = self.layers.iter_mut();
        let mut x = match layers.next() {
            Some(first) => first.forward(input, mode)?,
            None => input.clone(),
        };
        for layer in layers {
            x = layer.forward(&x, mode)?;
        }
        self.ran_forward = true;
        Ok(x)
    }

    fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        let mut layers = self.layers.iter();
        let mut x = match layers.next() {
            Some(first) => first.infer(input)?,
            None => input.clone(),
        };
        for layer in layers {
            x = layer.infer(&x)?;
        }
        Ok(x)
    }

    fn backward(&mut self, grad_out: &Tensor4) -> Result<Tensor4> {
        if !self.ran_forward {
            return Err(not_run("network"));
        }
        let mut layers = self.layers.iter_mut().rev();
        let mut g = match layers.next() {
            Some(last) => last.backward(grad_out)?,
            None => grad_out.clone(),
        };
        for layer in layers {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("{prefix}{i}."), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("{prefix}{i}."), f);
        }
    }

    fn reset_rng(&mut self) {
        for layer in &mut self.layers {
            layer.reset_rng();
        }
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::testutil::{central_diff, dot, random_tensor, rel_err, rng};

    fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
        Shape4::new(n, c, h, w).unwrap()
    }

    fn channel_stats(t: &Tensor4, c: usize) -> (f64, f64) {
        let s = t.shape();
        let mut vals = Vec::new();
        for n in 0..s.n {
            for y in 0..s.h {
                for x in 0..s.w {
                    vals.push(t.get(n, c, y, x));
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        (mean, var)
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut r = rng(10);
        let x = random_tensor(shape(4, 3, 5, 6), &mut r).map(|v| 3.0 * v + 2.0);
        let mut st = BatchNormState::new(3);
        let (y, _) = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        for c in 0..3 {
            let (m, v) = channel_stats(&y, c);
            assert!(m.abs() <= 1e-9, "mean {m}");
            // epsilon shifts the variance slightly below 1
            assert!((v - 1.0).abs() <= 1e-3, "var {v}");
        }
    }

    #[test]
    fn unit_variance_within_1e6_for_large_spread() {
        // var(x) = 1e2 makes eps/var ~ 1e-7
        let mut r = rng(11);
        let x = random_tensor(shape(2, 2, 8, 8), &mut r).map(|v| 17.3 * v);
        let mut st = BatchNormState::new(2);
        let (y, _) = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        for c in 0..2 {
            let (m, v) = channel_stats(&y, c);
            assert!(m.abs() <= 1e-9);
            assert!((v - 1.0).abs() <= 1e-6, "var {v}");
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor4::filled(shape(2, 1, 3, 3), 4.2);
        let mut st = BatchNormState::new(1);
        st.beta = vec![0.75];
        let (y, _) = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-12));
    }

    #[test]
    fn zero_epsilon_on_constant_channel_is_singular() {
        let x = Tensor4::filled(shape(2, 1, 2, 2), 1.0);
        let mut st = BatchNormState::new(1);
        st.epsilon = 0.0;
        assert!(matches!(
            batchnorm_forward(&x, &mut st, Mode::Train),
            Err(Error::Singularity { channel: 0 })
        ));
    }

    #[test]
    fn infer_mode_matches_scalar_formula() {
        let x = Tensor4::from_vec(shape(1, 1, 2, 2), vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut st = BatchNormState::new(1);
        st.running_mean = vec![0.3];
        st.running_var = vec![2.5];
        st.gamma = vec![1.7];
        st.beta = vec![-0.4];
        let (y, _) = batchnorm_forward(&x, &mut st, Mode::Infer).unwrap();
        for (i, &v) in x.data().iter().enumerate() {
            let expect = (v - 0.3) / (2.5f64 + 1e-5).sqrt() * 1.7 - 0.4;
            assert!((y.data()[i] - expect).abs() < 1e-12);
        }
        assert_eq!(st.running_mean, vec![0.3], "infer must not touch running stats");
    }

    #[test]
    fn train_mode_needs_two_values() {
        let x = Tensor4::zeros(shape(1, 1, 1, 1));
        let mut st = BatchNormState::new(1);
        assert!(matches!(
            batchnorm_forward(&x, &mut st, Mode::Train),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn running_stats_converge() {
        let mut r = rng(12);
        let x = random_tensor(shape(3, 2, 4, 4), &mut r).map(|v| v + 0.8);
        let mut st = BatchNormState::new(2);
        for _ in 0..100 {
            batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        }
        let decay = BN_MOMENTUM.powi(100);
        for c in 0..2 {
            let (m, _) = channel_stats(&x, c);
            assert!((st.running_mean[c] - m).abs() <= decay * m.abs() + 1e-6);
            assert!(st.running_var[c] >= 0.0);
        }
    }

    #[test]
    fn backward_zero_grad_and_beta_identity() {
        let mut r = rng(13);
        let x = random_tensor(shape(2, 3, 3, 3), &mut r);
        let mut st = BatchNormState::new(3);
        let (_, cache) = batchnorm_forward(&x, &mut st, Mode::Train).unwrap();
        let (gi, gg, gb) = batchnorm_backward(&cache, &Tensor4::zeros(x.shape())).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gg.iter().chain(&gb).all(|&v| v == 0.0));

        let g = random_tensor(x.shape(), &mut r);
        let (_, _, gb) = batchnorm_backward(&cache, &g).unwrap();
        for c in 0..3 {
            let mut sum = 0.0;
            for n in 0..2 {
                for y in 0..3 {
                    for xx in 0..3 {
                        sum += g.get(n, c, y, xx);
                    }
                }
            }
            assert!((gb[c] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_infer_cache() {
        let x = Tensor4::zeros(shape(1, 1, 2, 2));
        let mut st = BatchNormState::new(1);
        let (_, cache) = batchnorm_forward(&x, &mut st, Mode::Infer).unwrap();
        assert!(matches!(
            batchnorm_backward(&cache, &x),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut r = rng(14);
        let x = random_tensor(shape(2, 2, 3, 3), &mut r);
        let w = random_tensor(x.shape(), &mut r);
        let mut st = BatchNormState::new(2);
        st.gamma = vec![1.3, -0.7];
        st.beta = vec![0.2, 0.1];
        let (_, cache) = batchnorm_forward(&x, &mut st.clone(), Mode::Train).unwrap();
        let (gi, gg, _) = batchnorm_backward(&cache, &w).unwrap();

        let mut xs = x.data().to_vec();
        for i in 0..xs.len() {
            let num = central_diff(&mut xs, i, 1e-5, |v| {
                let t = Tensor4::from_vec(x.shape(), v.to_vec()).unwrap();
                dot(&batchnorm_forward(&t, &mut st.clone(), Mode::Train).unwrap().0, &w)
            });
            assert!(rel_err(gi.data()[i], num) < 1e-4, "x[{i}]: {} vs {num}", gi.data()[i]);
        }
        let mut gamma = st.gamma.clone();
        for c in 0..2 {
            let num = central_diff(&mut gamma, c, 1e-5, |g| {
                let mut s = st.clone();
                s.gamma = g.to_vec();
                dot(&batchnorm_forward(&x, &mut s, Mode::Train).unwrap().0, &w)
            });
            assert!(rel_err(gg[c], num) < 1e-4);
        }
    }

    #[test]
    fn dropout_ratio_zero_and_infer_are_identity() {
        let mut r = rng(15);
        let x = random_tensor(shape(1, 2, 3, 3), &mut r);
        let (y, mask) = dropout_forward(&x, 0.0, Mode::Train, 1).unwrap();
        assert_eq!(y, x);
        assert!(mask.multipliers.iter().all(|&m| m == 1.0));
        let (y, _) = dropout_forward(&x, 0.9, Mode::Infer, 1).unwrap();
        assert_eq!(y, x);
        let layer = Dropout::new(0.5, 3).unwrap();
        assert_eq!(layer.infer(&x).unwrap(), x);
    }

    #[test]
    fn dropout_rejects_ratio_one() {
        let x = Tensor4::zeros(shape(1, 1, 1, 1));
        assert!(matches!(dropout_forward(&x, 1.0, Mode::Train, 0), Err(Error::Parameter(_))));
        assert!(Dropout::new(1.5, 0).is_err());
    }

    #[test]
    fn dropout_statistics_at_half() {
        let x = Tensor4::filled(shape(1, 1, 100, 100), 1.0);
        let (y, mask) = dropout_forward(&x, 0.5, Mode::Train, 42).unwrap();
        let frac = mask.survivors() as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "survivor fraction {frac}");
        let mean = y.sum() / 10_000.0;
        assert!((mean - 1.0).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_backward_uses_mask() {
        let x = Tensor4::filled(shape(1, 1, 4, 4), 1.0);
        let (y, mask) = dropout_forward(&x, 0.5, Mode::Train, 9).unwrap();
        let g = dropout_backward(&mask, &x).unwrap();
        assert_eq!(g, y);
    }

    #[test]
    fn empty_sequence_is_identity() {
        let mut r = rng(16);
        let x = random_tensor(shape(1, 1, 2, 2), &mut r);
        let mut net = Sequential::new(vec![]);
        assert_eq!(net.forward(&x, Mode::Train).unwrap(), x);
        assert_eq!(net.backward(&x).unwrap(), x);
    }

    #[test]
    fn linear_chain_composes() {
        let mut r = rng(17);
        let x = random_tensor(shape(1, 1, 2, 3), &mut r);
        let mut net = Sequential::new(vec![Box::new(Scale::new(2.0)), Box::new(Scale::new(3.0))]);
        let y = net.forward(&x, Mode::Train).unwrap();
        assert!(y.max_abs_diff(&tensor::scale(&x, 6.0)) < 1e-15);
        let g = net.backward(&x).unwrap();
        assert!(g.max_abs_diff(&tensor::scale(&x, 6.0)) < 1e-15);
    }

    #[test]
    fn backward_before_forward_is_contract_error() {
        let mut net = Sequential::new(vec![Box::new(Relu::new())]);
        let g = Tensor4::zeros(shape(1, 1, 1, 1));
        assert!(matches!(net.backward(&g), Err(Error::Contract(_))));
        let mut conv = Conv2d::new(1, 1, ConvSpec::kernel(1, 1).unwrap(), &mut rng(0)).unwrap();
        assert!(matches!(conv.backward(&g), Err(Error::Contract(_))));
    }

    #[test]
    fn kaiming_init_has_expected_spread() {
        let conv = Conv2d::new(64, 128, ConvSpec::kernel(3, 3).unwrap(), &mut rng(18)).unwrap();
        let w = conv.weight.value.data();
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / (64.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.05, "{var} vs {expect}");
        assert!(conv.bias.value.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn parameter_gradients_are_overwritten() {
        let mut r = rng(19);
        let mut conv = Conv2d::new(2, 2, ConvSpec::kernel(1, 1).unwrap(), &mut r).unwrap();
        let x = random_tensor(shape(1, 2, 2, 2), &mut r);
        let g = random_tensor(shape(1, 2, 2, 2), &mut r);
        conv.forward(&x, Mode::Train).unwrap();
        conv.backward(&g).unwrap();
        let first = conv.weight.grad.clone();
        conv.forward(&x, Mode::Train).unwrap();
        conv.backward(&g).unwrap();
        assert_eq!(conv.weight.grad, first);
    }

    #[test]
    fn height_mean_backward_spreads_evenly() {
        let mut r = rng(20);
        let x = random_tensor(shape(2, 2, 3, 4), &mut r);
        let w = random_tensor(shape(2, 2, 1, 4), &mut r);
        let mut hm = HeightMean::new();
        hm.forward(&x, Mode::Train).unwrap();
        let g = hm.backward(&w).unwrap();
        let mut xs = x.data().to_vec();
        for i in [0, 5, 17, 40] {
            let num = central_diff(&mut xs, i, 1e-5, |v| {
                dot(&height_mean(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap()), &w)
            });
            assert!(rel_err(g.data()[i], num) < 1e-6);
        }
    }

    #[test]
    fn width_pool_averages_runs_and_drops_the_tail() {
        let x = Tensor4::from_vec(shape(1, 1, 1, 7), vec![1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 100.0]).unwrap();
        assert_eq!(width_pool(&x, 2).unwrap().data(), &[2.0, 6.0, 10.0]);
        assert_eq!(width_pool(&x, 1).unwrap(), x);
        assert!(matches!(width_pool(&x, 8), Err(Error::Shape(_))));
        assert!(matches!(WidthPool::new(0), Err(Error::Parameter(_))));
    }

    #[test]
    fn width_pool_backward_matches_finite_differences() {
        let mut r = rng(21);
        let x = random_tensor(shape(2, 2, 3, 10), &mut r);
        let w = random_tensor(shape(2, 2, 3, 3), &mut r);
        let mut wp = WidthPool::new(3).unwrap();
        wp.forward(&x, Mode::Train).unwrap();
        let g = wp.backward(&w).unwrap();
        let mut xs = x.data().to_vec();
        for i in 0..xs.len() {
            let num = central_diff(&mut xs, i, 1e-5, |v| {
                dot(&width_pool(&Tensor4::from_vec(x.shape(), v.to_vec()).unwrap(), 3).unwrap(), &w)
            });
            assert!((g.data()[i] - num).abs() < 1e-9, "x[{i}] {} vs {num}", g.data()[i]);
        }
    }
}
