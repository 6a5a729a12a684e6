//! LPRNet backbone, small basic blocks, logit read-out and greedy decoding.
//!
//! Backbone for a `3 x 24 x 94` input:
//!
//! | layer                      | output            |
//! |----------------------------|-------------------|
//! | conv 3x3 s1 p1 + BN + ReLU | 64 x 24 x 94      |
//! | maxpool 3x3 s1 p1          | 64 x 24 x 94      |
//! | small basic block          | 128 x 24 x 94     |
//! | maxpool 3x3 s(2,1) p1      | 128 x 12 x 94     |
//! | small basic block          | 256 x 12 x 94     |
//! | small basic block          | 256 x 12 x 94     |
//! | maxpool 3x3 s(2,1) p1      | 256 x 6 x 94      |
//! | dropout 0.5                | 256 x 6 x 94      |
//! | conv 1x13 p(0,6)           | classes x 6 x 94  |
//!
//! The class map is averaged over height to give `T = 94` timesteps. Because
//! the logit convolution has a kernel height of 1, the average can be taken
//! before it instead of after; the result is the same up to rounding and the
//! convolution then runs over 1 row instead of 6. [`LprNetConfig::fold_height_mean`]
//! selects that ordering and is on by default.
//!
//! [`LprNetConfig::width_pool`] optionally averages runs of `k` columns before
//! the logit convolution, giving `T = 94 / k` timesteps. The default of 1 keeps
//! the table above.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::charset::CharSet;
use crate::ctc::{collapse, log_softmax, CtcInstance};
use crate::error::{Error, Result};
use crate::layers::checkpoint::{self, Checkpoint};
use crate::layers::{height_mean, BatchNorm2d, Conv2d, Dropout, HeightMean, Layer, MaxPool2d, Mode, Relu, Sequential, WidthPool};
use crate::seed;
use crate::tensor::{ConvSpec, Shape4, Tensor4};

pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_HEIGHT: usize = 24;
pub const INPUT_WIDTH: usize = 94;

/// Channel widths of the stem convolution and the three small basic blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widths {
    pub stem: usize,
    pub block1: usize,
    pub block2: usize,
    pub block3: usize,
}

impl Widths {
    pub const FULL: Widths = Widths {
        stem: 64,
        block1: 128,
        block2: 256,
        block3: 256,
    };

    /// Narrow variant for smoke tests and gradient checks.
    pub const TINY: Widths = Widths {
        stem: 8,
        block1: 16,
        block2: 16,
        block3: 16,
    };

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::FULL),
            "tiny" => Ok(Self::TINY),
            other => Err(Error::Config(format!("unknown model width {other:?}; expected full or tiny"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LprNetConfig {
    pub charset: CharSet,
    pub dropout_ratio: f64,
    pub widths: Widths,
    pub fold_height_mean: bool,
    /// Columns averaged per output timestep; 1 keeps all 94.
    #[serde(default = "one")]
    pub width_pool: usize,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl LprNetConfig {
    pub fn new(charset: CharSet, seed: u64) -> Self {
        LprNetConfig {
            charset,
            dropout_ratio: 0.5,
            widths: Widths::FULL,
            fold_height_mean: true,
            width_pool: 1,
            seed,
        }
    }

    pub fn classes(&self) -> usize {
        self.charset.classes()
    }

    /// Output sequence length.
    pub fn timesteps(&self) -> usize {
        INPUT_WIDTH / self.width_pool.max(1)
    }
}

/// Raw per-timestep class scores, `classes x steps`, class-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSequence {
    classes: usize,
    steps: usize,
    values: Vec<f64>,
}

impl LogitSequence {
    pub fn new(classes: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if classes == 0 || steps == 0 {
            return Err(Error::Shape(format!("logit sequence {classes}x{steps} is empty")));
        }
        if values.len() != classes * steps {
            return Err(Error::Dimension {
                axis: "logit entries",
                expected: classes * steps,
                actual: values.len(),
            });
        }
        Ok(LogitSequence { classes, steps, values })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, class: usize, t: usize) -> f64 {
        self.values[class * self.steps + t]
    }

    pub fn set(&mut self, class: usize, t: usize, v: f64) {
        self.values[class * self.steps + t] = v;
    }

    /// Per-timestep argmax, ties to the lowest class index.
    pub fn best_path(&self) -> Vec<usize> {
        (0..self.steps)
            .map(|t| {
                let mut best = 0;
                for c in 1..self.classes {
                    if self.get(c, t) > self.get(best, t) {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn conv_bn_relu(layers: &mut Vec<Box<dyn Layer>>, c_in: usize, c_out: usize, spec: ConvSpec, seed: u64, index: &mut u64) -> Result<()> {
    let mut rng = seed::stream(seed, *index);
    *index += 1;
    layers.push(Box::new(Conv2d::new(c_in, c_out, spec, &mut rng)?));
    layers.push(Box::new(BatchNorm2d::new(c_out)));
    layers.push(Box::new(Relu::new()));
    Ok(())
}

fn block_with_seed(c_in: usize, c_out: usize, seed: u64, index: &mut u64) -> Result<Sequential> {
    if !c_out.is_multiple_of(4) || c_out == 0 {
        return Err(Error::Parameter(format!(
            "small basic block output width {c_out} must be a positive multiple of 4"
        )));
    }
    let mid = c_out / 4;
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    conv_bn_relu(&mut layers, c_in, mid, ConvSpec::kernel(1, 1)?, seed, index)?;
    conv_bn_relu(&mut layers, mid, mid, ConvSpec::new((3, 1), (1, 1), (1, 0))?, seed, index)?;
    conv_bn_relu(&mut layers, mid, mid, ConvSpec::new((1, 3), (1, 1), (0, 1))?, seed, index)?;
    conv_bn_relu(&mut layers, mid, c_out, ConvSpec::kernel(1, 1)?, seed, index)?;
    Ok(Sequential::new(layers))
}

/// Four convolutions (1x1 to c_out/4, 3x1 pad H, 1x3 pad W, 1x1 to c_out),
/// each followed by batch norm and ReLU. Spatial size is preserved.
pub fn small_basic_block(c_in: usize, c_out: usize, seed: u64) -> Result<Sequential> {
    block_with_seed(c_in, c_out, seed, &mut 0)
}

fn pool(stride: (usize, usize)) -> Result<Box<dyn Layer>> {
    Ok(Box::new(MaxPool2d::new(ConvSpec::new((3, 3), stride, (1, 1))?)))
}

/// Assembles the backbone described in the module docs.
pub fn build_lprnet(config: &LprNetConfig) -> Result<Sequential> {
    if config.charset.len() < 2 {
        return Err(Error::Config("charset needs at least 2 characters".into()));
    }
    let w = config.widths;
    let seed = config.seed;
    let mut index = 0u64;
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();
    conv_bn_relu(&mut layers, INPUT_CHANNELS, w.stem, ConvSpec::new((3, 3), (1, 1), (1, 1))?, seed, &mut index)?;
    layers.push(pool((1, 1))?);
    layers.push(Box::new(block_with_seed(w.stem, w.block1, seed, &mut index)?));
    layers.push(pool((2, 1))?);
    layers.push(Box::new(block_with_seed(w.block1, w.block2, seed, &mut index)?));
    layers.push(Box::new(block_with_seed(w.block2, w.block3, seed, &mut index)?));
    layers.push(pool((2, 1))?);
    layers.push(Box::new(Dropout::new(config.dropout_ratio, seed::derive_seed(seed, index))?));
    index += 1;
    if config.fold_height_mean {
        layers.push(Box::new(HeightMean::new()));
    }
    if config.width_pool == 0 || config.width_pool > INPUT_WIDTH {
        return Err(Error::Config(format!(
            "width pool {} must be between 1 and {INPUT_WIDTH}",
            config.width_pool
        )));
    }
    if config.width_pool > 1 {
        layers.push(Box::new(WidthPool::new(config.width_pool)?));
    }
    let mut rng = seed::stream(seed, index);
    layers.push(Box::new(Conv2d::new(
        w.block3,
        config.classes(),
        ConvSpec::new((1, 13), (1, 1), (0, 6))?,
        &mut rng,
    )?));
    Ok(Sequential::new(layers))
}

/// Averages the class map over height; one sequence per batch item.
pub fn logits_to_sequence(backbone_output: &Tensor4) -> Vec<LogitSequence> {
    let collapsed = if backbone_output.shape().h == 1 {
        backbone_output.clone()
    } else {
        height_mean(backbone_output)
    };
    let s = collapsed.shape();
    (0..s.n)
        .map(|n| LogitSequence::new(s.c, s.w, collapsed.sample(n).to_vec()).expect("shape is consistent"))
        .collect()
}

/// Best-path decoding: argmax per step, merge repeats, drop blanks.
pub fn greedy_decode(logits: &LogitSequence, charset: &CharSet) -> String {
    charset.decode(&collapse(&logits.best_path(), charset.blank()))
}

fn expect_input(x: &Tensor4) -> Result<()> {
    let s = x.shape();
    crate::tensor::check_axis("input channels", INPUT_CHANNELS, s.c)?;
    crate::tensor::check_axis("input height", INPUT_HEIGHT, s.h)?;
    crate::tensor::check_axis("input width", INPUT_WIDTH, s.w)
}

/// A built network together with its configuration.
pub struct LprNet {
    config: LprNetConfig,
    net: Sequential,
    output_height: usize,
}

impl LprNet {
    pub fn new(config: LprNetConfig) -> Result<Self> {
        let net = build_lprnet(&config)?;
        let output_height = if config.fold_height_mean { 1 } else { 6 };
        Ok(LprNet {
            config,
            net,
            output_height,
        })
    }

    pub fn config(&self) -> &LprNetConfig {
        &self.config
    }

    pub fn charset(&self) -> &CharSet {
        &self.config.charset
    }

    pub fn network(&self) -> &Sequential {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Sequential {
        &mut self.net
    }

    pub fn parameter_count(&self) -> usize {
        self.net.trainable_parameter_count()
    }

    /// Backbone output `(n, classes, h, T)`; `h` is 1 when the height mean
    /// is folded in, 6 otherwise.
    pub fn forward(&mut self, input: &Tensor4, mode: Mode) -> Result<Tensor4> {
        expect_input(input)?;
        self.net.forward(input, mode)
    }

    pub fn infer(&self, input: &Tensor4) -> Result<Tensor4> {
        expect_input(input)?;
        self.net.infer(input)
    }

    /// Backward from the gradient of the per-sample logit sequences.
    pub fn backward_from_logits(&mut self, grads: &[Vec<f64>]) -> Result<Tensor4> {
        let classes = self.config.classes();
        let n = grads.len();
        let steps = self.config.timesteps();
        let shape = Shape4::new(n, classes, self.output_height, steps)?;
        let mut g = Tensor4::zeros(shape);
        let inv_h = 1.0 / self.output_height as f64;
        for (i, grad) in grads.iter().enumerate() {
            // grad is time-major (T x classes); spread the height mean
            for t in 0..steps {
                for c in 0..classes {
                    let v = grad[t * classes + c] * inv_h;
                    for y in 0..self.output_height {
                        g.set(i, c, y, t, v);
                    }
                }
            }
        }
        self.net.backward(&g)
    }

    pub fn recognize(&self, input: &Tensor4) -> Result<Vec<String>> {
        let out = self.infer(input)?;
        Ok(logits_to_sequence(&out)
            .iter()
            .map(|l| greedy_decode(l, &self.config.charset))
            .collect())
    }

    /// CTC instances for a forward output and its encoded targets.
    pub fn ctc_instances(&self, output: &Tensor4, targets: &[Vec<usize>]) -> Result<Vec<CtcInstance>> {
        logits_to_sequence(output)
            .iter()
            .zip(targets)
            .map(|(l, t)| CtcInstance::new(log_softmax(l), t.clone(), self.config.charset.blank()))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            metadata: serde_json::to_string(&self.config)?,
            tensors: self.net.state_tensors(),
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: LprNetConfig = serde_json::from_str(&ckpt.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let mut net = LprNet::new(config)?;
        net.net.load_state(&ckpt.tensors)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_checkpoint()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(path)?)
    }
}
