//! Adam with additive gradient noise, a step-decay learning rate, and the
//! training loop that ties the network to the CTC objective.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::batch_loss_and_grad;
use crate::error::{Error, Result};
use crate::layers::{Layer, Mode, Sequential};
use crate::lprnet::{LprNet, INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH};
use crate::seed::{self, streams};
use crate::tensor::{check_axis, check_same_shape, Shape4, Tensor4};
use crate::CharSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub base_lr: f64,
    pub drop_factor: f64,
    pub drop_every: usize,
    pub total_iters: usize,
    pub noise_scale: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Write `iter_<N>.lprb` every this many iterations; 0 writes only the
    /// final checkpoint.
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            base_lr: 0.001,
            drop_factor: 10.0,
            drop_every: 100_000,
            total_iters: 250_000,
            noise_scale: 0.001,
            batch_size: 32,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainSchedule {
    /// Short schedule that fits on a workstation.
    pub fn desk() -> Self {
        TrainSchedule {
            drop_every: 2_500,
            total_iters: 3_000,
            checkpoint_every: 1_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Parameter(format!("schedule {name} must be positive")))
            }
        };
        positive("base_lr", self.base_lr > 0.0 && self.base_lr.is_finite())?;
        positive("drop_every", self.drop_every > 0)?;
        positive("batch_size", self.batch_size > 0)?;
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::Parameter("schedule noise_scale must be non-negative".into()));
        }
        if !(self.drop_factor > 1.0 && self.drop_factor.is_finite()) {
            return Err(Error::Parameter(format!("drop_factor {} must exceed 1", self.drop_factor)));
        }
        Ok(())
    }

    /// Number of constant-rate plateaus over the whole run.
    pub fn plateaus(&self) -> usize {
        self.total_iters.div_ceil(self.drop_every)
    }
}

pub fn lr_at(schedule: &TrainSchedule, iteration: usize) -> Result<f64> {
    if iteration >= schedule.total_iters {
        return Err(Error::Parameter(format!(
            "iteration {iteration} is outside [0, {})",
            schedule.total_iters
        )));
    }
    let drops = (iteration / schedule.drop_every) as i32;
    Ok(schedule.base_lr / schedule.drop_factor.powi(drops))
}

/// First and second moment estimates, one tensor per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor4>,
    pub v: Vec<Tensor4>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(shapes: &[Shape4]) -> Self {
        AdamState {
            m: shapes.iter().map(|&s| Tensor4::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor4::zeros(s)).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPSILON,
        }
    }

    pub fn for_network(net: &Sequential) -> Self {
        let mut shapes = Vec::new();
        net.visit_params("", &mut |_, p| {
            if p.trainable {
                shapes.push(p.value.shape());
            }
        });
        Self::new(&shapes)
    }

    fn advance(&mut self) -> (f64, f64) {
        self.t += 1;
        let t = self.t as i32;
        (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t))
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, bc: (f64, f64), b1: f64, b2: f64, eps: f64) {
    for i in 0..theta.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / bc.0;
        let v_hat = v[i] / bc.1;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

pub fn adam_step(params: &mut [Tensor4], grads: &[Tensor4], state: &mut AdamState, lr: f64) -> Result<()> {
    check_axis("parameter count", params.len(), grads.len())?;
    check_axis("moment count", params.len(), state.m.len())?;
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        check_same_shape(p.shape(), g.shape())?;
        check_same_shape(p.shape(), m.shape())?;
    }
    let bc = state.advance();
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (i, p) in params.iter_mut().enumerate() {
        adam_update(
            p.data_mut(),
            grads[i].data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            lr,
            bc,
            b1,
            b2,
            eps,
        );
    }
    Ok(())
}

/// Adam step over the trainable parameters of `net`, reading each gradient
/// buffer left by the last backward pass.
pub fn step_network(net: &mut Sequential, state: &mut AdamState, lr: f64) -> Result<()> {
    let mut shapes = Vec::new();
    net.visit_params("", &mut |_, p| {
        if p.trainable {
            shapes.push(p.value.shape());
        }
    });
    check_axis("moment count", state.m.len(), shapes.len())?;
    for (s, m) in shapes.iter().zip(&state.m) {
        check_same_shape(*s, m.shape())?;
    }
    let bc = state.advance();
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut i = 0;
    net.visit_params_mut("", &mut |_, p| {
        if p.trainable {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            adam_update(p.value.data_mut(), p.grad.data(), m.data_mut(), v.data_mut(), lr, bc, b1, b2, eps);
            i += 1;
        }
    });
    Ok(())
}

pub fn add_gradient_noise(grads: &mut [f64], noise_scale: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Parameter(format!("noise scale {noise_scale} must be non-negative")));
    }
    if noise_scale == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, noise_scale).expect("finite positive std");
    for g in grads {
        *g += normal.sample(rng);
    }
    Ok(())
}

fn noise_network(net: &mut Sequential, noise_scale: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut result = Ok(());
    net.visit_params_mut("", &mut |_, p| {
        if p.trainable && result.is_ok() {
            result = add_gradient_noise(p.grad.data_mut(), noise_scale, rng);
        }
    });
    result
}

/// Network-sized images with their encoded labels.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    images: Vec<Tensor4>,
    labels: Vec<String>,
    targets: Vec<Vec<usize>>,
}

impl TrainingSet {
    /// Each image must be `1 x 3 x 24 x 94`; labels are checked against the
    /// charset and the number of output time steps.
    pub fn new(charset: &CharSet, samples: Vec<(Tensor4, String)>) -> Result<Self> {
        let mut set = TrainingSet {
            images: Vec::with_capacity(samples.len()),
            labels: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
        };
        for (image, label) in samples {
            let s = image.shape();
            check_axis("batch", 1, s.n)?;
            check_axis("input channels", INPUT_CHANNELS, s.c)?;
            check_axis("input height", INPUT_HEIGHT, s.h)?;
            check_axis("input width", INPUT_WIDTH, s.w)?;
            let target = charset.encode(&label)?;
            let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
            let required = target.len() + repeats;
            if required > INPUT_WIDTH {
                return Err(Error::Infeasible {
                    target_len: target.len(),
                    required,
                    timesteps: INPUT_WIDTH,
                });
            }
            set.images.push(image);
            set.labels.push(label);
            set.targets.push(target);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn images(&self) -> &[Tensor4] {
        &self.images
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor4, Vec<Vec<usize>>)> {
        let images: Vec<Tensor4> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let targets = indices.iter().map(|&i| self.targets[i].clone()).collect();
        Ok((Tensor4::stack(&images)?, targets))
    }
}

/// Epoch-wise shuffled index stream.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchSampler {
            order: (0..len).collect(),
            cursor: 0,
            rng: seed::stream(seed, streams::SHUFFLE),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("iter_{iteration}.lprb")
}

pub const LOG_FILE: &str = "train_log.csv";

/// Runs `schedule.total_iters` steps of sample, forward, CTC, backward,
/// gradient noise and Adam. With a checkpoint directory, the log is appended
/// to `train_log.csv` there as it runs and checkpoints are written as
/// `iter_<N>.lprb`, `N` counting completed iterations.
pub fn train(net: &mut LprNet, data: &TrainingSet, schedule: &TrainSchedule, checkpoint_dir: Option<&Path>) -> Result<TrainingLog> {
    schedule.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training set is empty".into()));
    }
    let timesteps = net.config().timesteps();
    for target in &data.targets {
        let required = target.len() + target.windows(2).filter(|w| w[0] == w[1]).count();
        if required > timesteps {
            return Err(Error::Infeasible {
                target_len: target.len(),
                required,
                timesteps,
            });
        }
    }
    let mut log = TrainingLog::default();
    if schedule.total_iters == 0 {
        return Ok(log);
    }
    let mut writer = match checkpoint_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(csv::Writer::from_writer(File::create(dir.join(LOG_FILE))?))
        }
        None => None,
    };
    let batch_size = schedule.batch_size.min(data.len());
    let mut sampler = BatchSampler::new(data.len(), schedule.seed);
    let mut noise_rng = seed::stream(schedule.seed, streams::GRAD_NOISE);
    let mut adam = AdamState::for_network(net.network());
    let start = Instant::now();

    for it in 0..schedule.total_iters {
        let lr = lr_at(schedule, it)?;
        let (images, targets) = data.batch(&sampler.next_batch(batch_size))?;
        let out = net.forward(&images, Mode::Train)?;
        let instances = net.ctc_instances(&out, &targets)?;
        let (loss, grads) = batch_loss_and_grad(&instances)
            .ok_or_else(|| Error::Contract(format!("no feasible item in the batch at iteration {it}")))?;
        if !loss.is_finite() {
            let dir = checkpoint_dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
            let snapshot = dir.join(format!("nonfinite_iter_{it}.lprb"));
            net.save(&snapshot)?;
            return Err(Error::NonFiniteLoss {
                iteration: it,
                loss,
                snapshot,
            });
        }
        net.backward_from_logits(&grads)?;
        noise_network(net.network_mut(), schedule.noise_scale, &mut noise_rng)?;
        step_network(net.network_mut(), &mut adam, lr)?;

        let record = LogRecord {
            iteration: it,
            lr,
            loss,
            elapsed_ms: start.elapsed().as_millis() as u64,
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&record)?;
            w.flush()?;
        }
        if it % 50 == 0 || it + 1 == schedule.total_iters {
            log::info!("iteration {it}: loss {loss:.4}, lr {lr}, {} ms", record.elapsed_ms);
        }
        log.records.push(record);

        let done = it + 1;
        let periodic = schedule.checkpoint_every > 0 && done % schedule.checkpoint_every == 0;
        if let Some(dir) = checkpoint_dir {
            if periodic || done == schedule.total_iters {
                let path = dir.join(checkpoint_name(done));
                net.save(&path)?;
                log.checkpoints.push(path);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lprnet::{LprNetConfig, Widths};
    use crate::testutil::{random_tensor, rng};
    use proptest::prelude::*;

    fn one(v: f64) -> Tensor4 {
        Tensor4::from_vec(Shape4::new(1, 1, 1, 1).unwrap(), vec![v]).unwrap()
    }

    #[test]
    fn lr_schedule_examples() {
        let s = TrainSchedule::default();
        assert_eq!(lr_at(&s, 0).unwrap(), 0.001);
        assert_eq!(lr_at(&s, 99_999).unwrap(), 0.001);
        assert!((lr_at(&s, 100_000).unwrap() - 0.0001).abs() < 1e-18);
        assert!(matches!(lr_at(&s, 250_000), Err(Error::Parameter(_))));
        assert_eq!(s.plateaus(), 3);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        let bad = TrainSchedule { drop_factor: 1.0, ..TrainSchedule::default() };
        assert!(bad.validate().is_err());
        let bad = TrainSchedule { batch_size: 0, ..TrainSchedule::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![one(0.7)];
        let mut st = AdamState::new(&[p[0].shape()]);
        adam_step(&mut p, &[one(0.0)], &mut st, 0.1).unwrap();
        assert_eq!(p[0].data()[0], 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        for g in [3.0, -0.02, 1e-3] {
            let mut p = vec![one(1.0)];
            let mut st = AdamState::new(&[p[0].shape()]);
            adam_step(&mut p, &[one(g)], &mut st, 0.01).unwrap();
            let expected = 1.0 - 0.01 * g / (g.abs() + ADAM_EPSILON);
            assert!((p[0].data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = vec![one(1.0)];
        let mut st = AdamState::new(&[p[0].shape()]);
        for _ in 0..200 {
            let g = one(2.0 * p[0].data()[0]);
            adam_step(&mut p, &[g], &mut st, 0.1).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-2);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = vec![one(1.0)];
        let mut st = AdamState::new(&[p[0].shape()]);
        let g = Tensor4::zeros(Shape4::new(2, 1, 1, 1).unwrap());
        assert!(matches!(adam_step(&mut p, &[g], &mut st, 0.1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let mut zero = vec![0.5; 10];
        add_gradient_noise(&mut zero, 0.0, &mut rng(1)).unwrap();
        assert_eq!(zero, vec![0.5; 10]);

        let mut g = vec![0.0; 1_000_000];
        add_gradient_noise(&mut g, 0.001, &mut rng(42)).unwrap();
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        let std = (g.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g.len() as f64).sqrt();
        assert!((std - 0.001).abs() <= 0.02 * 0.001, "std {std}");

        let mut a = vec![1.0; 100];
        let mut b = vec![1.0; 100];
        add_gradient_noise(&mut a, 0.001, &mut rng(9)).unwrap();
        add_gradient_noise(&mut b, 0.001, &mut rng(9)).unwrap();
        assert_eq!(a, b);
        assert!(add_gradient_noise(&mut a, -1.0, &mut rng(9)).is_err());
    }

    proptest! {
        #[test]
        fn lr_is_stepwise_non_increasing(drop_every in 1usize..50, total in 1usize..300) {
            let s = TrainSchedule { drop_every, total_iters: total, ..TrainSchedule::default() };
            let lrs: Vec<f64> = (0..total).map(|i| lr_at(&s, i).unwrap()).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let plateaus = 1 + lrs.windows(2).filter(|w| w[1] != w[0]).count();
            prop_assert_eq!(plateaus, total.div_ceil(drop_every));
        }

        #[test]
        fn adam_updates_are_bounded(seed in 0u64..500, lr in 1e-4f64..0.5) {
            let mut r = rng(seed);
            let shape = Shape4::new(3, 2, 1, 4).unwrap();
            let mut p = vec![random_tensor(shape, &mut r)];
            let mut st = AdamState::new(&[shape]);
            for _ in 0..30 {
                let g = random_tensor(shape, &mut r).map(|x| x * 5.0);
                let before = p[0].clone();
                adam_step(&mut p, &[g], &mut st, lr).unwrap();
                prop_assert!(before.max_abs_diff(&p[0]) <= 1.1 * lr);
                prop_assert!(st.v[0].data().iter().all(|&v| v >= 0.0 && v.is_finite()));
                prop_assert!(st.m[0].data().iter().all(|m| m.is_finite()));
            }
        }
    }

    fn tiny_net(seed: u64) -> LprNet {
        let mut cfg = LprNetConfig::new(CharSet::new("0123456789").unwrap(), seed);
        cfg.widths = Widths::TINY;
        LprNet::new(cfg).unwrap()
    }

    fn tiny_set(n: usize, seed: u64) -> TrainingSet {
        let mut r = rng(seed);
        let shape = Shape4::new(1, 3, 24, 94).unwrap();
        let samples = (0..n).map(|i| (random_tensor(shape, &mut r), format!("{}{}", i % 10, (i + 3) % 10))).collect();
        TrainingSet::new(&CharSet::new("0123456789").unwrap(), samples).unwrap()
    }

    #[test]
    fn zero_iterations_changes_nothing() {
        let mut net = tiny_net(1);
        let before = net.network().state_tensors();
        let s = TrainSchedule { total_iters: 0, ..TrainSchedule::desk() };
        let log = train(&mut net, &tiny_set(2, 1), &s, None).unwrap();
        assert!(log.records.is_empty());
        assert_eq!(net.network().state_tensors(), before);
    }

    #[test]
    fn rejects_bad_labels() {
        let shape = Shape4::new(1, 3, 24, 94).unwrap();
        let cs = CharSet::new("AB").unwrap();
        assert!(TrainingSet::new(&cs, vec![(Tensor4::zeros(shape), "AC".into())]).is_err());
        let long = "AB".repeat(48);
        assert!(matches!(TrainingSet::new(&cs, vec![(Tensor4::zeros(shape), long)]), Err(Error::Infeasible { .. })));
        let wrong = Tensor4::zeros(Shape4::new(1, 3, 24, 90).unwrap());
        assert!(TrainingSet::new(&cs, vec![(wrong, "A".into())]).is_err());
    }

    #[test]
    fn labels_longer_than_the_pooled_sequence_are_rejected() {
        let cs = CharSet::new("AB").unwrap();
        let mut cfg = LprNetConfig::new(cs.clone(), 1);
        cfg.widths = Widths::TINY;
        cfg.width_pool = 47;
        let mut net = LprNet::new(cfg).unwrap();
        let x = Tensor4::zeros(Shape4::new(1, 3, 24, 94).unwrap());
        let set = TrainingSet::new(&cs, vec![(x, "AAB".into())]).unwrap();
        let schedule = TrainSchedule { total_iters: 1, ..TrainSchedule::desk() };
        let err = train(&mut net, &set, &schedule, None).unwrap_err();
        assert!(matches!(err, Error::Infeasible { required: 4, timesteps: 2, .. }), "{err}");
    }

    #[test]
    fn same_seed_same_run() {
        let s = TrainSchedule { total_iters: 4, batch_size: 3, seed: 5, ..TrainSchedule::desk() };
        let data = tiny_set(5, 2);
        let dir = tempfile::tempdir().unwrap();
        let mut a = tiny_net(3);
        let la = train(&mut a, &data, &s, Some(&dir.path().join("a"))).unwrap();
        let mut b = tiny_net(3);
        let lb = train(&mut b, &data, &s, Some(&dir.path().join("b"))).unwrap();
        assert_eq!(la.losses(), lb.losses());
        let fa = std::fs::read(dir.path().join("a").join("iter_4.lprb")).unwrap();
        let fb = std::fs::read(dir.path().join("b").join("iter_4.lprb")).unwrap();
        assert_eq!(fa, fb);
        let csv = std::fs::read_to_string(dir.path().join("a").join(LOG_FILE)).unwrap();
        assert!(csv.starts_with("iteration,lr,loss,elapsed_ms\n"));
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = BatchSampler::new(7, 3);
        let mut first: Vec<usize> = s.next_batch(7);
        first.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        assert_eq!(s.next_batch(10).len(), 10);
    }
}
