//! Connectionist Temporal Classification loss.
//!
//! The forward and backward recursions run over the blank-interleaved target
//! `[blank, l1, blank, l2, ..., lL, blank]` entirely in log space. `-inf`
//! stands for probability zero and is absorbing under [`log_add`].

use crate::error::{Error, Result};
use crate::lprnet::LogitSequence;

/// `ln(exp(a) + exp(b))` with `-inf` as the additive identity.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Time-major `steps x classes` matrix of per-timestep log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbs {
    steps: usize,
    classes: usize,
    values: Vec<f64>,
}

impl LogProbs {
    pub fn new(steps: usize, classes: usize, values: Vec<f64>) -> Result<Self> {
        if steps == 0 || classes == 0 {
            return Err(Error::Shape(format!("log-prob matrix {steps}x{classes} is empty")));
        }
        if values.len() != steps * classes {
            return Err(Error::Dimension {
                axis: "log-prob entries",
                expected: steps * classes,
                actual: values.len(),
            });
        }
        Ok(LogProbs { steps, classes, values })
    }

    /// Builds from probabilities, taking logs.
    pub fn from_probs(steps: usize, classes: usize, probs: &[f64]) -> Result<Self> {
        Self::new(steps, classes, probs.iter().map(|p| p.ln()).collect())
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, t: usize, class: usize) -> f64 {
        self.values[t * self.classes + class]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.classes..(t + 1) * self.classes]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Max-subtracted log-softmax over classes at every timestep.
pub fn log_softmax(logits: &LogitSequence) -> LogProbs {
    let (classes, steps) = (logits.classes(), logits.steps());
    let mut values = vec![0.0; steps * classes];
    for t in 0..steps {
        let m = (0..classes).map(|c| logits.get(c, t)).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..classes).map(|c| (logits.get(c, t) - m).exp()).sum::<f64>().ln();
        for c in 0..classes {
            values[t * classes + c] = logits.get(c, t) - lse;
        }
    }
    LogProbs { steps, classes, values }
}

/// One labelled sequence ready for the CTC recursions.
#[derive(Clone, Debug)]
pub struct CtcInstance {
    pub log_probs: LogProbs,
    pub target: Vec<usize>,
    pub blank: usize,
}

impl CtcInstance {
    /// Validates class ranges and that each row is a distribution to 1e-9.
    pub fn new(log_probs: LogProbs, target: Vec<usize>, blank: usize) -> Result<Self> {
        let classes = log_probs.classes();
        if blank >= classes {
            return Err(Error::Parameter(format!("blank {blank} outside {classes} classes")));
        }
        if let Some(&bad) = target.iter().find(|&&k| k >= classes || k == blank) {
            return Err(Error::Parameter(format!("target class {bad} is the blank or out of range")));
        }
        for t in 0..log_probs.steps() {
            let total: f64 = log_probs.row(t).iter().map(|v| v.exp()).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Parameter(format!("row {t} sums to {total}, not 1")));
            }
        }
        Ok(CtcInstance {
            log_probs,
            target,
            blank,
        })
    }

    /// Minimum number of timesteps able to emit the target: one per label
    /// plus a separating blank between each pair of equal neighbours.
    pub fn required_steps(&self) -> usize {
        self.target.len() + self.target.windows(2).filter(|w| w[0] == w[1]).count()
    }

    pub fn is_feasible(&self) -> bool {
        self.log_probs.steps() >= self.required_steps()
    }

    fn extended(&self) -> Vec<usize> {
        let mut ext = Vec::with_capacity(2 * self.target.len() + 1);
        ext.push(self.blank);
        for &k in &self.target {
            ext.push(k);
            ext.push(self.blank);
        }
        ext
    }

    fn infeasible(&self) -> Error {
        Error::Infeasible {
            target_len: self.target.len(),
            required: self.required_steps(),
            timesteps: self.log_probs.steps(),
        }
    }
}

/// Negative log-likelihood; `value` is `+inf` when the target cannot be
/// emitted in the available timesteps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    pub value: f64,
    pub feasible: bool,
}

/// Log-space forward variables, `alpha[t * S + s]`.
fn forward_vars(inst: &CtcInstance, ext: &[usize]) -> Vec<f64> {
    let steps = inst.log_probs.steps();
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; steps * s_len];
    alpha[0] = inst.log_probs.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = inst.log_probs.get(0, ext[1]);
    }
    for t in 1..steps {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if s >= 2 && ext[s] != inst.blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == f64::NEG_INFINITY {
                acc
            } else {
                acc + inst.log_probs.get(t, ext[s])
            };
        }
    }
    alpha
}

/// Log-space backward variables excluding the emission at `t`.
fn backward_vars(inst: &CtcInstance, ext: &[usize]) -> Vec<f64> {
    let steps = inst.log_probs.steps();
    let s_len = ext.len();
    let mut beta = vec![f64::NEG_INFINITY; steps * s_len];
    let last = (steps - 1) * s_len;
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..steps - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let next = &next[..s_len];
        let emit = |s: usize| next[s] + inst.log_probs.get(t + 1, ext[s]);
        for s in 0..s_len {
            let mut acc = emit(s);
            if s + 1 < s_len {
                acc = log_add(acc, emit(s + 1));
            }
            if s + 2 < s_len && ext[s + 2] != inst.blank && ext[s + 2] != ext[s] {
                acc = log_add(acc, emit(s + 2));
            }
            cur[s] = acc;
        }
    }
    beta
}

fn total_log_prob(alpha: &[f64], steps: usize, s_len: usize) -> f64 {
    let last = &alpha[(steps - 1) * s_len..];
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

pub fn ctc_loss(inst: &CtcInstance) -> CtcLoss {
    if !inst.is_feasible() {
        return CtcLoss {
            value: f64::INFINITY,
            feasible: false,
        };
    }
    let ext = inst.extended();
    let alpha = forward_vars(inst, &ext);
    CtcLoss {
        value: -total_log_prob(&alpha, inst.log_probs.steps(), ext.len()),
        feasible: true,
    }
}

/// Loss and its gradient with respect to the unnormalized logits that
/// produced `inst.log_probs` through [`log_softmax`]. The gradient is
/// time-major `steps x classes`.
pub fn ctc_loss_and_grad(inst: &CtcInstance) -> Result<(f64, Vec<f64>)> {
    if !inst.is_feasible() {
        return Err(inst.infeasible());
    }
    let ext = inst.extended();
    let steps = inst.log_probs.steps();
    let classes = inst.log_probs.classes();
    let s_len = ext.len();
    let alpha = forward_vars(inst, &ext);
    let beta = backward_vars(inst, &ext);
    let log_p = total_log_prob(&alpha, steps, s_len);
    if !log_p.is_finite() {
        return Err(inst.infeasible());
    }

    let mut grad = vec![0.0; steps * classes];
    let mut occupancy = vec![f64::NEG_INFINITY; classes];
    for t in 0..steps {
        occupancy.fill(f64::NEG_INFINITY);
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s];
            occupancy[ext[s]] = log_add(occupancy[ext[s]], v);
        }
        for k in 0..classes {
            let softmax = inst.log_probs.get(t, k).exp();
            let posterior = if occupancy[k] == f64::NEG_INFINITY {
                0.0
            } else {
                (occupancy[k] - log_p).exp()
            };
            grad[t * classes + k] = softmax - posterior;
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_grad(inst: &CtcInstance) -> Result<Vec<f64>> {
    Ok(ctc_loss_and_grad(inst)?.1)
}

/// Merge consecutive repeats, then drop blanks.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Largest path count the exhaustive oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u128 = 10_000_000;

/// Exhaustive sum over all `classes^T` alignments. Test oracle for
/// [`ctc_loss`]; independent of the recursions above.
pub fn ctc_brute_force(inst: &CtcInstance) -> Result<f64> {
    let steps = inst.log_probs.steps();
    let classes = inst.log_probs.classes();
    let paths = (classes as u128).checked_pow(steps as u32).unwrap_or(u128::MAX);
    if paths > BRUTE_FORCE_LIMIT {
        return Err(Error::GuardExceeded {
            paths,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let mut path = vec![0usize; steps];
    let mut total = 0.0;
    loop {
        if collapse(&path, inst.blank) == inst.target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| inst.log_probs.get(t, k)).sum();
            total += lp.exp();
        }
        // odometer increment
        let mut t = steps;
        loop {
            if t == 0 {
                return Ok(-total.ln());
            }
            t -= 1;
            path[t] += 1;
            if path[t] < classes {
                break;
            }
            path[t] = 0;
        }
    }
}

/// Mean loss over a batch and per-instance logit gradients scaled by
/// `1 / feasible_count`. Infeasible instances are skipped with a warning and
/// get an all-zero gradient; `None` if nothing in the batch was feasible.
pub fn batch_loss_and_grad(instances: &[CtcInstance]) -> Option<(f64, Vec<Vec<f64>>)> {
    let mut results = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        match ctc_loss_and_grad(inst) {
            Ok(r) => results.push(Some(r)),
            Err(e) => {
                log::warn!("skipping batch item {i}: {e}");
                results.push(None);
            }
        }
    }
    let feasible = results.iter().filter(|r| r.is_some()).count();
    if feasible == 0 {
        return None;
    }
    let inv = 1.0 / feasible as f64;
    let mut loss = 0.0;
    let grads = results
        .into_iter()
        .zip(instances)
        .map(|(r, inst)| match r {
            Some((l, g)) => {
                loss += l;
                g.into_iter().map(|v| v * inv).collect()
            }
            None => vec![0.0; inst.log_probs.steps() * inst.log_probs.classes()],
        })
        .collect();
    Some((loss * inv, grads))
}
