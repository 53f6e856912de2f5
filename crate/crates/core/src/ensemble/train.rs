use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{nll_gradient, nll_loss, Cache, Member};
use super::EnsembleHyper;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Rows split into a training head and a validation tail, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub width: usize,
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub val_x: Vec<f64>,
    pub val_y: Vec<f64>,
}

impl Split {
    /// Chronological split: the last `validation_fraction` of rows validate.
    pub fn chronological(
        features: &[f64],
        targets: &[f64],
        width: usize,
        validation_fraction: f64,
    ) -> Result<Self> {
        let n = targets.len();
        if width == 0 || features.len() != n * width {
            return Err(Error::Arity {
                expected: n * width,
                actual: features.len(),
            });
        }
        let n_val = validation_rows(n, validation_fraction);
        if n_val == 0 || n_val >= n {
            return Err(Error::invalid(format!(
                "cannot split {n} rows with validation fraction {validation_fraction}"
            )));
        }
        let cut = n - n_val;
        Ok(Self {
            width,
            train_x: features[..cut * width].to_vec(),
            train_y: targets[..cut].to_vec(),
            val_x: features[cut * width..].to_vec(),
            val_y: targets[cut..].to_vec(),
        })
    }

    pub fn train_rows(&self) -> usize {
        self.train_y.len()
    }
}

pub(crate) fn validation_rows(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).max(1)
}

/// Tracks the best validation loss and decides when to stop.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            StopDecision::Improved
        } else if epoch - self.best_epoch >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Mean evaluation-mode NLL over flattened rows.
pub(crate) fn mean_nll(member: &Member, xs: &[f64], ys: &[f64]) -> f64 {
    let width = member.layout().inputs;
    let mut cache = Cache::new(member.layout());
    let total: f64 = ys
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let (mu, lv) = member.forward_cached(&xs[r * width..(r + 1) * width], &mut cache);
            nll_loss(mu, lv, y)
        })
        .sum();
    total / ys.len() as f64
}

/// Trains on the chronological split of `features`/`targets`.
pub fn train_member(
    member: Member,
    features: &[f64],
    targets: &[f64],
    hyper: &EnsembleHyper,
) -> Result<(Member, Vec<EpochRecord>)> {
    let split = Split::chronological(
        features,
        targets,
        member.layout().inputs,
        hyper.validation_fraction,
    )?;
    fit_member(member, &split, hyper)
}

/// Mini-batch Adam on the training rows with early stopping on validation
/// NLL. Returns the parameters of the best validation epoch.
pub fn fit_member(
    mut member: Member,
    split: &Split,
    hyper: &EnsembleHyper,
) -> Result<(Member, Vec<EpochRecord>)> {
    let layout = member.layout();
    if split.width != layout.inputs {
        return Err(Error::Arity {
            expected: layout.inputs,
            actual: split.width,
        });
    }
    let n = split.train_rows();
    if n < 2 * hyper.batch_size {
        return Err(Error::invalid(format!(
            "{n} training rows, need at least {} (twice the batch size)",
            2 * hyper.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(member.seed());
    rng.set_stream(1);
    let mut adam = Adam::new(layout.param_count(), hyper.learning_rate);
    let mut grad = vec![0.0; layout.param_count()];
    let mut cache = Cache::new(layout);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stopper = EarlyStopping::new(hyper.patience_epochs);
    let mut best = member.params().to_vec();
    let mut log = Vec::new();
    let width = layout.inputs;

    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            grad.fill(0.0);
            let inv = 1.0 / batch.len() as f64;
            for &r in batch {
                let x = &split.train_x[r * width..(r + 1) * width];
                member.draw_mask(&mut rng, &mut cache.scale);
                let (mu, lv) = member.forward_cached(x, &mut cache);
                let y = split.train_y[r];
                train_loss += nll_loss(mu, lv, y);
                let (d_mu, d_lv) = nll_gradient(mu, lv, y);
                member.backward_accumulate(x, &cache, d_mu * inv, d_lv * inv, &mut grad);
            }
            adam.step(member.params_mut(), &grad);
        }
        train_loss /= n as f64;
        let val_loss = mean_nll(&member, &split.val_x, &split.val_y);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Training {
                epoch,
                message: format!("train loss {train_loss}, validation loss {val_loss}"),
            });
        }
        log.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        match stopper.observe(epoch, val_loss) {
            StopDecision::Improved => best.copy_from_slice(member.params()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    member.params_mut().copy_from_slice(&best);
    Ok((member, log))
}
