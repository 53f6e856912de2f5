//! Deep ensembles of heteroscedastic regressors and the total-variance
//! uncertainty an actor reports.
//!
//! Each member is trained on the full (chronologically split) aligned data
//! with its own seed; diversity comes only from random initialisation,
//! shuffling and dropout. Predictions of the `M` members are combined by the
//! law of total variance:
//!
//! ```text
//! total = 1/M sum_m (mean_mu - mu_m)^2  +  1/M sum_m sigma_m^2
//!         `------- knowledge -------'     `---- data ----'
//! ```

mod network;
mod train;

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ActorDataset, AlignedData, MetricSeries};
use crate::error::{Error, Result};

pub use network::{nll_gradient, nll_loss, Layout, Member, Mode};
pub use train::{fit_member, train_member, EarlyStopping, EpochRecord, Split, StopDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    RectifiedLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleHyper {
    pub member_count: usize,
    pub hidden_size: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    pub log_variance_clamp: (f64, f64),
}

impl Default for EnsembleHyper {
    fn default() -> Self {
        Self {
            member_count: 5,
            hidden_size: 50,
            activation: Activation::RectifiedLinear,
            dropout_rate: 0.5,
            batch_size: 128,
            patience_epochs: 100,
            max_epochs: 2000,
            learning_rate: 1e-3,
            validation_fraction: 0.2,
            log_variance_clamp: (-10.0, 10.0),
        }
    }
}

impl EnsembleHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if self.member_count < 2 {
            return bad("member_count must be at least 2");
        }
        if self.hidden_size == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return bad("hidden_size, batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if self.patience_epochs == 0 {
            return bad("patience_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must be in (0, 1)");
        }
        if !(self.log_variance_clamp.0 < self.log_variance_clamp.1) {
            return bad("log_variance_clamp requires lo < hi");
        }
        Ok(())
    }
}

/// Per-column z-score parameters from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normaliser {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normaliser {
    pub fn fit(xs: &[f64], width: usize) -> Self {
        let n = (xs.len() / width) as f64;
        let mut mean = vec![0.0; width];
        for row in xs.chunks(width) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; width];
        for row in xs.chunks(width) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, std }
    }

    /// Zero-variance columns map to zero.
    pub fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = if self.std[j] > 1e-12 {
                (x[j] - self.mean[j]) / self.std[j]
            } else {
                0.0
            };
        }
    }

    fn apply(&self, xs: &[f64]) -> Vec<f64> {
        let w = self.mean.len();
        let mut out = vec![0.0; xs.len()];
        for (src, dst) in xs.chunks(w).zip(out.chunks_mut(w)) {
            self.apply_row(src, dst);
        }
        out
    }
}

/// Affine target standardisation; members train on `(y - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub shift: f64,
    pub scale: f64,
}

impl TargetScale {
    pub fn fit(ys: &[f64]) -> Self {
        let n = ys.len() as f64;
        let shift = ys.iter().sum::<f64>() / n;
        let sd = (ys.iter().map(|y| (y - shift).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            shift,
            scale: if sd > 1e-12 { sd } else { 1.0 },
        }
    }

    fn forward(&self, y: f64) -> f64 {
        (y - self.shift) / self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSummary {
    pub mean: f64,
    pub knowledge_variance: f64,
    pub data_variance: f64,
    pub total_variance: f64,
}

/// Law-of-total-variance combination of member means and variances.
pub fn summarise(mus: &[f64], variances: &[f64]) -> PredictiveSummary {
    assert_eq!(mus.len(), variances.len());
    let m = mus.len() as f64;
    let mean = mus.iter().sum::<f64>() / m;
    let knowledge_variance = mus.iter().map(|mu| (mean - mu).powi(2)).sum::<f64>() / m;
    let data_variance = variances.iter().sum::<f64>() / m;
    PredictiveSummary {
        mean,
        knowledge_variance,
        data_variance,
        total_variance: knowledge_variance + data_variance,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    hyper: EnsembleHyper,
    members: Vec<Member>,
    normaliser: Normaliser,
    target_scale: TargetScale,
    /// Part ids of the held-out rows the reported uncertainty averages over.
    validation_ids: Vec<String>,
    training_log: Vec<Vec<EpochRecord>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

const CHECKPOINT_FORMAT: &str = "echelon-ensemble";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    ensemble: Ensemble,
}

/// Trains `hyper.member_count` members with seeds `base_seed + m` on the
/// inner join of `dataset` with `targets`.
pub fn train_ensemble(
    dataset: &ActorDataset,
    targets: &MetricSeries,
    hyper: &EnsembleHyper,
    base_seed: u64,
) -> Result<Ensemble> {
    train_ensemble_with(dataset, targets, hyper, base_seed, Execution::Parallel)
}

pub fn train_ensemble_with(
    dataset: &ActorDataset,
    targets: &MetricSeries,
    hyper: &EnsembleHyper,
    base_seed: u64,
    execution: Execution,
) -> Result<Ensemble> {
    hyper.validate()?;
    let aligned = dataset.align(targets);
    if aligned.is_empty() {
        return Err(Error::EmptyJoin);
    }
    Ensemble::fit(&aligned, hyper, base_seed, execution)
}

impl Ensemble {
    pub(crate) fn fit(
        aligned: &AlignedData,
        hyper: &EnsembleHyper,
        base_seed: u64,
        execution: Execution,
    ) -> Result<Self> {
        let raw = Split::chronological(
            &aligned.features,
            &aligned.targets,
            aligned.width,
            hyper.validation_fraction,
        )?;
        let normaliser = Normaliser::fit(&raw.train_x, raw.width);
        let target_scale = TargetScale::fit(&raw.train_y);
        let split = Split {
            width: raw.width,
            train_x: normaliser.apply(&raw.train_x),
            train_y: raw.train_y.iter().map(|y| target_scale.forward(*y)).collect(),
            val_x: normaliser.apply(&raw.val_x),
            val_y: raw.val_y.iter().map(|y| target_scale.forward(*y)).collect(),
        };
        let layout = Layout {
            inputs: raw.width,
            hidden: hyper.hidden_size,
        };
        let train_one = |m: usize| -> Result<(Member, Vec<EpochRecord>)> {
            let seed = base_seed.wrapping_add(m as u64);
            let member = Member::init(layout, seed, hyper.dropout_rate, hyper.log_variance_clamp)?;
            fit_member(member, &split, hyper)
        };
        let trained: Vec<(Member, Vec<EpochRecord>)> = match execution {
            Execution::Sequential => (0..hyper.member_count).map(train_one).collect::<Result<_>>()?,
            Execution::Parallel => (0..hyper.member_count)
                .into_par_iter()
                .map(train_one)
                .collect::<Result<_>>()?,
        };
        let (members, training_log) = trained.into_iter().unzip();
        let cut = aligned.len() - split.val_y.len();
        Ok(Self {
            hyper: hyper.clone(),
            members,
            normaliser,
            target_scale,
            validation_ids: aligned.part_ids[cut..].to_vec(),
            training_log,
        })
    }

    /// Assembles an ensemble from already-built members, for tooling and
    /// tests. Members must share one layout.
    pub fn from_members(
        members: Vec<Member>,
        normaliser: Normaliser,
        target_scale: TargetScale,
        validation_ids: Vec<String>,
    ) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::invalid("an ensemble needs members"))?
            .layout();
        if members.iter().any(|m| m.layout() != first) {
            return Err(Error::invalid("members have different layouts"));
        }
        if normaliser.mean.len() != first.inputs || normaliser.std.len() != first.inputs {
            return Err(Error::Arity {
                expected: first.inputs,
                actual: normaliser.mean.len(),
            });
        }
        let hyper = EnsembleHyper {
            member_count: members.len(),
            hidden_size: first.hidden,
            dropout_rate: members[0].dropout_rate(),
            log_variance_clamp: members[0].log_variance_clamp(),
            ..EnsembleHyper::default()
        };
        let training_log = vec![Vec::new(); members.len()];
        Ok(Self {
            hyper,
            members,
            normaliser,
            target_scale,
            validation_ids,
            training_log,
        })
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn hyper(&self) -> &EnsembleHyper {
        &self.hyper
    }

    pub fn normaliser(&self) -> &Normaliser {
        &self.normaliser
    }

    pub fn target_scale(&self) -> TargetScale {
        self.target_scale
    }

    pub fn validation_ids(&self) -> &[String] {
        &self.validation_ids
    }

    pub fn training_log(&self) -> &[Vec<EpochRecord>] {
        &self.training_log
    }

    pub fn width(&self) -> usize {
        self.normaliser.mean.len()
    }

    /// Combined prediction for one raw (unnormalised) feature row, in metric
    /// units.
    pub fn predict(&self, x: &[f64]) -> Result<PredictiveSummary> {
        if x.len() != self.width() {
            return Err(Error::Arity {
                expected: self.width(),
                actual: x.len(),
            });
        }
        let mut z = vec![0.0; x.len()];
        self.normaliser.apply_row(x, &mut z);
        let TargetScale { shift, scale } = self.target_scale;
        let mut mus = Vec::with_capacity(self.members.len());
        let mut vars = Vec::with_capacity(self.members.len());
        for m in &self.members {
            let (mu, lv) = m.forward(&z, Mode::Eval)?;
            mus.push(mu * scale + shift);
            vars.push(lv.exp() * scale * scale);
        }
        Ok(summarise(&mus, &vars))
    }

    /// Mean total variance over this actor's held-out rows. Reads feature
    /// rows only.
    pub fn total_uncertainty(&self, dataset: &ActorDataset) -> Result<f64> {
        let wanted: HashSet<&str> = self.validation_ids.iter().map(String::as_str).collect();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (i, id) in dataset.part_ids().iter().enumerate() {
            if wanted.contains(id.as_str()) {
                sum += self.predict(dataset.row(i))?.total_variance;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::invalid("no validation rows available for this ensemble"));
        }
        Ok(sum / count as f64)
    }

    pub fn to_checkpoint_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            ensemble: self.clone(),
        })?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let cp: Checkpoint = serde_json::from_str(text)?;
        if cp.format != CHECKPOINT_FORMAT || cp.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint {} v{}",
                cp.format, cp.version
            )));
        }
        Ok(cp.ensemble)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

pub fn total_uncertainty(ensemble: &Ensemble, dataset: &ActorDataset) -> Result<f64> {
    ensemble.total_uncertainty(dataset)
}
