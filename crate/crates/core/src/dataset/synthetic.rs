use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ActorDataset, MetricSeries};
use crate::error::{Error, Result};

/// Reserved actor id of the pure-noise reference actor.
pub const NOISE_ACTOR_ID: &str = "noise-baseline";

/// Which actors receive a mix of their upstream neighbour's features.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationScope {
    /// Every actor after the first is mixed with the one before it.
    #[default]
    Chain,
    /// Only the listed (zero-based, non-zero) actor indices.
    Only(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub actor_count: usize,
    pub features_per_actor: usize,
    /// Ground-truth contribution strength per actor, `>= 0`.
    pub signal_weights: Vec<f64>,
    pub noise_std: f64,
    pub row_count: usize,
    /// Mixing fraction in `[0, 1)` of upstream features into downstream ones.
    #[serde(default)]
    pub cross_correlation: f64,
    #[serde(default)]
    pub correlation_scope: CorrelationScope,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.actor_count < 2 {
            return bad(format!("need at least 2 actors, got {}", self.actor_count));
        }
        if self.signal_weights.len() != self.actor_count {
            return bad(format!(
                "{} signal weights for {} actors",
                self.signal_weights.len(),
                self.actor_count
            ));
        }
        if self.signal_weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return bad("signal weights must be finite and >= 0".into());
        }
        if self.features_per_actor == 0 {
            return bad("features_per_actor must be positive".into());
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {} must be > 0", self.noise_std));
        }
        if self.row_count < 200 {
            return bad(format!("row_count {} below 200", self.row_count));
        }
        if !(0.0..1.0).contains(&self.cross_correlation) {
            return bad(format!("cross_correlation {} outside [0, 1)", self.cross_correlation));
        }
        if let CorrelationScope::Only(idx) = &self.correlation_scope {
            if idx.iter().any(|&i| i == 0 || i >= self.actor_count) {
                return bad("correlated actor indices must be in 1..actor_count".into());
            }
        }
        Ok(())
    }

    fn is_mixed(&self, actor: usize) -> bool {
        actor > 0
            && self.cross_correlation > 0.0
            && match &self.correlation_scope {
                CorrelationScope::Chain => true,
                CorrelationScope::Only(idx) => idx.contains(&actor),
            }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub actors: Vec<ActorDataset>,
    pub metric: MetricSeries,
    /// `(actor_id, signal weight)` in actor order.
    pub ground_truth: Vec<(String, f64)>,
}

/// Unit-variance nonlinear signal of one actor's features: per-feature
/// sinusoids plus the product of the first two features.
///
/// For independent standard-normal inputs each `sin(x)` has variance
/// `(1 - e^-2) / 2` and the product term has variance 1, all uncorrelated.
pub fn signal_component(features: &[f64]) -> f64 {
    let k = features.len();
    let sin_var = (1.0 - (-2.0f64).exp()) / 2.0;
    let mut raw: f64 = features.iter().map(|x| x.sin()).sum();
    let mut var = k as f64 * sin_var;
    if k >= 2 {
        raw += features[0] * features[1];
        var += 1.0;
    }
    raw / var.sqrt()
}

pub(crate) fn part_id(i: usize) -> String {
    format!("p{i:06}")
}

/// Multi-actor data whose metric is `sum_a w_a * g_a(x_a) + noise`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.features_per_actor;
    let rho = spec.cross_correlation;
    let keep = (1.0 - rho * rho).sqrt();

    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(spec.row_count * k); spec.actor_count];
    let mut metric = Vec::with_capacity(spec.row_count);
    let mut row = vec![vec![0.0; k]; spec.actor_count];
    for i in 0..spec.row_count {
        for a in 0..spec.actor_count {
            for j in 0..k {
                let z: f64 = StandardNormal.sample(&mut rng);
                row[a][j] = if spec.is_mixed(a) {
                    keep * z + rho * row[a - 1][j]
                } else {
                    z
                };
            }
        }
        let noise: f64 = StandardNormal.sample(&mut rng);
        let y = row
            .iter()
            .zip(&spec.signal_weights)
            .map(|(x, w)| w * signal_component(x))
            .sum::<f64>()
            + spec.noise_std * noise;
        for a in 0..spec.actor_count {
            values[a].extend_from_slice(&row[a]);
        }
        metric.push((part_id(i), y));
    }

    let part_ids: Vec<String> = metric.iter().map(|(id, _)| id.clone()).collect();
    let actors = values
        .into_iter()
        .enumerate()
        .map(|(a, v)| {
            ActorDataset::new(
                format!("actor-{}", a + 1),
                part_ids.clone(),
                (0..k).map(|j| format!("a{}_f{j}", a + 1)).collect(),
                vec![false; k],
                v,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ground_truth = actors
        .iter()
        .zip(&spec.signal_weights)
        .map(|(a, w)| (a.actor_id().to_string(), *w))
        .collect();
    Ok(SyntheticData {
        actors,
        metric: MetricSeries::new(metric)?,
        ground_truth,
    })
}

/// An actor whose features are independent standard-normal draws.
pub fn make_noise_actor(
    row_count: usize,
    feature_count: usize,
    part_ids: &[String],
    seed: u64,
) -> Result<ActorDataset> {
    if part_ids.len() != row_count {
        return Err(Error::Arity {
            expected: row_count,
            actual: part_ids.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..row_count * feature_count)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    ActorDataset::new(
        NOISE_ACTOR_ID,
        part_ids.to_vec(),
        (0..feature_count).map(|j| format!("noise_{j}")).collect(),
        vec![false; feature_count],
        values,
    )
}
