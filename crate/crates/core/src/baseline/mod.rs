//! Centralised benchmark: one network on all actors' features, explained
//! with Shapley attributions summed per company.

mod shap;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{csv_field, format_f64, ActorDataset, AlignedData, MetricSeries};
use crate::ensemble::{Ensemble, EnsembleHyper, Execution, Mode};
use crate::error::{Error, Result};

pub use shap::{exact_shapley, kernel_shap, Attribution, FnRegressor, Regressor, EXACT_SHAPLEY_MAX_FEATURES};

/// Pseudo-actor owning columns that several actors share.
pub const SHARED_ACTOR_ID: &str = "shared";
pub const DEFAULT_BACKGROUND_SIZE: usize = 100;
pub const DEFAULT_SAMPLE_COUNT: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub actor_id: String,
    pub column: String,
}

/// Joined feature table across actors, shared columns kept once.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralTable {
    pub feature_index: Vec<FeatureRef>,
    pub data: AlignedData,
}

/// Inner-joins every actor and the metric on part id, in the first actor's
/// row order. Private columns come actor by actor, shared columns last.
pub fn join_actors(actors: &[ActorDataset], metric: &MetricSeries) -> Result<CentralTable> {
    let first = actors
        .first()
        .ok_or_else(|| Error::invalid("central model needs at least one actor"))?;
    let mut ids_seen = HashSet::new();
    for a in actors {
        if !ids_seen.insert(a.actor_id()) {
            return Err(Error::DuplicateId(a.actor_id().to_string()));
        }
    }
    let targets = metric.lookup();
    let indices: Vec<HashMap<&str, usize>> = actors.iter().map(|a| a.row_index()).collect();

    // (actor position, column position) per output column
    let mut sources: Vec<(usize, usize)> = Vec::new();
    let mut feature_index = Vec::new();
    let mut shared: Vec<(usize, usize)> = Vec::new();
    let mut shared_names: HashSet<&str> = HashSet::new();
    for (ai, a) in actors.iter().enumerate() {
        for (ci, (col, is_shared)) in a.columns().iter().zip(a.shared_flags()).enumerate() {
            if *is_shared {
                if shared_names.insert(col.as_str()) {
                    shared.push((ai, ci));
                }
            } else {
                sources.push((ai, ci));
                feature_index.push(FeatureRef {
                    actor_id: a.actor_id().to_string(),
                    column: col.clone(),
                });
            }
        }
    }
    for &(ai, ci) in &shared {
        sources.push((ai, ci));
        feature_index.push(FeatureRef {
            actor_id: SHARED_ACTOR_ID.to_string(),
            column: actors[ai].columns()[ci].clone(),
        });
    }
    let width = sources.len();
    if width == 0 {
        return Err(Error::invalid("actors carry no feature columns"));
    }

    let mut data = AlignedData {
        part_ids: Vec::new(),
        width,
        features: Vec::new(),
        targets: Vec::new(),
    };
    'rows: for id in first.part_ids() {
        let Some(&y) = targets.get(id.as_str()) else {
            continue;
        };
        let mut rows = Vec::with_capacity(actors.len());
        for idx in &indices {
            match idx.get(id.as_str()) {
                Some(&r) => rows.push(r),
                None => continue 'rows,
            }
        }
        for &(ai, ci) in &sources {
            data.features.push(actors[ai].row(rows[ai])[ci]);
        }
        data.targets.push(y);
        data.part_ids.push(id.clone());
    }
    if data.part_ids.is_empty() {
        return Err(Error::EmptyJoin);
    }
    Ok(CentralTable {
        feature_index,
        data,
    })
}

/// A single network trained with the ensemble recipe on the joined table.
#[derive(Debug, Clone)]
pub struct CentralModel {
    model: Ensemble,
    feature_index: Vec<FeatureRef>,
    background_ids: Vec<String>,
    background: Vec<f64>,
    explain_ids: Vec<String>,
    explain_rows: Vec<f64>,
}

impl CentralModel {
    pub fn feature_index(&self) -> &[FeatureRef] {
        &self.feature_index
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.model
    }

    /// Reference rows sampled from the training split.
    pub fn background(&self) -> &[f64] {
        &self.background
    }

    pub fn background_ids(&self) -> &[String] {
        &self.background_ids
    }

    /// The validation split: ids and flattened rows.
    pub fn explain_set(&self) -> (&[String], &[f64]) {
        (&self.explain_ids, &self.explain_rows)
    }

    /// Predicted mean in metric units.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        let mut z = vec![0.0; x.len()];
        self.model.normaliser().apply_row(x, &mut z);
        let (mu, _) = self.model.members()[0]
            .forward(&z, Mode::Eval)
            .expect("row width checked by caller");
        let t = self.model.target_scale();
        mu * t.scale + t.shift
    }
}

impl Regressor for CentralModel {
    fn input_width(&self) -> usize {
        self.feature_index.len()
    }

    fn predict(&self, x: &[f64]) -> f64 {
        self.predict_mean(x)
    }
}

/// Trains the centralised regressor (one member, seed `seed`) and samples
/// `background_size` training rows as the SHAP reference set.
pub fn train_central(
    actors: &[ActorDataset],
    metric: &MetricSeries,
    hyper: &EnsembleHyper,
    seed: u64,
    background_size: usize,
) -> Result<CentralModel> {
    hyper.validate()?;
    let table = join_actors(actors, metric)?;
    let hyper = EnsembleHyper {
        member_count: 1,
        ..hyper.clone()
    };
    let model = Ensemble::fit(&table.data, &hyper, seed, Execution::Sequential)?;
    let width = table.data.width;
    let cut = table.data.len() - model.validation_ids().len();

    let take = background_size.min(cut).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, cut, take).into_vec();
    picks.sort_unstable();
    let background_ids = picks.iter().map(|&r| table.data.part_ids[r].clone()).collect();
    let background = picks
        .iter()
        .flat_map(|&r| table.data.features[r * width..(r + 1) * width].iter().copied())
        .collect();

    Ok(CentralModel {
        model,
        feature_index: table.feature_index,
        background_ids,
        background,
        explain_ids: table.data.part_ids[cut..].to_vec(),
        explain_rows: table.data.features[cut * width..].to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapConfig {
    pub sample_count: usize,
    pub background_size: usize,
    /// Cap on explained validation rows, chosen evenly across the split.
    pub max_instances: Option<usize>,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            sample_count: DEFAULT_SAMPLE_COUNT,
            background_size: DEFAULT_BACKGROUND_SIZE,
            max_instances: Some(200),
        }
    }
}

/// Attributions for a set of explained instances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub feature_index: Vec<FeatureRef>,
    pub instance_ids: Vec<String>,
    pub base_values: Vec<f64>,
    pub predictions: Vec<f64>,
    /// Row-major, one row of `feature_index.len()` values per instance.
    pub phi: Vec<f64>,
    pub background_rows: usize,
}

impl ShapReport {
    pub fn width(&self) -> usize {
        self.feature_index.len()
    }

    pub fn instance_phi(&self, i: usize) -> &[f64] {
        &self.phi[i * self.width()..(i + 1) * self.width()]
    }

    /// Largest `|sum(phi) + base - prediction|` over instances.
    pub fn max_additivity_error(&self) -> f64 {
        (0..self.instance_ids.len())
            .map(|i| {
                let s: f64 = self.instance_phi(i).iter().sum();
                (s + self.base_values[i] - self.predictions[i]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `instance_id,actor_id,feature,phi`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("instance_id,actor_id,feature,phi\n");
        for (i, id) in self.instance_ids.iter().enumerate() {
            for (f, p) in self.feature_index.iter().zip(self.instance_phi(i)) {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    csv_field(id),
                    csv_field(&f.actor_id),
                    csv_field(&f.column),
                    format_f64(*p)
                );
            }
        }
        out
    }
}

/// Explains `model` on its (possibly capped) validation split. Instance `i`
/// samples coalitions with seed `seed + i`.
pub fn explain_central(model: &CentralModel, config: &ShapConfig, seed: u64) -> Result<ShapReport> {
    let width = model.input_width();
    let (ids, rows) = model.explain_set();
    let chosen: Vec<usize> = match config.max_instances {
        Some(cap) if cap < ids.len() => (0..cap).map(|k| k * ids.len() / cap).collect(),
        _ => (0..ids.len()).collect(),
    };
    let background = if config.background_size < model.background().len() / width {
        &model.background()[..config.background_size * width]
    } else {
        model.background()
    };
    let attributions: Vec<Attribution> = chosen
        .par_iter()
        .map(|&i| {
            kernel_shap(
                model,
                &rows[i * width..(i + 1) * width],
                background,
                config.sample_count,
                seed.wrapping_add(i as u64),
            )
        })
        .collect::<Result<_>>()?;
    Ok(ShapReport {
        feature_index: model.feature_index().to_vec(),
        instance_ids: chosen.iter().map(|&i| ids[i].clone()).collect(),
        base_values: attributions.iter().map(|a| a.base_value).collect(),
        predictions: attributions.iter().map(|a| a.prediction).collect(),
        phi: attributions.into_iter().flat_map(|a| a.phi).collect(),
        background_rows: background.len() / width,
    })
}

/// Per actor: mean over instances of the sum of `|phi|` over its features.
pub fn aggregate_company(
    report: &ShapReport,
    feature_index: &[FeatureRef],
) -> Result<BTreeMap<String, f64>> {
    let width = report.width();
    if feature_index.len() != width {
        return Err(Error::invalid(format!(
            "{width} attributed features but {} mapped to actors",
            feature_index.len()
        )));
    }
    if report.instance_ids.is_empty() {
        return Err(Error::invalid("report explains no instances"));
    }
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for f in feature_index {
        out.entry(f.actor_id.clone()).or_insert(0.0);
    }
    for i in 0..report.instance_ids.len() {
        for (f, p) in feature_index.iter().zip(report.instance_phi(i)) {
            *out.get_mut(&f.actor_id).expect("inserted above") += p.abs();
        }
    }
    let n = report.instance_ids.len() as f64;
    out.values_mut().for_each(|v| *v /= n);
    Ok(out)
}

/// `actor_id,importance` per actor.
pub fn company_csv(importance: &BTreeMap<String, f64>) -> String {
    let mut out = String::from("actor_id,importance\n");
    for (a, v) in importance {
        let _ = writeln!(out, "{},{}", csv_field(a), format_f64(*v));
    }
    out
}
