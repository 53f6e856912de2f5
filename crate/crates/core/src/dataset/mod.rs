//! Process data: raw multi-stage tables, the quality KPI, per-actor private
//! views and a synthetic generator with known contributions.

mod io;
mod kpi;
mod synthetic;
mod table;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_csv, load_setpoints, read_raw_table, DatasetManifest, ManifestActor};
pub use kpi::{aggregate_quality, build_metric_series, MeasurementBlock, SetpointSource};
pub use synthetic::{
    generate_synthetic, make_noise_actor, signal_component, CorrelationScope, SyntheticData,
    SyntheticSpec, NOISE_ACTOR_ID,
};
pub use table::{
    clean_measurements, partition_actors, ActorSchema, CleaningOutcome, RawTable,
    DEFAULT_COLUMN_MISSING_THRESHOLD,
};

/// `(part_id, value)` pairs of the metric of interest.
///
/// This is the only payload a coordinator broadcasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(String, f64)>", into = "Vec<(String, f64)>")]
pub struct MetricSeries {
    entries: Vec<(String, f64)>,
}

impl MetricSeries {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(entries.len());
        for (id, value) in &entries {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
            if !value.is_finite() {
                return Err(Error::invalid(format!("metric value for `{id}` is not finite")));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn part_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }

    pub fn lookup(&self) -> HashMap<&str, f64> {
        self.entries.iter().map(|(id, v)| (id.as_str(), *v)).collect()
    }

    /// Applies `f` to every value, keeping part ids.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.entries.iter().map(|(id, v)| (id.clone(), f(*v))).collect())
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("part_id,value\n");
        for (id, v) in &self.entries {
            out.push_str(&csv_field(id));
            out.push(',');
            out.push_str(&format_f64(*v));
            out.push('\n');
        }
        out
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut entries = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Parse {
                    row,
                    message: format!("expected 2 fields, found {}", record.len()),
                });
            }
            let value: f64 = record[1].trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("`{}` is not a number", &record[1]),
            })?;
            entries.push((record[0].to_string(), value));
        }
        Self::new(entries)
    }
}

impl TryFrom<Vec<(String, f64)>> for MetricSeries {
    type Error = Error;

    fn try_from(entries: Vec<(String, f64)>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<MetricSeries> for Vec<(String, f64)> {
    fn from(series: MetricSeries) -> Self {
        series.entries
    }
}

/// One actor's private features, rows keyed by part id in chronological order.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorDataset {
    actor_id: String,
    part_ids: Vec<String>,
    columns: Vec<String>,
    shared: Vec<bool>,
    values: Vec<f64>,
}

/// Features and targets of an actor after an inner join with a metric.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedData {
    pub part_ids: Vec<String>,
    pub width: usize,
    pub features: Vec<f64>,
    pub targets: Vec<f64>,
}

impl AlignedData {
    pub fn len(&self) -> usize {
        self.part_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.part_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

impl ActorDataset {
    pub fn new(
        actor_id: impl Into<String>,
        part_ids: Vec<String>,
        columns: Vec<String>,
        shared: Vec<bool>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let actor_id = actor_id.into();
        if columns.is_empty() {
            return Err(Error::invalid(format!("actor `{actor_id}` has no feature columns")));
        }
        if shared.len() != columns.len() {
            return Err(Error::Arity {
                expected: columns.len(),
                actual: shared.len(),
            });
        }
        if values.len() != part_ids.len() * columns.len() {
            return Err(Error::Arity {
                expected: part_ids.len() * columns.len(),
                actual: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "actor `{actor_id}` has a missing or non-finite value at row {}",
                pos / columns.len()
            )));
        }
        let mut seen = HashSet::with_capacity(part_ids.len());
        for id in &part_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            actor_id,
            part_ids,
            columns,
            shared,
            values,
        })
    }

    pub fn actor_id(&self) -> &str {
        &self.actor_id
    }

    pub fn part_ids(&self) -> &[String] {
        &self.part_ids
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn shared_flags(&self) -> &[bool] {
        &self.shared
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn rows(&self) -> usize {
        self.part_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(j).step_by(self.width()).copied()
    }

    pub fn row_index(&self) -> HashMap<&str, usize> {
        self.part_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Inner join with `metric`, keeping this actor's row order.
    pub fn align(&self, metric: &MetricSeries) -> AlignedData {
        let lookup = metric.lookup();
        let mut out = AlignedData {
            part_ids: Vec::new(),
            width: self.width(),
            features: Vec::new(),
            targets: Vec::new(),
        };
        for (i, id) in self.part_ids.iter().enumerate() {
            if let Some(&y) = lookup.get(id.as_str()) {
                out.part_ids.push(id.clone());
                out.features.extend_from_slice(self.row(i));
                out.targets.push(y);
            }
        }
        out
    }

    /// Number of part ids shared with `ids`.
    pub fn overlap<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> usize {
        let own: HashSet<&str> = self.part_ids.iter().map(String::as_str).collect();
        ids.into_iter().filter(|id| own.contains(id)).count()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("part_id");
        for c in &self.columns {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        out.push('\n');
        for (i, id) in self.part_ids.iter().enumerate() {
            out.push_str(&csv_field(id));
            for v in self.row(i) {
                out.push(',');
                out.push_str(&format_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_reader<R: std::io::Read>(
        actor_id: &str,
        shared_columns: &[String],
        reader: R,
    ) -> Result<Self> {
        let table = RawTable::from_reader(reader, "part_id")?;
        let shared = table
            .columns()
            .iter()
            .map(|c| shared_columns.contains(c))
            .collect();
        let mut values = Vec::with_capacity(table.len() * table.columns().len());
        for (i, row) in table.rows().iter().enumerate() {
            for cell in row {
                values.push(cell.ok_or_else(|| Error::Parse {
                    row: i,
                    message: "missing value in actor dataset".into(),
                })?);
            }
        }
        Self::new(
            actor_id,
            table.ids().to_vec(),
            table.columns().to_vec(),
            shared,
            values,
        )
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Shortest representation that parses back to the identical `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}
