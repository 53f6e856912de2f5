use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::ActorDataset;
use crate::error::{Error, Result};

/// Columns missing more than this fraction of values are dropped by default.
pub const DEFAULT_COLUMN_MISSING_THRESHOLD: f64 = 0.5;

/// A header-plus-rows table with one identifier column. `None` marks a
/// missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    id_column: String,
    columns: Vec<String>,
    ids: Vec<String>,
    observations: Vec<usize>,
    rows: Vec<Vec<Option<f64>>>,
}

impl RawTable {
    pub fn new(
        id_column: impl Into<String>,
        columns: Vec<String>,
        ids: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Arity {
                expected: ids.len(),
                actual: rows.len(),
            });
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for (i, (id, row)) in ids.iter().zip(&rows).enumerate() {
            if row.len() != columns.len() {
                return Err(Error::Parse {
                    row: i,
                    message: format!("expected {} values, found {}", columns.len(), row.len()),
                });
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::DuplicateId(id.clone()));
            }
        }
        Ok(Self {
            id_column: id_column.into(),
            columns,
            observations: (0..ids.len()).collect(),
            ids,
            rows,
        })
    }

    /// Parses comma-separated text with a header row. Empty cells and `NaN`
    /// are read as missing.
    pub fn from_reader<R: std::io::Read>(reader: R, id_column: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let id_pos = header
            .iter()
            .position(|h| h == id_column)
            .ok_or_else(|| Error::invalid(format!("id column `{id_column}` not in header")))?;
        let columns: Vec<String> = header
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != id_pos)
            .map(|(_, h)| h.clone())
            .collect();

        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    message: format!(
                        "expected {} fields, found {}",
                        header.len(),
                        record.len()
                    ),
                });
            }
            let mut values = Vec::with_capacity(columns.len());
            for (i, cell) in record.iter().enumerate() {
                if i == id_pos {
                    continue;
                }
                values.push(parse_cell(cell).map_err(|message| Error::Parse { row, message })?);
            }
            ids.push(record[id_pos].to_string());
            rows.push(values);
        }
        Self::new(id_column, columns, ids, rows)
    }

    pub fn id_column(&self) -> &str {
        &self.id_column
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Original row position of each surviving observation.
    pub fn observations(&self) -> &[usize] {
        &self.observations
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn missing_count(&self) -> usize {
        self.rows.iter().flatten().filter(|c| c.is_none()).count()
    }

    fn column_missing_fraction(&self, j: usize) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        let missing = self.rows.iter().filter(|r| r[j].is_none()).count();
        missing as f64 / self.rows.len() as f64
    }
}

fn parse_cell(cell: &str) -> std::result::Result<Option<f64>, String> {
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    cell.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("`{cell}` is not a number"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CleaningOutcome {
    pub table: RawTable,
    pub dropped_columns: Vec<String>,
    pub dropped_rows: usize,
}

/// Drops columns missing more than `column_missing_threshold` of their
/// values, then (optionally) every row still holding a missing cell.
/// Values are never imputed.
pub fn clean_measurements(
    table: &RawTable,
    column_missing_threshold: f64,
    drop_rows_with_missing_targets: bool,
) -> Result<CleaningOutcome> {
    if !(column_missing_threshold > 0.0 && column_missing_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "column missing threshold {column_missing_threshold} outside (0, 1]"
        )));
    }
    let keep: Vec<usize> = (0..table.columns.len())
        .filter(|&j| table.column_missing_fraction(j) <= column_missing_threshold)
        .collect();
    if keep.is_empty() && !table.columns.is_empty() {
        return Err(Error::invalid("every column exceeds the missing-value threshold"));
    }
    let dropped_columns = (0..table.columns.len())
        .filter(|j| !keep.contains(j))
        .map(|j| table.columns[j].clone())
        .collect();

    let mut out = RawTable {
        id_column: table.id_column.clone(),
        columns: keep.iter().map(|&j| table.columns[j].clone()).collect(),
        ids: Vec::with_capacity(table.len()),
        observations: Vec::with_capacity(table.len()),
        rows: Vec::with_capacity(table.len()),
    };
    let mut dropped_rows = 0;
    for i in 0..table.len() {
        let row: Vec<Option<f64>> = keep.iter().map(|&j| table.rows[i][j]).collect();
        if drop_rows_with_missing_targets && row.iter().any(Option::is_none) {
            dropped_rows += 1;
            continue;
        }
        out.ids.push(table.ids[i].clone());
        out.observations.push(table.observations[i]);
        out.rows.push(row);
    }
    Ok(CleaningOutcome {
        table: out,
        dropped_columns,
        dropped_rows,
    })
}

/// Which table columns belong to which actor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActorSchema {
    /// `(actor_id, private columns)` in actor order.
    pub actors: Vec<(String, Vec<String>)>,
    /// Columns every actor can observe (e.g. ambient humidity).
    #[serde(default)]
    pub shared: Vec<String>,
    /// Columns that are not features at all (quality measurements, setpoints).
    #[serde(default)]
    pub excluded: Vec<String>,
}

/// Splits `table` into one private view per actor. Shared columns are copied
/// into every view and flagged.
pub fn partition_actors(table: &RawTable, schema: &ActorSchema) -> Result<Vec<ActorDataset>> {
    let mut owner: HashMap<&str, &str> = HashMap::new();
    for (actor, cols) in &schema.actors {
        for c in cols {
            if let Some(prev) = owner.insert(c.as_str(), actor.as_str()) {
                return Err(Error::invalid(format!(
                    "column `{c}` assigned to both `{prev}` and `{actor}`"
                )));
            }
        }
    }
    for c in &schema.shared {
        if let Some(prev) = owner.insert(c.as_str(), "shared") {
            return Err(Error::invalid(format!(
                "shared column `{c}` is also assigned to `{prev}`"
            )));
        }
    }
    for c in owner.keys() {
        if table.column_index(c).is_none() {
            return Err(Error::invalid(format!("schema column `{c}` not in table")));
        }
    }
    for c in &table.columns {
        if !owner.contains_key(c.as_str()) && !schema.excluded.contains(c) {
            return Err(Error::invalid(format!("column `{c}` is not assigned to any actor")));
        }
    }

    let shared_idx: Vec<usize> = schema
        .shared
        .iter()
        .map(|c| table.column_index(c).expect("checked above"))
        .collect();
    let mut out = Vec::with_capacity(schema.actors.len());
    for (actor, cols) in &schema.actors {
        let mut idx: Vec<usize> = cols
            .iter()
            .map(|c| table.column_index(c).expect("checked above"))
            .collect();
        let mut flags = vec![false; idx.len()];
        idx.extend(&shared_idx);
        flags.extend(std::iter::repeat(true).take(shared_idx.len()));

        let mut values = Vec::with_capacity(table.len() * idx.len());
        for (i, row) in table.rows.iter().enumerate() {
            for &j in &idx {
                values.push(row[j].ok_or_else(|| Error::Parse {
                    row: table.observations[i],
                    message: format!("missing value in feature column `{}`", table.columns[j]),
                })?);
            }
        }
        out.push(ActorDataset::new(
            actor.clone(),
            table.ids.clone(),
            idx.iter().map(|&j| table.columns[j].clone()).collect(),
            flags,
            values,
        )?);
    }
    Ok(out)
}
