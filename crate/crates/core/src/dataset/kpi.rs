use std::collections::HashMap;

use super::{MetricSeries, RawTable};
use crate::error::{Error, Result};

/// All measurements taken during one observation: `parts` measured parts,
/// each with `types` measurement types.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBlock {
    pub parts: usize,
    pub types: usize,
    /// Length `parts * types`.
    pub actuals: Vec<f64>,
    /// Target value for each entry of `actuals`, same units, strictly positive.
    pub setpoints: Vec<f64>,
}

/// Quality KPI of one observation: the absolute relative deviations from
/// setpoint, summed over all `parts * types` measured values and divided by
/// the number of measurement types.
pub fn aggregate_quality(block: &MeasurementBlock) -> Result<f64> {
    let total = block.parts * block.types;
    if total == 0 {
        return Err(Error::invalid("measurement block is empty"));
    }
    if block.actuals.len() != total || block.setpoints.len() != total {
        return Err(Error::Arity {
            expected: total,
            actual: block.actuals.len().min(block.setpoints.len()),
        });
    }
    let mut sum = 0.0;
    for (m, s) in block.actuals.iter().zip(&block.setpoints) {
        if !(*s > 0.0) {
            return Err(Error::Domain(format!("setpoint {s} is not strictly positive")));
        }
        sum += (m - s).abs() / s;
    }
    Ok(sum / block.types as f64)
}

/// Where the target value for each measurement column comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SetpointSource {
    /// Per-row companion columns named `<name>.Setpoint`, or `<stem>.Setpoint`
    /// when the measurement column is named `<stem>.Actual`.
    Companion,
    /// One fixed setpoint per measurement column.
    Fixed(HashMap<String, f64>),
}

impl SetpointSource {
    fn resolve(&self, table: &RawTable, column: &str) -> Result<Setpoint> {
        match self {
            SetpointSource::Companion => {
                let mut candidates = vec![format!("{column}.Setpoint")];
                if let Some(stem) = column.strip_suffix(".Actual") {
                    candidates.push(format!("{stem}.Setpoint"));
                }
                candidates
                    .iter()
                    .find_map(|c| table.column_index(c))
                    .map(Setpoint::Column)
                    .ok_or_else(|| {
                        Error::invalid(format!("no setpoint column for measurement `{column}`"))
                    })
            }
            SetpointSource::Fixed(map) => map
                .get(column)
                .copied()
                .map(Setpoint::Value)
                .ok_or_else(|| Error::invalid(format!("no setpoint for measurement `{column}`"))),
        }
    }

    /// Companion setpoint column names present in `table` for `columns`.
    pub fn companion_columns(&self, table: &RawTable, columns: &[String]) -> Vec<String> {
        columns
            .iter()
            .filter_map(|c| match self.resolve(table, c) {
                Ok(Setpoint::Column(j)) => Some(table.columns()[j].clone()),
                _ => None,
            })
            .collect()
    }
}

enum Setpoint {
    Column(usize),
    Value(f64),
}

/// One KPI value per observation of an already-cleaned table.
/// `measurement_columns` holds `parts_per_observation` groups of measurement
/// types.
pub fn build_metric_series(
    table: &RawTable,
    measurement_columns: &[String],
    parts_per_observation: usize,
    setpoints: &SetpointSource,
) -> Result<MetricSeries> {
    if table.is_empty() {
        return Err(Error::invalid("cannot build a metric from an empty table"));
    }
    if measurement_columns.is_empty()
        || parts_per_observation == 0
        || measurement_columns.len() % parts_per_observation != 0
    {
        return Err(Error::invalid(format!(
            "{} measurement columns cannot be split into {parts_per_observation} parts",
            measurement_columns.len()
        )));
    }
    let types = measurement_columns.len() / parts_per_observation;
    let mut resolved = Vec::with_capacity(measurement_columns.len());
    for c in measurement_columns {
        let j = table
            .column_index(c)
            .ok_or_else(|| Error::invalid(format!("measurement column `{c}` not in table")))?;
        resolved.push((j, setpoints.resolve(table, c)?));
    }

    let mut entries = Vec::with_capacity(table.len());
    for (i, row) in table.rows().iter().enumerate() {
        let mut block = MeasurementBlock {
            parts: parts_per_observation,
            types,
            actuals: Vec::with_capacity(resolved.len()),
            setpoints: Vec::with_capacity(resolved.len()),
        };
        for (j, sp) in &resolved {
            let missing = || Error::Parse {
                row: table.observations()[i],
                message: "missing measurement after cleaning".into(),
            };
            block.actuals.push(row[*j].ok_or_else(missing)?);
            block.setpoints.push(match sp {
                Setpoint::Column(k) => row[*k].ok_or_else(missing)?,
                Setpoint::Value(v) => *v,
            });
        }
        entries.push((table.ids()[i].clone(), aggregate_quality(&block)?));
    }
    MetricSeries::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn block(parts: usize, types: usize, actuals: &[f64], setpoints: &[f64]) -> MeasurementBlock {
        MeasurementBlock {
            parts,
            types,
            actuals: actuals.to_vec(),
            setpoints: setpoints.to_vec(),
        }
    }

    #[test]
    fn perfect_actuals_give_zero() {
        let b = block(2, 2, &[1.0, 2.0, 1.0, 2.0], &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(aggregate_quality(&b).unwrap(), 0.0);
    }

    #[test]
    fn two_types_one_part() {
        let b = block(1, 2, &[1.1, 0.9], &[1.0, 1.0]);
        assert_relative_eq!(aggregate_quality(&b).unwrap(), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn one_type_two_parts() {
        let b = block(2, 1, &[2.0, 0.0], &[1.0, 1.0]);
        assert_eq!(aggregate_quality(&b).unwrap(), 2.0);
    }

    #[test]
    fn zero_setpoint_is_domain_error() {
        let b = block(1, 1, &[1.0], &[0.0]);
        assert!(matches!(aggregate_quality(&b), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_block_rejected() {
        assert!(aggregate_quality(&block(0, 2, &[], &[])).is_err());
    }

    fn table(text: &str) -> RawTable {
        RawTable::from_reader(text.as_bytes(), "id").unwrap()
    }

    #[test]
    fn series_from_companion_columns() {
        let t = table(
            "id,m0.Actual,m0.Setpoint,m1.Actual,m1.Setpoint\n\
             a,1.0,1.0,2.0,2.0\n\
             b,3.0,3.0,4.0,4.0\n",
        );
        let cols = vec!["m0.Actual".to_string(), "m1.Actual".to_string()];
        let s = build_metric_series(&t, &cols, 1, &SetpointSource::Companion).unwrap();
        assert_eq!(s.entries(), &[("a".into(), 0.0), ("b".into(), 0.0)]);
        assert_eq!(
            SetpointSource::Companion.companion_columns(&t, &cols),
            vec!["m0.Setpoint", "m1.Setpoint"]
        );
    }

    #[test]
    fn series_from_fixed_setpoints() {
        let t = table("id,m0,m1\nobs,1.1,0.9\n");
        let sp = SetpointSource::Fixed([("m0".into(), 1.0), ("m1".into(), 1.0)].into());
        let s = build_metric_series(&t, &["m0".into(), "m1".into()], 1, &sp).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.entries()[0].0, "obs");
        assert_relative_eq!(s.entries()[0].1, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn missing_measurement_is_error() {
        let t = table("id,m0\na,1.0\nb,\n");
        let sp = SetpointSource::Fixed([("m0".into(), 1.0)].into());
        assert!(build_metric_series(&t, &["m0".into()], 1, &sp).is_err());
    }

    #[test]
    fn empty_table_is_error() {
        let t = table("id,m0\n");
        let sp = SetpointSource::Fixed([("m0".into(), 1.0)].into());
        assert!(build_metric_series(&t, &["m0".into()], 1, &sp).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn nonnegative_and_linear_in_deviation(
                setpoints in proptest::collection::vec(0.1f64..10.0, 1..12),
                ratios in proptest::collection::vec(-2.0f64..2.0, 12),
                c in 0.0f64..5.0,
            ) {
                let n = setpoints.len();
                let actual = |k: f64| -> Vec<f64> {
                    setpoints.iter().zip(&ratios).map(|(s, r)| s * (1.0 + k * r)).collect()
                };
                let b1 = MeasurementBlock { parts: 1, types: n, actuals: actual(1.0), setpoints: setpoints.clone() };
                let bc = MeasurementBlock { parts: 1, types: n, actuals: actual(c), setpoints: setpoints.clone() };
                let q1 = aggregate_quality(&b1).unwrap();
                let qc = aggregate_quality(&bc).unwrap();
                prop_assert!(q1 >= 0.0);
                prop_assert!((qc - c * q1).abs() <= 1e-9 * (1.0 + qc.abs()));
                let b0 = MeasurementBlock { parts: 1, types: n, actuals: setpoints.clone(), setpoints: setpoints.clone() };
                prop_assert_eq!(aggregate_quality(&b0).unwrap(), 0.0);
            }
        }
    }
}
