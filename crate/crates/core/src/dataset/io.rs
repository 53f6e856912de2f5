use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ActorDataset, MetricSeries, RawTable};
use crate::error::{Error, Result};

pub fn load_csv(path: impl AsRef<Path>, id_column: &str) -> Result<RawTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    RawTable::from_reader(std::io::BufReader::new(file), id_column)
}

pub use load_csv as read_raw_table;

/// Reads a two-column `measurement,setpoint` file.
pub fn load_setpoints(path: impl AsRef<Path>) -> Result<HashMap<String, f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let series = MetricSeries::from_csv_reader(text.as_bytes())?;
    Ok(series.entries().iter().cloned().collect())
}

/// Index file tying a metric series to per-actor dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub metric: PathBuf,
    pub actors: Vec<ManifestActor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestActor {
    pub actor_id: String,
    pub path: PathBuf,
    #[serde(default)]
    pub shared_columns: Vec<String>,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "datasets.json";

    /// Writes the metric, every actor file and the manifest into `dir`.
    pub fn write(
        dir: &Path,
        metric: &MetricSeries,
        actors: &[ActorDataset],
        ground_truth: Option<&[(String, f64)]>,
    ) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: &str| -> Result<PathBuf> {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            Ok(PathBuf::from(name))
        };
        let metric_path = write("metric.csv", &metric.to_csv_string())?;
        let mut entries = Vec::with_capacity(actors.len());
        for a in actors {
            let path = write(&format!("actor_{}.csv", a.actor_id()), &a.to_csv_string())?;
            entries.push(ManifestActor {
                actor_id: a.actor_id().to_string(),
                path,
                shared_columns: a
                    .columns()
                    .iter()
                    .zip(a.shared_flags())
                    .filter(|(_, s)| **s)
                    .map(|(c, _)| c.clone())
                    .collect(),
            });
        }
        let ground_truth = match ground_truth {
            Some(gt) => {
                let mut text = String::from("actor_id,weight\n");
                for (id, w) in gt {
                    text.push_str(&format!("{},{}\n", super::csv_field(id), super::format_f64(*w)));
                }
                Some(write("ground_truth.csv", &text)?)
            }
            None => None,
        };
        let manifest = DatasetManifest {
            metric: metric_path,
            actors: entries,
            ground_truth,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        write(Self::FILE_NAME, &json)?;
        Ok(manifest)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads the metric and all actors; relative paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<(MetricSeries, Vec<ActorDataset>)> {
        let metric_path = base.join(&self.metric);
        let text = fs::read_to_string(&metric_path).map_err(|e| Error::io(&metric_path, e))?;
        let metric = MetricSeries::from_csv_reader(text.as_bytes())?;
        let actors = self
            .actors
            .iter()
            .map(|a| self.load_actor(base, &a.actor_id))
            .collect::<Result<_>>()?;
        Ok((metric, actors))
    }

    pub fn load_actor(&self, base: &Path, actor_id: &str) -> Result<ActorDataset> {
        let entry = self
            .actors
            .iter()
            .find(|a| a.actor_id == actor_id)
            .ok_or_else(|| Error::invalid(format!("actor `{actor_id}` not in manifest")))?;
        let p = base.join(&entry.path);
        let file = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        ActorDataset::from_csv_reader(&entry.actor_id, &entry.shared_columns, file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let metric = MetricSeries::new(vec![("p1".into(), 0.5), ("p2".into(), 1.5)]).unwrap();
        let actor = ActorDataset::new(
            "tier-1",
            vec!["p1".into(), "p2".into()],
            vec!["x".into(), "humidity".into()],
            vec![false, true],
            vec![1.0, 2.0, 3.0, 4.0],
        )
        .unwrap();
        DatasetManifest::write(dir.path(), &metric, &[actor.clone()], None).unwrap();
        let m = DatasetManifest::read(&dir.path().join(DatasetManifest::FILE_NAME)).unwrap();
        let (metric2, actors) = m.load(dir.path()).unwrap();
        assert_eq!(metric2, metric);
        assert_eq!(actors, vec![actor]);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_csv("/definitely/not/here.csv", "id"),
            Err(Error::Io { .. })
        ));
    }
}
