use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{SystemError, SystemId};

pub const SCHEMA_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const DATA_FILE: &str = "trajectories.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    pub system: SystemId,
    pub dt: f64,
    pub n_traj: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub theta: f64,
    pub obs_names: Vec<String>,
    pub ext_names: Vec<String>,
    /// Hash of the experiment configuration that produced the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// `n_steps + 1` samples, including the initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub obs: Array2<f64>,
    pub ext: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    /// Per-column standard deviation of the observations over every sample.
    pub fn obs_std(&self) -> Vec<f64> {
        let d = self.meta.obs_names.len();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0.0;
        for tr in &self.trajectories {
            for row in tr.obs.rows() {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1.0;
            }
        }
        (0..d).map(|j| (sq[j] / n - (sum[j] / n).powi(2)).max(0.0).sqrt()).collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SystemError + '_ {
    move |source| SystemError::Io { path: path.display().to_string(), source }
}

/// Writes `meta.json` and `trajectories.csv` into `dir`, creating it.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), SystemError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&data.meta)?).map_err(io_err(&meta_path))?;
    let data_path = dir.join(DATA_FILE);
    let mut w = csv::Writer::from_path(&data_path)?;
    let mut header = vec!["traj_id".to_string(), "step".into(), "t".into()];
    header.extend(data.meta.obs_names.iter().cloned());
    header.extend(data.meta.ext_names.iter().cloned());
    w.write_record(&header)?;
    for (id, tr) in data.trajectories.iter().enumerate() {
        for (step, &t) in tr.times.iter().enumerate() {
            let mut rec = vec![id.to_string(), step.to_string(), t.to_string()];
            rec.extend(tr.obs.row(step).iter().map(|v| v.to_string()));
            rec.extend(tr.ext.row(step).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(io_err(&data_path))?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, SystemError> {
    let meta_path = dir.join(META_FILE);
    if !meta_path.exists() {
        return Err(SystemError::Schema(format!("{} is missing", meta_path.display())));
    }
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(SystemError::Schema(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    let (d, e) = (meta.obs_names.len(), meta.ext_names.len());
    let mut r = csv::Reader::from_path(dir.join(DATA_FILE))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut expected = vec!["traj_id".to_string(), "step".into(), "t".into()];
    expected.extend(meta.obs_names.iter().cloned());
    expected.extend(meta.ext_names.iter().cloned());
    if header != expected {
        return Err(SystemError::Schema(format!("csv header {header:?} does not match {expected:?}")));
    }
    let rows = meta.n_steps + 1;
    let mut trajectories: Vec<Trajectory> = (0..meta.n_traj)
        .map(|_| Trajectory { times: vec![0.0; rows], obs: Array2::zeros((rows, d)), ext: Array2::zeros((rows, e)) })
        .collect();
    let mut seen = vec![vec![false; rows]; meta.n_traj];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| SystemError::Schema(format!("row {}: {what}", line + 2));
        let id: usize = rec[0].parse().map_err(|_| bad("bad traj_id"))?;
        let step: usize = rec[1].parse().map_err(|_| bad("bad step"))?;
        if id >= meta.n_traj || step >= rows {
            return Err(bad("traj_id or step out of range"));
        }
        if std::mem::replace(&mut seen[id][step], true) {
            return Err(bad("duplicate row"));
        }
        let vals: Vec<f64> = rec.iter().skip(2).map(|s| s.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad("bad number"))?;
        let tr = &mut trajectories[id];
        tr.times[step] = vals[0];
        for j in 0..d {
            tr.obs[[step, j]] = vals[1 + j];
        }
        for j in 0..e {
            tr.ext[[step, j]] = vals[1 + d + j];
        }
    }
    if let Some((id, _)) = seen.iter().enumerate().find(|(_, s)| s.iter().any(|&x| !x)) {
        return Err(SystemError::Schema(format!("trajectory {id} has missing rows")));
    }
    Ok(Dataset { meta, trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrators::Dopri5Options;
    use crate::systems::{generate, SystemSpec};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&SystemSpec::new(SystemId::BAbs), 3, 15, 4, &Dopri5Options::default()).unwrap().dataset;
        write_dataset(dir.path(), &data).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn missing_meta_is_a_schema_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, SystemError::Schema(ref m) if m.contains("meta.json")), "{err}");
    }

    #[test]
    fn wrong_version_and_missing_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = generate(&SystemSpec::new(SystemId::D), 2, 5, 0, &Dopri5Options::default()).unwrap().dataset;
        write_dataset(dir.path(), &data).unwrap();
        data.meta.n_steps = 6;
        fs::write(dir.path().join(META_FILE), serde_json::to_string(&data.meta).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(SystemError::Schema(_))));
        data.meta.n_steps = 5;
        data.meta.schema_version = 9;
        fs::write(dir.path().join(META_FILE), serde_json::to_string(&data.meta).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(SystemError::Schema(ref m)) if m.contains("version")));
    }
}
