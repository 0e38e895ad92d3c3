//! File formats: system JSON, trajectories (CSV or JSON envelope), matrices
//! and decoupled factors.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sim::{NoiseModel, SimError, Trajectory};
use crate::system::{matrix_from_rows, matrix_to_rows, SystemSpec};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Sim(#[from] SimError),
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn read_system(path: &Path) -> Result<SystemSpec, IoError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    matrix_to_rows(m)
}

/// Row-major array of arrays.
pub fn matrix_from_value(v: &Value) -> Result<DMatrix<f64>, IoError> {
    let rows: Vec<Vec<f64>> = serde_json::from_value(v.clone())?;
    matrix_from_rows(&rows).map_err(IoError::Format)
}

/// A bare matrix, or an object holding one under the first of `keys` present.
pub fn read_matrix(path: &Path, keys: &[&str]) -> Result<DMatrix<f64>, IoError> {
    let v: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    match &v {
        Value::Array(_) => matrix_from_value(&v),
        Value::Object(map) => keys
            .iter()
            .find_map(|k| map.get(*k))
            .map(matrix_from_value)
            .unwrap_or_else(|| Err(IoError::Format(format!("{}: none of the keys {keys:?}", path.display())))),
        _ => Err(IoError::Format(format!("{}: expected a matrix or an object", path.display()))),
    }
}

/// JSON form of a trajectory; `observations[k]` is `y(k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEnvelope {
    pub tau: f64,
    pub seed: u64,
    pub sigma: Vec<f64>,
    pub n_nodes: usize,
    pub state_dim: usize,
    pub rng: String,
    pub gaussian: String,
    pub observations: Vec<Vec<f64>>,
}

impl TrajectoryEnvelope {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        let obs = traj.observations();
        Self {
            tau: traj.tau,
            seed: traj.seed,
            sigma: traj.noise.sigma().to_vec(),
            n_nodes: traj.n_nodes,
            state_dim: traj.state_dim,
            rng: traj.rng.clone(),
            gaussian: traj.gaussian.clone(),
            observations: obs.column_iter().map(|c| c.iter().cloned().collect()).collect(),
        }
    }

    pub fn into_trajectory(self) -> Result<Trajectory, IoError> {
        let dim = self.n_nodes * self.state_dim;
        if let Some(k) = self.observations.iter().position(|y| y.len() != dim) {
            return Err(IoError::Format(format!("observation {k} does not have length {dim}")));
        }
        let cols = self.observations.len();
        let obs = DMatrix::from_fn(dim, cols, |i, k| self.observations[k][i]);
        let noise = NoiseModel::new(self.sigma)?;
        let mut traj = Trajectory::from_observations(obs, self.tau, self.n_nodes, self.state_dim, noise, self.seed)?;
        traj.rng = self.rng;
        traj.gaussian = self.gaussian;
        Ok(traj)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    k: usize,
    t: f64,
    node: usize,
    dim: usize,
    value: f64,
}

/// One row per scalar observation, nodes and dimensions zero-based.
pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, out: W) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    let n = traj.state_dim;
    for (k, col) in traj.observations().column_iter().enumerate() {
        for (i, value) in col.iter().enumerate() {
            w.serialize(CsvRow { k, t: k as f64 * traj.tau, node: i / n, dim: i % n, value: *value })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// CSV carries no noise metadata, so the trajectory comes back with σ = 0
/// and seed 0. `τ` is read off the `t` column.
pub fn read_trajectory_csv<R: Read>(input: R) -> Result<Trajectory, IoError> {
    let mut r = csv::Reader::from_reader(input);
    let mut data = Vec::new();
    for row in r.deserialize() {
        let row: CsvRow = row?;
        data.push(row);
    }
    let max = |f: fn(&CsvRow) -> usize| data.iter().map(f).max();
    let (Some(kmax), Some(nmax), Some(dmax)) = (max(|r| r.k), max(|r| r.node), max(|r| r.dim)) else {
        return Err(IoError::Format("empty trajectory CSV".into()));
    };
    let (n_nodes, n) = (nmax + 1, dmax + 1);
    if data.len() != (kmax + 1) * n_nodes * n {
        return Err(IoError::Format(format!(
            "{} rows for {} steps × {n_nodes} nodes × {n} dims",
            data.len(),
            kmax + 1
        )));
    }
    let mut obs = DMatrix::from_element(n_nodes * n, kmax + 1, f64::NAN);
    let mut seen = BTreeSet::new();
    let mut tau = None;
    for row in &data {
        if !seen.insert((row.k, row.node, row.dim)) {
            return Err(IoError::Format(format!("duplicate entry k={} node={} dim={}", row.k, row.node, row.dim)));
        }
        obs[(row.node * n + row.dim, row.k)] = row.value;
        if row.k == 1 {
            tau = Some(row.t);
        }
    }
    let tau = tau.ok_or_else(|| IoError::Format("need at least two time steps".into()))?;
    Ok(Trajectory::from_observations(obs, tau, n_nodes, n, NoiseModel::noiseless(n), 0)?)
}

/// CSV when the extension says so, JSON envelope otherwise.
pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<(), IoError> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    if is_csv(path) {
        write_trajectory_csv(traj, file)
    } else {
        serde_json::to_writer_pretty(file, &TrajectoryEnvelope::from_trajectory(traj))?;
        Ok(())
    }
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    if is_csv(path) {
        read_trajectory_csv(file)
    } else {
        let env: TrajectoryEnvelope = serde_json::from_reader(file)?;
        env.into_trajectory()
    }
}

/// `Â, B̂, K̂, L̂` as written by `infer decouple`; other keys are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factors {
    #[serde(rename = "A", alias = "A_hat")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B", alias = "B_hat")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "K", alias = "K_hat")]
    pub k: Vec<Vec<f64>>,
    #[serde(rename = "L", alias = "L_hat")]
    pub l: Vec<Vec<f64>>,
}

impl Factors {
    pub fn read(path: &Path) -> Result<Self, IoError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `(Â, B̂, K̂, L̂)`.
    pub fn matrices(&self) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>), IoError> {
        let conv =
            |r: &[Vec<f64>], name: &str| matrix_from_rows(r).map_err(|e| IoError::Format(format!("{name}: {e}")));
        Ok((conv(&self.a, "A")?, conv(&self.b, "B")?, conv(&self.k, "K")?, conv(&self.l, "L")?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, uniform_initial_state};
    use crate::system::{build_laplacian, reference_network, ClosedLoop};

    fn sample() -> Trajectory {
        let (g, sys) = reference_network();
        let cl = ClosedLoop::new(&sys, &build_laplacian(&g), 0.05).unwrap();
        let x0 = uniform_initial_state(18, 0.0, 1000.0, 3);
        simulate(&cl, &x0, 20, &NoiseModel::new(vec![1.0, 0.5, 0.1]).unwrap(), 3).unwrap()
    }

    #[test]
    fn envelope_round_trip_is_exact() {
        let traj = sample();
        let text = serde_json::to_string(&TrajectoryEnvelope::from_trajectory(&traj)).unwrap();
        let back = serde_json::from_str::<TrajectoryEnvelope>(&text).unwrap().into_trajectory().unwrap();
        assert_eq!(back, traj);
    }

    #[test]
    fn csv_round_trip_keeps_observations() {
        let traj = sample();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("k,t,node,dim,value\n"));
        assert_eq!(text.lines().count(), 1 + 21 * 18);
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back.observations(), traj.observations());
        assert_eq!((back.n_nodes, back.state_dim), (6, 3));
        assert!((back.tau - 0.05).abs() < 1e-15);
    }

    #[test]
    fn incomplete_csv_is_rejected() {
        let text = "k,t,node,dim,value\n0,0,0,0,1\n1,0.1,0,0,2\n1,0.1,0,1,2\n";
        assert!(matches!(read_trajectory_csv(text.as_bytes()), Err(IoError::Format(_))));
    }

    #[test]
    fn matrix_files_accept_bare_and_keyed_forms() {
        let dir = tempfile::tempdir().unwrap();
        let bare = dir.path().join("bare.json");
        let keyed = dir.path().join("keyed.json");
        std::fs::write(&bare, "[[1, 2], [3, 4]]").unwrap();
        std::fs::write(&keyed, r#"{"Ad": [[1, 2], [3, 4]], "pattern": "other"}"#).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(read_matrix(&bare, &["Ad"]).unwrap(), expect);
        assert_eq!(read_matrix(&keyed, &["Ac", "Ad"]).unwrap(), expect);
        assert!(read_matrix(&keyed, &["Ac"]).is_err());
    }
}
