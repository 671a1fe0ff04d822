//! Line-delimited JSON container shared by datasets, rollout traces,
//! environment specs and checkpoints.
//!
//! Every file is one header record followed by zero or more body records,
//! one JSON object per line. Floats are written in shortest round-trip form
//! and parsed with correct rounding, so a load/save cycle is bit-exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::trajectory::{ActionKind, Dataset, ModalityDims, Trajectory, RETURN_RECURSION_TOL};

pub const DATASET_FORMAT_VERSION: u64 = 1;

pub(crate) fn write_records<P: AsRef<Path>>(path: P, lines: &[String]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn read_records<P: AsRef<Path>>(path: P) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect())
}

pub(crate) fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("in-memory records always serialize")
}

pub(crate) fn parse_record<T: for<'de> Deserialize<'de>>(
    path: &Path,
    record: usize,
    line: &str,
) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        record,
        message: e.to_string(),
    })
}

pub(crate) fn parse_err(path: &Path, record: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        record,
        message: message.into(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u64,
    env_id: String,
    gamma: f64,
    state_dim: usize,
    action_dim: usize,
    action_kind: ActionKind,
    r_max: f64,
    n_trajectories: usize,
}

/// Per-step decision record attached to rollout traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAudit {
    pub targets: Vec<f64>,
    pub selected_q: Vec<f64>,
    pub candidate_index: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryRecord {
    states: Vec<Vec<f64>>,
    actions: Value,
    rewards: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audit: Option<StepAudit>,
}

fn header_of(ds: &Dataset) -> DatasetHeader {
    DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        env_id: ds.env_id.clone(),
        gamma: ds.gamma,
        state_dim: ds.dims.state_dim,
        action_dim: ds.dims.action_dim,
        action_kind: ds.dims.action_kind,
        r_max: ds.r_max,
        n_trajectories: ds.len(),
    }
}

fn encode_actions(kind: ActionKind, actions: &[Vec<f64>]) -> Value {
    match kind {
        ActionKind::Continuous => serde_json::to_value(actions).expect("finite actions"),
        ActionKind::Discrete => Value::from(
            actions
                .iter()
                .map(|a| a[0] as u64)
                .collect::<Vec<_>>(),
        ),
    }
}

fn decode_actions(
    path: &Path,
    record: usize,
    dims: &ModalityDims,
    value: Value,
) -> Result<Vec<Vec<f64>>> {
    match dims.action_kind {
        ActionKind::Continuous => serde_json::from_value(value)
            .map_err(|e| parse_err(path, record, format!("actions: {e}"))),
        ActionKind::Discrete => {
            let idx: Vec<u64> = serde_json::from_value(value)
                .map_err(|e| parse_err(path, record, format!("actions: {e}")))?;
            Ok(idx.into_iter().map(|i| vec![i as f64]).collect())
        }
    }
}

fn encode_dataset(ds: &Dataset, audits: Option<&[StepAudit]>) -> Vec<String> {
    let mut lines = Vec::with_capacity(ds.len() + 1);
    lines.push(to_line(&header_of(ds)));
    for (i, traj) in ds.trajectories.iter().enumerate() {
        lines.push(to_line(&TrajectoryRecord {
            states: traj.states.clone(),
            actions: encode_actions(ds.dims.action_kind, &traj.actions),
            rewards: traj.rewards.clone(),
            audit: audits.map(|a| a[i].clone()),
        }));
    }
    lines
}

/// Serialized form of a dataset, one string per record.
pub fn dataset_to_lines(ds: &Dataset) -> Vec<String> {
    encode_dataset(ds, None)
}

pub fn save_dataset<P: AsRef<Path>>(ds: &Dataset, path: P) -> Result<()> {
    write_records(path, &encode_dataset(ds, None))
}

/// Writes rollout trajectories together with their per-step decision records.
pub fn save_traces<P: AsRef<Path>>(ds: &Dataset, audits: &[StepAudit], path: P) -> Result<()> {
    if audits.len() != ds.len() {
        return Err(Error::usage(format!(
            "{} audits for {} trajectories",
            audits.len(),
            ds.len()
        )));
    }
    write_records(path, &encode_dataset(ds, Some(audits)))
}

pub fn load_dataset<P: AsRef<Path>>(path: P) -> Result<Dataset> {
    load_traces(path).map(|(ds, _)| ds)
}

/// Loads a dataset file; audits are present only for rollout traces.
pub fn load_traces<P: AsRef<Path>>(path: P) -> Result<(Dataset, Vec<Option<StepAudit>>)> {
    let path = path.as_ref();
    let lines = read_records(path)?;
    let first = lines
        .first()
        .ok_or_else(|| parse_err(path, 0, "missing header record"))?;
    let probe: Value = parse_record(path, 0, first)?;
    let version = probe
        .get("format_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| parse_err(path, 0, "header lacks format_version"))?;
    if version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let header: DatasetHeader = parse_record(path, 0, first)?;
    let dims = ModalityDims {
        state_dim: header.state_dim,
        action_dim: header.action_dim,
        action_kind: header.action_kind,
    };
    if lines.len() - 1 != header.n_trajectories {
        return Err(parse_err(
            path,
            lines.len().min(header.n_trajectories + 1),
            format!(
                "header announces {} trajectories, found {}",
                header.n_trajectories,
                lines.len() - 1
            ),
        ));
    }

    let mut trajectories = Vec::with_capacity(header.n_trajectories);
    let mut audits = Vec::with_capacity(header.n_trajectories);
    for (record, line) in lines.iter().enumerate().skip(1) {
        let rec: TrajectoryRecord = parse_record(path, record, line)?;
        let actions = decode_actions(path, record, &dims, rec.actions)?;
        let traj = Trajectory::new(rec.states, actions, rec.rewards, header.gamma)
            .map_err(|e| parse_err(path, record, e.to_string()))?;
        traj.check_dims(&dims)
            .map_err(|e| parse_err(path, record, e.to_string()))?;
        if traj.recursion_residual(header.gamma) > RETURN_RECURSION_TOL {
            return Err(parse_err(path, record, "return recursion violated"));
        }
        trajectories.push(traj);
        audits.push(rec.audit);
    }

    let ds = Dataset {
        env_id: header.env_id,
        gamma: header.gamma,
        dims,
        trajectories,
        r_max: header.r_max,
    };
    let recomputed = crate::trajectory::max_return(&ds.trajectories);
    if recomputed.to_bits() != ds.r_max.to_bits() {
        return Err(parse_err(
            path,
            0,
            format!("stored r_max {} disagrees with trajectories ({recomputed})", ds.r_max),
        ));
    }
    Ok((ds, audits))
}
