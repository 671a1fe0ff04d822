//! Checkpoint files: a header with the model config, training step and seed,
//! then one record per named parameter tensor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Network;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::io::{parse_err, parse_record, read_records, to_line, write_records};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u64,
    pub config: ModelConfig,
    pub step: u64,
    pub seed: u64,
    pub n_tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_checkpoint<F: Scalar, P: AsRef<Path>>(net: &Network<F>, step: u64, seed: u64, path: P) -> Result<()> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: net.config.clone(),
        step,
        seed,
        n_tensors: net.layout.infos.len(),
    };
    let mut lines = Vec::with_capacity(header.n_tensors + 1);
    lines.push(to_line(&header));
    for info in &net.layout.infos {
        let rec = TensorRecord {
            name: info.name.clone(),
            shape: info.shape.clone(),
            data: net.params[info.offset..info.offset + info.len]
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        };
        lines.push(to_line(&rec));
    }
    write_records(path, &lines)
}

/// Loads a checkpoint, checking every tensor's name and shape against the
/// layout implied by the stored config.
pub fn load_checkpoint<F: Scalar, P: AsRef<Path>>(path: P) -> Result<(Network<F>, CheckpointHeader)> {
    let path = path.as_ref();
    let lines = read_records(path)?;
    let first = lines.first().ok_or_else(|| parse_err(path, 0, "empty checkpoint"))?;
    let probe: serde_json::Value = parse_record(path, 0, first)?;
    let version = probe
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| parse_err(path, 0, "missing format_version"))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader = parse_record(path, 0, first)?;
    header
        .config
        .validate()
        .map_err(|e| parse_err(path, 0, e.to_string()))?;
    let mut net = Network::<F>::new(header.config.clone(), 0)?;
    let infos = net.layout.infos.clone();
    if lines.len() != infos.len() + 1 || header.n_tensors != infos.len() {
        return Err(parse_err(
            path,
            lines.len().min(infos.len() + 1),
            format!("expected {} tensors, found {}", infos.len(), lines.len() - 1),
        ));
    }
    for (i, info) in infos.iter().enumerate() {
        let rec: TensorRecord = parse_record(path, i + 1, &lines[i + 1])?;
        if rec.name != info.name || rec.shape != info.shape || rec.data.len() != info.len {
            return Err(parse_err(
                path,
                i + 1,
                format!(
                    "tensor {:?} {:?} does not match expected {:?} {:?}",
                    rec.name, rec.shape, info.name, info.shape
                ),
            ));
        }
        for (dst, v) in net.params[info.offset..info.offset + info.len].iter_mut().zip(&rec.data) {
            *dst = F::of(*v);
        }
    }
    Ok((net, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::ActionKind;

    fn small() -> ModelConfig {
        ModelConfig {
            context_len: 2,
            embed_dim: 8,
            heads: 2,
            ff_dim: 8,
            q_hidden: 4,
            state_dim: 2,
            action_dim: 3,
            action_kind: ActionKind::Discrete,
            state_mean: vec![0.0; 2],
            state_std: vec![1.0; 2],
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let net = Network::<f32>::new(small(), 9).unwrap();
        save_checkpoint(&net, 17, 9, &p).unwrap();
        let (back, h) = load_checkpoint::<f32, _>(&p).unwrap();
        assert_eq!(back.params, net.params);
        assert_eq!(h.step, 17);
        assert_eq!(h.config, net.config);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let net = Network::<f64>::new(small(), 1).unwrap();
        save_checkpoint(&net, 0, 1, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let bad = text.replacen("\"shape\":[1,8]", "\"shape\":[8,1]", 1);
        assert_ne!(bad, text);
        std::fs::write(&p, bad).unwrap();
        let err = load_checkpoint::<f64, _>(&p).unwrap_err();
        assert!(matches!(err, Error::Parse { record: 1, .. }), "{err}");
    }

    #[test]
    fn missing_file_is_io() {
        let err = load_checkpoint::<f32, _>("/nonexistent/ckpt").unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
