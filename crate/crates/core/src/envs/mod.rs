//! Desk-scale environments: return dial, point-mass maze, treatment POMDP and
//! a tabular chain with an exact optimal-value oracle.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{parse_err, parse_record, read_records, to_line, write_records};
use crate::trajectory::ModalityDims;

pub mod chain;
pub mod dial;
pub mod maze;
pub mod treatment;

pub use chain::{value_iteration, ChainEnv, ChainSpec, QTable};
pub use dial::{DialEnv, DialSpec};
pub use maze::{MazeEnv, MazeSpec};
pub use treatment::{TreatmentEnv, TreatmentSpec};

/// Random source used by every simulator.
pub type SimRng = ChaCha8Rng;

pub const ENV_SPEC_VERSION: u64 = 1;

/// Why an episode stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeEnd {
    Remission,
    Adverse,
    Horizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub end: Option<EpisodeEnd>,
}

/// A resettable episodic simulator. Instances own their state and are
/// driven from a single thread; use one instance per rollout worker.
pub trait Environment {
    fn env_id(&self) -> String;
    fn dims(&self) -> ModalityDims;
    fn horizon(&self) -> usize;
    fn reset(&mut self, rng: &mut SimRng) -> Vec<f64>;
    fn step(&mut self, action: &[f64], rng: &mut SimRng) -> Result<StepOutcome>;
    /// True once the episode has ended (including horizon 0 right after reset).
    fn is_done(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvSpec {
    Dial(DialSpec),
    Maze(MazeSpec),
    Treatment(TreatmentSpec),
    Chain(ChainSpec),
}

#[derive(Serialize, Deserialize)]
struct SpecRecord {
    spec_version: u64,
    env_id: String,
    spec: EnvSpec,
}

impl EnvSpec {
    /// Default spec for an id: `dial`, `maze`, `chain` or `treatment:<seed>`.
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "dial" => Ok(EnvSpec::Dial(DialSpec::default())),
            "maze" => Ok(EnvSpec::Maze(MazeSpec::default())),
            "chain" => Ok(EnvSpec::Chain(ChainSpec::standard(5, 6))),
            _ => {
                if let Some(seed) = id.strip_prefix("treatment:") {
                    let seed: u64 = seed
                        .parse()
                        .map_err(|_| Error::usage(format!("bad treatment seed in {id:?}")))?;
                    Ok(EnvSpec::Treatment(TreatmentSpec::generate(seed)?))
                } else {
                    Err(Error::usage(format!(
                        "unknown environment {id:?} (expected dial, maze, chain or treatment:<seed>)"
                    )))
                }
            }
        }
    }

    pub fn env_id(&self) -> String {
        match self {
            EnvSpec::Dial(_) => "dial".into(),
            EnvSpec::Maze(_) => "maze".into(),
            EnvSpec::Chain(_) => "chain".into(),
            EnvSpec::Treatment(s) => format!("treatment:{}", s.seed),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment + Send>> {
        Ok(match self {
            EnvSpec::Dial(s) => Box::new(DialEnv::new(s.clone())),
            EnvSpec::Maze(s) => Box::new(MazeEnv::new(s.clone())),
            EnvSpec::Treatment(s) => Box::new(TreatmentEnv::new(s.clone())?),
            EnvSpec::Chain(s) => Box::new(ChainEnv::new(s.clone())?),
        })
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let rec = SpecRecord {
            spec_version: ENV_SPEC_VERSION,
            env_id: self.env_id(),
            spec: self.clone(),
        };
        write_records(path, &[to_line(&rec)])
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let path = path.as_ref();
        let lines = read_records(path)?;
        let line = lines
            .first()
            .ok_or_else(|| parse_err(path, 0, "empty spec file"))?;
        let probe: serde_json::Value = parse_record(path, 0, line)?;
        let version = probe
            .get("spec_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| parse_err(path, 0, "missing spec_version"))?;
        if version != ENV_SPEC_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                found: version,
                expected: ENV_SPEC_VERSION,
            });
        }
        let rec: SpecRecord = parse_record(path, 0, line)?;
        if let EnvSpec::Treatment(s) = &rec.spec {
            s.validate()?;
        }
        Ok(rec.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_resolve() {
        for id in ["dial", "maze", "chain", "treatment:3"] {
            let spec = EnvSpec::from_id(id).unwrap();
            assert_eq!(spec.env_id(), id);
            spec.build().unwrap();
        }
        assert!(EnvSpec::from_id("cartpole").is_err());
        assert!(EnvSpec::from_id("treatment:x").is_err());
    }

    #[test]
    fn spec_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["dial", "maze", "chain", "treatment:5"] {
            let spec = EnvSpec::from_id(id).unwrap();
            let p = dir.path().join(format!("{}.json", id.replace(':', "_")));
            spec.save(&p).unwrap();
            assert_eq!(EnvSpec::load(&p).unwrap(), spec);
        }
    }
}
