//! Python bindings: datasets, environments, training, aligned rollouts and
//! the evaluation sweeps.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;

use retalign::behavior::{collect_dataset, drop_returns_above, filter_top_returns, keep_top_returns, PolicySpec};
use retalign::config::RunConfig;
use retalign::envs::{EnvSpec, Environment, SimRng};
use retalign::eval::{abs_error, alignment_sweep};
use retalign::infer::{double_check_select, rollout_aligned, InferConfig};
use retalign::io::{load_dataset, save_dataset};
use retalign::model::{load_checkpoint, save_checkpoint, Network};
use retalign::rng::rng_for;
use retalign::train::{expectile_loss, train_model};
use retalign::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Parse { .. } | Error::Version { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        Error::Usage(_) | Error::Spec(_) => PyValueError::new_err(e.to_string()),
    }
}

fn env_spec(id: &str) -> PyResult<EnvSpec> {
    EnvSpec::from_id(id).map_err(to_py)
}

/// Offline trajectory dataset.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    inner: retalign::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Rolls out the environment's default behavior policy.
    #[staticmethod]
    #[pyo3(signature = (env_id, episodes, gamma = 1.0, seed = 0))]
    fn collect(env_id: &str, episodes: usize, gamma: f64, seed: u64) -> PyResult<Self> {
        let spec = env_spec(env_id)?;
        let inner = collect_dataset(&spec, &PolicySpec::default_for(&spec), episodes, gamma, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_dataset(path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(&self.inner, path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn r_max(&self) -> f64 {
        self.inner.r_max
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn env_id(&self) -> String {
        self.inner.env_id.clone()
    }

    /// Episode return of every trajectory.
    fn returns(&self) -> Vec<f64> {
        self.inner.trajectories.iter().map(|t| t.total_return()).collect()
    }

    fn drop_top(&self, percent: f64) -> PyResult<Self> {
        filter_top_returns(&self.inner, percent).map(|inner| Self { inner }).map_err(to_py)
    }

    fn keep_top(&self, percent: f64) -> PyResult<Self> {
        keep_top_returns(&self.inner, percent).map(|inner| Self { inner }).map_err(to_py)
    }

    fn drop_above(&self, cap: f64) -> PyResult<Self> {
        drop_returns_above(&self.inner, cap).map(|inner| Self { inner }).map_err(to_py)
    }
}

/// A simulator instance with its own random stream.
#[pyclass(name = "Env", unsendable)]
pub struct PyEnv {
    env: Box<dyn Environment + Send>,
    rng: SimRng,
}

#[pymethods]
impl PyEnv {
    #[new]
    #[pyo3(signature = (env_id, seed = 0))]
    fn new(env_id: &str, seed: u64) -> PyResult<Self> {
        let env = env_spec(env_id)?.build().map_err(to_py)?;
        Ok(Self { env, rng: SimRng::seed_from_u64(seed) })
    }

    fn reset(&mut self) -> Vec<f64> {
        self.env.reset(&mut self.rng)
    }

    /// Returns `(observation, reward, done)`.
    fn step(&mut self, action: Vec<f64>) -> PyResult<(Vec<f64>, f64, bool)> {
        let out = self.env.step(&action, &mut self.rng).map_err(to_py)?;
        Ok((out.observation, out.reward, out.done))
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.env.horizon()
    }

    #[getter]
    fn done(&self) -> bool {
        self.env.is_done()
    }
}

/// Trained sequence model.
#[pyclass(name = "Model")]
pub struct PyModel {
    net: Network<f32>,
}

#[pymethods]
impl PyModel {
    /// Trains on `data`. `overrides` are `key=value` config settings such
    /// as `"model.embed_dim=32"` or `"train.lr=1e-3"`.
    #[staticmethod]
    #[pyo3(signature = (data, overrides = Vec::new(), steps = None))]
    fn train(py: Python<'_>, data: &PyDataset, overrides: Vec<String>, steps: Option<u64>) -> PyResult<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&overrides).map_err(to_py)?;
        if let Some(s) = steps {
            cfg.train.total_steps = s;
            cfg.train.warmup_steps = cfg.train.warmup_steps.min(s);
        }
        let ds = data.inner.clone();
        let (net, _) = py
            .detach(move || train_model(&ds, cfg.model, &cfg.train, None))
            .map_err(to_py)?;
        Ok(Self { net })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        load_checkpoint::<f32, _>(path).map(|(net, _)| Self { net }).map_err(to_py)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.net, 0, 0, path).map_err(to_py)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.net.n_params()
    }

    /// One aligned episode. Returns `(achieved return, rewards)`.
    #[pyo3(signature = (env_id, target, r_max, n_candidates = 300, gamma = 1.0, seed = 0))]
    fn rollout(
        &self,
        env_id: &str,
        target: f64,
        r_max: f64,
        n_candidates: usize,
        gamma: f64,
        seed: u64,
    ) -> PyResult<(f64, Vec<f64>)> {
        let mut env = env_spec(env_id)?.build().map_err(to_py)?;
        let cfg = InferConfig { n_candidates, ..InferConfig::for_dataset(r_max, gamma) };
        let mut env_rng = rng_for(seed, &[0]);
        let mut rng = rng_for(seed, &[1]);
        let r = rollout_aligned(env.as_mut(), &self.net, target, &cfg, &mut env_rng, &mut rng).map_err(to_py)?;
        Ok((r.achieved(), r.rewards))
    }

    /// Alignment sweep over `targets`. Returns `(target, mean return, std,
    /// mean abs error)` rows.
    #[pyo3(signature = (env_id, targets, r_max, episodes = 10, n_candidates = 300, gamma = 1.0, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn sweep(
        &self,
        py: Python<'_>,
        env_id: &str,
        targets: Vec<f64>,
        r_max: f64,
        episodes: usize,
        n_candidates: usize,
        gamma: f64,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64, f64, f64)>> {
        let spec = env_spec(env_id)?;
        let cfg = InferConfig { n_candidates, ..InferConfig::for_dataset(r_max, gamma) };
        let net = &self.net;
        let rep = py
            .detach(|| alignment_sweep(net, &spec, &targets, episodes, &cfg, seed))
            .map_err(to_py)?;
        Ok(rep.rows.iter().map(|r| (r.target, r.mean_return, r.std_return, r.mean_abs_err)).collect())
    }
}

/// Index of the value nearest to `target` (lowest index on ties).
#[pyfunction(name = "double_check_select")]
fn py_double_check_select(q: Vec<f64>, target: f64) -> PyResult<usize> {
    double_check_select(&q, target).map_err(to_py)
}

#[pyfunction(name = "expectile_loss")]
fn py_expectile_loss(u: f64, nu: f64) -> f64 {
    expectile_loss(u, nu)
}

/// `|target - sum(rewards)|` for one episode.
#[pyfunction(name = "abs_error")]
fn py_abs_error(target: f64, rewards: Vec<f64>) -> f64 {
    abs_error(target, &rewards)
}

#[pymodule]
fn pyretalign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyEnv>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_double_check_select, m)?)?;
    m.add_function(wrap_pyfunction!(py_expectile_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_abs_error, m)?)?;
    Ok(())
}
