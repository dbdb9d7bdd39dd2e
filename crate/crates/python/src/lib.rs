use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dalign_core::checkpoint::{AnyPolicy, Checkpoint};
use dalign_core::losses::{self, HSpec, LossConfig, PreferenceExample};
use dalign_core::operators::{self, ExplicitDistribution};
use dalign_core::policy::{self as pol, ContextFreePolicy, NeuralPolicy, Policy, Sequence, SequenceSpace, TabularPolicy, TokenId, TransformerConfig};
use dalign_core::reward::{GroundTruthReward, TabularReward};
use dalign_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Config(_) | Error::Domain(_) | Error::Parse { .. } | Error::EnumerationCap { .. } | Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for dalign_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Exact distribution over every completion of one prompt, in enumeration
/// order (eos last among symbols).
#[pyclass(name = "Distribution", frozen)]
struct PyDistribution(ExplicitDistribution);

#[pymethods]
impl PyDistribution {
    #[staticmethod]
    #[pyo3(signature = (vocab, l_max, probs, prompt = Vec::new()))]
    fn from_probs(vocab: u32, l_max: usize, probs: Vec<f64>, prompt: Vec<TokenId>) -> PyResult<Self> {
        let space = SequenceSpace::new(vocab, l_max).py()?;
        Ok(Self(ExplicitDistribution::from_probs(space, &prompt, &probs).py()?))
    }

    #[getter]
    fn probs(&self) -> Vec<f64> {
        self.0.probs()
    }

    #[getter]
    fn log_probs(&self) -> Vec<f64> {
        self.0.log_probs().to_vec()
    }

    #[getter]
    fn completions(&self) -> Vec<Vec<TokenId>> {
        self.0.completions().to_vec()
    }

    /// ln of the normalizer of the operator that produced this distribution.
    #[getter]
    fn log_partition(&self) -> f64 {
        self.0.log_partition
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Distribution(n={}, log_partition={})", self.0.len(), self.0.log_partition)
    }
}

fn tabular_reward(d: &ExplicitDistribution, rewards: Vec<f64>) -> PyResult<TabularReward> {
    TabularReward::new(*d.space(), vec![d.prompt().to_vec()], rewards).py()
}

/// Length-normalizing map: weights proportional to pi^(1/|y|).
#[pyfunction]
fn apply_f(d: &PyDistribution) -> PyResult<PyDistribution> {
    Ok(PyDistribution(operators::apply_f(&d.0).py()?))
}

#[pyfunction]
fn apply_f_inv(d: &PyDistribution) -> PyResult<PyDistribution> {
    Ok(PyDistribution(operators::apply_f_inv(&d.0).py()?))
}

/// Reward tilt pi * exp(R / beta); `rewards` follows enumeration order.
#[pyfunction]
fn apply_t_r(d: &PyDistribution, rewards: Vec<f64>, beta: f64) -> PyResult<PyDistribution> {
    let r = tabular_reward(&d.0, rewards)?;
    Ok(PyDistribution(operators::apply_t_r(&d.0, &r, beta).py()?))
}

/// Optimum of the averaged objective and its log partition ln Z.
#[pyfunction]
fn avg_optimal_policy(d: &PyDistribution, rewards: Vec<f64>, beta: f64) -> PyResult<(PyDistribution, f64)> {
    let r = tabular_reward(&d.0, rewards)?;
    let opt = operators::avg_optimal_policy(&d.0, &r, beta).py()?;
    let log_z = opt.log_z();
    Ok((PyDistribution(opt.policy), log_z))
}

#[pyfunction]
fn total_variation(a: &PyDistribution, b: &PyDistribution) -> PyResult<f64> {
    operators::total_variation(&a.0, &b.0).py()
}

#[pyfunction]
#[pyo3(signature = (vocab = 3, l_max = 4, beta = 1.0, seed = 0, draws = 20))]
fn oracle_check(py: Python<'_>, vocab: u32, l_max: usize, beta: f64, seed: u64, draws: usize) -> PyResult<Py<PyDict>> {
    let space = SequenceSpace::new(vocab, l_max).py()?;
    let r = operators::oracle_check(space, beta, seed, draws).py()?;
    let d = PyDict::new(py);
    d.set_item("draws", r.draws)?;
    d.set_item("n_sequences", r.n_sequences)?;
    d.set_item("bijection_error", r.bijection_error)?;
    d.set_item("t_r_residual_std", r.t_r_residual_std)?;
    d.set_item("avg_residual_std", r.avg_residual_std)?;
    d.set_item("partition_error", r.partition_error)?;
    Ok(d.unbind())
}

#[pyclass(name = "Policy", frozen)]
struct PyPolicy(AnyPolicy);

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    #[pyo3(signature = (vocab, l_max, prompts, std = 1.0, seed = 0))]
    fn tabular(vocab: u32, l_max: usize, prompts: Vec<Vec<TokenId>>, std: f64, seed: u64) -> PyResult<Self> {
        let space = SequenceSpace::new(vocab, l_max).py()?;
        Ok(Self(AnyPolicy::Tabular(TabularPolicy::random(space, prompts, std, seed).py()?)))
    }

    #[staticmethod]
    #[pyo3(signature = (vocab, l_max, *, d_model = 16, n_blocks = 1, n_heads = 2, context = 32, ffn_mult = 2, init_std = 0.1, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn neural(
        vocab: u32,
        l_max: usize,
        d_model: usize,
        n_blocks: usize,
        n_heads: usize,
        context: usize,
        ffn_mult: usize,
        init_std: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let space = SequenceSpace::new(vocab, l_max).py()?;
        let config = TransformerConfig {
            d_model,
            n_blocks,
            n_heads,
            context,
            ffn_mult,
            init_std,
        };
        Ok(Self(AnyPolicy::Neural(NeuralPolicy::new(space, config, seed).py()?)))
    }

    #[staticmethod]
    fn context_free(vocab: u32, l_max: usize, eos_prob: f64) -> PyResult<Self> {
        let space = SequenceSpace::new(vocab, l_max).py()?;
        Ok(Self(AnyPolicy::ContextFree(ContextFreePolicy::with_eos_prob(space, eos_prob).py()?)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(Checkpoint::load(&path).py()?.into_policy().py()?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::of_policy(&self.0).save(&path).py()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.params().len()
    }

    #[getter]
    fn eos(&self) -> TokenId {
        self.0.space().eos()
    }

    /// ln pi(completion | prompt); the completion must end with eos.
    fn log_prob(&self, prompt: Vec<TokenId>, completion: Vec<TokenId>) -> PyResult<f64> {
        let seq = Sequence::new(prompt, completion, self.0.space()).py()?;
        self.0.log_prob(&seq).py()
    }

    #[pyo3(signature = (prompt, seed = 0, temperature = 1.0))]
    fn sample(&self, prompt: Vec<TokenId>, seed: u64, temperature: f64) -> PyResult<Vec<TokenId>> {
        Ok(pol::sample(&self.0, &prompt, seed, temperature).py()?.completion)
    }

    /// Exact distribution over all completions of `prompt`.
    #[pyo3(signature = (prompt = Vec::new()))]
    fn distribution(&self, prompt: Vec<TokenId>) -> PyResult<PyDistribution> {
        Ok(PyDistribution(ExplicitDistribution::from_policy(&self.0, &prompt).py()?))
    }
}

#[pyclass(name = "GroundTruthReward", frozen)]
struct PyGroundTruthReward(GroundTruthReward);

#[pymethods]
impl PyGroundTruthReward {
    #[new]
    #[pyo3(signature = (key_token_weight = 1.0, length_penalty = 0.5, target_length = 6, length_bias = 0.0))]
    fn new(key_token_weight: f64, length_penalty: f64, target_length: usize, length_bias: f64) -> Self {
        Self(GroundTruthReward {
            key_token_weight,
            length_penalty,
            target_length,
            length_bias,
        })
    }

    fn __call__(&self, prompt: Vec<TokenId>, completion: Vec<TokenId>) -> f64 {
        self.0.true_reward(&prompt, &completion)
    }
}

/// (h(z), h'(z)) for dpo, ipo or slic.
#[pyfunction]
fn h(name: &str, z: f64) -> PyResult<(f64, f64)> {
    Ok(HSpec::from_name(name).py()?.eval(z))
}

/// Mean direct-alignment loss of `policy` against `reference` on
/// (prompt, chosen, rejected) triples.
#[pyfunction]
fn direct_loss(
    algorithm: &str,
    beta: f64,
    policy: &PyPolicy,
    reference: &PyPolicy,
    examples: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<TokenId>)>,
) -> PyResult<f64> {
    let config = LossConfig::from_algorithm(algorithm, beta).py()?;
    let space = policy.0.space();
    let batch = examples
        .into_iter()
        .map(|(p, c, r)| PreferenceExample::new(p, c, r, space))
        .collect::<dalign_core::Result<Vec<_>>>()
        .py()?;
    losses::direct_loss(&config, &policy.0, &reference.0, &batch).py()
}

/// Run the `dalign` command line in-process; returns its exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> u8 {
    let argv: Vec<String> = std::iter::once("dalign".to_string()).chain(args).collect();
    py.detach(|| dalign_core::cli::status(argv))
}

#[pymodule]
fn dalign(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDistribution>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyGroundTruthReward>()?;
    m.add_function(wrap_pyfunction!(apply_f, m)?)?;
    m.add_function(wrap_pyfunction!(apply_f_inv, m)?)?;
    m.add_function(wrap_pyfunction!(apply_t_r, m)?)?;
    m.add_function(wrap_pyfunction!(avg_optimal_policy, m)?)?;
    m.add_function(wrap_pyfunction!(total_variation, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    m.add_function(wrap_pyfunction!(h, m)?)?;
    m.add_function(wrap_pyfunction!(direct_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
