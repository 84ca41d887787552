//! Python bindings for the `prefvec` core.

use clap::Parser;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use prefvec::activationstore::{self, Position};
use prefvec::choicemodel::{self, ChoiceRecord, FitConfig};
use prefvec::corpus::{self, Split};
use prefvec::probekit::{self, ProbeOptions};
use prefvec::simbackend::{self, BackendConfig};
use prefvec::statlab;

fn err(e: prefvec::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn position(s: &str) -> PyResult<Position> {
    s.parse().map_err(err)
}

#[pyclass(frozen, module = "prefvec_py")]
struct TaskTable(corpus::TaskTable);

#[pymethods]
impl TaskTable {
    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        corpus::parse_tasks(text).map(TaskTable).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (n, n_topics = 14, harmful_fraction = 0.0, seed = 0))]
    fn synthetic(n: usize, n_topics: usize, harmful_fraction: f64, seed: u64) -> PyResult<Self> {
        simbackend::synthetic_tasks(n, n_topics, harmful_fraction, seed)
            .map(TaskTable)
            .map_err(err)
    }

    fn ids(&self) -> Vec<String> {
        self.0.ids()
    }

    fn topics(&self) -> Vec<String> {
        self.0.tasks().iter().map(|t| t.topic.clone()).collect()
    }

    fn to_jsonl(&self) -> String {
        self.0.to_jsonl()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(frozen, module = "prefvec_py")]
struct UtilityFit(choicemodel::UtilityFit);

#[pymethods]
impl UtilityFit {
    #[getter]
    fn persona(&self) -> String {
        self.0.persona.clone()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    fn ids(&self) -> Vec<String> {
        self.0.tasks.iter().map(|t| t.id.clone()).collect()
    }

    fn mu(&self) -> Vec<f64> {
        self.0.tasks.iter().map(|t| t.mu).collect()
    }

    fn sigma(&self) -> Vec<f64> {
        self.0.tasks.iter().map(|t| t.sigma).collect()
    }

    /// Probability that `a` is chosen over `b`.
    fn predict(&self, a: &str, b: &str) -> PyResult<f64> {
        choicemodel::predict_choice_prob(&self.0, a, b).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }
}

/// Fit one persona's utilities from JSON-lines choice records.
#[pyfunction]
#[pyo3(signature = (choices_jsonl, tasks, persona = "assistant", log_sigma_penalty = None))]
fn fit_utilities(choices_jsonl: &str, tasks: &TaskTable, persona: &str, log_sigma_penalty: Option<f64>) -> PyResult<UtilityFit> {
    let records: Vec<ChoiceRecord> = corpus::parse_jsonl(choices_jsonl).map_err(err)?;
    let mut config = FitConfig::default();
    if let Some(w) = log_sigma_penalty {
        config.log_sigma_penalty = w;
    }
    choicemodel::fit_utilities_for(&records, &tasks.0, &config, persona)
        .map(UtilityFit)
        .map_err(err)
}

#[pyclass(frozen, module = "prefvec_py")]
struct ActivationMatrix(activationstore::ActivationMatrix);

#[pymethods]
impl ActivationMatrix {
    #[staticmethod]
    #[pyo3(signature = (task_ids, rows, persona = "assistant", layer = 0, position = "end_of_turn", model_id = "external"))]
    fn from_rows(task_ids: Vec<String>, rows: Vec<Vec<f64>>, persona: &str, layer: usize, position: &str, model_id: &str) -> PyResult<Self> {
        activationstore::ActivationMatrix::from_rows(model_id, persona, layer, self::position(position)?, task_ids, &rows)
            .map(ActivationMatrix)
            .map_err(err)
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        activationstore::read_matrix(path.as_ref()).map(ActivationMatrix).map_err(err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        activationstore::write_matrix(&self.0, path.as_ref()).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.n(), self.0.d())
    }

    #[getter]
    fn layer(&self) -> usize {
        self.0.layer()
    }

    #[getter]
    fn persona(&self) -> String {
        self.0.persona().to_string()
    }

    fn task_ids(&self) -> Vec<String> {
        self.0.task_ids().to_vec()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.rows_f64()
    }
}

#[pyclass(frozen, module = "prefvec_py")]
struct Probe(probekit::Probe);

#[pymethods]
impl Probe {
    /// Ridge probe with a stratified train/validation/test split; returns
    /// the probe and the held-out Pearson r.
    #[staticmethod]
    #[pyo3(signature = (x, y, tasks, validation = 0.2, test = 0.2, seed = 0))]
    fn train(x: &ActivationMatrix, y: Vec<f64>, tasks: &TaskTable, validation: f64, test: f64, seed: u64) -> PyResult<(Probe, f64)> {
        let fractions = [
            (Split::Train, 1.0 - validation - test),
            (Split::Validation, validation),
            (Split::Test, test),
        ];
        let split = corpus::stratified_split(&tasks.0, &fractions, seed).map_err(err)?;
        let opts = ProbeOptions {
            seed,
            ..ProbeOptions::default()
        };
        let probe = probekit::train_ridge(&x.0, &y, &split, &opts).map_err(err)?;
        let r = probekit::evaluate_split(&probe, &x.0, &y, &split, Split::Test, seed)
            .map_err(err)?
            .pearson
            .r;
        Ok((Probe(probe), r))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        probekit::Probe::from_json(text).map(Probe).map_err(err)
    }

    fn predict(&self, x: &ActivationMatrix) -> PyResult<Vec<f64>> {
        self.0.predict(&x.0).map_err(err)
    }

    fn direction(&self) -> PyResult<Vec<f64>> {
        self.0.direction().map_err(err)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }
}

#[pyclass(frozen, module = "prefvec_py")]
struct SimBackend(simbackend::SimBackend);

#[pymethods]
impl SimBackend {
    /// `config_json` holds any subset of backend fields; the rest default.
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let config: BackendConfig = match config_json {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => BackendConfig::default(),
        };
        simbackend::SimBackend::build(config, seed).map(SimBackend).map_err(err)
    }

    fn utilities(&self, tasks: &TaskTable, persona: &str) -> PyResult<Vec<f64>> {
        self.0.utilities(&tasks.0, persona).and_then(|u| u.aligned(&tasks.0.ids())).map_err(err)
    }

    #[pyo3(signature = (tasks, persona = "assistant", layer = 3, position = "end_of_turn"))]
    fn export_activations(&self, tasks: &TaskTable, persona: &str, layer: usize, position: &str) -> PyResult<ActivationMatrix> {
        self.0
            .export_activations(&tasks.0, persona, layer, self::position(position)?)
            .map(ActivationMatrix)
            .map_err(err)
    }

    fn mean_planted(&self) -> Vec<f64> {
        self.0.mean_planted()
    }

    /// Choice records as JSON lines for a fresh pair schedule.
    #[pyo3(signature = (tasks, pairs_per_task = 10, trials = 5, seed = 0))]
    fn elicit_choices(&self, tasks: &TaskTable, pairs_per_task: usize, trials: usize, seed: u64) -> PyResult<String> {
        let schedule = corpus::pair_schedule(&tasks.0, pairs_per_task, true, trials, seed).map_err(err)?;
        let personas: Vec<String> = self.0.config().personas.iter().map(|p| p.name.clone()).collect();
        let mut out = String::new();
        for p in personas {
            for r in self.0.elicit_choices(&schedule.for_persona(&p), &tasks.0, seed).map_err(err)? {
                out.push_str(&serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))?);
                out.push('\n');
            }
        }
        Ok(out)
    }
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    statlab::pearson(&x, &y).map(|c| c.r).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (successes, trials, level = 0.95))]
fn wilson_ci(successes: usize, trials: usize, level: f64) -> PyResult<(f64, f64)> {
    statlab::wilson_ci(successes, trials, level).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (r, n, level = 0.95))]
fn fisher_ci(r: f64, n: usize, level: f64) -> Option<(f64, f64)> {
    statlab::fisher_ci(r, n, level)
}

#[pyfunction]
fn cohens_d(positive: Vec<f64>, negative: Vec<f64>) -> PyResult<f64> {
    statlab::cohens_d(&positive, &negative).map(|e| e.d).map_err(err)
}

/// Run the command-line tool in-process; returns the exit status.
#[pyfunction]
fn run_cli(argv: Vec<String>) -> i32 {
    match prefvec::cli::Args::try_parse_from(std::iter::once("prefvec".to_string()).chain(argv)) {
        Ok(args) => prefvec::cli::main_with(args),
        Err(e) => {
            let _ = e.print();
            2
        }
    }
}

#[pymodule]
fn prefvec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TaskTable>()?;
    m.add_class::<UtilityFit>()?;
    m.add_class::<ActivationMatrix>()?;
    m.add_class::<Probe>()?;
    m.add_class::<SimBackend>()?;
    m.add_function(wrap_pyfunction!(fit_utilities, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(wilson_ci, m)?)?;
    m.add_function(wrap_pyfunction!(fisher_ci, m)?)?;
    m.add_function(wrap_pyfunction!(cohens_d, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
