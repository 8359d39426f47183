//! Python bindings: datasets, tasks, partitioned networks, unlearning
//! methods, evaluation, and checkpoints.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rem_core::bench;
use rem_core::checkpoint;
use rem_core::cscore::{estimate_cscore, CScoreConfig};
use rem_core::masking::MaskTable;
use rem_core::net::{self, ForwardMode, PartitionedNetwork};
use rem_core::opt::{OptimizerConfig, OptimizerKind};
use rem_core::tasks::{self, LabeledDataset, Regularity, TaskInstance};
use rem_core::tensor::Tensor;
use rem_core::train::{train_supervised, TrainConfig};
use rem_core::unlearn::{run_method, Method, MethodConfig, UnlearnContext};

fn py_err(e: rem_core::Error) -> PyErr {
    match &e {
        rem_core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// A labeled dataset with clean and effective (possibly corrupted) labels.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: LabeledDataset,
}

#[pymethods]
impl Dataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn clean_labels(&self) -> Vec<u32> {
        self.inner.clean_labels.clone()
    }

    #[getter]
    fn effective_labels(&self) -> Vec<u32> {
        self.inner.effective_labels.clone()
    }

    #[getter]
    fn corrupted_count(&self) -> usize {
        self.inner.corrupted_count()
    }

    /// Row-major pixel values, one list per example.
    fn inputs(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|i| self.inner.inputs.row(i).to_vec()).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({} examples, {} classes, {} corrupted)",
            self.inner.len(),
            self.inner.num_classes,
            self.inner.corrupted_count()
        )
    }
}

/// One unlearning task: corrupted training data plus the discovered
/// forget set.
#[pyclass]
struct Task {
    inner: TaskInstance,
}

#[pymethods]
impl Task {
    #[getter]
    fn discovery_rate(&self) -> f64 {
        self.inner.discovery_rate
    }

    #[getter]
    fn regularity(&self) -> String {
        self.inner.regularity.as_str().to_string()
    }

    #[getter]
    fn forget_ids(&self) -> Vec<u64> {
        self.inner.forget_ids.clone()
    }

    #[getter]
    fn undiscovered_ids(&self) -> Vec<u64> {
        self.inner.undiscovered_ids.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Task({}, discovery {:.2}, |D_f|={})",
            self.inner.regularity.as_str(),
            self.inner.discovery_rate,
            self.inner.forget_ids.len()
        )
    }
}

/// A feedforward network with a generalization/memorization unit split.
#[pyclass]
struct Network {
    inner: PartitionedNetwork,
    masks: Option<MaskTable>,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (input_dim, profile, num_classes, capacity_fraction=1.0, mem_units=None, seed=0))]
    fn new(
        input_dim: usize,
        profile: Vec<usize>,
        num_classes: usize,
        capacity_fraction: f64,
        mem_units: Option<Vec<usize>>,
        seed: u64,
    ) -> PyResult<Self> {
        let mem = mem_units.unwrap_or_else(|| vec![0; profile.len()]);
        let inner = net::init_network(input_dim, &profile, capacity_fraction, &mem, num_classes, seed)
            .map_err(py_err)?;
        Ok(Network { inner, masks: None })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn mem_shape(&self) -> Vec<usize> {
        self.inner.mem_shape()
    }

    #[getter]
    fn has_mem(&self) -> bool {
        self.inner.has_mem()
    }

    /// Supervised training on the effective labels. With `etd_density` set,
    /// example-tied dropout masks are assigned and used.
    #[pyo3(signature = (ds, epochs=100, batch_size=128, learning_rate=0.05, momentum=0.9, etd_density=None, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        ds: &Dataset,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        momentum: f64,
        etd_density: Option<f64>,
        seed: u64,
    ) -> PyResult<()> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            opt: OptimizerConfig {
                learning_rate,
                kind: OptimizerKind::Sgd { momentum },
            },
        };
        if let Some(density) = etd_density {
            let table = rem_core::masking::assign_etd_masks(
                &ds.inner.example_ids,
                &self.inner.mem_shape(),
                density,
                rem_core::rng::derive(seed, &[rem_core::rng::tag("etd-masks")]),
            )
            .map_err(py_err)?;
            train_supervised(&mut self.inner, &ds.inner, &cfg, Some(&table), seed).map_err(py_err)?;
            self.masks = Some(table);
        } else {
            train_supervised(&mut self.inner, &ds.inner, &cfg, self.masks.as_ref(), seed)
                .map_err(py_err)?;
        }
        Ok(())
    }

    /// Predicted classes; inference always drops mem units.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<u32>> {
        let n = inputs.len();
        let d = self.inner.input_dim;
        let mut data = Vec::with_capacity(n * d);
        for row in &inputs {
            if row.len() != d {
                return Err(PyValueError::new_err(format!(
                    "expected rows of {d} values, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        let batch = Tensor::new(vec![n, d], data).map_err(py_err)?;
        net::predict(&self.inner, &batch, ForwardMode::GenOnly).map_err(py_err)
    }

    /// Accuracy against the dataset's effective labels (mem dropped).
    fn accuracy(&self, ds: &Dataset) -> PyResult<f64> {
        net::accuracy(
            &self.inner,
            &ds.inner.inputs,
            &ds.inner.effective_labels,
            ForwardMode::GenOnly,
        )
        .map_err(py_err)
    }

    /// Copy with the memorization partition removed.
    fn drop_mem(&self) -> Network {
        Network {
            inner: net::excise_memorization(&self.inner),
            masks: None,
        }
    }

    #[pyo3(signature = (path, master_seed=0))]
    fn save(&self, path: PathBuf, master_seed: u64) -> PyResult<()> {
        checkpoint::save_checkpoint(&path, &self.inner, self.masks.as_ref(), master_seed).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Network> {
        let ck = checkpoint::load_checkpoint(&path).map_err(py_err)?;
        Ok(Network {
            inner: ck.net,
            masks: ck.masks,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Network({} params, mem {:?})",
            self.inner.param_count(),
            self.inner.mem_shape()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (num_classes=10, per_class_train=500, per_class_test=100, side=8, noise_sigma=0.3, seed=0))]
fn gen_synthetic(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    side: usize,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<(Dataset, Dataset)> {
    let (train, test) = tasks::gen_synthetic(num_classes, per_class_train, per_class_test, side, noise_sigma, seed)
        .map_err(py_err)?;
    Ok((Dataset { inner: train }, Dataset { inner: test }))
}

/// Corrupt `n` labels: "low" random labels, "medium" interclass swaps,
/// "high" a poison trigger.
#[pyfunction]
#[pyo3(signature = (ds, regularity, n_corrupt, seed=0))]
fn corrupt(ds: &Dataset, regularity: &str, n_corrupt: usize, seed: u64) -> PyResult<Dataset> {
    let reg: Regularity = regularity.parse().map_err(py_err)?;
    let kind = match reg {
        Regularity::Low => tasks::CorruptionKind::RandomLabel,
        Regularity::Medium => tasks::CorruptionKind::Interclass { class_a: 0, class_b: 1 },
        Regularity::High => tasks::CorruptionKind::Poison {
            target_class: 0,
            trigger: tasks::TriggerSpec::default(),
        },
    };
    let spec = tasks::CorruptionSpec { kind, n_corrupt, seed };
    Ok(Dataset {
        inner: tasks::corrupt(&ds.inner, &spec).map_err(py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (train, test, regularity, discovery_rate, seed=0))]
fn split_discovery(
    train: &Dataset,
    test: &Dataset,
    regularity: &str,
    discovery_rate: f64,
    seed: u64,
) -> PyResult<Task> {
    let reg: Regularity = regularity.parse().map_err(py_err)?;
    let inner = tasks::split_discovery(train.inner.clone(), test.inner.clone(), reg, discovery_rate, seed)
        .map_err(py_err)?;
    Ok(Task { inner })
}

/// Run one unlearning method; returns the unlearned network and the stop
/// reason. Methods: rem, rem_ideal, npo, ascent, retrain, finetune, badt,
/// scrub, etd_drop.
#[pyfunction]
#[pyo3(signature = (method, network, task, seed=0, gamma=0.2, max_ul_epochs=10, ul_learning_rate=0.01))]
fn unlearn(
    method: &str,
    network: &Network,
    task: &Task,
    seed: u64,
    gamma: f64,
    max_ul_epochs: usize,
    ul_learning_rate: f64,
) -> PyResult<(Network, String)> {
    let m: Method = method.parse().map_err(py_err)?;
    let cfg = MethodConfig {
        gamma,
        max_ul_epochs,
        ul_learning_rate,
        ..MethodConfig::default()
    };
    let ctx = UnlearnContext {
        original_net: &network.inner,
        task: &task.inner,
        mask_table: network.masks.as_ref(),
        cfg,
        train_recipe: TrainConfig::default(),
        seed,
    };
    let out = run_method(m, &ctx).map_err(py_err)?;
    Ok((
        Network { inner: out.net, masks: None },
        out.stop.as_str().to_string(),
    ))
}

/// Utility / healed metrics of a mem-free network on a task.
#[pyfunction]
fn evaluate(network: &Network, task: &Task) -> PyResult<HashMap<String, f64>> {
    let m = bench::evaluate(&network.inner, &task.inner).map_err(py_err)?;
    let mut out = HashMap::from([
        ("utility".to_string(), m.utility),
        ("healed_forget".to_string(), m.healed_forget),
        ("healed_all".to_string(), m.healed_all),
        ("product".to_string(), m.product),
    ]);
    if let Some(a) = m.attack_rate {
        out.insert("attack_rate".to_string(), a);
    }
    Ok(out)
}

/// Consistency-score estimate for one example of a pool.
#[pyfunction]
#[pyo3(signature = (pool, target_index, seed=0))]
fn cscore(pool: &Dataset, target_index: usize, seed: u64) -> PyResult<f64> {
    let cfg = CScoreConfig::for_pool(pool.inner.len(), seed);
    estimate_cscore(&pool.inner, target_index, &cfg).map_err(py_err)
}

#[pymodule]
fn rem_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Task>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(split_discovery, m)?)?;
    m.add_function(wrap_pyfunction!(unlearn, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cscore, m)?)?;
    m.add("METHODS", Method::ALL.map(|m| m.as_str()).to_vec())?;
    Ok(())
}
