//! Python bindings for the confidence-filtered relevance toolkit.
//!
//! Exposes the dense tensor type, the transformer classifier, the Gaussian
//! discriminant, the rollout primitives, the analysis metrics, and the
//! end-to-end pipeline. Everything returns plain Python data where possible;
//! heavyweight state (model parameters, fitted discriminants, datasets)
//! lives behind small wrapper classes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use pyo3::IntoPyObjectExt;

use cfr_core::analysis::{self, ClassRelevanceProfile, ClassStat, ExternalIndex};
use cfr_core::data::{
    generate_synthetic, read_dataset, write_dataset, SyntheticDataset, SyntheticSpec,
};
use cfr_core::ddu::{self, GaussianDiscriminant};
use cfr_core::model::{
    accuracy, forward, load_model, save_model, train, ModelConfig, ModelParams, TrainHyper,
};
use cfr_core::pipeline::{self, PipelineConfig};
use cfr_core::rollout::{self, BlockFusion};
use cfr_core::tensor::softmax_vec;
use cfr_core::{Error, Tensor as CoreTensor};

fn to_py_err(e: Error) -> PyErr {
    match &e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPyResult<T> {
    fn into_py(self) -> PyResult<T>;
}

impl<T> IntoPyResult<T> for Result<T, Error> {
    fn into_py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: CoreTensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(dims: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: CoreTensor::new(dims, values).into_py()?,
        })
    }

    #[staticmethod]
    fn zeros(dims: Vec<usize>) -> Self {
        PyTensor {
            inner: CoreTensor::zeros(dims),
        }
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: CoreTensor::from_rows(&rows).into_py()?,
        })
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn at(&self, i: usize, j: usize) -> PyResult<f64> {
        if !self.inner.is_matrix() {
            return Err(PyValueError::new_err(format!(
                "at() needs a matrix, tensor has dims {:?}",
                self.inner.dims()
            )));
        }
        if i >= self.inner.rows() || j >= self.inner.cols() {
            return Err(PyIndexError::new_err(format!(
                "({i}, {j}) out of range for a {}x{} matrix",
                self.inner.rows(),
                self.inner.cols()
            )));
        }
        Ok(self.inner.at(i, j))
    }

    fn row(&self, i: usize) -> PyResult<Vec<f64>> {
        if !self.inner.is_matrix() || i >= self.inner.rows() {
            return Err(PyIndexError::new_err(format!(
                "row {i} out of range for dims {:?}",
                self.inner.dims()
            )));
        }
        Ok(self.inner.row(i).to_vec())
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(dims={:?})", self.inner.dims())
    }
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (image_size=32, patch_size=8, num_channels=1, num_blocks=2,
                        num_heads=2, embed_dim=16, mlp_dim=32, num_classes=2, seed=1))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_size: usize,
        patch_size: usize,
        num_channels: usize,
        num_blocks: usize,
        num_heads: usize,
        embed_dim: usize,
        mlp_dim: usize,
        num_classes: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = ModelConfig {
            image_size,
            patch_size,
            num_channels,
            num_blocks,
            num_heads,
            embed_dim,
            mlp_dim,
            num_classes,
            seed,
        };
        inner.validate().into_py()?;
        Ok(PyModelConfig { inner })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size
    }

    #[getter]
    fn num_channels(&self) -> usize {
        self.inner.num_channels
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.num_heads
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }

    #[getter]
    fn mlp_dim(&self) -> usize {
        self.inner.mlp_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(image_size={}, patch_size={}, num_blocks={}, num_heads={}, \
             embed_dim={}, mlp_dim={}, num_classes={}, seed={})",
            c.image_size,
            c.patch_size,
            c.num_blocks,
            c.num_heads,
            c.embed_dim,
            c.mlp_dim,
            c.num_classes,
            c.seed
        )
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: SyntheticDataset,
}

#[pymethods]
impl PyDataset {
    /// Render a seeded synthetic dataset with one planted land-cover class.
    #[staticmethod]
    #[pyo3(signature = (num_images=240, image_size=32, num_land_classes=4, planted_class=0,
                        texture_amplitude=0.25, noise_sigma=0.02, seed=42))]
    fn generate(
        num_images: usize,
        image_size: usize,
        num_land_classes: usize,
        planted_class: u16,
        texture_amplitude: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            num_images,
            image_size,
            num_land_classes,
            planted_class_id: planted_class,
            texture_amplitude,
            noise_sigma,
            seed,
        };
        Ok(PyDataset {
            inner: generate_synthetic(&spec).into_py()?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: read_dataset(&dir).into_py()?,
        })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        write_dataset(&dir, &self.inner).into_py()
    }

    fn __len__(&self) -> usize {
        self.inner.samples.len()
    }

    fn sample_id(&self, i: usize) -> PyResult<String> {
        self.sample(i).map(|s| s.id.clone())
    }

    fn image(&self, i: usize) -> PyResult<PyTensor> {
        self.sample(i).map(|s| PyTensor {
            inner: s.image.clone(),
        })
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.sample(i).map(|s| s.label)
    }

    /// Land-cover raster for sample `i` as (width, height, row-major ids).
    fn raster(&self, i: usize) -> PyResult<(u32, u32, Vec<u16>)> {
        self.sample(i)
            .map(|s| (s.raster.width, s.raster.height, s.raster.ids.clone()))
    }

    fn class_names(&self) -> BTreeMap<u16, String> {
        self.inner.class_names.clone()
    }

    fn images(&self) -> Vec<PyTensor> {
        self.inner
            .samples
            .iter()
            .map(|s| PyTensor {
                inner: s.image.clone(),
            })
            .collect()
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.samples.iter().map(|s| s.label).collect()
    }
}

impl PyDataset {
    fn sample(&self, i: usize) -> PyResult<&cfr_core::data::LoadedSample> {
        self.inner.samples.get(i).ok_or_else(|| {
            PyIndexError::new_err(format!(
                "sample {i} out of range for {} samples",
                self.inner.samples.len()
            ))
        })
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
    config: ModelConfig,
}

#[pymethods]
impl PyModel {
    /// Fresh seeded parameters, untrained.
    #[new]
    fn new(config: PyModelConfig) -> PyResult<Self> {
        let params = ModelParams::init(&config.inner).into_py()?;
        Ok(PyModel {
            params,
            config: config.inner,
        })
    }

    /// Mini-batch gradient descent; returns the model and per-step losses.
    #[staticmethod]
    #[pyo3(signature = (images, labels, config, epochs=50, batch_size=32,
                        learning_rate=0.05, seed=0))]
    fn train(
        images: Vec<PyTensor>,
        labels: Vec<usize>,
        config: PyModelConfig,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<(Self, Vec<f64>)> {
        let images: Vec<CoreTensor> = images.into_iter().map(|t| t.inner).collect();
        let hyper = TrainHyper {
            epochs,
            batch_size,
            learning_rate,
            seed,
        };
        let outcome = train(&images, &labels, &config.inner, &hyper).into_py()?;
        Ok((
            PyModel {
                params: outcome.params,
                config: config.inner,
            },
            outcome.losses,
        ))
    }

    /// Predicted class and softmax probabilities for one image.
    fn predict(&self, image: &PyTensor) -> PyResult<(usize, Vec<f64>)> {
        let (logits, _) = forward(&image.inner, &self.params, &self.config).into_py()?;
        let pred = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok((pred, softmax_vec(&logits)))
    }

    /// CLS embedding after the final layer norm.
    fn embed(&self, image: &PyTensor) -> PyResult<Vec<f64>> {
        let (_, cache) = forward(&image.inner, &self.params, &self.config).into_py()?;
        Ok(cache.cls_embedding)
    }

    /// Gradient- and relevance-weighted attention rollout for one image.
    ///
    /// Returns the explained class and the raw pixel map as an
    /// image_size x image_size tensor. With `target` unset the predicted
    /// class is explained.
    #[pyo3(signature = (image, target=None, epsilon=1e-6))]
    fn explain(
        &self,
        image: &PyTensor,
        target: Option<usize>,
        epsilon: f64,
    ) -> PyResult<(usize, PyTensor)> {
        let (explained, map) =
            pipeline::explain_sample(&image.inner, &self.params, &self.config, target, epsilon)
                .into_py()?;
        Ok((explained, PyTensor { inner: map.values }))
    }

    fn accuracy(&self, images: Vec<PyTensor>, labels: Vec<usize>) -> PyResult<f64> {
        let images: Vec<CoreTensor> = images.into_iter().map(|t| t.inner).collect();
        accuracy(&images, &labels, &self.params, &self.config).into_py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.params, &self.config).into_py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = load_model(&path).into_py()?;
        Ok(PyModel { params, config })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.config.clone(),
        }
    }

    /// Order-sensitive hash of every parameter tensor; equal hashes mean
    /// bitwise-equal parameters.
    fn params_hash(&self) -> u64 {
        self.params.hash64()
    }
}

#[pyclass(name = "Discriminant")]
struct PyDiscriminant {
    inner: GaussianDiscriminant,
}

#[pymethods]
impl PyDiscriminant {
    /// Fit per-class means and a shared ridged covariance on embedding rows.
    #[staticmethod]
    #[pyo3(signature = (embeddings, labels, ridge_lambda=1e-3))]
    fn fit(embeddings: &PyTensor, labels: Vec<usize>, ridge_lambda: f64) -> PyResult<Self> {
        Ok(PyDiscriminant {
            inner: ddu::fit(&embeddings.inner, &labels, ridge_lambda).into_py()?,
        })
    }

    /// Mahalanobis distance from `z` to the given class mean.
    fn mahalanobis(&self, z: Vec<f64>, class_id: usize) -> PyResult<f64> {
        ddu::mahalanobis(&self.inner, &z, class_id).into_py()
    }

    /// Minimum class distance and the class attaining it.
    fn uncertainty(&self, z: Vec<f64>) -> PyResult<(f64, usize)> {
        let score = ddu::uncertainty(&self.inner, "", &z).into_py()?;
        Ok((score.u, score.nearest_class))
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn ridge_lambda(&self) -> f64 {
        self.inner.ridge_lambda
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        ddu::save_discriminant(&path, &self.inner).into_py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDiscriminant {
            inner: ddu::load_discriminant(&path).into_py()?,
        })
    }
}

/// Seeded three-way split; returns disjoint (train, val, test) index lists.
#[pyfunction]
#[pyo3(signature = (n, train_frac=0.8, val_frac=0.1, test_frac=0.1, seed=7))]
fn split(
    n: usize,
    train_frac: f64,
    val_frac: f64,
    test_frac: f64,
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    cfr_core::data::split(n, (train_frac, val_frac, test_frac), seed).into_py()
}

/// Fuse one block: I + mean over heads of max(grad * rel, 0).
#[pyfunction]
fn fuse_block(
    attention: Vec<PyTensor>,
    gradients: Vec<PyTensor>,
    relevance: Vec<PyTensor>,
) -> PyResult<PyTensor> {
    let a: Vec<CoreTensor> = attention.into_iter().map(|t| t.inner).collect();
    let g: Vec<CoreTensor> = gradients.into_iter().map(|t| t.inner).collect();
    let r: Vec<CoreTensor> = relevance.into_iter().map(|t| t.inner).collect();
    let fused = rollout::fuse_block(&a, &g, &r).into_py()?;
    Ok(PyTensor { inner: fused.abar })
}

/// Left-to-right product of fused per-block matrices.
#[pyfunction]
fn rollout_chain(fused: Vec<PyTensor>) -> PyResult<PyTensor> {
    let blocks: Vec<BlockFusion> = fused
        .into_iter()
        .map(|t| BlockFusion { abar: t.inner })
        .collect();
    Ok(PyTensor {
        inner: rollout::rollout_chain(&blocks).into_py()?,
    })
}

/// Expected calibration error over equal-width confidence bins.
#[pyfunction]
#[pyo3(signature = (probabilities, labels, bins=10))]
fn ece(probabilities: &PyTensor, labels: Vec<usize>, bins: usize) -> PyResult<f64> {
    ddu::ece(&probabilities.inner, &labels, bins).into_py()
}

fn profile_of(means: &[f64]) -> ClassRelevanceProfile {
    let per_class = means
        .iter()
        .enumerate()
        .map(|(c, &m)| {
            (
                c as u16,
                ClassStat {
                    total_relevance: m,
                    total_pixels: 1,
                    mean_relevance: m,
                },
            )
        })
        .collect();
    ClassRelevanceProfile {
        threshold: 100.0,
        per_class,
    }
}

/// Shannon entropy (nats) of per-class mean relevances, normalized to a
/// distribution.
#[pyfunction]
fn relevance_entropy(means: Vec<f64>) -> PyResult<f64> {
    analysis::relevance_entropy(&profile_of(&means)).into_py()
}

/// Pearson correlation between per-class relevances and an external index,
/// optionally on ranks.
#[pyfunction]
#[pyo3(signature = (relevances, index, use_ranks=false))]
fn pearson(relevances: Vec<f64>, index: Vec<f64>, use_ranks: bool) -> PyResult<f64> {
    if relevances.len() != index.len() {
        return Err(PyValueError::new_err(format!(
            "{} relevances but {} index values",
            relevances.len(),
            index.len()
        )));
    }
    let values: BTreeMap<u16, f64> = index
        .into_iter()
        .enumerate()
        .map(|(c, v)| (c as u16, v))
        .collect();
    let idx = ExternalIndex::new("index", values).into_py()?;
    analysis::pearson(&profile_of(&relevances), &idx, use_ranks).into_py()
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyResult<Py<PyAny>> {
    use serde_json::Value;
    match v {
        Value::Null => Ok(py.None()),
        Value::Bool(b) => b.into_py_any(py),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_py_any(py)
            } else if let Some(u) = n.as_u64() {
                u.into_py_any(py)
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_py_any(py)
            }
        }
        Value::String(s) => s.into_py_any(py),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.into_py_any(py)
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, val) in map {
                dict.set_item(k, json_to_py(py, val)?)?;
            }
            dict.into_py_any(py)
        }
    }
}

/// Run the whole pipeline on a dataset directory and return the report as a
/// dict. Artifacts (model, discriminant, scores, maps, report) land in
/// `output_dir`.
#[pyfunction]
#[pyo3(signature = (dataset_dir, output_dir, config=None, epochs=60, batch_size=16,
                    learning_rate=0.1, train_seed=0, ridge_lambda=1e-3, epsilon=1e-6,
                    thresholds=None, train_frac=0.8, val_frac=0.1, test_frac=0.1,
                    split_seed=7, ece_bins=10, external_index=None, use_ranks=false,
                    threads=1, heatmaps=false))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    py: Python<'_>,
    dataset_dir: PathBuf,
    output_dir: PathBuf,
    config: Option<PyModelConfig>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    train_seed: u64,
    ridge_lambda: f64,
    epsilon: f64,
    thresholds: Option<Vec<f64>>,
    train_frac: f64,
    val_frac: f64,
    test_frac: f64,
    split_seed: u64,
    ece_bins: usize,
    external_index: Option<PathBuf>,
    use_ranks: bool,
    threads: usize,
    heatmaps: bool,
) -> PyResult<Py<PyAny>> {
    let model = config.map(|c| c.inner).unwrap_or(ModelConfig {
        image_size: 32,
        patch_size: 8,
        num_channels: 1,
        num_blocks: 2,
        num_heads: 2,
        embed_dim: 16,
        mlp_dim: 32,
        num_classes: 2,
        seed: 1,
    });
    let mut cfg = PipelineConfig::new(&dataset_dir, &output_dir, model);
    cfg.hyper = TrainHyper {
        epochs,
        batch_size,
        learning_rate,
        seed: train_seed,
    };
    cfg.ridge_lambda = ridge_lambda;
    cfg.epsilon = epsilon;
    if let Some(t) = thresholds {
        cfg.thresholds = t;
    }
    cfg.fractions = (train_frac, val_frac, test_frac);
    cfg.split_seed = split_seed;
    cfg.ece_bins = ece_bins;
    cfg.external_index = external_index;
    cfg.use_ranks = use_ranks;
    cfg.threads = threads;
    cfg.write_heatmaps = heatmaps;
    let report = py.detach(|| pipeline::run_pipeline(&cfg)).into_py()?;
    let value = serde_json::to_value(&report)
        .map_err(|e| PyValueError::new_err(format!("report not serializable: {e}")))?;
    json_to_py(py, &value)
}

/// Convenience wrapper over `Dataset.generate(...).write(dir)`.
#[pyfunction]
#[pyo3(signature = (dir, num_images=240, image_size=32, num_land_classes=4, planted_class=0,
                    texture_amplitude=0.25, noise_sigma=0.02, seed=42))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    dir: PathBuf,
    num_images: usize,
    image_size: usize,
    num_land_classes: usize,
    planted_class: u16,
    texture_amplitude: f64,
    noise_sigma: f64,
    seed: u64,
) -> PyResult<usize> {
    let spec = SyntheticSpec {
        num_images,
        image_size,
        num_land_classes,
        planted_class_id: planted_class,
        texture_amplitude,
        noise_sigma,
        seed,
    };
    let dataset = generate_synthetic(&spec).into_py()?;
    write_dataset(Path::new(&dir), &dataset).into_py()?;
    Ok(dataset.samples.len())
}

#[pymodule]
fn cfr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDiscriminant>()?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_block, m)?)?;
    m.add_function(wrap_pyfunction!(rollout_chain, m)?)?;
    m.add_function(wrap_pyfunction!(ece, m)?)?;
    m.add_function(wrap_pyfunction!(relevance_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    Ok(())
}
