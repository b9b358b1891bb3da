//! Python bindings: tensors with autodiff, the losses, image metrics, model
//! inference from a checkpoint, and the dataset/train/eval pipeline.

use std::path::PathBuf;

use cadnet::config::RunConfig;
use cadnet::data::{self, INDEX_FILE};
use cadnet::eval::{self, EvalOptions};
use cadnet::model::CadNet;
use cadnet::train::{self as trainer, Checkpoint, CHECKPOINT_EXTENSION};
use cadnet::{crgan, reid};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: cadnet::Error) -> PyErr {
    match e {
        cadnet::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Dense f32 tensor that records operations for reverse-mode autodiff.
#[pyclass(name = "Tensor", module = "cadnet_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(cadnet::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn new(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Self> {
        let t = cadnet::Tensor::from_vec(data, &shape).map_err(to_py)?;
        Ok(Self(if requires_grad { t.requires_grad() } else { t }))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f32> {
        self.0.to_vec()
    }

    fn item(&self) -> PyResult<f32> {
        if self.0.numel() != 1 {
            return Err(PyValueError::new_err(format!("item() needs one element, shape is {:?}", self.0.shape())));
        }
        Ok(self.0.item())
    }

    /// Accumulated gradient, or None before backward().
    #[getter]
    fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad()
    }

    fn backward(&self) -> PyResult<()> {
        self.0.backward().map_err(to_py)
    }

    fn zero_grad(&self) {
        self.0.zero_grad()
    }

    fn detach(&self) -> Self {
        Self(self.0.detach())
    }

    fn __add__(&self, other: &Self) -> PyResult<Self> {
        self.0.add(&other.0).map(Self).map_err(to_py)
    }

    fn __sub__(&self, other: &Self) -> PyResult<Self> {
        self.0.sub(&other.0).map(Self).map_err(to_py)
    }

    fn __mul__(&self, other: &Self) -> PyResult<Self> {
        self.0.mul(&other.0).map(Self).map_err(to_py)
    }

    fn __matmul__(&self, other: &Self) -> PyResult<Self> {
        self.0.matmul(&other.0).map(Self).map_err(to_py)
    }

    fn __neg__(&self) -> Self {
        Self(self.0.neg())
    }

    fn scale(&self, s: f32) -> Self {
        Self(self.0.scale(s))
    }

    fn sum(&self) -> Self {
        Self(self.0.sum())
    }

    fn mean(&self) -> Self {
        Self(self.0.mean())
    }

    fn relu(&self) -> Self {
        Self(self.0.relu())
    }

    #[pyo3(signature = (slope = 0.2))]
    fn leaky_relu(&self, slope: f32) -> Self {
        Self(self.0.leaky_relu(slope))
    }

    fn sigmoid(&self) -> Self {
        Self(self.0.sigmoid())
    }

    fn log(&self) -> Self {
        Self(self.0.log())
    }

    fn softmax(&self) -> PyResult<Self> {
        self.0.softmax().map(Self).map_err(to_py)
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.reshape(&shape).map(Self).map_err(to_py)
    }

    #[pyo3(signature = (weight, bias, stride = 1, pad = 1))]
    fn conv2d(&self, weight: &Self, bias: &Self, stride: usize, pad: usize) -> PyResult<Self> {
        self.0.conv2d(&weight.0, &bias.0, stride, pad).map(Self).map_err(to_py)
    }

    fn global_avg_pool(&self) -> PyResult<Self> {
        self.0.global_avg_pool().map(Self).map_err(to_py)
    }

    fn bilinear_resize(&self, height: usize, width: usize) -> PyResult<Self> {
        self.0.bilinear_resize(height, width).map(Self).map_err(to_py)
    }

    fn pairwise_distances(&self) -> PyResult<Self> {
        self.0.pairwise_distances().map(Self).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, requires_grad={})", self.0.shape(), self.0.requires_grad_flag())
    }
}

/// RGB image in [0, 1], stored channel-major.
#[pyclass(name = "Image", module = "cadnet_py", skip_from_py_object)]
#[derive(Clone)]
struct PyImage(data::Image);

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        data::Image::new(height, width, data).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        data::load_png(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_png(&self.0, &path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    fn tolist(&self) -> Vec<f32> {
        self.0.data().to_vec()
    }

    /// Down-samples by `rate` and resizes back to the original size.
    fn synth_lr(&self, rate: u32) -> PyResult<Self> {
        if rate < 2 {
            return Err(PyValueError::new_err(format!("rate must be at least 2, got {rate}")));
        }
        let small = data::block_downsample(&self.0, rate as usize).map_err(to_py)?;
        data::resize_bilinear(&small, self.0.height(), self.0.width())
            .map(Self)
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.height(), self.0.width())
    }
}

/// A trained network restored from a checkpoint, for inference.
#[pyclass(name = "Model", module = "cadnet_py")]
struct PyModel {
    inner: CadNet,
    epoch: usize,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(to_py)?;
        Ok(Self {
            inner: ckpt.build_model().map_err(to_py)?,
            epoch: ckpt.epoch,
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.epoch
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// `(w, u)` per image: the pooled feature and the joint embedding.
    fn embed(&self, py: Python<'_>, images: Vec<PyRef<'_, PyImage>>) -> PyResult<Vec<(Vec<f32>, Vec<f32>)>> {
        let imgs: Vec<data::Image> = images.iter().map(|i| i.0.clone()).collect();
        py.detach(|| {
            let refs: Vec<&data::Image> = imgs.iter().collect();
            eval::embed_all(&self.inner, &refs)
        })
        .map_err(to_py)
    }

    /// Recovered HR images, one per input.
    fn recover(&self, py: Python<'_>, images: Vec<PyRef<'_, PyImage>>) -> PyResult<Vec<PyImage>> {
        let imgs: Vec<data::Image> = images.iter().map(|i| i.0.clone()).collect();
        let out = py
            .detach(|| {
                let refs: Vec<&data::Image> = imgs.iter().collect();
                eval::recover_all(&self.inner, &refs)
            })
            .map_err(to_py)?;
        Ok(out.into_iter().map(PyImage).collect())
    }
}

/// Writes a toy dataset directory and returns
/// `(train, queries, references, gallery)` counts.
#[pyfunction]
#[pyo3(signature = (out, ids, per_id, height = 32, width = 16, seed = 0))]
fn synth(out: PathBuf, ids: usize, per_id: usize, height: usize, width: usize, seed: u64) -> PyResult<(usize, usize, usize, usize)> {
    let ds = data::make_toy_dataset(&data::ToyOptions::new(ids, per_id, (height, width), seed)).map_err(to_py)?;
    data::save_dataset(&ds, &out).map_err(to_py)?;
    Ok((ds.train.len(), ds.queries.len(), ds.references.len(), ds.gallery.len()))
}

/// Trains from a config file, writes `model.cadnet` and `telemetry.csv`
/// under `out`, and returns the per-epoch total loss.
#[pyfunction]
fn train(py: Python<'_>, config: PathBuf, out: PathBuf) -> PyResult<Vec<f32>> {
    py.detach(|| -> cadnet::Result<Vec<f32>> {
        let cfg = RunConfig::from_file(&config)?;
        let dataset = cfg.data.load()?;
        let (t, rows) = trainer::train(&dataset, cfg.train)?;
        std::fs::create_dir_all(&out).map_err(|e| cadnet::Error::Io {
            path: out.clone(),
            msg: e.to_string(),
        })?;
        t.checkpoint().save(&out.join(format!("model.{CHECKPOINT_EXTENSION}")))?;
        let csv_path = out.join("telemetry.csv");
        std::fs::write(&csv_path, trainer::telemetry_csv(&rows)).map_err(|e| cadnet::Error::Io {
            path: csv_path,
            msg: e.to_string(),
        })?;
        Ok(rows.iter().map(|r| r.losses.total).collect())
    })
    .map_err(to_py)
}

/// Evaluation report as a dict (rank-1/5/10, CMC, SSIM, PSNR, per rate).
#[pyfunction]
#[pyo3(signature = (ckpt, data_dir, rates = vec![2, 3, 4, 8], trials = 10, seed = 0))]
fn evaluate(py: Python<'_>, ckpt: PathBuf, data_dir: PathBuf, rates: Vec<u32>, trials: usize, seed: u64) -> PyResult<Py<PyAny>> {
    let json = py
        .detach(|| -> cadnet::Result<String> {
            let model = Checkpoint::load(&ckpt)?.build_model()?;
            let dataset = data::load_dataset(&data_dir, INDEX_FILE)?;
            Ok(eval::evaluate(&model, &dataset, &EvalOptions { rates, trials, seed })?.to_json())
        })
        .map_err(to_py)?;
    Ok(py.import("json")?.call_method1("loads", (json,))?.unbind())
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    eval::ssim(&a.0, &b.0).map_err(to_py)
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    eval::psnr(&a.0, &b.0).map_err(to_py)
}

/// CMC curve from 1-based ranks of the true match.
#[pyfunction]
fn cmc_from_ranks(ranks: Vec<usize>, gallery_size: usize) -> Vec<f64> {
    eval::cmc_from_ranks(&ranks, gallery_size)
}

#[pyfunction]
fn batch_hard_triplet(embeddings: &PyTensor, labels: Vec<usize>, margin: f32) -> PyResult<PyTensor> {
    reid::batch_hard_triplet(&embeddings.0, &labels, margin).map(PyTensor).map_err(to_py)
}

#[pyfunction]
fn identity_loss(probs: &PyTensor, labels: Vec<usize>) -> PyResult<PyTensor> {
    reid::identity_loss(&probs.0, &labels).map(PyTensor).map_err(to_py)
}

#[pyfunction]
fn feature_disc_loss(p_hr: &PyTensor, p_lr: &PyTensor) -> PyResult<PyTensor> {
    crgan::feature_disc_loss(&p_hr.0, &p_lr.0).map(PyTensor).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (p_real, p_rec_lr, p_rec_hr, real_weight = 2.0))]
fn image_disc_loss(p_real: &PyTensor, p_rec_lr: &PyTensor, p_rec_hr: &PyTensor, real_weight: f32) -> PyResult<PyTensor> {
    crgan::image_disc_loss(&p_real.0, &p_rec_lr.0, &p_rec_hr.0, real_weight)
        .map(PyTensor)
        .map_err(to_py)
}

#[pyfunction]
fn reconstruction_loss(rec_hr: &PyTensor, hr: &PyTensor, rec_lr: &PyTensor, lr_target: &PyTensor) -> PyResult<PyTensor> {
    crgan::reconstruction_loss(&rec_hr.0, &hr.0, &rec_lr.0, &lr_target.0)
        .map(PyTensor)
        .map_err(to_py)
}

#[pymodule]
pub fn cadnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(cmc_from_ranks, m)?)?;
    m.add_function(wrap_pyfunction!(batch_hard_triplet, m)?)?;
    m.add_function(wrap_pyfunction!(identity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(feature_disc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(image_disc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruction_loss, m)?)?;
    Ok(())
}
