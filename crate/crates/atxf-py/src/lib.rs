//! Python bindings: tensors with autodiff, the ViT model, attention
//! transfer, and the analysis helpers.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use atxf::analysis;
use atxf::checkpoint::{load_checkpoint, save_checkpoint, table_of, Checkpoint, CheckpointMeta};
use atxf::tensor::{backward, ops, Tensor};
use atxf::transfer::{copy_forward, TeacherContext, TransferMode, TransferSpec};
use atxf::vit::{no_overrides, vit_forward, CaptureOptions, ViTConfig, ViTParams};
use atxf::AtxfError;

fn err(e: AtxfError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

// the autodiff graph is Rc-based and single-threaded, hence unsendable
#[pyclass(name = "Tensor", unsendable, from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(PyValueError::new_err(format!(
                "shape {shape:?} does not match {} data elements",
                data.len()
            )));
        }
        Ok(PyTensor {
            inner: Tensor::new(shape, data, requires_grad),
        })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    #[getter]
    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: ops::matmul(&self.inner, &other.inner).map_err(err)?,
        })
    }

    fn softmax(&self, axis: usize) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.softmax(axis).map_err(err)?,
        })
    }

    fn gelu(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.gelu(),
        }
    }

    fn mean(&self) -> PyTensor {
        PyTensor {
            inner: self.inner.mean_all(),
        }
    }

    /// Reverse-mode sweep from a scalar loss; gradients land in `.grad`.
    fn backward(&self) -> PyResult<()> {
        backward(&self.inner, false).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "ViTConfig", from_py_object)]
#[derive(Clone)]
struct PyViTConfig {
    inner: ViTConfig,
}

#[pymethods]
impl PyViTConfig {
    #[new]
    #[pyo3(signature = (image_size = 32, patch_size = 8, in_channels = 3, depth = 4,
                        heads = 4, dim = 48, mlp_ratio = 2.0, num_classes = 10))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_size: usize,
        patch_size: usize,
        in_channels: usize,
        depth: usize,
        heads: usize,
        dim: usize,
        mlp_ratio: f64,
        num_classes: usize,
    ) -> PyResult<Self> {
        let inner = ViTConfig {
            image_size,
            patch_size,
            in_channels,
            depth,
            heads,
            dim,
            mlp_ratio,
            num_classes,
            use_cls_token: true,
        };
        inner.validate().map_err(err)?;
        Ok(PyViTConfig { inner })
    }

    #[getter]
    fn num_tokens(&self) -> usize {
        self.inner.num_tokens()
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ViTConfig(image_size={}, patch_size={}, depth={}, heads={}, dim={}, num_classes={})",
            c.image_size, c.patch_size, c.depth, c.heads, c.dim, c.num_classes
        )
    }
}

#[pyclass(name = "Model", unsendable)]
struct PyModel {
    params: ViTParams,
}

impl PyModel {
    fn images_tensor(&self, images: Vec<f64>, batch: usize) -> PyResult<Tensor> {
        let c = &self.params.cfg;
        let expected = batch * c.in_channels * c.image_size * c.image_size;
        if images.len() != expected {
            return Err(PyValueError::new_err(format!(
                "expected {expected} pixel values for batch {batch}, got {}",
                images.len()
            )));
        }
        Ok(Tensor::constant(
            vec![batch, c.in_channels, c.image_size, c.image_size],
            images,
        ))
    }
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: PyViTConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            params: ViTParams::init(&config.inner, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(err)?;
        Ok(PyModel {
            params: ckpt.to_params().map_err(err)?,
        })
    }

    #[pyo3(signature = (path, regime = "scratch", epoch = 0, seed = 0))]
    fn save(&self, path: PathBuf, regime: &str, epoch: u64, seed: u64) -> PyResult<()> {
        let ckpt = Checkpoint {
            cfg: self.params.cfg.clone(),
            meta: CheckpointMeta {
                regime: regime.to_string(),
                epoch,
                seed,
                parent_digest: None,
            },
            params: table_of(&self.params),
            optimizer: None,
            ema: None,
        };
        save_checkpoint(&ckpt, &path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyViTConfig {
        PyViTConfig {
            inner: self.params.cfg.clone(),
        }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Logits for a flat `[B * C * S * S]` image batch.
    fn forward(&self, images: Vec<f64>, batch: usize) -> PyResult<Vec<f64>> {
        let x = self.images_tensor(images, batch)?;
        let out = vit_forward(
            &x,
            &self.params.frozen(),
            &no_overrides(&self.params.cfg),
            CaptureOptions::default(),
        )
        .map_err(err)?;
        Ok(out.logits.to_vec())
    }

    /// Attention maps actually used per layer, each `[B * H * N * N]` flat.
    fn attention_maps(&self, images: Vec<f64>, batch: usize) -> PyResult<Vec<Vec<f64>>> {
        let x = self.images_tensor(images, batch)?;
        let rec = TeacherContext::new(&self.params).record(&x).map_err(err)?;
        Ok(rec.maps)
    }

    /// Logits computed with this model's features but `teacher`'s attention
    /// maps injected (attention copy).
    fn forward_with_teacher_maps(
        &self,
        teacher: &PyModel,
        images: Vec<f64>,
        batch: usize,
    ) -> PyResult<Vec<f64>> {
        let x = self.images_tensor(images, batch)?;
        let spec = TransferSpec {
            mode: TransferMode::Copy,
            ..TransferSpec::default()
        };
        let ctx = TeacherContext::new(&teacher.params);
        let (out, _) = copy_forward(
            &self.params.frozen(),
            &ctx,
            &x,
            &spec,
            None,
            CaptureOptions::default(),
        )
        .map_err(err)?;
        Ok(out.logits.to_vec())
    }
}

/// Linear CKA between two `[b x dx]` / `[b x dy]` feature matrices.
#[pyfunction]
fn linear_cka(x: Vec<f64>, y: Vec<f64>, b: usize, dx: usize, dy: usize) -> PyResult<f64> {
    analysis::linear_cka(&x, &y, b, dx, dy).map_err(err)
}

/// Jensen-Shannon divergence between two distributions (natural log).
#[pyfunction]
fn jsd(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    analysis::jsd(&p, &q).map_err(err)
}

/// Activations transferred per example; method is "qk_sizes" or "map_size".
#[pyfunction]
fn count_activations(
    depth: usize,
    heads: usize,
    tokens: usize,
    head_dim: usize,
    method: &str,
) -> PyResult<u64> {
    let method = match method {
        "qk_sizes" => analysis::AccountingMethod::QkSizes,
        "map_size" => analysis::AccountingMethod::MapSize,
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown accounting method `{other}`"
            )))
        }
    };
    Ok(analysis::count_activations_raw(
        depth, heads, tokens, head_dim, method,
    ))
}

/// Accuracy of the averaged softmax of two prediction matrices.
#[pyfunction]
fn ensemble_eval(
    probs_a: Vec<f64>,
    probs_b: Vec<f64>,
    classes: usize,
    labels: Vec<usize>,
) -> PyResult<f64> {
    analysis::ensemble_eval(&probs_a, &probs_b, classes, &labels).map_err(err)
}

/// Soft-target cross-entropy between logits and target rows, both `[b x k]`.
#[pyfunction]
fn cross_entropy(logits: &PyTensor, targets: &PyTensor) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: ops::cross_entropy_soft(&logits.inner, &targets.inner).map_err(err)?,
    })
}

#[pymodule]
fn atxf_native(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyViTConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(linear_cka, m)?)?;
    m.add_function(wrap_pyfunction!(jsd, m)?)?;
    m.add_function(wrap_pyfunction!(count_activations, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble_eval, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    Ok(())
}
