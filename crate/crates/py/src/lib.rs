//! Python module `jdnd`: images, codecs, entropy coding, noise, training,
//! metrics and complexity counts.

use std::path::PathBuf;

use jdnd_core as core;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use core::complexity::Variant;
use core::entropy::{range_decode, range_encode, Bitstream, GaussianCdf};
use core::noise::{NoiseParams, Pair};
use core::training::TrainConfig;

create_exception!(jdnd, JdndError, PyException);
create_exception!(jdnd, HashMismatchError, JdndError);

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::HashMismatch { .. } => HashMismatchError::new_err(e.to_string()),
        core::Error::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(e.to_string())
        }
        core::Error::Config(_) | core::Error::Shape(_) | core::Error::Param(_) => PyValueError::new_err(e.to_string()),
        _ => JdndError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// RGB image, height x width x 3 floats in [0, 1], row-major.
#[pyclass(name = "Image", module = "jdnd")]
#[derive(Clone)]
pub struct PyImage {
    pub inner: core::ImageTensor,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: core::ImageTensor::new(height, width, data).py_err()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: core::ImageTensor::load(path).py_err()? })
    }

    #[staticmethod]
    #[pyo3(signature = (height, width, seed=0))]
    fn synthetic(height: usize, width: usize, seed: u64) -> Self {
        Self { inner: core::synth::synthetic_image(height, width, seed) }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py_err()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Result of encoding: the container bytes and rate figures.
#[pyclass(name = "Encoded", module = "jdnd", get_all)]
pub struct PyEncoded {
    pub data: Py<PyBytes>,
    pub bpp: f64,
    pub model_bits_y: f64,
    pub model_bits_z: f64,
}

/// A codec: config plus parameters.
#[pyclass(name = "Codec", module = "jdnd")]
pub struct PyCodec {
    pub inner: core::Codec,
}

#[pymethods]
impl PyCodec {
    /// Fresh codec from a config name (`toy`, `large`) or TOML path.
    #[new]
    #[pyo3(signature = (config="toy", seed=0, lambda_index=None))]
    fn new(config: &str, seed: u64, lambda_index: Option<usize>) -> PyResult<Self> {
        let mut cfg = core::ModelConfig::load(config).py_err()?;
        if let Some(i) = lambda_index {
            cfg = cfg.with_lambda_index(i);
            cfg.validate().py_err()?;
        }
        Ok(Self { inner: core::Codec::new(&cfg, seed).py_err()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: core::Codec::load(path).py_err()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py_err()
    }

    #[getter]
    fn lambda_index(&self) -> usize {
        self.inner.cfg.lambda_index
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.stage
    }

    #[getter]
    fn config_hash(&self) -> u64 {
        self.inner.config_hash()
    }

    fn base_hash(&self) -> PyResult<String> {
        self.inner.base_hash().py_err()
    }

    fn encode(&self, py: Python<'_>, image: &PyImage) -> PyResult<PyEncoded> {
        let enc = core::pipeline::encode_image(&self.inner, &image.inner).py_err()?;
        Ok(PyEncoded {
            data: PyBytes::new(py, &enc.bitstream.to_bytes()).unbind(),
            bpp: enc.bpp,
            model_bits_y: enc.model_bits_y,
            model_bits_z: enc.model_bits_z,
        })
    }

    /// Decodes container bytes; `mode` is `standard` or `denoise`.
    #[pyo3(signature = (data, mode="standard"))]
    fn decode(&self, data: &[u8], mode: &str) -> PyResult<PyImage> {
        let bs = Bitstream::from_bytes(data).py_err()?;
        let mode: core::DecodeMode = mode.parse().py_err()?;
        let dec = core::pipeline::decode_image(&self.inner, &bs, mode).py_err()?;
        Ok(PyImage { inner: dec.image })
    }

    /// The entropy-decoded latent, flattened.
    fn decode_latent(&self, data: &[u8]) -> PyResult<Vec<f64>> {
        let bs = Bitstream::from_bytes(data).py_err()?;
        let y = core::pipeline::decode_latent(&self.inner, &bs).py_err()?;
        core::entropy::flat_f64(&y).py_err()
    }

    /// Mean PSNR per mode over (clean, noisy) pairs.
    fn evaluate(&self, py: Python<'_>, pairs: Vec<(PyImage, PyImage)>) -> PyResult<Py<PyDict>> {
        let pairs: Vec<Pair> = pairs.into_iter().map(|(c, n)| Pair { clean: c.inner, noisy: n.inner }).collect();
        let points = core::eval::evaluate_pairs(&self.inner, &pairs).py_err()?;
        let d = PyDict::new(py);
        for mode in ["standard", "denoise"] {
            if let Some(v) = core::eval::mean_psnr(&points, mode) {
                d.set_item(mode, v)?;
            }
        }
        d.set_item("bpp", points.iter().map(|p| p.bpp).sum::<f64>() / points.len().max(1) as f64)?;
        Ok(d.unbind())
    }
}

fn train_config(name: &str, steps: Option<usize>) -> PyResult<TrainConfig> {
    let mut tc = TrainConfig::load(name).py_err()?;
    if let Some(s) = steps {
        tc.stage1_steps = s;
        tc.stage2_steps = s;
        tc.finetune_steps = s;
    }
    Ok(tc)
}

/// Stage-1 training of one rate point from scratch.
#[pyfunction]
#[pyo3(signature = (images, config="toy", train_config="toy", lambda_index=3, steps=None))]
fn train_stage1(
    py: Python<'_>,
    images: Vec<PyImage>,
    config: &str,
    train_config: &str,
    lambda_index: usize,
    steps: Option<usize>,
) -> PyResult<(PyCodec, Vec<f64>)> {
    let cfg = core::ModelConfig::load(config).py_err()?.with_lambda_index(lambda_index);
    let tc = self::train_config(train_config, steps)?;
    let images: Vec<core::ImageTensor> = images.into_iter().map(|i| i.inner).collect();
    let out = py.allow_threads(|| core::training::train_stage1(&cfg, &tc, &images, None)).py_err()?;
    Ok((PyCodec { inner: out.codec }, out.records.iter().map(|r| r.loss).collect()))
}

/// Stage-2 training of the add-ons on (clean, noisy) pairs; the base codec
/// is left untouched.
#[pyfunction]
#[pyo3(signature = (codec, pairs, train_config="toy", steps=None))]
fn train_stage2(
    py: Python<'_>,
    codec: &PyCodec,
    pairs: Vec<(PyImage, PyImage)>,
    train_config: &str,
    steps: Option<usize>,
) -> PyResult<(PyCodec, Vec<f64>)> {
    let tc = self::train_config(train_config, steps)?;
    let pairs: Vec<Pair> = pairs.into_iter().map(|(c, n)| Pair { clean: c.inner, noisy: n.inner }).collect();
    let start = codec.inner.deep_clone().py_err()?;
    let out = py.allow_threads(|| core::training::train_stage2(start, &tc, &pairs, None)).py_err()?;
    Ok((PyCodec { inner: out.codec }, out.records.iter().map(|r| r.loss).collect()))
}

#[pyfunction]
#[pyo3(signature = (image, a=NoiseParams::DEFAULT_A, b=NoiseParams::DEFAULT_B, seed=0))]
fn add_noise(image: &PyImage, a: f64, b: f64, seed: u64) -> PyResult<PyImage> {
    let p = NoiseParams::new(a, b, seed).py_err()?;
    Ok(PyImage { inner: core::noise::add_noise(&image.inner, &p).py_err()? })
}

#[pyfunction]
fn psnr(reference: &PyImage, test: &PyImage) -> PyResult<f64> {
    core::eval::psnr(&reference.inner, &test.inner).py_err()
}

#[pyfunction]
fn rd_loss(mse_255: f64, bpp_y: f64, bpp_z: f64, lambda_: f64) -> PyResult<f64> {
    core::training::rd_loss_value(mse_255, bpp_y, bpp_z, lambda_).py_err()
}

/// Range-codes integer symbols under per-symbol discretized Gaussians.
#[pyfunction]
fn range_encode_gaussian<'py>(py: Python<'py>, symbols: Vec<i32>, mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<Bound<'py, PyBytes>> {
    if mu.len() != symbols.len() || sigma.len() != symbols.len() {
        return Err(PyValueError::new_err("symbols, mu and sigma must have equal length"));
    }
    let bytes = range_encode(&symbols, &|i: usize| GaussianCdf::new(mu[i], sigma[i])).py_err()?;
    Ok(PyBytes::new(py, &bytes))
}

#[pyfunction]
fn range_decode_gaussian(data: &[u8], mu: Vec<f64>, sigma: Vec<f64>) -> PyResult<Vec<i32>> {
    if mu.len() != sigma.len() {
        return Err(PyValueError::new_err("mu and sigma must have equal length"));
    }
    range_decode(data, &|i: usize| GaussianCdf::new(mu[i], sigma[i]), mu.len()).py_err()
}

/// Decoder-side complexity report as a dict.
#[pyfunction]
#[pyo3(signature = (config="large", height=256, width=256, variant="full"))]
fn complexity(py: Python<'_>, config: &str, height: usize, width: usize, variant: &str) -> PyResult<PyObject> {
    let cfg = core::ModelConfig::load(config).py_err()?;
    let variant: Variant = variant.parse().py_err()?;
    let report = core::complexity::count_complexity(&cfg, height, width, variant).py_err()?;
    let json = py.import("json")?;
    Ok(json.call_method1("loads", (report.to_json(),))?.unbind())
}

#[pymodule]
pub fn jdnd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyCodec>()?;
    m.add_class::<PyEncoded>()?;
    m.add_function(wrap_pyfunction!(train_stage1, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage2, m)?)?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(rd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(range_encode_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(range_decode_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(complexity, m)?)?;
    m.add("JdndError", m.py().get_type::<JdndError>())?;
    m.add("HashMismatchError", m.py().get_type::<HashMismatchError>())?;
    m.add("LAMBDAS", core::config::LAMBDAS.to_vec())?;
    Ok(())
}
