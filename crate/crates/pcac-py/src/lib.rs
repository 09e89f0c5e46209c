//! Python bindings: frames, models, the frame and sequence codec, training,
//! quality metrics and BD metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use pcac_core::bitstream::{self, EncodedFrame, EncodedSequence, DEFAULT_GOP};
use pcac_core::eval::{bd_metrics as core_bd, RDCurve};
use pcac_core::network::{Architecture, CodecModel, LatentTensor};
use pcac_core::pointcloud::{self, Coord, FrameSequence, PlyFormat, Rgb, VoxelizedFrame};
use pcac_core::trainer::{fit_with_hook, TrainConfig};
use pcac_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(name = "Frame", module = "pcac", frozen, from_py_object)]
#[derive(Clone)]
struct PyFrame(VoxelizedFrame);

#[pymethods]
impl PyFrame {
    #[new]
    fn new(coords: Vec<Coord>, colors: Vec<Rgb>, depth: u32) -> PyResult<Self> {
        VoxelizedFrame::new(coords, colors, depth).map(Self).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, depth=None))]
    fn load_ply(path: PathBuf, depth: Option<u32>) -> PyResult<Self> {
        pointcloud::load_ply_with_depth(&path, depth)
            .map(Self)
            .map_err(py_err)
    }

    #[pyo3(signature = (path, binary=true))]
    fn write_ply(&self, path: PathBuf, binary: bool) -> PyResult<()> {
        let fmt = if binary {
            PlyFormat::BinaryLittleEndian
        } else {
            PlyFormat::Ascii
        };
        pointcloud::write_ply(&self.0, &path, fmt).map_err(py_err)
    }

    fn coords(&self) -> Vec<Coord> {
        self.0.coords().to_vec()
    }

    fn colors(&self) -> Vec<Rgb> {
        self.0.colors().to_vec()
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.0.depth()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Frame(points={}, depth={})", self.0.len(), self.0.depth())
    }
}

#[pyclass(name = "Sequence", module = "pcac", frozen, from_py_object)]
#[derive(Clone)]
struct PySequence(FrameSequence);

#[pymethods]
impl PySequence {
    #[new]
    #[pyo3(signature = (frames, name="sequence".to_string()))]
    fn new(frames: Vec<PyFrame>, name: String) -> PyResult<Self> {
        FrameSequence::new(name, frames.into_iter().map(|f| f.0).collect())
            .map(Self)
            .map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (dir, depth=None))]
    fn load_dir(dir: PathBuf, depth: Option<u32>) -> PyResult<Self> {
        FrameSequence::load_dir(&dir, depth).map(Self).map_err(py_err)
    }

    /// Procedural shell sequence used by the tests.
    #[staticmethod]
    #[pyo3(signature = (frames=100))]
    fn synthetic(frames: usize) -> PyResult<Self> {
        let spec = pcac_core::synthetic::SyntheticSpec {
            frames,
            ..Default::default()
        };
        pcac_core::synthetic::smooth_sequence(&spec)
            .map(Self)
            .map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    fn frame(&self, i: usize) -> PyResult<PyFrame> {
        self.0
            .frames()
            .get(i)
            .cloned()
            .map(PyFrame)
            .ok_or_else(|| PyValueError::new_err(format!("no frame {i}")))
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Model", module = "pcac", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(CodecModel);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (lam, seed=0, narrow=32, wide=64, latent=64, res_blocks=3, context_kernel=5))]
    fn new(
        lam: f64,
        seed: u64,
        narrow: usize,
        wide: usize,
        latent: usize,
        res_blocks: usize,
        context_kernel: usize,
    ) -> PyResult<Self> {
        let arch = Architecture {
            narrow,
            wide,
            latent,
            res_blocks,
            context_kernel,
        };
        CodecModel::new(arch, lam, seed).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CodecModel::load(&path).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(py_err)
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.0.lambda()
    }

    #[getter]
    fn latent_channels(&self) -> usize {
        self.0.latent_channels()
    }

    fn model_id(&self) -> String {
        self.0.model_id().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn parameter_count(&self) -> usize {
        self.0.params().iter().map(|p| p.len()).sum()
    }
}

/// Quantized latent of one frame, usable as the temporal reference of the
/// next one.
#[pyclass(name = "Latent", module = "pcac", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyLatent(LatentTensor);

#[pymethods]
impl PyLatent {
    #[getter]
    fn rows(&self) -> usize {
        self.0.rows()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.0.channels
    }

    fn symbols(&self) -> PyResult<Vec<i32>> {
        self.0.symbols().map_err(py_err)
    }
}

#[pyclass(name = "EncodedFrame", module = "pcac", frozen)]
struct PyEncodedFrame {
    frame: EncodedFrame,
    latent: Option<LatentTensor>,
    reconstruction: VoxelizedFrame,
    cross_entropy_bits: f64,
}

#[pymethods]
impl PyEncodedFrame {
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.frame.to_bytes())
    }

    #[getter]
    fn is_intra(&self) -> bool {
        self.frame.frame_type == bitstream::FrameType::Intra
    }

    #[getter]
    fn payload_bits(&self) -> u64 {
        self.frame.payload_bits()
    }

    #[getter]
    fn bpp(&self) -> f64 {
        self.frame.bpp()
    }

    #[getter]
    fn cross_entropy_bits(&self) -> f64 {
        self.cross_entropy_bits
    }

    #[getter]
    fn latent(&self) -> Option<PyLatent> {
        self.latent.clone().map(PyLatent)
    }

    #[getter]
    fn reconstruction(&self) -> PyFrame {
        PyFrame(self.reconstruction.clone())
    }
}

/// Encode one frame; with a `temporal` latent the frame is predicted.
#[pyfunction]
#[pyo3(signature = (frame, model, temporal=None))]
fn encode_frame(frame: &PyFrame, model: &PyModel, temporal: Option<&PyLatent>) -> PyResult<PyEncodedFrame> {
    let enc = bitstream::encode_frame(&frame.0, temporal.map(|t| &t.0), &model.0).map_err(py_err)?;
    Ok(PyEncodedFrame {
        frame: enc.frame,
        latent: enc.latent,
        reconstruction: enc.reconstruction,
        cross_entropy_bits: enc.cross_entropy_bits,
    })
}

/// Decode a frame from its bytes; returns `(frame, latent)`.
#[pyfunction]
#[pyo3(signature = (data, geometry, model, temporal=None))]
fn decode_frame(
    data: &[u8],
    geometry: &PyFrame,
    model: &PyModel,
    temporal: Option<&PyLatent>,
) -> PyResult<(PyFrame, Option<PyLatent>)> {
    let enc = EncodedFrame::from_bytes(data).map_err(py_err)?;
    let (f, l) = bitstream::decode_frame(&enc, &geometry.0, temporal.map(|t| &t.0), &model.0)
        .map_err(py_err)?;
    Ok((PyFrame(f), l.map(PyLatent)))
}

/// Encode a whole sequence; returns `(bytes, per-frame stats)`.
#[pyfunction]
#[pyo3(signature = (seq, model, gop=DEFAULT_GOP))]
fn encode_sequence<'py>(
    py: Python<'py>,
    seq: &PySequence,
    model: &PyModel,
    gop: usize,
) -> PyResult<(Bound<'py, PyBytes>, Vec<Bound<'py, PyDict>>)> {
    let enc = bitstream::encode_sequence_file(&seq.0, &model.0, gop).map_err(py_err)?;
    let mut stats = Vec::with_capacity(enc.stats.len());
    for s in &enc.stats {
        let d = PyDict::new(py);
        d.set_item("intra", s.frame_type == bitstream::FrameType::Intra)?;
        d.set_item("points", s.points)?;
        d.set_item("payload_bits", s.payload_bits)?;
        d.set_item("bpp", s.bpp)?;
        d.set_item("cross_entropy_bits", s.cross_entropy_bits)?;
        stats.push(d);
    }
    Ok((PyBytes::new(py, &enc.encoded.to_bytes()), stats))
}

#[pyfunction]
fn decode_sequence(data: &[u8], geometry: &PySequence, model: &PyModel) -> PyResult<Vec<PyFrame>> {
    let enc = EncodedSequence::from_bytes(data).map_err(py_err)?;
    let frames = bitstream::decode_sequence_file(&enc, &geometry.0, &model.0).map_err(py_err)?;
    Ok(frames.into_iter().map(PyFrame).collect())
}

/// `(epoch, train loss, validation loss)` per epoch.
type EpochLosses = Vec<(usize, f64, f64)>;

/// Train one model. `config` is the flat `key=value` text the CLI reads.
#[pyfunction]
#[pyo3(signature = (sequences, lam, config="", verbose=false))]
fn train(
    py: Python<'_>,
    sequences: Vec<PySequence>,
    lam: f64,
    config: &str,
    verbose: bool,
) -> PyResult<(PyModel, EpochLosses)> {
    let mut cfg = TrainConfig::parse(config).map_err(py_err)?;
    cfg.lambda = lam;
    let seqs: Vec<FrameSequence> = sequences.into_iter().map(|s| s.0).collect();
    let (model, log) = py
        .detach(|| {
            fit_with_hook(&seqs, &cfg, &mut |r| {
                if verbose {
                    eprintln!("epoch {} train {:.4} val {:.4}", r.epoch, r.train_loss, r.val_loss);
                }
            })
        })
        .map_err(py_err)?;
    let rows = log
        .rows
        .iter()
        .map(|r| (r.epoch, r.train_loss, r.val_loss))
        .collect();
    Ok((PyModel(model), rows))
}

/// Y, U, V and weighted YUV PSNR of a reconstruction.
#[pyfunction]
fn psnr<'py>(py: Python<'py>, reference: &PyFrame, reconstruction: &PyFrame) -> PyResult<Bound<'py, PyDict>> {
    let q = pointcloud::psnr(&reference.0, &reconstruction.0).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("y", q.psnr_y)?;
    d.set_item("u", q.psnr_u)?;
    d.set_item("v", q.psnr_v)?;
    d.set_item("yuv", q.psnr_yuv)?;
    d.set_item("mse_rgb", q.mse_rgb)?;
    Ok(d)
}

/// BD metrics of `test` against `anchor`; points are `(bpp, psnr_y, psnr_yuv)`.
#[pyfunction]
fn bd_metrics<'py>(
    py: Python<'py>,
    anchor: Vec<(f64, f64, f64)>,
    test: Vec<(f64, f64, f64)>,
) -> PyResult<Bound<'py, PyDict>> {
    let a = RDCurve::from_rate_quality("anchor", &anchor).map_err(py_err)?;
    let t = RDCurve::from_rate_quality("test", &test).map_err(py_err)?;
    let r = core_bd(&a, &t).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("bd_rate_y", r.y.rate_percent)?;
    d.set_item("bd_rate_yuv", r.yuv.rate_percent)?;
    d.set_item("bd_psnr_y", r.y.quality_db)?;
    d.set_item("bd_psnr_yuv", r.yuv.quality_db)?;
    d.set_item("warnings", r.warnings)?;
    Ok(d)
}

#[pymodule]
fn pcac(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFrame>()?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLatent>()?;
    m.add_class::<PyEncodedFrame>()?;
    m.add_function(wrap_pyfunction!(encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(encode_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(decode_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(bd_metrics, m)?)?;
    m.add("DEFAULT_GOP", DEFAULT_GOP)?;
    Ok(())
}
