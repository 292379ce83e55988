//! Python bindings: datasets, training, rendering and metrics.
//!
//! Images cross the boundary as flat row-major lists of floats.

use std::path::PathBuf;

use hsplat::dataio::{export_ply, gen_toy_scene, load_checkpoint, load_nerf_synthetic, save_checkpoint, save_png, write_nerf_dataset, Dataset, ToyScene, ToySpec};
use hsplat::metrics::{self, evaluate};
use hsplat::renderer::{blend_stats, render_decomposed, FeatureMask};
use hsplat::train::{Preset, Trainer as CoreTrainer};
use hsplat::{geometry, Camera as CoreCamera, FrameBundle, TrainConfig};
use nalgebra::Vector3;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: hsplat::Error) -> PyErr {
    match e {
        hsplat::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}

fn mask(mode: &str) -> PyResult<FeatureMask> {
    match mode {
        "full" => Ok(FeatureMask::Full),
        "surfel_only" => Ok(FeatureMask::SurfelOnly),
        "hash_only" => Ok(FeatureMask::HashOnly),
        other => Err(PyValueError::new_err(format!("unknown mode {other:?}; expected full, surfel_only or hash_only"))),
    }
}

/// Pinhole camera.
#[pyclass(name = "Camera", from_py_object)]
#[derive(Clone)]
struct Camera {
    inner: CoreCamera,
}

#[pymethods]
impl Camera {
    #[staticmethod]
    #[pyo3(signature = (width, height, focal, position, target, up = [0.0, 0.0, 1.0]))]
    fn look_at(width: u32, height: u32, focal: f64, position: [f64; 3], target: [f64; 3], up: [f64; 3]) -> PyResult<Self> {
        let inner = CoreCamera::look_at(width, height, focal, focal, vec3(position), vec3(target), vec3(up));
        inner.validate().map_err(py_err)?;
        Ok(Camera { inner })
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        let p = self.inner.position;
        [p.x, p.y, p.z]
    }

    fn __repr__(&self) -> String {
        let p = self.position();
        format!("Camera({}x{}, at [{:.3}, {:.3}, {:.3}])", self.inner.width, self.inner.height, p[0], p[1], p[2])
    }
}

/// Posed images split into training and held-out views.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Synthetic scene: `textured_quad`, `two_planes` or `cube`.
    #[staticmethod]
    #[pyo3(signature = (scene = "textured_quad", size = 64, views = 8))]
    fn toy(scene: &str, size: u32, views: usize) -> PyResult<Self> {
        let kind: ToyScene = scene.parse().map_err(py_err)?;
        let spec = ToySpec { width: size, height: size, views, ..ToySpec::new(kind) };
        Ok(PyDataset { inner: gen_toy_scene(&spec).map_err(py_err)?.0 })
    }

    /// Directory with `transforms_train.json` and `transforms_test.json`.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset { inner: load_nerf_synthetic(&dir).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        write_nerf_dataset(&dir, &self.inner).map_err(py_err)
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    #[pyo3(signature = (split = "train"))]
    fn cameras(&self, split: &str) -> PyResult<Vec<Camera>> {
        Ok(self.views(split)?.iter().map(|v| Camera { inner: v.camera.clone() }).collect())
    }

    /// Ground-truth image of one view, `H x W x 3` flattened.
    #[pyo3(signature = (index, split = "train"))]
    fn image(&self, index: usize, split: &str) -> PyResult<Vec<f64>> {
        let views = self.views(split)?;
        views.get(index).map(|v| v.image.clone()).ok_or_else(|| PyValueError::new_err(format!("view {index} out of range")))
    }
}

impl PyDataset {
    fn views(&self, split: &str) -> PyResult<&[hsplat::dataio::View]> {
        match split {
            "train" => Ok(&self.inner.train),
            "test" => Ok(&self.inner.test),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }
}

/// Buffers of one rendered image.
#[pyclass(name = "Frame")]
struct Frame {
    inner: FrameBundle,
}

#[pymethods]
impl Frame {
    #[getter]
    fn width(&self) -> u32 {
        self.inner.width
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height
    }

    #[getter]
    fn rgb(&self) -> Vec<f64> {
        self.inner.rgb.clone()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha.clone()
    }

    #[getter]
    fn depth(&self) -> Vec<f64> {
        self.inner.depth.clone()
    }

    #[getter]
    fn blends(&self) -> Vec<u32> {
        self.inner.blends.clone()
    }

    fn blend_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = blend_stats(&self.inner);
        let d = PyDict::new(py);
        d.set_item("mean", s.mean)?;
        d.set_item("p50", s.p50)?;
        d.set_item("p95", s.p95)?;
        d.set_item("queries_saved", s.queries_saved)?;
        Ok(d)
    }

    fn save_png(&self, path: PathBuf) -> PyResult<()> {
        save_png(&path, self.inner.width, self.inner.height, &self.inner.rgb).map_err(py_err)
    }
}

/// Scene state plus optimizer; also what a checkpoint loads into.
#[pyclass(name = "Trainer")]
struct Trainer {
    inner: CoreTrainer,
}

#[pymethods]
impl Trainer {
    /// `config_json` is overlaid on the preset before `iters` rescales the schedule.
    #[new]
    #[pyo3(signature = (dataset, preset = "desk", iters = None, seed = 0, config_json = None))]
    fn new(dataset: &PyDataset, preset: &str, iters: Option<u64>, seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let preset = match preset {
            "desk" => Preset::Desk,
            "full" => Preset::Full,
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        let mut cfg = TrainConfig::preset(preset);
        if let Some(json) = config_json {
            cfg = TrainConfig::overlay_json(&cfg, json).map_err(py_err)?;
        }
        if let Some(n) = iters {
            cfg.scale_iterations(n);
        }
        cfg.seed = seed;
        cfg.validate().map_err(py_err)?;
        Ok(Trainer { inner: CoreTrainer::new(cfg, &dataset.inner).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(py_err)?;
        Ok(Trainer { inner: CoreTrainer::from_checkpoint(&ck).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner.checkpoint(), &path).map_err(py_err)
    }

    fn export_ply(&self, path: PathBuf) -> PyResult<()> {
        export_ply(&self.inner.cloud, &path).map_err(py_err)
    }

    /// Runs one iteration and returns its log record.
    fn step<'py>(&mut self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let rec = self.inner.step(&dataset.inner).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("iter", rec.iter)?;
        d.set_item("phase", format!("{:?}", rec.phase).to_lowercase())?;
        d.set_item("loss", rec.losses.total)?;
        d.set_item("psnr", rec.psnr)?;
        d.set_item("n_surfels", rec.n_surfels)?;
        d.set_item("mean_blends", rec.mean_blends)?;
        Ok(d)
    }

    /// Steps until the schedule ends; returns the final training PSNR.
    fn run(&mut self, py: Python<'_>, dataset: &PyDataset) -> PyResult<f64> {
        let mut last = f64::NAN;
        while !self.inner.is_done() {
            last = self.inner.step(&dataset.inner).map_err(py_err)?.psnr;
            py.check_signals()?;
        }
        Ok(last)
    }

    #[getter]
    fn iter(&self) -> u64 {
        self.inner.iter
    }

    #[getter]
    fn done(&self) -> bool {
        self.inner.is_done()
    }

    #[getter]
    fn phase(&self) -> String {
        format!("{:?}", self.inner.phase()).to_lowercase()
    }

    #[getter]
    fn n_surfels(&self) -> usize {
        self.inner.cloud.len()
    }

    fn opacities(&self) -> Vec<f64> {
        self.inner.cloud.opacities()
    }

    fn config_json(&self) -> String {
        self.inner.cfg.to_json()
    }

    #[pyo3(signature = (camera, mode = "full"))]
    fn render(&self, camera: &Camera, mode: &str) -> PyResult<Frame> {
        let t = &self.inner;
        camera.inner.validate().map_err(py_err)?;
        let inner = render_decomposed(&t.cloud, &t.grid, &t.decoder, &camera.inner, &t.eval_config(), mask(mode)?);
        Ok(Frame { inner })
    }

    /// Mean PSNR, SSIM and blend statistics over one split.
    #[pyo3(signature = (dataset, split = "test"))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset, split: &str) -> PyResult<Bound<'py, PyDict>> {
        let t = &self.inner;
        let r = evaluate(&t.cloud, &t.grid, &t.decoder, dataset.views(split)?, &t.eval_config()).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("psnr", r.mean_psnr)?;
        d.set_item("ssim", r.mean_ssim)?;
        d.set_item("mean_blends", r.blends.mean)?;
        d.set_item("n_surfels", r.n_surfels)?;
        d.set_item("median_render_ms", r.median_render_ms)?;
        Ok(d)
    }
}

#[pyfunction]
fn beta_kernel(r2: f64, b: f64) -> f64 {
    geometry::beta_kernel(r2, b)
}

#[pyfunction]
fn gaussian_kernel(r2: f64, kappa: f64) -> f64 {
    geometry::gaussian_kernel(r2, kappa)
}

#[pyfunction]
fn psnr(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<f64> {
    metrics::psnr(&pred, &gt).map_err(py_err)
}

#[pyfunction]
fn ssim(pred: Vec<f64>, gt: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    metrics::ssim(&pred, &gt, width, height).map_err(py_err)
}

#[pymodule]
fn hsplat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Camera>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<Frame>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(beta_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    Ok(())
}
