//! Python bindings: templates, the forward model, stacks, training, checkpoints and evaluation.
//!
//! Coordinates are lists of `[x, y, z]` in Å, rotations are unit quaternions
//! `[w, x, y, z]` and images are lists of rows. Library errors raise
//! `CryographError` with the message prefixed by its class.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cryograph::config::RunConfig;
use cryograph::data::{self, ImageStack};
use cryograph::eval;
use cryograph::geom::{self, Conformation, Rotation, Vec3};
use cryograph::graph::ProteinGraph;
use cryograph::imaging::{self, CtfParams, ImageGrid, ResidueProfile};
use cryograph::nn::{GnnConfig, MlpConfig, SkipForm};
use cryograph::train::{Checkpoint as CoreCheckpoint, Trainer};

create_exception!(pycryograph, CryographError, PyException);

fn err(e: cryograph::Error) -> PyErr {
    CryographError::new_err(format!("[{}] {e}", e.class()))
}

fn conformation(coords: Vec<Vec3>) -> PyResult<Conformation> {
    Conformation::new(coords).map_err(err)
}

#[pyfunction]
fn helix_hairpin(residues: usize) -> PyResult<Vec<Vec3>> {
    let (x, _) = data::helix_hairpin(residues).map_err(err)?;
    Ok(x.coords().to_vec())
}

/// RMSD after optimal superposition.
#[pyfunction]
fn kabsch_rmsd(a: Vec<Vec3>, b: Vec<Vec3>) -> PyResult<f64> {
    geom::kabsch_rmsd(&conformation(a)?, &conformation(b)?).map_err(err)
}

/// Rotation angle between two orientations, radians.
#[pyfunction]
fn geodesic_distance(p: [f64; 4], q: [f64; 4]) -> f64 {
    geom::geodesic_distance(&Rotation::from_quaternion(p), &Rotation::from_quaternion(q))
}

/// Quaternions of the SO(3) grid closest in size to `target_count`.
#[pyfunction]
fn so3_grid(target_count: usize) -> PyResult<Vec<[f64; 4]>> {
    let g = geom::so3_grid(target_count).map_err(err)?;
    Ok(g.rotations().iter().map(Rotation::to_quaternion).collect())
}

#[pyfunction]
#[pyo3(signature = (latent_dim, node_count, embed_dim, channels, layers))]
fn gnn_param_count(latent_dim: usize, node_count: usize, embed_dim: usize, channels: usize, layers: usize) -> usize {
    GnnConfig {
        latent_dim,
        node_count,
        embed_dim,
        channels,
        layers,
        skip: SkipForm::Residual,
    }
    .param_count()
}

#[pyfunction]
fn mlp_param_count(latent_dim: usize, node_count: usize, hidden_layers: usize, width: usize) -> usize {
    MlpConfig {
        latent_dim,
        node_count,
        hidden_layers,
        width,
    }
    .param_count()
}

/// Gaussian-projection image formation with an optional standard CTF.
#[pyclass(module = "pycryograph")]
struct ForwardModel {
    inner: imaging::ForwardModel,
}

#[pymethods]
impl ForwardModel {
    #[new]
    #[pyo3(signature = (side, pixel_size, residues, amplitude = 1.0, width = 1.5, ctf = true))]
    fn new(side: usize, pixel_size: f64, residues: usize, amplitude: f64, width: f64, ctf: bool) -> PyResult<Self> {
        let grid = ImageGrid::new(side, pixel_size).map_err(err)?;
        let profile = ResidueProfile::uniform(residues, amplitude, width).map_err(err)?;
        let inner = imaging::ForwardModel::new(grid, profile, ctf.then(CtfParams::standard)).map_err(err)?;
        Ok(Self { inner })
    }

    /// Image of `coords` seen at orientation `quaternion`, as rows.
    fn forward(&self, coords: Vec<Vec3>, quaternion: [f64; 4]) -> PyResult<Vec<Vec<f64>>> {
        let img = self
            .inner
            .forward(&conformation(coords)?, &Rotation::from_quaternion(quaternion))
            .map_err(err)?;
        Ok(rows(img.pixels(), self.inner.grid().side()))
    }
}

fn rows(pixels: &[f64], side: usize) -> Vec<Vec<f64>> {
    pixels.chunks(side).map(<[f64]>::to_vec).collect()
}

#[pyclass(module = "pycryograph")]
struct Stack {
    inner: ImageStack,
}

#[pymethods]
impl Stack {
    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::read_stack(&path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn side(&self) -> usize {
        self.inner.grid.side()
    }

    #[getter]
    fn pixel_size(&self) -> f64 {
        self.inner.grid.pixel_size()
    }

    #[getter]
    fn noise_sigma(&self) -> f64 {
        self.inner.noise_sigma
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    fn image(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let img = self
            .inner
            .images
            .get(i)
            .ok_or_else(|| CryographError::new_err(format!("image {i} out of range")))?;
        Ok(rows(img.pixels(), self.side()))
    }

    fn gt_pose(&self, i: usize) -> PyResult<[f64; 4]> {
        self.check(i)?;
        Ok(self.inner.gt_pose(i).map_err(err)?.to_quaternion())
    }

    fn gt_coords(&self, i: usize) -> PyResult<Vec<Vec3>> {
        self.check(i)?;
        Ok(self.inner.gt_conformation(i).map_err(err)?.coords().to_vec())
    }
}

impl Stack {
    fn check(&self, i: usize) -> PyResult<()> {
        if i >= self.inner.len() {
            return Err(CryographError::new_err(format!("image {i} out of range")));
        }
        Ok(())
    }
}

#[pyclass(module = "pycryograph")]
struct Checkpoint {
    inner: CoreCheckpoint,
    graph: ProteinGraph,
}

impl Checkpoint {
    fn wrap(inner: CoreCheckpoint) -> PyResult<Self> {
        let graph = ProteinGraph::from_edges(inner.template.residue_count(), inner.edges.iter().copied()).map_err(err)?;
        Ok(Self { inner, graph })
    }
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn open(path: PathBuf) -> PyResult<Self> {
        Self::wrap(CoreCheckpoint::read(&path).map_err(err)?)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(err)
    }

    #[getter]
    fn decoder_kind(&self) -> &'static str {
        self.inner.decoder.kind()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.decoder.param_count()
    }

    #[getter]
    fn epochs_done(&self) -> usize {
        self.inner.epochs_done
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    /// `(epoch, mean_loss, mean_rmsd)` per completed epoch.
    #[getter]
    fn history(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.inner.history.iter().map(|r| (r.epoch, r.mean_loss, r.mean_rmsd)).collect()
    }

    /// Decoded conformation of image `i`.
    fn decode(&self, i: usize) -> PyResult<Vec<Vec3>> {
        if i >= self.inner.latents.len() {
            return Err(CryographError::new_err(format!("image {i} out of range")));
        }
        let x = self
            .inner
            .decoder
            .decode(self.inner.latents.get(i), &self.graph, &self.inner.template)
            .map_err(err)?;
        Ok(x.coords().to_vec())
    }

    /// RMSD report against the stack's ground truth.
    #[pyo3(signature = (stack, force = false))]
    fn evaluate<'py>(&self, py: Python<'py>, stack: &Stack, force: bool) -> PyResult<Bound<'py, PyDict>> {
        if !force {
            eval::ensure_matching(&self.inner, &stack.inner).map_err(err)?;
        }
        let r = eval::evaluate(&self.inner, &stack.inner, &self.graph).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("mean_rmsd", r.mean_rmsd)?;
        d.set_item("median_rmsd", r.median_rmsd)?;
        d.set_item("template_mean_rmsd", r.template_mean_rmsd)?;
        d.set_item("per_image_rmsd", r.per_image_rmsd)?;
        d.set_item("template_rmsd", r.template_rmsd)?;
        if let Some(p) = r.pose_error_stats {
            d.set_item("pose_error_mean", p.mean)?;
            d.set_item("pose_error_median", p.median)?;
        }
        Ok(d)
    }
}

/// Simulates the stack described by a run config and writes it to `out`.
#[pyfunction]
fn simulate(config: PathBuf, out: PathBuf) -> PyResult<Stack> {
    let cfg = RunConfig::load(&config).map_err(err)?;
    let template = cfg.template().map_err(err)?;
    let model = cfg.forward_model(&template).map_err(err)?;
    let frames = cfg.trajectory(&template).map_err(err)?;
    let mut stack = data::simulate_stack(&frames, &model, &cfg.simulation_spec().map_err(err)?).map_err(err)?;
    stack.config_hash = cfg.hash();
    data::write_stack(&stack, &out).map_err(err)?;
    Ok(Stack { inner: stack })
}

/// Trains on `stack` with the `[train]` section of a run config.
#[pyfunction]
#[pyo3(signature = (config, stack, epochs = None))]
fn train(py: Python<'_>, config: PathBuf, stack: &Stack, epochs: Option<usize>) -> PyResult<Checkpoint> {
    let mut cfg = RunConfig::load(&config).map_err(err)?;
    cfg.apply_overrides(None, None, epochs).map_err(err)?;
    let template = cfg.template().map_err(err)?;
    let graph = cfg.graph(&template).map_err(err)?;
    let tc = cfg.train_config().map_err(err)?.clone();
    let hash = cfg.hash();
    let images = &stack.inner;
    let ck = py
        .detach(|| -> cryograph::Result<CoreCheckpoint> {
            let mut t = Trainer::new(images, &template.coords, &graph, tc, Some(hash))?;
            t.run(|_, _| Ok(()))?;
            Ok(t.into_checkpoint())
        })
        .map_err(err)?;
    Checkpoint::wrap(ck)
}

#[pymodule]
fn pycryograph(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CryographError", m.py().get_type::<CryographError>())?;
    m.add_function(wrap_pyfunction!(helix_hairpin, m)?)?;
    m.add_function(wrap_pyfunction!(kabsch_rmsd, m)?)?;
    m.add_function(wrap_pyfunction!(geodesic_distance, m)?)?;
    m.add_function(wrap_pyfunction!(so3_grid, m)?)?;
    m.add_function(wrap_pyfunction!(gnn_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(mlp_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<ForwardModel>()?;
    m.add_class::<Stack>()?;
    m.add_class::<Checkpoint>()?;
    Ok(())
}
