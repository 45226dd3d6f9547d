//! Python bindings: regions and candidate sets, AP, synthetic data,
//! training, evaluation, checkpoints and the gradient check.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rstarcnn::data::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint};
use rstarcnn::data::synth::{synth_generate, SyntheticConfig};
use rstarcnn::data::Label;
use rstarcnn::evaluation::{self, selection_quality, EvalOptions};
use rstarcnn::proposals::{generate, ProposalConfig};
use rstarcnn::training::{grid_proposals, prepare};
use rstarcnn::{Extent, LossKind, Mode, ModelConfig, OverlapBounds, ProposalSet, TrainConfig};

fn py_err(e: rstarcnn::Error) -> PyErr {
    match e {
        rstarcnn::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)` in pixels.
#[pyclass(frozen, from_py_object, name = "Region")]
#[derive(Clone, Copy)]
struct PyRegion(rstarcnn::Region);

#[pymethods]
impl PyRegion {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> PyResult<Self> {
        rstarcnn::Region::new(x1, y1, x2, y2).map(PyRegion).map_err(py_err)
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1()
    }
    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1()
    }
    #[getter]
    fn x2(&self) -> f64 {
        self.0.x2()
    }
    #[getter]
    fn y2(&self) -> f64 {
        self.0.y2()
    }
    #[getter]
    fn area(&self) -> f64 {
        self.0.area()
    }

    fn coords(&self) -> (f64, f64, f64, f64) {
        let [a, b, c, d] = self.0.coords();
        (a, b, c, d)
    }

    fn iou(&self, other: &PyRegion) -> f64 {
        self.0.iou(&other.0)
    }

    fn __eq__(&self, other: &PyRegion) -> bool {
        self.0.key() == other.0.key()
    }

    fn __hash__(&self) -> u64 {
        self.0.key().iter().fold(17u64, |h, k| h.wrapping_mul(31).wrapping_add(*k))
    }

    fn __repr__(&self) -> String {
        let [a, b, c, d] = self.0.coords();
        format!("Region({a}, {b}, {c}, {d})")
    }
}

fn wrap(regions: &[rstarcnn::Region]) -> Vec<PyRegion> {
    regions.iter().copied().map(PyRegion).collect()
}

#[pyfunction]
fn iou(a: &PyRegion, b: &PyRegion) -> f64 {
    rstarcnn::iou(&a.0, &b.0)
}

/// Proposals whose overlap with `primary` lies in `[lower, upper]`; the
/// whole image when none do.
#[pyfunction]
#[pyo3(signature = (primary, proposals, width, height, lower=0.2, upper=0.75))]
fn candidate_set(primary: &PyRegion, proposals: Vec<PyRegion>, width: usize, height: usize, lower: f64, upper: f64) -> PyResult<Vec<PyRegion>> {
    let bounds = OverlapBounds::new(lower, upper).map_err(py_err)?;
    let set = ProposalSet::new("", Extent::new(width, height), proposals.into_iter().map(|r| r.0).collect());
    Ok(wrap(rstarcnn::candidate_set(&primary.0, &set, bounds).regions()))
}

/// Deterministic multi-scale grid of proposals for a `width x height` image.
#[pyfunction]
#[pyo3(name = "grid_proposals", signature = (width, height, jitter_seed=None))]
fn grid_proposals_for(width: usize, height: usize, jitter_seed: Option<u64>) -> PyResult<Vec<PyRegion>> {
    let cfg = ProposalConfig {
        jitter_seed,
        ..Default::default()
    };
    let set = generate("", Extent::new(width, height), &cfg).map_err(py_err)?;
    Ok(wrap(set.regions()))
}

#[pyfunction]
#[pyo3(signature = (scores, labels, interpolated=false))]
fn average_precision(scores: Vec<f64>, labels: Vec<bool>, interpolated: bool) -> PyResult<f64> {
    if interpolated {
        evaluation::average_precision_11pt(&scores, &labels)
    } else {
        evaluation::average_precision(&scores, &labels)
    }
    .map_err(py_err)
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    rstarcnn::autodiff::softmax(&scores).map_err(py_err)
}

/// Annotated images with per-instance labels.
#[pyclass(name = "Dataset")]
struct PyDataset(rstarcnn::data::Dataset);

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_dataset(path).map(PyDataset).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_dataset(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.0.classes.clone()
    }

    #[getter]
    fn multilabel(&self) -> bool {
        self.0.multilabel
    }

    #[getter]
    fn image_ids(&self) -> Vec<String> {
        self.0.images.iter().map(|r| r.id.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.images.len()
    }

    fn num_instances(&self) -> usize {
        self.0.num_instances()
    }

    /// `(region, label, cue_regions)` for each instance of image `index`;
    /// labels are a class index or a list of attribute flags.
    fn instances<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Vec<(PyRegion, Bound<'py, PyAny>, Vec<PyRegion>)>> {
        let rec = self
            .0
            .images
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("image index {index} out of range")))?;
        rec.instances
            .iter()
            .map(|inst| {
                let label = match &inst.label {
                    Label::Class(c) => c.into_pyobject(py)?.into_any(),
                    Label::Attributes(bits) => bits.clone().into_pyobject(py)?.into_any(),
                };
                let cues: Vec<PyRegion> = inst.cues.iter().map(|c| PyRegion(c.region)).collect();
                Ok((PyRegion(inst.region), label, cues))
            })
            .collect()
    }

    /// Pixels of image `index` as nested `[channel][row][column]` lists.
    fn pixels(&self, index: usize) -> PyResult<Vec<Vec<Vec<u8>>>> {
        let img = &self
            .0
            .images
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("image index {index} out of range")))?
            .image;
        Ok((0..3)
            .map(|c| (0..img.height()).map(|y| (0..img.width()).map(|x| img.get(c, x, y)).collect()).collect())
            .collect())
    }
}

/// Generates the planted-cue dataset and returns `(train, test)`.
#[pyfunction]
#[pyo3(signature = (seed=0, classes=5, attributes=None, train_instances=500, test_instances=200))]
fn synth(py: Python<'_>, seed: u64, classes: usize, attributes: Option<usize>, train_instances: usize, test_instances: usize) -> PyResult<(PyDataset, PyDataset)> {
    let cfg = SyntheticConfig {
        seed,
        classes,
        attributes,
        train_instances,
        test_instances,
        ..Default::default()
    };
    let (train, test) = py.detach(|| synth_generate(&cfg)).map_err(py_err)?;
    Ok((PyDataset(train), PyDataset(test)))
}

/// Trained weights plus their configuration.
#[pyclass(name = "Model")]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(path).map(PyModel).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(path, &self.0).map_err(py_err)
    }

    #[getter]
    fn mode(&self) -> String {
        self.0.model.mode.to_string()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.0.model.classes.clone()
    }

    /// Trains on `data` with the grid proposals. Returns the model and the
    /// per-iteration batch losses.
    #[staticmethod]
    #[pyo3(signature = (data, mode="rstar", lower=0.2, upper=0.75, ns=1, n=10, lr=1e-4, iters=2000, batch_primaries=30, images_per_batch=2, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        data: &PyDataset,
        mode: &str,
        lower: f64,
        upper: f64,
        ns: usize,
        n: usize,
        lr: f64,
        iters: usize,
        batch_primaries: usize,
        images_per_batch: usize,
        seed: u64,
    ) -> PyResult<(PyModel, Vec<f64>)> {
        let mode: Mode = mode.parse().map_err(py_err)?;
        let tcfg = TrainConfig {
            learning_rate: lr,
            batch_primaries,
            images_per_batch,
            secondary_samples: n,
            iterations: iters,
            bounds: OverlapBounds::new(lower, upper).map_err(py_err)?,
            mode,
            secondary_count: ns,
            loss: if data.0.multilabel { LossKind::Multilabel } else { LossKind::Softmax },
            seed,
            ..Default::default()
        };
        let ds = &data.0;
        let out = py
            .detach(|| {
                let pcfg = ProposalConfig::default();
                let prepared = prepare(ds, &grid_proposals(ds, &pcfg), tcfg.bounds)?;
                let mut model = ModelConfig::new(ds.classes.clone());
                if let Some(first) = ds.images.first() {
                    model.width = first.image.width();
                    model.height = first.image.height();
                }
                rstarcnn::train(&prepared, &model, &tcfg, |_, _, _| Ok(()))
            })
            .map_err(py_err)?;
        let ck = Checkpoint {
            model: out.model,
            train: Some(tcfg),
            params: out.params,
        };
        Ok((PyModel(ck), out.losses))
    }

    /// Scores every instance of `data` and returns a dict with `mean_ap`,
    /// per-class `ap` and the cue `selection` hit rate.
    #[pyo3(signature = (data, frame_level=false, seed=0))]
    fn evaluate<'py>(&self, py: Python<'py>, data: &PyDataset, frame_level: bool, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let ds = &data.0;
        let report = py
            .detach(|| {
                let pcfg = ProposalConfig::default();
                let source = grid_proposals(ds, &pcfg);
                evaluation::evaluate(ds, &source, &self.0.params, &self.0.model, &EvalOptions { frame_level, seed })
            })
            .map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("mean_ap", report.mean_ap)?;
        let ap = PyDict::new(py);
        for c in &report.classes {
            ap.set_item(&c.name, c.ap)?;
        }
        out.set_item("ap", ap)?;
        out.set_item("selection", selection_quality(&report, 0.3).fraction)?;
        Ok(out)
    }

    /// Probabilities and selected secondary regions for each annotated
    /// instance of image `index`.
    #[pyo3(signature = (data, index, seed=0))]
    fn predict(&self, data: &PyDataset, index: usize, seed: u64) -> PyResult<Vec<(Vec<f64>, Vec<Vec<PyRegion>>)>> {
        let rec = data
            .0
            .images
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("image index {index} out of range")))?;
        let proposals = generate(&rec.id, rec.image.extent(), &ProposalConfig::default()).map_err(py_err)?;
        let primaries: Vec<_> = rec.instances.iter().map(|i| i.region).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds = rstarcnn::predict(&rec.image.to_tensor(), &primaries, &proposals, &self.0.params, &self.0.model, &mut rng)
            .map_err(py_err)?;
        Ok(preds
            .into_iter()
            .map(|p| (p.probabilities, p.selected.iter().map(|s| wrap(s)).collect()))
            .collect())
    }
}

/// Runs the finite-difference suite; one dict per (case, seed).
#[pyfunction]
#[pyo3(signature = (seed=0, seeds=1))]
fn gradcheck<'py>(py: Python<'py>, seed: u64, seeds: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let results = py.detach(|| rstarcnn::gradcheck::run_suite(seed, seeds)).map_err(py_err)?;
    results
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("name", r.name)?;
            d.set_item("seed", r.seed)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            d.set_item("tolerance", r.tolerance)?;
            d.set_item("passed", r.passed)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn rstarcnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRegion>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(candidate_set, m)?)?;
    m.add_function(wrap_pyfunction!(grid_proposals_for, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
