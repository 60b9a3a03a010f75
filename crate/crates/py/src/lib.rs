//! Python bindings. Maps cross the boundary as `((c, h, w), flat_data)`.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dnf_core::eval::evaluate as core_evaluate;
use dnf_core::metrics;
use dnf_core::model::Checkpoint;
use dnf_core::scenegen::{self, ConditionId, Corpus, Difficulty, Split};
use dnf_core::tensor::Map;
use dnf_core::train::checkpoint_config;
use dnf_core::Error;

type Shape = (usize, usize, usize);
type PyMap = (Shape, Vec<f32>);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn map_of(data: Vec<f32>, (c, h, w): Shape) -> PyResult<Map> {
    Map::from_vec(c, h, w, data).map_err(to_py)
}

fn export(m: &Map) -> PyMap {
    ((m.channels, m.height, m.width), m.data.clone())
}

/// Render a procedural scene: returns the image and the five intrinsic maps plus mask.
#[pyfunction]
#[pyo3(signature = (seed, res=32, cluttered=false))]
fn render_scene(seed: u64, res: usize, cluttered: bool) -> PyResult<HashMap<String, PyMap>> {
    let diff = if cluttered { Difficulty::Cluttered } else { Difficulty::Simple };
    let spec = scenegen::sample_scene(seed, diff);
    let (image, set) = scenegen::render(&spec, res, res).map_err(to_py)?;
    let mut out = HashMap::new();
    out.insert("image".to_string(), export(&image));
    for c in ConditionId::ALL {
        out.insert(c.name().to_string(), export(c.of(&set)));
    }
    out.insert("mask".to_string(), export(&set.mask));
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, shape, range=1.0))]
fn psnr(pred: Vec<f32>, gt: Vec<f32>, shape: Shape, range: f64) -> PyResult<f64> {
    metrics::psnr(&map_of(pred, shape)?, &map_of(gt, shape)?, range).map_err(to_py)
}

#[pyfunction]
fn ssim(pred: Vec<f32>, gt: Vec<f32>, shape: Shape) -> PyResult<f64> {
    metrics::ssim(&map_of(pred, shape)?, &map_of(gt, shape)?).map_err(to_py)
}

/// Generate a corpus and return its fingerprint.
#[pyfunction]
#[pyo3(signature = (n_train, n_test, out, res=32, seed=0, jobs=1))]
fn generate_corpus(n_train: usize, n_test: usize, out: PathBuf, res: usize, seed: u64, jobs: usize) -> PyResult<String> {
    scenegen::generate_corpus(n_train, n_test, [res, res], seed, &out, jobs).map_err(to_py)?;
    Ok(Corpus::open(&out).map_err(to_py)?.fingerprint())
}

/// Evaluate an estimator checkpoint; returns the metrics CSV text.
#[pyfunction]
#[pyo3(signature = (ckpt, corpus, split="test", limit=None, steps=None, seed=None))]
fn evaluate(ckpt: PathBuf, corpus: PathBuf, split: &str, limit: Option<usize>, steps: Option<usize>, seed: Option<u64>) -> PyResult<String> {
    let ck = Checkpoint::load(&ckpt).map_err(to_py)?;
    let cfg = checkpoint_config(&ck).map_err(to_py)?;
    let split: Split = split.parse().map_err(to_py)?;
    let samples = Corpus::open(&corpus).and_then(|c| c.load_split(split, limit)).map_err(to_py)?;
    let e = core_evaluate(&ck.model, cfg.mode, &samples, &ConditionId::ALL, steps.unwrap_or(cfg.sampler_steps()), seed.unwrap_or(cfg.seed), 1).map_err(to_py)?;
    Ok(e.to_csv())
}

/// Run the `dnf` command line in-process; returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    dnf_core::cli::run(std::iter::once("dnf".to_string()).chain(args))
}

#[pymodule]
fn dnf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
