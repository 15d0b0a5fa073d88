use std::fmt::Display;
use std::fs::File;
use std::io::{BufReader, BufWriter};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyString};

use eventconv::events::{self, DriftingGrating, Event, EventFormat, MovingEdge, Polarity, ReadOptions, SensorGeometry};
use eventconv::graph::{EdgeMode, EventGraph, GraphConfig, WindowSpec};
use eventconv::net::{batch_forward, random_network, save_weights, Network, RandomNet, Scalar};
use eventconv::pixel_index::{NodeId, PixelQueueIndex, Query};
use eventconv::run::{self, Precision, RunConfig, VerifyOptions};
use eventconv::slide::{SlideEngine, StepOutput};
use eventconv::state_aware::{self, EarlyStopPolicy};

type Ev = (u32, u32, i64, i8);

fn err<E: Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_events(v: &[Ev]) -> PyResult<Vec<Event>> {
    v.iter()
        .map(|&(x, y, t, p)| {
            let p = Polarity::try_from(p).map_err(err)?;
            Ok(Event::new(x, y, t, p))
        })
        .collect()
}

fn from_events(v: &[Event]) -> Vec<Ev> {
    v.iter().map(|e| (e.x, e.y, e.t, e.p.value())).collect()
}

fn geometry(width: u32, height: u32) -> PyResult<SensorGeometry> {
    SensorGeometry::new(width, height).map_err(err)
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Accepts a JSON string or a dict in the run-config shape.
fn run_config(py: Python<'_>, config: Option<&Bound<'_, PyAny>>) -> PyResult<RunConfig> {
    let Some(c) = config else {
        return Ok(RunConfig::default());
    };
    let text: String = if c.is_instance_of::<PyString>() {
        c.extract()?
    } else {
        py.import("json")?.call_method1("dumps", (c,))?.extract()?
    };
    RunConfig::from_json(&text).map_err(err)
}

fn window(count: Option<usize>, us: Option<i64>) -> PyResult<WindowSpec> {
    match (count, us) {
        (Some(_), Some(_)) => Err(PyValueError::new_err("give window or window_us, not both")),
        (_, Some(w)) => Ok(WindowSpec::ByTime(w)),
        (Some(k), None) => Ok(WindowSpec::ByCount(k)),
        (None, None) => Ok(WindowSpec::ByCount(10_000)),
    }
}

#[pyfunction]
#[pyo3(signature = (width, height, rate, duration_us, seed=0))]
fn generate_uniform(width: u32, height: u32, rate: f64, duration_us: i64, seed: u64) -> PyResult<Vec<Ev>> {
    let v = events::generate_uniform(geometry(width, height)?, rate, duration_us, seed).map_err(err)?;
    Ok(from_events(&v))
}

/// Edge or grating scene through the per-pixel contrast-threshold model.
#[pyfunction]
#[pyo3(signature = (width, height, duration_us, scene="edge", speed=100.0, threshold=0.2, step_us=1000))]
fn generate_scene(
    width: u32,
    height: u32,
    duration_us: i64,
    scene: &str,
    speed: f64,
    threshold: f64,
    step_us: i64,
) -> PyResult<Vec<Ev>> {
    let geo = geometry(width, height)?;
    let v = match scene {
        "edge" => {
            let s = MovingEdge {
                start_x: 0.0,
                speed_px_per_s: speed,
                contrast: 1.0,
                softness: 1.0,
            };
            events::generate_synthetic(&s, threshold, geo, duration_us, step_us)
        }
        "grating" => {
            let s = DriftingGrating {
                period_px: 16.0,
                speed_px_per_s: speed,
                angle_rad: 0.5,
                contrast: 1.0,
            };
            events::generate_synthetic(&s, threshold, geo, duration_us, step_us)
        }
        other => return Err(PyValueError::new_err(format!("unknown scene {other:?} (edge or grating)"))),
    }
    .map_err(err)?;
    Ok(from_events(&v))
}

/// Returns (events, width, height); width/height are None without a header.
#[pyfunction]
fn read_events(path: &str) -> PyResult<(Vec<Ev>, Option<u32>, Option<u32>)> {
    let f = File::open(path).map_err(err)?;
    let format = EventFormat::from_path(path.as_ref());
    let s = events::read_events(BufReader::new(f), format, ReadOptions::default()).map_err(err)?;
    Ok((from_events(&s.events), s.geometry.map(|g| g.width), s.geometry.map(|g| g.height)))
}

#[pyfunction]
fn write_events(path: &str, events: Vec<Ev>, width: u32, height: u32) -> PyResult<()> {
    let ev = to_events(&events)?;
    let f = File::create(path).map_err(err)?;
    events::write_events(BufWriter::new(f), &ev, EventFormat::from_path(path.as_ref()), geometry(width, height)?).map_err(err)
}

#[pyfunction]
fn stream_digest(events: Vec<Ev>) -> PyResult<String> {
    Ok(events::stream_digest(&to_events(&events)?))
}

/// Returns (events, number perturbed).
#[pyfunction]
fn perturb_duplicates(events: Vec<Ev>) -> PyResult<(Vec<Ev>, usize)> {
    let mut ev = to_events(&events)?;
    let n = events::perturb_duplicates(&mut ev);
    Ok((from_events(&ev), n))
}

#[pyfunction]
fn stability_labels(predictions: Vec<i64>) -> Vec<u32> {
    // u8 would come back as bytes
    state_aware::stability_labels(&predictions).into_iter().map(u32::from).collect()
}

/// Random network weights as a JSON document.
#[pyfunction]
#[pyo3(signature = (widths, classes=2, seed=0))]
fn random_weights(widths: Vec<usize>, classes: usize, seed: u64) -> PyResult<String> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(PyValueError::new_err("widths need an input and at least one layer, all >= 1"));
    }
    let opts = RandomNet {
        classes,
        ..RandomNet::new(&widths)
    };
    Ok(save_weights(&random_network(&opts, seed)))
}

/// Slide against batch over a whole stream; returns the report dict.
#[pyfunction]
#[pyo3(signature = (events, config=None, every=1, tolerance=None, index_queries=200))]
fn verify<'py>(
    py: Python<'py>,
    events: Vec<Ev>,
    config: Option<&Bound<'py, PyAny>>,
    every: usize,
    tolerance: Option<f64>,
    index_queries: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = run_config(py, config)?;
    let ev = to_events(&events)?;
    let geo = cfg.geometry_for(&ev);
    let gcfg = cfg.graph_config(geo, &ev).map_err(err)?;
    let spec = cfg.network().map_err(err)?;
    let mut opts = VerifyOptions::new(cfg.precision);
    opts.refresh_interval = cfg.refresh_interval;
    opts.mini_batch = cfg.mini_batch;
    opts.every = every;
    opts.tolerance = tolerance.unwrap_or(cfg.precision.tolerance());
    opts.index_queries = index_queries;
    opts.seed = cfg.seed;
    let report = py.detach(|| match cfg.precision {
        Precision::F32 => run::verify_stream::<f32>(&ev, geo, gcfg, &spec, &opts),
        Precision::F64 => run::verify_stream::<f64>(&ev, geo, gcfg, &spec, &opts),
    });
    to_py(py, &report.map_err(err)?)
}

#[pyclass(name = "PixelIndex", unsendable)]
struct PyPixelIndex {
    inner: PixelQueueIndex,
}

#[pymethods]
impl PyPixelIndex {
    #[new]
    fn new(width: u32, height: u32, radius: f64) -> PyResult<Self> {
        Ok(Self {
            inner: PixelQueueIndex::new(geometry(width, height)?, radius),
        })
    }

    /// Inserts and returns nothing; events must arrive in time order per pixel.
    fn insert(&mut self, event: Ev, id: u64) -> PyResult<()> {
        let e = to_events(&[event])?[0];
        self.inner.insert(&e, NodeId(id)).map_err(err)?;
        Ok(())
    }

    /// Drops and returns the id of the oldest event at a pixel.
    fn remove_oldest(&mut self, x: u32, y: u32) -> Option<u64> {
        self.inner.remove_oldest(x, y).map(|q| q.id.0)
    }

    /// Ids within the weighted radius, ascending.
    fn radius_search(&self, x: u32, y: u32, t: i64, radius: f64, alpha: f64) -> PyResult<Vec<u64>> {
        let hits = self.inner.radius_search(Query { x, y, t }, radius, alpha).map_err(err)?;
        Ok(hits.into_iter().map(|n| n.0).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "EventGraph", unsendable)]
struct PyEventGraph {
    inner: EventGraph,
}

#[pymethods]
impl PyEventGraph {
    #[new]
    #[pyo3(signature = (width, height, radius=3.0, alpha=0.01, max_degree=16, window=None, window_us=None, causal=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        width: u32,
        height: u32,
        radius: f64,
        alpha: f64,
        max_degree: usize,
        window: Option<usize>,
        window_us: Option<i64>,
        causal: bool,
    ) -> PyResult<Self> {
        let cfg = GraphConfig {
            radius,
            alpha,
            max_degree,
            window: self::window(window, window_us)?,
            edge_mode: if causal { EdgeMode::Causal } else { EdgeMode::Symmetric },
        };
        Ok(Self {
            inner: EventGraph::new(geometry(width, height)?, cfg).map_err(err)?,
        })
    }

    /// Returns the layer-0 change set as a dict.
    fn slide<'py>(&mut self, py: Python<'py>, events: Vec<Ev>) -> PyResult<Bound<'py, PyAny>> {
        let d = self.inner.slide(&to_events(&events)?).map_err(err)?;
        to_py(py, &d.changes)
    }

    /// (id, (x, y, t, p), in-neighbour ids) per node.
    fn structure(&self) -> Vec<(u64, Ev, Vec<u64>)> {
        self.inner
            .structure()
            .into_iter()
            .map(|(id, e, nb)| (id.0, (e.x, e.y, e.t, e.p.value()), nb.into_iter().map(|n| n.0).collect()))
            .collect()
    }

    fn edge_count(&self) -> usize {
        self.inner.edge_count()
    }

    fn max_in_degree(&self) -> usize {
        self.inner.max_in_degree()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.to_dump())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

enum Engine {
    F32(SlideEngine<f32>),
    F64(SlideEngine<f64>),
}

macro_rules! each {
    ($e:expr, $v:ident => $body:expr) => {
        match $e {
            Engine::F32($v) => $body,
            Engine::F64($v) => $body,
        }
    };
}

fn step_dict<'py, T: Scalar>(py: Python<'py>, o: &StepOutput<T>) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", o.step)?;
    d.set_item("window", o.window)?;
    d.set_item("logits", o.logits.iter().map(|v| v.as_f64()).collect::<Vec<_>>())?;
    d.set_item("state_logit", o.state_logit.as_f64())?;
    d.set_item("flops", o.flops.total())?;
    d.set_item("touched_nodes", o.touched_nodes)?;
    d.set_item("refreshed", o.refreshed)?;
    Ok(d)
}

fn batch_of<T: Scalar>(e: &SlideEngine<T>) -> PyResult<(Vec<f64>, f64)> {
    let b = batch_forward(e.graph(), e.network()).map_err(err)?;
    Ok((b.logits.iter().map(|v| v.as_f64()).collect(), b.state_logit.as_f64()))
}

/// Incremental engine over a sliding window; built from a run config.
#[pyclass(name = "SlideEngine", unsendable)]
struct PySlideEngine {
    inner: Engine,
}

#[pymethods]
impl PySlideEngine {
    /// `config` is a run config (JSON or dict). Width and height override its
    /// geometry; a count window without alpha needs `events` to estimate it.
    #[new]
    #[pyo3(signature = (width, height, config=None, events=None))]
    fn new(py: Python<'_>, width: u32, height: u32, config: Option<&Bound<'_, PyAny>>, events: Option<Vec<Ev>>) -> PyResult<Self> {
        let cfg = run_config(py, config)?;
        let geo = geometry(width, height)?;
        let ev = to_events(&events.unwrap_or_default())?;
        let gcfg = cfg.graph_config(geo, &ev).map_err(err)?;
        let spec = cfg.network().map_err(err)?;
        let inner = match cfg.precision {
            Precision::F32 => Engine::F32(
                SlideEngine::new(Network::new(&spec).map_err(err)?, geo, gcfg)
                    .map_err(err)?
                    .with_refresh_interval(cfg.refresh_interval),
            ),
            Precision::F64 => Engine::F64(
                SlideEngine::new(Network::new(&spec).map_err(err)?, geo, gcfg)
                    .map_err(err)?
                    .with_refresh_interval(cfg.refresh_interval),
            ),
        };
        Ok(Self { inner })
    }

    /// Slides a mini-batch of events in; returns the step record.
    fn step<'py>(&mut self, py: Python<'py>, events: Vec<Ev>) -> PyResult<Bound<'py, PyDict>> {
        let ev = to_events(&events)?;
        each!(&mut self.inner, e => {
            let o = e.step(&ev).map_err(err)?;
            step_dict(py, &o)
        })
    }

    /// Logits and state logit recomputed from scratch on the current window.
    fn batch(&self) -> PyResult<(Vec<f64>, f64)> {
        each!(&self.inner, e => batch_of(e))
    }

    /// Runs the early-stop controller over `events`; returns the result dict.
    #[pyo3(signature = (events, tau=0.5, stride=1, min_events=0))]
    fn early<'py>(&mut self, py: Python<'py>, events: Vec<Ev>, tau: f64, stride: usize, min_events: usize) -> PyResult<Bound<'py, PyAny>> {
        let policy = EarlyStopPolicy {
            threshold: tau,
            stride,
            min_events,
        };
        policy.validate().map_err(err)?;
        let ev = to_events(&events)?;
        let r = each!(&mut self.inner, e => state_aware::run_early_recognition(e, &ev, &policy)).map_err(err)?;
        to_py(py, &r)
    }

    #[getter]
    fn logits(&self) -> Vec<f64> {
        each!(&self.inner, e => e.logits().iter().map(|v| v.as_f64()).collect())
    }

    #[getter]
    fn state_logit(&self) -> f64 {
        each!(&self.inner, e => e.state_logit().as_f64())
    }

    #[getter]
    fn steps(&self) -> u64 {
        each!(&self.inner, e => e.steps())
    }

    #[getter]
    fn precision(&self) -> &'static str {
        match self.inner {
            Engine::F32(_) => "f32",
            Engine::F64(_) => "f64",
        }
    }

    fn __len__(&self) -> usize {
        each!(&self.inner, e => e.graph().len())
    }
}

#[pymodule]
fn eventconv_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generate_uniform, m)?)?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(read_events, m)?)?;
    m.add_function(wrap_pyfunction!(write_events, m)?)?;
    m.add_function(wrap_pyfunction!(stream_digest, m)?)?;
    m.add_function(wrap_pyfunction!(perturb_duplicates, m)?)?;
    m.add_function(wrap_pyfunction!(stability_labels, m)?)?;
    m.add_function(wrap_pyfunction!(random_weights, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<PyPixelIndex>()?;
    m.add_class::<PyEventGraph>()?;
    m.add_class::<PySlideEngine>()?;
    Ok(())
}
