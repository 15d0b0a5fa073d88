//! Reproducible runs: configuration documents, slide-versus-batch
//! verification and cost benchmarks.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::events::{
    generate_synthetic, generate_uniform, stream_digest, DriftingGrating, Event, EventError, SensorGeometry,
};
use crate::graph::{default_alpha, EdgeMode, EventGraph, GraphConfig, GraphError, WindowSpec};
use crate::metrics::{FlopReport, FlopTally};
use crate::net::{
    batch_forward, load_weights, random_network, NetError, Network, NetworkSpec, PoolSpec, RandomNet, Scalar,
};
use crate::pixel_index::{radius_search_bruteforce, NodeId, PixelQueueIndex, Query};
use crate::slide::{SlideEngine, SlideError, DEFAULT_REFRESH_INTERVAL};
use crate::state_aware::EarlyStopPolicy;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("invalid run config: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    /// Relative logit tolerance for refresh-free equivalence.
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-5,
            Precision::F64 => 1e-10,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision {s:?} (f32 or f64)")),
        }
    }
}

/// Everything that determines a run given an input stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Defaults to the stream's bounding box.
    pub geometry: Option<SensorGeometry>,
    pub radius: f64,
    /// Defaults to sensor diagonal over window duration.
    pub alpha: Option<f64>,
    pub max_degree: usize,
    pub window: WindowSpec,
    pub edge_mode: EdgeMode,
    /// Weights document; random weights from `widths` and `seed` otherwise.
    pub weights: Option<PathBuf>,
    pub widths: Vec<usize>,
    pub classes: usize,
    pub pool_after: Option<usize>,
    pub pool: Option<PoolSpec>,
    pub mini_batch: usize,
    pub mini_batch_sizes: Vec<usize>,
    pub policy: EarlyStopPolicy,
    pub refresh_interval: u64,
    pub precision: Precision,
    pub seed: u64,
    /// Compare slide and batch every this many steps when verifying.
    pub verify_every: usize,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            geometry: None,
            radius: 3.0,
            alpha: None,
            max_degree: 16,
            window: WindowSpec::ByCount(10_000),
            edge_mode: EdgeMode::Symmetric,
            weights: None,
            widths: vec![1, 16, 16],
            classes: 2,
            pool_after: None,
            pool: None,
            mini_batch: 1,
            mini_batch_sizes: vec![1, 10, 100],
            policy: EarlyStopPolicy::default(),
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            precision: Precision::F64,
            seed: 0,
            verify_every: 1,
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    /// Hash of everything that affects results; the output location does not.
    pub fn digest(&self) -> String {
        let keyed = RunConfig {
            output_dir: None,
            ..self.clone()
        };
        let text = serde_json::to_string(&keyed).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }

    pub fn geometry_for(&self, events: &[Event]) -> SensorGeometry {
        self.geometry.unwrap_or_else(|| SensorGeometry::bounding(events))
    }

    /// Graph configuration; a missing temporal scale is derived from the
    /// window duration (estimated from the stream rate for count windows).
    pub fn graph_config(&self, geometry: SensorGeometry, events: &[Event]) -> Result<GraphConfig, RunError> {
        let alpha = match self.alpha {
            Some(a) => a,
            None => {
                let window_us = match self.window {
                    WindowSpec::ByTime(w) => w,
                    WindowSpec::ByCount(k) => estimate_duration(events, k),
                };
                default_alpha(geometry, window_us)
            }
        };
        let c = GraphConfig {
            radius: self.radius,
            alpha,
            max_degree: self.max_degree,
            window: self.window,
            edge_mode: self.edge_mode,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn network(&self) -> Result<NetworkSpec, RunError> {
        match &self.weights {
            Some(path) => Ok(load_weights(std::fs::File::open(path)?)?),
            None => {
                if self.widths.len() < 2 || self.widths.contains(&0) {
                    return Err(RunError::Config("widths need an input and at least one layer, all >= 1".into()));
                }
                let pool = match (&self.pool, self.pool_after) {
                    (Some(p), at) => Some((at.unwrap_or(1), p.clone())),
                    (None, Some(_)) => return Err(RunError::Config("pool_after without pool".into())),
                    (None, None) => None,
                };
                let opts = RandomNet {
                    classes: self.classes,
                    pool,
                    ..RandomNet::new(&self.widths)
                };
                Ok(random_network(&opts, self.seed))
            }
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Duration spanned by `k` events at the stream's mean rate.
pub fn estimate_duration(events: &[Event], k: usize) -> i64 {
    if events.len() < 2 {
        return k.max(1) as i64;
    }
    let span = (events.last().unwrap().t - events[0].t).max(1) as f64;
    ((span / (events.len() - 1) as f64) * k as f64).round().max(1.0) as i64
}

/// Norm-wise relative error ‖a − b‖∞ / ‖b‖∞ (absolute when b = 0).
pub fn relative_error<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.as_f64().abs()).fold(0.0, f64::max);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub refresh_interval: u64,
    pub mini_batch: usize,
    /// Compare every this many steps (the last step is always compared).
    pub every: usize,
    pub tolerance: f64,
    /// Random radius queries checked against brute force on the final window.
    pub index_queries: usize,
    pub seed: u64,
}

impl VerifyOptions {
    pub fn new(precision: Precision) -> Self {
        VerifyOptions {
            refresh_interval: 0,
            mini_batch: 1,
            every: 1,
            tolerance: precision.tolerance(),
            index_queries: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorstStep {
    pub step: u64,
    pub window: usize,
    pub slide: Vec<f64>,
    pub batch: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub precision: String,
    pub steps: u64,
    pub compared_steps: u64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Every compared output agreed bit for bit.
    pub bit_exact: bool,
    pub graph_ok: bool,
    pub index_ok: bool,
    pub index_queries: usize,
    pub index_mismatches: usize,
    pub worst: Option<WorstStep>,
    pub stream_digest: String,
}

fn outputs<T: Scalar>(logits: &[T], state: T) -> Vec<T> {
    let mut v = logits.to_vec();
    v.push(state);
    v
}

/// Runs the slide engine over `events` and compares it with a from-scratch
/// graph build plus batch pass at the sampled steps.
pub fn verify_stream<T: Scalar>(
    events: &[Event],
    geometry: SensorGeometry,
    config: GraphConfig,
    spec: &NetworkSpec,
    opts: &VerifyOptions,
) -> Result<VerifyReport, RunError> {
    let net = Network::<T>::new(spec)?;
    let mut engine = SlideEngine::new(net.clone(), geometry, config)?.with_refresh_interval(opts.refresh_interval);
    let mut report = VerifyReport {
        passed: true,
        precision: T::NAME.into(),
        steps: 0,
        compared_steps: 0,
        max_rel_error: 0.0,
        tolerance: opts.tolerance,
        bit_exact: true,
        graph_ok: true,
        index_ok: true,
        index_queries: 0,
        index_mismatches: 0,
        worst: None,
        stream_digest: stream_digest(events),
    };
    let chunks: Vec<&[Event]> = events.chunks(opts.mini_batch.max(1)).collect();
    let every = opts.every.max(1);
    for (k, chunk) in chunks.iter().enumerate() {
        let step = engine.step(chunk)?;
        report.steps += 1;
        if (k + 1) % every != 0 && k + 1 != chunks.len() {
            continue;
        }
        report.compared_steps += 1;
        let g = engine.graph();
        let window: Vec<Event> = g.events().map(|(_, e)| *e).collect();
        let first = g.events().next().map(|(id, _)| id.0).unwrap_or(g.next_id());
        let fresh = EventGraph::build(geometry, config, &window, first)?;
        if fresh.structure() != g.structure() {
            report.graph_ok = false;
        }
        let b = batch_forward(&fresh, &net)?;
        let s_out = outputs(&step.logits, step.state_logit);
        let b_out = outputs(&b.logits, b.state_logit);
        if s_out.iter().zip(&b_out).any(|(x, y)| !same_bits(*x, *y)) {
            report.bit_exact = false;
        }
        let err = relative_error(&s_out, &b_out);
        if err > report.max_rel_error || (report.worst.is_none() && err.is_nan()) {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some(WorstStep {
                step: step.step,
                window: step.window,
                slide: s_out.iter().map(|v| v.as_f64()).collect(),
                batch: b_out.iter().map(|v| v.as_f64()).collect(),
            });
        }
        if !(err <= opts.tolerance) {
            report.passed = false;
        }
    }
    let (queries, mismatches) = check_index(engine.graph(), opts.index_queries, opts.seed);
    report.index_queries = queries;
    report.index_mismatches = mismatches;
    report.index_ok = mismatches == 0;
    report.passed &= report.graph_ok && report.index_ok;
    Ok(report)
}

fn same_bits<T: Scalar>(a: T, b: T) -> bool {
    a.as_f64().to_bits() == b.as_f64().to_bits()
}

/// Random radius queries on the graph's index against a brute-force scan of
/// its window; returns (queries, mismatches).
pub fn check_index(graph: &EventGraph, queries: usize, seed: u64) -> (usize, usize) {
    let window: Vec<(NodeId, Event)> = graph.events().map(|(id, e)| (id, *e)).collect();
    if window.is_empty() {
        return (0, 0);
    }
    let c = graph.config();
    let geo = graph.geometry();
    let (t0, t1) = (window[0].1.t, window.last().unwrap().1.t);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..queries {
        let q = Query {
            x: rng.random_range(0..geo.width),
            y: rng.random_range(0..geo.height),
            t: rng.random_range(t0..=t1),
        };
        let got = graph.index().radius_search(q, c.radius, c.alpha).unwrap_or_default();
        if got != radius_search_bruteforce(&window, q, c.radius, c.alpha) {
            bad += 1;
        }
    }
    (queries, bad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeResult {
    pub size: usize,
    pub steps: u64,
    pub events: u64,
    pub cumulative_flops: u64,
    pub flops_per_event: f64,
    pub wall_ns_per_event: f64,
    pub final_logits: Vec<f64>,
}

/// Pre-fills the window with the first `prefill` events by a batch build,
/// then slides the rest through in chunks of each size.
pub fn bench_mini_batches<T: Scalar>(
    events: &[Event],
    geometry: SensorGeometry,
    config: GraphConfig,
    spec: &NetworkSpec,
    prefill: usize,
    sizes: &[usize],
) -> Result<Vec<(SizeResult, FlopReport)>, RunError> {
    let net = Network::<T>::new(spec)?;
    let prefill = prefill.min(events.len());
    let digest = stream_digest(events);
    let mut out = Vec::new();
    for &size in sizes {
        let g = EventGraph::build(geometry, config, &events[..prefill], 0)?;
        let mut engine = SlideEngine::from_graph(net.clone(), g)?.with_refresh_interval(0);
        let mut report = FlopReport::new(&format!("slide/{size}"), &digest, "");
        for chunk in events[prefill..].chunks(size.max(1)) {
            report.push(engine.step(chunk)?.metrics());
        }
        out.push((
            SizeResult {
                size,
                steps: report.steps.len() as u64,
                events: report.events,
                cumulative_flops: report.cumulative.total(),
                flops_per_event: report.flops_per_event(),
                wall_ns_per_event: report.wall_ns_per_event(),
                final_logits: engine.logits().iter().map(|v| v.as_f64()).collect(),
            },
            report,
        ));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowCost {
    pub window: usize,
    pub slide_flops_per_event: f64,
    pub slide_wall_ns_per_event: f64,
    pub batch_flops_per_event: f64,
    pub batch_wall_ns_per_event: f64,
    pub flop_ratio: f64,
    pub wall_ratio: f64,
    pub slide_breakdown: FlopTally,
    pub batch_breakdown: FlopTally,
}

/// Per-event cost of sliding one event versus recomputing the whole window,
/// on a window of `window` events taken from the start of `events`.
/// `measure` events after the window are slid one by one (after `warmup`);
/// the batch pass is timed `batch_reps` times on the final window.
pub fn window_cost<T: Scalar>(
    events: &[Event],
    geometry: SensorGeometry,
    config: GraphConfig,
    spec: &NetworkSpec,
    warmup: usize,
    measure: usize,
    batch_reps: usize,
) -> Result<WindowCost, RunError> {
    let window = match config.window {
        WindowSpec::ByCount(k) => k,
        WindowSpec::ByTime(_) => return Err(RunError::Config("window_cost needs a count window".into())),
    };
    if events.len() < window + warmup + measure {
        return Err(RunError::Config(format!(
            "stream of {} events too short for window {window} + {warmup} + {measure}",
            events.len()
        )));
    }
    let net = Network::<T>::new(spec)?;
    let g = EventGraph::build(geometry, config, &events[..window], 0)?;
    let mut engine = SlideEngine::from_graph(net.clone(), g)?.with_refresh_interval(0);
    let mut report = FlopReport::new("slide", "", "");
    for (k, e) in events[window..window + warmup + measure].iter().enumerate() {
        let m = engine.step(std::slice::from_ref(e))?.metrics();
        if k >= warmup {
            report.push(m);
        }
    }
    let mut batch_tally = FlopTally::default();
    let mut best = u64::MAX;
    for _ in 0..batch_reps.max(1) {
        let t = Instant::now();
        let b = batch_forward(engine.graph(), &net)?;
        best = best.min(t.elapsed().as_nanos() as u64);
        batch_tally = b.flops;
    }
    let slide_f = report.flops_per_event();
    let slide_w = report.wall_ns_per_event();
    let batch_f = batch_tally.total() as f64;
    let batch_w = best as f64;
    Ok(WindowCost {
        window,
        slide_flops_per_event: slide_f,
        slide_wall_ns_per_event: slide_w,
        batch_flops_per_event: batch_f,
        batch_wall_ns_per_event: batch_w,
        flop_ratio: batch_f / slide_f,
        wall_ratio: batch_w / slide_w,
        slide_breakdown: report.cumulative,
        batch_breakdown: batch_tally,
    })
}

/// Stream used for index timing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IndexWorkload {
    /// Pixels drawn uniformly at random: every access is a cache miss once
    /// the index outgrows the cache.
    Uniform { seed: u64 },
    /// A drifting grating, sampled row by row like a sensor readout.
    Grating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexTiming {
    pub window: usize,
    pub pixels: usize,
    pub workload: IndexWorkload,
    pub insert_ns: f64,
    pub search_ns: f64,
}

/// Minimum number of timed insert/evict pairs, so small windows are not
/// dominated by timer noise.
pub const TIMED_INSERTS: usize = 1_000_000;

/// Amortized insert (with eviction of the oldest) and radius-search cost at
/// a fixed density of `per_pixel` live events per pixel.
pub fn index_timing(
    window: usize,
    per_pixel: f64,
    radius: f64,
    workload: IndexWorkload,
) -> Result<IndexTiming, RunError> {
    let pixels = (window as f64 / per_pixel).ceil().max(1.0);
    let side = pixels.sqrt().ceil() as u32;
    let geometry = SensorGeometry::new(side, side)?;
    let (events, window_us) = match workload {
        IndexWorkload::Uniform { seed } => {
            let duration = 1_000_000;
            let total = window + window.max(TIMED_INSERTS);
            (generate_uniform(geometry, total as f64, duration, seed)?, (duration as f64 * window as f64 / total as f64) as i64)
        }
        IndexWorkload::Grating => {
            // 16 events per cycle at 62.5 Hz: 1000 events/s per pixel
            let scene = DriftingGrating {
                period_px: 16.0,
                speed_px_per_s: 1000.0,
                angle_rad: 0.5,
                contrast: 1.0,
            };
            let window_us = (per_pixel * 1000.0) as i64;
            let total = window + window.max(TIMED_INSERTS);
            let duration = (window_us as f64 * total as f64 / window as f64) as i64 + 1000;
            (generate_synthetic(&scene, 0.25, geometry, duration, 100)?, window_us)
        }
    };
    let alpha = default_alpha(geometry, window_us);
    let mut index = PixelQueueIndex::new(geometry, radius);
    let mut fifo = std::collections::VecDeque::with_capacity(window + 1);
    let warm = window.min(events.len());
    for (k, e) in events[..warm].iter().enumerate() {
        index.insert(e, NodeId(k as u64)).map_err(GraphError::from)?;
        fifo.push_back((e.x, e.y));
    }
    let rest = &events[warm..];
    let t = Instant::now();
    for (k, e) in rest.iter().enumerate() {
        index.insert(e, NodeId((warm + k) as u64)).map_err(GraphError::from)?;
        fifo.push_back((e.x, e.y));
        let (x, y) = fifo.pop_front().unwrap();
        index.remove_oldest(x, y);
    }
    let insert_ns = t.elapsed().as_nanos() as f64 / rest.len().max(1) as f64;
    let probes = rest.len().min(20_000);
    let t = Instant::now();
    let mut found = 0usize;
    for e in rest.iter().rev().take(probes) {
        found += index.radius_search(Query::from(e), radius, alpha).map_err(GraphError::from)?.len();
    }
    let search_ns = t.elapsed().as_nanos() as f64 / probes.max(1) as f64;
    std::hint::black_box(found);
    Ok(IndexTiming {
        window,
        pixels: geometry.pixel_count(),
        workload,
        insert_ns,
        search_ns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Polarity;
    use crate::net::random_weights;

    fn stream(n: usize, seed: u64) -> Vec<Event> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0;
        (0..n)
            .map(|_| {
                t += rng.random_range(1..30);
                let p = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Event::new(rng.random_range(0..24), rng.random_range(0..24), t, p)
            })
            .collect()
    }

    #[test]
    fn config_defaults_and_digest() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let d = c.digest();
        assert_eq!(d.len(), 64);
        let other = RunConfig { seed: 1, ..c.clone() };
        assert_ne!(other.digest(), d);
        assert_eq!(RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap().digest(), d);
        assert!(RunConfig::from_json(r#"{"radius":"x"}"#).is_err());
    }

    #[test]
    fn alpha_from_window() {
        let ev = stream(100, 1);
        let geo = SensorGeometry::new(30, 40).unwrap();
        let c = RunConfig {
            window: WindowSpec::ByTime(1000),
            ..Default::default()
        };
        assert_eq!(c.graph_config(geo, &ev).unwrap().alpha, 50.0 / 1000.0);
        let ev: Vec<Event> = (0..11).map(|k| Event::new(0, 0, k * 10, Polarity::Positive)).collect();
        assert_eq!(estimate_duration(&ev, 50), 500);
    }

    #[test]
    fn verify_small_streams() {
        let spec = random_weights(&[1, 6, 6], 2);
        let ev = stream(600, 3);
        let geo = SensorGeometry::new(24, 24).unwrap();
        let cfg = GraphConfig {
            radius: 3.0,
            alpha: 2e-3,
            max_degree: 8,
            window: WindowSpec::ByCount(150),
            edge_mode: EdgeMode::Symmetric,
        };
        let r = verify_stream::<f64>(&ev, geo, cfg, &spec, &VerifyOptions::new(Precision::F64)).unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.compared_steps, 600);
        let one = verify_stream::<f64>(&ev[..1], geo, cfg, &spec, &VerifyOptions::new(Precision::F64)).unwrap();
        assert!(one.passed && one.bit_exact);
        let exact = VerifyOptions {
            refresh_interval: 1,
            mini_batch: 7,
            ..VerifyOptions::new(Precision::F32)
        };
        let r = verify_stream::<f32>(&ev, geo, cfg, &spec, &exact).unwrap();
        assert!(r.passed && r.bit_exact, "{r:?}");
    }

    #[test]
    fn relative_error_is_normwise() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(relative_error(&[1.0, 2.5], &[1.0, 2.0]), 0.25);
        assert_eq!(relative_error(&[0.5], &[0.0]), 0.5);
    }

    #[test]
    fn timing_curve_runs() {
        let t = index_timing(2000, 4.0, 3.0, IndexWorkload::Uniform { seed: 1 }).unwrap();
        assert!(t.insert_ns > 0.0 && t.pixels >= 500);
    }
}
