use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::{json, Value};

use eventconv::events::{
    generate_synthetic, generate_uniform, perturb_duplicates, read_events, stream_digest, write_events,
    DriftingGrating, Event, EventFormat, MovingEdge, ReadOptions, SensorGeometry,
};
use eventconv::graph::{EventGraph, GraphConfig, WindowSpec};
use eventconv::metrics::{FlopReport, StepMetrics};
use eventconv::net::{argmax, batch_forward, Network, NetworkSpec, Scalar};
use eventconv::run::{
    bench_mini_batches, index_timing, verify_stream, window_cost, IndexWorkload, Precision, RunConfig, VerifyOptions,
};
use eventconv::slide::SlideEngine;
use eventconv::state_aware::run_early_recognition;

use crate::{BenchArgs, GenerateArgs};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Batch,
    Slide,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Batch => "batch",
            Mode::Slide => "slide",
        }
    }
}

struct Stream {
    events: Vec<Event>,
    geometry: SensorGeometry,
    digest: String,
    perturbed: usize,
}

fn load_stream(cfg: &RunConfig, path: &Path) -> Result<Stream> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let s = read_events(std::io::BufReader::new(file), EventFormat::from_path(path), ReadOptions::default())
        .with_context(|| format!("reading {}", path.display()))?;
    let mut events = s.events;
    let perturbed = perturb_duplicates(&mut events);
    let geometry = cfg
        .geometry
        .or(s.geometry)
        .unwrap_or_else(|| SensorGeometry::bounding(&events));
    Ok(Stream {
        digest: stream_digest(&events),
        events,
        geometry,
        perturbed,
    })
}

/// JSON object carrying both digests in front of `body`'s own fields.
fn stamped(cfg: &RunConfig, stream: &str, body: impl Serialize) -> Value {
    let mut out = serde_json::Map::new();
    out.insert("config_digest".into(), cfg.digest().into());
    out.insert("stream_digest".into(), stream.into());
    match serde_json::to_value(body).expect("serializable") {
        Value::Object(m) => out.extend(m),
        other => {
            out.insert("value".into(), other);
        }
    }
    Value::Object(out)
}

fn csv_stamp(cfg: &RunConfig, stream: &str) -> String {
    format!("# config_digest={} stream_digest={}\n", cfg.digest(), stream)
}

fn out_dir(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    match &cfg.output_dir {
        Some(d) => {
            fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
            Ok(Some(d.clone()))
        }
        None => Ok(None),
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json") + "\n"
}

/// stdout line; a closed pipe (e.g. `| head`) ends the process quietly.
fn emit(line: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = writeln!(out, "{line}") {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("writing stdout: {e}");
    }
}

fn print(v: &Value) {
    emit(&serde_json::to_string_pretty(v).expect("json"));
}

pub fn generate(cfg: &RunConfig, a: &GenerateArgs) -> Result<()> {
    let geometry = match cfg.geometry {
        Some(g) => g,
        None => SensorGeometry::new(a.width, a.height)?,
    };
    let (kind, events) = if a.edge {
        let scene = MovingEdge {
            start_x: 0.0,
            speed_px_per_s: a.speed,
            contrast: 1.0,
            softness: 1.0,
        };
        ("edge", generate_synthetic(&scene, a.threshold, geometry, a.dur, a.step)?)
    } else if a.grating {
        let scene = DriftingGrating {
            period_px: 16.0,
            speed_px_per_s: a.speed,
            angle_rad: 0.5,
            contrast: 1.0,
        };
        ("grating", generate_synthetic(&scene, a.threshold, geometry, a.dur, a.step)?)
    } else {
        ("uniform", generate_uniform(geometry, a.rate, a.dur, cfg.seed)?)
    };
    let format = EventFormat::from_path(&a.out);
    let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut w = std::io::BufWriter::new(file);
    write_events(&mut w, &events, format, geometry)?;
    w.flush()?;
    print(&json!({
        "path": a.out,
        "kind": kind,
        "format": if format == EventFormat::Evt1 { "evt1" } else { "csv" },
        "width": geometry.width,
        "height": geometry.height,
        "seed": cfg.seed,
        "events": events.len(),
        "stream_digest": stream_digest(&events),
    }));
    Ok(())
}

fn setup(cfg: &RunConfig, s: &Stream) -> Result<(GraphConfig, NetworkSpec)> {
    Ok((cfg.graph_config(s.geometry, &s.events)?, cfg.network()?))
}

pub fn build_graph(cfg: &RunConfig, input: &Path) -> Result<()> {
    let s = load_stream(cfg, input)?;
    let gcfg = cfg.graph_config(s.geometry, &s.events)?;
    let mut g = EventGraph::new(s.geometry, gcfg)?;
    g.slide(&s.events)?;
    let dump = g.to_dump();
    let v = stamped(
        cfg,
        &s.digest,
        json!({
            "geometry": s.geometry,
            "graph_config": gcfg,
            "perturbed": s.perturbed,
            "nodes": g.len(),
            "edges": g.edge_count(),
            "max_in_degree": g.max_in_degree(),
            "graph": dump,
        }),
    );
    match out_dir(cfg)? {
        Some(d) => {
            write(&d, "graph.json", &pretty(&v))?;
            print(&json!({"path": d.join("graph.json"), "nodes": g.len(), "edges": g.edge_count(),
                "config_digest": cfg.digest(), "stream_digest": s.digest}));
        }
        None => print(&v),
    }
    Ok(())
}

pub fn run_mode(cfg: &RunConfig, input: &Path, mode: Mode) -> Result<()> {
    match cfg.precision {
        Precision::F32 => run_typed::<f32>(cfg, input, mode),
        Precision::F64 => run_typed::<f64>(cfg, input, mode),
    }
}

#[derive(Serialize)]
struct BatchRecord {
    step: u64,
    window: usize,
    flops: u64,
    touched_nodes: usize,
    logits: Vec<f64>,
    state_logit: f64,
}

fn run_typed<T: Scalar>(cfg: &RunConfig, input: &Path, mode: Mode) -> Result<()> {
    let s = load_stream(cfg, input)?;
    let (gcfg, spec) = setup(cfg, &s)?;
    let net = Network::<T>::new(&spec)?;
    let mut report = FlopReport::new(mode.name(), &s.digest, &cfg.digest());
    let mut lines = vec![serde_json::to_string(&stamped(cfg, &s.digest, json!({"mode": mode.name()})))?];
    let mut logits: Vec<f64> = Vec::new();
    let mut state = 0.0;
    let chunk = cfg.mini_batch.max(1);
    match mode {
        Mode::Slide => {
            let mut engine = SlideEngine::new(net, s.geometry, gcfg)?.with_refresh_interval(cfg.refresh_interval);
            for c in s.events.chunks(chunk) {
                let out = engine.step(c)?;
                report.push(out.metrics());
                lines.push(out.to_json_line());
            }
            logits = engine.logits().iter().map(|v| v.as_f64()).collect();
            state = engine.state_logit().as_f64();
        }
        Mode::Batch => {
            let mut g = EventGraph::new(s.geometry, gcfg)?;
            for (k, c) in s.events.chunks(chunk).enumerate() {
                let t = Instant::now();
                g.slide(c)?;
                let f = batch_forward(&g, &net)?;
                let wall_ns = t.elapsed().as_nanos() as u64;
                let rec = BatchRecord {
                    step: k as u64 + 1,
                    window: g.len(),
                    flops: f.flops.total(),
                    touched_nodes: g.len(),
                    logits: f.logits.iter().map(|v| v.as_f64()).collect(),
                    state_logit: f.state_logit.as_f64(),
                };
                report.push(StepMetrics {
                    step: rec.step,
                    events: c.len(),
                    window: rec.window,
                    flops: f.flops,
                    wall_ns,
                    touched_nodes: rec.touched_nodes,
                });
                lines.push(serde_json::to_string(&rec)?);
                logits = rec.logits;
                state = rec.state_logit;
            }
        }
    }
    let summary = stamped(
        cfg,
        &s.digest,
        json!({
            "mode": mode.name(),
            "precision": T::NAME,
            "steps": report.steps.len(),
            "events": report.events,
            "perturbed": s.perturbed,
            "cumulative_flops": report.cumulative.total(),
            "flops_per_event": report.flops_per_event(),
            "wall_ns_per_event": report.wall_ns_per_event(),
            "mean_touched": report.mean_touched(),
            "final_logits": logits,
            "final_state_logit": state,
        }),
    );
    match out_dir(cfg)? {
        Some(d) => {
            let m = mode.name();
            write(&d, &format!("{m}_steps.jsonl"), &(lines.join("\n") + "\n"))?;
            write(&d, &format!("{m}_flops.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            write(&d, &format!("{m}_flops.csv"), &(csv_stamp(cfg, &s.digest) + &report.to_csv()))?;
            write(&d, &format!("{m}_summary.json"), &pretty(&summary))?;
            print(&summary);
        }
        None => {
            for l in &lines {
                emit(l);
            }
            emit(&serde_json::to_string(&summary)?);
        }
    }
    Ok(())
}

/// Returns whether every check passed.
pub fn verify(cfg: &RunConfig, input: &Path, tolerance: Option<f64>, index_queries: usize) -> Result<bool> {
    match cfg.precision {
        Precision::F32 => verify_typed::<f32>(cfg, input, tolerance, index_queries),
        Precision::F64 => verify_typed::<f64>(cfg, input, tolerance, index_queries),
    }
}

fn verify_typed<T: Scalar>(cfg: &RunConfig, input: &Path, tolerance: Option<f64>, index_queries: usize) -> Result<bool> {
    let s = load_stream(cfg, input)?;
    let (gcfg, spec) = setup(cfg, &s)?;
    let opts = VerifyOptions {
        refresh_interval: cfg.refresh_interval,
        mini_batch: cfg.mini_batch,
        every: cfg.verify_every,
        tolerance: tolerance.unwrap_or(cfg.precision.tolerance()),
        index_queries,
        seed: cfg.seed,
    };
    let r = verify_stream::<T>(&s.events, s.geometry, gcfg, &spec, &opts)?;
    let v = stamped(cfg, &s.digest, &r);
    if let Some(d) = out_dir(cfg)? {
        write(&d, "verify.json", &pretty(&v))?;
    }
    print(&v);
    if !r.passed {
        eprintln!(
            "verification failed: max relative error {:e} (tolerance {:e}), graph {}, index {} ({} of {} queries wrong)",
            r.max_rel_error,
            r.tolerance,
            if r.graph_ok { "ok" } else { "MISMATCH" },
            if r.index_ok { "ok" } else { "MISMATCH" },
            r.index_mismatches,
            r.index_queries
        );
        if let Some(w) = &r.worst {
            eprintln!(
                "worst step {} (window {}):\n  slide {:?}\n  batch {:?}",
                w.step, w.window, w.slide, w.batch
            );
        }
    }
    Ok(r.passed)
}

pub fn bench(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    match cfg.precision {
        Precision::F32 => bench_typed::<f32>(cfg, a),
        Precision::F64 => bench_typed::<f64>(cfg, a),
    }
}

fn bench_typed<T: Scalar>(cfg: &RunConfig, a: &BenchArgs) -> Result<()> {
    let s = load_stream(cfg, &a.run.input)?;
    let (gcfg, spec) = setup(cfg, &s)?;
    let n = s.events.len();
    if n < 2 {
        bail!("bench needs at least two events");
    }
    let natural = match cfg.window {
        WindowSpec::ByCount(k) => k,
        WindowSpec::ByTime(w) => {
            let t0 = s.events[0].t;
            s.events.partition_point(|e| e.t < t0 + w)
        }
    };
    let prefill = a.prefill.unwrap_or(natural).min(n / 2);
    let runs = bench_mini_batches::<T>(&s.events, s.geometry, gcfg, &spec, prefill, &cfg.mini_batch_sizes)?;
    let dir = out_dir(cfg)?;
    let mut sizes = Vec::new();
    for (r, mut report) in runs {
        report.config_digest = cfg.digest();
        if let Some(d) = &dir {
            write(d, &format!("flops_{}.json", r.size), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            write(d, &format!("flops_{}.csv", r.size), &(csv_stamp(cfg, &s.digest) + &report.to_csv()))?;
        }
        sizes.push(r);
    }
    let decreasing = sizes.windows(2).all(|w| w[1].cumulative_flops < w[0].cumulative_flops);
    let index: Vec<_> = a
        .index_windows
        .iter()
        .map(|&w| index_timing(w, a.density, cfg.radius, IndexWorkload::Uniform { seed: cfg.seed }))
        .collect::<Result<_, _>>()?;
    let mut windows = Vec::new();
    for &w in &a.windows {
        let c = GraphConfig {
            window: WindowSpec::ByCount(w),
            ..gcfg
        };
        windows.push(window_cost::<T>(&s.events, s.geometry, c, &spec, 20, a.measure, 1)?);
    }
    let v = stamped(
        cfg,
        &s.digest,
        json!({
            "precision": T::NAME,
            "prefill": prefill,
            "mini_batches": sizes,
            "cumulative_flops_strictly_decreasing": decreasing,
            "index_timing": index,
            "window_costs": windows,
        }),
    );
    if let Some(d) = &dir {
        write(d, "bench.json", &pretty(&v))?;
    }
    print(&v);
    Ok(())
}

#[derive(Serialize)]
struct EarlyEntry {
    path: PathBuf,
    stream_digest: String,
    events: usize,
    stop_index: usize,
    stopped: bool,
    stop_class: usize,
    final_class: usize,
}

pub fn early(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    match cfg.precision {
        Precision::F32 => early_typed::<f32>(cfg, inputs),
        Precision::F64 => early_typed::<f64>(cfg, inputs),
    }
}

fn early_typed<T: Scalar>(cfg: &RunConfig, inputs: &[PathBuf]) -> Result<()> {
    let spec = cfg.network()?;
    let net = Network::<T>::new(&spec)?;
    let dir = out_dir(cfg)?;
    let mut entries = Vec::new();
    for (k, path) in inputs.iter().enumerate() {
        let s = load_stream(cfg, path)?;
        let gcfg = cfg.graph_config(s.geometry, &s.events)?;
        let mut engine =
            SlideEngine::new(net.clone(), s.geometry, gcfg)?.with_refresh_interval(cfg.refresh_interval);
        let r = run_early_recognition(&mut engine, &s.events, &cfg.policy)?;
        if r.stop_index < s.events.len() {
            engine.step(&s.events[r.stop_index..])?;
        }
        let final_class = argmax(engine.logits());
        if let Some(d) = &dir {
            write(d, &format!("trace_{k}.csv"), &(csv_stamp(cfg, &s.digest) + &r.trace.to_csv()))?;
        }
        entries.push(EarlyEntry {
            path: path.clone(),
            stream_digest: s.digest,
            events: s.events.len(),
            stop_index: r.stop_index,
            stopped: r.stopped,
            stop_class: r.class,
            final_class,
        });
    }
    let mut stops: Vec<usize> = entries.iter().map(|e| e.stop_index).collect();
    stops.sort_unstable();
    let mean = stops.iter().sum::<usize>() as f64 / stops.len().max(1) as f64;
    let median = match stops.len() {
        0 => 0.0,
        n if n % 2 == 1 => stops[n / 2] as f64,
        n => (stops[n / 2 - 1] + stops[n / 2]) as f64 / 2.0,
    };
    let agree = entries.iter().filter(|e| e.stop_class == e.final_class).count();
    let ratio: Vec<f64> = entries.iter().map(|e| e.stop_index as f64 / e.events.max(1) as f64).collect();
    let digests: Vec<&str> = entries.iter().map(|e| e.stream_digest.as_str()).collect();
    let v = json!({
        "config_digest": cfg.digest(),
        "stream_digest": if digests.len() == 1 { Value::from(digests[0]) } else { json!(digests) },
        "policy": cfg.policy,
        "precision": T::NAME,
        "streams": entries,
        "stop_index": {
            "min": stops.first(),
            "max": stops.last(),
            "mean": mean,
            "median": median,
        },
        "mean_fraction_consumed": ratio.iter().sum::<f64>() / ratio.len().max(1) as f64,
        "stopped": entries.iter().filter(|e| e.stopped).count(),
        "agreement": agree as f64 / entries.len().max(1) as f64,
    });
    if let Some(d) = &dir {
        write(d, "early_summary.json", &pretty(&v))?;
    }
    print(&v);
    Ok(())
}
