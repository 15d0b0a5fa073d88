use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

use eventconv::events::{read_events, write_events, Event, EventFormat, Polarity, ReadOptions, SensorGeometry};
use eventconv::net::{save_weights, Activation, BatchNormSpec, ConvSpec, DenseSpec, LayerSpec, NetworkSpec, ReadoutMode};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_eventconv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn uniform(dir: &Path, name: &str, dur: &str, side: u32, seed: u64) -> std::path::PathBuf {
    let f = dir.join(name);
    let s = side.to_string();
    let seed = seed.to_string();
    ok_json(&["generate", "--uniform", "--rate", "1e5", "--dur", dur, "--width", &s, "--height", &s, "--seed", &seed, "-o", p(&f)]);
    f
}

#[test]
fn generate_is_deterministic_and_rereadable() {
    let d = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for name in ["a.csv", "b.csv", "c.evt1"] {
        let f = d.path().join(name);
        let v = ok_json(&["generate", "--uniform", "--rate", "1e5", "--dur", "1s", "--seed", "7", "-o", p(&f)]);
        let n = v["events"].as_u64().unwrap();
        assert_eq!(n, 100_000);
        let back = read_events(fs::File::open(&f).unwrap(), EventFormat::from_path(&f), ReadOptions::default()).unwrap();
        assert_eq!(back.events.len() as u64, n);
        digests.push(v["stream_digest"].as_str().unwrap().to_string());
    }
    assert!(digests.iter().all(|x| *x == digests[0]));
    let other = d.path().join("o.csv");
    let v = ok_json(&["generate", "--uniform", "--rate", "1e5", "--dur", "1s", "--seed", "8", "-o", p(&other)]);
    assert_ne!(v["stream_digest"].as_str().unwrap(), digests[0]);
}

#[test]
fn generate_edge_is_nonempty() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("edge.csv");
    let v = ok_json(&["generate", "--edge", "--speed", "100", "-o", p(&f)]);
    assert!(v["events"].as_u64().unwrap() > 0);
    let g = d.path().join("grating.evt1");
    assert!(ok_json(&["generate", "--grating", "--dur", "100ms", "-o", p(&g)])["events"].as_u64().unwrap() > 0);
}

#[test]
fn verify_passes_on_documented_cases() {
    let d = tempfile::tempdir().unwrap();
    let one = d.path().join("one.csv");
    let geo = SensorGeometry::new(8, 8).unwrap();
    let mut f = fs::File::create(&one).unwrap();
    write_events(&mut f, &[Event::new(3, 4, 10, Polarity::Positive)], EventFormat::Csv, geo).unwrap();
    let v = ok_json(&["verify", "-i", p(&one)]);
    assert_eq!(v["passed"], true);
    assert_eq!(v["bit_exact"], true);

    let s = uniform(d.path(), "s.csv", "50ms", 32, 3);
    let common = ["--window", "400", "--widths", "1,8,8", "--alpha", "1e-3"];
    let mut a = vec!["verify", "-i", p(&s), "--refresh", "1"];
    a.extend(common);
    let v = ok_json(&a);
    assert_eq!(v["steps"], 5000);
    assert_eq!(v["passed"], true);
    assert_eq!(v["bit_exact"], true);
    assert_eq!(v["graph_ok"], true);
    assert_eq!(v["index_ok"], true);

    let mut a = vec!["verify", "-i", p(&s), "--refresh", "0", "--precision", "f32", "--every", "37"];
    a.extend(common);
    let v = ok_json(&a);
    assert_eq!(v["passed"], true);
    assert_eq!(v["precision"], "f32");
    assert!(v["max_rel_error"].as_f64().unwrap() <= 1e-5);
    assert_eq!(v["tolerance"], 1e-5);
}

#[test]
fn verify_breach_exits_nonzero_with_dump() {
    let d = tempfile::tempdir().unwrap();
    let s = uniform(d.path(), "s.csv", "20ms", 24, 5);
    let o = run(&["verify", "-i", p(&s), "--window", "300", "--refresh", "0", "--precision", "f32", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stdout));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("worst step"), "{err}");
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], false);
    assert!(v["worst"]["slide"].is_array());
}

#[test]
fn bench_mini_batch_flops_decrease() {
    let d = tempfile::tempdir().unwrap();
    let s = uniform(d.path(), "s.csv", "30ms", 32, 9);
    let out = d.path().join("bench");
    let v = ok_json(&[
        "bench", "-i", p(&s), "--window", "800", "--sizes", "1,10,100", "--index-windows", "2000,16000", "--windows", "400,800",
        "--measure", "50", "-o", p(&out),
    ]);
    let cum: Vec<u64> = v["mini_batches"].as_array().unwrap().iter().map(|r| r["cumulative_flops"].as_u64().unwrap()).collect();
    assert_eq!(cum.len(), 3);
    assert!(cum[0] > cum[1] && cum[1] > cum[2], "{cum:?}");
    assert_eq!(v["cumulative_flops_strictly_decreasing"], true);
    assert_eq!(v["index_timing"].as_array().unwrap().len(), 2);
    let w = v["window_costs"].as_array().unwrap();
    assert!(w[1]["batch_flops_per_event"].as_f64().unwrap() > w[0]["batch_flops_per_event"].as_f64().unwrap());
    for f in ["bench.json", "flops_1.json", "flops_10.csv", "flops_100.json"] {
        let text = fs::read_to_string(out.join(f)).unwrap();
        assert!(text.contains(v["config_digest"].as_str().unwrap()), "{f}");
        assert!(text.contains(v["stream_digest"].as_str().unwrap()), "{f}");
    }
}

#[test]
fn runs_are_reproducible_and_stamped() {
    let d = tempfile::tempdir().unwrap();
    let s = uniform(d.path(), "s.csv", "10ms", 20, 1);
    let cfg = d.path().join("cfg.json");
    fs::write(&cfg, r#"{"window": {"by_count": 200}, "widths": [1, 6, 6], "mini_batch": 25, "seed": 4}"#).unwrap();
    let mut steps = Vec::new();
    for (k, mode) in ["run-slide", "run-slide", "run-batch"].iter().enumerate() {
        let out = d.path().join(format!("o{k}"));
        let v = ok_json(&["--config", p(&cfg), mode, "-i", p(&s), "-o", p(&out)]);
        let m = if *mode == "run-slide" { "slide" } else { "batch" };
        for f in ["steps.jsonl", "flops.json", "flops.csv", "summary.json"] {
            let text = fs::read_to_string(out.join(format!("{m}_{f}"))).unwrap();
            assert!(text.contains(v["config_digest"].as_str().unwrap()));
            assert!(text.contains(v["stream_digest"].as_str().unwrap()));
        }
        steps.push((v, fs::read_to_string(out.join(format!("{m}_steps.jsonl"))).unwrap()));
    }
    assert_eq!(steps[0].1, steps[1].1);
    assert_eq!(steps[0].0["final_logits"], steps[1].0["final_logits"]);
    let (a, b) = (&steps[0].0["final_logits"], &steps[2].0["final_logits"]);
    for (x, y) in a.as_array().unwrap().iter().zip(b.as_array().unwrap()) {
        assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() <= 1e-9);
    }
    assert!(steps[2].0["cumulative_flops"].as_u64() > steps[0].0["cumulative_flops"].as_u64());
    let g = ok_json(&["--config", p(&cfg), "build-graph", "-i", p(&s)]);
    assert_eq!(g["nodes"], 200);
    assert!(g["max_in_degree"].as_u64().unwrap() <= 16);
}

fn stub_weights(dir: &Path) -> std::path::PathBuf {
    let spec = NetworkSpec {
        layers: vec![LayerSpec::GraphConv(ConvSpec {
            w: vec![vec![1.0, 0.0, 0.0, 0.0]],
            b: vec![0.0],
            bn: Some(BatchNormSpec::identity(1)),
            act: Activation::Elu,
        })],
        readout: ReadoutMode::Max,
        head: vec![DenseSpec {
            w: vec![vec![1.0], vec![-1.0]],
            b: vec![0.0, 0.0],
            act: Activation::Identity,
        }],
        state_head: vec![DenseSpec {
            w: vec![vec![100.0]],
            b: vec![-50.0],
            act: Activation::Identity,
        }],
        input_dim: 1,
    };
    let f = dir.join("stub.json");
    fs::write(&f, save_weights(&spec)).unwrap();
    f
}

/// Isolated negative events, then a positive one next to event `at` - 1.
fn stub_stream(dir: &Path, name: &str, at: usize, len: usize) -> std::path::PathBuf {
    let mut v: Vec<Event> = (0..at as u32 - 1)
        .map(|k| Event::new(4 * (k % 12), 4 * (k / 12), 10 * k as i64, Polarity::Negative))
        .collect();
    let last = *v.last().unwrap();
    v.push(Event::new(last.x + 1, last.y, last.t + 5, Polarity::Positive));
    let t0 = v.last().unwrap().t;
    v.extend((0..(len - at) as u32).map(|k| Event::new(2 + 4 * (k % 12), 2 + 4 * (k / 12), t0 + 1000 + 10 * k as i64, Polarity::Negative)));
    let f = dir.join(name);
    write_events(fs::File::create(&f).unwrap(), &v, EventFormat::Csv, SensorGeometry::new(64, 64).unwrap()).unwrap();
    f
}

#[test]
fn early_stop_cases() {
    let d = tempfile::tempdir().unwrap();
    let w = stub_weights(d.path());
    let a = stub_stream(d.path(), "a.csv", 40, 90);
    let b = stub_stream(d.path(), "b.csv", 75, 120);
    let base = ["--weights", p(&w), "--radius", "2", "--alpha", "0.01", "--window", "1000"];
    let go = |extra: &[&str]| {
        let mut args = vec!["early", "-i", p(&a), "-i", p(&b)];
        args.extend(base);
        args.extend(extra);
        ok_json(&args)
    };
    let stops = |v: &Value| -> Vec<u64> { v["streams"].as_array().unwrap().iter().map(|s| s["stop_index"].as_u64().unwrap()).collect() };

    let v = go(&["--tau", "0.99"]);
    assert_eq!(stops(&v), vec![40, 75]);
    assert_eq!(v["stopped"], 2);
    let v = go(&["--tau", "0", "--min-events", "7"]);
    assert_eq!(stops(&v), vec![7, 7]);
    // the stub saturates to exactly 1; random heads do not
    let v = ok_json(&["early", "-i", p(&a), "-i", p(&b), "--tau", "1", "--stride", "3", "--window", "50"]);
    assert_eq!(stops(&v), vec![90, 120]);
    assert_eq!(v["stopped"], 0);

    let out = d.path().join("early");
    let v = go(&["--tau", "0.99", "--stride", "5", "--min-events", "5", "-o", p(&out)]);
    assert_eq!(stops(&v), vec![40, 75]);
    let trace = fs::read_to_string(out.join("trace_1.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines[0].starts_with("# config_digest="));
    assert_eq!(lines[1], "index,class,confidence");
    assert!(lines[2].starts_with("5,"));
    assert!(lines.last().unwrap().starts_with("75,"));
    assert!(fs::read_to_string(out.join("early_summary.json")).unwrap().contains(v["config_digest"].as_str().unwrap()));
}

#[test]
fn bad_input_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let f = d.path().join("bad.csv");
    fs::write(&f, "1,2,3,7\n").unwrap();
    let o = run(&["run-slide", "-i", p(&f)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
    let o = run(&["early", "-i", p(&f), "--tau", "1.5"]);
    assert!(!o.status.success());
}
