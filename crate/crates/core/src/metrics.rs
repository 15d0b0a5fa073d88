//! Analytic FLOP accounting and run reports.
//!
//! Convention: one multiply plus one add is two FLOPs; comparisons, ELU and
//! divisions count one per element.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FLOP_CONVENTION: &str = "2 flops per multiply-add; 1 per compare/elu/divide";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("unknown operation descriptor {0:?}")]
    UnknownDescriptor(String),
    #[error("stream digests differ: {slide} vs {batch}")]
    DigestMismatch { slide: String, batch: String },
}

/// Operation descriptor for [`count_flops`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopOp {
    /// m x n matrix times n-vector.
    MatVec { rows: usize, cols: usize },
    /// Edge message W·[f ‖ e] with a 3-dim edge attribute.
    Message { in_dim: usize, out_dim: usize },
    Elu(usize),
    Sigmoid(usize),
    BatchNorm(usize),
    /// Sum of `terms` vectors of width `width`.
    Sum { terms: usize, width: usize },
    /// Channelwise comparisons.
    Compare(usize),
    Divide(usize),
    /// One weighted squared-distance evaluation.
    Distance,
}

pub fn count_flops(op: FlopOp) -> u64 {
    let v = match op {
        FlopOp::MatVec { rows, cols } => 2 * rows * cols,
        FlopOp::Message { in_dim, out_dim } => 2 * out_dim * (in_dim + 3),
        FlopOp::Elu(n) | FlopOp::Sigmoid(n) | FlopOp::Compare(n) | FlopOp::Divide(n) => n,
        FlopOp::BatchNorm(n) => 4 * n,
        FlopOp::Sum { terms, width } => terms.saturating_sub(1) * width,
        // 3 differences, 1 scaling, 3 squares, 2 additions
        FlopOp::Distance => 9,
    };
    v as u64
}

impl FromStr for FlopOp {
    type Err = MetricsError;

    /// Parses `matvec(8,4)`, `message(1,8)`, `elu(n)`, `bn(n)`, `sum(k,n)`, ...
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || MetricsError::UnknownDescriptor(s.to_string());
        let s = s.trim();
        let open = s.find('(').ok_or_else(unknown)?;
        if !s.ends_with(')') {
            return Err(unknown());
        }
        let name = &s[..open];
        let args: Vec<usize> = s[open + 1..s.len() - 1]
            .split(',')
            .filter(|a| !a.trim().is_empty())
            .map(|a| a.trim().parse::<usize>().map_err(|_| unknown()))
            .collect::<Result<_, _>>()?;
        match (name, args.as_slice()) {
            ("matvec", &[rows, cols]) => Ok(FlopOp::MatVec { rows, cols }),
            ("message", &[in_dim, out_dim]) => Ok(FlopOp::Message { in_dim, out_dim }),
            ("elu", &[n]) => Ok(FlopOp::Elu(n)),
            ("sigmoid", &[n]) => Ok(FlopOp::Sigmoid(n)),
            ("bn", &[n]) => Ok(FlopOp::BatchNorm(n)),
            ("sum", &[terms, width]) => Ok(FlopOp::Sum { terms, width }),
            ("compare", &[n]) => Ok(FlopOp::Compare(n)),
            ("divide", &[n]) => Ok(FlopOp::Divide(n)),
            ("distance", &[]) => Ok(FlopOp::Distance),
            _ => Err(unknown()),
        }
    }
}

/// FLOPs split by pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTally {
    pub graph: u64,
    pub conv: u64,
    pub pool: u64,
    pub readout: u64,
    pub heads: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.graph + self.conv + self.pool + self.readout + self.heads
    }
}

impl std::ops::AddAssign for FlopTally {
    fn add_assign(&mut self, o: FlopTally) {
        self.graph += o.graph;
        self.conv += o.conv;
        self.pool += o.pool;
        self.readout += o.readout;
        self.heads += o.heads;
    }
}

impl std::ops::Add for FlopTally {
    type Output = FlopTally;

    fn add(mut self, o: FlopTally) -> FlopTally {
        self += o;
        self
    }
}

impl fmt::Display for FlopTally {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={} (graph={} conv={} pool={} readout={} heads={})",
            self.total(),
            self.graph,
            self.conv,
            self.pool,
            self.readout,
            self.heads
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    /// Events consumed by this step.
    pub events: usize,
    pub window: usize,
    pub flops: FlopTally,
    pub wall_ns: u64,
    pub touched_nodes: usize,
}

/// Accumulated per-step measurements of one run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub mode: String,
    pub stream_digest: String,
    pub config_digest: String,
    pub convention: String,
    pub steps: Vec<StepMetrics>,
    pub cumulative: FlopTally,
    pub events: u64,
}

impl FlopReport {
    pub fn new(mode: &str, stream_digest: &str, config_digest: &str) -> Self {
        FlopReport {
            mode: mode.to_string(),
            stream_digest: stream_digest.to_string(),
            config_digest: config_digest.to_string(),
            convention: FLOP_CONVENTION.to_string(),
            ..Default::default()
        }
    }

    pub fn push(&mut self, m: StepMetrics) {
        self.cumulative += m.flops;
        self.events += m.events as u64;
        self.steps.push(m);
    }

    /// Associative merge of two reports over disjoint step ranges.
    pub fn merge(&mut self, other: FlopReport) {
        for m in other.steps {
            self.push(m);
        }
    }

    pub fn flops_per_event(&self) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            self.cumulative.total() as f64 / self.events as f64
        }
    }

    pub fn wall_ns_per_event(&self) -> f64 {
        if self.events == 0 {
            return 0.0;
        }
        self.steps.iter().map(|s| s.wall_ns).sum::<u64>() as f64 / self.events as f64
    }

    pub fn mean_touched(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.touched_nodes).sum::<usize>() as f64 / self.steps.len() as f64
    }

    /// CSV time series `step,events,window,flops,wall_ns,touched`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,events,window,flops,wall_ns,touched\n");
        for s in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.step,
                s.events,
                s.window,
                s.flops.total(),
                s.wall_ns,
                s.touched_nodes
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunComparison {
    pub stream_digest: String,
    pub slide_flops_per_event: f64,
    pub batch_flops_per_event: f64,
    pub flop_ratio: f64,
    pub slide_wall_ns_per_event: f64,
    pub batch_wall_ns_per_event: f64,
    pub wall_ratio: f64,
    pub convention: String,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        if num == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Batch-over-slide cost ratios of two runs on the same stream.
pub fn compare_runs(slide: &FlopReport, batch: &FlopReport) -> Result<RunComparison, MetricsError> {
    if slide.stream_digest != batch.stream_digest {
        return Err(MetricsError::DigestMismatch {
            slide: slide.stream_digest.clone(),
            batch: batch.stream_digest.clone(),
        });
    }
    let (sf, bf) = (slide.flops_per_event(), batch.flops_per_event());
    let (sw, bw) = (slide.wall_ns_per_event(), batch.wall_ns_per_event());
    Ok(RunComparison {
        stream_digest: slide.stream_digest.clone(),
        slide_flops_per_event: sf,
        batch_flops_per_event: bf,
        flop_ratio: ratio(bf, sf),
        slide_wall_ns_per_event: sw,
        batch_wall_ns_per_event: bw,
        wall_ratio: ratio(bw, sw),
        convention: FLOP_CONVENTION.to_string(),
    })
}
