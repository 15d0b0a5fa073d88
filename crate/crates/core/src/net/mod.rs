//! Network description, weights I/O and the full batch forward pass.
//!
//! A graph-conv layer computes, for every node i,
//!
//! ```text
//! s(i) = b + Σ_{j ∈ N(i), ascending} W·[f(j) ‖ e_ij]
//! f(i) = act(bn(s(i)))
//! ```
//!
//! The message depends on the source feature and the edge attribute only,
//! which keeps per-edge deltas exact for the incremental engine.

mod pool;

pub use pool::{PoolAgg, PoolSpec, PoolUpdate, PooledGraph};

use std::fmt::{Debug, Display};
use std::io::Read;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{edge_attr, EventGraph, Topology};
use crate::metrics::{count_flops, FlopOp, FlopTally};
use crate::pixel_index::NodeId;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("malformed weights document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{what}: expected dimension {expected}, found {found}")]
    Shape {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
    #[error("state inconsistent with topology: {0}")]
    Inconsistent(String),
}

fn shape(what: impl Into<String>, expected: usize, found: usize) -> Result<(), NetError> {
    if expected == found {
        Ok(())
    } else {
        Err(NetError::Shape {
            what: what.into(),
            expected,
            found,
        })
    }
}

/// Floating-point type the network runs in.
pub trait Scalar: Float + Default + Debug + Display + Send + Sync + 'static {
    const NAME: &'static str;
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Elu,
    Identity,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    fn flops(self, n: usize) -> u64 {
        match self {
            Activation::Elu => count_flops(FlopOp::Elu(n)),
            Activation::Sigmoid => count_flops(FlopOp::Sigmoid(n)),
            Activation::Identity => 0,
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutMode {
    Mean,
    Max,
    #[default]
    MeanMax,
}

impl ReadoutMode {
    pub fn out_dim(self, width: usize) -> usize {
        match self {
            ReadoutMode::MeanMax => 2 * width,
            _ => width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-5
}

impl BatchNormSpec {
    pub fn identity(n: usize) -> Self {
        BatchNormSpec {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            mean: vec![0.0; n],
            var: vec![1.0; n],
            eps: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// out_dim rows of in_dim + 3 columns.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<BatchNormSpec>,
    #[serde(default)]
    pub act: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    GraphConv(ConvSpec),
    VoxelPool(PoolSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    #[serde(default = "identity_act")]
    pub act: Activation,
}

fn identity_act() -> Activation {
    Activation::Identity
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub readout: ReadoutMode,
    #[serde(default)]
    pub head: Vec<DenseSpec>,
    #[serde(default)]
    pub state_head: Vec<DenseSpec>,
    /// Width of the input node feature; polarity only by default.
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub input_dim: usize,
}

fn one() -> usize {
    1
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn finite(what: &str, vals: &[f64]) -> Result<(), NetError> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFinite(what.to_string()))
    }
}

fn check_matrix(what: &str, w: &[Vec<f64>], b: &[f64], cols: usize) -> Result<usize, NetError> {
    shape(format!("{what} bias length"), w.len(), b.len())?;
    for (r, row) in w.iter().enumerate() {
        shape(format!("{what} row {r} width"), cols, row.len())?;
        finite(what, row)?;
    }
    finite(what, b)?;
    Ok(w.len())
}

fn check_dense(what: &str, layers: &[DenseSpec], mut dim: usize) -> Result<usize, NetError> {
    for (k, d) in layers.iter().enumerate() {
        let w = format!("{what} layer {k}");
        if d.w.is_empty() {
            return Err(NetError::Invalid(format!("{w} has no outputs")));
        }
        shape(format!("{w} input"), dim, d.w[0].len())?;
        dim = check_matrix(&w, &d.w, &d.b, dim)?;
    }
    Ok(dim)
}

impl NetworkSpec {
    /// Checks the shape chain and finiteness; returns the readout width.
    pub fn validate(&self) -> Result<usize, NetError> {
        if self.layers.is_empty() {
            return Err(NetError::Invalid("network has no layers".into()));
        }
        if self.input_dim == 0 {
            return Err(NetError::Invalid("input_dim must be >= 1".into()));
        }
        let mut dim = self.input_dim;
        for (n, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::GraphConv(c) => {
                    let what = format!("layer {n} graph_conv");
                    if c.w.is_empty() {
                        return Err(NetError::Invalid(format!("{what} has no outputs")));
                    }
                    shape(format!("{what} input (in_dim + 3)"), dim + 3, c.w[0].len())?;
                    let out = check_matrix(&what, &c.w, &c.b, dim + 3)?;
                    if let Some(bn) = &c.bn {
                        for (name, v) in [
                            ("gamma", &bn.gamma),
                            ("beta", &bn.beta),
                            ("mean", &bn.mean),
                            ("var", &bn.var),
                        ] {
                            shape(format!("{what} bn {name}"), out, v.len())?;
                            finite(&what, v)?;
                        }
                        finite(&what, &[bn.eps])?;
                        if bn.var.iter().any(|v| v + bn.eps <= 0.0) {
                            return Err(NetError::Invalid(format!("{what} bn var + eps must be > 0")));
                        }
                    }
                    dim = out;
                }
                LayerSpec::VoxelPool(p) => p.validate(n)?,
            }
        }
        let ro = self.readout.out_dim(dim);
        check_dense("head", &self.head, ro)?;
        let s = check_dense("state_head", &self.state_head, ro)?;
        if !self.state_head.is_empty() {
            shape("state_head output", 1, s)?;
        }
        Ok(ro)
    }

    pub fn conv_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::GraphConv(_)))
            .count()
    }
}

pub fn load_weights(mut source: impl Read) -> Result<NetworkSpec, NetError> {
    let mut text = String::new();
    source
        .read_to_string(&mut text)
        .map_err(|e| NetError::Invalid(format!("cannot read weights: {e}")))?;
    let spec: NetworkSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

pub fn save_weights(spec: &NetworkSpec) -> String {
    serde_json::to_string_pretty(spec).expect("spec serializes")
}

/// Options for [`random_network`].
#[derive(Clone, Debug, PartialEq)]
pub struct RandomNet {
    /// Input width followed by one width per conv layer.
    pub widths: Vec<usize>,
    pub classes: usize,
    pub readout: ReadoutMode,
    /// Insert a pooling layer after this many conv layers.
    pub pool: Option<(usize, PoolSpec)>,
    pub state_hidden: usize,
}

impl RandomNet {
    pub fn new(widths: &[usize]) -> Self {
        RandomNet {
            widths: widths.to_vec(),
            classes: 2,
            readout: ReadoutMode::MeanMax,
            pool: None,
            state_hidden: 8,
        }
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let scale = (1.0 / (cols as f64).sqrt()).min(1.0);
    let w = (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..=1.0) * scale).collect())
        .collect();
    let b = (0..rows).map(|_| rng.random_range(-1.0..=1.0) * scale).collect();
    (w, b)
}

/// Deterministic weights in [-1, 1], scaled by 1/sqrt(fan_in), with
/// identity normalization statistics.
pub fn random_network(opts: &RandomNet, seed: u64) -> NetworkSpec {
    assert!(opts.widths.len() >= 2 && opts.widths.iter().all(|&w| w >= 1), "widths must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for (k, pair) in opts.widths.windows(2).enumerate() {
        if let Some((at, p)) = &opts.pool {
            if *at == k {
                layers.push(LayerSpec::VoxelPool(p.clone()));
            }
        }
        let (w, b) = random_matrix(&mut rng, pair[1], pair[0] + 3);
        layers.push(LayerSpec::GraphConv(ConvSpec {
            w,
            b,
            bn: Some(BatchNormSpec::identity(pair[1])),
            act: Activation::Elu,
        }));
    }
    if let Some((at, p)) = &opts.pool {
        if *at >= opts.widths.len() - 1 {
            layers.push(LayerSpec::VoxelPool(p.clone()));
        }
    }
    let ro = opts.readout.out_dim(*opts.widths.last().unwrap());
    let (w, b) = random_matrix(&mut rng, opts.classes, ro);
    let head = vec![DenseSpec {
        w,
        b,
        act: Activation::Identity,
    }];
    let (w1, b1) = random_matrix(&mut rng, opts.state_hidden, ro);
    let (w2, b2) = random_matrix(&mut rng, 1, opts.state_hidden);
    let state_head = vec![
        DenseSpec {
            w: w1,
            b: b1,
            act: Activation::Elu,
        },
        DenseSpec {
            w: w2,
            b: b2,
            act: Activation::Identity,
        },
    ];
    NetworkSpec {
        layers,
        readout: opts.readout,
        head,
        state_head,
        input_dim: opts.widths[0],
    }
}

/// [`random_network`] with default heads.
pub fn random_weights(widths: &[usize], seed: u64) -> NetworkSpec {
    random_network(&RandomNet::new(widths), seed)
}

#[derive(Clone, Debug)]
struct Norm<T> {
    mean: Vec<T>,
    /// gamma / sqrt(var + eps)
    scale: Vec<T>,
    beta: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    w: Vec<T>,
    b: Vec<T>,
    bn: Option<Norm<T>>,
    act: Activation,
}

impl<T: Scalar> Conv<T> {
    fn compile(c: &ConvSpec) -> Self {
        let out_dim = c.w.len();
        let in_dim = c.w[0].len() - 3;
        let bn = c.bn.as_ref().map(|bn| Norm {
            mean: bn.mean.iter().map(|&v| T::lit(v)).collect(),
            scale: bn
                .gamma
                .iter()
                .zip(&bn.var)
                .map(|(&g, &v)| T::lit(g / (v + bn.eps).sqrt()))
                .collect(),
            beta: bn.beta.iter().map(|&v| T::lit(v)).collect(),
        });
        Conv {
            in_dim,
            out_dim,
            w: c.w.iter().flatten().map(|&v| T::lit(v)).collect(),
            b: c.b.iter().map(|&v| T::lit(v)).collect(),
            bn,
            act: c.act,
        }
    }

    pub fn bias(&self) -> &[T] {
        &self.b
    }

    /// out = W·[f ‖ e], row by row, feature columns first.
    #[inline]
    pub fn message_into(&self, f: &[T], e: &[T; 3], out: &mut [T]) {
        let cols = self.in_dim + 3;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.w[r * cols..(r + 1) * cols];
            let mut acc = T::zero();
            for (w, x) in row[..self.in_dim].iter().zip(f) {
                acc = acc + *w * *x;
            }
            acc = acc + row[self.in_dim] * e[0];
            acc = acc + row[self.in_dim + 1] * e[1];
            acc = acc + row[self.in_dim + 2] * e[2];
            *o = acc;
        }
    }

    pub fn message(&self, f: &[T], e: &[T; 3]) -> Result<Vec<T>, NetError> {
        shape("message feature", self.in_dim, f.len())?;
        let mut out = vec![T::zero(); self.out_dim];
        self.message_into(f, e, &mut out);
        Ok(out)
    }

    /// f = act(bn(s)).
    #[inline]
    pub fn activate_into(&self, s: &[T], out: &mut [T]) {
        for (r, (o, &v)) in out.iter_mut().zip(s).enumerate() {
            let v = match &self.bn {
                Some(n) => (v - n.mean[r]) * n.scale[r] + n.beta[r],
                None => v,
            };
            *o = self.act.apply(v);
        }
    }

    pub fn message_flops(&self) -> u64 {
        count_flops(FlopOp::Message {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
        })
    }

    pub fn activate_flops(&self) -> u64 {
        let bn = if self.bn.is_some() {
            count_flops(FlopOp::BatchNorm(self.out_dim))
        } else {
            0
        };
        bn + self.act.flops(self.out_dim)
    }

    /// Full computation of one node: bias plus `k` messages summed, then
    /// activation.
    pub fn node_flops(&self, k: usize) -> u64 {
        k as u64 * self.message_flops()
            + count_flops(FlopOp::Sum {
                terms: k + 1,
                width: self.out_dim,
            })
            + self.activate_flops()
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    w: Vec<T>,
    b: Vec<T>,
    act: Activation,
}

impl<T: Scalar> Dense<T> {
    fn compile(d: &DenseSpec) -> Self {
        Dense {
            in_dim: d.w[0].len(),
            out_dim: d.w.len(),
            w: d.w.iter().flatten().map(|&v| T::lit(v)).collect(),
            b: d.b.iter().map(|&v| T::lit(v)).collect(),
            act: d.act,
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        (0..self.out_dim)
            .map(|r| {
                let row = &self.w[r * self.in_dim..(r + 1) * self.in_dim];
                let mut acc = T::zero();
                for (w, v) in row.iter().zip(x) {
                    acc = acc + *w * *v;
                }
                self.act.apply(acc + self.b[r])
            })
            .collect()
    }

    pub fn flops(&self) -> u64 {
        count_flops(FlopOp::MatVec {
            rows: self.out_dim,
            cols: self.in_dim,
        }) + self.out_dim as u64
            + self.act.flops(self.out_dim)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv<T>),
    Pool(PoolSpec),
}

/// Compiled network in precision `T`.
#[derive(Clone, Debug)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
    pub readout: ReadoutMode,
    pub head: Vec<Dense<T>>,
    pub state_head: Vec<Dense<T>>,
    /// Feature width after each layer; `dims[0]` is the input width.
    pub dims: Vec<usize>,
    spec: NetworkSpec,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: &NetworkSpec) -> Result<Self, NetError> {
        spec.validate()?;
        let mut dims = vec![spec.input_dim];
        let layers = spec
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::GraphConv(c) => {
                    dims.push(c.w.len());
                    Layer::Conv(Conv::compile(c))
                }
                LayerSpec::VoxelPool(p) => {
                    dims.push(*dims.last().unwrap());
                    Layer::Pool(p.clone())
                }
            })
            .collect();
        Ok(Network {
            layers,
            readout: spec.readout,
            head: spec.head.iter().map(Dense::compile).collect(),
            state_head: spec.state_head.iter().map(Dense::compile).collect(),
            dims,
            spec: spec.clone(),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn readout_dim(&self) -> usize {
        self.readout.out_dim(*self.dims.last().unwrap())
    }

    /// Class logits and state logit for a readout vector.
    pub fn heads(&self, readout: &[T]) -> (Vec<T>, T, u64) {
        let mut flops = 0;
        let mut x = readout.to_vec();
        for d in &self.head {
            x = d.forward(&x);
            flops += d.flops();
        }
        let mut s = readout.to_vec();
        for d in &self.state_head {
            s = d.forward(&s);
            flops += d.flops();
        }
        let state = if self.state_head.is_empty() { T::zero() } else { s[0] };
        (x, state, flops)
    }

    /// Sigmoid of the state head; 0.5 without one.
    pub fn confidence(&self, readout: &[T]) -> Result<T, NetError> {
        shape("state head input", self.readout_dim(), readout.len())?;
        Ok(sigmoid(self.heads(readout).1))
    }
}

/// Per-layer node features, plus pre-activation sums for conv layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMap<T> {
    pub dim: usize,
    pub values: FxHashMap<NodeId, Vec<T>>,
    pub pre: FxHashMap<NodeId, Vec<T>>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(dim: usize) -> Self {
        FeatureMap {
            dim,
            values: FxHashMap::default(),
            pre: FxHashMap::default(),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&[T]> {
        self.values.get(&id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Input features f_0 = [p] of every event in the window.
pub fn input_features<T: Scalar>(graph: &EventGraph) -> FeatureMap<T> {
    let mut m = FeatureMap::new(1);
    for (id, e) in graph.events() {
        m.values.insert(id, vec![T::lit(e.p.as_f64())]);
    }
    m
}

#[inline]
pub fn edge_attr_t<T: Scalar>(src: [f64; 3], dst: [f64; 3], scale: (f64, f64)) -> [T; 3] {
    edge_attr(src, dst, scale.0, scale.1).map(T::lit)
}

/// Full computation of node `i`: bias, then messages in ascending source id.
pub fn conv_node<T: Scalar>(
    topo: &dyn Topology,
    f: &FeatureMap<T>,
    conv: &Conv<T>,
    i: NodeId,
    msg: &mut [T],
) -> Vec<T> {
    let scale = topo.attr_scale();
    let ci = topo.coord(i).unwrap();
    let mut s = conv.b.clone();
    for &j in topo.in_neighbors(i) {
        let e = edge_attr_t(topo.coord(j).unwrap(), ci, scale);
        conv.message_into(f.get(j).expect("source feature"), &e, msg);
        for (a, m) in s.iter_mut().zip(msg.iter()) {
            *a = *a + *m;
        }
    }
    s
}

/// One graph-conv layer over every node of `topo`.
pub fn conv_forward<T: Scalar>(topo: &dyn Topology, f: &FeatureMap<T>, conv: &Conv<T>) -> (FeatureMap<T>, u64) {
    let mut out = FeatureMap::new(conv.out_dim);
    let mut msg = vec![T::zero(); conv.out_dim];
    let mut flops = 0;
    for i in topo.node_ids() {
        let s = conv_node(topo, f, conv, i, &mut msg);
        let mut a = vec![T::zero(); conv.out_dim];
        conv.activate_into(&s, &mut a);
        flops += conv.node_flops(topo.in_neighbors(i).len());
        out.pre.insert(i, s);
        out.values.insert(i, a);
    }
    (out, flops)
}

/// Aggregated feature of one pooled node, members in ascending order.
pub fn pool_node<T: Scalar>(members: &[NodeId], f: &FeatureMap<T>, agg: PoolAgg) -> (Vec<T>, u64) {
    let mut acc = f.get(members[0]).unwrap().to_vec();
    for &j in &members[1..] {
        let v = f.get(j).unwrap();
        for (a, &x) in acc.iter_mut().zip(v) {
            *a = match agg {
                PoolAgg::Mean => *a + x,
                PoolAgg::Max => a.max(x),
            };
        }
    }
    let k = members.len();
    let mut flops = match agg {
        PoolAgg::Mean => count_flops(FlopOp::Sum { terms: k, width: f.dim }),
        PoolAgg::Max => count_flops(FlopOp::Compare((k - 1) * f.dim)),
    };
    if agg == PoolAgg::Mean {
        let n = T::lit(k as f64);
        for a in acc.iter_mut() {
            *a = *a / n;
        }
        flops += count_flops(FlopOp::Divide(f.dim));
    }
    (acc, flops)
}

pub fn voxel_pool_forward<T: Scalar>(
    input: &dyn Topology,
    f: &FeatureMap<T>,
    spec: &PoolSpec,
) -> Result<(PooledGraph, FeatureMap<T>, FlopTally), NetError> {
    let (g, evals) = PooledGraph::build(input, spec, input.attr_scale().0)?;
    let mut out = FeatureMap::new(f.dim);
    let mut tally = FlopTally {
        graph: evals * count_flops(FlopOp::Distance),
        ..Default::default()
    };
    for v in g.node_ids() {
        let (val, fl) = pool_node(g.members(v), f, spec.agg);
        tally.pool += fl;
        out.values.insert(v, val);
    }
    Ok((g, out, tally))
}

/// Channelwise mean and/or max over `ids`; zeros and `true` when empty.
pub fn readout<T: Scalar>(mode: ReadoutMode, ids: &[NodeId], f: &FeatureMap<T>) -> (Vec<T>, bool, u64) {
    let d = f.dim;
    if ids.is_empty() {
        return (vec![T::zero(); mode.out_dim(d)], true, 0);
    }
    let mut out = Vec::with_capacity(mode.out_dim(d));
    let mut flops = 0;
    if mode != ReadoutMode::Max {
        let mut sum = vec![0.0f64; d];
        for &i in ids {
            for (s, v) in sum.iter_mut().zip(f.get(i).unwrap()) {
                *s += v.as_f64();
            }
        }
        let n = ids.len() as f64;
        out.extend(sum.iter().map(|s| T::lit(s / n)));
        flops += count_flops(FlopOp::Sum { terms: ids.len(), width: d }) + count_flops(FlopOp::Divide(d));
    }
    if mode != ReadoutMode::Mean {
        let mut mx = f.get(ids[0]).unwrap().to_vec();
        for &i in &ids[1..] {
            for (m, &v) in mx.iter_mut().zip(f.get(i).unwrap()) {
                if v > *m {
                    *m = v;
                }
            }
        }
        out.extend(mx);
        flops += count_flops(FlopOp::Compare((ids.len() - 1) * d));
    }
    (out, false, flops)
}

/// Everything a batch pass computes; the slide engine adopts it wholesale.
#[derive(Clone, Debug)]
pub struct ForwardState<T> {
    /// `features[0]` is the input; `features[n]` is the output of layer n.
    pub features: Vec<FeatureMap<T>>,
    /// Pooled graph built by each pooling layer, in layer order.
    pub pooled: Vec<PooledGraph>,
    pub readout: Vec<T>,
    pub degenerate: bool,
    pub logits: Vec<T>,
    pub state_logit: T,
    pub flops: FlopTally,
}

impl<T: Scalar> ForwardState<T> {
    pub fn confidence(&self) -> T {
        sigmoid(self.state_logit)
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

/// Index of the largest logit; first one on ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = k;
        }
    }
    best
}

/// Topology of the level layer `n` reads from.
pub(crate) fn level_for<'a>(graph: &'a EventGraph, pooled: &'a [PooledGraph], pools_before: usize) -> &'a dyn Topology {
    if pools_before == 0 {
        graph
    } else {
        &pooled[pools_before - 1]
    }
}

/// Full forward pass on the current window.
pub fn batch_forward<T: Scalar>(graph: &EventGraph, net: &Network<T>) -> Result<ForwardState<T>, NetError> {
    let mut features = vec![input_features::<T>(graph)];
    if features[0].dim != net.dims[0] {
        return Err(NetError::Shape {
            what: "input feature".into(),
            expected: net.dims[0],
            found: features[0].dim,
        });
    }
    let mut pooled: Vec<PooledGraph> = Vec::new();
    let mut tally = FlopTally::default();
    for layer in &net.layers {
        let topo = level_for(graph, &pooled, pooled.len());
        let f = features.last().unwrap();
        match layer {
            Layer::Conv(c) => {
                let (out, fl) = conv_forward(topo, f, c);
                tally.conv += fl;
                features.push(out);
            }
            Layer::Pool(p) => {
                let (g, out, fl) = voxel_pool_forward(topo, f, p)?;
                tally += fl;
                features.push(out);
                pooled.push(g);
            }
        }
    }
    let last = level_for(graph, &pooled, pooled.len());
    let (ro, degenerate, fl) = readout(net.readout, &last.node_ids(), features.last().unwrap());
    tally.readout += fl;
    let (logits, state_logit, fl) = net.heads(&ro);
    tally.heads += fl;
    Ok(ForwardState {
        features,
        pooled,
        readout: ro,
        degenerate,
        logits,
        state_logit,
        flops: tally,
    })
}
