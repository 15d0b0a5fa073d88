//! Incremental forward pass over a sliding event window.
//!
//! Every conv layer caches its pre-activation sums. When the window slides,
//! each affected target receives `message(new) - message(old)` for every
//! in-edge whose source feature, source position, target position or
//! existence changed; absent nodes contribute a zero message. Targets are
//! then re-activated from the updated sums, and their feature changes feed
//! the next layer. Newly added nodes are computed in full, exactly as the
//! batch pass does.

use std::collections::BTreeSet;
use std::time::Instant;

use rustc_hash::{FxHashMap, FxHashSet};
use serde::Serialize;
use thiserror::Error;

use crate::events::{Event, SensorGeometry};
use crate::graph::{ChangeSet, Coord, EventGraph, GraphConfig, GraphError, Topology, TopologyDelta};
use crate::metrics::{count_flops, FlopOp, FlopTally, StepMetrics};
use crate::net::{
    batch_forward, conv_node, edge_attr_t, level_for, pool_node, Conv, FeatureMap, ForwardState, Layer, NetError,
    Network, PoolSpec, PooledGraph, ReadoutMode, Scalar,
};
use crate::pixel_index::NodeId;

pub const DEFAULT_REFRESH_INTERVAL: u64 = 4096;

#[derive(Debug, Error)]
pub enum SlideError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Node-level changes of one layer's features.
#[derive(Clone, Debug, Default)]
struct Changes<T> {
    added: Vec<NodeId>,
    deleted: Vec<NodeId>,
    updated: Vec<NodeId>,
    /// Previous features of deleted and updated nodes.
    old: FxHashMap<NodeId, Vec<T>>,
}

impl<T> Changes<T> {
    fn count(&self) -> usize {
        self.added.len() + self.deleted.len() + self.updated.len()
    }

    fn to_changeset(&self) -> ChangeSet {
        ChangeSet {
            added: self.added.clone(),
            deleted: self.deleted.clone(),
            updated: self.updated.clone(),
            ..Default::default()
        }
    }
}

/// Running channelwise mean (f64 sum and count) and max (value plus number
/// of attaining nodes) over the last layer.
#[derive(Clone, Debug)]
struct ReadoutCache<T> {
    mode: ReadoutMode,
    count: usize,
    sum: Vec<f64>,
    max: Vec<T>,
    attain: Vec<usize>,
    dirty: Vec<bool>,
}

impl<T: Scalar> ReadoutCache<T> {
    fn build(mode: ReadoutMode, dim: usize, f: &FeatureMap<T>) -> Self {
        let mut c = ReadoutCache {
            mode,
            count: 0,
            sum: vec![0.0; dim],
            max: vec![T::neg_infinity(); dim],
            attain: vec![0; dim],
            dirty: vec![false; dim],
        };
        for v in f.values.values() {
            c.add(v);
        }
        c
    }

    fn add(&mut self, v: &[T]) {
        self.count += 1;
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s += x.as_f64();
        }
        for (c, &x) in v.iter().enumerate() {
            if self.dirty[c] {
                continue;
            }
            if x > self.max[c] {
                self.max[c] = x;
                self.attain[c] = 1;
            } else if x == self.max[c] {
                self.attain[c] += 1;
            }
        }
    }

    fn remove(&mut self, v: &[T]) {
        self.count -= 1;
        for (s, x) in self.sum.iter_mut().zip(v) {
            *s -= x.as_f64();
        }
        for (c, &x) in v.iter().enumerate() {
            if !self.dirty[c] && x == self.max[c] {
                self.attain[c] -= 1;
                if self.attain[c] == 0 {
                    self.dirty[c] = true;
                }
            }
        }
    }

    /// Readout vector; rescans channels whose last attainer left.
    fn value(&mut self, f: &FeatureMap<T>) -> (Vec<T>, bool, u64) {
        let d = self.sum.len();
        if self.count == 0 {
            self.sum.iter_mut().for_each(|s| *s = 0.0);
            self.max.iter_mut().for_each(|m| *m = T::neg_infinity());
            self.attain.iter_mut().for_each(|a| *a = 0);
            self.dirty.iter_mut().for_each(|x| *x = false);
            return (vec![T::zero(); self.mode.out_dim(d)], true, 0);
        }
        let mut flops = 0;
        let mut out = Vec::with_capacity(self.mode.out_dim(d));
        if self.mode != ReadoutMode::Max {
            let n = self.count as f64;
            out.extend(self.sum.iter().map(|s| T::lit(s / n)));
            flops += count_flops(FlopOp::Divide(d));
        }
        if self.mode != ReadoutMode::Mean {
            for c in 0..d {
                if !self.dirty[c] {
                    continue;
                }
                let (mut m, mut k) = (T::neg_infinity(), 0);
                for v in f.values.values() {
                    if v[c] > m {
                        m = v[c];
                        k = 1;
                    } else if v[c] == m {
                        k += 1;
                    }
                }
                flops += count_flops(FlopOp::Compare(self.count));
                self.max[c] = m;
                self.attain[c] = k;
                self.dirty[c] = false;
            }
            out.extend(self.max.iter().copied());
        }
        (out, false, flops)
    }
}

/// Result of one [`SlideEngine::step`].
#[derive(Clone, Debug)]
pub struct StepOutput<T> {
    pub step: u64,
    pub window: usize,
    pub logits: Vec<T>,
    pub state_logit: T,
    pub flops: FlopTally,
    pub touched_nodes: usize,
    pub wall_ns: u64,
    pub refreshed: bool,
    pub events: usize,
    /// Per-layer change sets when tracing is on; index 0 is the input.
    pub changes: Vec<ChangeSet>,
}

#[derive(Serialize)]
struct StepRecord {
    step: u64,
    window: usize,
    flops: u64,
    touched_nodes: usize,
    logits: Vec<f64>,
    state_logit: f64,
}

impl<T: Scalar> StepOutput<T> {
    /// One JSON-lines record.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&StepRecord {
            step: self.step,
            window: self.window,
            flops: self.flops.total(),
            touched_nodes: self.touched_nodes,
            logits: self.logits.iter().map(|v| v.as_f64()).collect(),
            state_logit: self.state_logit.as_f64(),
        })
        .expect("record serializes")
    }

    pub fn metrics(&self) -> StepMetrics {
        StepMetrics {
            step: self.step,
            events: self.events,
            window: self.window,
            flops: self.flops,
            wall_ns: self.wall_ns,
            touched_nodes: self.touched_nodes,
        }
    }
}

/// Read access to a level's sources before and after a slide.
struct Sources<'a, T> {
    topo: &'a dyn Topology,
    delta: &'a TopologyDelta,
    deleted: FxHashMap<NodeId, Coord>,
    prev: &'a FeatureMap<T>,
    changes: &'a Changes<T>,
}

impl<T: Scalar> Sources<'_, T> {
    fn old_feature(&self, j: NodeId) -> &[T] {
        match self.changes.old.get(&j) {
            Some(v) => v,
            None => self.prev.get(j).expect("unchanged source feature"),
        }
    }

    fn old_coord(&self, j: NodeId) -> Coord {
        if let Some(c) = self.delta.moved.get(&j) {
            return *c;
        }
        if let Some(c) = self.deleted.get(&j) {
            return *c;
        }
        self.topo.coord(j).expect("source position")
    }

    fn source_changed(&self, j: NodeId) -> bool {
        self.changes.old.contains_key(&j) || self.delta.moved.contains_key(&j)
    }
}

pub struct SlideEngine<T: Scalar> {
    net: Network<T>,
    graph: EventGraph,
    pooled: Vec<PooledGraph>,
    features: Vec<FeatureMap<T>>,
    cache: ReadoutCache<T>,
    readout: Vec<T>,
    degenerate: bool,
    logits: Vec<T>,
    state_logit: T,
    step: u64,
    refresh_interval: u64,
    trace: bool,
}

impl<T: Scalar> std::fmt::Debug for SlideEngine<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlideEngine")
            .field("precision", &T::NAME)
            .field("window", &self.graph.len())
            .field("step", &self.step)
            .field("refresh_interval", &self.refresh_interval)
            .finish()
    }
}

impl<T: Scalar> SlideEngine<T> {
    /// Engine over an empty window.
    pub fn new(net: Network<T>, geometry: SensorGeometry, config: GraphConfig) -> Result<Self, SlideError> {
        Self::from_graph(net, EventGraph::new(geometry, config)?)
    }

    /// Engine adopting a batch pass over an existing window.
    pub fn from_graph(net: Network<T>, graph: EventGraph) -> Result<Self, SlideError> {
        let state = batch_forward(&graph, &net)?;
        let dim = *net.dims.last().unwrap();
        let mut e = SlideEngine {
            cache: ReadoutCache::build(net.readout, dim, &FeatureMap::new(dim)),
            net,
            graph,
            pooled: Vec::new(),
            features: Vec::new(),
            readout: Vec::new(),
            degenerate: true,
            logits: Vec::new(),
            state_logit: T::zero(),
            step: 0,
            refresh_interval: DEFAULT_REFRESH_INTERVAL,
            trace: false,
        };
        e.adopt(state);
        Ok(e)
    }

    /// Full batch pass every `n` steps; 0 never refreshes.
    pub fn with_refresh_interval(mut self, n: u64) -> Self {
        self.refresh_interval = n;
        self
    }

    /// Record per-layer change sets in every [`StepOutput`].
    pub fn with_trace(mut self, on: bool) -> Self {
        self.trace = on;
        self
    }

    fn adopt(&mut self, s: ForwardState<T>) {
        let dim = *self.net.dims.last().unwrap();
        self.cache = ReadoutCache::build(self.net.readout, dim, s.features.last().unwrap());
        self.features = s.features;
        self.pooled = s.pooled;
        self.readout = s.readout;
        self.degenerate = s.degenerate;
        self.logits = s.logits;
        self.state_logit = s.state_logit;
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn graph(&self) -> &EventGraph {
        &self.graph
    }

    pub fn pooled(&self) -> &[PooledGraph] {
        &self.pooled
    }

    /// Features after layer `n` (0 is the input).
    pub fn features(&self, n: usize) -> &FeatureMap<T> {
        &self.features[n]
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn state_logit(&self) -> T {
        self.state_logit
    }

    pub fn readout(&self) -> (&[T], bool) {
        (&self.readout, self.degenerate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn refresh_interval(&self) -> u64 {
        self.refresh_interval
    }

    /// Replace all caches by a batch pass over the current window.
    pub fn refresh(&mut self) -> Result<FlopTally, SlideError> {
        let s = batch_forward(&self.graph, &self.net)?;
        let flops = s.flops;
        self.adopt(s);
        Ok(flops)
    }

    fn output(&self, flops: FlopTally, touched: usize, refreshed: bool, events: usize, started: Instant) -> StepOutput<T> {
        StepOutput {
            step: self.step,
            window: self.graph.len(),
            logits: self.logits.clone(),
            state_logit: self.state_logit,
            flops,
            touched_nodes: touched,
            wall_ns: started.elapsed().as_nanos() as u64,
            refreshed,
            events,
            changes: Vec::new(),
        }
    }

    /// Slides `incoming` into the window and updates every output.
    pub fn step(&mut self, incoming: &[Event]) -> Result<StepOutput<T>, SlideError> {
        let started = Instant::now();
        if incoming.is_empty() {
            return Ok(self.output(FlopTally::default(), 0, false, 0, started));
        }
        let sd = self.graph.slide(incoming)?;
        self.step += 1;
        let mut tally = FlopTally {
            graph: sd.distance_evals * count_flops(FlopOp::Distance),
            ..Default::default()
        };
        if self.refresh_interval > 0 && self.step % self.refresh_interval == 0 {
            tally += self.refresh()?;
            let touched = self.features.iter().map(|f| f.len()).sum();
            return Ok(self.output(tally, touched, true, incoming.len(), started));
        }

        let mut traces = Vec::new();
        let mut changes = Changes::<T>::default();
        {
            let input = &mut self.features[0];
            for &j in &sd.changes.deleted {
                let old = input.values.remove(&j).expect("input feature of deleted node");
                changes.old.insert(j, old);
            }
            for &j in &sd.changes.added {
                let e = self.graph.event(j).unwrap();
                input.values.insert(j, vec![T::lit(e.p.as_f64())]);
            }
            changes.added = sd.changes.added.clone();
            changes.deleted = sd.changes.deleted.clone();
        }
        if self.trace {
            traces.push(changes.to_changeset());
        }
        let mut touched = changes.count();
        let mut level_delta = sd.topology;
        let mut pools = 0;
        for n in 0..self.net.layers.len() {
            let (before, after) = self.features.split_at_mut(n + 1);
            let prev = &before[n];
            let out = &mut after[0];
            let mut cs = ChangeSet::default();
            match &self.net.layers[n] {
                Layer::Conv(conv) => {
                    let topo = level_for(&self.graph, &self.pooled, pools);
                    let src = Sources {
                        topo,
                        delta: &level_delta,
                        deleted: level_delta.deleted.iter().copied().collect(),
                        prev,
                        changes: &changes,
                    };
                    let trace = if self.trace { Some(&mut cs) } else { None };
                    changes = conv_delta(conv, &src, out, &mut tally, trace);
                }
                Layer::Pool(spec) => {
                    let (lower, upper) = self.pooled.split_at_mut(pools);
                    let input: &dyn Topology = if pools == 0 { &self.graph } else { &lower[pools - 1] };
                    let pg = &mut upper[0];
                    let pu = pg.update(input, &level_delta)?;
                    tally.graph += pu.distance_evals * count_flops(FlopOp::Distance);
                    changes = pool_delta(spec, pg, input, &pu.regrouped, &pu.topology, prev, &changes, out, &mut tally)?;
                    level_delta = pu.topology;
                    pools += 1;
                }
            }
            if self.trace {
                let mut c = changes.to_changeset();
                c.edges_added = cs.edges_added;
                c.edges_deleted = cs.edges_deleted;
                c.edges_updated = cs.edges_updated;
                traces.push(c);
            }
            touched += changes.count();
        }

        let last = self.features.last().unwrap();
        for j in &changes.deleted {
            self.cache.remove(&changes.old[j]);
        }
        for j in &changes.updated {
            self.cache.remove(&changes.old[j]);
            self.cache.add(last.get(*j).unwrap());
        }
        for j in &changes.added {
            self.cache.add(last.get(*j).unwrap());
        }
        let d = last.dim as u64;
        tally.readout += 2 * d * changes.count() as u64;
        let (ro, degenerate, fl) = self.cache.value(last);
        tally.readout += fl;
        let (logits, state_logit, fl) = self.net.heads(&ro);
        tally.heads += fl;
        self.readout = ro;
        self.degenerate = degenerate;
        self.logits = logits;
        self.state_logit = state_logit;
        let mut out = self.output(tally, touched, false, incoming.len(), started);
        out.changes = traces;
        Ok(out)
    }
}

/// Applies message deltas of one conv layer and returns its output changes.
fn conv_delta<T: Scalar>(
    conv: &Conv<T>,
    src: &Sources<'_, T>,
    out: &mut FeatureMap<T>,
    tally: &mut FlopTally,
    mut trace: Option<&mut ChangeSet>,
) -> Changes<T> {
    let topo = src.topo;
    let delta = src.delta;
    let scale = topo.attr_scale();
    let d = conv.out_dim;
    let mut next = Changes::<T>::default();

    for &(i, _) in &delta.deleted {
        if let Some(old) = out.values.remove(&i) {
            out.pre.remove(&i);
            next.old.insert(i, old);
            next.deleted.push(i);
        }
    }

    let mut msg = vec![T::zero(); d];
    let added: FxHashSet<NodeId> = delta.added.iter().copied().collect();
    for &i in &delta.added {
        let s = conv_node(topo, src.prev, conv, i, &mut msg);
        let mut a = vec![T::zero(); d];
        conv.activate_into(&s, &mut a);
        tally.conv += conv.node_flops(topo.in_neighbors(i).len());
        if let Some(t) = trace.as_deref_mut() {
            t.edges_added.extend(topo.in_neighbors(i).iter().map(|&j| (j, i)));
        }
        out.pre.insert(i, s);
        out.values.insert(i, a);
        next.added.push(i);
    }

    let requeried: FxHashMap<NodeId, &Vec<NodeId>> = delta.requeried.iter().map(|(i, l)| (*i, l)).collect();
    let mut targets: BTreeSet<NodeId> = BTreeSet::new();
    let changed_sources = src
        .changes
        .updated
        .iter()
        .chain(&src.changes.added)
        .chain(delta.moved.keys());
    for &j in changed_sources {
        targets.extend(topo.out_neighbors(j).iter().copied());
    }
    targets.extend(requeried.keys().copied());
    targets.extend(delta.moved.keys().copied());

    let mut acc = vec![T::zero(); d];
    let mut old_msg = vec![T::zero(); d];
    for i in targets {
        if added.contains(&i) || !topo.contains(i) {
            continue;
        }
        let new_list = topo.in_neighbors(i);
        let old_list: &[NodeId] = requeried.get(&i).map(|l| l.as_slice()).unwrap_or(new_list);
        let moved_i = delta.moved.contains_key(&i);
        let ci_new = topo.coord(i).unwrap();
        let ci_old = delta.moved.get(&i).copied().unwrap_or(ci_new);
        acc.iter_mut().for_each(|v| *v = T::zero());
        let mut terms = 0usize;

        let mut a = 0;
        let mut b = 0;
        while a < old_list.len() || b < new_list.len() {
            let jo = old_list.get(a).copied();
            let jn = new_list.get(b).copied();
            let (j, in_old, in_new) = match (jo, jn) {
                (Some(x), Some(y)) if x == y => (x, true, true),
                (Some(x), Some(y)) if x < y => (x, true, false),
                (Some(x), None) => (x, true, false),
                (_, Some(y)) => (y, false, true),
                (None, None) => unreachable!(),
            };
            if in_old {
                a += 1;
            }
            if in_new {
                b += 1;
            }
            if in_old && in_new && !moved_i && !src.source_changed(j) {
                continue;
            }
            if in_new {
                let e = edge_attr_t(topo.coord(j).unwrap(), ci_new, scale);
                conv.message_into(src.prev.get(j).expect("source feature"), &e, &mut msg);
                for (s, m) in acc.iter_mut().zip(&msg) {
                    *s = *s + *m;
                }
                terms += 1;
            }
            if in_old {
                let e = edge_attr_t(src.old_coord(j), ci_old, scale);
                conv.message_into(src.old_feature(j), &e, &mut old_msg);
                for (s, m) in acc.iter_mut().zip(&old_msg) {
                    *s = *s - *m;
                }
                terms += 1;
            }
            if let Some(t) = trace.as_deref_mut() {
                match (in_old, in_new) {
                    (true, true) => t.edges_updated.push((j, i)),
                    (true, false) => t.edges_deleted.push((j, i)),
                    _ => t.edges_added.push((j, i)),
                }
            }
        }
        if terms == 0 {
            continue;
        }
        tally.conv += terms as u64 * (conv.message_flops() + d as u64) + d as u64 + conv.activate_flops();
        let s = out.pre.get_mut(&i).expect("pre-activation of surviving node");
        for (v, x) in s.iter_mut().zip(&acc) {
            *v = *v + *x;
        }
        let f = out.values.get_mut(&i).unwrap();
        let old = f.clone();
        conv.activate_into(s, f);
        next.old.insert(i, old);
        next.updated.push(i);
    }
    next
}

/// Re-aggregates pooled nodes whose members or member features changed.
#[allow(clippy::too_many_arguments)]
fn pool_delta<T: Scalar>(
    spec: &PoolSpec,
    pg: &PooledGraph,
    input: &dyn Topology,
    regrouped: &[NodeId],
    delta: &TopologyDelta,
    prev: &FeatureMap<T>,
    changes: &Changes<T>,
    out: &mut FeatureMap<T>,
    tally: &mut FlopTally,
) -> Result<Changes<T>, NetError> {
    let mut next = Changes::<T>::default();
    for &(v, _) in &delta.deleted {
        if let Some(old) = out.values.remove(&v) {
            next.old.insert(v, old);
            next.deleted.push(v);
        }
    }
    let mut dirty: BTreeSet<NodeId> = regrouped.iter().copied().collect();
    for &j in &changes.updated {
        dirty.insert(pg.voxel_id(input.coord(j).unwrap())?);
    }
    for &v in &delta.added {
        let (val, fl) = pool_node(pg.members(v), prev, spec.agg);
        tally.pool += fl;
        out.values.insert(v, val);
        next.added.push(v);
    }
    for v in dirty {
        if !pg.contains(v) || out.get(v).is_none() {
            continue;
        }
        let (val, fl) = pool_node(pg.members(v), prev, spec.agg);
        tally.pool += fl;
        let slot = out.values.get_mut(&v).unwrap();
        if *slot != val {
            let old = std::mem::replace(slot, val);
            next.old.insert(v, old);
            next.updated.push(v);
        }
    }
    Ok(next)
}
