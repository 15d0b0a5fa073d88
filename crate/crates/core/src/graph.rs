//! Sliding-window radius graph over events.
//!
//! Every node's in-neighbour list is the `max_degree` nearest window events
//! strictly inside the weighted radius, ranked by (distance, t, y, x). That
//! ranking is a total order over distinct events, so the graph is a pure
//! function of the window contents and [`EventGraph::slide`] can be checked
//! against [`EventGraph::build`] for exact equality.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, Micros, SensorGeometry};
use crate::pixel_index::{Hit, IndexError, NodeId, PixelQueueIndex, Query};

/// Node position (x, y, t) in sensor pixels and microseconds.
pub type Coord = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("invalid graph config: {0}")]
    Config(String),
    #[error("incoming event at t={t} precedes window time {newest}")]
    OutOfOrder { t: Micros, newest: Micros },
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    #[default]
    Symmetric,
    /// Only edges from older (or simultaneous) sources.
    Causal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSpec {
    ByTime(Micros),
    ByCount(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub radius: f64,
    pub alpha: f64,
    pub max_degree: usize,
    pub window: WindowSpec,
    #[serde(default = "default_edge_mode")]
    pub edge_mode: EdgeMode,
}

fn default_edge_mode() -> EdgeMode {
    EdgeMode::Symmetric
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(GraphError::Config(format!("radius must be positive, got {}", self.radius)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(GraphError::Config(format!(
                "temporal scale must be positive, got {}",
                self.alpha
            )));
        }
        if self.max_degree == 0 {
            return Err(GraphError::Config("max_degree must be at least 1".into()));
        }
        match self.window {
            WindowSpec::ByTime(w) if w <= 0 => {
                Err(GraphError::Config(format!("time window must be positive, got {w}")))
            }
            WindowSpec::ByCount(0) => Err(GraphError::Config("count window must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// Temporal scale that stretches a time window over the sensor diagonal.
pub fn default_alpha(geometry: SensorGeometry, window_us: Micros) -> f64 {
    geometry.diagonal() / window_us.max(1) as f64
}

/// Relative source position, (dx, dy, alpha*dt) / radius.
#[inline]
pub fn edge_attr(src: Coord, dst: Coord, alpha: f64, radius: f64) -> [f64; 3] {
    [
        (src[0] - dst[0]) / radius,
        (src[1] - dst[1]) / radius,
        alpha * (src[2] - dst[2]) / radius,
    ]
}

pub fn event_coord(e: &Event) -> Coord {
    [f64::from(e.x), f64::from(e.y), e.t as f64]
}

/// Which stored events must be evicted. `window` is oldest first; for the
/// time window, everything with `t <= now - w` goes, for the count window the
/// oldest entries go until `count <= k`.
pub fn window_membership(spec: WindowSpec, window: &[(NodeId, Micros)], now: Micros) -> Vec<NodeId> {
    let n = evict_prefix(spec, window.len(), |i| window[i].1, now);
    window[..n].iter().map(|(id, _)| *id).collect()
}

fn evict_prefix(spec: WindowSpec, len: usize, t_at: impl Fn(usize) -> Micros, now: Micros) -> usize {
    match spec {
        WindowSpec::ByCount(k) => len.saturating_sub(k),
        WindowSpec::ByTime(w) => {
            let cutoff = now.saturating_sub(w);
            let mut n = 0;
            while n < len && t_at(n) <= cutoff {
                n += 1;
            }
            n
        }
    }
}

/// Optional extra predicate on candidate edges (for example an event-surface
/// test). It must be a pure function of the two events.
pub trait EdgeFilter: Send + Sync {
    fn keep(&self, src: &Event, dst: &Event) -> bool;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AllEdges;

impl EdgeFilter for AllEdges {
    fn keep(&self, _src: &Event, _dst: &Event) -> bool {
        true
    }
}

/// Per-layer node and edge change sets.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ChangeSet {
    pub added: Vec<NodeId>,
    pub deleted: Vec<NodeId>,
    pub updated: Vec<NodeId>,
    pub edges_added: Vec<(NodeId, NodeId)>,
    pub edges_deleted: Vec<(NodeId, NodeId)>,
    pub edges_updated: Vec<(NodeId, NodeId)>,
}

impl ChangeSet {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.deleted.is_empty() && self.updated.is_empty()
    }

    /// All touched nodes, V_add ∪ V_del ∪ V_up.
    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.added
            .iter()
            .chain(&self.deleted)
            .chain(&self.updated)
            .copied()
    }
}

/// Structural changes of one graph level during one slide, as needed to
/// derive message deltas.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopologyDelta {
    pub added: Vec<NodeId>,
    /// Deleted nodes with their last position.
    pub deleted: Vec<(NodeId, Coord)>,
    /// Surviving nodes whose neighbour list was recomputed, with the list
    /// before this slide (which may equal the current one). Ascending by id.
    pub requeried: Vec<(NodeId, Vec<NodeId>)>,
    /// Surviving nodes whose position changed, with the old position.
    pub moved: HashMap<NodeId, Coord>,
}

impl TopologyDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty()
            && self.deleted.is_empty()
            && self.requeried.is_empty()
            && self.moved.is_empty()
    }

    /// Surviving nodes whose neighbour list actually changed.
    pub fn rewired<'a>(&'a self, current: &'a impl Topology) -> impl Iterator<Item = NodeId> + 'a {
        self.requeried
            .iter()
            .filter(move |(id, old)| current.in_neighbors(*id) != old.as_slice())
            .map(|(id, _)| *id)
    }
}

/// Read view shared by the event graph and pooled graphs.
pub trait Topology {
    /// Ascending by id. Empty for unknown ids.
    fn in_neighbors(&self, id: NodeId) -> &[NodeId];
    /// Targets that list `id` as an in-neighbour, ascending.
    fn out_neighbors(&self, id: NodeId) -> &[NodeId];
    fn coord(&self, id: NodeId) -> Option<Coord>;
    fn contains(&self, id: NodeId) -> bool {
        self.coord(id).is_some()
    }
    /// All node ids, ascending.
    fn node_ids(&self) -> Vec<NodeId>;
    fn node_count(&self) -> usize;
    /// (alpha, radius) used for edge attributes.
    fn attr_scale(&self) -> (f64, f64);
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct RankKey {
    dist2: f64,
    t: Micros,
    y: u32,
    x: u32,
}

impl RankKey {
    fn of(h: &Hit) -> Self {
        RankKey {
            dist2: h.dist2,
            t: h.t,
            y: h.y,
            x: h.x,
        }
    }

    fn less(&self, other: &RankKey) -> bool {
        self.dist2
            .total_cmp(&other.dist2)
            .then((self.t, self.y, self.x).cmp(&(other.t, other.y, other.x)))
            .is_lt()
    }
}

#[derive(Clone, Debug)]
struct NodeSlot {
    event: Event,
    in_nbrs: Vec<NodeId>,
    out_nbrs: Vec<NodeId>,
    /// Rank of the farthest kept neighbour when the list is full.
    worst: Option<RankKey>,
}

fn insert_sorted(v: &mut Vec<NodeId>, id: NodeId) {
    if let Err(pos) = v.binary_search(&id) {
        v.insert(pos, id);
    }
}

fn remove_sorted(v: &mut Vec<NodeId>, id: NodeId) {
    if let Ok(pos) = v.binary_search(&id) {
        v.remove(pos);
    }
}

/// Result of one [`EventGraph::slide`].
#[derive(Clone, Debug, Default)]
pub struct SlideDelta {
    /// Layer-0 change set: V_add, V_del, with V_up and the edge sets empty.
    pub changes: ChangeSet,
    pub topology: TopologyDelta,
    /// Incoming events that fell outside the window before being inserted.
    pub skipped: usize,
    /// Weighted-distance evaluations spent on maintenance.
    pub distance_evals: u64,
}

#[derive(Clone)]
pub struct EventGraph {
    config: GraphConfig,
    index: PixelQueueIndex,
    nodes: VecDeque<NodeSlot>,
    /// Id of `nodes[0]`.
    front: u64,
    newest_t: Option<Micros>,
    filter: Arc<dyn EdgeFilter>,
}

impl std::fmt::Debug for EventGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventGraph")
            .field("config", &self.config)
            .field("nodes", &self.nodes.len())
            .field("front", &self.front)
            .finish()
    }
}

impl EventGraph {
    pub fn new(geometry: SensorGeometry, config: GraphConfig) -> Result<Self, GraphError> {
        config.validate()?;
        Ok(EventGraph {
            config,
            index: PixelQueueIndex::new(geometry, config.radius),
            nodes: VecDeque::new(),
            front: 0,
            newest_t: None,
            filter: Arc::new(AllEdges),
        })
    }

    pub fn with_edge_filter(mut self, filter: Arc<dyn EdgeFilter>) -> Self {
        assert!(self.nodes.is_empty(), "edge filter must be set on an empty graph");
        self.filter = filter;
        self
    }

    /// From-scratch construction over `window` (time sorted, unique per
    /// pixel-time); node ids are `first_id, first_id + 1, ...`.
    pub fn build(
        geometry: SensorGeometry,
        config: GraphConfig,
        window: &[Event],
        first_id: u64,
    ) -> Result<Self, GraphError> {
        Self::build_filtered(geometry, config, window, first_id, Arc::new(AllEdges))
    }

    pub fn build_filtered(
        geometry: SensorGeometry,
        config: GraphConfig,
        window: &[Event],
        first_id: u64,
        filter: Arc<dyn EdgeFilter>,
    ) -> Result<Self, GraphError> {
        let mut g = EventGraph::new(geometry, config)?.with_edge_filter(filter);
        g.front = first_id;
        for (k, e) in window.iter().enumerate() {
            if let Some(prev) = g.newest_t {
                if e.t < prev {
                    return Err(GraphError::OutOfOrder { t: e.t, newest: prev });
                }
            }
            g.index.insert(e, NodeId(first_id + k as u64))?;
            g.newest_t = Some(e.t);
            g.nodes.push_back(NodeSlot {
                event: *e,
                in_nbrs: Vec::new(),
                out_nbrs: Vec::new(),
                worst: None,
            });
        }
        for k in 0..g.nodes.len() {
            let id = NodeId(first_id + k as u64);
            let (list, worst, _) = g.query_neighbors(id)?;
            let slot = &mut g.nodes[k];
            slot.in_nbrs = list;
            slot.worst = worst;
        }
        for k in 0..g.nodes.len() {
            let id = NodeId(first_id + k as u64);
            for j in g.nodes[k].in_nbrs.clone() {
                let s = g.slot_mut(j).expect("neighbour in window");
                s.out_nbrs.push(id);
            }
        }
        Ok(g)
    }

    pub fn config(&self) -> &GraphConfig {
        &self.config
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.index.geometry()
    }

    pub fn index(&self) -> &PixelQueueIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Id the next inserted event will receive.
    pub fn next_id(&self) -> u64 {
        self.front + self.nodes.len() as u64
    }

    pub fn newest_time(&self) -> Option<Micros> {
        self.newest_t
    }

    fn pos(&self, id: NodeId) -> Option<usize> {
        let k = id.0.checked_sub(self.front)? as usize;
        (k < self.nodes.len()).then_some(k)
    }

    fn slot(&self, id: NodeId) -> Option<&NodeSlot> {
        self.pos(id).map(|k| &self.nodes[k])
    }

    fn slot_mut(&mut self, id: NodeId) -> Option<&mut NodeSlot> {
        self.pos(id).map(move |k| &mut self.nodes[k])
    }

    pub fn event(&self, id: NodeId) -> Option<&Event> {
        self.slot(id).map(|s| &s.event)
    }

    /// Window contents oldest first.
    pub fn events(&self) -> impl Iterator<Item = (NodeId, &Event)> {
        let front = self.front;
        self.nodes
            .iter()
            .enumerate()
            .map(move |(k, s)| (NodeId(front + k as u64), &s.event))
    }

    pub fn edge_count(&self) -> usize {
        self.nodes.iter().map(|s| s.in_nbrs.len()).sum()
    }

    pub fn max_in_degree(&self) -> usize {
        self.nodes.iter().map(|s| s.in_nbrs.len()).max().unwrap_or(0)
    }

    /// Attribute of edge `src -> dst`.
    pub fn edge_attribute(&self, src: NodeId, dst: NodeId) -> Option<[f64; 3]> {
        let (a, b) = (self.event(src)?, self.event(dst)?);
        Some(edge_attr(event_coord(a), event_coord(b), self.config.alpha, self.config.radius))
    }

    fn accepts(&self, src: &Hit, dst: &Event) -> bool {
        if self.config.edge_mode == EdgeMode::Causal && src.t > dst.t {
            return false;
        }
        let src_event = Event::new(src.x, src.y, src.t, src.p);
        self.filter.keep(&src_event, dst)
    }

    fn query_neighbors(
        &self,
        id: NodeId,
    ) -> Result<(Vec<NodeId>, Option<RankKey>, u64), GraphError> {
        let dst = self.event(id).copied().expect("queried node in window");
        let c = self.config;
        let mut evals = 0u64;
        let hits = self.index.knearest_filtered(Query::from(&dst), c.radius, c.alpha, c.max_degree, |h| {
            h.id != id && self.accepts(h, &dst)
        })?;
        evals += hits.len() as u64;
        let worst = (hits.len() == c.max_degree).then(|| RankKey::of(hits.last().unwrap()));
        let mut list: Vec<NodeId> = hits.iter().map(|h| h.id).collect();
        list.sort_unstable();
        Ok((list, worst, evals))
    }

    fn validate_incoming(&self, incoming: &[Event]) -> Result<(), GraphError> {
        let mut newest = self.newest_t;
        let mut batch_last: HashMap<(u32, u32), Micros> = HashMap::new();
        let g = self.index.geometry();
        for e in incoming {
            if let Some(n) = newest {
                if e.t < n {
                    return Err(GraphError::OutOfOrder { t: e.t, newest: n });
                }
            }
            newest = Some(e.t);
            if !g.contains(e.x, e.y) {
                return Err(IndexError::OutOfBounds {
                    x: e.x,
                    y: e.y,
                    width: g.width,
                    height: g.height,
                }
                .into());
            }
            let prev = batch_last
                .get(&(e.x, e.y))
                .copied()
                .or_else(|| self.index.queue(e.x, e.y).and_then(|q| q.back()).map(|q| q.t));
            if prev == Some(e.t) {
                return Err(IndexError::DuplicateTimestamp {
                    x: e.x,
                    y: e.y,
                    t: e.t,
                    hint: e.t + 1,
                }
                .into());
            }
            batch_last.insert((e.x, e.y), e.t);
        }
        Ok(())
    }

    /// Slide `incoming` (time sorted, not older than the window) into the
    /// window, evict what the window bound excludes and repair every
    /// neighbour list that changes.
    pub fn slide(&mut self, incoming: &[Event]) -> Result<SlideDelta, GraphError> {
        self.validate_incoming(incoming)?;
        let mut delta = SlideDelta::default();
        if incoming.is_empty() {
            return Ok(delta);
        }
        let now = incoming.last().unwrap().t;
        let existing = self.nodes.len();
        let total = existing + incoming.len();
        let evict_total = evict_prefix(
            self.config.window,
            total,
            |i| {
                if i < existing {
                    self.nodes[i].event.t
                } else {
                    incoming[i - existing].t
                }
            },
            now,
        );
        let evict_existing = evict_total.min(existing);
        let skip = evict_total - evict_existing;
        delta.skipped = skip;
        self.newest_t = Some(now);

        let new_front = self.front + evict_existing as u64;
        let mut requery: BTreeSet<NodeId> = BTreeSet::new();

        // slide out
        for _ in 0..evict_existing {
            let slot = self.nodes.pop_front().unwrap();
            let id = NodeId(self.front);
            self.front += 1;
            let removed = self.index.remove_oldest(slot.event.x, slot.event.y);
            debug_assert_eq!(removed.map(|e| e.id), Some(id));
            for &i in &slot.out_nbrs {
                if i.0 >= new_front {
                    requery.insert(i);
                }
            }
            for &k in &slot.in_nbrs {
                if let Some(s) = self.slot_mut(k) {
                    remove_sorted(&mut s.out_nbrs, id);
                }
            }
            delta.changes.deleted.push(id);
            delta.topology.deleted.push((id, event_coord(&slot.event)));
        }

        // slide in
        let first_new = self.next_id();
        for e in &incoming[skip..] {
            let id = NodeId(self.next_id());
            self.index.insert(e, id)?;
            self.nodes.push_back(NodeSlot {
                event: *e,
                in_nbrs: Vec::new(),
                out_nbrs: Vec::new(),
                worst: None,
            });
            delta.changes.added.push(id);
        }
        let end = self.next_id();
        for raw in first_new..end {
            let id = NodeId(raw);
            let (list, worst, evals) = self.query_neighbors(id)?;
            delta.distance_evals += evals;
            for &j in &list {
                insert_sorted(&mut self.slot_mut(j).unwrap().out_nbrs, id);
            }
            let s = self.slot_mut(id).unwrap();
            s.in_nbrs = list;
            s.worst = worst;
        }

        // survivors that may take a new node into their list
        let c = self.config;
        for raw in first_new..end {
            let src = *self.event(NodeId(raw)).unwrap();
            let mut candidates = Vec::new();
            self.index
                .visit_within(Query::from(&src), c.radius, c.alpha, |h| {
                    if h.id.0 < first_new {
                        candidates.push(h);
                    }
                })
                .map_err(GraphError::from)?;
            delta.distance_evals += candidates.len() as u64;
            for h in candidates {
                let (dst, full, worst) = {
                    let s = self.slot(h.id).unwrap();
                    (s.event, s.in_nbrs.len() >= c.max_degree, s.worst)
                };
                let as_src = Hit {
                    id: NodeId(raw),
                    x: src.x,
                    y: src.y,
                    t: src.t,
                    p: src.p,
                    dist2: h.dist2,
                };
                if !self.accepts(&as_src, &dst) {
                    continue;
                }
                let better = match worst {
                    Some(w) if full => RankKey::of(&as_src).less(&w),
                    _ => true,
                };
                if better {
                    requery.insert(h.id);
                }
            }
        }

        for i in requery {
            let old = self.slot(i).unwrap().in_nbrs.clone();
            let (list, worst, evals) = self.query_neighbors(i)?;
            delta.distance_evals += evals;
            if list != old {
                for &j in &old {
                    if list.binary_search(&j).is_err() {
                        if let Some(s) = self.slot_mut(j) {
                            remove_sorted(&mut s.out_nbrs, i);
                        }
                    }
                }
                for &j in &list {
                    if old.binary_search(&j).is_err() {
                        insert_sorted(&mut self.slot_mut(j).unwrap().out_nbrs, i);
                    }
                }
            }
            let s = self.slot_mut(i).unwrap();
            s.in_nbrs = list;
            s.worst = worst;
            delta.topology.requeried.push((i, old));
        }
        delta.topology.added = delta.changes.added.clone();
        Ok(delta)
    }

    /// (id, event, in-neighbours) for every node; equal for two graphs iff
    /// they hold the same window and adjacency.
    pub fn structure(&self) -> Vec<(NodeId, Event, Vec<NodeId>)> {
        self.events()
            .map(|(id, e)| (id, *e, self.in_neighbors(id).to_vec()))
            .collect()
    }

    /// Check out-lists mirror in-lists, degree cap and edge predicates.
    pub fn check_consistency(&self) -> Result<(), String> {
        let c = self.config;
        let mut mirrored: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for (i, e) in self.events() {
            let nbrs = self.in_neighbors(i);
            if nbrs.len() > c.max_degree {
                return Err(format!("node {i} has in-degree {}", nbrs.len()));
            }
            if !nbrs.windows(2).all(|w| w[0] < w[1]) {
                return Err(format!("node {i} neighbour list not ascending"));
            }
            for &j in nbrs {
                let src = self.event(j).ok_or(format!("edge {j}->{i} from outside window"))?;
                if c.edge_mode == EdgeMode::Causal && src.t > e.t {
                    return Err(format!("edge {j}->{i} points backward in time"));
                }
                let a = self.edge_attribute(j, i).unwrap();
                if a.iter().any(|v| v.abs() >= 1.0) {
                    return Err(format!("edge {j}->{i} attribute {a:?} outside (-1,1)"));
                }
                mirrored.entry(j).or_default().push(i);
            }
        }
        for (j, _) in self.events() {
            let mut want = mirrored.remove(&j).unwrap_or_default();
            want.sort_unstable();
            if self.out_neighbors(j) != want.as_slice() {
                return Err(format!("out-list of {j} does not mirror in-lists"));
            }
        }
        Ok(())
    }

    pub fn to_dump(&self) -> GraphDump {
        let nodes = self
            .events()
            .map(|(id, e)| DumpNode {
                id,
                x: e.x,
                y: e.y,
                t: e.t,
                p: e.p.value(),
            })
            .collect();
        let mut edges = Vec::new();
        for (i, _) in self.events() {
            for &j in self.in_neighbors(i) {
                edges.push(DumpEdge {
                    src: j,
                    dst: i,
                    attr: self.edge_attribute(j, i).unwrap(),
                });
            }
        }
        GraphDump { nodes, edges }
    }
}

impl Topology for EventGraph {
    fn in_neighbors(&self, id: NodeId) -> &[NodeId] {
        self.slot(id).map(|s| s.in_nbrs.as_slice()).unwrap_or(&[])
    }

    fn out_neighbors(&self, id: NodeId) -> &[NodeId] {
        self.slot(id).map(|s| s.out_nbrs.as_slice()).unwrap_or(&[])
    }

    fn coord(&self, id: NodeId) -> Option<Coord> {
        self.event(id).map(event_coord)
    }

    fn node_ids(&self) -> Vec<NodeId> {
        (self.front..self.next_id()).map(NodeId).collect()
    }

    fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn attr_scale(&self) -> (f64, f64) {
        (self.config.alpha, self.config.radius)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpNode {
    pub id: NodeId,
    pub x: u32,
    pub y: u32,
    pub t: Micros,
    pub p: i8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpEdge {
    pub src: NodeId,
    pub dst: NodeId,
    pub attr: [f64; 3],
}

/// Debug dump: `{"nodes":[{id,x,y,t,p}],"edges":[{src,dst,attr}]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub nodes: Vec<DumpNode>,
    pub edges: Vec<DumpEdge>,
}
