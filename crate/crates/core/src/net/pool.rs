//! Voxel pooling: one pooled node per occupied voxel, placed at the centroid
//! of its members and connected by the radius rule on pooled coordinates.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::NetError;
use crate::graph::{Coord, Topology, TopologyDelta};
use crate::pixel_index::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolAgg {
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    /// Voxel size (pixels, pixels, microseconds).
    pub voxel: [f64; 3],
    pub agg: PoolAgg,
    /// Neighbour radius of the pooled graph, in scaled units.
    pub radius: f64,
    pub max_degree: usize,
}

impl PoolSpec {
    pub(crate) fn validate(&self, at: usize) -> Result<(), NetError> {
        if self.voxel.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(NetError::Invalid(format!(
                "layer {at}: voxel sizes must be positive, got {:?}",
                self.voxel
            )));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(NetError::Invalid(format!("layer {at}: pool radius must be positive")));
        }
        if self.max_degree == 0 {
            return Err(NetError::Invalid(format!("layer {at}: pool max_degree must be >= 1")));
        }
        Ok(())
    }
}

const T_BIAS: i64 = 1 << 31;

#[derive(Clone, Debug, PartialEq)]
struct PoolNode {
    members: Vec<NodeId>,
    coord: Coord,
    in_nbrs: Vec<NodeId>,
    out_nbrs: Vec<NodeId>,
}

/// Structural outcome of [`PooledGraph::update`].
#[derive(Clone, Debug, Default)]
pub struct PoolUpdate {
    pub topology: TopologyDelta,
    /// Surviving pooled nodes whose member set changed.
    pub regrouped: Vec<NodeId>,
    pub distance_evals: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledGraph {
    spec: PoolSpec,
    alpha: f64,
    nodes: BTreeMap<NodeId, PoolNode>,
}

fn dist2(a: Coord, b: Coord, alpha: f64) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dt = alpha * (a[2] - b[2]);
    dx * dx + dy * dy + dt * dt
}

fn rank_cmp(a: &(f64, Coord, NodeId), b: &(f64, Coord, NodeId)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1[2].total_cmp(&b.1[2]))
        .then(a.1[1].total_cmp(&b.1[1]))
        .then(a.1[0].total_cmp(&b.1[0]))
        .then(a.2.cmp(&b.2))
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

impl PooledGraph {
    pub fn empty(spec: PoolSpec, alpha: f64) -> Self {
        PooledGraph {
            spec,
            alpha,
            nodes: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &PoolSpec {
        &self.spec
    }

    fn key(&self, c: Coord) -> (i64, i64, i64) {
        let v = self.spec.voxel;
        (
            (c[0] / v[0]).floor() as i64,
            (c[1] / v[1]).floor() as i64,
            (c[2] / v[2]).floor() as i64,
        )
    }

    fn encode(k: (i64, i64, i64)) -> Option<NodeId> {
        let kt = k.2 + T_BIAS;
        if !(0..1 << 16).contains(&k.0) || !(0..1 << 16).contains(&k.1) || !(0..1 << 32).contains(&kt) {
            return None;
        }
        Some(NodeId((kt as u64) << 32 | (k.1 as u64) << 16 | k.0 as u64))
    }

    /// Voxel id holding position `c`: packs (kx, ky, kt) as 16/16/32 bits.
    pub fn voxel_id(&self, c: Coord) -> Result<NodeId, NetError> {
        let k = self.key(c);
        Self::encode(k).ok_or_else(|| NetError::Invalid(format!("voxel index {k:?} out of range")))
    }

    pub fn members(&self, id: NodeId) -> &[NodeId] {
        self.nodes.get(&id).map(|n| n.members.as_slice()).unwrap_or(&[])
    }

    /// Pools every node of `input`.
    pub fn build(input: &dyn Topology, spec: &PoolSpec, alpha: f64) -> Result<(Self, u64), NetError> {
        let mut g = PooledGraph::empty(spec.clone(), alpha);
        for j in input.node_ids() {
            let v = g.voxel_id(input.coord(j).unwrap())?;
            g.nodes
                .entry(v)
                .or_insert_with(|| PoolNode {
                    members: Vec::new(),
                    coord: [0.0; 3],
                    in_nbrs: Vec::new(),
                    out_nbrs: Vec::new(),
                })
                .members
                .push(j);
        }
        let ids: Vec<NodeId> = g.nodes.keys().copied().collect();
        for &v in &ids {
            let c = centroid(input, &g.nodes[&v].members);
            g.nodes.get_mut(&v).unwrap().coord = c;
        }
        let mut evals = 0;
        for &v in &ids {
            let (list, e) = g.query(v);
            evals += e;
            for &j in &list {
                g.nodes.get_mut(&j).unwrap().out_nbrs.push(v);
            }
            g.nodes.get_mut(&v).unwrap().in_nbrs = list;
        }
        Ok((g, evals))
    }

    /// Visits every node strictly within the pooled radius of `p`.
    fn visit_near(&self, p: Coord, mut f: impl FnMut(NodeId, Coord, f64)) -> u64 {
        let r = self.spec.radius;
        let r2 = r * r;
        let rt = r / self.alpha;
        let lo = self.key([p[0] - r, p[1] - r, p[2] - rt]);
        let hi = self.key([p[0] + r, p[1] + r, p[2] + rt]);
        let cells = (hi.0 - lo.0 + 1) as f64 * (hi.1 - lo.1 + 1) as f64 * (hi.2 - lo.2 + 1) as f64;
        let mut evals = 0;
        let mut check = |id: NodeId, n: &PoolNode| {
            evals += 1;
            let d2 = dist2(n.coord, p, self.alpha);
            if d2 < r2 {
                f(id, n.coord, d2);
            }
        };
        if cells > self.nodes.len() as f64 {
            for (&id, n) in &self.nodes {
                check(id, n);
            }
        } else {
            for kt in lo.2..=hi.2 {
                for ky in lo.1..=hi.1 {
                    for kx in lo.0..=hi.0 {
                        if let Some(id) = Self::encode((kx, ky, kt)) {
                            if let Some(n) = self.nodes.get(&id) {
                                check(id, n);
                            }
                        }
                    }
                }
            }
        }
        evals
    }

    fn query(&self, v: NodeId) -> (Vec<NodeId>, u64) {
        let c = self.nodes[&v].coord;
        let mut hits = Vec::new();
        let evals = self.visit_near(c, |id, coord, d2| {
            if id != v {
                hits.push((d2, coord, id));
            }
        });
        hits.sort_by(rank_cmp);
        hits.truncate(self.spec.max_degree);
        let mut list: Vec<NodeId> = hits.into_iter().map(|h| h.2).collect();
        list.sort_unstable();
        (list, evals)
    }

    /// Re-pools after the input level changed as described by `delta`;
    /// `input` is the input level after the change.
    pub fn update(&mut self, input: &dyn Topology, delta: &TopologyDelta) -> Result<PoolUpdate, NetError> {
        let mut out = PoolUpdate::default();
        let mut old_coord: HashMap<NodeId, Coord> = HashMap::new();
        let mut touched: BTreeSet<NodeId> = BTreeSet::new();

        let leave = |g: &mut Self, v: NodeId, j: NodeId, old: &mut HashMap<NodeId, Coord>| {
            let n = g.nodes.get_mut(&v).expect("member of unknown voxel");
            old.entry(v).or_insert(n.coord);
            remove_sorted(&mut n.members, j);
        };
        for &(j, c) in &delta.deleted {
            let v = self.voxel_id(c)?;
            leave(self, v, j, &mut old_coord);
            touched.insert(v);
        }
        let mut joins: Vec<(NodeId, NodeId)> = Vec::new();
        for (&j, &c) in &delta.moved {
            let from = self.voxel_id(c)?;
            let to = self.voxel_id(input.coord(j).unwrap())?;
            touched.insert(from);
            if from != to {
                leave(self, from, j, &mut old_coord);
                joins.push((to, j));
            } else {
                old_coord.entry(from).or_insert(self.nodes[&from].coord);
            }
        }
        for &j in &delta.added {
            joins.push((self.voxel_id(input.coord(j).unwrap())?, j));
        }
        let mut created: BTreeSet<NodeId> = BTreeSet::new();
        for (v, j) in joins {
            touched.insert(v);
            match self.nodes.get_mut(&v) {
                Some(n) => {
                    if !created.contains(&v) {
                        old_coord.entry(v).or_insert(n.coord);
                    }
                    insert_sorted(&mut n.members, j);
                }
                None => {
                    created.insert(v);
                    self.nodes.insert(
                        v,
                        PoolNode {
                            members: vec![j],
                            coord: [0.0; 3],
                            in_nbrs: Vec::new(),
                            out_nbrs: Vec::new(),
                        },
                    );
                }
            }
        }

        let mut positions: Vec<Coord> = Vec::new();
        let mut added: Vec<NodeId> = Vec::new();
        for &v in &touched {
            let existed = old_coord.get(&v).copied();
            if self.nodes[&v].members.is_empty() {
                let node = self.nodes.remove(&v).unwrap();
                let c = existed.expect("empty voxel that never existed");
                for &k in &node.in_nbrs {
                    if let Some(n) = self.nodes.get_mut(&k) {
                        remove_sorted(&mut n.out_nbrs, v);
                    }
                }
                out.topology.deleted.push((v, c));
                positions.push(c);
                continue;
            }
            let c = centroid(input, &self.nodes[&v].members);
            self.nodes.get_mut(&v).unwrap().coord = c;
            match existed {
                None => {
                    added.push(v);
                    positions.push(c);
                }
                Some(prev) => {
                    out.regrouped.push(v);
                    if prev != c {
                        out.topology.moved.insert(v, prev);
                        positions.push(prev);
                        positions.push(c);
                    }
                }
            }
        }
        // survivors (and the deleted nodes' former targets) near any change
        let mut requery: BTreeSet<NodeId> = out.topology.moved.keys().copied().collect();
        for p in positions {
            out.distance_evals += self.visit_near(p, |id, _, _| {
                requery.insert(id);
            });
        }
        for v in &added {
            requery.remove(v);
        }
        for &v in &added {
            let (list, e) = self.query(v);
            out.distance_evals += e;
            for &j in &list {
                insert_sorted(&mut self.nodes.get_mut(&j).unwrap().out_nbrs, v);
            }
            self.nodes.get_mut(&v).unwrap().in_nbrs = list;
        }
        for i in requery {
            let old = self.nodes[&i].in_nbrs.clone();
            let (list, e) = self.query(i);
            out.distance_evals += e;
            if list != old {
                for &j in &old {
                    if list.binary_search(&j).is_err() {
                        if let Some(n) = self.nodes.get_mut(&j) {
                            remove_sorted(&mut n.out_nbrs, i);
                        }
                    }
                }
                for &j in &list {
                    if old.binary_search(&j).is_err() {
                        insert_sorted(&mut self.nodes.get_mut(&j).unwrap().out_nbrs, i);
                    }
                }
                self.nodes.get_mut(&i).unwrap().in_nbrs = list;
            }
            out.topology.requeried.push((i, old));
        }
        out.topology.added = added;
        Ok(out)
    }

    /// (id, members, coord, in-neighbours) per node, for equality checks.
    pub fn structure(&self) -> Vec<(NodeId, Vec<NodeId>, Coord, Vec<NodeId>)> {
        self.nodes
            .iter()
            .map(|(&id, n)| (id, n.members.clone(), n.coord, n.in_nbrs.clone()))
            .collect()
    }
}

fn centroid(input: &dyn Topology, members: &[NodeId]) -> Coord {
    let mut c = [0.0; 3];
    for &j in members {
        let p = input.coord(j).unwrap();
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = members.len() as f64;
    c.map(|v| v / n)
}

impl Topology for PooledGraph {
    fn in_neighbors(&self, id: NodeId) -> &[NodeId] {
        self.nodes.get(&id).map(|n| n.in_nbrs.as_slice()).unwrap_or(&[])
    }

    fn out_neighbors(&self, id: NodeId) -> &[NodeId] {
        self.nodes.get(&id).map(|n| n.out_nbrs.as_slice()).unwrap_or(&[])
    }

    fn coord(&self, id: NodeId) -> Option<Coord> {
        self.nodes.get(&id).map(|n| n.coord)
    }

    fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }

    fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn attr_scale(&self) -> (f64, f64) {
        (self.alpha, self.spec.radius)
    }
}
