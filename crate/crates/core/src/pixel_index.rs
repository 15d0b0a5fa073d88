//! Per-pixel time-ordered event queues with a precomputed disk of pixel
//! offsets. Radius queries run in two stages: the disk selects candidate
//! pixels, then a binary search on each queue cuts out the admissible time
//! interval.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{Event, Micros, Polarity, SensorGeometry};

/// Identifier of a graph node. Event-level nodes use their arrival sequence
/// number; pooled nodes use an encoded voxel key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum IndexError {
    #[error("pixel ({x},{y}) outside sensor {width}x{height}")]
    OutOfBounds {
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    },
    #[error("timestamp {t} already stored at pixel ({x},{y}); retry with t = {hint}")]
    DuplicateTimestamp { x: u32, y: u32, t: Micros, hint: Micros },
    #[error("timestamp {t} at pixel ({x},{y}) is older than the newest entry {newest}")]
    OutOfOrder {
        x: u32,
        y: u32,
        t: Micros,
        newest: Micros,
    },
    #[error("invalid search parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueueEntry {
    pub t: Micros,
    pub p: Polarity,
    pub id: NodeId,
}

/// Search centre in sensor coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Query {
    pub x: u32,
    pub y: u32,
    pub t: Micros,
}

impl From<&Event> for Query {
    fn from(e: &Event) -> Self {
        Query { x: e.x, y: e.y, t: e.t }
    }
}

/// One stored event returned by a radius visit, with its squared weighted
/// distance to the query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: NodeId,
    pub x: u32,
    pub y: u32,
    pub t: Micros,
    pub p: Polarity,
    pub dist2: f64,
}

impl Hit {
    /// Neighbour ranking: distance, then (t, y, x).
    pub fn rank_cmp(&self, other: &Hit) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.t.cmp(&other.t))
            .then(self.y.cmp(&other.y))
            .then(self.x.cmp(&other.x))
    }
}

/// Squared weighted distance if strictly inside the radius.
#[inline]
pub fn weighted_dist2(dx: i64, dy: i64, dt: i64, radius: f64, alpha: f64) -> Option<f64> {
    let scaled = alpha * dt as f64;
    let d2 = (dx * dx + dy * dy) as f64 + scaled * scaled;
    (d2 < radius * radius).then_some(d2)
}

/// Integer pixel offsets strictly inside a disk of radius `R`.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    radius: f64,
    /// (dx, dy, dx²+dy²), row-major.
    offsets: Vec<(i32, i32, i64)>,
}

impl DistanceField {
    pub fn new(radius: f64) -> Self {
        let reach = radius.ceil().max(0.0) as i32;
        let r2 = radius * radius;
        let mut offsets = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let s = i64::from(dx * dx + dy * dy);
                if (s as f64) < r2 {
                    offsets.push((dx, dy, s));
                }
            }
        }
        DistanceField { radius, offsets }
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn offsets(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        self.offsets.iter().map(|&(dx, dy, _)| (dx, dy))
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct PixelQueueIndex {
    geometry: SensorGeometry,
    capacity: Option<usize>,
    queues: Vec<VecDeque<QueueEntry>>,
    field: DistanceField,
    live: usize,
}

impl PixelQueueIndex {
    /// `radius` fixes the cached distance field; queries at other radii build
    /// a temporary one.
    pub fn new(geometry: SensorGeometry, radius: f64) -> Self {
        PixelQueueIndex {
            geometry,
            capacity: None,
            queues: vec![VecDeque::new(); geometry.pixel_count()],
            field: DistanceField::new(radius),
            live: 0,
        }
    }

    pub fn with_capacity_per_pixel(mut self, capacity: usize) -> Self {
        assert!(capacity >= 1, "per-pixel capacity must be positive");
        self.capacity = Some(capacity);
        self
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn field(&self) -> &DistanceField {
        &self.field
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn queue(&self, x: u32, y: u32) -> Option<&VecDeque<QueueEntry>> {
        self.slot(x, y).ok().map(|s| &self.queues[s])
    }

    /// Iterate queues as ((x, y), queue), row-major.
    pub fn queues(&self) -> impl Iterator<Item = ((u32, u32), &VecDeque<QueueEntry>)> {
        let w = self.geometry.width as usize;
        self.queues
            .iter()
            .enumerate()
            .map(move |(i, q)| (((i % w) as u32, (i / w) as u32), q))
    }

    fn slot(&self, x: u32, y: u32) -> Result<usize, IndexError> {
        if self.geometry.contains(x, y) {
            Ok(y as usize * self.geometry.width as usize + x as usize)
        } else {
            Err(IndexError::OutOfBounds {
                x,
                y,
                width: self.geometry.width,
                height: self.geometry.height,
            })
        }
    }

    /// Append at the pixel's tail. Returns the entry pushed out by the
    /// per-pixel capacity, if any.
    pub fn insert(&mut self, event: &Event, id: NodeId) -> Result<Option<QueueEntry>, IndexError> {
        let slot = self.slot(event.x, event.y)?;
        let cap = self.capacity;
        let queue = &mut self.queues[slot];
        if let Some(newest) = queue.back() {
            match event.t.cmp(&newest.t) {
                Ordering::Equal => {
                    return Err(IndexError::DuplicateTimestamp {
                        x: event.x,
                        y: event.y,
                        t: event.t,
                        hint: event.t + 1,
                    })
                }
                Ordering::Less => {
                    return Err(IndexError::OutOfOrder {
                        x: event.x,
                        y: event.y,
                        t: event.t,
                        newest: newest.t,
                    })
                }
                Ordering::Greater => {}
            }
        }
        queue.push_back(QueueEntry {
            t: event.t,
            p: event.p,
            id,
        });
        self.live += 1;
        if cap.is_some_and(|k| queue.len() > k) {
            self.live -= 1;
            return Ok(queue.pop_front());
        }
        Ok(None)
    }

    pub fn remove_oldest(&mut self, x: u32, y: u32) -> Option<QueueEntry> {
        let slot = self.slot(x, y).ok()?;
        let entry = self.queues[slot].pop_front()?;
        self.live -= 1;
        Some(entry)
    }

    /// Visit every stored event with weighted distance `< radius` from the
    /// query. Pixels are visited in distance-field order, entries in time order.
    pub fn visit_within<F>(
        &self,
        query: Query,
        radius: f64,
        alpha: f64,
        mut visit: F,
    ) -> Result<(), IndexError>
    where
        F: FnMut(Hit),
    {
        self.slot(query.x, query.y)?;
        check_params(radius, alpha)?;
        let temp;
        let field = if radius == self.field.radius {
            &self.field
        } else {
            temp = DistanceField::new(radius);
            &temp
        };
        let r2 = radius * radius;
        let (w, h) = (self.geometry.width as i64, self.geometry.height as i64);
        for &(dx, dy, s) in &field.offsets {
            let px = query.x as i64 + dx as i64;
            let py = query.y as i64 + dy as i64;
            if px < 0 || py < 0 || px >= w || py >= h {
                continue;
            }
            let queue = &self.queues[(py * w + px) as usize];
            if queue.is_empty() {
                continue;
            }
            let half = (r2 - s as f64).sqrt() / alpha;
            let t0 = query.t as f64;
            // widened integer bounds; membership is re-checked exactly below
            let lo = (t0 - half).floor() as Micros;
            let hi = (t0 + half).ceil() as Micros;
            let start = queue.partition_point(|e| e.t < lo);
            let end = queue.partition_point(|e| e.t <= hi);
            for e in queue.range(start..end.max(start)) {
                if let Some(dist2) =
                    weighted_dist2(dx as i64, dy as i64, e.t - query.t, radius, alpha)
                {
                    visit(Hit {
                        id: e.id,
                        x: px as u32,
                        y: py as u32,
                        t: e.t,
                        p: e.p,
                        dist2,
                    });
                }
            }
        }
        Ok(())
    }

    /// All stored ids within the radius, ascending.
    pub fn radius_search(
        &self,
        query: Query,
        radius: f64,
        alpha: f64,
    ) -> Result<Vec<NodeId>, IndexError> {
        let mut out = Vec::new();
        self.visit_within(query, radius, alpha, |h| out.push(h.id))?;
        out.sort_unstable();
        Ok(out)
    }

    /// The `max_results` nearest hits accepted by `keep`, in rank order.
    pub fn knearest_filtered<F>(
        &self,
        query: Query,
        radius: f64,
        alpha: f64,
        max_results: usize,
        keep: F,
    ) -> Result<Vec<Hit>, IndexError>
    where
        F: Fn(&Hit) -> bool,
    {
        if max_results == 0 {
            return Err(IndexError::InvalidParameter("D_max must be at least 1".into()));
        }
        let mut hits = Vec::new();
        self.visit_within(query, radius, alpha, |h| {
            if keep(&h) {
                hits.push(h)
            }
        })?;
        if hits.len() > max_results {
            hits.select_nth_unstable_by(max_results - 1, Hit::rank_cmp);
            hits.truncate(max_results);
        }
        hits.sort_by(Hit::rank_cmp);
        Ok(hits)
    }

    pub fn knearest_within(
        &self,
        query: Query,
        radius: f64,
        alpha: f64,
        max_results: usize,
    ) -> Result<Vec<NodeId>, IndexError> {
        Ok(self
            .knearest_filtered(query, radius, alpha, max_results, |_| true)?
            .into_iter()
            .map(|h| h.id)
            .collect())
    }
}

fn check_params(radius: f64, alpha: f64) -> Result<(), IndexError> {
    if !(radius > 0.0) || !(alpha > 0.0) {
        return Err(IndexError::InvalidParameter(format!(
            "radius ({radius}) and temporal scale ({alpha}) must be positive"
        )));
    }
    Ok(())
}

/// Exhaustive scan with the same strict predicate; ids ascending.
pub fn radius_search_bruteforce(
    events: &[(NodeId, Event)],
    query: Query,
    radius: f64,
    alpha: f64,
) -> Vec<NodeId> {
    let mut out: Vec<NodeId> = events
        .iter()
        .filter(|(_, e)| {
            weighted_dist2(
                e.x as i64 - query.x as i64,
                e.y as i64 - query.y as i64,
                e.t - query.t,
                radius,
                alpha,
            )
            .is_some()
        })
        .map(|(id, _)| *id)
        .collect();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ev(x: u32, y: u32, t: Micros) -> Event {
        Event::new(x, y, t, Polarity::Positive)
    }

    fn geom(w: u32, h: u32) -> SensorGeometry {
        SensorGeometry::new(w, h).unwrap()
    }

    #[test]
    fn distance_field_is_open_disk() {
        let f = DistanceField::new(5.0);
        assert!(f.offsets().any(|o| o == (0, 0)));
        assert!(!f.offsets().any(|o| o == (3, 4)));
        assert!(f.offsets().any(|o| o == (3, 3)));
        // lattice points with dx²+dy² < 25
        let mut n = 0;
        for dx in -5i32..=5 {
            for dy in -5i32..=5 {
                if dx * dx + dy * dy < 25 {
                    n += 1;
                }
            }
        }
        assert_eq!(f.len(), n);
    }

    #[test]
    fn insert_and_capacity() {
        let mut idx = PixelQueueIndex::new(geom(4, 4), 2.0);
        assert_eq!(idx.insert(&ev(1, 1, 10), NodeId(0)), Ok(None));
        assert_eq!(idx.queue(1, 1).unwrap().len(), 1);

        let mut cap = PixelQueueIndex::new(geom(4, 4), 2.0).with_capacity_per_pixel(2);
        cap.insert(&ev(0, 0, 1), NodeId(1)).unwrap();
        cap.insert(&ev(0, 0, 2), NodeId(2)).unwrap();
        let out = cap.insert(&ev(0, 0, 3), NodeId(3)).unwrap();
        assert_eq!(out.map(|e| e.id), Some(NodeId(1)));
        let ts: Vec<_> = cap.queue(0, 0).unwrap().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![2, 3]);
        assert_eq!(cap.len(), 2);
    }

    #[test]
    fn duplicate_and_stale_timestamps_rejected() {
        let mut idx = PixelQueueIndex::new(geom(4, 4), 2.0);
        idx.insert(&ev(2, 2, 7), NodeId(0)).unwrap();
        assert_eq!(
            idx.insert(&ev(2, 2, 7), NodeId(1)),
            Err(IndexError::DuplicateTimestamp { x: 2, y: 2, t: 7, hint: 8 })
        );
        assert!(matches!(
            idx.insert(&ev(2, 2, 3), NodeId(1)),
            Err(IndexError::OutOfOrder { .. })
        ));
        assert!(matches!(
            idx.insert(&ev(4, 0, 3), NodeId(1)),
            Err(IndexError::OutOfBounds { .. })
        ));
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn remove_oldest_pops_head() {
        let mut idx = PixelQueueIndex::new(geom(2, 2), 1.0);
        idx.insert(&ev(0, 1, 1), NodeId(0)).unwrap();
        idx.insert(&ev(0, 1, 5), NodeId(1)).unwrap();
        assert_eq!(idx.remove_oldest(0, 1).map(|e| e.t), Some(1));
        assert_eq!(idx.queue(0, 1).unwrap().len(), 1);
        assert_eq!(idx.remove_oldest(0, 1).map(|e| e.t), Some(5));
        assert!(idx.queue(0, 1).unwrap().is_empty());
        assert_eq!(idx.remove_oldest(0, 1), None);
        assert!(idx.is_empty());
    }

    #[test]
    fn counting_and_list_simulation() {
        let g = geom(16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut idx = PixelQueueIndex::new(g, 2.0).with_capacity_per_pixel(8);
        let mut model: Vec<Vec<(Micros, NodeId)>> = vec![Vec::new(); g.pixel_count()];
        let mut inserts = 0usize;
        let mut evictions = 0usize;
        for i in 0..100_000u64 {
            let (x, y) = (rng.random_range(0..16), rng.random_range(0..16));
            let cell = &mut model[(y * 16 + x) as usize];
            if rng.random_bool(0.3) {
                let got = idx.remove_oldest(x, y).map(|e| (e.t, e.id));
                let want = if cell.is_empty() { None } else { Some(cell.remove(0)) };
                assert_eq!(got, want);
                if got.is_some() {
                    evictions += 1;
                }
            } else {
                let t = i as Micros;
                let out = idx.insert(&ev(x, y, t), NodeId(i)).unwrap();
                inserts += 1;
                cell.push((t, NodeId(i)));
                if cell.len() > 8 {
                    let oldest = cell.remove(0);
                    assert_eq!(out.map(|e| (e.t, e.id)), Some(oldest));
                    evictions += 1;
                } else {
                    assert_eq!(out, None);
                }
            }
        }
        assert_eq!(idx.len(), inserts - evictions);
        for ((x, y), q) in idx.queues() {
            let want = &model[(y * 16 + x) as usize];
            let got: Vec<_> = q.iter().map(|e| (e.t, e.id)).collect();
            assert_eq!(&got, want);
            assert!(q.iter().zip(q.iter().skip(1)).all(|(a, b)| a.t < b.t));
        }
    }

    #[test]
    fn empty_and_boundary_queries() {
        let mut idx = PixelQueueIndex::new(geom(20, 20), 5.0);
        let q = Query { x: 5, y: 5, t: 100 };
        assert!(idx.radius_search(q, 5.0, 1.0).unwrap().is_empty());
        // offset (3,4) lies exactly on the sphere even at dt = 0
        idx.insert(&ev(8, 9, 100), NodeId(1)).unwrap();
        idx.insert(&ev(8, 8, 100), NodeId(2)).unwrap();
        assert_eq!(idx.radius_search(q, 5.0, 1.0).unwrap(), vec![NodeId(2)]);
        assert!(idx.radius_search(Query { x: 20, y: 0, t: 0 }, 5.0, 1.0).is_err());
        assert!(idx.radius_search(q, 0.0, 1.0).is_err());
    }

    #[test]
    fn time_bounds_respect_alpha() {
        let mut idx = PixelQueueIndex::new(geom(4, 4), 2.0);
        for (i, t) in [0, 90, 100, 110, 119, 120, 121].iter().enumerate() {
            idx.insert(&ev(1, 1, *t), NodeId(i as u64)).unwrap();
        }
        // R = 2, alpha = 0.1 -> |dt| < 20 at zero spatial offset
        let got = idx.radius_search(Query { x: 1, y: 1, t: 100 }, 2.0, 0.1).unwrap();
        assert_eq!(got, vec![NodeId(1), NodeId(2), NodeId(3), NodeId(4)]);
        // neighbor pixel at distance 1: |dt| < sqrt(3)/0.1 ~ 17.3
        let got = idx.radius_search(Query { x: 2, y: 1, t: 103 }, 2.0, 0.1).unwrap();
        assert_eq!(got, vec![NodeId(1), NodeId(2), NodeId(3), NodeId(4), NodeId(5)]);
    }

    #[test]
    fn single_event_at_query() {
        let e = ev(3, 3, 50);
        let q = Query::from(&e);
        assert_eq!(radius_search_bruteforce(&[(NodeId(9), e)], q, 0.5, 1.0), vec![NodeId(9)]);
        assert!(radius_search_bruteforce(&[], q, 1.0, 1.0).is_empty());
    }

    #[test]
    fn knearest_ties_and_truncation() {
        let mut idx = PixelQueueIndex::new(geom(10, 10), 3.0);
        idx.insert(&ev(4, 5, 100), NodeId(1)).unwrap();
        idx.insert(&ev(6, 5, 100), NodeId(2)).unwrap();
        idx.insert(&ev(5, 6, 90), NodeId(3)).unwrap();
        let q = Query { x: 5, y: 5, t: 100 };
        // spatially equidistant, (5,6) is 10 µs away -> farther
        assert_eq!(idx.knearest_within(q, 3.0, 0.01, 10).unwrap().len(), 3);
        // tie between the two at dt=0: same t, same y -> smaller x first
        assert_eq!(idx.knearest_within(q, 3.0, 0.01, 1).unwrap(), vec![NodeId(1)]);

        let mut idx = PixelQueueIndex::new(geom(10, 10), 3.0);
        idx.insert(&ev(5, 5, 90), NodeId(7)).unwrap();
        idx.insert(&ev(5, 5, 110), NodeId(8)).unwrap();
        // equidistant in time, earlier t wins
        assert_eq!(idx.knearest_within(q, 3.0, 0.01, 1).unwrap(), vec![NodeId(7)]);
        assert!(idx.knearest_within(q, 3.0, 0.01, 0).is_err());
    }

    fn random_store(seed: u64, n: usize, g: SensorGeometry) -> (PixelQueueIndex, Vec<(NodeId, Event)>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events: Vec<Event> = (0..n)
            .map(|_| {
                ev(
                    rng.random_range(0..g.width),
                    rng.random_range(0..g.height),
                    rng.random_range(0..100_000),
                )
            })
            .collect();
        events.sort_by_key(|e| e.t);
        crate::events::perturb_duplicates(&mut events);
        let mut idx = PixelQueueIndex::new(g, 4.0);
        let mut stored = Vec::new();
        for (i, e) in events.into_iter().enumerate() {
            idx.insert(&e, NodeId(i as u64)).unwrap();
            stored.push((NodeId(i as u64), e));
        }
        (idx, stored)
    }

    #[test]
    fn knearest_equals_sorted_bruteforce() {
        let g = geom(40, 30);
        let (idx, stored) = random_store(11, 5000, g);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let q = Query {
                x: rng.random_range(0..40),
                y: rng.random_range(0..30),
                t: rng.random_range(0..100_000),
            };
            let (r, a) = (4.0, 0.002);
            let mut all: Vec<(f64, Micros, u32, u32, NodeId)> = stored
                .iter()
                .filter_map(|(id, e)| {
                    let dx = e.x as f64 - q.x as f64;
                    let dy = e.y as f64 - q.y as f64;
                    let dt = a * (e.t - q.t) as f64;
                    let d2 = dx * dx + dy * dy + dt * dt;
                    (d2 < r * r).then_some((d2, e.t, e.y, e.x, *id))
                })
                .collect();
            all.sort_by(|p, q| p.0.total_cmp(&q.0).then((p.1, p.2, p.3).cmp(&(q.1, q.2, q.3))));
            let want: Vec<NodeId> = all.iter().take(6).map(|v| v.4).collect();
            assert_eq!(idx.knearest_within(q, r, a, 6).unwrap(), want);
        }
    }

    proptest! {
        #[test]
        fn radius_search_matches_bruteforce(
            seed in 0u64..1000,
            n in 0usize..400,
            qx in 0u32..24, qy in 0u32..20, qt in 0i64..100_000,
            radius in 0.5f64..6.0,
            alpha in 1e-5f64..0.01,
        ) {
            let g = geom(24, 20);
            let (idx, stored) = random_store(seed, n, g);
            let q = Query { x: qx, y: qy, t: qt };
            let fast = idx.radius_search(q, radius, alpha).unwrap();
            let slow = radius_search_bruteforce(&stored, q, radius, alpha);
            prop_assert_eq!(&fast, &slow);
            // stage-1 completeness: every hit lies on a candidate pixel
            let field = DistanceField::new(radius);
            for id in slow {
                let e = stored[id.0 as usize].1;
                let off = (e.x as i32 - qx as i32, e.y as i32 - qy as i32);
                prop_assert!(field.offsets().any(|o| o == off));
            }
        }
    }
}
