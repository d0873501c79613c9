//! Static world definition: procedurally built towns, weather presets, and
//! route planning over the directed lane graph.
//!
//! A town is a grid street network with a seeded set of edge deletions. Every
//! undirected street carries two directed lanes (right-hand traffic). Lanes
//! are trimmed back from node centers; traversals across a node follow
//! precomputed connection curves. Town construction is a pure function of
//! `(TownId, seed)`.

use crate::geom::{quadratic_bezier, resample_polyline, wrap_angle, Pose, Vec2};
use crate::rng::SimRng;
use crate::sim::HighLevelCommand;
use serde::{Deserialize, Serialize};
use std::collections::BinaryHeap;
use std::fmt;

pub const LANE_WIDTH: f64 = 4.0;
pub const LANE_OFFSET: f64 = 2.0;
pub const POLYLINE_STEP: f64 = 2.0;
/// Commands switch away from LaneFollow this far before an intersection entry.
pub const COMMAND_WINDOW_BEFORE_M: f64 = 15.0;
/// A pose farther than this from every route waypoint is off-route.
pub const OFF_ROUTE_DISTANCE_M: f64 = 20.0;

const INTERSECTION_TRIM_M: f64 = 7.0;
const BEND_TRIM_M: f64 = 5.0;
const MIN_SPAWN_LANE_LEN_M: f64 = 12.0;

pub const MAP_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TownId {
    TownA,
    TownB,
}

impl TownId {
    pub fn name(self) -> &'static str {
        match self {
            TownId::TownA => "TownA",
            TownId::TownB => "TownB",
        }
    }

    pub fn parse(s: &str) -> Option<TownId> {
        match s {
            "TownA" => Some(TownId::TownA),
            "TownB" => Some(TownId::TownB),
            _ => None,
        }
    }
}

impl fmt::Display for TownId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeatherId {
    ClearNoon,
    ClearNoonAfterRain,
    HeavyRainNoon,
    ClearSunset,
    AfterRainSunset,
    SoftRainSunset,
}

impl WeatherId {
    pub const ALL: [WeatherId; 6] = [
        WeatherId::ClearNoon,
        WeatherId::ClearNoonAfterRain,
        WeatherId::HeavyRainNoon,
        WeatherId::ClearSunset,
        WeatherId::AfterRainSunset,
        WeatherId::SoftRainSunset,
    ];

    /// The four weathers seen during data collection.
    pub const TRAINING: [WeatherId; 4] = [
        WeatherId::ClearNoon,
        WeatherId::ClearNoonAfterRain,
        WeatherId::HeavyRainNoon,
        WeatherId::ClearSunset,
    ];

    /// The two weathers reserved for evaluation.
    pub const HELD_OUT: [WeatherId; 2] = [WeatherId::AfterRainSunset, WeatherId::SoftRainSunset];

    pub fn name(self) -> &'static str {
        match self {
            WeatherId::ClearNoon => "ClearNoon",
            WeatherId::ClearNoonAfterRain => "ClearNoonAfterRain",
            WeatherId::HeavyRainNoon => "HeavyRainNoon",
            WeatherId::ClearSunset => "ClearSunset",
            WeatherId::AfterRainSunset => "AfterRainSunset",
            WeatherId::SoftRainSunset => "SoftRainSunset",
        }
    }

    pub fn parse(s: &str) -> Option<WeatherId> {
        WeatherId::ALL.into_iter().find(|w| w.name() == s)
    }

    pub fn is_training(self) -> bool {
        WeatherId::TRAINING.contains(&self)
    }
}

impl fmt::Display for WeatherId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Weather acts on the observation only: a brightness multiplier and additive
/// per-cell noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weather {
    pub id: WeatherId,
    pub brightness_scale: f64,
    pub noise_sigma: f64,
}

impl Weather {
    pub fn from_id(id: WeatherId) -> Weather {
        let (brightness_scale, noise_sigma) = match id {
            WeatherId::ClearNoon => (1.0, 0.0),
            WeatherId::ClearNoonAfterRain => (0.9, 0.02),
            WeatherId::HeavyRainNoon => (0.7, 0.06),
            WeatherId::ClearSunset => (0.8, 0.01),
            WeatherId::AfterRainSunset => (0.75, 0.03),
            WeatherId::SoftRainSunset => (0.85, 0.04),
        };
        Weather {
            id,
            brightness_scale,
            noise_sigma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LaneId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Lane {
    pub id: LaneId,
    pub from_node: usize,
    pub to_node: usize,
    pub width: f64,
    /// Centerline points at <= 2 m spacing; the first and last points are the
    /// trimmed entry and exit of the street.
    pub points: Vec<Vec2>,
    pub length: f64,
    pub successors: Vec<LaneId>,
}

/// Curve joining a lane end to a successor lane start across a node.
#[derive(Clone, Debug, PartialEq)]
pub struct Connection {
    pub from: LaneId,
    pub to: LaneId,
    pub points: Vec<Vec2>,
    pub length: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LightId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct TrafficLightDef {
    pub id: LightId,
    /// The approach lane this light controls; its stop line sits at the lane end.
    pub lane: LaneId,
    /// Lights in the same group at a node share a phase; groups alternate.
    pub phase_group: u8,
    /// Per-node phase offset in seconds.
    pub offset_s: f64,
    pub position: Vec2,
    pub stop_line: (Vec2, Vec2),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpawnPoint {
    pub lane: LaneId,
    /// Arc position along the lane.
    pub s: f64,
    pub pose: Pose,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intersection {
    pub node: usize,
    pub center: Vec2,
    pub approaches: Vec<LaneId>,
}

/// World-aligned occupancy raster derived from the lane geometry, used by the
/// observation renderer and the off-road check. Not serialized; rebuilt from
/// lanes on load.
#[derive(Clone, Debug, PartialEq)]
pub struct TownRaster {
    pub origin: Vec2,
    pub res: f64,
    pub w: usize,
    pub h: usize,
    pub drivable: Vec<u8>,
    pub marking: Vec<u8>,
}

impl TownRaster {
    pub fn sample(&self, chan: &[u8], p: Vec2) -> u8 {
        let cx = ((p.x - self.origin.x) / self.res).floor();
        let cy = ((p.y - self.origin.y) / self.res).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.w as f64 || cy >= self.h as f64 {
            return 0;
        }
        chan[cy as usize * self.w + cx as usize]
    }

    pub fn drivable_at(&self, p: Vec2) -> bool {
        self.sample(&self.drivable, p) > 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TownMap {
    pub id: TownId,
    pub seed: u64,
    pub nodes: Vec<Vec2>,
    pub lanes: Vec<Lane>,
    /// Indexed in parallel with lane successors: `connections[lane][k]`
    /// joins `lane` to `lanes[lane].successors[k]`.
    pub connections: Vec<Vec<Connection>>,
    pub intersections: Vec<Intersection>,
    pub traffic_lights: Vec<TrafficLightDef>,
    pub spawn_points: Vec<SpawnPoint>,
    pub raster: TownRaster,
}

#[derive(Debug, thiserror::Error)]
pub enum TownError {
    #[error("no path between spawn points {start} and {goal}")]
    NoPath { start: usize, goal: usize },
    #[error("pose is more than {OFF_ROUTE_DISTANCE_M} m from every route waypoint")]
    OffRoute,
    #[error("invalid spawn index {0}")]
    BadSpawnIndex(usize),
    #[error("map parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

// ---------------------------------------------------------------------------
// Polyline utilities shared by routes, lanes and agents.
// ---------------------------------------------------------------------------

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].dist(w[1])).sum()
}

/// Point and tangent heading at arc position `s` (clamped to the ends).
pub fn polyline_point_at(points: &[Vec2], s: f64) -> (Vec2, f64) {
    debug_assert!(points.len() >= 2);
    let mut remaining = s.max(0.0);
    for w in points.windows(2) {
        let seg = w[0].dist(w[1]);
        if remaining <= seg || seg == 0.0 {
            let t = if seg > 0.0 { remaining / seg } else { 0.0 };
            let p = w[0] + (w[1] - w[0]).scale(t.min(1.0));
            return (p, (w[1] - w[0]).angle());
        }
        remaining -= seg;
    }
    let n = points.len();
    (points[n - 1], (points[n - 1] - points[n - 2]).angle())
}

/// Project `p` onto the polyline: returns (arc position, signed lateral
/// offset, distance). Lateral is positive when `p` is left of travel.
pub fn polyline_project(points: &[Vec2], p: Vec2) -> (f64, f64, f64) {
    let mut best = (0.0, 0.0, f64::INFINITY);
    let mut arc = 0.0;
    for w in points.windows(2) {
        let ab = w[1] - w[0];
        let seg = ab.norm();
        if seg == 0.0 {
            continue;
        }
        let t = ((p - w[0]).dot(ab) / (seg * seg)).clamp(0.0, 1.0);
        let proj = w[0] + ab.scale(t);
        let d = p.dist(proj);
        if d < best.2 {
            let lateral = ab.scale(1.0 / seg).cross(p - w[0]);
            best = (arc + t * seg, lateral, d);
        }
        arc += seg;
    }
    best
}

// ---------------------------------------------------------------------------
// Town construction
// ---------------------------------------------------------------------------

struct GridSpec {
    nx: usize,
    ny: usize,
    spacing: f64,
    deletions: usize,
}

impl GridSpec {
    fn for_town(id: TownId) -> GridSpec {
        match id {
            TownId::TownA => GridSpec {
                nx: 5,
                ny: 5,
                spacing: 80.0,
                deletions: 4,
            },
            TownId::TownB => GridSpec {
                nx: 4,
                ny: 3,
                spacing: 64.0,
                deletions: 2,
            },
        }
    }
}

fn undirected_connected(n_nodes: usize, edges: &[(usize, usize)]) -> bool {
    if n_nodes == 0 {
        return true;
    }
    let mut adj = vec![Vec::new(); n_nodes];
    for &(u, v) in edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut seen = vec![false; n_nodes];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n_nodes
}

/// Strong connectivity of the no-U-turn directed lane graph induced by an
/// undirected edge set: lanes are directed edges, and a lane (u,v) feeds every
/// lane (v,w) with w != u.
fn lane_graph_strongly_connected(n_nodes: usize, edges: &[(usize, usize)]) -> bool {
    let mut lanes = Vec::new();
    for &(u, v) in edges {
        lanes.push((u, v));
        lanes.push((v, u));
    }
    if lanes.is_empty() {
        return false;
    }
    let mut out_by_node = vec![Vec::new(); n_nodes];
    for (i, &(u, _)) in lanes.iter().enumerate() {
        out_by_node[u].push(i);
    }
    let succ: Vec<Vec<usize>> = lanes
        .iter()
        .map(|&(u, v)| {
            out_by_node[v]
                .iter()
                .copied()
                .filter(|&j| lanes[j].1 != u)
                .collect()
        })
        .collect();
    let mut pred = vec![Vec::new(); lanes.len()];
    for (i, ss) in succ.iter().enumerate() {
        for &j in ss {
            pred[j].push(i);
        }
    }
    let reach = |adj: &Vec<Vec<usize>>| -> usize {
        let mut seen = vec![false; lanes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    stack.push(j);
                }
            }
        }
        count
    };
    reach(&succ) == lanes.len() && reach(&pred) == lanes.len()
}

/// Build a town. Deterministic for a given `(id, seed)`.
pub fn build_town(id: TownId, seed: u64) -> TownMap {
    let spec = GridSpec::for_town(id);
    let mut rng = SimRng::stream(seed, &format!("town-{}", id.name()));

    let node_at = |i: usize, j: usize| i * spec.ny + j;
    let mut nodes = Vec::with_capacity(spec.nx * spec.ny);
    for i in 0..spec.nx {
        for j in 0..spec.ny {
            nodes.push(Vec2::new(i as f64 * spec.spacing, j as f64 * spec.spacing));
        }
    }

    let mut edges: Vec<(usize, usize)> = Vec::new();
    for i in 0..spec.nx {
        for j in 0..spec.ny {
            if i + 1 < spec.nx {
                edges.push((node_at(i, j), node_at(i + 1, j)));
            }
            if j + 1 < spec.ny {
                edges.push((node_at(i, j), node_at(i, j + 1)));
            }
        }
    }

    // Seeded edge deletions that keep the street network usable: undirected
    // connectivity, minimum degree 2, and a strongly connected lane graph.
    let mut candidates = edges.clone();
    rng.shuffle(&mut candidates);
    let mut deleted = 0;
    for cand in candidates {
        if deleted == spec.deletions {
            break;
        }
        let trial: Vec<(usize, usize)> =
            edges.iter().copied().filter(|&e| e != cand).collect();
        let mut degree = vec![0usize; nodes.len()];
        for &(u, v) in &trial {
            degree[u] += 1;
            degree[v] += 1;
        }
        if degree.iter().any(|&d| d < 2) {
            continue;
        }
        if !undirected_connected(nodes.len(), &trial)
            || !lane_graph_strongly_connected(nodes.len(), &trial)
        {
            continue;
        }
        edges = trial;
        deleted += 1;
    }

    let mut degree = vec![0usize; nodes.len()];
    for &(u, v) in &edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    let trim = |node: usize| -> f64 {
        if degree[node] >= 3 {
            INTERSECTION_TRIM_M
        } else {
            BEND_TRIM_M
        }
    };

    // Two directed lanes per edge, offset to the right of travel.
    let mut lanes: Vec<Lane> = Vec::with_capacity(edges.len() * 2);
    for &(u, v) in &edges {
        for (a, b) in [(u, v), (v, u)] {
            let dir = (nodes[b] - nodes[a]).normalized();
            let offset = dir.perp_cw().scale(LANE_OFFSET);
            let start = nodes[a] + dir.scale(trim(a)) + offset;
            let end = nodes[b] - dir.scale(trim(b)) + offset;
            let points = resample_polyline(&[start, end], POLYLINE_STEP);
            let length = polyline_length(&points);
            lanes.push(Lane {
                id: LaneId(lanes.len()),
                from_node: a,
                to_node: b,
                width: LANE_WIDTH,
                points,
                length,
                successors: Vec::new(),
            });
        }
    }

    // Successor wiring: all lanes leaving the end node except the U-turn.
    let mut out_by_node: Vec<Vec<LaneId>> = vec![Vec::new(); nodes.len()];
    for lane in &lanes {
        out_by_node[lane.from_node].push(lane.id);
    }
    for i in 0..lanes.len() {
        let (to, from) = (lanes[i].to_node, lanes[i].from_node);
        let succ: Vec<LaneId> = out_by_node[to]
            .iter()
            .copied()
            .filter(|&s| lanes[s.0].to_node != from)
            .collect();
        lanes[i].successors = succ;
    }

    let connections = build_connections(&lanes);

    // Intersections: nodes where three or more streets meet.
    let mut intersections = Vec::new();
    for (n, &deg) in degree.iter().enumerate() {
        if deg >= 3 {
            let approaches = lanes
                .iter()
                .filter(|l| l.to_node == n)
                .map(|l| l.id)
                .collect();
            intersections.push(Intersection {
                node: n,
                center: nodes[n],
                approaches,
            });
        }
    }

    // One light per approach at every intersection. Approaches whose travel
    // direction is mostly along x share group 0; the cross street gets group 1.
    let mut traffic_lights = Vec::new();
    for inter in &intersections {
        let offset_s = rng.int_in(0, 19) as f64;
        for &ap in &inter.approaches {
            let lane = &lanes[ap.0];
            let end = *lane.points.last().unwrap();
            let n = lane.points.len();
            let dir = (lane.points[n - 1] - lane.points[n - 2]).normalized();
            let group = if dir.x.abs() >= dir.y.abs() { 0u8 } else { 1u8 };
            let half = lane.width * 0.5;
            let right = dir.perp_cw();
            traffic_lights.push(TrafficLightDef {
                id: LightId(traffic_lights.len()),
                lane: ap,
                phase_group: group,
                offset_s,
                position: end + right.scale(half + 1.0),
                stop_line: (end - right.scale(half), end + right.scale(half)),
            });
        }
    }

    // One spawn point mid-lane on every lane long enough to place a vehicle.
    let mut spawn_points = Vec::new();
    for lane in &lanes {
        if lane.length >= MIN_SPAWN_LANE_LEN_M {
            let s = lane.length * 0.5;
            let (pos, heading) = polyline_point_at(&lane.points, s);
            spawn_points.push(SpawnPoint {
                lane: lane.id,
                s,
                pose: Pose::new(pos, heading),
            });
        }
    }

    let raster = rasterize(&nodes, &lanes, &connections, &degree);

    let map = TownMap {
        id,
        seed,
        nodes,
        lanes,
        connections,
        intersections,
        traffic_lights,
        spawn_points,
        raster,
    };
    debug_assert!(map.validate().is_ok(), "{:?}", map.validate());
    map
}

fn build_connections(lanes: &[Lane]) -> Vec<Vec<Connection>> {
    lanes
        .iter()
        .map(|lane| {
            lane.successors
                .iter()
                .map(|&succ| {
                    let a = *lane.points.last().unwrap();
                    let b = lanes[succ.0].points[0];
                    let n = lane.points.len();
                    let dir_a = (lane.points[n - 1] - lane.points[n - 2]).normalized();
                    let dir_b = (lanes[succ.0].points[1] - lanes[succ.0].points[0]).normalized();
                    // Control point at the crossing of the two lane axes; for
                    // straight-through movements the axes are parallel and the
                    // midpoint is used.
                    let cross = dir_a.cross(dir_b);
                    let control = if cross.abs() < 1e-6 {
                        (a + b).scale(0.5)
                    } else {
                        let t = (b - a).cross(dir_b) / cross;
                        a + dir_a.scale(t)
                    };
                    let raw = quadratic_bezier(a, control, b, 16);
                    let points = resample_polyline(&raw, POLYLINE_STEP);
                    let length = polyline_length(&points);
                    Connection {
                        from: lane.id,
                        to: succ,
                        points,
                        length,
                    }
                })
                .collect()
        })
        .collect()
}

const RASTER_RES: f64 = 0.5;
const RASTER_MARGIN: f64 = 12.0;

fn rasterize(
    nodes: &[Vec2],
    lanes: &[Lane],
    connections: &[Vec<Connection>],
    degree: &[usize],
) -> TownRaster {
    let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for n in nodes {
        lo.x = lo.x.min(n.x);
        lo.y = lo.y.min(n.y);
        hi.x = hi.x.max(n.x);
        hi.y = hi.y.max(n.y);
    }
    let origin = lo - Vec2::new(RASTER_MARGIN, RASTER_MARGIN);
    let w = (((hi.x - lo.x) + 2.0 * RASTER_MARGIN) / RASTER_RES).ceil() as usize;
    let h = (((hi.y - lo.y) + 2.0 * RASTER_MARGIN) / RASTER_RES).ceil() as usize;
    let mut drivable = vec![0u8; w * h];
    let mut marking = vec![0u8; w * h];

    let stamp = |buf: &mut Vec<u8>, points: &[Vec2], half_width: f64| {
        for seg in points.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let min_x = (a.x.min(b.x) - half_width - origin.x) / RASTER_RES;
            let max_x = (a.x.max(b.x) + half_width - origin.x) / RASTER_RES;
            let min_y = (a.y.min(b.y) - half_width - origin.y) / RASTER_RES;
            let max_y = (a.y.max(b.y) + half_width - origin.y) / RASTER_RES;
            let x0 = min_x.floor().max(0.0) as usize;
            let x1 = (max_x.ceil() as usize).min(w.saturating_sub(1));
            let y0 = min_y.floor().max(0.0) as usize;
            let y1 = (max_y.ceil() as usize).min(h.saturating_sub(1));
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    let p = Vec2::new(
                        origin.x + (cx as f64 + 0.5) * RASTER_RES,
                        origin.y + (cy as f64 + 0.5) * RASTER_RES,
                    );
                    if crate::geom::point_segment_distance(p, a, b) <= half_width {
                        buf[cy * w + cx] = 255;
                    }
                }
            }
        }
    };

    for lane in lanes {
        stamp(&mut drivable, &lane.points, lane.width * 0.5);
        stamp(&mut marking, &lane.points, 0.3);
    }
    for conns in connections {
        for c in conns {
            stamp(&mut drivable, &c.points, LANE_WIDTH * 0.5);
        }
    }
    // Fill node interiors so intersections are open squares.
    for (n, &deg) in degree.iter().enumerate() {
        if deg == 0 {
            continue;
        }
        let r = if deg >= 3 {
            INTERSECTION_TRIM_M + LANE_OFFSET
        } else {
            BEND_TRIM_M + LANE_OFFSET
        };
        let c = nodes[n];
        stamp(
            &mut drivable,
            &[c - Vec2::new(r, 0.0), c + Vec2::new(r, 0.0)],
            r,
        );
    }

    TownRaster {
        origin,
        res: RASTER_RES,
        w,
        h,
        drivable,
        marking,
    }
}

impl TownMap {
    pub fn lane(&self, id: LaneId) -> &Lane {
        &self.lanes[id.0]
    }

    pub fn connection(&self, from: LaneId, to: LaneId) -> Option<&Connection> {
        self.connections[from.0].iter().find(|c| c.to == to)
    }

    pub fn spawn(&self, idx: usize) -> Result<&SpawnPoint, TownError> {
        self.spawn_points.get(idx).ok_or(TownError::BadSpawnIndex(idx))
    }

    pub fn is_intersection_node(&self, node: usize) -> bool {
        self.intersections.iter().any(|i| i.node == node)
    }

    /// Lights controlling the given lane (at most one in generated towns).
    pub fn light_for_lane(&self, lane: LaneId) -> Option<&TrafficLightDef> {
        self.traffic_lights.iter().find(|t| t.lane == lane)
    }

    /// Structural invariants; checked after construction and in tests.
    pub fn validate(&self) -> Result<(), String> {
        if self.lanes.is_empty() {
            return Err("no lanes".into());
        }
        for lane in &self.lanes {
            if lane.points.len() < 2 {
                return Err(format!("lane {:?} has fewer than 2 points", lane.id));
            }
            for w in lane.points.windows(2) {
                let d = w[0].dist(w[1]);
                if d >= 5.0 {
                    return Err(format!("lane {:?} has a {d:.2} m gap", lane.id));
                }
            }
            if lane.successors.is_empty() {
                return Err(format!("lane {:?} is a dead end", lane.id));
            }
        }
        // Every spawn lane reaches every other spawn lane.
        let n = self.lanes.len();
        let mut seen = vec![false; n];
        let mut stack = vec![self.spawn_points[0].lane.0];
        seen[stack[0]] = true;
        while let Some(i) = stack.pop() {
            for s in &self.lanes[i].successors {
                if !seen[s.0] {
                    seen[s.0] = true;
                    stack.push(s.0);
                }
            }
        }
        for sp in &self.spawn_points {
            if !seen[sp.lane.0] {
                return Err(format!("spawn lane {:?} unreachable", sp.lane));
            }
        }
        // Exactly one stop line (light) per controlled approach.
        for inter in &self.intersections {
            for ap in &inter.approaches {
                let count = self
                    .traffic_lights
                    .iter()
                    .filter(|t| t.lane == *ap)
                    .count();
                if count != 1 {
                    return Err(format!("approach {ap:?} has {count} lights"));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Routes
// ---------------------------------------------------------------------------

/// One annotated intersection traversal along a route.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TurnWindow {
    /// Arc where the command window opens (15 m before the entry).
    pub window_arc: f64,
    /// Arc of the intersection entry (end of the approach lane).
    pub entry_arc: f64,
    /// Arc where the traversal completes.
    pub exit_arc: f64,
    pub command: HighLevelCommand,
    pub node: usize,
}

/// A planned path: waypoints at <= 2 m spacing with one command per waypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub waypoints: Vec<Vec2>,
    pub commands: Vec<HighLevelCommand>,
    pub length_m: f64,
    /// Cumulative arc length per waypoint; `cum_arc[0] == 0`.
    pub cum_arc: Vec<f64>,
    /// Lane sequence the route follows.
    pub lanes: Vec<LaneId>,
    /// Lights whose stop line the route crosses, with the arc position of the
    /// crossing, in route order.
    pub lights: Vec<(f64, LightId)>,
    /// Intersection traversals in route order.
    pub turns: Vec<TurnWindow>,
}

impl Route {
    pub fn point_at_arc(&self, s: f64) -> (Vec2, f64) {
        polyline_point_at(&self.waypoints, s)
    }

    pub fn command_at_index(&self, idx: usize) -> HighLevelCommand {
        self.commands[idx.min(self.commands.len() - 1)]
    }
}

/// Monotone progress tracker along a route. Robust against a route passing
/// near itself: only advances forward.
#[derive(Clone, Copy, Debug, Default)]
pub struct RouteCursor {
    pub idx: usize,
}

impl RouteCursor {
    /// Move the cursor forward while the position projects past the end of
    /// the current segment. Projection-based advancement keeps the derived
    /// arc position continuous across waypoint joints.
    pub fn advance(&mut self, route: &Route, pos: Vec2) {
        while self.idx + 1 < route.waypoints.len() {
            let a = route.waypoints[self.idx];
            let b = route.waypoints[self.idx + 1];
            let ab = b - a;
            let len2 = ab.dot(ab);
            if len2 <= 1e-12 {
                self.idx += 1;
                continue;
            }
            let t = (pos - a).dot(ab) / len2;
            if t >= 1.0 {
                self.idx += 1;
            } else {
                break;
            }
        }
    }

    /// Continuous arc position of the projection of `pos` near the cursor.
    pub fn arc_position(&self, route: &Route, pos: Vec2) -> f64 {
        let i = self.idx;
        if i + 1 >= route.waypoints.len() {
            return route.length_m;
        }
        let a = route.waypoints[i];
        let b = route.waypoints[i + 1];
        let ab = b - a;
        let len2 = ab.dot(ab);
        let t = if len2 > 0.0 {
            ((pos - a).dot(ab) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        route.cum_arc[i] + t * (route.cum_arc[i + 1] - route.cum_arc[i])
    }

    pub fn distance_to_route(&self, route: &Route, pos: Vec2) -> f64 {
        pos.dist(route.waypoints[self.idx])
    }

    pub fn command(&self, route: &Route) -> Result<HighLevelCommand, TownError> {
        if self.idx >= route.waypoints.len() {
            return Err(TownError::OffRoute);
        }
        Ok(route.command_at_index(self.idx))
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct HeapEntry {
    cost_milli: u64,
    lane: usize,
}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .cost_milli
            .cmp(&self.cost_milli)
            .then_with(|| other.lane.cmp(&self.lane))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Plan a minimal-length path between two spawn points with A* over the lane
/// graph (edge cost = meters driven, straight-line heuristic).
pub fn plan_route(map: &TownMap, start: usize, goal: usize) -> Result<Route, TownError> {
    if start == goal {
        return Err(TownError::BadSpawnIndex(goal));
    }
    let sp = *map.spawn(start)?;
    let gp = *map.spawn(goal)?;

    if sp.lane == gp.lane && gp.s > sp.s {
        return Ok(assemble_route(map, &[sp.lane], sp, gp));
    }

    // A* over lanes. g = meters from the start pose to the END of each lane.
    // Entering the goal lane is tracked separately (cost up to the goal arc
    // position) so that a goal behind the spawn on the same lane is reached
    // by driving around the block.
    let n = map.lanes.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent: Vec<Option<usize>> = vec![None; n];
    let mut best_goal = f64::INFINITY;
    let mut goal_parent: Option<usize> = None;
    let mut heap = BinaryHeap::new();
    let goal_pos = gp.pose.pos;
    let h = |lane: usize| -> f64 { map.lanes[lane].points.last().unwrap().dist(goal_pos) };
    let milli = |c: f64| (c * 1000.0).round() as u64;

    let start_lane = sp.lane.0;
    g[start_lane] = map.lanes[start_lane].length - sp.s;
    heap.push(HeapEntry {
        cost_milli: milli(g[start_lane] + h(start_lane)),
        lane: start_lane,
    });

    let mut done = vec![false; n];
    while let Some(HeapEntry { cost_milli, lane }) = heap.pop() {
        if cost_milli as f64 / 1000.0 > best_goal + 1.0 {
            break;
        }
        if done[lane] {
            continue;
        }
        done[lane] = true;
        for (k, succ) in map.lanes[lane].successors.iter().enumerate() {
            let conn = &map.connections[lane][k];
            let into = succ.0;
            if into == gp.lane.0 {
                let cand = g[lane] + conn.length + gp.s;
                if cand < best_goal {
                    best_goal = cand;
                    goal_parent = Some(lane);
                }
            }
            let cand = g[lane] + conn.length + map.lanes[into].length;
            if cand < g[into] - 1e-9 {
                g[into] = cand;
                parent[into] = Some(lane);
                heap.push(HeapEntry {
                    cost_milli: milli(cand + h(into)),
                    lane: into,
                });
            }
        }
    }

    let Some(gpar) = goal_parent else {
        return Err(TownError::NoPath { start, goal });
    };
    let mut seq = vec![gp.lane.0, gpar];
    let mut cur = gpar;
    while cur != start_lane {
        let Some(p) = parent[cur] else {
            return Err(TownError::NoPath { start, goal });
        };
        seq.push(p);
        cur = p;
    }
    seq.reverse();
    let lane_ids: Vec<LaneId> = seq.into_iter().map(LaneId).collect();
    Ok(assemble_route(map, &lane_ids, sp, gp))
}

fn turn_command(map: &TownMap, from: LaneId, to: LaneId) -> HighLevelCommand {
    let a = map.lane(from);
    let b = map.lane(to);
    let na = a.points.len();
    let dir_in = (a.points[na - 1] - a.points[na - 2]).angle();
    let dir_out = (b.points[1] - b.points[0]).angle();
    let delta = wrap_angle(dir_out - dir_in);
    if delta > std::f64::consts::FRAC_PI_6 {
        HighLevelCommand::TurnLeft
    } else if delta < -std::f64::consts::FRAC_PI_6 {
        HighLevelCommand::TurnRight
    } else {
        HighLevelCommand::GoStraight
    }
}

fn assemble_route(map: &TownMap, lane_seq: &[LaneId], sp: SpawnPoint, gp: SpawnPoint) -> Route {
    // Stitch the raw centerline: partial first lane, connections, full lanes,
    // partial last lane. Record command windows and stop-line crossings by
    // arc position as we go.
    let mut raw: Vec<Vec2> = Vec::new();
    let mut windows: Vec<(f64, f64, f64, HighLevelCommand, usize)> = Vec::new();
    let mut lights: Vec<(f64, LightId)> = Vec::new();
    let mut arc = 0.0;

    let append = |raw: &mut Vec<Vec2>, pts: &[Vec2], arc: &mut f64| {
        for p in pts {
            if let Some(last) = raw.last() {
                let d = last.dist(*p);
                if d < 1e-9 {
                    continue;
                }
                *arc += d;
            }
            raw.push(*p);
        }
    };

    for (i, &lane_id) in lane_seq.iter().enumerate() {
        let lane = map.lane(lane_id);
        let from_s = if i == 0 { sp.s } else { 0.0 };
        let to_s = if i + 1 == lane_seq.len() {
            gp.s
        } else {
            lane.length
        };
        let segment = slice_polyline(&lane.points, from_s, to_s);
        append(&mut raw, &segment, &mut arc);

        if i + 1 < lane_seq.len() {
            // Stop line sits at the lane end.
            if let Some(light) = map.light_for_lane(lane_id) {
                lights.push((arc, light.id));
            }
            let next = lane_seq[i + 1];
            let conn = map
                .connection(lane_id, next)
                .expect("route uses wired successors");
            let entry_arc = arc;
            append(&mut raw, &conn.points, &mut arc);
            if map.is_intersection_node(lane.to_node) {
                let cmd = turn_command(map, lane_id, next);
                windows.push((
                    entry_arc - COMMAND_WINDOW_BEFORE_M,
                    entry_arc,
                    arc,
                    cmd,
                    lane.to_node,
                ));
            }
        }
    }

    let waypoints = resample_polyline(&raw, POLYLINE_STEP);
    let mut cum_arc = Vec::with_capacity(waypoints.len());
    let mut acc = 0.0;
    cum_arc.push(0.0);
    for w in waypoints.windows(2) {
        acc += w[0].dist(w[1]);
        cum_arc.push(acc);
    }
    let length_m = acc;

    // Resampling cuts corners slightly, so positions measured on the raw
    // polyline drift late relative to the waypoint arc. Waypoint i sits at
    // raw arc i * spacing by construction; interpolate to remap.
    let raw_total = arc;
    let n_seg = (waypoints.len() - 1).max(1);
    let spacing = raw_total / n_seg as f64;
    let remap = |raw_arc: f64| -> f64 {
        if spacing <= 0.0 {
            return 0.0;
        }
        let k = (raw_arc / spacing).clamp(0.0, n_seg as f64);
        let i = (k.floor() as usize).min(n_seg - 1);
        let frac = k - i as f64;
        cum_arc[i] + frac * (cum_arc[i + 1] - cum_arc[i])
    };
    let lights: Vec<(f64, LightId)> = lights.into_iter().map(|(a, id)| (remap(a), id)).collect();
    let turns: Vec<TurnWindow> = windows
        .into_iter()
        .map(|(lo, entry, hi, command, node)| TurnWindow {
            window_arc: remap(lo.max(0.0)),
            entry_arc: remap(entry),
            exit_arc: remap(hi),
            command,
            node,
        })
        .collect();

    let commands = cum_arc
        .iter()
        .map(|&s| {
            turns
                .iter()
                .find(|t| s >= t.window_arc && s <= t.exit_arc)
                .map(|t| t.command)
                .unwrap_or(HighLevelCommand::LaneFollow)
        })
        .collect();

    Route {
        waypoints,
        commands,
        length_m,
        cum_arc,
        lanes: lane_seq.to_vec(),
        lights,
        turns,
    }
}

/// Sub-polyline between arc positions `from_s` and `to_s`.
fn slice_polyline(points: &[Vec2], from_s: f64, to_s: f64) -> Vec<Vec2> {
    debug_assert!(to_s >= from_s);
    let (start, _) = polyline_point_at(points, from_s);
    let (end, _) = polyline_point_at(points, to_s);
    let mut out = vec![start];
    let mut arc = 0.0;
    for w in points.windows(2) {
        let seg = w[0].dist(w[1]);
        let wp_arc = arc + seg;
        if wp_arc > from_s && wp_arc < to_s {
            out.push(w[1]);
        }
        arc = wp_arc;
    }
    out.push(end);
    out.dedup_by(|a, b| a.dist(*b) < 1e-9);
    if out.len() == 1 {
        out.push(end + Vec2::new(1e-9, 0.0));
    }
    out
}

/// The command of the nearest not-yet-passed waypoint, without cursor state.
pub fn next_command(route: &Route, pose: Pose) -> Result<HighLevelCommand, TownError> {
    let mut best = (f64::INFINITY, 0usize);
    for (i, wp) in route.waypoints.iter().enumerate() {
        let d = pose.pos.dist(*wp);
        if d < best.0 {
            best = (d, i);
        }
    }
    if best.0 > OFF_ROUTE_DISTANCE_M {
        return Err(TownError::OffRoute);
    }
    // Prefer the waypoint ahead of the pose when the nearest one is behind.
    let idx = if best.1 + 1 < route.waypoints.len() {
        let to_wp = route.waypoints[best.1] - pose.pos;
        if to_wp.dot(pose.forward()) < 0.0 {
            best.1 + 1
        } else {
            best.1
        }
    } else {
        best.1
    };
    Ok(route.command_at_index(idx))
}

// ---------------------------------------------------------------------------
// Plain-text map serialization (format documented in docs/FORMATS.md)
// ---------------------------------------------------------------------------

impl TownMap {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("drivelab-map {MAP_FORMAT_VERSION}\n"));
        out.push_str(&format!("town {} seed {}\n", self.id.name(), self.seed));
        out.push_str(&format!("nodes {}\n", self.nodes.len()));
        for (i, n) in self.nodes.iter().enumerate() {
            out.push_str(&format!("node {i} {} {}\n", n.x, n.y));
        }
        out.push_str(&format!("lanes {}\n", self.lanes.len()));
        for lane in &self.lanes {
            out.push_str(&format!(
                "lane {} {} {} {}",
                lane.id.0, lane.from_node, lane.to_node, lane.width
            ));
            for p in &lane.points {
                out.push_str(&format!(" {} {}", p.x, p.y));
            }
            out.push('\n');
        }
        out.push_str(&format!("lights {}\n", self.traffic_lights.len()));
        for t in &self.traffic_lights {
            out.push_str(&format!(
                "light {} {} {} {} {} {} {} {} {} {}\n",
                t.id.0,
                t.lane.0,
                t.phase_group,
                t.offset_s,
                t.position.x,
                t.position.y,
                t.stop_line.0.x,
                t.stop_line.0.y,
                t.stop_line.1.x,
                t.stop_line.1.y
            ));
        }
        out.push_str(&format!("spawns {}\n", self.spawn_points.len()));
        for (i, s) in self.spawn_points.iter().enumerate() {
            out.push_str(&format!("spawn {i} {} {}\n", s.lane.0, s.s));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<TownMap, TownError> {
        let err = |line: usize, msg: &str| TownError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        let mut next = |expect: &str| -> Result<(usize, Vec<String>), TownError> {
            for (ln, raw) in lines.by_ref() {
                let raw = raw.trim();
                if raw.is_empty() || raw.starts_with('#') {
                    continue;
                }
                let toks: Vec<String> = raw.split_whitespace().map(str::to_string).collect();
                if toks[0] != expect {
                    return Err(TownError::Parse {
                        line: ln + 1,
                        msg: format!("expected '{expect}', found '{}'", toks[0]),
                    });
                }
                return Ok((ln + 1, toks));
            }
            Err(TownError::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected '{expect}'"),
            })
        };

        let (ln, header) = next("drivelab-map")?;
        if header.get(1).map(String::as_str) != Some("1") {
            return Err(err(ln, "unsupported map format version"));
        }
        let (ln, town_line) = next("town")?;
        let id = TownId::parse(town_line.get(1).ok_or_else(|| err(ln, "missing town id"))?)
            .ok_or_else(|| err(ln, "unknown town id"))?;
        let seed: u64 = town_line
            .get(3)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "missing seed"))?;

        let (ln, counts) = next("nodes")?;
        let n_nodes: usize = counts
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad node count"))?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let (ln, t) = next("node")?;
            let x: f64 = t
                .get(2)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(ln, "bad node x"))?;
            let y: f64 = t
                .get(3)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err(ln, "bad node y"))?;
            nodes.push(Vec2::new(x, y));
        }

        let (ln, counts) = next("lanes")?;
        let n_lanes: usize = counts
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad lane count"))?;
        let mut lanes = Vec::with_capacity(n_lanes);
        for _ in 0..n_lanes {
            let (ln, t) = next("lane")?;
            if t.len() < 9 || (t.len() - 5) % 2 != 0 {
                return Err(err(ln, "malformed lane line"));
            }
            let id: usize = t[1].parse().map_err(|_| err(ln, "bad lane id"))?;
            let from_node: usize = t[2].parse().map_err(|_| err(ln, "bad from node"))?;
            let to_node: usize = t[3].parse().map_err(|_| err(ln, "bad to node"))?;
            let width: f64 = t[4].parse().map_err(|_| err(ln, "bad width"))?;
            let mut points = Vec::with_capacity((t.len() - 5) / 2);
            for pair in t[5..].chunks(2) {
                let x: f64 = pair[0].parse().map_err(|_| err(ln, "bad point x"))?;
                let y: f64 = pair[1].parse().map_err(|_| err(ln, "bad point y"))?;
                points.push(Vec2::new(x, y));
            }
            let length = polyline_length(&points);
            lanes.push(Lane {
                id: LaneId(id),
                from_node,
                to_node,
                width,
                points,
                length,
                successors: Vec::new(),
            });
        }

        let (ln, counts) = next("lights")?;
        let n_lights: usize = counts
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad light count"))?;
        let mut traffic_lights = Vec::with_capacity(n_lights);
        for _ in 0..n_lights {
            let (ln, t) = next("light")?;
            if t.len() != 11 {
                return Err(err(ln, "malformed light line"));
            }
            let f = |i: usize| -> Result<f64, TownError> {
                t[i].parse().map_err(|_| err(ln, "bad light field"))
            };
            traffic_lights.push(TrafficLightDef {
                id: LightId(t[1].parse().map_err(|_| err(ln, "bad light id"))?),
                lane: LaneId(t[2].parse().map_err(|_| err(ln, "bad light lane"))?),
                phase_group: t[3].parse().map_err(|_| err(ln, "bad light group"))?,
                offset_s: f(4)?,
                position: Vec2::new(f(5)?, f(6)?),
                stop_line: (Vec2::new(f(7)?, f(8)?), Vec2::new(f(9)?, f(10)?)),
            });
        }

        let (ln, counts) = next("spawns")?;
        let n_spawns: usize = counts
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(ln, "bad spawn count"))?;
        let mut spawn_points = Vec::with_capacity(n_spawns);
        for _ in 0..n_spawns {
            let (ln, t) = next("spawn")?;
            let lane = LaneId(t[2].parse().map_err(|_| err(ln, "bad spawn lane"))?);
            let s: f64 = t[3].parse().map_err(|_| err(ln, "bad spawn arc"))?;
            spawn_points.push((lane, s));
        }
        next("end")?;

        // Rebuild derived structures (successors, connections, intersections,
        // raster, spawn poses) exactly as construction does.
        // Out-degree equals undirected street degree: each incident street
        // contributes exactly one departing lane.
        let mut degree = vec![0usize; nodes.len()];
        let mut out_by_node: Vec<Vec<LaneId>> = vec![Vec::new(); nodes.len()];
        for lane in &lanes {
            out_by_node[lane.from_node].push(lane.id);
            degree[lane.from_node] += 1;
        }
        for i in 0..lanes.len() {
            let (to, from) = (lanes[i].to_node, lanes[i].from_node);
            let succ: Vec<LaneId> = out_by_node[to]
                .iter()
                .copied()
                .filter(|&s| lanes[s.0].to_node != from)
                .collect();
            lanes[i].successors = succ;
        }
        let connections = build_connections(&lanes);
        let mut intersections = Vec::new();
        for (n, &deg) in degree.iter().enumerate() {
            if deg >= 3 {
                let approaches = lanes
                    .iter()
                    .filter(|l| l.to_node == n)
                    .map(|l| l.id)
                    .collect();
                intersections.push(Intersection {
                    node: n,
                    center: nodes[n],
                    approaches,
                });
            }
        }
        let raster = rasterize(&nodes, &lanes, &connections, &degree);
        let spawn_points = spawn_points
            .into_iter()
            .map(|(lane, s)| {
                let (pos, heading) = polyline_point_at(&lanes[lane.0].points, s);
                SpawnPoint {
                    lane,
                    s,
                    pose: Pose::new(pos, heading),
                }
            })
            .collect();

        Ok(TownMap {
            id,
            seed,
            nodes,
            lanes,
            connections,
            intersections,
            traffic_lights,
            spawn_points,
            raster,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_is_deterministic() {
        let a = build_town(TownId::TownA, 7);
        let b = build_town(TownId::TownA, 7);
        assert_eq!(a, b);
    }

    #[test]
    fn towns_differ_in_topology() {
        let a = build_town(TownId::TownA, 7);
        let b = build_town(TownId::TownB, 7);
        assert_ne!(a.lanes.len(), b.lanes.len());
        assert!(a.intersections.len() > b.intersections.len());
    }

    #[test]
    fn town_sizes_in_expected_ranges() {
        let a = build_town(TownId::TownA, 7);
        let b = build_town(TownId::TownB, 7);
        assert!(
            (14..=23).contains(&a.intersections.len()),
            "TownA intersections {}",
            a.intersections.len()
        );
        assert!(
            (5..=12).contains(&b.intersections.len()),
            "TownB intersections {}",
            b.intersections.len()
        );
    }

    #[test]
    fn validate_passes_for_all_seeds() {
        for seed in 0..5 {
            build_town(TownId::TownA, seed).validate().unwrap();
            build_town(TownId::TownB, seed).validate().unwrap();
        }
    }

    #[test]
    fn every_spawn_reachable_from_spawn_zero() {
        let map = build_town(TownId::TownA, 7);
        for goal in 1..map.spawn_points.len() {
            plan_route(&map, 0, goal).unwrap();
        }
    }

    #[test]
    fn route_length_matches_waypoint_sum() {
        let map = build_town(TownId::TownA, 7);
        let route = plan_route(&map, 0, 10).unwrap();
        let sum: f64 = route.waypoints.windows(2).map(|w| w[0].dist(w[1])).sum();
        assert!((sum - route.length_m).abs() < 1e-9);
    }

    #[test]
    fn straight_routes_have_only_lane_follow() {
        let map = build_town(TownId::TownA, 7);
        // Find a pair of spawns on the same lane direction along one street.
        let mut found = false;
        'outer: for (i, a) in map.spawn_points.iter().enumerate() {
            for (j, b) in map.spawn_points.iter().enumerate() {
                if i == j {
                    continue;
                }
                if a.lane == b.lane && b.s > a.s {
                    let route = plan_route(&map, i, j).unwrap();
                    assert!(route
                        .commands
                        .iter()
                        .all(|c| *c == HighLevelCommand::LaneFollow));
                    found = true;
                    break 'outer;
                }
            }
        }
        // Mid-lane single spawns per lane: same-lane pairs may not exist; fall
        // back to a short two-lane straight continuation.
        if !found {
            let route = plan_route(&map, 0, 1).unwrap();
            assert!(!route.waypoints.is_empty());
        }
    }

    #[test]
    fn turn_route_has_single_contiguous_window() {
        let map = build_town(TownId::TownA, 7);
        // Routes crossing exactly one intersection with a left turn.
        let mut checked = 0;
        for s in 0..map.spawn_points.len() {
            for g in 0..map.spawn_points.len() {
                if s == g {
                    continue;
                }
                let Ok(route) = plan_route(&map, s, g) else {
                    continue;
                };
                if route.lanes.len() != 2 {
                    continue;
                }
                let mid_node = map.lane(route.lanes[0]).to_node;
                if !map.is_intersection_node(mid_node) {
                    continue;
                }
                if turn_command(&map, route.lanes[0], route.lanes[1]) != HighLevelCommand::TurnLeft
                {
                    continue;
                }
                let mut blocks = 0;
                let mut inside = false;
                for c in &route.commands {
                    let is_turn = *c == HighLevelCommand::TurnLeft;
                    if is_turn && !inside {
                        blocks += 1;
                    }
                    inside = is_turn;
                }
                assert_eq!(blocks, 1, "route {s}->{g}");
                assert!(!route
                    .commands
                    .iter()
                    .any(|c| matches!(c, HighLevelCommand::TurnRight | HighLevelCommand::GoStraight)));
                checked += 1;
            }
        }
        assert!(checked > 0, "no single-left-turn route found");
    }

    #[test]
    fn next_command_matches_route_annotation() {
        let map = build_town(TownId::TownA, 7);
        let route = plan_route(&map, 0, 12).unwrap();
        // Mid-straight waypoint: first waypoint region is always LaneFollow.
        let pose = Pose::new(route.waypoints[0], 0.0);
        assert_eq!(next_command(&route, pose).unwrap(), HighLevelCommand::LaneFollow);
        // A pose 30 m lateral of the route start is off route.
        let off = Pose::new(route.waypoints[0] + Vec2::new(0.0, -30.0), 0.0);
        // The offset direction might still be near another waypoint in a
        // grid town; assert on the error only if genuinely far from all.
        let min_d = route
            .waypoints
            .iter()
            .map(|w| off.pos.dist(*w))
            .fold(f64::INFINITY, f64::min);
        if min_d > OFF_ROUTE_DISTANCE_M {
            assert!(next_command(&route, off).is_err());
        }
    }

    #[test]
    fn commands_cover_every_waypoint() {
        let map = build_town(TownId::TownB, 3);
        for g in [1, 3, 5] {
            let route = plan_route(&map, 0, g).unwrap();
            assert_eq!(route.commands.len(), route.waypoints.len());
        }
    }

    #[test]
    fn map_text_roundtrip() {
        let map = build_town(TownId::TownB, 11);
        let text = map.to_text();
        let back = TownMap::from_text(&text).unwrap();
        assert_eq!(map, back);
    }

    #[test]
    fn astar_cost_matches_dijkstra_on_town_b() {
        // Independent oracle: plain Dijkstra over the same lane graph.
        let map = build_town(TownId::TownB, 7);
        let n_spawn = map.spawn_points.len();
        for start in 0..n_spawn.min(8) {
            for goal in 0..n_spawn.min(8) {
                if start == goal {
                    continue;
                }
                let route = plan_route(&map, start, goal).unwrap();
                let cost = lane_sequence_cost(&map, &route.lanes, start, goal);
                let oracle = dijkstra_cost(&map, start, goal);
                assert!(
                    (cost - oracle).abs() < 1e-6,
                    "{start}->{goal}: astar {cost} vs dijkstra {oracle}"
                );
                // Waypoint resampling shaves only fractions of a meter.
                assert!((route.length_m - cost).abs() < 2.0);
            }
        }
    }

    /// Graph cost of a planned lane sequence, matching the planner's metric.
    fn lane_sequence_cost(map: &TownMap, lanes: &[LaneId], start: usize, goal: usize) -> f64 {
        let sp = map.spawn_points[start];
        let gp = map.spawn_points[goal];
        if lanes.len() == 1 {
            return gp.s - sp.s;
        }
        let mut cost = map.lanes[lanes[0].0].length - sp.s;
        for i in 1..lanes.len() {
            cost += map.connection(lanes[i - 1], lanes[i]).unwrap().length;
            cost += if i + 1 == lanes.len() {
                gp.s
            } else {
                map.lanes[lanes[i].0].length
            };
        }
        cost
    }

    fn dijkstra_cost(map: &TownMap, start: usize, goal: usize) -> f64 {
        let sp = map.spawn_points[start];
        let gp = map.spawn_points[goal];
        if sp.lane == gp.lane && gp.s > sp.s {
            return gp.s - sp.s;
        }
        let n = map.lanes.len();
        let mut dist = vec![f64::INFINITY; n];
        dist[sp.lane.0] = map.lanes[sp.lane.0].length - sp.s;
        let mut done = vec![false; n];
        let mut best_goal = f64::INFINITY;
        loop {
            let mut u = None;
            let mut best = f64::INFINITY;
            for i in 0..n {
                if !done[i] && dist[i] < best {
                    best = dist[i];
                    u = Some(i);
                }
            }
            let Some(u) = u else { break };
            done[u] = true;
            for (k, succ) in map.lanes[u].successors.iter().enumerate() {
                let conn = &map.connections[u][k];
                if succ.0 == gp.lane.0 {
                    best_goal = best_goal.min(dist[u] + conn.length + gp.s);
                }
                let step = conn.length + map.lanes[succ.0].length;
                if dist[u] + step < dist[succ.0] {
                    dist[succ.0] = dist[u] + step;
                }
            }
        }
        best_goal
    }
}
