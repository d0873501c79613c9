//! Deterministic fixed-timestep world simulation.
//!
//! One tick advances the ego vehicle under a kinematic bicycle model, moves
//! NPC vehicles along their lanes, runs the pedestrian crossing state machine,
//! updates traffic-light phases, and reports ego collisions. Stepping is a
//! pure function of `(WorldState, ControlCommand, TownMap)`; all randomness
//! lives in named substreams owned by the state.

use crate::geom::{point_segment_distance, segments_intersect, wrap_angle, Obb, Pose, Vec2};
use crate::rng::{keyed_normal, SimRng};
use crate::town::{
    polyline_point_at, LaneId, LightId, TownId, TownMap, Weather, LANE_OFFSET,
};
use serde::{Deserialize, Serialize};

/// Fixed simulation timestep in seconds (10 Hz).
pub const DT: f64 = 0.1;

// Kinematic bicycle parameters.
pub const WHEELBASE_M: f64 = 2.5;
pub const MAX_STEER_RAD: f64 = 35.0 * std::f64::consts::PI / 180.0;
pub const THROTTLE_ACCEL: f64 = 3.0; // m/s^2 at full throttle
pub const BRAKE_DECEL: f64 = 8.0; // m/s^2 at full brake
pub const DRAG_COEFF: f64 = 0.05; // 1/s, accel -= drag * speed

pub const VEHICLE_LENGTH_M: f64 = 4.0;
pub const VEHICLE_WIDTH_M: f64 = 1.8;
pub const PEDESTRIAN_RADIUS_M: f64 = 0.3;

// Traffic-light cycle.
pub const GREEN_S: f64 = 10.0;
pub const YELLOW_S: f64 = 2.0;
pub const RED_S: f64 = 8.0;
pub const CYCLE_S: f64 = GREEN_S + YELLOW_S + RED_S;

/// Collisions softer than this closing speed are recorded but do not
/// terminate benchmark episodes.
pub const COLLISION_TERMINATION_IMPULSE: f64 = 0.5;

// Observation raster: 24 m wide by 36 m ahead at 0.5 m per cell.
pub const OBS_CHANNELS: usize = 6;
pub const OBS_HEIGHT: usize = 72;
pub const OBS_WIDTH: usize = 48;
pub const OBS_CELL_M: f64 = 0.5;
pub const OBS_LATERAL_HALF_M: f64 = 12.0;
pub const OBS_FORWARD_M: f64 = 36.0;

pub const CH_DRIVABLE: usize = 0;
pub const CH_MARKING: usize = 1;
pub const CH_VEHICLE: usize = 2;
pub const CH_PEDESTRIAN: usize = 3;
pub const CH_RED_LIGHT: usize = 4;
pub const CH_GREEN_LIGHT: usize = 5;

// Pedestrian behavior.
const PED_CROSS_PROB_NEAR: f64 = 0.02; // per tick while the ego is close
const PED_CROSS_PROB_FAR: f64 = 0.002;
const PED_EGO_NEAR_M: f64 = 20.0;
const PED_COOLDOWN_S: f64 = 5.0;

// NPC longitudinal control.
const NPC_GAP_STOP_M: f64 = 5.0;
const NPC_GAP_FREE_M: f64 = 15.0;
const NPC_ACCEL: f64 = 2.0;
const NPC_DECEL: f64 = 4.0;
const NPC_BRAKE_COMFORT: f64 = 3.5;
const NPC_LOOKAHEAD_M: f64 = 22.0;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("scenario needs {requested} vehicle spawn points, town offers {available}")]
    SpawnOverflow { requested: usize, available: usize },
}

/// Navigational intent, integer-encoded to match the dataset convention:
/// 2 lane-follow / "do not care", 3 left, 4 right, 5 straight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HighLevelCommand {
    LaneFollow,
    TurnLeft,
    TurnRight,
    GoStraight,
}

impl HighLevelCommand {
    pub const ALL: [HighLevelCommand; 4] = [
        HighLevelCommand::LaneFollow,
        HighLevelCommand::TurnLeft,
        HighLevelCommand::TurnRight,
        HighLevelCommand::GoStraight,
    ];

    pub fn code(self) -> u8 {
        match self {
            HighLevelCommand::LaneFollow => 2,
            HighLevelCommand::TurnLeft => 3,
            HighLevelCommand::TurnRight => 4,
            HighLevelCommand::GoStraight => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<HighLevelCommand> {
        match code {
            2 => Some(HighLevelCommand::LaneFollow),
            3 => Some(HighLevelCommand::TurnLeft),
            4 => Some(HighLevelCommand::TurnRight),
            5 => Some(HighLevelCommand::GoStraight),
            _ => None,
        }
    }

    /// Dense index 0..4 used to select the control head.
    pub fn head_index(self) -> usize {
        (self.code() - 2) as usize
    }
}

/// Driving controls, clamped into range on construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    steer: f64,
    throttle: f64,
    brake: f64,
}

impl ControlCommand {
    pub fn new(steer: f64, throttle: f64, brake: f64) -> Self {
        Self {
            steer: steer.clamp(-1.0, 1.0),
            throttle: throttle.clamp(0.0, 1.0),
            brake: brake.clamp(0.0, 1.0),
        }
    }

    pub fn steer(&self) -> f64 {
        self.steer
    }

    pub fn throttle(&self) -> f64 {
        self.throttle
    }

    pub fn brake(&self) -> f64 {
        self.brake
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VehicleKind {
    Ego,
    Npc,
}

/// Where an NPC sits on the lane network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NpcTrack {
    Lane { lane: LaneId, s: f64 },
    /// Traversing connection `k` out of `from`.
    Connection { from: LaneId, k: usize, s: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VehicleState {
    pub pose: Pose,
    pub speed: f64,
    pub kind: VehicleKind,
    /// Cruise speed in m/s; meaningful for NPCs only.
    pub npc_profile: f64,
    pub dims: (f64, f64),
    /// NPC lane-following state; `None` for the ego.
    pub track: Option<NpcTrack>,
}

impl VehicleState {
    pub fn ego(pose: Pose) -> Self {
        Self {
            pose,
            speed: 0.0,
            kind: VehicleKind::Ego,
            npc_profile: 0.0,
            dims: (VEHICLE_LENGTH_M, VEHICLE_WIDTH_M),
            track: None,
        }
    }

    pub fn obb(&self) -> Obb {
        Obb {
            pose: self.pose,
            length: self.dims.0,
            width: self.dims.1,
        }
    }

    pub fn front(&self) -> Vec2 {
        self.pose.pos + self.pose.forward().scale(self.dims.0 * 0.5)
    }

    pub fn velocity(&self) -> Vec2 {
        self.pose.forward().scale(self.speed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PedPhase {
    Sidewalk,
    Crossing,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PedestrianState {
    pub position: Vec2,
    pub velocity: Vec2,
    pub phase: PedPhase,
    pub crossing_timer: f64,
    /// Direction this pedestrian will walk on its next crossing.
    pub crossing_dir: Vec2,
    pub crossing_len: f64,
    pub cooldown: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LightPhase {
    Green,
    Yellow,
    Red,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrafficLightState {
    pub light_id: LightId,
    pub phase: LightPhase,
    pub time_in_phase: f64,
}

/// Phase of a light at simulation time `t`.
pub fn light_phase_at(map: &TownMap, light: LightId, t: f64) -> (LightPhase, f64) {
    let def = &map.traffic_lights[light.0];
    let shift = def.offset_s + def.phase_group as f64 * GREEN_S;
    let c = (t + shift).rem_euclid(CYCLE_S);
    if c < GREEN_S {
        (LightPhase::Green, c)
    } else if c < GREEN_S + YELLOW_S {
        (LightPhase::Yellow, c - GREEN_S)
    } else {
        (LightPhase::Red, c - GREEN_S - YELLOW_S)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CollisionKind {
    Pedestrian,
    Vehicle,
    Other,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub kind: CollisionKind,
    /// Relative closing speed at contact, m/s.
    pub impulse: f64,
    pub tick: u64,
}

/// Named RNG substreams owned by the world state.
#[derive(Clone, Debug, PartialEq)]
pub struct RngStreams {
    pub npc: SimRng,
    pub ped: SimRng,
    pub weather: SimRng,
}

impl RngStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            npc: SimRng::stream(seed, "npc"),
            ped: SimRng::stream(seed, "pedestrian"),
            weather: SimRng::stream(seed, "weather"),
        }
    }
}

/// Ongoing-contact flags used to report each contact episode exactly once.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContactFlags {
    pub npc: Vec<bool>,
    pub ped: Vec<bool>,
    pub offroad: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub tick: u64,
    pub time_s: f64,
    pub ego: VehicleState,
    pub npcs: Vec<VehicleState>,
    pub pedestrians: Vec<PedestrianState>,
    pub lights: Vec<TrafficLightState>,
    pub rng: RngStreams,
    pub contacts: ContactFlags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DensityProfile {
    Empty,
    Regular,
    Dense,
}

impl DensityProfile {
    pub fn name(self) -> &'static str {
        match self {
            DensityProfile::Empty => "Empty",
            DensityProfile::Regular => "Regular",
            DensityProfile::Dense => "Dense",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Empty" => Some(DensityProfile::Empty),
            "Regular" => Some(DensityProfile::Regular),
            "Dense" => Some(DensityProfile::Dense),
            _ => None,
        }
    }

    /// Inclusive (vehicles, pedestrians) count intervals, scaled to town size.
    pub fn intervals(self, town: TownId) -> ((u32, u32), (u32, u32)) {
        let scaled = |lo: u32, hi: u32| match town {
            TownId::TownA => (lo, hi),
            TownId::TownB => (lo / 2, hi / 2),
        };
        match self {
            DensityProfile::Empty => ((0, 0), (0, 0)),
            DensityProfile::Regular => (scaled(6, 10), scaled(10, 20)),
            DensityProfile::Dense => (scaled(14, 20), scaled(30, 50)),
        }
    }
}

/// What the policy sees: an ego-centric semantic grid, the scalar speed, and
/// the navigation command. Grid values are in [0, 1] after weather effects.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub grid: Vec<f32>,
    pub speed_mps: f64,
    pub command: HighLevelCommand,
}

impl Observation {
    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.grid[(c * OBS_HEIGHT + row) * OBS_WIDTH + col]
    }
}

// ---------------------------------------------------------------------------
// Scenario spawning
// ---------------------------------------------------------------------------

/// Populate a world. The ego is placed at `ego_spawn`; NPC vehicles take
/// distinct spawn points away from the ego. Deterministic per seed.
pub fn spawn_scenario(
    map: &TownMap,
    density: DensityProfile,
    seed: u64,
    ego_spawn: usize,
) -> Result<WorldState, SimError> {
    let mut rng = SimRng::stream(seed, "spawn");
    let ego_pose = map.spawn_points[ego_spawn].pose;
    let ((v_lo, v_hi), (p_lo, p_hi)) = density.intervals(map.id);
    let n_veh = if v_hi == 0 {
        0
    } else {
        rng.int_in(v_lo, v_hi) as usize
    };
    let n_ped = if p_hi == 0 {
        0
    } else {
        rng.int_in(p_lo, p_hi) as usize
    };

    let mut candidates: Vec<usize> = (0..map.spawn_points.len())
        .filter(|&i| {
            i != ego_spawn && map.spawn_points[i].pose.pos.dist(ego_pose.pos) > 12.0
        })
        .collect();
    rng.shuffle(&mut candidates);
    if n_veh > candidates.len() {
        return Err(SimError::SpawnOverflow {
            requested: n_veh,
            available: candidates.len(),
        });
    }

    let mut npcs = Vec::with_capacity(n_veh);
    for &spawn_idx in candidates.iter().take(n_veh) {
        let sp = map.spawn_points[spawn_idx];
        let cruise = rng.uniform_in(4.0, 8.0);
        npcs.push(VehicleState {
            pose: sp.pose,
            speed: 0.0,
            kind: VehicleKind::Npc,
            npc_profile: cruise,
            dims: (VEHICLE_LENGTH_M, VEHICLE_WIDTH_M),
            track: Some(NpcTrack::Lane {
                lane: sp.lane,
                s: sp.s,
            }),
        });
    }

    let mut pedestrians = Vec::with_capacity(n_ped);
    for _ in 0..n_ped {
        let lane = &map.lanes[rng.index(map.lanes.len())];
        if lane.length < 10.0 {
            // Short lane: stand at its midpoint sidewalk anyway.
        }
        let s = rng.uniform_in(2.0, (lane.length - 2.0).max(3.0));
        let (lane_pt, heading) = polyline_point_at(&lane.points, s);
        let dir = Vec2::from_angle(heading);
        let axis_pt = lane_pt - dir.perp_cw().scale(LANE_OFFSET);
        let side_offset = LANE_OFFSET + lane.width * 0.5 + 1.0 + rng.uniform_in(0.0, 1.0);
        let position = axis_pt + dir.perp_cw().scale(side_offset);
        pedestrians.push(PedestrianState {
            position,
            velocity: Vec2::ZERO,
            phase: PedPhase::Sidewalk,
            crossing_timer: 0.0,
            crossing_dir: dir.perp_cw().scale(-1.0),
            crossing_len: 2.0 * side_offset,
            cooldown: rng.uniform_in(0.0, PED_COOLDOWN_S),
        });
    }

    let lights = map
        .traffic_lights
        .iter()
        .map(|def| {
            let (phase, time_in_phase) = light_phase_at_def(def, 0.0);
            TrafficLightState {
                light_id: def.id,
                phase,
                time_in_phase,
            }
        })
        .collect();

    Ok(WorldState {
        tick: 0,
        time_s: 0.0,
        ego: VehicleState::ego(ego_pose),
        npcs,
        pedestrians,
        lights,
        rng: RngStreams::from_seed(seed),
        contacts: ContactFlags {
            npc: vec![false; n_veh],
            ped: vec![false; n_ped],
            offroad: false,
        },
    })
}

fn light_phase_at_def(def: &crate::town::TrafficLightDef, t: f64) -> (LightPhase, f64) {
    let shift = def.offset_s + def.phase_group as f64 * GREEN_S;
    let c = (t + shift).rem_euclid(CYCLE_S);
    if c < GREEN_S {
        (LightPhase::Green, c)
    } else if c < GREEN_S + YELLOW_S {
        (LightPhase::Yellow, c - GREEN_S)
    } else {
        (LightPhase::Red, c - GREEN_S - YELLOW_S)
    }
}

// ---------------------------------------------------------------------------
// Stepping
// ---------------------------------------------------------------------------

/// Advance the world by one tick under the given ego controls, reporting all
/// ego collisions that started this tick.
pub fn step(
    state: &WorldState,
    control: ControlCommand,
    map: &TownMap,
) -> (WorldState, Vec<CollisionEvent>) {
    let mut next = state.clone();
    next.tick = state.tick + 1;
    next.time_s = next.tick as f64 * DT;

    for light in next.lights.iter_mut() {
        let def = &map.traffic_lights[light.light_id.0];
        let (phase, tip) = light_phase_at_def(def, next.time_s);
        light.phase = phase;
        light.time_in_phase = tip;
    }

    step_ego(&mut next.ego, control);
    step_npcs(&mut next, map);
    step_pedestrians(&mut next, map);
    // One weather draw per tick keys the per-cell observation noise.
    next.rng.weather.next_u64();

    let events = detect_collisions(&mut next, map);
    (next, events)
}

fn step_ego(ego: &mut VehicleState, control: ControlCommand) {
    let accel = THROTTLE_ACCEL * control.throttle()
        - BRAKE_DECEL * control.brake()
        - DRAG_COEFF * ego.speed;
    let new_speed = (ego.speed + accel * DT).max(0.0);
    let yaw_rate = new_speed * (control.steer() * MAX_STEER_RAD).tan() / WHEELBASE_M;
    ego.pose.heading = wrap_angle(ego.pose.heading + yaw_rate * DT);
    ego.pose.pos = ego.pose.pos + ego.pose.forward().scale(new_speed * DT);
    ego.speed = new_speed;
}

/// Points along an NPC's forthcoming path, every ~2 m up to the lookahead
/// horizon, used for obstacle and light queries.
fn npc_lookahead(map: &TownMap, track: &NpcTrack, horizon: f64) -> Vec<Vec2> {
    let mut pts = Vec::with_capacity(12);
    let mut remaining = horizon;
    let mut cur = *track;
    let mut guard = 0;
    while remaining > 0.0 && guard < 8 {
        guard += 1;
        let (points, len, s0) = match cur {
            NpcTrack::Lane { lane, s } => (&map.lanes[lane.0].points, map.lanes[lane.0].length, s),
            NpcTrack::Connection { from, k, s } => {
                let c = &map.connections[from.0][k];
                (&c.points, c.length, s)
            }
        };
        let mut s = s0;
        while s < len && remaining > 0.0 {
            pts.push(polyline_point_at(points, s).0);
            s += 2.0;
            remaining -= 2.0;
        }
        if remaining <= 0.0 {
            break;
        }
        // Continue onto the next piece along k = 0; queries only need an
        // approximate corridor beyond the current piece.
        cur = match cur {
            NpcTrack::Lane { lane, s: _ } => {
                if map.lanes[lane.0].successors.is_empty() {
                    break;
                }
                NpcTrack::Connection { from: lane, k: 0, s: 0.0 }
            }
            NpcTrack::Connection { from, k, s: _ } => NpcTrack::Lane {
                lane: map.lanes[from.0].successors[k],
                s: 0.0,
            },
        };
    }
    pts
}

fn path_gap_to_point(pts: &[Vec2], target: Vec2, corridor_half: f64) -> Option<f64> {
    for (i, p) in pts.iter().enumerate() {
        if p.dist(target) <= corridor_half {
            return Some(i as f64 * 2.0);
        }
    }
    None
}

fn step_npcs(state: &mut WorldState, map: &TownMap) {
    let ego = state.ego.clone();
    let others: Vec<(Vec2, f64)> = state
        .npcs
        .iter()
        .map(|n| (n.pose.pos, n.dims.0))
        .collect();

    for i in 0..state.npcs.len() {
        let Some(track) = state.npcs[i].track else {
            continue;
        };
        let lookahead = npc_lookahead(map, &track, NPC_LOOKAHEAD_M);
        let mut target = state.npcs[i].npc_profile;

        // Vehicles ahead (other NPCs and the ego).
        let mut nearest_gap = f64::INFINITY;
        for (j, &(pos, len)) in others.iter().enumerate() {
            if j == i {
                continue;
            }
            if let Some(d) = path_gap_to_point(&lookahead, pos, 2.0) {
                if d > 0.5 {
                    nearest_gap =
                        nearest_gap.min(d - 0.5 * (state.npcs[i].dims.0 + len));
                }
            }
        }
        if let Some(d) = path_gap_to_point(&lookahead, ego.pose.pos, 2.0) {
            if d > 0.5 {
                nearest_gap = nearest_gap.min(d - 0.5 * (state.npcs[i].dims.0 + ego.dims.0));
            }
        }
        // Pedestrians on or entering the corridor.
        for ped in &state.pedestrians {
            let probe = if ped.phase == PedPhase::Crossing {
                ped.position + ped.velocity.scale(1.0)
            } else {
                ped.position
            };
            if let Some(d) = path_gap_to_point(&lookahead, probe, 1.8) {
                nearest_gap = nearest_gap.min(d - 0.5 * state.npcs[i].dims.0 - 1.0);
            }
        }
        if nearest_gap < NPC_GAP_STOP_M {
            target = 0.0;
        } else if nearest_gap < NPC_GAP_FREE_M {
            target = target
                * ((nearest_gap - NPC_GAP_STOP_M) / (NPC_GAP_FREE_M - NPC_GAP_STOP_M));
        }

        // Red or yellow light at the end of the current lane.
        if let NpcTrack::Lane { lane, s } = track {
            if let Some(light) = map.light_for_lane(lane) {
                let (phase, _) = light_phase_at_def(light, state.time_s);
                if phase != LightPhase::Green {
                    let d_stop = map.lanes[lane.0].length - s - state.npcs[i].dims.0 * 0.5 - 1.0;
                    if d_stop < 0.5 {
                        if d_stop > -2.0 {
                            target = 0.0;
                        }
                    } else {
                        let allowed = (2.0 * NPC_BRAKE_COMFORT * d_stop).sqrt();
                        target = target.min(allowed);
                        if d_stop < 2.0 {
                            target = 0.0;
                        }
                    }
                }
            }
        }

        let npc = &mut state.npcs[i];
        let accel = ((target - npc.speed) / DT).clamp(-NPC_DECEL, NPC_ACCEL);
        npc.speed = (npc.speed + accel * DT).max(0.0);
        let mut advance = npc.speed * DT;

        // Move along the track, transitioning across pieces as needed.
        let mut cur = track;
        let mut guard = 0;
        while advance > 0.0 && guard < 4 {
            guard += 1;
            match cur {
                NpcTrack::Lane { lane, s } => {
                    let len = map.lanes[lane.0].length;
                    if s + advance <= len {
                        cur = NpcTrack::Lane { lane, s: s + advance };
                        advance = 0.0;
                    } else {
                        advance -= len - s;
                        let n_succ = map.lanes[lane.0].successors.len();
                        let k = if n_succ > 1 {
                            state.rng.npc.index(n_succ)
                        } else {
                            0
                        };
                        cur = NpcTrack::Connection { from: lane, k, s: 0.0 };
                    }
                }
                NpcTrack::Connection { from, k, s } => {
                    let len = map.connections[from.0][k].length;
                    if s + advance <= len {
                        cur = NpcTrack::Connection { from, k, s: s + advance };
                        advance = 0.0;
                    } else {
                        advance -= len - s;
                        cur = NpcTrack::Lane {
                            lane: map.lanes[from.0].successors[k],
                            s: 0.0,
                        };
                    }
                }
            }
        }
        let (points, s): (&[Vec2], f64) = match cur {
            NpcTrack::Lane { lane, s } => (&map.lanes[lane.0].points, s),
            NpcTrack::Connection { from, k, s } => (&map.connections[from.0][k].points, s),
        };
        let (pos, heading) = polyline_point_at(points, s);
        npc.pose = Pose::new(pos, heading);
        npc.track = Some(cur);
    }
}

fn step_pedestrians(state: &mut WorldState, map: &TownMap) {
    let _ = map;
    let ego_pos = state.ego.pose.pos;
    for ped in state.pedestrians.iter_mut() {
        match ped.phase {
            PedPhase::Sidewalk => {
                ped.velocity = Vec2::ZERO;
                if ped.cooldown > 0.0 {
                    ped.cooldown -= DT;
                    // Keep the stream aligned: no draw while cooling down.
                    continue;
                }
                let p = if ego_pos.dist(ped.position) < PED_EGO_NEAR_M {
                    PED_CROSS_PROB_NEAR
                } else {
                    PED_CROSS_PROB_FAR
                };
                if state.rng.ped.chance(p) {
                    let speed = state.rng.ped.uniform_in(1.0, 2.0);
                    ped.velocity = ped.crossing_dir.scale(speed);
                    ped.crossing_timer = ped.crossing_len / speed;
                    ped.phase = PedPhase::Crossing;
                }
            }
            PedPhase::Crossing => {
                ped.position = ped.position + ped.velocity.scale(DT);
                ped.crossing_timer -= DT;
                if ped.crossing_timer <= 0.0 {
                    ped.phase = PedPhase::Sidewalk;
                    ped.velocity = Vec2::ZERO;
                    ped.crossing_dir = ped.crossing_dir.scale(-1.0);
                    ped.cooldown = PED_COOLDOWN_S;
                }
            }
        }
    }
}

fn detect_collisions(state: &mut WorldState, map: &TownMap) -> Vec<CollisionEvent> {
    let mut events = Vec::new();
    let ego_obb = state.ego.obb();
    let ego_vel = state.ego.velocity();

    for (i, npc) in state.npcs.iter().enumerate() {
        let touching = ego_obb.overlaps(&npc.obb());
        if touching && !state.contacts.npc[i] {
            let impulse = (ego_vel - npc.velocity()).norm();
            events.push(CollisionEvent {
                kind: CollisionKind::Vehicle,
                impulse,
                tick: state.tick,
            });
        }
        state.contacts.npc[i] = touching;
    }

    for (i, ped) in state.pedestrians.iter().enumerate() {
        let touching = ego_obb.distance_to_point(ped.position) <= PEDESTRIAN_RADIUS_M;
        if touching && !state.contacts.ped[i] {
            let impulse = (ego_vel - ped.velocity).norm();
            events.push(CollisionEvent {
                kind: CollisionKind::Pedestrian,
                impulse,
                tick: state.tick,
            });
        }
        state.contacts.ped[i] = touching;
    }

    // Curb strike: any footprint corner leaves the drivable surface.
    let off = ego_obb
        .corners()
        .iter()
        .any(|c| !map.raster.drivable_at(*c));
    if off && !state.contacts.offroad {
        events.push(CollisionEvent {
            kind: CollisionKind::Other,
            impulse: state.ego.speed,
            tick: state.tick,
        });
    }
    state.contacts.offroad = off;

    events
}

// ---------------------------------------------------------------------------
// Traffic-light crossing detection
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightCrossing {
    pub light: LightId,
    /// True when the controlling light was red at the crossing tick.
    pub violation: bool,
}

/// Detect the ego front crossing a stop line between two consecutive states.
/// Fires once per pass; a vehicle waiting at the line generates nothing until
/// it actually crosses.
pub fn check_traffic_light_crossing(
    before: &WorldState,
    after: &WorldState,
    map: &TownMap,
) -> Option<LightCrossing> {
    let f0 = before.ego.front();
    let f1 = after.ego.front();
    if f0.dist(f1) < 1e-9 {
        return None;
    }
    for def in &map.traffic_lights {
        if !segments_intersect(f0, f1, def.stop_line.0, def.stop_line.1) {
            continue;
        }
        // Count only forward passes in the lane's travel direction.
        let lane = &map.lanes[def.lane.0];
        let n = lane.points.len();
        let lane_dir = (lane.points[n - 1] - lane.points[n - 2]).normalized();
        if (f1 - f0).dot(lane_dir) <= 0.0 {
            continue;
        }
        let (phase, _) = light_phase_at_def(def, after.time_s);
        return Some(LightCrossing {
            light: def.id,
            violation: phase == LightPhase::Red,
        });
    }
    None
}

// ---------------------------------------------------------------------------
// Observation rendering
// ---------------------------------------------------------------------------

/// Rasterize the ego-centric semantic grid and apply weather effects.
/// Pure function of its arguments; per-cell noise is keyed off the state's
/// weather substream, so re-rendering the same state gives identical grids.
pub fn render_observation(
    state: &WorldState,
    map: &TownMap,
    weather: &Weather,
    command: HighLevelCommand,
) -> Observation {
    let mut grid = vec![0.0f32; OBS_CHANNELS * OBS_HEIGHT * OBS_WIDTH];
    let pose = state.ego.pose;

    let cell_center = |row: usize, col: usize| -> Vec2 {
        Vec2::new(
            -OBS_LATERAL_HALF_M + (col as f64 + 0.5) * OBS_CELL_M,
            (row as f64 + 0.5) * OBS_CELL_M,
        )
    };

    // Static channels sampled from the town raster.
    for row in 0..OBS_HEIGHT {
        for col in 0..OBS_WIDTH {
            let world = pose.to_world(cell_center(row, col));
            let idx = row * OBS_WIDTH + col;
            if map.raster.sample(&map.raster.drivable, world) > 0 {
                grid[CH_DRIVABLE * OBS_HEIGHT * OBS_WIDTH + idx] = 1.0;
            }
            if map.raster.sample(&map.raster.marking, world) > 0 {
                grid[CH_MARKING * OBS_HEIGHT * OBS_WIDTH + idx] = 1.0;
            }
        }
    }

    // Cells covered by a local-frame disc or rectangle.
    let stamp_disc = |grid: &mut [f32], chan: usize, center_local: Vec2, r: f64, v: f32| {
        let row_lo = (((center_local.y - r) / OBS_CELL_M).floor()).max(0.0) as usize;
        let row_hi = ((center_local.y + r) / OBS_CELL_M).ceil().min(OBS_HEIGHT as f64) as usize;
        let col_lo = (((center_local.x - r + OBS_LATERAL_HALF_M) / OBS_CELL_M).floor()).max(0.0) as usize;
        let col_hi = (((center_local.x + r + OBS_LATERAL_HALF_M) / OBS_CELL_M).ceil())
            .min(OBS_WIDTH as f64) as usize;
        for row in row_lo..row_hi {
            for col in col_lo..col_hi {
                if cell_center(row, col).dist(center_local) <= r {
                    let i = (chan * OBS_HEIGHT + row) * OBS_WIDTH + col;
                    grid[i] = grid[i].max(v);
                }
            }
        }
    };

    // NPC vehicles (the ego itself is not drawn).
    for npc in &state.npcs {
        let local = pose.to_local(npc.pose.pos);
        if local.y < -6.0
            || local.y > OBS_FORWARD_M + 6.0
            || local.x.abs() > OBS_LATERAL_HALF_M + 6.0
        {
            continue;
        }
        let obb = npc.obb();
        let half_diag = (npc.dims.0 + npc.dims.1) * 0.5;
        let row_lo = (((local.y - half_diag) / OBS_CELL_M).floor()).max(0.0) as usize;
        let row_hi = ((local.y + half_diag) / OBS_CELL_M)
            .ceil()
            .min(OBS_HEIGHT as f64) as usize;
        let col_lo = (((local.x - half_diag + OBS_LATERAL_HALF_M) / OBS_CELL_M).floor()).max(0.0)
            as usize;
        let col_hi = (((local.x + half_diag + OBS_LATERAL_HALF_M) / OBS_CELL_M).ceil())
            .min(OBS_WIDTH as f64) as usize;
        for row in row_lo..row_hi {
            for col in col_lo..col_hi {
                let world = pose.to_world(cell_center(row, col));
                if obb.contains(world) {
                    grid[(CH_VEHICLE * OBS_HEIGHT + row) * OBS_WIDTH + col] = 1.0;
                }
            }
        }
    }

    for ped in &state.pedestrians {
        let local = pose.to_local(ped.position);
        if local.y < -2.0 || local.y > OBS_FORWARD_M + 2.0 || local.x.abs() > OBS_LATERAL_HALF_M + 2.0
        {
            continue;
        }
        stamp_disc(&mut grid, CH_PEDESTRIAN, local, 0.6, 1.0);
    }

    // Stop lines lit by their light phase. Yellow renders at half intensity
    // in the red channel.
    for def in &map.traffic_lights {
        let a = pose.to_local(def.stop_line.0);
        let b = pose.to_local(def.stop_line.1);
        if a.y.max(b.y) < -1.0
            || a.y.min(b.y) > OBS_FORWARD_M + 1.0
            || a.x.abs().min(b.x.abs()) > OBS_LATERAL_HALF_M + 4.0
        {
            continue;
        }
        let (phase, _) = light_phase_at_def(def, state.time_s);
        let (chan, v) = match phase {
            LightPhase::Red => (CH_RED_LIGHT, 1.0f32),
            LightPhase::Yellow => (CH_RED_LIGHT, 0.5),
            LightPhase::Green => (CH_GREEN_LIGHT, 1.0),
        };
        let row_lo = ((a.y.min(b.y) - 0.5) / OBS_CELL_M).floor().max(0.0) as usize;
        let row_hi = ((a.y.max(b.y) + 0.5) / OBS_CELL_M)
            .ceil()
            .min(OBS_HEIGHT as f64) as usize;
        let col_lo = ((a.x.min(b.x) - 0.5 + OBS_LATERAL_HALF_M) / OBS_CELL_M)
            .floor()
            .max(0.0) as usize;
        let col_hi = ((a.x.max(b.x) + 0.5 + OBS_LATERAL_HALF_M) / OBS_CELL_M)
            .ceil()
            .min(OBS_WIDTH as f64) as usize;
        for row in row_lo..row_hi {
            for col in col_lo..col_hi {
                if point_segment_distance(cell_center(row, col), a, b) <= 0.5 {
                    let i = (chan * OBS_HEIGHT + row) * OBS_WIDTH + col;
                    grid[i] = grid[i].max(v);
                }
            }
        }
    }

    // Weather: brightness scaling plus per-cell additive noise, then clamp.
    let key = state.rng.weather.state();
    let bright = weather.brightness_scale as f32;
    if weather.noise_sigma > 0.0 {
        let sigma = weather.noise_sigma;
        for (i, v) in grid.iter_mut().enumerate() {
            let z = keyed_normal(key, i as u64);
            *v = (*v * bright + (sigma * z) as f32).clamp(0.0, 1.0);
        }
    } else {
        for v in grid.iter_mut() {
            *v = (*v * bright).clamp(0.0, 1.0);
        }
    }

    Observation {
        grid,
        speed_mps: state.ego.speed,
        command,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::town::{build_town, TownId};

    fn empty_world(map: &TownMap) -> WorldState {
        spawn_scenario(map, DensityProfile::Empty, 1, 0).unwrap()
    }

    #[test]
    fn control_clamps_on_construction() {
        let c = ControlCommand::new(-3.0, 1.7, -0.2);
        assert_eq!(c.steer(), -1.0);
        assert_eq!(c.throttle(), 1.0);
        assert_eq!(c.brake(), 0.0);
    }

    #[test]
    fn stationary_without_forces() {
        let map = build_town(TownId::TownA, 7);
        let w0 = empty_world(&map);
        let (w1, ev) = step(&w0, ControlCommand::new(0.0, 0.0, 0.0), &map);
        assert_eq!(w1.ego.pose.pos, w0.ego.pose.pos);
        assert_eq!(w1.ego.speed, 0.0);
        assert!(ev.is_empty());
    }

    #[test]
    fn straight_throttle_moves_along_heading() {
        let map = build_town(TownId::TownA, 7);
        let mut w = empty_world(&map);
        let start = w.ego.pose;
        for _ in 0..50 {
            let (n, _) = step(&w, ControlCommand::new(0.0, 1.0, 0.0), &map);
            w = n;
        }
        let disp = w.ego.pose.pos - start.pos;
        let lateral = disp.dot(start.right());
        assert!(disp.norm() > 5.0);
        assert!(lateral.abs() < 1e-9, "lateral {lateral}");
        assert_eq!(w.ego.pose.heading, start.heading);
    }

    #[test]
    fn speed_non_increasing_when_coasting() {
        let map = build_town(TownId::TownA, 7);
        let mut w = empty_world(&map);
        for _ in 0..30 {
            let (n, _) = step(&w, ControlCommand::new(0.0, 1.0, 0.0), &map);
            w = n;
        }
        let mut prev = w.ego.speed;
        for _ in 0..100 {
            let (n, _) = step(&w, ControlCommand::new(0.0, 0.0, 0.0), &map);
            w = n;
            assert!(w.ego.speed <= prev + 1e-12);
            prev = w.ego.speed;
        }
    }

    #[test]
    fn stepping_is_deterministic() {
        let map = build_town(TownId::TownA, 3);
        let w0 = spawn_scenario(&map, DensityProfile::Dense, 5, 0).unwrap();
        let run = |mut w: WorldState| {
            let mut all_events = Vec::new();
            for i in 0..200 {
                let c = ControlCommand::new((i as f64 * 0.01).sin() * 0.2, 0.6, 0.0);
                let (n, ev) = step(&w, c, &map);
                w = n;
                all_events.extend(ev);
            }
            (w, all_events)
        };
        let (wa, ea) = run(w0.clone());
        let (wb, eb) = run(w0);
        assert_eq!(wa, wb);
        assert_eq!(ea, eb);
    }

    #[test]
    fn spawn_counts_follow_density() {
        let map = build_town(TownId::TownA, 7);
        let empty = spawn_scenario(&map, DensityProfile::Empty, 3, 0).unwrap();
        assert_eq!(empty.npcs.len(), 0);
        assert_eq!(empty.pedestrians.len(), 0);
        let reg = spawn_scenario(&map, DensityProfile::Regular, 3, 0).unwrap();
        let ((vlo, vhi), (plo, phi)) = DensityProfile::Regular.intervals(TownId::TownA);
        assert!((vlo as usize..=vhi as usize).contains(&reg.npcs.len()));
        assert!((plo as usize..=phi as usize).contains(&reg.pedestrians.len()));
    }

    #[test]
    fn spawn_is_deterministic() {
        let map = build_town(TownId::TownA, 7);
        let a = spawn_scenario(&map, DensityProfile::Dense, 3, 0).unwrap();
        let b = spawn_scenario(&map, DensityProfile::Dense, 3, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pedestrian_collision_reported_once() {
        let map = build_town(TownId::TownA, 7);
        let mut w = empty_world(&map);
        // Plant a pedestrian straight ahead on the lane.
        let ahead = w.ego.pose.to_world(Vec2::new(0.0, 12.0));
        w.pedestrians.push(PedestrianState {
            position: ahead,
            velocity: Vec2::ZERO,
            phase: PedPhase::Sidewalk,
            crossing_timer: 0.0,
            crossing_dir: Vec2::new(1.0, 0.0),
            crossing_len: 10.0,
            cooldown: 1e9,
        });
        w.contacts.ped.push(false);
        let mut hits = Vec::new();
        for _ in 0..120 {
            let (n, ev) = step(&w, ControlCommand::new(0.0, 0.8, 0.0), &map);
            w = n;
            hits.extend(ev);
        }
        let ped_hits: Vec<&CollisionEvent> = hits
            .iter()
            .filter(|e| e.kind == CollisionKind::Pedestrian)
            .collect();
        assert_eq!(ped_hits.len(), 1, "events: {hits:?}");
        assert!(ped_hits[0].impulse > 0.5);
    }

    #[test]
    fn light_cycle_has_exact_durations() {
        let map = build_town(TownId::TownA, 7);
        let w = empty_world(&map);
        let light = w.lights[0].light_id;
        let mut durations = std::collections::HashMap::new();
        let mut prev = light_phase_at(&map, light, 0.0).0;
        let mut start = 0.0;
        let mut t = 0.0;
        let mut first_transition_seen = false;
        while t < 80.0 {
            t += DT;
            let (phase, _) = light_phase_at(&map, light, t);
            if phase != prev {
                // The phase running at t=0 is generally partial; skip it.
                if first_transition_seen {
                    let d = t - start;
                    durations.entry(prev).or_insert_with(Vec::new).push(d);
                }
                first_transition_seen = true;
                prev = phase;
                start = t;
            }
        }
        for (phase, ds) in durations {
            let expect = match phase {
                LightPhase::Green => GREEN_S,
                LightPhase::Yellow => YELLOW_S,
                LightPhase::Red => RED_S,
            };
            for d in ds {
                assert!((d - expect).abs() < DT + 1e-9, "{phase:?} lasted {d}");
            }
        }
    }

    #[test]
    fn empty_town_has_clear_agent_channels() {
        let map = build_town(TownId::TownA, 7);
        let w = empty_world(&map);
        let weather = Weather::from_id(crate::town::WeatherId::ClearNoon);
        let obs = render_observation(&w, &map, &weather, HighLevelCommand::LaneFollow);
        for row in 0..OBS_HEIGHT {
            for col in 0..OBS_WIDTH {
                assert_eq!(obs.at(CH_VEHICLE, row, col), 0.0);
                assert_eq!(obs.at(CH_PEDESTRIAN, row, col), 0.0);
            }
        }
        // The ego sits on a road: the drivable channel is substantially lit.
        let lit: usize = (0..OBS_HEIGHT)
            .flat_map(|r| (0..OBS_WIDTH).map(move |c| (r, c)))
            .filter(|&(r, c)| obs.at(CH_DRIVABLE, r, c) > 0.5)
            .count();
        assert!(lit > 200, "only {lit} drivable cells");
    }

    #[test]
    fn render_is_pure() {
        let map = build_town(TownId::TownA, 7);
        let w = spawn_scenario(&map, DensityProfile::Regular, 9, 0).unwrap();
        let weather = Weather::from_id(crate::town::WeatherId::HeavyRainNoon);
        let a = render_observation(&w, &map, &weather, HighLevelCommand::LaneFollow);
        let b = render_observation(&w, &map, &weather, HighLevelCommand::LaneFollow);
        assert_eq!(a, b);
    }

    #[test]
    fn observation_ignores_content_outside_window() {
        let map = build_town(TownId::TownA, 7);
        let w = empty_world(&map);
        let weather = Weather::from_id(crate::town::WeatherId::SoftRainSunset);
        let base = render_observation(&w, &map, &weather, HighLevelCommand::LaneFollow);
        let mut far = w.clone();
        far.npcs.push(VehicleState {
            pose: Pose::new(w.ego.pose.to_world(Vec2::new(0.0, -60.0)), 0.0),
            speed: 0.0,
            kind: VehicleKind::Npc,
            npc_profile: 5.0,
            dims: (VEHICLE_LENGTH_M, VEHICLE_WIDTH_M),
            track: None,
        });
        far.contacts.npc.push(false);
        let with_far = render_observation(&far, &map, &weather, HighLevelCommand::LaneFollow);
        assert_eq!(base.grid, with_far.grid);
    }

    #[test]
    fn grid_values_stay_in_unit_range() {
        let map = build_town(TownId::TownA, 7);
        let mut w = spawn_scenario(&map, DensityProfile::Dense, 11, 0).unwrap();
        let weather = Weather::from_id(crate::town::WeatherId::HeavyRainNoon);
        for _ in 0..5 {
            let (n, _) = step(&w, ControlCommand::new(0.1, 0.5, 0.0), &map);
            w = n;
        }
        let obs = render_observation(&w, &map, &weather, HighLevelCommand::TurnLeft);
        for v in &obs.grid {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn red_light_lights_stop_line_cells() {
        let map = build_town(TownId::TownA, 7);
        let def = map.traffic_lights[0].clone();
        let lane = map.lane(def.lane);
        // Ego on the approach lane, 10 m before the stop line.
        let s = lane.length - 10.0;
        let (pos, heading) = polyline_point_at(&lane.points, s);
        let mut w = empty_world(&map);
        w.ego.pose = Pose::new(pos, heading);
        // Find a time where this light is red.
        let mut red_time = None;
        let mut t = 0.0;
        while t < CYCLE_S {
            if light_phase_at(&map, def.id, t).0 == LightPhase::Red {
                red_time = Some(t);
                break;
            }
            t += 0.5;
        }
        w.time_s = red_time.unwrap();
        let weather = Weather::from_id(crate::town::WeatherId::ClearNoon);
        let obs = render_observation(&w, &map, &weather, HighLevelCommand::LaneFollow);
        let lit: usize = (0..OBS_HEIGHT)
            .flat_map(|r| (0..OBS_WIDTH).map(move |c| (r, c)))
            .filter(|&(r, c)| obs.at(CH_RED_LIGHT, r, c) > 0.9)
            .count();
        assert!(lit > 0, "no red stop-line cells");
    }

    #[test]
    fn crossing_detection_and_violation() {
        let map = build_town(TownId::TownA, 7);
        let def = map.traffic_lights[0].clone();
        let lane = map.lane(def.lane);
        let (pos, heading) = polyline_point_at(&lane.points, lane.length - 3.0);
        let make_state = |time_s: f64, offset: f64| {
            let mut w = empty_world(&map);
            w.ego.pose = Pose::new(pos + Vec2::from_angle(heading).scale(offset), heading);
            w.ego.speed = 5.0;
            w.time_s = time_s;
            w
        };
        // Find red and green times.
        let mut red_t = None;
        let mut green_t = None;
        let mut t = 0.0;
        while t < CYCLE_S {
            match light_phase_at(&map, def.id, t).0 {
                LightPhase::Red if red_t.is_none() => red_t = Some(t),
                LightPhase::Green if green_t.is_none() => green_t = Some(t),
                _ => {}
            }
            t += 0.25;
        }
        let (red_t, green_t) = (red_t.unwrap(), green_t.unwrap());

        // Crossing the line while red.
        let before = make_state(red_t, 0.0);
        let after = make_state(red_t, 4.0);
        let ev = check_traffic_light_crossing(&before, &after, &map).unwrap();
        assert!(ev.violation);
        assert_eq!(ev.light, def.id);

        // Crossing while green.
        let before = make_state(green_t, 0.0);
        let after = make_state(green_t, 4.0);
        let ev = check_traffic_light_crossing(&before, &after, &map).unwrap();
        assert!(!ev.violation);

        // Standing still before the line across the red phase: no event.
        let before = make_state(red_t, -1.0);
        let mut still = before.clone();
        still.time_s += DT;
        assert!(check_traffic_light_crossing(&before, &still, &map).is_none());
    }

    #[test]
    fn command_codes_match_convention() {
        assert_eq!(HighLevelCommand::LaneFollow.code(), 2);
        assert_eq!(HighLevelCommand::TurnLeft.code(), 3);
        assert_eq!(HighLevelCommand::TurnRight.code(), 4);
        assert_eq!(HighLevelCommand::GoStraight.code(), 5);
        for c in HighLevelCommand::ALL {
            assert_eq!(HighLevelCommand::from_code(c.code()), Some(c));
        }
    }
}
