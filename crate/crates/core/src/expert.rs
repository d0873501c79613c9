//! Privileged rule-based demonstrator: waypoint-following PID steering, speed
//! targets with hazard slowdowns (pedestrians, lead vehicles, traffic lights),
//! and a triangular steering-noise injector for data collection.

use crate::geom::{wrap_angle, Vec2};
use crate::rng::SimRng;
use crate::sim::{ControlCommand, LightPhase, PedPhase, WorldState, DT};
use crate::town::{Route, RouteCursor, TownError, TownMap, OFF_ROUTE_DISTANCE_M};
use crate::HighLevelCommand;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Cruise speed on straights, m/s (35 km/h).
    pub cruise_straight: f64,
    /// Cruise speed inside turn windows, m/s (15 km/h).
    pub cruise_turn: f64,
    /// Pedestrian slowdown band: full speed beyond `ped_far`, stopped inside
    /// `ped_near`.
    pub ped_far: f64,
    pub ped_near: f64,
    /// Full stop when the lead-vehicle gap is below this.
    pub lead_stop: f64,
    /// Free driving when the lead-vehicle gap exceeds this.
    pub lead_far: f64,
    // Steering: lateral PID around a pursuit term on the heading error to
    // the lookahead waypoint.
    pub kp_lat: f64,
    pub ki_lat: f64,
    pub kd_lat: f64,
    /// Lookahead distance per m/s of speed, with a floor.
    pub lookahead_per_mps: f64,
    pub lookahead_min_m: f64,
    // Proportional speed controller.
    pub kp_throttle: f64,
    pub kp_brake: f64,
    /// Comfortable deceleration used to approach stop lines.
    pub brake_decel: f64,
    /// Half-width of the hazard corridor around the route.
    pub corridor_half: f64,
    /// Pedestrian positions are predicted this far into the future.
    pub ped_horizon_s: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            cruise_straight: 35.0 / 3.6,
            cruise_turn: 15.0 / 3.6,
            ped_far: 15.0,
            ped_near: 5.0,
            lead_stop: 5.0,
            lead_far: 15.0,
            kp_lat: 0.08,
            ki_lat: 0.0,
            kd_lat: 0.15,
            lookahead_per_mps: 0.8,
            lookahead_min_m: 4.0,
            kp_throttle: 0.6,
            kp_brake: 0.45,
            brake_decel: 3.5,
            corridor_half: 1.5,
            ped_horizon_s: 2.0,
        }
    }
}

/// How strongly each hazard class is suppressing expert speed; 1 means a full
/// stop caused by that hazard, 0 means no such hazard in view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Intentions {
    pub stop_pedestrian: f64,
    pub stop_vehicle: f64,
    pub stop_traffic_light: f64,
}

/// Steering PID memory plus route progress, carried across ticks.
#[derive(Clone, Debug, Default)]
pub struct ExpertState {
    pub cursor: RouteCursor,
    prev_lat_err: f64,
    integral: f64,
    /// Light the expert has committed to clear on yellow; latched until the
    /// stop line is behind.
    committed_light: Option<crate::town::LightId>,
}

impl ExpertState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One expert decision. Returns the controls, the per-hazard intention
/// signals, and the final speed target.
pub fn expert_act(
    state: &WorldState,
    route: &Route,
    map: &TownMap,
    cfg: &ExpertConfig,
    mem: &mut ExpertState,
) -> Result<(ControlCommand, Intentions, f64), TownError> {
    let ego = &state.ego;
    mem.cursor.advance(route, ego.pose.pos);
    if mem.cursor.distance_to_route(route, ego.pose.pos) > OFF_ROUTE_DISTANCE_M {
        return Err(TownError::OffRoute);
    }
    let arc = mem.cursor.arc_position(route, ego.pose.pos);

    // --- Steering. The pursuit term turns the heading error to the lookahead
    // waypoint into a curvature and inverts the bicycle model, which keeps the
    // command far from saturation at cruise speed. A small PID on the lateral
    // offset of the lookahead point removes residual centering error.
    let lookahead = (cfg.lookahead_per_mps * ego.speed).max(cfg.lookahead_min_m);
    let (look_pt, _) = route.point_at_arc(arc + lookahead);
    let local = ego.pose.to_local(look_pt);
    // The pursuit distance is floored at the lookahead so the bearing term
    // cannot blow up when the target converges at the route end.
    let dist = local.norm().max(lookahead * 0.7);
    // Bearing of the lookahead point; positive when it lies to the left.
    let alpha = (-local.x).atan2(local.y);
    let curvature = 2.0 * alpha.sin() / dist;
    let pursuit = (curvature * crate::sim::WHEELBASE_M).atan() / crate::sim::MAX_STEER_RAD;

    // Lateral PID on the ego's own offset from the path (positive left).
    // Differentiating this offset gives the physical drift rate, which damps
    // heading excursions without amplifying frame rotation.
    let lat_err = path_lateral(route, &mem.cursor, ego.pose.pos);
    let d_err = (lat_err - mem.prev_lat_err) / DT;
    mem.integral += lat_err * DT;
    mem.prev_lat_err = lat_err;
    let steer =
        pursuit - cfg.kp_lat * lat_err - cfg.kd_lat * d_err - cfg.ki_lat * mem.integral;

    // --- Base speed target: slower inside command windows, through tight
    // bends, and on the final approach to the route end.
    let command = mem.cursor.command(route)?;
    let mut base = if command == HighLevelCommand::LaneFollow {
        cruise_for_curvature(route, arc, cfg)
    } else {
        cfg.cruise_turn
    };
    if base <= 0.0 {
        base = cfg.cruise_turn;
    }
    let remaining = route.length_m - arc;
    if remaining < 25.0 {
        base = base.min((2.0 * 2.5 * remaining.max(0.0)).sqrt().max(3.0));
    }

    // --- Hazard factors.
    let ped_factor = pedestrian_factor(state, route, arc, cfg);
    let lead_factor = lead_vehicle_factor(state, route, arc, cfg)
        .min(left_turn_yield_factor(state, route, arc, base, cfg));
    let light_factor =
        traffic_light_factor(state, route, map, arc, base, cfg, &mut mem.committed_light);
    let target = base * ped_factor * lead_factor * light_factor;

    let intentions = Intentions {
        stop_pedestrian: (1.0 - ped_factor).clamp(0.0, 1.0),
        stop_vehicle: (1.0 - lead_factor).clamp(0.0, 1.0),
        stop_traffic_light: (1.0 - light_factor).clamp(0.0, 1.0),
    };

    // --- Longitudinal control: proportional throttle/brake, never both.
    let err = target - ego.speed;
    let (throttle, brake) = if err >= 0.0 {
        (cfg.kp_throttle * err, 0.0)
    } else {
        let mut b = cfg.kp_brake * (-err);
        if target < 0.05 {
            b = b.max(0.6);
        }
        (0.0, b)
    };

    Ok((
        ControlCommand::new(steer, throttle, brake),
        intentions,
        target,
    ))
}

/// Signed lateral offset of a point from the route at the cursor segment;
/// positive when the point is left of travel.
fn path_lateral(route: &Route, cursor: &crate::town::RouteCursor, pos: Vec2) -> f64 {
    let i = cursor.idx.min(route.waypoints.len() - 2);
    let a = route.waypoints[i];
    let b = route.waypoints[i + 1];
    let dir = (b - a).normalized();
    dir.cross(pos - a)
}

/// Reduce the straight-cruise target ahead of sharp geometry (e.g. 90-degree
/// bends that carry no turn command).
fn cruise_for_curvature(route: &Route, arc: f64, cfg: &ExpertConfig) -> f64 {
    let (_, h_now) = route.point_at_arc(arc + 2.0);
    let (_, h_mid) = route.point_at_arc(arc + 9.0);
    let (_, h_far) = route.point_at_arc(arc + 16.0);
    let turn = wrap_angle(h_mid - h_now)
        .abs()
        .max(wrap_angle(h_far - h_now).abs());
    if turn > 0.35 {
        cfg.cruise_turn
    } else {
        cfg.cruise_straight
    }
}

/// Linear slowdown ramp for the nearest threatening pedestrian ahead.
/// A pedestrian threatens when its predicted position enters the corridor
/// along the route.
fn pedestrian_factor(state: &WorldState, route: &Route, arc: f64, cfg: &ExpertConfig) -> f64 {
    let mut factor: f64 = 1.0;
    for ped in &state.pedestrians {
        let predicted = ped.position + ped.velocity.scale(cfg.ped_horizon_s);
        let mut threat_dist = f64::INFINITY;
        for probe in [ped.position, predicted] {
            let (p_arc, lateral, dist) = crate::town::polyline_project(&route.waypoints, probe);
            if dist > OFF_ROUTE_DISTANCE_M {
                continue;
            }
            if lateral.abs() <= cfg.corridor_half && p_arc > arc {
                threat_dist = threat_dist.min(p_arc - arc);
            }
        }
        // Standing pedestrians just off the road are not threats; moving ones
        // are judged by where they will be.
        if ped.phase == PedPhase::Sidewalk && ped.velocity.norm() < 1e-9 {
            continue;
        }
        if threat_dist <= cfg.ped_far + 25.0 {
            let f = ((threat_dist - cfg.ped_near) / (cfg.ped_far - cfg.ped_near)).clamp(0.0, 1.0);
            factor = factor.min(f);
        }
    }
    factor
}

/// Linear slowdown for the nearest vehicle ahead in the corridor; full stop
/// below the `lead_stop` gap. Vehicles are judged at their current position
/// and a short prediction, which catches cut-ins.
fn lead_vehicle_factor(state: &WorldState, route: &Route, arc: f64, cfg: &ExpertConfig) -> f64 {
    let mut factor: f64 = 1.0;
    let half_len = state.ego.dims.0 * 0.5;
    for npc in &state.npcs {
        let predicted = npc.pose.pos + npc.velocity().scale(1.0);
        for probe in [npc.pose.pos, predicted] {
            let (p_arc, lateral, dist) = crate::town::polyline_project(&route.waypoints, probe);
            if dist > OFF_ROUTE_DISTANCE_M || lateral.abs() > cfg.corridor_half {
                continue;
            }
            if p_arc <= arc {
                continue;
            }
            let gap = (p_arc - arc) - half_len - npc.dims.0 * 0.5;
            if gap <= cfg.lead_stop {
                factor = 0.0;
            } else if gap < cfg.lead_far {
                factor = factor.min((gap - cfg.lead_stop) / (cfg.lead_far - cfg.lead_stop));
            }
        }
    }
    factor
}

/// Yield before unprotected left turns: hold at the intersection entry while
/// oncoming through-traffic is approaching the node.
fn left_turn_yield_factor(
    state: &WorldState,
    route: &Route,
    arc: f64,
    base: f64,
    cfg: &ExpertConfig,
) -> f64 {
    for turn in &route.turns {
        if turn.command != HighLevelCommand::TurnLeft {
            continue;
        }
        // Only the upcoming turn matters, and only until the entry: once
        // inside the intersection, stopping would be worse than clearing it.
        let hold_arc = turn.entry_arc - 1.0;
        let d = hold_arc - arc - state.ego.dims.0 * 0.5;
        if d < -0.5 {
            continue;
        }
        if d > 25.0 {
            break;
        }
        let (_, entry_heading) = route.point_at_arc(turn.entry_arc - 1.0);
        let entry_dir = Vec2::from_angle(entry_heading);
        let node_pos = {
            // Conflict center: the intersection ahead of the entry.
            let (p, _) = route.point_at_arc(turn.entry_arc);
            p + entry_dir.scale(5.0)
        };
        let oncoming = state.npcs.iter().any(|npc| {
            if npc.speed < 0.8 {
                return false;
            }
            let fwd = npc.pose.forward();
            if fwd.dot(entry_dir) > -0.5 {
                return false; // not opposing our approach
            }
            let to_node = node_pos - npc.pose.pos;
            let dist = to_node.norm();
            dist < 30.0 && fwd.dot(to_node.normalized()) > 0.5
        });
        if oncoming {
            if d <= 1.0 {
                return 0.0;
            }
            let allowed = (2.0 * cfg.brake_decel * d).sqrt();
            return (allowed / base).clamp(0.0, 1.0);
        }
        break;
    }
    1.0
}

/// Scale allowed by the next red or yellow light ahead: a braking envelope
/// that reaches zero at the stop line.
fn traffic_light_factor(
    state: &WorldState,
    route: &Route,
    map: &TownMap,
    arc: f64,
    base: f64,
    cfg: &ExpertConfig,
    committed: &mut Option<crate::town::LightId>,
) -> f64 {
    let front_offset = state.ego.dims.0 * 0.5;
    for &(light_arc, light_id) in &route.lights {
        // Distance from the ego front to the stop line, minus a hold-back.
        let d = light_arc - arc - front_offset - 0.7;
        if d < -2.0 {
            if *committed == Some(light_id) {
                *committed = None;
            }
            continue; // already crossed
        }
        if d > 40.0 {
            break;
        }
        if *committed == Some(light_id) {
            continue;
        }
        let (phase, time_in_phase) = crate::sim::light_phase_at(map, light_id, state.time_s);
        match phase {
            LightPhase::Green => continue,
            LightPhase::Yellow => {
                // Commit through a fresh yellow when a comfortable stop is no
                // longer possible and the line clears well before red. The
                // commitment latches so the decision cannot oscillate.
                let speed = state.ego.speed.max(0.5);
                let can_stop = d >= speed * speed / (2.0 * 6.0);
                let clears =
                    (d + 0.7) / speed < (crate::sim::YELLOW_S - time_in_phase) - 0.3;
                if !can_stop && clears {
                    *committed = Some(light_id);
                    continue;
                }
            }
            LightPhase::Red => {}
        }
        if d <= 1.5 {
            return 0.0;
        }
        let allowed = (2.0 * cfg.brake_decel * d).sqrt();
        return (allowed / base).clamp(0.0, 1.0);
    }
    1.0
}

// ---------------------------------------------------------------------------
// Steering noise
// ---------------------------------------------------------------------------

/// A triangular steering perturbation: rises linearly from `t0`, peaks at
/// `t0 + tau/2` with value `sigma * gamma`, returns to zero at `t0 + tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseImpulse {
    pub t0: f64,
    pub tau: f64,
    pub sigma: f64,
    pub gamma: f64,
}

pub const NOISE_GAMMA: f64 = 0.15;
pub const NOISE_TAU_MIN: f64 = 0.5;
pub const NOISE_TAU_MAX: f64 = 2.0;
pub const NOISE_START_PROB_PER_S: f64 = 0.1;

/// Evaluate the impulse at time `t`.
pub fn noise_value(impulse: &NoiseImpulse, t: f64) -> f64 {
    impulse.sigma
        * impulse.gamma
        * (1.0 - (2.0 * (t - impulse.t0) / impulse.tau - 1.0).abs()).max(0.0)
}

/// Sum of all scheduled impulses at time `t`.
pub fn noise_offset(schedule: &[NoiseImpulse], t: f64) -> f64 {
    schedule.iter().map(|i| noise_value(i, t)).sum()
}

/// Draw a schedule: each whole second independently starts an impulse with
/// probability 0.1; duration uniform in [0.5, 2] s, sign uniform, intensity
/// fixed at 0.15. Deterministic per seed.
pub fn noise_schedule(duration_s: f64, seed: u64) -> Vec<NoiseImpulse> {
    let mut rng = SimRng::stream(seed, "noise");
    let mut out = Vec::new();
    let seconds = duration_s.ceil() as u64;
    for s in 0..seconds {
        if rng.chance(NOISE_START_PROB_PER_S) {
            let tau = rng.uniform_in(NOISE_TAU_MIN, NOISE_TAU_MAX);
            let sigma = rng.sign();
            out.push(NoiseImpulse {
                t0: s as f64,
                tau,
                sigma,
                gamma: NOISE_GAMMA,
            });
        }
    }
    out
}

/// Apply a steering offset, clamping back into range. Throttle and brake are
/// untouched; the recorder stores both the clean and the noised controls.
pub fn apply_noise(clean: ControlCommand, offset: f64) -> ControlCommand {
    ControlCommand::new(clean.steer() + offset, clean.throttle(), clean.brake())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;
    use crate::sim::{spawn_scenario, DensityProfile};
    use crate::town::{build_town, plan_route, TownId};

    #[test]
    fn triangle_peak_and_support() {
        let imp = NoiseImpulse {
            t0: 3.0,
            tau: 1.4,
            sigma: 1.0,
            gamma: NOISE_GAMMA,
        };
        assert_eq!(noise_value(&imp, imp.t0), 0.0);
        assert!((noise_value(&imp, imp.t0 + imp.tau / 2.0) - NOISE_GAMMA).abs() < 1e-12);
        assert_eq!(noise_value(&imp, imp.t0 + 2.0 * imp.tau), 0.0);
        assert_eq!(noise_value(&imp, imp.t0 - 0.5), 0.0);
    }

    #[test]
    fn triangle_integral_is_half_base_times_height() {
        let imp = NoiseImpulse {
            t0: 1.0,
            tau: 1.7,
            sigma: -1.0,
            gamma: NOISE_GAMMA,
        };
        // Trapezoidal quadrature as the independent check.
        let n = 200_000;
        let dt = imp.tau / n as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let a = noise_value(&imp, imp.t0 + i as f64 * dt);
            let b = noise_value(&imp, imp.t0 + (i + 1) as f64 * dt);
            integral += 0.5 * (a + b) * dt;
        }
        let expected = imp.sigma * imp.gamma * imp.tau / 2.0;
        assert!((integral - expected).abs() < 1e-6, "{integral} vs {expected}");
    }

    #[test]
    fn schedule_is_deterministic_and_in_range() {
        let a = noise_schedule(500.0, 42);
        let b = noise_schedule(500.0, 42);
        assert_eq!(a, b);
        for imp in &a {
            assert!((NOISE_TAU_MIN..=NOISE_TAU_MAX).contains(&imp.tau));
            assert!(imp.sigma == 1.0 || imp.sigma == -1.0);
            assert_eq!(imp.gamma, NOISE_GAMMA);
        }
    }

    #[test]
    fn schedule_rate_matches_binomial() {
        let n_seconds = 10_000.0;
        let schedule = noise_schedule(n_seconds, 7);
        let mean = n_seconds * NOISE_START_PROB_PER_S;
        let sigma = (n_seconds * NOISE_START_PROB_PER_S * (1.0 - NOISE_START_PROB_PER_S)).sqrt();
        let count = schedule.len() as f64;
        assert!(
            (count - mean).abs() <= 3.0 * sigma,
            "count {count}, expected {mean} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn apply_noise_clamps_and_preserves() {
        let clean = ControlCommand::new(0.0, 0.4, 0.0);
        let noised = apply_noise(clean, 0.15);
        assert!((noised.steer() - 0.15).abs() < 1e-12);
        assert_eq!(noised.throttle(), clean.throttle());
        assert_eq!(noised.brake(), clean.brake());

        let hot = ControlCommand::new(0.95, 0.4, 0.0);
        assert_eq!(apply_noise(hot, 0.15).steer(), 1.0);
        assert_eq!(apply_noise(clean, 0.0), clean);
    }

    #[test]
    fn pedestrian_midpoint_factor() {
        let map = build_town(TownId::TownA, 7);
        let route = plan_route(&map, 0, 5).unwrap();
        let mut w = spawn_scenario(&map, DensityProfile::Empty, 1, 0).unwrap();
        // Pedestrian exactly 10 m ahead on the route centerline, crossing.
        let (p, _) = route.point_at_arc(10.0);
        w.pedestrians.push(crate::sim::PedestrianState {
            position: p,
            velocity: Vec2::new(0.0, 1e-6),
            phase: PedPhase::Crossing,
            crossing_timer: 5.0,
            crossing_dir: Vec2::new(0.0, 1.0),
            crossing_len: 10.0,
            cooldown: 0.0,
        });
        w.contacts.ped.push(false);
        let cfg = ExpertConfig::default();
        let mut mem = ExpertState::new();
        let (_, intentions, _) = expert_act(&w, &route, &map, &cfg, &mut mem).unwrap();
        assert!(
            (intentions.stop_pedestrian - 0.5).abs() < 0.05,
            "intention {}",
            intentions.stop_pedestrian
        );
    }

    #[test]
    fn pedestrian_close_forces_stop() {
        let map = build_town(TownId::TownA, 7);
        let route = plan_route(&map, 0, 5).unwrap();
        let mut w = spawn_scenario(&map, DensityProfile::Empty, 1, 0).unwrap();
        w.ego.speed = 8.0;
        let (p, _) = route.point_at_arc(4.0);
        w.pedestrians.push(crate::sim::PedestrianState {
            position: p,
            velocity: Vec2::new(0.0, 1e-6),
            phase: PedPhase::Crossing,
            crossing_timer: 5.0,
            crossing_dir: Vec2::new(0.0, 1.0),
            crossing_len: 10.0,
            cooldown: 0.0,
        });
        w.contacts.ped.push(false);
        let cfg = ExpertConfig::default();
        let mut mem = ExpertState::new();
        let (ctrl, intentions, target) = expert_act(&w, &route, &map, &cfg, &mut mem).unwrap();
        assert_eq!(target, 0.0);
        assert!(ctrl.brake() > 0.0);
        assert_eq!(ctrl.throttle(), 0.0);
        assert!((intentions.stop_pedestrian - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hazard_factor_monotone_in_distance() {
        let map = build_town(TownId::TownA, 7);
        let route = plan_route(&map, 0, 5).unwrap();
        let base = spawn_scenario(&map, DensityProfile::Empty, 1, 0).unwrap();
        let cfg = ExpertConfig::default();
        let mut prev_target = -1.0;
        for d in [5.0, 7.0, 9.0, 11.0, 13.0, 15.0] {
            let mut w = base.clone();
            let (p, _) = route.point_at_arc(d);
            w.pedestrians.push(crate::sim::PedestrianState {
                position: p,
                velocity: Vec2::new(0.0, 1e-6),
                phase: PedPhase::Crossing,
                crossing_timer: 5.0,
                crossing_dir: Vec2::new(0.0, 1.0),
                crossing_len: 10.0,
                cooldown: 0.0,
            });
            w.contacts.ped.push(false);
            let mut mem = ExpertState::new();
            let (_, _, target) = expert_act(&w, &route, &map, &cfg, &mut mem).unwrap();
            assert!(target >= prev_target - 1e-12, "target {target} at d {d}");
            prev_target = target;
        }
    }

    #[test]
    fn never_throttle_and_brake_together() {
        let map = build_town(TownId::TownA, 7);
        let route = plan_route(&map, 0, 9).unwrap();
        let mut w = spawn_scenario(&map, DensityProfile::Regular, 5, 0).unwrap();
        let cfg = ExpertConfig::default();
        let mut mem = ExpertState::new();
        for _ in 0..300 {
            let Ok((ctrl, _, _)) = expert_act(&w, &route, &map, &cfg, &mut mem) else {
                break;
            };
            assert!(!(ctrl.throttle() > 0.0 && ctrl.brake() > 0.0));
            let (n, _) = crate::sim::step(&w, ctrl, &map);
            w = n;
        }
    }

    #[test]
    fn off_route_errors() {
        let map = build_town(TownId::TownA, 7);
        let route = plan_route(&map, 0, 5).unwrap();
        let mut w = spawn_scenario(&map, DensityProfile::Empty, 1, 0).unwrap();
        w.ego.pose.pos = w.ego.pose.pos + Vec2::new(500.0, 500.0);
        let cfg = ExpertConfig::default();
        let mut mem = ExpertState::new();
        assert!(matches!(
            expert_act(&w, &route, &map, &cfg, &mut mem),
            Err(TownError::OffRoute)
        ));
    }
}
