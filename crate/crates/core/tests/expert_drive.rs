//! Closed-loop expert sanity: the demonstrator completes goal-directed routes
//! in an empty town without collisions or red-light crossings.

use drivelab_core::expert::{expert_act, ExpertConfig, ExpertState};
use drivelab_core::rng::derive_seed;
use drivelab_core::sim::{
    check_traffic_light_crossing, spawn_scenario, step, DensityProfile, DT,
};
use drivelab_core::town::{build_town, plan_route, TownId};

struct Run {
    success: bool,
    collisions: usize,
    red_crossings: usize,
    ticks: u64,
    min_clearance: f64,
}

fn drive_empty(map: &drivelab_core::town::TownMap, start: usize, goal: usize, seed: u64) -> Run {
    let route = plan_route(map, start, goal).expect("route");
    let mut world = spawn_scenario(map, DensityProfile::Empty, seed, start).unwrap();
    let cfg = ExpertConfig::default();
    let mut mem = ExpertState::new();
    let time_limit_s = route.length_m / (10.0 / 3.6) + 10.0;
    let max_ticks = (time_limit_s / DT).ceil() as u64;

    let mut collisions = 0;
    let mut red_crossings = 0;
    let mut min_clearance = f64::INFINITY;
    let goal_pos = route.waypoints[route.waypoints.len() - 1];

    for _ in 0..max_ticks {
        let Ok((ctrl, _, _)) = expert_act(&world, &route, map, &cfg, &mut mem) else {
            break;
        };
        let (next, events) = step(&world, ctrl, map);
        collisions += events.len();
        if let Some(crossing) = check_traffic_light_crossing(&world, &next, map) {
            if crossing.violation {
                red_crossings += 1;
            }
        }
        // Track centerline clearance for diagnostics.
        let d = mem.cursor.distance_to_route(&route, next.ego.pose.pos);
        min_clearance = min_clearance.min(2.0 - d.min(2.0));
        world = next;
        if world.ego.pose.pos.dist(goal_pos) < 3.0 {
            return Run {
                success: true,
                collisions,
                red_crossings,
                ticks: world.tick,
                min_clearance,
            };
        }
    }
    Run {
        success: false,
        collisions,
        red_crossings,
        ticks: world.tick,
        min_clearance,
    }
}

#[test]
fn expert_completes_empty_routes_in_both_towns() {
    let mut failures = Vec::new();
    let mut total = 0;
    for town in [TownId::TownA, TownId::TownB] {
        let map = build_town(town, 7);
        let n = map.spawn_points.len();
        for k in 0..10 {
            let seed = derive_seed(1234, k);
            let start = (k as usize * 7) % n;
            let goal = (start + 5 + k as usize) % n;
            if start == goal {
                continue;
            }
            total += 1;
            let run = drive_empty(&map, start, goal, seed);
            if !run.success || run.collisions > 0 || run.red_crossings > 0 {
                failures.push(format!(
                    "{town:?} {start}->{goal}: success={} collisions={} red={} ticks={} clearance={:.2}",
                    run.success, run.collisions, run.red_crossings, run.ticks, run.min_clearance
                ));
            }
        }
    }
    assert!(
        failures.is_empty(),
        "{} of {total} runs failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}
