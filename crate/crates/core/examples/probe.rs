use drivelab_core::expert::{expert_act, ExpertConfig, ExpertState};
use drivelab_core::rng::{derive_seed, SimRng};
use drivelab_core::sim::{check_traffic_light_crossing, spawn_scenario, step, DensityProfile, DT};
use drivelab_core::town::{build_town, plan_route, polyline_project, TownId};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.len() == 4 {
        // Detailed single-route trace: probe <town> <start> <goal>
        let town = if args[1] == "A" { TownId::TownA } else { TownId::TownB };
        let (start, goal) = (args[2].parse().unwrap(), args[3].parse().unwrap());
        let map = build_town(town, 7);
        let route = plan_route(&map, start, goal).unwrap();
        println!("route len {:.1} lanes {:?}", route.length_m, route.lanes);
        let mut w = spawn_scenario(&map, DensityProfile::Empty, 1, start).unwrap();
        let cfg = ExpertConfig::default();
        let mut mem = ExpertState::new();
        let goal_pos = *route.waypoints.last().unwrap();
        for t in 0..3000 {
            let Ok((ctrl, _, target)) = expert_act(&w, &route, &map, &cfg, &mut mem) else { break };
            let (next, events) = step(&w, ctrl, &map);
            let (_, lat, dist) = polyline_project(&route.waypoints, next.ego.pose.pos);
            if !events.is_empty() || t % 20 == 0 {
                println!(
                    "t={t:4} pos=({:7.2},{:7.2}) h={:5.2} v={:4.1} tgt={:4.1} steer={:+.2} lat={:+.2} d={:.2} cmd={:?} ev={:?}",
                    next.ego.pose.pos.x, next.ego.pose.pos.y, next.ego.pose.heading, next.ego.speed,
                    target, ctrl.steer(), lat, dist, mem.cursor.command(&route).unwrap(), events
                );
            }
            w = next;
            if w.ego.pose.pos.dist(goal_pos) < 3.0 { println!("GOAL at t={t}"); break; }
        }
        return;
    }
    let t0 = Instant::now();
    let mut fails = 0;
    let mut episodes = 0;
    for town in [TownId::TownA, TownId::TownB] {
        let map = build_town(town, 7);
        let n = map.spawn_points.len();
        let mut rng = SimRng::new(99);
        for k in 0..100u64 {
            let start = rng.index(n);
            let goal = rng.index(n);
            if start == goal { continue; }
            episodes += 1;
            let route = plan_route(&map, start, goal).unwrap();
            let mut w = spawn_scenario(&map, DensityProfile::Empty, derive_seed(5, k), start).unwrap();
            let cfg = ExpertConfig::default();
            let mut mem = ExpertState::new();
            let limit = ((route.length_m / (10.0/3.6) + 10.0) / DT).ceil() as u64;
            let goal_pos = *route.waypoints.last().unwrap();
            let mut ok = false;
            let mut coll = 0;
            let mut red = 0;
            for _ in 0..limit {
                let Ok((ctrl, _, _)) = expert_act(&w, &route, &map, &cfg, &mut mem) else { break };
                let (nx, ev) = step(&w, ctrl, &map);
                coll += ev.len();
                if let Some(c) = check_traffic_light_crossing(&w, &nx, &map) { if c.violation { red += 1; } }
                w = nx;
                if w.ego.pose.pos.dist(goal_pos) < 3.0 { ok = true; break; }
            }
            if !ok || coll > 0 || red > 0 {
                fails += 1;
                println!("FAIL {town:?} {start}->{goal} len={:.0} ok={ok} coll={coll} red={red}", route.length_m);
            }
        }
    }
    println!("{episodes} episodes, {fails} failures, {:?}", t0.elapsed());
}
