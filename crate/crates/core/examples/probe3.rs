use drivelab_core::expert::{expert_act, ExpertConfig, ExpertState};
use drivelab_core::rng::{derive_seed, SimRng};
use drivelab_core::sim::{spawn_scenario, step, DensityProfile, DT};
use drivelab_core::town::{build_town, plan_route, TownId};
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    for density in [DensityProfile::Regular, DensityProfile::Dense] {
        let map = build_town(TownId::TownA, 7);
        let n = map.spawn_points.len();
        let mut rng = SimRng::new(4242);
        let mut done = 0; let mut collided = 0; let mut timeout = 0; let mut events = 0;
        for k in 0..40u64 {
            let start = rng.index(n);
            let goal = rng.index(n);
            if start == goal { continue; }
            let route = plan_route(&map, start, goal).unwrap();
            let mut w = spawn_scenario(&map, density, derive_seed(77, k), start).unwrap();
            let cfg = ExpertConfig::default();
            let mut mem = ExpertState::new();
            let limit = ((route.length_m / (10.0/3.6) + 10.0) / DT).ceil() as u64;
            let goal_pos = *route.waypoints.last().unwrap();
            let mut ok = false; let mut coll = 0;
            for _ in 0..limit {
                let Ok((ctrl, _, _)) = expert_act(&w, &route, &map, &cfg, &mut mem) else { break };
                let (nx, ev) = step(&w, ctrl, &map);
                for e in &ev { println!("  {density:?} k={k} {:?} impulse {:.1}", e.kind, e.impulse); } coll += ev.len();
                w = nx;
                if w.ego.pose.pos.dist(goal_pos) < 3.0 { ok = true; break; }
            }
            if ok { done += 1; } else { timeout += 1; }
            if coll > 0 { collided += 1; events += coll; }
        }
        println!("{density:?}: completed {done}, timeout {timeout}, episodes-with-collision {collided} ({events} events)");
    }
    println!("{:?}", t0.elapsed());
}
