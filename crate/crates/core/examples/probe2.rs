use drivelab_core::expert::{expert_act, ExpertConfig, ExpertState};
use drivelab_core::sim::{check_traffic_light_crossing, light_phase_at, spawn_scenario, step, DensityProfile};
use drivelab_core::town::{build_town, plan_route, TownId};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let town = if args[1] == "A" { TownId::TownA } else { TownId::TownB };
    let (start, goal) = (args[2].parse().unwrap(), args[3].parse().unwrap());
    let map = build_town(town, 7);
    let route = plan_route(&map, start, goal).unwrap();
    println!("lights on route: {:?}", route.lights);
    let mut w = spawn_scenario(&map, DensityProfile::Empty, 1, start).unwrap();
    let cfg = ExpertConfig::default();
    let mut mem = ExpertState::new();
    let goal_pos = *route.waypoints.last().unwrap();
    let mut history: Vec<String> = Vec::new();
    for t in 0..3000u64 {
        let Ok((ctrl, _, target)) = expert_act(&w, &route, &map, &cfg, &mut mem) else { break };
        let (next, _) = step(&w, ctrl, &map);
        let arc = mem.cursor.arc_position(&route, w.ego.pose.pos);
        history.push(format!(
            "t={t} arc={arc:.1} v={:.1} tgt={target:.1} thr={:.2} brk={:.2}",
            w.ego.speed, ctrl.throttle(), ctrl.brake()
        ));
        if let Some(c) = check_traffic_light_crossing(&w, &next, &map) {
            let (ph, tip) = light_phase_at(&map, c.light, next.time_s);
            println!(
                "t={t} CROSS light={:?} violation={} phase={ph:?} tip={tip:.2} arc={arc:.1}",
                c.light, c.violation
            );
            if c.violation {
                for h in history.iter().rev().take(25).rev() {
                    println!("  {h}");
                }
            }
        }
        w = next;
        if w.ego.pose.pos.dist(goal_pos) < 3.0 { break; }
    }
}
