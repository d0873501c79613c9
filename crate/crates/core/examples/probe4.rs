use drivelab_core::expert::{expert_act, ExpertConfig, ExpertState};
use drivelab_core::rng::{derive_seed, SimRng};
use drivelab_core::sim::{spawn_scenario, step, DensityProfile, DT};
use drivelab_core::town::{build_town, plan_route, TownId};

fn main() {
    // Reproduce Regular k=7 with event context.
    let map = build_town(TownId::TownA, 7);
    let n = map.spawn_points.len();
    let mut rng = SimRng::new(4242);
    let mut pairs = vec![];
    for _ in 0..40u64 { pairs.push((rng.index(n), rng.index(n))); }
    let (start, goal) = pairs[7];
    let route = plan_route(&map, start, goal).unwrap();
    let mut w = spawn_scenario(&map, DensityProfile::Regular, derive_seed(77, 7), start).unwrap();
    let cfg = ExpertConfig::default();
    let mut mem = ExpertState::new();
    let limit = ((route.length_m / (10.0/3.6) + 10.0) / DT).ceil() as u64;
    let goal_pos = *route.waypoints.last().unwrap();
    for t in 0..limit {
        let Ok((ctrl, _, tgt)) = expert_act(&w, &route, &map, &cfg, &mut mem) else { break };
        let (nx, ev) = step(&w, ctrl, &map);
        for e in &ev {
            println!("t={t} {:?} impulse={:.1} ego v={:.1} tgt={tgt:.1} pos=({:.1},{:.1}) h={:.2}",
                e.kind, e.impulse, nx.ego.speed, nx.ego.pose.pos.x, nx.ego.pose.pos.y, nx.ego.pose.heading);
            // nearest npc
            let mut best = (1e9, 0usize);
            for (i, npc) in nx.npcs.iter().enumerate() {
                let d = npc.pose.pos.dist(nx.ego.pose.pos);
                if d < best.0 { best = (d, i); }
            }
            let npc = &nx.npcs[best.1];
            println!("   nearest npc #{} d={:.1} v={:.1} pos=({:.1},{:.1}) h={:.2}",
                best.1, best.0, npc.speed, npc.pose.pos.x, npc.pose.pos.y, npc.pose.heading);
        }
        w = nx;
        if w.ego.pose.pos.dist(goal_pos) < 3.0 { break; }
    }
}
