use drivelab_core::bench::{generate_route_sets, world};
use drivelab_core::town::TownId;

fn main() {
    for town in [TownId::TownA, TownId::TownB] {
        let sets = generate_route_sets(world(town));
        let file = match town {
            TownId::TownA => "crates/core/data/routes_town_a.txt",
            TownId::TownB => "crates/core/data/routes_town_b.txt",
        };
        std::fs::write(file, sets.to_text()).unwrap();
        println!(
            "{town:?}: navigation {} straight {} one_turn {}",
            sets.navigation.len(),
            sets.straight.len(),
            sets.one_turn.len()
        );
    }
}
