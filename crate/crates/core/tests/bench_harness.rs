//! Benchmark harness behavior: oracle expert runs, scripted failure modes,
//! determinism, and bookkeeping invariants.

use drivelab_core::bench::{
    episode_seed, run_episode, run_suite, BenchmarkSuite, Condition, EpisodeOutcome, EpisodeSpec,
    Mode, Policy, ScriptPolicy, Task,
};
use drivelab_core::expert::ExpertConfig;
use drivelab_core::sim::DensityProfile;
use drivelab_core::town::{TownId, WeatherId};

fn expert() -> Policy {
    Policy::Expert(ExpertConfig::default())
}

fn smoke_suite() -> BenchmarkSuite {
    BenchmarkSuite {
        tasks: vec![Task::Empty],
        conditions: vec![Condition::Training, Condition::NewTown],
        repeats: 1,
        mode: Mode::NoCrash,
        seed: 99,
        max_routes: 6,
        keep_logs: false,
    }
}

#[test]
fn expert_succeeds_on_empty_cells() {
    let (report, _) = run_suite(&expert(), &smoke_suite()).unwrap();
    for cell in &report.cells {
        assert!(
            cell.success_mean >= 0.99,
            "{} {} success {}",
            cell.task,
            cell.condition.name(),
            cell.success_mean
        );
        assert_eq!(cell.tl_red, 0, "expert crossed a red light");
    }
}

#[test]
fn idle_policy_times_out_with_inertia() {
    let spec = EpisodeSpec {
        town: TownId::TownA,
        weather: WeatherId::ClearNoon,
        start: drivelab_core::bench::route_sets(TownId::TownA).navigation[0].0,
        goal: drivelab_core::bench::route_sets(TownId::TownA).navigation[0].1,
        density: DensityProfile::Empty,
        seed: 5,
        mode: Mode::NoCrash,
    };
    let (result, _) = run_episode(&Policy::Script(ScriptPolicy::Idle), &spec, false).unwrap();
    assert_eq!(result.outcome, EpisodeOutcome::Timeout);
    assert!(result.inertia_flag);
    assert_eq!(result.route_completion, 0.0);
}

#[test]
fn wall_seeking_policy_collides_with_static() {
    let pair = drivelab_core::bench::route_sets(TownId::TownA).navigation[1];
    let spec = EpisodeSpec {
        town: TownId::TownA,
        weather: WeatherId::ClearNoon,
        start: pair.0,
        goal: pair.1,
        density: DensityProfile::Empty,
        seed: 5,
        mode: Mode::NoCrash,
    };
    let policy = Policy::Script(ScriptPolicy::Constant {
        steer: 0.4,
        throttle: 1.0,
    });
    let (result, _) = run_episode(&policy, &spec, false).unwrap();
    assert_eq!(result.outcome, EpisodeOutcome::CollisionOther);
}

#[test]
fn legacy_mode_counts_without_terminating() {
    let pair = drivelab_core::bench::route_sets(TownId::TownA).navigation[1];
    let mk = |mode| EpisodeSpec {
        town: TownId::TownA,
        weather: WeatherId::ClearNoon,
        start: pair.0,
        goal: pair.1,
        density: DensityProfile::Empty,
        seed: 5,
        mode,
    };
    let policy = Policy::Script(ScriptPolicy::Constant {
        steer: 0.4,
        throttle: 1.0,
    });
    let (nocrash, _) = run_episode(&policy, &mk(Mode::NoCrash), false).unwrap();
    let (legacy, _) = run_episode(&policy, &mk(Mode::Legacy), false).unwrap();
    assert_eq!(nocrash.outcome, EpisodeOutcome::CollisionOther);
    assert_ne!(legacy.outcome, EpisodeOutcome::CollisionOther);
    assert!(legacy.infractions[2] >= 1, "{:?}", legacy.infractions);
    assert!(legacy.duration_s > nocrash.duration_s);
}

#[test]
fn nocrash_success_implies_legacy_success() {
    // The expert under identical seeds: success in nocrash mode must imply
    // success in legacy mode (legacy only removes termination causes).
    let sets = drivelab_core::bench::route_sets(TownId::TownA);
    for (i, &(start, goal)) in sets.navigation.iter().take(4).enumerate() {
        let mk = |mode| EpisodeSpec {
            town: TownId::TownA,
            weather: WeatherId::ClearSunset,
            start,
            goal,
            density: DensityProfile::Regular,
            seed: episode_seed(7, 0, 0, i, 0),
            mode,
        };
        let (nocrash, _) = run_episode(&expert(), &mk(Mode::NoCrash), false).unwrap();
        if nocrash.outcome == EpisodeOutcome::Success {
            let (legacy, _) = run_episode(&expert(), &mk(Mode::Legacy), false).unwrap();
            assert_eq!(legacy.outcome, EpisodeOutcome::Success, "route {i}");
        }
    }
}

#[test]
fn suite_reports_are_deterministic_and_sum_to_one() {
    let suite = smoke_suite();
    let (a, _) = run_suite(&expert(), &suite).unwrap();
    let (b, _) = run_suite(&expert(), &suite).unwrap();
    assert_eq!(a, b);
    for cell in &a.cells {
        let sum: f64 = cell.fractions.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9, "{sum}");
    }
    // CSV emission is byte-stable.
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.to_jsonl(), b.to_jsonl());
}

#[test]
fn condition_isolation_uses_correct_towns_and_weathers() {
    // Training uses TownA and training weathers; NewTownWeather uses TownB
    // and held-out weathers.
    assert_eq!(Condition::Training.town(), TownId::TownA);
    assert_eq!(Condition::NewTownWeather.town(), TownId::TownB);
    for w in Condition::Training.weathers() {
        assert!(w.is_training());
    }
    for w in Condition::NewTownWeather.weathers() {
        assert!(!w.is_training());
    }
    // Same route pairs shared across tasks within a condition.
    let suite = BenchmarkSuite {
        tasks: vec![Task::Empty, Task::Regular],
        conditions: vec![Condition::Training],
        repeats: 1,
        max_routes: 3,
        ..BenchmarkSuite::default()
    };
    let (report, _) = run_suite(&expert(), &suite).unwrap();
    assert_eq!(report.cells.len(), 2);
}

#[test]
fn committed_route_files_match_regeneration() {
    for town in [TownId::TownA, TownId::TownB] {
        let embedded = drivelab_core::bench::route_sets(town);
        let fresh = drivelab_core::bench::generate_route_sets(drivelab_core::bench::world(town));
        assert_eq!(embedded, &fresh, "{town:?} route file is stale");
        assert_eq!(embedded.navigation.len(), 25);
    }
}

#[test]
fn route_minimum_length_holds() {
    for town in [TownId::TownA, TownId::TownB] {
        let map = drivelab_core::bench::world(town);
        for &(s, g) in &drivelab_core::bench::route_sets(town).navigation {
            let route = drivelab_core::town::plan_route(map, s, g).unwrap();
            assert!(route.length_m >= 200.0, "{town:?} {s}->{g}: {}", route.length_m);
        }
    }
}
