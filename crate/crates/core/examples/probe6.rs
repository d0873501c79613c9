use drivelab_core::bench::{run_suite, BenchmarkSuite, Condition, Mode, Policy, Task};
use drivelab_core::dataset::{collect, filter, CollectConfig};
use drivelab_core::expert::ExpertConfig;
use drivelab_core::sim::DensityProfile;
use drivelab_core::town::{TownId, WeatherId};
use drivelab_core::train::{train_on_dataset, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-4);
    let root = std::path::PathBuf::from("/tmp/probe6-ds");
    let ds = if root.join("index.txt").exists() {
        drivelab_core::dataset::Dataset::open(&root).unwrap()
    } else {
        let cfg = CollectConfig {
            town: TownId::TownA,
            weathers: WeatherId::TRAINING.to_vec(),
            hours: 0.5,
            density: DensityProfile::Regular,
            noise_fraction: 0.2,
            seed: 11,
            expert: ExpertConfig::default(),
        };
        collect(&cfg, &root).unwrap()
    };
    let train_idx = filter(&ds.train);
    let val_idx = filter(&ds.val);

    let t1 = Instant::now();
    let cfg = TrainConfig {
        max_iters: iters,
        val_every: 250,
        lr0: lr,
        seed_init: 1,
        seed_sampling: 1,
        ..TrainConfig::desk()
    };
    let (net, meta, log) = train_on_dataset(&root, &train_idx, &val_idx, &cfg).unwrap();
    println!(
        "iters={iters} lr={lr}: trained in {:?}; best val {:.4}@{}; decays {:?}",
        t1.elapsed(), meta.best_val_loss, meta.iterations,
        log.lr_events,
    );
    let suite = BenchmarkSuite {
        tasks: vec![Task::Empty],
        conditions: vec![Condition::Training],
        repeats: 1,
        mode: Mode::NoCrash,
        seed: 31,
        max_routes: 25,
        keep_logs: false,
    };
    let (report, _) = run_suite(&Policy::Net(Box::new(net)), &suite).unwrap();
    print!("{}", report.to_table());
}
