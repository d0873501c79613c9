//! Dataset collection and on-disk format checks over one shared fixture.

use drivelab_core::dataset::{
    collect, command_balance, validate, CollectConfig, Dataset, DatasetIndex, SampleReader, Split,
    VAL_FRACTION,
};
use drivelab_core::expert::ExpertConfig;
use drivelab_core::sim::DensityProfile;
use drivelab_core::town::{TownId, WeatherId};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

fn fixture_cfg() -> CollectConfig {
    CollectConfig {
        town: TownId::TownA,
        weathers: WeatherId::TRAINING.to_vec(),
        hours: 0.05,
        density: DensityProfile::Empty,
        noise_fraction: 0.5,
        seed: 2024,
        expert: ExpertConfig::default(),
    }
}

fn fixture() -> &'static (PathBuf, Dataset) {
    static FIXTURE: OnceLock<(PathBuf, Dataset)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("dataset-fixture");
        let _ = fs::remove_dir_all(&root);
        let ds = collect(&fixture_cfg(), &root).expect("collect fixture");
        (root, ds)
    })
}

#[test]
fn recollection_is_byte_identical() {
    let (root_a, ds_a) = fixture();
    let root_b = Path::new(env!("CARGO_TARGET_TMPDIR")).join("dataset-recollect");
    let _ = fs::remove_dir_all(&root_b);
    let ds_b = collect(&fixture_cfg(), &root_b).unwrap();
    assert_eq!(ds_a.train.episodes, ds_b.train.episodes);
    assert_eq!(ds_a.val.episodes, ds_b.val.episodes);
    for ep in ds_a.train.episodes.iter().chain(ds_a.val.episodes.iter()) {
        let a = fs::read(root_a.join(&ep.rel_dir).join("ticks.bin")).unwrap();
        let b = fs::read(root_b.join(&ep.rel_dir).join("ticks.bin")).unwrap();
        assert_eq!(a, b, "episode {} differs", ep.episode_id);
        let am = fs::read(root_a.join(&ep.rel_dir).join("meta.txt")).unwrap();
        let bm = fs::read(root_b.join(&ep.rel_dir).join("meta.txt")).unwrap();
        assert_eq!(am, bm);
    }
    assert_eq!(
        fs::read(root_a.join("index.txt")).unwrap(),
        fs::read(root_b.join("index.txt")).unwrap()
    );
    let _ = fs::remove_dir_all(&root_b);
}

#[test]
fn index_reopens_identically() {
    let (root, ds) = fixture();
    let reopened = Dataset::open(root).unwrap();
    assert_eq!(reopened.train.episodes, ds.train.episodes);
    assert_eq!(reopened.val.episodes, ds.val.episodes);
    assert!((reopened.train.total_hours - ds.train.total_hours).abs() < 1e-12);
}

#[test]
fn hour_budget_met_with_bounded_overshoot() {
    let (_, ds) = fixture();
    let cfg = fixture_cfg();
    let target = cfg.hours * 3600.0;
    let total = ds.train.total_hours * 3600.0;
    assert!(total >= target);
    assert!(
        total <= target + 300.0,
        "stopped more than one episode past the target: {total}"
    );
    assert!(ds.val.total_hours * 3600.0 >= target * VAL_FRACTION);
    for ep in &ds.train.episodes {
        assert!(ep.weather.is_training());
    }
}

#[test]
fn validation_split_is_disjoint_and_dataset_valid() {
    let (root, ds) = fixture();
    let problems = validate(root).unwrap();
    assert!(problems.is_empty(), "{problems:?}");
    let train_seeds: std::collections::HashSet<u64> =
        ds.train.episodes.iter().map(|e| e.seed).collect();
    for ep in &ds.val.episodes {
        assert!(!train_seeds.contains(&ep.seed));
    }
}

#[test]
fn stored_samples_reproduce_written_fields() {
    let (root, ds) = fixture();
    let mut reader = SampleReader::open(root, &ds.train).unwrap();
    assert!(reader.len() > 500);
    // Ticks count up within an episode; commands decode; grids are in range.
    let first = reader.read(0).unwrap();
    assert_eq!(first.tick, 0);
    let s = reader.read(7).unwrap();
    assert_eq!(s.tick, 7);
    assert!(s.waypoints.len() == 10);
}

#[test]
fn noise_divergence_matches_flag() {
    let (root, ds) = fixture();
    let mut saw_noised = false;
    let mut saw_clean = false;
    for ep in ds.train.episodes.iter().chain(ds.val.episodes.iter()) {
        let single = DatasetIndex {
            split: Split::Train,
            episodes: vec![ep.clone()],
            total_hours: 0.0,
        };
        let mut reader = SampleReader::open(root, &single).unwrap();
        let mut diverged = false;
        for s in 0..reader.len() {
            let sample = reader.read(s).unwrap();
            assert_eq!(sample.action[1], sample.noised_action[1]);
            assert_eq!(sample.action[2], sample.noised_action[2]);
            if sample.action[0] != sample.noised_action[0] {
                diverged = true;
            }
        }
        if ep.noise_enabled {
            assert!(
                diverged,
                "episode {} flagged noisy but steer never diverged",
                ep.episode_id
            );
            saw_noised = true;
        } else {
            assert!(
                !diverged,
                "episode {} flagged clean but steer diverged",
                ep.episode_id
            );
            saw_clean = true;
        }
    }
    assert!(saw_noised && saw_clean, "fixture should hold both kinds");
}

#[test]
fn command_balance_reports_lane_follow_dominance() {
    let (root, ds) = fixture();
    let balance = command_balance(root, &ds.train).unwrap();
    assert!((balance.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(
        balance[0] > balance[1] && balance[0] > balance[2] && balance[0] > balance[3],
        "lane-follow should dominate every single turn command: {balance:?}"
    );
}
