//! Episode recording and the on-disk dataset.
//!
//! A dataset directory holds one subdirectory per episode under `train/` and
//! `val/`, each with a small text `meta.txt` and a fixed-width binary
//! `ticks.bin` (one record per 100 ms tick: quantized observation grid,
//! command, clean and noised controls, speed, intentions, upcoming
//! waypoints). An `index.txt` at the root lists both splits. The layout is
//! documented bit-exactly in docs/FORMATS.md; collection is deterministic per
//! seed, so recollecting produces byte-identical directories.

use crate::expert::{
    apply_noise, expert_act, noise_offset, noise_schedule, ExpertConfig, ExpertState,
};
use crate::rng::{derive_seed, SimRng};
use crate::sim::{
    render_observation, spawn_scenario, step, DensityProfile, Observation, SimError, DT,
    OBS_CHANNELS, OBS_HEIGHT, OBS_WIDTH,
};
use crate::town::{build_town, plan_route, TownId, TownMap, Weather, WeatherId};
use crate::HighLevelCommand;
use rayon::prelude::*;
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// Size of the grid payload in bytes.
pub const GRID_BYTES: usize = OBS_CHANNELS * OBS_HEIGHT * OBS_WIDTH;
/// Fixed per-tick record size.
pub const RECORD_BYTES: usize = 128 + GRID_BYTES;

pub const WAYPOINTS_PER_SAMPLE: usize = 10;

/// Episodes shorter than this never end (routes chain until it is reached).
pub const MIN_EPISODE_S: f64 = 60.0;
/// Hard cap; an episode still unfinished here is aborted.
pub const MAX_EPISODE_S: f64 = 300.0;

const VAL_SEED_SALT: u64 = 0x76616c; // distinct stream for validation episodes
/// Validation hours as a fraction of training hours.
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("requested {requested_hours} h but the index holds {available_hours} h")]
    InsufficientData {
        requested_hours: f64,
        available_hours: f64,
    },
    #[error(transparent)]
    Spawn(#[from] SimError),
    #[error("collection error: {0}")]
    Collection(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Outcome {
    Completed,
    Aborted,
}

impl Outcome {
    fn name(self) -> &'static str {
        match self {
            Outcome::Completed => "completed",
            Outcome::Aborted => "aborted",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "completed" => Some(Outcome::Completed),
            "aborted" => Some(Outcome::Aborted),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeMeta {
    pub episode_id: u32,
    /// Directory relative to the dataset root, e.g. `train/ep_00003`.
    pub rel_dir: String,
    pub town: TownId,
    pub weather: WeatherId,
    pub seed: u64,
    pub n_vehicles: u32,
    pub n_pedestrians: u32,
    pub duration_s: f64,
    pub noise_enabled: bool,
    pub outcome: Outcome,
    pub collisions: u32,
    pub ticks: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "val",
        }
    }
}

/// One split of a dataset: episode list plus totals.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub split: Split,
    pub episodes: Vec<EpisodeMeta>,
    pub total_hours: f64,
}

impl DatasetIndex {
    fn recompute_hours(&mut self) {
        self.total_hours = self.episodes.iter().map(|e| e.duration_s).sum::<f64>() / 3600.0;
    }
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub train: DatasetIndex,
    pub val: DatasetIndex,
}

/// One recorded tick, decoded.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub grid: Vec<u8>,
    pub speed_mps: f32,
    pub command: HighLevelCommand,
    /// Clean expert controls (steer, throttle, brake): the training targets.
    pub action: [f32; 3],
    /// Controls actually applied (with steering noise).
    pub noised_action: [f32; 3],
    pub intentions: [f32; 3],
    /// Next route positions in the ego frame (lateral, forward).
    pub waypoints: [[f32; 2]; WAYPOINTS_PER_SAMPLE],
    pub tick: u32,
    pub episode_id: u32,
}

impl Sample {
    pub fn encode(&self, out: &mut Vec<u8>) {
        let start = out.len();
        out.extend_from_slice(&self.tick.to_le_bytes());
        out.push(self.command.code());
        out.extend_from_slice(&[0u8; 3]);
        out.extend_from_slice(&self.speed_mps.to_le_bytes());
        for v in self.action {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.noised_action {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.intentions {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for wp in self.waypoints {
            out.extend_from_slice(&wp[0].to_le_bytes());
            out.extend_from_slice(&wp[1].to_le_bytes());
        }
        debug_assert_eq!(out.len() - start, 128);
        out.extend_from_slice(&self.grid);
        debug_assert_eq!(out.len() - start, RECORD_BYTES);
    }

    pub fn decode(buf: &[u8], episode_id: u32) -> Result<Sample, String> {
        if buf.len() != RECORD_BYTES {
            return Err(format!(
                "record is {} bytes, expected {RECORD_BYTES}",
                buf.len()
            ));
        }
        let f32_at = |o: usize| f32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let tick = u32::from_le_bytes(buf[0..4].try_into().unwrap());
        let command = HighLevelCommand::from_code(buf[4])
            .ok_or_else(|| format!("bad command code {}", buf[4]))?;
        let speed_mps = f32_at(8);
        let mut action = [0.0f32; 3];
        let mut noised = [0.0f32; 3];
        let mut intentions = [0.0f32; 3];
        for i in 0..3 {
            action[i] = f32_at(12 + 4 * i);
            noised[i] = f32_at(24 + 4 * i);
            intentions[i] = f32_at(36 + 4 * i);
        }
        let mut waypoints = [[0.0f32; 2]; WAYPOINTS_PER_SAMPLE];
        for (i, wp) in waypoints.iter_mut().enumerate() {
            wp[0] = f32_at(48 + 8 * i);
            wp[1] = f32_at(52 + 8 * i);
        }
        Ok(Sample {
            grid: buf[128..].to_vec(),
            speed_mps,
            command,
            action,
            noised_action: noised,
            intentions,
            waypoints,
            tick,
            episode_id,
        })
    }
}

/// Quantize a rendered grid to the stored 8-bit form.
pub fn quantize_grid(obs: &Observation) -> Vec<u8> {
    obs.grid.iter().map(|v| (v * 255.0).round() as u8).collect()
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct CollectConfig {
    pub town: TownId,
    pub weathers: Vec<WeatherId>,
    pub hours: f64,
    pub density: DensityProfile,
    /// Fraction of episodes with steering-noise injection.
    pub noise_fraction: f64,
    pub seed: u64,
    pub expert: ExpertConfig,
}

impl CollectConfig {
    pub fn new(town: TownId, hours: f64, seed: u64) -> Self {
        Self {
            town,
            weathers: WeatherId::TRAINING.to_vec(),
            hours,
            density: DensityProfile::Regular,
            noise_fraction: 0.2,
            seed,
            expert: ExpertConfig::default(),
        }
    }
}

struct RecordedEpisode {
    meta: EpisodeMeta,
    records: Vec<u8>,
}

/// Run one expert-driven goal-directed episode and record every tick.
/// Routes chain to new goals until the minimum episode length is reached.
fn record_episode(
    map: &TownMap,
    cfg: &CollectConfig,
    episode_id: u32,
    seed: u64,
    weather_id: WeatherId,
    noise_enabled: bool,
) -> Result<RecordedEpisode, DataError> {
    let weather = Weather::from_id(weather_id);
    let mut route_rng = SimRng::stream(seed, "route");
    let n_spawn = map.spawn_points.len();
    let start = route_rng.index(n_spawn);
    let mut goal = route_rng.index(n_spawn);
    while goal == start {
        goal = route_rng.index(n_spawn);
    }

    let mut world = spawn_scenario(map, cfg.density, seed, start)?;
    let mut route = plan_route(map, start, goal)
        .map_err(|e| DataError::Collection(format!("route {start}->{goal}: {e}")))?;
    let mut mem = ExpertState::new();
    let schedule = if noise_enabled {
        noise_schedule(MAX_EPISODE_S, derive_seed(seed, 0x6e6f69))
    } else {
        Vec::new()
    };

    let n_veh = world.npcs.len() as u32;
    let n_ped = world.pedestrians.len() as u32;
    let max_ticks = (MAX_EPISODE_S / DT).round() as u32;
    let mut records = Vec::with_capacity(1024 * RECORD_BYTES);
    let mut collisions = 0u32;
    let mut outcome = Outcome::Aborted;
    let mut goal_spawn = goal;
    let mut ticks = 0u32;

    while ticks < max_ticks {
        let t = world.tick as f64 * DT;
        let Ok((clean, intentions, _)) = expert_act(&world, &route, map, &cfg.expert, &mut mem)
        else {
            // The expert wandered off route; abort and let the filter drop it.
            break;
        };
        let offset = if noise_enabled {
            noise_offset(&schedule, t)
        } else {
            0.0
        };
        let applied = apply_noise(clean, offset);
        let command = mem
            .cursor
            .command(&route)
            .unwrap_or(HighLevelCommand::LaneFollow);
        let obs = render_observation(&world, map, &weather, command);

        let mut waypoints = [[0.0f32; 2]; WAYPOINTS_PER_SAMPLE];
        for (i, wp) in waypoints.iter_mut().enumerate() {
            let idx = (mem.cursor.idx + i + 1).min(route.waypoints.len() - 1);
            let local = world.ego.pose.to_local(route.waypoints[idx]);
            *wp = [local.x as f32, local.y as f32];
        }

        let sample = Sample {
            grid: quantize_grid(&obs),
            speed_mps: world.ego.speed as f32,
            command,
            action: [
                clean.steer() as f32,
                clean.throttle() as f32,
                clean.brake() as f32,
            ],
            noised_action: [
                applied.steer() as f32,
                applied.throttle() as f32,
                applied.brake() as f32,
            ],
            intentions: [
                intentions.stop_pedestrian as f32,
                intentions.stop_vehicle as f32,
                intentions.stop_traffic_light as f32,
            ],
            waypoints,
            tick: ticks,
            episode_id,
        };
        sample.encode(&mut records);

        let (next, events) = step(&world, applied, map);
        collisions += events.len() as u32;
        world = next;
        ticks += 1;

        let goal_pos = *route.waypoints.last().unwrap();
        if world.ego.pose.pos.dist(goal_pos) < 3.0 {
            if world.tick as f64 * DT >= MIN_EPISODE_S {
                outcome = Outcome::Completed;
                break;
            }
            // Chain to a fresh goal and keep driving.
            let from = goal_spawn;
            let mut next_goal = route_rng.index(n_spawn);
            while next_goal == from {
                next_goal = route_rng.index(n_spawn);
            }
            match plan_route(map, from, next_goal) {
                Ok(r) => {
                    route = r;
                    mem = ExpertState::new();
                    goal_spawn = next_goal;
                }
                Err(_) => break,
            }
        }
    }

    Ok(RecordedEpisode {
        meta: EpisodeMeta {
            episode_id,
            rel_dir: String::new(), // assigned at write time
            town: cfg.town,
            weather: weather_id,
            seed,
            n_vehicles: n_veh,
            n_pedestrians: n_ped,
            duration_s: ticks as f64 * DT,
            noise_enabled,
            outcome,
            collisions,
            ticks,
        },
        records,
    })
}

fn episode_params(cfg: &CollectConfig, salt: u64, k: u64) -> (u64, WeatherId, bool) {
    let seed = derive_seed(cfg.seed ^ salt, k);
    let mut pick = SimRng::stream(seed, "episode-params");
    let weather = cfg.weathers[pick.index(cfg.weathers.len())];
    let noise = pick.chance(cfg.noise_fraction);
    (seed, weather, noise)
}

/// Collect a dataset into `root`: training episodes until the simulated-time
/// budget is met, plus a freshly seeded validation split at one fifth of the
/// budget. Deterministic per seed, independent of worker count.
pub fn collect(cfg: &CollectConfig, root: &Path) -> Result<Dataset, DataError> {
    assert!(cfg.hours > 0.0, "hours must be positive");
    assert!(
        cfg.weathers.iter().all(|w| w.is_training()),
        "collection weathers must come from the training set"
    );
    let map = build_town(cfg.town, map_seed_for(cfg.town));

    fs::create_dir_all(root).map_err(io_err(root))?;
    let train = collect_split(&map, cfg, root, Split::Train, 0, cfg.hours * 3600.0)?;
    let val = collect_split(
        &map,
        cfg,
        root,
        Split::Validation,
        VAL_SEED_SALT,
        cfg.hours * 3600.0 * VAL_FRACTION,
    )?;

    let ds = Dataset {
        root: root.to_path_buf(),
        train,
        val,
    };
    write_index(&ds)?;
    Ok(ds)
}

/// The town layout seed is fixed: the same towns appear in every dataset and
/// benchmark run.
pub fn map_seed_for(town: TownId) -> u64 {
    match town {
        TownId::TownA => 7,
        TownId::TownB => 7,
    }
}

fn collect_split(
    map: &TownMap,
    cfg: &CollectConfig,
    root: &Path,
    split: Split,
    salt: u64,
    target_seconds: f64,
) -> Result<DatasetIndex, DataError> {
    // Fixed wave size keeps episode indexing independent of thread count.
    let wave = 8u64;
    let mut episodes: Vec<EpisodeMeta> = Vec::new();
    let mut acc_seconds = 0.0;
    let mut k = 0u64;
    'outer: loop {
        let batch: Vec<Result<RecordedEpisode, DataError>> = (k..k + wave)
            .into_par_iter()
            .map(|i| {
                let (seed, weather, noise) = episode_params(cfg, salt, i);
                record_episode(map, cfg, i as u32, seed, weather, noise)
            })
            .collect();
        for rec in batch {
            let mut rec = rec?;
            let rel_dir = format!("{}/ep_{:05}", split.dir(), rec.meta.episode_id);
            rec.meta.rel_dir = rel_dir.clone();
            write_episode(root, &rec)?;
            acc_seconds += rec.meta.duration_s;
            episodes.push(rec.meta);
            if acc_seconds >= target_seconds {
                break 'outer;
            }
        }
        k += wave;
    }
    Ok(DatasetIndex {
        split,
        total_hours: acc_seconds / 3600.0,
        episodes,
    })
}

fn write_episode(root: &Path, rec: &RecordedEpisode) -> Result<(), DataError> {
    let dir = root.join(&rec.meta.rel_dir);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let meta_path = dir.join("meta.txt");
    fs::write(&meta_path, meta_to_text(&rec.meta)).map_err(io_err(&meta_path))?;
    let ticks_path = dir.join("ticks.bin");
    fs::write(&ticks_path, &rec.records).map_err(io_err(&ticks_path))?;
    Ok(())
}

fn meta_to_text(m: &EpisodeMeta) -> String {
    format!(
        "episode {}\ntown {}\nweather {}\nseed {}\nn_vehicles {}\nn_pedestrians {}\nduration_s {}\nnoise_enabled {}\noutcome {}\ncollisions {}\nticks {}\n",
        m.episode_id,
        m.town.name(),
        m.weather.name(),
        m.seed,
        m.n_vehicles,
        m.n_pedestrians,
        m.duration_s,
        m.noise_enabled,
        m.outcome.name(),
        m.collisions,
        m.ticks
    )
}

fn write_index(ds: &Dataset) -> Result<(), DataError> {
    let mut out = String::new();
    out.push_str(&format!("drivelab-dataset {DATASET_FORMAT_VERSION}\n"));
    for index in [&ds.train, &ds.val] {
        out.push_str(&format!(
            "split {} hours {} episodes {}\n",
            index.split.dir(),
            index.total_hours,
            index.episodes.len()
        ));
        for m in &index.episodes {
            out.push_str(&format!(
                "episode {} {} {} {} {} {} {} {} {} {} {} {}\n",
                m.episode_id,
                m.rel_dir,
                m.town.name(),
                m.weather.name(),
                m.seed,
                m.n_vehicles,
                m.n_pedestrians,
                m.duration_s,
                m.noise_enabled,
                m.outcome.name(),
                m.collisions,
                m.ticks
            ));
        }
    }
    out.push_str("end\n");
    let path = ds.root.join("index.txt");
    fs::write(&path, out).map_err(io_err(&path))
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset, DataError> {
        let path = root.join("index.txt");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let perr = |msg: String| DataError::Parse {
            path: path.clone(),
            msg,
        };
        let mut train = DatasetIndex {
            split: Split::Train,
            episodes: Vec::new(),
            total_hours: 0.0,
        };
        let mut val = DatasetIndex {
            split: Split::Validation,
            episodes: Vec::new(),
            total_hours: 0.0,
        };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| perr("empty index".into()))?;
        if header != format!("drivelab-dataset {DATASET_FORMAT_VERSION}") {
            return Err(perr(format!("unsupported header '{header}'")));
        }
        let mut current: Option<Split> = None;
        for line in lines {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.first().copied() {
                Some("split") => {
                    current = match toks.get(1).copied() {
                        Some("train") => Some(Split::Train),
                        Some("val") => Some(Split::Validation),
                        other => return Err(perr(format!("bad split {other:?}"))),
                    };
                }
                Some("episode") => {
                    if toks.len() != 13 {
                        return Err(perr(format!("malformed episode line '{line}'")));
                    }
                    let meta = EpisodeMeta {
                        episode_id: toks[1].parse().map_err(|_| perr("bad id".into()))?,
                        rel_dir: toks[2].to_string(),
                        town: TownId::parse(toks[3]).ok_or_else(|| perr("bad town".into()))?,
                        weather: WeatherId::parse(toks[4])
                            .ok_or_else(|| perr("bad weather".into()))?,
                        seed: toks[5].parse().map_err(|_| perr("bad seed".into()))?,
                        n_vehicles: toks[6].parse().map_err(|_| perr("bad n_veh".into()))?,
                        n_pedestrians: toks[7].parse().map_err(|_| perr("bad n_ped".into()))?,
                        duration_s: toks[8].parse().map_err(|_| perr("bad duration".into()))?,
                        noise_enabled: toks[9].parse().map_err(|_| perr("bad noise".into()))?,
                        outcome: Outcome::parse(toks[10])
                            .ok_or_else(|| perr("bad outcome".into()))?,
                        collisions: toks[11]
                            .parse()
                            .map_err(|_| perr("bad collisions".into()))?,
                        ticks: toks[12].parse().map_err(|_| perr("bad ticks".into()))?,
                    };
                    match current {
                        Some(Split::Train) => train.episodes.push(meta),
                        Some(Split::Validation) => val.episodes.push(meta),
                        None => return Err(perr("episode before split".into())),
                    }
                }
                Some("end") | None => {}
                Some(other) => return Err(perr(format!("unknown token '{other}'"))),
            }
        }
        train.recompute_hours();
        val.recompute_hours();
        Ok(Dataset {
            root: root.to_path_buf(),
            train,
            val,
        })
    }
}

// ---------------------------------------------------------------------------
// Filtering and subsetting
// ---------------------------------------------------------------------------

/// Drop aborted episodes, episodes where the expert collided, and exact
/// duplicates of the same episode seed.
pub fn filter(index: &DatasetIndex) -> DatasetIndex {
    let mut seen = std::collections::HashSet::new();
    let mut out = DatasetIndex {
        split: index.split,
        episodes: Vec::with_capacity(index.episodes.len()),
        total_hours: 0.0,
    };
    for ep in &index.episodes {
        if ep.outcome != Outcome::Completed || ep.collisions > 0 {
            continue;
        }
        if !seen.insert(ep.seed) {
            continue;
        }
        out.episodes.push(ep.clone());
    }
    out.recompute_hours();
    out
}

/// Deterministic prefix selection totaling at least `hours`, with minimal
/// overshoot (stops at the first episode that crosses the target).
pub fn subset_hours(index: &DatasetIndex, hours: f64) -> Result<DatasetIndex, DataError> {
    if hours > index.total_hours + 1e-12 {
        return Err(DataError::InsufficientData {
            requested_hours: hours,
            available_hours: index.total_hours,
        });
    }
    let mut out = DatasetIndex {
        split: index.split,
        episodes: Vec::new(),
        total_hours: 0.0,
    };
    let mut acc = 0.0;
    for ep in &index.episodes {
        if acc >= hours * 3600.0 {
            break;
        }
        acc += ep.duration_s;
        out.episodes.push(ep.clone());
    }
    out.recompute_hours();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Sample access
// ---------------------------------------------------------------------------

/// Random access over the samples of one split, reading records on demand.
pub struct SampleReader {
    files: Vec<fs::File>,
    /// Episode id per file, parallel to `files`.
    episode_ids: Vec<u32>,
    /// Cumulative sample counts; `offsets[i]` = first global index of file i.
    offsets: Vec<usize>,
    total: usize,
}

impl SampleReader {
    pub fn open(root: &Path, index: &DatasetIndex) -> Result<SampleReader, DataError> {
        let mut files = Vec::with_capacity(index.episodes.len());
        let mut episode_ids = Vec::with_capacity(index.episodes.len());
        let mut offsets = Vec::with_capacity(index.episodes.len());
        let mut total = 0usize;
        for ep in &index.episodes {
            let path = root.join(&ep.rel_dir).join("ticks.bin");
            let file = fs::File::open(&path).map_err(io_err(&path))?;
            let len = file.metadata().map_err(io_err(&path))?.len() as usize;
            if len != ep.ticks as usize * RECORD_BYTES {
                return Err(DataError::Parse {
                    path,
                    msg: format!(
                        "file holds {len} bytes, expected {} ticks x {RECORD_BYTES}",
                        ep.ticks
                    ),
                });
            }
            offsets.push(total);
            episode_ids.push(ep.episode_id);
            total += ep.ticks as usize;
            files.push(file);
        }
        Ok(SampleReader {
            files,
            episode_ids,
            offsets,
            total,
        })
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn read(&mut self, global_idx: usize) -> Result<Sample, DataError> {
        assert!(global_idx < self.total, "sample index out of range");
        let file_idx = match self.offsets.binary_search(&global_idx) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let local = global_idx - self.offsets[file_idx];
        let mut buf = vec![0u8; RECORD_BYTES];
        let file = &mut self.files[file_idx];
        file.seek(SeekFrom::Start((local * RECORD_BYTES) as u64))
            .map_err(|e| DataError::Collection(e.to_string()))?;
        file.read_exact(&mut buf)
            .map_err(|e| DataError::Collection(e.to_string()))?;
        Sample::decode(&buf, self.episode_ids[file_idx]).map_err(DataError::Collection)
    }
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Check dataset invariants; returns human-readable problems (empty = valid).
pub fn validate(root: &Path) -> Result<Vec<String>, DataError> {
    let ds = Dataset::open(root)?;
    let mut problems = Vec::new();
    let mut train_seeds = std::collections::HashSet::new();
    for ep in &ds.train.episodes {
        train_seeds.insert(ep.seed);
    }
    for ep in &ds.val.episodes {
        if train_seeds.contains(&ep.seed) {
            problems.push(format!(
                "episode {} appears in both train and validation (seed {})",
                ep.episode_id, ep.seed
            ));
        }
    }
    for index in [&ds.train, &ds.val] {
        for ep in &index.episodes {
            if !ep.weather.is_training() {
                problems.push(format!(
                    "{}: weather {} is not a training weather",
                    ep.rel_dir, ep.weather
                ));
            }
            if ep.outcome == Outcome::Completed
                && !(MIN_EPISODE_S - 1e-9..=MAX_EPISODE_S + 1e-9).contains(&ep.duration_s)
            {
                problems.push(format!(
                    "{}: completed episode lasted {} s, outside [{MIN_EPISODE_S}, {MAX_EPISODE_S}]",
                    ep.rel_dir, ep.duration_s
                ));
            }
            let path = root.join(&ep.rel_dir).join("ticks.bin");
            match fs::metadata(&path) {
                Ok(md) => {
                    if md.len() as usize != ep.ticks as usize * RECORD_BYTES {
                        problems.push(format!(
                            "{}: ticks.bin is {} bytes, expected {}",
                            ep.rel_dir,
                            md.len(),
                            ep.ticks as usize * RECORD_BYTES
                        ));
                    }
                }
                Err(e) => problems.push(format!("{}: {e}", ep.rel_dir)),
            }
        }
        // Spot-check decodability of the first record of each episode.
        let mut reader = SampleReader::open(root, index)?;
        let mut idx = 0;
        for ep in &index.episodes {
            if ep.ticks > 0 {
                if let Err(e) = reader.read(idx) {
                    problems.push(format!("{}: first record undecodable: {e}", ep.rel_dir));
                }
            }
            idx += ep.ticks as usize;
        }
    }
    Ok(problems)
}

/// Fraction of samples carrying each command, ordered by command code.
pub fn command_balance(root: &Path, index: &DatasetIndex) -> Result<[f64; 4], DataError> {
    let mut reader = SampleReader::open(root, index)?;
    let mut counts = [0usize; 4];
    for i in 0..reader.len() {
        let s = reader.read(i)?;
        counts[s.command.head_index()] += 1;
    }
    let total = reader.len().max(1) as f64;
    Ok([
        counts[0] as f64 / total,
        counts[1] as f64 / total,
        counts[2] as f64 / total,
        counts[3] as f64 / total,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_roundtrip_exact() {
        let sample = Sample {
            grid: (0..GRID_BYTES).map(|i| (i % 251) as u8).collect(),
            speed_mps: 7.25,
            command: HighLevelCommand::TurnRight,
            action: [-0.25, 0.5, 0.0],
            noised_action: [-0.1, 0.5, 0.0],
            intentions: [0.0, 0.25, 1.0],
            waypoints: [[1.5, 2.5]; WAYPOINTS_PER_SAMPLE],
            tick: 993,
            episode_id: 4,
        };
        let mut buf = Vec::new();
        sample.encode(&mut buf);
        assert_eq!(buf.len(), RECORD_BYTES);
        let back = Sample::decode(&buf, 4).unwrap();
        assert_eq!(sample, back);
    }

    #[test]
    fn filter_drops_bad_and_duplicate_episodes() {
        let meta = |id: u32, seed: u64, outcome: Outcome, collisions: u32| EpisodeMeta {
            episode_id: id,
            rel_dir: format!("train/ep_{id:05}"),
            town: TownId::TownA,
            weather: WeatherId::ClearNoon,
            seed,
            n_vehicles: 0,
            n_pedestrians: 0,
            duration_s: 100.0,
            noise_enabled: false,
            outcome,
            collisions,
            ticks: 1000,
        };
        let index = DatasetIndex {
            split: Split::Train,
            episodes: vec![
                meta(0, 1, Outcome::Completed, 0),
                meta(1, 2, Outcome::Aborted, 0),
                meta(2, 3, Outcome::Completed, 2),
                meta(3, 1, Outcome::Completed, 0), // duplicate seed
                meta(4, 5, Outcome::Completed, 0),
            ],
            total_hours: 500.0 / 3600.0,
        };
        let out = filter(&index);
        let ids: Vec<u32> = out.episodes.iter().map(|e| e.episode_id).collect();
        assert_eq!(ids, vec![0, 4]);
        // A clean index passes through unchanged.
        let again = filter(&out);
        assert_eq!(again.episodes, out.episodes);
    }

    #[test]
    fn subset_hours_prefix_and_nesting() {
        let meta = |id: u32, dur: f64| EpisodeMeta {
            episode_id: id,
            rel_dir: format!("train/ep_{id:05}"),
            town: TownId::TownA,
            weather: WeatherId::ClearNoon,
            seed: id as u64,
            n_vehicles: 0,
            n_pedestrians: 0,
            duration_s: dur,
            noise_enabled: false,
            outcome: Outcome::Completed,
            collisions: 0,
            ticks: (dur / DT) as u32,
        };
        let mut index = DatasetIndex {
            split: Split::Train,
            episodes: (0..20)
                .map(|i| meta(i, 90.0 + (i % 5) as f64 * 30.0))
                .collect(),
            total_hours: 0.0,
        };
        index.recompute_hours();

        let full = subset_hours(&index, index.total_hours).unwrap();
        assert_eq!(full.episodes.len(), index.episodes.len());

        let half = subset_hours(&index, index.total_hours / 2.0).unwrap();
        assert!(half.total_hours >= index.total_hours / 2.0);
        assert!(half.total_hours * 3600.0 <= index.total_hours / 2.0 * 3600.0 + MAX_EPISODE_S);

        // Nested property: subset(subset(D, a), b) == subset(D, b) for b <= a.
        let a = index.total_hours * 0.8;
        let b = index.total_hours * 0.3;
        let nested = subset_hours(&subset_hours(&index, a).unwrap(), b).unwrap();
        let direct = subset_hours(&index, b).unwrap();
        assert_eq!(nested.episodes, direct.episodes);

        assert!(matches!(
            subset_hours(&index, index.total_hours + 1.0),
            Err(DataError::InsufficientData { .. })
        ));
    }
}
