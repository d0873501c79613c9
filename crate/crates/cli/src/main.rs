//! Command-line entry point binding collection, training, evaluation, and
//! analysis into reproducible experiment runs.
//!
//! Every command writes its artifacts under `--out` together with a frozen
//! `run.toml` describing the resolved configuration and format versions, and
//! refuses to overwrite an existing non-empty output without `--force`.
//!
//! Exit codes: 0 success, 2 usage, 3 data error, 4 internal error.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use drivelab_core::bench::{
    histogram_to_csv, run_suite, throttle_histogram, variance_decomposition, BenchmarkReport,
    BenchmarkSuite, Condition, Mode, Policy, ScriptPolicy, Task, TickLog, TickRow,
};
use drivelab_core::dataset::{
    collect, command_balance, filter, subset_hours, validate, CollectConfig, Dataset,
};
use drivelab_core::expert::ExpertConfig;
use drivelab_core::model::{load_checkpoint, save_checkpoint, NetConfig};
use drivelab_core::sim::DensityProfile;
use drivelab_core::town::{TownId, TownMap, WeatherId};
use drivelab_core::train::{train_on_dataset, TrainConfig};
use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

const CONFIG_SCHEMA_VERSION: u32 = 1;

fn version_string() -> String {
    format!(
        "{} (config-schema {CONFIG_SCHEMA_VERSION}, map {}, dataset {}, routes {}, checkpoint 1)",
        env!("CARGO_PKG_VERSION"),
        drivelab_core::town::MAP_FORMAT_VERSION,
        drivelab_core::dataset::DATASET_FORMAT_VERSION,
        drivelab_core::bench::ROUTES_FORMAT_VERSION,
    )
}

#[derive(Parser)]
#[command(name = "drivelab", about = "Desk-scale driving imitation lab", version = version_string())]
struct Cli {
    /// Worker threads for episode and training pools (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an expert demonstration dataset.
    Collect(CollectArgs),
    /// Dataset utilities.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Train policies on a collected dataset.
    Train(TrainArgs),
    /// Run the benchmark for a policy.
    Evaluate(EvaluateArgs),
    /// Post-hoc analyses over reports and logs.
    Analyze {
        #[command(subcommand)]
        cmd: AnalyzeCmd,
    },
    /// Town map utilities.
    Map {
        #[command(subcommand)]
        cmd: MapCmd,
    },
}

#[derive(Args)]
struct CollectArgs {
    #[arg(long)]
    out: PathBuf,
    /// Simulated hours of training data (validation adds one fifth).
    #[arg(long)]
    hours: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "TownA")]
    town: String,
    /// Comma-separated training weathers.
    #[arg(long, default_value = "ClearNoon,ClearNoonAfterRain,HeavyRainNoon,ClearSunset")]
    weathers: String,
    #[arg(long, default_value = "Regular")]
    density: String,
    /// Fraction of episodes with steering-noise injection.
    #[arg(long, default_value_t = 0.2)]
    noise_fraction: f64,
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Check the invariants of a dataset directory.
    Validate {
        #[arg(long)]
        dataset: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated initialization seeds.
    #[arg(long, default_value = "1")]
    seeds_init: String,
    /// Comma-separated sampling seeds.
    #[arg(long, default_value = "1")]
    seeds_sample: String,
    /// Subset the training split to this many simulated hours first.
    #[arg(long)]
    hours: Option<f64>,
    /// Train the ablation without the speed-prediction head.
    #[arg(long)]
    no_speed_head: bool,
    /// Training preset: desk or paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_speed: Option<f64>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// `expert`, `idle`, or a checkpoint path.
    #[arg(long)]
    policy: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "nocrash")]
    mode: String,
    /// Comma-separated tasks (nocrash mode).
    #[arg(long, default_value = "Empty,Regular,Dense")]
    tasks: String,
    /// Comma-separated conditions.
    #[arg(long, default_value = "Training,NewWeather,NewTown,NewTownWeather")]
    conditions: String,
    #[arg(long, default_value_t = 3)]
    repeats: u32,
    /// Routes per cell (25 = full benchmark).
    #[arg(long, default_value_t = 25)]
    routes: usize,
    #[arg(long, default_value_t = 2020)]
    seed: u64,
    /// Also write per-episode tick logs and a throttle histogram.
    #[arg(long)]
    logs: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Variance decomposition over a grid of per-seed reports.
    Variance {
        /// Directory holding report_i<init>_s<samp>.json files.
        #[arg(long)]
        reports: PathBuf,
        /// Cell to read, as Task:Condition (e.g. Dense:NewTownWeather).
        #[arg(long)]
        cell: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Data-scaling curves from reports at different dataset sizes.
    Scaling {
        /// size=report.json entries; repeat for seeds at the same size.
        #[arg(long = "input", required = true)]
        inputs: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Throttle histogram over tick logs.
    Throttle {
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand)]
enum MapCmd {
    /// Write the versioned plain-text map file for a town.
    Export {
        #[arg(long)]
        town: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// Exit-code buckets.
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Internal(anyhow::Error),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Internal(_) => 4,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) | Failure::Internal(e) => e,
        }
    }
}

fn usage<T>(msg: impl std::fmt::Display) -> std::result::Result<T, Failure> {
    Err(Failure::Usage(anyhow!("{msg}")))
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli.command) {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            std::process::exit(f.code());
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Collect(args) => cmd_collect(args),
        Command::Dataset { cmd } => match cmd {
            DatasetCmd::Validate { dataset } => cmd_validate(dataset),
        },
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Analyze { cmd } => cmd_analyze(cmd),
        Command::Map { cmd } => match cmd {
            MapCmd::Export { town, out, force } => cmd_map_export(town, out, force),
        },
    }
}

/// Refuse to reuse a non-empty output directory unless forced.
fn prepare_out(out: &Path, force: bool) -> std::result::Result<(), Failure> {
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if non_empty && !force {
            return Err(Failure::Data(anyhow!(
                "output {} exists and is not empty (use --force to overwrite)",
                out.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(out)
                .with_context(|| format!("clearing {}", out.display()))
                .map_err(Failure::Internal)?;
        }
    }
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(Failure::Internal)?;
    Ok(())
}

/// Frozen copy of the resolved configuration next to the artifacts.
fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &T) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a, T> {
        command: &'a str,
        version: String,
        config_schema_version: u32,
        config: &'a T,
    }
    let manifest = Manifest {
        command,
        version: version_string(),
        config_schema_version: CONFIG_SCHEMA_VERSION,
        config,
    };
    let text = toml::to_string(&manifest).context("serializing run manifest")?;
    fs::write(out.join("run.toml"), text).context("writing run.toml")?;
    Ok(())
}

fn parse_town(s: &str) -> std::result::Result<TownId, Failure> {
    TownId::parse(s).ok_or_else(|| Failure::Usage(anyhow!("unknown town '{s}'")))
}

fn parse_list<T>(
    s: &str,
    what: &str,
    parse: impl Fn(&str) -> Option<T>,
) -> std::result::Result<Vec<T>, Failure> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| parse(t).ok_or_else(|| Failure::Usage(anyhow!("unknown {what} '{t}'"))))
        .collect()
}

fn parse_seeds(s: &str) -> std::result::Result<Vec<u64>, Failure> {
    parse_list(s, "seed", |t| t.parse().ok())
}

fn cmd_collect(args: CollectArgs) -> std::result::Result<(), Failure> {
    let town = parse_town(&args.town)?;
    let weathers = parse_list(&args.weathers, "weather", WeatherId::parse)?;
    if weathers.iter().any(|w| !w.is_training()) {
        return usage("collection weathers must come from the training set");
    }
    let density = DensityProfile::parse(&args.density)
        .ok_or_else(|| Failure::Usage(anyhow!("unknown density '{}'", args.density)))?;
    if args.hours <= 0.0 {
        return usage("--hours must be positive");
    }
    prepare_out(&args.out, args.force)?;

    let cfg = CollectConfig {
        town,
        weathers,
        hours: args.hours,
        density,
        noise_fraction: args.noise_fraction,
        seed: args.seed,
        expert: ExpertConfig::default(),
    };
    #[derive(Serialize)]
    struct CollectManifest {
        town: String,
        weathers: Vec<String>,
        hours: f64,
        density: String,
        noise_fraction: f64,
        seed: u64,
    }
    write_manifest(
        &args.out,
        "collect",
        &CollectManifest {
            town: town.name().to_string(),
            weathers: cfg.weathers.iter().map(|w| w.name().to_string()).collect(),
            hours: cfg.hours,
            density: density.name().to_string(),
            noise_fraction: cfg.noise_fraction,
            seed: cfg.seed,
        },
    )
    .map_err(Failure::Internal)?;

    let ds = collect(&cfg, &args.out).map_err(|e| Failure::Data(e.into()))?;
    let filtered = filter(&ds.train);
    let balance = command_balance(&args.out, &filtered).map_err(|e| Failure::Data(e.into()))?;
    println!(
        "collected {:.3} h train ({} episodes, {:.3} h after filtering) + {:.3} h validation",
        ds.train.total_hours,
        ds.train.episodes.len(),
        filtered.total_hours,
        ds.val.total_hours
    );
    println!(
        "command balance: lane-follow {:.3}, left {:.3}, right {:.3}, straight {:.3}",
        balance[0], balance[1], balance[2], balance[3]
    );
    Ok(())
}

fn cmd_validate(dataset: PathBuf) -> std::result::Result<(), Failure> {
    let problems = validate(&dataset).map_err(|e| Failure::Data(e.into()))?;
    if problems.is_empty() {
        println!("dataset ok");
        Ok(())
    } else {
        for p in &problems {
            eprintln!("problem: {p}");
        }
        Err(Failure::Data(anyhow!("{} problems found", problems.len())))
    }
}

fn cmd_train(args: TrainArgs) -> std::result::Result<(), Failure> {
    let seeds_init = parse_seeds(&args.seeds_init)?;
    let seeds_sample = parse_seeds(&args.seeds_sample)?;
    if seeds_init.is_empty() || seeds_sample.is_empty() {
        return usage("need at least one seed in each list");
    }
    let mut base = match args.preset.as_str() {
        "desk" => TrainConfig::desk(),
        "paper" => TrainConfig::paper(),
        other => return usage(format!("unknown preset '{other}'")),
    };
    if let Some(v) = args.iters {
        base.max_iters = v;
    }
    if let Some(v) = args.batch {
        base.batch_size = v;
    }
    if let Some(v) = args.lr {
        base.lr0 = v;
    }
    if let Some(v) = args.lambda_speed {
        base.lambda_speed = v;
    }
    if args.no_speed_head {
        base.net = NetConfig {
            with_speed_head: false,
            ..base.net
        };
    }
    prepare_out(&args.out, args.force)?;

    let ds = Dataset::open(&args.dataset).map_err(|e| Failure::Data(e.into()))?;
    let mut train_idx = filter(&ds.train);
    let val_idx = filter(&ds.val);
    if let Some(hours) = args.hours {
        train_idx = subset_hours(&train_idx, hours).map_err(|e| Failure::Data(e.into()))?;
    }

    #[derive(Serialize)]
    struct TrainManifest<'a> {
        dataset: String,
        hours: Option<f64>,
        seeds_init: &'a [u64],
        seeds_sample: &'a [u64],
        config: &'a TrainConfig,
    }
    write_manifest(
        &args.out,
        "train",
        &TrainManifest {
            dataset: args.dataset.display().to_string(),
            hours: args.hours,
            seeds_init: &seeds_init,
            seeds_sample: &seeds_sample,
            config: &base,
        },
    )
    .map_err(Failure::Internal)?;

    for &si in &seeds_init {
        for &ss in &seeds_sample {
            let cfg = TrainConfig {
                seed_init: si,
                seed_sampling: ss,
                ..base.clone()
            };
            let (net, meta, log) = train_on_dataset(&ds.root, &train_idx, &val_idx, &cfg)
                .map_err(|e| Failure::Data(e.into()))?;
            let ckpt = args.out.join(format!("ckpt_i{si}_s{ss}.ckpt"));
            save_checkpoint(&ckpt, &net, None, &meta).map_err(|e| Failure::Internal(e.into()))?;
            fs::write(
                args.out.join(format!("trainlog_i{si}_s{ss}.csv")),
                log.to_csv(),
            )
            .map_err(|e| Failure::Internal(e.into()))?;
            println!(
                "trained i{si} s{ss}: best val {:.4} at iter {} ({} iters, {:.1}s)",
                meta.best_val_loss,
                meta.iterations,
                log.entries.len(),
                log.wall_time_s
            );
        }
    }
    Ok(())
}

fn parse_policy(s: &str) -> std::result::Result<Policy, Failure> {
    match s {
        "expert" => Ok(Policy::Expert(ExpertConfig::default())),
        "idle" => Ok(Policy::Script(ScriptPolicy::Idle)),
        path => {
            let (net, _, _) =
                load_checkpoint(Path::new(path)).map_err(|e| Failure::Data(e.into()))?;
            Ok(Policy::Net(Box::new(net)))
        }
    }
}

fn cmd_evaluate(args: EvaluateArgs) -> std::result::Result<(), Failure> {
    let mode = Mode::parse(&args.mode)
        .ok_or_else(|| Failure::Usage(anyhow!("unknown mode '{}'", args.mode)))?;
    let tasks = parse_list(&args.tasks, "task", Task::parse)?;
    let conditions = parse_list(&args.conditions, "condition", Condition::parse)?;
    if args.repeats == 0 || args.routes == 0 {
        return usage("--repeats and --routes must be positive");
    }
    let policy = parse_policy(&args.policy)?;
    prepare_out(&args.out, args.force)?;

    let suite = BenchmarkSuite {
        tasks,
        conditions,
        repeats: args.repeats,
        mode,
        seed: args.seed,
        max_routes: args.routes,
        keep_logs: args.logs,
    };
    write_manifest(&args.out, "evaluate", &suite).map_err(Failure::Internal)?;

    let (report, logs) = run_suite(&policy, &suite).map_err(|e| Failure::Internal(e.into()))?;
    let write = |name: &str, data: String| -> std::result::Result<(), Failure> {
        fs::write(args.out.join(name), data).map_err(|e| Failure::Internal(e.into()))
    };
    write("report.txt", report.to_table())?;
    write("report.csv", report.to_csv())?;
    write(
        "report.json",
        serde_json::to_string_pretty(&report).map_err(|e| Failure::Internal(e.into()))?,
    )?;
    write("episodes.jsonl", report.to_jsonl())?;
    if args.logs {
        let dir = args.out.join("ticklogs");
        fs::create_dir_all(&dir).map_err(|e| Failure::Internal(e.into()))?;
        for (i, log) in logs.iter().enumerate() {
            fs::write(dir.join(format!("ep_{i:05}.ticklog")), log.to_text())
                .map_err(|e| Failure::Internal(e.into()))?;
        }
        let hist = throttle_histogram(&logs);
        write("throttle_hist.csv", histogram_to_csv(&hist))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn load_report(path: &Path) -> std::result::Result<BenchmarkReport, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Data)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Data)
}

fn cmd_analyze(cmd: AnalyzeCmd) -> std::result::Result<(), Failure> {
    match cmd {
        AnalyzeCmd::Variance {
            reports,
            cell,
            out,
            force,
        } => {
            let (task, condition) = cell
                .split_once(':')
                .ok_or_else(|| Failure::Usage(anyhow!("--cell must be Task:Condition")))?;
            let condition = Condition::parse(condition)
                .ok_or_else(|| Failure::Usage(anyhow!("unknown condition '{condition}'")))?;
            // Collect the (init, samp) grid from file names.
            let mut grid: std::collections::BTreeMap<(u64, u64), f64> = Default::default();
            let entries = fs::read_dir(&reports)
                .with_context(|| format!("reading {}", reports.display()))
                .map_err(Failure::Data)?;
            for entry in entries {
                let entry = entry.map_err(|e| Failure::Data(e.into()))?;
                let name = entry.file_name().to_string_lossy().to_string();
                let Some(rest) = name
                    .strip_prefix("report_i")
                    .and_then(|r| r.strip_suffix(".json"))
                else {
                    continue;
                };
                let Some((i, s)) = rest.split_once("_s") else {
                    continue;
                };
                let (Ok(i), Ok(s)) = (i.parse::<u64>(), s.parse::<u64>()) else {
                    continue;
                };
                let report = load_report(&entry.path())?;
                let cell_report = report.cell(task, condition).ok_or_else(|| {
                    Failure::Data(anyhow!("{name} holds no cell {task}:{}", condition.name()))
                })?;
                grid.insert((i, s), cell_report.success_mean);
            }
            if grid.is_empty() {
                return Err(Failure::Data(anyhow!(
                    "no report_i<init>_s<samp>.json files in {}",
                    reports.display()
                )));
            }
            let inits: Vec<u64> = {
                let mut v: Vec<u64> = grid.keys().map(|k| k.0).collect();
                v.dedup();
                v
            };
            let samps: Vec<u64> = {
                let mut v: Vec<u64> = grid.keys().map(|k| k.1).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
            let matrix: Vec<Vec<f64>> = inits
                .iter()
                .map(|i| {
                    samps
                        .iter()
                        .map(|s| *grid.get(&(*i, *s)).unwrap_or(&f64::NAN))
                        .collect()
                })
                .collect();
            if matrix.iter().flatten().any(|v| v.is_nan()) {
                return Err(Failure::Data(anyhow!("incomplete seed grid")));
            }
            let decomp = variance_decomposition(&matrix).map_err(|e| Failure::Data(e.into()))?;
            prepare_out(&out, force)?;
            let mut csv = String::from("quantity,value\n");
            csv.push_str(&format!("total,{}\n", decomp.total));
            csv.push_str(&format!("within_init,{}\n", decomp.within_init));
            csv.push_str(&format!("between_data,{}\n", decomp.between_data));
            let mut mat = String::from("init_seed");
            for s in &samps {
                mat.push_str(&format!(",s{s}"));
            }
            mat.push('\n');
            for (r, i) in inits.iter().enumerate() {
                mat.push_str(&format!("i{i}"));
                for v in &matrix[r] {
                    mat.push_str(&format!(",{v}"));
                }
                mat.push('\n');
            }
            fs::write(out.join("variance.csv"), csv).map_err(|e| Failure::Internal(e.into()))?;
            fs::write(out.join("score_matrix.csv"), mat)
                .map_err(|e| Failure::Internal(e.into()))?;
            println!(
                "total {:.6} = within_init {:.6} + between_data {:.6}",
                decomp.total, decomp.within_init, decomp.between_data
            );
            Ok(())
        }
        AnalyzeCmd::Scaling { inputs, out, force } => {
            // size -> reports (several seeds per size allowed).
            let mut by_size: std::collections::BTreeMap<String, Vec<BenchmarkReport>> =
                Default::default();
            for input in &inputs {
                let (size, path) = input
                    .split_once('=')
                    .ok_or_else(|| Failure::Usage(anyhow!("--input must be size=report.json")))?;
                by_size
                    .entry(size.to_string())
                    .or_default()
                    .push(load_report(Path::new(path))?);
            }
            prepare_out(&out, force)?;
            let mut csv = String::from(
                "size,task,condition,seeds,success_mean,success_std,inertia_mean,inertia_std\n",
            );
            for (size, reports) in &by_size {
                let mut cells: std::collections::BTreeMap<(String, Condition), Vec<(f64, f64)>> =
                    Default::default();
                for report in reports {
                    for cell in &report.cells {
                        cells
                            .entry((cell.task.clone(), cell.condition))
                            .or_default()
                            .push((cell.success_mean, cell.inertia_pct));
                    }
                }
                for ((task, condition), vals) in cells {
                    let n = vals.len() as f64;
                    let s_mean = vals.iter().map(|v| v.0).sum::<f64>() / n;
                    let s_std =
                        (vals.iter().map(|v| (v.0 - s_mean).powi(2)).sum::<f64>() / n).sqrt();
                    let i_mean = vals.iter().map(|v| v.1).sum::<f64>() / n;
                    let i_std =
                        (vals.iter().map(|v| (v.1 - i_mean).powi(2)).sum::<f64>() / n).sqrt();
                    csv.push_str(&format!(
                        "{size},{task},{},{},{s_mean},{s_std},{i_mean},{i_std}\n",
                        condition.name(),
                        vals.len()
                    ));
                }
            }
            fs::write(out.join("scaling.csv"), &csv).map_err(|e| Failure::Internal(e.into()))?;
            print!("{csv}");
            Ok(())
        }
        AnalyzeCmd::Throttle { logs, out, force } => {
            let mut parsed = Vec::new();
            for path in &logs {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .map_err(Failure::Data)?;
                parsed.push(parse_ticklog(&text).map_err(Failure::Data)?);
            }
            prepare_out(&out, force)?;
            let hist = throttle_histogram(&parsed);
            fs::write(out.join("throttle_hist.csv"), histogram_to_csv(&hist))
                .map_err(|e| Failure::Internal(e.into()))?;
            println!("histogram over {} logs written", parsed.len());
            Ok(())
        }
    }
}

fn parse_ticklog(text: &str) -> Result<TickLog> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 9 {
            bail!("malformed tick log line: '{line}'");
        }
        rows.push(TickRow {
            tick: toks[0].parse()?,
            x: toks[1].parse()?,
            y: toks[2].parse()?,
            heading: toks[3].parse()?,
            speed: toks[4].parse()?,
            steer: toks[5].parse()?,
            throttle: toks[6].parse()?,
            brake: toks[7].parse()?,
            events: if toks[8] == "-" {
                String::new()
            } else {
                toks[8..].join(" ")
            },
        });
    }
    Ok(TickLog { rows })
}

fn cmd_map_export(town: String, out: PathBuf, force: bool) -> std::result::Result<(), Failure> {
    let town = parse_town(&town)?;
    if out.exists() && !force {
        return Err(Failure::Data(anyhow!(
            "{} exists (use --force to overwrite)",
            out.display()
        )));
    }
    let map: &TownMap = drivelab_core::bench::world(town);
    fs::write(&out, map.to_text()).map_err(|e| Failure::Internal(e.into()))?;
    println!(
        "wrote {} ({} lanes, {} intersections, {} spawn points)",
        out.display(),
        map.lanes.len(),
        map.intersections.len(),
        map.spawn_points.len()
    );
    Ok(())
}
