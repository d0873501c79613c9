//! Training protocol: uniform minibatch sampling over the whole training
//! set, learning-rate decay on training-error plateau, periodic validation,
//! early stopping on consecutive validation increases, and checkpoint
//! selection at the best validation loss.

use crate::dataset::{DataError, DatasetIndex, SampleReader};
use crate::model::{
    evaluate_loss, loss_and_grads, AdamState, CheckpointMeta, ModelError, NetConfig, NetSample,
    PolicyNet,
};
use crate::rng::{derive_seed, derive_stream, SimRng};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set holds {have} samples, smaller than one batch of {need}")]
    InsufficientData { have: usize, need: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    /// Iterations without a new training-error low before dividing LR by 10.
    pub plateau_window: u64,
    pub val_every: u64,
    /// Consecutive validation increases before stopping.
    pub val_patience: u32,
    pub max_iters: u64,
    pub seed_init: u64,
    pub seed_sampling: u64,
    pub lambda_speed: f64,
    /// EMA decay for the plateau detector's smoothed training loss.
    pub ema_decay: f64,
    /// Cap on validation samples per evaluation (deterministic stride).
    pub val_max_samples: usize,
    pub net: NetConfig,
}

impl TrainConfig {
    /// Desk-scale defaults for a ~0.5 h dataset.
    pub fn desk() -> TrainConfig {
        TrainConfig {
            batch_size: 120,
            lr0: 2e-4,
            plateau_window: 250,
            val_every: 500,
            val_patience: 3,
            max_iters: 10_000,
            seed_init: 1,
            seed_sampling: 1,
            lambda_speed: crate::model::DEFAULT_LAMBDA_SPEED,
            ema_decay: 0.99,
            val_max_samples: 1024,
            net: NetConfig::desk(),
        }
    }

    /// The full-scale protocol constants, kept as a documented preset.
    pub fn paper() -> TrainConfig {
        TrainConfig {
            plateau_window: 1000,
            val_every: 20_000,
            max_iters: 500_000,
            val_max_samples: usize::MAX,
            ..TrainConfig::desk()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StopReason {
    MaxIters,
    ValidationPatience,
}

#[derive(Clone, Debug)]
pub struct TrainLog {
    /// (iteration, batch loss, lr) per iteration.
    pub entries: Vec<(u64, f64, f64)>,
    /// (iteration, validation loss) per evaluation.
    pub val_points: Vec<(u64, f64)>,
    /// (iteration, new lr) per decay event.
    pub lr_events: Vec<(u64, f64)>,
    pub stop_reason: StopReason,
    /// Informational only; ignored by equality so reruns compare clean.
    pub wall_time_s: f64,
}

impl PartialEq for TrainLog {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries
            && self.val_points == other.val_points
            && self.lr_events == other.lr_events
            && self.stop_reason == other.stop_reason
    }
}

impl TrainLog {
    /// CSV with one row per iteration: iteration,loss,lr,event.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,lr,event\n");
        let mut vals = self.val_points.iter().peekable();
        let mut lrs = self.lr_events.iter().peekable();
        for &(iter, loss, lr) in &self.entries {
            let mut event = String::new();
            while let Some(&&(vi, vl)) = vals.peek() {
                if vi == iter {
                    event = format!("validation:{vl}");
                    vals.next();
                } else {
                    break;
                }
            }
            while let Some(&&(li, nl)) = lrs.peek() {
                if li == iter {
                    if !event.is_empty() {
                        event.push(' ');
                    }
                    event.push_str(&format!("lr_decay:{nl}"));
                    lrs.next();
                } else {
                    break;
                }
            }
            out.push_str(&format!("{iter},{loss},{lr},{event}\n"));
        }
        out.push_str(&format!(
            "# stop_reason {}\n",
            match self.stop_reason {
                StopReason::MaxIters => "max_iters",
                StopReason::ValidationPatience => "validation_patience",
            }
        ));
        out
    }

    pub fn best_val(&self) -> Option<f64> {
        self.val_points
            .iter()
            .map(|&(_, v)| v)
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.min(v)))
            })
    }
}

/// Stops after `patience` consecutive validation increases.
#[derive(Clone, Debug, Default)]
pub struct PatienceTracker {
    prev: Option<f64>,
    streak: u32,
}

impl PatienceTracker {
    pub fn observe(&mut self, loss: f64, patience: u32) -> bool {
        if let Some(p) = self.prev {
            if loss > p {
                self.streak += 1;
            } else {
                self.streak = 0;
            }
        }
        self.prev = Some(loss);
        self.streak >= patience
    }
}

/// Anything that can hand out training samples by index.
pub trait SampleSource {
    fn len(&mut self) -> usize;
    fn get(&mut self, idx: usize) -> Result<NetSample, DataError>;
}

/// Disk-backed source over one dataset split.
pub struct DiskSource {
    reader: SampleReader,
}

impl DiskSource {
    pub fn open(root: &Path, index: &DatasetIndex) -> Result<DiskSource, DataError> {
        Ok(DiskSource {
            reader: SampleReader::open(root, index)?,
        })
    }
}

impl SampleSource for DiskSource {
    fn len(&mut self) -> usize {
        self.reader.len()
    }

    fn get(&mut self, idx: usize) -> Result<NetSample, DataError> {
        Ok(NetSample::from_stored(&self.reader.read(idx)?))
    }
}

/// In-memory source, used by tests and synthetic sanity runs.
pub struct MemorySource(pub Vec<NetSample>);

impl SampleSource for MemorySource {
    fn len(&mut self) -> usize {
        self.0.len()
    }

    fn get(&mut self, idx: usize) -> Result<NetSample, DataError> {
        Ok(self.0[idx].clone())
    }
}

/// Train one policy. Returns the checkpoint at the best validation loss,
/// its metadata, and the full log. Deterministic in (sources, config).
pub fn train(
    train_src: &mut dyn SampleSource,
    val_src: &mut dyn SampleSource,
    cfg: &TrainConfig,
) -> Result<(PolicyNet, CheckpointMeta, TrainLog), TrainError> {
    let started = std::time::Instant::now();
    let n_train = train_src.len();
    if n_train < cfg.batch_size {
        return Err(TrainError::InsufficientData {
            have: n_train,
            need: cfg.batch_size,
        });
    }

    // Fixed validation subset: evenly strided over the split.
    let n_val = val_src.len();
    let val_take = n_val.min(cfg.val_max_samples).max(1);
    let mut val_batch = Vec::with_capacity(val_take);
    for k in 0..val_take {
        let idx = k * n_val / val_take;
        val_batch.push(val_src.get(idx.min(n_val - 1))?);
    }

    let mut net = PolicyNet::new(&cfg.net, cfg.seed_init);
    let mut adam = AdamState::new(&net.vars(), cfg.lr0);
    let mut sampler = SimRng::stream(cfg.seed_sampling, "minibatch");
    let dropout_stream = derive_stream(cfg.seed_sampling, "dropout");

    let mut log = TrainLog {
        entries: Vec::with_capacity(cfg.max_iters as usize),
        val_points: Vec::new(),
        lr_events: Vec::new(),
        stop_reason: StopReason::MaxIters,
        wall_time_s: 0.0,
    };
    let mut patience = PatienceTracker::default();
    let mut best: Option<(f64, PolicyNet, u64)> = None;

    let mut ema = f64::NAN;
    let mut best_ema = f64::INFINITY;
    let mut best_ema_iter = 0u64;

    let mut batch = Vec::with_capacity(cfg.batch_size);
    for iter in 1..=cfg.max_iters {
        batch.clear();
        for _ in 0..cfg.batch_size {
            let idx = sampler.index(n_train);
            batch.push(train_src.get(idx)?);
        }
        let dropout_seed = derive_seed(dropout_stream, iter);
        let (loss, grads) = loss_and_grads(&net, &batch, cfg.lambda_speed, dropout_seed)?;
        let total = loss.total();
        {
            let mut vars = net.vars_mut();
            adam.apply(&mut vars, &grads);
        }
        log.entries.push((iter, total, adam.lr));

        // Plateau detector on an EMA of the batch loss; the counter and the
        // running minimum reset after each decay.
        ema = if ema.is_nan() {
            total
        } else {
            cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * total
        };
        if ema < best_ema {
            best_ema = ema;
            best_ema_iter = iter;
        } else if iter - best_ema_iter >= cfg.plateau_window {
            adam.lr /= 10.0;
            log.lr_events.push((iter, adam.lr));
            best_ema = ema;
            best_ema_iter = iter;
        }

        if iter % cfg.val_every == 0 || iter == cfg.max_iters {
            let val = evaluate_loss(&net, &val_batch, cfg.lambda_speed)?.total();
            log.val_points.push((iter, val));
            let improved = best.as_ref().map_or(true, |(b, _, _)| val < *b);
            if improved {
                best = Some((val, net.clone(), iter));
            }
            if patience.observe(val, cfg.val_patience) {
                log.stop_reason = StopReason::ValidationPatience;
                break;
            }
        }
    }

    let (best_val, best_net, best_iter) = best.expect("at least one validation ran");
    log.wall_time_s = started.elapsed().as_secs_f64();
    let meta = CheckpointMeta {
        best_val_loss: best_val,
        seed_init: cfg.seed_init,
        seed_sampling: cfg.seed_sampling,
        iterations: best_iter,
    };
    Ok((best_net, meta, log))
}

/// Convenience wrapper for disk-backed datasets.
pub fn train_on_dataset(
    root: &Path,
    train_index: &DatasetIndex,
    val_index: &DatasetIndex,
    cfg: &TrainConfig,
) -> Result<(PolicyNet, CheckpointMeta, TrainLog), TrainError> {
    let mut train_src = DiskSource::open(root, train_index)?;
    let mut val_src = DiskSource::open(root, val_index)?;
    train(&mut train_src, &mut val_src, cfg)
}

/// Train every (init seed, sampling seed) combination, for the variance grid.
#[allow(clippy::type_complexity)]
pub fn multi_seed_train(
    root: &Path,
    train_index: &DatasetIndex,
    val_index: &DatasetIndex,
    base: &TrainConfig,
    init_seeds: &[u64],
    sampling_seeds: &[u64],
) -> Result<Vec<Vec<(PolicyNet, CheckpointMeta, TrainLog)>>, TrainError> {
    assert!(!init_seeds.is_empty() && !sampling_seeds.is_empty());
    let mut grid = Vec::with_capacity(init_seeds.len());
    for &si in init_seeds {
        let mut row = Vec::with_capacity(sampling_seeds.len());
        for &ss in sampling_seeds {
            let cfg = TrainConfig {
                seed_init: si,
                seed_sampling: ss,
                ..base.clone()
            };
            row.push(train_on_dataset(root, train_index, val_index, &cfg)?);
        }
        grid.push(row);
    }
    Ok(grid)
}
