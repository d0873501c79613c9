//! The conditional imitation policy network and its gradient engine.
//!
//! Architecture: a residual convolutional backbone over the semantic grid
//! (one pre-activation block per stage, stride-2 downsampling between stages,
//! global average pool to the latent vector), a fully connected measured-speed
//! branch, a joint layer feeding four command-indexed control heads, and a
//! speed-prediction head read directly off the backbone latent. All passes
//! are hand-written reverse mode in f64; a finite-difference oracle in the
//! test suite checks every parameter class.

pub mod adam;
pub mod nn;

use crate::rng::{derive_seed, hash_label, mix64, SimRng};
use crate::HighLevelCommand;
use nn::{
    avgpool2, avgpool2_backward, conv_out_dim, dropout_mask, gap, gap_backward, relu,
    relu_backward, sigmoid, Conv2d, GradBuffer, Linear, Var, VarBuilder,
};
use rayon::prelude::*;
use std::path::Path;

pub use adam::AdamState;

/// Measured and predicted speeds are normalized by this before the loss.
pub const SPEED_NORM_MPS: f64 = 12.0;
/// Default weight of the speed-prediction term.
pub const DEFAULT_LAMBDA_SPEED: f64 = 0.25;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DLCKPT01";

/// Fixed shard count so gradient reduction order does not depend on the
/// worker pool size.
const GRAD_SHARDS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("observation grid has {got} values, expected {want}")]
    ShapeMismatch { got: usize, want: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(String),
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub grid_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Channel width per residual stage; the last entry is the latent width.
    pub stage_channels: Vec<usize>,
    /// Extra 2x2 average pool after the stem conv.
    pub stem_pool: bool,
    pub speed_hidden: usize,
    pub joint_width: usize,
    pub head_hidden: usize,
    pub dropout: f64,
    pub with_speed_head: bool,
}

impl NetConfig {
    /// The desk-scale default used by the pipelines.
    pub fn desk() -> NetConfig {
        NetConfig {
            grid_channels: crate::sim::OBS_CHANNELS,
            grid_h: crate::sim::OBS_HEIGHT,
            grid_w: crate::sim::OBS_WIDTH,
            stage_channels: vec![12, 24, 48, 128],
            stem_pool: true,
            speed_hidden: 64,
            joint_width: 128,
            head_hidden: 64,
            dropout: 0.5,
            with_speed_head: true,
        }
    }

    /// Tiny net on an 8x8 grid with two blocks, for gradient checking.
    pub fn gradcheck_tiny() -> NetConfig {
        NetConfig {
            grid_channels: crate::sim::OBS_CHANNELS,
            grid_h: 8,
            grid_w: 8,
            stage_channels: vec![4, 8],
            stem_pool: false,
            speed_hidden: 8,
            joint_width: 16,
            head_hidden: 8,
            dropout: 0.5,
            with_speed_head: true,
        }
    }

    pub fn grid_len(&self) -> usize {
        self.grid_channels * self.grid_h * self.grid_w
    }

    pub fn latent(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    /// Stable hash over every field, stored in checkpoints.
    pub fn config_hash(&self) -> u64 {
        let mut h = hash_label("drivelab-netconfig");
        let mut fold = |v: u64| h = mix64(h ^ mix64(v));
        fold(self.grid_channels as u64);
        fold(self.grid_h as u64);
        fold(self.grid_w as u64);
        for c in &self.stage_channels {
            fold(*c as u64);
        }
        fold(self.stem_pool as u64);
        fold(self.speed_hidden as u64);
        fold(self.joint_width as u64);
        fold(self.head_hidden as u64);
        fold(self.dropout.to_bits());
        fold(self.with_speed_head as u64);
        h
    }

    /// (h, w) of the feature map entering each stage, after the stem.
    fn stage_dims(&self) -> Vec<(usize, usize)> {
        let mut h = conv_out_dim(self.grid_h, 2);
        let mut w = conv_out_dim(self.grid_w, 2);
        if self.stem_pool {
            h /= 2;
            w /= 2;
        }
        let mut dims = vec![(h, w)];
        for _ in 1..self.stage_channels.len() {
            h = conv_out_dim(h, 2);
            w = conv_out_dim(w, 2);
            dims.push((h, w));
        }
        dims
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub c1: Conv2d,
    pub c2: Conv2d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub cfg: NetConfig,
    pub stem: Conv2d,
    pub blocks: Vec<ResBlock>,
    /// Stride-2 transitions between stages; `downs[i]` feeds stage i+1.
    pub downs: Vec<Conv2d>,
    pub speed_branch: [Linear; 3],
    pub joint: Linear,
    pub heads: Vec<[Linear; 3]>,
    pub speed_head: Option<[Linear; 3]>,
}

impl PolicyNet {
    /// Fresh network with fan-in uniform weights drawn from `seed`.
    pub fn new(cfg: &NetConfig, seed: u64) -> PolicyNet {
        let mut rng = SimRng::stream(seed, "net-init");
        let mut vb = VarBuilder::new(&mut rng);
        let stem = Conv2d::new(&mut vb, "stem", cfg.grid_channels, cfg.stage_channels[0], 2);
        let mut blocks = Vec::new();
        let mut downs = Vec::new();
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            blocks.push(ResBlock {
                c1: Conv2d::new(&mut vb, &format!("stage{i}.c1"), c, c, 1),
                c2: Conv2d::new(&mut vb, &format!("stage{i}.c2"), c, c, 1),
            });
            if i + 1 < cfg.stage_channels.len() {
                downs.push(Conv2d::new(
                    &mut vb,
                    &format!("down{i}"),
                    c,
                    cfg.stage_channels[i + 1],
                    2,
                ));
            }
        }
        let speed_branch = [
            Linear::new(&mut vb, "speed.0", 1, cfg.speed_hidden),
            Linear::new(&mut vb, "speed.1", cfg.speed_hidden, cfg.speed_hidden),
            Linear::new(&mut vb, "speed.2", cfg.speed_hidden, cfg.speed_hidden),
        ];
        let joint = Linear::new(
            &mut vb,
            "joint",
            cfg.latent() + cfg.speed_hidden,
            cfg.joint_width,
        );
        let heads = (0..4)
            .map(|h| {
                [
                    Linear::new(&mut vb, &format!("head{h}.0"), cfg.joint_width, cfg.head_hidden),
                    Linear::new(&mut vb, &format!("head{h}.1"), cfg.head_hidden, cfg.head_hidden),
                    Linear::new(&mut vb, &format!("head{h}.2"), cfg.head_hidden, 3),
                ]
            })
            .collect();
        let speed_head = cfg.with_speed_head.then(|| {
            [
                Linear::new(&mut vb, "speedhead.0", cfg.latent(), cfg.head_hidden),
                Linear::new(&mut vb, "speedhead.1", cfg.head_hidden, cfg.head_hidden),
                Linear::new(&mut vb, "speedhead.2", cfg.head_hidden, 1),
            ]
        });
        PolicyNet {
            cfg: cfg.clone(),
            stem,
            blocks,
            downs,
            speed_branch,
            joint,
            heads,
            speed_head,
        }
    }

    pub fn vars(&self) -> Vec<&Var> {
        let mut out = Vec::new();
        out.push(&self.stem.w);
        out.push(&self.stem.b);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push(&b.c1.w);
            out.push(&b.c1.b);
            out.push(&b.c2.w);
            out.push(&b.c2.b);
            if i < self.downs.len() {
                out.push(&self.downs[i].w);
                out.push(&self.downs[i].b);
            }
        }
        for l in &self.speed_branch {
            out.push(&l.w);
            out.push(&l.b);
        }
        out.push(&self.joint.w);
        out.push(&self.joint.b);
        for h in &self.heads {
            for l in h {
                out.push(&l.w);
                out.push(&l.b);
            }
        }
        if let Some(sh) = &self.speed_head {
            for l in sh {
                out.push(&l.w);
                out.push(&l.b);
            }
        }
        out.sort_by_key(|v| v.slot);
        out
    }

    pub fn vars_mut(&mut self) -> Vec<&mut Var> {
        let mut out: Vec<&mut Var> = Vec::new();
        out.push(&mut self.stem.w);
        out.push(&mut self.stem.b);
        for (b, d) in self.blocks.iter_mut().zip(
            self.downs
                .iter_mut()
                .map(Some)
                .chain(std::iter::repeat_with(|| None)),
        ) {
            out.push(&mut b.c1.w);
            out.push(&mut b.c1.b);
            out.push(&mut b.c2.w);
            out.push(&mut b.c2.b);
            if let Some(d) = d {
                out.push(&mut d.w);
                out.push(&mut d.b);
            }
        }
        for l in &mut self.speed_branch {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out.push(&mut self.joint.w);
        out.push(&mut self.joint.b);
        for h in &mut self.heads {
            for l in h {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        if let Some(sh) = &mut self.speed_head {
            for l in sh {
                out.push(&mut l.w);
                out.push(&mut l.b);
            }
        }
        out.sort_by_key(|v| v.slot);
        out
    }

    pub fn n_params(&self) -> usize {
        self.vars().iter().map(|v| v.len()).sum()
    }
}

/// Everything the backward pass needs from one forward evaluation.
pub struct Cache {
    stem_col: Vec<f64>,
    stem_out: Vec<f64>,
    stem_pooled: Option<Vec<f64>>,
    /// Per stage: (col1, mid post-relu, col2, stage output).
    blocks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>,
    /// Per transition: (input to down conv implicitly = previous block out,
    /// col, post-relu output).
    downs: Vec<(Vec<f64>, Vec<f64>)>,
    drop_mask: Option<Vec<f64>>,
    latent: Vec<f64>,
    speed_in: f64,
    speed_acts: [Vec<f64>; 3],
    joint_in: Vec<f64>,
    joint_out: Vec<f64>,
    head_idx: usize,
    head_acts: [Vec<f64>; 2],
    head_raw: [f64; 3],
    speed_head_acts: Option<([Vec<f64>; 2], f64)>,
    pub action: [f64; 3],
    /// Normalized predicted speed (multiply by SPEED_NORM_MPS for m/s).
    pub speed_pred_norm: f64,
}

impl PolicyNet {
    /// Full forward pass. `drop_rng` enables training-mode dropout; pass
    /// `None` for inference.
    pub fn forward(
        &self,
        grid: &[f64],
        speed_mps: f64,
        command: HighLevelCommand,
        mut drop_rng: Option<&mut SimRng>,
    ) -> Result<Cache, ModelError> {
        let cfg = &self.cfg;
        if grid.len() != cfg.grid_len() {
            return Err(ModelError::ShapeMismatch {
                got: grid.len(),
                want: cfg.grid_len(),
            });
        }
        let dims = cfg.stage_dims();

        // Stem.
        let (mut y, stem_col) = self.stem.forward(grid, cfg.grid_h, cfg.grid_w);
        relu(&mut y);
        let stem_out = y.clone();
        let (sh, sw) = (conv_out_dim(cfg.grid_h, 2), conv_out_dim(cfg.grid_w, 2));
        let mut x;
        let stem_pooled = if cfg.stem_pool {
            let (p, _, _) = avgpool2(&y, cfg.stage_channels[0], sh, sw);
            x = p.clone();
            Some(p)
        } else {
            x = y;
            None
        };

        // Stages.
        let mut blocks_cache = Vec::with_capacity(self.blocks.len());
        let mut downs_cache = Vec::with_capacity(self.downs.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let (h, w) = dims[i];
            let (mut mid, col1) = block.c1.forward(&x, h, w);
            relu(&mut mid);
            let (f, col2) = block.c2.forward(&mid, h, w);
            let mut out = x.clone();
            for (o, fv) in out.iter_mut().zip(f.iter()) {
                *o += *fv;
            }
            blocks_cache.push((col1, mid, col2, out.clone()));
            x = out;
            if i < self.downs.len() {
                let (mut d, dcol) = self.downs[i].forward(&x, h, w);
                relu(&mut d);
                downs_cache.push((dcol, d.clone()));
                x = d;
            }
        }

        // Dropout after the last convolutional layer, then pool to the latent.
        let (lh, lw) = dims[dims.len() - 1];
        let drop_mask = match drop_rng.as_deref_mut() {
            Some(rng) if cfg.dropout > 0.0 => {
                let mask = dropout_mask(rng, x.len(), cfg.dropout);
                for (v, m) in x.iter_mut().zip(mask.iter()) {
                    *v *= *m;
                }
                Some(mask)
            }
            _ => None,
        };
        let latent = gap(&x, cfg.latent(), lh * lw);

        // Measured-speed branch.
        let speed_in = speed_mps / SPEED_NORM_MPS;
        let mut s = vec![speed_in];
        let mut speed_acts: [Vec<f64>; 3] = Default::default();
        for (i, l) in self.speed_branch.iter().enumerate() {
            let mut z = l.forward(&s);
            relu(&mut z);
            speed_acts[i] = z.clone();
            s = z;
        }

        // Joint representation and the selected control head.
        let mut joint_in = latent.clone();
        joint_in.extend_from_slice(&s);
        let mut j = self.joint.forward(&joint_in);
        relu(&mut j);
        let joint_out = j.clone();

        let head_idx = command.head_index();
        let head = &self.heads[head_idx];
        let mut h1 = head[0].forward(&joint_out);
        relu(&mut h1);
        let mut h2 = head[1].forward(&h1);
        relu(&mut h2);
        let raw = head[2].forward(&h2);
        let head_raw = [raw[0], raw[1], raw[2]];
        let action = [raw[0].tanh(), sigmoid(raw[1]), sigmoid(raw[2])];

        // Speed prediction off the backbone latent only.
        let (speed_head_acts, speed_pred_norm) = match &self.speed_head {
            Some(sh) => {
                let mut s1 = sh[0].forward(&latent);
                relu(&mut s1);
                let mut s2 = sh[1].forward(&s1);
                relu(&mut s2);
                let out = sh[2].forward(&s2);
                (Some(([s1, s2], out[0])), out[0])
            }
            None => (None, 0.0),
        };

        Ok(Cache {
            stem_col,
            stem_out,
            stem_pooled,
            blocks: blocks_cache,
            downs: downs_cache,
            drop_mask,
            latent,
            speed_in,
            speed_acts,
            joint_in,
            joint_out,
            head_idx,
            head_acts: [h1, h2],
            head_raw,
            speed_head_acts: speed_head_acts.map(|(acts, _)| (acts, speed_pred_norm)),
            action,
            speed_pred_norm,
        })
    }

    /// Reverse pass: propagate loss gradients w.r.t. the post-activation
    /// action and the normalized speed prediction into the parameters.
    pub fn backward(
        &self,
        grid: &[f64],
        cache: &Cache,
        d_action: [f64; 3],
        d_speed_pred: f64,
        grads: &mut GradBuffer,
    ) {
        let cfg = &self.cfg;
        let dims = cfg.stage_dims();

        // Head output activations: steer tanh, throttle/brake sigmoid.
        let dz = [
            d_action[0] * (1.0 - cache.action[0] * cache.action[0]),
            d_action[1] * cache.action[1] * (1.0 - cache.action[1]),
            d_action[2] * cache.action[2] * (1.0 - cache.action[2]),
        ];
        let _ = cache.head_raw;
        let head = &self.heads[cache.head_idx];
        let mut d = head[2].backward(&cache.head_acts[1], &dz, grads);
        relu_backward(&cache.head_acts[1], &mut d);
        let mut d = head[1].backward(&cache.head_acts[0], &d, grads);
        relu_backward(&cache.head_acts[0], &mut d);
        let d_joint_out_from_head = head[0].backward(&cache.joint_out, &d, grads);

        // Speed head (linear output).
        let mut d_latent = vec![0.0; cfg.latent()];
        if let (Some(sh), Some((acts, _))) = (&self.speed_head, &cache.speed_head_acts) {
            if d_speed_pred != 0.0 {
                let mut d = sh[2].backward(&acts[1], &[d_speed_pred], grads);
                relu_backward(&acts[1], &mut d);
                let mut d = sh[1].backward(&acts[0], &d, grads);
                relu_backward(&acts[0], &mut d);
                let dl = sh[0].backward(&cache.latent, &d, grads);
                for (a, b) in d_latent.iter_mut().zip(dl.iter()) {
                    *a += *b;
                }
            }
        }

        // Joint layer.
        let mut d_joint = d_joint_out_from_head;
        relu_backward(&cache.joint_out, &mut d_joint);
        let d_joint_in = self.joint.backward(&cache.joint_in, &d_joint, grads);
        for (a, b) in d_latent.iter_mut().zip(d_joint_in.iter()) {
            *a += *b;
        }

        // Measured-speed branch.
        let mut d_s = d_joint_in[cfg.latent()..].to_vec();
        for i in (0..3).rev() {
            relu_backward(&cache.speed_acts[i], &mut d_s);
            let input: &[f64] = if i == 0 {
                std::slice::from_ref(&cache.speed_in)
            } else {
                &cache.speed_acts[i - 1]
            };
            d_s = self.speed_branch[i].backward(input, &d_s, grads);
        }

        // Backbone: GAP, dropout, stages in reverse.
        let (lh, lw) = dims[dims.len() - 1];
        let mut dx = gap_backward(&d_latent, cfg.latent(), lh * lw);
        if let Some(mask) = &cache.drop_mask {
            for (g, m) in dx.iter_mut().zip(mask.iter()) {
                *g *= *m;
            }
        }

        for i in (0..self.blocks.len()).rev() {
            let (h, w) = dims[i];
            if i < self.downs.len() {
                let (dcol, dout) = &cache.downs[i];
                relu_backward(dout, &mut dx);
                dx = self.downs[i].backward(dcol, &dx, h, w, grads);
            }
            let (col1, mid, col2, _out) = &cache.blocks[i];
            // out = x + c2(relu(c1(x))): the residual path sees dx directly.
            let mut d_branch = self.blocks[i].c2.backward(col2, &dx, h, w, grads);
            relu_backward(mid, &mut d_branch);
            let d_from_branch = self.blocks[i].c1.backward(col1, &d_branch, h, w, grads);
            for (a, b) in dx.iter_mut().zip(d_from_branch.iter()) {
                *a += *b;
            }
        }

        // Stem (and optional pool).
        let (sh, sw) = (conv_out_dim(cfg.grid_h, 2), conv_out_dim(cfg.grid_w, 2));
        if cfg.stem_pool {
            let _ = cache.stem_pooled.as_ref();
            dx = avgpool2_backward(&dx, cfg.stage_channels[0], sh, sw);
        }
        relu_backward(&cache.stem_out, &mut dx);
        let _ = self
            .stem
            .backward(&cache.stem_col, &dx, cfg.grid_h, cfg.grid_w, grads);
        let _ = grid;
    }
}

/// One training example in network form.
#[derive(Clone, Debug)]
pub struct NetSample {
    pub grid: Vec<f64>,
    pub speed_mps: f64,
    pub command: HighLevelCommand,
    pub target_action: [f64; 3],
}

impl NetSample {
    pub fn from_stored(s: &crate::dataset::Sample) -> NetSample {
        NetSample {
            grid: s.grid.iter().map(|&v| v as f64 / 255.0).collect(),
            speed_mps: s.speed_mps as f64,
            command: s.command,
            target_action: [
                s.action[0] as f64,
                s.action[1] as f64,
                s.action[2] as f64,
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Loss {
    pub control_l1: f64,
    pub speed_l1: f64,
    pub lambda_speed: f64,
}

impl Loss {
    pub fn total(&self) -> f64 {
        self.control_l1 + self.lambda_speed * self.speed_l1
    }
}

/// Subgradient of |e| with the convention sign(0) = 0.
fn l1_grad(e: f64) -> f64 {
    if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean L1 loss over a batch and its gradients. Dropout masks derive from
/// `dropout_seed` per sample index, so sharding cannot change the result.
pub fn loss_and_grads(
    net: &PolicyNet,
    batch: &[NetSample],
    lambda_speed: f64,
    dropout_seed: u64,
) -> Result<(Loss, GradBuffer), ModelError> {
    assert!(!batch.is_empty(), "batch must be nonempty");
    let vars = net.vars();
    let n = batch.len() as f64;
    let shard_size = batch.len().div_ceil(GRAD_SHARDS);

    let shards: Vec<Result<(Loss, GradBuffer), ModelError>> = (0..GRAD_SHARDS)
        .into_par_iter()
        .map(|shard| {
            let lo = shard * shard_size;
            let hi = ((shard + 1) * shard_size).min(batch.len());
            let mut grads = GradBuffer::zeros_like(&vars);
            let mut loss = Loss {
                lambda_speed,
                ..Default::default()
            };
            for idx in lo..hi.max(lo) {
                let sample = &batch[idx];
                let mut rng = SimRng::new(derive_seed(dropout_seed, idx as u64));
                let cache = net.forward(
                    &sample.grid,
                    sample.speed_mps,
                    sample.command,
                    Some(&mut rng),
                )?;
                let mut d_action = [0.0; 3];
                let mut control = 0.0;
                for k in 0..3 {
                    let e = cache.action[k] - sample.target_action[k];
                    control += e.abs() / 3.0;
                    d_action[k] = l1_grad(e) / (3.0 * n);
                }
                loss.control_l1 += control / n;
                let mut d_speed = 0.0;
                if net.cfg.with_speed_head && lambda_speed != 0.0 {
                    let target = sample.speed_mps / SPEED_NORM_MPS;
                    let e = cache.speed_pred_norm - target;
                    loss.speed_l1 += e.abs() / n;
                    d_speed = lambda_speed * l1_grad(e) / n;
                } else if net.cfg.with_speed_head {
                    // Report the diagnostic term even when unweighted.
                    let target = sample.speed_mps / SPEED_NORM_MPS;
                    loss.speed_l1 += (cache.speed_pred_norm - target).abs() / n;
                }
                net.backward(&sample.grid, &cache, d_action, d_speed, &mut grads);
            }
            Ok((loss, grads))
        })
        .collect();

    let mut total = Loss {
        lambda_speed,
        ..Default::default()
    };
    let mut grads = GradBuffer::zeros_like(&vars);
    for shard in shards {
        let (l, g) = shard?;
        total.control_l1 += l.control_l1;
        total.speed_l1 += l.speed_l1;
        grads.add_from(&g);
    }
    Ok((total, grads))
}

/// Mean loss only (no gradients, dropout off): used for validation.
pub fn evaluate_loss(
    net: &PolicyNet,
    batch: &[NetSample],
    lambda_speed: f64,
) -> Result<Loss, ModelError> {
    let losses: Vec<Result<(f64, f64), ModelError>> = batch
        .par_iter()
        .map(|sample| {
            let cache = net.forward(&sample.grid, sample.speed_mps, sample.command, None)?;
            let mut control = 0.0;
            for k in 0..3 {
                control += (cache.action[k] - sample.target_action[k]).abs() / 3.0;
            }
            let speed = if net.cfg.with_speed_head {
                (cache.speed_pred_norm - sample.speed_mps / SPEED_NORM_MPS).abs()
            } else {
                0.0
            };
            Ok((control, speed))
        })
        .collect();
    let n = batch.len() as f64;
    let mut loss = Loss {
        lambda_speed,
        ..Default::default()
    };
    for l in losses {
        let (c, s) = l?;
        loss.control_l1 += c / n;
        loss.speed_l1 += s / n;
    }
    Ok(loss)
}

/// Inference helper: action and predicted speed in m/s.
pub fn predict(
    net: &PolicyNet,
    grid: &[f64],
    speed_mps: f64,
    command: HighLevelCommand,
) -> Result<([f64; 3], f64), ModelError> {
    let cache = net.forward(grid, speed_mps, command, None)?;
    Ok((cache.action, cache.speed_pred_norm * SPEED_NORM_MPS))
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CheckpointMeta {
    pub best_val_loss: f64,
    pub seed_init: u64,
    pub seed_sampling: u64,
    pub iterations: u64,
}

pub fn save_checkpoint(
    path: &Path,
    net: &PolicyNet,
    adam: Option<&AdamState>,
    meta: &CheckpointMeta,
) -> Result<(), ModelError> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = &net.cfg;
    let w32 = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    let w64 = |out: &mut Vec<u8>, v: u64| out.extend_from_slice(&v.to_le_bytes());
    let wf = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&v.to_le_bytes());
    w32(&mut out, cfg.grid_channels as u32);
    w32(&mut out, cfg.grid_h as u32);
    w32(&mut out, cfg.grid_w as u32);
    w32(&mut out, cfg.stage_channels.len() as u32);
    for &c in &cfg.stage_channels {
        w32(&mut out, c as u32);
    }
    out.push(cfg.stem_pool as u8);
    w32(&mut out, cfg.speed_hidden as u32);
    w32(&mut out, cfg.joint_width as u32);
    w32(&mut out, cfg.head_hidden as u32);
    wf(&mut out, cfg.dropout);
    out.push(cfg.with_speed_head as u8);
    w64(&mut out, cfg.config_hash());

    let vars = net.vars();
    w32(&mut out, vars.len() as u32);
    for v in &vars {
        let name = v.name.as_bytes();
        w32(&mut out, name.len() as u32);
        out.extend_from_slice(name);
        w32(&mut out, v.shape.len() as u32);
        for &d in &v.shape {
            w32(&mut out, d as u32);
        }
        for &x in &v.w {
            wf(&mut out, x);
        }
    }

    match adam {
        Some(a) => {
            out.push(1);
            w64(&mut out, a.step);
            wf(&mut out, a.lr);
            for (m, v) in a.m.iter().zip(a.v.iter()) {
                for &x in m {
                    wf(&mut out, x);
                }
                for &x in v {
                    wf(&mut out, x);
                }
            }
        }
        None => out.push(0),
    }

    wf(&mut out, meta.best_val_loss);
    w64(&mut out, meta.seed_init);
    w64(&mut out, meta.seed_sampling);
    w64(&mut out, meta.iterations);

    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(PolicyNet, Option<AdamState>, CheckpointMeta), ModelError> {
    let data = std::fs::read(path)?;
    let mut r = ByteReader::new(&data);
    let magic = r.bytes(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Parse("bad checkpoint magic".into()));
    }
    let grid_channels = r.u32()? as usize;
    let grid_h = r.u32()? as usize;
    let grid_w = r.u32()? as usize;
    let n_stages = r.u32()? as usize;
    let mut stage_channels = Vec::with_capacity(n_stages);
    for _ in 0..n_stages {
        stage_channels.push(r.u32()? as usize);
    }
    let stem_pool = r.u8()? != 0;
    let speed_hidden = r.u32()? as usize;
    let joint_width = r.u32()? as usize;
    let head_hidden = r.u32()? as usize;
    let dropout = r.f64()?;
    let with_speed_head = r.u8()? != 0;
    let cfg = NetConfig {
        grid_channels,
        grid_h,
        grid_w,
        stage_channels,
        stem_pool,
        speed_hidden,
        joint_width,
        head_hidden,
        dropout,
        with_speed_head,
    };
    let stored_hash = r.u64()?;
    if stored_hash != cfg.config_hash() {
        return Err(ModelError::Parse("config hash mismatch".into()));
    }

    let mut net = PolicyNet::new(&cfg, 0);
    let n_vars = r.u32()? as usize;
    {
        let mut vars = net.vars_mut();
        if n_vars != vars.len() {
            return Err(ModelError::Parse(format!(
                "checkpoint holds {n_vars} tensors, net has {}",
                vars.len()
            )));
        }
        for v in vars.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?.to_vec())
                .map_err(|_| ModelError::Parse("bad tensor name".into()))?;
            if name != v.name {
                return Err(ModelError::Parse(format!(
                    "tensor order mismatch: {name} vs {}",
                    v.name
                )));
            }
            let n_dims = r.u32()? as usize;
            let mut shape = Vec::with_capacity(n_dims);
            for _ in 0..n_dims {
                shape.push(r.u32()? as usize);
            }
            if shape != v.shape {
                return Err(ModelError::Parse(format!("shape mismatch for {name}")));
            }
            for x in v.w.iter_mut() {
                *x = r.f64()?;
            }
        }
    }

    let adam = if r.u8()? == 1 {
        let step = r.u64()?;
        let lr = r.f64()?;
        let mut a = AdamState::new(&net.vars(), lr);
        a.step = step;
        for i in 0..a.m.len() {
            for x in a.m[i].iter_mut() {
                *x = r.f64()?;
            }
            for x in a.v[i].iter_mut() {
                *x = r.f64()?;
            }
        }
        Some(a)
    } else {
        None
    };

    let meta = CheckpointMeta {
        best_val_loss: r.f64()?,
        seed_init: r.u64()?,
        seed_sampling: r.u64()?,
        iterations: r.u64()?,
    };
    Ok((net, adam, meta))
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.data.len() {
            return Err(ModelError::Parse("checkpoint truncated".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_sample(seed: u64, command: HighLevelCommand) -> NetSample {
        let cfg = NetConfig::gradcheck_tiny();
        let mut rng = SimRng::new(seed);
        NetSample {
            grid: (0..cfg.grid_len()).map(|_| rng.uniform()).collect(),
            speed_mps: rng.uniform_in(0.0, 10.0),
            command,
            target_action: [rng.uniform_in(-1.0, 1.0), rng.uniform(), rng.uniform()],
        }
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        let cfg = NetConfig::gradcheck_tiny();
        let net = PolicyNet::new(&cfg, 42);
        let zero = vec![0.0; cfg.grid_len()];
        let (a, v) = predict(&net, &zero, 0.0, HighLevelCommand::LaneFollow).unwrap();
        assert!(a.iter().all(|x| x.is_finite()));
        assert!(v.is_finite());
        let net2 = PolicyNet::new(&cfg, 42);
        let (a2, v2) = predict(&net2, &zero, 0.0, HighLevelCommand::LaneFollow).unwrap();
        assert_eq!(a, a2);
        assert_eq!(v, v2);
    }

    #[test]
    fn action_ranges_respect_activations() {
        let cfg = NetConfig::gradcheck_tiny();
        let net = PolicyNet::new(&cfg, 1);
        let s = tiny_sample(5, HighLevelCommand::TurnRight);
        let (a, _) = predict(&net, &s.grid, s.speed_mps, s.command).unwrap();
        assert!((-1.0..=1.0).contains(&a[0]));
        assert!((0.0..=1.0).contains(&a[1]));
        assert!((0.0..=1.0).contains(&a[2]));
    }

    #[test]
    fn heads_share_backbone_but_differ() {
        let cfg = NetConfig::gradcheck_tiny();
        let net = PolicyNet::new(&cfg, 7);
        let s = tiny_sample(9, HighLevelCommand::LaneFollow);
        let c1 = net
            .forward(&s.grid, s.speed_mps, HighLevelCommand::LaneFollow, None)
            .unwrap();
        let c2 = net
            .forward(&s.grid, s.speed_mps, HighLevelCommand::TurnLeft, None)
            .unwrap();
        assert_eq!(c1.latent, c2.latent);
        assert_ne!(c1.action, c2.action);
    }

    #[test]
    fn inactive_head_parameters_do_not_affect_output() {
        let cfg = NetConfig::gradcheck_tiny();
        let mut net = PolicyNet::new(&cfg, 7);
        let s = tiny_sample(11, HighLevelCommand::LaneFollow);
        let (before, _) = predict(&net, &s.grid, s.speed_mps, s.command).unwrap();
        // Perturb the TurnRight head heavily.
        let right = HighLevelCommand::TurnRight.head_index();
        for l in net.heads[right].iter_mut() {
            for w in l.w.w.iter_mut() {
                *w += 10.0;
            }
        }
        let (after, _) = predict(&net, &s.grid, s.speed_mps, s.command).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn residual_blocks_are_identity_at_zero_weights() {
        let cfg = NetConfig::gradcheck_tiny();
        let mut net = PolicyNet::new(&cfg, 3);
        for b in net.blocks.iter_mut() {
            for v in [&mut b.c1.w, &mut b.c1.b, &mut b.c2.w, &mut b.c2.b] {
                for x in v.w.iter_mut() {
                    *x = 0.0;
                }
            }
        }
        let s = tiny_sample(13, HighLevelCommand::GoStraight);
        let cache = net.forward(&s.grid, s.speed_mps, s.command, None).unwrap();
        // With zero block weights, each stage output equals its input; check
        // the first stage against the stem activation.
        let stage0 = &cache.blocks[0].3;
        let stem_ref: &Vec<f64> = cache.stem_pooled.as_ref().unwrap_or(&cache.stem_out);
        assert_eq!(stage0, stem_ref);
    }

    #[test]
    fn zero_grad_when_prediction_matches_target() {
        let cfg = NetConfig::gradcheck_tiny();
        let net = PolicyNet::new(&cfg, 21);
        let mut s = tiny_sample(23, HighLevelCommand::LaneFollow);
        // Use the net's own outputs as targets: control gradients vanish.
        let cache = net.forward(&s.grid, s.speed_mps, s.command, None).unwrap();
        s.target_action = cache.action;
        let mut probe = net.clone();
        probe.cfg.dropout = 0.0;
        let (loss, grads) = loss_and_grads(&probe, &[s], 0.0, 99).unwrap();
        assert!(loss.control_l1.abs() < 1e-12);
        for g in &grads.by_slot {
            for &x in g {
                assert_eq!(x, 0.0);
            }
        }
    }

    #[test]
    fn lambda_zero_leaves_speed_head_untouched() {
        let cfg = NetConfig::gradcheck_tiny();
        let mut net = PolicyNet::new(&cfg, 31);
        net.cfg.dropout = 0.0;
        let s = tiny_sample(33, HighLevelCommand::TurnLeft);
        let (_, grads) = loss_and_grads(&net, &[s], 0.0, 7).unwrap();
        for l in net.speed_head.as_ref().unwrap() {
            for g in &grads.by_slot[l.w.slot] {
                assert_eq!(*g, 0.0);
            }
            for g in &grads.by_slot[l.b.slot] {
                assert_eq!(*g, 0.0);
            }
        }
    }

    #[test]
    fn l1_subgradient_at_zero_is_zero() {
        assert_eq!(l1_grad(0.0), 0.0);
        assert_eq!(l1_grad(1e-30), 1.0);
        assert_eq!(l1_grad(-1e-30), -1.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = NetConfig::gradcheck_tiny();
        let net = PolicyNet::new(&cfg, 77);
        let vars = net.vars();
        let mut adam = AdamState::new(&vars, 2e-4);
        adam.step = 17;
        for m in adam.m.iter_mut() {
            for x in m.iter_mut() {
                *x = 0.5;
            }
        }
        let meta = CheckpointMeta {
            best_val_loss: 0.125,
            seed_init: 1,
            seed_sampling: 2,
            iterations: 500,
        };
        let dir = std::env::temp_dir().join(format!("dl-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        save_checkpoint(&path, &net, Some(&adam), &meta).unwrap();
        let (net2, adam2, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(net, net2);
        let adam2 = adam2.unwrap();
        assert_eq!(adam.step, adam2.step);
        assert_eq!(adam.m, adam2.m);
        assert_eq!(adam.v, adam2.v);
        assert_eq!(meta, meta2);
        // Same bytes when saved again.
        let path2 = dir.join("net2.ckpt");
        save_checkpoint(&path2, &net2, Some(&adam2), &meta2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn cilr_variant_has_no_speed_head() {
        let mut cfg = NetConfig::gradcheck_tiny();
        cfg.with_speed_head = false;
        let net = PolicyNet::new(&cfg, 5);
        assert!(net.speed_head.is_none());
        let s = tiny_sample(50, HighLevelCommand::LaneFollow);
        let (_, v) = predict(&net, &s.grid, s.speed_mps, s.command).unwrap();
        assert_eq!(v, 0.0);
    }
}
