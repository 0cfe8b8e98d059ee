//! SGD trainer, learning-rate schedule, evaluation, and the sampling-rate
//! robustness sweep.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::blocks::Variant;
use crate::data::{
    argmax, average_view_scores, eval_views, gen_tempo_dataset, strided_span, SampleMode, SamplerConfig, SyntheticTempoSpec,
    VideoSource, TEMPO_CLASSES,
};
use crate::error::{Error, Result};
use crate::net::{ArchGraph, VoV3D};
use crate::ops::layers::{NamedMut, Parameterized};
use crate::ops::{softmax_cross_entropy, Mode};
use crate::tensor::{Rng, Tensor5};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    pub warmup_start_lr: f64,
    pub seed: u64,
    pub sampler: SamplerConfig,
    /// Directory for per-epoch checkpoints; none when unset.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale preset used by the synthetic benchmark.
    pub fn desk() -> Self {
        Self {
            base_lr: 0.05,
            epochs: 10,
            batch_size: 8,
            momentum: 0.9,
            weight_decay: 5e-5,
            warmup_iters: 32,
            warmup_start_lr: 0.005,
            seed: 0,
            sampler: SamplerConfig::strided(8, 2, true),
            checkpoint_dir: None,
        }
    }

    /// Full-scale values for reference; not runnable at desk scale.
    pub fn full_scale() -> Self {
        Self {
            base_lr: 0.1,
            epochs: 100,
            batch_size: 64,
            warmup_iters: 1000,
            warmup_start_lr: 0.01,
            sampler: SamplerConfig::segment(16, true),
            ..Self::desk()
        }
    }

    pub fn validate(&self, total_iters: usize) -> Result<()> {
        if self.base_lr <= 0.0 || self.warmup_start_lr <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig("learning rates must be > 0; momentum and decay >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be >= 1".into()));
        }
        if self.warmup_iters >= total_iters {
            return Err(Error::InvalidConfig(format!("warmup {} >= total iterations {total_iters}", self.warmup_iters)));
        }
        self.sampler.validate()
    }
}

/// Linear warmup, then half-period cosine decay reaching 0 at the last
/// iteration.
pub fn lr_at(iter: usize, total_iters: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_iters;
    if iter < w {
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * iter as f64 / w as f64;
    }
    let span = total_iters.saturating_sub(w + 1).max(1);
    let progress = ((iter - w) as f64 / span as f64).min(1.0);
    0.5 * cfg.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Momentum SGD with decoupled velocity buffers, one per learnable entry in
/// registry order.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// `v <- m v + g + wd w; w <- w - lr v`. Normalization affine parameters
    /// skip weight decay; buffers are untouched.
    pub fn step(&mut self, params: Vec<NamedMut<'_>>, lr: f64) -> Result<()> {
        let learnable: Vec<_> = params.into_iter().filter(|p| p.kind.learnable()).collect();
        if self.velocity.is_empty() {
            self.velocity = learnable.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        }
        if self.velocity.len() != learnable.len() {
            return Err(Error::InvalidConfig("parameter set changed between steps".into()));
        }
        for (p, v) in learnable.into_iter().zip(&mut self.velocity) {
            if v.len() != p.tensor.len() {
                return Err(Error::InvalidConfig(format!("velocity size mismatch for `{}`", p.name)));
            }
            let wd = if p.kind.decays() { self.weight_decay } else { 0.0 };
            let grad = p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; v.len()]);
            for ((w, vi), g) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(grad) {
                *vi = self.momentum * *vi + g + wd * *w;
                *w -= lr * *vi;
            }
            p.tensor.ensure_finite("sgd_step")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_top1: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub tau: usize,
    pub top1: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub model: String,
    pub config: TrainConfig,
    pub iters: Vec<IterLog>,
    pub epochs: Vec<EpochLog>,
    pub robustness: Vec<RobustnessRow>,
}

impl RunLog {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn final_val_top1(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.val_top1)
    }
}

/// Per-item sampling stream so results do not depend on batch layout.
fn item_rng(seed: u64, epoch: usize, item: usize) -> Rng {
    Rng::new(seed).fork(((epoch as u64 + 1) << 32) | item as u64)
}

pub fn train_loop(model: &mut VoV3D, train: &[VideoSource], val: &[VideoSource], cfg: &TrainConfig) -> Result<RunLog> {
    if train.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    cfg.validate(total)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut order_rng = Rng::new(cfg.seed).fork(u64::MAX);
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log =
        RunLog { model: model.graph.name.clone(), config: cfg.clone(), iters: Vec::new(), epochs: Vec::new(), robustness: Vec::new() };
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let clips = batch
                .iter()
                .map(|&i| {
                    let v = &train[i];
                    v.clip(&cfg.sampler.indices(v.length, &mut item_rng(cfg.seed, epoch, i))?)
                })
                .collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].label).collect();
            let x = Tensor5::stack_batch(&clips)?;
            let lr = lr_at(iter, total, cfg);
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            model.zero_grad();
            model.backward(&dlogits)?;
            let mut params = Vec::new();
            model.collect_mut("", &mut params);
            sgd.step(params, lr)?;
            hits += logits.data().chunks(logits.shape().c).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
            loss_sum += loss * batch.len() as f64;
            log.iters.push(IterLog { iter, lr, loss });
            iter += 1;
        }
        let val_top1 = if val.is_empty() { 0.0 } else { evaluate(model, val, &cfg.sampler.eval(), 1, 1)? };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: loss_sum / train.len() as f64,
            train_top1: hits as f64 / train.len() as f64,
            val_top1,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            model.weights().save(dir.join(format!("epoch{epoch:03}.weights")))?;
        }
    }
    Ok(log)
}

/// Top-1 accuracy with `clips x crops` views per video and softmax
/// averaging.
pub fn evaluate(model: &VoV3D, videos: &[VideoSource], sampler: &SamplerConfig, clips: usize, crops: usize) -> Result<f64> {
    if videos.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let preds = predict(model, videos, sampler, clips, crops)?;
    let hits = preds.iter().zip(videos).filter(|(p, v)| argmax(p) == v.label).count();
    Ok(hits as f64 / videos.len() as f64)
}

/// Averaged class distribution per video.
pub fn predict(
    model: &VoV3D,
    videos: &[VideoSource],
    sampler: &SamplerConfig,
    clips: usize,
    crops: usize,
) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 8;
    let mut views = Vec::new();
    for v in videos {
        views.extend(eval_views(v, sampler, clips, crops)?);
    }
    let mut logits = Vec::with_capacity(views.len());
    for chunk in views.chunks(CHUNK) {
        let y = model.infer(&Tensor5::stack_batch(chunk)?)?;
        for i in 0..chunk.len() {
            logits.push(y.slice_batch(i, 1)?);
        }
    }
    logits
        .chunks(clips * crops)
        .map(|per_video| average_view_scores(&Tensor5::stack_batch(per_video)?))
        .collect()
}

/// Accuracy at each test stride; `drop` is relative to `tau_train`.
pub fn robustness_sweep(
    model: &VoV3D,
    videos: &[VideoSource],
    num_frames: usize,
    taus: &[usize],
    tau_train: usize,
) -> Result<Vec<RobustnessRow>> {
    let acc = |tau: usize| evaluate(model, videos, &SamplerConfig::strided(num_frames, tau, false), 1, 1);
    let base = acc(tau_train)?;
    taus.iter()
        .map(|&tau| {
            let top1 = if tau == tau_train { base } else { acc(tau)? };
            Ok(RobustnessRow { tau, top1, drop: if tau == tau_train { 0.0 } else { base - top1 } })
        })
        .collect()
}

/// Mean drop over rows whose stride differs from `tau_train`.
pub fn mean_shifted_drop(rows: &[RobustnessRow], tau_train: usize) -> f64 {
    let shifted: Vec<_> = rows.iter().filter(|r| r.tau != tau_train).collect();
    if shifted.is_empty() {
        return 0.0;
    }
    shifted.iter().map(|r| r.drop).sum::<f64>() / shifted.len() as f64
}

/// End-to-end desk run: tiny network, synthetic tempo data, training and
/// the stride sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub variant: Variant,
    /// Replaces the number of modules per T-OSA when set.
    pub inner_modules: Option<usize>,
    /// Sets every temporal kernel to 1.
    pub spatial_only: bool,
    pub train_videos: usize,
    pub val_videos: usize,
    /// Test strides for the sweep; the training stride is taken from the
    /// sampler.
    pub taus: Vec<usize>,
    pub data: SyntheticTempoSpec,
    pub train: TrainConfig,
}

impl DemoConfig {
    pub fn desk() -> Self {
        Self {
            variant: Variant::D21d,
            inner_modules: None,
            spatial_only: false,
            train_videos: 256,
            val_videos: 64,
            taus: vec![1, 2, 3, 4],
            data: SyntheticTempoSpec { square: 24, noise: 0.05, edge: 6.0, ..SyntheticTempoSpec::default() },
            train: TrainConfig::desk(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.sampler.validate()?;
        if self.train_videos == 0 || self.val_videos == 0 {
            return Err(Error::InvalidConfig("dataset sizes must be positive".into()));
        }
        if self.train.sampler.mode != SampleMode::Strided {
            return Err(Error::InvalidConfig("the stride sweep needs a strided sampler".into()));
        }
        let widest = self.taus.iter().copied().max().unwrap_or(1).max(self.train.sampler.stride);
        if strided_span(self.train.sampler.num_frames, widest) > self.data.length {
            return Err(Error::InvalidConfig(format!("videos of {} frames cannot hold stride {widest}", self.data.length)));
        }
        self.graph().validate()
    }

    pub fn graph(&self) -> ArchGraph {
        let mut g = ArchGraph::tiny(self.variant, TEMPO_CLASSES);
        if let Some(n) = self.inner_modules {
            g = g.with_inner_modules(n);
        }
        if self.spatial_only {
            g = g.spatial_only();
        }
        g
    }

    /// Training and held-out sets; the held-out seed is derived from the
    /// data seed.
    pub fn datasets(&self) -> Result<(Vec<VideoSource>, Vec<VideoSource>)> {
        let train = gen_tempo_dataset(&self.data, self.train_videos)?;
        let held_out = SyntheticTempoSpec { seed: Rng::new(self.data.seed).fork(1).below(usize::MAX) as u64, ..self.data };
        Ok((train, gen_tempo_dataset(&held_out, self.val_videos)?))
    }
}

/// Builds, trains and sweeps; the returned log includes the stride table.
pub fn run_demo(cfg: &DemoConfig) -> Result<(VoV3D, RunLog)> {
    cfg.validate()?;
    let (train, val) = cfg.datasets()?;
    let mut model = VoV3D::build(cfg.graph(), &mut Rng::new(cfg.train.seed).fork(0))?;
    let mut log = train_loop(&mut model, &train, &val, &cfg.train)?;
    let s = cfg.train.sampler;
    log.robustness = robustness_sweep(&model, &val, s.num_frames, &cfg.taus, s.stride)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::layers::ParamKind;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig { warmup_iters: 10, warmup_start_lr: 0.01, base_lr: 0.1, ..TrainConfig::desk() };
        assert_eq!(lr_at(0, 100, &cfg), 0.01);
        assert_eq!(lr_at(10, 100, &cfg), 0.1);
        assert!(lr_at(99, 100, &cfg).abs() < 1e-12);
        assert!((lr_at(10, 100, &cfg) - lr_at(9, 100, &cfg) - 0.009).abs() < 1e-12);
    }

    #[test]
    fn scalar_step() {
        let mut w = Tensor5::fill((1, 1, 1, 1, 1), 1.0).unwrap().requires_grad();
        w.grad_mut()[0] = 1.0;
        let mut sgd = Sgd::new(0.0, 0.0);
        sgd.step(vec![NamedMut { name: "w".into(), kind: ParamKind::Weight, tensor: &mut w }], 0.1).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
    }
}
