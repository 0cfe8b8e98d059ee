//! Clip sampling, the synthetic visual-tempo dataset, and multi-view
//! evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{gemm, softmax};
use crate::tensor::{Rng, Shape5, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Segment,
    Strided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SampleMode,
    pub num_frames: usize,
    pub stride: usize,
    /// Random pick (train) instead of the deterministic centre (eval).
    pub jitter: bool,
}

impl SamplerConfig {
    pub fn segment(num_frames: usize, jitter: bool) -> Self {
        Self { mode: SampleMode::Segment, num_frames, stride: 1, jitter }
    }

    pub fn strided(num_frames: usize, stride: usize, jitter: bool) -> Self {
        Self { mode: SampleMode::Strided, num_frames, stride, jitter }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frames == 0 || self.stride == 0 {
            return Err(Error::InvalidConfig("num_frames and stride must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eval(self) -> Self {
        Self { jitter: false, ..self }
    }

    /// Frame indices for a video of `len` frames.
    pub fn indices(&self, len: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        self.validate()?;
        if len == 0 {
            return Err(Error::InvalidConfig("video has no frames".into()));
        }
        Ok(match self.mode {
            SampleMode::Segment => segment_indices(len, self.num_frames, self.jitter.then_some(rng)),
            SampleMode::Strided => {
                let start = if self.jitter {
                    rng.below(max_strided_start(len, self.num_frames, self.stride) + 1)
                } else {
                    centered_start(len, self.num_frames, self.stride)
                };
                strided_indices(len, self.num_frames, self.stride, start)
            }
        })
    }
}

/// One index per equal real-valued segment `[i L / n, (i + 1) L / n)`:
/// the floored midpoint, or a uniform draw when `rng` is given.
pub fn segment_indices(len: usize, n: usize, mut rng: Option<&mut Rng>) -> Vec<usize> {
    (0..n)
        .map(|i| {
            let u = rng.as_mut().map_or(0.5, |r| r.uniform());
            let pos = len as f64 * (i as f64 + u) / n as f64;
            (pos.floor() as usize).min(len - 1)
        })
        .collect()
}

pub fn strided_span(n: usize, stride: usize) -> usize {
    (n - 1) * stride + 1
}

pub fn max_strided_start(len: usize, n: usize, stride: usize) -> usize {
    len.saturating_sub(strided_span(n, stride))
}

pub fn centered_start(len: usize, n: usize, stride: usize) -> usize {
    max_strided_start(len, n, stride) / 2
}

pub fn strided_indices(len: usize, n: usize, stride: usize, start: usize) -> Vec<usize> {
    (0..n).map(|j| (start + j * stride).min(len - 1)).collect()
}

/// Parameters of one procedurally rendered tempo clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TempoClip {
    pub direction: usize,
    pub speed: usize,
    pub x0: usize,
    pub y0: usize,
    pub color: [f64; 3],
    pub noise_seed: u64,
}

#[derive(Debug, Clone)]
enum Frames {
    /// `(1, 3, L, H, W)`.
    Stored(Tensor5),
    Tempo(SyntheticTempoSpec, TempoClip),
}

/// A labelled video; frames are `(3, H, W)` images in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VideoSource {
    pub label: usize,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    frames: Frames,
}

impl VideoSource {
    pub fn from_frames(frames: Tensor5, label: usize) -> Result<Self> {
        let s = frames.shape();
        if s.n != 1 || s.c != 3 || s.t == 0 {
            return Err(Error::InvalidConfig(format!("video tensor must be (1, 3, L >= 1, H, W), got {s}")));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("frame values must lie in [0, 1]".into()));
        }
        Ok(Self { label, length: s.t, height: s.h, width: s.w, frames: Frames::Stored(frames) })
    }

    /// Frame `i` as a flat `3 x H x W` buffer.
    pub fn frame(&self, i: usize) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        match &self.frames {
            Frames::Stored(t) => {
                let mut out = Vec::with_capacity(3 * h * w);
                for c in 0..3 {
                    let off = t.offset(0, c, i, 0, 0);
                    out.extend_from_slice(&t.data()[off..off + h * w]);
                }
                out
            }
            Frames::Tempo(spec, clip) => spec.render_frame(clip, i),
        }
    }

    /// Clip `(1, 3, indices.len(), H, W)`.
    pub fn clip(&self, indices: &[usize]) -> Result<Tensor5> {
        let (h, w) = (self.height, self.width);
        let mut out = Tensor5::zeros(Shape5::new(1, 3, indices.len(), h, w))?;
        for (j, &i) in indices.iter().enumerate() {
            if i >= self.length {
                return Err(Error::InvalidConfig(format!("frame {i} out of range for length {}", self.length)));
            }
            let f = self.frame(i);
            for c in 0..3 {
                let off = out.offset(0, c, j, 0, 0);
                out.data_mut()[off..off + h * w].copy_from_slice(&f[c * h * w..(c + 1) * h * w]);
            }
        }
        Ok(out)
    }

    /// Whole video as `(1, 3, L, H, W)`.
    pub fn to_tensor(&self) -> Result<Tensor5> {
        self.clip(&(0..self.length).collect::<Vec<_>>())
    }

    pub fn tempo_params(&self) -> Option<&TempoClip> {
        match &self.frames {
            Frames::Tempo(_, c) => Some(c),
            Frames::Stored(_) => None,
        }
    }
}

pub fn sample_segments(video: &VideoSource, num_frames: usize, jitter: bool, rng: &mut Rng) -> Result<Tensor5> {
    let idx = SamplerConfig::segment(num_frames, jitter).indices(video.length, rng)?;
    video.clip(&idx)
}

pub fn sample_strided(video: &VideoSource, config: &SamplerConfig, rng: &mut Rng) -> Result<Tensor5> {
    let idx = SamplerConfig { mode: SampleMode::Strided, ..*config }.indices(video.length, rng)?;
    video.clip(&idx)
}

pub const TEMPO_DIRECTIONS: usize = 4;
pub const TEMPO_SPEEDS: [usize; 2] = [1, 2];
pub const TEMPO_CLASSES: usize = TEMPO_DIRECTIONS * TEMPO_SPEEDS.len();

/// Bright square moving with wraparound over a noisy background. The label
/// is `direction * 2 + (speed - 1)`; directions are right, left, down, up.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTempoSpec {
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub square: usize,
    pub noise: f64,
    pub background: f64,
    /// Width in pixels of the linear ramp at the square's border; 0 gives
    /// hard edges.
    #[serde(default)]
    pub edge: f64,
    pub seed: u64,
}

impl Default for SyntheticTempoSpec {
    fn default() -> Self {
        Self { length: 32, height: 112, width: 112, square: 16, noise: 0.1, background: 0.2, edge: 0.0, seed: 0 }
    }
}

/// Fraction of pixel `i` covered by the interval `[start, start + len)` on a
/// ring of `n` pixels, with a linear ramp of width `edge`.
fn coverage(i: usize, start: usize, len: usize, n: usize, edge: f64) -> f64 {
    let centre = start as f64 + len as f64 / 2.0;
    let mut d = (i as f64 + 0.5 - centre).rem_euclid(n as f64);
    d = d.min(n as f64 - d);
    let inside = len as f64 / 2.0 - d;
    if edge > 0.0 {
        (0.5 + inside / edge).clamp(0.0, 1.0)
    } else if inside > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl SyntheticTempoSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 || self.square == 0 || self.square > self.height.min(self.width) {
            return Err(Error::InvalidConfig(format!("bad tempo spec {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.background) || self.noise < 0.0 || !(self.edge >= 0.0) {
            return Err(Error::InvalidConfig("background must be in [0, 1], noise and edge >= 0".into()));
        }
        Ok(())
    }

    pub fn label_of(direction: usize, speed: usize) -> usize {
        direction * TEMPO_SPEEDS.len() + (speed - 1)
    }

    pub fn direction_of(label: usize) -> usize {
        label / TEMPO_SPEEDS.len()
    }

    /// Top-left corner of the square in frame `i`.
    pub fn position(&self, clip: &TempoClip, i: usize) -> (usize, usize) {
        let d = clip.speed * i;
        let (h, w) = (self.height, self.width);
        match clip.direction {
            0 => (clip.y0, (clip.x0 + d) % w),
            1 => (clip.y0, (clip.x0 + w - d % w) % w),
            2 => ((clip.y0 + d) % h, clip.x0),
            _ => ((clip.y0 + h - d % h) % h, clip.x0),
        }
    }

    pub fn render_frame(&self, clip: &TempoClip, i: usize) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let mut rng = Rng::new(clip.noise_seed).fork(i as u64);
        let (py, px) = self.position(clip, i);
        let mut out = vec![0.0; 3 * h * w];
        let cov_y: Vec<f64> = (0..h).map(|y| coverage(y, py, self.square, h, self.edge)).collect();
        let cov_x: Vec<f64> = (0..w).map(|x| coverage(x, px, self.square, w, self.edge)).collect();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let base = self.background + cov_y[y] * cov_x[x] * (clip.color[c] - self.background);
                    out[(c * h + y) * w + x] = (base + self.noise * rng.normal()).clamp(0.0, 1.0);
                }
            }
        }
        out
    }

    pub fn video(&self, clip: TempoClip) -> VideoSource {
        VideoSource {
            label: Self::label_of(clip.direction, clip.speed),
            length: self.length,
            height: self.height,
            width: self.width,
            frames: Frames::Tempo(*self, clip),
        }
    }
}

/// Class-balanced (round-robin labels) procedurally rendered dataset.
pub fn gen_tempo_dataset(spec: &SyntheticTempoSpec, count: usize) -> Result<Vec<VideoSource>> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    Ok((0..count)
        .map(|i| {
            let label = i % TEMPO_CLASSES;
            let mut rng = root.fork(i as u64);
            let clip = TempoClip {
                direction: label / TEMPO_SPEEDS.len(),
                speed: TEMPO_SPEEDS[label % TEMPO_SPEEDS.len()],
                x0: rng.below(spec.width),
                y0: rng.below(spec.height),
                color: std::array::from_fn(|_| 0.6 + 0.4 * rng.uniform()),
                noise_seed: rng.below(usize::MAX) as u64,
            };
            spec.video(clip)
        })
        .collect())
}

/// `clips` temporally evenly spaced clips times `crops` square crops along
/// the longer side (left/centre/right for three).
pub fn eval_views(video: &VideoSource, sampler: &SamplerConfig, clips: usize, crops: usize) -> Result<Vec<Tensor5>> {
    sampler.validate()?;
    if clips == 0 || crops == 0 {
        return Err(Error::InvalidConfig("clips and crops must be >= 1".into()));
    }
    let len = video.length;
    let mut views = Vec::with_capacity(clips * crops);
    for j in 0..clips {
        let idx = match sampler.mode {
            SampleMode::Segment => (0..sampler.num_frames)
                .map(|i| {
                    let pos = len as f64 * (i as f64 + (j as f64 + 0.5) / clips as f64) / sampler.num_frames as f64;
                    (pos.floor() as usize).min(len - 1)
                })
                .collect::<Vec<_>>(),
            SampleMode::Strided => {
                let max = max_strided_start(len, sampler.num_frames, sampler.stride);
                let start = if clips == 1 { max / 2 } else { (max * j + (clips - 1) / 2) / (clips - 1) };
                strided_indices(len, sampler.num_frames, sampler.stride, start)
            }
        };
        let clip = video.clip(&idx)?;
        for k in 0..crops {
            views.push(crop_square(&clip, k, crops)?);
        }
    }
    Ok(views)
}

fn crop_square(clip: &Tensor5, k: usize, crops: usize) -> Result<Tensor5> {
    let s = clip.shape();
    let side = s.h.min(s.w);
    let slack = s.h.max(s.w) - side;
    let off = if crops == 1 { slack / 2 } else { slack * k / (crops - 1) };
    let (oy, ox) = if s.h > s.w { (off, 0) } else { (0, off) };
    let mut out = Tensor5::zeros(Shape5::new(s.n, s.c, s.t, side, side))?;
    for n in 0..s.n {
        for c in 0..s.c {
            for t in 0..s.t {
                for y in 0..side {
                    let src = clip.offset(n, c, t, oy + y, ox);
                    let dst = out.offset(n, c, t, y, 0);
                    out.data_mut()[dst..dst + side].copy_from_slice(&clip.data()[src..src + side]);
                }
            }
        }
    }
    Ok(out)
}

/// Mean of per-view softmax scores; `logits` is `(V, K, 1, 1, 1)`.
pub fn average_view_scores(logits: &Tensor5) -> Result<Vec<f64>> {
    let p = softmax(logits)?;
    let (v, k) = (logits.shape().n, logits.shape().c);
    let mut avg = vec![0.0; k];
    for row in p.data().chunks(k) {
        avg.iter_mut().zip(row).for_each(|(a, b)| *a += b / v as f64);
    }
    Ok(avg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub label: usize,
    pub length: usize,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Writes each video as a tensor file plus a TOML manifest.
pub fn export_dataset(videos: &[VideoSource], dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(videos.len());
    for (id, v) in videos.iter().enumerate() {
        let file = format!("clip_{id:05}.bin");
        v.to_tensor()?.save(dir.join(&file))?;
        entries.push(ManifestEntry { id, label: v.label, length: v.length, file });
    }
    let manifest = Manifest { videos: entries };
    std::fs::write(dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
    Ok(manifest)
}

pub fn import_dataset(dir: impl AsRef<Path>) -> Result<Vec<VideoSource>> {
    let dir = dir.as_ref();
    let manifest: Manifest = toml::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    manifest
        .videos
        .iter()
        .map(|e| {
            let v = VideoSource::from_frames(Tensor5::load(dir.join(&e.file))?, e.label)?;
            if v.length != e.length {
                return Err(Error::Format(format!("{}: manifest length {} != {}", e.file, e.length, v.length)));
            }
            Ok(v)
        })
        .collect()
}

/// Single-frame multinomial logistic regression on average-pooled pixels.
#[derive(Debug, Clone)]
pub struct FrameProbe {
    pub pool: usize,
    pub classes: usize,
    weights: Vec<f64>,
    dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub chance: f64,
    pub samples: usize,
}

fn pooled_features(frame: &[f64], h: usize, w: usize, pool: usize) -> Vec<f64> {
    let (ph, pw) = (h / pool, w / pool);
    let mut f = vec![0.0; 3 * ph * pw + 1];
    let norm = 1.0 / (pool * pool) as f64;
    for c in 0..3 {
        for y in 0..ph * pool {
            for x in 0..pw * pool {
                f[(c * ph + y / pool) * pw + x / pool] += frame[(c * h + y) * w + x] * norm;
            }
        }
    }
    f[3 * ph * pw] = 1.0;
    f
}

impl FrameProbe {
    /// Fits on one random frame per video with full-batch gradient descent.
    pub fn fit(
        videos: &[VideoSource],
        label_of: impl Fn(&VideoSource) -> usize,
        classes: usize,
        pool: usize,
        iters: usize,
        rng: &mut Rng,
    ) -> Result<(Self, f64)> {
        let (x, y, dim) = Self::design(videos, &label_of, pool, rng)?;
        let n = y.len();
        let mut w = vec![0.0; dim * classes];
        let mut logits = vec![0.0; n * classes];
        let mut grad = vec![0.0; dim * classes];
        let lr = 0.5;
        let l2 = 1e-3;
        for _ in 0..iters {
            gemm(n, dim, classes, 1.0, &x, false, &w, false, 0.0, &mut logits);
            for (row, &label) in logits.chunks_mut(classes).zip(&y) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                row.iter_mut().for_each(|v| *v = (*v - max).exp() / z / n as f64);
                row[label] -= 1.0 / n as f64;
            }
            gemm(dim, n, classes, 1.0, &x, true, &logits, false, 0.0, &mut grad);
            for (wi, gi) in w.iter_mut().zip(&grad) {
                *wi -= lr * (gi + l2 * *wi);
            }
        }
        let probe = Self { pool, classes, weights: w, dim };
        let acc = probe.accuracy_on(&x, &y);
        Ok((probe, acc))
    }

    fn design(
        videos: &[VideoSource],
        label_of: &impl Fn(&VideoSource) -> usize,
        pool: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, Vec<usize>, usize)> {
        if videos.is_empty() || pool == 0 {
            return Err(Error::InvalidConfig("probe needs videos and pool >= 1".into()));
        }
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut dim = 0;
        for v in videos {
            let f = pooled_features(&v.frame(rng.below(v.length)), v.height, v.width, pool);
            dim = f.len();
            x.extend(f);
            y.push(label_of(v));
        }
        Ok((x, y, dim))
    }

    fn accuracy_on(&self, x: &[f64], y: &[usize]) -> f64 {
        let n = y.len();
        let mut logits = vec![0.0; n * self.classes];
        gemm(n, self.dim, self.classes, 1.0, x, false, &self.weights, false, 0.0, &mut logits);
        let hits = logits.chunks(self.classes).zip(y).filter(|(row, &l)| argmax(row) == l).count();
        hits as f64 / n as f64
    }

    pub fn accuracy(&self, videos: &[VideoSource], label_of: impl Fn(&VideoSource) -> usize, rng: &mut Rng) -> Result<f64> {
        let (x, y, _) = Self::design(videos, &label_of, self.pool, rng)?;
        Ok(self.accuracy_on(&x, &y))
    }
}

/// Trains a probe on `train` and scores it on held-out `test`.
pub fn single_frame_probe(
    train: &[VideoSource],
    test: &[VideoSource],
    label_of: impl Fn(&VideoSource) -> usize + Copy,
    classes: usize,
    rng: &mut Rng,
) -> Result<ProbeReport> {
    let (probe, train_accuracy) = FrameProbe::fit(train, label_of, classes, 4, 300, rng)?;
    let test_accuracy = probe.accuracy(test, label_of, rng)?;
    Ok(ProbeReport { train_accuracy, test_accuracy, chance: 1.0 / classes as f64, samples: test.len() })
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_centres() {
        assert_eq!(
            segment_indices(100, 16, None),
            [3, 9, 15, 21, 28, 34, 40, 46, 53, 59, 65, 71, 78, 84, 90, 96]
        );
        assert_eq!(segment_indices(16, 16, None), (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn soft_edges_keep_mass() {
        for start in [0, 5, 100] {
            let hard: Vec<f64> = (0..112).map(|i| coverage(i, start, 24, 112, 0.0)).collect();
            assert_eq!(hard.iter().sum::<f64>(), 24.0);
            assert_eq!(hard[(start + 23) % 112], 1.0);
            assert_eq!(hard[(start + 24) % 112], 0.0);
            let soft: f64 = (0..112).map(|i| coverage(i, start, 24, 112, 6.0)).sum();
            assert!((soft - 24.0).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_clamps() {
        assert_eq!(strided_indices(80, 16, 5, 0), (0..16).map(|i| i * 5).collect::<Vec<_>>());
        assert_eq!(*strided_indices(40, 16, 5, 0).last().unwrap(), 39);
        assert_eq!(centered_start(100, 16, 5), (100 - 76) / 2);
    }

    #[test]
    fn square_moves_right_one_column_per_frame() {
        let spec = SyntheticTempoSpec { noise: 0.0, height: 20, width: 20, square: 4, ..Default::default() };
        let clip = TempoClip { direction: 0, speed: 1, x0: 3, y0: 5, color: [1.0; 3], noise_seed: 0 };
        let v = spec.video(clip);
        for i in 0..5 {
            let f = v.frame(i);
            let col = (0..20).position(|x| f[5 * 20 + x] == 1.0).unwrap();
            assert_eq!(col, 3 + i);
        }
    }

    #[test]
    fn views_are_distributions() {
        let l = Tensor5::from_vec((2, 3, 1, 1, 1), vec![1.0, 0.0, -1.0, 3.0, 2.0, 0.5]).unwrap();
        let p = average_view_scores(&l).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
