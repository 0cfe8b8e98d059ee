//! Squeeze-and-excitation channel gating.

use super::linear::Linear;
use super::pool::{global_avg_pool, global_avg_pool_backward};
use crate::error::{Error, Result};
use crate::tensor::{relu, relu_grad, sigmoid, sigmoid_grad, Rng, Tensor5};

/// Bottleneck width for `channels` at `ratio`: `max(1, round(C * ratio))`.
pub fn se_reduced_width(channels: usize, ratio: f64) -> usize {
    ((channels as f64 * ratio).round() as usize).max(1)
}

#[derive(Debug, Clone)]
pub struct SeWeights {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeWeights {
    pub fn new(channels: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        let r = se_reduced_width(channels, ratio);
        Ok(Self { fc1: Linear::new(channels, r, rng)?, fc2: Linear::new(r, channels, rng)? })
    }

    pub fn channels(&self) -> usize {
        self.fc1.c_in()
    }

    pub fn param_count(&self) -> u64 {
        self.fc1.param_count() + self.fc2.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct SeCache {
    pub input: Tensor5,
    pub pooled: Tensor5,
    pub z1: Tensor5,
    pub a1: Tensor5,
    pub gate: Tensor5,
}

/// pool -> fc -> relu -> fc -> sigmoid -> channelwise scale.
pub fn se_forward(input: &Tensor5, w: &SeWeights) -> Result<(Tensor5, SeCache)> {
    let s = input.shape();
    if s.c != w.channels() {
        return Err(Error::ChannelMismatch { expected: w.channels(), actual: s.c });
    }
    let pooled = global_avg_pool(input)?;
    let z1 = w.fc1.forward(&pooled)?;
    let a1 = relu(&z1);
    let z2 = w.fc2.forward(&a1)?;
    let gate = sigmoid(&z2);
    let mut out = input.detach();
    for n in 0..s.n {
        for c in 0..s.c {
            let g = gate.data()[n * s.c + c];
            out.channel_mut(n, c).iter_mut().for_each(|v| *v *= g);
        }
    }
    Ok((out, SeCache { input: input.detach(), pooled, z1, a1, gate }))
}

pub fn se_block(input: &Tensor5, weights: &SeWeights) -> Result<Tensor5> {
    se_forward(input, weights).map(|(y, _)| y)
}

pub fn se_backward(out_grad: &Tensor5, cache: &SeCache, w: &mut SeWeights) -> Result<Tensor5> {
    let s = cache.input.shape();
    if out_grad.shape() != s {
        return Err(Error::ShapeMismatch { expected: s, actual: out_grad.shape() });
    }
    let mut dx = out_grad.detach();
    let mut dgate = Tensor5::zeros(cache.gate.shape())?;
    for n in 0..s.n {
        for c in 0..s.c {
            let g = cache.gate.data()[n * s.c + c];
            let dot: f64 =
                out_grad.channel(n, c).iter().zip(cache.input.channel(n, c)).map(|(a, b)| a * b).sum();
            dgate.data_mut()[n * s.c + c] = dot;
            dx.channel_mut(n, c).iter_mut().for_each(|v| *v *= g);
        }
    }
    let dz2 = sigmoid_grad(&cache.gate, &dgate)?;
    let da1 = w.fc2.backward(&dz2, &cache.a1)?;
    let dz1 = relu_grad(&cache.z1, &da1)?;
    let dpooled = w.fc1.backward(&dz1, &cache.pooled)?;
    let dpool_x = global_avg_pool_backward(&dpooled, s)?;
    for (d, p) in dx.data_mut().iter_mut().zip(dpool_x.data()) {
        *d += p;
    }
    dx.ensure_finite("se_backward")?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_width_rounding() {
        assert_eq!(se_reduced_width(40, 1.0 / 16.0), 3);
        assert_eq!(se_reduced_width(8, 1.0 / 16.0), 1);
        assert_eq!(se_reduced_width(320, 1.0 / 16.0), 20);
    }

    #[test]
    fn open_and_half_gates() {
        let mut rng = Rng::new(2);
        let x = Tensor5::randn((2, 4, 2, 3, 3), 1.0, &mut rng).unwrap();
        let mut w = SeWeights::new(4, 0.5, &mut rng).unwrap();
        w.fc2.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let half = se_block(&x, &w).unwrap();
        for (a, b) in half.data().iter().zip(x.data()) {
            assert!((a - b / 2.0).abs() < 1e-15);
        }
        w.fc2.bias.data_mut().iter_mut().for_each(|v| *v = 60.0);
        let open = se_block(&x, &w).unwrap();
        for (a, b) in open.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
