//! Per-channel batch normalization over `(N, T, H, W)`.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::{Shape5, Tensor5};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct BatchNormState {
    /// Scale, shape `(1, C, 1, 1, 1)`.
    pub gamma: Tensor5,
    /// Shift, shape `(1, C, 1, 1, 1)`.
    pub beta: Tensor5,
    pub running_mean: Tensor5,
    pub running_var: Tensor5,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Result<Self> {
        let s = Shape5::new(1, channels, 1, 1, 1);
        Ok(Self {
            gamma: Tensor5::fill(s, 1.0)?.requires_grad(),
            beta: Tensor5::zeros(s)?.requires_grad(),
            running_mean: Tensor5::zeros(s)?,
            running_var: Tensor5::fill(s, 1.0)?,
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Makes eval-mode output equal the input exactly.
    pub fn freeze_identity(&mut self) {
        self.gamma.data_mut().iter_mut().for_each(|v| *v = 1.0);
        self.beta.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.running_mean.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let eps = self.eps;
        self.running_var.data_mut().iter_mut().for_each(|v| *v = 1.0 - eps);
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Tensor5,
    pub inv_std: Vec<f64>,
    pub mode: Mode,
}

/// Normalizes `input`. In train mode batch statistics are used and the
/// running statistics are updated; in eval mode the running statistics are
/// applied as a fixed affine map.
pub fn batchnorm(input: &Tensor5, state: &mut BatchNormState, mode: Mode) -> Result<(Tensor5, BatchNormCache)> {
    let s = input.shape();
    if s.c != state.channels() {
        return Err(Error::ChannelMismatch { expected: state.channels(), actual: s.c });
    }
    let count = s.n * s.volume();
    let mut x_hat = Tensor5::zeros(s)?;
    let mut out = Tensor5::zeros(s)?;
    let mut inv_std = vec![0.0; s.c];
    for c in 0..s.c {
        let (mean, inv) = match mode {
            Mode::Train => {
                let mut sum = 0.0;
                for n in 0..s.n {
                    sum += input.channel(n, c).iter().sum::<f64>();
                }
                let mean = sum / count as f64;
                let mut sq = 0.0;
                for n in 0..s.n {
                    sq += input.channel(n, c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = sq / count as f64;
                let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var };
                let m = state.momentum;
                let rm = &mut state.running_mean.data_mut()[c];
                *rm = (1.0 - m) * *rm + m * mean;
                let rv = &mut state.running_var.data_mut()[c];
                *rv = (1.0 - m) * *rv + m * unbiased;
                (mean, 1.0 / (var + state.eps).sqrt())
            }
            Mode::Eval => {
                let rv = state.running_var.data()[c];
                (state.running_mean.data()[c], 1.0 / (rv + state.eps).sqrt())
            }
        };
        inv_std[c] = inv;
        let g = state.gamma.data()[c];
        let b = state.beta.data()[c];
        for n in 0..s.n {
            let src = input.channel(n, c);
            let xh = x_hat.channel_mut(n, c);
            let o = out.channel_mut(n, c);
            for i in 0..src.len() {
                let v = (src[i] - mean) * inv;
                xh[i] = v;
                o[i] = g * v + b;
            }
        }
    }
    out.ensure_finite("batchnorm")?;
    Ok((out, BatchNormCache { x_hat, inv_std, mode }))
}

/// Eval-mode normalization that leaves `state` untouched.
pub fn batchnorm_infer(input: &Tensor5, state: &BatchNormState) -> Result<Tensor5> {
    let s = input.shape();
    if s.c != state.channels() {
        return Err(Error::ChannelMismatch { expected: state.channels(), actual: s.c });
    }
    let mut out = input.detach();
    for c in 0..s.c {
        let inv = 1.0 / (state.running_var.data()[c] + state.eps).sqrt();
        let mean = state.running_mean.data()[c];
        let g = state.gamma.data()[c];
        let b = state.beta.data()[c];
        for n in 0..s.n {
            out.channel_mut(n, c).iter_mut().for_each(|v| *v = g * ((*v - mean) * inv) + b);
        }
    }
    out.ensure_finite("batchnorm")?;
    Ok(out)
}

/// Returns the input gradient and accumulates into `gamma`/`beta` grads.
pub fn batchnorm_backward(out_grad: &Tensor5, cache: &BatchNormCache, state: &mut BatchNormState) -> Result<Tensor5> {
    let s = cache.x_hat.shape();
    if out_grad.shape() != s {
        return Err(Error::ShapeMismatch { expected: s, actual: out_grad.shape() });
    }
    let m = (s.n * s.volume()) as f64;
    let mut dx = Tensor5::zeros(s)?;
    for c in 0..s.c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xh = 0.0;
        for n in 0..s.n {
            for (&g, &xh) in out_grad.channel(n, c).iter().zip(cache.x_hat.channel(n, c)) {
                sum_dy += g;
                sum_dy_xh += g * xh;
            }
        }
        state.gamma.grad_mut()[c] += sum_dy_xh;
        state.beta.grad_mut()[c] += sum_dy;
        let scale = state.gamma.data()[c] * cache.inv_std[c];
        for n in 0..s.n {
            let g = out_grad.channel(n, c);
            let xh = cache.x_hat.channel(n, c);
            let d = dx.channel_mut(n, c);
            match cache.mode {
                Mode::Train => {
                    for i in 0..d.len() {
                        d[i] = scale * (g[i] - sum_dy / m - xh[i] * sum_dy_xh / m);
                    }
                }
                Mode::Eval => {
                    for i in 0..d.len() {
                        d[i] = scale * g[i];
                    }
                }
            }
        }
    }
    dx.ensure_finite("batchnorm_backward")?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn train_mode_normalizes() {
        let mut rng = Rng::new(3);
        let x = Tensor5::randn((2, 3, 2, 3, 3), 4.0, &mut rng).unwrap().map(|v| v + 7.0);
        let mut st = BatchNormState::new(3).unwrap();
        let (y, _) = batchnorm(&x, &mut st, Mode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| y.channel(n, c).to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-6 + st.eps);
        }
        assert!(st.running_mean.data().iter().all(|&m| m > 0.5));
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let x = Tensor5::fill((2, 1, 2, 2, 2), 3.5).unwrap();
        let mut st = BatchNormState::new(1).unwrap();
        let (y, _) = batchnorm(&x, &mut st, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_identity_in_eval() {
        let x = Tensor5::randn((1, 2, 2, 2, 2), 1.0, &mut Rng::new(8)).unwrap();
        let mut st = BatchNormState::new(2).unwrap();
        st.freeze_identity();
        let (y, _) = batchnorm(&x, &mut st, Mode::Eval).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor5::zeros((1, 2, 1, 1, 1)).unwrap();
        let mut st = BatchNormState::new(3).unwrap();
        assert!(batchnorm(&x, &mut st, Mode::Train).is_err());
    }
}
