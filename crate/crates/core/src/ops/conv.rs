//! 3-D convolution with "same" zero padding, spatial stride only.
//!
//! Three execution paths share one contract: pointwise convolutions run as
//! a single GEMM per sample, full convolutions go through im2col + GEMM, and
//! depthwise convolutions run a direct per-channel loop.

use serde::{Deserialize, Serialize};

use super::gemm;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape5, Tensor5};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    Full,
    Depthwise,
    Pointwise,
}

/// Shape contract of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    /// Temporal kernel size (odd).
    pub t: usize,
    /// Spatial kernel size (odd).
    pub k: usize,
    /// Spatial stride.
    pub stride: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub mode: ConvMode,
}

impl ConvSpec {
    /// Temporal stride is fixed: the temporal axis is never downsampled.
    pub const TEMPORAL_STRIDE: usize = 1;

    pub fn full(c_in: usize, c_out: usize, t: usize, k: usize, stride: usize) -> Result<Self> {
        Self { t, k, stride, c_in, c_out, mode: ConvMode::Full }.validated()
    }

    pub fn depthwise(c: usize, t: usize, k: usize, stride: usize) -> Result<Self> {
        Self { t, k, stride, c_in: c, c_out: c, mode: ConvMode::Depthwise }.validated()
    }

    pub fn pointwise(c_in: usize, c_out: usize) -> Result<Self> {
        Self { t: 1, k: 1, stride: 1, c_in, c_out, mode: ConvMode::Pointwise }.validated()
    }

    pub fn validated(self) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidConv(format!("{m}: {self:?}")));
        if self.t == 0 || self.t % 2 == 0 || self.k == 0 || self.k % 2 == 0 {
            return bad("kernel sizes must be odd and positive");
        }
        if self.stride == 0 {
            return bad("stride must be positive");
        }
        if self.c_in == 0 || self.c_out == 0 {
            return bad("channel counts must be positive");
        }
        match self.mode {
            ConvMode::Depthwise if self.c_in != self.c_out => bad("depthwise requires c_in == c_out"),
            ConvMode::Pointwise if self.t != 1 || self.k != 1 => bad("pointwise requires t == k == 1"),
            _ => Ok(self),
        }
    }

    pub fn in_per_group(&self) -> usize {
        match self.mode {
            ConvMode::Depthwise => 1,
            _ => self.c_in,
        }
    }

    /// Kernel layout `c_out x c_in_per_group x t x k x k`.
    pub fn weight_shape(&self) -> Shape5 {
        Shape5::new(self.c_out, self.in_per_group(), self.t, self.k, self.k)
    }

    pub fn fan_in(&self) -> usize {
        self.in_per_group() * self.t * self.k * self.k
    }

    pub fn param_count(&self) -> u64 {
        (self.c_out * self.fan_in()) as u64
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        if input.c != self.c_in {
            return Err(Error::ChannelMismatch { expected: self.c_in, actual: input.c });
        }
        if input.h < self.k || input.w < self.k {
            return Err(Error::InvalidConv(format!(
                "spatial size {}x{} smaller than kernel {}",
                input.h, input.w, self.k
            )));
        }
        Ok(Shape5::new(
            input.n,
            self.c_out,
            input.t,
            input.h.div_ceil(self.stride),
            input.w.div_ceil(self.stride),
        ))
    }

    /// Dense multiply-accumulate count: every kernel tap at every output
    /// position, padded taps included.
    pub fn macs(&self, input: Shape5) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(self.param_count() * (out.n * out.volume()) as u64)
    }
}

#[inline]
pub(crate) fn pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Output positions `o` whose input index `o * s + off - pad` lies in
/// `[0, in_len)`, clipped to `[0, out_len)`.
#[inline]
fn valid_out_range(off: usize, pad: usize, s: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > off { (pad - off).div_ceil(s) } else { 0 };
    let limit = in_len + pad;
    let hi = if limit > off { (limit - off).div_ceil(s).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub spec: ConvSpec,
    /// Kernel, shaped per [`ConvSpec::weight_shape`]; carries its gradient.
    pub weight: Tensor5,
}

impl ConvLayer {
    pub fn new(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        let spec = spec.validated()?;
        let weight = Tensor5::kaiming_init(spec.weight_shape(), spec.fan_in(), rng)?.requires_grad();
        Ok(Self { spec, weight })
    }

    pub fn from_weight(spec: ConvSpec, weight: Tensor5) -> Result<Self> {
        let spec = spec.validated()?;
        if weight.shape() != spec.weight_shape() {
            return Err(Error::ShapeMismatch { expected: spec.weight_shape(), actual: weight.shape() });
        }
        Ok(Self { spec, weight: weight.requires_grad() })
    }
}

pub fn conv3d_forward(input: &Tensor5, layer: &ConvLayer) -> Result<Tensor5> {
    let spec = &layer.spec;
    let out_shape = spec.output_shape(input.shape())?;
    let mut out = Tensor5::zeros(out_shape)?;
    match spec.mode {
        ConvMode::Depthwise => depthwise_forward(input, layer.weight.data(), spec, &mut out),
        ConvMode::Pointwise if spec.stride == 1 => pointwise_forward(input, layer.weight.data(), spec, &mut out),
        _ => im2col_forward(input, layer.weight.data(), spec, &mut out),
    }
    out.ensure_finite("conv3d_forward")?;
    Ok(out)
}

/// Returns `(input_grad, weight_grad)`.
pub fn conv3d_backward(out_grad: &Tensor5, input: &Tensor5, layer: &ConvLayer) -> Result<(Tensor5, Tensor5)> {
    let spec = &layer.spec;
    let out_shape = spec.output_shape(input.shape())?;
    if out_grad.shape() != out_shape {
        return Err(Error::ShapeMismatch { expected: out_shape, actual: out_grad.shape() });
    }
    let mut dx = Tensor5::zeros(input.shape())?;
    let mut dw = Tensor5::zeros(spec.weight_shape())?;
    match spec.mode {
        ConvMode::Depthwise => {
            depthwise_backward(out_grad, input, layer.weight.data(), spec, &mut dx, dw.data_mut())
        }
        ConvMode::Pointwise if spec.stride == 1 => {
            pointwise_backward(out_grad, input, layer.weight.data(), spec, &mut dx, dw.data_mut())
        }
        _ => im2col_backward(out_grad, input, layer.weight.data(), spec, &mut dx, dw.data_mut()),
    }
    dx.ensure_finite("conv3d_backward")?;
    dw.ensure_finite("conv3d_backward")?;
    Ok((dx, dw))
}

/// Depthwise `1 x k x k` convolution; carries the spatial stride.
pub fn spatial_dwconv(input: &Tensor5, layer: &ConvLayer) -> Result<Tensor5> {
    let s = &layer.spec;
    if s.mode != ConvMode::Depthwise || s.t != 1 {
        return Err(Error::InvalidConv(format!("spatial_dwconv needs a depthwise 1xkxk kernel, got {s:?}")));
    }
    conv3d_forward(input, layer)
}

/// Depthwise `t x 1 x 1` convolution; never strides.
pub fn temporal_dwconv(input: &Tensor5, layer: &ConvLayer) -> Result<Tensor5> {
    let s = &layer.spec;
    if s.mode != ConvMode::Depthwise || s.k != 1 || s.stride != 1 {
        return Err(Error::InvalidConv(format!("temporal_dwconv needs a depthwise tx1x1 kernel, got {s:?}")));
    }
    conv3d_forward(input, layer)
}

fn depthwise_forward(x: &Tensor5, w: &[f64], spec: &ConvSpec, out: &mut Tensor5) {
    let xs = x.shape();
    let os = out.shape();
    let (t, k, s) = (spec.t, spec.k, spec.stride);
    let (pt, pk) = (pad(t), pad(k));
    let taps = t * k * k;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let wc = &w[c * taps..(c + 1) * taps];
            let xc = x.channel(n, c);
            let yc = out.channel_mut(n, c);
            for to in 0..os.t {
                for dt in 0..t {
                    let Some(ti) = (to + dt).checked_sub(pt).filter(|&v| v < xs.t) else { continue };
                    for ho in 0..os.h {
                        for dy in 0..k {
                            let Some(hi) = (ho * s + dy).checked_sub(pk).filter(|&v| v < xs.h) else {
                                continue;
                            };
                            let xrow = &xc[(ti * xs.h + hi) * xs.w..][..xs.w];
                            let yrow = &mut yc[(to * os.h + ho) * os.w..][..os.w];
                            for dx in 0..k {
                                let wv = wc[(dt * k + dy) * k + dx];
                                let (lo, hi_) = valid_out_range(dx, pk, s, xs.w, os.w);
                                if s == 1 {
                                    let src = &xrow[lo + dx - pk..hi_ + dx - pk];
                                    for (y, &xv) in yrow[lo..hi_].iter_mut().zip(src) {
                                        *y += wv * xv;
                                    }
                                } else {
                                    for wo in lo..hi_ {
                                        yrow[wo] += wv * xrow[wo * s + dx - pk];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(dy: &Tensor5, x: &Tensor5, w: &[f64], spec: &ConvSpec, dx: &mut Tensor5, dw: &mut [f64]) {
    let xs = x.shape();
    let os = dy.shape();
    let (t, k, s) = (spec.t, spec.k, spec.stride);
    let (pt, pk) = (pad(t), pad(k));
    let taps = t * k * k;
    for n in 0..xs.n {
        for c in 0..xs.c {
            let wc = &w[c * taps..(c + 1) * taps];
            let dwc = &mut dw[c * taps..(c + 1) * taps];
            let xc = x.channel(n, c);
            let gc = dy.channel(n, c);
            let dxc = dx.channel_mut(n, c);
            for to in 0..os.t {
                for dt in 0..t {
                    let Some(ti) = (to + dt).checked_sub(pt).filter(|&v| v < xs.t) else { continue };
                    for ho in 0..os.h {
                        for ky in 0..k {
                            let Some(hi) = (ho * s + ky).checked_sub(pk).filter(|&v| v < xs.h) else {
                                continue;
                            };
                            let base = (ti * xs.h + hi) * xs.w;
                            let grow = &gc[(to * os.h + ho) * os.w..][..os.w];
                            for kx in 0..k {
                                let widx = (dt * k + ky) * k + kx;
                                let wv = wc[widx];
                                let (lo, hi_) = valid_out_range(kx, pk, s, xs.w, os.w);
                                let mut acc = 0.0;
                                for wo in lo..hi_ {
                                    let xi = base + wo * s + kx - pk;
                                    acc += xc[xi] * grow[wo];
                                    dxc[xi] += wv * grow[wo];
                                }
                                dwc[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pointwise_forward(x: &Tensor5, w: &[f64], spec: &ConvSpec, out: &mut Tensor5) {
    let xs = x.shape();
    let p = xs.volume();
    let (ci, co) = (spec.c_in, spec.c_out);
    for n in 0..xs.n {
        let xn = &x.data()[n * ci * p..(n + 1) * ci * p];
        let yn = &mut out.data_mut()[n * co * p..(n + 1) * co * p];
        gemm(co, ci, p, 1.0, w, false, xn, false, 0.0, yn);
    }
}

fn pointwise_backward(dy: &Tensor5, x: &Tensor5, w: &[f64], spec: &ConvSpec, dx: &mut Tensor5, dw: &mut [f64]) {
    let xs = x.shape();
    let p = xs.volume();
    let (ci, co) = (spec.c_in, spec.c_out);
    for n in 0..xs.n {
        let xn = &x.data()[n * ci * p..(n + 1) * ci * p];
        let gn = &dy.data()[n * co * p..(n + 1) * co * p];
        gemm(co, p, ci, 1.0, gn, false, xn, true, 1.0, dw);
        let dxn = &mut dx.data_mut()[n * ci * p..(n + 1) * ci * p];
        gemm(ci, co, p, 1.0, w, true, gn, false, 0.0, dxn);
    }
}

/// Unfolds one sample into a `(c_in * t * k * k) x (T * Ho * Wo)` matrix.
fn im2col(xn: &[f64], xs: Shape5, os: Shape5, spec: &ConvSpec, cols: &mut [f64]) {
    let (t, k, s) = (spec.t, spec.k, spec.stride);
    let (pt, pk) = (pad(t), pad(k));
    let p = os.volume();
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..spec.c_in {
        let xc = &xn[c * xs.volume()..(c + 1) * xs.volume()];
        for dt in 0..t {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * t + dt) * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let (lo, hi_) = valid_out_range(kx, pk, s, xs.w, os.w);
                    for to in 0..os.t {
                        let Some(ti) = (to + dt).checked_sub(pt).filter(|&v| v < xs.t) else { continue };
                        for ho in 0..os.h {
                            let Some(hi) = (ho * s + ky).checked_sub(pk).filter(|&v| v < xs.h) else {
                                continue;
                            };
                            let src = (ti * xs.h + hi) * xs.w;
                            let d = (to * os.h + ho) * os.w;
                            for wo in lo..hi_ {
                                dst[d + wo] = xc[src + wo * s + kx - pk];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], xs: Shape5, os: Shape5, spec: &ConvSpec, dxn: &mut [f64]) {
    let (t, k, s) = (spec.t, spec.k, spec.stride);
    let (pt, pk) = (pad(t), pad(k));
    let p = os.volume();
    for c in 0..spec.c_in {
        let dxc = &mut dxn[c * xs.volume()..(c + 1) * xs.volume()];
        for dt in 0..t {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * t + dt) * k + ky) * k + kx;
                    let src_row = &cols[row * p..(row + 1) * p];
                    let (lo, hi_) = valid_out_range(kx, pk, s, xs.w, os.w);
                    for to in 0..os.t {
                        let Some(ti) = (to + dt).checked_sub(pt).filter(|&v| v < xs.t) else { continue };
                        for ho in 0..os.h {
                            let Some(hi) = (ho * s + ky).checked_sub(pk).filter(|&v| v < xs.h) else {
                                continue;
                            };
                            let dst = (ti * xs.h + hi) * xs.w;
                            let src = (to * os.h + ho) * os.w;
                            for wo in lo..hi_ {
                                dxc[dst + wo * s + kx - pk] += src_row[src + wo];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn im2col_forward(x: &Tensor5, w: &[f64], spec: &ConvSpec, out: &mut Tensor5) {
    let xs = x.shape();
    let os = out.shape();
    let kdim = spec.fan_in();
    let p = os.volume();
    let mut cols = vec![0.0; kdim * p];
    let in_per = xs.c * xs.volume();
    let out_per = os.c * p;
    for n in 0..xs.n {
        im2col(&x.data()[n * in_per..(n + 1) * in_per], xs, os, spec, &mut cols);
        let yn = &mut out.data_mut()[n * out_per..(n + 1) * out_per];
        gemm(spec.c_out, kdim, p, 1.0, w, false, &cols, false, 0.0, yn);
    }
}

fn im2col_backward(dy: &Tensor5, x: &Tensor5, w: &[f64], spec: &ConvSpec, dx: &mut Tensor5, dw: &mut [f64]) {
    let xs = x.shape();
    let os = dy.shape();
    let kdim = spec.fan_in();
    let p = os.volume();
    let mut cols = vec![0.0; kdim * p];
    let mut dcols = vec![0.0; kdim * p];
    let in_per = xs.c * xs.volume();
    let out_per = os.c * p;
    for n in 0..xs.n {
        im2col(&x.data()[n * in_per..(n + 1) * in_per], xs, os, spec, &mut cols);
        let gn = &dy.data()[n * out_per..(n + 1) * out_per];
        gemm(spec.c_out, p, kdim, 1.0, gn, false, &cols, true, 1.0, dw);
        gemm(kdim, spec.c_out, p, 1.0, w, true, gn, false, 0.0, &mut dcols);
        col2im(&dcols, xs, os, spec, &mut dx.data_mut()[n * in_per..(n + 1) * in_per]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer_with(spec: ConvSpec, w: Vec<f64>) -> ConvLayer {
        ConvLayer::from_weight(spec, Tensor5::from_vec(spec.weight_shape(), w).unwrap()).unwrap()
    }

    #[test]
    fn spec_invariants() {
        assert!(ConvSpec::full(3, 4, 2, 3, 1).is_err());
        assert!(ConvSpec::full(3, 4, 3, 4, 1).is_err());
        assert!(ConvSpec { t: 3, k: 1, stride: 1, c_in: 2, c_out: 2, mode: ConvMode::Pointwise }
            .validated()
            .is_err());
        assert!(ConvSpec { t: 3, k: 3, stride: 1, c_in: 2, c_out: 3, mode: ConvMode::Depthwise }
            .validated()
            .is_err());
        let s = ConvSpec::depthwise(8, 3, 3, 2).unwrap();
        assert_eq!(s.weight_shape(), Shape5::new(8, 1, 3, 3, 3));
        assert_eq!(s.output_shape(Shape5::new(1, 8, 5, 7, 8)).unwrap(), Shape5::new(1, 8, 5, 4, 4));
    }

    #[test]
    fn identity_pointwise() {
        let spec = ConvSpec::pointwise(3, 3).unwrap();
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let l = layer_with(spec, w);
        let x = Tensor5::randn((1, 3, 2, 2, 2), 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(conv3d_forward(&x, &l).unwrap().data(), x.data());
    }

    #[test]
    fn ones_kernel_center() {
        let spec = ConvSpec::depthwise(1, 3, 3, 1).unwrap();
        let l = layer_with(spec, vec![1.0; 27]);
        let x = Tensor5::fill((1, 1, 3, 3, 3), 1.0).unwrap();
        let y = conv3d_forward(&x, &l).unwrap();
        assert_eq!(y.at(0, 0, 1, 1, 1), 27.0);
        assert_eq!(y.at(0, 0, 0, 0, 0), 8.0);
    }

    #[test]
    fn temporal_delta_kernels() {
        let x = Tensor5::from_vec((1, 1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let spec = ConvSpec::depthwise(1, 3, 1, 1).unwrap();
        let id = layer_with(spec, vec![0.0, 1.0, 0.0]);
        assert_eq!(temporal_dwconv(&x, &id).unwrap().data(), x.data());
        let shift = layer_with(spec, vec![1.0, 0.0, 0.0]);
        assert_eq!(temporal_dwconv(&x, &shift).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);
        assert!(spatial_dwconv(&x, &id).is_err());
    }

    #[test]
    fn pointwise_weight_grad_is_channel_sum() {
        let mut rng = Rng::new(4);
        let spec = ConvSpec::pointwise(3, 2).unwrap();
        let l = ConvLayer::new(spec, &mut rng).unwrap();
        let x = Tensor5::randn((2, 3, 2, 3, 3), 1.0, &mut rng).unwrap();
        let g = Tensor5::fill((2, 2, 2, 3, 3), 1.0).unwrap();
        let (_, dw) = conv3d_backward(&g, &x, &l).unwrap();
        for co in 0..2 {
            for ci in 0..3 {
                let s: f64 = (0..2).map(|n| x.channel(n, ci).iter().sum::<f64>()).sum();
                assert!((dw.data()[co * 3 + ci] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_output_grad_gives_zero() {
        let mut rng = Rng::new(2);
        let spec = ConvSpec::full(2, 3, 3, 3, 2).unwrap();
        let l = ConvLayer::new(spec, &mut rng).unwrap();
        let x = Tensor5::randn((1, 2, 3, 5, 5), 1.0, &mut rng).unwrap();
        let g = Tensor5::zeros(spec.output_shape(x.shape()).unwrap()).unwrap();
        let (dx, dw) = conv3d_backward(&g, &x, &l).unwrap();
        assert!(dx.data().iter().all(|&v| v == 0.0));
        assert!(dw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let spec = ConvSpec::pointwise(3, 3).unwrap();
        let l = ConvLayer::new(spec, &mut Rng::new(0)).unwrap();
        let x = Tensor5::zeros((1, 4, 1, 2, 2)).unwrap();
        assert!(matches!(conv3d_forward(&x, &l), Err(Error::ChannelMismatch { .. })));
    }

    #[test]
    fn out_range_bounds() {
        // k=3, pad=1, stride 2, W=5 -> Wo=3; tap 0 reads index 2o-1
        assert_eq!(valid_out_range(0, 1, 2, 5, 3), (1, 3));
        assert_eq!(valid_out_range(2, 1, 2, 5, 3), (0, 2));
        assert_eq!(valid_out_range(1, 1, 1, 4, 4), (0, 4));
    }
}
