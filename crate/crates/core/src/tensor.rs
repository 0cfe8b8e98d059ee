//! Dense rank-5 tensors laid out as `(N, C, T, H, W)` in row-major order.
//!
//! A [`Tensor5`] optionally carries a gradient buffer of the same shape.
//! Backward helpers in this module accumulate into those buffers
//! additively; callers reset them with [`Tensor5::zero_grad`] between steps.

use std::fmt;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape5 {
    pub const fn new(n: usize, c: usize, t: usize, h: usize, w: usize) -> Self {
        Self { n, c, t, h, w }
    }

    pub fn dims(&self) -> [usize; 5] {
        [self.n, self.c, self.t, self.h, self.w]
    }

    /// Element count, or an error when the product does not fit in `usize`.
    pub fn checked_numel(&self) -> Result<usize> {
        self.dims()
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Overflow(self.dims()))
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    /// Elements in one `(T, H, W)` volume.
    pub fn volume(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn with_c(&self, c: usize) -> Self {
        Self { c, ..*self }
    }
}

impl fmt::Display for Shape5 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {}, {})", self.n, self.c, self.t, self.h, self.w)
    }
}

impl From<(usize, usize, usize, usize, usize)> for Shape5 {
    fn from(d: (usize, usize, usize, usize, usize)) -> Self {
        Shape5::new(d.0, d.1, d.2, d.3, d.4)
    }
}

/// Deterministic random source backed by ChaCha8.
///
/// ChaCha8 is a portable stream cipher generator: identical seeds give
/// identical streams on every platform and word size.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub const ALGORITHM: &'static str = "ChaCha8";

    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; `stream` selects which one.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { seed: self.seed, inner }
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        self.inner.gen_range(0..bound)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    /// Shared until written; `detach` and `clone` do not copy values.
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
}

impl Tensor5 {
    pub fn zeros(shape: impl Into<Shape5>) -> Result<Self> {
        Self::fill(shape, 0.0)
    }

    pub fn fill(shape: impl Into<Shape5>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_numel()?;
        if !value.is_finite() {
            return Err(Error::NonFinite("fill"));
        }
        Ok(Self { shape, data: Arc::new(vec![value; len]), grad: None })
    }

    pub fn from_vec(shape: impl Into<Shape5>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let len = shape.checked_numel()?;
        if data.len() != len {
            return Err(Error::Format(format!(
                "buffer of {} values does not match shape {shape}",
                data.len()
            )));
        }
        let t = Self { shape, data: Arc::new(data), grad: None };
        t.ensure_finite("from_vec")?;
        Ok(t)
    }

    /// Kaiming-normal initialisation: i.i.d. `N(0, 2 / fan_in)`.
    pub fn kaiming_init(shape: impl Into<Shape5>, fan_in: usize, rng: &mut Rng) -> Result<Self> {
        if fan_in == 0 {
            return Err(Error::InvalidConfig("kaiming_init requires fan_in > 0".into()));
        }
        let std = (2.0 / fan_in as f64).sqrt();
        let mut t = Self::zeros(shape)?;
        for v in t.data_mut() {
            *v = std * rng.normal();
        }
        Ok(t)
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: impl Into<Shape5>, std: f64, rng: &mut Rng) -> Result<Self> {
        let mut t = Self::zeros(shape)?;
        for v in t.data_mut() {
            *v = std * rng.normal();
        }
        Ok(t)
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let len = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; len])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn requires_grad(mut self) -> Self {
        self.grad_mut();
        self
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &Tensor5) -> Result<()> {
        check_same_shape(self.shape, delta.shape)?;
        for (g, d) in self.grad_mut().iter_mut().zip(delta.data.iter()) {
            *g += d;
        }
        Ok(())
    }

    /// The gradient buffer as a plain tensor (zeros when absent).
    pub fn grad_tensor(&self) -> Tensor5 {
        let data = self.grad.clone().unwrap_or_else(|| vec![0.0; self.data.len()]);
        Tensor5 { shape: self.shape, data: Arc::new(data), grad: None }
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> usize {
        let s = &self.shape;
        (((n * s.c + c) * s.t + t) * s.h + h) * s.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, t: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, t, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, t: usize, h: usize, w: usize, v: f64) {
        let o = self.offset(n, c, t, h, w);
        self.data_mut()[o] = v;
    }

    /// Contiguous `(T, H, W)` slab of sample `n`, channel `c`.
    pub fn channel(&self, n: usize, c: usize) -> &[f64] {
        let v = self.shape.volume();
        let start = (n * self.shape.c + c) * v;
        &self.data[start..start + v]
    }

    pub fn channel_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let v = self.shape.volume();
        let start = (n * self.shape.c + c) * v;
        &mut self.data_mut()[start..start + v]
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn reshape(mut self, shape: impl Into<Shape5>) -> Result<Self> {
        let shape = shape.into();
        if shape.checked_numel()? != self.data.len() {
            return Err(Error::ShapeMismatch { expected: self.shape, actual: shape });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor5 {
        Tensor5 { shape: self.shape, data: Arc::new(self.data.iter().map(|&v| f(v)).collect()), grad: None }
    }

    /// Drops the gradient buffer, keeping values.
    pub fn detach(&self) -> Tensor5 {
        Tensor5 { shape: self.shape, data: self.data.clone(), grad: None }
    }

    /// Copies samples `range` along the batch axis.
    pub fn slice_batch(&self, start: usize, len: usize) -> Result<Tensor5> {
        if start + len > self.shape.n {
            return Err(Error::InvalidConfig(format!(
                "batch slice {start}..{} out of range for N={}",
                start + len,
                self.shape.n
            )));
        }
        let per = self.shape.c * self.shape.volume();
        let data = self.data[start * per..(start + len) * per].to_vec();
        Ok(Tensor5 { shape: Shape5 { n: len, ..self.shape }, data: Arc::new(data), grad: None })
    }

    /// Stacks tensors with equal `(C, T, H, W)` along the batch axis.
    pub fn stack_batch(items: &[Tensor5]) -> Result<Tensor5> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidConfig("cannot stack an empty list".into()))?
            .shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.len()).sum());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.t, s.h, s.w) != (first.c, first.t, first.h, first.w) {
                return Err(Error::ShapeMismatch { expected: first, actual: s });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor5 { shape: Shape5 { n, ..first }, data: Arc::new(data), grad: None })
    }

    /// Writes the tensor as five little-endian `u64` dims followed by the
    /// little-endian `f64` payload.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for d in self.shape.dims() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 8);
        for v in self.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Tensor5> {
        let mut dims = [0usize; 5];
        let mut word = [0u8; 8];
        for d in &mut dims {
            r.read_exact(&mut word)?;
            *d = usize::try_from(u64::from_le_bytes(word))
                .map_err(|_| Error::Format("tensor dimension exceeds usize".into()))?;
        }
        let shape = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
        let len = shape.checked_numel()?;
        let bytes = len
            .checked_mul(8)
            .ok_or(Error::Overflow(shape.dims()))?;
        let mut buf = vec![0u8; bytes];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor5::from_vec(shape, data)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Tensor5> {
        let f = std::fs::File::open(path)?;
        Tensor5::read_from(std::io::BufReader::new(f))
    }
}

pub(crate) fn check_same_shape(expected: Shape5, actual: Shape5) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { expected, actual })
    }
}

fn zip_with(a: &Tensor5, b: &Tensor5, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor5> {
    check_same_shape(a.shape, b.shape)?;
    let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
    let out = Tensor5 { shape: a.shape, data: Arc::new(data), grad: None };
    out.ensure_finite(op)?;
    Ok(out)
}

pub fn add(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    zip_with(a, b, "add", |x, y| x + y)
}

pub fn mul(a: &Tensor5, b: &Tensor5) -> Result<Tensor5> {
    zip_with(a, b, "mul", |x, y| x * y)
}

pub fn relu(x: &Tensor5) -> Tensor5 {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor5) -> Tensor5 {
    x.map(sigmoid_scalar)
}

/// Local gradient of `relu` given its input.
pub fn relu_grad(input: &Tensor5, out_grad: &Tensor5) -> Result<Tensor5> {
    zip_with(input, out_grad, "relu_grad", |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Local gradient of `sigmoid` given its output.
pub fn sigmoid_grad(output: &Tensor5, out_grad: &Tensor5) -> Result<Tensor5> {
    zip_with(output, out_grad, "sigmoid_grad", |y, g| g * y * (1.0 - y))
}

pub fn add_backward(a: &mut Tensor5, b: &mut Tensor5, out_grad: &Tensor5) -> Result<()> {
    a.accumulate_grad(out_grad)?;
    b.accumulate_grad(out_grad)
}

pub fn mul_backward(a: &mut Tensor5, b: &mut Tensor5, out_grad: &Tensor5) -> Result<()> {
    let ga = mul(b, out_grad)?;
    let gb = mul(a, out_grad)?;
    a.accumulate_grad(&ga)?;
    b.accumulate_grad(&gb)
}

pub fn relu_backward(x: &mut Tensor5, out_grad: &Tensor5) -> Result<()> {
    let g = relu_grad(x, out_grad)?;
    x.accumulate_grad(&g)
}

pub fn sigmoid_backward(x: &mut Tensor5, out_grad: &Tensor5) -> Result<()> {
    let y = sigmoid(x);
    let g = sigmoid_grad(&y, out_grad)?;
    x.accumulate_grad(&g)
}

/// Concatenates along channels, blocks in argument order.
pub fn concat_channels(inputs: &[&Tensor5]) -> Result<Tensor5> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidConfig("concat_channels needs at least one input".into()))?
        .shape;
    let mut c_total = 0usize;
    for t in inputs {
        let s = t.shape;
        if (s.n, s.t, s.h, s.w) != (first.n, first.t, first.h, first.w) {
            return Err(Error::ShapeMismatch { expected: s.with_c(first.c), actual: s });
        }
        c_total += s.c;
    }
    let shape = first.with_c(c_total);
    let mut data = Vec::with_capacity(shape.checked_numel()?);
    for n in 0..first.n {
        for t in inputs {
            let per = t.shape.c * t.shape.volume();
            data.extend_from_slice(&t.data[n * per..(n + 1) * per]);
        }
    }
    Ok(Tensor5 { shape, data: Arc::new(data), grad: None })
}

/// Splits a channel-concatenated gradient back into per-source pieces.
pub fn split_channels(grad: &Tensor5, widths: &[usize]) -> Result<Vec<Tensor5>> {
    let s = grad.shape;
    if widths.iter().sum::<usize>() != s.c {
        return Err(Error::ChannelMismatch { expected: s.c, actual: widths.iter().sum() });
    }
    let vol = s.volume();
    let mut parts: Vec<Vec<f64>> = widths.iter().map(|&c| Vec::with_capacity(s.n * c * vol)).collect();
    for n in 0..s.n {
        let mut c0 = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            let start = (n * s.c + c0) * vol;
            part.extend_from_slice(&grad.data[start..start + c * vol]);
            c0 += c;
        }
    }
    Ok(parts
        .into_iter()
        .zip(widths)
        .map(|(data, &c)| Tensor5 { shape: s.with_c(c), data: Arc::new(data), grad: None })
        .collect())
}

/// Routes slices of `out_grad` into the gradient buffers of the sources.
pub fn concat_channels_backward(inputs: &mut [&mut Tensor5], out_grad: &Tensor5) -> Result<()> {
    let widths: Vec<usize> = inputs.iter().map(|t| t.shape.c).collect();
    let parts = split_channels(out_grad, &widths)?;
    for (t, g) in inputs.iter_mut().zip(&parts) {
        t.accumulate_grad(g)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_and_fill() {
        let z = Tensor5::zeros((1, 1, 1, 1, 1)).unwrap();
        assert_eq!(z.data(), &[0.0]);
        let f = Tensor5::fill((2, 3, 4, 5, 6), 1.0).unwrap();
        assert_eq!(f.len(), 720);
        assert!(f.data().iter().all(|&v| v == 1.0));
        let e = Tensor5::zeros((1, 0, 4, 4, 4)).unwrap();
        assert_eq!(e.len(), 0);
        assert!(e.is_empty());
    }

    #[test]
    fn overflow_is_an_error() {
        let r = Tensor5::zeros((usize::MAX, 2, 1, 1, 1));
        assert!(matches!(r, Err(Error::Overflow(_))));
    }

    #[test]
    fn kaiming_statistics() {
        let mut rng = Rng::new(7);
        let t = Tensor5::kaiming_init((1, 1, 1, 1, 10000), 8, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 0.5).abs() < 0.025, "std {}", var.sqrt());

        let mut rng = Rng::new(3);
        let t = Tensor5::kaiming_init((1, 1, 1, 1, 20000), 2, &mut rng).unwrap();
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.05);
    }

    #[test]
    fn kaiming_is_deterministic() {
        let a = Tensor5::kaiming_init((2, 3, 1, 2, 2), 5, &mut Rng::new(42)).unwrap();
        let b = Tensor5::kaiming_init((2, 3, 1, 2, 2), 5, &mut Rng::new(42)).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(Tensor5::kaiming_init((1, 1, 1, 1, 1), 0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn elementwise_values() {
        let x = Tensor5::from_vec((1, 1, 1, 1, 3), vec![-1.0, 2.5, 0.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.5, 0.0]);
        assert_eq!(sigmoid(&x).data()[2], 0.5);
    }

    #[test]
    fn product_rule() {
        let mut a = Tensor5::from_vec((1, 1, 1, 1, 1), vec![2.0]).unwrap();
        let mut b = Tensor5::from_vec((1, 1, 1, 1, 1), vec![3.0]).unwrap();
        let g = Tensor5::fill((1, 1, 1, 1, 1), 1.0).unwrap();
        mul_backward(&mut a, &mut b, &g).unwrap();
        assert_eq!(a.grad().unwrap(), &[3.0]);
        assert_eq!(b.grad().unwrap(), &[2.0]);
        // accumulation is additive
        mul_backward(&mut a, &mut b, &g).unwrap();
        assert_eq!(a.grad().unwrap(), &[6.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor5::zeros((1, 1, 1, 1, 2)).unwrap();
        let b = Tensor5::zeros((1, 1, 1, 2, 1)).unwrap();
        assert!(matches!(add(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_detected() {
        let a = Tensor5::fill((1, 1, 1, 1, 1), f64::MAX).unwrap();
        assert!(matches!(add(&a, &a), Err(Error::NonFinite(_))));
        assert!(Tensor5::from_vec((1, 1, 1, 1, 1), vec![f64::NAN]).is_err());
    }

    #[test]
    fn concat_shapes() {
        let a = Tensor5::fill((1, 24, 4, 8, 8), 1.0).unwrap();
        let b = Tensor5::fill((1, 24, 4, 8, 8), 2.0).unwrap();
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape5::new(1, 48, 4, 8, 8));
        assert_eq!(c.at(0, 23, 0, 0, 0), 1.0);
        assert_eq!(c.at(0, 24, 0, 0, 0), 2.0);

        let parts: Vec<Tensor5> = (0..6).map(|_| Tensor5::zeros((1, 24, 2, 3, 3)).unwrap()).collect();
        let refs: Vec<&Tensor5> = parts.iter().collect();
        assert_eq!(concat_channels(&refs).unwrap().shape().c, 144);

        let bad = Tensor5::zeros((1, 24, 4, 8, 7)).unwrap();
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn concat_backward_routes_slices() {
        let mut rng = Rng::new(1);
        let mut a = Tensor5::randn((2, 2, 1, 2, 2), 1.0, &mut rng).unwrap();
        let mut b = Tensor5::randn((2, 3, 1, 2, 2), 1.0, &mut rng).unwrap();
        let g = Tensor5::randn((2, 5, 1, 2, 2), 1.0, &mut rng).unwrap();
        concat_channels_backward(&mut [&mut a, &mut b], &g).unwrap();
        assert_eq!(a.grad().unwrap()[..4], g.data()[..4]);
        assert_eq!(b.grad().unwrap()[..12], g.data()[8..20]);
        assert_eq!(a.grad().unwrap()[8..12], g.data()[20..24]);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = Rng::new(5);
        let t = Tensor5::randn((1, 2, 3, 2, 1), 1.0, &mut rng).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 40 + 8 * 12);
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        let back = Tensor5::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(Tensor5::read_from(&buf[..50]).is_err());
    }

    #[test]
    fn rng_streams_are_stable() {
        let mut a = Rng::new(9);
        let mut b = Rng::new(9);
        for _ in 0..10 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        let mut f1 = a.fork(3);
        let mut f2 = b.fork(3);
        assert_eq!(f1.normal().to_bits(), f2.normal().to_bits());
    }
}
