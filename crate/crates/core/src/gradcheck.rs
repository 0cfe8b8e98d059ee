//! Central finite-difference verification of every backward pass.

use serde::Serialize;

use crate::blocks::{Block, BlockSpec, Tosa, TOSAConfig, Variant};
use crate::error::{Error, Result};
use crate::net::{ArchGraph, Stage, StemConfig, StemTemporal, VoV3D};
use crate::ops::layers::{Layer, LayerDesc, Parameterized};
use crate::ops::pool::{global_avg_pool, global_avg_pool_backward, spatial_maxpool2, spatial_maxpool2_backward};
use crate::ops::{softmax_cross_entropy, Activation, ConvSpec, Linear, Mode};
use crate::tensor::{
    add, concat_channels, mul, relu, relu_grad, sigmoid, sigmoid_grad, split_channels, Rng, Shape5, Tensor5,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Coordinates probed per tensor (all of them when the tensor is smaller).
const COORDS: usize = 24;
/// At most one probe in this many may be skipped as non-smooth.
const MAX_NONSMOOTH_DENOM: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub seeds: usize,
    pub coords: usize,
    pub nonsmooth: usize,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

/// `|a - n| / max(1, |a|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn pick(len: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|_| rng.below(len)).collect()
}

fn dot(a: &Tensor5, b: &Tensor5) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Per-case accumulator. Probes whose finite difference is itself
/// unstable (a ReLU or max-pool kink lies within the step) are counted as
/// non-smooth and excluded from the error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tally {
    pub worst: f64,
    pub coords: usize,
    pub nonsmooth: usize,
}

impl Tally {
    fn record(&mut self, analytic: f64, numeric: Option<f64>) {
        self.coords += 1;
        match numeric {
            Some(n) => self.worst = self.worst.max(rel_err(analytic, n)),
            None => self.nonsmooth += 1,
        }
    }
}

/// Central difference at `STEP`, or `None` when it disagrees with the one
/// at `STEP / 2` by more than the tolerance.
fn central_difference(mut f: impl FnMut(f64) -> Result<f64>) -> Result<Option<f64>> {
    let mut cd = |h: f64| -> Result<f64> { Ok((f(h)? - f(-h)?) / (2.0 * h)) };
    let coarse = cd(STEP)?;
    let fine = cd(STEP / 2.0)?;
    Ok((rel_err(coarse, fine) < TOLERANCE).then_some(coarse))
}

/// Stateless op with several inputs, checked on the scalar `sum(out * r)`.
struct FnCase<F, B> {
    inputs: Vec<Tensor5>,
    forward: F,
    backward: B,
}

impl<F, B> FnCase<F, B>
where
    F: Fn(&[Tensor5]) -> Result<Tensor5>,
    B: Fn(&[Tensor5], &Tensor5) -> Result<Vec<Tensor5>>,
{
    fn run(mut self, rng: &mut Rng) -> Result<Tally> {
        let out = (self.forward)(&self.inputs)?;
        let r = Tensor5::randn(out.shape(), 1.0, rng)?;
        let grads = (self.backward)(&self.inputs, &r)?;
        let mut tally = Tally::default();
        for i in 0..self.inputs.len() {
            for j in pick(self.inputs[i].len(), COORDS, rng) {
                let orig = self.inputs[i].data()[j];
                let numeric = central_difference(|h| {
                    self.inputs[i].data_mut()[j] = orig + h;
                    let v = dot(&(self.forward)(&self.inputs)?, &r);
                    self.inputs[i].data_mut()[j] = orig;
                    Ok(v)
                })?;
                tally.record(grads[i].data()[j], numeric);
            }
        }
        Ok(tally)
    }
}

fn fn_case<F, B>(inputs: Vec<Tensor5>, forward: F, backward: B, rng: &mut Rng) -> Result<Tally>
where
    F: Fn(&[Tensor5]) -> Result<Tensor5>,
    B: Fn(&[Tensor5], &Tensor5) -> Result<Vec<Tensor5>>,
{
    FnCase { inputs, forward, backward }.run(rng)
}

/// Parameterized module: checks the input gradient and every learnable
/// parameter gradient.
fn module_case<M: Parameterized>(
    module: &mut M,
    x: Tensor5,
    forward: impl Fn(&mut M, &Tensor5) -> Result<Tensor5>,
    backward: impl Fn(&mut M, &Tensor5) -> Result<Tensor5>,
    coords_per_param: usize,
    rng: &mut Rng,
) -> Result<Tally> {
    module.zero_grad();
    let out = forward(module, &x)?;
    let r = Tensor5::randn(out.shape(), 1.0, rng)?;
    let dx = backward(module, &r)?;
    let mut tally = Tally::default();
    let mut x = x;
    for j in pick(x.len(), COORDS, rng) {
        let orig = x.data()[j];
        let numeric = central_difference(|h| {
            x.data_mut()[j] = orig + h;
            let v = dot(&forward(module, &x)?, &r);
            x.data_mut()[j] = orig;
            Ok(v)
        })?;
        tally.record(dx.data()[j], numeric);
    }
    let mut refs = Vec::new();
    module.collect("", &mut refs);
    let targets: Vec<(usize, usize, f64)> = refs
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind.learnable())
        .flat_map(|(i, e)| {
            let grad = e.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; e.tensor.len()]);
            pick(e.tensor.len(), coords_per_param, rng).into_iter().map(move |j| (i, j, grad[j])).collect::<Vec<_>>()
        })
        .collect();
    drop(refs);
    for (i, j, analytic) in targets {
        let nudge = |m: &mut M, delta: f64| {
            let mut v = Vec::new();
            m.collect_mut("", &mut v);
            v[i].tensor.data_mut()[j] += delta;
        };
        let numeric = central_difference(|h| {
            nudge(module, h);
            let v = dot(&forward(module, &x)?, &r);
            nudge(module, -h);
            Ok(v)
        })?;
        tally.record(analytic, numeric);
    }
    Ok(tally)
}

fn layer_case(desc: LayerDesc, shape: impl Into<Shape5>, mode: Mode, rng: &mut Rng) -> Result<Tally> {
    let mut layer = Layer::build(&desc, rng)?;
    perturb_norms(&mut layer, rng);
    let x = Tensor5::randn(shape, 1.0, rng)?;
    module_case(&mut layer, x, move |l, x| l.forward(x, mode), |l, g| l.backward(g), COORDS, rng)
}

/// Randomizes every normalization scale, shift and running statistic so
/// zero-initialized branches still carry gradient.
pub fn perturb_norms(m: &mut impl Parameterized, rng: &mut Rng) {
    let mut v = Vec::new();
    m.collect_mut("", &mut v);
    for e in v {
        let (base, spread) = if e.name.ends_with("gamma") || e.name.ends_with("running_var") {
            (0.5, None)
        } else if e.name.ends_with("beta") || e.name.ends_with("running_mean") {
            (0.0, Some(0.3))
        } else {
            continue;
        };
        for x in e.tensor.data_mut() {
            *x = match spread {
                None => base + rng.uniform(),
                Some(s) => rng.normal() * s,
            };
        }
    }
}

/// Inputs for kinked ops, kept away from the kink by at least 1e-3.
fn away_from_zero(shape: impl Into<Shape5>, rng: &mut Rng) -> Result<Tensor5> {
    Ok(Tensor5::randn(shape, 1.0, rng)?.map(|v| if v.abs() < 1e-3 { v.signum() * 1e-3 + v } else { v }))
}

struct Linear1(Linear);

impl Parameterized for Linear1 {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<crate::ops::layers::NamedRef<'a>>) {
        use crate::ops::layers::{join, NamedRef, ParamKind};
        out.push(NamedRef { name: join(prefix, "weight"), kind: ParamKind::Weight, tensor: &self.0.weight });
        out.push(NamedRef { name: join(prefix, "bias"), kind: ParamKind::Bias, tensor: &self.0.bias });
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<crate::ops::layers::NamedMut<'a>>) {
        use crate::ops::layers::{join, NamedMut, ParamKind};
        out.push(NamedMut { name: join(prefix, "weight"), kind: ParamKind::Weight, tensor: &mut self.0.weight });
        out.push(NamedMut { name: join(prefix, "bias"), kind: ParamKind::Bias, tensor: &mut self.0.bias });
    }
}

/// A small network exercising stem, two T-OSA stages, and the head.
pub fn micro_graph(variant: Variant, num_classes: usize) -> ArchGraph {
    let mut b1 = TOSAConfig::new(variant, 4, 4, 6, true);
    b1.n = 2;
    let mut b2 = TOSAConfig::new(variant, 4, 6, 6, true);
    b2.n = 2;
    ArchGraph {
        name: format!("micro-{}", variant.name()),
        num_classes,
        activation: Activation::Relu,
        stem: StemConfig { c_in: 3, c_out: 4, k: 3, stride: 2, t: 3, temporal: StemTemporal::Depthwise },
        stages: vec![Stage { name: "stage2".into(), blocks: vec![b1] }, Stage { name: "stage3".into(), blocks: vec![b2] }],
        conv5: 8,
        fc1: 6,
    }
}

type CaseFn = fn(&mut Rng) -> Result<Tally>;

fn block_case(spec: BlockSpec, shape: Shape5, rng: &mut Rng) -> Result<Tally> {
    let mut b = Block::build(spec, rng)?;
    perturb_norms(&mut b, rng);
    let x = Tensor5::randn(shape, 1.0, rng)?;
    module_case(&mut b, x, |b, x| b.forward(x, Mode::Train), |b, g| b.backward(g), 6, rng)
}

fn tosa_case(cfg: TOSAConfig, shape: Shape5, rng: &mut Rng) -> Result<Tally> {
    let mut t = Tosa::build(cfg, rng)?;
    perturb_norms(&mut t, rng);
    let x = Tensor5::randn(shape, 1.0, rng)?;
    module_case(&mut t, x, |t, x| t.forward(x, Mode::Train), |t, g| t.backward(g), 3, rng)
}

fn variant_block(v: Variant, stride: usize, rng: &mut Rng) -> Result<Tally> {
    let spec = BlockSpec { stride, c_in: if stride == 2 { 3 } else { 4 }, ..BlockSpec::new(v, 4, 6) };
    block_case(spec, Shape5::new(2, spec.c_in, 3, 5, 5), rng)
}

/// Named checks in a fixed order.
pub fn catalogue() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("add", |rng| {
            let xs = vec![Tensor5::randn((2, 3, 2, 2, 2), 1.0, rng)?, Tensor5::randn((2, 3, 2, 2, 2), 1.0, rng)?];
            fn_case(xs, |x| add(&x[0], &x[1]), |_, g| Ok(vec![g.clone(), g.clone()]), rng)
        }),
        ("mul", |rng| {
            let xs = vec![Tensor5::randn((2, 3, 2, 2, 2), 1.0, rng)?, Tensor5::randn((2, 3, 2, 2, 2), 1.0, rng)?];
            fn_case(xs, |x| mul(&x[0], &x[1]), |x, g| Ok(vec![mul(g, &x[1])?, mul(g, &x[0])?]), rng)
        }),
        ("relu", |rng| {
            let xs = vec![away_from_zero((2, 3, 2, 2, 2), rng)?];
            fn_case(xs, |x| Ok(relu(&x[0])), |x, g| Ok(vec![relu_grad(&x[0], g)?]), rng)
        }),
        ("sigmoid", |rng| {
            let xs = vec![Tensor5::randn((2, 3, 2, 2, 2), 2.0, rng)?];
            fn_case(xs, |x| Ok(sigmoid(&x[0])), |x, g| Ok(vec![sigmoid_grad(&sigmoid(&x[0]), g)?]), rng)
        }),
        ("swish", |rng| layer_case(LayerDesc::Act { kind: Activation::Swish }, (2, 3, 2, 3, 3), Mode::Train, rng)),
        ("concat", |rng| {
            let xs = vec![
                Tensor5::randn((2, 2, 2, 3, 3), 1.0, rng)?,
                Tensor5::randn((2, 3, 2, 3, 3), 1.0, rng)?,
                Tensor5::randn((2, 1, 2, 3, 3), 1.0, rng)?,
            ];
            fn_case(xs, |x| concat_channels(&x.iter().collect::<Vec<_>>()), |_, g| split_channels(g, &[2, 3, 1]), rng)
        }),
        ("conv_full", |rng| layer_case(LayerDesc::Conv(ConvSpec::full(3, 4, 3, 3, 1)?), (2, 3, 3, 5, 5), Mode::Train, rng)),
        ("conv_full_s2", |rng| layer_case(LayerDesc::Conv(ConvSpec::full(3, 2, 3, 3, 2)?), (1, 3, 3, 5, 6), Mode::Train, rng)),
        ("conv_full_spatial", |rng| {
            layer_case(LayerDesc::Conv(ConvSpec::full(3, 4, 1, 3, 2)?), (2, 3, 2, 5, 5), Mode::Train, rng)
        }),
        ("conv_full_temporal", |rng| {
            layer_case(LayerDesc::Conv(ConvSpec::full(3, 4, 3, 1, 1)?), (2, 3, 4, 3, 3), Mode::Train, rng)
        }),
        ("conv_depthwise", |rng| {
            layer_case(LayerDesc::Conv(ConvSpec::depthwise(3, 3, 3, 1)?), (2, 3, 4, 5, 5), Mode::Train, rng)
        }),
        ("conv_depthwise_s2", |rng| {
            layer_case(LayerDesc::Conv(ConvSpec::depthwise(3, 3, 3, 2)?), (2, 3, 3, 5, 6), Mode::Train, rng)
        }),
        ("conv_spatial_dw", |rng| {
            layer_case(LayerDesc::Conv(ConvSpec::depthwise(3, 1, 3, 2)?), (2, 3, 2, 5, 5), Mode::Train, rng)
        }),
        ("conv_temporal_dw", |rng| {
            layer_case(LayerDesc::Conv(ConvSpec::depthwise(3, 5, 1, 1)?), (2, 3, 6, 3, 3), Mode::Train, rng)
        }),
        ("conv_pointwise", |rng| layer_case(LayerDesc::Conv(ConvSpec::pointwise(4, 3)?), (2, 4, 2, 3, 3), Mode::Train, rng)),
        ("batchnorm_train", |rng| layer_case(LayerDesc::Norm { channels: 3 }, (2, 3, 2, 3, 3), Mode::Train, rng)),
        ("batchnorm_eval", |rng| layer_case(LayerDesc::Norm { channels: 3 }, (2, 3, 2, 3, 3), Mode::Eval, rng)),
        ("se", |rng| layer_case(LayerDesc::Se { channels: 6, ratio: 0.5 }, (2, 6, 2, 3, 3), Mode::Train, rng)),
        ("linear", |rng| {
            let mut l = Linear1(Linear::new(5, 3, rng)?);
            let x = Tensor5::randn((2, 5, 1, 1, 1), 1.0, rng)?;
            let xc = x.clone();
            module_case(&mut l, x, |l, x| l.0.forward(x), move |l, g| l.0.backward(g, &xc), COORDS, rng)
        }),
        ("global_avg_pool", |rng| {
            let xs = vec![Tensor5::randn((2, 3, 2, 3, 3), 1.0, rng)?];
            fn_case(xs, |x| global_avg_pool(&x[0]), |x, g| Ok(vec![global_avg_pool_backward(g, x[0].shape())?]), rng)
        }),
        ("maxpool", |rng| {
            let xs = vec![Tensor5::randn((2, 2, 2, 5, 4), 1.0, rng)?];
            fn_case(
                xs,
                |x| spatial_maxpool2(&x[0]).map(|(y, _)| y),
                |x, g| {
                    let (_, arg) = spatial_maxpool2(&x[0])?;
                    Ok(vec![spatial_maxpool2_backward(g, &arg, x[0].shape())?])
                },
                rng,
            )
        }),
        ("softmax_ce", |rng| {
            let labels: Vec<usize> = (0..3).map(|_| rng.below(5)).collect();
            let xs = vec![Tensor5::randn((3, 5, 1, 1, 1), 2.0, rng)?];
            let l2 = labels.clone();
            fn_case(
                xs,
                move |x| Tensor5::from_vec((1, 1, 1, 1, 1), vec![softmax_cross_entropy(&x[0], &labels)?.0]),
                move |x, g| {
                    let (_, d) = softmax_cross_entropy(&x[0], &l2)?;
                    Ok(vec![d.map(|v| v * g.data()[0])])
                },
                rng,
            )
        }),
        ("block_bottleneck", |rng| variant_block(Variant::Bottleneck, 1, rng)),
        ("block_r21d", |rng| variant_block(Variant::R21d, 1, rng)),
        ("block_dw_bottleneck", |rng| variant_block(Variant::DwBottleneck, 1, rng)),
        ("block_d12d", |rng| variant_block(Variant::D12d, 1, rng)),
        ("block_d21d", |rng| variant_block(Variant::D21d, 1, rng)),
        ("block_d12d_s2", |rng| variant_block(Variant::D12d, 2, rng)),
        ("block_d21d_s2", |rng| variant_block(Variant::D21d, 2, rng)),
        ("tosa", |rng| {
            let cfg = TOSAConfig { n: 2, ..TOSAConfig::new(Variant::D21d, 4, 4, 6, false) };
            tosa_case(cfg, Shape5::new(2, 4, 3, 4, 4), rng)
        }),
        ("tosa_downsample", |rng| {
            let cfg = TOSAConfig { n: 2, ..TOSAConfig::new(Variant::D21d, 3, 4, 6, true) };
            tosa_case(cfg, Shape5::new(2, 3, 3, 6, 5), rng)
        }),
        ("network", |rng| {
            let mut m = VoV3D::build(micro_graph(Variant::D21d, 4), rng)?;
            perturb_norms(&mut m, rng);
            let x = Tensor5::randn((2, 3, 3, 24, 24), 1.0, rng)?;
            module_case(&mut m, x, |m, x| m.forward(x, Mode::Train), |m, g| m.backward(g), 1, rng)
        }),
    ]
}

pub fn names() -> Vec<&'static str> {
    catalogue().into_iter().map(|(n, _)| n).collect()
}

/// Runs the named check (or all when `filter` is `None`) over `seeds`
/// seeds starting at `base_seed`.
pub fn run(filter: Option<&str>, seeds: usize, base_seed: u64) -> Result<Vec<CheckOutcome>> {
    let cat = catalogue();
    let selected: Vec<_> = cat.into_iter().filter(|(n, _)| filter.is_none_or(|f| f == *n)).collect();
    if selected.is_empty() {
        return Err(Error::InvalidConfig(format!("no gradient check named `{}`", filter.unwrap_or(""))));
    }
    selected
        .into_iter()
        .map(|(name, case)| {
            let (mut worst, mut worst_seed, mut coords, mut nonsmooth) = (0.0f64, base_seed, 0, 0);
            for s in 0..seeds as u64 {
                let seed = base_seed + s;
                let t = case(&mut Rng::new(seed))?;
                coords += t.coords;
                nonsmooth += t.nonsmooth;
                if t.worst > worst {
                    worst = t.worst;
                    worst_seed = seed;
                }
            }
            // A handful of kink hits is expected; a large share would mean
            // the check is not exercising the gradient at all.
            let passed = worst < TOLERANCE && nonsmooth * MAX_NONSMOOTH_DENOM <= coords;
            Ok(CheckOutcome { name: name.to_string(), seeds, coords, nonsmooth, max_rel_err: worst, worst_seed, passed })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_one_seed() {
        let bad: Vec<_> = run(None, 1, 0).unwrap().into_iter().filter(|o| !o.passed).collect();
        assert!(bad.is_empty(), "{bad:#?}");
    }
}
