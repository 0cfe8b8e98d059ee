//! Parameter and FLOP accounting plus temporal receptive field profiling.
//!
//! Counting convention: one multiply-accumulate is one FLOP. Convolution
//! and fully connected MACs form the comparable total; normalization,
//! activations, pooling, gating and additions are counted per element and
//! reported separately.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::blocks::{TOSAConfig, Variant};
use crate::error::{Error, Result};
use crate::net::{ArchGraph, NodeOp, Size, VoV3D};
use crate::ops::conv::{ConvLayer, ConvMode, ConvSpec};
use crate::ops::layers::{LayerDesc, Parameterized};
use crate::ops::reference::count_conv_macs;
use crate::ops::se::se_reduced_width;
use crate::ops::Activation;
use crate::tensor::{Rng, Shape5, Tensor5};

pub const CONVENTION: &str = "1 MAC = 1 FLOP; comparable total = conv + fc + SE fc MACs";

pub const BN_FLOPS_PER_ELEM: u64 = 2;
pub const ADD_FLOPS_PER_ELEM: u64 = 1;
pub const MAXPOOL_FLOPS_PER_OUTPUT: u64 = 4;
pub const AVGPOOL_FLOPS_PER_INPUT: u64 = 1;

pub fn act_flops_per_elem(act: Activation) -> u64 {
    match act {
        Activation::Relu => 1,
        // sigmoid + product
        Activation::Swish => 2,
    }
}

/// Params and dense MACs of a bottleneck core at `C` channels fed
/// `(C, T, H, W)`, evaluated from the closed forms per factorization.
pub fn analytic_core_cost(variant: Variant, c: u64, t: u64, k: u64, s: u64, len: u64, h: u64, w: u64) -> (u64, u64) {
    let full = len * h * w;
    let strided = len * h.div_ceil(s) * w.div_ceil(s);
    let k2 = k * k;
    match variant {
        Variant::Bottleneck => (c * c * t * k2, c * c * t * k2 * strided),
        Variant::R21d => (c * c * (t + k2), c * c * (t + k2) * strided),
        Variant::DwBottleneck => (c * t * k2, c * t * k2 * strided),
        Variant::D12d => (c * (t + k2), c * t * full + c * k2 * strided),
        Variant::D21d => (c * (t + k2), c * (t + k2) * strided),
    }
}

/// Closed-form params and dense MACs of one convolution.
pub fn analytic_conv_cost(spec: &ConvSpec, input: Shape5) -> Result<(u64, u64)> {
    let spec = spec.validated()?;
    if input.c != spec.c_in {
        return Err(Error::ChannelMismatch { expected: spec.c_in, actual: input.c });
    }
    let group_in = match spec.mode {
        ConvMode::Depthwise => 1,
        _ => spec.c_in as u64,
    };
    let params = spec.c_out as u64 * group_in * (spec.t * spec.k * spec.k) as u64;
    let s = spec.stride;
    let positions = (input.n * input.t * input.h.div_ceil(s) * input.w.div_ceil(s)) as u64;
    Ok((params, params * positions))
}

/// Core cost measured on instantiated layers: weight elements enumerated,
/// MACs counted by walking the reference loop nest.
pub fn empirical_core_cost(variant: Variant, c: usize, t: usize, k: usize, s: usize, input: Shape5) -> Result<(u64, u64)> {
    let mut rng = Rng::new(0);
    let mut shape = input;
    let (mut params, mut macs) = (0u64, 0u64);
    for spec in variant.core_specs(c, t, k, s)? {
        params += ConvLayer::new(spec, &mut rng)?.weight.len() as u64;
        macs += count_conv_macs(shape, &spec)?;
        shape = spec.output_shape(shape)?;
    }
    Ok((params, macs))
}

/// Measured MAC ratio D(1+2)D / D(2+1)D as an exact fraction.
pub fn factorization_ratio(c: usize, t: usize, k: usize, s: usize, input: Shape5) -> Result<(u64, u64)> {
    let (_, d) = empirical_core_cost(Variant::D12d, c, t, k, s, input)?;
    let (_, e) = empirical_core_cost(Variant::D21d, c, t, k, s, input)?;
    Ok((d, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    Conv,
    Norm,
    Act,
    Se,
    Pool,
    Add,
    Concat,
    Fc,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: CostKind,
    pub output: Shape5,
    pub params: u64,
    /// Multiply-accumulates of conv, fc and SE fc layers.
    pub macs: u64,
    /// Per-element work of everything else.
    pub elementwise: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub model: String,
    pub convention: String,
    pub input: Shape5,
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub comparable_flops: u64,
    pub total_flops: u64,
}

impl CostReport {
    fn new(model: String, input: Shape5, rows: Vec<CostRow>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let comparable_flops = rows.iter().map(|r| r.macs).sum();
        let total_flops = comparable_flops + rows.iter().map(|r| r.elementwise).sum::<u64>();
        Self { model, convention: CONVENTION.into(), input, rows, total_params, comparable_flops, total_flops }
    }

    pub fn gflops(&self) -> f64 {
        self.comparable_flops as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn conv_rows(&self) -> impl Iterator<Item = &CostRow> {
        self.rows.iter().filter(|r| r.kind == CostKind::Conv)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let i = self.input;
        let _ = writeln!(s, "# {}  input {}x{}x{}x{}x{}  ({})", self.model, i.n, i.c, i.t, i.h, i.w, self.convention);
        let _ = writeln!(s, "{:width$}  {:7}  {:>22}  {:>10}  {:>14}  {:>12}", "name", "kind", "output", "params", "macs", "elementwise");
        for r in &self.rows {
            let o = r.output;
            let kind = serde_json::to_value(r.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            let out = format!("{}x{}x{}x{}", o.c, o.t, o.h, o.w);
            let _ = writeln!(s, "{:width$}  {kind:7}  {out:>22}  {:>10}  {:>14}  {:>12}", r.name, r.params, r.macs, r.elementwise);
        }
        let _ = writeln!(
            s,
            "total params {} ({:.3}M)  comparable FLOPs {} ({:.3}G)  all FLOPs {} ({:.3}G)",
            self.total_params,
            self.mparams(),
            self.comparable_flops,
            self.gflops(),
            self.total_flops,
            self.total_flops as f64 / 1e9
        );
        s
    }
}

fn row(name: String, kind: CostKind, output: Shape5, params: u64, macs: u64, elementwise: u64) -> CostRow {
    CostRow { name, kind, output, params, macs, elementwise }
}

/// Cost rows with closed-form conv costs; `conv_macs` overrides how conv
/// MACs are obtained.
fn cost_rows(graph: &ArchGraph, input: Shape5, conv_macs: impl Fn(&ConvSpec, Shape5) -> Result<u64>) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    for node in graph.trace(input)? {
        let (i, o) = (node.input, node.output);
        let elems = o.numel() as u64;
        rows.push(match node.op {
            NodeOp::Layer { desc } => match desc {
                LayerDesc::Conv(spec) => {
                    let (p, _) = analytic_conv_cost(&spec, i)?;
                    row(node.name, CostKind::Conv, o, p, conv_macs(&spec, i)?, 0)
                }
                LayerDesc::Norm { channels } => {
                    row(node.name, CostKind::Norm, o, 2 * channels as u64, 0, BN_FLOPS_PER_ELEM * elems)
                }
                LayerDesc::Act { kind } => row(node.name, CostKind::Act, o, 0, 0, act_flops_per_elem(kind) * elems),
                LayerDesc::Se { channels, ratio } => {
                    let (c, r) = (channels as u64, se_reduced_width(channels, ratio) as u64);
                    let n = i.n as u64;
                    // pool + gate multiply, then relu and sigmoid on the descriptors
                    let ew = 2 * elems + n * (r + c);
                    row(node.name, CostKind::Se, o, 2 * c * r + r + c, n * 2 * c * r, ew)
                }
            },
            NodeOp::MaxPool => row(node.name, CostKind::Pool, o, 0, 0, MAXPOOL_FLOPS_PER_OUTPUT * elems),
            NodeOp::GlobalPool => row(node.name, CostKind::Pool, o, 0, 0, AVGPOOL_FLOPS_PER_INPUT * i.numel() as u64),
            NodeOp::Add => row(node.name, CostKind::Add, o, 0, 0, ADD_FLOPS_PER_ELEM * elems),
            NodeOp::Concat { .. } => row(node.name, CostKind::Concat, o, 0, 0, 0),
            NodeOp::Fc { c_in, c_out } => {
                let (ci, co) = (c_in as u64, c_out as u64);
                row(node.name, CostKind::Fc, o, ci * co + co, i.n as u64 * ci * co, 0)
            }
        });
    }
    Ok(rows)
}

/// Closed-form report for `graph` at `input`.
pub fn analytic_cost(graph: &ArchGraph, input: Shape5) -> Result<CostReport> {
    let rows = cost_rows(graph, input, |spec, i| analytic_conv_cost(spec, i).map(|(_, m)| m))?;
    Ok(CostReport::new(graph.name.clone(), input, rows))
}

/// Report measured on an instantiated model: learnable parameters are
/// enumerated per layer from the weight registry and conv MACs come from
/// the instrumented reference loop. Slow; intended for small inputs.
pub fn empirical_cost(graph: &ArchGraph, input: Shape5) -> Result<CostReport> {
    let mut rows = cost_rows(graph, input, |spec, i| count_conv_macs(i, spec))?;
    let model = VoV3D::build(graph.clone(), &mut Rng::new(0))?;
    let mut refs = Vec::new();
    model.collect("", &mut refs);
    let mut by_layer: BTreeMap<&str, u64> = BTreeMap::new();
    for r in refs.iter().filter(|r| r.kind.learnable()) {
        // Parameter names are `<layer>.<param>` or `<layer>.fcN.<param>` for SE.
        let layer = r.name.rsplit_once('.').map_or(r.name.as_str(), |(l, _)| l);
        let layer = layer.strip_suffix(".fc1").or_else(|| layer.strip_suffix(".fc2")).filter(|l| l.ends_with(".se")).unwrap_or(layer);
        *by_layer.entry(layer).or_default() += r.tensor.len() as u64;
    }
    let mut unmatched = by_layer.clone();
    for r in &mut rows {
        r.params = unmatched.remove(r.name.as_str()).unwrap_or(0);
    }
    if let Some(name) = unmatched.keys().next() {
        return Err(Error::UnknownParam(name.to_string()));
    }
    Ok(CostReport::new(graph.name.clone(), input, rows))
}

/// Full-size network ([`crate::net::DEFAULT_CLASSES`] outputs) at one clip of `frames` x `spatial`².
pub fn model_cost(size: Size, variant: Variant, frames: usize, spatial: usize) -> Result<CostReport> {
    let graph = ArchGraph::vov3d(size, variant, crate::net::DEFAULT_CLASSES);
    analytic_cost(&graph, Shape5::new(1, 3, frames, spatial, spatial))
}

/// One positional run of channels sharing a set of receptive fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrfGroup {
    pub channels: usize,
    pub trfs: BTreeSet<usize>,
}

/// Channel groups of one tensor, in channel order.
pub type TrfMap = Vec<TrfGroup>;

fn uniform(channels: usize, trfs: BTreeSet<usize>) -> TrfMap {
    vec![TrfGroup { channels, trfs }]
}

fn union_all(map: &TrfMap) -> BTreeSet<usize> {
    map.iter().flat_map(|g| g.trfs.iter().copied()).collect()
}

fn shift(set: &BTreeSet<usize>, by: usize) -> BTreeSet<usize> {
    set.iter().map(|r| r + by).collect()
}

fn apply_desc(map: TrfMap, desc: &LayerDesc) -> TrfMap {
    match desc {
        LayerDesc::Conv(spec) => match spec.mode {
            ConvMode::Depthwise => {
                map.into_iter().map(|g| TrfGroup { channels: g.channels, trfs: shift(&g.trfs, spec.t - 1) }).collect()
            }
            _ => uniform(spec.c_out, shift(&union_all(&map), spec.t - 1)),
        },
        // Gating is global over time but carries no kernel; treated as
        // pass-through here.
        LayerDesc::Norm { .. } | LayerDesc::Act { .. } | LayerDesc::Se { .. } => map,
    }
}

/// Elementwise sum of two tensors: per-channel union, positions aligned.
fn add_maps(a: &TrfMap, b: &TrfMap) -> TrfMap {
    let expand = |m: &TrfMap| m.iter().flat_map(|g| std::iter::repeat(&g.trfs).take(g.channels)).cloned().collect::<Vec<_>>();
    let (ea, eb) = (expand(a), expand(b));
    let mut out: TrfMap = Vec::new();
    for (x, y) in ea.iter().zip(&eb) {
        let u: BTreeSet<usize> = x.union(y).copied().collect();
        match out.last_mut() {
            Some(g) if g.trfs == u => g.channels += 1,
            _ => out.push(TrfGroup { channels: 1, trfs: u }),
        }
    }
    out
}

fn coalesce(map: TrfMap) -> TrfMap {
    let mut out: TrfMap = Vec::new();
    for g in map {
        match out.last_mut() {
            Some(last) if last.trfs == g.trfs => last.channels += g.channels,
            _ => out.push(g),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrfRow {
    pub name: String,
    pub groups: TrfMap,
}

impl TrfRow {
    pub fn distinct(&self) -> BTreeSet<usize> {
        union_all(&self.groups)
    }

    /// Widest span any channel of this tensor sees.
    pub fn max_trf(&self) -> usize {
        self.distinct().last().copied().unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TRFProfile {
    pub model: String,
    pub rows: Vec<TrfRow>,
}

impl TRFProfile {
    pub fn row(&self, name: &str) -> Option<&TrfRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Receptive field of the last feature map before pooling.
    pub fn features(&self) -> &TrfRow {
        self.rows.iter().rev().find(|r| r.name != "pool5" && !r.name.starts_with("fc")).expect("profile has rows")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("# {} temporal receptive fields (frames)\n", self.model);
        for r in &self.rows {
            let groups: Vec<String> = r
                .groups
                .iter()
                .map(|g| {
                    let set: Vec<String> = g.trfs.iter().map(|t| t.to_string()).collect();
                    format!("{}:{{{}}}", g.channels, set.join(","))
                })
                .collect();
            let _ = writeln!(s, "{:width$}  max {:3}  {}", r.name, r.max_trf(), groups.join(" "));
        }
        s
    }
}

struct Profiler {
    rows: Vec<TrfRow>,
}

impl Profiler {
    fn push(&mut self, name: String, map: &TrfMap) {
        self.rows.push(TrfRow { name, groups: map.clone() });
    }

    fn seq(&mut self, prefix: &str, descs: Vec<(String, LayerDesc)>, mut map: TrfMap) -> TrfMap {
        for (name, desc) in descs {
            map = coalesce(apply_desc(map, &desc));
            self.push(crate::ops::layers::join(prefix, &name), &map);
        }
        map
    }

    fn tosa(&mut self, prefix: &str, cfg: &TOSAConfig, input: TrfMap) -> Result<(TrfMap, TrfMap)> {
        let mut parts = vec![input.clone()];
        let mut h = input.clone();
        for (i, spec) in cfg.block_specs().into_iter().enumerate() {
            let mp = crate::ops::layers::join(prefix, &format!("m{}", i + 1));
            let mut out = self.seq(&mp, spec.layer_descs()?, h.clone());
            if spec.residual() {
                out = add_maps(&out, &h);
                self.push(crate::ops::layers::join(&mp, "residual"), &out);
            }
            parts.push(out.clone());
            h = out;
        }
        let concat = coalesce(parts.into_iter().flatten().collect());
        self.push(crate::ops::layers::join(prefix, "concat"), &concat);
        let mut out = self.seq(prefix, cfg.reduce_descs()?, concat.clone());
        if cfg.outer_residual() {
            out = add_maps(&out, &input);
            self.push(crate::ops::layers::join(prefix, "residual"), &out);
        }
        Ok((concat, out))
    }
}

/// Post-concat and post-block receptive fields of one T-OSA fed `input`.
pub fn tosa_trf(cfg: &TOSAConfig, input: TrfMap) -> Result<(TrfMap, TrfMap)> {
    Profiler { rows: Vec::new() }.tosa("", cfg, input)
}

/// Input map where every channel has receptive field `trf`.
pub fn single_trf(channels: usize, trf: usize) -> TrfMap {
    uniform(channels, BTreeSet::from([trf]))
}

/// Receptive fields of every tensor in `graph`, starting from single frames.
/// Temporal jump is 1 throughout: time is never downsampled.
pub fn trf_profile(graph: &ArchGraph) -> Result<TRFProfile> {
    graph.validate()?;
    let mut p = Profiler { rows: Vec::new() };
    let mut map = single_trf(graph.stem.c_in, 1);
    p.push("input".into(), &map);
    map = p.seq("stem", graph.stem.layer_descs(graph.activation)?, map);
    for (prefix, cfg) in graph.blocks() {
        map = p.tosa(&prefix, cfg, map)?.1;
    }
    map = p.seq("", graph.head_descs()?, map);
    let pooled = uniform(graph.conv5, union_all(&map));
    p.push("pool5".into(), &pooled);
    p.push("fc1".into(), &uniform(graph.fc1, union_all(&pooled)));
    p.push("fc2".into(), &uniform(graph.num_classes, union_all(&pooled)));
    Ok(TRFProfile { model: graph.name.clone(), rows: p.rows })
}

/// Frame-perturbation oracle: number of input frames whose change alters
/// the centre frame of the pre-pool features, on an `(1, 3, frames, h, w)`
/// random input. Run with gating disabled so time mixes only through
/// temporal kernels.
pub fn measure_trf_span(model: &VoV3D, frames: usize, spatial: usize, rng: &mut Rng) -> Result<usize> {
    let shape = Shape5::new(1, model.graph.stem.c_in, frames, spatial, spatial);
    let x = Tensor5::randn(shape, 1.0, rng)?;
    let base = model.features(&x)?;
    let centre = frames / 2;
    let mut influenced = 0;
    for f in 0..frames {
        let mut xp = x.clone();
        for c in 0..shape.c {
            for h in 0..spatial {
                for w in 0..spatial {
                    let v = xp.at(0, c, f, h, w) + 1.0 + rng.normal();
                    xp.set(0, c, f, h, w, v);
                }
            }
        }
        let out = model.features(&xp)?;
        let fs = base.shape();
        let changed = (0..fs.c).any(|c| {
            (0..fs.h * fs.w).any(|p| {
                let (h, w) = (p / fs.w, p % fs.w);
                base.at(0, c, centre, h, w) != out.at(0, c, centre, h, w)
            })
        });
        influenced += changed as usize;
    }
    Ok(influenced)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_row_e_instance() {
        let (p, f) = analytic_core_cost(Variant::D21d, 40, 3, 3, 1, 8, 32, 32);
        assert_eq!((p, f), (480, 3_932_160));
    }

    #[test]
    fn stacked_temporal_convs() {
        let a = single_trf(4, 1);
        let a = apply_desc(a, &LayerDesc::Conv(ConvSpec::depthwise(4, 3, 1, 1).unwrap()));
        assert_eq!(union_all(&a), BTreeSet::from([3]));
        let a = apply_desc(a, &LayerDesc::Conv(ConvSpec::depthwise(4, 3, 1, 1).unwrap()));
        assert_eq!(union_all(&a), BTreeSet::from([5]));
        let a = apply_desc(a, &LayerDesc::Conv(ConvSpec::pointwise(4, 2).unwrap()));
        assert_eq!(union_all(&a), BTreeSet::from([5]));
    }
}
