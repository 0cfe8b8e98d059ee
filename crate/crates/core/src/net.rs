//! Whole-network builders, execution, and the weight registry.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{Tosa, TOSAConfig, Variant};
use crate::error::{Error, Result};
use crate::ops::layers::{activate, activate_grad, join, LayerDesc, NamedMut, NamedRef, ParamKind, Parameterized, Seq};
use crate::ops::{global_avg_pool, global_avg_pool_backward, Activation, ConvSpec, Linear, Mode};
use crate::tensor::{Rng, Shape5, Tensor5};

/// Label count of Something-Something V2.
pub const DEFAULT_CLASSES: usize = 174;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Size {
    M,
    L,
}

impl std::str::FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" | "m" => Ok(Size::M),
            "L" | "l" => Ok(Size::L),
            _ => Err(Error::InvalidConfig(format!("unknown size `{s}` (expected M or L)"))),
        }
    }
}

struct SizeTable {
    repeats: [usize; 4],
    stage_out: [usize; 4],
    inner: [usize; 4],
    conv5: usize,
}

impl Size {
    fn table(self) -> SizeTable {
        match self {
            Size::M => SizeTable {
                repeats: [1, 1, 2, 2],
                stage_out: [24, 48, 96, 160],
                inner: [40, 80, 160, 320],
                conv5: 320,
            },
            Size::L => SizeTable {
                repeats: [1, 2, 5, 3],
                stage_out: [24, 48, 96, 192],
                inner: [48, 96, 192, 384],
                conv5: 384,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemTemporal {
    Depthwise,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StemConfig {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub t: usize,
    pub temporal: StemTemporal,
}

impl StemConfig {
    pub fn layer_descs(&self, act: Activation) -> Result<Vec<(String, LayerDesc)>> {
        let temporal = match self.temporal {
            StemTemporal::Depthwise => ConvSpec::depthwise(self.c_out, self.t, 1, 1)?,
            StemTemporal::Full => ConvSpec::full(self.c_out, self.c_out, self.t, 1, 1)?,
        };
        let act = LayerDesc::Act { kind: act };
        Ok(vec![
            ("spatial".into(), LayerDesc::Conv(ConvSpec::full(self.c_in, self.c_out, 1, self.k, self.stride)?)),
            ("spatial_bn".into(), LayerDesc::Norm { channels: self.c_out }),
            ("spatial_act".into(), act),
            ("temporal".into(), LayerDesc::Conv(temporal)),
            ("temporal_bn".into(), LayerDesc::Norm { channels: self.c_out }),
            ("temporal_act".into(), act),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub blocks: Vec<TOSAConfig>,
}

/// Full network description; round-trips through TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchGraph {
    pub name: String,
    pub num_classes: usize,
    pub activation: Activation,
    pub stem: StemConfig,
    pub stages: Vec<Stage>,
    pub conv5: usize,
    pub fc1: usize,
}

/// Static shape/parameter row of one network node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeTrace {
    pub name: String,
    pub op: NodeOp,
    pub input: Shape5,
    pub output: Shape5,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeOp {
    Layer { desc: LayerDesc },
    MaxPool,
    Concat { parts: usize },
    Add,
    GlobalPool,
    Fc { c_in: usize, c_out: usize },
}

impl ArchGraph {
    pub fn vov3d(size: Size, variant: Variant, num_classes: usize) -> Self {
        let tab = size.table();
        let name = format!("vov3d-{}-{}", if size == Size::M { "m" } else { "l" }, variant.name());
        Self::assemble(name, variant, num_classes, tab.repeats, tab.stage_out, tab.inner, tab.conv5)
    }

    /// Desk-scale profile: one T-OSA per stage, inner widths halved from M
    /// but never below the stage width.
    pub fn tiny(variant: Variant, num_classes: usize) -> Self {
        let tab = Size::M.table();
        let inner = std::array::from_fn(|i| (tab.inner[i] / 2).max(tab.stage_out[i]));
        Self::assemble(format!("vov3d-tiny-{}", variant.name()), variant, num_classes, [1; 4], tab.stage_out, inner, tab.conv5)
    }

    fn assemble(
        name: String,
        variant: Variant,
        num_classes: usize,
        repeats: [usize; 4],
        stage_out: [usize; 4],
        inner: [usize; 4],
        conv5: usize,
    ) -> Self {
        let stem = StemConfig { c_in: 3, c_out: 24, k: 3, stride: 2, t: 5, temporal: StemTemporal::Depthwise };
        let mut c = stem.c_out;
        let stages = (0..4)
            .map(|i| {
                let blocks = (0..repeats[i])
                    .map(|b| {
                        let cfg = TOSAConfig::new(variant, c, stage_out[i], inner[i], b == 0);
                        c = stage_out[i];
                        cfg
                    })
                    .collect();
                Stage { name: format!("stage{}", i + 2), blocks }
            })
            .collect();
        Self { name, num_classes, activation: Activation::Relu, stem, stages, conv5, fc1: 2048 }
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut TOSAConfig> {
        self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut())
    }

    pub fn blocks(&self) -> impl Iterator<Item = (String, &TOSAConfig)> {
        self.stages
            .iter()
            .flat_map(|s| s.blocks.iter().enumerate().map(move |(i, b)| (format!("{}.b{}", s.name, i + 1), b)))
    }

    /// Sets every temporal kernel (stem and blocks) to `t`.
    pub fn with_temporal_kernel(mut self, t: usize) -> Self {
        self.stem.t = t;
        self.blocks_mut().for_each(|b| b.t = t);
        self
    }

    /// Control network with no cross-frame operator.
    pub fn spatial_only(self) -> Self {
        let name = format!("{}-spatial", self.name);
        Self { name, ..self.with_temporal_kernel(1) }
    }

    pub fn with_inner_modules(mut self, n: usize) -> Self {
        self.blocks_mut().for_each(|b| b.n = n);
        self.name = format!("{}-n{n}", self.name);
        self
    }

    pub fn with_se(mut self, use_se: bool) -> Self {
        self.blocks_mut().for_each(|b| b.use_se = use_se);
        self
    }

    pub fn with_activation(mut self, act: Activation) -> Self {
        self.activation = act;
        self.blocks_mut().for_each(|b| b.activation = act);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.fc1 == 0 || self.conv5 == 0 {
            return Err(Error::InvalidConfig("head widths must be positive".into()));
        }
        let mut c = self.stem.c_out;
        for (name, b) in self.blocks() {
            if b.c_in != c {
                return Err(Error::InvalidConfig(format!("{name}: expects {} input channels, previous emits {c}", b.c_in)));
            }
            b.validate()?;
            c = b.c_stage;
        }
        self.stem.layer_descs(self.activation).map(|_| ())
    }

    pub fn last_channels(&self) -> usize {
        self.blocks().last().map_or(self.stem.c_out, |(_, b)| b.c_stage)
    }

    pub fn head_descs(&self) -> Result<Vec<(String, LayerDesc)>> {
        Ok(vec![
            ("conv5".into(), LayerDesc::Conv(ConvSpec::pointwise(self.last_channels(), self.conv5)?)),
            ("conv5_bn".into(), LayerDesc::Norm { channels: self.conv5 }),
            ("conv5_act".into(), LayerDesc::Act { kind: self.activation }),
        ])
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let g: ArchGraph = toml::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    /// Shape propagation over every node, in execution order.
    pub fn trace(&self, input: Shape5) -> Result<Vec<NodeTrace>> {
        self.validate()?;
        let expected = Shape5 { c: self.stem.c_in, ..input };
        if input != expected {
            return Err(Error::ShapeMismatch { expected, actual: input });
        }
        let mut rows = Vec::new();
        let push_seq = |rows: &mut Vec<NodeTrace>, prefix: &str, descs: Vec<(String, LayerDesc)>, mut s: Shape5| {
            for (name, desc) in descs {
                let out = desc.output_shape(s)?;
                rows.push(NodeTrace { name: join(prefix, &name), op: NodeOp::Layer { desc }, input: s, output: out });
                s = out;
            }
            Ok::<Shape5, Error>(s)
        };
        let mut s = push_seq(&mut rows, "stem", self.stem.layer_descs(self.activation)?, input)?;
        for (prefix, cfg) in self.blocks() {
            let x0 = if cfg.downsample {
                let p = Shape5::new(s.n, s.c, s.t, s.h.div_ceil(2), s.w.div_ceil(2));
                rows.push(NodeTrace { name: join(&prefix, "pool"), op: NodeOp::MaxPool, input: s, output: p });
                p
            } else {
                s
            };
            let mut h = s;
            for (i, spec) in cfg.block_specs().into_iter().enumerate() {
                let mp = join(&prefix, &format!("m{}", i + 1));
                let out = push_seq(&mut rows, &mp, spec.layer_descs()?, h)?;
                if spec.residual() {
                    rows.push(NodeTrace { name: join(&mp, "residual"), op: NodeOp::Add, input: out, output: out });
                }
                rows.push(NodeTrace {
                    name: join(&mp, "out_act"),
                    op: NodeOp::Layer { desc: LayerDesc::Act { kind: spec.activation } },
                    input: out,
                    output: out,
                });
                h = out;
            }
            let agg = h.with_c(cfg.concat_channels());
            rows.push(NodeTrace { name: join(&prefix, "concat"), op: NodeOp::Concat { parts: cfg.n + 1 }, input: h, output: agg });
            s = push_seq(&mut rows, &prefix, cfg.reduce_descs()?, agg)?;
            if cfg.outer_residual() {
                debug_assert_eq!(x0, s);
                rows.push(NodeTrace { name: join(&prefix, "residual"), op: NodeOp::Add, input: s, output: s });
            }
        }
        let s = push_seq(&mut rows, "", self.head_descs()?, s)?;
        let pooled = Shape5::new(s.n, s.c, 1, 1, 1);
        rows.push(NodeTrace { name: "pool5".into(), op: NodeOp::GlobalPool, input: s, output: pooled });
        let f1 = pooled.with_c(self.fc1);
        rows.push(NodeTrace { name: "fc1".into(), op: NodeOp::Fc { c_in: s.c, c_out: self.fc1 }, input: pooled, output: f1 });
        rows.push(NodeTrace {
            name: "fc1_act".into(),
            op: NodeOp::Layer { desc: LayerDesc::Act { kind: self.activation } },
            input: f1,
            output: f1,
        });
        let f2 = pooled.with_c(self.num_classes);
        rows.push(NodeTrace { name: "fc2".into(), op: NodeOp::Fc { c_in: self.fc1, c_out: self.num_classes }, input: f1, output: f2 });
        Ok(rows)
    }

    /// Coarse per-stage rows: `(name, output shape)` for conv1, each stage,
    /// conv5, pool5, fc1, fc2.
    pub fn stage_shapes(&self, input: Shape5) -> Result<Vec<(String, Shape5)>> {
        let trace = self.trace(input)?;
        let last_of = |prefix: &str| {
            trace.iter().rev().find(|r| r.name.starts_with(prefix)).map(|r| r.output).expect("traced node")
        };
        let mut rows = vec![("conv1".to_string(), last_of("stem."))];
        for st in &self.stages {
            rows.push((st.name.clone(), last_of(&format!("{}.", st.name))));
        }
        for name in ["conv5", "pool5", "fc1", "fc2"] {
            rows.push((name.to_string(), last_of(name)));
        }
        Ok(rows)
    }
}

/// Executable network.
#[derive(Debug, Clone)]
pub struct VoV3D {
    pub graph: ArchGraph,
    pub stem: Seq,
    pub stages: Vec<(String, Tosa)>,
    pub head: Seq,
    pub fc1: Linear,
    pub fc2: Linear,
    cache: Option<HeadCache>,
}

#[derive(Debug, Clone)]
struct HeadCache {
    features: Shape5,
    pooled: Tensor5,
    z1: Tensor5,
    a1: Tensor5,
}

pub fn build_vov3d(size: Size, variant: Variant, num_classes: usize, rng: &mut Rng) -> Result<VoV3D> {
    VoV3D::build(ArchGraph::vov3d(size, variant, num_classes), rng)
}

impl VoV3D {
    pub fn build(graph: ArchGraph, rng: &mut Rng) -> Result<Self> {
        graph.validate()?;
        let stem = Seq::build(&graph.stem.layer_descs(graph.activation)?, rng)?;
        let stages = graph
            .blocks()
            .map(|(name, cfg)| Ok((name, Tosa::build(*cfg, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        let head = Seq::build(&graph.head_descs()?, rng)?;
        let fc1 = Linear::new(graph.conv5, graph.fc1, rng)?;
        let fc2 = Linear::new(graph.fc1, graph.num_classes, rng)?;
        Ok(Self { graph, stem, stages, head, fc1, fc2, cache: None })
    }

    fn check_input(&self, x: &Tensor5) -> Result<()> {
        if x.shape().c != self.graph.stem.c_in {
            return Err(Error::ChannelMismatch { expected: self.graph.stem.c_in, actual: x.shape().c });
        }
        Ok(())
    }

    /// Activation entering global pooling.
    pub fn features(&self, x: &Tensor5) -> Result<Tensor5> {
        self.check_input(x)?;
        let mut h = self.stem.infer(x)?;
        for (_, s) in &self.stages {
            h = s.infer(&h)?;
        }
        self.head.infer(&h)
    }

    /// Eval-mode logits `(N, classes, 1, 1, 1)`; leaves all state untouched.
    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        let f = self.features(x)?;
        let pooled = global_avg_pool(&f)?;
        let a1 = activate(self.graph.activation, &self.fc1.forward(&pooled)?);
        self.fc2.forward(&a1)
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x, mode)?;
        for (_, s) in &mut self.stages {
            h = s.forward(&h, mode)?;
        }
        let f = self.head.forward(&h, mode)?;
        let pooled = global_avg_pool(&f)?;
        let z1 = self.fc1.forward(&pooled)?;
        let a1 = activate(self.graph.activation, &z1);
        let logits = self.fc2.forward(&a1)?;
        self.cache = Some(HeadCache { features: f.shape(), pooled, z1, a1 });
        Ok(logits)
    }

    /// Backpropagates logits gradient, accumulating parameter gradients.
    pub fn backward(&mut self, dlogits: &Tensor5) -> Result<Tensor5> {
        let c = self.cache.take().ok_or_else(crate::ops::layers::missing_cache)?;
        let da1 = self.fc2.backward(dlogits, &c.a1)?;
        let dz1 = activate_grad(self.graph.activation, &c.z1, &da1)?;
        let dpooled = self.fc1.backward(&dz1, &c.pooled)?;
        let mut g = global_avg_pool_backward(&dpooled, c.features)?;
        g = self.head.backward(&g)?;
        for (_, s) in self.stages.iter_mut().rev() {
            g = s.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    pub fn num_params(&self) -> u64 {
        self.param_count()
    }

    pub fn weights(&self) -> ModelWeights {
        let mut v = Vec::new();
        self.collect("", &mut v);
        ModelWeights {
            entries: v.into_iter().map(|e| WeightEntry { name: e.name, kind: e.kind, tensor: e.tensor.detach() }).collect(),
        }
    }

    /// Copies values from `w`; names and shapes must match exactly.
    pub fn load_weights(&mut self, w: &ModelWeights) -> Result<()> {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        if v.len() != w.entries.len() {
            return Err(Error::Format(format!("registry has {} entries, file has {}", v.len(), w.entries.len())));
        }
        for (dst, src) in v.into_iter().zip(&w.entries) {
            if dst.name != src.name {
                return Err(Error::UnknownParam(format!("expected `{}`, found `{}`", dst.name, src.name)));
            }
            if dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::ShapeMismatch { expected: dst.tensor.shape(), actual: src.tensor.shape() });
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

impl Parameterized for VoV3D {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a>>) {
        self.stem.collect(&join(prefix, "stem"), out);
        for (name, s) in &self.stages {
            s.collect(&join(prefix, name), out);
        }
        self.head.collect(prefix, out);
        for (name, fc) in [("fc1", &self.fc1), ("fc2", &self.fc2)] {
            let p = join(prefix, name);
            out.push(NamedRef { name: join(&p, "weight"), kind: ParamKind::Weight, tensor: &fc.weight });
            out.push(NamedRef { name: join(&p, "bias"), kind: ParamKind::Bias, tensor: &fc.bias });
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        self.stem.collect_mut(&join(prefix, "stem"), out);
        for (name, s) in &mut self.stages {
            s.collect_mut(&join(prefix, name), out);
        }
        self.head.collect_mut(prefix, out);
        for (name, fc) in [("fc1", &mut self.fc1), ("fc2", &mut self.fc2)] {
            let p = join(prefix, name);
            out.push(NamedMut { name: join(&p, "weight"), kind: ParamKind::Weight, tensor: &mut fc.weight });
            out.push(NamedMut { name: join(&p, "bias"), kind: ParamKind::Bias, tensor: &mut fc.bias });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Shape5,
    pub count: usize,
    pub learnable: bool,
}

pub fn param_registry(model: &VoV3D) -> Vec<ParamInfo> {
    let mut v = Vec::new();
    model.collect("", &mut v);
    v.into_iter()
        .map(|e| ParamInfo { name: e.name, shape: e.tensor.shape(), count: e.tensor.len(), learnable: e.kind.learnable() })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor5,
}

/// Flat registry snapshot with a binary container format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    pub entries: Vec<WeightEntry>,
}

const WEIGHTS_MAGIC: &[u8; 8] = b"VOV3DW01";

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::NormAffine => 2,
        ParamKind::Buffer => 3,
    }
}

impl ModelWeights {
    pub fn get(&self, name: &str) -> Option<&Tensor5> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.name.len() as u32).to_le_bytes())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[kind_code(e.kind)])?;
            e.tensor.write_to(&mut w)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Format("not a weights container".into()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let count = u64::from_le_bytes(b8) as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let mut k = [0u8; 1];
            r.read_exact(&mut k)?;
            let kind = match k[0] {
                0 => ParamKind::Weight,
                1 => ParamKind::Bias,
                2 => ParamKind::NormAffine,
                3 => ParamKind::Buffer,
                c => return Err(Error::Format(format!("bad entry kind {c}"))),
            };
            entries.push(WeightEntry { name, kind, tensor: Tensor5::read_from(&mut r)? });
        }
        Ok(Self { entries })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_widths_are_clamped() {
        let g = ArchGraph::tiny(Variant::D21d, 8);
        let inner: Vec<_> = g.blocks().map(|(_, b)| b.c_inner).collect();
        assert_eq!(inner, [24, 48, 96, 160]);
    }

    #[test]
    fn toml_round_trip() {
        let g = ArchGraph::vov3d(Size::L, Variant::D12d, 400).with_temporal_kernel(5);
        let text = g.to_toml().unwrap();
        assert_eq!(ArchGraph::from_toml(&text).unwrap(), g);
    }

    #[test]
    fn stem_registry_counts() {
        let m = VoV3D::build(ArchGraph::tiny(Variant::D21d, 8), &mut Rng::new(0)).unwrap();
        let reg = param_registry(&m);
        let find = |n: &str| reg.iter().find(|p| p.name == n).unwrap().count;
        assert_eq!(find("stem.spatial.weight"), 648);
        assert_eq!(find("stem.temporal.weight"), 120);
        assert_eq!(find("fc2.weight") + find("fc2.bias"), 2048 * 8 + 8);
    }
}
