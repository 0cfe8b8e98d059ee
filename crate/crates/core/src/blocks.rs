//! Bottleneck variants and the temporal one-shot aggregation (T-OSA) block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::layers::{join, Act, Layer, LayerDesc, NamedMut, NamedRef, Parameterized, Seq};
use crate::ops::{spatial_maxpool2, spatial_maxpool2_backward, Activation, ConvSpec, Mode};
use crate::tensor::{concat_channels, split_channels, Rng, Shape5, Tensor5};

pub const DEFAULT_SE_RATIO: f64 = 1.0 / 16.0;

/// Core convolution arrangement inside a bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// (a) full `t x k x k`.
    Bottleneck,
    /// (b) full `1 x k x k` then full `t x 1 x 1`.
    R21d,
    /// (c) depthwise `t x k x k`.
    DwBottleneck,
    /// (d) temporal depthwise then strided spatial depthwise.
    D12d,
    /// (e) strided spatial depthwise then temporal depthwise.
    D21d,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Bottleneck, Variant::R21d, Variant::DwBottleneck, Variant::D12d, Variant::D21d];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Bottleneck => "bottleneck",
            Variant::R21d => "r21d",
            Variant::DwBottleneck => "dw_bottleneck",
            Variant::D12d => "d12d",
            Variant::D21d => "d21d",
        }
    }

    /// Ablation letter, `a` through `e`.
    pub fn row(self) -> char {
        match self {
            Variant::Bottleneck => 'a',
            Variant::R21d => 'b',
            Variant::DwBottleneck => 'c',
            Variant::D12d => 'd',
            Variant::D21d => 'e',
        }
    }

    /// Core convolutions at width `c`, in execution order.
    pub fn core_specs(self, c: usize, t: usize, k: usize, s: usize) -> Result<Vec<ConvSpec>> {
        Ok(match self {
            Variant::Bottleneck => vec![ConvSpec::full(c, c, t, k, s)?],
            Variant::R21d => vec![ConvSpec::full(c, c, 1, k, s)?, ConvSpec::full(c, c, t, 1, 1)?],
            Variant::DwBottleneck => vec![ConvSpec::depthwise(c, t, k, s)?],
            Variant::D12d => vec![ConvSpec::depthwise(c, t, 1, 1)?, ConvSpec::depthwise(c, 1, k, s)?],
            Variant::D21d => vec![ConvSpec::depthwise(c, 1, k, s)?, ConvSpec::depthwise(c, t, 1, 1)?],
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || s.len() == 1 && s.starts_with(v.row()))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One bottleneck module.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub variant: Variant,
    /// Input channels; differs from `c_io` only at a stage entry.
    pub c_in: usize,
    pub c_io: usize,
    pub c_inner: usize,
    pub t: usize,
    pub k: usize,
    pub stride: usize,
    pub use_se: bool,
    pub se_ratio: f64,
    pub activation: Activation,
}

impl BlockSpec {
    pub fn new(variant: Variant, c_io: usize, c_inner: usize) -> Self {
        Self {
            variant,
            c_in: c_io,
            c_io,
            c_inner,
            t: 3,
            k: 3,
            stride: 1,
            use_se: true,
            se_ratio: DEFAULT_SE_RATIO,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_inner < self.c_io {
            return Err(Error::InvalidConfig(format!("c_inner {} < c_io {}", self.c_inner, self.c_io)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::InvalidConfig(format!("block stride must be 1 or 2, got {}", self.stride)));
        }
        if self.c_in == 0 {
            return Err(Error::InvalidConfig("c_in must be positive".into()));
        }
        self.core_specs().map(|_| ())
    }

    pub fn residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_io
    }

    pub fn core_specs(&self) -> Result<Vec<ConvSpec>> {
        self.variant.core_specs(self.c_inner, self.t, self.k, self.stride)
    }

    pub fn expand_spec(&self) -> Result<ConvSpec> {
        ConvSpec::pointwise(self.c_in, self.c_inner)
    }

    pub fn project_spec(&self) -> Result<ConvSpec> {
        ConvSpec::pointwise(self.c_inner, self.c_io)
    }

    /// Layer list of the residual branch (the trailing activation is applied
    /// after the residual add and is not part of it).
    pub fn layer_descs(&self) -> Result<Vec<(String, LayerDesc)>> {
        self.validate()?;
        let act = LayerDesc::Act { kind: self.activation };
        let c = self.c_inner;
        let mut v = vec![
            ("expand".to_string(), LayerDesc::Conv(self.expand_spec()?)),
            ("expand_bn".to_string(), LayerDesc::Norm { channels: c }),
            ("expand_act".to_string(), act),
        ];
        let core = self.core_specs()?;
        let last = core.len() - 1;
        for (i, spec) in core.into_iter().enumerate() {
            v.push((format!("core{i}"), LayerDesc::Conv(spec)));
            v.push((format!("core{i}_bn"), LayerDesc::Norm { channels: c }));
            if i < last {
                v.push((format!("core{i}_act"), act));
            }
        }
        if self.use_se {
            v.push(("se".to_string(), LayerDesc::Se { channels: c, ratio: self.se_ratio }));
        }
        v.push(("core_act".to_string(), act));
        v.push(("project".to_string(), LayerDesc::Conv(self.project_spec()?)));
        v.push(("project_bn".to_string(), LayerDesc::Norm { channels: self.c_io }));
        Ok(v)
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        let mut s = input;
        for (_, d) in self.layer_descs()? {
            s = d.output_shape(s)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub spec: BlockSpec,
    pub body: Seq,
    out_act: Act,
}

impl Block {
    /// Residual blocks start with a zero `project_bn` scale so each begins
    /// as an identity map.
    pub fn build(spec: BlockSpec, rng: &mut Rng) -> Result<Self> {
        let mut body = Seq::build(&spec.layer_descs()?, rng)?;
        if spec.residual() {
            if let Some(Layer::Norm(n)) = body.layer_mut("project_bn") {
                n.state.gamma.data_mut().fill(0.0);
            }
        }
        Ok(Self { spec, body, out_act: Act::new(spec.activation) })
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let mut h = self.body.forward(x, mode)?;
        if self.spec.residual() {
            add_into(&mut h, x)?;
        }
        self.out_act.forward(&h, mode)
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        let mut h = self.body.infer(x)?;
        if self.spec.residual() {
            add_into(&mut h, x)?;
        }
        self.out_act.infer(&h)
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        let g = self.out_act.backward(g)?;
        let mut dx = self.body.backward(&g)?;
        if self.spec.residual() {
            add_into(&mut dx, &g)?;
        }
        Ok(dx)
    }
}

impl Parameterized for Block {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a>>) {
        self.body.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        self.body.collect_mut(prefix, out);
    }
}

pub(crate) fn add_into(acc: &mut Tensor5, x: &Tensor5) -> Result<()> {
    if acc.shape() != x.shape() {
        return Err(Error::ShapeMismatch { expected: acc.shape(), actual: x.shape() });
    }
    acc.data_mut().iter_mut().zip(x.data()).for_each(|(a, b)| *a += b);
    Ok(())
}

/// One T-OSA block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TOSAConfig {
    pub n: usize,
    pub c_in: usize,
    pub c_stage: usize,
    pub c_inner: usize,
    pub downsample: bool,
    pub inner_variant: Variant,
    pub t: usize,
    pub k: usize,
    pub use_se: bool,
    pub se_ratio: f64,
    pub activation: Activation,
}

impl TOSAConfig {
    pub fn new(variant: Variant, c_in: usize, c_stage: usize, c_inner: usize, downsample: bool) -> Self {
        Self {
            n: 5,
            c_in,
            c_stage,
            c_inner,
            downsample,
            inner_variant: variant,
            t: 3,
            k: 3,
            use_se: true,
            se_ratio: DEFAULT_SE_RATIO,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("T-OSA needs n >= 1".into()));
        }
        self.block_specs().iter().try_for_each(BlockSpec::validate)
    }

    pub fn block_specs(&self) -> Vec<BlockSpec> {
        (0..self.n)
            .map(|i| BlockSpec {
                variant: self.inner_variant,
                c_in: if i == 0 { self.c_in } else { self.c_stage },
                c_io: self.c_stage,
                c_inner: self.c_inner,
                t: self.t,
                k: self.k,
                stride: if i == 0 && self.downsample { 2 } else { 1 },
                use_se: self.use_se,
                se_ratio: self.se_ratio,
                activation: self.activation,
            })
            .collect()
    }

    /// Channels of the concatenated aggregate: `X_0` plus `n` block outputs.
    pub fn concat_channels(&self) -> usize {
        self.c_in + self.n * self.c_stage
    }

    pub fn outer_residual(&self) -> bool {
        self.c_in == self.c_stage
    }

    pub fn reduce_descs(&self) -> Result<Vec<(String, LayerDesc)>> {
        Ok(vec![
            ("reduce".to_string(), LayerDesc::Conv(ConvSpec::pointwise(self.concat_channels(), self.c_stage)?)),
            ("reduce_bn".to_string(), LayerDesc::Norm { channels: self.c_stage }),
            ("reduce_act".to_string(), LayerDesc::Act { kind: self.activation }),
        ])
    }

    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        if input.c != self.c_in {
            return Err(Error::ChannelMismatch { expected: self.c_in, actual: input.c });
        }
        let mut s = input;
        for b in self.block_specs() {
            s = b.output_shape(s)?;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone)]
pub struct Tosa {
    pub config: TOSAConfig,
    pub blocks: Vec<Block>,
    pub reduce: Seq,
    pool: Option<(Vec<usize>, Shape5)>,
}

impl Tosa {
    pub fn build(config: TOSAConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let blocks = config.block_specs().into_iter().map(|s| Block::build(s, rng)).collect::<Result<Vec<_>>>()?;
        Ok(Self { config, blocks, reduce: Seq::build(&config.reduce_descs()?, rng)?, pool: None })
    }

    fn identity_branch(&self, x: &Tensor5) -> Result<(Tensor5, Option<Vec<usize>>)> {
        if self.config.downsample {
            let (p, arg) = spatial_maxpool2(x)?;
            Ok((p, Some(arg)))
        } else {
            Ok((x.detach(), None))
        }
    }

    fn check_input(&self, x: &Tensor5) -> Result<()> {
        if x.shape().c != self.config.c_in {
            return Err(Error::ChannelMismatch { expected: self.config.c_in, actual: x.shape().c });
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        self.check_input(x)?;
        let (x0, arg) = self.identity_branch(x)?;
        self.pool = arg.map(|a| (a, x.shape()));
        let mut feats = vec![x0];
        let mut h = x.detach();
        for b in &mut self.blocks {
            h = b.forward(&h, mode)?;
            feats.push(h.detach());
        }
        let agg = concat_channels(&feats.iter().collect::<Vec<_>>())?;
        let mut out = self.reduce.forward(&agg, mode)?;
        if self.config.outer_residual() {
            add_into(&mut out, &feats[0])?;
        }
        Ok(out)
    }

    /// Concatenated aggregate `[X_0, X_1, ..., X_n]` in eval mode.
    pub fn forward_aggregate(&self, x: &Tensor5) -> Result<Tensor5> {
        self.check_input(x)?;
        let (x0, _) = self.identity_branch(x)?;
        let mut feats = vec![x0];
        let mut h = x.detach();
        for b in &self.blocks {
            h = b.infer(&h)?;
            feats.push(h.detach());
        }
        concat_channels(&feats.iter().collect::<Vec<_>>())
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        let agg = self.forward_aggregate(x)?;
        let mut out = self.reduce.infer(&agg)?;
        if self.config.outer_residual() {
            let (x0, _) = self.identity_branch(x)?;
            add_into(&mut out, &x0)?;
        }
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        let g_agg = self.reduce.backward(g)?;
        let mut widths = vec![self.config.c_in];
        widths.extend(std::iter::repeat(self.config.c_stage).take(self.config.n));
        let mut parts = split_channels(&g_agg, &widths)?;
        let mut g_x0 = parts.remove(0);
        if self.config.outer_residual() {
            add_into(&mut g_x0, g)?;
        }
        let mut g_h = parts.pop().expect("n >= 1");
        for i in (0..self.blocks.len()).rev() {
            let g_in = self.blocks[i].backward(&g_h)?;
            g_h = match parts.pop() {
                Some(mut skip) => {
                    add_into(&mut skip, &g_in)?;
                    skip
                }
                None => g_in,
            };
        }
        let g_x0 = match self.pool.take() {
            Some((arg, shape)) => spatial_maxpool2_backward(&g_x0, &arg, shape)?,
            None => g_x0,
        };
        add_into(&mut g_h, &g_x0)?;
        Ok(g_h)
    }
}

impl Parameterized for Tosa {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("m{}", i + 1)), out);
        }
        self.reduce.collect(prefix, out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("m{}", i + 1)), out);
        }
        self.reduce.collect_mut(prefix, out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::layers::Layer;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(v.row().to_string().parse::<Variant>().unwrap(), v);
        }
        assert!("d3d".parse::<Variant>().is_err());
    }

    #[test]
    fn layout_of_d21d_block() {
        let spec = BlockSpec::new(Variant::D21d, 24, 40);
        let names: Vec<_> = spec.layer_descs().unwrap().into_iter().map(|(n, _)| n).collect();
        assert_eq!(
            names,
            [
                "expand", "expand_bn", "expand_act", "core0", "core0_bn", "core0_act", "core1", "core1_bn", "se",
                "core_act", "project", "project_bn"
            ]
        );
    }

    #[test]
    fn stage_entry_shapes() {
        let cfg = TOSAConfig::new(Variant::D21d, 24, 48, 80, true);
        let out = cfg.output_shape(Shape5::new(1, 24, 4, 9, 9)).unwrap();
        assert_eq!(out, Shape5::new(1, 48, 4, 5, 5));
        assert_eq!(cfg.concat_channels(), 24 + 5 * 48);
        assert!(!cfg.outer_residual());
        let mut rng = Rng::new(1);
        let mut tosa = Tosa::build(cfg, &mut rng).unwrap();
        let x = Tensor5::randn((2, 24, 4, 9, 9), 1.0, &mut rng).unwrap();
        let y = tosa.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), Shape5::new(2, 48, 4, 5, 5));
        let dx = tosa.backward(&Tensor5::fill(y.shape(), 1.0).unwrap()).unwrap();
        assert_eq!(dx.shape(), x.shape());
    }

    #[test]
    fn registry_names_are_unique() {
        let cfg = TOSAConfig::new(Variant::R21d, 8, 8, 8, false);
        let tosa = Tosa::build(cfg, &mut Rng::new(0)).unwrap();
        let mut v = Vec::new();
        tosa.collect("stage2.b1", &mut v);
        let mut names: Vec<_> = v.iter().map(|e| e.name.clone()).collect();
        assert!(names.contains(&"stage2.b1.m3.core1.weight".to_string()));
        assert!(names.contains(&"stage2.b1.reduce_bn.running_var".to_string()));
        let len = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), len);
    }

    #[test]
    fn conv_layers_match_specs() {
        let spec = BlockSpec { stride: 2, ..BlockSpec::new(Variant::D12d, 16, 32) };
        let b = Block::build(spec, &mut Rng::new(5)).unwrap();
        let convs: Vec<_> = b
            .body
            .layers
            .iter()
            .filter_map(|(_, l)| match l {
                Layer::Conv(c) => Some(c.layer.spec),
                _ => None,
            })
            .collect();
        assert_eq!(convs.len(), 4);
        assert_eq!(convs[2].stride, 2);
        assert_eq!((convs[1].t, convs[1].k), (3, 1));
    }
}
