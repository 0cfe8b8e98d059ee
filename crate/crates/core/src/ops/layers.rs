//! Stateful layers: each owns its parameters, caches what its backward pass
//! needs during a train-mode forward, and exposes a cache-free `infer`.

use serde::{Deserialize, Serialize};

use super::conv::{conv3d_backward, conv3d_forward, ConvLayer, ConvSpec};
use super::norm::{batchnorm, batchnorm_backward, batchnorm_infer, BatchNormCache, BatchNormState};
use super::se::{se_backward, se_forward, SeCache, SeWeights};
use super::{Activation, Mode};
use crate::error::{Error, Result};
use crate::tensor::{relu, relu_grad, sigmoid_scalar, Rng, Shape5, Tensor5};

/// How the optimizer treats a registry entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Normalization scale/shift; excluded from weight decay.
    NormAffine,
    /// Non-learned state such as running statistics.
    Buffer,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        self != ParamKind::Buffer
    }

    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Weight | ParamKind::Bias)
    }
}

pub struct NamedRef<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a Tensor5,
}

pub struct NamedMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: &'a mut Tensor5,
}

/// Deterministic, order-stable enumeration of named tensors.
pub trait Parameterized {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>);

    fn param_count(&self) -> u64 {
        let mut v = Vec::new();
        self.collect("", &mut v);
        v.iter().filter(|e| e.kind.learnable()).map(|e| e.tensor.len() as u64).sum()
    }

    fn zero_grad(&mut self) {
        let mut v = Vec::new();
        self.collect_mut("", &mut v);
        v.into_iter().for_each(|e| e.tensor.zero_grad());
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Static description of one layer, enough to build it or cost it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv(ConvSpec),
    Norm { channels: usize },
    Act { kind: Activation },
    Se { channels: usize, ratio: f64 },
}

impl LayerDesc {
    pub fn output_shape(&self, input: Shape5) -> Result<Shape5> {
        match self {
            LayerDesc::Conv(spec) => spec.output_shape(input),
            LayerDesc::Norm { channels } | LayerDesc::Se { channels, .. } => {
                if input.c != *channels {
                    return Err(Error::ChannelMismatch { expected: *channels, actual: input.c });
                }
                Ok(input)
            }
            LayerDesc::Act { .. } => Ok(input),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub layer: ConvLayer,
    input: Option<Tensor5>,
}

impl Conv {
    pub fn new(spec: ConvSpec, rng: &mut Rng) -> Result<Self> {
        Ok(Self { layer: ConvLayer::new(spec, rng)?, input: None })
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let y = conv3d_forward(x, &self.layer)?;
        if mode == Mode::Train {
            self.input = Some(x.detach());
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        conv3d_forward(x, &self.layer)
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        let x = self.input.take().ok_or_else(missing_cache)?;
        let (dx, dw) = conv3d_backward(g, &x, &self.layer)?;
        self.layer.weight.accumulate_grad(&dw)?;
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub state: BatchNormState,
    cache: Option<BatchNormCache>,
}

impl Norm {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self { state: BatchNormState::new(channels)?, cache: None })
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let (y, cache) = batchnorm(x, &mut self.state, mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        batchnorm_infer(x, &self.state)
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        let cache = self.cache.take().ok_or_else(missing_cache)?;
        batchnorm_backward(g, &cache, &mut self.state)
    }
}

pub fn activate(kind: Activation, x: &Tensor5) -> Tensor5 {
    match kind {
        Activation::Relu => relu(x),
        Activation::Swish => x.map(|v| v * sigmoid_scalar(v)),
    }
}

pub fn activate_grad(kind: Activation, x: &Tensor5, g: &Tensor5) -> Result<Tensor5> {
    match kind {
        Activation::Relu => relu_grad(x, g),
        Activation::Swish => {
            let mut out = g.detach();
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                let s = sigmoid_scalar(v);
                *o *= s + v * s * (1.0 - s);
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Act {
    pub kind: Activation,
    input: Option<Tensor5>,
}

impl Act {
    pub fn new(kind: Activation) -> Self {
        Self { kind, input: None }
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        if mode == Mode::Train {
            self.input = Some(x.detach());
        }
        Ok(activate(self.kind, x))
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        Ok(activate(self.kind, x))
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        let x = self.input.take().ok_or_else(missing_cache)?;
        activate_grad(self.kind, &x, g)
    }
}

#[derive(Debug, Clone)]
pub struct Se {
    pub weights: SeWeights,
    cache: Option<SeCache>,
}

impl Se {
    pub fn new(channels: usize, ratio: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self { weights: SeWeights::new(channels, ratio, rng)?, cache: None })
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let (y, cache) = se_forward(x, &self.weights)?;
        if mode == Mode::Train {
            self.cache = Some(cache);
        }
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        se_forward(x, &self.weights).map(|(y, _)| y)
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        let cache = self.cache.take().ok_or_else(missing_cache)?;
        se_backward(g, &cache, &mut self.weights)
    }
}

pub(crate) fn missing_cache() -> Error {
    Error::InvalidConfig("backward called without a preceding train-mode forward".into())
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv),
    Norm(Norm),
    Act(Act),
    Se(Se),
}

impl Layer {
    pub fn build(desc: &LayerDesc, rng: &mut Rng) -> Result<Self> {
        Ok(match *desc {
            LayerDesc::Conv(spec) => Layer::Conv(Conv::new(spec, rng)?),
            LayerDesc::Norm { channels } => Layer::Norm(Norm::new(channels)?),
            LayerDesc::Act { kind } => Layer::Act(Act::new(kind)),
            LayerDesc::Se { channels, ratio } => Layer::Se(Se::new(channels, ratio, rng)?),
        })
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        match self {
            Layer::Conv(l) => l.forward(x, mode),
            Layer::Norm(l) => l.forward(x, mode),
            Layer::Act(l) => l.forward(x, mode),
            Layer::Se(l) => l.forward(x, mode),
        }
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::Norm(l) => l.infer(x),
            Layer::Act(l) => l.infer(x),
            Layer::Se(l) => l.infer(x),
        }
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        match self {
            Layer::Conv(l) => l.backward(g),
            Layer::Norm(l) => l.backward(g),
            Layer::Act(l) => l.backward(g),
            Layer::Se(l) => l.backward(g),
        }
    }
}

impl Parameterized for Layer {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a>>) {
        let mut push = |name: &str, kind, tensor| out.push(NamedRef { name: join(prefix, name), kind, tensor });
        match self {
            Layer::Conv(l) => push("weight", ParamKind::Weight, &l.layer.weight),
            Layer::Norm(l) => {
                push("gamma", ParamKind::NormAffine, &l.state.gamma);
                push("beta", ParamKind::NormAffine, &l.state.beta);
                push("running_mean", ParamKind::Buffer, &l.state.running_mean);
                push("running_var", ParamKind::Buffer, &l.state.running_var);
            }
            Layer::Act(_) => {}
            Layer::Se(l) => {
                push("fc1.weight", ParamKind::Weight, &l.weights.fc1.weight);
                push("fc1.bias", ParamKind::Bias, &l.weights.fc1.bias);
                push("fc2.weight", ParamKind::Weight, &l.weights.fc2.weight);
                push("fc2.bias", ParamKind::Bias, &l.weights.fc2.bias);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        let mut push = |name: &str, kind, tensor| out.push(NamedMut { name: join(prefix, name), kind, tensor });
        match self {
            Layer::Conv(l) => push("weight", ParamKind::Weight, &mut l.layer.weight),
            Layer::Norm(l) => {
                push("gamma", ParamKind::NormAffine, &mut l.state.gamma);
                push("beta", ParamKind::NormAffine, &mut l.state.beta);
                push("running_mean", ParamKind::Buffer, &mut l.state.running_mean);
                push("running_var", ParamKind::Buffer, &mut l.state.running_var);
            }
            Layer::Act(_) => {}
            Layer::Se(l) => {
                push("fc1.weight", ParamKind::Weight, &mut l.weights.fc1.weight);
                push("fc1.bias", ParamKind::Bias, &mut l.weights.fc1.bias);
                push("fc2.weight", ParamKind::Weight, &mut l.weights.fc2.weight);
                push("fc2.bias", ParamKind::Bias, &mut l.weights.fc2.bias);
            }
        }
    }
}

/// Named chain of layers run in order.
#[derive(Debug, Clone, Default)]
pub struct Seq {
    pub layers: Vec<(String, Layer)>,
}

impl Seq {
    pub fn build(descs: &[(String, LayerDesc)], rng: &mut Rng) -> Result<Self> {
        let layers = descs
            .iter()
            .map(|(name, d)| Ok((name.clone(), Layer::build(d, rng)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&mut self, x: &Tensor5, mode: Mode) -> Result<Tensor5> {
        let mut h = x.detach();
        for (_, l) in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: &Tensor5) -> Result<Tensor5> {
        let mut h = x.detach();
        for (_, l) in &self.layers {
            h = l.infer(&h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, g: &Tensor5) -> Result<Tensor5> {
        let mut g = g.detach();
        for (_, l) in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|(n, _)| n == name).map(|(_, l)| l)
    }
}

impl Parameterized for Seq {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a>>) {
        for (name, l) in &self.layers {
            l.collect(&join(prefix, name), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a>>) {
        for (name, l) in &mut self.layers {
            l.collect_mut(&join(prefix, name), out);
        }
    }
}
