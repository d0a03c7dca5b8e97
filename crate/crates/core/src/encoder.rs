//! Gradient-isolated encoder modules and the stack built from them.
//!
//! Module `m` maps `z^{m-1}` to `z^m = g_m(grad_block(z^{m-1}))`; module 0
//! reads raw data. Sequences use `[batch, channels, time]` layout and patch
//! grids use `[batch * patches, channels, height, width]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Param, ParamIds, Var};
use crate::error::{GimError, Result};
use crate::kernels::conv_out_len;
use crate::params::{glorot_uniform, HasParams};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    Conv2d,
    Relu,
    MeanPool,
}

impl LayerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv1d" => Some(Self::Conv1d),
            "conv2d" => Some(Self::Conv2d),
            "relu" => Some(Self::Relu),
            "mean_pool" => Some(Self::MeanPool),
            _ => None,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Conv1d => "conv1d",
            Self::Conv2d => "conv2d",
            Self::Relu => "relu",
            Self::MeanPool => "mean_pool",
        })
    }
}

/// One layer record. Kernel, stride and pad apply to every spatial axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerSpec {
    pub fn conv1d(channels_in: usize, channels_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv1d,
            channels_in,
            channels_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn conv2d(channels_in: usize, channels_out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv2d,
            ..Self::conv1d(channels_in, channels_out, kernel, stride, pad)
        }
    }

    pub fn relu(channels: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            channels_in: channels,
            channels_out: channels,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn mean_pool(channels: usize) -> Self {
        Self {
            kind: LayerKind::MeanPool,
            ..Self::relu(channels)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Sequence,
    PatchGrid,
}

/// Channel count and spatial extents of an activation (batch axis excluded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ActShape {
    pub channels: usize,
    pub extents: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub input_kind: InputKind,
    pub input_channels: usize,
    /// Layer records per module, in order.
    pub modules: Vec<Vec<LayerSpec>>,
}

impl StackConfig {
    /// Equal-width conv stack with a ReLU after every conv except each module's last.
    pub fn uniform(
        input_kind: InputKind,
        input_channels: usize,
        width: usize,
        modules: usize,
        convs_per_module: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let mut c_in = input_channels;
        let mods = (0..modules)
            .map(|_| {
                let mut layers = Vec::new();
                for l in 0..convs_per_module {
                    let spec = match input_kind {
                        InputKind::Sequence => LayerSpec::conv1d(c_in, width, kernel, stride, pad),
                        InputKind::PatchGrid => LayerSpec::conv2d(c_in, width, kernel, stride, pad),
                    };
                    layers.push(spec);
                    c_in = width;
                    if l + 1 < convs_per_module {
                        layers.push(LayerSpec::relu(width));
                    }
                }
                layers
            })
            .collect();
        Self {
            input_kind,
            input_channels,
            modules: mods,
        }
    }

    pub fn module_count(&self) -> usize {
        self.modules.len()
    }

    pub fn out_dim(&self, module: usize) -> usize {
        self.modules[module]
            .last()
            .map_or(self.input_channels, |l| l.channels_out)
    }

    pub fn top_dim(&self) -> usize {
        self.out_dim(self.modules.len() - 1)
    }

    /// Checks channel chaining and kernel/extent compatibility, returning the
    /// declared output shape of every layer of every module.
    pub fn declared_shapes(&self, input_extents: &[usize]) -> Result<Vec<Vec<ActShape>>> {
        if self.modules.is_empty() {
            return Err(GimError::invalid("stack", "a stack needs at least one module"));
        }
        let spatial = match self.input_kind {
            InputKind::Sequence => 1,
            InputKind::PatchGrid => 2,
        };
        if input_extents.len() != spatial {
            return Err(GimError::invalid(
                "stack",
                format!("{:?} input needs {spatial} extents, got {input_extents:?}", self.input_kind),
            ));
        }
        let mut cur = ActShape {
            channels: self.input_channels,
            extents: input_extents.to_vec(),
        };
        let mut all = Vec::with_capacity(self.modules.len());
        for (m, layers) in self.modules.iter().enumerate() {
            if layers.is_empty() {
                return Err(boundary(m, "module has no layers"));
            }
            let mut shapes = Vec::with_capacity(layers.len());
            for (l, spec) in layers.iter().enumerate() {
                if spec.channels_in != cur.channels {
                    let msg = format!(
                        "layer {l} ({}) expects {} channels but receives {}",
                        spec.kind, spec.channels_in, cur.channels
                    );
                    return Err(if l == 0 { boundary(m, &msg) } else { inner(m, msg) });
                }
                if cur.extents.is_empty() && spec.kind != LayerKind::Relu {
                    return Err(inner(m, format!("layer {l} ({}) follows a pooled vector", spec.kind)));
                }
                match spec.kind {
                    LayerKind::Conv1d | LayerKind::Conv2d => {
                        let want = if spec.kind == LayerKind::Conv1d { 1 } else { 2 };
                        if cur.extents.len() != want {
                            return Err(inner(m, format!("layer {l} ({}) on a rank-{} activation", spec.kind, cur.extents.len())));
                        }
                        if spec.stride == 0 || spec.kernel == 0 {
                            return Err(inner(m, format!("layer {l}: kernel and stride must be >= 1")));
                        }
                        let ext = cur
                            .extents
                            .iter()
                            .map(|&e| conv_out_len(e, spec.kernel, spec.stride, spec.pad))
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| inner(m, format!("layer {l}: {e}")))?;
                        cur = ActShape {
                            channels: spec.channels_out,
                            extents: ext,
                        };
                    }
                    LayerKind::Relu => {
                        if spec.channels_out != spec.channels_in {
                            return Err(inner(m, format!("layer {l}: relu cannot change channels")));
                        }
                    }
                    LayerKind::MeanPool => {
                        if spec.channels_out != spec.channels_in {
                            return Err(inner(m, format!("layer {l}: mean_pool cannot change channels")));
                        }
                        cur.extents.clear();
                    }
                }
                shapes.push(cur.clone());
            }
            all.push(shapes);
        }
        Ok(all)
    }
}

fn boundary(m: usize, msg: &str) -> GimError {
    GimError::StackBoundary {
        left: m.saturating_sub(1),
        right: m,
        msg: msg.to_string(),
    }
}

fn inner(m: usize, msg: String) -> GimError {
    GimError::invalid("stack", format!("module {m}: {msg}"))
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv { spec: LayerSpec, weight: Param, bias: Param },
    Relu,
    MeanPool,
}

/// One gradient-isolated encoder module.
#[derive(Clone, Debug)]
pub struct EncoderModule {
    pub index: usize,
    pub layers: Vec<Layer>,
    pub out_dim: usize,
}

impl HasParams for EncoderModule {
    fn params(&self) -> Vec<&Param> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias, .. } => vec![weight, bias],
                _ => vec![],
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias, .. } => vec![weight, bias],
                _ => vec![],
            })
            .collect()
    }
}

/// Builds every module with Glorot-uniform weights and zero biases.
///
/// Weights of module `m` are drawn from the `(m, 0, Init)` stream of `seed`.
pub fn build_stack(config: &StackConfig, input_extents: &[usize], seed: u64, ids: &mut ParamIds) -> Result<Vec<EncoderModule>> {
    config.declared_shapes(input_extents)?;
    let mut stack = Vec::with_capacity(config.modules.len());
    for (m, specs) in config.modules.iter().enumerate() {
        let mut rng = SeededRng::derive(seed, m as u64, 0, crate::rng::Purpose::Init);
        let mut layers = Vec::with_capacity(specs.len());
        for (l, spec) in specs.iter().enumerate() {
            let layer = match spec.kind {
                LayerKind::Conv1d | LayerKind::Conv2d => {
                    let taps = if spec.kind == LayerKind::Conv1d {
                        spec.kernel
                    } else {
                        spec.kernel * spec.kernel
                    };
                    let mut shape = vec![spec.channels_out, spec.channels_in, spec.kernel];
                    if spec.kind == LayerKind::Conv2d {
                        shape.push(spec.kernel);
                    }
                    let weight = Param {
                        id: ids.alloc(),
                        name: format!("enc{m}.layer{l}.weight"),
                        value: glorot_uniform(&shape, spec.channels_in * taps, spec.channels_out * taps, &mut rng),
                    };
                    let bias = Param {
                        id: ids.alloc(),
                        name: format!("enc{m}.layer{l}.bias"),
                        value: Tensor::zeros(&[spec.channels_out]),
                    };
                    Layer::Conv {
                        spec: *spec,
                        weight,
                        bias,
                    }
                }
                LayerKind::Relu => Layer::Relu,
                LayerKind::MeanPool => Layer::MeanPool,
            };
            layers.push(layer);
        }
        stack.push(EncoderModule {
            index: m,
            layers,
            out_dim: config.out_dim(m),
        });
    }
    Ok(stack)
}

impl EncoderModule {
    /// Applies the layers to `x` without any gradient blocking.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { spec, weight, bias } => {
                    let w = g.param(weight);
                    let b = g.param(bias);
                    match spec.kind {
                        LayerKind::Conv1d => g.conv1d(h, w, Some(b), spec.stride, spec.pad)?,
                        _ => g.conv2d(h, w, Some(b), spec.stride, spec.pad)?,
                    }
                }
                Layer::Relu => g.relu(h),
                Layer::MeanPool => {
                    let rank = g.shape(h).len();
                    let h2 = g.mean_pool(h, &(2..rank).collect::<Vec<_>>())?;
                    h2
                }
            };
        }
        Ok(h)
    }

    /// Forward values only, on a throwaway graph.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let out = self.apply(&mut g, v)?;
        Ok(g.value(out).clone())
    }

    pub fn conv_specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv { spec, .. } => Some(spec),
            _ => None,
        })
    }
}

/// `z^m = g_m(grad_block(z^{m-1}))`, with raw input for module 0.
pub fn encode(module: &EncoderModule, g: &mut Graph, z_prev: Var) -> Result<Var> {
    let input = if module.index == 0 { z_prev } else { g.grad_block(z_prev) };
    module.apply(g, input)
}

/// Per-module outputs of a stack forward pass.
#[derive(Clone, Debug)]
pub struct StackOutput {
    pub per_module: Vec<Var>,
}

impl StackOutput {
    pub fn top(&self) -> Var {
        *self.per_module.last().expect("stacks are non-empty")
    }
}

pub fn stack_forward(stack: &[EncoderModule], g: &mut Graph, x: Var) -> Result<StackOutput> {
    let mut per_module = Vec::with_capacity(stack.len());
    let mut z = x;
    for module in stack {
        z = encode(module, g, z)?;
        per_module.push(z);
    }
    Ok(StackOutput { per_module })
}

/// The same composition with no gradient blocking between modules.
pub fn stack_forward_unblocked(stack: &[EncoderModule], g: &mut Graph, x: Var) -> Result<StackOutput> {
    let mut per_module = Vec::with_capacity(stack.len());
    let mut z = x;
    for module in stack {
        z = module.apply(g, z)?;
        per_module.push(z);
    }
    Ok(StackOutput { per_module })
}

/// Value-only forward through a chain of modules, returning every module output.
pub fn eval_chain(stack: &[EncoderModule], x: &Tensor) -> Result<Vec<Tensor>> {
    let mut outs = Vec::with_capacity(stack.len());
    let mut cur = x.clone();
    for module in stack {
        cur = module.eval(&cur)?;
        outs.push(cur.clone());
    }
    Ok(outs)
}

/// One row of a conv shape audit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AuditRow {
    pub layer: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub input_len: usize,
    pub computed: usize,
    pub published: Option<usize>,
}

impl AuditRow {
    pub fn consistent(&self) -> bool {
        self.published.is_none_or(|p| p == self.computed)
    }
}

/// Runs the shape calculus over a chain of 1D conv layers and compares each
/// output length with a published value, if one is given.
pub fn audit_conv_lengths(input_len: usize, layers: &[(usize, usize, usize)], published: &[usize]) -> Result<Vec<AuditRow>> {
    let mut len = input_len;
    let mut rows = Vec::with_capacity(layers.len());
    for (i, &(k, s, p)) in layers.iter().enumerate() {
        let out = conv_out_len(len, k, s, p)?;
        rows.push(AuditRow {
            layer: i + 1,
            kernel: k,
            stride: s,
            pad: p,
            input_len: len,
            computed: out,
            published: published.get(i).copied(),
        });
        len = out;
    }
    Ok(rows)
}

/// The five strided convolutions of the audio encoder (kernel, stride, pad).
pub const AUDIO_CONVS: [(usize, usize, usize); 5] = [(10, 5, 2), (8, 4, 2), (4, 2, 2), (4, 2, 2), (1, 2, 1)];
/// Output lengths as published for a 20480-sample input.
pub const AUDIO_PUBLISHED_LENGTHS: [usize; 5] = [4095, 1023, 512, 257, 128];
pub const AUDIO_INPUT_LEN: usize = 20480;

/// The audio-shaped encoder as a single-module stack of five strided convs.
pub fn audio_stack_config(width: usize) -> StackConfig {
    let mut layers = Vec::new();
    let mut c_in = 1;
    for (i, &(k, s, p)) in AUDIO_CONVS.iter().enumerate() {
        layers.push(LayerSpec::conv1d(c_in, width, k, s, p));
        c_in = width;
        if i + 1 < AUDIO_CONVS.len() {
            layers.push(LayerSpec::relu(width));
        }
    }
    StackConfig {
        input_kind: InputKind::Sequence,
        input_channels: 1,
        modules: vec![layers],
    }
}

/// Runtime output shapes of every layer, for comparison with [`StackConfig::declared_shapes`].
pub fn runtime_shapes(stack: &[EncoderModule], x: &Tensor) -> Result<Vec<Vec<Vec<usize>>>> {
    let mut g = Graph::new();
    let mut h = g.input(x.clone());
    let mut all = Vec::new();
    for module in stack {
        let mut shapes = Vec::new();
        for layer in &module.layers {
            let single = EncoderModule {
                index: module.index,
                layers: vec![layer.clone()],
                out_dim: module.out_dim,
            };
            h = single.apply(&mut g, h)?;
            shapes.push(g.shape(h).to_vec());
        }
        all.push(shapes);
    }
    Ok(all)
}
