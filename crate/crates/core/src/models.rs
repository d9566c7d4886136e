//! The three CNNs (`conv4-pn`, `conv5-maml`, `conv8`), parameter
//! initialization, and quantized forward passes.

use std::fmt;
use std::str::FromStr;

use bitadapt_tensor::{Graph, Real, Tensor, Var, BN_EPS};
use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{quantize_activations, quantize_weights, Bitwidth, BitwidthTask};

/// Named parameter tensors in layer order.
pub type Params<T = f32> = IndexMap<String, Tensor<T>>;

/// Graph handles for a bound [`Params`] set.
pub type ParamVars = IndexMap<String, Var>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "conv4-pn")]
    Conv4Pn,
    #[serde(rename = "conv5-maml")]
    Conv5Maml,
    #[serde(rename = "conv8")]
    Conv8,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Conv4Pn => "conv4-pn",
            ModelKind::Conv5Maml => "conv5-maml",
            ModelKind::Conv8 => "conv8",
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            ModelKind::Conv4Pn => 64,
            ModelKind::Conv5Maml => 32,
            ModelKind::Conv8 => 64,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv4-pn" => Ok(ModelKind::Conv4Pn),
            "conv5-maml" => Ok(ModelKind::Conv5Maml),
            "conv8" => Ok(ModelKind::Conv8),
            other => Err(Error::Model(format!(
                "unknown model kind `{other}` (expected conv4-pn, conv5-maml or conv8)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        ceil: bool,
    },
    Flatten,
    Linear {
        name: String,
        in_features: usize,
        out_features: usize,
    },
}

impl Layer {
    fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Linear { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputRole {
    Logits(usize),
    Embedding(usize),
}

impl OutputRole {
    pub fn dim(self) -> usize {
        match self {
            OutputRole::Logits(d) | OutputRole::Embedding(d) => d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub width: usize,
    /// `[channels, height, width]` of one sample.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub output: OutputRole,
}

/// Which layers escape quantization. BN parameters are never quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct QuantPolicy {
    pub quantize_first_layer: bool,
    pub quantize_last_layer: bool,
}

impl QuantPolicy {
    pub fn quantize_bn(&self) -> bool {
        false
    }
}

/// Builds a model with the default filter width for `kind`.
///
/// `outputs` is the number of classes for classifiers. For `conv4-pn` it is
/// the expected embedding size, or 0 to accept whatever the input yields.
pub fn build_model(kind: ModelKind, outputs: usize, input_shape: [usize; 3]) -> Result<ModelSpec> {
    build_model_with_width(kind, outputs, input_shape, kind.default_width())
}

pub fn build_model_with_width(
    kind: ModelKind,
    outputs: usize,
    input_shape: [usize; 3],
    width: usize,
) -> Result<ModelSpec> {
    if width == 0 || input_shape.contains(&0) {
        return Err(Error::Model(format!(
            "width {width} and input {input_shape:?} must be positive"
        )));
    }
    if kind != ModelKind::Conv4Pn && outputs == 0 {
        return Err(Error::Model(format!(
            "{kind} needs at least one output class"
        )));
    }
    let mut b = Builder::new(input_shape[0]);
    match kind {
        ModelKind::Conv4Pn | ModelKind::Conv5Maml => {
            let ceil = kind == ModelKind::Conv5Maml;
            for _ in 0..4 {
                b.conv_block(width);
                b.layers.push(Layer::MaxPool {
                    kernel: 2,
                    stride: 2,
                    ceil,
                });
            }
            b.layers.push(Layer::Flatten);
            if kind == ModelKind::Conv5Maml {
                b.linear("fc", outputs, None);
            }
        }
        ModelKind::Conv8 => {
            for (i, mult) in [1, 1, 2, 2, 4, 4].into_iter().enumerate() {
                b.conv_block(width * mult);
                if i % 2 == 1 {
                    b.layers.push(Layer::MaxPool {
                        kernel: 2,
                        stride: 2,
                        ceil: false,
                    });
                }
            }
            b.layers.push(Layer::Flatten);
            b.linear("fc1", width * 8, Some("bn7"));
            b.layers.push(Layer::Relu);
            b.linear("fc2", outputs, None);
        }
    }
    let mut spec = ModelSpec {
        kind,
        width,
        input_shape,
        layers: b.layers,
        output: OutputRole::Logits(outputs),
    };
    let dim = spec.infer_output_dim()?;
    spec.output = match kind {
        ModelKind::Conv4Pn => {
            if outputs != 0 && outputs != dim {
                return Err(Error::Model(format!(
                    "conv4-pn with width {width} on {input_shape:?} embeds into {dim} dims, not {outputs}"
                )));
            }
            OutputRole::Embedding(dim)
        }
        _ => OutputRole::Logits(dim),
    };
    Ok(spec)
}

struct Builder {
    layers: Vec<Layer>,
    channels: usize,
    convs: usize,
}

impl Builder {
    fn new(channels: usize) -> Self {
        Builder {
            layers: Vec::new(),
            channels,
            convs: 0,
        }
    }

    fn conv_block(&mut self, out: usize) {
        self.convs += 1;
        self.layers.push(Layer::Conv {
            name: format!("conv{}", self.convs),
            in_channels: self.channels,
            out_channels: out,
            kernel: 3,
            stride: 1,
            padding: 1,
        });
        self.layers.push(Layer::BatchNorm {
            name: format!("bn{}", self.convs),
            channels: out,
        });
        self.layers.push(Layer::Relu);
        self.channels = out;
    }

    /// `in_features` is patched during shape inference.
    fn linear(&mut self, name: &str, out: usize, bn: Option<&str>) {
        self.layers.push(Layer::Linear {
            name: name.into(),
            in_features: 0,
            out_features: out,
        });
        if let Some(bn) = bn {
            self.layers.push(Layer::BatchNorm {
                name: bn.into(),
                channels: out,
            });
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl ModelSpec {
    /// Checks that consecutive layers conform, fills in linear input sizes,
    /// and returns the output width.
    fn infer_output_dim(&mut self) -> Result<usize> {
        let [c, h, w] = self.input_shape;
        let mut shape = Shape::Map(c, h, w);
        for layer in &mut self.layers {
            shape = match (layer, shape) {
                (
                    Layer::Conv {
                        name,
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    Shape::Map(c, h, w),
                ) => {
                    if *in_channels != c {
                        return Err(Error::Model(format!(
                            "{name} expects {in_channels} channels, got {c}"
                        )));
                    }
                    let out = |s: usize| {
                        (s + 2 * *padding)
                            .checked_sub(*kernel)
                            .map(|v| v / *stride + 1)
                    };
                    match (out(h), out(w)) {
                        (Some(oh), Some(ow)) => Shape::Map(*out_channels, oh, ow),
                        _ => {
                            return Err(Error::Model(format!("{name} output is empty for {h}x{w}")))
                        }
                    }
                }
                (Layer::BatchNorm { name, channels }, s) => {
                    let c = match s {
                        Shape::Map(c, ..) | Shape::Flat(c) => c,
                    };
                    if *channels != c {
                        return Err(Error::Model(format!(
                            "{name} expects {channels} channels, got {c}"
                        )));
                    }
                    s
                }
                (Layer::Relu, s) => s,
                (
                    Layer::MaxPool {
                        kernel,
                        stride,
                        ceil,
                    },
                    Shape::Map(c, h, w),
                ) => {
                    let out = |s: usize| pool_extent(s, *kernel, *stride, *ceil);
                    match (out(h), out(w)) {
                        (Some(oh), Some(ow)) => Shape::Map(c, oh, ow),
                        _ => {
                            return Err(Error::Model(format!(
                                "{} on {:?} pools a {h}x{w} map to nothing",
                                self.kind, self.input_shape
                            )))
                        }
                    }
                }
                (Layer::Flatten, Shape::Map(c, h, w)) => Shape::Flat(c * h * w),
                (
                    Layer::Linear {
                        in_features,
                        out_features,
                        ..
                    },
                    Shape::Flat(f),
                ) => {
                    *in_features = f;
                    Shape::Flat(*out_features)
                }
                (layer, s) => {
                    return Err(Error::Model(format!("{layer:?} cannot follow shape {s:?}")))
                }
            };
        }
        match shape {
            Shape::Flat(f) => Ok(f),
            Shape::Map(..) => Err(Error::Model("model does not end in a flat output".into())),
        }
    }

    /// Parameter names and shapes in layer order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv {
                    name,
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => out.push((
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                )),
                Layer::BatchNorm { name, channels } => {
                    out.push((format!("{name}.gamma"), vec![*channels]));
                    out.push((format!("{name}.beta"), vec![*channels]));
                }
                Layer::Linear {
                    name,
                    in_features,
                    out_features,
                } => {
                    out.push((format!("{name}.weight"), vec![*in_features, *out_features]));
                    out.push((format!("{name}.bias"), vec![*out_features]));
                }
                _ => {}
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Number of parameters owned by batch-norm layers.
    pub fn bn_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::BatchNorm { channels, .. } => 2 * channels,
                _ => 0,
            })
            .sum()
    }

    /// Names of the weight tensors that are quantized under `policy`.
    pub fn quantized_weights(&self, policy: &QuantPolicy) -> Vec<String> {
        let weighted: Vec<_> = self.layers.iter().filter(|l| l.is_weighted()).collect();
        let last = weighted.len().saturating_sub(1);
        weighted
            .iter()
            .enumerate()
            .filter(|&(i, _)| {
                (i != 0 || policy.quantize_first_layer) && (i != last || policy.quantize_last_layer)
            })
            .map(|(_, l)| match l {
                Layer::Conv { name, .. } | Layer::Linear { name, .. } => format!("{name}.weight"),
                _ => unreachable!(),
            })
            .collect()
    }

    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases, and
    /// unit/zero batch-norm scale/shift.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Params {
        let mut params = Params::new();
        for (name, shape) in self.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                let fan_in: usize = if shape.len() == 4 {
                    shape[1..].iter().product()
                } else {
                    shape[0]
                };
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect()
            } else if name.ends_with(".gamma") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            params.insert(name, Tensor::new(&shape, data).expect("shape from spec"));
        }
        params
    }

    /// Errors unless `params` has exactly this spec's names and shapes.
    pub fn check_params<T: Real>(&self, params: &Params<T>) -> Result<()> {
        let expected = self.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Model(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Model(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Model(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }
}

fn pool_extent(size: usize, kernel: usize, stride: usize, ceil: bool) -> Option<usize> {
    if ceil {
        if size == 0 {
            return None;
        }
        let mut out = size.saturating_sub(kernel).div_ceil(stride) + 1;
        if (out - 1) * stride >= size {
            out -= 1;
        }
        Some(out)
    } else {
        size.checked_sub(kernel).map(|v| v / stride + 1)
    }
}

/// Adds every tensor as a gradient-tracking leaf.
pub fn bind_params<T: Real>(g: &mut Graph<T>, params: &Params<T>) -> ParamVars {
    params
        .iter()
        .map(|(k, t)| (k.clone(), g.param(t.clone())))
        .collect()
}

/// Adds every tensor as a constant.
pub fn bind_constants<T: Real>(g: &mut Graph<T>, params: &Params<T>) -> ParamVars {
    params
        .iter()
        .map(|(k, t)| (k.clone(), g.constant(t.clone())))
        .collect()
}

/// Gradients of the bound leaves, zero-filled where no gradient arrived.
pub fn collect_grads<T: Real>(g: &Graph<T>, vars: &ParamVars) -> Params<T> {
    vars.iter()
        .map(|(k, &v)| {
            let grad = g
                .grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            (k.clone(), grad)
        })
        .collect()
}

pub fn cast_params<T: Real, U: Real>(params: &Params<T>) -> Params<U> {
    params.iter().map(|(k, t)| (k.clone(), t.cast())).collect()
}

/// Effective weights and post-nonlinearity activations seen by one forward
/// pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub weights: Vec<(String, Var)>,
    pub activations: Vec<Var>,
}

/// The network with weights and activations quantized per `task`, except
/// where `policy` exempts them. `(FP,FP)` records exactly the ops of
/// [`forward_plain`].
pub fn forward_quantized<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    vars: &ParamVars,
    x: Var,
    task: BitwidthTask,
    policy: &QuantPolicy,
) -> Result<Var> {
    run(g, spec, vars, x, Some((task, policy)), None)
}

/// The unquantized network.
pub fn forward_plain<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    vars: &ParamVars,
    x: Var,
) -> Result<Var> {
    run(g, spec, vars, x, None, None)
}

pub fn forward_traced<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    vars: &ParamVars,
    x: Var,
    task: BitwidthTask,
    policy: &QuantPolicy,
) -> Result<(Var, Trace)> {
    let mut trace = Trace::default();
    let out = run(g, spec, vars, x, Some((task, policy)), Some(&mut trace))?;
    Ok((out, trace))
}

fn run<T: Real>(
    g: &mut Graph<T>,
    spec: &ModelSpec,
    vars: &ParamVars,
    x: Var,
    quant: Option<(BitwidthTask, &QuantPolicy)>,
    mut trace: Option<&mut Trace>,
) -> Result<Var> {
    let quantized = quant
        .map(|(_, p)| spec.quantized_weights(p))
        .unwrap_or_default();
    let get = |name: &str| {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    };
    let mut h = x;
    for layer in &spec.layers {
        h = match layer {
            Layer::Conv {
                name,
                stride,
                padding,
                ..
            } => {
                let key = format!("{name}.weight");
                let w = effective_weight(g, get(&key)?, &key, &quantized, quant)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.weights.push((key, w));
                }
                g.conv2d(h, w, *stride, *padding)?
            }
            Layer::Linear { name, .. } => {
                let key = format!("{name}.weight");
                let w = effective_weight(g, get(&key)?, &key, &quantized, quant)?;
                if let Some(t) = trace.as_deref_mut() {
                    t.weights.push((key, w));
                }
                let flat = g.flatten(h)?;
                let y = g.matmul(flat, w)?;
                g.add_bias(y, get(&format!("{name}.bias"))?)?
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = get(&format!("{name}.gamma"))?;
                let beta = get(&format!("{name}.beta"))?;
                g.batch_norm(h, gamma, beta, BN_EPS)?
            }
            Layer::Relu => {
                let r = g.relu(h);
                let a = match quant {
                    Some((task, _)) => quantize_activations(g, r, task.b_a)?,
                    None => r,
                };
                if let Some(t) = trace.as_deref_mut() {
                    t.activations.push(a);
                }
                a
            }
            Layer::MaxPool {
                kernel,
                stride,
                ceil,
            } => g.max_pool2d(h, *kernel, *stride, *ceil)?,
            Layer::Flatten => g.flatten(h)?,
        };
    }
    Ok(h)
}

fn effective_weight<T: Real>(
    g: &mut Graph<T>,
    w: Var,
    key: &str,
    quantized: &[String],
    quant: Option<(BitwidthTask, &QuantPolicy)>,
) -> Result<Var> {
    match quant {
        Some((task, _)) if quantized.iter().any(|q| q == key) => quantize_weights(g, w, task.b_w),
        _ => Ok(w),
    }
}

/// Weight bitwidth applied to `name` under `task`, `FP` when exempt.
pub fn weight_bitwidth(
    spec: &ModelSpec,
    policy: &QuantPolicy,
    task: BitwidthTask,
    name: &str,
) -> Bitwidth {
    if spec.quantized_weights(policy).iter().any(|q| q == name) {
        task.b_w
    } else {
        Bitwidth::Fp
    }
}
