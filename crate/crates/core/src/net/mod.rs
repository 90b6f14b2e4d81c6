//! Small sequential CNNs: layer specs, parameter storage, forward/backward.

pub mod layers;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conv::{conv_backward_input, conv_backward_weights, conv_forward, ConvSpec};
use crate::error::{Result, SgsError};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor4};

use layers::{BatchNorm, BatchNormCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        activation: Activation,
        batch_norm: bool,
    },
    MaxPool,
    AvgPoolGlobal,
    Flatten,
    Dense {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, k: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: k / 2,
            activation: Activation::Relu,
            batch_norm: false,
        }
    }

    pub fn dense(out_features: usize) -> Self {
        LayerSpec::Dense { out_features }
    }
}

/// Text form used in config files:
/// `conv <out> <kh>x<kw> [s<stride>] [p<pad>] [relu|none] [bn]`, `maxpool`,
/// `avgpool`, `flatten`, `dense <out>`.
impl FromStr for LayerSpec {
    type Err = SgsError;

    fn from_str(s: &str) -> Result<Self> {
        let mut words = s.split_whitespace();
        let bad = |msg: &str| SgsError::Config(format!("layer '{s}': {msg}"));
        let head = words.next().ok_or_else(|| bad("empty layer"))?;
        let spec = match head {
            "conv" => {
                let out_channels: usize = words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| bad("expected output channel count"))?;
                let kernel_word = words.next().ok_or_else(|| bad("expected kernel size"))?;
                let kernel = match kernel_word.split_once('x') {
                    Some((a, b)) => (
                        a.parse().map_err(|_| bad("bad kernel size"))?,
                        b.parse().map_err(|_| bad("bad kernel size"))?,
                    ),
                    None => {
                        let k = kernel_word.parse().map_err(|_| bad("bad kernel size"))?;
                        (k, k)
                    }
                };
                let mut stride = 1;
                let mut padding = None;
                let mut activation = Activation::Relu;
                let mut batch_norm = false;
                for w in words.by_ref() {
                    match w {
                        "relu" => activation = Activation::Relu,
                        "none" | "linear" => activation = Activation::None,
                        "bn" => batch_norm = true,
                        _ if w.starts_with('s') => {
                            stride = w[1..].parse().map_err(|_| bad("bad stride"))?
                        }
                        _ if w.starts_with('p') => {
                            padding = Some(w[1..].parse().map_err(|_| bad("bad padding"))?)
                        }
                        _ => return Err(bad(&format!("unknown conv option '{w}'"))),
                    }
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding: padding.unwrap_or(kernel.0.max(kernel.1) / 2),
                    activation,
                    batch_norm,
                }
            }
            "maxpool" => LayerSpec::MaxPool,
            "avgpool" => LayerSpec::AvgPoolGlobal,
            "flatten" => LayerSpec::Flatten,
            "dense" => LayerSpec::Dense {
                out_features: words
                    .next()
                    .and_then(|w| w.parse().ok())
                    .ok_or_else(|| bad("expected output feature count"))?,
            },
            other => return Err(bad(&format!("unknown layer type '{other}'"))),
        };
        if let Some(extra) = words.next() {
            return Err(bad(&format!("unexpected token '{extra}'")));
        }
        Ok(spec)
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                activation,
                batch_norm,
            } => {
                write!(
                    f,
                    "conv {out_channels} {}x{} s{stride} p{padding} {}",
                    kernel.0,
                    kernel.1,
                    match activation {
                        Activation::Relu => "relu",
                        Activation::None => "none",
                    }
                )?;
                if *batch_norm {
                    f.write_str(" bn")?;
                }
                Ok(())
            }
            LayerSpec::MaxPool => f.write_str("maxpool"),
            LayerSpec::AvgPoolGlobal => f.write_str("avgpool"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Dense { out_features } => write!(f, "dense {out_features}"),
        }
    }
}

/// Ordered layers ending in a dense classifier; the softmax cross-entropy
/// head is implicit after the last layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// conv 8@3x3 -> relu -> maxpool -> conv 16@3x3 -> relu -> maxpool -> dense
    pub fn two_conv(input: (usize, usize, usize), classes: usize) -> Self {
        Self {
            input,
            layers: vec![
                LayerSpec::conv(8, 3),
                LayerSpec::MaxPool,
                LayerSpec::conv(16, 3),
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::dense(classes),
            ],
        }
    }

    /// Walks the layer chain, returning each layer's output shape `(c, h, w)`.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(SgsError::Config(format!(
                "input shape {:?} must be non-empty",
                self.input
            )));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |m: String| SgsError::Config(format!("layer {i} ({layer}): {m}"));
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let spec = ConvSpec {
                        in_channels: c,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    };
                    let (oh, ow) = spec.output_size(h, w).map_err(|e| err(e.to_string()))?;
                    c = *out_channels;
                    h = oh;
                    w = ow;
                }
                LayerSpec::MaxPool => {
                    if h < 2 || w < 2 {
                        return Err(err(format!("maxpool on {h}x{w}")));
                    }
                    h /= 2;
                    w /= 2;
                }
                LayerSpec::AvgPoolGlobal => {
                    h = 1;
                    w = 1;
                }
                LayerSpec::Flatten => {
                    c *= h * w;
                    h = 1;
                    w = 1;
                }
                LayerSpec::Dense { out_features } => {
                    if h != 1 || w != 1 {
                        return Err(err(format!(
                            "dense needs a flat input, got {c}x{h}x{w} (add flatten or avgpool)"
                        )));
                    }
                    if *out_features == 0 {
                        return Err(err("dense needs >= 1 output".into()));
                    }
                    c = *out_features;
                }
            }
            out.push((c, h, w));
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { .. }) => Ok(out),
            _ => Err(SgsError::Config(
                "network must end in a dense layer feeding the loss head".into(),
            )),
        }
    }

    pub fn classes(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map(|s| s.0).unwrap_or(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    ConvWeight,
    ConvBias,
    BnGamma,
    BnBeta,
    DenseWeight,
    DenseBias,
}

pub struct Param<'a, T: Scalar> {
    pub role: ParamRole,
    /// Ordinal among conv layers, for conv weights and biases.
    pub conv_index: Option<usize>,
    pub value: &'a mut Tensor4<T>,
    pub grad: &'a Tensor4<T>,
}

#[derive(Debug, Clone)]
enum Node<T: Scalar> {
    Conv {
        conv_index: usize,
        spec: ConvSpec,
        weight: Tensor4<T>,
        bias: Option<Tensor4<T>>,
        grad_w: Tensor4<T>,
        grad_b: Option<Tensor4<T>>,
        input: Option<Tensor4<T>>,
    },
    BatchNorm {
        bn: BatchNorm<T>,
        grad_gamma: Tensor4<T>,
        grad_beta: Tensor4<T>,
        cache: Option<std::sync::Arc<BatchNormCache<T>>>,
    },
    Relu {
        input: Option<Tensor4<T>>,
    },
    MaxPool {
        input_shape: [usize; 4],
        argmax: Vec<usize>,
    },
    AvgPool {
        input_shape: [usize; 4],
    },
    Flatten {
        input_shape: [usize; 4],
    },
    Dense {
        weight: Tensor4<T>,
        bias: Tensor4<T>,
        grad_w: Tensor4<T>,
        grad_b: Tensor4<T>,
        input: Option<Tensor4<T>>,
    },
}

impl<T: Scalar> std::fmt::Debug for BatchNormCache<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("BatchNormCache")
    }
}

#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f64> {
    spec: NetworkSpec,
    nodes: Vec<Node<T>>,
}

fn kaiming<T: Scalar>(rng: &mut SeededRng, shape: [usize; 4], fan_in: usize) -> Tensor4<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor4::from_fn(shape, |_| T::of(rng.normal() * std))
}

impl<T: Scalar> Network<T> {
    /// Builds the network with fan-in scaled normal weights and zero biases.
    pub fn build(spec: &NetworkSpec, rng: &mut SeededRng) -> Result<Self> {
        let shapes = spec.shapes()?;
        let mut nodes = Vec::new();
        let mut conv_index = 0;
        let mut prev = spec.input;
        for (layer, &out) in spec.layers.iter().zip(&shapes) {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    activation,
                    batch_norm,
                } => {
                    let cspec = ConvSpec {
                        in_channels: prev.0,
                        out_channels: *out_channels,
                        kernel: *kernel,
                        stride: *stride,
                        padding: *padding,
                    };
                    let fan_in = prev.0 * kernel.0 * kernel.1;
                    let weight = kaiming(rng, cspec.weight_shape(), fan_in);
                    let bias = (!batch_norm).then(|| Tensor4::zeros([*out_channels, 1, 1, 1]));
                    nodes.push(Node::Conv {
                        conv_index,
                        spec: cspec,
                        grad_w: Tensor4::zeros(weight.shape()),
                        grad_b: bias.clone(),
                        weight,
                        bias,
                        input: None,
                    });
                    conv_index += 1;
                    if *batch_norm {
                        nodes.push(Node::BatchNorm {
                            bn: BatchNorm::new(*out_channels),
                            grad_gamma: Tensor4::zeros([*out_channels, 1, 1, 1]),
                            grad_beta: Tensor4::zeros([*out_channels, 1, 1, 1]),
                            cache: None,
                        });
                    }
                    if *activation == Activation::Relu {
                        nodes.push(Node::Relu { input: None });
                    }
                }
                LayerSpec::MaxPool => nodes.push(Node::MaxPool {
                    input_shape: [0; 4],
                    argmax: Vec::new(),
                }),
                LayerSpec::AvgPoolGlobal => nodes.push(Node::AvgPool {
                    input_shape: [0; 4],
                }),
                LayerSpec::Flatten => nodes.push(Node::Flatten {
                    input_shape: [0; 4],
                }),
                LayerSpec::Dense { out_features } => {
                    let fan_in = prev.0;
                    let weight = kaiming(rng, [*out_features, fan_in, 1, 1], fan_in);
                    nodes.push(Node::Dense {
                        grad_w: Tensor4::zeros(weight.shape()),
                        weight,
                        bias: Tensor4::zeros([*out_features, 1, 1, 1]),
                        grad_b: Tensor4::zeros([*out_features, 1, 1, 1]),
                        input: None,
                    });
                }
            }
            prev = out;
        }
        Ok(Self {
            spec: spec.clone(),
            nodes,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    fn check_input(&self, x: &Tensor4<T>) -> Result<()> {
        let (c, h, w) = self.spec.input;
        let s = x.shape();
        if s[1] != c || s[2] != h || s[3] != w {
            return Err(SgsError::shape(format!(
                "network expects [N, {c}, {h}, {w}], got {s:?}"
            )));
        }
        Ok(())
    }

    /// Forward pass to logits. In training mode every layer caches what its
    /// backward pass needs and batch norm uses batch statistics.
    pub fn forward(&mut self, x: &Tensor4<T>, train: bool) -> Result<Tensor4<T>> {
        self.forward_impl(x, train, None)
    }

    /// Evaluation-mode forward that returns the input of every conv layer.
    pub fn capture_conv_inputs(&mut self, x: &Tensor4<T>) -> Result<Vec<Tensor4<T>>> {
        let mut captured = Vec::new();
        self.forward_impl(x, false, Some(&mut captured))?;
        Ok(captured)
    }

    fn forward_impl(
        &mut self,
        x: &Tensor4<T>,
        train: bool,
        mut capture: Option<&mut Vec<Tensor4<T>>>,
    ) -> Result<Tensor4<T>> {
        self.check_input(x)?;
        let mut act = x.clone();
        for node in &mut self.nodes {
            act = match node {
                Node::Conv {
                    spec,
                    weight,
                    bias,
                    input,
                    ..
                } => {
                    if let Some(c) = capture.as_deref_mut() {
                        c.push(act.clone());
                    }
                    let mut y = conv_forward(&act, weight, spec)?;
                    if let Some(b) = bias {
                        let [n, co, _, _] = y.shape();
                        for s in 0..n {
                            for ch in 0..co {
                                let bv = b.data()[ch];
                                for v in y.plane_mut(s, ch) {
                                    *v += bv;
                                }
                            }
                        }
                    }
                    *input = train.then_some(act);
                    y
                }
                Node::BatchNorm { bn, cache, .. } => {
                    let (y, c) = bn.forward(&act, train)?;
                    *cache = c.map(std::sync::Arc::new);
                    y
                }
                Node::Relu { input } => {
                    let y = layers::relu_forward(&act);
                    *input = train.then_some(act);
                    y
                }
                Node::MaxPool {
                    input_shape,
                    argmax,
                } => {
                    let (y, idx) = layers::maxpool2_forward(&act)?;
                    *input_shape = act.shape();
                    *argmax = idx;
                    y
                }
                Node::AvgPool { input_shape } => {
                    *input_shape = act.shape();
                    layers::avgpool_global_forward(&act)
                }
                Node::Flatten { input_shape } => {
                    *input_shape = act.shape();
                    let [n, c, h, w] = act.shape();
                    act.reshape([n, c * h * w, 1, 1])?
                }
                Node::Dense {
                    weight,
                    bias,
                    input,
                    ..
                } => {
                    let y = layers::dense_forward(&act, weight, bias)?;
                    *input = train.then_some(act);
                    y
                }
            };
        }
        Ok(act)
    }

    /// Back-propagates `dlogits` through a training-mode forward, filling
    /// every parameter gradient.
    pub fn backward(&mut self, dlogits: &Tensor4<T>) -> Result<()> {
        let missing = || SgsError::Numeric("backward called without a training forward".into());
        let mut grad = dlogits.clone();
        let count = self.nodes.len();
        for (pos, node) in self.nodes.iter_mut().enumerate().rev() {
            let first = pos == 0;
            grad = match node {
                Node::Conv {
                    spec,
                    weight,
                    grad_w,
                    grad_b,
                    input,
                    ..
                } => {
                    let x = input.as_ref().ok_or_else(missing)?;
                    *grad_w = conv_backward_weights(&grad, x, spec)?;
                    if let Some(gb) = grad_b {
                        let [n, co, _, _] = grad.shape();
                        for ch in 0..co {
                            let mut acc = T::zero();
                            for s in 0..n {
                                for &v in grad.plane(s, ch) {
                                    acc += v;
                                }
                            }
                            gb.data_mut()[ch] = acc;
                        }
                    }
                    if first {
                        // input gradient is never consumed
                        Tensor4::zeros([0, 0, 0, 0])
                    } else {
                        conv_backward_input(&grad, weight, spec, (x.shape()[2], x.shape()[3]))?
                    }
                }
                Node::BatchNorm {
                    bn,
                    grad_gamma,
                    grad_beta,
                    cache,
                } => {
                    let c = cache.as_ref().ok_or_else(missing)?;
                    let (dx, dg, db) = bn.backward(c, &grad)?;
                    *grad_gamma = dg;
                    *grad_beta = db;
                    dx
                }
                Node::Relu { input } => {
                    layers::relu_backward(input.as_ref().ok_or_else(missing)?, &grad)?
                }
                Node::MaxPool {
                    input_shape,
                    argmax,
                } => layers::maxpool2_backward(*input_shape, argmax, &grad)?,
                Node::AvgPool { input_shape } => {
                    layers::avgpool_global_backward(*input_shape, &grad)?
                }
                Node::Flatten { input_shape } => grad.reshape(*input_shape)?,
                Node::Dense {
                    weight,
                    grad_w,
                    grad_b,
                    input,
                    ..
                } => {
                    let g = layers::dense_backward(
                        input.as_ref().ok_or_else(missing)?,
                        weight,
                        &grad,
                    )?;
                    *grad_w = g.dw;
                    *grad_b = g.db;
                    g.dx
                }
            };
        }
        debug_assert!(count == self.nodes.len());
        Ok(())
    }

    /// Mean cross-entropy loss; fills gradients.
    pub fn loss_and_backward(
        &mut self,
        x: &Tensor4<T>,
        labels: &[usize],
    ) -> Result<layers::LossOutput<T>> {
        let logits = self.forward(x, true)?;
        let out = layers::softmax_cross_entropy(&logits, labels)?;
        self.backward(&out.dlogits)?;
        Ok(out)
    }

    /// Parameters in a fixed order with their current gradients.
    pub fn params_mut(&mut self) -> Vec<Param<'_, T>> {
        let mut out = Vec::new();
        for node in &mut self.nodes {
            match node {
                Node::Conv {
                    conv_index,
                    weight,
                    bias,
                    grad_w,
                    grad_b,
                    ..
                } => {
                    out.push(Param {
                        role: ParamRole::ConvWeight,
                        conv_index: Some(*conv_index),
                        value: weight,
                        grad: grad_w,
                    });
                    if let (Some(b), Some(gb)) = (bias.as_mut(), grad_b.as_ref()) {
                        out.push(Param {
                            role: ParamRole::ConvBias,
                            conv_index: Some(*conv_index),
                            value: b,
                            grad: gb,
                        });
                    }
                }
                Node::BatchNorm {
                    bn,
                    grad_gamma,
                    grad_beta,
                    ..
                } => {
                    out.push(Param {
                        role: ParamRole::BnGamma,
                        conv_index: None,
                        value: &mut bn.gamma,
                        grad: grad_gamma,
                    });
                    out.push(Param {
                        role: ParamRole::BnBeta,
                        conv_index: None,
                        value: &mut bn.beta,
                        grad: grad_beta,
                    });
                }
                Node::Dense {
                    weight,
                    bias,
                    grad_w,
                    grad_b,
                    ..
                } => {
                    out.push(Param {
                        role: ParamRole::DenseWeight,
                        conv_index: None,
                        value: weight,
                        grad: grad_w,
                    });
                    out.push(Param {
                        role: ParamRole::DenseBias,
                        conv_index: None,
                        value: bias,
                        grad: grad_b,
                    });
                }
                _ => {}
            }
        }
        out
    }

    /// `(conv_index, spec, weight)` for every conv layer, in order.
    pub fn conv_layers(&self) -> Vec<(usize, ConvSpec, &Tensor4<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Conv {
                    conv_index,
                    spec,
                    weight,
                    ..
                } => Some((*conv_index, *spec, weight)),
                _ => None,
            })
            .collect()
    }

    pub fn export_weights(&mut self) -> WeightsFile {
        let spec = self.spec.clone();
        let mut conv_seen = std::collections::HashMap::new();
        let params = self
            .params_mut()
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                let name = match (p.role, p.conv_index) {
                    (ParamRole::ConvWeight, Some(c)) | (ParamRole::ConvBias, Some(c)) => {
                        *conv_seen.entry(c).or_insert(0) += 1;
                        format!("conv{c}.{}", role_suffix(p.role))
                    }
                    _ => format!("p{i}.{}", role_suffix(p.role)),
                };
                ParamRecord {
                    name,
                    role: p.role,
                    conv_index: p.conv_index,
                    shape: p.value.shape(),
                    values: p.value.data().iter().map(|v| v.as_f64()).collect(),
                }
            })
            .collect();
        WeightsFile {
            network: spec,
            precision: T::BITS,
            params,
        }
    }
}

fn role_suffix(role: ParamRole) -> &'static str {
    match role {
        ParamRole::ConvWeight | ParamRole::DenseWeight => "weight",
        ParamRole::ConvBias | ParamRole::DenseBias => "bias",
        ParamRole::BnGamma => "gamma",
        ParamRole::BnBeta => "beta",
    }
}

/// JSON weights dump written after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub network: NetworkSpec,
    pub precision: u32,
    pub params: Vec<ParamRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub role: ParamRole,
    pub conv_index: Option<usize>,
    pub shape: [usize; 4],
    pub values: Vec<f64>,
}

impl ParamRecord {
    pub fn tensor(&self) -> Result<Tensor4<f64>> {
        Tensor4::from_vec(self.shape, self.values.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_text_round_trip() {
        for s in [
            "conv 8 3x3 s1 p1 relu",
            "conv 16 5x3 s2 p0 none bn",
            "maxpool",
            "avgpool",
            "flatten",
            "dense 10",
        ] {
            let l: LayerSpec = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        let l: LayerSpec = "conv 4 3".parse().unwrap();
        assert_eq!(l, LayerSpec::conv(4, 3));
        assert!("conv x 3".parse::<LayerSpec>().is_err());
        assert!("dense".parse::<LayerSpec>().is_err());
        assert!("pool".parse::<LayerSpec>().is_err());
        assert!("conv 4 3 wat".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn shapes_chain() {
        let spec = NetworkSpec::two_conv((1, 28, 28), 10);
        let shapes = spec.shapes().unwrap();
        assert_eq!(shapes[1], (8, 14, 14));
        assert_eq!(shapes[3], (16, 7, 7));
        assert_eq!(shapes[4], (784, 1, 1));
        assert_eq!(spec.classes().unwrap(), 10);
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let no_head = NetworkSpec {
            input: (1, 8, 8),
            layers: vec![LayerSpec::conv(2, 3)],
        };
        assert!(no_head.shapes().is_err());
        let unflattened = NetworkSpec {
            input: (1, 8, 8),
            layers: vec![LayerSpec::conv(2, 3), LayerSpec::dense(3)],
        };
        assert!(unflattened.shapes().is_err());
        let too_small = NetworkSpec {
            input: (1, 2, 2),
            layers: vec![
                LayerSpec::MaxPool,
                LayerSpec::MaxPool,
                LayerSpec::Flatten,
                LayerSpec::dense(2),
            ],
        };
        assert!(too_small.shapes().is_err());
    }

    #[test]
    fn build_and_forward_shapes() {
        let spec = NetworkSpec::two_conv((1, 12, 12), 4);
        let mut net = Network::<f64>::build(&spec, &mut SeededRng::new(0)).unwrap();
        let x = Tensor4::zeros([3, 1, 12, 12]);
        assert_eq!(net.forward(&x, false).unwrap().shape(), [3, 4, 1, 1]);
        let caps = net.capture_conv_inputs(&x).unwrap();
        assert_eq!(caps.len(), 2);
        assert_eq!(caps[1].shape(), [3, 8, 6, 6]);
        assert!(net.forward(&Tensor4::zeros([1, 2, 12, 12]), false).is_err());
    }
}
