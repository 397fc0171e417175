//! The two evaluated architectures: `cnn-trad-pool2` and `cnn-one-fstride4`.
//!
//! A [`ModelSpec`] mirrors the architecture tables (conv rows with
//! `m, r, n, p, q, s, v`, hidden rows, a softmax row). [`ModelSpec::plan`]
//! lowers it to a chain of concrete ops with every intermediate shape worked
//! out; [`Model`] owns the parameters and runs forward and backward over
//! that chain in a fixed order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMatrix, N_FRAMES, N_MELS};
use crate::nn::{self, NnError};
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

/// Class order shared by checkpoints, the service and the dataset.
pub const LABELS: [&str; 12] = [
    "silence", "unknown", "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];

pub const SILENCE: usize = 0;
pub const UNKNOWN: usize = 1;
pub const N_LABELS: usize = 12;

/// Names for `n_labels` classes; beyond the standard twelve, `class<i>`.
pub fn label_names(n_labels: usize) -> Vec<String> {
    (0..n_labels)
        .map(|i| LABELS.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string()))
        .collect()
}

const INIT_STD: f32 = 0.01;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "cnn-trad-pool2")]
    CnnTradPool2,
    #[serde(rename = "cnn-one-fstride4")]
    CnnOneFstride4,
}

impl ModelName {
    pub const ALL: [ModelName; 2] = [ModelName::CnnTradPool2, ModelName::CnnOneFstride4];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::CnnTradPool2 => "cnn-trad-pool2",
            ModelName::CnnOneFstride4 => "cnn-one-fstride4",
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        ModelName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| ModelError::BadSpec(format!("unknown model `{s}`")))
    }
}

/// One conv row: filter `m` (time) x `r` (frequency), `n` maps, `p x q`
/// max pooling, stride `s x v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub m: usize,
    pub r: usize,
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub s: usize,
    pub v: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvLayerSpec),
    Hidden { width: usize },
    Softmax { n_labels: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub name: ModelName,
    /// `(t, f)` of the feature matrix.
    pub input: (usize, usize),
    pub layers: Vec<LayerSpec>,
    pub n_labels: usize,
}

impl ModelSpec {
    pub fn cnn_trad_pool2(n_labels: usize) -> Self {
        Self {
            name: ModelName::CnnTradPool2,
            input: (N_FRAMES, N_MELS),
            layers: vec![
                LayerSpec::Conv(ConvLayerSpec {
                    m: 20,
                    r: 8,
                    n: 64,
                    p: 2,
                    q: 2,
                    s: 1,
                    v: 1,
                }),
                LayerSpec::Conv(ConvLayerSpec {
                    m: 10,
                    r: 4,
                    n: 64,
                    p: 1,
                    q: 1,
                    s: 1,
                    v: 1,
                }),
                LayerSpec::Softmax { n_labels },
            ],
            n_labels,
        }
    }

    /// The filter spans the whole time axis (`m = t`).
    pub fn cnn_one_fstride4(n_labels: usize) -> Self {
        let t = N_FRAMES;
        Self {
            name: ModelName::CnnOneFstride4,
            input: (t, N_MELS),
            layers: vec![
                LayerSpec::Conv(ConvLayerSpec {
                    m: t,
                    r: 8,
                    n: 186,
                    p: 1,
                    q: 1,
                    s: 1,
                    v: 1,
                }),
                LayerSpec::Hidden { width: 128 },
                LayerSpec::Hidden { width: 128 },
                LayerSpec::Softmax { n_labels },
            ],
            n_labels,
        }
    }

    pub fn for_name(name: ModelName, n_labels: usize) -> Self {
        match name {
            ModelName::CnnTradPool2 => Self::cnn_trad_pool2(n_labels),
            ModelName::CnnOneFstride4 => Self::cnn_one_fstride4(n_labels),
        }
    }

    /// Lowers the spec to concrete ops, checking that shapes chain from the
    /// input to `n_labels` logits.
    pub fn plan(&self) -> Result<Vec<PlannedOp>> {
        if self.n_labels < 2 {
            return Err(ModelError::BadSpec(format!(
                "n_labels must be >= 2, got {}",
                self.n_labels
            )));
        }
        let mut ops = Vec::new();
        let mut shape = vec![1, self.input.0, self.input.1];
        let (mut n_conv, mut n_hidden) = (0, 0);

        let flatten = |ops: &mut Vec<PlannedOp>, shape: &mut Vec<usize>| {
            if shape.len() != 1 {
                let len = shape.iter().product();
                ops.push(PlannedOp::Flatten {
                    input: shape.clone(),
                    output: len,
                });
                *shape = vec![len];
            }
        };

        for layer in &self.layers {
            match *layer {
                LayerSpec::Conv(c) => {
                    if shape.len() != 3 {
                        return Err(ModelError::BadSpec("conv after a dense layer".into()));
                    }
                    let positive = [c.m, c.r, c.n, c.p, c.q, c.s, c.v].iter().all(|&x| x > 0);
                    let (h, w) = (shape[1], shape[2]);
                    if !positive || c.m > h || c.r > w {
                        return Err(ModelError::BadSpec(format!("conv {c:?} does not fit input {h}x{w}")));
                    }
                    n_conv += 1;
                    let out = vec![c.n, (h - c.m) / c.s + 1, (w - c.r) / c.v + 1];
                    ops.push(PlannedOp::Conv {
                        name: format!("conv{n_conv}"),
                        input: shape.clone(),
                        output: out.clone(),
                        weight: vec![c.n, shape[0], c.m, c.r],
                        stride: (c.s, c.v),
                    });
                    ops.push(PlannedOp::Relu);
                    shape = out;
                    if c.p * c.q > 1 {
                        let pooled = vec![shape[0], shape[1] / c.p, shape[2] / c.q];
                        if pooled[1] == 0 || pooled[2] == 0 {
                            return Err(ModelError::BadSpec(format!(
                                "pool {}x{} empties map {:?}",
                                c.p, c.q, shape
                            )));
                        }
                        ops.push(PlannedOp::MaxPool {
                            p: c.p,
                            q: c.q,
                            input: shape.clone(),
                            output: pooled.clone(),
                        });
                        shape = pooled;
                    }
                }
                LayerSpec::Hidden { width } => {
                    flatten(&mut ops, &mut shape);
                    n_hidden += 1;
                    ops.push(PlannedOp::Linear {
                        name: format!("hidden{n_hidden}"),
                        input: shape[0],
                        output: width,
                    });
                    ops.push(PlannedOp::Relu);
                    shape = vec![width];
                }
                LayerSpec::Softmax { n_labels } => {
                    if n_labels != self.n_labels {
                        return Err(ModelError::BadSpec(format!(
                            "softmax layer has {n_labels} outputs, spec says {}",
                            self.n_labels
                        )));
                    }
                    flatten(&mut ops, &mut shape);
                    ops.push(PlannedOp::Linear {
                        name: "output".into(),
                        input: shape[0],
                        output: n_labels,
                    });
                    shape = vec![n_labels];
                }
            }
        }
        if shape != [self.n_labels] {
            return Err(ModelError::BadSpec(format!(
                "spec ends in shape {shape:?}, not {} logits",
                self.n_labels
            )));
        }
        Ok(ops)
    }

    /// `(name, dims)` of every parameter in build order.
    pub fn parameter_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut out = Vec::new();
        for op in self.plan()? {
            match op {
                PlannedOp::Conv { name, weight, .. } => {
                    let maps = weight[0];
                    out.push((format!("{name}.weight"), weight));
                    out.push((format!("{name}.bias"), vec![maps]));
                }
                PlannedOp::Linear { name, input, output } => {
                    out.push((format!("{name}.weight"), vec![output, input]));
                    out.push((format!("{name}.bias"), vec![output]));
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

/// A concrete op with its shapes resolved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlannedOp {
    Conv {
        name: String,
        input: Vec<usize>,
        output: Vec<usize>,
        weight: Vec<usize>,
        stride: (usize, usize),
    },
    Relu,
    MaxPool {
        p: usize,
        q: usize,
        input: Vec<usize>,
        output: Vec<usize>,
    },
    Flatten {
        input: Vec<usize>,
        output: usize,
    },
    Linear {
        name: String,
        input: usize,
        output: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerMultiplies {
    pub layer: String,
    pub multiplies: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MultiplyCount {
    pub model: String,
    pub layers: Vec<LayerMultiplies>,
    pub total: u64,
}

/// Scalar multiplies in one forward pass: `H' W' C_out C_in m r` per conv,
/// `in * out` per dense layer. Pooling, ReLU and softmax are not counted.
pub fn count_multiplies(spec: &ModelSpec) -> Result<MultiplyCount> {
    let mut layers = Vec::new();
    for op in spec.plan()? {
        let (layer, multiplies) = match op {
            PlannedOp::Conv {
                name, output, weight, ..
            } => {
                let per_output: usize = weight[1..].iter().product();
                (name, (output.iter().product::<usize>() * per_output) as u64)
            }
            PlannedOp::Linear { name, input, output } => (name, (input * output) as u64),
            _ => continue,
        };
        layers.push(LayerMultiplies { layer, multiplies });
    }
    let total = layers.iter().map(|l| l.multiplies).sum();
    Ok(MultiplyCount {
        model: spec.name.to_string(),
        layers,
        total,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Conv {
        weight: usize,
        bias: usize,
        stride: (usize, usize),
    },
    Relu,
    MaxPool {
        p: usize,
        q: usize,
    },
    Flatten {
        output: usize,
    },
    Linear {
        weight: usize,
        bias: usize,
    },
}

/// Per-layer state saved by [`Model::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<usize>>>,
}

/// A model with its parameters. Forward is a pure function of the
/// parameters and the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    names: Vec<String>,
    params: Vec<Parameter>,
}

impl Model {
    /// Truncated-normal weights (`std = 0.01`), zero biases. Parameters are
    /// drawn in build order from `rng`.
    pub fn build(spec: ModelSpec, rng: &mut Rng) -> Result<Self> {
        Self::assemble(spec, |dims, is_bias| {
            if is_bias {
                Tensor::zeros(dims)
            } else {
                nn::truncated_normal_init(dims, 0.0, INIT_STD, rng)
            }
        })
    }

    /// All parameters zero; used as the skeleton when loading.
    pub fn zeroed(spec: ModelSpec) -> Result<Self> {
        Self::assemble(spec, |dims, _| Tensor::zeros(dims))
    }

    fn assemble(spec: ModelSpec, mut init: impl FnMut(&[usize], bool) -> Tensor) -> Result<Self> {
        let mut layers = Vec::new();
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut add = |name: String, dims: &[usize], is_bias: bool| {
            names.push(name);
            params.push(Parameter::new(init(dims, is_bias)));
            params.len() - 1
        };
        for op in spec.plan()? {
            layers.push(match op {
                PlannedOp::Conv {
                    name, weight, stride, ..
                } => {
                    let maps = weight[0];
                    let w = add(format!("{name}.weight"), &weight, false);
                    let b = add(format!("{name}.bias"), &[maps], true);
                    Layer::Conv {
                        weight: w,
                        bias: b,
                        stride,
                    }
                }
                PlannedOp::Relu => Layer::Relu,
                PlannedOp::MaxPool { p, q, .. } => Layer::MaxPool { p, q },
                PlannedOp::Flatten { output, .. } => Layer::Flatten { output },
                PlannedOp::Linear { name, input, output } => {
                    let w = add(format!("{name}.weight"), &[output, input], false);
                    let b = add(format!("{name}.bias"), &[output], true);
                    Layer::Linear { weight: w, bias: b }
                }
            });
        }
        Ok(Self {
            spec,
            layers,
            names,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn n_labels(&self) -> usize {
        self.spec.n_labels
    }

    pub fn labels(&self) -> Vec<String> {
        label_names(self.spec.n_labels)
    }

    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    fn input_tensor(&self, features: &FeatureMatrix) -> Result<Tensor> {
        if features.shape() != self.spec.input {
            return Err(NnError::ShapeMismatch(format!(
                "features {:?}, model expects {:?}",
                features.shape(),
                self.spec.input
            ))
            .into());
        }
        Ok(Tensor::from_vec(
            &[1, features.frames(), features.coeffs()],
            features.values().to_vec(),
        )?)
    }

    fn run(&self, features: &FeatureMatrix, mut trace: Option<&mut Trace>) -> Result<Tensor> {
        let mut x = self.input_tensor(features)?;
        for layer in &self.layers {
            let mut argmax = None;
            let y = match *layer {
                Layer::Conv { weight, bias, stride } => {
                    nn::conv2d_forward(&x, &self.params[weight].value, &self.params[bias].value, stride)?
                }
                Layer::Relu => nn::relu_forward(&x),
                Layer::MaxPool { p, q } => {
                    let (y, idx) = nn::maxpool2d(&x, p, q)?;
                    argmax = Some(idx);
                    y
                }
                Layer::Flatten { output } => x.clone().reshape(&[output])?,
                Layer::Linear { weight, bias } => {
                    nn::linear_forward(&x, &self.params[weight].value, &self.params[bias].value)?
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.inputs.push(x);
                t.argmax.push(argmax);
            }
            x = y;
        }
        Ok(x)
    }

    /// Logits for one feature matrix.
    pub fn forward(&self, features: &FeatureMatrix) -> Result<Tensor> {
        self.run(features, None)
    }

    /// Logits plus the trace needed by [`Model::backward`].
    pub fn forward_train(&self, features: &FeatureMatrix) -> Result<(Tensor, Trace)> {
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            argmax: Vec::with_capacity(self.layers.len()),
        };
        let logits = self.run(features, Some(&mut trace))?;
        Ok((logits, trace))
    }

    /// Parameter gradients (build order) for the given logit gradient.
    pub fn backward(&self, trace: &Trace, grad_logits: &Tensor) -> Result<Vec<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut g = grad_logits.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.inputs[i];
            let first = i == 0;
            g = match *layer {
                Layer::Conv { weight, bias, stride } => {
                    let w = &self.params[weight].value;
                    let (gw, gb) = nn::conv2d_backward_params(x, w.dims(), &g, stride)?;
                    grads[weight] = Some(gw);
                    grads[bias] = Some(gb);
                    if first {
                        break;
                    }
                    nn::conv2d_backward_input(w, &g, x.dims(), stride)?
                }
                Layer::Relu => nn::relu_backward(x, &g)?,
                Layer::MaxPool { .. } => {
                    let idx = trace.argmax[i].as_ref().expect("pool trace records argmax");
                    nn::maxpool2d_backward(&g, idx, x.dims())?
                }
                Layer::Flatten { .. } => g.reshape(x.dims())?,
                Layer::Linear { weight, bias } => {
                    let (gx, gw, gb) = nn::linear_backward(x, &self.params[weight].value, &g)?;
                    grads[weight] = Some(gw);
                    grads[bias] = Some(gb);
                    gx
                }
            };
        }
        Ok(grads
            .into_iter()
            .zip(&self.params)
            .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.dims())))
            .collect())
    }

    /// Replaces one parameter's value; used by checkpoint loading.
    pub(crate) fn set_value(&mut self, index: usize, value: Tensor) {
        assert_eq!(self.params[index].dims(), value.dims());
        self.params[index].value = value;
    }
}

pub fn build_cnn_trad_pool2(n_labels: usize, rng: &mut Rng) -> Result<Model> {
    Model::build(ModelSpec::cnn_trad_pool2(n_labels), rng)
}

pub fn build_cnn_one_fstride4(n_labels: usize, rng: &mut Rng) -> Result<Model> {
    Model::build(ModelSpec::cnn_one_fstride4(n_labels), rng)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub index: usize,
    pub label: String,
    /// Softmax probabilities in label order, computed in `f64`.
    pub scores: Vec<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn prediction_from_logits(logits: &[f32], labels: &[String]) -> Prediction {
    let wide: Vec<f64> = logits.iter().map(|&z| f64::from(z)).collect();
    let scores = nn::softmax(&wide);
    let index = argmax(logits);
    Prediction {
        index,
        label: labels[index].clone(),
        scores,
    }
}

pub fn predict(model: &Model, features: &FeatureMatrix) -> Result<Prediction> {
    let logits = model.forward(features)?;
    Ok(prediction_from_logits(logits.data(), &model.labels()))
}
