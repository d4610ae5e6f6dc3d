//! Layers, parameter initialization, and optimizers for the MLP/LeNet-class
//! classifiers used throughout the crate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{softmax_row_in_place, NodeId, Tape, Tensor};

/// One layer of a sequential model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { units: usize },
    /// Valid-padding convolution; rank-3 input `[h x w]` per sample is
    /// treated as a single channel.
    Conv2d { filters: usize, kernel: usize, stride: usize },
    Relu,
    Dropout { rate: f64 },
    Flatten,
    Maxpool2d { kernel: usize, stride: usize },
}

impl LayerSpec {
    fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Dense { units } => {
                if units < 1 {
                    return Err(Error::Config("dense units must be >= 1".into()));
                }
            }
            LayerSpec::Conv2d { filters, kernel, stride } => {
                if filters < 1 || stride < 1 {
                    return Err(Error::Config("conv2d filters and stride must be >= 1".into()));
                }
                if kernel < 1 || kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "conv2d kernel must be odd and >= 1, got {kernel}"
                    )));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::Config(format!(
                        "dropout rate must be in [0, 1), got {rate}"
                    )));
                }
            }
            LayerSpec::Maxpool2d { kernel, stride } => {
                if kernel < 1 || stride < 1 {
                    return Err(Error::Config("maxpool2d kernel and stride must be >= 1".into()));
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten => {}
        }
        Ok(())
    }
}

/// Optimizer family plus its fixed hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Rmsprop { decay: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd_momentum() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::Rmsprop { decay: 0.9, epsilon: 1e-8 }
    }
}

/// A sequential classifier: ordered layers plus their parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    layers: Vec<LayerSpec>,
    params: Vec<Tensor>,
    /// Parameter tensors per layer index (dense/conv own two, others none).
    layer_params: Vec<Vec<usize>>,
    input_shape: Vec<usize>,
    num_classes: usize,
    pub training: bool,
}

/// Symbolic per-sample shape walk; validates that consecutive layers compose.
fn walk_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input_shape.to_vec()];
    let mut cur = input_shape.to_vec();
    for (idx, layer) in layers.iter().enumerate() {
        layer.validate()?;
        cur = match *layer {
            LayerSpec::Dense { units } => {
                if cur.len() != 1 {
                    return Err(Error::Config(format!(
                        "layer {idx}: dense expects a flat input, got {cur:?}"
                    )));
                }
                vec![units]
            }
            LayerSpec::Conv2d { filters, kernel, stride } => {
                let (h, w) = match cur.len() {
                    2 => (cur[0], cur[1]),
                    3 => (cur[1], cur[2]),
                    _ => {
                        return Err(Error::Config(format!(
                            "layer {idx}: conv2d expects [h,w] or [c,h,w], got {cur:?}"
                        )))
                    }
                };
                if kernel > h || kernel > w {
                    return Err(Error::Config(format!(
                        "layer {idx}: kernel {kernel} exceeds input {h}x{w}"
                    )));
                }
                vec![filters, (h - kernel) / stride + 1, (w - kernel) / stride + 1]
            }
            LayerSpec::Maxpool2d { kernel, stride } => {
                if cur.len() != 3 {
                    return Err(Error::Config(format!(
                        "layer {idx}: maxpool2d expects [c,h,w], got {cur:?}"
                    )));
                }
                if kernel > cur[1] || kernel > cur[2] {
                    return Err(Error::Config(format!(
                        "layer {idx}: pool kernel {kernel} exceeds input {cur:?}"
                    )));
                }
                vec![cur[0], (cur[1] - kernel) / stride + 1, (cur[2] - kernel) / stride + 1]
            }
            LayerSpec::Flatten => vec![cur.iter().product()],
            LayerSpec::Relu | LayerSpec::Dropout { .. } => cur.clone(),
        };
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

impl Model {
    /// Build a model with fan-in-scaled uniform initialization (He-style
    /// bound for layers feeding a relu, LeCun-style otherwise).
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        num_classes: usize,
        init_rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "class count must be >= 2, got {num_classes}"
            )));
        }
        let shapes = walk_shapes(&input_shape, &layers)?;
        let out = shapes.last().unwrap();
        if out.as_slice() != [num_classes] {
            return Err(Error::Config(format!(
                "layers produce {out:?}, expected [{num_classes}]"
            )));
        }

        let mut params = Vec::new();
        let mut layer_params = Vec::new();
        for (idx, layer) in layers.iter().enumerate() {
            let feeds_relu = matches!(layers.get(idx + 1), Some(LayerSpec::Relu));
            let mut own = Vec::new();
            match *layer {
                LayerSpec::Dense { units } => {
                    let fan_in = shapes[idx][0];
                    let bound = init_bound(fan_in, feeds_relu);
                    own.push(params.len());
                    params.push(init_uniform(vec![fan_in, units], bound, init_rng));
                    own.push(params.len());
                    params.push(Tensor::zeros(vec![units]).with_grad());
                }
                LayerSpec::Conv2d { filters, kernel, .. } => {
                    let cin = match shapes[idx].len() {
                        2 => 1,
                        _ => shapes[idx][0],
                    };
                    let fan_in = cin * kernel * kernel;
                    let bound = init_bound(fan_in, feeds_relu);
                    own.push(params.len());
                    params.push(init_uniform(vec![filters, cin, kernel, kernel], bound, init_rng));
                    own.push(params.len());
                    params.push(Tensor::zeros(vec![filters]).with_grad());
                }
                _ => {}
            }
            layer_params.push(own);
        }

        Ok(Self {
            layers,
            params,
            layer_params,
            input_shape,
            num_classes,
            training: false,
        })
    }

    /// Rebuild a model skeleton with zeroed parameters (checkpoint restore
    /// fills them in).
    pub fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        num_classes: usize,
    ) -> Result<Self> {
        let mut rng = crate::rng::stream_rng(0, crate::rng::STREAM_INIT);
        let mut model = Self::new(input_shape, layers, num_classes, &mut rng)?;
        for p in model.params_mut() {
            p.data_mut().fill(0.0);
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Replace all parameters (checkpoint restore); length must match.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params.iter().map(|p| p.numel()).sum();
        if flat.len() != total {
            return Err(Error::Contract(format!(
                "expected {total} parameter values, got {}",
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.numel();
            p.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for p in &self.params {
            out.extend_from_slice(p.data());
        }
        out
    }

    /// Record all parameters on a tape. `trainable` controls whether the
    /// parameter leaves participate in the gradient.
    pub fn lease_params(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p)
                } else {
                    tape.constant(p)
                }
            })
            .collect()
    }

    /// Forward pass from an already-recorded input node.
    ///
    /// Dropout draws masks from `dropout_rng` only when `training` is set;
    /// pass `None` in eval mode (or when no dropout layer is present).
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        input: NodeId,
        param_nodes: &[NodeId],
        training: bool,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let in_shape = tape.shape(input).to_vec();
        if in_shape.len() < 2 || in_shape[1..] != self.input_shape[..] {
            return Err(Error::Dimension {
                op: "forward",
                lhs: in_shape,
                rhs: self.input_shape.clone(),
            });
        }
        let batch = in_shape[0];
        let mut cur = input;
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Dense { .. } => {
                    let w = param_nodes[self.layer_params[idx][0]];
                    let b = param_nodes[self.layer_params[idx][1]];
                    let xw = tape.matmul(cur, w)?;
                    tape.add_row_broadcast(xw, b)?
                }
                LayerSpec::Conv2d { stride, .. } => {
                    let w = param_nodes[self.layer_params[idx][0]];
                    let b = param_nodes[self.layer_params[idx][1]];
                    let cur4 = match tape.shape(cur).len() {
                        3 => {
                            let s = tape.shape(cur).to_vec();
                            tape.reshape(cur, vec![s[0], 1, s[1], s[2]])?
                        }
                        _ => cur,
                    };
                    let y = tape.conv2d(cur4, w, stride)?;
                    tape.add_chan_broadcast(y, b)?
                }
                LayerSpec::Relu => tape.relu(cur),
                LayerSpec::Dropout { rate } => {
                    if training && rate > 0.0 {
                        let rng = dropout_rng.as_deref_mut().ok_or_else(|| {
                            Error::Contract(
                                "training-mode forward with dropout requires an RNG".into(),
                            )
                        })?;
                        let keep = 1.0 - rate;
                        let n = tape.value(cur).len();
                        let mask: Vec<f64> = (0..n)
                            .map(|_| {
                                if rng.random::<f64>() < keep {
                                    1.0 / keep
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        tape.dropout_mask(cur, mask)?
                    } else {
                        cur
                    }
                }
                LayerSpec::Flatten => {
                    let n: usize = tape.shape(cur)[1..].iter().product();
                    tape.reshape(cur, vec![batch, n])?
                }
                LayerSpec::Maxpool2d { kernel, stride } => tape.maxpool2d(cur, kernel, stride)?,
            };
        }
        Ok(cur)
    }

    /// Convenience wrapper: lease parameters, record the batch, run forward.
    /// Returns the logits node and the leased parameter nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        batch: &Tensor,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let param_nodes = self.lease_params(tape, true);
        let input = tape.constant(batch);
        let logits = self.forward_from(tape, input, &param_nodes, self.training, dropout_rng)?;
        Ok((logits, param_nodes))
    }

    /// Eval-mode class probabilities for a batch.
    pub fn predict_probs(&self, batch: &Tensor) -> Result<Tensor> {
        softmax_confidences(&self.predict_logits(batch)?)
    }

    /// Eval-mode logits for a batch.
    pub fn predict_logits(&self, batch: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let param_nodes = self.lease_params(&mut tape, false);
        let input = tape.constant(batch);
        let logits = self.forward_from(&mut tape, input, &param_nodes, false, None)?;
        Ok(tape.to_tensor(logits))
    }

    /// Copy gradients from a tape into the parameter tensors.
    pub fn collect_grads(&mut self, tape: &Tape, param_nodes: &[NodeId]) -> Result<()> {
        for (p, &id) in self.params.iter_mut().zip(param_nodes) {
            let g = tape.grad(id).ok_or_else(|| {
                Error::Contract("parameter gradient missing; run backward first".into())
            })?;
            match &mut p.grad {
                Some(buf) => {
                    for (slot, &gv) in buf.iter_mut().zip(g) {
                        *slot += gv;
                    }
                }
                None => p.grad = Some(g.to_vec()),
            }
        }
        Ok(())
    }
}

fn init_bound(fan_in: usize, feeds_relu: bool) -> f64 {
    let scale = if feeds_relu { 6.0 } else { 3.0 };
    (scale / fan_in as f64).sqrt()
}

fn init_uniform(shape: Vec<usize>, bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("init data is finite").with_grad()
}

/// Row-wise softmax with max-subtraction; rows sum to 1 within 1e-9.
pub fn softmax_confidences(logits: &Tensor) -> Result<Tensor> {
    let shape = logits.shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::Dimension {
            op: "softmax_confidences",
            lhs: shape,
            rhs: vec![],
        });
    }
    let c = shape[1];
    let mut data = logits.data().to_vec();
    for row in data.chunks_mut(c) {
        softmax_row_in_place(row);
    }
    Tensor::new(shape, data)
}

/// Optimizer with per-parameter auxiliary buffers and decoupled L2 decay.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    l2: f64,
    bufs: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, l2: f64, model: &Model) -> Result<Self> {
        if learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be > 0, got {learning_rate}"
            )));
        }
        if l2 < 0.0 {
            return Err(Error::Config(format!("l2 coefficient must be >= 0, got {l2}")));
        }
        Ok(Self {
            kind,
            learning_rate,
            l2,
            bufs: model.params().iter().map(|p| vec![0.0; p.numel()]).collect(),
        })
    }

    /// Apply one update from the gradients stored on the model parameters,
    /// then clear them. Decay is decoupled: `p -= lr * l2 * p` on the
    /// pre-update value, independent of the gradient path.
    pub fn step(&mut self, model: &mut Model) -> Result<()> {
        let lr = self.learning_rate;
        let l2 = self.l2;
        for (p, buf) in model.params_mut().iter_mut().zip(&mut self.bufs) {
            let grad = p
                .grad
                .take()
                .ok_or_else(|| Error::Contract("optimizer step with missing gradients".into()))?;
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    for i in 0..data.len() {
                        buf[i] = momentum * buf[i] + grad[i];
                        let decay = lr * l2 * data[i];
                        data[i] -= lr * buf[i] + decay;
                    }
                }
                OptimizerKind::Rmsprop { decay: rho, epsilon } => {
                    for i in 0..data.len() {
                        buf[i] = rho * buf[i] + (1.0 - rho) * grad[i] * grad[i];
                        let decay = lr * l2 * data[i];
                        data[i] -= lr * grad[i] / (buf[i].sqrt() + epsilon) + decay;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Reference architectures. The image presets approximate the small
/// MNIST-scale networks typical of this problem family; exact layer sizes
/// are a documented choice, not a reproduction.
pub fn preset(name: &str, num_classes: usize, init_rng: &mut ChaCha8Rng) -> Result<Model> {
    match name {
        "mlp-small" => Model::new(
            vec![28, 28],
            vec![
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 128 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { units: 128 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { units: num_classes },
            ],
            num_classes,
            init_rng,
        ),
        "lenet-like" => Model::new(
            vec![28, 28],
            vec![
                LayerSpec::Conv2d { filters: 8, kernel: 5, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Maxpool2d { kernel: 2, stride: 2 },
                LayerSpec::Conv2d { filters: 16, kernel: 5, stride: 1 },
                LayerSpec::Relu,
                LayerSpec::Maxpool2d { kernel: 2, stride: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 64 },
                LayerSpec::Relu,
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { units: num_classes },
            ],
            num_classes,
            init_rng,
        ),
        "mlp-2d" => Model::new(
            vec![2],
            vec![
                LayerSpec::Dense { units: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: num_classes },
            ],
            num_classes,
            init_rng,
        ),
        other => Err(Error::Config(format!("unknown model preset: {other}"))),
    }
}
