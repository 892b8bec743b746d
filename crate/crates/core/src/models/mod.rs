//! Plain and interpretable classifiers over fully connected, highway and
//! convolutional trunks.
//!
//! Every model is a trunk producing a feature vector `v(X)` followed by a
//! head:
//!
//! * `plain-bc` / `plain-mc`: an affine map to one logit (sigmoid) or `c`
//!   logits (softmax).
//! * `iffnn-bc`: `w(X) = W2·v(X) + b2` is a per-sample weight for each of the
//!   `m` flattened input features and the logit is `w(X)ᵀx' + b`.
//! * `iffnn-mc`: `W(X) = reshape(W2·v(X), c×m) + B2` and the logits are
//!   `W(X)·x' + b`.
//!
//! With the trunk set to `none` and a plain head the model is logistic
//! (binary) or softmax (multi-class) regression.

mod checkpoint;
mod spec;
mod variants;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Activation, ParamId, Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use spec::{ConvBlock, HeadKind, ModelSpec, Trunk};
pub use variants::{Family, Variant, VariantName};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("operation needs a {expected} head, model has {found}")]
    HeadMismatch { expected: &'static str, found: HeadKind },
    #[error("input shape {found:?} does not match model input {expected:?}")]
    InputShape { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Name, shape and initialization fan of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    /// `(fan_in, fan_out)` for weights; `None` for zero-initialized biases.
    pub fan: Option<(usize, usize)>,
}

impl ParamSlot {
    fn weight(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            shape,
            fan: Some((fan_in, fan_out)),
        }
    }

    fn bias(name: impl Into<String>, shape: Vec<usize>) -> Self {
        Self {
            name: name.into(),
            shape,
            fan: None,
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered parameter layout of a spec. Initialization draws in this order.
pub fn param_layout(spec: &ModelSpec) -> Vec<ParamSlot> {
    let m = spec.input_len();
    let c = spec.classes;
    let mut slots = Vec::new();
    let d = match &spec.trunk {
        Trunk::None => m,
        Trunk::Fc { hidden } => {
            let mut prev = m;
            for (i, &h) in hidden.iter().enumerate() {
                slots.push(ParamSlot::weight(format!("trunk.fc{i}.weight"), vec![h, prev], prev, h));
                slots.push(ParamSlot::bias(format!("trunk.fc{i}.bias"), vec![h]));
                prev = h;
            }
            prev
        }
        Trunk::Highway { hidden } => {
            let h = hidden[0];
            slots.push(ParamSlot::weight("trunk.proj.weight", vec![h, m], m, h));
            slots.push(ParamSlot::bias("trunk.proj.bias", vec![h]));
            for i in 0..hidden.len() {
                slots.push(ParamSlot::weight(format!("trunk.hw{i}.transform.weight"), vec![h, h], h, h));
                slots.push(ParamSlot::bias(format!("trunk.hw{i}.transform.bias"), vec![h]));
                slots.push(ParamSlot::weight(format!("trunk.hw{i}.gate.weight"), vec![h, h], h, h));
                slots.push(ParamSlot::bias(format!("trunk.hw{i}.gate.bias"), vec![h]));
            }
            h
        }
        Trunk::Cnn { blocks } => {
            let (mut ch, mut h, mut w) = spec.image_dims();
            for (i, b) in blocks.iter().enumerate() {
                let area = b.size * b.size;
                slots.push(ParamSlot::weight(
                    format!("trunk.conv{i}.kernels"),
                    vec![b.kernels, ch, b.size, b.size],
                    ch * area,
                    b.kernels * area,
                ));
                slots.push(ParamSlot::bias(format!("trunk.conv{i}.bias"), vec![b.kernels]));
                ch = b.kernels;
                if b.pool > 1 {
                    h = (h - b.pool) / b.pool + 1;
                    w = (w - b.pool) / b.pool + 1;
                }
            }
            ch * h * w
        }
    };
    match spec.head {
        HeadKind::PlainBc => {
            slots.push(ParamSlot::weight("head.weight", vec![1, d], d, 1));
            slots.push(ParamSlot::bias("head.bias", vec![1]));
        }
        HeadKind::PlainMc => {
            slots.push(ParamSlot::weight("head.weight", vec![c, d], d, c));
            slots.push(ParamSlot::bias("head.bias", vec![c]));
        }
        HeadKind::IffnnBc => {
            slots.push(ParamSlot::weight("head.w2", vec![m, d], d, m));
            slots.push(ParamSlot::bias("head.b2", vec![m]));
            slots.push(ParamSlot::bias("head.bias", vec![1]));
        }
        HeadKind::IffnnMc => {
            slots.push(ParamSlot::weight("head.w2", vec![c * m, d], d, c * m));
            slots.push(ParamSlot::bias("head.b2", vec![c, m]));
            slots.push(ParamSlot::bias("head.bias", vec![c]));
        }
    }
    slots
}

/// Total scalar parameters of a spec, without building it.
pub fn spec_param_count(spec: &ModelSpec) -> usize {
    param_layout(spec).iter().map(ParamSlot::len).sum()
}

/// Output of a batched forward pass.
pub struct Forward<'t> {
    /// `[batch]` positive-class logits (binary heads) or `[batch, c]`.
    pub logits: Var<'t>,
    /// `[batch, m]` (iffnn-bc) or `[batch, c, m]` (iffnn-mc) per-sample
    /// feature weights; `None` for plain heads.
    pub weights: Option<Var<'t>>,
    /// `[batch, m]` flattened inputs.
    pub x_flat: Var<'t>,
}

/// Per-sample output of an iffnn-bc head.
#[derive(Debug, Clone)]
pub struct IffnnBcOutput {
    pub prob: f64,
    pub logit: f64,
    /// `w(X)`, shape `[m]`.
    pub weights: Tensor,
    /// `flatten(X)`, shape `[m]`.
    pub x_flat: Tensor,
}

/// Per-sample output of an iffnn-mc head.
#[derive(Debug, Clone)]
pub struct IffnnMcOutput {
    pub probs: Tensor,
    pub logits: Tensor,
    /// `W(X)`, shape `[c, m]`.
    pub weights: Tensor,
    /// `flatten(X)`, shape `[m]`.
    pub x_flat: Tensor,
}

/// Instantiated parameters of a [`ModelSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl Model {
    /// Builds a model with Glorot-uniform weights and zero biases drawn from
    /// `spec.seed` in layout order.
    pub fn build(spec: &ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for slot in param_layout(spec) {
            let data = match slot.fan {
                Some((fan_in, fan_out)) => {
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit);
                    (0..slot.len()).map(|_| dist.sample(&mut rng)).collect()
                }
                None => vec![0.0; slot.len()],
            };
            params.push(Tensor::new(&slot.shape, data)?);
            names.push(slot.name);
        }
        Ok(Self {
            spec: spec.clone(),
            names,
            params,
        })
    }

    /// Assembles a model from explicit parameters, checked against the
    /// spec's layout.
    pub fn from_params(spec: &ModelSpec, params: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        spec.validate()?;
        let layout = param_layout(spec);
        if layout.len() != params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (slot, (name, t)) in layout.iter().zip(&params) {
            if slot.name != *name || slot.shape != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter `{name}` {:?} does not match expected `{}` {:?}",
                    t.shape(),
                    slot.name,
                    slot.shape
                )));
            }
        }
        let (names, params) = params.into_iter().unzip();
        Ok(Self {
            spec: spec.clone(),
            names,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.param_id(name).map(|id| &self.params[id.0])
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    /// Replaces a parameter; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<(), ModelError> {
        let id = self
            .param_id(name)
            .ok_or_else(|| ModelError::InvalidSpec(format!("no parameter named `{name}`")))?;
        if self.params[id.0].shape() != value.shape() {
            return Err(TensorError::Shape {
                op: "set_param",
                lhs: self.params[id.0].shape().to_vec(),
                rhs: value.shape().to_vec(),
            }
            .into());
        }
        self.params[id.0] = value;
        Ok(())
    }

    /// Batch size of `x`, which must be `[batch, ...input_shape]`.
    fn batch_of(&self, x: &Tensor) -> Result<usize, ModelError> {
        let s = x.shape();
        if s.len() == self.spec.input_shape.len() + 1 && s[1..] == self.spec.input_shape[..] {
            Ok(s[0])
        } else {
            Err(ModelError::InputShape {
                expected: self.spec.input_shape.clone(),
                found: s.to_vec(),
            })
        }
    }

    fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.param(ParamId(i), p))
            .collect()
    }

    /// Records the trunk on `tape`; returns `[batch, d]` features.
    fn trunk_vars<'t>(
        &self,
        params: &mut std::slice::Iter<'_, Var<'t>>,
        x: &Var<'t>,
        batch: usize,
    ) -> Result<Var<'t>, ModelError> {
        let act = self.spec.activation;
        let mut next = || *params.next().expect("layout and parameter list agree");
        let m = self.spec.input_len();
        Ok(match &self.spec.trunk {
            Trunk::None => x.reshape(&[batch, m])?,
            Trunk::Fc { hidden } => {
                let mut v = x.reshape(&[batch, m])?;
                for _ in hidden {
                    let (w, b) = (next(), next());
                    v = v.affine(&w, Some(&b))?.activation(act)?;
                }
                v
            }
            Trunk::Highway { hidden } => {
                let (w, b) = (next(), next());
                let mut v = x.reshape(&[batch, m])?.affine(&w, Some(&b))?.activation(act)?;
                for _ in hidden {
                    let (wh, bh, wt, bt) = (next(), next(), next(), next());
                    v = highway_layer(&v, (&wh, &bh), (&wt, &bt), act)?;
                }
                v
            }
            Trunk::Cnn { blocks } => {
                let (ch, h, w) = self.spec.image_dims();
                let mut v = x.reshape(&[batch, ch, h, w])?;
                for b in blocks {
                    let (k, bias) = (next(), next());
                    v = v.conv2d(&k, Some(&bias), 1, b.size / 2)?.activation(act)?;
                    if b.pool > 1 {
                        v = v.maxpool2d(b.pool, b.pool)?;
                    }
                }
                v.flatten_batch()?
            }
        })
    }

    /// Batched forward pass over `x` of shape `[batch, ...input_shape]`.
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor) -> Result<Forward<'t>, ModelError> {
        let batch = self.batch_of(x)?;
        let m = self.spec.input_len();
        let c = self.spec.classes;
        let bound = self.bind(tape);
        let mut params = bound.iter();
        let xin = tape.constant(x);
        let x_flat = xin.reshape(&[batch, m])?;
        let v = self.trunk_vars(&mut params, &xin, batch)?;
        let mut next = || *params.next().expect("layout and parameter list agree");
        let out = match self.spec.head {
            HeadKind::PlainBc => {
                let (w, b) = (next(), next());
                Forward {
                    logits: v.affine(&w, Some(&b))?.reshape(&[batch])?,
                    weights: None,
                    x_flat,
                }
            }
            HeadKind::PlainMc => {
                let (w, b) = (next(), next());
                Forward {
                    logits: v.affine(&w, Some(&b))?,
                    weights: None,
                    x_flat,
                }
            }
            HeadKind::IffnnBc => {
                let (w2, b2, b) = (next(), next(), next());
                let weights = v.affine(&w2, Some(&b2))?;
                let logits = weights
                    .reshape(&[batch, 1, m])?
                    .rowwise_dot(&x_flat)?
                    .add_bias(&b)?
                    .reshape(&[batch])?;
                Forward {
                    logits,
                    weights: Some(weights),
                    x_flat,
                }
            }
            HeadKind::IffnnMc => {
                let (w2, b2, b) = (next(), next(), next());
                // reshape(W2·v + vec(B2)) == reshape(W2·v) + B2
                let b2_flat = b2.reshape(&[c * m])?;
                let weights = v.affine(&w2, Some(&b2_flat))?.reshape(&[batch, c, m])?;
                let logits = weights.rowwise_dot(&x_flat)?.add_bias(&b)?;
                Forward {
                    logits,
                    weights: Some(weights),
                    x_flat,
                }
            }
        };
        Ok(out)
    }

    /// Mean training loss of a batch: binary cross-entropy for binary heads,
    /// softmax cross-entropy otherwise.
    pub fn loss<'t>(&self, tape: &'t Tape, x: &Tensor, labels: &[usize]) -> Result<Var<'t>, ModelError> {
        let fwd = self.forward(tape, x)?;
        Ok(if self.spec.head.is_binary() {
            fwd.logits.binary_cross_entropy(labels)?
        } else {
            fwd.logits.cross_entropy(labels)?
        })
    }

    /// Logits for a batch without keeping the tape.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        Ok(self.forward(&tape, x)?.logits.value())
    }

    /// Predicted classes for a batch. Binary heads predict class 1 iff the
    /// logit is non-negative, i.e. iff the probability is at least 0.5.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(x)?;
        Ok(if self.spec.head.is_binary() {
            logits.data().iter().map(|&z| usize::from(z >= 0.0)).collect()
        } else {
            let c = self.spec.classes;
            logits.data().chunks_exact(c).map(argmax).collect()
        })
    }

    fn single(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if x.shape() != self.spec.input_shape {
            return Err(ModelError::InputShape {
                expected: self.spec.input_shape.clone(),
                found: x.shape().to_vec(),
            });
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        Ok(x.reshape(&shape)?)
    }

    /// Feature vector `v(X)` of one sample.
    pub fn trunk_forward(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let xb = self.single(x)?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let xin = tape.constant(&xb);
        let v = self.trunk_vars(&mut bound.iter(), &xin, 1)?.value();
        let d = v.len();
        Ok(v.reshape(&[d])?)
    }

    /// Class probabilities of a plain head: `[c]` for multi-class, the
    /// positive-class probability `[1]` for binary.
    pub fn forward_plain(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        if self.spec.head.is_iffnn() {
            return Err(ModelError::HeadMismatch {
                expected: "plain",
                found: self.spec.head,
            });
        }
        let xb = self.single(x)?;
        let tape = Tape::new();
        let logits = self.forward(&tape, &xb)?.logits;
        let probs = if self.spec.head.is_binary() {
            logits.sigmoid()?
        } else {
            logits.softmax()?
        };
        let p = probs.value();
        let n = p.len();
        Ok(p.reshape(&[n])?)
    }

    pub fn forward_iffnn_bc(&self, x: &Tensor) -> Result<IffnnBcOutput, ModelError> {
        if self.spec.head != HeadKind::IffnnBc {
            return Err(ModelError::HeadMismatch {
                expected: "iffnn-bc",
                found: self.spec.head,
            });
        }
        let m = self.spec.input_len();
        let xb = self.single(x)?;
        let tape = Tape::new();
        let fwd = self.forward(&tape, &xb)?;
        let logit = fwd.logits.value().item();
        Ok(IffnnBcOutput {
            prob: crate::autodiff::sigmoid_scalar(logit),
            logit,
            weights: fwd.weights.expect("iffnn head").value().reshape(&[m])?,
            x_flat: fwd.x_flat.value().reshape(&[m])?,
        })
    }

    pub fn forward_iffnn_mc(&self, x: &Tensor) -> Result<IffnnMcOutput, ModelError> {
        if self.spec.head != HeadKind::IffnnMc {
            return Err(ModelError::HeadMismatch {
                expected: "iffnn-mc",
                found: self.spec.head,
            });
        }
        let (m, c) = (self.spec.input_len(), self.spec.classes);
        let xb = self.single(x)?;
        let tape = Tape::new();
        let fwd = self.forward(&tape, &xb)?;
        let logits = fwd.logits.value().reshape(&[c])?;
        let mut probs = logits.to_vec();
        crate::autodiff::softmax_in_place(&mut probs);
        Ok(IffnnMcOutput {
            probs: Tensor::new(&[c], probs)?,
            logits,
            weights: fwd.weights.expect("iffnn head").value().reshape(&[c, m])?,
            x_flat: fwd.x_flat.value().reshape(&[m])?,
        })
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Gated layer `H ⊙ T + x ⊙ (1 − T)` with `H = act(W_H x + b_H)` and
/// `T = σ(W_T x + b_T)`. Both weight matrices must be square.
pub fn highway_layer<'t>(
    x: &Var<'t>,
    transform: (&Var<'t>, &Var<'t>),
    gate: (&Var<'t>, &Var<'t>),
    act: Activation,
) -> Result<Var<'t>, ModelError> {
    let d = *x.shape().last().expect("rank >= 1");
    for w in [transform.0, gate.0] {
        if w.shape() != [d, d] {
            return Err(ModelError::InvalidSpec(format!(
                "highway layer needs square [{d}, {d}] weights, got {:?}",
                w.shape()
            )));
        }
    }
    let h = x.affine(transform.0, Some(transform.1))?.activation(act)?;
    let t = x.affine(gate.0, Some(gate.1))?.sigmoid()?;
    let ones = x.tape().constant(&Tensor::full(&x.shape(), 1.0));
    let carry = ones.sub(&t)?;
    Ok(h.mul(&t)?.add(&x.mul(&carry)?)?)
}
