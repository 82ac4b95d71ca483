//! Sequential feed-forward networks and their checkpoint format.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{forward_primitive, NodeId, Primitive, Tape, Tensor};

/// One layer of a sequential network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// 5x5 valid convolution, stride 1.
    Conv5x5 { in_channels: usize, filters: usize },
    MaxPool2,
    Relu,
    Flatten,
}

impl LayerSpec {
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>, usize)> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs], inputs)),
            LayerSpec::Conv5x5 {
                in_channels,
                filters,
            } => Some((vec![filters, in_channels, 5, 5], vec![filters], in_channels * 25)),
            _ => None,
        }
    }

    /// Per-example output shape, or an error naming the mismatch.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match (self, input) {
            (LayerSpec::Dense { inputs, outputs }, [d]) if d == inputs => Ok(vec![*outputs]),
            (LayerSpec::Conv5x5 { in_channels, filters }, [c, h, w]) if c == in_channels && *h >= 5 && *w >= 5 => {
                Ok(vec![*filters, h - 4, w - 4])
            }
            (LayerSpec::MaxPool2, [c, h, w]) if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
            (LayerSpec::Relu, s) => Ok(s.to_vec()),
            (LayerSpec::Flatten, s) if !s.is_empty() => Ok(vec![s.iter().product()]),
            (layer, s) => Err(Error::shape("model", format!("{layer:?} cannot take input {s:?}"))),
        }
    }
}

/// Provenance recorded alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub method: String,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub seed: u64,
    pub init: String,
}

impl ModelMetadata {
    fn untrained(seed: u64) -> Self {
        Self {
            method: "untrained".into(),
            lambda: None,
            gamma: None,
            alpha: None,
            beta: None,
            seed,
            init: "fan_in_uniform".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Sequential network mapping inputs to logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<Param>,
    pub metadata: ModelMetadata,
}

/// Label and class probabilities for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub probabilities: Vec<f64>,
}

impl Model {
    /// Builds a network and initializes every weight and bias from
    /// `U(-1/√fan_in, 1/√fan_in)` using `seed`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let out = infer_output_shape(&input_shape, &layers)?;
        if out.len() != 1 {
            return Err(Error::shape("model", format!("network must end in a logit vector, got {out:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in layers.iter().enumerate() {
            if let Some((ws, bs, fan_in)) = layer.param_shapes() {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |shape: &[usize]| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                    Tensor::new(shape.to_vec(), data).expect("shape from layer spec")
                };
                params.push(Param {
                    name: format!("{i}.weight"),
                    value: draw(&ws),
                });
                params.push(Param {
                    name: format!("{i}.bias"),
                    value: draw(&bs),
                });
            }
        }
        Ok(Self {
            input_shape,
            layers,
            params,
            metadata: ModelMetadata::untrained(seed),
        })
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        params: Vec<Param>,
        metadata: ModelMetadata,
    ) -> Result<Self> {
        let mut model = Self::new(input_shape, layers, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::MalformedCheckpoint(format!(
                "architecture needs {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (slot, p) in model.params.iter_mut().zip(params) {
            if slot.name != p.name || slot.value.shape() != p.value.shape() {
                return Err(Error::MalformedCheckpoint(format!(
                    "expected {} {:?}, found {} {:?}",
                    slot.name,
                    slot.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *slot = p;
        }
        model.metadata = metadata;
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn num_classes(&self) -> usize {
        infer_output_shape(&self.input_shape, &self.layers).expect("validated at construction")[0]
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_param",
                format!("{name} is {:?}, got {:?}", slot.value.shape(), value.shape()),
            ));
        }
        slot.value = value;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Same architecture with all parameters multiplied by `t`; `t = 0` gives
    /// the constant-zero model.
    pub fn scaled(&self, t: f64) -> Self {
        let mut m = self.clone();
        for p in &mut m.params {
            p.value = p.value.map(|v| v * t);
        }
        m
    }

    /// Shape of a batch of `n` inputs.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.input_shape);
        s
    }

    /// Records the parameters as tape leaves.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<NodeId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect()
    }

    /// Records the forward pass of a batch `x` using parameter leaves from
    /// [`Model::bind`]; returns the logits node.
    pub fn forward(&self, tape: &mut Tape, x: NodeId, params: &[NodeId]) -> Result<NodeId> {
        let mut h = x;
        let mut next = params.iter();
        for layer in &self.layers {
            h = match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv5x5 { .. } => {
                    let (w, b) = (*next.next().expect("bound params"), *next.next().expect("bound params"));
                    if matches!(layer, LayerSpec::Dense { .. }) {
                        tape.dense(h, w, b)?
                    } else {
                        tape.conv2d(h, w, b)?
                    }
                }
                LayerSpec::MaxPool2 => tape.max_pool2(h)?,
                LayerSpec::Relu => tape.relu(h)?,
                LayerSpec::Flatten => tape.flatten(h)?,
            };
        }
        Ok(h)
    }

    /// Logits for a batch `[N, ...input_shape]` without recording.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_batch(x)?;
        let mut h = x.clone();
        let mut next = self.params.iter();
        for layer in &self.layers {
            h = match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv5x5 { .. } => {
                    let w = &next.next().expect("param").value;
                    let b = &next.next().expect("param").value;
                    let op = if matches!(layer, LayerSpec::Dense { .. }) {
                        Primitive::Dense
                    } else {
                        Primitive::Conv2d
                    };
                    forward_primitive(&op, &[&h, w, b])?
                }
                LayerSpec::MaxPool2 => forward_primitive(&Primitive::MaxPool2, &[&h])?,
                LayerSpec::Relu => forward_primitive(&Primitive::Relu, &[&h])?,
                LayerSpec::Flatten => forward_primitive(&Primitive::Flatten, &[&h])?,
            };
        }
        Ok(h)
    }

    /// Logits for `n` inputs stored contiguously.
    pub fn logits_of(&self, inputs: &[f64], n: usize) -> Result<Tensor> {
        self.logits(&Tensor::new(self.batch_shape(n), inputs.to_vec())?)
    }

    pub fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(
                "model input",
                format!("expected [N, {:?}], got {:?}", self.input_shape, x.shape()),
            ));
        }
        Ok(())
    }

    /// Prediction for a single input (any shape with the model's element count).
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.input_len() {
            return Err(Error::shape(
                "predict",
                format!("input has {} values, model expects {:?}", x.len(), self.input_shape),
            ));
        }
        let z = self.logits_of(x, 1)?;
        let probabilities = softmax(z.data());
        Ok(Prediction {
            label: argmax(z.data()),
            probabilities,
        })
    }

    /// Predicted labels for `n` contiguous inputs.
    pub fn predict_labels(&self, inputs: &[f64], n: usize) -> Result<Vec<usize>> {
        let z = self.logits_of(inputs, n)?;
        let c = self.num_classes();
        Ok(z.data().chunks(c).map(argmax).collect())
    }
}

fn infer_output_shape(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<usize>> {
    if input.is_empty() || input.iter().any(|&d| d == 0) {
        return Err(Error::shape("model", format!("invalid input shape {input:?}")));
    }
    layers.iter().try_fold(input.to_vec(), |s, l| l.output_shape(&s))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Four-layer MNIST network: two 5x5 conv+ReLU+pool stages (10 and 20
/// filters), then 320 → 50 → 10 fully connected.
pub fn build_mnist_cnn(seed: u64) -> Model {
    Model::new(
        vec![1, 28, 28],
        vec![
            LayerSpec::Conv5x5 {
                in_channels: 1,
                filters: 10,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Conv5x5 {
                in_channels: 10,
                filters: 20,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense {
                inputs: 320,
                outputs: 50,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                inputs: 50,
                outputs: 10,
            },
        ],
        seed,
    )
    .expect("fixed architecture composes")
}

/// Dense ReLU stack; the last layer is linear.
pub fn build_mlp(layer_sizes: &[usize], seed: u64) -> Result<Model> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid("an MLP needs at least input and output sizes"));
    }
    let mut layers = Vec::new();
    for (i, pair) in layer_sizes.windows(2).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense {
            inputs: pair[0],
            outputs: pair[1],
        });
    }
    Model::new(vec![layer_sizes[0]], layers, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mnist_cnn_shapes_and_parameter_count() {
        let m = build_mnist_cnn(0);
        assert_eq!(m.parameter_count(), 260 + 5_020 + 16_050 + 510);
        assert_eq!(m.params().len(), 8);
        assert_eq!(m.num_classes(), 10);
        let flat = infer_output_shape(&[1, 28, 28], &m.layers()[..7]).unwrap();
        assert_eq!(flat, vec![320]);
        let z = m.logits(&Tensor::zeros(&[2, 1, 28, 28])).unwrap();
        assert_eq!(z.shape(), &[2, 10]);
    }

    #[test]
    fn mlp_identity() {
        let mut m = build_mlp(&[2, 2], 1).unwrap();
        m.set_param("0.weight", Tensor::identity(2)).unwrap();
        m.set_param("0.bias", Tensor::zeros(&[2])).unwrap();
        let z = m.logits_of(&[0.3, -1.2], 1).unwrap();
        assert_eq!(z.data(), &[0.3, -1.2]);
    }

    #[test]
    fn mlp_output_dim_and_errors() {
        assert_eq!(build_mlp(&[784, 100, 10], 0).unwrap().num_classes(), 10);
        assert!(build_mlp(&[], 0).is_err());
        assert!(build_mlp(&[3], 0).is_err());
    }

    #[test]
    fn same_seed_same_model() {
        assert_eq!(build_mnist_cnn(7), build_mnist_cnn(7));
        assert_ne!(build_mnist_cnn(7), build_mnist_cnn(8));
    }

    #[test]
    fn zero_model_predicts_uniform() {
        let m = build_mlp(&[4, 3, 5], 0).unwrap().scaled(0.0);
        let p = m.predict(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        for v in p.probabilities {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert_eq!(p.label, 0);
    }

    #[test]
    fn incompatible_layers_rejected() {
        let err = Model::new(
            vec![3],
            vec![LayerSpec::Dense { inputs: 4, outputs: 2 }],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("[3]"));
    }

    #[test]
    fn tape_forward_matches_direct() {
        let m = build_mnist_cnn(3);
        let x = Tensor::new(vec![2, 1, 28, 28], (0..1568).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
        let mut tape = Tape::new();
        let params = m.bind(&mut tape, false);
        let xi = tape.constant(x.clone());
        let z = m.forward(&mut tape, xi, &params).unwrap();
        assert_eq!(tape.value(z), &m.logits(&x).unwrap());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
