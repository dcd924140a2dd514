//! Architectures, parameter storage and the flat index space keys refer to.
//!
//! Flat ordering is layer-major; within a layer all weights come first
//! (row-major, i.e. `[out][in]` for dense and `[c_out][c_in][k][k]` for conv
//! layers), followed by the biases. Key files store flat indices, so this
//! ordering is part of the file format.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::hash::Fingerprint;
use crate::tensor::{ConvGeometry, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputShape {
    Flat(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn len(&self) -> usize {
        match *self {
            InputShape::Flat(n) => n,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
}

/// `f(x; θ)`: ReLU after every layer except the last, which is linear.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv(ConvGeometry),
}

/// Where one layer's parameters live in the flat vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub kind: LayerKind,
    pub weight_offset: usize,
    /// Units (neurons or filters); rows of the weight matrix.
    pub units: usize,
    /// Weights per unit.
    pub fan_in: usize,
    pub bias_offset: usize,
    /// Flattened length of this layer's output per sample.
    pub output_len: usize,
}

impl LayerLayout {
    pub fn weight_len(&self) -> usize {
        self.units * self.fan_in
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.weight_offset..self.weight_offset + self.weight_len()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        self.bias_offset..self.bias_offset + self.units
    }

    pub fn row_range(&self, unit: usize) -> std::ops::Range<usize> {
        let start = self.weight_offset + unit * self.fan_in;
        start..start + self.fan_in
    }

    pub fn end(&self) -> usize {
        self.bias_offset + self.units
    }
}

impl NetworkSpec {
    /// Dense ReLU network with the given widths, e.g. `[32, 128, 128, 10]`.
    pub fn mlp(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Dimension(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        let spec = NetworkSpec {
            input: InputShape::Flat(widths[0]),
            layers: widths
                .windows(2)
                .map(|w| LayerSpec::Dense {
                    inputs: w[0],
                    outputs: w[1],
                })
                .collect(),
            class_count: *widths.last().unwrap(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn input_len(&self) -> usize {
        self.input.len()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.layout().map(|_| ())
    }

    /// Computes per-layer offsets, checking that consecutive layers conform.
    pub fn layout(&self) -> Result<Vec<LayerLayout>> {
        if self.layers.is_empty() {
            return Err(Error::Dimension("network needs at least one layer".into()));
        }
        if self.input.is_empty() {
            return Err(Error::Dimension("input has zero size".into()));
        }
        // Current activation: either a flat vector or a c×h×w image.
        let mut image = match self.input {
            InputShape::Flat(_) => None,
            InputShape::Image {
                channels,
                height,
                width,
            } => Some((channels, height, width)),
        };
        let mut flat = self.input.len();
        let mut offset = 0;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let lay = match *layer {
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != flat {
                        return Err(Error::Dimension(format!(
                            "layer {l} expects {inputs} inputs, previous layer yields {flat}"
                        )));
                    }
                    if outputs == 0 {
                        return Err(Error::Dimension(format!("layer {l} has no outputs")));
                    }
                    image = None;
                    flat = outputs;
                    LayerLayout {
                        kind: LayerKind::Dense,
                        weight_offset: offset,
                        units: outputs,
                        fan_in: inputs,
                        bias_offset: offset + inputs * outputs,
                        output_len: outputs,
                    }
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                } => {
                    let Some((c, h, w)) = image else {
                        return Err(Error::Dimension(format!(
                            "conv layer {l} must follow the image input or another conv layer"
                        )));
                    };
                    if c != in_channels {
                        return Err(Error::Dimension(format!(
                            "conv layer {l} expects {in_channels} channels, got {c}"
                        )));
                    }
                    if out_channels == 0 {
                        return Err(Error::Dimension(format!("conv layer {l} has no filters")));
                    }
                    let geom = ConvGeometry {
                        c_in: in_channels,
                        c_out: out_channels,
                        k: kernel,
                        h,
                        w,
                    };
                    geom.check()?;
                    image = Some((out_channels, geom.out_h(), geom.out_w()));
                    flat = geom.output_len();
                    let fan_in = in_channels * kernel * kernel;
                    LayerLayout {
                        kind: LayerKind::Conv(geom),
                        weight_offset: offset,
                        units: out_channels,
                        fan_in,
                        bias_offset: offset + fan_in * out_channels,
                        output_len: flat,
                    }
                }
            };
            offset = lay.end();
            out.push(lay);
        }
        match self.layers.last() {
            Some(LayerSpec::Dense { outputs, .. }) if *outputs == self.class_count => {}
            _ => {
                return Err(Error::Dimension(format!(
                    "final layer must be dense with {} outputs",
                    self.class_count
                )))
            }
        }
        Ok(out)
    }

    /// Total parameter count `d`.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layout()?.last().map_or(0, LayerLayout::end))
    }

    /// Canonical JSON used for hashing and file headers.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    Initialized,
    /// θ*
    Pretrained,
    /// θ̂
    FullFinetuned,
    /// θ̃
    KeyFinetuned,
    /// θ_ℓ
    Locked,
    /// f⁰
    Reference,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Weight,
    Bias,
}

/// A parameter addressed structurally. For conv layers `col` indexes the
/// flattened `c_in × k × k` kernel of filter `row`; for biases `col` is 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCoord {
    pub layer: usize,
    pub role: Role,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug)]
pub struct ParameterStore {
    spec: NetworkSpec,
    layout: Vec<LayerLayout>,
    values: Vec<f64>,
    tag: ModelTag,
}

impl PartialEq for ParameterStore {
    /// Bitwise comparison of the values; `0.0` and `-0.0` differ.
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.tag == other.tag
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ParameterStore {
    pub fn from_values(spec: NetworkSpec, values: Vec<f64>, tag: ModelTag) -> Result<Self> {
        let layout = spec.layout()?;
        let d = layout.last().map_or(0, LayerLayout::end);
        if values.len() != d {
            return Err(Error::Dimension(format!(
                "spec has {d} parameters, got {} values",
                values.len()
            )));
        }
        Ok(ParameterStore {
            spec,
            layout,
            values,
            tag,
        })
    }

    pub fn zeros(spec: NetworkSpec, tag: ModelTag) -> Result<Self> {
        let d = spec.param_count()?;
        ParameterStore::from_values(spec, vec![0.0; d], tag)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn layer(&self, l: usize) -> Result<&LayerLayout> {
        self.layout
            .get(l)
            .ok_or_else(|| Error::Index(format!("layer {l} of {}", self.layout.len())))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tag(&self) -> ModelTag {
        self.tag
    }

    pub fn with_tag(mut self, tag: ModelTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn set_tag(&mut self, tag: ModelTag) {
        self.tag = tag;
    }

    pub fn weights(&self, l: usize) -> Result<&[f64]> {
        Ok(&self.values[self.layer(l)?.weight_range()])
    }

    pub fn biases(&self, l: usize) -> Result<&[f64]> {
        Ok(&self.values[self.layer(l)?.bias_range()])
    }

    /// Layer `l` weights as a tensor: `[out, in]` or `[c_out, c_in, k, k]`.
    pub fn weight_tensor(&self, l: usize) -> Result<Tensor> {
        let lay = *self.layer(l)?;
        let shape = match lay.kind {
            LayerKind::Dense => vec![lay.units, lay.fan_in],
            LayerKind::Conv(g) => vec![g.c_out, g.c_in, g.k, g.k],
        };
        Tensor::new(shape, self.values[lay.weight_range()].to_vec())
    }

    /// Layer `l` weights as a `units × fan_in` matrix.
    pub fn weight_matrix(&self, l: usize) -> Result<Tensor> {
        let lay = *self.layer(l)?;
        Tensor::matrix(
            lay.units,
            lay.fan_in,
            self.values[lay.weight_range()].to_vec(),
        )
    }

    pub fn bias_tensor(&self, l: usize) -> Result<Tensor> {
        Ok(Tensor::vector(self.biases(l)?.to_vec()))
    }

    pub fn index_of(&self, c: ParamCoord) -> Result<usize> {
        index_of(&self.layout, c)
    }

    pub fn coord_of(&self, index: usize) -> Result<ParamCoord> {
        coord_of(&self.layout, index)
    }

    /// Content hash over the canonical spec and the raw value bits.
    pub fn fingerprint(&self) -> Fingerprint {
        fingerprint_values(&self.spec, &self.values)
    }
}

pub(crate) fn fingerprint_values(spec: &NetworkSpec, values: &[f64]) -> Fingerprint {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    Fingerprint::of_parts([spec.canonical_json().as_bytes(), &bytes[..]])
}

pub fn index_of(layout: &[LayerLayout], c: ParamCoord) -> Result<usize> {
    let lay = layout
        .get(c.layer)
        .ok_or_else(|| Error::Index(format!("layer {} of {}", c.layer, layout.len())))?;
    if c.row >= lay.units {
        return Err(Error::Index(format!(
            "row {} of {} in layer {}",
            c.row, lay.units, c.layer
        )));
    }
    match c.role {
        Role::Weight if c.col < lay.fan_in => Ok(lay.weight_offset + c.row * lay.fan_in + c.col),
        Role::Bias if c.col == 0 => Ok(lay.bias_offset + c.row),
        _ => Err(Error::Index(format!(
            "column {} out of range in layer {}",
            c.col, c.layer
        ))),
    }
}

pub fn coord_of(layout: &[LayerLayout], index: usize) -> Result<ParamCoord> {
    for (layer, lay) in layout.iter().enumerate() {
        if lay.weight_range().contains(&index) {
            let rel = index - lay.weight_offset;
            return Ok(ParamCoord {
                layer,
                role: Role::Weight,
                row: rel / lay.fan_in,
                col: rel % lay.fan_in,
            });
        }
        if lay.bias_range().contains(&index) {
            return Ok(ParamCoord {
                layer,
                role: Role::Bias,
                row: index - lay.bias_offset,
                col: 0,
            });
        }
    }
    Err(Error::Index(format!(
        "flat index {index} beyond d = {}",
        layout.last().map_or(0, LayerLayout::end)
    )))
}

/// He initialization: weights `N(0, 2 / fan_in)`, biases zero, drawn in flat
/// index order from a ChaCha8 stream seeded with `seed`.
pub fn init_network(spec: &NetworkSpec, seed: u64) -> Result<ParameterStore> {
    let mut store = ParameterStore::zeros(spec.clone(), ModelTag::Initialized)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for lay in store.layout.clone() {
        let normal = Normal::new(0.0, (2.0 / lay.fan_in as f64).sqrt())
            .map_err(|e| Error::Numeric(e.to_string()))?;
        for v in &mut store.values[lay.weight_range()] {
            *v = normal.sample(&mut rng);
        }
    }
    Ok(store)
}

/// A forward pass recorded on a tape.
#[derive(Debug)]
pub struct TapedForward {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    /// Post-activation output of every hidden layer, then the logits.
    pub outputs: Vec<Var>,
}

impl TapedForward {
    pub fn logits(&self) -> Var {
        *self.outputs.last().expect("at least one layer")
    }

    /// Collects parameter gradients into flat-index order.
    pub fn flat_gradient(&self, store: &ParameterStore, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; store.len()];
        for (l, lay) in store.layout.iter().enumerate() {
            if let Some(g) = grads.get(self.weights[l]) {
                out[lay.weight_range()].copy_from_slice(g.data());
            }
            if let Some(g) = grads.get(self.biases[l]) {
                out[lay.bias_range()].copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Records `f(x; θ)` for a batch of `n` flattened inputs (`inputs.len() == n · input_len`).
pub fn record_forward(
    tape: &mut Tape,
    store: &ParameterStore,
    inputs: &[f64],
    n: usize,
    trainable: bool,
) -> Result<TapedForward> {
    let m = store.spec.input_len();
    if inputs.len() != n * m || n == 0 {
        return Err(Error::Dimension(format!(
            "expected {n} inputs of length {m}, got {} values",
            inputs.len()
        )));
    }
    let mut shape = vec![n];
    match store.spec.input {
        InputShape::Flat(k) => shape.push(k),
        InputShape::Image {
            channels,
            height,
            width,
        } => shape.extend([channels, height, width]),
    }
    let mut h = tape.constant(Tensor::new(shape, inputs.to_vec())?);
    let last = store.layout.len() - 1;
    let mut fwd = TapedForward {
        weights: Vec::new(),
        biases: Vec::new(),
        outputs: Vec::new(),
    };
    for (l, lay) in store.layout.iter().enumerate() {
        let wt = store.weight_tensor(l)?;
        let bt = store.bias_tensor(l)?;
        let (w, b) = if trainable {
            (tape.param(wt), tape.param(bt))
        } else {
            (tape.constant(wt), tape.constant(bt))
        };
        let z = match lay.kind {
            LayerKind::Dense => {
                if tape.value(h).rank() != 2 {
                    h = tape.reshape(h, vec![n, tape.value(h).len() / n])?;
                }
                tape.linear(h, w, Some(b))?
            }
            LayerKind::Conv(_) => tape.conv2d(h, w, Some(b))?,
        };
        h = if l == last { z } else { tape.relu(z) };
        fwd.weights.push(w);
        fwd.biases.push(b);
        fwd.outputs.push(h);
    }
    Ok(fwd)
}

/// Logits for a batch: `n × class_count`, row-major.
pub fn forward_batch(store: &ParameterStore, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let fwd = record_forward(&mut tape, store, inputs, n, false)?;
    Ok(tape.value(fwd.logits()).data().to_vec())
}

/// Logits for one input (flat or `c×H×W`).
pub fn forward(store: &ParameterStore, x: &Tensor) -> Result<Tensor> {
    if x.len() != store.spec.input_len() {
        return Err(Error::Dimension(format!(
            "input has {} values, network expects {}",
            x.len(),
            store.spec.input_len()
        )));
    }
    Ok(Tensor::vector(forward_batch(store, x.data(), 1)?))
}

/// Which hidden units are active (`> 0`) for each input of a batch, in layer
/// then batch-major order.
pub fn activation_pattern(store: &ParameterStore, inputs: &[f64], n: usize) -> Result<Vec<bool>> {
    let mut tape = Tape::new();
    let fwd = record_forward(&mut tape, store, inputs, n, false)?;
    let hidden = &fwd.outputs[..fwd.outputs.len() - 1];
    Ok(hidden
        .iter()
        .flat_map(|&h| {
            tape.value(h)
                .data()
                .iter()
                .map(|&v| v > 0.0)
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Mean cross-entropy and its flat gradient over a batch.
pub fn loss_and_gradient(
    store: &ParameterStore,
    inputs: &[f64],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let fwd = record_forward(&mut tape, store, inputs, labels.len(), true)?;
    let loss = tape.softmax_cross_entropy(fwd.logits(), labels)?;
    let grads = tape.backward(loss)?;
    let value = tape.value(loss).item().expect("scalar");
    Ok((value, fwd.flat_gradient(store, &grads)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer() -> NetworkSpec {
        NetworkSpec::mlp(&[4, 3, 2]).unwrap()
    }

    #[test]
    fn dense_counting() {
        let spec = two_layer();
        let lay = spec.layout().unwrap();
        assert_eq!(lay[0].weight_len() + lay[0].units, 15);
        assert_eq!(spec.param_count().unwrap(), 15 + 8);
    }

    #[test]
    fn index_map_conventions() {
        let store = ParameterStore::zeros(two_layer(), ModelTag::Initialized).unwrap();
        let first = ParamCoord {
            layer: 0,
            role: Role::Weight,
            row: 0,
            col: 0,
        };
        assert_eq!(store.index_of(first).unwrap(), 0);
        let last = ParamCoord {
            layer: 1,
            role: Role::Bias,
            row: 1,
            col: 0,
        };
        assert_eq!(store.index_of(last).unwrap(), store.len() - 1);
        // weights precede biases within a layer
        let b0 = ParamCoord {
            layer: 0,
            role: Role::Bias,
            row: 0,
            col: 0,
        };
        assert_eq!(store.index_of(b0).unwrap(), 12);
        for i in 0..store.len() {
            assert_eq!(store.index_of(store.coord_of(i).unwrap()).unwrap(), i);
        }
    }

    #[test]
    fn index_map_rejects_out_of_range() {
        let store = ParameterStore::zeros(two_layer(), ModelTag::Initialized).unwrap();
        assert!(store.coord_of(store.len()).is_err());
        let bad = ParamCoord {
            layer: 0,
            role: Role::Weight,
            row: 3,
            col: 0,
        };
        assert!(matches!(store.index_of(bad), Err(Error::Index(_))));
        let bad = ParamCoord {
            layer: 2,
            role: Role::Weight,
            row: 0,
            col: 0,
        };
        assert!(store.index_of(bad).is_err());
    }

    #[test]
    fn spec_validation() {
        let bad = NetworkSpec {
            input: InputShape::Flat(4),
            layers: vec![
                LayerSpec::Dense {
                    inputs: 4,
                    outputs: 3,
                },
                LayerSpec::Dense {
                    inputs: 2,
                    outputs: 2,
                },
            ],
            class_count: 2,
        };
        assert!(bad.validate().is_err());
        let empty = NetworkSpec {
            input: InputShape::Flat(4),
            layers: vec![],
            class_count: 2,
        };
        assert!(empty.validate().is_err());
        let cnn = NetworkSpec {
            input: InputShape::Image {
                channels: 1,
                height: 5,
                width: 5,
            },
            layers: vec![
                LayerSpec::Conv {
                    in_channels: 1,
                    out_channels: 2,
                    kernel: 3,
                },
                LayerSpec::Dense {
                    inputs: 18,
                    outputs: 3,
                },
            ],
            class_count: 3,
        };
        let lay = cnn.layout().unwrap();
        assert_eq!(lay[0].fan_in, 9);
        assert_eq!(lay[1].weight_offset, 20);
        assert_eq!(cnn.param_count().unwrap(), 20 + 54 + 3);
    }

    #[test]
    fn init_is_deterministic() {
        let spec = two_layer();
        assert_eq!(
            init_network(&spec, 3).unwrap(),
            init_network(&spec, 3).unwrap()
        );
        assert_ne!(
            init_network(&spec, 3).unwrap(),
            init_network(&spec, 4).unwrap()
        );
        let s = init_network(&spec, 3).unwrap();
        assert!(s.biases(0).unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_weights_emit_final_bias() {
        let spec = two_layer();
        let mut store = ParameterStore::zeros(spec, ModelTag::Reference).unwrap();
        let lay = store.layout()[1];
        store.values_mut()[lay.bias_range()].copy_from_slice(&[0.25, -1.5]);
        let y = forward(&store, &Tensor::vector(vec![3.0, -2.0, 0.5, 9.0])).unwrap();
        assert_eq!(y.data(), &[0.25, -1.5]);
    }

    #[test]
    fn identity_single_layer() {
        let spec = NetworkSpec::mlp(&[3, 3]).unwrap();
        let mut v = vec![0.0; 12];
        for i in 0..3 {
            v[i * 3 + i] = 1.0;
        }
        let store = ParameterStore::from_values(spec, v, ModelTag::Initialized).unwrap();
        let x = Tensor::vector(vec![0.5, -2.0, 7.0]);
        assert_eq!(forward(&store, &x).unwrap().data(), x.data());
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let store = init_network(&two_layer(), 0).unwrap();
        assert!(forward(&store, &Tensor::vector(vec![1.0; 5])).is_err());
    }
}
