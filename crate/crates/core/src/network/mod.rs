//! Layer specifications, the lfc/cnv topology builders, and susceptible-bit
//! accounting.
//!
//! Convolutional activations are stored height-major with the channel
//! innermost (`[h, w, c]`), and 3×3 kernels as `[c_out, ky, kx, c_in]`, so a
//! receptive field is three contiguous runs of `3·c_in` elements. Dense
//! weights are `[fan_out, fan_in]`. Convolutions are unpadded with stride 1;
//! pooling is 2×2 with stride 2 and drops an odd trailing row/column.

mod forward;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::{StorageKey, StorageKind};
use crate::tensor::{BitTensor, IntTensor, Q2Tensor, Shape};

pub use forward::{forward, layer_accumulators, ActivationBuffers, Engine, Inference, StageInput};

/// Pixel value subtracted before the first layer's integer dot product.
pub const PIXEL_OFFSET: i32 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Precision {
    W1A1,
    W2A2,
    W1A2,
}

impl Precision {
    pub fn weight_bits(self) -> usize {
        match self {
            Precision::W1A1 | Precision::W1A2 => 1,
            Precision::W2A2 => 2,
        }
    }

    pub fn activation_bits(self) -> usize {
        match self {
            Precision::W1A1 => 1,
            Precision::W2A2 | Precision::W1A2 => 2,
        }
    }

    /// Thresholds per output channel: one for sign, three for 2-bit levels.
    pub fn threshold_levels(self) -> usize {
        match self.activation_bits() {
            1 => 1,
            _ => 3,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::W1A1 => "W1A1",
            Precision::W2A2 => "W2A2",
            Precision::W1A2 => "W1A2",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "W1A1" => Ok(Precision::W1A1),
            "W2A2" => Ok(Precision::W2A2),
            "W1A2" => Ok(Precision::W1A2),
            _ => Err(Error::Config(format!("unknown precision `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    InputDense,
    InputConv3x3,
    BinDense,
    BinConv3x3,
    MaxPool2x2,
    OutputDense,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::InputConv3x3 | LayerKind::BinConv3x3)
    }

    pub fn is_input(self) -> bool {
        matches!(self, LayerKind::InputDense | LayerKind::InputConv3x3)
    }

    pub fn has_thresholds(self) -> bool {
        !matches!(self, LayerKind::MaxPool2x2 | LayerKind::OutputDense)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::InputDense => "InputDense",
            LayerKind::InputConv3x3 => "InputConv3x3",
            LayerKind::BinDense => "BinDense",
            LayerKind::BinConv3x3 => "BinConv3x3",
            LayerKind::MaxPool2x2 => "MaxPool2x2",
            LayerKind::OutputDense => "OutputDense",
        }
    }
}

/// Layer weights at the network's weight precision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WeightTensor {
    Binary(BitTensor),
    Quad(Q2Tensor),
}

impl WeightTensor {
    pub fn words(&self) -> &[u64] {
        match self {
            WeightTensor::Binary(t) => t.words(),
            WeightTensor::Quad(t) => t.words(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            WeightTensor::Binary(t) => t.len(),
            WeightTensor::Quad(t) => t.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bits_per_element(&self) -> usize {
        match self {
            WeightTensor::Binary(_) => 1,
            WeightTensor::Quad(_) => 2,
        }
    }

    pub fn get(&self, i: usize) -> i32 {
        match self {
            WeightTensor::Binary(t) => t.get(i),
            WeightTensor::Quad(t) => t.get(i),
        }
    }

    pub fn decode(&self) -> Vec<i32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Folded batch-norm + activation: channel `c` emits the number of levels
/// `j` for which `sign_c · acc ≥ sign_c · tau[c][j]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Thresholds {
    levels: usize,
    taus: Vec<i32>,
    signs: Vec<i8>,
}

impl Thresholds {
    /// `taus` is channel-major with `levels` entries per channel.
    pub fn new(levels: usize, taus: Vec<i32>, signs: Vec<i8>) -> Result<Self> {
        if levels == 0 || taus.len() != levels * signs.len() {
            return Err(Error::LengthMismatch {
                left: taus.len(),
                right: levels * signs.len(),
            });
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::Topology("threshold signs must be +1 or -1".into()));
        }
        Ok(Thresholds { levels, taus, signs })
    }

    pub fn uniform(channels: usize, levels: usize, taus: &[i32]) -> Self {
        assert_eq!(taus.len(), levels);
        Thresholds {
            levels,
            taus: taus.iter().copied().cycle().take(channels * levels).collect(),
            signs: vec![1; channels],
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn channels(&self) -> usize {
        self.signs.len()
    }

    pub fn taus(&self) -> &[i32] {
        &self.taus
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    #[inline]
    pub fn activate(&self, channel: usize, acc: i32) -> u8 {
        let s = self.signs[channel] as i64;
        let acc = acc as i64;
        self.taus[channel * self.levels..(channel + 1) * self.levels]
            .iter()
            .filter(|&&t| s * acc >= s * t as i64)
            .count() as u8
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub weights: Option<WeightTensor>,
    pub thresholds: Option<Thresholds>,
}

impl LayerSpec {
    pub fn fan_in(&self) -> usize {
        if self.kind.is_conv() {
            9 * self.in_shape.dims()[2]
        } else {
            self.in_shape.len()
        }
    }

    pub fn fan_out(&self) -> usize {
        if self.kind.is_conv() {
            self.out_shape.dims()[2]
        } else {
            self.out_shape.len()
        }
    }

    pub fn weight_elements(&self) -> usize {
        match self.kind {
            LayerKind::MaxPool2x2 => 0,
            _ => self.fan_in() * self.fan_out(),
        }
    }

    /// Channels sharing a threshold: output channels for conv/pool, neurons for dense.
    pub fn out_channels(&self) -> usize {
        match self.kind {
            LayerKind::InputConv3x3 | LayerKind::BinConv3x3 | LayerKind::MaxPool2x2 => self.out_shape.dims()[2],
            _ => self.out_shape.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkTopology {
    pub name: String,
    pub precision: Precision,
    pub layers: Vec<LayerSpec>,
    pub num_classes: usize,
}

/// Which storage [`NetworkTopology::count_susceptible_bits`] totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitTarget {
    Weights,
    Activations,
    Both,
}

impl NetworkTopology {
    /// Checks shape chaining, layer ordering, and payload sizes.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Topology(m));
        let (first, last) = match (self.layers.first(), self.layers.last()) {
            (Some(f), Some(l)) if self.layers.len() >= 2 => (f, l),
            _ => return err("a network needs at least an input and an output layer".into()),
        };
        if !first.kind.is_input() {
            return err(format!("first layer is {}", first.kind.as_str()));
        }
        if last.kind != LayerKind::OutputDense {
            return err(format!("last layer is {}", last.kind.as_str()));
        }
        if last.out_shape.len() != self.num_classes {
            return err(format!(
                "output layer has {} outputs for {} classes",
                last.out_shape.len(),
                self.num_classes
            ));
        }
        for (k, pair) in self.layers.windows(2).enumerate() {
            if pair[0].out_shape != pair[1].in_shape {
                return err(format!(
                    "layer {k} output {:?} does not feed layer {} input {:?}",
                    pair[0].out_shape.dims(),
                    k + 1,
                    pair[1].in_shape.dims()
                ));
            }
        }
        for (k, l) in self.layers.iter().enumerate() {
            if k > 0 && l.kind.is_input() {
                return err(format!("layer {k} is an input layer"));
            }
            if l.kind.is_conv() || l.kind == LayerKind::MaxPool2x2 {
                let (i, o) = (l.in_shape.dims(), l.out_shape.dims());
                if i.len() != 3 || o.len() != 3 {
                    return err(format!("layer {k}: spatial layers need [h, w, c] shapes"));
                }
                let expect = if l.kind.is_conv() {
                    i[0] >= 3 && i[1] >= 3 && o[0] == i[0] - 2 && o[1] == i[1] - 2
                } else {
                    o[0] == i[0] / 2 && o[1] == i[1] / 2 && o[2] == i[2]
                };
                if !expect {
                    return err(format!("layer {k}: inconsistent {:?} -> {:?}", i, o));
                }
            }
            if let Some(w) = &l.weights {
                if l.kind == LayerKind::MaxPool2x2 {
                    return err(format!("layer {k}: pooling layer carries weights"));
                }
                if w.len() != l.weight_elements() || w.bits_per_element() != self.precision.weight_bits() {
                    return err(format!(
                        "layer {k}: weight payload has {} {}-bit elements, expected {} {}-bit",
                        w.len(),
                        w.bits_per_element(),
                        l.weight_elements(),
                        self.precision.weight_bits()
                    ));
                }
            }
            match (&l.thresholds, l.kind.has_thresholds()) {
                (Some(t), true) => {
                    if t.channels() != l.out_channels() || t.levels() != self.precision.threshold_levels() {
                        return err(format!(
                            "layer {k}: {} channels x {} thresholds, expected {} x {}",
                            t.channels(),
                            t.levels(),
                            l.out_channels(),
                            self.precision.threshold_levels()
                        ));
                    }
                }
                (Some(_), false) => return err(format!("layer {k}: unexpected thresholds")),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn weight_bits(&self, layer: usize) -> usize {
        self.layers[layer].weight_elements() * self.precision.weight_bits()
    }

    /// Bits in the activation buffer written by `layer` (zero for the output layer).
    pub fn activation_bits(&self, layer: usize) -> usize {
        if layer + 1 >= self.layers.len() {
            0
        } else {
            self.layers[layer].out_shape.len() * self.precision.activation_bits()
        }
    }

    pub fn storage_bits(&self, key: StorageKey) -> usize {
        match key.kind {
            StorageKind::Weights => self.weight_bits(key.layer),
            StorageKind::Activations => self.activation_bits(key.layer),
        }
    }

    pub fn count_susceptible_bits(&self, target: BitTarget) -> u64 {
        let w: usize = (0..self.layers.len()).map(|k| self.weight_bits(k)).sum();
        let a: usize = (0..self.layers.len()).map(|k| self.activation_bits(k)).sum();
        (match target {
            BitTarget::Weights => w,
            BitTarget::Activations => a,
            BitTarget::Both => w + a,
        }) as u64
    }

    pub fn weight_bit_count(&self) -> u64 {
        self.count_susceptible_bits(BitTarget::Weights)
    }

    pub fn input_shape(&self) -> &Shape {
        &self.layers[0].in_shape
    }

    pub fn is_initialized(&self) -> bool {
        self.layers.iter().all(|l| {
            (l.kind == LayerKind::MaxPool2x2 || l.weights.is_some()) && (!l.kind.has_thresholds() || l.thresholds.is_some())
        })
    }

    /// Fills every layer with uniformly random weights and symmetric
    /// thresholds sized to the layer's typical accumulator spread.
    pub fn init_random(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let precision = self.precision;
        for l in &mut self.layers {
            if l.kind == LayerKind::MaxPool2x2 {
                continue;
            }
            let n = l.weight_elements();
            let shape = Shape::vector(n).expect("non-empty layer");
            l.weights = Some(match precision.weight_bits() {
                1 => {
                    let b: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
                    WeightTensor::Binary(BitTensor::from_bits(shape, &b).expect("sized"))
                }
                _ => {
                    let c: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
                    WeightTensor::Quad(Q2Tensor::from_codes(shape, &c).expect("sized"))
                }
            });
            if l.kind.has_thresholds() {
                let spread = ((l.fan_in() as f64).sqrt() * if l.kind.is_input() { 64.0 } else { 1.0 }) as i32;
                let channels = l.out_channels();
                let levels = precision.threshold_levels();
                let mut taus = Vec::with_capacity(channels * levels);
                let mut signs = Vec::with_capacity(channels);
                for _ in 0..channels {
                    let jitter = rng.gen_range(-spread / 2..=spread / 2);
                    if levels == 1 {
                        taus.push(jitter);
                    } else {
                        taus.extend([jitter - spread, jitter, jitter + spread]);
                    }
                    signs.push(1);
                }
                l.thresholds = Some(Thresholds::new(levels, taus, signs).expect("sized"));
            }
        }
    }

    /// Sets every weight to the same code and every threshold to `tau`.
    pub fn init_constant(&mut self, weight_code: u8, tau: i32) {
        let precision = self.precision;
        for l in &mut self.layers {
            if l.kind == LayerKind::MaxPool2x2 {
                continue;
            }
            let n = l.weight_elements();
            let shape = Shape::vector(n).expect("non-empty layer");
            l.weights = Some(match precision.weight_bits() {
                1 => WeightTensor::Binary(BitTensor::from_bits(shape, &vec![weight_code & 1 == 1; n]).expect("sized")),
                _ => WeightTensor::Quad(Q2Tensor::from_codes(shape, &vec![weight_code & 3; n]).expect("sized")),
            });
            if l.kind.has_thresholds() {
                let levels = precision.threshold_levels();
                l.thresholds = Some(Thresholds::uniform(l.out_channels(), levels, &vec![tau; levels]));
            }
        }
    }
}

/// Incremental topology builder. The first weighted layer becomes the input
/// layer; `output` appends the final dense layer.
#[derive(Debug, Clone)]
pub struct NetworkBuilder {
    name: String,
    precision: Precision,
    layers: Vec<LayerSpec>,
    current: Shape,
}

impl NetworkBuilder {
    pub fn new(name: impl Into<String>, precision: Precision, input: Shape) -> Self {
        NetworkBuilder {
            name: name.into(),
            precision,
            layers: Vec::new(),
            current: input,
        }
    }

    fn push(&mut self, kind: LayerKind, out: Shape) {
        self.layers.push(LayerSpec {
            kind,
            in_shape: self.current.clone(),
            out_shape: out.clone(),
            weights: None,
            thresholds: None,
        });
        self.current = out;
    }

    pub fn conv3x3(mut self, out_channels: usize) -> Result<Self> {
        let d = self.current.dims().to_vec();
        if d.len() != 3 || d[0] < 3 || d[1] < 3 {
            return Err(Error::Topology(format!("cannot apply a 3x3 convolution to {d:?}")));
        }
        let kind = if self.layers.is_empty() {
            LayerKind::InputConv3x3
        } else {
            LayerKind::BinConv3x3
        };
        let out = Shape::new(vec![d[0] - 2, d[1] - 2, out_channels])?;
        self.push(kind, out);
        Ok(self)
    }

    pub fn maxpool2x2(mut self) -> Result<Self> {
        let d = self.current.dims().to_vec();
        if self.layers.is_empty() || d.len() != 3 || d[0] < 2 || d[1] < 2 {
            return Err(Error::Topology(format!("cannot pool {d:?}")));
        }
        let out = Shape::new(vec![d[0] / 2, d[1] / 2, d[2]])?;
        self.push(LayerKind::MaxPool2x2, out);
        Ok(self)
    }

    pub fn dense(mut self, width: usize) -> Result<Self> {
        let kind = if self.layers.is_empty() {
            LayerKind::InputDense
        } else {
            LayerKind::BinDense
        };
        self.push(kind, Shape::vector(width)?);
        Ok(self)
    }

    pub fn output(mut self, classes: usize) -> Result<NetworkTopology> {
        if self.layers.is_empty() {
            return Err(Error::Topology("output layer cannot be the first layer".into()));
        }
        self.push(LayerKind::OutputDense, Shape::vector(classes)?);
        let net = NetworkTopology {
            name: self.name,
            precision: self.precision,
            layers: self.layers,
            num_classes: classes,
        };
        net.validate()?;
        Ok(net)
    }
}

/// Four-layer fully connected MNIST network with `hidden_width` neurons per
/// hidden layer.
pub fn build_lfc(hidden_width: usize, precision: Precision) -> Result<NetworkTopology> {
    if !matches!(precision, Precision::W1A1 | Precision::W1A2) {
        return Err(Error::UnsupportedPrecision {
            network: "lfc",
            precision: precision.to_string(),
        });
    }
    if hidden_width == 0 {
        return Err(Error::Topology("hidden width must be at least 1".into()));
    }
    NetworkBuilder::new(format!("lfc{precision}"), precision, Shape::vector(784)?)
        .dense(hidden_width)?
        .dense(hidden_width)?
        .dense(hidden_width)?
        .output(10)
}

/// VGG-style CIFAR-10 network: six unpadded 3×3 convolutions (64-64-128-128-
/// 256-256), 2×2 max pools after the first two convolution pairs, and dense
/// layers 256-512-512-10. The last convolution pair already reduces the map
/// to 1×1, so there is nothing left for a third pool to act on.
pub fn build_cnv(precision: Precision) -> Result<NetworkTopology> {
    if !matches!(precision, Precision::W1A1 | Precision::W2A2) {
        return Err(Error::UnsupportedPrecision {
            network: "cnv",
            precision: precision.to_string(),
        });
    }
    NetworkBuilder::new(format!("cnv{precision}"), precision, Shape::new(vec![32, 32, 3])?)
        .conv3x3(64)?
        .conv3x3(64)?
        .maxpool2x2()?
        .conv3x3(128)?
        .conv3x3(128)?
        .maxpool2x2()?
        .conv3x3(256)?
        .conv3x3(256)?
        .dense(512)?
        .dense(512)?
        .output(10)
}

/// Reduced cnv-style network on 28×28 grayscale input, for desk-scale
/// training: conv 16-16, pool, conv 32-32, pool, conv 64, dense 128-10.
pub fn build_cnv_small(precision: Precision) -> Result<NetworkTopology> {
    NetworkBuilder::new(format!("cnvsmall{precision}"), precision, Shape::new(vec![28, 28, 1])?)
        .conv3x3(16)?
        .conv3x3(16)?
        .maxpool2x2()?
        .conv3x3(32)?
        .conv3x3(32)?
        .maxpool2x2()?
        .conv3x3(64)?
        .dense(128)?
        .output(10)
}

/// Layer census of a topology: `(total, conv, pool, dense)`.
pub fn layer_census(net: &NetworkTopology) -> (usize, usize, usize, usize) {
    let count = |f: fn(LayerKind) -> bool| net.layers.iter().filter(|l| f(l.kind)).count();
    (
        net.layers.len(),
        count(LayerKind::is_conv),
        count(|k| k == LayerKind::MaxPool2x2),
        count(|k| matches!(k, LayerKind::InputDense | LayerKind::BinDense | LayerKind::OutputDense)),
    )
}

/// Per-channel threshold activation for 1-bit outputs:
/// `out_i = +1` iff `s_c · acc_i ≥ s_c · tau_c`, with `c = i mod channels`.
pub fn threshold_activate(acc: &IntTensor, thresholds: &IntTensor, signs: &[i8]) -> Result<BitTensor> {
    let channels = thresholds.values().len();
    if signs.len() != channels {
        return Err(Error::LengthMismatch {
            left: channels,
            right: signs.len(),
        });
    }
    if channels == 0 || !acc.values().len().is_multiple_of(channels) {
        return Err(Error::ShapeMismatch {
            expected: thresholds.shape().dims().to_vec(),
            actual: acc.shape().dims().to_vec(),
        });
    }
    let t = Thresholds::new(1, thresholds.values().to_vec(), signs.to_vec())?;
    let bits: Vec<bool> = acc
        .values()
        .iter()
        .enumerate()
        .map(|(i, &a)| t.activate(i % channels, a) == 1)
        .collect();
    BitTensor::from_bits(acc.shape().clone(), &bits)
}
