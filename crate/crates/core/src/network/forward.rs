//! Bit-exact forward pass.
//!
//! Weights are decoded into compute-ready rows once per distinct fault mask
//! (each row realigned to bit 0, 2-bit codes split into high/low ±1 planes
//! so every product reduces to XNOR-popcount). Activation buffers are read
//! through the overlay on every consumption.

use std::collections::BTreeMap;

use crate::bits::{self, WORD_BITS};
use crate::error::{Error, Result};
use crate::fault::{FaultOverlay, StorageKey};
use crate::tensor::{IntTensor, Shape};

use super::{LayerKind, LayerSpec, NetworkTopology, WeightTensor, PIXEL_OFFSET};

/// The most recent activation written by every non-final layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationBuffers {
    words: Vec<Vec<u64>>,
}

impl ActivationBuffers {
    pub fn new(net: &NetworkTopology) -> Self {
        let words = (0..net.layers.len())
            .map(|k| vec![0u64; bits::words_for_bits(net.activation_bits(k))])
            .collect();
        ActivationBuffers { words }
    }

    pub fn words(&self, layer: usize) -> &[u64] {
        &self.words[layer]
    }

    pub fn reset(&mut self) {
        for w in &mut self.words {
            w.fill(0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    pub scores: Vec<i32>,
    pub predicted: usize,
}

/// Where a (possibly partial) forward pass starts.
#[derive(Debug, Clone, Copy)]
pub enum StageInput<'a> {
    /// Raw 8-bit pixels for layer 0.
    Image(&'a [u8]),
    /// Content to be written into the activation buffer of layer `start - 1`.
    Buffer(&'a [u64]),
}

/// ±1 bit planes with their integer weights: a value is `Σ coeff · plane_bit`.
type Planes = Vec<(i32, Vec<u64>)>;

#[derive(Debug, Clone)]
enum Prepared {
    Pool,
    /// Decoded integer weights, `[fan_out][fan_in]`.
    Int(Vec<i32>),
    /// Row-aligned planes: row `o` of a plane occupies `row_words` words.
    Planes { planes: Planes, row_words: usize },
}

/// Reusable inference state for one network. Holds decoded weights and
/// refreshes them only when the overlay's weight masks change.
#[derive(Debug, Clone)]
pub struct Engine<'n> {
    net: &'n NetworkTopology,
    prepared: Vec<Prepared>,
    built_with: Vec<Option<BTreeMap<usize, u64>>>,
}

impl<'n> Engine<'n> {
    pub fn new(net: &'n NetworkTopology) -> Result<Self> {
        net.validate()?;
        for (k, l) in net.layers.iter().enumerate() {
            if (l.kind != LayerKind::MaxPool2x2 && l.weights.is_none())
                || (l.kind.has_thresholds() && l.thresholds.is_none())
            {
                return Err(Error::UninitializedWeights(k));
            }
        }
        let prepared = net
            .layers
            .iter()
            .map(|l| prepare(l, l.weights.as_ref().map(|w| w.words())))
            .collect();
        Ok(Engine {
            net,
            prepared,
            built_with: vec![None; net.layers.len()],
        })
    }

    pub fn network(&self) -> &'n NetworkTopology {
        self.net
    }

    fn sync(&mut self, overlay: &FaultOverlay) {
        for (k, l) in self.net.layers.iter().enumerate() {
            let Some(w) = &l.weights else { continue };
            let key = StorageKey::weights(k);
            let mask = overlay.mask(key);
            if mask == self.built_with[k].as_ref() {
                continue;
            }
            let mut words = w.words().to_vec();
            overlay.apply_to(key, &mut words);
            self.prepared[k] = prepare(l, Some(&words));
            self.built_with[k] = mask.cloned();
        }
    }

    /// Classifies one image.
    pub fn run(&mut self, image: &[u8], overlay: &mut FaultOverlay, buffers: &mut ActivationBuffers) -> Result<Inference> {
        self.run_from(0, StageInput::Image(image), overlay, buffers)
    }

    /// Runs layers `start..`, taking either the image (`start == 0`) or the
    /// content of buffer `start - 1`, which is written through the overlay
    /// exactly as if layer `start - 1` had produced it.
    pub fn run_from(
        &mut self,
        start: usize,
        input: StageInput<'_>,
        overlay: &mut FaultOverlay,
        buffers: &mut ActivationBuffers,
    ) -> Result<Inference> {
        self.sync(overlay);
        let net = self.net;
        let last = net.layers.len() - 1;
        let mut pixels: Option<Vec<i32>> = None;
        match (start, input) {
            (0, StageInput::Image(img)) => {
                let shape = net.input_shape();
                if img.len() != shape.len() {
                    return Err(Error::ShapeMismatch {
                        expected: shape.dims().to_vec(),
                        actual: vec![img.len()],
                    });
                }
                pixels = Some(img.iter().map(|&p| p as i32 - PIXEL_OFFSET).collect());
            }
            (s, StageInput::Buffer(words)) if s >= 1 && s <= last => {
                if words.len() != buffers.words[s - 1].len() {
                    return Err(Error::WordCount {
                        expected: buffers.words[s - 1].len(),
                        actual: words.len(),
                    });
                }
                write_buffer(buffers, overlay, s - 1, words.to_vec());
            }
            _ => return Err(Error::Topology(format!("cannot start a forward pass at layer {start} with this input"))),
        }

        let abits = net.precision.activation_bits();
        for k in start..=last {
            let layer = &net.layers[k];
            let acc = match (&self.prepared[k], layer.kind) {
                (Prepared::Int(rows), LayerKind::InputDense) => {
                    let x = pixels.as_deref().expect("input layer reads pixels");
                    dense_int(rows, x, layer.fan_out())
                }
                (Prepared::Int(rows), LayerKind::InputConv3x3) => {
                    let x = pixels.as_deref().expect("input layer reads pixels");
                    conv_int(rows, x, &layer.in_shape, layer.fan_out())
                }
                (Prepared::Pool, LayerKind::MaxPool2x2) => {
                    let view = read_view(buffers, overlay, k - 1);
                    let codes = maxpool(&view, &layer.in_shape, abits);
                    write_buffer(buffers, overlay, k, pack_codes(&codes, abits));
                    continue;
                }
                (Prepared::Planes { planes, row_words }, kind) => {
                    let view = read_view(buffers, overlay, k - 1);
                    let act = to_planes(view, layer.in_shape.len(), abits);
                    if kind.is_conv() {
                        conv_planes(planes, *row_words, &act, &layer.in_shape, layer.fan_out())
                    } else {
                        dense_planes(planes, *row_words, &act, layer.fan_in(), layer.fan_out())
                    }
                }
                _ => unreachable!("prepared representation matches layer kind"),
            };
            if k == last {
                let predicted = argmax(&acc);
                return Ok(Inference { scores: acc, predicted });
            }
            let t = layer.thresholds.as_ref().expect("checked at construction");
            let channels = t.channels();
            let codes: Vec<u8> = acc.iter().enumerate().map(|(i, &a)| t.activate(i % channels, a)).collect();
            write_buffer(buffers, overlay, k, pack_codes(&codes, abits));
        }
        unreachable!("the output layer returns")
    }
}

/// One-shot inference on an 8-bit image held in an `IntTensor`.
pub fn forward(
    net: &NetworkTopology,
    image: &IntTensor,
    overlay: &mut FaultOverlay,
    buffers: &mut ActivationBuffers,
) -> Result<(IntTensor, usize)> {
    if image.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: net.input_shape().dims().to_vec(),
            actual: image.shape().dims().to_vec(),
        });
    }
    let pixels = image
        .values()
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| Error::PixelRange(v)))
        .collect::<Result<Vec<u8>>>()?;
    let mut engine = Engine::new(net)?;
    let out = engine.run(&pixels, overlay, buffers)?;
    let scores = IntTensor::new(Shape::vector(out.scores.len())?, out.scores)?;
    Ok((scores, out.predicted))
}

/// Accumulators of a binary-input layer (`BinConv3x3`, `BinDense` or
/// `OutputDense`) on packed activation codes of width `abits`.
pub fn layer_accumulators(layer: &LayerSpec, abits: usize, input: &[u64]) -> Result<Vec<i32>> {
    let Some(w) = &layer.weights else {
        return Err(Error::Topology(format!("{} layer has no weights", layer.kind.as_str())));
    };
    if layer.kind.is_input() || !matches!(abits, 1 | 2) {
        return Err(Error::Topology("accumulators need a binary-input layer".into()));
    }
    let n = layer.in_shape.len();
    let expected = bits::words_for_bits(n * abits);
    if input.len() != expected {
        return Err(Error::WordCount {
            expected,
            actual: input.len(),
        });
    }
    let Prepared::Planes { planes, row_words } = prepare(layer, Some(w.words())) else {
        unreachable!("weighted non-input layer")
    };
    let act = to_planes(input.to_vec(), n, abits);
    Ok(if layer.kind.is_conv() {
        conv_planes(&planes, row_words, &act, &layer.in_shape, layer.fan_out())
    } else {
        dense_planes(&planes, row_words, &act, layer.fan_in(), layer.fan_out())
    })
}

/// Lowest index among the maximal scores.
pub(crate) fn argmax(scores: &[i32]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn write_buffer(buffers: &mut ActivationBuffers, overlay: &mut FaultOverlay, layer: usize, words: Vec<u64>) {
    buffers.words[layer] = words;
    overlay.on_write(StorageKey::activations(layer));
}

fn read_view(buffers: &ActivationBuffers, overlay: &FaultOverlay, layer: usize) -> Vec<u64> {
    let mut v = buffers.words[layer].clone();
    overlay.apply_to(StorageKey::activations(layer), &mut v);
    v
}

fn prepare(layer: &LayerSpec, words: Option<&[u64]>) -> Prepared {
    let (Some(w), Some(words)) = (&layer.weights, words) else {
        return Prepared::Pool;
    };
    let fan_in = layer.fan_in();
    let fan_out = layer.fan_out();
    let n = fan_in * fan_out;
    let quad = matches!(w, WeightTensor::Quad(_));
    if layer.kind.is_input() {
        let rows = (0..n)
            .map(|i| {
                if quad {
                    crate::tensor::decode_q2(bits::read_bits(words, 2 * i, 2) as u8)
                } else {
                    crate::tensor::decode_bit(bits::get_bit(words, i))
                }
            })
            .collect();
        return Prepared::Int(rows);
    }
    let row_words = bits::words_for_bits(fan_in);
    let flat: Planes = if quad {
        let (hi, lo) = bits::split_planes(words, n);
        vec![(2, hi), (1, lo)]
    } else {
        vec![(1, words.to_vec())]
    };
    let planes = flat
        .into_iter()
        .map(|(c, plane)| {
            let mut rows = vec![0u64; fan_out * row_words];
            for o in 0..fan_out {
                bits::or_bits(&plane, o * fan_in, fan_in, &mut rows[o * row_words..], 0);
            }
            (c, rows)
        })
        .collect();
    Prepared::Planes { planes, row_words }
}

fn to_planes(words: Vec<u64>, n: usize, abits: usize) -> Planes {
    if abits == 1 {
        vec![(1, words)]
    } else {
        let (hi, lo) = bits::split_planes(&words, n);
        vec![(2, hi), (1, lo)]
    }
}

fn pack_codes(codes: &[u8], abits: usize) -> Vec<u64> {
    let mut words = vec![0u64; bits::words_for_bits(codes.len() * abits)];
    if abits == 1 {
        for (i, &c) in codes.iter().enumerate() {
            words[i / WORD_BITS] |= ((c & 1) as u64) << (i % WORD_BITS);
        }
    } else {
        for (i, &c) in codes.iter().enumerate() {
            words[i / 32] |= ((c & 3) as u64) << (2 * (i % 32));
        }
    }
    words
}

#[inline]
fn code_at(words: &[u64], i: usize, abits: usize) -> u8 {
    bits::read_bits(words, i * abits, abits) as u8
}

fn dense_int(rows: &[i32], x: &[i32], fan_out: usize) -> Vec<i32> {
    let fan_in = x.len();
    (0..fan_out)
        .map(|o| {
            rows[o * fan_in..(o + 1) * fan_in]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum()
        })
        .collect()
}

fn conv_int(rows: &[i32], x: &[i32], in_shape: &Shape, fan_out: usize) -> Vec<i32> {
    let (h, w, c) = (in_shape.dims()[0], in_shape.dims()[1], in_shape.dims()[2]);
    let (oh, ow) = (h - 2, w - 2);
    let fan_in = 9 * c;
    let run = 3 * c;
    let mut patch = vec![0i32; fan_in];
    let mut out = vec![0i32; oh * ow * fan_out];
    for y in 0..oh {
        for xx in 0..ow {
            for ky in 0..3 {
                let src = ((y + ky) * w + xx) * c;
                patch[ky * run..(ky + 1) * run].copy_from_slice(&x[src..src + run]);
            }
            let base = (y * ow + xx) * fan_out;
            for o in 0..fan_out {
                out[base + o] = rows[o * fan_in..(o + 1) * fan_in]
                    .iter()
                    .zip(&patch)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
    }
    out
}

#[inline]
fn plane_dot(weights: &Planes, row: usize, row_words: usize, act: &Planes, n: usize) -> i32 {
    let mut acc = 0;
    for (cw, wp) in weights {
        let wrow = &wp[row * row_words..(row + 1) * row_words];
        for (ca, ap) in act {
            acc += cw * ca * bits::xnor_dot(wrow, ap, n);
        }
    }
    acc
}

fn dense_planes(weights: &Planes, row_words: usize, act: &Planes, fan_in: usize, fan_out: usize) -> Vec<i32> {
    (0..fan_out).map(|o| plane_dot(weights, o, row_words, act, fan_in)).collect()
}

fn conv_planes(weights: &Planes, row_words: usize, act: &Planes, in_shape: &Shape, fan_out: usize) -> Vec<i32> {
    let (h, w, c) = (in_shape.dims()[0], in_shape.dims()[1], in_shape.dims()[2]);
    let (oh, ow) = (h - 2, w - 2);
    let fan_in = 9 * c;
    let run = 3 * c;
    let mut patches: Planes = act.iter().map(|(ca, _)| (*ca, vec![0u64; row_words])).collect();
    let mut out = vec![0i32; oh * ow * fan_out];
    for y in 0..oh {
        for x in 0..ow {
            for ((_, patch), (_, plane)) in patches.iter_mut().zip(act) {
                patch.fill(0);
                for ky in 0..3 {
                    bits::or_bits(plane, ((y + ky) * w + x) * c, run, patch, ky * run);
                }
            }
            let base = (y * ow + x) * fan_out;
            for o in 0..fan_out {
                out[base + o] = plane_dot(weights, o, row_words, &patches, fan_in);
            }
        }
    }
    out
}

/// 2×2 stride-2 max over codes; code order matches decoded-value order.
fn maxpool(words: &[u64], in_shape: &Shape, abits: usize) -> Vec<u8> {
    let (h, w, c) = (in_shape.dims()[0], in_shape.dims()[1], in_shape.dims()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0u8; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let at = |yy: usize, xx: usize| code_at(words, (yy * w + xx) * c + ch, abits);
                let m = at(2 * y, 2 * x)
                    .max(at(2 * y, 2 * x + 1))
                    .max(at(2 * y + 1, 2 * x))
                    .max(at(2 * y + 1, 2 * x + 1));
                out[(y * ow + x) * c + ch] = m;
            }
        }
    }
    out
}
