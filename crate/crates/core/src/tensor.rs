//! Quantized tensor storage and the integer dot-product kernels.
//!
//! Every packed tensor is a little-endian bit string over `u64` words:
//! logical element `i` of a [`BitTensor`] is bit `i`, and element `i` of a
//! [`Q2Tensor`] occupies bits `2i` (low) and `2i + 1` (high). Fault bit
//! addresses are defined over exactly this layout, so it is fixed.

use serde::{Deserialize, Serialize};

use crate::bits::{self, EVEN_BITS, WORD_BITS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn vector(len: usize) -> Result<Self> {
        Shape::new(vec![len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Decoded value of a 1-bit element: bit 1 is +1, bit 0 is -1.
#[inline]
pub fn decode_bit(bit: bool) -> i32 {
    if bit {
        1
    } else {
        -1
    }
}

/// Level table for 2-bit codes.
pub const Q2_LEVELS: [i32; 4] = [-3, -1, 1, 3];

#[inline]
pub fn decode_q2(code: u8) -> i32 {
    Q2_LEVELS[(code & 3) as usize]
}

/// Packed ±1 tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Shape,
    words: Vec<u64>,
}

impl BitTensor {
    pub fn zeros(shape: Shape) -> Self {
        let words = vec![0; bits::words_for_bits(shape.len())];
        BitTensor { shape, words }
    }

    /// Builds a tensor from raw words, rejecting wrong word counts and
    /// non-zero padding.
    pub fn from_words(shape: Shape, words: Vec<u64>) -> Result<Self> {
        let n = shape.len();
        check_words(n, &words)?;
        Ok(BitTensor { shape, words })
    }

    pub fn from_bits(shape: Shape, bits: &[bool]) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(Error::LengthMismatch {
                left: shape.len(),
                right: bits.len(),
            });
        }
        let mut t = BitTensor::zeros(shape);
        for (i, &b) in bits.iter().enumerate() {
            bits::set_bit(&mut t.words, i, b);
        }
        Ok(t)
    }

    /// Packs a vector of ±1 values; any non-negative value counts as +1.
    pub fn from_signs(shape: Shape, signs: &[i32]) -> Result<Self> {
        let b: Vec<bool> = signs.iter().map(|&s| s >= 0).collect();
        BitTensor::from_bits(shape, &b)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        bits::get_bit(&self.words, i)
    }

    pub fn get(&self, i: usize) -> i32 {
        decode_bit(self.bit(i))
    }

    pub fn decode(&self) -> Vec<i32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Packed tensor of 2-bit codes over the levels in [`Q2_LEVELS`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Q2Tensor {
    shape: Shape,
    words: Vec<u64>,
}

impl Q2Tensor {
    pub fn zeros(shape: Shape) -> Self {
        let words = vec![0; bits::words_for_bits(2 * shape.len())];
        Q2Tensor { shape, words }
    }

    pub fn from_words(shape: Shape, words: Vec<u64>) -> Result<Self> {
        check_words(2 * shape.len(), &words)?;
        Ok(Q2Tensor { shape, words })
    }

    pub fn from_codes(shape: Shape, codes: &[u8]) -> Result<Self> {
        if codes.len() != shape.len() {
            return Err(Error::LengthMismatch {
                left: shape.len(),
                right: codes.len(),
            });
        }
        let mut t = Q2Tensor::zeros(shape);
        for (i, &c) in codes.iter().enumerate() {
            t.words[i / 32] |= ((c & 3) as u64) << (2 * (i % 32));
        }
        Ok(t)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }

    pub fn code(&self, i: usize) -> u8 {
        ((self.words[i / 32] >> (2 * (i % 32))) & 3) as u8
    }

    pub fn get(&self, i: usize) -> i32 {
        decode_q2(self.code(i))
    }

    pub fn decode(&self) -> Vec<i32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

/// Signed integer tensor: input pixels, accumulators, class scores.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Shape,
    values: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: Shape, values: Vec<i32>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::LengthMismatch {
                left: shape.len(),
                right: values.len(),
            });
        }
        Ok(IntTensor { shape, values })
    }

    pub fn from_pixels(shape: Shape, pixels: &[u8]) -> Result<Self> {
        IntTensor::new(shape, pixels.iter().map(|&p| p as i32).collect())
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }
}

fn check_words(bit_len: usize, words: &[u64]) -> Result<()> {
    let expected = bits::words_for_bits(bit_len);
    if words.len() != expected {
        return Err(Error::WordCount {
            expected,
            actual: words.len(),
        });
    }
    if !bit_len.is_multiple_of(WORD_BITS) {
        let last = words[expected - 1];
        if last & !bits::tail_mask(bit_len) != 0 {
            return Err(Error::DirtyPadding(bit_len));
        }
    }
    Ok(())
}

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: x[index],
        }),
        None => Ok(()),
    }
}

/// Sign binarization with `sign(0) = +1`.
pub fn binarize(x: &[f32]) -> Result<BitTensor> {
    binarize_shaped(Shape::vector(x.len().max(1))?, x)
}

pub fn binarize_shaped(shape: Shape, x: &[f32]) -> Result<BitTensor> {
    check_finite(x)?;
    let b: Vec<bool> = x.iter().map(|&v| v >= 0.0).collect();
    BitTensor::from_bits(shape, &b)
}

/// Nearest code for `x / delta` over {-3, -1, +1, +3}, midpoints rounding up.
#[inline]
pub fn quantize2_code(x: f32, delta: f32) -> u8 {
    let v = x / delta;
    if v >= 2.0 {
        3
    } else if v >= 0.0 {
        2
    } else if v >= -2.0 {
        1
    } else {
        0
    }
}

pub fn quantize2(x: &[f32], delta: f32) -> Result<Q2Tensor> {
    quantize2_shaped(Shape::vector(x.len().max(1))?, x, delta)
}

pub fn quantize2_shaped(shape: Shape, x: &[f32], delta: f32) -> Result<Q2Tensor> {
    if !delta.is_finite() || delta <= 0.0 {
        return Err(Error::InvalidScale(delta));
    }
    check_finite(x)?;
    let codes: Vec<u8> = x.iter().map(|&v| quantize2_code(v, delta)).collect();
    Q2Tensor::from_codes(shape, &codes)
}

/// `Σ a_i·b_i` over two ±1 rows via XNOR and popcount.
pub fn xnor_popcount_dot(a: &BitTensor, b: &BitTensor) -> Result<i32> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(bits::xnor_dot(&a.words, &b.words, a.len()))
}

/// `Σ a_i·b_i` over two 2-bit rows.
///
/// A code `2h + l` decodes to `2H + L` with `H = 2h - 1`, `L = 2l - 1`, so
/// the product expands into four ±1 agreement counts taken directly on the
/// interleaved words.
pub fn q2_dot(a: &Q2Tensor, b: &Q2Tensor) -> Result<i32> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    let mut hh = 0u32;
    let mut ll = 0u32;
    let mut hl = 0u32;
    let mut lh = 0u32;
    for (i, (&x, &y)) in a.words.iter().zip(&b.words).enumerate() {
        let codes_here = (n - i * 32).min(32);
        let valid = if codes_here == 32 {
            EVEN_BITS
        } else {
            EVEN_BITS & ((1u64 << (2 * codes_here)) - 1)
        };
        let eq = !(x ^ y);
        ll += (eq & valid).count_ones();
        hh += ((eq >> 1) & valid).count_ones();
        hl += (!((x >> 1) ^ y) & valid).count_ones();
        lh += (!(x ^ (y >> 1)) & valid).count_ones();
    }
    let dot = |agree: u32| 2 * agree as i32 - n as i32;
    Ok(4 * dot(hh) + 2 * dot(hl) + 2 * dot(lh) + dot(ll))
}
