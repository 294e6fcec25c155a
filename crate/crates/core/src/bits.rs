//! Word-level helpers over little-endian bit strings (bit `i` lives in word
//! `i / 64` at position `i % 64`).

pub const WORD_BITS: usize = 64;

pub const EVEN_BITS: u64 = 0x5555_5555_5555_5555;

#[inline]
pub fn words_for_bits(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

/// Mask selecting the valid bits of the last word of an `n`-bit string.
#[inline]
pub fn tail_mask(n: usize) -> u64 {
    match n % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

#[inline]
pub fn get_bit(words: &[u64], i: usize) -> bool {
    (words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
}

#[inline]
pub fn set_bit(words: &mut [u64], i: usize, value: bool) {
    let w = &mut words[i / WORD_BITS];
    let m = 1u64 << (i % WORD_BITS);
    if value {
        *w |= m;
    } else {
        *w &= !m;
    }
}

/// Reads up to 64 bits starting at an arbitrary bit offset.
#[inline]
pub fn read_bits(words: &[u64], start: usize, len: usize) -> u64 {
    debug_assert!(len <= WORD_BITS);
    if len == 0 {
        return 0;
    }
    let w = start / WORD_BITS;
    let off = start % WORD_BITS;
    let mut v = words[w] >> off;
    if off != 0 && off + len > WORD_BITS {
        v |= words[w + 1] << (WORD_BITS - off);
    }
    if len == WORD_BITS {
        v
    } else {
        v & ((1u64 << len) - 1)
    }
}

/// ORs `len` bits read from `src` at `src_start` into `dst` at `dst_start`.
/// Destination bits in the range must be zero beforehand.
pub fn or_bits(src: &[u64], src_start: usize, len: usize, dst: &mut [u64], dst_start: usize) {
    let mut done = 0;
    while done < len {
        let d = dst_start + done;
        let room = WORD_BITS - d % WORD_BITS;
        let take = room.min(len - done);
        let chunk = read_bits(src, src_start + done, take);
        dst[d / WORD_BITS] |= chunk << (d % WORD_BITS);
        done += take;
    }
}

/// Returns `len` bits from `src` starting at `start`, realigned to bit 0.
#[cfg(test)]
pub fn extract(src: &[u64], start: usize, len: usize) -> Vec<u64> {
    let mut out = vec![0u64; words_for_bits(len)];
    or_bits(src, start, len, &mut out, 0);
    out
}

/// Agreement-count dot product of two aligned `n`-bit strings interpreted as
/// ±1 vectors: `2 * popcount(!(a ^ b) & valid) - n`.
#[inline]
pub fn xnor_dot(a: &[u64], b: &[u64], n: usize) -> i32 {
    if n == 0 {
        return 0;
    }
    let full = n / WORD_BITS;
    let mut agree: u32 = 0;
    for i in 0..full {
        agree += (!(a[i] ^ b[i])).count_ones();
    }
    if !n.is_multiple_of(WORD_BITS) {
        agree += (!(a[full] ^ b[full]) & tail_mask(n)).count_ones();
    }
    2 * agree as i32 - n as i32
}

/// Gathers the even bits of `x` into a 32-bit value.
#[inline]
pub fn gather_even(x: u64) -> u32 {
    let mut v = x & EVEN_BITS;
    v = (v | (v >> 1)) & 0x3333_3333_3333_3333;
    v = (v | (v >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    v = (v | (v >> 4)) & 0x00FF_00FF_00FF_00FF;
    v = (v | (v >> 8)) & 0x0000_FFFF_0000_FFFF;
    v = (v | (v >> 16)) & 0x0000_0000_FFFF_FFFF;
    v as u32
}

/// Splits an interleaved 2-bit code string of `n` codes into its high and
/// low bit planes (each an aligned `n`-bit string).
pub fn split_planes(codes: &[u64], n: usize) -> (Vec<u64>, Vec<u64>) {
    let words = words_for_bits(n);
    let mut hi = vec![0u64; words];
    let mut lo = vec![0u64; words];
    for (i, &w) in codes.iter().enumerate() {
        let l = gather_even(w) as u64;
        let h = gather_even(w >> 1) as u64;
        let shift = (i % 2) * 32;
        lo[i / 2] |= l << shift;
        hi[i / 2] |= h << shift;
    }
    (hi, lo)
}
