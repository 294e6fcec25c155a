//! Test-side helpers: a naive decoded-integer forward pass and small random
//! networks.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use bnnfi::model_io::{load_mnist_idx, Dataset};
use bnnfi::network::{LayerKind, NetworkBuilder, NetworkTopology, Precision, Thresholds};
use bnnfi::tensor::Shape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weight_value(words: &[u64], i: usize, wbits: usize) -> i32 {
    if wbits == 1 {
        if (words[i / 64] >> (i % 64)) & 1 == 1 {
            1
        } else {
            -1
        }
    } else {
        let code = (words[(2 * i) / 64] >> ((2 * i) % 64)) & 3;
        [-3, -1, 1, 3][code as usize]
    }
}

fn code_value(code: u8, abits: usize) -> i32 {
    if abits == 1 {
        if code == 1 {
            1
        } else {
            -1
        }
    } else {
        [-3, -1, 1, 3][code as usize]
    }
}

/// Element-by-element forward pass. `flips[k]` lists bit offsets inverted
/// in activation buffer `k` every time it is read.
pub fn reference_forward(net: &NetworkTopology, image: &[u8], flips: &BTreeMap<usize, Vec<usize>>) -> (Vec<i32>, usize) {
    let wbits = net.precision.weight_bits();
    let abits = net.precision.activation_bits();
    let mut values: Vec<i32> = image.iter().map(|&p| p as i32 - 128).collect();
    let mut codes: Vec<u8> = Vec::new();
    let last = net.layers.len() - 1;
    for (k, l) in net.layers.iter().enumerate() {
        let acc: Vec<i32> = match l.kind {
            LayerKind::MaxPool2x2 => {
                let d = l.in_shape.dims();
                let (h, w, c) = (d[0], d[1], d[2]);
                let mut out = Vec::new();
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        for ch in 0..c {
                            let at = |yy: usize, xx: usize| codes[(yy * w + xx) * c + ch];
                            out.push(
                                at(2 * y, 2 * x)
                                    .max(at(2 * y, 2 * x + 1))
                                    .max(at(2 * y + 1, 2 * x))
                                    .max(at(2 * y + 1, 2 * x + 1)),
                            );
                        }
                    }
                }
                codes = out;
                apply_flips(&mut codes, flips.get(&k), abits);
                values = codes.iter().map(|&c| code_value(c, abits)).collect();
                continue;
            }
            _ if l.kind.is_conv() => {
                let words = l.weights.as_ref().unwrap().words();
                let d = l.in_shape.dims();
                let (h, w, ci) = (d[0], d[1], d[2]);
                let co = l.fan_out();
                let mut out = vec![0; (h - 2) * (w - 2) * co];
                for y in 0..h - 2 {
                    for x in 0..w - 2 {
                        for o in 0..co {
                            let mut s = 0;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    for c in 0..ci {
                                        let wi = ((o * 3 + ky) * 3 + kx) * ci + c;
                                        s += weight_value(words, wi, wbits) * values[((y + ky) * w + x + kx) * ci + c];
                                    }
                                }
                            }
                            out[(y * (w - 2) + x) * co + o] = s;
                        }
                    }
                }
                out
            }
            _ => {
                let words = l.weights.as_ref().unwrap().words();
                let fan_in = l.fan_in();
                (0..l.fan_out())
                    .map(|o| (0..fan_in).map(|i| weight_value(words, o * fan_in + i, wbits) * values[i]).sum())
                    .collect()
            }
        };
        if k == last {
            let mut best = 0;
            for (i, &s) in acc.iter().enumerate() {
                if s > acc[best] {
                    best = i;
                }
            }
            return (acc, best);
        }
        let t = l.thresholds.as_ref().unwrap();
        let channels = t.channels();
        let levels = t.levels();
        codes = acc
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let ch = i % channels;
                let s = t.signs()[ch] as i64;
                t.taus()[ch * levels..(ch + 1) * levels]
                    .iter()
                    .filter(|&&tau| s * a as i64 >= s * tau as i64)
                    .count() as u8
            })
            .collect();
        apply_flips(&mut codes, flips.get(&k), abits);
        values = codes.iter().map(|&c| code_value(c, abits)).collect();
    }
    unreachable!()
}

fn apply_flips(codes: &mut [u8], flips: Option<&Vec<usize>>, abits: usize) {
    for &b in flips.into_iter().flatten() {
        if abits == 1 {
            codes[b] ^= 1;
        } else {
            codes[b / 2] ^= 1 << (b % 2);
        }
    }
}

/// Small networks covering every layer kind and precision.
pub fn small_networks(seed: u64) -> Vec<NetworkTopology> {
    let mut nets = vec![
        NetworkBuilder::new("dense11", Precision::W1A1, Shape::vector(20).unwrap())
            .dense(37)
            .unwrap()
            .dense(70)
            .unwrap()
            .output(10)
            .unwrap(),
        NetworkBuilder::new("dense12", Precision::W1A2, Shape::vector(20).unwrap())
            .dense(33)
            .unwrap()
            .dense(65)
            .unwrap()
            .output(7)
            .unwrap(),
        NetworkBuilder::new("conv11", Precision::W1A1, Shape::new(vec![9, 9, 2]).unwrap())
            .conv3x3(5)
            .unwrap()
            .conv3x3(7)
            .unwrap()
            .maxpool2x2()
            .unwrap()
            .dense(30)
            .unwrap()
            .output(4)
            .unwrap(),
        NetworkBuilder::new("conv22", Precision::W2A2, Shape::new(vec![10, 8, 3]).unwrap())
            .conv3x3(6)
            .unwrap()
            .maxpool2x2()
            .unwrap()
            .conv3x3(9)
            .unwrap()
            .dense(12)
            .unwrap()
            .output(5)
            .unwrap(),
    ];
    for (i, n) in nets.iter_mut().enumerate() {
        n.init_random(seed + i as u64);
        flip_some_signs(n, seed ^ 0x51);
    }
    nets
}

/// Negates the threshold direction of roughly half the channels.
pub fn flip_some_signs(net: &mut NetworkTopology, seed: u64) {
    let mut r = rng(seed);
    for l in &mut net.layers {
        if let Some(t) = &l.thresholds {
            let signs: Vec<i8> = t.signs().iter().map(|_| if r.gen() { 1 } else { -1 }).collect();
            l.thresholds = Some(Thresholds::new(t.levels(), t.taus().to_vec(), signs).unwrap());
        }
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, net: &NetworkTopology) -> Vec<u8> {
    (0..net.input_shape().len()).map(|_| rng.gen()).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mnist_dir() -> PathBuf {
    match std::env::var_os("BNNFI_MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// `(train, test)` if the IDX files are present.
pub fn mnist() -> Option<(Dataset, Dataset)> {
    let d = mnist_dir();
    let train = load_mnist_idx(d.join("train-images-idx3-ubyte"), d.join("train-labels-idx1-ubyte")).ok()?;
    let test = load_mnist_idx(d.join("t10k-images-idx3-ubyte"), d.join("t10k-labels-idx1-ubyte")).ok()?;
    Some((train, test))
}
