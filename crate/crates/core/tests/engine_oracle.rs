mod common;

use std::collections::BTreeMap;

use bnnfi::fault::{FaultOverlay, Persistence, StorageKey, StorageKind};
use bnnfi::network::{layer_accumulators, ActivationBuffers, Engine, NetworkTopology};
use bnnfi::network::{LayerKind, NetworkBuilder, Precision};
use bnnfi::tensor::Shape;
use common::{random_image, reference_forward, rng, small_networks};
use proptest::prelude::*;
use rand::Rng;

fn engine_scores(net: &NetworkTopology, image: &[u8], overlay: &mut FaultOverlay) -> (Vec<i32>, usize) {
    let mut engine = Engine::new(net).unwrap();
    let mut buffers = ActivationBuffers::new(net);
    let r = engine.run(image, overlay, &mut buffers).unwrap();
    (r.scores, r.predicted)
}

#[test]
fn clean_engine_matches_reference() {
    let mut r = rng(1);
    for net in small_networks(10) {
        for _ in 0..20 {
            let img = random_image(&mut r, &net);
            let mut overlay = FaultOverlay::new(Persistence::PersistentRead);
            assert_eq!(engine_scores(&net, &img, &mut overlay), reference_forward(&net, &img, &BTreeMap::new()), "{}", net.name);
        }
    }
}

#[test]
fn weight_faults_match_reference_on_flipped_copy() {
    let mut r = rng(2);
    for net in small_networks(20) {
        for _ in 0..20 {
            let img = random_image(&mut r, &net);
            let mut overlay = FaultOverlay::new(Persistence::PersistentRead);
            let mut flipped = net.clone();
            for _ in 0..r.gen_range(1..6) {
                let k = loop {
                    let k = r.gen_range(0..net.layers.len());
                    if net.layers[k].weights.is_some() {
                        break k;
                    }
                };
                let bits = net.weight_bits(k);
                let b = r.gen_range(0..bits);
                overlay.flip(StorageKey::weights(k), b);
                flip_weight(&mut flipped, k, b);
            }
            assert_eq!(
                engine_scores(&net, &img, &mut overlay),
                reference_forward(&flipped, &img, &BTreeMap::new()),
                "{}",
                net.name
            );
        }
    }
}

fn flip_weight(net: &mut NetworkTopology, k: usize, bit: usize) {
    use bnnfi::network::WeightTensor;
    use bnnfi::tensor::{BitTensor, Q2Tensor};
    let w = net.layers[k].weights.take().unwrap();
    let mut words = w.words().to_vec();
    words[bit / 64] ^= 1 << (bit % 64);
    net.layers[k].weights = Some(match w {
        WeightTensor::Binary(t) => WeightTensor::Binary(BitTensor::from_words(t.shape().clone(), words).unwrap()),
        WeightTensor::Quad(t) => WeightTensor::Quad(Q2Tensor::from_words(t.shape().clone(), words).unwrap()),
    });
}

#[test]
fn persistent_activation_faults_match_reference() {
    let mut r = rng(3);
    for net in small_networks(30) {
        let last = net.layers.len() - 1;
        for _ in 0..20 {
            let img = random_image(&mut r, &net);
            let mut overlay = FaultOverlay::new(Persistence::PersistentRead);
            let mut flips: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for _ in 0..r.gen_range(1..6) {
                let k = r.gen_range(0..last);
                let b = r.gen_range(0..net.activation_bits(k));
                overlay.flip(StorageKey::activations(k), b);
                let v = flips.entry(k).or_default();
                // repeated flips cancel
                if let Some(p) = v.iter().position(|&x| x == b) {
                    v.remove(p);
                } else {
                    v.push(b);
                }
            }
            assert_eq!(engine_scores(&net, &img, &mut overlay), reference_forward(&net, &img, &flips), "{}", net.name);
        }
    }
}

#[test]
fn transient_activation_faults_are_overwritten() {
    let mut r = rng(4);
    for net in small_networks(40) {
        let img = random_image(&mut r, &net);
        let mut overlay = FaultOverlay::new(Persistence::TransientWrite);
        overlay.flip(StorageKey::activations(0), 0);
        assert_eq!(engine_scores(&net, &img, &mut overlay), reference_forward(&net, &img, &BTreeMap::new()));
        assert!(overlay.mask(StorageKey { layer: 0, kind: StorageKind::Activations }).is_none());
    }
}

fn brute_conv(net: &NetworkTopology, k: usize, codes: &[u8]) -> Vec<i32> {
    let l = &net.layers[k];
    let abits = net.precision.activation_bits();
    let wbits = net.precision.weight_bits();
    let x: Vec<i32> = codes
        .iter()
        .map(|&c| if abits == 1 { 2 * c as i32 - 1 } else { [-3, -1, 1, 3][c as usize] })
        .collect();
    let w = l.weights.as_ref().unwrap();
    let d = l.in_shape.dims();
    let (h, wd, ci) = (d[0], d[1], d[2]);
    let co = l.fan_out();
    let mut out = Vec::new();
    for y in 0..h - 2 {
        for xx in 0..wd - 2 {
            for o in 0..co {
                let mut s = 0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        for c in 0..ci {
                            let wi = ((o * 3 + ky) * 3 + kx) * ci + c;
                            let wv = if wbits == 1 {
                                if (w.words()[wi / 64] >> (wi % 64)) & 1 == 1 { 1 } else { -1 }
                            } else {
                                [-3, -1, 1, 3][((w.words()[2 * wi / 64] >> (2 * wi % 64)) & 3) as usize]
                            };
                            s += wv * x[((y + ky) * wd + xx + kx) * ci + c];
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

fn pack(codes: &[u8], abits: usize) -> Vec<u64> {
    let mut words = vec![0u64; (codes.len() * abits).div_ceil(64)];
    for (i, &c) in codes.iter().enumerate() {
        let b = i * abits;
        words[b / 64] |= (c as u64) << (b % 64);
    }
    words
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_accumulators_match_sliding_window(
        h in 3usize..8, w in 3usize..8, ci in 1usize..4, co in 1usize..5,
        two_bit in any::<bool>(), seed in any::<u64>(),
    ) {
        let precision = if two_bit { Precision::W2A2 } else { Precision::W1A1 };
        let mut net = NetworkBuilder::new("c", precision, Shape::new(vec![h + 2, w + 2, 1]).unwrap())
            .conv3x3(ci).unwrap()
            .conv3x3(co).unwrap()
            .output(2).unwrap();
        net.init_random(seed);
        prop_assert_eq!(net.layers[1].kind, LayerKind::BinConv3x3);
        let abits = precision.activation_bits();
        let mut r = rng(seed);
        let codes: Vec<u8> = (0..h * w * ci).map(|_| r.gen_range(0..(1u8 << abits))).collect();
        let acc = layer_accumulators(&net.layers[1], abits, &pack(&codes, abits)).unwrap();
        prop_assert_eq!(acc, brute_conv(&net, 1, &codes));
    }

    #[test]
    fn engine_matches_reference_on_any_image(seed in any::<u64>(), which in 0usize..4) {
        let net = &small_networks(seed)[which];
        let img = random_image(&mut rng(seed), net);
        let mut overlay = FaultOverlay::new(Persistence::PersistentRead);
        prop_assert_eq!(engine_scores(net, &img, &mut overlay), reference_forward(net, &img, &BTreeMap::new()));
    }
}
