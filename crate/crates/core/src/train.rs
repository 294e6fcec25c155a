//! Straight-through-estimator training, batch-norm folding and export.
//!
//! The training graph mirrors the integer network: a layer's pre-activation
//! is `z = acc · scale`, where `acc` is the integer accumulator the
//! bit-packed engine computes and `scale` accounts for the input pixel
//! normalization (1/128) and the 2-bit level spacing. Batch norm maps `z` to
//! `y`, and the activation is `sign(y)` (1-bit) or the count of cut points
//! `{-2/3, 0, 2/3}` that `y` reaches (2-bit). Folding searches the integer
//! boundary of the exact `f64` response the evaluation path uses, so the
//! exported thresholds agree with it on every accumulator value.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_io::Dataset;
use crate::network::{LayerKind, LayerSpec, NetworkTopology, Precision, Thresholds, WeightTensor, PIXEL_OFFSET};
use crate::tensor::{decode_q2, quantize2_code, BitTensor, Q2Tensor, Shape};

/// Level spacing of 2-bit weights and activations in the training graph.
pub const Q2_DELTA: f64 = 1.0 / 3.0;
pub const INPUT_SCALE: f64 = 1.0 / PIXEL_OFFSET as f64;
pub const BN_EPS: f64 = 1e-4;

const CUTS_1: [f64; 1] = [0.0];
const CUTS_2: [f64; 3] = [-2.0 * Q2_DELTA, 0.0, 2.0 * Q2_DELTA];
const FOLD_LIMIT: i64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f32,
    pub momentum: f32,
    pub weight_clip: f32,
    pub seed: u64,
    /// Train on the first `n` records only.
    pub train_limit: Option<usize>,
    /// Evaluate the per-epoch test accuracy on the first `n` test records.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 100,
            learning_rate: 2.0,
            lr_decay: 0.7,
            momentum: 0.9,
            weight_clip: 1.0,
            seed: 0x05ee_db22,
            train_limit: None,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate >= 0.0
            && self.lr_decay > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_clip > 0.0
            && self.train_limit != Some(0)
            && self.eval_limit != Some(0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

pub fn write_log_csv<W: Write>(mut out: W, log: &[EpochLog]) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,test_accuracy")?;
    for row in log {
        match row.test_accuracy {
            Some(a) => writeln!(out, "{},{:.6},{:.6}", row.epoch, row.train_loss, a)?,
            None => writeln!(out, "{},{:.6},", row.epoch, row.train_loss)?,
        }
    }
    Ok(())
}

/// One batch-norm channel: `y = gamma · (z - mean) / sigma + beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnParams {
    pub gamma: f64,
    pub beta: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl BnParams {
    #[inline]
    pub fn response(&self, z: f64) -> f64 {
        self.gamma * ((z - self.mean) / self.sigma) + self.beta
    }

    #[inline]
    fn fires(&self, acc: i64, scale: f64, cut: f64) -> bool {
        self.response(acc as f64 * scale) >= cut
    }
}

/// Integer threshold equivalent to `response(acc · scale) >= cut`:
/// `s · acc >= s · tau` with `s = sign(gamma)`. `None` when `gamma == 0`.
pub fn fold_threshold(p: &BnParams, scale: f64, cut: f64) -> Option<(i32, i8)> {
    if p.gamma == 0.0 || p.sigma.is_nan() || p.sigma <= 0.0 || scale.is_nan() || scale <= 0.0 {
        return None;
    }
    let x = (p.mean - (p.beta - cut) * p.sigma / p.gamma) / scale;
    let clamp = |v: f64| {
        if v.is_nan() {
            0
        } else {
            v.clamp(-(FOLD_LIMIT as f64), FOLD_LIMIT as f64) as i64
        }
    };
    if p.gamma > 0.0 {
        // smallest firing accumulator
        let mut t = clamp(x.ceil());
        while t > -FOLD_LIMIT && p.fires(t - 1, scale, cut) {
            t -= 1;
        }
        while t < FOLD_LIMIT && !p.fires(t, scale, cut) {
            t += 1;
        }
        Some((t as i32, 1))
    } else {
        // largest firing accumulator
        let mut t = clamp(x.floor());
        while t < FOLD_LIMIT && p.fires(t + 1, scale, cut) {
            t += 1;
        }
        while t > -FOLD_LIMIT && !p.fires(t, scale, cut) {
            t -= 1;
        }
        Some((t as i32, -1))
    }
}

/// Folds every channel of a layer's batch norm at the given cut points.
pub fn fold_batchnorm(params: &[BnParams], scale: f64, cuts: &[f64]) -> Result<Thresholds> {
    let mut taus = Vec::with_capacity(params.len() * cuts.len());
    let mut signs = Vec::with_capacity(params.len());
    for (channel, p) in params.iter().enumerate() {
        let mut sign = 1;
        for &cut in cuts {
            let (t, s) = fold_threshold(p, scale, cut).ok_or(Error::DegenerateChannel { channel })?;
            taus.push(t);
            sign = s;
        }
        signs.push(sign);
    }
    Thresholds::new(cuts.len(), taus, signs)
}

fn cuts(precision: Precision) -> &'static [f64] {
    match precision.activation_bits() {
        1 => &CUTS_1,
        _ => &CUTS_2,
    }
}

/// Integer activation level for a batch-norm output.
#[inline]
fn level(precision: Precision, y: f64) -> i32 {
    let code = cuts(precision).iter().filter(|&&c| y >= c).count();
    match precision.activation_bits() {
        1 => 2 * code as i32 - 1,
        _ => decode_q2(code as u8),
    }
}

fn activation_scale(precision: Precision) -> f64 {
    match precision.activation_bits() {
        1 => 1.0,
        _ => Q2_DELTA,
    }
}

fn weight_scale(precision: Precision) -> f64 {
    match precision.weight_bits() {
        1 => 1.0,
        _ => Q2_DELTA,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    v_gamma: Vec<f32>,
    v_beta: Vec<f32>,
}

impl BatchNorm {
    fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            v_gamma: vec![0.0; channels],
            v_beta: vec![0.0; channels],
        }
    }

    pub fn params(&self, c: usize) -> BnParams {
        BnParams {
            gamma: self.gamma[c] as f64,
            beta: self.beta[c] as f64,
            mean: self.mean[c],
            sigma: (self.var[c] + BN_EPS).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowLayer {
    pub kind: LayerKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
    /// Real-valued weights `[fan_out, fan_in]`; empty for pooling.
    pub weights: Array2<f32>,
    pub bn: Option<BatchNorm>,
    velocity: Array2<f32>,
}

impl ShadowLayer {
    fn spatial(&self) -> (usize, usize, usize) {
        let d = self.in_shape.dims();
        (d[0], d[1], d[2])
    }
}

/// Training-time network: real weights, batch-norm state and optimizer
/// velocities, one entry per topology layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowModel {
    pub name: String,
    pub precision: Precision,
    pub num_classes: usize,
    pub layers: Vec<ShadowLayer>,
}

struct Cache {
    input: Array2<f32>,
    wq: Array2<f32>,
    xhat: Array2<f32>,
    y: Array2<f32>,
    inv_sd: Vec<f32>,
    pool_arg: Vec<u32>,
    in_cols: usize,
}

impl ShadowModel {
    /// Fresh model mirroring `net`'s layer plan, weights ~ U(-b, b) with the
    /// Glorot bound.
    pub fn from_topology(net: &NetworkTopology, seed: u64) -> Result<Self> {
        net.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = net
            .layers
            .iter()
            .map(|l| {
                let (fan_in, fan_out) = match l.kind {
                    LayerKind::MaxPool2x2 => (0, 0),
                    _ => (l.fan_in(), l.fan_out()),
                };
                let b = if fan_in > 0 { (6.0 / (fan_in + fan_out) as f32).sqrt() } else { 0.0 };
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-b..b));
                ShadowLayer {
                    kind: l.kind,
                    in_shape: l.in_shape.clone(),
                    out_shape: l.out_shape.clone(),
                    velocity: Array2::zeros((fan_out, fan_in)),
                    weights,
                    bn: l.kind.has_thresholds().then(|| BatchNorm::new(l.out_channels())),
                }
            })
            .collect();
        Ok(ShadowModel {
            name: net.name.clone(),
            precision: net.precision,
            num_classes: net.num_classes,
            layers,
        })
    }

    fn weight_levels(&self, k: usize) -> Array2<i32> {
        let p = self.precision;
        self.layers[k].weights.mapv(|w| match p.weight_bits() {
            1 => {
                if w >= 0.0 {
                    1
                } else {
                    -1
                }
            }
            _ => decode_q2(quantize2_code(w, Q2_DELTA as f32)),
        })
    }

    /// Factor from the integer accumulator to the training-graph `z`.
    pub fn acc_scale(&self, k: usize) -> f64 {
        let input = if self.layers[k].kind.is_input() {
            INPUT_SCALE
        } else {
            activation_scale(self.precision)
        };
        input * weight_scale(self.precision)
    }

    fn output_gain(&self) -> f32 {
        let last = self.layers.last().expect("non-empty");
        1.0 / (last.weights.ncols() as f32).sqrt()
    }

    fn input_batch(&self, data: &Dataset, idx: &[usize]) -> Array2<f32> {
        let n = data.image_shape().len();
        Array2::from_shape_fn((idx.len(), n), |(b, i)| {
            (data.image(idx[b])[i] as f64 * INPUT_SCALE - 1.0) as f32
        })
    }

    fn forward_train(&mut self, x: Array2<f32>, stat_momentum: Option<f64>) -> (Array2<f32>, Vec<Cache>) {
        let batch = x.nrows();
        let precision = self.precision;
        let a_scale = activation_scale(precision) as f32;
        let w_scale = weight_scale(precision) as f32;
        let gain = self.output_gain();
        let levels: Vec<Option<Array2<i32>>> = (0..self.layers.len())
            .map(|k| (self.layers[k].kind != LayerKind::MaxPool2x2).then(|| self.weight_levels(k)))
            .collect();
        let mut a = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for (k, layer) in self.layers.iter_mut().enumerate() {
            let in_cols = a.ncols();
            if layer.kind == LayerKind::MaxPool2x2 {
                let (h, w, c) = layer.spatial();
                let (out, arg) = maxpool(&a, h, w, c);
                caches.push(Cache {
                    input: Array2::zeros((0, 0)),
                    wq: Array2::zeros((0, 0)),
                    xhat: Array2::zeros((0, 0)),
                    y: Array2::zeros((0, 0)),
                    inv_sd: Vec::new(),
                    pool_arg: arg,
                    in_cols,
                });
                a = out;
                continue;
            }
            let input = if layer.kind.is_conv() {
                let (h, w, c) = layer.spatial();
                im2col(&a, h, w, c)
            } else {
                a
            };
            let wq = levels[k].as_ref().expect("weighted").mapv(|l| l as f32 * w_scale);
            let z = input.dot(&wq.t());
            if layer.kind == LayerKind::OutputDense {
                a = z * gain;
                caches.push(Cache {
                    input,
                    wq,
                    xhat: Array2::zeros((0, 0)),
                    y: Array2::zeros((0, 0)),
                    inv_sd: Vec::new(),
                    pool_arg: Vec::new(),
                    in_cols,
                });
                continue;
            }
            let bn = layer.bn.as_mut().expect("thresholded layer");
            let rows = z.nrows() as f64;
            let channels = z.ncols();
            let mut mean = vec![0f64; channels];
            let mut var = vec![0f64; channels];
            for row in z.rows() {
                for (c, &v) in row.iter().enumerate() {
                    mean[c] += v as f64;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows);
            for row in z.rows() {
                for (c, &v) in row.iter().enumerate() {
                    let d = v as f64 - mean[c];
                    var[c] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows);
            if let Some(m) = stat_momentum {
                for c in 0..channels {
                    bn.mean[c] = (1.0 - m) * bn.mean[c] + m * mean[c];
                    bn.var[c] = (1.0 - m) * bn.var[c] + m * var[c];
                }
            }
            let inv_sd: Vec<f32> = var.iter().map(|v| (1.0 / (v + BN_EPS).sqrt()) as f32).collect();
            let mut xhat = z;
            for mut row in xhat.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[c] as f32) * inv_sd[c];
                }
            }
            let mut y = xhat.clone();
            for mut row in y.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = bn.gamma[c] * *v + bn.beta[c];
                }
            }
            let act = y.mapv(|v| {
                let l = level(precision, v as f64) as f32;
                if precision.activation_bits() == 1 {
                    l
                } else {
                    l * a_scale
                }
            });
            let out_cols = layer.out_shape.len();
            a = act.into_shape_with_order((batch, out_cols)).expect("contiguous");
            caches.push(Cache {
                input,
                wq,
                xhat,
                y,
                inv_sd,
                pool_arg: Vec::new(),
                in_cols,
            });
        }
        (a, caches)
    }

    /// One optimizer step on a batch; returns the mean cross-entropy.
    fn step(&mut self, x: Array2<f32>, labels: &[u8], lr: f32, cfg: &TrainConfig) -> f64 {
        let batch = x.nrows();
        let (logits, caches) = self.forward_train(x, Some(0.1));
        let (loss, dlogits) = softmax_xent(&logits, labels);
        let gain = self.output_gain();
        let mut grad = dlogits * gain;
        for k in (0..self.layers.len()).rev() {
            let cache = &caches[k];
            let layer = &mut self.layers[k];
            if layer.kind == LayerKind::MaxPool2x2 {
                let mut d = Array2::zeros((batch, cache.in_cols));
                for b in 0..batch {
                    for (j, &src) in cache.pool_arg[b * grad.ncols()..(b + 1) * grad.ncols()].iter().enumerate() {
                        d[[b, src as usize]] += grad[[b, j]];
                    }
                }
                grad = d;
                continue;
            }
            let dz = if let Some(bn) = layer.bn.as_mut() {
                let channels = cache.y.ncols();
                let dy_flat = grad.into_shape_with_order((cache.y.nrows(), channels)).expect("contiguous");
                let mut dy = dy_flat;
                ndarray::Zip::from(&mut dy).and(&cache.y).for_each(|d, &y| {
                    if y.abs() > 1.0 {
                        *d = 0.0;
                    }
                });
                let n = dy.nrows() as f32;
                let mut sum_d = vec![0f32; channels];
                let mut sum_dx = vec![0f32; channels];
                for (drow, xrow) in dy.rows().into_iter().zip(cache.xhat.rows()) {
                    for c in 0..channels {
                        sum_d[c] += drow[c];
                        sum_dx[c] += drow[c] * xrow[c];
                    }
                }
                let mut dz = dy;
                for (mut drow, xrow) in dz.rows_mut().into_iter().zip(cache.xhat.rows()) {
                    for c in 0..channels {
                        let g = bn.gamma[c] * cache.inv_sd[c] / n;
                        drow[c] = g * (n * drow[c] - sum_d[c] - xrow[c] * sum_dx[c]);
                    }
                }
                for c in 0..channels {
                    bn.v_gamma[c] = cfg.momentum * bn.v_gamma[c] - lr * sum_dx[c];
                    bn.v_beta[c] = cfg.momentum * bn.v_beta[c] - lr * sum_d[c];
                    bn.gamma[c] += bn.v_gamma[c];
                    bn.beta[c] += bn.v_beta[c];
                }
                dz
            } else {
                grad
            };
            let dw = dz.t().dot(&cache.input);
            grad = if k > 0 {
                let d_in = dz.dot(&cache.wq);
                if layer.kind.is_conv() {
                    let (h, w, c) = layer.spatial();
                    col2im(&d_in, batch, h, w, c)
                } else {
                    d_in
                }
            } else {
                Array2::zeros((0, 0))
            };
            let clip = cfg.weight_clip;
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut layer.velocity)
                .and(&dw)
                .for_each(|w, v, &g| {
                    *v = cfg.momentum * *v - lr * g;
                    *w = (*w + *v).clamp(-clip, clip);
                });
        }
        loss
    }

    /// Mean loss on a batch with batch statistics, leaving the model as is.
    pub fn batch_loss(&self, data: &Dataset, idx: &[usize]) -> f64 {
        let mut probe = self.clone();
        let x = probe.input_batch(data, idx);
        let labels: Vec<u8> = idx.iter().map(|&i| data.label(i)).collect();
        let (logits, _) = probe.forward_train(x, None);
        softmax_xent(&logits, &labels).0
    }

    /// Replaces the running statistics with averages of batch statistics
    /// over `data`, layer by layer in network order.
    fn recalibrate(&mut self, data: &Dataset, n: usize, batch: usize) {
        let n = n.min(data.len());
        let idx: Vec<usize> = (0..n).collect();
        let chunks: Vec<&[usize]> = idx.chunks(batch).filter(|c| c.len() > 1).collect();
        if chunks.is_empty() {
            return;
        }
        for l in &mut self.layers {
            if let Some(bn) = l.bn.as_mut() {
                bn.mean.fill(0.0);
                bn.var.fill(0.0);
            }
        }
        for (i, chunk) in chunks.iter().enumerate() {
            let x = self.input_batch(data, chunk);
            self.forward_train(x, Some(1.0 / (i + 1) as f64));
        }
    }

    /// Predicted classes of records `0..n` through the training graph in
    /// inference mode: integer accumulators, `f64` batch norm and cut points.
    pub fn predict(&self, data: &Dataset, n: usize) -> Result<Vec<usize>> {
        let n = n.min(data.len());
        let levels: Vec<Option<Array2<f64>>> = (0..self.layers.len())
            .map(|k| (self.layers[k].kind != LayerKind::MaxPool2x2).then(|| self.weight_levels(k).mapv(f64::from)))
            .collect();
        let bn: Vec<Option<Vec<BnParams>>> = self
            .layers
            .iter()
            .map(|l| l.bn.as_ref().map(|b| (0..b.gamma.len()).map(|c| b.params(c)).collect()))
            .collect();
        let mut out = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(256) {
            let px = data.image_shape().len();
            let mut a = Array2::from_shape_fn((chunk.len(), px), |(b, i)| {
                data.image(chunk[b])[i] as f64 - PIXEL_OFFSET as f64
            });
            for (k, layer) in self.layers.iter().enumerate() {
                if layer.kind == LayerKind::MaxPool2x2 {
                    let (h, w, c) = layer.spatial();
                    a = maxpool(&a, h, w, c).0;
                    continue;
                }
                let rows = if layer.kind.is_conv() {
                    let (h, w, c) = layer.spatial();
                    im2col(&a, h, w, c)
                } else {
                    a
                };
                let acc = rows.dot(&levels[k].as_ref().expect("weighted").t());
                if layer.kind == LayerKind::OutputDense {
                    for row in acc.rows() {
                        let mut best = 0;
                        for (j, &v) in row.iter().enumerate() {
                            if v > row[best] {
                                best = j;
                            }
                        }
                        out.push(best);
                    }
                    a = acc;
                    continue;
                }
                let params = bn[k].as_ref().expect("thresholded layer");
                let scale = self.acc_scale(k);
                let mut act = acc;
                for mut row in act.rows_mut() {
                    for (c, v) in row.iter_mut().enumerate() {
                        *v = level(self.precision, params[c].response(*v * scale)) as f64;
                    }
                }
                a = act
                    .into_shape_with_order((chunk.len(), layer.out_shape.len()))
                    .expect("contiguous");
            }
        }
        Ok(out)
    }

    pub fn accuracy(&self, data: &Dataset, n: usize) -> Result<f64> {
        let n = n.min(data.len());
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let pred = self.predict(data, n)?;
        let correct = pred.iter().enumerate().filter(|&(i, &p)| p == data.label(i) as usize).count();
        Ok(correct as f64 / n as f64)
    }

    /// Quantizes the weights and folds every batch norm into thresholds.
    pub fn export(&self) -> Result<NetworkTopology> {
        let p = self.precision;
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let weights = if l.kind == LayerKind::MaxPool2x2 {
                    None
                } else {
                    let shape = Shape::vector(l.weights.len())?;
                    let flat: Vec<f32> = l.weights.iter().copied().collect();
                    Some(match p.weight_bits() {
                        1 => WeightTensor::Binary(BitTensor::from_bits(
                            shape,
                            &flat.iter().map(|&w| w >= 0.0).collect::<Vec<_>>(),
                        )?),
                        _ => WeightTensor::Quad(Q2Tensor::from_codes(
                            shape,
                            &flat.iter().map(|&w| quantize2_code(w, Q2_DELTA as f32)).collect::<Vec<_>>(),
                        )?),
                    })
                };
                let thresholds = match &l.bn {
                    Some(bn) => {
                        let params: Vec<BnParams> = (0..bn.gamma.len()).map(|c| bn.params(c)).collect();
                        Some(fold_batchnorm(&params, self.acc_scale(k), cuts(p))?)
                    }
                    None => None,
                };
                Ok(LayerSpec {
                    kind: l.kind,
                    in_shape: l.in_shape.clone(),
                    out_shape: l.out_shape.clone(),
                    weights,
                    thresholds,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let net = NetworkTopology {
            name: self.name.clone(),
            precision: p,
            layers,
            num_classes: self.num_classes,
        };
        net.validate()?;
        Ok(net)
    }
}

/// Trains a shadow model for `skeleton` with straight-through gradients.
pub fn train_ste(
    skeleton: &NetworkTopology,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(ShadowModel, Vec<EpochLog>)> {
    cfg.validate()?;
    let input = skeleton.input_shape();
    let fits = if skeleton.layers[0].kind.is_conv() {
        train.image_shape() == input
    } else {
        train.image_shape().len() == input.len()
    };
    if !fits {
        return Err(Error::ShapeMismatch {
            expected: input.dims().to_vec(),
            actual: train.image_shape().dims().to_vec(),
        });
    }
    let n = cfg.train_limit.unwrap_or(usize::MAX).min(train.len());
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut model = ShadowModel::from_topology(skeleton, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = model.input_batch(train, chunk);
            let labels: Vec<u8> = chunk.iter().map(|&i| train.label(i)).collect();
            let loss = model.step(x, &labels, lr, cfg);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: loss as f32 });
            }
            total += loss;
            batches += 1;
        }
        if epoch + 1 == cfg.epochs {
            model.recalibrate(train, 10_000, 500);
        }
        let test_accuracy = match test {
            Some(t) if !t.is_empty() => Some(model.accuracy(t, cfg.eval_limit.unwrap_or(usize::MAX))?),
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            train_loss: total / batches as f64,
            test_accuracy,
        });
        lr *= cfg.lr_decay;
    }
    Ok((model, log))
}

fn softmax_xent(logits: &Array2<f32>, labels: &[u8]) -> (f64, Array2<f32>) {
    let b = logits.nrows() as f32;
    let mut grad = logits.clone();
    let mut loss = 0.0f64;
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        let m = row.fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s: f32 = row.sum();
        row.mapv_inplace(|v| v / s);
        loss -= (row[y as usize].max(1e-30) as f64).ln();
        row[y as usize] -= 1.0;
        row.mapv_inplace(|v| v / b);
    }
    (loss / labels.len() as f64, grad)
}

/// Unpadded 3×3 patches of `[h, w, c]` rows: `[batch · oh · ow, 9c]`, each
/// patch ordered `(ky, kx, c)` to match the weight layout.
fn im2col<T: Copy + Default>(x: &Array2<T>, h: usize, w: usize, c: usize) -> Array2<T> {
    let (oh, ow) = (h - 2, w - 2);
    let batch = x.nrows();
    let run = 3 * c;
    let mut out = Vec::with_capacity(batch * oh * ow * 9 * c);
    for img in x.rows() {
        let img = img.as_slice().expect("contiguous rows");
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..3 {
                    let start = ((oy + ky) * w + ox) * c;
                    out.extend_from_slice(&img[start..start + run]);
                }
            }
        }
    }
    Array2::from_shape_vec((batch * oh * ow, 9 * c), out).expect("sized")
}

fn col2im(d: &Array2<f32>, batch: usize, h: usize, w: usize, c: usize) -> Array2<f32> {
    let (oh, ow) = (h - 2, w - 2);
    let run = 3 * c;
    let mut out = Array2::<f32>::zeros((batch, h * w * c));
    for b in 0..batch {
        let mut img = out.row_mut(b);
        let img = img.as_slice_mut().expect("contiguous");
        for oy in 0..oh {
            for ox in 0..ow {
                let patch = d.row((b * oh + oy) * ow + ox);
                let patch = patch.as_slice().expect("contiguous");
                for ky in 0..3 {
                    let start = ((oy + ky) * w + ox) * c;
                    for (dst, &src) in img[start..start + run].iter_mut().zip(&patch[ky * run..(ky + 1) * run]) {
                        *dst += src;
                    }
                }
            }
        }
    }
    out
}

/// 2×2/2 max pooling over `[h, w, c]` rows; also returns the source column
/// of every output (first maximum in scan order).
fn maxpool<T: Copy + PartialOrd + Default>(x: &Array2<T>, h: usize, w: usize, c: usize) -> (Array2<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let batch = x.nrows();
    let mut out = Array2::<T>::default((batch, oh * ow * c));
    let mut arg = Vec::with_capacity(batch * oh * ow * c);
    for b in 0..batch {
        let img = x.row(b);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = ((2 * oy) * w + 2 * ox) * c + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = ((2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                        if img[i] > img[best] {
                            best = i;
                        }
                    }
                    out[[b, (oy * ow + ox) * c + ch]] = img[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}
