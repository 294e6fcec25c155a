//! Model files and dataset readers.
//!
//! Model layout (all integers little-endian):
//!
//! ```text
//! "BNN1" | version u16 | precision u8 | layer count u16
//! per layer:
//!   kind u8
//!   in shape  (u32 rank, u32 dims...)
//!   out shape (u32 rank, u32 dims...)
//!   thresholds, threshold-bearing kinds only:
//!     i32 tau  x channels x levels   (levels = 1, or 3 for 2-bit activations)
//!     i8 sign  x channels
//!   weights, weight-bearing kinds only:
//!     u64 word count, u64 words...
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! The weight words are exactly the words fault addresses index, so a model
//! on disk and the in-memory map coincide bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{LayerKind, LayerSpec, NetworkTopology, Precision, Thresholds, WeightTensor};
use crate::tensor::{BitTensor, Q2Tensor, Shape};

pub const MODEL_MAGIC: &[u8; 4] = b"BNN1";
pub const MODEL_VERSION: u16 = 1;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: u64 = 3073;

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::W1A1 => 0,
        Precision::W2A2 => 1,
        Precision::W1A2 => 2,
    }
}

fn kind_tag(k: LayerKind) -> u8 {
    match k {
        LayerKind::InputDense => 0,
        LayerKind::InputConv3x3 => 1,
        LayerKind::BinDense => 2,
        LayerKind::BinConv3x3 => 3,
        LayerKind::MaxPool2x2 => 4,
        LayerKind::OutputDense => 5,
    }
}

fn kind_from_tag(t: u8) -> Result<LayerKind> {
    Ok(match t {
        0 => LayerKind::InputDense,
        1 => LayerKind::InputConv3x3,
        2 => LayerKind::BinDense,
        3 => LayerKind::BinConv3x3,
        4 => LayerKind::MaxPool2x2,
        5 => LayerKind::OutputDense,
        _ => return Err(Error::Malformed(format!("unknown layer kind tag {t}"))),
    })
}

/// Serializes a fully initialized network.
pub fn save_model(net: &NetworkTopology) -> Result<Vec<u8>> {
    net.validate()?;
    if !net.is_initialized() {
        let k = net
            .layers
            .iter()
            .position(|l| l.kind != LayerKind::MaxPool2x2 && l.weights.is_none())
            .unwrap_or(0);
        return Err(Error::UninitializedWeights(k));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(precision_tag(net.precision));
    let count = u16::try_from(net.layers.len()).map_err(|_| Error::Topology("too many layers".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for l in &net.layers {
        out.push(kind_tag(l.kind));
        for shape in [&l.in_shape, &l.out_shape] {
            out.extend_from_slice(&(shape.dims().len() as u32).to_le_bytes());
            for &d in shape.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        if let Some(t) = &l.thresholds {
            for &tau in t.taus() {
                out.extend_from_slice(&tau.to_le_bytes());
            }
            out.extend(t.signs().iter().map(|&s| s as u8));
        }
        if let Some(w) = &l.weights {
            out.extend_from_slice(&(w.words().len() as u64).to_le_bytes());
            for &word in w.words() {
                out.extend_from_slice(&word.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Malformed(format!(
                "{what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn shape(&mut self) -> Result<Shape> {
        let rank = self.u32("shape rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Malformed(format!("shape rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| self.u32("shape dim").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        Shape::new(dims).map_err(|e| Error::Malformed(e.to_string()))
    }
}

/// Reconstructs a network from model bytes alone.
pub fn load_model(bytes: &[u8]) -> Result<NetworkTopology> {
    if bytes.len() < 4 || &bytes[..4] != MODEL_MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            what: "model file",
            expected: u32::from_be_bytes(*MODEL_MAGIC),
            found: u32::from_be_bytes(found),
        });
    }
    if bytes.len() < 8 {
        return Err(Error::Malformed("file too short for a checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u16("version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let precision = match r.u8("precision")? {
        0 => Precision::W1A1,
        1 => Precision::W2A2,
        2 => Precision::W1A2,
        t => return Err(Error::Malformed(format!("unknown precision tag {t}"))),
    };
    let count = r.u16("layer count")? as usize;
    let mut layers = Vec::with_capacity(count);
    for k in 0..count {
        let kind = kind_from_tag(r.u8("layer kind")?)?;
        let in_shape = r.shape()?;
        let out_shape = r.shape()?;
        let mut layer = LayerSpec {
            kind,
            in_shape,
            out_shape,
            weights: None,
            thresholds: None,
        };
        if (kind.is_conv() || kind == LayerKind::MaxPool2x2)
            && (layer.in_shape.dims().len() != 3 || layer.out_shape.dims().len() != 3)
        {
            return Err(Error::Malformed(format!("layer {k}: spatial layer without [h, w, c] shapes")));
        }
        if kind.has_thresholds() {
            let channels = layer.out_channels();
            let levels = precision.threshold_levels();
            let taus = (0..channels * levels)
                .map(|_| r.i32("threshold"))
                .collect::<Result<Vec<_>>>()?;
            let signs = r.take(channels, "threshold signs")?.iter().map(|&b| b as i8).collect();
            layer.thresholds =
                Some(Thresholds::new(levels, taus, signs).map_err(|e| Error::Malformed(format!("layer {k}: {e}")))?);
        }
        if kind != LayerKind::MaxPool2x2 {
            let n_words = r.u64("weight word count")? as usize;
            let elements = layer.weight_elements();
            let shape = Shape::vector(elements).map_err(|e| Error::Malformed(e.to_string()))?;
            let expected = (elements * precision.weight_bits()).div_ceil(64);
            if n_words != expected {
                return Err(Error::Malformed(format!(
                    "layer {k}: {n_words} weight words, shapes imply {expected}"
                )));
            }
            let words = (0..n_words).map(|_| r.u64("weight word")).collect::<Result<Vec<_>>>()?;
            let bad = |e: Error| Error::Malformed(format!("layer {k}: {e}"));
            layer.weights = Some(match precision.weight_bits() {
                1 => WeightTensor::Binary(BitTensor::from_words(shape, words).map_err(bad)?),
                _ => WeightTensor::Quad(Q2Tensor::from_words(shape, words).map_err(bad)?),
            });
        }
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let num_classes = layers.last().map(|l| l.out_shape.len()).unwrap_or(0);
    let net = NetworkTopology {
        name: format!("bnn{precision}"),
        precision,
        layers,
        num_classes,
    };
    net.validate().map_err(|e| Error::Malformed(e.to_string()))?;
    Ok(net)
}

pub fn write_model_file(path: impl AsRef<Path>, net: &NetworkTopology) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, save_model(net)?).map_err(|e| Error::io(path, e))
}

pub fn read_model_file(path: impl AsRef<Path>) -> Result<NetworkTopology> {
    let path = path.as_ref();
    load_model(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Loads a model file and returns it with its stored checksum.
pub fn read_model_file_with_crc(path: impl AsRef<Path>) -> Result<(NetworkTopology, u32)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let net = load_model(&bytes)?;
    let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("checked by load_model"));
    Ok((net, crc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "MNIST_IDX")]
    MnistIdx,
    #[serde(rename = "CIFAR10_BIN")]
    Cifar10Bin,
}

/// Labeled 8-bit images in stored file order. Pixels are held `[h, w, c]`
/// per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub kind: DatasetKind,
    image_shape: Shape,
    pixels: Vec<u8>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, image_shape: Shape, pixels: Vec<u8>, labels: Vec<u8>) -> Result<Self> {
        let per = image_shape.len();
        if pixels.len() != per * labels.len() {
            return Err(Error::CountMismatch {
                images: pixels.len() / per,
                labels: labels.len(),
            });
        }
        Ok(Dataset {
            kind,
            image_shape,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &Shape {
        &self.image_shape
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_shape.len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// The first `n` records (all of them if fewer exist).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            kind: self.kind,
            image_shape: self.image_shape.clone(),
            pixels: self.pixels[..n * self.image_shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Records `start..start + n`.
    pub fn slice(&self, start: usize, n: usize) -> Dataset {
        let start = start.min(self.len());
        let end = (start + n).min(self.len());
        let per = self.image_shape.len();
        Dataset {
            kind: self.kind,
            image_shape: self.image_shape.clone(),
            pixels: self.pixels[start * per..end * per].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn need(bytes: &[u8], expected: u64, what: &str) -> Result<()> {
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            what: what.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    Ok(())
}

/// Parses IDX image and label payloads.
pub fn parse_mnist_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    need(images, 16, "IDX image header")?;
    let magic = be_u32(images, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX images",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(images, 4) as usize;
    let rows = be_u32(images, 8) as usize;
    let cols = be_u32(images, 12) as usize;
    let expected = 16 + (count * rows * cols) as u64;
    need(images, expected, "IDX images")?;

    need(labels, 8, "IDX label header")?;
    let magic = be_u32(labels, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "IDX labels",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = be_u32(labels, 4) as usize;
    need(labels, 8 + label_count as u64, "IDX labels")?;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let shape = Shape::new(vec![rows, cols, 1])?;
    Dataset::new(
        DatasetKind::MnistIdx,
        shape,
        images[16..expected as usize].to_vec(),
        labels[8..8 + label_count].to_vec(),
    )
}

pub fn load_mnist_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images.as_ref(), labels.as_ref());
    let i = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let l = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_mnist_idx(&i, &l)
}

/// Parses CIFAR-10 binary records (label byte + R, G, B 32×32 planes),
/// transposing each image to `[h, w, c]`.
pub fn parse_cifar10_bin(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if !(bytes.len() as u64).is_multiple_of(CIFAR_RECORD) {
        return Err(Error::RecordSize {
            path: path.to_path_buf(),
            size: bytes.len() as u64,
            record: CIFAR_RECORD,
        });
    }
    let n = bytes.len() / CIFAR_RECORD as usize;
    let mut pixels = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD as usize) {
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..1024 {
            for c in 0..3 {
                pixels.push(planes[c * 1024 + p]);
            }
        }
    }
    Ok((pixels, labels))
}

/// Concatenates CIFAR-10 batch files in the given order.
pub fn load_cifar10_bin<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        let (px, lb) = parse_cifar10_bin(&bytes, p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    Dataset::new(DatasetKind::Cifar10Bin, Shape::new(vec![32, 32, 3])?, pixels, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_cnv_small, build_lfc};

    fn idx_images(count: u32, rows: u32, cols: u32, fill: usize) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_IMAGES_MAGIC.to_be_bytes());
        v.extend(count.to_be_bytes());
        v.extend(rows.to_be_bytes());
        v.extend(cols.to_be_bytes());
        v.extend((0..fill).map(|i| i as u8));
        v
    }

    fn idx_labels(count: u32) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend(IDX_LABELS_MAGIC.to_be_bytes());
        v.extend(count.to_be_bytes());
        v.extend((0..count).map(|i| (i % 10) as u8));
        v
    }

    #[test]
    fn mnist_parse_ok() {
        let d = parse_mnist_idx(&idx_images(3, 28, 28, 3 * 784), &idx_labels(3)).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.image_shape().dims(), &[28, 28, 1]);
        assert_eq!(d.image(1)[0], (784 % 256) as u8);
        assert_eq!(d.label(2), 2);
    }

    #[test]
    fn mnist_errors_are_distinct() {
        let labels = idx_labels(3);
        let mut wrong = idx_images(3, 28, 28, 3 * 784);
        wrong[..4].copy_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        assert!(matches!(
            parse_mnist_idx(&wrong, &labels),
            Err(Error::BadMagic { found: 0x801, .. })
        ));

        let short = idx_images(3, 28, 28, 2 * 784 + 100);
        match parse_mnist_idx(&short, &labels) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, 16 + 3 * 784);
                assert_eq!(actual, 16 + 2 * 784 + 100);
            }
            other => panic!("expected truncation, got {other:?}"),
        }

        assert!(matches!(
            parse_mnist_idx(&idx_images(3, 28, 28, 3 * 784), &idx_labels(2)),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        ));
    }

    #[test]
    fn cifar_records() {
        let p = Path::new("batch.bin");
        let mut rec = vec![7u8];
        rec.extend((0..3072).map(|i| (i / 1024) as u8));
        let (px, lb) = parse_cifar10_bin(&[rec.clone(), rec].concat(), p).unwrap();
        assert_eq!(lb, vec![7, 7]);
        assert_eq!(&px[..6], &[0, 1, 2, 0, 1, 2]);

        let (px, lb) = parse_cifar10_bin(&[], p).unwrap();
        assert!(px.is_empty() && lb.is_empty());
        assert!(matches!(
            parse_cifar10_bin(&[0u8; 3074], p),
            Err(Error::RecordSize { size: 3074, .. })
        ));
    }

    #[test]
    fn cifar_ten_thousand_records_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data_batch_1.bin");
        fs::write(&path, vec![3u8; 30_730_000]).unwrap();
        let d = load_cifar10_bin(&[&path]).unwrap();
        assert_eq!(d.len(), 10_000);
        assert_eq!(d.image_shape().dims(), &[32, 32, 3]);
    }

    #[test]
    fn model_round_trip() {
        for mut net in [
            build_lfc(8, Precision::W1A1).unwrap(),
            build_lfc(5, Precision::W1A2).unwrap(),
            build_cnv_small(Precision::W2A2).unwrap(),
        ] {
            net.init_random(99);
            let bytes = save_model(&net).unwrap();
            let back = load_model(&bytes).unwrap();
            assert_eq!(back.precision, net.precision);
            assert_eq!(back.layers, net.layers);
            assert_eq!(save_model(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn model_errors_are_distinct() {
        let mut net = build_lfc(8, Precision::W1A1).unwrap();
        assert!(matches!(save_model(&net), Err(Error::UninitializedWeights(0))));
        net.init_random(1);
        let bytes = save_model(&net).unwrap();

        assert!(matches!(load_model(&[]), Err(Error::BadMagic { .. })));

        let mut flipped = bytes.clone();
        flipped[200] ^= 0x10;
        assert!(matches!(load_model(&flipped), Err(Error::Checksum { .. })));

        let mut v2 = bytes[..bytes.len() - 4].to_vec();
        v2[4] = 2;
        let crc = crc32fast::hash(&v2);
        v2.extend(crc.to_le_bytes());
        assert!(matches!(load_model(&v2), Err(Error::UnsupportedVersion(2))));

        // payload word count that disagrees with the shapes
        let mut bad = build_lfc(8, Precision::W1A1).unwrap();
        bad.init_random(1);
        let mut raw = save_model(&bad).unwrap();
        raw.truncate(raw.len() - 4);
        // last layer's word count sits 8 + 8*words bytes before the end
        let words = (8 * 10usize).div_ceil(64);
        let at = raw.len() - 8 * words - 8;
        raw[at..at + 8].copy_from_slice(&(words as u64 + 1).to_le_bytes());
        let crc = crc32fast::hash(&raw);
        raw.extend(crc.to_le_bytes());
        assert!(matches!(load_model(&raw), Err(Error::Malformed(_))));
    }
}
