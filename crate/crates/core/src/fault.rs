//! Soft-error model: the linear bit-address space over targeted storage,
//! uniform space-time sampling of fault sites, 8-bit burst expansion, and
//! the XOR overlay through which inference reads weights and activations.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bits::WORD_BITS;
use crate::error::{Error, Result};
use crate::network::{ActivationBuffers, LayerKind, NetworkTopology};

/// Width of a multi-bit upset burst.
pub const MBU_WIDTH: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum StorageKind {
    Weights,
    Activations,
}

impl StorageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StorageKind::Weights => "weights",
            StorageKind::Activations => "activations",
        }
    }
}

/// One addressable storage block: the weights of a layer or the activation
/// buffer a layer writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StorageKey {
    pub layer: usize,
    pub kind: StorageKind,
}

impl StorageKey {
    pub fn weights(layer: usize) -> Self {
        StorageKey {
            layer,
            kind: StorageKind::Weights,
        }
    }

    pub fn activations(layer: usize) -> Self {
        StorageKey {
            layer,
            kind: StorageKind::Activations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Target {
    Weights,
    Activations,
    Both,
    Layer(usize, StorageKind),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Weights => f.write_str("weights"),
            Target::Activations => f.write_str("activations"),
            Target::Both => f.write_str("both"),
            Target::Layer(k, kind) => write!(f, "layer{k}-{}", kind.as_str()),
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    /// Accepts `weights`, `activations`, `both`, or `layer<k>-weights` /
    /// `layer<k>-activations`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "weights" => return Ok(Target::Weights),
            "activations" => return Ok(Target::Activations),
            "both" => return Ok(Target::Both),
            _ => {}
        }
        let bad = || Error::InvalidTarget(s.to_string());
        let rest = lower.strip_prefix("layer").ok_or_else(bad)?;
        let (idx, kind) = rest.split_once(['-', ':']).ok_or_else(bad)?;
        let layer: usize = idx.parse().map_err(|_| bad())?;
        let kind = match kind {
            "weights" | "w" => StorageKind::Weights,
            "activations" | "a" => StorageKind::Activations,
            _ => return Err(bad()),
        };
        Ok(Target::Layer(layer, kind))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaultModel {
    #[serde(rename = "SEU")]
    Seu,
    #[serde(rename = "MBU8")]
    Mbu8,
}

impl fmt::Display for FaultModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FaultModel::Seu => "SEU",
            FaultModel::Mbu8 => "MBU8",
        })
    }
}

impl FromStr for FaultModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SEU" => Ok(FaultModel::Seu),
            "MBU" | "MBU8" => Ok(FaultModel::Mbu8),
            _ => Err(Error::Config(format!("unknown fault model `{s}`"))),
        }
    }
}

/// How long a flipped bit stays visible to reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Persistence {
    /// The cell stays flipped: every later read returns `stored ^ mask`,
    /// including reads of activations rewritten after the strike.
    #[default]
    PersistentRead,
    /// The flip lives in the stored value only and is cleared by the next
    /// write to that buffer. Weights are never rewritten, so weight faults
    /// behave as in [`Persistence::PersistentRead`].
    TransientWrite,
}

impl fmt::Display for Persistence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Persistence::PersistentRead => "persistent-read",
            Persistence::TransientWrite => "transient-write",
        })
    }
}

impl FromStr for Persistence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "persistentread" | "persistent" => Ok(Persistence::PersistentRead),
            "transientwrite" | "transient" => Ok(Persistence::TransientWrite),
            _ => Err(Error::Config(format!("unknown persistence mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub key: StorageKey,
    pub start: u64,
    pub len: u64,
}

/// Contiguous bit-address space over the storage selected by a [`Target`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryMap {
    regions: Vec<Region>,
    total_bits: u64,
}

impl MemoryMap {
    pub fn build(net: &NetworkTopology, target: Target) -> Result<Self> {
        let last = net.layers.len() - 1;
        let mut keys = Vec::new();
        let has_weights = |k: usize| net.layers[k].kind != LayerKind::MaxPool2x2;
        match target {
            Target::Weights => keys.extend((0..=last).filter(|&k| has_weights(k)).map(StorageKey::weights)),
            Target::Activations => keys.extend((0..last).map(StorageKey::activations)),
            Target::Both => {
                for k in 0..=last {
                    if has_weights(k) {
                        keys.push(StorageKey::weights(k));
                    }
                    if k < last {
                        keys.push(StorageKey::activations(k));
                    }
                }
            }
            Target::Layer(k, kind) => {
                if k > last {
                    return Err(Error::InvalidTarget(format!(
                        "layer {k} does not exist ({} layers)",
                        last + 1
                    )));
                }
                match kind {
                    StorageKind::Weights if !has_weights(k) => {
                        return Err(Error::InvalidTarget(format!("layer {k} is a pooling layer without weights")))
                    }
                    StorageKind::Activations if k == last => {
                        return Err(Error::InvalidTarget(format!(
                            "layer {k} is the output layer and has no activation buffer"
                        )))
                    }
                    _ => keys.push(StorageKey { layer: k, kind }),
                }
            }
        }
        let mut regions = Vec::with_capacity(keys.len());
        let mut start = 0u64;
        for key in keys {
            let len = net.storage_bits(key) as u64;
            if len == 0 {
                continue;
            }
            regions.push(Region { key, start, len });
            start += len;
        }
        Ok(MemoryMap {
            regions,
            total_bits: start,
        })
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn total_bits(&self) -> u64 {
        self.total_bits
    }

    pub fn is_empty(&self) -> bool {
        self.total_bits == 0
    }

    /// Maps a linear address to its storage block and bit offset inside it.
    pub fn locate(&self, address: u64) -> Result<(StorageKey, u64)> {
        if address >= self.total_bits {
            return Err(Error::AddressOutOfRange {
                address,
                total_bits: self.total_bits,
            });
        }
        let idx = self.regions.partition_point(|r| r.start + r.len <= address);
        let r = &self.regions[idx];
        Ok((r.key, address - r.start))
    }

    /// Lowest layer index whose computation can observe a fault in this map.
    /// A weight fault in layer `k` is seen by layer `k`; an activation fault
    /// in buffer `k` is first read by layer `k + 1`.
    pub fn first_affected_layer(&self) -> usize {
        self.regions
            .iter()
            .map(|r| match r.key.kind {
                StorageKind::Weights => r.key.layer,
                StorageKind::Activations => r.key.layer + 1,
            })
            .min()
            .unwrap_or(0)
    }
}

/// A single sampled upset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSite {
    pub bit_address: u64,
    pub time_index: usize,
    pub model: FaultModel,
}

/// Draws `n` sites uniformly over the map's bits and the workload's
/// inference indices, returned in time order (ties keep draw order).
pub fn sample_faults<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
    map: &MemoryMap,
    workload_len: usize,
    model: FaultModel,
) -> Result<Vec<FaultSite>> {
    if map.is_empty() {
        return Err(Error::EmptyMap);
    }
    if workload_len == 0 {
        return Err(Error::EmptyWorkload);
    }
    let mut sites: Vec<FaultSite> = (0..n)
        .map(|_| FaultSite {
            bit_address: rng.gen_range(0..map.total_bits()),
            time_index: rng.gen_range(0..workload_len),
            model,
        })
        .collect();
    sites.sort_by_key(|s| s.time_index);
    Ok(sites)
}

/// Bits flipped by a burst starting at the site's address, clipped at the
/// end of the map. Bursts may straddle storage blocks.
pub fn expand_mbu(site: &FaultSite, map: &MemoryMap) -> Result<Vec<u64>> {
    if site.model != FaultModel::Mbu8 {
        return Err(Error::NotMbu);
    }
    if site.bit_address >= map.total_bits() {
        return Err(Error::AddressOutOfRange {
            address: site.bit_address,
            total_bits: map.total_bits(),
        });
    }
    let end = (site.bit_address + MBU_WIDTH).min(map.total_bits());
    Ok((site.bit_address..end).collect())
}

/// All addresses a site flips, for either fault model.
pub fn site_addresses(site: &FaultSite, map: &MemoryMap) -> Result<Vec<u64>> {
    match site.model {
        FaultModel::Seu => {
            map.locate(site.bit_address)?;
            Ok(vec![site.bit_address])
        }
        FaultModel::Mbu8 => expand_mbu(site, map),
    }
}

/// Sparse XOR masks over storage words, one mask set per storage block.
#[derive(Debug, Clone, Default)]
pub struct FaultOverlay {
    mode: Persistence,
    masks: BTreeMap<StorageKey, BTreeMap<usize, u64>>,
}

impl FaultOverlay {
    pub fn new(mode: Persistence) -> Self {
        FaultOverlay {
            mode,
            ..Default::default()
        }
    }

    pub fn mode(&self) -> Persistence {
        self.mode
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Drops every mask; the state a fresh trial starts from.
    pub fn reset(&mut self) {
        self.masks.clear();
    }

    /// XORs each address into the masks. Repeated addresses cancel.
    pub fn apply_fault(&mut self, map: &MemoryMap, addresses: &[u64]) -> Result<()> {
        let located = addresses
            .iter()
            .map(|&a| map.locate(a))
            .collect::<Result<Vec<_>>>()?;
        for (key, offset) in located {
            self.flip(key, offset as usize);
        }
        Ok(())
    }

    pub fn flip(&mut self, key: StorageKey, bit_offset: usize) {
        let block = self.masks.entry(key).or_default();
        let word = bit_offset / WORD_BITS;
        let m = block.entry(word).or_insert(0);
        *m ^= 1u64 << (bit_offset % WORD_BITS);
        if *m == 0 {
            block.remove(&word);
            if block.is_empty() {
                self.masks.remove(&key);
            }
        }
    }

    pub fn mask(&self, key: StorageKey) -> Option<&BTreeMap<usize, u64>> {
        self.masks.get(&key)
    }

    /// The word a read observes given the word held in storage.
    pub fn faulty_read(&self, key: StorageKey, word_index: usize, stored: u64) -> u64 {
        let m = self
            .masks
            .get(&key)
            .and_then(|b| b.get(&word_index))
            .copied()
            .unwrap_or(0);
        stored ^ m
    }

    /// Applies the masks of `key` to a whole block in place.
    pub fn apply_to(&self, key: StorageKey, words: &mut [u64]) {
        if let Some(block) = self.masks.get(&key) {
            for (&w, &m) in block {
                words[w] ^= m;
            }
        }
    }

    /// Notifies the overlay that a block was rewritten in full.
    pub fn on_write(&mut self, key: StorageKey) {
        if self.mode == Persistence::TransientWrite {
            self.masks.remove(&key);
        }
    }
}

/// Reads a storage word of a network through the overlay.
pub fn faulty_read(
    net: &NetworkTopology,
    buffers: &ActivationBuffers,
    overlay: &FaultOverlay,
    key: StorageKey,
    word_index: usize,
) -> Result<u64> {
    let stored = match key.kind {
        StorageKind::Weights => net
            .layers
            .get(key.layer)
            .and_then(|l| l.weights.as_ref())
            .ok_or(Error::UninitializedWeights(key.layer))?
            .words()
            .get(word_index)
            .copied(),
        StorageKind::Activations => buffers.words(key.layer).get(word_index).copied(),
    }
    .ok_or(Error::AddressOutOfRange {
        address: (word_index * WORD_BITS) as u64,
        total_bits: net.storage_bits(key) as u64,
    })?;
    Ok(overlay.faulty_read(key, word_index, stored))
}

/// Writes `trial,bit_address,time_index,model` rows with a header.
pub fn write_sites_csv<W: Write>(mut out: W, rows: &[(usize, FaultSite)]) -> std::io::Result<()> {
    writeln!(out, "trial,bit_address,time_index,model")?;
    for (trial, s) in rows {
        writeln!(out, "{trial},{},{},{}", s.bit_address, s.time_index, s.model)?;
    }
    Ok(())
}

pub fn read_sites_csv<R: BufRead>(input: R) -> Result<Vec<(usize, FaultSite)>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::SiteCsv {
            line: line_no,
            reason: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("trial")) {
            continue;
        }
        let bad = |reason: &str| Error::SiteCsv {
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        let trial = fields[0].parse().map_err(|_| bad("bad trial"))?;
        let bit_address = fields[1].parse().map_err(|_| bad("bad bit_address"))?;
        let time_index = fields[2].parse().map_err(|_| bad("bad time_index"))?;
        let model = fields[3].parse().map_err(|_| bad("bad model"))?;
        rows.push((
            trial,
            FaultSite {
                bit_address,
                time_index,
                model,
            },
        ));
    }
    Ok(rows)
}
