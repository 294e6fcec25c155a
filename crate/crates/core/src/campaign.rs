//! Monte-Carlo fault-injection campaigns.
//!
//! Every trial draws its faults from its own ChaCha8 stream seeded with
//! [`trial_seed`], so a campaign's results do not depend on how trials are
//! scheduled across threads. Correctness is compared as integer counts.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::{sample_faults, site_addresses, FaultModel, FaultOverlay, FaultSite, MemoryMap, Persistence, StorageKind, Target};
use crate::model_io::{Dataset, DatasetKind};
use crate::network::{ActivationBuffers, Engine, LayerKind, NetworkTopology, StageInput};

pub const DEFAULT_FAULT_COUNTS: [usize; 7] = [1, 2, 5, 10, 20, 50, 100];
pub const DEFAULT_TRIALS: usize = 2000;
pub const DEFAULT_WORKLOAD: usize = 1000;

/// Serde adapter for types that round-trip through `Display` / `FromStr`.
mod text {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        let s = String::deserialize(d)?;
        s.parse().map_err(de::Error::custom)
    }
}

fn default_workload() -> usize {
    DEFAULT_WORKLOAD
}

fn default_counts() -> Vec<usize> {
    DEFAULT_FAULT_COUNTS.to_vec()
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub network: String,
    pub model_path: PathBuf,
    pub dataset_kind: DatasetKind,
    /// MNIST: `[images, labels]`; CIFAR-10: batch files in order.
    pub dataset_paths: Vec<PathBuf>,
    #[serde(default = "default_workload")]
    pub workload_len: usize,
    #[serde(with = "text")]
    pub fault_model: FaultModel,
    #[serde(with = "text")]
    pub target: Target,
    #[serde(default = "default_counts")]
    pub fault_counts: Vec<usize>,
    #[serde(default = "default_trials")]
    pub trials_per_scenario: usize,
    pub master_seed: u64,
    #[serde(default, with = "text")]
    pub persistence: Persistence,
    pub output_dir: PathBuf,
    /// Run every scenario with zero faults (pipeline check).
    #[serde(default)]
    pub dry_run: bool,
}

impl CampaignConfig {
    /// Keys without a default.
    pub const REQUIRED: [&'static str; 8] = [
        "network",
        "model_path",
        "dataset_kind",
        "dataset_paths",
        "fault_model",
        "target",
        "master_seed",
        "output_dir",
    ];

    pub fn validate(&self) -> Result<()> {
        if self.trials_per_scenario == 0 {
            return Err(Error::Config("trials_per_scenario must be at least 1".into()));
        }
        if self.workload_len == 0 {
            return Err(Error::Config("workload_len must be at least 1".into()));
        }
        if self.fault_counts.is_empty() {
            return Err(Error::Config("fault_counts is empty".into()));
        }
        if !self.dry_run && self.fault_counts.contains(&0) {
            return Err(Error::Config("fault_counts entries must be at least 1".into()));
        }
        Ok(())
    }

    /// Fault counts actually injected (all zero in a dry run).
    pub fn effective_counts(&self) -> Vec<usize> {
        if self.dry_run {
            vec![0; self.fault_counts.len()]
        } else {
            self.fault_counts.clone()
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset_kind {
            DatasetKind::MnistIdx => match self.dataset_paths.as_slice() {
                [images, labels] => crate::model_io::load_mnist_idx(images, labels),
                _ => Err(Error::Config("MNIST_IDX needs dataset_paths = [images, labels]".into())),
            },
            DatasetKind::Cifar10Bin => crate::model_io::load_cifar10_bin(&self.dataset_paths),
        }
    }
}

/// One cell of the campaign grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub network: String,
    #[serde(with = "text")]
    pub target: Target,
    pub fault_model: FaultModel,
    pub fault_count: usize,
}

impl Scenario {
    /// `network:target:model:count`, e.g. `lfcW1A1:activations:SEU:100`.
    pub fn key(&self) -> String {
        format!("{}:{}:{}:{}", self.network, self.target, self.fault_model, self.fault_count)
    }

    /// FNV-1a (64-bit) of the key.
    pub fn id(&self) -> u64 {
        self.key()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `mix64(mix64(mix64(master) ^ scenario_id) ^ trial)`.
pub fn trial_seed(master_seed: u64, scenario_id: u64, trial: usize) -> u64 {
    mix64(mix64(mix64(master_seed) ^ scenario_id) ^ trial as u64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub fault_count: usize,
    pub sites: Vec<FaultSite>,
    pub faulty_correct: usize,
    pub baseline_correct: usize,
    pub workload_len: usize,
}

impl TrialOutcome {
    pub fn faulty_accuracy(&self) -> f64 {
        self.faulty_correct as f64 / self.workload_len as f64
    }

    /// Baseline minus faulty accuracy; positive means degradation.
    pub fn delta(&self) -> f64 {
        (self.baseline_correct as f64 - self.faulty_correct as f64) / self.workload_len as f64
    }

    pub fn effective(&self) -> bool {
        self.faulty_correct != self.baseline_correct
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub network: String,
    pub target: String,
    pub fault_model: String,
    pub fault_count: usize,
    pub trials: usize,
    pub workload_len: usize,
    pub baseline_accuracy: f64,
    /// Mean signed accuracy delta.
    pub mean_delta: f64,
    /// `100 · mean_delta / baseline_accuracy`.
    pub mean_delta_pct: f64,
    pub effective_faults_pct: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub deltas: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aggregates outcomes in trial order.
pub fn summarize(scenario: &Scenario, outcomes: &[TrialOutcome]) -> Result<ScenarioSummary> {
    let first = outcomes.first().ok_or(Error::NoOutcomes)?;
    let workload = first.workload_len;
    let baseline = first.baseline_correct;
    let trials = outcomes.len();
    let signed: i64 = outcomes
        .iter()
        .map(|o| o.baseline_correct as i64 - o.faulty_correct as i64)
        .sum();
    let mean_delta = signed as f64 / (trials * workload) as f64;
    let baseline_accuracy = baseline as f64 / workload as f64;
    let deltas: Vec<f64> = outcomes.iter().map(TrialOutcome::delta).collect();
    let mut sorted = deltas.clone();
    sorted.sort_by(f64::total_cmp);
    let effective = outcomes.iter().filter(|o| o.effective()).count();
    Ok(ScenarioSummary {
        scenario: scenario.key(),
        network: scenario.network.clone(),
        target: scenario.target.to_string(),
        fault_model: scenario.fault_model.to_string(),
        fault_count: scenario.fault_count,
        trials,
        workload_len: workload,
        baseline_accuracy,
        mean_delta,
        mean_delta_pct: if baseline == 0 { 0.0 } else { 100.0 * mean_delta / baseline_accuracy },
        effective_faults_pct: 100.0 * effective as f64 / trials as f64,
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[trials - 1],
        deltas,
    })
}

/// Fraction of the first `workload_len` images classified correctly
/// without faults.
pub fn baseline_accuracy(net: &NetworkTopology, data: &Dataset, workload_len: usize) -> Result<f64> {
    let bench = Bench::new(net, data, workload_len, Persistence::PersistentRead)?;
    Ok(bench.baseline_correct() as f64 / bench.workload_len() as f64)
}

/// Fault-free reference run shared by every scenario of a campaign.
#[derive(Debug, Clone)]
pub struct Bench<'a> {
    net: &'a NetworkTopology,
    data: &'a Dataset,
    workload_len: usize,
    persistence: Persistence,
    engine: Engine<'a>,
    /// `prefix[i]` = correct baseline classifications among images `0..i`.
    prefix: Vec<usize>,
}

impl<'a> Bench<'a> {
    pub fn new(net: &'a NetworkTopology, data: &'a Dataset, workload_len: usize, persistence: Persistence) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if workload_len == 0 {
            return Err(Error::EmptyWorkload);
        }
        if data.image_shape().len() != net.input_shape().len() {
            return Err(Error::ShapeMismatch {
                expected: net.input_shape().dims().to_vec(),
                actual: data.image_shape().dims().to_vec(),
            });
        }
        let workload_len = workload_len.min(data.len());
        let mut engine = Engine::new(net)?;
        let mut overlay = FaultOverlay::new(persistence);
        let mut buffers = ActivationBuffers::new(net);
        let mut prefix = Vec::with_capacity(workload_len + 1);
        prefix.push(0);
        for i in 0..workload_len {
            let r = engine.run(data.image(i), &mut overlay, &mut buffers)?;
            prefix.push(prefix[i] + usize::from(r.predicted == data.label(i) as usize));
        }
        Ok(Bench {
            net,
            data,
            workload_len,
            persistence,
            engine,
            prefix,
        })
    }

    pub fn workload_len(&self) -> usize {
        self.workload_len
    }

    pub fn baseline_correct(&self) -> usize {
        self.prefix[self.workload_len]
    }

    pub fn network(&self) -> &'a NetworkTopology {
        self.net
    }

    /// Memory map plus the clean inputs of the first layer that can observe
    /// a fault in it.
    pub fn fault_space(&self, target: Target) -> Result<FaultSpace> {
        let map = MemoryMap::build(self.net, target)?;
        if map.is_empty() {
            return Err(Error::EmptyMap);
        }
        let start = map.first_affected_layer();
        let clean = if start == 0 {
            Vec::new()
        } else {
            let mut engine = self.engine.clone();
            let mut overlay = FaultOverlay::new(self.persistence);
            let mut buffers = ActivationBuffers::new(self.net);
            (0..self.workload_len)
                .map(|i| {
                    engine.run(self.data.image(i), &mut overlay, &mut buffers)?;
                    Ok(buffers.words(start - 1).to_vec())
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(FaultSpace { map, start, clean })
    }
}

#[derive(Debug, Clone)]
pub struct FaultSpace {
    pub map: MemoryMap,
    start: usize,
    clean: Vec<Vec<u64>>,
}

/// Per-worker mutable state.
#[derive(Debug, Clone)]
struct Worker<'a> {
    engine: Engine<'a>,
    overlay: FaultOverlay,
    buffers: ActivationBuffers,
}

impl<'a> Worker<'a> {
    fn new(bench: &Bench<'a>) -> Self {
        Worker {
            engine: bench.engine.clone(),
            overlay: FaultOverlay::new(bench.persistence),
            buffers: ActivationBuffers::new(bench.net),
        }
    }

    fn run(&mut self, bench: &Bench<'a>, space: &FaultSpace, sites: &[FaultSite]) -> Result<usize> {
        self.overlay.reset();
        self.buffers.reset();
        let w = bench.workload_len;
        let first = sites.first().map_or(w, |s| s.time_index);
        // images before the first strike see the clean network
        let mut correct = bench.prefix[first.min(w)];
        let mut next = 0;
        for i in first..w {
            while next < sites.len() && sites[next].time_index == i {
                let addrs = site_addresses(&sites[next], &space.map)?;
                self.overlay.apply_fault(&space.map, &addrs)?;
                next += 1;
            }
            let input = if space.start == 0 {
                StageInput::Image(bench.data.image(i))
            } else {
                StageInput::Buffer(&space.clean[i])
            };
            let r = self.engine.run_from(space.start, input, &mut self.overlay, &mut self.buffers)?;
            correct += usize::from(r.predicted == bench.data.label(i) as usize);
        }
        self.overlay.reset();
        Ok(correct)
    }
}

/// Runs one trial with the given sites (replay); sites are applied in time
/// order.
pub fn run_trial_with_sites(
    bench: &Bench<'_>,
    space: &FaultSpace,
    trial: usize,
    fault_count: usize,
    sites: &[FaultSite],
) -> Result<TrialOutcome> {
    let mut sites = sites.to_vec();
    sites.sort_by_key(|s| s.time_index);
    if let Some(s) = sites.iter().find(|s| s.time_index >= bench.workload_len) {
        return Err(Error::Config(format!(
            "fault time {} outside a workload of {}",
            s.time_index, bench.workload_len
        )));
    }
    let faulty_correct = Worker::new(bench).run(bench, space, &sites)?;
    Ok(TrialOutcome {
        trial,
        fault_count,
        sites,
        faulty_correct,
        baseline_correct: bench.baseline_correct(),
        workload_len: bench.workload_len,
    })
}

pub fn sample_trial_sites(space: &FaultSpace, scenario: &Scenario, master_seed: u64, trial: usize, workload_len: usize) -> Result<Vec<FaultSite>> {
    if scenario.fault_count == 0 {
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(master_seed, scenario.id(), trial));
    sample_faults(&mut rng, scenario.fault_count, &space.map, workload_len, scenario.fault_model)
}

pub fn run_trial(bench: &Bench<'_>, space: &FaultSpace, scenario: &Scenario, master_seed: u64, trial: usize) -> Result<TrialOutcome> {
    let sites = sample_trial_sites(space, scenario, master_seed, trial, bench.workload_len)?;
    run_trial_with_sites(bench, space, trial, scenario.fault_count, &sites)
}

/// All trials of one scenario, executed in parallel and returned in trial
/// order.
pub fn run_scenario(
    bench: &Bench<'_>,
    space: &FaultSpace,
    scenario: &Scenario,
    master_seed: u64,
    trials: usize,
) -> Result<Vec<TrialOutcome>> {
    (0..trials)
        .into_par_iter()
        .map_init(
            || Worker::new(bench),
            |worker, trial| {
                let sites = sample_trial_sites(space, scenario, master_seed, trial, bench.workload_len)?;
                let faulty_correct = worker.run(bench, space, &sites)?;
                Ok(TrialOutcome {
                    trial,
                    fault_count: scenario.fault_count,
                    sites,
                    faulty_correct,
                    baseline_correct: bench.baseline_correct(),
                    workload_len: bench.workload_len,
                })
            },
        )
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRun {
    pub scenario: Scenario,
    pub outcomes: Vec<TrialOutcome>,
    pub summary: ScenarioSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub baseline_correct: usize,
    pub workload_len: usize,
    pub susceptible_bits: u64,
    pub runs: Vec<ScenarioRun>,
}

impl CampaignResult {
    pub fn summaries(&self) -> Vec<ScenarioSummary> {
        self.runs.iter().map(|r| r.summary.clone()).collect()
    }
}

/// Runs every fault count of the configuration against an in-memory model
/// and dataset.
pub fn run_campaign(net: &NetworkTopology, data: &Dataset, cfg: &CampaignConfig) -> Result<CampaignResult> {
    cfg.validate()?;
    let bench = Bench::new(net, data, cfg.workload_len, cfg.persistence)?;
    let space = bench.fault_space(cfg.target)?;
    let runs = cfg
        .effective_counts()
        .into_iter()
        .map(|count| {
            let scenario = Scenario {
                network: cfg.network.clone(),
                target: cfg.target,
                fault_model: cfg.fault_model,
                fault_count: count,
            };
            let outcomes = run_scenario(&bench, &space, &scenario, cfg.master_seed, cfg.trials_per_scenario)?;
            let summary = summarize(&scenario, &outcomes)?;
            Ok(ScenarioRun {
                scenario,
                outcomes,
                summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CampaignResult {
        baseline_correct: bench.baseline_correct(),
        workload_len: bench.workload_len(),
        susceptible_bits: space.map.total_bits(),
        runs,
    })
}

/// One storage block's sweep across the configured fault counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCell {
    pub layer: usize,
    pub kind: StorageKind,
    pub bits: u64,
    pub summaries: Vec<ScenarioSummary>,
}

/// Sweeps `Layer(k, kind)` targets for each requested layer and kind.
/// Combinations without storage (pool weights, output activations) are
/// skipped; a layer index outside the network is an error.
pub fn per_layer_campaign(
    net: &NetworkTopology,
    data: &Dataset,
    cfg: &CampaignConfig,
    layers: &[usize],
    kinds: &[StorageKind],
) -> Result<Vec<LayerCell>> {
    cfg.validate()?;
    if let Some(&k) = layers.iter().find(|&&k| k >= net.layers.len()) {
        return Err(Error::InvalidTarget(format!("layer {k} of a {}-layer network", net.layers.len())));
    }
    let bench = Bench::new(net, data, cfg.workload_len, cfg.persistence)?;
    let last = net.layers.len() - 1;
    let mut cells = Vec::new();
    for &k in layers {
        for &kind in kinds {
            let has_storage = match kind {
                StorageKind::Weights => net.layers[k].kind != LayerKind::MaxPool2x2,
                StorageKind::Activations => k != last,
            };
            if !has_storage {
                continue;
            }
            let target = Target::Layer(k, kind);
            let space = bench.fault_space(target)?;
            let summaries = cfg
                .effective_counts()
                .into_iter()
                .map(|count| {
                    let scenario = Scenario {
                        network: cfg.network.clone(),
                        target,
                        fault_model: cfg.fault_model,
                        fault_count: count,
                    };
                    let outcomes = run_scenario(&bench, &space, &scenario, cfg.master_seed, cfg.trials_per_scenario)?;
                    summarize(&scenario, &outcomes)
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(LayerCell {
                layer: k,
                kind,
                bits: space.map.total_bits(),
                summaries,
            });
        }
    }
    Ok(cells)
}

/// Runs `f` on a dedicated pool of `threads` workers (0 = rayon default).
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
