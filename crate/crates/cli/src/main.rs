//! `bnnfi`: train, evaluate and fault-inject binarized networks.
//!
//! Campaign-style subcommands read a flat TOML file whose keys are the
//! `CampaignConfig` field names; command-line flags override file values,
//! and built-in defaults fill whatever neither provides.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bnnfi::campaign::{
    per_layer_campaign, run_campaign, run_trial_with_sites, summarize, with_threads, Bench, CampaignConfig, Scenario,
    ScenarioRun,
};
use bnnfi::fault::{read_sites_csv, FaultSite, MemoryMap, StorageKey, StorageKind};
use bnnfi::model_io::{load_cifar10_bin, load_mnist_idx, read_model_file_with_crc, write_model_file, Dataset, DatasetKind};
use bnnfi::network::{build_cnv, build_cnv_small, build_lfc, BitTarget, NetworkTopology, Precision};
use bnnfi::report::{self, TRIAL_HEADER};
use bnnfi::train::{train_ste, write_log_csv, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};
use toml::{Table, Value};

#[derive(Parser)]
#[command(name = "bnnfi", version, about = "Soft-error fault injection for binarized neural networks")]
struct Cli {
    /// Worker threads for campaigns (0 = all cores). Never changes results.
    #[arg(long, global = true, env = "BNNFI_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a topology table with susceptible-bit counts.
    Info(InfoArgs),
    /// Train a network and export it as a model file.
    Train(TrainArgs),
    /// Fault-free accuracy over the workload.
    Eval(CampaignArgs),
    /// Monte-Carlo campaign over the configured fault counts.
    Campaign(CampaignArgs),
    /// Per-layer campaign matrix.
    Layers(LayersArgs),
    /// Re-run the trials of one scenario from a fault-site CSV.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Lfc,
    Cnv,
    CnvSmall,
}

#[derive(Args)]
struct NetArgs {
    #[arg(long, value_enum, default_value = "lfc")]
    arch: Arch,
    /// Hidden width of lfc.
    #[arg(long, default_value_t = 1024)]
    width: usize,
    #[arg(long, default_value = "W1A1")]
    precision: Precision,
}

impl NetArgs {
    fn build(&self) -> Result<NetworkTopology> {
        Ok(match self.arch {
            Arch::Lfc => build_lfc(self.width, self.precision)?,
            Arch::Cnv => build_cnv(self.precision)?,
            Arch::CnvSmall => build_cnv_small(self.precision)?,
        })
    }
}

#[derive(Args)]
struct InfoArgs {
    #[command(flatten)]
    net: NetArgs,
    /// Describe a saved model instead of a built topology.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    net: NetArgs,
    #[arg(long, default_value = "MNIST_IDX")]
    dataset_kind: String,
    /// Training files (MNIST: images,labels; CIFAR-10: batch files).
    #[arg(long, value_delimiter = ',', required = true)]
    train: Vec<PathBuf>,
    /// Test files, same layout as --train.
    #[arg(long, value_delimiter = ',')]
    test: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Training log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    lr_decay: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_clip: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    eval_limit: Option<usize>,
}

/// Flag overrides for configuration keys.
#[derive(Args)]
struct CampaignArgs {
    /// TOML file with campaign keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    network: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    dataset_kind: Option<String>,
    #[arg(long, value_delimiter = ',')]
    dataset: Option<Vec<PathBuf>>,
    #[arg(long)]
    workload: Option<usize>,
    #[arg(long)]
    fault_model: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long, value_delimiter = ',')]
    counts: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<i64>,
    #[arg(long)]
    persistence: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Inject nothing; every trial must reproduce the baseline.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct LayersArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    /// Layer indices (default: all).
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "weights,activations")]
    kinds: Vec<String>,
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    campaign: CampaignArgs,
    /// Fault count of the replayed scenario.
    #[arg(long)]
    count: usize,
    /// Fault-site CSV written by `campaign`.
    #[arg(long)]
    sites: PathBuf,
    /// Output trial CSV (default: replay_<scenario>.csv in the output dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl CampaignArgs {
    fn table(&self) -> Result<Table> {
        let mut t = match &self.config {
            Some(p) => fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?
                .parse::<Table>()
                .with_context(|| format!("parsing {}", p.display()))?,
            None => Table::new(),
        };
        let mut set = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                t.insert(k.to_string(), v);
            }
        };
        set("network", self.network.clone().map(Value::String));
        set("model_path", self.model.as_deref().map(path_value));
        set("dataset_kind", self.dataset_kind.clone().map(Value::String));
        set(
            "dataset_paths",
            self.dataset.as_ref().map(|v| Value::Array(v.iter().map(|p| path_value(p)).collect())),
        );
        set("workload_len", self.workload.map(|v| Value::Integer(v as i64)));
        set("fault_model", self.fault_model.clone().map(Value::String));
        set("target", self.target.clone().map(Value::String));
        set(
            "fault_counts",
            self.counts.as_ref().map(|v| Value::Array(v.iter().map(|&c| Value::Integer(c as i64)).collect())),
        );
        set("trials_per_scenario", self.trials.map(|v| Value::Integer(v as i64)));
        set("master_seed", self.seed.map(Value::Integer));
        set("persistence", self.persistence.clone().map(Value::String));
        set("output_dir", self.output.as_deref().map(path_value));
        if self.dry_run {
            set("dry_run", Some(Value::Boolean(true)));
        }
        Ok(t)
    }

    fn config(&self) -> Result<CampaignConfig> {
        let t = self.table()?;
        let missing: Vec<&str> = CampaignConfig::REQUIRED
            .iter()
            .copied()
            .filter(|k| !t.contains_key(*k))
            .collect();
        if !missing.is_empty() {
            bail!("missing config keys: {}", missing.join(", "));
        }
        let cfg: CampaignConfig = Value::Table(t).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_dataset(kind: DatasetKind, paths: &[PathBuf]) -> Result<Dataset> {
    Ok(match kind {
        DatasetKind::MnistIdx => match paths {
            [images, labels] => load_mnist_idx(images, labels)?,
            _ => bail!("MNIST_IDX needs two files: images,labels"),
        },
        DatasetKind::Cifar10Bin => load_cifar10_bin(paths)?,
    })
}

fn parse_kind(s: &str) -> Result<DatasetKind> {
    Value::String(s.to_string()).try_into().with_context(|| format!("unknown dataset kind `{s}`"))
}

fn grouped(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn info(args: &InfoArgs) -> Result<()> {
    let net = match &args.model {
        Some(p) => read_model_file_with_crc(p)?.0,
        None => args.net.build()?,
    };
    println!("network {} ({}), {} classes", net.name, net.precision, net.num_classes);
    println!("{:>5}  {:<13} {:>14} {:>14} {:>12} {:>12}", "layer", "kind", "in", "out", "weight_bits", "act_bits");
    for (k, l) in net.layers.iter().enumerate() {
        println!(
            "{:>5}  {:<13} {:>14} {:>14} {:>12} {:>12}",
            k,
            l.kind.as_str(),
            format!("{:?}", l.in_shape.dims()),
            format!("{:?}", l.out_shape.dims()),
            net.storage_bits(StorageKey::weights(k)),
            net.storage_bits(StorageKey::activations(k)),
        );
    }
    println!("weight bits: {}", grouped(net.count_susceptible_bits(BitTarget::Weights)));
    println!("activation bits: {}", grouped(net.count_susceptible_bits(BitTarget::Activations)));
    println!("total susceptible bits: {}", grouped(net.count_susceptible_bits(BitTarget::Both)));
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let skeleton = args.net.build()?;
    let kind = parse_kind(&args.dataset_kind)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: args.epochs.unwrap_or(d.epochs),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        learning_rate: args.learning_rate.unwrap_or(d.learning_rate),
        lr_decay: args.lr_decay.unwrap_or(d.lr_decay),
        momentum: args.momentum.unwrap_or(d.momentum),
        weight_clip: args.weight_clip.unwrap_or(d.weight_clip),
        seed: args.seed.unwrap_or(d.seed),
        train_limit: args.train_limit,
        eval_limit: args.eval_limit,
    };
    cfg.validate()?;
    let train = load_dataset(kind, &args.train)?;
    let test = if args.test.is_empty() {
        None
    } else {
        Some(load_dataset(kind, &args.test)?)
    };
    let (model, log) = train_ste(&skeleton, &train, test.as_ref(), &cfg)?;
    for row in &log {
        match row.test_accuracy {
            Some(a) => eprintln!("epoch {} loss {:.4} test accuracy {:.4}", row.epoch, row.train_loss, a),
            None => eprintln!("epoch {} loss {:.4}", row.epoch, row.train_loss),
        }
    }
    let net = model.export()?;
    write_model_file(&args.out, &net)?;
    if let Some(p) = &args.log {
        let mut buf = Vec::new();
        write_log_csv(&mut buf, &log)?;
        fs::write(p, buf).with_context(|| format!("writing {}", p.display()))?;
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn eval(args: &CampaignArgs) -> Result<()> {
    let t = args.table()?;
    let get = |k: &str| t.get(k).cloned().with_context(|| format!("missing config keys: {k}"));
    let model: PathBuf = get("model_path")?.try_into()?;
    let kind: DatasetKind = get("dataset_kind")?.try_into()?;
    let paths: Vec<PathBuf> = get("dataset_paths")?.try_into()?;
    let workload = match t.get("workload_len") {
        Some(v) => usize::try_from(v.as_integer().context("workload_len must be an integer")?)?,
        None => bnnfi::campaign::DEFAULT_WORKLOAD,
    };
    let (net, _) = read_model_file_with_crc(&model)?;
    let data = load_dataset(kind, &paths)?;
    let bench = Bench::new(&net, &data, workload, Default::default())?;
    println!(
        "baseline accuracy {:.4} ({} / {})",
        bench.baseline_correct() as f64 / bench.workload_len() as f64,
        bench.baseline_correct(),
        bench.workload_len()
    );
    Ok(())
}

/// Loads the model and checks the target before any dataset work.
fn prepare(cfg: &CampaignConfig) -> Result<(NetworkTopology, u32)> {
    let (net, crc) = read_model_file_with_crc(&cfg.model_path)?;
    let map = MemoryMap::build(&net, cfg.target)?;
    if map.is_empty() {
        bail!("target {} has no susceptible bits in {}", cfg.target, net.name);
    }
    Ok((net, crc))
}

fn campaign(args: &CampaignArgs, threads: usize) -> Result<()> {
    let cfg = args.config()?;
    let (net, crc) = prepare(&cfg)?;
    let data = cfg.load_dataset()?;
    let result = with_threads(threads, || run_campaign(&net, &data, &cfg))??;
    report::emit_campaign(&cfg.output_dir, &cfg, crc, &result)?;
    println!(
        "{:<40} {:>10} {:>9} {:>10} {:>10}",
        "scenario", "reduction", "rel %", "effective%", "max"
    );
    for s in result.summaries() {
        println!(
            "{:<40} {:>10.5} {:>9.2} {:>10.1} {:>10.4}",
            s.scenario, s.mean_delta, s.mean_delta_pct, s.effective_faults_pct, s.max
        );
    }
    println!("outputs in {}", cfg.output_dir.display());
    Ok(())
}

fn layers(args: &LayersArgs, threads: usize) -> Result<()> {
    let cfg = args.campaign.config()?;
    let (net, crc) = read_model_file_with_crc(&cfg.model_path)?;
    let kinds = args
        .kinds
        .iter()
        .map(|k| match k.trim().to_ascii_lowercase().as_str() {
            "weights" => Ok(StorageKind::Weights),
            "activations" => Ok(StorageKind::Activations),
            other => bail!("unknown storage kind `{other}`"),
        })
        .collect::<Result<Vec<_>>>()?;
    let list = args.layers.clone().unwrap_or_else(|| (0..net.layers.len()).collect());
    if let Some(k) = list.iter().find(|&&k| k >= net.layers.len()) {
        bail!("layer {k} does not exist in {} ({} layers)", net.name, net.layers.len());
    }
    let data = cfg.load_dataset()?;
    let cells = with_threads(threads, || per_layer_campaign(&net, &data, &cfg, &list, &kinds))??;
    let baseline = Bench::new(&net, &data, cfg.workload_len, cfg.persistence)?.baseline_correct();
    report::emit_layers(&cfg.output_dir, &cfg, crc, baseline, &list, &cells)?;
    for c in &cells {
        for s in &c.summaries {
            println!(
                "layer {:>2} {:<11} {:>9} bits  count {:>4}  reduction {:.5}  effective {:.1}%",
                c.layer,
                c.kind.as_str(),
                c.bits,
                s.fault_count,
                s.mean_delta,
                s.effective_faults_pct
            );
        }
    }
    Ok(())
}

fn replay(args: &ReplayArgs) -> Result<()> {
    let cfg = args.campaign.config()?;
    let (net, _) = prepare(&cfg)?;
    let text = fs::read(&args.sites).with_context(|| format!("reading {}", args.sites.display()))?;
    let mut by_trial: BTreeMap<usize, Vec<FaultSite>> = BTreeMap::new();
    for (trial, site) in read_sites_csv(text.as_slice())? {
        by_trial.entry(trial).or_default().push(site);
    }
    if let Some((&t, _)) = by_trial.range(cfg.trials_per_scenario..).next() {
        bail!("site CSV names trial {t}, beyond trials_per_scenario = {}", cfg.trials_per_scenario);
    }
    let data = cfg.load_dataset()?;
    let bench = Bench::new(&net, &data, cfg.workload_len, cfg.persistence)?;
    let space = bench.fault_space(cfg.target)?;
    let outcomes = (0..cfg.trials_per_scenario)
        .map(|t| {
            let sites = by_trial.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            run_trial_with_sites(&bench, &space, t, args.count, sites)
        })
        .collect::<bnnfi::Result<Vec<_>>>()?;
    let scenario = Scenario {
        network: cfg.network.clone(),
        target: cfg.target,
        fault_model: cfg.fault_model,
        fault_count: args.count,
    };
    let summary = summarize(&scenario, &outcomes)?;
    let run = ScenarioRun {
        scenario,
        outcomes,
        summary,
    };
    let mut out = format!("{TRIAL_HEADER}\n");
    report::trial_rows(&mut out, &run);
    let path = args
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("replay_{}.csv", report::file_stem(&run.scenario.key()))));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&path, out).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Info(a) => info(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Campaign(a) => campaign(a, cli.threads),
        Command::Layers(a) => layers(a, cli.threads),
        Command::Replay(a) => replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
