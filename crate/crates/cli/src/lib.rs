//! Library side of the `blockout` command: run orchestration shared by the
//! binary and its tests.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use blockout::analysis::{
    clusters_csv, convergence_table, expected_clusters_per_category, fraction_outside,
    histogram_csv, pca_csv, pca_project, percentile, probability_histogram,
    ProbabilitySnapshotSeries,
};
use blockout::checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint};
use blockout::data::{self, Dataset, Standardizer};
use blockout::network::{ClusterMode, Layer, Mode, Network};
use blockout::rng::RngStream;
use blockout::train::{self, Snapshot, TrainingLog};

pub use config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.blko";
pub const LOG_FILE: &str = "training_log.json";
pub const SNAPSHOT_FILE: &str = "snapshots.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const HISTOGRAM_BINS: usize = 20;

/// Band used to measure how far probabilities have moved from 0.5.
pub const CONFIDENT_LOW: f64 = 0.25;
pub const CONFIDENT_HIGH: f64 = 0.75;

/// Training split and optional held-out split described by a config.
pub fn load_data(cfg: &RunConfig) -> anyhow::Result<(Dataset, Option<Dataset>)> {
    match &cfg.train_data {
        Some(path) => {
            let train =
                data::load_binary(path).with_context(|| format!("loading {}", path.display()))?;
            let test = cfg
                .test_data
                .as_ref()
                .map(|p| data::load_binary(p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            Ok((train, test))
        }
        None => {
            let (train, test) =
                data::generate_hierarchical_split(&cfg.hierarchy_spec(), cfg.test_per_class)?;
            Ok((train, Some(test)))
        }
    }
}

/// Builds the configured network for `train`. Weights are drawn from stream 0
/// of the run seed.
pub fn build_network(cfg: &RunConfig, train: &Dataset) -> anyhow::Result<Network> {
    let mut rng = RngStream::new(cfg.seed);
    let mut b = Network::builder(train.dim(), &mut rng);
    if cfg.standardize {
        let s = Standardizer::fit(train)?;
        log::info!("standardizing {} input features", s.mean.len());
        b = b.standardize(s.mean, s.std);
    }
    let widths: Vec<usize> = cfg
        .hidden_widths
        .iter()
        .copied()
        .chain([train.num_classes])
        .collect();
    let first_blockout = widths.len() - cfg.blockout_layers;
    for (i, &w) in widths.iter().enumerate() {
        if i > 0 {
            b = b.relu();
        }
        b = if i >= first_blockout {
            b.blockout(w, cfg.clusters)
        } else {
            b.dense(w)
        };
    }
    Ok(b.softmax_loss()?)
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub network: Network,
    pub log: TrainingLog,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Trains as configured, without touching the file system beyond reading
/// data. The returned network is in inference mode.
pub fn run(cfg: &RunConfig) -> anyhow::Result<RunOutcome> {
    let (train_set, test_set) = load_data(cfg)?;
    run_on(cfg, &train_set, test_set.as_ref())
}

pub fn run_on(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
) -> anyhow::Result<RunOutcome> {
    let mut network = build_network(cfg, train_set)?;
    let log = train::train(&mut network, train_set, test_set, &cfg.train_config())?;
    network.set_mode(Mode::Infer);
    let train_accuracy = train::evaluate(&network, train_set)?;
    let test_accuracy = test_set.map(|t| train::evaluate(&network, t)).transpose()?;
    Ok(RunOutcome {
        network,
        log,
        train_accuracy,
        test_accuracy,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_checkpoint(net: &Network, path: &Path) -> anyhow::Result<()> {
    save_checkpoint(net, path).with_context(|| format!("writing {}", path.display()))?;
    let reloaded = load_checkpoint(path)?;
    if encode_checkpoint(&reloaded)? != encode_checkpoint(net)? {
        bail!(
            "checkpoint {} did not read back identically",
            path.display()
        );
    }
    Ok(())
}

/// `train --config`: trains and writes the checkpoint, training log,
/// probability snapshots and the resolved config into `out_dir`. With zero
/// iterations only the initial checkpoint and the resolved config are written.
pub fn cmd_train(config_path: &Path) -> anyhow::Result<RunOutcome> {
    let cfg = RunConfig::load(config_path)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write(
        &cfg.out_dir.join(RESOLVED_CONFIG_FILE),
        cfg.to_json() + "\n",
    )?;
    let (train_set, test_set) = load_data(&cfg)?;

    if cfg.iterations == 0 {
        let mut network = build_network(&cfg, &train_set)?;
        network.set_mode(Mode::Infer);
        write_checkpoint(&network, &cfg.out_dir.join(CHECKPOINT_FILE))?;
        let train_accuracy = train::evaluate(&network, &train_set)?;
        let test_accuracy = test_set
            .as_ref()
            .map(|t| train::evaluate(&network, t))
            .transpose()?;
        return Ok(RunOutcome {
            network,
            log: TrainingLog::default(),
            train_accuracy,
            test_accuracy,
        });
    }

    log::info!(
        "training {} ({:?}, {} iterations, seed {})",
        cfg.run_id,
        cfg.variant,
        cfg.iterations,
        cfg.seed
    );
    let mut outcome = run_on(&cfg, &train_set, test_set.as_ref())?;
    write_checkpoint(&outcome.network, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    let snapshots = std::mem::take(&mut outcome.log.snapshots);
    write(
        &cfg.out_dir.join(SNAPSHOT_FILE),
        serde_json::to_string(&snapshots)? + "\n",
    )?;
    write(
        &cfg.out_dir.join(LOG_FILE),
        serde_json::to_string_pretty(&outcome.log)? + "\n",
    )?;
    outcome.log.snapshots = snapshots;
    Ok(outcome)
}

/// `eval --checkpoint --data`: accuracy and the number of examples.
pub fn cmd_eval(checkpoint: &Path, data_path: &Path) -> anyhow::Result<(f64, usize)> {
    let net = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let data = data::load_binary(data_path)
        .with_context(|| format!("loading dataset {}", data_path.display()))?;
    if data.num_classes > net.num_classes() {
        bail!(
            "dataset has {} classes but the network predicts {}",
            data.num_classes,
            net.num_classes()
        );
    }
    Ok((train::evaluate(&net, &data)?, data.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Analysis {
    Hist,
    Pca,
    Clusters,
    Curve,
    All,
}

fn run_id_of(run_dir: &Path) -> anyhow::Result<String> {
    let path = run_dir.join(RESOLVED_CONFIG_FILE);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("not a run directory: expected {}", path.display()))?;
    Ok(RunConfig::parse(&text, &path.display().to_string())?.run_id)
}

fn load_snapshots(run_dir: &Path) -> anyhow::Result<ProbabilitySnapshotSeries> {
    let path = run_dir.join(SNAPSHOT_FILE);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("missing snapshots: expected {}", path.display()))?;
    let snapshots: Vec<Snapshot> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if snapshots.is_empty() {
        bail!(
            "{} holds no probability snapshots (the network has no Blockout layer)",
            path.display()
        );
    }
    Ok(ProbabilitySnapshotSeries::new(snapshots)?)
}

fn load_log(run_dir: &Path) -> anyhow::Result<TrainingLog> {
    let path = run_dir.join(LOG_FILE);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("missing training log: expected {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Interface index of the output side of the final layer, if that layer is a
/// Blockout layer.
pub fn output_interface(net: &Network) -> Option<usize> {
    let last_linear = net
        .layers()
        .iter()
        .rposition(|l| matches!(l, Layer::Dense(_) | Layer::Blockout(_)))?;
    net.blockout_interfaces()
        .into_iter()
        .find(|&(layer, _, _)| layer == last_linear)
        .map(|(_, _, out)| out)
}

/// `analyze --run --which`: writes `<run-id>.<analysis>.<layer>.csv` files
/// into the run directory and returns their paths. The convergence curve is
/// network-wide and uses `all` as its layer.
pub fn cmd_analyze(run_dir: &Path, which: Analysis) -> anyhow::Result<Vec<PathBuf>> {
    let run_id = run_id_of(run_dir)?;
    let name =
        |analysis: &str, layer: &str| run_dir.join(format!("{run_id}.{analysis}.{layer}.csv"));
    let wants = |a: Analysis| which == a || which == Analysis::All;
    let mut written = Vec::new();

    if wants(Analysis::Hist) || wants(Analysis::Pca) || wants(Analysis::Clusters) {
        let series = load_snapshots(run_dir)?;
        if wants(Analysis::Hist) {
            let rows = probability_histogram(&series, HISTOGRAM_BINS)?;
            for layer in series.layers() {
                let layer_rows: Vec<_> =
                    rows.iter().filter(|r| r.layer == layer).cloned().collect();
                let path = name("hist", &layer.to_string());
                write(&path, histogram_csv(&layer_rows))?;
                written.push(path);
            }
        }
        if wants(Analysis::Pca) {
            for layer in series.layers() {
                let snap = series.latest(layer).expect("layer present in series");
                let proj = pca_project(&snap.probabilities)
                    .with_context(|| format!("PCA of layer {layer}"))?;
                let path = name("pca", &layer.to_string());
                write(&path, pca_csv(&proj))?;
                written.push(path);
            }
        }
        if wants(Analysis::Clusters) {
            let ckpt = run_dir.join(CHECKPOINT_FILE);
            let net = load_checkpoint(&ckpt)
                .with_context(|| format!("missing checkpoint: expected {}", ckpt.display()))?;
            let Some(layer) = output_interface(&net) else {
                bail!("clusters analysis needs a Blockout output layer");
            };
            let snap = series
                .latest(layer)
                .with_context(|| format!("no snapshot of output layer {layer}"))?;
            let e = expected_clusters_per_category(&snap.probabilities)?;
            let path = name("clusters", &layer.to_string());
            write(&path, clusters_csv(&e))?;
            written.push(path);
        }
    }
    if wants(Analysis::Curve) {
        let path = name("curve", "all");
        write(&path, convergence_table(&load_log(run_dir)?))?;
        written.push(path);
    }
    Ok(written)
}

/// `gen-data --config --out`: writes the synthetic splits as `train.bods` and
/// `test.bods` under `out`.
pub fn cmd_gen_data(config_path: &Path, out: &Path) -> anyhow::Result<(PathBuf, PathBuf)> {
    let cfg = RunConfig::load(config_path)?;
    if cfg.train_data.is_some() {
        bail!("field `train_data`: gen-data needs a synthetic config");
    }
    let (train_set, test_set) =
        data::generate_hierarchical_split(&cfg.hierarchy_spec(), cfg.test_per_class)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let train_path = out.join("train.bods");
    let test_path = out.join("test.bods");
    data::save_bods(&train_set, &train_path)?;
    data::save_bods(&test_set, &test_path)?;
    Ok((train_path, test_path))
}

/// One arm of the ablation: a plain dense network or a Blockout variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Dense,
    Blockout(ClusterMode),
}

impl Arm {
    pub const ALL: [Arm; 4] = [
        Arm::Dense,
        Arm::Blockout(ClusterMode::SoftLearned),
        Arm::Blockout(ClusterMode::HardFixed),
        Arm::Blockout(ClusterMode::HardLearned),
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Dense => "dense",
            Arm::Blockout(ClusterMode::SoftLearned) => "soft-learned",
            Arm::Blockout(ClusterMode::HardFixed) => "hard-fixed",
            Arm::Blockout(ClusterMode::HardLearned) => "hard-learned",
        }
    }

    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        match self {
            Arm::Dense => cfg.blockout_layers = 0,
            Arm::Blockout(mode) => {
                cfg.variant = mode;
                if cfg.blockout_layers == 0 {
                    cfg.blockout_layers = 1;
                }
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Fraction of the output layer's probabilities outside
    /// `[CONFIDENT_LOW, CONFIDENT_HIGH]`; `None` for dense networks.
    pub confident_fraction: Option<f64>,
}

impl AblationRow {
    pub fn gap(&self) -> f64 {
        self.train_accuracy - self.test_accuracy
    }
}

/// Trains every arm for `seeds` consecutive seeds starting at `base.seed`,
/// all on the same data.
pub fn ablation(base: &RunConfig, arms: &[Arm], seeds: u64) -> anyhow::Result<Vec<AblationRow>> {
    let (train_set, test_set) = load_data(base)?;
    let Some(test_set) = test_set else {
        bail!("ablation needs a held-out split (`test_data`)");
    };
    let mut rows = Vec::new();
    for &arm in arms {
        for seed in base.seed..base.seed + seeds {
            let mut cfg = arm.configure(base);
            cfg.seed = seed;
            cfg.eval_interval = 0;
            let out = run_on(&cfg, &train_set, Some(&test_set))?;
            let confident_fraction = output_interface(&out.network).map(|i| {
                fraction_outside(
                    &out.network.cluster_params(i).probabilities(),
                    CONFIDENT_LOW,
                    CONFIDENT_HIGH,
                )
            });
            let row = AblationRow {
                arm,
                seed,
                train_accuracy: out.train_accuracy,
                test_accuracy: out.test_accuracy.expect("test split given"),
                confident_fraction,
            };
            log::info!(
                "{} seed {seed}: train {:.4} test {:.4}",
                arm.name(),
                row.train_accuracy,
                row.test_accuracy
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmSummary {
    pub arm: Arm,
    pub runs: usize,
    pub median_train: f64,
    pub median_test: f64,
    pub median_gap: f64,
    pub median_confident: Option<f64>,
}

pub fn summarize(rows: &[AblationRow]) -> Vec<ArmSummary> {
    let mut arms: Vec<Arm> = Vec::new();
    for r in rows {
        if !arms.contains(&r.arm) {
            arms.push(r.arm);
        }
    }
    arms.into_iter()
        .map(|arm| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| r.arm == arm).collect();
            let med = |f: &dyn Fn(&AblationRow) -> f64| {
                percentile(&of.iter().map(|r| f(r)).collect::<Vec<_>>(), 50.0)
            };
            let confident: Vec<f64> = of.iter().filter_map(|r| r.confident_fraction).collect();
            ArmSummary {
                arm,
                runs: of.len(),
                median_train: med(&|r| r.train_accuracy),
                median_test: med(&|r| r.test_accuracy),
                median_gap: med(&|r| r.gap()),
                median_confident: (!confident.is_empty()).then(|| percentile(&confident, 50.0)),
            }
        })
        .collect()
}

/// Fixed-width text table of per-arm medians.
pub fn ablation_table(summary: &[ArmSummary]) -> String {
    let mut out = format!(
        "{:<14} {:>5} {:>10} {:>10} {:>10} {:>12}\n",
        "variant", "runs", "train_acc", "test_acc", "gap", "p_confident"
    );
    for s in summary {
        let confident = s
            .median_confident
            .map(|c| format!("{c:.4}"))
            .unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<14} {:>5} {:>10.4} {:>10.4} {:>10.4} {:>12}",
            s.arm.name(),
            s.runs,
            s.median_train,
            s.median_test,
            s.median_gap,
            confident
        )
        .expect("write to string");
    }
    out
}

/// `variant,seed,train_accuracy,test_accuracy,gap,confident_fraction`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out =
        String::from("variant,seed,train_accuracy,test_accuracy,gap,confident_fraction\n");
    for r in rows {
        let confident = r
            .confident_fraction
            .map(|c| c.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{confident}",
            r.arm.name(),
            r.seed,
            r.train_accuracy,
            r.test_accuracy,
            r.gap()
        )
        .expect("write to string");
    }
    out
}

/// `ablate --config --seeds`: runs all four arms, writes
/// `<run-id>.ablation.all.csv` into `out_dir` and returns the summary table.
pub fn cmd_ablate(config_path: &Path, seeds: u64) -> anyhow::Result<String> {
    if seeds == 0 {
        bail!("--seeds must be positive");
    }
    let cfg = RunConfig::load(config_path)?;
    let rows = ablation(&cfg, &Arm::ALL, seeds)?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    write(
        &cfg.out_dir.join(format!("{}.ablation.all.csv", cfg.run_id)),
        ablation_csv(&rows),
    )?;
    Ok(ablation_table(&summarize(&rows)))
}
