//! Run configuration: a flat JSON object, unknown keys rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use blockout::data::HierarchySpec;
use blockout::network::ClusterMode;
use blockout::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "BLOCKOUT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub variant: ClusterMode,

    /// Widths of the hidden layers; the output width is the class count.
    pub hidden_widths: Vec<usize>,
    /// How many of the last linear layers are Blockout layers. Zero gives a
    /// plain dense network.
    pub blockout_layers: usize,
    pub clusters: usize,
    /// Prepend a standardization layer fitted on the training split.
    pub standardize: bool,

    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_interval: u64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub theta_lr_multiplier: f64,
    pub snapshot_interval: u64,
    pub eval_interval: u64,

    /// BODS files. When `train_data` is unset a synthetic hierarchy is
    /// generated from the fields below.
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,

    pub data_seed: u64,
    pub superclasses: usize,
    pub subclasses_per: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            run_id: "run".into(),
            out_dir: PathBuf::from("runs/run"),
            seed: t.seed,
            variant: t.cluster_mode,
            hidden_widths: vec![64, 64],
            blockout_layers: 2,
            clusters: 4,
            standardize: true,
            learning_rate: t.learning_rate,
            lr_decay: t.decay_factor,
            lr_decay_interval: t.decay_interval,
            momentum: t.momentum,
            batch_size: t.batch_size,
            iterations: t.iterations,
            theta_lr_multiplier: t.theta_lr_multiplier,
            snapshot_interval: t.snapshot_interval,
            eval_interval: t.eval_interval,
            train_data: None,
            test_data: None,
            data_seed: 0,
            superclasses: 4,
            subclasses_per: 5,
            dim: 32,
            per_class: 200,
            test_per_class: 200,
            intra_spread: 1.0,
            inter_spread: 4.0,
        }
    }
}

impl RunConfig {
    /// Parses config text. Errors carry `name:line:column`.
    pub fn parse(text: &str, name: &str) -> anyhow::Result<Self> {
        let config: Self = serde_json::from_str(text)
            .map_err(|e| anyhow::anyhow!("{name}:{}:{}: {e}", e.line(), e.column()))?;
        config
            .validate()
            .with_context(|| format!("{name}: invalid config"))?;
        Ok(config)
    }

    /// Reads and validates a config file, then applies `BLOCKOUT_SEED` if set.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut config = Self::parse(&text, &path.display().to_string())?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            config.seed = seed
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={seed:?} is not an unsigned integer"))?;
        }
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\', '.']) {
            bail!("field `run_id`: must be non-empty without '/', '\\' or '.'");
        }
        if self.hidden_widths.contains(&0) {
            bail!("field `hidden_widths`: widths must be positive");
        }
        if self.blockout_layers > self.hidden_widths.len() + 1 {
            bail!(
                "field `blockout_layers`: {} exceeds the {} linear layers",
                self.blockout_layers,
                self.hidden_widths.len() + 1
            );
        }
        if self.clusters == 0 {
            bail!("field `clusters`: must be positive");
        }
        if self.test_data.is_some() && self.train_data.is_none() {
            bail!("field `test_data`: requires `train_data`");
        }
        if self.train_data.is_none() {
            if self.per_class == 0 || self.test_per_class == 0 {
                bail!("fields `per_class` and `test_per_class` must be positive");
            }
            self.hierarchy_spec()
                .validate()
                .map_err(|e| anyhow::anyhow!("synthetic data: {e}"))?;
        }
        self.train_config().validate().map_err(|e| {
            // Report the config's key names rather than the library's.
            let msg = e
                .to_string()
                .replace("decay_interval", "lr_decay_interval")
                .replace("decay_factor", "lr_decay");
            anyhow::anyhow!("{msg}")
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            decay_factor: self.lr_decay,
            decay_interval: self.lr_decay_interval,
            momentum: self.momentum,
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: self.seed,
            theta_lr_multiplier: self.theta_lr_multiplier,
            snapshot_interval: self.snapshot_interval,
            eval_interval: self.eval_interval,
            cluster_mode: self.variant,
        }
    }

    pub fn hierarchy_spec(&self) -> HierarchySpec {
        HierarchySpec {
            seed: self.data_seed,
            superclasses: self.superclasses,
            subclasses_per: self.subclasses_per,
            dim: self.dim,
            per_class: self.per_class,
            intra_spread: self.intra_spread,
            inter_spread: self.inter_spread,
        }
    }

    /// Pretty JSON with every field present.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
