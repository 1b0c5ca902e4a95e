//! Run configuration: a JSON file whose keys mirror [`RunConfig`], with
//! command-line overrides applied on top.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use tvbi::data::BlobsSpec;
use tvbi::mrf::SpmpConfig;
use tvbi::nn::{Activation, NetworkDef, SgdConfig, Task};
use tvbi::prior::{GammaHyper, HierarchicalPrior, MrfParams};
use tvbi::turbo::{stream_seed, TurboConfig};
use tvbi::vbi::ModuleAConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "classification")]
    pub task: Task,
}

fn classification() -> Task {
    Task::Classification
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self { sizes: vec![2, 32, 32, 2], activation: Activation::Relu, task: Task::Classification }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "default_train")]
        train: usize,
        #[serde(default = "default_test")]
        test: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    /// IDX image/label file pairs (MNIST layout).
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

fn default_train() -> usize {
    BlobsSpec::default().train
}

fn default_test() -> usize {
    BlobsSpec::default().test
}

fn default_separation() -> f64 {
    BlobsSpec::default().separation
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::Blobs { train: default_train(), test: default_test(), separation: default_separation() }
    }
}

/// Every tunable of the train → prune → export pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub network: NetworkSpec,
    pub dataset: DatasetSpec,
    pub hypers: GammaHyper,
    /// Shared by every layer unless `mrf_layers` is set.
    pub mrf: MrfParams,
    pub mrf_layers: Option<Vec<MrfParams>>,
    pub lr: f64,
    pub batch_size: usize,
    pub train_epochs: usize,
    pub imax: usize,
    pub tol_turbo: f64,
    pub tol_a: f64,
    pub epochs_per_round: usize,
    pub max_bcd_rounds: usize,
    pub init_support: f64,
    pub pi_init: f64,
    pub threshold: f64,
    pub fine_tune_epochs: usize,
    pub min_side: usize,
    pub spmp: SpmpConfig,
    pub dump_masks: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let turbo = TurboConfig::default();
        Self {
            seed: 0,
            network: NetworkSpec::default(),
            dataset: DatasetSpec::default(),
            hypers: GammaHyper::default(),
            mrf: MrfParams::default(),
            mrf_layers: None,
            lr: turbo.module_a.lr,
            batch_size: turbo.module_a.batch_size,
            train_epochs: 20,
            imax: turbo.imax,
            tol_turbo: turbo.tol,
            tol_a: turbo.module_a.tol,
            epochs_per_round: turbo.module_a.epochs_per_round,
            max_bcd_rounds: turbo.module_a.max_rounds,
            init_support: turbo.module_a.init_support,
            pi_init: turbo.pi_init,
            threshold: turbo.threshold,
            fine_tune_epochs: turbo.fine_tune_epochs,
            min_side: 3,
            spmp: turbo.spmp,
            dump_masks: false,
        }
    }
}

/// Flags that override config-file values.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub imax: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_side: Option<usize>,
    #[arg(long)]
    pub p01_row: Option<f64>,
    #[arg(long)]
    pub p10_row: Option<f64>,
    #[arg(long)]
    pub p01_col: Option<f64>,
    #[arg(long)]
    pub p10_col: Option<f64>,
    /// Write every iteration's masks as PGM files.
    #[arg(long)]
    pub dump_masks: bool,
}

fn bad<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

impl RunConfig {
    /// Reads `path` (defaults when `None`), applies `ov` and validates.
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(ov);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(v) = ov.seed {
            self.seed = v;
        }
        if let Some(v) = ov.lr {
            self.lr = v;
        }
        if let Some(v) = ov.batch {
            self.batch_size = v;
        }
        if let Some(v) = ov.imax {
            self.imax = v;
        }
        if let Some(v) = ov.threshold {
            self.threshold = v;
        }
        if let Some(v) = ov.min_side {
            self.min_side = v;
        }
        let mrfs: Vec<&mut MrfParams> = match &mut self.mrf_layers {
            Some(layers) => layers.iter_mut().chain(std::iter::once(&mut self.mrf)).collect(),
            None => vec![&mut self.mrf],
        };
        for m in mrfs {
            if let Some(v) = ov.p01_row {
                m.p01_row = v;
            }
            if let Some(v) = ov.p10_row {
                m.p10_row = v;
            }
            if let Some(v) = ov.p01_col {
                m.p01_col = v;
            }
            if let Some(v) = ov.p10_col {
                m.p10_col = v;
            }
        }
        self.dump_masks |= ov.dump_masks;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.net()?;
        self.hypers.validate()?;
        self.mrf.validate()?;
        if let Some(layers) = &self.mrf_layers {
            if layers.len() != self.network.sizes.len() - 1 {
                return bad(format!(
                    "mrf_layers has {} entries for {} layers",
                    layers.len(),
                    self.network.sizes.len() - 1
                ));
            }
            for m in layers {
                m.validate()?;
            }
        }
        if self.network.task != Task::Classification {
            return bad("the built-in datasets are classification tasks");
        }
        if let DatasetSpec::Blobs { train, test, separation } = self.dataset {
            BlobsSpec { train, test, separation }.validate()?;
            if self.network.sizes.first() != Some(&2) || self.network.sizes.last() != Some(&2) {
                return bad("blobs needs a network with 2 inputs and 2 outputs");
            }
        }
        if self.min_side == 0 {
            return bad("min_side must be at least 1");
        }
        if !(self.tol_turbo > 0.0) || !(self.tol_a > 0.0) || !(self.spmp.tol > 0.0) {
            return bad("tolerances must be positive");
        }
        self.turbo().validate()?;
        Ok(())
    }

    pub fn net(&self) -> Result<NetworkDef, CliError> {
        Ok(NetworkDef::new(self.network.sizes.clone(), self.network.activation, self.network.task)?)
    }

    pub fn prior(&self, net: &NetworkDef) -> Result<HierarchicalPrior, CliError> {
        let dims = net.layer_dims();
        let mrfs = self.mrf_layers.clone().unwrap_or_else(|| vec![self.mrf; dims.len()]);
        Ok(HierarchicalPrior::per_layer(&dims, &vec![self.hypers; dims.len()], &mrfs)?)
    }

    pub fn turbo(&self) -> TurboConfig {
        TurboConfig {
            imax: self.imax,
            tol: self.tol_turbo,
            pi_init: self.pi_init,
            threshold: self.threshold,
            fine_tune_epochs: self.fine_tune_epochs,
            seed: self.seed,
            module_a: ModuleAConfig {
                lr: self.lr,
                batch_size: self.batch_size,
                epochs_per_round: self.epochs_per_round,
                tol: self.tol_a,
                max_rounds: self.max_bcd_rounds,
                init_support: self.init_support,
            },
            spmp: self.spmp,
        }
    }

    /// Dense baseline training schedule.
    pub fn train_sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, batch_size: self.batch_size, epochs: self.train_epochs, seed: stream_seed(self.seed, 11) }
    }

    pub fn init_seed(&self) -> u64 {
        stream_seed(self.seed, 10)
    }

    pub fn data_seed(&self) -> u64 {
        stream_seed(self.seed, 12)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!((cfg.lr, cfg.batch_size, cfg.imax, cfg.threshold), (0.01, 64, 15, 0.5));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 4, "dataset": {"kind": "blobs", "train": 100}}"#).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.dataset, DatasetSpec::Blobs { train: 100, test: 1000, separation: 5.0 });
        assert_eq!(cfg.tol_turbo, 1e-3);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 4}"#).is_err());
        let mut cfg = RunConfig::default();
        cfg.apply(&Overrides { p01_row: Some(1.0), ..Default::default() });
        assert!(matches!(cfg.validate(), Err(CliError::Core(tvbi::Error::Config(_)))));
        let cfg = RunConfig { batch_size: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = RunConfig { tol_turbo: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_reach_every_layer() {
        let mut cfg = RunConfig { mrf_layers: Some(vec![MrfParams::default(); 3]), ..Default::default() };
        cfg.apply(&Overrides { p10_col: Some(0.3), seed: Some(9), dump_masks: true, ..Default::default() });
        assert!(cfg.mrf_layers.unwrap().iter().all(|m| m.p10_col == 0.3));
        assert_eq!(cfg.mrf.p10_col, 0.3);
        assert_eq!(cfg.seed, 9);
        assert!(cfg.dump_masks);
    }
}
