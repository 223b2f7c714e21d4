//! Experiment configuration: a flat `key = value` file with dotted
//! section prefixes. Missing keys take defaults; unknown keys are errors.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use srood_core::baseline::HeadFitConfig;
use srood_core::checkpoint::{parse_kv, parse_list};
use srood_core::erosion::Variant;
use srood_core::metrics::{LossWeights, PhiConfig, PhiFitConfig};
use srood_core::repairer::RepairerConfig;
use srood_core::scoring::ThresholdSpec;
use srood_core::training::{OptimizerKind, TrainConfig};

use crate::error::{io_err, AppError, AppResult};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub manifest: Option<PathBuf>,
    pub variant: Variant,
    pub seed: u64,
    pub id_name: String,
    pub ood_name: String,
    pub repairer: RepairerConfig,
    pub phi: PhiConfig,
    pub phi_fit: PhiFitConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub threshold: ThresholdSpec,
    /// Choose the erosion without OOD validation data.
    pub label_free_selection: bool,
    pub diagnose_probes: usize,
    pub diagnose_samples: usize,
    pub head: HeadFitConfig,
    /// Images per dataset in report grids.
    pub grid_columns: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::with_resolution(32, 32, 1)
    }
}

fn bad(key: &str, value: &str) -> AppError {
    AppError::Config(format!("bad value for {key}: {value:?}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> AppResult<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn list(key: &str, value: &str) -> AppResult<Vec<usize>> {
    parse_list(value).map_err(|_| bad(key, value))
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn with_resolution(height: usize, width: usize, channels: usize) -> Self {
        Self {
            manifest: None,
            variant: Variant::Sr,
            seed: 0,
            id_name: "id".to_string(),
            ood_name: "ood".to_string(),
            repairer: RepairerConfig::new(height, width, channels),
            phi: PhiConfig::new(height, width, channels),
            phi_fit: PhiFitConfig::default(),
            loss: LossWeights::default(),
            train: TrainConfig::default(),
            threshold: ThresholdSpec::default(),
            label_free_selection: false,
            diagnose_probes: 200,
            diagnose_samples: 64,
            head: HeadFitConfig::default(),
            grid_columns: 8,
        }
    }

    /// Parses config text. Relative manifest paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> AppResult<Self> {
        let kv = parse_kv(text)?;
        let mut cfg = Self::default();
        let mut resolution: (Option<usize>, Option<usize>, Option<usize>) = (None, None, None);
        for (key, value) in kv.entries() {
            let (k, v) = (key.as_str(), value.as_str());
            match k {
                "manifest" => {
                    let p = base.join(v);
                    cfg.manifest = Some(std::path::absolute(&p).unwrap_or(p));
                }
                "variant" => cfg.variant = v.parse().map_err(|_| bad(k, v))?,
                "seed" => cfg.set_seed(num(k, v)?),
                "data.id_name" => cfg.id_name = v.to_string(),
                "data.ood_name" => cfg.ood_name = v.to_string(),
                "data.height" => resolution.0 = Some(num(k, v)?),
                "data.width" => resolution.1 = Some(num(k, v)?),
                "data.channels" => resolution.2 = Some(num(k, v)?),
                "repairer.latent_dim" => cfg.repairer.latent_dim = num(k, v)?,
                "repairer.encoder_widths" => cfg.repairer.encoder_widths = list(k, v)?,
                "repairer.decoder_widths" => cfg.repairer.decoder_widths = list(k, v)?,
                "repairer.mix_alpha" => cfg.repairer.mix_alpha = num(k, v)?,
                "phi.widths" => cfg.phi.widths = list(k, v)?,
                "phi.iterations" => cfg.phi_fit.iterations = num(k, v)?,
                "phi.batch_size" => cfg.phi_fit.batch_size = num(k, v)?,
                "phi.learning_rate" => cfg.phi_fit.learning_rate = num(k, v)?,
                "loss.lambda1" => cfg.loss.lambda1 = num(k, v)?,
                "loss.lambda2" => cfg.loss.lambda2 = num(k, v)?,
                "train.n_iter" => cfg.train.n_iter = num(k, v)?,
                "train.batch_size" => cfg.train.batch_size = num(k, v)?,
                "train.learning_rate" => cfg.train.learning_rate = num(k, v)?,
                "train.optimizer" => cfg.train.optimizer = v.parse::<OptimizerKind>().map_err(|_| bad(k, v))?,
                "train.checkpoint_every" => cfg.train.checkpoint_every = num(k, v)?,
                "threshold" => cfg.threshold = v.parse().map_err(|_| bad(k, v))?,
                "select.label_free" => cfg.label_free_selection = num(k, v)?,
                "diagnose.probes" => cfg.diagnose_probes = num(k, v)?,
                "diagnose.samples" => cfg.diagnose_samples = num(k, v)?,
                "baseline.iterations" => cfg.head.iterations = num(k, v)?,
                "baseline.learning_rate" => cfg.head.learning_rate = num(k, v)?,
                "report.grid_columns" => cfg.grid_columns = num(k, v)?,
                other => return Err(AppError::Config(format!("unknown key {other}"))),
            }
        }
        if let (Some(h), Some(w), Some(c)) = (
            resolution.0.or(Some(cfg.repairer.height)),
            resolution.1.or(Some(cfg.repairer.width)),
            resolution.2.or(Some(cfg.repairer.channels)),
        ) {
            cfg.set_resolution(h, w, c);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn set_resolution(&mut self, height: usize, width: usize, channels: usize) {
        for (h, w, c) in [
            (&mut self.repairer.height, &mut self.repairer.width, &mut self.repairer.channels),
            (&mut self.phi.height, &mut self.phi.width, &mut self.phi.channels),
        ] {
            (*h, *w, *c) = (height, width, channels);
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.repairer.height, self.repairer.width, self.repairer.channels)
    }

    pub fn validate(&self) -> AppResult<()> {
        self.repairer.validate()?;
        self.phi.validate()?;
        self.loss.validate()?;
        self.threshold.validate()?;
        if self.train.batch_size == 0 || self.train.checkpoint_every == 0 || !(self.train.learning_rate > 0.0) {
            return Err(AppError::Config("train settings must be positive".to_string()));
        }
        if self.phi_fit.batch_size == 0 {
            return Err(AppError::Config("phi.batch_size must be positive".to_string()));
        }
        Ok(())
    }

    /// Every setting, one per line in a fixed order. Parsing the snapshot
    /// reproduces the configuration.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        if let Some(m) = &self.manifest {
            put("manifest", m.display().to_string());
        }
        put("variant", self.variant.to_string());
        put("seed", self.seed.to_string());
        put("data.id_name", self.id_name.clone());
        put("data.ood_name", self.ood_name.clone());
        put("data.height", self.repairer.height.to_string());
        put("data.width", self.repairer.width.to_string());
        put("data.channels", self.repairer.channels.to_string());
        put("repairer.latent_dim", self.repairer.latent_dim.to_string());
        put("repairer.encoder_widths", join(&self.repairer.encoder_widths));
        put("repairer.decoder_widths", join(&self.repairer.decoder_widths));
        put("repairer.mix_alpha", format!("{:?}", self.repairer.mix_alpha));
        put("phi.widths", join(&self.phi.widths));
        put("phi.iterations", self.phi_fit.iterations.to_string());
        put("phi.batch_size", self.phi_fit.batch_size.to_string());
        put("phi.learning_rate", format!("{:?}", self.phi_fit.learning_rate));
        put("loss.lambda1", format!("{:?}", self.loss.lambda1));
        put("loss.lambda2", format!("{:?}", self.loss.lambda2));
        put("train.n_iter", self.train.n_iter.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.learning_rate", format!("{:?}", self.train.learning_rate));
        put("train.optimizer", self.train.optimizer.as_str().to_string());
        put("train.checkpoint_every", self.train.checkpoint_every.to_string());
        put("threshold", self.threshold.to_string());
        put("select.label_free", self.label_free_selection.to_string());
        put("diagnose.probes", self.diagnose_probes.to_string());
        put("diagnose.samples", self.diagnose_samples.to_string());
        put("baseline.iterations", self.head.iterations.to_string());
        put("baseline.learning_rate", format!("{:?}", self.head.learning_rate));
        put("report.grid_columns", self.grid_columns.to_string());
        s
    }

    /// Hex SHA-256 of the snapshot.
    pub fn hash(&self) -> String {
        Sha256::digest(self.snapshot().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}
