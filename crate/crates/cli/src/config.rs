use std::path::{Path, PathBuf};

use fuseseg::fusion::PipelineSettings;
use fuseseg::phantom::PhantomSpec;
use fuseseg::psnn::{DecoderDirection, PSNNConfig, TrainConfig};
use fuseseg::register::RegParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a run needs; dumped with `fuseseg config --dump-defaults`.
/// The defaults are the clinical protocol values, not desk-scale ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Existing dataset manifest to ingest; phantoms are generated when unset.
    pub dataset: Option<PathBuf>,
    pub phantom: PhantomSpec,
    pub num_cases: usize,
    /// Target voxel size in mm; RTCT-frame volumes are resampled to it.
    pub resampling_mm: [f64; 3],
    pub registration: RegParams,
    pub net: PSNNConfig,
    pub train: TrainConfig,
    /// Sliding-window geometry, threshold and intensity normalization.
    pub inference: PipelineSettings,
    pub folds: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Each entry adds a CT / EF / EF+LF row triple to the tables.
    pub decoder_directions: Vec<DecoderDirection>,
    /// Write per-case probability volumes and masks under the run directory.
    pub save_predictions: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            phantom: PhantomSpec::default(),
            num_cases: 20,
            resampling_mm: [1.0, 1.0, 2.5],
            registration: RegParams::default(),
            net: PSNNConfig::default(),
            train: TrainConfig::default(),
            inference: PipelineSettings::default(),
            folds: 5,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            decoder_directions: vec![DecoderDirection::HighToLow],
            save_predictions: true,
        }
    }
}

pub const SEED_ENV: &str = "FUSESEG_SEED";

impl ExperimentConfig {
    /// Reads `path` (defaults when `None`) and applies `FUSESEG_SEED`.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(CliError::Config(format!("config file {} not found", p.display())));
                }
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.folds < 2 {
            return Err(CliError::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.decoder_directions.is_empty() {
            return Err(CliError::Config("decoder_directions must not be empty".into()));
        }
        if !self.resampling_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(CliError::Config(format!("invalid resampling {:?}", self.resampling_mm)));
        }
        if !(0.0..=1.0).contains(&self.inference.threshold) {
            return Err(CliError::Config("threshold must lie in [0, 1]".into()));
        }
        if let Some(d) = &self.dataset {
            if !d.is_file() {
                return Err(CliError::Config(format!("dataset manifest {} not found", d.display())));
            }
        }
        self.net.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        let m = self.net.num_blocks();
        for (what, dims) in [("patch_size", self.train.patch_size), ("window", self.inference.window)] {
            if dims.iter().any(|d| d % (1 << (m - 1)) != 0) {
                return Err(CliError::Config(format!("{what} {dims:?} must be divisible by {}", 1 << (m - 1))));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_json().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_protocol_values() {
        let c = ExperimentConfig::default();
        assert_eq!(c.resampling_mm, [1.0, 1.0, 2.5]);
        assert_eq!(c.inference.window, [80, 80, 64]);
        assert_eq!(c.inference.stride, [48, 48, 32]);
        assert_eq!(c.train.epochs, 40);
        assert_eq!(c.train.weight_decay, 0.005);
        assert_eq!(c.folds, 5);
        c.validate().unwrap();
    }

    #[test]
    fn dump_round_trips() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn rejects_bad_values() {
        let c = ExperimentConfig { folds: 1, ..Default::default() };
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
        let mut c = ExperimentConfig::default();
        c.inference.window = [48, 48, 30];
        assert!(c.validate().is_err());
    }
}
