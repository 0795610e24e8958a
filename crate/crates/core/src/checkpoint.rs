//! Versioned JSON checkpoints holding everything later commands need.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationResult, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::train::{EpochRecord, TrainConfig};

pub const FORMAT: &str = "recourse-mlp/v1";

/// Where the training data came from, so the same splits can be rebuilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub config: PathBuf,
    pub csv: PathBuf,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub params: Mlp,
    pub train: TrainConfig,
    pub delta_max: f64,
    pub data: DataSource,
    pub best_epoch: usize,
    #[serde(default)]
    pub epochs: Vec<EpochRecord>,
    #[serde(default)]
    pub policy: Option<ThresholdPolicy>,
    #[serde(default)]
    pub calibration: Option<CalibrationResult>,
}

impl Checkpoint {
    pub fn new(
        params: Mlp,
        train: TrainConfig,
        delta_max: f64,
        data: DataSource,
        best_epoch: usize,
        epochs: Vec<EpochRecord>,
    ) -> Self {
        Checkpoint {
            format: FORMAT.to_string(),
            params,
            train,
            delta_max,
            data,
            best_epoch,
            epochs,
            policy: None,
            calibration: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {:?} (expected {FORMAT:?})",
                ck.format
            )));
        }
        let flat = ck.params.flat_params();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("checkpoint contains non-finite parameters".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let net = Mlp::init(Architecture::new(3, &[4, 2]), &mut ChaCha8Rng::seed_from_u64(1));
        let data = DataSource {
            config: "c.toml".into(),
            csv: "d.csv".into(),
            split_seed: 7,
        };
        Checkpoint::new(net, TrainConfig::default(), 0.75, data, 0, vec![])
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut ck = sample();
        ck.policy = Some(ThresholdPolicy::Pare {
            epsilon: 0.05,
            alpha: 0.05,
        });
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_other_formats() {
        let text = sample().to_json().unwrap().replace(FORMAT, "something/v0");
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Config(_))));
    }
}
