//! Versioned JSON checkpoints holding models, optimizer state and config.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::trainer::{Models, TrainConfig};

pub const FORMAT_TAG: &str = "dnada-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub models: Models,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, best_epoch: usize, models: Models, optimizer: Adam) -> Self {
        Checkpoint {
            format: FORMAT_TAG.into(),
            config_hash: config.hash(),
            config,
            best_epoch,
            models,
            optimizer,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unparseable: {e}")))?;
        ck.verify()?;
        Ok(ck)
    }

    /// Checks the format tag, config hash and parameter count.
    pub fn verify(&self) -> Result<()> {
        if self.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "unsupported format `{}`, expected `{FORMAT_TAG}`",
                self.format
            )));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match stored config".into()));
        }
        let n = self.models.param_count();
        if self.optimizer.m.len() != n || self.optimizer.v.len() != n {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} entries for {n} parameters",
                self.optimizer.m.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::Standardizer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Checkpoint {
        let cfg = TrainConfig {
            timesteps: 5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let models = Models::init(3, 2, 4, Standardizer::identity(3), &cfg, &mut rng).unwrap();
        let opt = Adam::new(models.param_count());
        Checkpoint::new(cfg, 0, models, opt)
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        assert_eq!(Checkpoint::from_json(&ck.to_json()).unwrap(), ck);
    }

    #[test]
    fn rejects_tampering() {
        let mut ck = sample();
        ck.format = "other/9".into();
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
        let mut ck = sample();
        ck.config.lr = 0.5;
        assert!(ck.verify().is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }
}
