//! Run configuration: a TOML file with one optional section per component.
//!
//! ```toml
//! seed = 7
//!
//! [world]
//! leakage = 0.5
//!
//! [train]
//! steps = 3000
//! lr = 2e-3
//! ```
//!
//! Every key has a default, so an empty file (or no file) is a valid config.
//! The global seed overrides the per-section seeds; each component then
//! derives its own stream from it by label (see `diffanon_core::seed`).

use std::path::Path;

use diffanon_core::{BackboneConfig, EvalConfig, ScheduleConfig, TrainConfig, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub backbone: BackboneConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads `path`; a missing or unreadable file is a usage error.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Propagates the global seed into every component and checks that the
    /// backbone matches the world's dimensions.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.world.seed = self.seed;
        self.train.seed = self.seed;
        self.eval.seed = self.seed;
        self.world.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        let (w, b) = (&self.world, &self.backbone);
        if (w.embed_dim, w.cond_pro_dim, w.cond_spk_dim) != (b.embed_dim, b.cond_pro_dim, b.cond_spk_dim) {
            return Err(CliError::Usage(format!(
                "backbone dims (embed {}, prosody {}, speaker {}) do not match the world ({}, {}, {})",
                b.embed_dim, b.cond_pro_dim, b.cond_spk_dim, w.embed_dim, w.cond_pro_dim, w.cond_spk_dim
            )));
        }
        self.schedule.build()?;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.steps, 3000);
        assert_eq!(c.world.n_speakers, 16);
    }

    #[test]
    fn partial_sections_override() {
        let c = RunConfig::from_toml("seed = 7\n[train]\nsteps = 12\n[world]\nleakage = 0.0\n").unwrap().resolve(None).unwrap();
        assert_eq!(c.train.steps, 12);
        assert_eq!(c.train.batch, TrainConfig::toy().batch);
        assert_eq!((c.world.seed, c.train.seed, c.eval.seed), (7, 7, 7));
        assert_eq!(c.world.leakage, 0.0);
    }

    #[test]
    fn unknown_keys_and_bad_dims_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nstepz = 1\n"), Err(CliError::Usage(_))));
        let c = RunConfig::from_toml("[world]\ncond_spk_dim = 4\n").unwrap();
        assert!(c.resolve(None).is_err());
    }
}
