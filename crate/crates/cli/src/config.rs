//! Run configuration: one TOML file with every section optional, overlaid by
//! command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shapeprior::anomaly::{DEFAULT_QUANTILE, DEFAULT_SHRINKAGE};
use shapeprior::infer::InferConfig;
use shapeprior::synth::PopulationSpec;
use shapeprior::train::TrainConfig;

use crate::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LdaShrinkage {
    Fixed(f64),
    /// Leave-one-subject-out selection over a fixed grid.
    Auto(AutoKeyword),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Percentile of held-out normal Dice scores used as the threshold.
    pub quantile: f64,
    /// Within-class scatter shrinkage, relative to its mean eigenvalue, or
    /// `"auto"` to select it on the training latents.
    pub lda_shrinkage: LdaShrinkage,
    /// Emit `lda.svg` next to `lda.csv`.
    pub svg: bool,
    /// Directions searched when measuring linear separability in the plane.
    pub separation_directions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            quantile: DEFAULT_QUANTILE,
            lda_shrinkage: LdaShrinkage::Fixed(DEFAULT_SHRINKAGE),
            svg: true,
            separation_directions: 720,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct XvalConfig {
    pub k: usize,
}

impl Default for XvalConfig {
    fn default() -> Self {
        XvalConfig { k: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds population synthesis, fold assignment, training and inference.
    pub seed: u64,
    /// Run folds sequentially on one thread.
    pub single_thread: bool,
    pub population: PopulationSpec,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
    pub xval: XvalConfig,
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub grid: Option<usize>,
    pub epochs: Option<usize>,
    pub infer_epochs: Option<usize>,
    pub k: Option<usize>,
    pub single_thread: bool,
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(d) = o.grid {
            self.population.dims = [d; 3];
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(e) = o.infer_epochs {
            self.infer.epochs = e;
        }
        if let Some(k) = o.k {
            self.xval.k = k;
        }
        self.single_thread |= o.single_thread;
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |e: shapeprior::Error| CliError::Usage(format!("invalid config: {e}"));
        self.population_spec().validate().map_err(usage)?;
        self.train_config().validate().map_err(usage)?;
        self.infer_config().validate().map_err(usage)?;
        if !(self.eval.quantile > 0.0 && self.eval.quantile < 100.0) {
            return Err(CliError::Usage(format!(
                "eval.quantile must be in (0, 100), got {}",
                self.eval.quantile
            )));
        }
        if let LdaShrinkage::Fixed(s) = self.eval.lda_shrinkage {
            if !(s > 0.0 && s.is_finite()) {
                return Err(CliError::Usage("eval.lda_shrinkage must be > 0 or \"auto\"".into()));
            }
        }
        if self.eval.separation_directions == 0 {
            return Err(CliError::Usage("eval.separation_directions must be >= 1".into()));
        }
        if self.xval.k < 2 {
            return Err(CliError::Usage(format!("k must be >= 2, got {}", self.xval.k)));
        }
        Ok(())
    }

    pub fn population_spec(&self) -> PopulationSpec {
        PopulationSpec {
            seed: self.seed,
            ..self.population.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn infer_config(&self) -> InferConfig {
        InferConfig {
            seed: self.seed,
            ..self.infer.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lda_shrinkage_is_a_number_or_auto() {
        let auto = RunConfig::parse("[eval]\nlda_shrinkage = \"auto\"\n").unwrap();
        assert_eq!(auto.eval.lda_shrinkage, LdaShrinkage::Auto(AutoKeyword::Auto));
        let fixed = RunConfig::parse("[eval]\nlda_shrinkage = 0.5\n").unwrap();
        assert_eq!(fixed.eval.lda_shrinkage, LdaShrinkage::Fixed(0.5));
        assert!(RunConfig::parse("[eval]\nlda_shrinkage = \"always\"\n").is_err());
        let negative = RunConfig::parse("[eval]\nlda_shrinkage = -1.0\n").unwrap();
        assert_eq!(negative.validate().unwrap_err().exit_code(), 2);
        let text = toml::to_string(&auto).unwrap();
        assert_eq!(RunConfig::parse(&text).unwrap(), auto);
    }

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_overrides() {
        let cfg = RunConfig::parse(
            "seed = 4\n[train]\nepochs = 7\nhidden = 16\n[population]\nn_normal = 6\nradius_x = [0.4, 0.5]\n",
        );
        // radius_x lives under [population.normal], so the flat key is rejected.
        assert!(cfg.is_err());
        let mut cfg = RunConfig::parse(
            "seed = 4\n[train]\nepochs = 7\nhidden = 16\n[population]\nn_normal = 6\n[population.normal]\nradius_x = [0.4, 0.5]\n",
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.population.normal.radius_x.hi, 0.5);
        cfg.apply(&Overrides {
            epochs: Some(3),
            grid: Some(20),
            ..Overrides::default()
        });
        assert_eq!(cfg.train_config().epochs, 3);
        assert_eq!(cfg.population_spec().dims, [20; 3]);
        assert_eq!(cfg.train_config().seed, 4);
    }

    #[test]
    fn validation_flags_bad_values() {
        let mut cfg = RunConfig::default();
        cfg.population.normal.taper = [0.5, 0.2].into();
        assert!(matches!(cfg.validate(), Err(CliError::Usage(_))));
        let cfg = RunConfig {
            xval: XvalConfig { k: 1 },
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
