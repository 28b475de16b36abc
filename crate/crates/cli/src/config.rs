//! The merged run configuration: one TOML file, overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stenosis_core::model::ModelConfig;
use stenosis_core::phantom::{DatasetRecipe, PhantomConfig};
use stenosis_core::sampling::SamplingConfig;
use stenosis_core::training::TrainConfig;

use crate::CliError;

pub const EFFECTIVE_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSection {
    /// Used when `images` is empty.
    pub recipe: DatasetRecipe,
    /// Explicit phantoms; take precedence over the recipe.
    pub images: Vec<PhantomConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; copied into every sub-config that draws randomness.
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub phantom: PhantomSection,
    pub sampling: SamplingConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message())))
    }

    /// Applies the root seed and validates every section.
    pub fn finalize(&mut self, seed: Option<u64>) -> Result<(), CliError> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(s) = self.seed {
            self.phantom.recipe.seed = s;
            self.sampling.seed = s;
            self.training.seed = s;
        }
        let section = |name: &'static str| move |e: stenosis_core::Error| CliError::Config(format!("{name}: {e}"));
        self.phantom.recipe.validate().map_err(section("phantom.recipe"))?;
        for (i, image) in self.phantom.images.iter().enumerate() {
            image
                .validate()
                .map_err(|e| CliError::Config(format!("phantom.images[{i}]: {e}")))?;
        }
        self.sampling.validate().map_err(section("sampling"))?;
        self.model.validate().map_err(section("model"))?;
        self.training.validate().map_err(section("training"))?;
        Ok(())
    }

    pub fn phantom_configs(&self) -> Result<Vec<PhantomConfig>, CliError> {
        if self.phantom.images.is_empty() {
            self.phantom
                .recipe
                .configs()
                .map_err(|e| CliError::Config(format!("phantom.recipe: {e}")))
        } else {
            Ok(self.phantom.images.clone())
        }
    }

    /// The output directory from the flag or the file.
    pub fn output_dir(&self, flag: Option<&Path>) -> Result<PathBuf, CliError> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output.clone())
            .ok_or_else(|| CliError::Config("output: pass --out or set `output` in the config".into()))
    }

    /// Writes the effective configuration next to the outputs.
    pub fn write_effective(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("cannot serialize the effective config: {e}")))?;
        stenosis_core::container::write_atomic(&dir.join(EFFECTIVE_CONFIG_FILE), text.as_bytes())?;
        Ok(())
    }
}
