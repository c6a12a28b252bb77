//! Run configuration: one TOML file with a section per pipeline stage. Every
//! field has a default, unknown keys are rejected, and the parsed form
//! serializes back to an equivalent document.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use polygrain::error::{Error, Result};
use polygrain::fung::FungConstants;
use polygrain::homogenization::{FftConfig, Homogenizer, SamplingConfig};
use polygrain::io::read_text;
use polygrain::microstructure::OdfParams;
use polygrain::phasefield::{PhaseFieldParams, RampConfig};
use polygrain::training::{FoldUnit, TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory all artifacts are written to and read back from.
    pub out_dir: PathBuf,
    pub generation: GenerationConfig,
    pub homogenization: HomogenizationConfig,
    pub material: FungConstants,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub evaluation: EvaluationConfig,
    pub verification: VerificationConfig,
    pub demo: DemoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("artifacts"),
            generation: GenerationConfig::default(),
            homogenization: HomogenizationConfig::default(),
            material: FungConstants::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            evaluation: EvaluationConfig::default(),
            verification: VerificationConfig::default(),
            demo: DemoConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub n_rves: usize,
    pub grid: [usize; 3],
    pub n_grains_min: usize,
    pub n_grains_max: usize,
    pub seed: u64,
    pub odf: OdfParams,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            n_rves: 1,
            grid: [16, 16, 16],
            n_grains_min: 10,
            n_grains_max: 20,
            seed: 0,
            odf: OdfParams { uniform_weight: 1.0, modal: [0.0; 3], half_width: 0.2 },
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rves == 0 {
            return Err(Error::config("generation.n_rves must be at least 1"));
        }
        if self.n_grains_min == 0 || self.n_grains_min > self.n_grains_max {
            return Err(Error::config(format!(
                "generation grain range [{}, {}] is invalid",
                self.n_grains_min, self.n_grains_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Taylor,
    Fft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomogenizationConfig {
    pub scheme: Scheme,
    pub sampling: SamplingConfig,
    pub fft: FftConfig,
}

impl Default for HomogenizationConfig {
    fn default() -> Self {
        HomogenizationConfig {
            scheme: Scheme::Taylor,
            sampling: SamplingConfig::default(),
            fft: FftConfig::default(),
        }
    }
}

impl HomogenizationConfig {
    pub fn homogenizer(&self) -> Homogenizer {
        match self.scheme {
            Scheme::Taylor => Homogenizer::Taylor,
            Scheme::Fft => Homogenizer::Fft(self.fft),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    /// RVE whose graph feeds the trained model's response surface.
    pub surface_rve: u32,
    pub surface_grid: usize,
    pub surface_offset: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { variant: Variant::H1Reg, surface_rve: 0, surface_grid: 30, surface_offset: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub variants: Vec<Variant>,
    pub k_folds: usize,
    pub fold_unit: FoldUnit,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            variants: Variant::ALL.to_vec(),
            k_folds: 5,
            fold_unit: FoldUnit::Rve,
        }
    }
}

impl EvaluationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("evaluation.variants must name at least one variant"));
        }
        if self.k_folds < 2 {
            return Err(Error::config("evaluation.k_folds must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    /// Pairs drawn for the objectivity and convexity sweeps.
    pub n_pairs: usize,
    /// Probes for the stress/finite-difference cross check.
    pub n_probes: usize,
    /// Random rotations added to the fixed z-axis set in the anisotropy check.
    pub n_random_rotations: usize,
    /// Uniaxial stretch of the anisotropy probe state.
    pub probe_stretch: f64,
    pub seed: u64,
    /// RVE whose graph the checks run against (hybrid models).
    pub rve: u32,
    /// Checks whose failure makes the run exit nonzero; the rest are
    /// reported only.
    pub mandatory: Vec<String>,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            n_pairs: 1000,
            n_probes: 50,
            n_random_rotations: 5,
            probe_stretch: 0.1,
            seed: 0,
            rve: 0,
            mandatory: vec!["objectivity".into(), "gradient_check".into()],
        }
    }
}

pub const CHECK_NAMES: [&str; 4] = ["objectivity", "anisotropy", "convexity", "gradient_check"];

impl VerificationConfig {
    pub fn validate(&self) -> Result<()> {
        for name in &self.mandatory {
            if !CHECK_NAMES.contains(&name.as_str()) {
                return Err(Error::config(format!(
                    "verification.mandatory names unknown check {name:?}; known: {}",
                    CHECK_NAMES.join(", ")
                )));
            }
        }
        if self.n_pairs == 0 || self.n_probes == 0 {
            return Err(Error::config("verification case counts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct DemoConfig {
    /// RVE whose graph drives the material point (hybrid models).
    pub rve: u32,
    pub ramp: RampConfig,
    pub phasefield: PhaseFieldParams,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = read_text(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        self.material.validate()?;
        self.training.validate()?;
        self.evaluation.validate()?;
        self.verification.validate()?;
        self.demo.ramp.validate()?;
        self.demo.phasefield.validate()?;
        Ok(())
    }

    /// Canonical serialized form; field order is fixed by the struct, so two
    /// equal configs produce identical text.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// All seeds the configuration pins, keyed for the metadata echo.
    pub fn seeds(&self) -> BTreeMap<&'static str, u64> {
        BTreeMap::from([
            ("generation", self.generation.seed),
            ("sampling", self.homogenization.sampling.master_seed),
            ("training", self.training.seed),
            ("verification", self.verification.seed),
        ])
    }
}
