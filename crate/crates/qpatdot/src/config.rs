//! Experiment configuration: presets, TOML loading, and validation.
//!
//! Configs resolve in three layers: built-in defaults (the full-scale setup:
//! 81 nodes per side, 36 sources, five modulation frequencies), an optional
//! named preset (`small`, `medium`, `paper`) that rescales the experiment to
//! desk size, and explicit keys from the TOML file which win over both.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{ObjectiveConfig, PatVariant};
use crate::optimize::OptimizerSettings;

/// Full-scale modulation-frequency list (`ω/c` values).
pub const PAPER_FREQUENCIES: [f64; 5] = [0.0, 2e-7, 4e-7, 5e-7, 7e-7];

/// Which truth coefficients drive the twin experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phantom {
    /// Smooth rotated-Gaussian superpositions.
    GaussianMixture,
    /// Piecewise-constant inclusions on positive backgrounds.
    Piecewise,
    /// Point Gaussians for the efficiency-sensitivity experiment.
    PointGaussians,
    /// Gaussian-mixture absorption/efficiency with a constant diffusion.
    ConstantGamma,
}

impl Phantom {
    pub fn label(&self) -> &'static str {
        match self {
            Phantom::GaussianMixture => "gaussian-mixture",
            Phantom::Piecewise => "piecewise",
            Phantom::PointGaussians => "point-gaussians",
            Phantom::ConstantGamma => "constant-gamma",
        }
    }
}

/// Initial-guess construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum InitChoice {
    /// Truth blurred with a Gaussian kernel of `std` grid cells (default 5).
    SmoothedTruth { std: f64 },
    /// Flat backgrounds.
    Constant {
        sigma: f64,
        gamma: f64,
        grueneisen: f64,
    },
}

/// Desk-scale presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Small,
    Medium,
    Paper,
}

/// Analytic boundary-recovery options.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Config {
    /// Default source pair (indices into the source list).
    pub pair: [usize; 2],
    /// Pairs drawn from the first `candidates` sources serve as per-edge
    /// fallbacks when the default pair is unusable.
    pub candidates: usize,
    /// Denominator magnitude threshold, relative to the pair's maximum over
    /// the boundary.
    pub denom_rel_threshold: f64,
    /// A pair is not used at boundary points closer than this (arc length)
    /// to either of its own source centers.
    pub min_source_distance: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            pair: [0, 1],
            candidates: 6,
            denom_rel_threshold: 1e-6,
            min_source_distance: 0.5,
        }
    }
}

/// Optimizer knobs in config form (feeds [`OptimizerSettings`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub sufficient_decrease: f64,
    pub curvature: f64,
    pub sigma_floor: f64,
    pub gamma_floor: f64,
    pub grueneisen_floor: f64,
    pub dense_limit: usize,
    pub memory: usize,
    /// Initial inverse-Hessian diagonal per block.
    pub sigma_scaling: f64,
    pub gamma_scaling: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-9,
            max_iter: 200,
            sufficient_decrease: 1e-4,
            curvature: 0.9,
            sigma_floor: 1e-4,
            gamma_floor: 1e-4,
            grueneisen_floor: 1e-4,
            dense_limit: 4000,
            memory: 20,
            sigma_scaling: 1.0,
            gamma_scaling: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn settings(&self) -> OptimizerSettings {
        OptimizerSettings {
            grad_tol: self.grad_tol,
            max_iter: self.max_iter,
            sufficient_decrease: self.sufficient_decrease,
            curvature: self.curvature,
            floors: Vec::new(),
            dense_limit: self.dense_limit,
            memory: self.memory,
            initial_scaling: Vec::new(),
        }
    }
}

/// Fully resolved experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub sources: usize,
    pub frequencies: Vec<f64>,
    pub kappa: f64,
    pub noise_level: f64,
    pub noise_seed: u64,
    pub phantom: Phantom,
    /// Constant diffusion value used by [`Phantom::ConstantGamma`].
    pub constant_gamma_value: f64,
    pub init: InitChoice,
    pub objective: ObjectiveConfig,
    pub optimizer: OptimizerConfig,
    pub stage1: Stage1Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 81,
            sources: 36,
            frequencies: PAPER_FREQUENCIES.to_vec(),
            kappa: 0.2,
            noise_level: 0.0,
            noise_seed: 7,
            phantom: Phantom::GaussianMixture,
            constant_gamma_value: 0.03,
            init: InitChoice::SmoothedTruth { std: 5.0 },
            objective: ObjectiveConfig::default(),
            optimizer: OptimizerConfig::default(),
            stage1: Stage1Config::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale presets. The initialization blur is measured in grid
    /// cells, so presets rescale it to keep the physical smoothing width of
    /// the full-scale setup (5 cells at 81 nodes per side ≙ 0.125 length
    /// units).
    pub fn preset(p: Preset) -> Self {
        let mut c = Self::default();
        match p {
            Preset::Small => {
                c.n = 17;
                c.sources = 4;
                c.frequencies = PAPER_FREQUENCIES[..2].to_vec();
                c.init = InitChoice::SmoothedTruth { std: 1.0 };
            }
            Preset::Medium => {
                c.n = 41;
                c.sources = 8;
                c.frequencies = PAPER_FREQUENCIES[..3].to_vec();
                c.init = InitChoice::SmoothedTruth { std: 2.5 };
            }
            Preset::Paper => {}
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 3 {
            return Err(Error::Config(
                "mesh.n must be at least 3 (boundary recovery needs an interior layer)".into(),
            ));
        }
        if self.sources < 2 {
            return Err(Error::Config(
                "experiment.sources must be at least 2 (the boundary recovery needs a pair)"
                    .into(),
            ));
        }
        if !self.frequencies.contains(&0.0) {
            return Err(Error::Config(
                "experiment.frequencies must contain 0 (time-integrated data)".into(),
            ));
        }
        if self.kappa < 0.0 {
            return Err(Error::Config("experiment.kappa must be nonnegative".into()));
        }
        if self.noise_level < 0.0 {
            return Err(Error::Config("experiment.noise_level must be nonnegative".into()));
        }
        if let InitChoice::SmoothedTruth { std } = self.init {
            if !(std > 0.0) {
                return Err(Error::Config("init.std must be positive".into()));
            }
        }
        if self.stage1.pair[0] == self.stage1.pair[1]
            || self.stage1.pair.iter().any(|&p| p >= self.sources)
        {
            return Err(Error::Config(format!(
                "stage1.pair {:?} must name two distinct sources below {}",
                self.stage1.pair, self.sources
            )));
        }
        Ok(())
    }
}

/// Raw TOML shape: everything optional, layered over a preset.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    preset: Option<Preset>,
    mesh: Option<RawMesh>,
    experiment: Option<RawExperiment>,
    init: Option<InitChoice>,
    objective: Option<RawObjective>,
    optimizer: Option<RawOptimizer>,
    stage1: Option<RawStage1>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMesh {
    n: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    phantom: Option<Phantom>,
    constant_gamma_value: Option<f64>,
    kappa: Option<f64>,
    noise_level: Option<f64>,
    noise_seed: Option<u64>,
    sources: Option<usize>,
    frequencies: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawObjective {
    beta_sigma: Option<f64>,
    beta_gamma: Option<f64>,
    pat_variant: Option<PatVariant>,
    include_dot: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    grad_tol: Option<f64>,
    max_iter: Option<usize>,
    sufficient_decrease: Option<f64>,
    curvature: Option<f64>,
    sigma_floor: Option<f64>,
    gamma_floor: Option<f64>,
    grueneisen_floor: Option<f64>,
    dense_limit: Option<usize>,
    memory: Option<usize>,
    sigma_scaling: Option<f64>,
    gamma_scaling: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStage1 {
    pair: Option<[usize; 2]>,
    candidates: Option<usize>,
    denom_rel_threshold: Option<f64>,
    min_source_distance: Option<f64>,
}

macro_rules! take {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

/// Parse a TOML string into a resolved, validated config.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| Error::Config(format!("{origin}: {e}")))?;
    let mut c = match raw.preset {
        Some(p) => ExperimentConfig::preset(p),
        None => ExperimentConfig::default(),
    };
    if let Some(m) = raw.mesh {
        take!(c.n, m.n);
    }
    if let Some(e) = raw.experiment {
        take!(c.phantom, e.phantom);
        take!(c.constant_gamma_value, e.constant_gamma_value);
        take!(c.kappa, e.kappa);
        take!(c.noise_level, e.noise_level);
        take!(c.noise_seed, e.noise_seed);
        take!(c.sources, e.sources);
        take!(c.frequencies, e.frequencies);
    }
    if let Some(i) = raw.init {
        c.init = i;
    }
    if let Some(o) = raw.objective {
        take!(c.objective.beta_sigma, o.beta_sigma);
        take!(c.objective.beta_gamma, o.beta_gamma);
        take!(c.objective.pat_variant, o.pat_variant);
        take!(c.objective.include_dot, o.include_dot);
    }
    if let Some(o) = raw.optimizer {
        take!(c.optimizer.grad_tol, o.grad_tol);
        take!(c.optimizer.max_iter, o.max_iter);
        take!(c.optimizer.sufficient_decrease, o.sufficient_decrease);
        take!(c.optimizer.curvature, o.curvature);
        take!(c.optimizer.sigma_floor, o.sigma_floor);
        take!(c.optimizer.gamma_floor, o.gamma_floor);
        take!(c.optimizer.grueneisen_floor, o.grueneisen_floor);
        take!(c.optimizer.dense_limit, o.dense_limit);
        take!(c.optimizer.memory, o.memory);
        take!(c.optimizer.sigma_scaling, o.sigma_scaling);
        take!(c.optimizer.gamma_scaling, o.gamma_scaling);
    }
    if let Some(s) = raw.stage1 {
        take!(c.stage1.pair, s.pair);
        take!(c.stage1.candidates, s.candidates);
        take!(c.stage1.denom_rel_threshold, s.denom_rel_threshold);
        take!(c.stage1.min_source_distance, s.min_source_distance);
    }
    c.validate()?;
    Ok(c)
}

/// Load a config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text, &path.display().to_string())
}
