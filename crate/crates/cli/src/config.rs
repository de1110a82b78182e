//! Experiment configuration, read from TOML.
//!
//! Every table and key is optional; missing values take the defaults below.
//!
//! ```toml
//! seed = 42
//! out = "results"
//! workers = 0                 # 0 uses all available threads
//! horizon = 20
//! n_masses = [3, 4, 5, 6, 7]  # scaling sweep
//! data_sizes = [0, 150]       # D; each D > 0 needs D / 15 perturbed starts
//! modes = ["zero_order", "naive"]
//! n_x0 = 10                   # perturbed starts for gen-data
//! probability = 0.95          # of every wall constraint
//! tightening = "gaussian"     # or "chebyshev"
//! plant_noise = 0.0           # std on the B channel of the plant
//!
//! [chain]                     # physical parameters, SI units
//! n_mass = 5
//! mass = 0.033
//! stiffness = 30.3
//! rest_length = 0.033
//! alpha_lat = -0.1
//! beta1 = 2.0
//! beta2 = 3.0
//! gravity = [0.0, 0.0, -9.81]
//! ts = 0.2
//! y_wall = -0.05
//!
//! [cost]
//! q_pos = 1.0
//! q_vel = 0.1
//! r = 0.1
//! u_max = 1.0
//! w_var = 1e-6
//!
//! [gp]
//! lengthscale = 0.3
//! signal_variance = 1e-3
//! noise_variance = 1e-5
//!
//! [closed_loop]
//! steps = 60
//!
//! [data]
//! steps_per_start = 15
//! perturb_std = 0.01
//!
//! [scaling]
//! horizon = 10
//! warmup = 3
//! iterations = 20
//! budget_seconds = 60.0
//!
//! [profile]
//! n_mass = 7
//! warmup = 2
//! iterations = 10
//! workers = [1]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use zogp::benchmark::{ChainGpOptions, ChainOcpOptions};
use zogp::dynamics::ChainConfig;
use zogp::sqp::SolverMode;
use zogp::uncertainty::TighteningMode;

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub n_mass: usize,
    pub mass: f64,
    pub stiffness: f64,
    pub rest_length: f64,
    pub alpha_lat: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub gravity: [f64; 3],
    pub ts: f64,
    pub y_wall: f64,
}

impl Default for ChainSection {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            n_mass: c.n_mass,
            mass: c.mass,
            stiffness: c.stiffness,
            rest_length: c.rest_length,
            alpha_lat: c.alpha_lat,
            beta1: c.beta1,
            beta2: c.beta2,
            gravity: c.gravity,
            ts: c.ts,
            y_wall: c.y_wall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub q_pos: f64,
    pub q_vel: f64,
    pub r: f64,
    pub u_max: f64,
    pub w_var: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        let o = ChainOcpOptions::default();
        Self {
            q_pos: o.q_pos,
            q_vel: o.q_vel,
            r: o.r,
            u_max: o.u_max,
            w_var: o.w_var,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSection {
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl Default for GpSection {
    fn default() -> Self {
        let g = ChainGpOptions::default();
        Self {
            lengthscale: g.lengthscale,
            signal_variance: g.signal_variance,
            noise_variance: g.noise_variance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopSection {
    pub steps: usize,
}

impl Default for ClosedLoopSection {
    fn default() -> Self {
        Self { steps: 60 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub steps_per_start: usize,
    pub perturb_std: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            steps_per_start: 15,
            perturb_std: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    pub horizon: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub budget_seconds: f64,
}

impl Default for ScalingSection {
    fn default() -> Self {
        Self {
            horizon: 10,
            warmup: 3,
            iterations: 20,
            budget_seconds: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub n_mass: usize,
    pub warmup: usize,
    pub iterations: usize,
    pub workers: Vec<usize>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            n_mass: 7,
            warmup: 2,
            iterations: 10,
            workers: vec![1],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub workers: usize,
    pub horizon: usize,
    pub n_masses: Vec<usize>,
    pub data_sizes: Vec<usize>,
    pub modes: Vec<String>,
    pub n_x0: usize,
    pub probability: f64,
    pub tightening: String,
    pub plant_noise: f64,
    pub chain: ChainSection,
    pub cost: CostSection,
    pub gp: GpSection,
    pub closed_loop: ClosedLoopSection,
    pub data: DataSection,
    pub scaling: ScalingSection,
    pub profile: ProfileSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out: PathBuf::from("results"),
            workers: 0,
            horizon: 20,
            n_masses: (3..=7).collect(),
            data_sizes: vec![0, 150],
            modes: vec!["zero_order".into(), "naive".into()],
            n_x0: 10,
            probability: 0.95,
            tightening: "gaussian".into(),
            plant_noise: 0.0,
            chain: ChainSection::default(),
            cost: CostSection::default(),
            gp: GpSection::default(),
            closed_loop: ClosedLoopSection::default(),
            data: DataSection::default(),
            scaling: ScalingSection::default(),
            profile: ProfileSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.n_masses.is_empty() || self.data_sizes.is_empty() || self.modes.is_empty() {
            return bad("n_masses, data_sizes and modes must be non-empty".into());
        }
        if let Some(&n) = self.n_masses.iter().chain([&self.chain.n_mass, &self.profile.n_mass]).find(|&&n| n < 3) {
            return bad(format!("a chain needs at least 3 masses, got {n}"));
        }
        if let Some(d) = self.data_sizes.iter().find(|&&d| d % self.data.steps_per_start.max(1) != 0) {
            return bad(format!(
                "data size {d} is not a multiple of steps_per_start = {}",
                self.data.steps_per_start
            ));
        }
        self.solver_modes()?;
        self.tightening_mode()?;
        if !(self.probability > 0.0 && self.probability < 1.0) {
            return bad(format!("probability must lie in (0, 1), got {}", self.probability));
        }
        if self.horizon == 0 || self.scaling.horizon == 0 || self.data.steps_per_start == 0 {
            return bad("horizons and steps_per_start must be positive".into());
        }
        if self.scaling.iterations == 0 || self.profile.iterations == 0 || self.profile.workers.is_empty() {
            return bad("timing runs need at least one iteration and one worker count".into());
        }
        if !(self.plant_noise >= 0.0 && self.data.perturb_std >= 0.0 && self.cost.w_var >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for (name, v) in [
            ("gp.lengthscale", self.gp.lengthscale),
            ("gp.signal_variance", self.gp.signal_variance),
            ("cost.u_max", self.cost.u_max),
            ("scaling.budget_seconds", self.scaling.budget_seconds),
        ] {
            if v.is_nan() || v <= 0.0 {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        self.chain_config(self.chain.n_mass).validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn solver_modes(&self) -> Result<Vec<SolverMode>, CliError> {
        self.modes
            .iter()
            .map(|m| m.parse().map_err(|_| CliError::Config(format!("unknown solver mode '{m}'"))))
            .collect()
    }

    pub fn tightening_mode(&self) -> Result<TighteningMode, CliError> {
        self.tightening
            .parse()
            .map_err(|_| CliError::Config(format!("unknown tightening '{}'", self.tightening)))
    }

    pub fn chain_config(&self, n_mass: usize) -> ChainConfig {
        let c = &self.chain;
        ChainConfig {
            n_mass,
            mass: c.mass,
            stiffness: c.stiffness,
            rest_length: c.rest_length,
            alpha_lat: c.alpha_lat,
            beta1: c.beta1,
            beta2: c.beta2,
            gravity: c.gravity,
            ts: c.ts,
            y_wall: c.y_wall,
            ..ChainConfig::default()
        }
    }

    pub fn ocp_options(&self, horizon: usize) -> ChainOcpOptions {
        ChainOcpOptions {
            horizon,
            prob: self.probability,
            tightening: self.tightening_mode().unwrap_or(TighteningMode::Gaussian),
            q_pos: self.cost.q_pos,
            q_vel: self.cost.q_vel,
            r: self.cost.r,
            u_max: self.cost.u_max,
            w_var: self.cost.w_var,
            ..ChainOcpOptions::default()
        }
    }

    pub fn gp_options(&self) -> ChainGpOptions {
        ChainGpOptions {
            lengthscale: self.gp.lengthscale,
            signal_variance: self.gp.signal_variance,
            noise_variance: self.gp.noise_variance,
        }
    }

    /// SHA-256 of the canonical TOML form, defaults included.
    /// SHA-256 of the resolved config; the output directory is left out.
    pub fn digest(&self) -> String {
        let cfg = Self {
            out: PathBuf::new(),
            ..self.clone()
        };
        let text = toml::to_string(&cfg).unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
