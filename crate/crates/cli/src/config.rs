//! Run configuration, read from TOML.
//!
//! Every section and field is optional; missing values fall back to the
//! defaults below. Stage seeds default to values derived from the top-level
//! `seed`, so `--seed` reseeds the whole run unless a section pins its own.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use switchid_core::mhe::{self, MheSettings, NoiseWeights, PriorUpdate, SolverSettings};
use switchid_core::pendulum::{NoiseSpec, PendulumParams, StepSpec};
use switchid_core::sysid::{default_alpha_grid, AlphaSelection, CandidateLibrary, LibraryFlags};
use switchid_core::{gmm, tree};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub pendulum: PendulumParams,
    pub data: DataConfig,
    pub cluster: ClusterConfig,
    pub tree: TreeConfig,
    pub sysid: SysidConfig,
    pub validate: ValidateConfig,
    pub observer: ObserverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: PathBuf::from("out"),
            pendulum: PendulumParams::default(),
            data: DataConfig::default(),
            cluster: ClusterConfig::default(),
            tree: TreeConfig::default(),
            sysid: SysidConfig::default(),
            validate: ValidateConfig::default(),
            observer: ObserverConfig::default(),
        }
    }
}

/// Training and held-out experiments.
///
/// Drop-downs and torque-step runs alternate. Each run starts at rest at
/// `π ± offset` with the offset drawn from `initial_offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: Option<u64>,
    pub dt: f64,
    pub steps: usize,
    pub n_dropdown: usize,
    pub n_torque_steps: usize,
    pub initial_offset: [f64; 2],
    pub torque_amplitude: [f64; 2],
    pub torque_dwell: [f64; 2],
    pub noise_std: [f64; 3],
    /// Experiments of each kind in the held-out set.
    pub holdout_per_kind: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: None,
            dt: 0.005,
            steps: 1250,
            n_dropdown: 50,
            n_torque_steps: 50,
            initial_offset: [0.14, 1.74],
            torque_amplitude: [0.126, 0.59],
            torque_dwell: [0.135, 0.25],
            noise_std: NoiseSpec::DEFAULT_STD,
            holdout_per_kind: 8,
        }
    }
}

impl DataConfig {
    pub fn step_spec(&self) -> StepSpec {
        StepSpec { amplitude: self.torque_amplitude, dwell: self.torque_dwell }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub seed: Option<u64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { seed: None, tol: gmm::DEFAULT_TOL, max_iters: gmm::DEFAULT_MAX_ITERS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub max_depth: usize,
    pub min_samples_leaf: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { max_depth: tree::DEFAULT_MAX_DEPTH, min_samples_leaf: tree::DEFAULT_MIN_SAMPLES_LEAF }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SysidConfig {
    pub library: LibraryFlags,
    /// Relative penalties `α/N` searched by cross-validation.
    pub alpha_grid: Vec<f64>,
    pub folds: usize,
    /// Absolute penalties for `C1` and `C2`; skips cross-validation.
    pub alpha: Option<[f64; 2]>,
    /// Unpenalised least squares on the selected support.
    pub refit: bool,
}

impl Default for SysidConfig {
    fn default() -> Self {
        SysidConfig {
            library: LibraryFlags::default(),
            alpha_grid: default_alpha_grid(),
            folds: 5,
            alpha: None,
            refit: true,
        }
    }
}

impl SysidConfig {
    pub fn selection(&self) -> AlphaSelection {
        match self.alpha {
            Some([a1, a2]) => AlphaSelection::Fixed(a1, a2),
            None => AlphaSelection::CrossValidated { grid: self.alpha_grid.clone(), folds: self.folds },
        }
    }

    pub fn library(&self) -> CandidateLibrary {
        CandidateLibrary::from_flags(&self.library)
    }
}

/// Free-running comparison of the identified model against the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateConfig {
    /// Release angle relative to the hanging position.
    pub initial_offset: f64,
    pub duration: f64,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        ValidateConfig { initial_offset: -1.1, duration: 5.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TruthSource {
    /// The physical simulator.
    #[default]
    Simulator,
    /// The identified model itself.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    pub seed: Option<u64>,
    pub horizon: usize,
    pub q: [f64; 3],
    /// Measurement variance; defaults to the squared angle noise of `[data]`.
    pub r: Option<f64>,
    pub p0: [f64; 3],
    /// Initial guess; defaults to the true initial state plus `x0_error`.
    pub x0_guess: Option<[f64; 3]>,
    pub x0_error: [f64; 3],
    pub initial_offset: f64,
    pub duration: f64,
    pub source: TruthSource,
    pub prior_update: PriorUpdate,
    pub solver: SolverSettings,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            seed: None,
            horizon: mhe::DEFAULT_HORIZON,
            q: mhe::DEFAULT_Q,
            r: None,
            p0: mhe::DEFAULT_P0,
            x0_guess: None,
            x0_error: [0.3, 0.0, 2.0],
            initial_offset: 1.0,
            duration: 6.0,
            source: TruthSource::Simulator,
            prior_update: PriorUpdate::Filtered,
            solver: SolverSettings::default(),
        }
    }
}

/// Seeds of the random stages, resolved against the top-level seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub cluster: u64,
    pub observer: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> CliResult<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            data: self.data.seed.unwrap_or(self.seed),
            cluster: self.cluster.seed.unwrap_or(self.seed.wrapping_add(1)),
            observer: self.observer.seed.unwrap_or(self.seed.wrapping_add(2)),
        }
    }

    pub fn mhe_settings(&self) -> MheSettings {
        let o = &self.observer;
        let r = o.r.unwrap_or(self.data.noise_std[0].powi(2));
        MheSettings {
            horizon: o.horizon,
            weights: NoiseWeights::from_diagonals(o.q, r, o.p0),
            solver: o.solver,
            prior_update: o.prior_update,
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.pendulum.validate()?;
        let d = &self.data;
        if !(d.dt > 0.0 && d.dt.is_finite()) {
            return bad(format!("data.dt must be positive, got {}", d.dt));
        }
        if d.steps < 2 {
            return bad("data.steps must be at least 2".into());
        }
        if d.n_dropdown + d.n_torque_steps == 0 {
            return bad("data needs at least one training experiment".into());
        }
        for (name, r) in [
            ("data.initial_offset", d.initial_offset),
            ("data.torque_amplitude", d.torque_amplitude),
            ("data.torque_dwell", d.torque_dwell),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] >= 0.0 && r[1] >= r[0]) {
                return bad(format!("{name} must be a range [lo, hi] with 0 ≤ lo ≤ hi, got {r:?}"));
            }
        }
        if d.torque_dwell[0] <= 0.0 {
            return bad("data.torque_dwell must be positive".into());
        }
        if d.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("data.noise_std must be non-negative".into());
        }
        if !(self.cluster.tol > 0.0) || self.cluster.max_iters == 0 {
            return bad("cluster.tol must be positive and cluster.max_iters at least 1".into());
        }
        if self.tree.max_depth == 0 || self.tree.min_samples_leaf == 0 {
            return bad("tree.max_depth and tree.min_samples_leaf must be at least 1".into());
        }
        let s = &self.sysid;
        if s.library().is_empty() {
            return bad("sysid.library enables no terms".into());
        }
        match s.alpha {
            Some(a) if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                return bad("sysid.alpha must be non-negative".into());
            }
            None if s.alpha_grid.is_empty() || s.alpha_grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                return bad("sysid.alpha_grid must be a non-empty list of non-negative values".into());
            }
            None if s.folds < 2 => return bad("sysid.folds must be at least 2".into()),
            _ => {}
        }
        if !(self.validate.duration > 0.0) || !self.validate.initial_offset.is_finite() {
            return bad("validate.duration must be positive and validate.initial_offset finite".into());
        }
        let o = &self.observer;
        if !(o.duration > 0.0) || !o.initial_offset.is_finite() {
            return bad("observer.duration must be positive and observer.initial_offset finite".into());
        }
        let n = (o.duration / d.dt).round() as usize;
        if n < o.horizon + 1 {
            return bad(format!("observer.duration covers {n} samples, fewer than horizon + 1"));
        }
        if o.x0_error.iter().chain(o.x0_guess.iter().flatten()).any(|v| !v.is_finite()) {
            return bad("observer initial guess must be finite".into());
        }
        self.mhe_settings().validate()?;
        Ok(())
    }
}
