//! Run configuration: one TOML file per run.
//!
//! ```toml
//! experiment = "slab_ladder"
//! output_dir = "out/slab"
//!
//! [environment]
//! dimension = 2
//! # ...
//!
//! [integrator]
//! step = 0.01
//! boundary_correction = "bridge_test"
//! max_time = 1000.0
//!
//! [parameters]
//! ladder = [2.0, 4.0, 8.0]
//! n = 10000
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvironmentSpec;
use crate::error::{FieldError, Result};
use crate::kalikow::KalikowConfig;
use crate::regen::{CouplingConfig, ScanConfig};
use crate::sde::IntegratorConfig;
use crate::vector::Vector;
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    SlabLadder,
    Regeneration,
    BallisticReport,
    Kalikow,
    ExitIdentity,
    Criterion,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::SlabLadder,
        ExperimentKind::Regeneration,
        ExperimentKind::BallisticReport,
        ExperimentKind::Kalikow,
        ExperimentKind::ExitIdentity,
        ExperimentKind::Criterion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SlabLadder => "slab_ladder",
            ExperimentKind::Regeneration => "regeneration",
            ExperimentKind::BallisticReport => "ballistic_report",
            ExperimentKind::Kalikow => "kalikow",
            ExperimentKind::ExitIdentity => "exit_identity",
            ExperimentKind::Criterion => "criterion",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentKind::SlabLadder => "annealed slab exit probabilities over an L ladder and (T)_gamma fits",
            ExperimentKind::Regeneration => "regeneration scans of coupled trajectories and renewal tests",
            ExperimentKind::BallisticReport => "velocity, covariance and tau_1 tail statistics",
            ExperimentKind::Kalikow => "Green functions, auxiliary drift and condition (K) over a domain family",
            ExperimentKind::ExitIdentity => "annealed vs auxiliary-diffusion exit laws from a ball",
            ExperimentKind::Criterion => "drift-sign criterion with an empirical c_e scan",
        }
    }

    /// Parameters without defaults that the experiment needs.
    fn required(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::SlabLadder => &["ladder", "n"],
            ExperimentKind::Regeneration => &["n_traj", "horizon"],
            ExperimentKind::BallisticReport => &["n_traj", "horizon", "long_paths", "long_duration"],
            ExperimentKind::Kalikow => &["n_env", "n_traj"],
            ExperimentKind::ExitIdentity => &["n_env", "n_traj", "exits"],
            ExperimentKind::Criterion => &["n_env", "n_traj", "tilts"],
        }
    }

    fn needs_coupling(self) -> bool {
        matches!(self, ExperimentKind::Regeneration | ExperimentKind::BallisticReport)
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Experiment-specific settings; which ones are required depends on the
/// experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    /// Direction; defaults to `coupling.l`.
    pub l: Option<Vector>,
    pub ladder: Option<Vec<f64>>,
    pub gammas: Option<Vec<f64>>,
    pub depth_ratio: Option<f64>,
    pub n: Option<u64>,
    pub cone_half_angle: Option<f64>,
    pub n_dirs: Option<usize>,
    pub n_traj: Option<usize>,
    pub n_env: Option<usize>,
    pub horizon: Option<u64>,
    pub confirm_window: Option<u64>,
    pub permutations: Option<usize>,
    pub long_paths: Option<usize>,
    pub long_duration: Option<u64>,
    pub cell_fraction: Option<f64>,
    pub scales: Option<Vec<f64>>,
    pub bootstrap: Option<usize>,
    /// Exit samples per law.
    pub exits: Option<usize>,
    /// Domain radius in units of `R` for the exit-law comparison.
    pub radius_ranges: Option<f64>,
    /// Base-drift scale factors scanned for `ĉ_e`.
    pub tilts: Option<Vec<f64>>,
    /// Environments for the sign-split moments.
    pub n_env_moments: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub workers: Option<usize>,
    pub environment: EnvironmentSpec,
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub coupling: Option<CouplingConfig>,
    #[serde(default)]
    pub parameters: Parameters,
}

/// A parsed configuration together with its verbatim text.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub text: String,
    pub path: Option<PathBuf>,
}

impl LoadedConfig {
    pub fn hash(&self) -> String {
        config_hash(&self.text)
    }
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
}

pub fn load(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path)?;
    let config = parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(LoadedConfig {
        config,
        text,
        path: Some(path.to_path_buf()),
    })
}

impl ExperimentConfig {
    /// Every failing field, across all sections. Runs no simulation.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors: Vec<FieldError> = self
            .environment
            .validate()
            .into_iter()
            .map(|e| FieldError::new(prefixed("environment", &e.field), e.reason))
            .collect();
        errors.extend(self.integrator.validate());
        match (&self.coupling, self.experiment.needs_coupling()) {
            (Some(c), _) => {
                errors.extend(c.validate());
                if c.l.dim() != self.environment.dimension {
                    errors.push(FieldError::new("coupling.l", "dimension differs from environment.dimension"));
                }
            }
            (None, true) => errors.push(FieldError::new("coupling", "section required for this experiment")),
            (None, false) => {}
        }
        if self.workers == Some(0) {
            errors.push(FieldError::new("workers", "must be positive"));
        }
        errors.extend(self.validate_parameters());
        errors
    }

    fn validate_parameters(&self) -> Vec<FieldError> {
        let p = &self.parameters;
        let mut errors = Vec::new();
        let present = |name: &str| -> bool {
            match name {
                "ladder" => p.ladder.is_some(),
                "n" => p.n.is_some(),
                "n_traj" => p.n_traj.is_some(),
                "n_env" => p.n_env.is_some(),
                "horizon" => p.horizon.is_some(),
                "long_paths" => p.long_paths.is_some(),
                "long_duration" => p.long_duration.is_some(),
                "exits" => p.exits.is_some(),
                "tilts" => p.tilts.is_some(),
                _ => true,
            }
        };
        for name in self.experiment.required() {
            if !present(name) {
                errors.push(FieldError::new(format!("parameters.{name}"), "required for this experiment"));
            }
        }
        match self.direction() {
            Some(l) if !l.is_unit(1e-12) || l.dim() != self.environment.dimension => {
                errors.push(FieldError::new("parameters.l", "must be a unit vector of the environment dimension"));
            }
            None => errors.push(FieldError::new("parameters.l", "set parameters.l or coupling.l")),
            _ => {}
        }
        let positive_counts = [
            ("n", p.n.map(|v| v as usize)),
            ("n_traj", p.n_traj),
            ("n_env", p.n_env),
            ("horizon", p.horizon.map(|v| v as usize)),
            ("long_paths", p.long_paths),
            ("long_duration", p.long_duration.map(|v| v as usize)),
            ("exits", p.exits),
            ("permutations", p.permutations),
            ("n_env_moments", p.n_env_moments),
        ];
        for (name, v) in positive_counts {
            if v == Some(0) {
                errors.push(FieldError::new(format!("parameters.{name}"), "must be positive"));
            }
        }
        if self.experiment == ExperimentKind::SlabLadder && p.n.is_some_and(|n| n < 100) {
            errors.push(FieldError::new("parameters.n", "must be at least 100"));
        }
        if let Some(ladder) = &p.ladder {
            if ladder.is_empty() || ladder.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
                errors.push(FieldError::new("parameters.ladder", "needs positive finite widths"));
            }
        }
        if let Some(gammas) = &p.gammas {
            if gammas.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
                errors.push(FieldError::new("parameters.gammas", "must lie in (0, 1]"));
            }
        }
        if p.depth_ratio.is_some_and(|b| !(b > 0.0)) {
            errors.push(FieldError::new("parameters.depth_ratio", "must be > 0"));
        }
        if p.n_env_moments.is_some_and(|n| n < 2) {
            errors.push(FieldError::new("parameters.n_env_moments", "need at least 2 environments"));
        }
        if p.tilts.as_ref().is_some_and(|t| t.is_empty() || t.iter().any(|&f| !(f > 0.0))) {
            errors.push(FieldError::new("parameters.tilts", "need positive scale factors"));
        }
        if p.radius_ranges.is_some_and(|r| !(r > 0.0)) {
            errors.push(FieldError::new("parameters.radius_ranges", "must be > 0"));
        }
        if matches!(self.experiment, ExperimentKind::Kalikow | ExperimentKind::ExitIdentity | ExperimentKind::Criterion) {
            if let (Some(n_env), Some(n_traj)) = (p.n_env, p.n_traj) {
                if n_env == 1 && n_traj < 2 {
                    errors.push(FieldError::new("parameters.n_traj", "a single environment needs at least 2 trajectories"));
                }
            }
            let k = self.kalikow();
            errors.extend(k.validate());
        }
        errors
    }

    pub fn validated(&self) -> Result<()> {
        let errors = self.validate();
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn spec(&self) -> Arc<EnvironmentSpec> {
        Arc::new(self.environment.clone())
    }

    pub fn direction(&self) -> Option<Vector> {
        self.parameters.l.or_else(|| self.coupling.as_ref().map(|c| c.l))
    }

    pub fn scan(&self) -> ScanConfig {
        let mut s = ScanConfig::new(self.parameters.horizon.unwrap_or(0));
        if let Some(w) = self.parameters.confirm_window {
            s.confirm_window = w;
        }
        s
    }

    pub fn kalikow(&self) -> KalikowConfig {
        let p = &self.parameters;
        let mut k = KalikowConfig::new(p.n_env.unwrap_or(0), p.n_traj.unwrap_or(0));
        if let Some(c) = p.cell_fraction {
            k.cell_fraction = c;
        }
        if let Some(s) = &p.scales {
            k.scales = s.clone();
        }
        if let Some(b) = p.bootstrap {
            k.bootstrap = b;
        }
        k
    }
}

fn prefixed(section: &str, field: &str) -> String {
    if field.starts_with(section) {
        field.to_string()
    } else {
        format!("{section}.{field}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
experiment = "slab_ladder"

[environment]
dimension = 1
range = 1.0
drift_bound = 1.0
lipschitz_K = 1.0
ellipticity_nu = 1.0
base_drift = [0.5]
bump_intensity = 0.0
sigma_mode = "identity"
master_seed = 7
bump_amplitude_law = { kind = "constant", value = [0.0] }

[integrator]
step = 0.01
boundary_correction = "bridge_test"
max_time = 100.0

[parameters]
l = [1.0]
ladder = [2.0]
n = 100
"#;

    #[test]
    fn minimal_config_validates() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::SlabLadder);
        assert!(cfg.validate().is_empty(), "{:?}", cfg.validate());
    }

    #[test]
    fn non_integer_inverse_step_names_the_field() {
        let cfg = parse(&MINIMAL.replace("step = 0.01", "step = 0.03")).unwrap();
        let errors = cfg.validate();
        assert!(errors.iter().any(|e| e.field == "integrator.step"), "{errors:?}");
    }

    #[test]
    fn every_failure_is_listed() {
        let text = MINIMAL
            .replace("step = 0.01", "step = 0.03")
            .replace("n = 100", "n = 10")
            .replace("l = [1.0]", "l = [2.0]");
        let errors = parse(&text).unwrap().validate();
        let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
        for f in ["integrator.step", "parameters.n", "parameters.l"] {
            assert!(fields.contains(&f), "{fields:?}");
        }
    }

    #[test]
    fn missing_parameters_are_reported() {
        let text = MINIMAL.replace("experiment = \"slab_ladder\"", "experiment = \"regeneration\"");
        let errors = parse(&text).unwrap().validate();
        let fields: Vec<&str> = errors.iter().map(|e| e.field.as_str()).collect();
        assert!(fields.contains(&"coupling"));
        assert!(fields.contains(&"parameters.n_traj"));
        assert!(fields.contains(&"parameters.horizon"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse(&MINIMAL.replace("n = 100", "n = 100\nbogus = 1")).is_err());
        assert!("nope".parse::<ExperimentKind>().is_err());
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
    }

    #[test]
    fn hash_tracks_text() {
        assert_eq!(config_hash("a"), config_hash("a"));
        assert_ne!(config_hash("a"), config_hash("a "));
        assert_eq!(config_hash("").len(), 64);
    }
}
