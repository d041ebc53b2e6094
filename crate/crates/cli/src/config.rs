//! Experiment configuration: a single TOML file, validated before any
//! computation, hashed for replay provenance.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Lattice dimension (≥ 2).
    pub dim: usize,
    /// Mass values, each in (0,1].
    pub theta: Vec<f64>,
    /// Base seed; overridable with --seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Crossing scales L, increasing.
    pub scales: Vec<i64>,
    /// Level grid for curve estimation.
    pub levels: LevelSpec,
    /// Scale factor ℓ of the annulus geometry (≥ 6).
    #[serde(default = "default_ell")]
    pub ell: i64,
    /// Torus half-side rule for annulus experiments: L̄ = multiplier · L.
    /// Must exceed 2ℓ so the annulus fits.
    #[serde(default)]
    pub torus_multiplier: Option<i64>,
    /// Truncation margin override (defaults to ⌈(10/θ)·ln 10⌉).
    #[serde(default)]
    pub margin: Option<i64>,
    /// Replicas per curve point.
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Threshold parameter γ for locating h**.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Offset from the located threshold at which the fits run.
    #[serde(default = "default_fit_gap")]
    pub fit_gap: f64,
    /// Level window bound M: grid values must lie inside (−M, M).
    #[serde(default = "default_level_window")]
    pub level_window: f64,
    /// Field source for p-curves: "torus" (spectral) or "dense-box".
    #[serde(default = "default_sampler")]
    pub sampler: String,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum LevelSpec {
    Grid { start: f64, stop: f64, step: f64 },
    Values { values: Vec<f64> },
}

fn default_seed() -> u64 {
    1
}

fn default_ell() -> i64 {
    8
}

fn default_replicas() -> usize {
    1000
}

fn default_gamma() -> f64 {
    0.1
}

fn default_fit_gap() -> f64 {
    0.6
}

fn default_level_window() -> f64 {
    2.0
}

fn default_sampler() -> String {
    "torus".to_string()
}

impl ExperimentConfig {
    pub fn levels(&self) -> Vec<f64> {
        match &self.levels {
            LevelSpec::Values { values } => {
                let mut v = values.clone();
                v.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
                v
            }
            LevelSpec::Grid { start, stop, step } => {
                let mut v = Vec::new();
                let mut h = *start;
                let mut i = 0u64;
                while h <= stop + 1e-12 {
                    v.push(h);
                    i += 1;
                    h = start + i as f64 * step;
                }
                v
            }
        }
    }

    pub fn torus_multiplier(&self) -> i64 {
        self.torus_multiplier.unwrap_or(2 * self.ell + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            bail!("dim must be at least 2");
        }
        if self.theta.is_empty() {
            bail!("theta list must be nonempty");
        }
        for &t in &self.theta {
            if !(t > 0.0 && t <= 1.0) {
                bail!("theta must lie in (0,1], got {t}");
            }
        }
        if self.scales.is_empty() || self.scales.windows(2).any(|w| w[1] <= w[0]) {
            bail!("scales must be a nonempty increasing list");
        }
        if self.scales[0] < 1 {
            bail!("scales must be at least 1");
        }
        if self.ell < 6 {
            bail!("ell must be at least 6 (containment can fail below)");
        }
        if self.torus_multiplier() <= 2 * self.ell {
            bail!(
                "torus_multiplier must exceed 2·ell = {} so the annulus fits",
                2 * self.ell
            );
        }
        let levels = self.levels();
        if levels.is_empty() {
            bail!("level grid is empty");
        }
        if let LevelSpec::Grid { step, .. } = self.levels {
            if step <= 0.0 {
                bail!("level grid step must be positive");
            }
        }
        for &h in &levels {
            if !h.is_finite() {
                bail!("levels must be finite");
            }
            if h.abs() >= self.level_window {
                bail!(
                    "level {h} outside the configured window (-{M}, {M})",
                    M = self.level_window
                );
            }
        }
        if self.replicas == 0 {
            bail!("replicas must be positive");
        }
        if !(0.0 < self.gamma && self.gamma < 1.0) {
            bail!("gamma must lie in (0,1)");
        }
        if self.sampler != "torus" && self.sampler != "dense-box" {
            bail!("sampler must be \"torus\" or \"dense-box\"");
        }
        if let Some(m) = self.margin {
            if m < 0 {
                bail!("margin must be non-negative");
            }
        }
        Ok(())
    }
}

/// Loads, validates, and hashes a config file.
pub fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let hash = format!("{:x}", Sha256::digest(&bytes));
    let config: ExperimentConfig =
        toml::from_str(std::str::from_utf8(&bytes).context("config is not UTF-8")?)
            .context("cannot parse config")?;
    config.validate()?;
    Ok((config, hash))
}
