//! Run configuration: TOML on disk, flag overrides on top, and a SHA-256
//! hash of the canonical form that tags every output file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::Tolerances;
use crate::characteristics::TimeSchedule;
use crate::initial_data::{GaussianData, QuadratureSpec};
use crate::kernel::{Interaction, SofteningMode};
use crate::meanfield::{FieldMethod, TreeParams};
use crate::scattering::SeedGrid;
use crate::{Error, Result, RieszParams};

const NORM_NODES: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub alpha: f64,
    pub lambda: f64,
    pub softening: SofteningMode,
    /// Base softening length; when absent, `eps_factor` × the position spacing.
    pub eps: Option<f64>,
    pub eps_factor: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self { alpha: 0.75, lambda: 1.0, softening: SofteningMode::Comoving, eps: None, eps_factor: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub sigma_x: f64,
    pub sigma_v: f64,
    pub center_x: [f64; 3],
    pub center_v: [f64; 3],
    /// Amplitude; when absent it is chosen so the smallness norms total `smallness_target`.
    pub eta: Option<f64>,
    pub smallness_target: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { sigma_x: 1.0, sigma_v: 1.0, center_x: [0.0; 3], center_v: [0.0; 3], eta: None, smallness_target: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Particles used as probes (a fixed random subset when the ensemble is larger).
    pub max_node_probes: usize,
    /// Co-moving grid points per axis.
    pub grid_per_axis: usize,
    /// Step for the second derivative of the field by differences of `∇E`.
    pub fd_step: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { max_node_probes: 1000, grid_per_axis: 5, fd_step: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// `A_t` table velocities per axis, cell-centred in `±velocity_radius σ_v`.
    pub velocity_grid: usize,
    pub velocity_radius: f64,
    pub div_step: f64,
    /// Seeds (the first ones in grid order) at which the divergence of `F` is checked.
    pub div_seeds: usize,
    /// Fit window; the last decade of the run when absent.
    pub window: Option<[f64; 2]>,
    /// Abort the run when some `|Vᵢ(t) - vᵢ|` exceeds this.
    pub max_velocity_deviation: Option<f64>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { velocity_grid: 3, velocity_radius: 2.0, div_step: 1e-3, div_seeds: 8, window: None, max_velocity_deviation: Some(0.5) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Output directory. Not part of the hash.
    pub out: Option<PathBuf>,
    /// Worker threads, 0 for all cores. Not part of the hash.
    pub threads: usize,
    pub seed: u64,
    pub kernel: KernelConfig,
    pub data: DataConfig,
    pub quadrature: QuadratureSpec,
    pub schedule: TimeSchedule,
    pub field: FieldMethod,
    pub probes: ProbeConfig,
    pub seeds: SeedGrid,
    pub diagnostics: DiagnosticsConfig,
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            out: None,
            threads: 0,
            seed: 20240601,
            kernel: KernelConfig::default(),
            data: DataConfig::default(),
            quadrature: QuadratureSpec::default(),
            schedule: TimeSchedule::default(),
            field: FieldMethod::Tree(TreeParams::default()),
            probes: ProbeConfig::default(),
            seeds: SeedGrid::default(),
            diagnostics: DiagnosticsConfig::default(),
            tolerances: Tolerances::default(),
        }
    }
}

/// Everything a run needs, with derived quantities filled in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub data: GaussianData,
    pub interaction: Interaction,
    pub window: (f64, f64),
}

impl RunConfig {
    /// The fast desk-scale configuration: about 4×10³ particles, `T = 100`,
    /// direct summation, 64 seeds.
    pub fn ci() -> Self {
        Self {
            run_id: "ci".into(),
            quadrature: QuadratureSpec { min_relative_weight: (-9.5f64).exp(), stagger: true, ..QuadratureSpec::uniform(5.0, 7) },
            schedule: TimeSchedule { t_final: 100.0, ..TimeSchedule::default() },
            field: FieldMethod::Direct,
            probes: ProbeConfig { max_node_probes: 300, ..ProbeConfig::default() },
            seeds: SeedGrid { n_x: 2, n_v: 2, radius_x: 1.0, radius_v: 1.0 },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// The configuration with the fields that do not affect results cleared.
    pub fn canonical(&self) -> Self {
        Self { out: None, threads: 0, ..self.clone() }
    }

    /// Lower-case hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.canonical()).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.kernel;
        RieszParams::new(k.alpha, k.lambda, k.eps.unwrap_or(0.0))?.validate_long_range()?;
        if !(k.eps_factor > 0.0) && k.eps.is_none() {
            return Err(Error::Config("eps_factor must be positive".into()));
        }
        let d = self.gaussian(0.0);
        d.validate()?;
        if !(self.data.smallness_target > 0.0) && self.data.eta.is_none() {
            return Err(Error::Config("smallness_target must be positive".into()));
        }
        self.quadrature.validate(&d)?;
        self.schedule.validate()?;
        if let FieldMethod::Tree(t) = self.field {
            t.validate()?;
        }
        if self.seeds.is_empty() || self.diagnostics.velocity_grid == 0 {
            return Err(Error::Config("seed and velocity grids must be non-empty".into()));
        }
        if let Some([lo, hi]) = self.diagnostics.window {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Config(format!("window [{lo}, {hi}] is empty")));
            }
        }
        if !(self.probes.fd_step > 0.0 && self.diagnostics.div_step > 0.0) {
            return Err(Error::Config("finite-difference steps must be positive".into()));
        }
        Ok(())
    }

    fn gaussian(&self, eta: f64) -> GaussianData {
        GaussianData {
            eta,
            sigma_x: self.data.sigma_x,
            sigma_v: self.data.sigma_v,
            center_x: self.data.center_x,
            center_v: self.data.center_v,
        }
    }

    /// Rule for the smallness norms: the particle box, at least 24 nodes per axis.
    pub fn norm_quadrature(&self) -> QuadratureSpec {
        let q = &self.quadrature;
        QuadratureSpec { n_x: q.n_x.max(NORM_NODES), n_v: q.n_v.max(NORM_NODES), ..*q }
    }

    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let data = match self.data.eta {
            Some(eta) => self.gaussian(eta),
            None => self.gaussian(1.0).with_smallness_target(&self.norm_quadrature(), self.data.smallness_target)?,
        };
        let eps = self.kernel.eps.unwrap_or(self.kernel.eps_factor * self.quadrature.spacing_x());
        let params = RieszParams::new(self.kernel.alpha, self.kernel.lambda, eps)?;
        let window = match self.diagnostics.window {
            Some([lo, hi]) => (lo, hi),
            None => crate::scattering::last_decade(self.schedule.t_final),
        };
        Ok(Resolved { data, interaction: Interaction::new(params, self.kernel.softening), window })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_tables() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_toml("[schedule]\nt_final = 50.0\n[field]\nkind = \"direct\"\n").unwrap();
        assert_eq!(partial.schedule.t_final, 50.0);
        assert_eq!(partial.schedule.ratio, TimeSchedule::default().ratio);
        assert_eq!(partial.field, FieldMethod::Direct);
        assert!(RunConfig::from_toml("[schedule]\nt_finall = 5.0\n").is_err());
    }

    #[test]
    fn hash_ignores_output_location_and_threads() {
        let a = RunConfig::default();
        let b = RunConfig { out: Some("/tmp/x".into()), threads: 3, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.kernel.alpha = 0.8;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn resolve_fills_derived_values() {
        let c = RunConfig::ci();
        let r = c.resolve().unwrap();
        assert!(r.data.eta > 0.0);
        assert_eq!(r.interaction.params.eps, 0.5 * c.quadrature.spacing_x());
        assert_eq!(r.window, (10.0, 100.0));
        let bad = RunConfig { kernel: KernelConfig { alpha: 1.5, ..KernelConfig::default() }, ..c };
        assert!(bad.resolve().is_err());
    }
}
