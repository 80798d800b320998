//! TOML experiment configuration.
//!
//! Every table rejects unknown keys. Optional tables fall back to the
//! defaults of the desk hard-inclusion experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blockmatch::BlockMatchConfig;
use crate::error::{Error, Result};
use crate::forward::{ElasticMode, PhantomGeometry};
use crate::geom::{Disk, Rect};
use crate::io::read_to_string;
use crate::metrics::RoiShape;
use crate::registration::{InitPolicy, SolverSettings};
use crate::regularizers::{RegularizerKind, RegularizerSpec};
use crate::ussim::Psf;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImagingConfig {
    /// Imaged area; the RF grid starts at `window.min`.
    pub window: Rect,
    pub axial_spacing: f64,
    pub lateral_spacing: f64,
    pub psf: Psf,
    /// Scatterers per mm².
    pub scatterer_density: f64,
    pub inclusion_gain: f64,
    /// Scatterers fill the window grown by this margin so that material
    /// moving into view is populated.
    pub scatterer_margin: f64,
    /// Signal-to-noise ratio in dB; omit for noiseless frames.
    pub snr_db: Option<f64>,
    pub scatterer_seed: u64,
    pub noise_seed: u64,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            window: Rect::new([3.0, -10.0], [23.0, 10.0]),
            axial_spacing: 0.0192,
            lateral_spacing: 0.3,
            psf: Psf::default(),
            scatterer_density: 30.0,
            inclusion_gain: 2.0,
            scatterer_margin: 3.0,
            snr_db: Some(12.0),
            scatterer_seed: 1,
            noise_seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceConfig {
    pub frames: usize,
    pub mean_step_strain: f64,
    /// Platen displacement of the raw forward solve; frames rescale it.
    pub platen_displacement: f64,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            mean_step_strain: 0.004,
            platen_displacement: -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub element_size: f64,
    /// Inset of the registration mesh from the RF grid boundary.
    pub mesh_margin: f64,
    pub regularizers: Vec<RegularizerSpec>,
    pub init: InitPolicy,
    pub solver: SolverSettings,
    pub block_match: BlockMatchConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            element_size: 1.5,
            mesh_margin: 0.5,
            regularizers: RegularizerKind::ALL
                .iter()
                .map(|&k| RegularizerSpec::reference(k))
                .collect(),
            init: InitPolicy::PreviousIncrement,
            solver: SolverSettings::default(),
            // windows shrunk in proportion to the 20 mm desk image
            block_match: BlockMatchConfig {
                window_axial: 1.5,
                window_lateral: 4.5,
                search_radius: Some([70, 4]),
                ..BlockMatchConfig::default()
            },
        }
    }
}

/// Log-spaced α values `10^min_exp .. 10^max_exp` with `count` points, or an
/// explicit list when `values` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaGrid {
    pub min_exp: f64,
    pub max_exp: f64,
    pub count: usize,
    pub values: Option<Vec<f64>>,
}

impl Default for AlphaGrid {
    fn default() -> Self {
        Self {
            min_exp: -6.0,
            max_exp: 6.0,
            count: 13,
            values: None,
        }
    }
}

impl AlphaGrid {
    pub fn alphas(&self) -> Result<Vec<f64>> {
        let v = match &self.values {
            Some(v) => v.clone(),
            None => {
                if self.count == 0 {
                    return Err(Error::Config("sweep.alphas.count must be positive".into()));
                }
                if self.count == 1 {
                    vec![10f64.powf(self.min_exp)]
                } else {
                    let step = (self.max_exp - self.min_exp) / (self.count - 1) as f64;
                    (0..self.count)
                        .map(|i| 10f64.powf(self.min_exp + step * i as f64))
                        .collect()
                }
            }
        };
        if v.is_empty() || v.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
            return Err(Error::Config("sweep α values must be positive and finite".into()));
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub reference_frame: usize,
    pub target_frame: usize,
    pub alphas: AlphaGrid,
    /// Inclusion moduli of the cases; empty means the phantom's own value.
    pub inclusion_moduli: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            reference_frame: 0,
            target_frame: 6,
            alphas: AlphaGrid::default(),
            inclusion_moduli: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Inclusion ROI; defaults to the phantom inclusion.
    pub roi: Option<RoiShape>,
}

#[allow(clippy::derivable_impls)]
impl Default for MetricsConfig {
    fn default() -> Self {
        Self { roi: None }
    }
}

pub fn default_phantom() -> PhantomGeometry {
    PhantomGeometry {
        depth: 40.0,
        width: 50.0,
        platen_width: 25.0,
        element_size: 0.5,
        background_modulus: 10.0,
        inclusion_modulus: 40.0,
        inclusion: Some(Disk {
            center: [13.0, 0.0],
            radius: 3.75,
        }),
        poisson_ratio: 0.495,
        mode: ElasticMode::PlaneStress,
    }
}

fn default_name() -> String {
    "experiment".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default = "default_phantom")]
    pub phantom: PhantomGeometry,
    #[serde(default)]
    pub imaging: ImagingConfig,
    #[serde(default)]
    pub sequence: SequenceConfig,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: default_name(),
            output_dir: default_output(),
            phantom: default_phantom(),
            imaging: ImagingConfig::default(),
            sequence: SequenceConfig::default(),
            registration: RegistrationConfig::default(),
            sweep: SweepConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            match e.span() {
                Some(span) => {
                    let (line, col) = line_col(text, span.start);
                    Error::Config(format!("line {line}, column {col}: {msg}"))
                }
                None => Error::Config(msg),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_to_string(path)?).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Replaces both seeds; the noise seed is offset so the two streams differ.
    pub fn override_seed(&mut self, seed: u64) {
        self.imaging.scatterer_seed = seed;
        self.imaging.noise_seed = seed.wrapping_add(1);
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Error::Config(m);
        let im = &self.imaging;
        if im.window.is_empty() {
            return Err(cfg("imaging.window is empty".into()));
        }
        if !(im.axial_spacing > 0.0 && im.lateral_spacing > 0.0) {
            return Err(cfg("imaging spacings must be positive".into()));
        }
        if !(im.scatterer_density > 0.0) || !(im.inclusion_gain > 0.0) || !(im.scatterer_margin >= 0.0) {
            return Err(cfg(
                "imaging.scatterer_density, inclusion_gain and scatterer_margin must be positive".into(),
            ));
        }
        if im.snr_db.is_some_and(|s| s.is_nan()) {
            return Err(cfg("imaging.snr_db must be a number".into()));
        }
        im.psf.validate()?;
        let (lo, hi) = (im.window.min, im.window.max);
        let p = &self.phantom;
        if lo[0] < 0.0 || hi[0] > p.depth || lo[1] < -p.width / 2.0 || hi[1] > p.width / 2.0 {
            return Err(cfg("imaging.window must lie inside the phantom".into()));
        }
        if self.sequence.frames < 2 {
            return Err(cfg("sequence.frames must be at least 2".into()));
        }
        if !(self.sequence.mean_step_strain > 0.0) || self.sequence.platen_displacement == 0.0 {
            return Err(cfg(
                "sequence.mean_step_strain and platen_displacement must be nonzero".into()
            ));
        }
        let r = &self.registration;
        if !(r.element_size > 0.0) || !(r.mesh_margin >= 0.0) {
            return Err(cfg(
                "registration.element_size must be positive and mesh_margin nonnegative".into(),
            ));
        }
        if r.regularizers.is_empty() {
            return Err(cfg("registration.regularizers is empty".into()));
        }
        for spec in &r.regularizers {
            spec.validate()?;
        }
        if r.solver.max_iterations == 0 || !(r.solver.step_tolerance > 0.0) {
            return Err(cfg(
                "registration.solver needs max_iterations ≥ 1 and a positive step_tolerance".into(),
            ));
        }
        r.block_match.validate()?;
        let s = &self.sweep;
        if s.reference_frame >= s.target_frame || s.target_frame >= self.sequence.frames {
            return Err(cfg(format!(
                "sweep frames {}→{} must be increasing and below sequence.frames",
                s.reference_frame, s.target_frame
            )));
        }
        s.alphas.alphas()?;
        if s.inclusion_moduli.iter().any(|e| !(*e > 0.0)) {
            return Err(cfg("sweep.inclusion_moduli must be positive".into()));
        }
        Ok(())
    }

    /// ROI used by the contrast metrics.
    pub fn roi(&self) -> Result<RoiShape> {
        if let Some(r) = &self.metrics.roi {
            return Ok(r.clone());
        }
        self.phantom
            .inclusion
            .map(|d| RoiShape::Disk {
                center: d.center,
                radius: d.radius,
            })
            .ok_or_else(|| Error::Config("metrics.roi is required when the phantom has no inclusion".into()))
    }
}
