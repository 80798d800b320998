//! End-to-end pipeline shared by the command-line tool and the test suites:
//! forward truth, simulated RF frames, multi-regularizer registration, α
//! sweeps and field exports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::forward::{make_truth_frames, solve_static, PhantomGeometry};
use crate::geom::Rect;
use crate::io::{read_to_string, write_atomic};
use crate::mesh::{transfer_field, NodalField, QuadMesh};
use crate::metrics::{
    metric_table, strain_error, strain_from_displacement, MetricRow, MetricValue, RoiMask, StrainComponent, StrainField,
};
use crate::registration::{
    block_match_guess, register_sequence, solve_pair, GradientMode, InitPolicy, MatchTerm, PixelMap, SequenceResult,
    SolveReport, SolverSettings,
};
use crate::regularizers::{Regularizer, RegularizerSpec};
use crate::rf::{ImageGeometry, RfImage};
use crate::ussim::{add_noise_stream, displace_scatterers, gen_scatterers, render_rf, ScattererField};

/// RF grid covering the configured imaging window from its corner.
pub fn image_geometry(cfg: &ExperimentConfig) -> Result<ImageGeometry> {
    let im = &cfg.imaging;
    ImageGeometry::covering(im.window.min, im.window.extent(), im.axial_spacing, im.lateral_spacing)
}

/// Structured registration mesh over the RF grid, inset by the mesh margin.
pub fn registration_mesh(cfg: &ExperimentConfig, grid: &ImageGeometry) -> Result<QuadMesh> {
    let (lo, hi) = grid.extent();
    let area = Rect::new(lo, hi).shrink(cfg.registration.mesh_margin);
    if area.is_empty() {
        return Err(Error::Config(
            "registration.mesh_margin leaves no room for a mesh".into(),
        ));
    }
    let ext = area.extent();
    let h = cfg.registration.element_size;
    let nx = (ext[0] / h).round().max(1.0) as usize;
    let ny = (ext[1] / h).round().max(1.0) as usize;
    QuadMesh::structured_at(area.min, ext[0], ext[1], nx, ny)
}

/// Forward solve of `phantom` scaled into the configured truth frames.
pub fn forward_truth(cfg: &ExperimentConfig, phantom: &PhantomGeometry) -> Result<(QuadMesh, Vec<NodalField>)> {
    let model = phantom.build(cfg.sequence.platen_displacement)?;
    let solution = solve_static(&model.mesh, &model.material, &model.bcs)?;
    let frames = make_truth_frames(
        &solution,
        cfg.sequence.frames,
        cfg.sequence.mean_step_strain,
        &model.mesh,
        &cfg.imaging.window,
    )?;
    Ok((model.mesh, frames))
}

pub fn scatterers(cfg: &ExperimentConfig, phantom: &PhantomGeometry) -> Result<ScattererField> {
    let im = &cfg.imaging;
    let region = Rect::new(
        [
            im.window.min[0] - im.scatterer_margin,
            im.window.min[1] - im.scatterer_margin,
        ],
        [
            im.window.max[0] + im.scatterer_margin,
            im.window.max[1] + im.scatterer_margin,
        ],
    );
    gen_scatterers(
        region,
        im.scatterer_density,
        phantom.inclusion,
        im.inclusion_gain,
        im.scatterer_seed,
    )
}

/// Renders frame `k` for every requested index; noise for frame `k` always
/// comes from stream `k`, so subsets match the full sequence exactly.
pub fn render_frames(
    cfg: &ExperimentConfig,
    scatterers: &ScattererField,
    mesh: &QuadMesh,
    truth: &[NodalField],
    indices: &[usize],
) -> Result<Vec<RfImage>> {
    let grid = image_geometry(cfg)?;
    cfg.imaging.psf.check_sampling(&grid)?;
    let snr = cfg.imaging.snr_db.unwrap_or(f64::INFINITY);
    indices
        .iter()
        .map(|&k| {
            let u = truth
                .get(k)
                .ok_or_else(|| Error::invalid(format!("frame {k} is outside the truth sequence")))?;
            let moved = displace_scatterers(scatterers, mesh, u)?;
            let clean = render_rf(&moved, &cfg.imaging.psf, &grid)?;
            add_noise_stream(&clean, snr, cfg.imaging.noise_seed, k as u64)
        })
        .collect()
}

pub struct Simulation {
    pub forward_mesh: QuadMesh,
    pub truth: Vec<NodalField>,
    pub scatterers: ScattererField,
    pub frames: Vec<RfImage>,
    pub registration_mesh: QuadMesh,
    /// Truth frames interpolated to the registration mesh nodes.
    pub truth_registration: Vec<NodalField>,
}

pub fn simulate(cfg: &ExperimentConfig) -> Result<Simulation> {
    let (forward_mesh, truth) = forward_truth(cfg, &cfg.phantom)?;
    let sc = scatterers(cfg, &cfg.phantom)?;
    let all: Vec<usize> = (0..truth.len()).collect();
    let frames = render_frames(cfg, &sc, &forward_mesh, &truth, &all)?;
    let registration_mesh = registration_mesh(cfg, frames[0].geometry())?;
    let truth_registration = truth
        .iter()
        .map(|u| transfer_field(&forward_mesh, u, &registration_mesh))
        .collect();
    Ok(Simulation {
        forward_mesh,
        truth,
        scatterers: sc,
        frames,
        registration_mesh,
        truth_registration,
    })
}

pub struct RegistrationRun {
    pub spec: RegularizerSpec,
    pub result: SequenceResult,
}

impl RegistrationRun {
    pub fn label(&self) -> &'static str {
        self.spec.kind.label()
    }
}

/// Registers the whole sequence once per configured regularizer.
pub fn register_all(cfg: &ExperimentConfig, mesh: &QuadMesh, frames: &[RfImage]) -> Result<Vec<RegistrationRun>> {
    let r = &cfg.registration;
    r.regularizers
        .par_iter()
        .map(|spec| {
            let reg = Regularizer::new(spec, mesh)?;
            let result = register_sequence(frames, &reg, mesh, r.init, &r.solver, &r.block_match)
                .map_err(|e| e.context(spec.kind.label()))?;
            Ok(RegistrationRun { spec: *spec, result })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub case: String,
    pub regularizer: &'static str,
    pub alpha: f64,
    pub total_strain_error: MetricValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepArgmin {
    pub case: String,
    pub regularizer: &'static str,
    pub alpha: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub argmins: Vec<SweepArgmin>,
    /// Arithmetic mean over cases of the per-case argmin, per regularizer.
    pub averages: Vec<(&'static str, f64)>,
}

fn case_label(modulus: f64) -> String {
    format!("inclusion_E{modulus}")
}

/// One reference/target frame pair of a simulated phantom with everything a
/// single-pair registration needs.
pub struct PairProblem {
    pub mesh: QuadMesh,
    pub reference: RfImage,
    pub target: RfImage,
    /// Truth displacement from the reference to the target frame.
    pub truth: NodalField,
    pub truth_strain: StrainField,
    /// Initial guess chosen by the configured policy.
    pub init: NodalField,
    map: PixelMap,
}

impl PairProblem {
    pub fn new(cfg: &ExperimentConfig, phantom: &PhantomGeometry, reference: usize, target: usize) -> Result<Self> {
        let (fmesh, truth) = forward_truth(cfg, phantom)?;
        if reference >= target || target >= truth.len() {
            return Err(Error::invalid(format!(
                "frame pair {reference}->{target} is not increasing within {} frames",
                truth.len()
            )));
        }
        let sc = scatterers(cfg, phantom)?;
        let mut frames = render_frames(cfg, &sc, &fmesh, &truth, &[reference, target])?;
        let target_image = frames.pop().expect("two frames rendered");
        let reference_image = frames.pop().expect("two frames rendered");
        let mesh = registration_mesh(cfg, reference_image.geometry())?;
        // Exact when the reference frame is the undeformed one.
        let pair_truth =
            transfer_field(&fmesh, &truth[target], &mesh).sub(&transfer_field(&fmesh, &truth[reference], &mesh));
        let truth_strain = strain_from_displacement(&mesh, &pair_truth)?;
        let init = match cfg.registration.init {
            InitPolicy::Zero => NodalField::zeros(mesh.n_nodes()),
            _ => block_match_guess(
                &reference_image,
                &target_image,
                &mesh,
                None,
                &cfg.registration.block_match,
            )?,
        };
        let map = PixelMap::new(&mesh, reference_image.geometry())?;
        Ok(Self {
            mesh,
            reference: reference_image,
            target: target_image,
            truth: pair_truth,
            truth_strain,
            init,
            map,
        })
    }

    pub fn term(&self, mode: GradientMode) -> Result<MatchTerm<'_>> {
        MatchTerm::new(&self.mesh, &self.map, &self.reference, &self.target, None, mode)
    }

    /// Registers the pair with one regularizer from the configured initial guess.
    pub fn solve(&self, spec: &RegularizerSpec, settings: &SolverSettings) -> Result<(NodalField, SolveReport)> {
        let term = self.term(settings.gradient_mode)?;
        let reg = Regularizer::new(spec, &self.mesh)?;
        solve_pair(&term, &reg, &self.init, settings)
    }
}

/// Single-pair registration error over the α grid for every configured
/// regularizer and inclusion case.
pub fn sweep_alpha(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let sw = &cfg.sweep;
    let alphas = sw.alphas.alphas()?;
    let moduli = if sw.inclusion_moduli.is_empty() {
        vec![cfg.phantom.inclusion_modulus]
    } else {
        sw.inclusion_moduli.clone()
    };
    let mut points = Vec::new();
    for &modulus in &moduli {
        let case = case_label(modulus);
        let phantom = PhantomGeometry {
            inclusion_modulus: modulus,
            ..cfg.phantom.clone()
        };
        let pair = PairProblem::new(cfg, &phantom, sw.reference_frame, sw.target_frame)?;
        let mesh = &pair.mesh;
        let term = pair.term(cfg.registration.solver.gradient_mode)?;
        let jobs: Vec<(RegularizerSpec, f64)> = cfg
            .registration
            .regularizers
            .iter()
            .flat_map(|s| alphas.iter().map(move |&a| (*s, a)))
            .collect();
        let case_points: Vec<SweepPoint> = jobs
            .par_iter()
            .map(|(base, alpha)| {
                let spec = RegularizerSpec { alpha: *alpha, ..*base };
                let reg = Regularizer::new(&spec, mesh)?;
                let (u, _) = solve_pair(&term, &reg, &pair.init, &cfg.registration.solver)
                    .map_err(|e| e.context(format!("{case} {} α={alpha:e}", spec.kind.label())))?;
                let measured = strain_from_displacement(mesh, &u)?;
                let total = match strain_error(&pair.truth_strain, &measured, StrainComponent::Total) {
                    Ok(v) => MetricValue {
                        value: v,
                        defined: true,
                    },
                    Err(Error::UndefinedMetric(_)) => MetricValue {
                        value: f64::INFINITY,
                        defined: false,
                    },
                    Err(e) => return Err(e),
                };
                Ok(SweepPoint {
                    case: case.clone(),
                    regularizer: spec.kind.label(),
                    alpha: *alpha,
                    total_strain_error: total,
                })
            })
            .collect::<Result<_>>()?;
        points.extend(case_points);
    }
    let mut argmins = Vec::new();
    let mut averages = Vec::new();
    for spec in &cfg.registration.regularizers {
        let label = spec.kind.label();
        let mut found = Vec::new();
        for &modulus in &moduli {
            let case = case_label(modulus);
            let best = points
                .iter()
                .filter(|p| p.case == case && p.regularizer == label && p.total_strain_error.defined)
                .min_by(|a, b| a.total_strain_error.value.total_cmp(&b.total_strain_error.value));
            if let Some(b) = best {
                found.push(b.alpha);
                argmins.push(SweepArgmin {
                    case,
                    regularizer: label,
                    alpha: b.alpha,
                    error: b.total_strain_error.value,
                });
            }
        }
        if !found.is_empty() {
            averages.push((label, found.iter().sum::<f64>() / found.len() as f64));
        }
    }
    Ok(SweepResult {
        points,
        argmins,
        averages,
    })
}

impl SweepResult {
    pub fn points_csv(&self) -> String {
        let mut s = String::from("case,regularizer,alpha,total_strain_error,defined\n");
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{:.6e},{:.12e},{}",
                p.case,
                p.regularizer,
                p.alpha,
                p.total_strain_error.value,
                u8::from(p.total_strain_error.defined)
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("case,regularizer,argmin_alpha,min_total_strain_error\n");
        for a in &self.argmins {
            let _ = writeln!(s, "{},{},{:.6e},{:.12e}", a.case, a.regularizer, a.alpha, a.error);
        }
        for (label, avg) in &self.averages {
            let _ = writeln!(s, "average,{label},{avg:.6e},");
        }
        s
    }
}

/// Writes one strain component of a structured mesh as a binary graymap
/// (rows axial, columns lateral, linear min-max scaling) plus a CSV of the
/// element-center values.
pub fn write_strain_raster(mesh: &QuadMesh, strain: &StrainField, component: usize, stem: &Path) -> Result<()> {
    let layout = mesh
        .layout()
        .ok_or_else(|| Error::invalid("raster export needs a structured mesh"))?;
    if component > 2 || strain.n_elements() != mesh.n_elements() {
        return Err(Error::invalid("strain component or size does not match the mesh"));
    }
    let (nx, ny) = (layout.nx, layout.ny);
    let value = |i: usize, j: usize| strain.values[j * nx + i][component];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in &strain.values {
        lo = lo.min(v[component]);
        hi = hi.max(v[component]);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut pgm = format!("P5\n# min {lo:e} max {hi:e}\n{ny} {nx}\n255\n").into_bytes();
    let mut csv = String::from("x,y,value\n");
    for i in 0..nx {
        for j in 0..ny {
            let v = value(i, j);
            pgm.push(((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8);
            let c = mesh.centroid(j * nx + i);
            let _ = writeln!(csv, "{:.6},{:.6},{:.12e}", c[0], c[1], v);
        }
    }
    write_atomic(&stem.with_extension("pgm"), &pgm)?;
    write_atomic(&stem.with_extension("csv"), csv.as_bytes())
}

const SEQUENCE_MAGIC: &str = "sequence v1";
const SEQUENCE_MANIFEST: &str = "sequence.txt";

pub fn frame_file_name(k: usize) -> String {
    format!("frame_{k:03}.rfimg")
}

/// Writes frames as `frame_kkk.rfimg` plus a `sequence.txt` manifest.
pub fn write_sequence(dir: &Path, frames: &[RfImage]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::from(e).context(dir.display().to_string()))?;
    let mut manifest = format!("{SEQUENCE_MAGIC}\n");
    for (k, f) in frames.iter().enumerate() {
        let name = frame_file_name(k);
        f.write(&dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    write_atomic(&dir.join(SEQUENCE_MANIFEST), manifest.as_bytes())
}

/// Reads the frames listed in `dir/sequence.txt`, in order.
pub fn read_sequence(dir: &Path) -> Result<Vec<RfImage>> {
    let path = dir.join(SEQUENCE_MANIFEST);
    let text = read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next() != Some(SEQUENCE_MAGIC) {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected header `{SEQUENCE_MAGIC}`"),
        ));
    }
    let frames = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| RfImage::read(&dir.join(l.trim())))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::format(path.display().to_string(), "manifest lists no frames"));
    }
    Ok(frames)
}

pub fn dispfield_file_name(k: usize) -> String {
    format!("frame_{k:03}.dispfield")
}

/// Parses the frame index from a `frame_kkk.*` file name.
pub fn frame_index(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.strip_prefix("frame_")?.parse().ok()
}

/// Metric rows of accumulated displacements against truth frames.
pub fn metric_rows(
    sequence: &str,
    regularizer: &str,
    mesh: &QuadMesh,
    truth: &[NodalField],
    measured: &[(usize, NodalField)],
    roi: &RoiMask,
) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for (k, u) in measured {
        let t = truth
            .get(*k)
            .ok_or_else(|| Error::Incompatible(format!("truth sequence has no frame {k}")))?;
        for (metric, value) in metric_table(mesh, t, u, roi)? {
            rows.push(MetricRow {
                sequence: sequence.to_string(),
                frame: *k,
                regularizer: regularizer.to_string(),
                metric,
                value,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::ElasticMode;
    use crate::geom::Disk;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            phantom: PhantomGeometry {
                depth: 12.0,
                width: 12.0,
                platen_width: 12.0,
                element_size: 1.0,
                background_modulus: 10.0,
                inclusion_modulus: 40.0,
                inclusion: Some(Disk {
                    center: [5.0, 0.0],
                    radius: 1.5,
                }),
                poisson_ratio: 0.495,
                mode: ElasticMode::PlaneStress,
            },
            ..Default::default()
        };
        cfg.imaging.window = Rect::new([2.0, -3.0], [8.0, 3.0]);
        cfg.imaging.scatterer_margin = 1.0;
        cfg.sequence.frames = 3;
        cfg.sweep.target_frame = 2;
        cfg.registration.element_size = 1.0;
        cfg.registration.block_match.window_axial = 2.0;
        cfg.registration.block_match.window_lateral = 3.0;
        cfg.sweep.alphas.values = Some(vec![1e-3]);
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn simulation_shapes_and_determinism() {
        let cfg = small_config();
        let a = simulate(&cfg).unwrap();
        assert_eq!(a.frames.len(), 3);
        assert_eq!(a.truth_registration.len(), 3);
        assert!(a.truth[0].as_slice().iter().all(|&v| v == 0.0));
        let (lo, hi) = a.registration_mesh.bounding_box();
        assert!((lo[0] - 2.5).abs() < 1e-12 && (lo[1] + 2.5).abs() < 1e-12);
        assert!(hi[0] <= 8.0 && hi[1] <= 3.0);
        let b = simulate(&cfg).unwrap();
        for (x, y) in a.frames.iter().zip(&b.frames) {
            assert_eq!(x.to_bytes(), y.to_bytes());
        }
        let subset = render_frames(&cfg, &a.scatterers, &a.forward_mesh, &a.truth, &[2]).unwrap();
        assert_eq!(subset[0].to_bytes(), a.frames[2].to_bytes());
    }

    #[test]
    fn single_alpha_sweep_matches_direct_registration() {
        let mut cfg = small_config();
        cfg.registration.regularizers = vec![RegularizerSpec::new(
            crate::regularizers::RegularizerKind::MomentumPlaneStress,
            1e-3,
        )];
        cfg.sequence.frames = 3;
        cfg.sweep.target_frame = 1;
        let sweep = sweep_alpha(&cfg).unwrap();
        assert_eq!(sweep.points.len(), 1);
        assert_eq!(sweep.averages, vec![("R_Psig", 1e-3)]);
        let sim = simulate(&cfg).unwrap();
        let runs = register_all(&cfg, &sim.registration_mesh, &sim.frames[..2]).unwrap();
        let et = strain_from_displacement(&sim.registration_mesh, &sim.truth_registration[1]).unwrap();
        let em = strain_from_displacement(&sim.registration_mesh, &runs[0].result.increments[0]).unwrap();
        let direct = strain_error(&et, &em, StrainComponent::Total).unwrap();
        assert_eq!(sweep.points[0].total_strain_error.value, direct);
    }

    #[test]
    fn sequence_directory_round_trip() {
        let cfg = small_config();
        let sim = simulate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_sequence(dir.path(), &sim.frames).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back, sim.frames);
        let missing = read_sequence(&dir.path().join("nope")).unwrap_err();
        assert_eq!(missing.code(), "not-found");
        assert!(missing.to_string().contains("nope"));
        assert_eq!(frame_index(Path::new("a/frame_012.dispfield")), Some(12));
        assert_eq!(frame_index(Path::new("a/other.dispfield")), None);
    }

    #[test]
    fn raster_export() {
        let mesh = QuadMesh::structured(2.0, 3.0, 2, 3).unwrap();
        let u = NodalField::from_fn(&mesh, |p| [0.01 * p[0] * p[1], 0.0]);
        let s = strain_from_displacement(&mesh, &u).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("exx");
        write_strain_raster(&mesh, &s, 0, &stem).unwrap();
        let pgm = std::fs::read(stem.with_extension("pgm")).unwrap();
        assert!(pgm.starts_with(b"P5\n"));
        let px = &pgm[pgm.len() - 6..];
        assert_eq!([px[0], px[2], px[3], px[5]], [0, 255, 0, 255]);
        assert!((127..=128).contains(&px[1]) && (127..=128).contains(&px[4]));
        let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert_eq!(csv.lines().count(), 7);
    }
}
