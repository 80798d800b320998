//! Gauss-Newton registration of RF frame pairs and sequences on a bilinear
//! displacement mesh.
//!
//! For frames `I₁ = I_k`, `I₂ = I_{k+1}` and accumulated warp `S = S_k` the
//! image term is `ψ = ½ Σ_p dA r_p²` with `r = I₂(x+S+u) − I₁(x+S)`, summed
//! over pixel centers `x` inside the mesh. The default derivatives replace
//! `∇I₂(x+S+u)` by the fixed `∇I₁(x+S)`, which makes the Hessian constant.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blockmatch::{interpolate_grid, median_filter_grid, ncc_match, BlockMatchConfig};
use crate::error::{Error, Result};
use crate::io::{put_f64s, put_u64, read_bytes, write_atomic, Reader};
use crate::mesh::{shape_values, NodalField, Point, QuadMesh};
use crate::regularizers::Regularizer;
use crate::rf::{ImageGeometry, RfImage};
use crate::sparse::{norm2, CsrMatrix, SkylineCholesky, TripletBuilder};

/// Which image gradient enters the derivatives of the image term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Centered-difference gradient of the reference frame at `x + S`.
    #[default]
    FrozenReference,
    /// Exact derivative of the cubic interpolant of `I₂` at `x + S + u`.
    Warped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub gradient_mode: GradientMode,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            step_tolerance: 1e-3,
            gradient_mode: GradientMode::FrozenReference,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct PixelSample {
    index: usize,
    pos: Point,
    shape: [f64; 4],
}

/// Pixel centers inside the mesh, grouped by the element containing them.
#[derive(Debug, Clone)]
pub struct PixelMap {
    samples: Vec<PixelSample>,
    /// `samples[ranges[e].0..ranges[e].1]` lie in element `e`.
    ranges: Vec<(usize, usize)>,
    pixel_area: f64,
    geometry: ImageGeometry,
}

impl PixelMap {
    pub fn new(mesh: &QuadMesh, geometry: &ImageGeometry) -> Result<Self> {
        let (lo, hi) = mesh.bounding_box();
        let (ilo, ihi) = geometry.extent();
        let tol = 1e-9 * (1.0 + (ihi[0] - ilo[0]).abs() + (ihi[1] - ilo[1]).abs());
        if lo[0] < ilo[0] - tol || lo[1] < ilo[1] - tol || hi[0] > ihi[0] + tol || hi[1] > ihi[1] + tol {
            return Err(Error::invalid(format!(
                "mesh [{:?}, {:?}] is not inside the image extent [{:?}, {:?}]",
                lo, hi, ilo, ihi
            )));
        }
        let g = geometry;
        let i0 = ((lo[0] - g.origin[0]) / g.axial_spacing).floor().max(0.0) as usize;
        let i1 = (((hi[0] - g.origin[0]) / g.axial_spacing).ceil() as usize).min(g.n_axial - 1);
        let j0 = ((lo[1] - g.origin[1]) / g.lateral_spacing).floor().max(0.0) as usize;
        let j1 = (((hi[1] - g.origin[1]) / g.lateral_spacing).ceil() as usize).min(g.n_lateral - 1);
        let mut found: Vec<(usize, PixelSample)> = (i0..=i1)
            .into_par_iter()
            .flat_map_iter(|i| {
                (j0..=j1).filter_map(move |j| {
                    let pos = g.position(i, j);
                    mesh.inverse_map(pos).map(|(e, xi)| {
                        (
                            e,
                            PixelSample {
                                index: i * g.n_lateral + j,
                                pos,
                                shape: shape_values(xi),
                            },
                        )
                    })
                })
            })
            .collect();
        found.sort_by_key(|(e, s)| (*e, s.index));
        let mut ranges = vec![(0, 0); mesh.n_elements()];
        let mut k = 0;
        for (e, r) in ranges.iter_mut().enumerate() {
            let start = k;
            while k < found.len() && found[k].0 == e {
                k += 1;
            }
            *r = (start, k);
        }
        Ok(Self {
            samples: found.into_iter().map(|(_, s)| s).collect(),
            ranges,
            pixel_area: g.pixel_area(),
            geometry: *g,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_area
    }
}

/// Value, gradient and Gauss-Newton Hessian of the image term.
#[derive(Debug, Clone)]
pub struct MatchEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: CsrMatrix,
}

/// The image term for one frame pair, with the reference side precomputed.
pub struct MatchTerm<'a> {
    mesh: &'a QuadMesh,
    map: &'a PixelMap,
    target: &'a RfImage,
    /// `x + S(x)` per pixel sample.
    warped_pos: Vec<Point>,
    ref_values: Vec<f64>,
    ref_grad: Vec<[f64; 2]>,
    mode: GradientMode,
}

impl<'a> MatchTerm<'a> {
    pub fn new(
        mesh: &'a QuadMesh,
        map: &'a PixelMap,
        reference: &RfImage,
        target: &'a RfImage,
        accumulated: Option<&NodalField>,
        mode: GradientMode,
    ) -> Result<Self> {
        if !reference.same_geometry(target) {
            return Err(Error::Incompatible("frames of a pair must share their geometry".into()));
        }
        if *reference.geometry() != map.geometry {
            return Err(Error::Incompatible(
                "pixel map was built for a different image grid".into(),
            ));
        }
        if let Some(s) = accumulated {
            s.check_mesh(mesh)?;
        }
        let (gx, gy) = reference.centered_gradient();
        let elems = mesh.elements();
        let mut warped_pos = Vec::with_capacity(map.len());
        let mut ref_values = Vec::with_capacity(map.len());
        let mut ref_grad = Vec::with_capacity(map.len());
        for (e, &(a, b)) in map.ranges.iter().enumerate() {
            for s in &map.samples[a..b] {
                match accumulated {
                    None => {
                        warped_pos.push(s.pos);
                        ref_values.push(reference.samples()[s.index]);
                        ref_grad.push([gx.samples()[s.index], gy.samples()[s.index]]);
                    }
                    Some(acc) => {
                        let mut d = [0.0; 2];
                        for (k, &n) in elems[e].iter().enumerate() {
                            let v = acc.get(n);
                            d[0] += s.shape[k] * v[0];
                            d[1] += s.shape[k] * v[1];
                        }
                        let q = [s.pos[0] + d[0], s.pos[1] + d[1]];
                        warped_pos.push(q);
                        ref_values.push(reference.sample_cubic(q));
                        ref_grad.push([gx.sample_cubic(q), gy.sample_cubic(q)]);
                    }
                }
            }
        }
        Ok(Self {
            mesh,
            map,
            target,
            warped_pos,
            ref_values,
            ref_grad,
            mode,
        })
    }

    pub fn mode(&self) -> GradientMode {
        self.mode
    }

    pub fn eval(&self, u: &NodalField) -> Result<MatchEval> {
        self.evaluate(u, true)
    }

    /// Objective value only.
    pub fn value(&self, u: &NodalField) -> Result<f64> {
        Ok(self.evaluate(u, false)?.value)
    }

    fn evaluate(&self, u: &NodalField, derivatives: bool) -> Result<MatchEval> {
        u.check_mesh(self.mesh)?;
        let da = self.map.pixel_area;
        let elems = self.mesh.elements();
        let blocks: Vec<(f64, [f64; 8], [[f64; 8]; 8])> = self
            .map
            .ranges
            .par_iter()
            .enumerate()
            .map(|(e, &(a, b))| {
                let nodes = elems[e];
                let ue: [[f64; 2]; 4] = std::array::from_fn(|k| u.get(nodes[k]));
                let mut value = 0.0;
                let mut g = [0.0; 8];
                let mut h = [[0.0; 8]; 8];
                for k in a..b {
                    let n = self.map.samples[k].shape;
                    let mut d = [0.0; 2];
                    for c in 0..4 {
                        d[0] += n[c] * ue[c][0];
                        d[1] += n[c] * ue[c][1];
                    }
                    let w = self.warped_pos[k];
                    let q = [w[0] + d[0], w[1] + d[1]];
                    let (v2, grad) = match (self.mode, derivatives) {
                        (GradientMode::Warped, true) => self.target.sample_cubic_with_gradient(q),
                        (_, true) => (self.target.sample_cubic(q), self.ref_grad[k]),
                        (_, false) => (self.target.sample_cubic(q), [0.0; 2]),
                    };
                    let r = v2 - self.ref_values[k];
                    value += 0.5 * da * r * r;
                    if !derivatives {
                        continue;
                    }
                    let ng: [f64; 8] = std::array::from_fn(|i| n[i / 2] * grad[i % 2]);
                    for i in 0..8 {
                        g[i] += da * r * ng[i];
                        for j in 0..8 {
                            h[i][j] += da * ng[i] * ng[j];
                        }
                    }
                }
                (value, g, h)
            })
            .collect();
        let nd = self.mesh.n_dofs();
        let mut value = 0.0;
        let mut gradient = vec![0.0; nd];
        let mut t = TripletBuilder::with_capacity(nd, nd, if derivatives { 64 * blocks.len() } else { 0 });
        for (e, (v, g, h)) in blocks.iter().enumerate() {
            value += v;
            if !derivatives {
                continue;
            }
            let nodes = elems[e];
            let dof = |i: usize| 2 * nodes[i / 2] + i % 2;
            for i in 0..8 {
                gradient[dof(i)] += g[i];
                for j in 0..8 {
                    t.push(dof(i), dof(j), h[i][j]);
                }
            }
        }
        Ok(MatchEval {
            value,
            gradient,
            hessian: t.build(),
        })
    }
}

/// Image term of one pair evaluated at `u`, building the pixel map on the fly.
pub fn eval_match(
    i1: &RfImage,
    i2: &RfImage,
    mesh: &QuadMesh,
    u: &NodalField,
    accumulated: Option<&NodalField>,
    mode: GradientMode,
) -> Result<MatchEval> {
    let map = PixelMap::new(mesh, i1.geometry())?;
    MatchTerm::new(mesh, &map, i1, i2, accumulated, mode)?.eval(u)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub final_step_ratio: f64,
    /// Objective at the initial guess and after every update.
    pub objective_trace: Vec<f64>,
    /// `‖δu‖/‖u‖` after every update.
    pub step_ratios: Vec<f64>,
    pub converged: bool,
    /// Some full step raised the objective.
    pub objective_increased: bool,
}

fn combined_objective(term: &MatchTerm, reg: &Regularizer, u: &NodalField) -> Result<f64> {
    Ok(term.value(u)? + reg.eval(u)?.value)
}

/// Full-step Gauss-Newton iterations on `ψ + R` starting from `init`.
pub fn solve_pair(
    term: &MatchTerm,
    reg: &Regularizer,
    init: &NodalField,
    settings: &SolverSettings,
) -> Result<(NodalField, SolveReport)> {
    if settings.max_iterations == 0 {
        return Err(Error::invalid("max_iterations must be at least 1"));
    }
    let mut u = init.clone();
    let mut report = SolveReport {
        iterations: 0,
        final_step_ratio: f64::INFINITY,
        objective_trace: Vec::new(),
        step_ratios: Vec::new(),
        converged: false,
        objective_increased: false,
    };
    for it in 1..=settings.max_iterations {
        let m = term.eval(&u)?;
        let r = reg.eval(&u)?;
        let pi = m.value + r.value;
        if !pi.is_finite() {
            return Err(Error::Divergence { iteration: it });
        }
        if let Some(&last) = report.objective_trace.last() {
            if pi > last {
                report.objective_increased = true;
            }
        }
        report.objective_trace.push(pi);
        let rhs: Vec<f64> = m.gradient.iter().zip(&r.gradient).map(|(a, b)| -(a + b)).collect();
        let mut t = TripletBuilder::with_capacity(rhs.len(), rhs.len(), m.hessian.nnz() + r.hessian.nnz());
        t.push_matrix(&m.hessian, 1.0);
        t.push_matrix(&r.hessian, 1.0);
        let step = SkylineCholesky::factor(&t.build())?.solve(&rhs);
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { iteration: it });
        }
        for (a, d) in u.as_mut_slice().iter_mut().zip(&step) {
            *a += d;
        }
        let step_norm = norm2(&step);
        let ratio = if step_norm == 0.0 { 0.0 } else { step_norm / u.norm() };
        report.iterations = it;
        report.step_ratios.push(ratio);
        report.final_step_ratio = ratio;
        if ratio < settings.step_tolerance {
            report.converged = true;
            break;
        }
    }
    let last = combined_objective(term, reg, &u)?;
    if !last.is_finite() {
        return Err(Error::Divergence {
            iteration: report.iterations,
        });
    }
    if report.objective_trace.last().is_some_and(|&p| last > p) {
        report.objective_increased = true;
    }
    report.objective_trace.push(last);
    Ok((u, report))
}

/// Registers `i2` onto `i1` with displacement defined on `mesh`.
pub fn register_pair(
    i1: &RfImage,
    i2: &RfImage,
    init: &NodalField,
    reg: &Regularizer,
    mesh: &QuadMesh,
    settings: &SolverSettings,
) -> Result<(NodalField, SolveReport)> {
    init.check_mesh(mesh)?;
    let map = PixelMap::new(mesh, i1.geometry())?;
    let term = MatchTerm::new(mesh, &map, i1, i2, None, settings.gradient_mode)?;
    solve_pair(&term, reg, init, settings)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Zero,
    /// Block matching for every pair.
    BlockMatch,
    /// Block matching for the first pair, then the previous increment.
    #[default]
    PreviousIncrement,
}

/// Block-matching estimate of the increment at the nodes, read at `X + S(X)`.
pub fn block_match_guess(
    i1: &RfImage,
    i2: &RfImage,
    mesh: &QuadMesh,
    accumulated: Option<&NodalField>,
    cfg: &BlockMatchConfig,
) -> Result<NodalField> {
    let grid = median_filter_grid(&ncc_match(i1, i2, cfg)?, cfg.median_filter)?;
    let points: Vec<Point> = match accumulated {
        None => mesh.nodes().to_vec(),
        Some(s) => mesh
            .nodes()
            .iter()
            .enumerate()
            .map(|(n, p)| {
                let d = s.get(n);
                [p[0] + d[0], p[1] + d[1]]
            })
            .collect(),
    };
    NodalField::from_values(interpolate_grid(&grid, &points)?.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct SequenceResult {
    /// `u_k`, registering frame `k + 1` onto frame `k`.
    pub increments: Vec<NodalField>,
    /// `S_k = Σ_{i<k} u_i`, one per frame; `S_0 = 0`.
    pub accumulated: Vec<NodalField>,
    pub reports: Vec<SolveReport>,
}

pub fn register_sequence(
    frames: &[RfImage],
    reg: &Regularizer,
    mesh: &QuadMesh,
    init_policy: InitPolicy,
    settings: &SolverSettings,
    block_match: &BlockMatchConfig,
) -> Result<SequenceResult> {
    if frames.len() < 2 {
        return Err(Error::invalid("a sequence needs at least two frames"));
    }
    let map = PixelMap::new(mesh, frames[0].geometry())?;
    let mut accumulated = vec![NodalField::zeros(mesh.n_nodes())];
    let mut increments: Vec<NodalField> = Vec::new();
    let mut reports = Vec::new();
    for k in 0..frames.len() - 1 {
        let s = &accumulated[k];
        let warp = (k > 0).then_some(s);
        let run = || -> Result<(NodalField, SolveReport)> {
            let init = match (init_policy, increments.last()) {
                (InitPolicy::Zero, _) => NodalField::zeros(mesh.n_nodes()),
                (InitPolicy::PreviousIncrement, Some(prev)) => prev.clone(),
                _ => block_match_guess(&frames[k], &frames[k + 1], mesh, warp, block_match)?,
            };
            let term = MatchTerm::new(mesh, &map, &frames[k], &frames[k + 1], warp, settings.gradient_mode)?;
            solve_pair(&term, reg, &init, settings)
        };
        let (u, report) = run().map_err(|e| e.context(format!("frame pair {k}->{}", k + 1)))?;
        accumulated.push(s.add(&u));
        increments.push(u);
        reports.push(report);
    }
    Ok(SequenceResult {
        increments,
        accumulated,
        reports,
    })
}

const DISPFIELD_MAGIC: &str = "dispfield v1";

/// One registered frame: increment and accumulated displacement.
#[derive(Debug, Clone, PartialEq)]
pub struct DispField {
    pub mesh_hash: String,
    pub increment: NodalField,
    pub accumulated: NodalField,
}

impl DispField {
    pub fn new(mesh: &QuadMesh, increment: NodalField, accumulated: NodalField) -> Result<Self> {
        increment.check_mesh(mesh)?;
        accumulated.check_mesh(mesh)?;
        Ok(Self {
            mesh_hash: mesh.hash(),
            increment,
            accumulated,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{DISPFIELD_MAGIC}\n{}\n", self.mesh_hash).into_bytes();
        put_u64(&mut out, self.increment.n_nodes() as u64);
        put_u64(&mut out, 2);
        put_f64s(&mut out, self.increment.as_slice());
        put_f64s(&mut out, self.accumulated.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "dispfield");
        r.expect_line(DISPFIELD_MAGIC)?;
        let mesh_hash = r.line()?;
        let n_nodes = r.u64()? as usize;
        let n_arrays = r.u64()?;
        if n_arrays != 2 {
            return Err(Error::format(
                "dispfield",
                format!("expected 2 arrays, found {n_arrays}"),
            ));
        }
        let increment = NodalField::from_values(r.f64_vec(2 * n_nodes)?)?;
        let accumulated = NodalField::from_values(r.f64_vec(2 * n_nodes)?)?;
        r.finish()?;
        Ok(Self {
            mesh_hash,
            increment,
            accumulated,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?).map_err(|e| e.context(path.display().to_string()))
    }
}

pub const REPORT_HEADER: &str =
    "regularizer,frame,iterations,final_objective,final_step_ratio,converged,objective_increased";

/// `report v1` CSV with one row per solve; `frame` is the target frame index.
pub fn reports_to_csv(rows: &[(String, usize, &SolveReport)]) -> String {
    let mut s = format!("# report v1\n{REPORT_HEADER}\n");
    for (label, frame, rep) in rows {
        s.push_str(&format!(
            "{label},{frame},{},{:.17e},{:.17e},{},{}\n",
            rep.iterations,
            rep.objective_trace.last().copied().unwrap_or(f64::NAN),
            rep.final_step_ratio,
            u8::from(rep.converged),
            u8::from(rep.objective_increased)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Rect;
    use crate::regularizers::{RegularizerKind, RegularizerSpec};
    use crate::ussim::{gen_scatterers, render_rf, Psf, ScattererField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> ImageGeometry {
        ImageGeometry::new(260, 30, 0.0192, 0.3, [0.0, 0.0]).unwrap()
    }

    fn scatterers() -> ScattererField {
        gen_scatterers(Rect::new([-1.0, -2.0], [6.0, 11.0]), 30.0, None, 1.0, 21).unwrap()
    }

    fn shifted(s: &ScattererField, d: Point) -> ScattererField {
        ScattererField {
            positions: s.positions.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect(),
            amplitudes: s.amplitudes.clone(),
        }
    }

    fn mesh() -> QuadMesh {
        QuadMesh::structured_at([0.6, 1.2], 3.8, 6.0, 4, 6).unwrap()
    }

    #[test]
    fn pixel_map_covers_each_pixel_once() {
        let m = mesh();
        let map = PixelMap::new(&m, &grid()).unwrap();
        let g = grid();
        let mut count = 0;
        for i in 0..g.n_axial {
            for j in 0..g.n_lateral {
                let p = g.position(i, j);
                if p[0] >= 0.6 - 1e-12 && p[0] <= 4.4 + 1e-12 && p[1] >= 1.2 - 1e-12 && p[1] <= 7.2 + 1e-12 {
                    count += 1;
                }
            }
        }
        assert_eq!(map.len(), count);
        let mut idx: Vec<usize> = map.samples.iter().map(|s| s.index).collect();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), count);
        let outside = QuadMesh::structured_at([4.0, 1.0], 2.0, 2.0, 1, 1).unwrap();
        assert!(PixelMap::new(&outside, &g).is_err());
    }

    #[test]
    fn identical_frames_give_zero() {
        let m = mesh();
        let im = render_rf(&scatterers(), &Psf::default(), &grid()).unwrap();
        let zero = NodalField::zeros(m.n_nodes());
        let e = eval_match(&im, &im, &m, &zero, None, GradientMode::FrozenReference).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.gradient.iter().all(|&g| g == 0.0));
        let reg = Regularizer::new(&RegularizerSpec::reference(RegularizerKind::MomentumPlaneStress), &m).unwrap();
        let (u, rep) = register_pair(&im, &im, &zero, &reg, &m, &SolverSettings::default()).unwrap();
        assert!(u.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(rep.iterations, 1);
        assert!(rep.converged);
    }

    #[test]
    fn subpixel_shift_lowers_objective() {
        let m = mesh();
        let g = grid();
        let d = [0.3 * g.axial_spacing, 0.1 * g.lateral_spacing];
        let psf = Psf::default();
        let i1 = render_rf(&scatterers(), &psf, &g).unwrap();
        let i2 = render_rf(&shifted(&scatterers(), d), &psf, &g).unwrap();
        let at_zero = eval_match(
            &i1,
            &i2,
            &m,
            &NodalField::zeros(m.n_nodes()),
            None,
            GradientMode::FrozenReference,
        )
        .unwrap()
        .value;
        let at_truth = eval_match(
            &i1,
            &i2,
            &m,
            &NodalField::constant(m.n_nodes(), d),
            None,
            GradientMode::FrozenReference,
        )
        .unwrap()
        .value;
        assert!(at_truth * 10.0 <= at_zero, "{at_truth} vs {at_zero}");
    }

    #[test]
    fn frozen_hessian_is_psd_and_constant() {
        let m = mesh();
        let g = grid();
        let i1 = render_rf(&scatterers(), &Psf::default(), &g).unwrap();
        let i2 = i1.map(|v| 0.9 * v);
        let a = eval_match(
            &i1,
            &i2,
            &m,
            &NodalField::zeros(m.n_nodes()),
            None,
            GradientMode::FrozenReference,
        )
        .unwrap();
        let b = eval_match(
            &i1,
            &i2,
            &m,
            &NodalField::constant(m.n_nodes(), [0.01, 0.02]),
            None,
            GradientMode::FrozenReference,
        )
        .unwrap();
        assert_eq!(a.hessian, b.hessian);
        assert!(a.hessian.asymmetry() <= 1e-12 * a.hessian.max_abs());
    }

    #[test]
    fn warped_gradient_matches_finite_differences() {
        let m = mesh();
        let g = grid();
        let psf = Psf::default();
        let i1 = render_rf(&scatterers(), &psf, &g).unwrap();
        let i2 = render_rf(&shifted(&scatterers(), [0.02, 0.05]), &psf, &g).unwrap();
        let map = PixelMap::new(&m, &g).unwrap();
        let term = MatchTerm::new(&m, &map, &i1, &i2, None, GradientMode::Warped).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = NodalField::from_values((0..m.n_dofs()).map(|_| rng.random_range(-0.01..0.01)).collect()).unwrap();
        let e = term.eval(&u).unwrap();
        let gmax = e.gradient.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let h = 1e-6;
        for d in 0..m.n_dofs() {
            let mut p = u.clone();
            p.as_mut_slice()[d] += h;
            let mut q = u.clone();
            q.as_mut_slice()[d] -= h;
            let fd = (term.value(&p).unwrap() - term.value(&q).unwrap()) / (2.0 * h);
            assert!(
                (fd - e.gradient[d]).abs() < 1e-4 * gmax,
                "dof {d}: {fd} vs {}",
                e.gradient[d]
            );
        }
    }

    #[test]
    fn recovers_uniform_translation() {
        let m = mesh();
        let g = grid();
        let d = [3.4 * g.axial_spacing, 0.3 * g.lateral_spacing];
        let psf = Psf::default();
        let i1 = render_rf(&scatterers(), &psf, &g).unwrap();
        let i2 = render_rf(&shifted(&scatterers(), d), &psf, &g).unwrap();
        let reg = Regularizer::new(&RegularizerSpec::reference(RegularizerKind::Strain), &m).unwrap();
        let init = block_match_guess(
            &i1,
            &i2,
            &m,
            None,
            &BlockMatchConfig {
                window_axial: 1.0,
                window_lateral: 2.4,
                search_radius: Some([10, 3]),
                ..Default::default()
            },
        )
        .unwrap();
        let (u, rep) = register_pair(&i1, &i2, &init, &reg, &m, &SolverSettings::default()).unwrap();
        assert!(rep.converged, "{rep:?}");
        let mut sq = 0.0;
        for n in 0..m.n_nodes() {
            let v = u.get(n);
            sq += ((v[0] - d[0]) / g.axial_spacing).powi(2) + ((v[1] - d[1]) / g.lateral_spacing).powi(2);
        }
        let rms = (sq / m.n_nodes() as f64).sqrt();
        assert!(rms < 0.05, "rms {rms} px");
    }

    #[test]
    fn weak_regularization_on_blank_images_is_reported() {
        let m = mesh();
        let blank = RfImage::zeros(grid());
        let reg = Regularizer::new(&RegularizerSpec::new(RegularizerKind::Strain, 1.0), &m).unwrap();
        let err = register_pair(
            &blank,
            &blank,
            &NodalField::zeros(m.n_nodes()),
            &reg,
            &m,
            &SolverSettings::default(),
        )
        .unwrap_err();
        assert_eq!(err.code(), "regularization-too-weak");
    }

    #[test]
    fn sequence_of_identical_frames() {
        let m = mesh();
        let im = render_rf(&scatterers(), &Psf::default(), &grid()).unwrap();
        let frames = vec![im.clone(), im.clone(), im];
        let reg = Regularizer::new(&RegularizerSpec::reference(RegularizerKind::MomentumPlaneStrain), &m).unwrap();
        let bm = BlockMatchConfig {
            window_axial: 1.0,
            window_lateral: 2.4,
            search_radius: Some([5, 2]),
            ..Default::default()
        };
        let res = register_sequence(
            &frames,
            &reg,
            &m,
            InitPolicy::PreviousIncrement,
            &SolverSettings::default(),
            &bm,
        )
        .unwrap();
        assert_eq!(res.increments.len(), 2);
        assert_eq!(res.accumulated.len(), 3);
        for f in res.increments.iter().chain(&res.accumulated) {
            assert!(f.as_slice().iter().all(|&v| v == 0.0));
        }
        assert!(res.reports.iter().all(|r| r.converged));
        assert!(register_sequence(
            &frames[..1],
            &reg,
            &m,
            InitPolicy::Zero,
            &SolverSettings::default(),
            &bm
        )
        .is_err());
    }

    #[test]
    fn dispfield_round_trip_and_report() {
        let m = mesh();
        let inc = NodalField::from_fn(&m, |p| [p[0] * 1e-3, -p[1] / 7.0]);
        let acc = inc.scaled(3.0);
        let f = DispField::new(&m, inc, acc).unwrap();
        assert_eq!(DispField::from_bytes(&f.to_bytes()).unwrap(), f);
        assert!(DispField::from_bytes(b"dispfield v2\n").is_err());
        let rep = SolveReport {
            iterations: 1,
            final_step_ratio: 0.0,
            objective_trace: vec![2.0, 1.0],
            step_ratios: vec![0.0],
            converged: true,
            objective_increased: false,
        };
        let csv = reports_to_csv(&[("R_eps".into(), 0, &rep)]);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("R_eps,0,1,1.0"));
    }
}
