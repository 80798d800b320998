//! Regularization functionals on nodal displacement fields.
//!
//! Two families are provided. The strain functionals are quadratic:
//! `(α/2) ∫ ∇ˢu:∇ˢu + (α_i/2) ∫ (∇·u)²`. The momentum functionals penalize the
//! total variation of `∇·A[u]` with `A[u] = λ̄ (∇·u) I + 2 ∇ˢu`. For bilinear
//! elements `A` is close to piecewise constant, so the total variation reduces
//! to a sum over interior edges of `l · |[A]·n|`, smoothed by `δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{assemble_elements, isotropic_element_matrix};
use crate::mesh::{gauss_legendre, NodalField, QuadMesh};
use crate::sparse::{dot, CsrMatrix, TripletBuilder};

/// Smoothing used by the momentum functionals unless overridden.
pub const DEFAULT_DELTA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    Strain,
    StrainIncompressible,
    MomentumPlaneStrain,
    MomentumPlaneStress,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 4] = [
        RegularizerKind::Strain,
        RegularizerKind::StrainIncompressible,
        RegularizerKind::MomentumPlaneStrain,
        RegularizerKind::MomentumPlaneStress,
    ];

    pub fn is_momentum(self) -> bool {
        matches!(self, Self::MomentumPlaneStrain | Self::MomentumPlaneStress)
    }

    /// Short label used in reports (`R_eps`, `R_epsi`, `R_Peps`, `R_Psig`).
    pub fn label(self) -> &'static str {
        match self {
            Self::Strain => "R_eps",
            Self::StrainIncompressible => "R_epsi",
            Self::MomentumPlaneStrain => "R_Peps",
            Self::MomentumPlaneStress => "R_Psig",
        }
    }

    /// Weights selected for single-frame registration at about 0.8% strain
    /// in the reference study.
    pub fn reference_alpha(self) -> f64 {
        match self {
            Self::Strain => 24.8,
            Self::StrainIncompressible => 1.89e4,
            Self::MomentumPlaneStrain => 1.14e-4,
            Self::MomentumPlaneStress => 2.33e-4,
        }
    }
}

impl std::fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub alpha: f64,
    /// Incompressibility weight; defaults to `100 * alpha`.
    #[serde(default)]
    pub alpha_i: Option<f64>,
    /// Defaults to 9 (ν = 0.45) for plane strain and 2 for plane stress.
    #[serde(default)]
    pub lambda_bar: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, alpha: f64) -> Self {
        Self {
            kind,
            alpha,
            alpha_i: None,
            lambda_bar: None,
            delta: None,
        }
    }

    pub fn reference(kind: RegularizerKind) -> Self {
        Self::new(kind, kind.reference_alpha())
    }

    pub fn alpha_i(&self) -> f64 {
        match self.kind {
            RegularizerKind::StrainIncompressible => self.alpha_i.unwrap_or(100.0 * self.alpha),
            _ => 0.0,
        }
    }

    pub fn lambda_bar(&self) -> f64 {
        match self.kind {
            RegularizerKind::MomentumPlaneStrain => self.lambda_bar.unwrap_or(9.0),
            _ => self.lambda_bar.unwrap_or(2.0),
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or(DEFAULT_DELTA)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "regularization weight must be positive, got {}",
                self.alpha
            )));
        }
        match self.kind {
            RegularizerKind::Strain | RegularizerKind::StrainIncompressible => {
                if !(self.alpha_i() >= 0.0 && self.alpha_i().is_finite()) {
                    return Err(Error::invalid("incompressibility weight must be non-negative"));
                }
            }
            RegularizerKind::MomentumPlaneStrain | RegularizerKind::MomentumPlaneStress => {
                if !(self.delta() > 0.0 && self.delta().is_finite()) {
                    return Err(Error::invalid(format!(
                        "TV smoothing must be positive, got {}",
                        self.delta()
                    )));
                }
                let lb = self.lambda_bar();
                if self.kind == RegularizerKind::MomentumPlaneStress && lb != 2.0 {
                    return Err(Error::invalid(format!(
                        "plane-stress momentum needs lambda_bar = 2, got {lb}"
                    )));
                }
                if !(lb >= 0.0 && lb.is_finite()) {
                    return Err(Error::invalid(format!("lambda_bar must be non-negative, got {lb}")));
                }
            }
        }
        Ok(())
    }
}

/// `λ̄ = 2ν / (1 − 2ν)` for a plane-strain material with Poisson ratio `ν`.
pub fn plane_strain_lambda_bar(nu: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&nu) {
        return Err(Error::invalid(format!("Poisson ratio {nu} outside [0, 0.5)")));
    }
    Ok(2.0 * nu / (1.0 - 2.0 * nu))
}

/// Value, gradient and Gauss-Newton Hessian of a functional.
#[derive(Debug, Clone)]
pub struct RegEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: CsrMatrix,
}

/// Hessian of the strain functional; constant in `u`.
pub fn strain_matrix(mesh: &QuadMesh, alpha: f64, alpha_i: f64) -> Result<CsrMatrix> {
    assemble_elements(mesh, |e| isotropic_element_matrix(mesh, e, alpha / 2.0, alpha_i))
}

fn eval_quadratic(k: &CsrMatrix, u: &NodalField) -> RegEval {
    let gradient = k.mul_vec(u.as_slice());
    RegEval {
        value: 0.5 * dot(u.as_slice(), &gradient),
        gradient,
        hessian: k.clone(),
    }
}

/// Strain functional with 3×3 Gauss quadrature on the strain term and
/// element-center quadrature on the divergence term.
pub fn eval_strain_reg(mesh: &QuadMesh, u: &NodalField, alpha: f64, alpha_i: f64) -> Result<RegEval> {
    u.check_mesh(mesh)?;
    Ok(eval_quadratic(&strain_matrix(mesh, alpha, alpha_i)?, u))
}

/// Linear maps from nodal values to the `x` and `y` components of `[A]·n` at
/// each interior edge midpoint.
#[derive(Debug, Clone)]
pub struct EdgeJumpOperators {
    pub kx: CsrMatrix,
    pub ky: CsrMatrix,
    pub edge_lengths: Vec<f64>,
    pub lambda_bar: f64,
}

/// Row coefficients of `A[u]·n` in element `elem`, with `∇ˢu` at `local` and
/// the dilatation at the element center. Returns `(dofs, x-row, y-row)`.
fn traction_rows(
    mesh: &QuadMesh,
    elem: usize,
    local: [f64; 2],
    n: [f64; 2],
    lambda_bar: f64,
) -> ([usize; 8], [f64; 8], [f64; 8]) {
    let g = mesh
        .shape_gradients(elem, local)
        .expect("mesh elements are validated on construction");
    let gc = mesh
        .shape_gradients(elem, [0.0, 0.0])
        .expect("mesh elements are validated on construction");
    let nodes = mesh.elements()[elem];
    let mut dofs = [0; 8];
    let mut rx = [0.0; 8];
    let mut ry = [0.0; 8];
    for a in 0..4 {
        dofs[2 * a] = 2 * nodes[a];
        dofs[2 * a + 1] = 2 * nodes[a] + 1;
        // A·n = λ̄ div n + 2 ε n, expanded per nodal DOF
        rx[2 * a] = lambda_bar * gc[a][0] * n[0] + 2.0 * g[a][0] * n[0] + g[a][1] * n[1];
        rx[2 * a + 1] = lambda_bar * gc[a][1] * n[0] + g[a][0] * n[1];
        ry[2 * a] = g[a][1] * n[0] + lambda_bar * gc[a][0] * n[1];
        ry[2 * a + 1] = g[a][0] * n[0] + lambda_bar * gc[a][1] * n[1] + 2.0 * g[a][1] * n[1];
    }
    (dofs, rx, ry)
}

pub fn build_edge_operators(mesh: &QuadMesh, lambda_bar: f64) -> Result<EdgeJumpOperators> {
    let edges = mesh.interior_edges();
    if edges.is_empty() {
        return Err(Error::invalid(
            "momentum regularization needs at least one interior edge",
        ));
    }
    let (ne, nd) = (edges.len(), mesh.n_dofs());
    let mut tx = TripletBuilder::with_capacity(ne, nd, 16 * ne);
    let mut ty = TripletBuilder::with_capacity(ne, nd, 16 * ne);
    for (j, e) in edges.iter().enumerate() {
        for (elem, local, sign) in [(e.right, e.right_local, 1.0), (e.left, e.left_local, -1.0)] {
            let (dofs, rx, ry) = traction_rows(mesh, elem, local, e.normal, lambda_bar);
            for k in 0..8 {
                tx.push(j, dofs[k], sign * rx[k]);
                ty.push(j, dofs[k], sign * ry[k]);
            }
        }
    }
    Ok(EdgeJumpOperators {
        kx: tx.build(),
        ky: ty.build(),
        edge_lengths: edges.iter().map(|e| e.length).collect(),
        lambda_bar,
    })
}

impl EdgeJumpOperators {
    /// `([A]·n)_x` and `([A]·n)_y` for every interior edge.
    pub fn jumps(&self, u: &NodalField) -> Result<(Vec<f64>, Vec<f64>)> {
        if u.len() != self.kx.ncols() {
            return Err(Error::Incompatible(format!(
                "field has {} values, operators expect {}",
                u.len(),
                self.kx.ncols()
            )));
        }
        Ok((self.kx.mul_vec(u.as_slice()), self.ky.mul_vec(u.as_slice())))
    }

    /// `α √δ Σ l`, the value on any globally linear field.
    pub fn floor(&self, alpha: f64, delta: f64) -> f64 {
        alpha * delta.sqrt() * self.edge_lengths.iter().sum::<f64>()
    }
}

/// Smoothed edge-jump TV functional with the Gauss-Newton Hessian `Kᵀ D K`.
pub fn eval_momentum_reg(u: &NodalField, ops: &EdgeJumpOperators, alpha: f64, delta: f64) -> Result<RegEval> {
    if !(delta > 0.0) {
        return Err(Error::invalid(format!("TV smoothing must be positive, got {delta}")));
    }
    let (jx, jy) = ops.jumps(u)?;
    let ne = jx.len();
    let mut value = 0.0;
    let mut wx = vec![0.0; ne];
    let mut wy = vec![0.0; ne];
    let mut d = vec![0.0; ne];
    for j in 0..ne {
        let s = (jx[j] * jx[j] + jy[j] * jy[j] + delta).sqrt();
        let l = ops.edge_lengths[j];
        value += l * s;
        d[j] = alpha * l / s;
        wx[j] = d[j] * jx[j];
        wy[j] = d[j] * jy[j];
    }
    let gx = ops.kx.mul_vec_transpose(&wx);
    let gy = ops.ky.mul_vec_transpose(&wy);
    let gradient = gx.iter().zip(&gy).map(|(a, b)| a + b).collect();
    let n = ops.kx.ncols();
    let mut t = TripletBuilder::with_capacity(n, n, 2 * 256 * ne);
    for k in [&ops.kx, &ops.ky] {
        for (j, &dj) in d.iter().enumerate() {
            let (cols, vals) = k.row(j);
            for (a, &ca) in cols.iter().enumerate() {
                for (b, &cb) in cols.iter().enumerate() {
                    t.push(ca, cb, dj * vals[a] * vals[b]);
                }
            }
        }
    }
    Ok(RegEval {
        value: alpha * value,
        gradient,
        hessian: t.build(),
    })
}

/// A regularizer bound to a mesh, with its constant parts precomputed.
#[derive(Debug, Clone)]
pub enum Regularizer {
    Quadratic {
        spec: RegularizerSpec,
        matrix: CsrMatrix,
    },
    Momentum {
        spec: RegularizerSpec,
        ops: EdgeJumpOperators,
    },
}

impl Regularizer {
    pub fn new(spec: &RegularizerSpec, mesh: &QuadMesh) -> Result<Self> {
        spec.validate()?;
        Ok(if spec.kind.is_momentum() {
            Self::Momentum {
                spec: *spec,
                ops: build_edge_operators(mesh, spec.lambda_bar())?,
            }
        } else {
            Self::Quadratic {
                spec: *spec,
                matrix: strain_matrix(mesh, spec.alpha, spec.alpha_i())?,
            }
        })
    }

    pub fn spec(&self) -> &RegularizerSpec {
        match self {
            Self::Quadratic { spec, .. } | Self::Momentum { spec, .. } => spec,
        }
    }

    pub fn eval(&self, u: &NodalField) -> Result<RegEval> {
        match self {
            Self::Quadratic { matrix, .. } => {
                if u.len() != matrix.ncols() {
                    return Err(Error::Incompatible("field does not match the regularizer mesh".into()));
                }
                Ok(eval_quadratic(matrix, u))
            }
            Self::Momentum { spec, ops } => eval_momentum_reg(u, ops, spec.alpha, spec.delta()),
        }
    }
}

/// Result of integrating `|∇·A|` for a smoothed piecewise-constant `A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvLimitCheck {
    /// `∫ |∇·A_Δ|` over the whole domain.
    pub band_integral: f64,
    /// Part of `band_integral` coming from band intersections.
    pub crossing_integral: f64,
    /// `Σ l |[A]·n|` over interior edges of the coarse mesh.
    pub jump_sum: f64,
}

impl TvLimitCheck {
    pub fn discrepancy(&self) -> f64 {
        self.band_integral - self.jump_sum
    }
}

/// One interval of the refined tensor grid along an axis: either inside cell
/// `lo` (`lo == hi`) or a ramp of width `Δ` from cell `lo` to cell `hi`.
struct Piece {
    a: f64,
    b: f64,
    lo: usize,
    hi: usize,
}

fn pieces(origin: f64, length: f64, n: usize, band: f64) -> Vec<Piece> {
    let h = length / n as f64;
    let line = |i: usize| origin + h * i as f64;
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let a = if i == 0 { line(0) } else { line(i) + band / 2.0 };
        let b = if i + 1 == n { line(n) } else { line(i + 1) - band / 2.0 };
        out.push(Piece { a, b, lo: i, hi: i });
        if i + 1 < n {
            out.push(Piece {
                a: b,
                b: b + band,
                lo: i,
                hi: i + 1,
            });
        }
    }
    out
}

/// Replaces the piecewise-constant symmetric tensor field `tensors`
/// (`[A_xx, A_yy, A_xy]` per element of a structured mesh) by one that ramps
/// linearly across a band of width `band` around every interior grid line,
/// integrates `|∇·A|` on that refined construction, and compares it with the
/// edge-jump sum.
pub fn tv_limit_check(coarse: &QuadMesh, tensors: &[[f64; 3]], band: f64) -> Result<TvLimitCheck> {
    let layout = *coarse
        .layout()
        .ok_or_else(|| Error::invalid("band construction needs a structured coarse mesh"))?;
    if tensors.len() != coarse.n_elements() {
        return Err(Error::Incompatible(format!(
            "{} tensors for {} elements",
            tensors.len(),
            coarse.n_elements()
        )));
    }
    let hx = layout.width / layout.nx as f64;
    let hy = layout.height / layout.ny as f64;
    if !(band > 0.0 && band < hx.min(hy)) {
        return Err(Error::invalid(format!(
            "band width {band} does not nest inside cells of size {hx} x {hy}"
        )));
    }
    let px = pieces(layout.origin[0], layout.width, layout.nx, band);
    let py = pieces(layout.origin[1], layout.height, layout.ny, band);
    let cell = |i: usize, j: usize| tensors[j * layout.nx + i];
    let (gp, gw) = gauss_legendre(8);
    let (mut total, mut crossing) = (0.0, 0.0);
    for x in &px {
        for y in &py {
            let ramp_x = x.lo != x.hi;
            let ramp_y = y.lo != y.hi;
            if !ramp_x && !ramp_y {
                continue;
            }
            let (c00, c10, c01, c11) = (cell(x.lo, y.lo), cell(x.hi, y.lo), cell(x.lo, y.hi), cell(x.hi, y.hi));
            let sx = if ramp_x { 1.0 / band } else { 0.0 };
            let sy = if ramp_y { 1.0 / band } else { 0.0 };
            let (jx, jy) = ((x.b - x.a) / 2.0, (y.b - y.a) / 2.0);
            let mut part = 0.0;
            for (qa, wa) in gp.iter().zip(&gw) {
                let tx = if ramp_x { (qa + 1.0) / 2.0 } else { 0.0 };
                for (qb, wb) in gp.iter().zip(&gw) {
                    let ty = if ramp_y { (qb + 1.0) / 2.0 } else { 0.0 };
                    let mut dx = [0.0; 3];
                    let mut dy = [0.0; 3];
                    for c in 0..3 {
                        dx[c] = sx * ((1.0 - ty) * (c10[c] - c00[c]) + ty * (c11[c] - c01[c]));
                        dy[c] = sy * ((1.0 - tx) * (c01[c] - c00[c]) + tx * (c11[c] - c10[c]));
                    }
                    let div = [dx[0] + dy[2], dx[2] + dy[1]];
                    part += wa * wb * (div[0] * div[0] + div[1] * div[1]).sqrt();
                }
            }
            part *= jx * jy;
            total += part;
            if ramp_x && ramp_y {
                crossing += part;
            }
        }
    }
    let jump_sum = coarse
        .interior_edges()
        .iter()
        .map(|e| {
            let (l, r) = (tensors[e.left], tensors[e.right]);
            let d = [r[0] - l[0], r[1] - l[1], r[2] - l[2]];
            let n = e.normal;
            e.length * (d[0] * n[0] + d[2] * n[1]).hypot(d[2] * n[0] + d[1] * n[1])
        })
        .sum();
    Ok(TvLimitCheck {
        band_integral: total,
        crossing_integral: crossing,
        jump_sum,
    })
}
