//! Small-strain 2D elasticity on bilinear quads, used to produce ground-truth
//! displacement sequences.
//!
//! The stiffness comes from the energy `½ λ (tr ε)² + μ ε:ε`. The shear part is
//! integrated with 3×3 Gauss points and the volumetric part at the element
//! center, which keeps nearly incompressible materials from locking.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Disk, Rect};
use crate::io::{put_f64s, put_u64, read_bytes, write_atomic, Reader};
use crate::mesh::{NodalField, QuadMesh, QuadratureRule};
use crate::sparse::{norm2, CsrMatrix, SkylineCholesky, TripletBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElasticMode {
    PlaneStrain,
    PlaneStress,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialField {
    young_modulus: Vec<f64>,
    poisson_ratio: f64,
    mode: ElasticMode,
}

impl MaterialField {
    pub fn new(young_modulus: Vec<f64>, poisson_ratio: f64, mode: ElasticMode) -> Result<Self> {
        if let Some(e) = young_modulus.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::invalid(format!("Young's modulus must be positive, got {e}")));
        }
        let nu_ok = match mode {
            ElasticMode::PlaneStrain => (0.0..0.5).contains(&poisson_ratio),
            ElasticMode::PlaneStress => (0.0..=0.5).contains(&poisson_ratio),
        };
        if !nu_ok {
            return Err(Error::invalid(format!(
                "Poisson ratio {poisson_ratio} is not admissible for {mode:?}"
            )));
        }
        Ok(Self {
            young_modulus,
            poisson_ratio,
            mode,
        })
    }

    pub fn homogeneous(mesh: &QuadMesh, young_modulus: f64, poisson_ratio: f64, mode: ElasticMode) -> Result<Self> {
        Self::new(vec![young_modulus; mesh.n_elements()], poisson_ratio, mode)
    }

    /// Elements whose centroid lies in `inclusion` get `inclusion_modulus`.
    pub fn with_inclusion(
        mesh: &QuadMesh,
        background_modulus: f64,
        inclusion_modulus: f64,
        inclusion: Disk,
        poisson_ratio: f64,
        mode: ElasticMode,
    ) -> Result<Self> {
        let e = (0..mesh.n_elements())
            .map(|k| {
                if inclusion.contains(mesh.centroid(k)) {
                    inclusion_modulus
                } else {
                    background_modulus
                }
            })
            .collect();
        Self::new(e, poisson_ratio, mode)
    }

    pub fn young_modulus(&self) -> &[f64] {
        &self.young_modulus
    }

    pub fn poisson_ratio(&self) -> f64 {
        self.poisson_ratio
    }

    pub fn mode(&self) -> ElasticMode {
        self.mode
    }

    /// Effective in-plane Lamé parameters `(λ, μ)` of element `elem`.
    pub fn lame(&self, elem: usize) -> (f64, f64) {
        let e = self.young_modulus[elem];
        let nu = self.poisson_ratio;
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = match self.mode {
            ElasticMode::PlaneStrain => e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)),
            ElasticMode::PlaneStress => e * nu / (1.0 - nu * nu),
        };
        (lambda, mu)
    }

    fn check_mesh(&self, mesh: &QuadMesh) -> Result<()> {
        if self.young_modulus.len() != mesh.n_elements() {
            return Err(Error::Incompatible(format!(
                "material has {} elements, mesh has {}",
                self.young_modulus.len(),
                mesh.n_elements()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NodeConstraint {
    FixedXy,
    /// Displacement component `axis` is set to `value`; the other is free.
    Slip {
        axis: usize,
        value: f64,
    },
    TractionFree,
    Prescribed([f64; 2]),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpec {
    constraints: Vec<NodeConstraint>,
}

impl BoundarySpec {
    /// All nodes traction-free.
    pub fn free(n_nodes: usize) -> Self {
        Self {
            constraints: vec![NodeConstraint::TractionFree; n_nodes],
        }
    }

    pub fn set(&mut self, node: usize, c: NodeConstraint) {
        self.constraints[node] = c;
    }

    pub fn get(&self, node: usize) -> NodeConstraint {
        self.constraints[node]
    }

    pub fn n_nodes(&self) -> usize {
        self.constraints.len()
    }

    /// Constrained DOFs and their prescribed values, in DOF order.
    pub fn constrained_dofs(&self) -> Result<Vec<(usize, f64)>> {
        let mut out = Vec::new();
        for (n, c) in self.constraints.iter().enumerate() {
            match *c {
                NodeConstraint::FixedXy => {
                    out.push((2 * n, 0.0));
                    out.push((2 * n + 1, 0.0));
                }
                NodeConstraint::Slip { axis, value } => {
                    if axis > 1 {
                        return Err(Error::invalid(format!("slip axis {axis} at node {n}")));
                    }
                    out.push((2 * n + axis, value));
                }
                NodeConstraint::Prescribed(v) => {
                    out.push((2 * n, v[0]));
                    out.push((2 * n + 1, v[1]));
                }
                NodeConstraint::TractionFree => {}
            }
        }
        Ok(out)
    }
}

/// Element matrix of the quadratic form `∫ λ (tr ε)² / 2 + μ ε:ε`, with the
/// `μ` part on 3×3 Gauss points and the `λ` part at the element center.
pub(crate) fn isotropic_element_matrix(mesh: &QuadMesh, elem: usize, mu: f64, lambda: f64) -> Result<[[f64; 8]; 8]> {
    let mut k = [[0.0; 8]; 8];
    if mu != 0.0 {
        for (q, w) in QuadratureRule::gauss(3).iter() {
            let (g, det) = mesh.shape_gradients_det(elem, q)?;
            let s = mu * w * det;
            for a in 0..4 {
                for b in 0..4 {
                    let dot = g[a][0] * g[b][0] + g[a][1] * g[b][1];
                    for i in 0..2 {
                        for j in 0..2 {
                            let delta = if i == j { dot } else { 0.0 };
                            k[2 * a + i][2 * b + j] += s * (delta + g[a][j] * g[b][i]);
                        }
                    }
                }
            }
        }
    }
    if lambda != 0.0 {
        let (g, det) = mesh.shape_gradients_det(elem, [0.0, 0.0])?;
        let s = lambda * 4.0 * det;
        for a in 0..4 {
            for b in 0..4 {
                for i in 0..2 {
                    for j in 0..2 {
                        k[2 * a + i][2 * b + j] += s * g[a][i] * g[b][j];
                    }
                }
            }
        }
    }
    Ok(k)
}

/// Assembles per-element 8×8 blocks (computed in parallel) into a global matrix.
pub(crate) fn assemble_elements(
    mesh: &QuadMesh,
    element: impl Fn(usize) -> Result<[[f64; 8]; 8]> + Sync + Send,
) -> Result<CsrMatrix> {
    let blocks: Vec<[[f64; 8]; 8]> = (0..mesh.n_elements())
        .into_par_iter()
        .map(element)
        .collect::<Result<_>>()?;
    let n = mesh.n_dofs();
    let mut t = TripletBuilder::with_capacity(n, n, 64 * blocks.len());
    for (e, k) in blocks.iter().enumerate() {
        let nodes = mesh.elements()[e];
        for a in 0..4 {
            for i in 0..2 {
                for b in 0..4 {
                    for j in 0..2 {
                        t.push(2 * nodes[a] + i, 2 * nodes[b] + j, k[2 * a + i][2 * b + j]);
                    }
                }
            }
        }
    }
    Ok(t.build())
}

/// Global stiffness matrix over all `2 * n_nodes` DOFs.
pub fn stiffness_matrix(mesh: &QuadMesh, material: &MaterialField) -> Result<CsrMatrix> {
    material.check_mesh(mesh)?;
    assemble_elements(mesh, |e| {
        let (lambda, mu) = material.lame(e);
        isotropic_element_matrix(mesh, e, mu, lambda)
    })
}

/// Solves for the equilibrium displacement with the constrained DOFs eliminated.
pub fn solve_static(mesh: &QuadMesh, material: &MaterialField, bcs: &BoundarySpec) -> Result<NodalField> {
    if bcs.n_nodes() != mesh.n_nodes() {
        return Err(Error::Incompatible(format!(
            "boundary spec has {} nodes, mesh has {}",
            bcs.n_nodes(),
            mesh.n_nodes()
        )));
    }
    let k = stiffness_matrix(mesh, material)?;
    let n = mesh.n_dofs();
    let mut u = vec![0.0; n];
    let mut is_constrained = vec![false; n];
    for (d, v) in bcs.constrained_dofs()? {
        u[d] = v;
        is_constrained[d] = true;
    }
    let free: Vec<usize> = (0..n).filter(|&d| !is_constrained[d]).collect();
    if free.is_empty() {
        return NodalField::from_values(u);
    }
    let ku = k.mul_vec(&u);
    let rhs: Vec<f64> = free.iter().map(|&d| -ku[d]).collect();
    let kff = k.submatrix(&free);
    let chol = SkylineCholesky::factor(&kff).map_err(|e| match e {
        Error::RegularizationTooWeak { dof, .. } => Error::UnderConstrained { dof: free[dof] },
        other => other,
    })?;
    let uf = chol.solve(&rhs);
    let b_norm = norm2(&rhs);
    if b_norm > 0.0 {
        let r: Vec<f64> = kff.mul_vec(&uf).iter().zip(&rhs).map(|(a, b)| a - b).collect();
        let residual = norm2(&r) / b_norm;
        if !(residual <= 1e-8) {
            return Err(Error::SolverFailure { residual });
        }
    }
    for (i, &d) in free.iter().enumerate() {
        u[d] = uf[i];
    }
    NodalField::from_values(u)
}

/// Nodal forces `K u`; nonzero only where constraints act.
pub fn reactions(mesh: &QuadMesh, material: &MaterialField, u: &NodalField) -> Result<NodalField> {
    u.check_mesh(mesh)?;
    let k = stiffness_matrix(mesh, material)?;
    NodalField::from_values(k.mul_vec(u.as_slice()))
}

/// Area-weighted mean of `ε_xx` over the part of the mesh inside `window`,
/// sampled at 3×3 Gauss points.
pub fn window_mean_axial_strain(mesh: &QuadMesh, u: &NodalField, window: &Rect) -> Result<f64> {
    u.check_mesh(mesh)?;
    let rule = QuadratureRule::gauss(3);
    let (mut sum, mut area) = (0.0, 0.0);
    for e in 0..mesh.n_elements() {
        for (q, w) in rule.iter() {
            if !window.contains(mesh.forward_map(e, q)) {
                continue;
            }
            let (_, det) = mesh.jacobian(e, q);
            let grad = u.gradient_local(mesh, e, q)?;
            sum += grad[0][0] * w * det;
            area += w * det;
        }
    }
    if area == 0.0 {
        return Err(Error::invalid("image window does not overlap the mesh"));
    }
    Ok(sum / area)
}

/// Scales `solution` so that the window-mean axial strain of frame `k` is
/// `-k * mean_step_strain`. Frame 0 is the zero field.
pub fn make_truth_frames(
    solution: &NodalField,
    n_frames: usize,
    mean_step_strain: f64,
    mesh: &QuadMesh,
    image_window: &Rect,
) -> Result<Vec<NodalField>> {
    if n_frames < 2 {
        return Err(Error::invalid("at least two frames are required"));
    }
    if !(mean_step_strain > 0.0 && mean_step_strain.is_finite()) {
        return Err(Error::invalid("mean step strain must be positive"));
    }
    let mean = window_mean_axial_strain(mesh, solution, image_window)?;
    if mean == 0.0 || !mean.is_finite() {
        return Err(Error::invalid(
            "solution has zero mean axial strain in the image window",
        ));
    }
    Ok((0..n_frames)
        .map(|k| solution.scaled(-(k as f64) * mean_step_strain / mean))
        .collect())
}

const TRUTHSEQ_MAGIC: &str = "truthseq v1";

/// Ground-truth displacement frames tied to a mesh by its hash.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthSequence {
    pub mesh_hash: String,
    pub frames: Vec<NodalField>,
}

impl TruthSequence {
    pub fn new(mesh: &QuadMesh, frames: Vec<NodalField>) -> Result<Self> {
        for f in &frames {
            f.check_mesh(mesh)?;
        }
        Ok(Self {
            mesh_hash: mesh.hash(),
            frames,
        })
    }

    pub fn check_mesh(&self, mesh: &QuadMesh) -> Result<()> {
        if self.mesh_hash != mesh.hash() {
            return Err(Error::Incompatible(format!(
                "truth sequence belongs to mesh {}, got mesh {}",
                self.mesh_hash,
                mesh.hash()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n_nodes = self.frames.first().map_or(0, |f| f.n_nodes());
        let mut out = format!("{TRUTHSEQ_MAGIC}\n{}\n", self.mesh_hash).into_bytes();
        put_u64(&mut out, self.frames.len() as u64);
        put_u64(&mut out, n_nodes as u64);
        for f in &self.frames {
            put_f64s(&mut out, f.as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "truthseq");
        r.expect_line(TRUTHSEQ_MAGIC)?;
        let mesh_hash = r.line()?;
        let n_frames = r.u64()? as usize;
        let n_nodes = r.u64()? as usize;
        let frames = (0..n_frames)
            .map(|_| NodalField::from_values(r.f64_vec(2 * n_nodes)?))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { mesh_hash, frames })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?).map_err(|e| e.context(path.display().to_string()))
    }
}

/// 2D slice through a compressed phantom: a block of depth `depth` (axial,
/// starting at x = 0) and lateral width `width` centered on y = 0, pressed by a
/// centered top platen with slip and fixed at the bottom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomGeometry {
    pub depth: f64,
    pub width: f64,
    pub platen_width: f64,
    pub element_size: f64,
    pub background_modulus: f64,
    pub inclusion_modulus: f64,
    pub inclusion: Option<Disk>,
    pub poisson_ratio: f64,
    pub mode: ElasticMode,
}

pub struct PhantomModel {
    pub mesh: QuadMesh,
    pub material: MaterialField,
    pub bcs: BoundarySpec,
}

impl PhantomGeometry {
    /// Builds the model with the platen pushed down by `platen_displacement`.
    pub fn build(&self, platen_displacement: f64) -> Result<PhantomModel> {
        if !(self.element_size > 0.0) || !(self.depth > 0.0) || !(self.width > 0.0) {
            return Err(Error::invalid("phantom dimensions must be positive"));
        }
        let nx = (self.depth / self.element_size).round().max(1.0) as usize;
        let ny = (self.width / self.element_size).round().max(1.0) as usize;
        let mesh = QuadMesh::structured_at([0.0, -self.width / 2.0], self.depth, self.width, nx, ny)?;
        let material = match self.inclusion {
            Some(disk) => MaterialField::with_inclusion(
                &mesh,
                self.background_modulus,
                self.inclusion_modulus,
                disk,
                self.poisson_ratio,
                self.mode,
            )?,
            None => MaterialField::homogeneous(&mesh, self.background_modulus, self.poisson_ratio, self.mode)?,
        };
        let mut bcs = BoundarySpec::free(mesh.n_nodes());
        let tol = 1e-9 * self.depth.max(self.width);
        for (n, p) in mesh.nodes().iter().enumerate() {
            if (p[0] - self.depth).abs() < tol {
                bcs.set(n, NodeConstraint::FixedXy);
            } else if p[0].abs() < tol && p[1].abs() <= self.platen_width / 2.0 + tol {
                bcs.set(
                    n,
                    NodeConstraint::Slip {
                        axis: 0,
                        value: platen_displacement,
                    },
                );
            }
        }
        Ok(PhantomModel { mesh, material, bcs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Block `[0, lx] × [0, ly]` compressed by `delta` at x = 0 with slip on
    /// top and bottom, sides free, one lateral pin.
    fn uniaxial(mode: ElasticMode, nu: f64, delta: f64) -> (QuadMesh, NodalField) {
        let (lx, ly) = (10.0, 6.0);
        let mesh = QuadMesh::structured(lx, ly, 5, 3).unwrap();
        let mat = MaterialField::homogeneous(&mesh, 10.0, nu, mode).unwrap();
        let mut bcs = BoundarySpec::free(mesh.n_nodes());
        for (n, p) in mesh.nodes().iter().enumerate() {
            if p[0] == 0.0 {
                bcs.set(n, NodeConstraint::Slip { axis: 0, value: delta });
            } else if (p[0] - lx).abs() < 1e-12 {
                bcs.set(n, NodeConstraint::Slip { axis: 0, value: 0.0 });
            }
        }
        bcs.set(mesh.n_nodes() - 4, NodeConstraint::Slip { axis: 1, value: 0.0 });
        let u = solve_static(&mesh, &mat, &bcs).unwrap();
        (mesh, u)
    }

    fn all_strains(mesh: &QuadMesh, u: &NodalField) -> Vec<[[f64; 2]; 2]> {
        let mut out = Vec::new();
        for e in 0..mesh.n_elements() {
            for (q, _) in QuadratureRule::gauss(2).iter() {
                out.push(u.gradient_local(mesh, e, q).unwrap());
            }
        }
        out
    }

    #[test]
    fn uniaxial_plane_strain() {
        let (delta, lx, nu) = (0.08, 10.0, 0.3);
        let (mesh, u) = uniaxial(ElasticMode::PlaneStrain, nu, delta);
        let exx = -delta / lx;
        let eyy = -nu / (1.0 - nu) * exx;
        for g in all_strains(&mesh, &u) {
            assert!((g[0][0] - exx).abs() < 1e-8 * exx.abs());
            assert!((g[1][1] - eyy).abs() < 1e-8 * exx.abs());
            assert!((g[0][1] + g[1][0]).abs() < 1e-8 * exx.abs());
        }
    }

    #[test]
    fn uniaxial_plane_stress() {
        let (delta, lx) = (0.08, 10.0);
        for nu in [0.3, 0.495, 0.5] {
            let (mesh, u) = uniaxial(ElasticMode::PlaneStress, nu, delta);
            for g in all_strains(&mesh, &u) {
                assert!((g[0][0] + delta / lx).abs() < 1e-8 * delta / lx);
                assert!((g[1][1] - nu * delta / lx).abs() < 1e-8 * delta / lx);
            }
        }
    }

    #[test]
    fn nearly_incompressible_plane_strain_does_not_lock() {
        let (delta, lx, nu) = (0.08, 10.0, 0.495);
        let (mesh, u) = uniaxial(ElasticMode::PlaneStrain, nu, delta);
        for g in all_strains(&mesh, &u) {
            assert!((g[0][0] + delta / lx).abs() < 1e-8 * delta / lx);
        }
    }

    #[test]
    fn zero_prescribed_gives_zero_field() {
        let mesh = QuadMesh::structured(4.0, 4.0, 4, 4).unwrap();
        let mat = MaterialField::homogeneous(&mesh, 1.0, 0.45, ElasticMode::PlaneStrain).unwrap();
        let mut bcs = BoundarySpec::free(mesh.n_nodes());
        for n in mesh.boundary_nodes() {
            bcs.set(n, NodeConstraint::FixedXy);
        }
        let u = solve_static(&mesh, &mat, &bcs).unwrap();
        assert!(u.as_slice().iter().all(|&v| v == 0.0));
    }

    fn distorted_mesh() -> QuadMesh {
        let base = QuadMesh::structured(4.0, 4.0, 4, 4).unwrap();
        let boundary: std::collections::HashSet<usize> = base.boundary_nodes().into_iter().collect();
        let nodes = base
            .nodes()
            .iter()
            .enumerate()
            .map(|(n, p)| {
                if boundary.contains(&n) {
                    *p
                } else {
                    let s = (n as f64 * 1.7).sin();
                    [p[0] + 0.25 * s, p[1] - 0.2 * (n as f64 * 0.9).cos()]
                }
            })
            .collect();
        QuadMesh::new(nodes, base.elements().to_vec()).unwrap()
    }

    #[test]
    fn patch_test_on_distorted_mesh() {
        let mesh = distorted_mesh();
        for mode in [ElasticMode::PlaneStrain, ElasticMode::PlaneStress] {
            let e: Vec<f64> = (0..mesh.n_elements()).map(|_| 3.0).collect();
            let mat = MaterialField::new(e, 0.49, mode).unwrap();
            let lin = |p: [f64; 2]| [0.01 * p[0] - 0.003 * p[1] + 0.2, 0.004 * p[0] + 0.02 * p[1] - 0.1];
            let mut bcs = BoundarySpec::free(mesh.n_nodes());
            for n in mesh.boundary_nodes() {
                bcs.set(n, NodeConstraint::Prescribed(lin(mesh.nodes()[n])));
            }
            let u = solve_static(&mesh, &mat, &bcs).unwrap();
            for (n, p) in mesh.nodes().iter().enumerate() {
                let exact = lin(*p);
                let got = u.get(n);
                assert!((got[0] - exact[0]).abs() < 1e-10 && (got[1] - exact[1]).abs() < 1e-10);
            }
            for g in all_strains(&mesh, &u) {
                assert!((g[0][0] - 0.01).abs() < 1e-10 && (g[1][1] - 0.02).abs() < 1e-10);
                assert!((g[0][1] + 0.003).abs() < 1e-10 && (g[1][0] - 0.004).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stiffness_is_symmetric_and_positive_after_elimination() {
        let mesh = distorted_mesh();
        let mat = MaterialField::homogeneous(&mesh, 2.0, 0.495, ElasticMode::PlaneStrain).unwrap();
        let k = stiffness_matrix(&mesh, &mat).unwrap();
        assert!(k.asymmetry() < 1e-12 * k.max_abs());
        let mut bcs = BoundarySpec::free(mesh.n_nodes());
        bcs.set(0, NodeConstraint::FixedXy);
        bcs.set(4, NodeConstraint::Slip { axis: 1, value: 0.0 });
        let fixed: Vec<usize> = bcs.constrained_dofs().unwrap().iter().map(|c| c.0).collect();
        let free: Vec<usize> = (0..mesh.n_dofs()).filter(|d| !fixed.contains(d)).collect();
        assert!(SkylineCholesky::factor(&k.submatrix(&free)).is_ok());
        // rigid translations and rotation are in the kernel of the full matrix
        let rot = NodalField::from_fn(&mesh, |p| [-p[1], p[0]]);
        let kr = k.mul_vec(rot.as_slice());
        assert!(norm2(&kr) < 1e-10 * k.max_abs());
    }

    #[test]
    fn under_constrained_is_reported() {
        let mesh = QuadMesh::structured(4.0, 4.0, 2, 2).unwrap();
        let mat = MaterialField::homogeneous(&mesh, 1.0, 0.3, ElasticMode::PlaneStrain).unwrap();
        let mut bcs = BoundarySpec::free(mesh.n_nodes());
        bcs.set(0, NodeConstraint::Slip { axis: 0, value: 0.1 });
        let err = solve_static(&mesh, &mat, &bcs).unwrap_err();
        assert!(matches!(err, Error::UnderConstrained { .. }), "{err}");
    }

    #[test]
    fn invalid_materials_rejected() {
        assert!(MaterialField::new(vec![1.0, 0.0], 0.3, ElasticMode::PlaneStrain).is_err());
        assert!(MaterialField::new(vec![1.0], 0.5, ElasticMode::PlaneStrain).is_err());
        assert!(MaterialField::new(vec![1.0], 0.5, ElasticMode::PlaneStress).is_ok());
        assert!(MaterialField::new(vec![1.0], -0.1, ElasticMode::PlaneStress).is_err());
    }

    fn small_phantom() -> PhantomGeometry {
        PhantomGeometry {
            depth: 20.0,
            width: 24.0,
            platen_width: 12.0,
            element_size: 1.0,
            background_modulus: 10.0,
            inclusion_modulus: 40.0,
            inclusion: Some(Disk {
                center: [8.0, 0.0],
                radius: 3.0,
            }),
            poisson_ratio: 0.495,
            mode: ElasticMode::PlaneStrain,
        }
    }

    #[test]
    fn reactions_balance() {
        let m = small_phantom().build(0.2).unwrap();
        let u = solve_static(&m.mesh, &m.material, &m.bcs).unwrap();
        let f = reactions(&m.mesh, &m.material, &u).unwrap();
        let (mut sum, mut scale) = ([0.0; 2], 0.0f64);
        for n in 0..m.mesh.n_nodes() {
            let r = f.get(n);
            if m.bcs.get(n) == NodeConstraint::TractionFree {
                assert!(r[0].abs() < 1e-8 && r[1].abs() < 1e-8);
            }
            sum[0] += r[0];
            sum[1] += r[1];
            scale = scale.max(r[0].abs()).max(r[1].abs());
        }
        assert!(scale > 0.0);
        assert!(sum[0].abs() < 1e-8 * scale && sum[1].abs() < 1e-8 * scale);
    }

    #[test]
    fn stiff_inclusion_strains_less() {
        let geo = small_phantom();
        let m = geo.build(0.2).unwrap();
        let u = solve_static(&m.mesh, &m.material, &m.bcs).unwrap();
        let disk = geo.inclusion.unwrap();
        let (mut inside, mut ni, mut outside, mut no) = (0.0, 0, 0.0, 0);
        for e in 0..m.mesh.n_elements() {
            let c = m.mesh.centroid(e);
            let exx = u.gradient_local(&m.mesh, e, [0.0, 0.0]).unwrap()[0][0];
            if disk.contains(c) {
                inside += exx;
                ni += 1;
            } else if c[0] > 3.0 && c[0] < 13.0 && c[1].abs() < 6.0 {
                outside += exx;
                no += 1;
            }
        }
        let (inside, outside) = (inside / ni as f64, outside / no as f64);
        assert!(inside < 0.0 && outside < 0.0);
        assert!(inside.abs() < outside.abs(), "inside {inside} outside {outside}");
    }

    #[test]
    fn truth_frames_scale_linearly() {
        let geo = small_phantom();
        let m = geo.build(0.2).unwrap();
        let u = solve_static(&m.mesh, &m.material, &m.bcs).unwrap();
        let window = Rect::new([2.0, -6.0], [14.0, 6.0]);
        let frames = make_truth_frames(&u, 20, 0.0035, &m.mesh, &window).unwrap();
        assert!(frames[0].as_slice().iter().all(|&v| v == 0.0));
        let m1 = window_mean_axial_strain(&m.mesh, &frames[1], &window).unwrap();
        assert!((m1 + 0.0035).abs() < 1e-12);
        let last = window_mean_axial_strain(&m.mesh, &frames[19], &window).unwrap();
        assert!((last + 19.0 * 0.0035).abs() < 1e-12);
        let two = make_truth_frames(&u, 2, 0.004, &m.mesh, &window).unwrap();
        let m2 = window_mean_axial_strain(&m.mesh, &two[1], &window).unwrap();
        assert!((m2 + 0.004).abs() < 1e-12);
        let zero = NodalField::zeros(m.mesh.n_nodes());
        assert!(make_truth_frames(&zero, 3, 0.004, &m.mesh, &window).is_err());
        assert!(make_truth_frames(&u, 1, 0.004, &m.mesh, &window).is_err());
    }

    #[test]
    fn truthseq_round_trip() {
        let mesh = QuadMesh::structured(3.0, 2.0, 3, 2).unwrap();
        let frames = vec![
            NodalField::zeros(mesh.n_nodes()),
            NodalField::from_fn(&mesh, |p| [0.1 * p[0], std::f64::consts::PI * p[1]]),
        ];
        let seq = TruthSequence::new(&mesh, frames).unwrap();
        let back = TruthSequence::from_bytes(&seq.to_bytes()).unwrap();
        assert_eq!(back, seq);
        back.check_mesh(&mesh).unwrap();
        let other = QuadMesh::structured(3.0, 2.0, 3, 1).unwrap();
        assert!(back.check_mesh(&other).is_err());
        let mut bytes = seq.to_bytes();
        bytes.pop();
        assert!(TruthSequence::from_bytes(&bytes).is_err());
    }
}
