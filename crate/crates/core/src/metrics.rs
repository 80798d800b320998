//! Error norms, strain contrast and contrast-to-noise of registered fields.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Disk;
use crate::mesh::{NodalField, Point, QuadMesh, QuadratureRule};

/// Element-center strains `[ε_xx, ε_yy, ε_xy]` with the element areas used
/// as integration weights.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainField {
    pub values: Vec<[f64; 3]>,
    pub areas: Vec<f64>,
}

impl StrainField {
    pub fn n_elements(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v.map(|c| c * s)).collect(),
            areas: self.areas.clone(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![[0.0; 3]; self.values.len()],
            areas: self.areas.clone(),
        }
    }

    fn check_same(&self, other: &Self) -> Result<()> {
        if self.values.len() != other.values.len() {
            return Err(Error::Incompatible(format!(
                "strain fields have {} and {} elements",
                self.values.len(),
                other.values.len()
            )));
        }
        Ok(())
    }
}

/// Symmetric displacement gradient at every element center.
pub fn strain_from_displacement(mesh: &QuadMesh, u: &NodalField) -> Result<StrainField> {
    u.check_mesh(mesh)?;
    let mut values = Vec::with_capacity(mesh.n_elements());
    for e in 0..mesh.n_elements() {
        let g = u.gradient_local(mesh, e, [0.0, 0.0])?;
        values.push([g[0][0], g[1][1], 0.5 * (g[0][1] + g[1][0])]);
    }
    Ok(StrainField {
        values,
        areas: (0..mesh.n_elements()).map(|e| mesh.element_area(e)).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DispComponent {
    X,
    Y,
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrainComponent {
    Xx,
    Yy,
    Xy,
    Total,
}

impl fmt::Display for DispComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::X => "x",
            Self::Y => "y",
            Self::Total => "total",
        })
    }
}

impl fmt::Display for StrainComponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Xx => "xx",
            Self::Yy => "yy",
            Self::Xy => "xy",
            Self::Total => "total",
        })
    }
}

fn percent_ratio(diff_sq: f64, truth_sq: f64, what: &str) -> Result<f64> {
    if truth_sq <= 0.0 || !truth_sq.is_finite() {
        return Err(Error::UndefinedMetric(format!("{what}: reference field has zero norm")));
    }
    Ok(100.0 * (diff_sq / truth_sq).sqrt())
}

/// Relative L² displacement error in percent, integrated with 3×3 Gauss
/// quadrature over every element.
pub fn disp_error(mesh: &QuadMesh, truth: &NodalField, measured: &NodalField, component: DispComponent) -> Result<f64> {
    truth.check_mesh(mesh)?;
    measured.check_mesh(mesh)?;
    let rule = QuadratureRule::gauss(3);
    let pick = |v: [f64; 2]| -> f64 {
        match component {
            DispComponent::X => v[0] * v[0],
            DispComponent::Y => v[1] * v[1],
            DispComponent::Total => v[0] * v[0] + v[1] * v[1],
        }
    };
    let (mut num, mut den) = (0.0, 0.0);
    for e in 0..mesh.n_elements() {
        for (xi, w) in rule.iter() {
            let (_, det) = mesh.jacobian(e, xi);
            let t = truth.eval_local(mesh, e, xi);
            let m = measured.eval_local(mesh, e, xi);
            num += w * det * pick([t[0] - m[0], t[1] - m[1]]);
            den += w * det * pick(t);
        }
    }
    percent_ratio(num, den, &format!("displacement error ({component})"))
}

fn strain_density(v: [f64; 3], component: StrainComponent) -> f64 {
    match component {
        StrainComponent::Xx => v[0] * v[0],
        StrainComponent::Yy => v[1] * v[1],
        StrainComponent::Xy => v[2] * v[2],
        StrainComponent::Total => v[0] * v[0] + v[1] * v[1] + 2.0 * v[2] * v[2],
    }
}

/// Relative L² strain error in percent; `Total` uses the tensor double-dot
/// product, which counts the shear component twice.
pub fn strain_error(truth: &StrainField, measured: &StrainField, component: StrainComponent) -> Result<f64> {
    truth.check_same(measured)?;
    let (mut num, mut den) = (0.0, 0.0);
    for ((t, m), a) in truth.values.iter().zip(&measured.values).zip(&truth.areas) {
        let d = [t[0] - m[0], t[1] - m[1], t[2] - m[2]];
        num += a * strain_density(d, component);
        den += a * strain_density(*t, component);
    }
    percent_ratio(num, den, &format!("strain error ({component})"))
}

/// Inclusion region in physical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum RoiShape {
    Disk { center: Point, radius: f64 },
    Polygon { vertices: Vec<Point> },
}

impl RoiShape {
    pub fn contains(&self, p: Point) -> bool {
        match self {
            Self::Disk { center, radius } => Disk {
                center: *center,
                radius: *radius,
            }
            .contains(p),
            Self::Polygon { vertices } => point_in_polygon(vertices, p),
        }
    }
}

fn point_in_polygon(v: &[Point], p: Point) -> bool {
    let mut inside = false;
    let n = v.len();
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (v[i], v[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Element classification: `B` holds the elements whose centroid lies in the
/// inclusion ROI, `A` holds every other element of the mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiMask {
    in_b: Vec<bool>,
}

impl RoiMask {
    pub fn from_flags(in_b: Vec<bool>) -> Result<Self> {
        let nb = in_b.iter().filter(|&&b| b).count();
        if nb == 0 || nb == in_b.len() {
            return Err(Error::invalid(format!(
                "ROI must split the mesh into two nonempty regions ({nb} of {} elements inside)",
                in_b.len()
            )));
        }
        Ok(Self { in_b })
    }

    pub fn from_shape(mesh: &QuadMesh, shape: &RoiShape) -> Result<Self> {
        if let RoiShape::Polygon { vertices } = shape {
            if vertices.len() < 3 {
                return Err(Error::invalid("polygon ROI needs at least three vertices"));
            }
        }
        if let RoiShape::Disk { radius, .. } = shape {
            if !(*radius > 0.0) {
                return Err(Error::invalid("disk ROI radius must be positive"));
            }
        }
        Self::from_flags(
            (0..mesh.n_elements())
                .map(|e| shape.contains(mesh.centroid(e)))
                .collect(),
        )
    }

    pub fn in_b(&self, elem: usize) -> bool {
        self.in_b[elem]
    }

    pub fn count_a(&self) -> usize {
        self.in_b.len() - self.count_b()
    }

    pub fn count_b(&self) -> usize {
        self.in_b.iter().filter(|&&b| b).count()
    }

    fn check(&self, eps: &StrainField) -> Result<()> {
        if self.in_b.len() != eps.n_elements() {
            return Err(Error::Incompatible(format!(
                "ROI covers {} elements, strain field has {}",
                self.in_b.len(),
                eps.n_elements()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RegionStats {
    mean: f64,
    variance: f64,
    count: usize,
}

fn region_stats(eps: &StrainField, roi: &RoiMask, want_b: bool) -> RegionStats {
    let (mut area, mut sum) = (0.0, 0.0);
    let mut count = 0;
    for (e, v) in eps.values.iter().enumerate() {
        if roi.in_b(e) == want_b {
            area += eps.areas[e];
            sum += eps.areas[e] * v[0];
            count += 1;
        }
    }
    let mean = sum / area;
    let mut var = 0.0;
    for (e, v) in eps.values.iter().enumerate() {
        if roi.in_b(e) == want_b {
            var += eps.areas[e] * (v[0] - mean).powi(2);
        }
    }
    RegionStats {
        mean,
        variance: var / area,
        count,
    }
}

/// Area-weighted mean axial strain outside the ROI over the mean inside.
pub fn strain_ratio(eps: &StrainField, roi: &RoiMask) -> Result<f64> {
    roi.check(eps)?;
    let a = region_stats(eps, roi, false);
    let b = region_stats(eps, roi, true);
    if b.mean == 0.0 {
        return Err(Error::UndefinedMetric(
            "strain ratio: mean axial strain in the ROI is zero".into(),
        ));
    }
    Ok(a.mean / b.mean)
}

/// Elastographic contrast-to-noise ratio `2(ε_A − ε_B)²/(η_A² + η_B²)` with
/// `η²` the area-weighted variance of `ε_xx` in each region.
pub fn cnr_e(eps: &StrainField, roi: &RoiMask) -> Result<f64> {
    roi.check(eps)?;
    let a = region_stats(eps, roi, false);
    let b = region_stats(eps, roi, true);
    if a.count < 2 || b.count < 2 {
        return Err(Error::invalid("CNR needs at least two elements in each region"));
    }
    let den = a.variance + b.variance;
    if den == 0.0 {
        return Err(Error::UndefinedMetric(
            "CNR: axial strain variance is zero in both regions".into(),
        ));
    }
    Ok(2.0 * (a.mean - b.mean).powi(2) / den)
}

/// A metric that may be undefined; undefined values carry `+∞`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub defined: bool,
}

impl MetricValue {
    fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(value) => Ok(Self { value, defined: true }),
            Err(Error::UndefinedMetric(_)) => Ok(Self {
                value: f64::INFINITY,
                defined: false,
            }),
            Err(e) => Err(e),
        }
    }
}

/// Every metric of one measured field against the truth, in a fixed order.
pub fn metric_table(
    mesh: &QuadMesh,
    truth: &NodalField,
    measured: &NodalField,
    roi: &RoiMask,
) -> Result<Vec<(String, MetricValue)>> {
    let et = strain_from_displacement(mesh, truth)?;
    let em = strain_from_displacement(mesh, measured)?;
    let mut rows = Vec::new();
    for c in [DispComponent::X, DispComponent::Y, DispComponent::Total] {
        rows.push((
            format!("disp_error_{c}"),
            MetricValue::from_result(disp_error(mesh, truth, measured, c))?,
        ));
    }
    for c in [
        StrainComponent::Xx,
        StrainComponent::Yy,
        StrainComponent::Xy,
        StrainComponent::Total,
    ] {
        rows.push((
            format!("strain_error_{c}"),
            MetricValue::from_result(strain_error(&et, &em, c))?,
        ));
    }
    rows.push(("sr".into(), MetricValue::from_result(strain_ratio(&em, roi))?));
    rows.push(("cnr_e".into(), MetricValue::from_result(cnr_e(&em, roi))?));
    rows.push(("sr_truth".into(), MetricValue::from_result(strain_ratio(&et, roi))?));
    rows.push(("cnr_e_truth".into(), MetricValue::from_result(cnr_e(&et, roi))?));
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sequence: String,
    pub frame: usize,
    pub regularizer: String,
    pub metric: String,
    pub value: MetricValue,
}

pub const METRICS_HEADER: &str = "sequence,frame,regularizer,metric,value,defined";

pub fn metrics_to_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.12e},{}\n",
            r.sequence,
            r.frame,
            r.regularizer,
            r.metric,
            r.value.value,
            u8::from(r.value.defined)
        ));
    }
    s
}
