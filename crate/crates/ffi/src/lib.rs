//! C ABI for elastoreg.
//!
//! Objects cross the boundary as opaque heap handles created by `er_*_new`
//! style constructors and released with the matching `er_*_free`. Every
//! fallible call returns an [`ErStatus`]; on failure a human-readable message
//! for the calling thread is available from [`er_last_error_message`].
//!
//! Coordinates follow the library convention: `x` is axial (depth) and `y`
//! is lateral. Nodal fields are interleaved `[x0, y0, x1, y1, ...]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use elastoreg::metrics::{disp_error, strain_error, strain_from_displacement, DispComponent, StrainComponent};
use elastoreg::registration::{register_pair, GradientMode, SolverSettings};
use elastoreg::regularizers::{Regularizer, RegularizerKind, RegularizerSpec};
use elastoreg::{Error, ImageGeometry, NodalField, QuadMesh, RfImage};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    SingularElement = 3,
    UnderConstrained = 4,
    SolverFailure = 5,
    RegularizationTooWeak = 6,
    Divergence = 7,
    UndefinedMetric = 8,
    Incompatible = 9,
    NotFound = 10,
    Format = 11,
    Config = 12,
    Io = 13,
    /// A Rust panic was caught at the boundary.
    Internal = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErRegularizer {
    Strain = 0,
    StrainIncompressible = 1,
    MomentumPlaneStrain = 2,
    MomentumPlaneStress = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErGradientMode {
    FrozenReference = 0,
    Warped = 1,
}

/// Field component selector for error metrics. `Xy` is only meaningful for
/// strain and is rejected by displacement metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErComponent {
    X = 0,
    Y = 1,
    Xy = 2,
    Total = 3,
}

/// Gauss-Newton settings for [`er_register_pair`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct ErSolverSettings {
    pub max_iterations: u32,
    pub step_tolerance: f64,
    pub gradient_mode: ErGradientMode,
}

/// Quadrilateral finite element mesh.
pub struct ErMesh(QuadMesh);

/// RF image on a regular pixel grid.
pub struct ErImage(RfImage);

/// Nodal displacement field.
pub struct ErField(NodalField);

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_last_error(msg: &str) {
    LAST_ERROR.with(|e| {
        let mut buf = e.borrow_mut();
        buf.clear();
        buf.extend(msg.bytes().filter(|&b| b != 0));
    });
}

fn status_of(err: &Error) -> ErStatus {
    match err.root() {
        Error::InvalidArgument(_) => ErStatus::InvalidArgument,
        Error::SingularElement { .. } => ErStatus::SingularElement,
        Error::UnderConstrained { .. } => ErStatus::UnderConstrained,
        Error::SolverFailure { .. } => ErStatus::SolverFailure,
        Error::RegularizationTooWeak { .. } => ErStatus::RegularizationTooWeak,
        Error::Divergence { .. } => ErStatus::Divergence,
        Error::UndefinedMetric(_) => ErStatus::UndefinedMetric,
        Error::Incompatible(_) => ErStatus::Incompatible,
        Error::NotFound(_) => ErStatus::NotFound,
        Error::Format { .. } => ErStatus::Format,
        Error::Config(_) => ErStatus::Config,
        Error::Io(_) => ErStatus::Io,
        Error::Context { .. } => ErStatus::Internal,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status plus thread-local
/// message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ErStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            ErStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(&format!("null pointer: {what}"));
            ErStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal error: {msg}"));
            ErStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::invalid("path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn er_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`) and returns the full message length in
/// bytes, excluding the terminator. Pass a null `buf` to query the length.
///
/// # Safety
/// `buf` must be null or valid for writes of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn er_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Structured mesh of `nx x ny` elements over
/// `[x0, x0 + width] x [y0, y0 + height]`, with `width` along the axial axis.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_mesh_structured(
    x0: f64,
    y0: f64,
    width: f64,
    height: f64,
    nx: usize,
    ny: usize,
    out: *mut *mut ErMesh,
) -> ErStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let mesh = QuadMesh::structured_at([x0, y0], width, height, nx, ny)?;
        *out = boxed(ErMesh(mesh));
        Ok(())
    })
}

/// General mesh from `n_nodes` interleaved coordinates and `n_elements`
/// counter-clockwise quadrilaterals of four node indices each.
///
/// # Safety
/// `coords` must hold `2 * n_nodes` values, `connectivity` `4 * n_elements`
/// values, and `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_mesh_new(
    coords: *const f64,
    n_nodes: usize,
    connectivity: *const u32,
    n_elements: usize,
    out: *mut *mut ErMesh,
) -> ErStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let xy = slice(coords, 2 * n_nodes, "coords")?;
        if n_elements > 0 && connectivity.is_null() {
            return Err(Failure::Null("connectivity"));
        }
        let conn: &[u32] = if n_elements == 0 {
            &[]
        } else {
            std::slice::from_raw_parts(connectivity, 4 * n_elements)
        };
        let nodes = xy.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let elements = conn
            .chunks_exact(4)
            .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize])
            .collect();
        *out = boxed(ErMesh(QuadMesh::new(nodes, elements)?));
        Ok(())
    })
}

/// # Safety
/// `mesh` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn er_mesh_free(mesh: *mut ErMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Number of nodes, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn er_mesh_node_count(mesh: *const ErMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.n_nodes())
}

/// Number of elements, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn er_mesh_element_count(mesh: *const ErMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.n_elements())
}

/// Image from `n_axial * n_lateral` samples, sample `(i, j)` at index
/// `i * n_lateral + j`, with pixel spacings and the position of pixel `(0, 0)`.
///
/// # Safety
/// `samples` must hold `n_axial * n_lateral` values and `out` must be valid
/// for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_image_new(
    n_axial: usize,
    n_lateral: usize,
    axial_spacing: f64,
    lateral_spacing: f64,
    origin_x: f64,
    origin_y: f64,
    samples: *const f64,
    out: *mut *mut ErImage,
) -> ErStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let n = n_axial
            .checked_mul(n_lateral)
            .ok_or_else(|| Error::invalid("image size overflows"))?;
        let data = slice(samples, n, "samples")?.to_vec();
        let geometry = ImageGeometry::new(n_axial, n_lateral, axial_spacing, lateral_spacing, [origin_x, origin_y])?;
        *out = boxed(ErImage(RfImage::from_samples(geometry, data)?));
        Ok(())
    })
}

/// Loads an image written by the command line tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_image_read(path: *const c_char, out: *mut *mut ErImage) -> ErStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let image = RfImage::read(path_arg(path)?)?;
        *out = boxed(ErImage(image));
        Ok(())
    })
}

/// # Safety
/// `image` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn er_image_free(image: *mut ErImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Writes the pixel counts of `image`.
///
/// # Safety
/// `image` must be a live handle; the out pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn er_image_dims(image: *const ErImage, n_axial: *mut usize, n_lateral: *mut usize) -> ErStatus {
    guard(|| {
        let image = &deref(image, "image")?.0;
        *out_ptr(n_axial, "n_axial")? = image.n_axial();
        *out_ptr(n_lateral, "n_lateral")? = image.n_lateral();
        Ok(())
    })
}

/// Zero displacement on `n_nodes` nodes.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_field_zeros(n_nodes: usize, out: *mut *mut ErField) -> ErStatus {
    guard(|| {
        *out_ptr(out, "out")? = boxed(ErField(NodalField::zeros(n_nodes)));
        Ok(())
    })
}

/// Field from `len` interleaved values; `len` must be even.
///
/// # Safety
/// `values` must hold `len` values and `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn er_field_new(values: *const f64, len: usize, out: *mut *mut ErField) -> ErStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let v = slice(values, len, "values")?.to_vec();
        *out = boxed(ErField(NodalField::from_values(v)?));
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn er_field_free(field: *mut ErField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Number of scalar values (twice the node count), or 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn er_field_len(field: *const ErField) -> usize {
    field.as_ref().map_or(0, |f| f.0.len())
}

/// Copies the interleaved values into `buf`, which must hold exactly
/// `er_field_len(field)` values.
///
/// # Safety
/// `field` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn er_field_values(field: *const ErField, buf: *mut f64, len: usize) -> ErStatus {
    guard(|| {
        let values = deref(field, "field")?.0.as_slice();
        if len != values.len() {
            return Err(Error::invalid(format!("buffer holds {len} values, field has {}", values.len())).into());
        }
        if len > 0 {
            if buf.is_null() {
                return Err(Failure::Null("buf"));
            }
            ptr::copy_nonoverlapping(values.as_ptr(), buf, len);
        }
        Ok(())
    })
}

/// Default solver settings.
#[no_mangle]
pub extern "C" fn er_solver_settings_default() -> ErSolverSettings {
    let d = SolverSettings::default();
    ErSolverSettings {
        max_iterations: d.max_iterations as u32,
        step_tolerance: d.step_tolerance,
        gradient_mode: ErGradientMode::FrozenReference,
    }
}

fn regularizer_kind(r: ErRegularizer) -> RegularizerKind {
    match r {
        ErRegularizer::Strain => RegularizerKind::Strain,
        ErRegularizer::StrainIncompressible => RegularizerKind::StrainIncompressible,
        ErRegularizer::MomentumPlaneStrain => RegularizerKind::MomentumPlaneStrain,
        ErRegularizer::MomentumPlaneStress => RegularizerKind::MomentumPlaneStress,
    }
}

/// Registers `target` onto `reference` over `mesh`, starting from `init`,
/// with regularizer `kind` at weight `alpha`. On success `*out` receives a
/// new field and, when non-null, `*iterations` the number of Gauss-Newton
/// updates taken.
///
/// # Safety
/// All handles must be live; `settings` may be null for defaults; `out` must
/// be valid for a pointer write; `iterations` may be null.
#[no_mangle]
pub unsafe extern "C" fn er_register_pair(
    reference: *const ErImage,
    target: *const ErImage,
    mesh: *const ErMesh,
    init: *const ErField,
    kind: ErRegularizer,
    alpha: f64,
    settings: *const ErSolverSettings,
    out: *mut *mut ErField,
    iterations: *mut u32,
) -> ErStatus {
    guard(|| {
        let i1 = &deref(reference, "reference")?.0;
        let i2 = &deref(target, "target")?.0;
        let mesh = &deref(mesh, "mesh")?.0;
        let init = &deref(init, "init")?.0;
        let out = out_ptr(out, "out")?;
        let s = settings
            .as_ref()
            .copied()
            .unwrap_or_else(|| er_solver_settings_default());
        let solver = SolverSettings {
            max_iterations: s.max_iterations as usize,
            step_tolerance: s.step_tolerance,
            gradient_mode: match s.gradient_mode {
                ErGradientMode::FrozenReference => GradientMode::FrozenReference,
                ErGradientMode::Warped => GradientMode::Warped,
            },
        };
        let spec = RegularizerSpec::new(regularizer_kind(kind), alpha);
        spec.validate()?;
        let reg = Regularizer::new(&spec, mesh)?;
        let (u, report) = register_pair(i1, i2, init, &reg, mesh, &solver)?;
        if let Some(it) = iterations.as_mut() {
            *it = report.iterations as u32;
        }
        *out = boxed(ErField(u));
        Ok(())
    })
}

/// Relative L2 displacement error of `measured` against `truth`, in percent.
///
/// # Safety
/// All handles must be live and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn er_disp_error(
    mesh: *const ErMesh,
    truth: *const ErField,
    measured: *const ErField,
    component: ErComponent,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        let mesh = &deref(mesh, "mesh")?.0;
        let truth = &deref(truth, "truth")?.0;
        let measured = &deref(measured, "measured")?.0;
        let out = out_ptr(out, "out")?;
        let c = match component {
            ErComponent::X => DispComponent::X,
            ErComponent::Y => DispComponent::Y,
            ErComponent::Total => DispComponent::Total,
            ErComponent::Xy => return Err(Error::invalid("displacement has no xy component").into()),
        };
        *out = disp_error(mesh, truth, measured, c)?;
        Ok(())
    })
}

/// Relative strain error in percent, with both strain fields derived from
/// the given displacements.
///
/// # Safety
/// All handles must be live and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn er_strain_error(
    mesh: *const ErMesh,
    truth: *const ErField,
    measured: *const ErField,
    component: ErComponent,
    out: *mut f64,
) -> ErStatus {
    guard(|| {
        let mesh = &deref(mesh, "mesh")?.0;
        let truth = strain_from_displacement(mesh, &deref(truth, "truth")?.0)?;
        let measured = strain_from_displacement(mesh, &deref(measured, "measured")?.0)?;
        let out = out_ptr(out, "out")?;
        let c = match component {
            ErComponent::X => StrainComponent::Xx,
            ErComponent::Y => StrainComponent::Yy,
            ErComponent::Xy => StrainComponent::Xy,
            ErComponent::Total => StrainComponent::Total,
        };
        *out = strain_error(&truth, &measured, c)?;
        Ok(())
    })
}
