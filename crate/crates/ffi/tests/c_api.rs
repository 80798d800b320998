use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use elastoreg_ffi::*;

fn last_error() -> String {
    unsafe {
        let n = er_last_error_message(ptr::null_mut(), 0);
        let mut buf = vec![0 as std::ffi::c_char; n + 1];
        er_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn mesh(x0: f64, y0: f64, w: f64, h: f64, nx: usize, ny: usize) -> *mut ErMesh {
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { er_mesh_structured(x0, y0, w, h, nx, ny, &mut m) },
        ErStatus::Ok
    );
    m
}

/// Smooth, well-resolved pattern sampled on a 1 x 1 pixel grid, shifted by `d`.
fn image(d: [f64; 2]) -> *mut ErImage {
    let (na, nl) = (40usize, 40usize);
    let f = |x: f64, y: f64| (0.3 * x).sin() + (0.25 * y).cos() + 0.3 * (0.2 * x + 0.15 * y).sin();
    let samples: Vec<f64> = (0..na)
        .flat_map(|i| (0..nl).map(move |j| f(i as f64 - d[0], j as f64 - d[1])))
        .collect();
    let mut img = ptr::null_mut();
    let st = unsafe { er_image_new(na, nl, 1.0, 1.0, 0.0, 0.0, samples.as_ptr(), &mut img) };
    assert_eq!(st, ErStatus::Ok, "{}", last_error());
    img
}

fn values(f: *const ErField) -> Vec<f64> {
    let n = unsafe { er_field_len(f) };
    let mut v = vec![0.0; n];
    assert_eq!(unsafe { er_field_values(f, v.as_mut_ptr(), n) }, ErStatus::Ok);
    v
}

#[test]
fn version_is_nul_terminated_semver() {
    let v = unsafe { CStr::from_ptr(er_version()) }.to_str().unwrap();
    assert_eq!(v.split('.').count(), 3);
}

#[test]
fn null_out_pointer_is_reported() {
    let st = unsafe { er_mesh_structured(0.0, 0.0, 1.0, 1.0, 2, 2, ptr::null_mut()) };
    assert_eq!(st, ErStatus::NullPointer);
    assert!(last_error().contains("out"));
}

#[test]
fn invalid_mesh_maps_to_invalid_argument() {
    let mut m = ptr::null_mut();
    let st = unsafe { er_mesh_structured(0.0, 0.0, -1.0, 1.0, 2, 2, &mut m) };
    assert_eq!(st, ErStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("positive"));
}

#[test]
fn success_clears_previous_error() {
    let mut m = ptr::null_mut();
    unsafe { er_mesh_structured(0.0, 0.0, 1.0, 1.0, 0, 2, &mut m) };
    assert!(!last_error().is_empty());
    let m = mesh(0.0, 0.0, 1.0, 1.0, 2, 2);
    assert_eq!(last_error(), "");
    unsafe { er_mesh_free(m) };
}

#[test]
fn error_message_truncates_to_buffer() {
    let mut m = ptr::null_mut();
    unsafe { er_mesh_structured(0.0, 0.0, 1.0, 1.0, 0, 0, &mut m) };
    let full = unsafe { er_last_error_message(ptr::null_mut(), 0) };
    let mut buf = [0x7f as std::ffi::c_char; 5];
    let n = unsafe { er_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(n, full);
    assert_eq!(buf[4], 0);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_bytes().len(), 4);
}

#[test]
fn mesh_counts_and_general_constructor() {
    let m = mesh(0.0, 0.0, 2.0, 1.0, 3, 2);
    assert_eq!(unsafe { er_mesh_node_count(m) }, 12);
    assert_eq!(unsafe { er_mesh_element_count(m) }, 6);
    unsafe { er_mesh_free(m) };

    let coords = [0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    let conn = [0u32, 1, 2, 3];
    let mut g = ptr::null_mut();
    assert_eq!(
        unsafe { er_mesh_new(coords.as_ptr(), 4, conn.as_ptr(), 1, &mut g) },
        ErStatus::Ok
    );
    assert_eq!(unsafe { er_mesh_element_count(g) }, 1);
    unsafe { er_mesh_free(g) };

    let clockwise = [0u32, 3, 2, 1];
    let st = unsafe { er_mesh_new(coords.as_ptr(), 4, clockwise.as_ptr(), 1, &mut g) };
    assert_ne!(st, ErStatus::Ok);
}

#[test]
fn free_functions_accept_null() {
    unsafe {
        er_mesh_free(ptr::null_mut());
        er_image_free(ptr::null_mut());
        er_field_free(ptr::null_mut());
        assert_eq!(er_mesh_node_count(ptr::null()), 0);
        assert_eq!(er_field_len(ptr::null()), 0);
    }
}

#[test]
fn field_round_trip_and_length_checks() {
    let v = [1.0, 2.0, 3.0, 4.0];
    let mut f = ptr::null_mut();
    assert_eq!(unsafe { er_field_new(v.as_ptr(), 4, &mut f) }, ErStatus::Ok);
    assert_eq!(values(f), v);
    let mut short = [0.0; 3];
    assert_eq!(
        unsafe { er_field_values(f, short.as_mut_ptr(), 3) },
        ErStatus::InvalidArgument
    );
    unsafe { er_field_free(f) };

    let mut odd = ptr::null_mut();
    assert_eq!(
        unsafe { er_field_new(v.as_ptr(), 3, &mut odd) },
        ErStatus::InvalidArgument
    );
}

#[test]
fn image_dims_and_sample_count_check() {
    let img = image([0.0, 0.0]);
    let (mut a, mut l) = (0, 0);
    assert_eq!(unsafe { er_image_dims(img, &mut a, &mut l) }, ErStatus::Ok);
    assert_eq!((a, l), (40, 40));
    unsafe { er_image_free(img) };

    let mut bad = ptr::null_mut();
    let st = unsafe { er_image_new(2, 2, 1.0, 1.0, 0.0, 0.0, ptr::null(), &mut bad) };
    assert_eq!(st, ErStatus::NullPointer);
}

#[test]
fn missing_image_file_is_not_found() {
    let path = CString::new("/nonexistent/elastoreg/frame.rf").unwrap();
    let mut img = ptr::null_mut();
    assert_eq!(unsafe { er_image_read(path.as_ptr(), &mut img) }, ErStatus::NotFound);
    assert!(last_error().contains("/nonexistent/elastoreg/frame.rf"));
}

#[test]
fn registration_recovers_a_rigid_shift() {
    let d = [0.6, -0.4];
    let i1 = image([0.0, 0.0]);
    let i2 = image(d);
    let m = mesh(8.0, 8.0, 24.0, 24.0, 4, 4);
    let mut init = ptr::null_mut();
    assert_eq!(
        unsafe { er_field_zeros(er_mesh_node_count(m), &mut init) },
        ErStatus::Ok
    );

    let mut settings = er_solver_settings_default();
    settings.gradient_mode = ErGradientMode::Warped;
    settings.max_iterations = 30;
    let mut u = ptr::null_mut();
    let mut iters = 0u32;
    let st = unsafe {
        er_register_pair(
            i1,
            i2,
            m,
            init,
            ErRegularizer::Strain,
            1e-3,
            &settings,
            &mut u,
            &mut iters,
        )
    };
    assert_eq!(st, ErStatus::Ok, "{}", last_error());
    assert!(iters >= 1);
    for node in values(u).chunks_exact(2) {
        assert!(
            (node[0] - d[0]).abs() < 1e-2 && (node[1] - d[1]).abs() < 1e-2,
            "{node:?}"
        );
    }

    let mut truth = ptr::null_mut();
    let exact: Vec<f64> = (0..unsafe { er_mesh_node_count(m) }).flat_map(|_| d).collect();
    assert_eq!(
        unsafe { er_field_new(exact.as_ptr(), exact.len(), &mut truth) },
        ErStatus::Ok
    );
    let mut err = f64::NAN;
    assert_eq!(
        unsafe { er_disp_error(m, truth, u, ErComponent::Total, &mut err) },
        ErStatus::Ok
    );
    assert!(err < 2.0, "displacement error {err}%");

    // A rigid shift carries no strain, so the relative strain error is undefined.
    let st = unsafe { er_strain_error(m, truth, u, ErComponent::Total, &mut err) };
    assert_eq!(st, ErStatus::UndefinedMetric);
    assert_eq!(
        unsafe { er_disp_error(m, truth, u, ErComponent::Xy, &mut err) },
        ErStatus::InvalidArgument
    );

    unsafe {
        er_field_free(u);
        er_field_free(truth);
        er_field_free(init);
        er_mesh_free(m);
        er_image_free(i1);
        er_image_free(i2);
    }
}

#[test]
fn non_positive_alpha_is_rejected() {
    let i1 = image([0.0, 0.0]);
    let m = mesh(8.0, 8.0, 24.0, 24.0, 2, 2);
    let mut init = ptr::null_mut();
    unsafe { er_field_zeros(er_mesh_node_count(m), &mut init) };
    let mut u = ptr::null_mut();
    let st = unsafe {
        er_register_pair(
            i1,
            i1,
            m,
            init,
            ErRegularizer::MomentumPlaneStress,
            -1.0,
            ptr::null(),
            &mut u,
            ptr::null_mut(),
        )
    };
    assert_eq!(st, ErStatus::InvalidArgument);
    assert!(u.is_null());
    unsafe {
        er_field_free(init);
        er_mesh_free(m);
        er_image_free(i1);
    }
}

#[test]
fn generated_header_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/elastoreg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "er_register_pair",
        "er_last_error_message",
        "ER_STATUS_NOT_FOUND",
        "typedef struct ErMesh ErMesh",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"elastoreg.h\"\nint main(void) { ErMesh *m = 0; ErStatus s = er_mesh_structured(0, 0, 1, 1, 1, 1, &m); er_mesh_free(m); return (int)s; }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler available; header syntax check skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
