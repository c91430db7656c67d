//! The C ABI exercised from Rust, plus a header compile check.
use merit_ffi::*;
use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

fn last_error() -> String {
    let p = merit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn shape_of(t: *const MeritTensor) -> Vec<usize> {
    unsafe {
        let mut s = vec![0; merit_tensor_rank(t)];
        assert_eq!(merit_tensor_shape(t, s.as_mut_ptr(), s.len()), MeritStatus::Ok);
        s
    }
}

fn values_of(t: *const MeritTensor) -> Vec<f64> {
    unsafe {
        let mut v = vec![0.0; merit_tensor_len(t)];
        assert_eq!(merit_tensor_values(t, v.as_mut_ptr(), v.len()), MeritStatus::Ok);
        v
    }
}

#[test]
fn tensor_roundtrip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.mrt").to_str().unwrap()).unwrap();
    let shape = [2usize, 3];
    let data = [1i16, -2, 3, 256, 0, -256];
    unsafe {
        let mut t = ptr::null_mut();
        assert_eq!(merit_tensor_from_fix16(shape.as_ptr(), 2, 8, data.as_ptr(), 6, &mut t), MeritStatus::Ok);
        assert_eq!(merit_tensor_dtype(t), 1);
        assert_eq!(merit_tensor_write(t, path.as_ptr()), MeritStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(merit_tensor_read(path.as_ptr(), &mut back), MeritStatus::Ok);
        assert_eq!(shape_of(back), shape);
        assert_eq!(values_of(back)[3], 1.0);
        let mut small = [0usize; 1];
        assert_eq!(merit_tensor_shape(back, small.as_mut_ptr(), 1), MeritStatus::BufferTooSmall);
        merit_tensor_free(t);
        merit_tensor_free(back);
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut t = ptr::null_mut();
        let shape = [2usize, 2];
        let data = [1.0f32; 3];
        assert_eq!(merit_tensor_from_f32(shape.as_ptr(), 2, data.as_ptr(), 3, &mut t), MeritStatus::ShapeMismatch);
        assert!(t.is_null());
        assert!(last_error().contains("SHAPE_MISMATCH"));

        let name = CString::new("nope").unwrap();
        let mut w = ptr::null_mut();
        assert_eq!(merit_workload_from_template(name.as_ptr(), ptr::null(), 0, &mut w), MeritStatus::UnknownTemplate);
        assert_eq!(merit_tensor_read(ptr::null(), &mut t), MeritStatus::NullPointer);

        let missing = CString::new("/nonexistent/x.mrt").unwrap();
        assert_eq!(merit_tensor_read(missing.as_ptr(), &mut t), MeritStatus::Io);
    }
}

#[test]
fn template_runs_full_and_tiled() {
    let name = CString::new("conv2d").unwrap();
    let params = CString::new("c_in=2,c_out=3,h=9,w=7,k=3").unwrap();
    unsafe {
        let mut w = ptr::null_mut();
        assert_eq!(merit_workload_from_template(name.as_ptr(), params.as_ptr(), 5, &mut w), MeritStatus::Ok);
        let mut full = ptr::null_mut();
        assert_eq!(merit_workload_run_full(w, &mut full), MeritStatus::Ok);
        let (t_p, t_a) = ([1usize, 4, 3], [1usize, 3, 3]);
        let (mut tiled, mut report) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(
            merit_workload_run_tiled(w, t_p.as_ptr(), 3, t_a.as_ptr(), 3, &mut tiled, &mut report),
            MeritStatus::Ok
        );
        assert_eq!(shape_of(full), [3, 9, 7]);
        assert_eq!(values_of(full), values_of(tiled));
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
        assert!(json["passes"].as_u64().unwrap() > 1);
        merit_string_free(report);

        let bad = [0usize, 1, 1];
        assert_eq!(
            merit_workload_run_tiled(w, bad.as_ptr(), 3, t_a.as_ptr(), 3, &mut tiled, ptr::null_mut()),
            MeritStatus::InvalidTiling
        );
        merit_tensor_free(full);
        merit_tensor_free(tiled);
        merit_workload_free(w);
    }
}

#[test]
fn workload_from_parts_matches_template() {
    let spec = merit::workloads::resolve("gemm", "m=3,n=4,k=5").unwrap();
    let w = spec.instantiate(2).unwrap();
    let want = merit::engine::run_full(&w).unwrap().to_f64_vec();
    let json = |s: String| CString::new(s).unwrap();
    let (va, vb, pg) = (json(w.view_a.to_json()), json(w.view_b.to_json()), json(w.program.to_json()));
    let (a_data, b_data) = (w.src_a.as_slice::<f32>().unwrap(), w.src_b.as_slice::<f32>().unwrap());
    unsafe {
        let (mut a, mut b, mut h, mut out) = (ptr::null_mut(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut());
        let (sa, sb) = (w.src_a.shape(), w.src_b.shape());
        assert_eq!(
            merit_tensor_from_f32(sa.as_ptr(), sa.len(), a_data.as_ptr(), a_data.len(), &mut a),
            MeritStatus::Ok
        );
        assert_eq!(
            merit_tensor_from_f32(sb.as_ptr(), sb.len(), b_data.as_ptr(), b_data.len(), &mut b),
            MeritStatus::Ok
        );
        assert_eq!(merit_workload_new(a, b, va.as_ptr(), vb.as_ptr(), pg.as_ptr(), &mut h), MeritStatus::Ok);
        merit_tensor_free(a);
        merit_tensor_free(b);
        assert_eq!(merit_workload_run_full(h, &mut out), MeritStatus::Ok);
        assert_eq!(values_of(out), want);
        merit_tensor_free(out);
        merit_workload_free(h);
    }
}

#[test]
fn view_footprint() {
    let spec = merit::workloads::resolve("conv2d", "k=5").unwrap();
    let view = CString::new(spec.instantiate(0).unwrap().view_a.to_json()).unwrap();
    let (t_p, t_a) = ([16usize, 8], [5usize, 5]);
    let mut per_axis = [0usize; 2];
    let mut words = 0u64;
    let st = unsafe {
        merit_view_footprint(view.as_ptr(), t_p.as_ptr(), 2, t_a.as_ptr(), 2, per_axis.as_mut_ptr(), 2, &mut words)
    };
    assert_eq!(st, MeritStatus::Ok, "{}", last_error());
    assert_eq!((per_axis, words), ([20, 12], 240));
}

#[test]
fn banks_route_and_reuse() {
    unsafe {
        let (mut ok, mut report) = (false, ptr::null_mut());
        let c = [1u64, 6, 12];
        assert_eq!(merit_banks_analyze(c.as_ptr(), 3, 8, 0, false, &mut ok, &mut report), MeritStatus::Ok);
        assert!(ok);
        let json: serde_json::Value = serde_json::from_str(CStr::from_ptr(report).to_str().unwrap()).unwrap();
        assert_eq!(json["conflicts"], serde_json::json!([]));
        merit_string_free(report);
        let c = [1u64, 2, 6];
        assert_eq!(merit_banks_analyze(c.as_ptr(), 3, 8, 0, false, &mut ok, ptr::null_mut()), MeritStatus::Ok);
        assert!(!ok);
        assert_eq!(merit_banks_analyze(c.as_ptr(), 3, 6, 0, false, &mut ok, ptr::null_mut()), MeritStatus::BadParams);

        let mut routed = false;
        let perm = [1usize, 0, 3, 2, 5, 4, 7, 6];
        assert_eq!(merit_route(8, perm.as_ptr(), &mut routed), MeritStatus::Ok);
        assert!(routed);
        let dup = [0usize, 0, 1, 2];
        assert_eq!(merit_route(4, dup.as_ptr(), &mut routed), MeritStatus::InvalidPermutation);
    }
    let mut rate = 0.0;
    assert_eq!(unsafe { merit_reuse_rate(90.0, 20.0, 10.0, &mut rate) }, MeritStatus::Ok);
    assert_eq!(rate, 3.0);
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        r#"#include "merit.h"
int smoke(void) {
    MeritTensor *t = NULL;
    size_t shape[1] = {2};
    float data[2] = {1.0f, 2.0f};
    MeritStatus s = merit_tensor_from_f32(shape, 1, data, 2, &t);
    merit_tensor_free(t);
    return s == MERIT_STATUS_OK ? 0 : (int)s;
}
"#,
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let out = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-c", "-I", include])
        .arg(&src)
        .arg("-o")
        .arg(dir.path().join("smoke.o"))
        .output()
        .unwrap_or_else(|e| panic!("running {cc}: {e}"));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
