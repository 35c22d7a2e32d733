use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;
use std::sync::OnceLock;

use residcert::bundle;
use residcert::config::Flavor;
use residcert::ir::{self, ReplayBlock};
use residcert::pipeline::{run_demo, DemoOptions};
use residcert::tensor::Tensor;
use residcert_ffi::*;

/// One demo bundle shared by every test in this file.
fn bundle_dir() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        run_demo(dir.path(), &DemoOptions::toy(Flavor::Llama, 3)).unwrap();
        dir
    })
    .path()
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = rc_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn bounds() {
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(rc_global_bound([0.1, 0.2].as_ptr(), [2.0, 3.0].as_ptr(), 2, &mut out), RcStatus::Ok);
        assert!((out - 0.5).abs() < 1e-15);
        assert_eq!(rc_global_bound(ptr::null(), ptr::null(), 0, &mut out), RcStatus::Ok);
        assert_eq!(out, 0.0);
        assert_eq!(rc_global_bound(ptr::null(), [1.0].as_ptr(), 1, &mut out), RcStatus::NullPointer);
        assert_eq!(rc_global_bound([-1.0].as_ptr(), [1.0].as_ptr(), 1, &mut out), RcStatus::InvalidArgument);
        assert!(last_error().contains("non-negative"), "{}", last_error());
        assert_eq!(rc_hybrid_block_bound(570.0, 1100.0, &mut out), RcStatus::Ok);
        assert_eq!(out, 571.0 * 1100.0);
        assert_eq!(rc_hybrid_block_bound(1.0, 1.0, ptr::null_mut()), RcStatus::NullPointer);
    }
}

#[test]
fn block_interpret_matches_library() {
    let path = bundle_dir().join(bundle::block_weights(1));
    let block = ir::read_archive(&path).unwrap();
    let d = block.d_model;
    let t = 5;
    let x: Vec<f32> = (0..t * d).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.1).collect();
    let want = block.replay(&Tensor::new(vec![t, d], x.clone()).unwrap()).unwrap();

    let mut h: *mut RcBlock = ptr::null_mut();
    let mut y = vec![0f32; t * d];
    unsafe {
        assert_eq!(rc_block_open(c_path(&path).as_ptr(), &mut h), RcStatus::Ok);
        assert_eq!(rc_block_d_model(h), d);
        assert_eq!(rc_block_t_max(h), block.t_max);
        assert_eq!(rc_block_interpret(h, x.as_ptr(), t, y.as_mut_ptr()), RcStatus::Ok);
        // More tokens than the position table covers.
        let long = vec![0f32; (block.t_max + 1) * d];
        let mut sink = vec![0f32; long.len()];
        assert_ne!(rc_block_interpret(h, long.as_ptr(), block.t_max + 1, sink.as_mut_ptr()), RcStatus::Ok);
        rc_block_free(h);
        rc_block_free(ptr::null_mut());
    }
    assert_eq!(y, want.data());
}

#[test]
fn open_errors_carry_codes() {
    let mut h: *mut RcBlock = ptr::null_mut();
    unsafe {
        assert_eq!(rc_block_open(ptr::null(), &mut h), RcStatus::NullPointer);
        let missing = c_path(&bundle_dir().join("no/such.zip"));
        assert_eq!(rc_block_open(missing.as_ptr(), &mut h), RcStatus::Io);
        let not_zip = c_path(&bundle_dir().join(bundle::model_config()));
        assert_eq!(rc_block_open(not_zip.as_ptr(), &mut h), RcStatus::Format);
    }
    assert!(h.is_null());
}

#[test]
fn digest_and_verify() {
    let root = bundle_dir();
    let cert = root.join(bundle::block_certificate(2));
    unsafe {
        let mut hex: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(rc_digest_file(c_path(&cert).as_ptr(), &mut hex), RcStatus::Ok);
        let s = CStr::from_ptr(hex).to_str().unwrap().to_string();
        rc_string_free(hex);
        assert_eq!(s, residcert::digest::digest_file(&cert).unwrap());

        for (kind, rel) in [
            (RcCertKind::Block, bundle::block_certificate(2)),
            (RcCertKind::Model, bundle::MODEL_CERTIFICATE.to_string()),
            (RcCertKind::Edit, bundle::edit_certificate(0.5)),
        ] {
            let mut r: *mut RcReport = ptr::null_mut();
            let st = rc_verify(kind, c_path(&root.join(&rel)).as_ptr(), c_path(root).as_ptr(), 1e-6, 1e-9, &mut r);
            assert_eq!(st, RcStatus::Ok);
            assert!(rc_report_passed(r), "{rel}");
            let mut json: *mut std::ffi::c_char = ptr::null_mut();
            assert_eq!(rc_report_json(r, &mut json), RcStatus::Ok);
            let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
            rc_string_free(json);
            assert_eq!(v["passed"], true);
            rc_report_free(r);
        }

        // A wrong certificate kind completes with a failing report.
        let mut r: *mut RcReport = ptr::null_mut();
        let st = rc_verify(RcCertKind::Model, c_path(&cert).as_ptr(), c_path(root).as_ptr(), 1e-6, 1e-9, &mut r);
        assert_eq!(st, RcStatus::Ok);
        assert!(!rc_report_passed(r));
        rc_report_free(r);
        assert!(!rc_report_passed(ptr::null()));
        assert_eq!(
            rc_verify(RcCertKind::Block, c_path(&cert).as_ptr(), c_path(root).as_ptr(), -1.0, 0.0, &mut r),
            RcStatus::InvalidArgument
        );
    }
}

/// Compiles the C smoke program against the generated header and the static
/// library, then runs it on the shared bundle.
#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if std::process::Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test-exe> → target/<profile>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libresidcert_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let out_dir = tempfile::tempdir().unwrap();
    let exe = out_dir.path().join("smoke");
    let status = std::process::Command::new(&cc)
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let root = bundle_dir();
    let out = std::process::Command::new(&exe)
        .arg(root.join(bundle::block_weights(0)))
        .arg(root.join(bundle::block_certificate(0)))
        .arg(root)
        .output()
        .unwrap();
    assert!(out.status.success(), "smoke exited {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok residcert-interp/"));
}
