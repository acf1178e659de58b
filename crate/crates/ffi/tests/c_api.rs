use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dragan::config::RunConfig;
use dragan::eval::generate_one;
use dragan::session::Session;
use dragan::synthdata::{pictogram_at, render_pictogram, rgb8_to_tensor, tensor_to_rgb8, ToySignSpec};
use dragan::Rng;
use dragan_ffi::*;

fn last_error() -> String {
    let p = dragan_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_checkpoint(dir: &Path) -> std::path::PathBuf {
    let mut config = RunConfig::default();
    for (k, v) in [("resolution", "16"), ("base_width", "4"), ("critic_width", "4"), ("scales", "2"), ("scale_weights", "0.5,1")] {
        config.set(k, v).unwrap();
    }
    let session = Session::new(config).unwrap();
    let path = dir.join("tiny.ckpt");
    session.checkpoint().save(&path).unwrap();
    path
}

fn load(path: &Path) -> *mut DraganGenerator {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { dragan_generator_load(c.as_ptr(), &mut g) }, DraganStatus::Ok);
    assert!(!g.is_null());
    g
}

#[test]
fn pictogram_bytes_match_the_library() {
    let mut buf = vec![0u8; 3 * 24 * 24];
    assert_eq!(unsafe { dragan_render_pictogram(10, 24, buf.as_mut_ptr()) }, DraganStatus::Ok);
    let expected = tensor_to_rgb8(&render_pictogram(&ToySignSpec::from_class_id(10).unwrap(), 24).unwrap()).unwrap();
    assert_eq!(buf, expected);
    assert_eq!(
        unsafe { dragan_render_pictogram(500, 24, buf.as_mut_ptr()) },
        DraganStatus::InvalidArgument
    );
    assert!(!last_error().is_empty());
}

#[test]
fn generate_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = tiny_checkpoint(dir.path());
    let g = load(&path);
    let mut res = 0usize;
    assert_eq!(unsafe { dragan_generator_resolution(g, &mut res) }, DraganStatus::Ok);
    assert_eq!(res, 16);

    let scene: Vec<u8> = (0..3 * 16 * 16).map(|i| (i * 37 % 256) as u8).collect();
    let picto = tensor_to_rgb8(&pictogram_at::<f32>(&ToySignSpec::from_class_id(9).unwrap(), 16).unwrap()).unwrap();
    let mut out = vec![0u8; scene.len()];
    let status = unsafe { dragan_generate(g, scene.as_ptr(), picto.as_ptr(), 16, out.as_mut_ptr()) };
    assert_eq!(status, DraganStatus::Ok);

    let ck = dragan::checkpoint::Checkpoint::load(&path).unwrap();
    let x = rgb8_to_tensor::<f32>(&scene, 16, 16).unwrap();
    let p = rgb8_to_tensor::<f32>(&picto, 16, 16).unwrap();
    let y = generate_one(&ck.models.generator, &x, &p).unwrap();
    assert_eq!(out, tensor_to_rgb8(&y).unwrap());

    let status = unsafe { dragan_generate(g, scene.as_ptr(), picto.as_ptr(), 8, out.as_mut_ptr()) };
    assert_eq!(status, DraganStatus::InvalidArgument);
    assert!(last_error().contains("expects 16"));
    unsafe { dragan_generator_free(g) };
}

#[test]
fn missing_checkpoint_reports_io() {
    let c = CString::new("/nonexistent/model.ckpt").unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { dragan_generator_load(c.as_ptr(), &mut g) }, DraganStatus::Io);
    assert!(g.is_null());
    assert!(last_error().contains("/nonexistent/model.ckpt"));
}

#[test]
fn corrupt_checkpoint_reports_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ckpt");
    std::fs::write(&path, b"NOPE and some bytes").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { dragan_generator_load(c.as_ptr(), &mut g) }, DraganStatus::Checkpoint);
}

#[test]
fn null_pointers_are_rejected() {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { dragan_generator_load(ptr::null(), &mut g) }, DraganStatus::NullPointer);
    let mut res = 0usize;
    assert_eq!(
        unsafe { dragan_generator_resolution(ptr::null(), &mut res) },
        DraganStatus::NullPointer
    );
    assert_eq!(unsafe { dragan_render_pictogram(8, 8, ptr::null_mut()) }, DraganStatus::NullPointer);
    unsafe { dragan_generator_free(ptr::null_mut()) };
}

#[test]
fn psnr_through_the_c_api() {
    let (w, h) = (20usize, 20usize);
    let a: Vec<u8> = Rng::new(4).uniform_tensor::<f64>(&[3 * w * h], 20.0, 200.0).data().iter().map(|v| *v as u8).collect();
    let mut b = a.clone();
    let (mut db, mut identical) = (0.0f64, -1i32);
    let call = |b: &[u8], db: &mut f64, identical: &mut i32| unsafe {
        dragan_background_psnr(a.as_ptr(), b.as_ptr(), w, h, 10.0, 9.0, 5.0, db, identical)
    };
    assert_eq!(call(&b, &mut db, &mut identical), DraganStatus::Ok);
    assert_eq!(identical, 1);

    // one byte step outside the circle everywhere: error 1/127.5 per value
    for v in b.iter_mut() {
        *v += 1;
    }
    assert_eq!(call(&b, &mut db, &mut identical), DraganStatus::Ok);
    assert_eq!(identical, 0);
    let mse = (1.0f64 / 127.5).powi(2);
    assert!((db - 10.0 * (4.0 / mse).log10()).abs() < 1e-9, "{db}");

    let status = unsafe { dragan_background_psnr(a.as_ptr(), b.as_ptr(), w, h, 10.0, 9.0, 500.0, &mut db, &mut identical) };
    assert_eq!(status, DraganStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dragan.h");
    assert!(header.exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{}\"\nint main(void) {{ DraganGenerator *g = 0; return dragan_generator_load(\"x\", &g) == DRAGAN_STATUS_OK; }}\n",
            header.display()
        ),
    )
    .unwrap();
    match Command::new("cc").arg("-fsyntax-only").arg("-Wall").arg("-Werror").arg(&src).status() {
        Ok(status) => assert!(status.success()),
        Err(_) => eprintln!("no C compiler on PATH, header syntax not checked"),
    }
}
