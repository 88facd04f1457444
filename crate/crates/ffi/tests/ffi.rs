use std::ffi::{c_char, CString};
use std::ptr;

use koopman_lqr::data::write_trajectories;
use koopman_lqr::identify::KoopmanModel;
use koopman_lqr::simulate::{collect_training_data, InitLaw, InputLaw, Protocol, SystemSpec};
use koopman_lqr_ffi::*;

fn cubic_csv(dir: &std::path::Path) -> CString {
    let sys = SystemSpec::cubic(0.01);
    let protocol = Protocol {
        n_traj: 4,
        duration: 1.0,
        input_law: InputLaw::UniformIid { lo: -1.0, hi: 1.0 },
        init_law: InitLaw::UniformBox { lo: -1.0, hi: 1.0 },
        seed: 5,
    };
    let data = collect_training_data(&sys, &protocol).unwrap();
    let path = dir.join("train.csv");
    write_trajectories(&path, &data.trajectories).unwrap();
    CString::new(path.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0u8; 256];
    let n = unsafe { kl_last_error_message(buf.as_mut_ptr().cast::<c_char>(), buf.len()) };
    buf.truncate(n.min(255));
    String::from_utf8(buf).unwrap()
}

fn fit_model(path: &CString) -> *mut KlModel {
    let mut model = ptr::null_mut();
    let st = unsafe { kl_model_fit_csv(path.as_ptr(), KlKernel::Matern52, 1.0, 20, 1e-6, 3, &mut model) };
    assert_eq!(st, KlStatus::Ok, "{}", last_error());
    model
}

#[test]
fn fit_forecast_and_control_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let csv = cubic_csv(dir.path());
    let model = fit_model(&csv);

    let (mut d, mut nu, mut m) = (0, 0, 0);
    assert_eq!(unsafe { kl_model_dims(model, &mut d, &mut nu, &mut m) }, KlStatus::Ok);
    assert_eq!((d, nu, m), (1, 1, 20));

    let x0 = [0.5];
    let us = [0.1, -0.2, 0.3];
    let mut xs = [0.0; 4];
    assert_eq!(unsafe { kl_model_forecast(model, x0.as_ptr(), us.as_ptr(), 3, xs.as_mut_ptr()) }, KlStatus::Ok);

    let saved = dir.path().join("model.json");
    let saved_c = CString::new(saved.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { kl_model_save(model, saved_c.as_ptr()) }, KlStatus::Ok);
    let rust_model = KoopmanModel::load(&saved).unwrap();
    let expect = rust_model.forecast(&x0, &[vec![0.1], vec![-0.2], vec![0.3]]).unwrap();
    for (a, b) in xs.iter().zip(expect.iter().flatten()) {
        assert_eq!(a, b);
    }

    let mut reloaded = ptr::null_mut();
    assert_eq!(unsafe { kl_model_load(saved_c.as_ptr(), &mut reloaded) }, KlStatus::Ok);
    let mut ys = [0.0; 4];
    assert_eq!(unsafe { kl_model_forecast(reloaded, x0.as_ptr(), us.as_ptr(), 3, ys.as_mut_ptr()) }, KlStatus::Ok);
    assert_eq!(xs, ys);

    let mut ctrl = ptr::null_mut();
    let (q, r) = ([1.0], [1.0]);
    assert_eq!(unsafe { kl_controller_new(model, q.as_ptr(), r.as_ptr(), &mut ctrl) }, KlStatus::Ok);
    let mut u = [f64::NAN];
    assert_eq!(unsafe { kl_controller_control(ctrl, x0.as_ptr(), u.as_mut_ptr()) }, KlStatus::Ok);
    assert!(u[0].is_finite());
    let converged = unsafe { kl_controller_converged(ctrl) };
    assert!(converged == 0 || converged == 1);

    unsafe {
        kl_controller_free(ctrl);
        kl_model_free(reloaded);
        kl_model_free(model);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let missing = CString::new("/nonexistent/koopman/data.csv").unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { kl_model_fit_csv(missing.as_ptr(), KlKernel::Rbf, 1.0, 5, 1e-6, 0, &mut model) };
    assert_eq!(st, KlStatus::Io);
    assert!(model.is_null());
    assert!(!last_error().is_empty());

    let st = unsafe { kl_model_fit_csv(ptr::null(), KlKernel::Rbf, 1.0, 5, 1e-6, 0, &mut model) };
    assert_eq!(st, KlStatus::NullPointer);

    let dir = tempfile::tempdir().unwrap();
    let csv = cubic_csv(dir.path());
    let st = unsafe { kl_model_fit_csv(csv.as_ptr(), KlKernel::Rbf, -1.0, 5, 1e-6, 0, &mut model) };
    assert_eq!(st, KlStatus::InvalidArgument);

    let mut d = 0;
    let st = unsafe { kl_model_dims(ptr::null(), &mut d, &mut d, &mut d) };
    assert_eq!(st, KlStatus::NullPointer);

    unsafe {
        kl_model_free(ptr::null_mut());
        kl_controller_free(ptr::null_mut());
    }
}

#[test]
fn scalar_dare_matches_golden_ratio() {
    let one = [1.0];
    let (mut p, mut k) = ([0.0], [0.0]);
    let st = unsafe { kl_dare_solve(one.as_ptr(), one.as_ptr(), one.as_ptr(), one.as_ptr(), 1, 1, p.as_mut_ptr(), k.as_mut_ptr()) };
    assert_eq!(st, KlStatus::Ok);
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    assert!((p[0] - phi).abs() <= 1e-12);
    assert!((k[0] + phi / (1.0 + phi)).abs() <= 1e-12);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/koopman_lqr.h")).unwrap();
    for name in [
        "kl_last_error_message",
        "kl_model_fit_csv",
        "kl_model_load",
        "kl_model_save",
        "kl_model_dims",
        "kl_model_forecast",
        "kl_model_free",
        "kl_controller_new",
        "kl_controller_control",
        "kl_controller_converged",
        "kl_controller_free",
        "kl_dare_solve",
        "typedef struct KlModel KlModel",
        "KL_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}
