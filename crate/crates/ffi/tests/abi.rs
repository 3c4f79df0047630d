use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use amm_exec_ffi::*;

fn last_error() -> String {
    let p = amm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn swap_out_matches_the_closed_form() {
    let mut out = 0.0;
    let st = unsafe { amm_swap_out(1000.0, 2000.0, 10.0, 0.003, &mut out) };
    assert_eq!(st, AmmStatus::Ok);
    let net = 10.0 * 0.997;
    assert!((out - 2000.0 * net / (1000.0 + net)).abs() < 1e-12);

    let st = unsafe { amm_swap_out(-1.0, 2000.0, 10.0, 0.003, &mut out) };
    assert_eq!(st, AmmStatus::Domain);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { amm_swap_out(1.0, 1.0, 1.0, 0.0, ptr::null_mut()) }, AmmStatus::NullPointer);
}

#[test]
fn naive_value_of_the_reference_config() {
    let cfg = amm_config_default();
    let mut v = 0.0;
    assert_eq!(unsafe { amm_naive_value(cfg, &mut v) }, AmmStatus::Ok);
    assert!((v - 51_790.299_67).abs() < 0.01, "{v}");
    unsafe { amm_config_free(cfg) };
}

#[test]
fn config_errors_carry_a_message() {
    let bad = CString::new("[market]\nfee = 1").unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { amm_config_from_toml(bad.as_ptr(), &mut cfg) }, AmmStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("fee"));

    let good = CString::new("seed = 5\n[agent]\nhorizon = 30.0").unwrap();
    assert_eq!(unsafe { amm_config_from_toml(good.as_ptr(), &mut cfg) }, AmmStatus::Ok);
    unsafe { amm_config_free(cfg) };
    unsafe { amm_config_free(ptr::null_mut()) };
}

#[test]
fn network_and_policy_round_trip() {
    let cfg = amm_config_default();
    let net = unsafe { amm_network_xavier(cfg, 7) };
    assert_eq!(unsafe { amm_network_param_count(net) }, 54_209);

    let p = [0.5, 0.5, 0.5, 0.5, 0.5];
    let (mut a, mut b) = (0.0, 0.0);
    assert_eq!(unsafe { amm_network_forward(net, p.as_ptr(), 5, &mut a) }, AmmStatus::Ok);
    assert_eq!(unsafe { amm_network_forward(net, p.as_ptr(), 5, &mut b) }, AmmStatus::Ok);
    assert!(a.is_finite() && a == b);
    assert_eq!(unsafe { amm_network_forward(net, p.as_ptr(), 4, &mut a) }, AmmStatus::Domain);

    let mut pol = ptr::null_mut();
    assert_eq!(unsafe { amm_policy_new(cfg, net, &mut pol) }, AmmStatus::Ok);
    let mut l = -1.0;
    let st = unsafe { amm_policy_intensity(pol, 100.0, 1300.0, 38_461.5, 5e7, 40.0, &mut l) };
    assert_eq!(st, AmmStatus::Ok);
    assert!((0.0..=1.0).contains(&l));
    let st = unsafe { amm_policy_intensity(pol, 100.0, -1.0, 38_461.5, 5e7, 40.0, &mut l) };
    assert_eq!(st, AmmStatus::Domain);

    unsafe {
        amm_policy_free(pol);
        amm_network_free(net);
        amm_config_free(cfg);
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let cfg = amm_config_default();
    let path = CString::new("/nonexistent/checkpoint.dgm").unwrap();
    let mut net = ptr::null_mut();
    let st = unsafe { amm_network_load(cfg, path.as_ptr(), &mut net) };
    assert_ne!(st, AmmStatus::Ok);
    assert!(net.is_null());
    unsafe { amm_config_free(cfg) };
}

#[test]
fn simulation_is_reproducible() {
    let cfg = amm_config_default();
    let mut a = AmmPathSummary::default();
    let mut b = AmmPathSummary::default();
    let mut c = AmmPathSummary::default();
    unsafe {
        assert_eq!(amm_simulate_uncontrolled(cfg, 3, 0, &mut a), AmmStatus::Ok);
        assert_eq!(amm_simulate_uncontrolled(cfg, 3, 0, &mut b), AmmStatus::Ok);
        assert_eq!(amm_simulate_uncontrolled(cfg, 3, 1, &mut c), AmmStatus::Ok);
        amm_config_free(cfg);
    }
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.spot_up + a.spot_down + a.swap_x + a.swap_y > 0);
    assert_eq!(a.truncated, 0);
}

#[test]
fn null_handles_are_rejected() {
    let mut v = 0.0;
    assert_eq!(unsafe { amm_naive_value(ptr::null(), &mut v) }, AmmStatus::NullPointer);
    assert!(unsafe { amm_network_xavier(ptr::null(), 0) }.is_null());
    assert_eq!(unsafe { amm_network_param_count(ptr::null()) }, 0);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/amm_exec.h");
    assert!(header.is_file());
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["amm_swap_out", "amm_naive_value", "amm_policy_intensity", "AMM_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = std::env::temp_dir().join(format!("amm-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"amm_exec.h\"\nint main(void) { double v; AmmConfig *c = amm_config_default();\n\
         AmmStatus s = amm_naive_value(c, &v); amm_config_free(c); return s == AMM_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status();
    let _ = std::fs::remove_dir_all(&dir);
    match status {
        Ok(s) => assert!(s.success(), "header does not compile"),
        Err(e) => eprintln!("skipping C compile check: {e}"),
    }
}
