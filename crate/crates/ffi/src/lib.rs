//! C ABI over the `amm-exec` core.
//!
//! Every fallible function returns an [`AmmStatus`] and writes its result
//! through an out-pointer only on success. The message of the most recent
//! failure on the calling thread is available from [`amm_last_error`].
//! Handles are opaque and owned by the caller until passed to the matching
//! `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use amm_exec::cli::load_network;
use amm_exec::config::RunConfig;
use amm_exec::dgm::NetworkParams;
use amm_exec::market::{self, EventKind, MarketState, PathRngs, Policy};
use amm_exec::strategy::{naive_value, policy_from_network, NetworkPolicy};
use amm_exec::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Domain = 3,
    InfeasibleSwap = 4,
    InsufficientInventory = 5,
    Config = 6,
    Checkpoint = 7,
    Parse = 8,
    ContractViolation = 9,
    Io = 10,
    Panic = 11,
    Other = 12,
}

impl From<&Error> for AmmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Domain(_) => AmmStatus::Domain,
            Error::InfeasibleSwap(_) => AmmStatus::InfeasibleSwap,
            Error::InsufficientInventory { .. } => AmmStatus::InsufficientInventory,
            Error::Config(_) => AmmStatus::Config,
            Error::Checkpoint(_) => AmmStatus::Checkpoint,
            Error::Parse { .. } | Error::Json(_) => AmmStatus::Parse,
            Error::ContractViolation(_) => AmmStatus::ContractViolation,
            Error::Io(_) => AmmStatus::Io,
            _ => AmmStatus::Other,
        }
    }
}

/// Run configuration handle.
pub struct AmmConfig(RunConfig);

/// Trained value network handle.
pub struct AmmNetwork(NetworkParams);

/// Feedback policy handle.
pub struct AmmPolicy(NetworkPolicy);

/// Counts and terminal state of one simulated market path.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AmmPathSummary {
    pub spot_up: u64,
    pub spot_down: u64,
    pub swap_x: u64,
    pub swap_y: u64,
    pub terminal_spot: f64,
    pub terminal_rx: f64,
    pub terminal_ry: f64,
    pub terminal_spread: f64,
    /// Nonzero when the path hit the event cap before the horizon.
    pub truncated: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard<F: FnOnce() -> Result<(), (AmmStatus, String)>>(f: F) -> AmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmmStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside amm-exec".into());
            AmmStatus::Panic
        }
    }
}

fn core(e: Error) -> (AmmStatus, String) {
    ((&e).into(), e.to_string())
}

fn null(name: &str) -> (AmmStatus, String) {
    (AmmStatus::NullPointer, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, (AmmStatus, String)> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (AmmStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, (AmmStatus, String)> {
    p.as_ref().ok_or_else(|| null(name))
}

/// Message of the last failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn amm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Output of swapping `pi` of one token into reserves `(a, b)` with fee
/// `phi_fee`.
///
/// # Safety
/// `out` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_swap_out(a: f64, b: f64, pi: f64, phi_fee: f64, out: *mut f64) -> AmmStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = market::swap_out(a, b, pi, phi_fee).map_err(core)?;
        Ok(())
    })
}

/// Reference configuration.
#[no_mangle]
pub extern "C" fn amm_config_default() -> *mut AmmConfig {
    Box::into_raw(Box::new(AmmConfig(RunConfig::default())))
}

/// Parses a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_config_from_toml(toml: *const c_char, out: *mut *mut AmmConfig) -> AmmStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let cfg = RunConfig::from_toml_str(text).map_err(core)?;
        *out = Box::into_raw(Box::new(AmmConfig(cfg)));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn amm_config_free(cfg: *mut AmmConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Value of selling the whole initial inventory at time zero.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_naive_value(cfg: *const AmmConfig, out: *mut f64) -> AmmStatus {
    guard(|| {
        let cfg = &handle(cfg, "cfg")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let model = cfg.model().map_err(core)?;
        let m = cfg.initial_market().map_err(core)?;
        *out = naive_value(&model, &m, cfg.agent.q).map_err(core)?;
        Ok(())
    })
}

/// Loads a checkpoint, checking it against the configured architecture.
///
/// # Safety
/// `cfg` must be a live handle, `path` a NUL-terminated string and `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_network_load(
    cfg: *const AmmConfig,
    path: *const c_char,
    out: *mut *mut AmmNetwork,
) -> AmmStatus {
    guard(|| {
        let cfg = &handle(cfg, "cfg")?.0;
        let path = str_arg(path, "path")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let net = load_network(cfg, Path::new(path)).map_err(core)?;
        *out = Box::into_raw(Box::new(AmmNetwork(net)));
        Ok(())
    })
}

/// Freshly initialised network of the configured architecture.
///
/// # Safety
/// `cfg` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn amm_network_xavier(cfg: *const AmmConfig, seed: u64) -> *mut AmmNetwork {
    match cfg.as_ref() {
        Some(c) => Box::into_raw(Box::new(AmmNetwork(NetworkParams::xavier(c.0.train.architecture, seed)))),
        None => {
            set_error("cfg is null".into());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `net` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn amm_network_free(net: *mut AmmNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Number of trainable parameters; 0 for a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn amm_network_param_count(net: *const AmmNetwork) -> usize {
    net.as_ref().map_or(0, |n| n.0.len())
}

/// Network output at a normalised point of length `dim`.
///
/// # Safety
/// `net` must be a live handle, `point` valid for `dim` reads and `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_network_forward(
    net: *const AmmNetwork,
    point: *const f64,
    dim: usize,
    out: *mut f64,
) -> AmmStatus {
    guard(|| {
        let net = &handle(net, "net")?.0;
        if point.is_null() {
            return Err(null("point"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if dim != net.arch.input_dim {
            return Err((
                AmmStatus::Domain,
                format!("point has {dim} coordinates, network expects {}", net.arch.input_dim),
            ));
        }
        *out = net.forward(std::slice::from_raw_parts(point, dim));
        Ok(())
    })
}

/// Feedback policy of a network under a configuration. The network is copied;
/// both handles remain owned by the caller.
///
/// # Safety
/// `cfg` and `net` must be live handles; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_policy_new(
    cfg: *const AmmConfig,
    net: *const AmmNetwork,
    out: *mut *mut AmmPolicy,
) -> AmmStatus {
    guard(|| {
        let cfg = &handle(cfg, "cfg")?.0;
        let net = &handle(net, "net")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let policy = policy_from_network(
            net.clone(),
            &cfg.model().map_err(core)?,
            &cfg.agent_params().map_err(core)?,
            cfg.scaling().map_err(core)?,
        )
        .map_err(core)?;
        *out = Box::into_raw(Box::new(AmmPolicy(policy)));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn amm_policy_free(policy: *mut AmmPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Swap intensity in `[0, ell_max]` at time `t`, spot `s`, reserves
/// `(r_x, r_y)` and inventory `z_x`.
///
/// # Safety
/// `policy` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_policy_intensity(
    policy: *const AmmPolicy,
    t: f64,
    s: f64,
    r_x: f64,
    r_y: f64,
    z_x: f64,
    out: *mut f64,
) -> AmmStatus {
    guard(|| {
        let policy = &handle(policy, "policy")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let m = MarketState::new(t, s, r_x, r_y).map_err(core)?;
        *out = policy.intensity(t, &m, z_x);
        Ok(())
    })
}

/// Simulates path `index` of the market alone over the configured horizon.
/// Equal `(seed, index)` give identical paths.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn amm_simulate_uncontrolled(
    cfg: *const AmmConfig,
    seed: u64,
    index: u64,
    out: *mut AmmPathSummary,
) -> AmmStatus {
    guard(|| {
        let cfg = &handle(cfg, "cfg")?.0;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let model = cfg.model().map_err(core)?;
        let initial = cfg.initial_market().map_err(core)?;
        let mut rngs = PathRngs::for_path(seed, index);
        let path = market::simulate_uncontrolled_with(&model, &initial, cfg.agent.horizon, &mut rngs).map_err(core)?;
        let last = path.final_market();
        *out = AmmPathSummary {
            spot_up: path.count(EventKind::SpotUp) as u64,
            spot_down: path.count(EventKind::SpotDown) as u64,
            swap_x: path.count(EventKind::SwapX) as u64,
            swap_y: path.count(EventKind::SwapY) as u64,
            terminal_spot: last.s,
            terminal_rx: last.r_x,
            terminal_ry: last.r_y,
            terminal_spread: last.spread(),
            truncated: path.truncated.is_some() as u8,
        };
        Ok(())
    })
}
