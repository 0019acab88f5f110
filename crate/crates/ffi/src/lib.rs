//! C interface to the analysis core.
//!
//! Every function returns a [`PlStatus`]; on anything other than `PL_STATUS_OK` the
//! message is available from [`pl_last_error`] on the same thread. Strings
//! handed out by the library must be released with [`pl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use privlens_core::decoder::{decode, DecoderLimits};
use privlens_core::session::config::AnalysisConfig;
use privlens_core::session::{Environment, Session};
use privlens_core::store::{ArtifactKind, Store};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlStatus {
    Ok = 0,
    InvalidArgument = 1,
    InvalidConfig = 2,
    UnknownAnalysis = 3,
    NotFound = 4,
    PackageRejected = 5,
    DeviceUnavailable = 6,
    SessionFailed = 7,
    StorageError = 8,
    Internal = 9,
    Panic = 10,
}

impl PlStatus {
    fn from_code(code: &str) -> PlStatus {
        match code {
            "InvalidConfig" | "InvalidId" => PlStatus::InvalidConfig,
            "UnknownAnalysis" => PlStatus::UnknownAnalysis,
            "NotFound" | "MissingArtifact" => PlStatus::NotFound,
            "PackageRejected" | "UnsupportedPackage" => PlStatus::PackageRejected,
            "DeviceUnavailable" | "MultipleDevices" => PlStatus::DeviceUnavailable,
            "ModuleSetupFailed" | "PostProcessingFailed" | "IllegalTransition" | "NotRecording" | "AlreadyStarted" => {
                PlStatus::SessionFailed
            }
            "StorageError" | "StorageFull" | "DigestMismatch" | "SchemaViolation" | "AlreadyExists" | "DuplicateKind" => {
                PlStatus::StorageError
            }
            _ => PlStatus::Internal,
        }
    }
}

/// Opaque handle to an analysis store.
pub struct PlStore {
    env: Environment,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(PlStatus, String);

impl Fail {
    fn coded(code: &str, e: impl std::fmt::Display) -> Fail {
        Fail(PlStatus::from_code(code), format!("{code}: {e}"))
    }

    fn arg(msg: &str) -> Fail {
        Fail(PlStatus::InvalidArgument, msg.into())
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PlStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PlStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::arg(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::arg(&format!("{what} is not UTF-8")))
}

unsafe fn bytes<'a>(p: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::arg("data is null"));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn give(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::arg("out pointer is null"));
    }
    let c = CString::new(s).map_err(|_| Fail(PlStatus::Internal, "output contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

unsafe fn store<'a>(h: *const PlStore) -> Result<&'a PlStore, Fail> {
    h.as_ref().ok_or_else(|| Fail::arg("store handle is null"))
}

/// Message for the last failed call on this thread, or NULL. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn pl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens (or creates) a store rooted at `root`.
///
/// # Safety
/// `root` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pl_store_open(root: *const c_char, out: *mut *mut PlStore) -> PlStatus {
    guard(|| {
        let root = PathBuf::from(text(root, "root")?);
        if out.is_null() {
            return Err(Fail::arg("out pointer is null"));
        }
        let s = Store::open(root).map_err(|e| Fail::coded(e.code(), &e))?;
        *out = Box::into_raw(Box::new(PlStore {
            env: Environment::new(Arc::new(s)),
        }));
        Ok(())
    })
}

/// # Safety
/// `h` must come from [`pl_store_open`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pl_store_free(h: *mut PlStore) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Stores an uploaded package and writes its id to `out_id`.
///
/// # Safety
/// `data` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pl_store_put_app(
    h: *const PlStore,
    file_name: *const c_char,
    data: *const u8,
    len: usize,
    out_id: *mut *mut c_char,
) -> PlStatus {
    guard(|| {
        let s = store(h)?;
        let name = text(file_name, "file_name")?;
        let app = s
            .env
            .store
            .put_app(name, bytes(data, len)?)
            .map_err(|e| Fail::coded(e.code(), &e))?;
        give(out_id, app.id)
    })
}

/// Runs an analysis described by a JSON config to completion and writes the
/// analysis id to `out_id`. A session that ends in Failed still yields its id
/// together with `PL_STATUS_SESSION_FAILED`.
///
/// # Safety
/// Pointers must be valid as documented on the other functions.
#[no_mangle]
pub unsafe extern "C" fn pl_analysis_run(
    h: *const PlStore,
    config_json: *const c_char,
    out_id: *mut *mut c_char,
) -> PlStatus {
    guard(|| {
        let s = store(h)?;
        let config = AnalysisConfig::from_json(text(config_json, "config_json")?)
            .map_err(|e| Fail::coded("InvalidConfig", &e))?;
        config.require_fixture().map_err(|e| Fail::coded("InvalidConfig", &e))?;
        let mut session = Session::create(s.env.clone(), config).map_err(|e| Fail::coded(e.code(), &e))?;
        let result = session.run_headless();
        give(out_id, session.id().to_string())?;
        result.map(|_| ()).map_err(|e| Fail::coded(e.code(), &e))
    })
}

/// Writes the report model of a completed analysis as JSON.
///
/// # Safety
/// Pointers must be valid as documented on the other functions.
#[no_mangle]
pub unsafe extern "C" fn pl_analysis_report_json(
    h: *const PlStore,
    analysis_id: *const c_char,
    out_json: *mut *mut c_char,
) -> PlStatus {
    guard(|| {
        let s = store(h)?;
        let id = text(analysis_id, "analysis_id")?;
        let (bytes, _) = s
            .env
            .store
            .get_artifact(id, ArtifactKind::ReportModel)
            .map_err(|e| Fail::coded(e.code(), &e))?;
        give(out_json, String::from_utf8_lossy(&bytes).into_owned())
    })
}

/// Decodes a payload with default limits and writes the layer tree as JSON.
///
/// # Safety
/// `data` must point to `len` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn pl_decode(data: *const u8, len: usize, out_json: *mut *mut c_char) -> PlStatus {
    guard(|| {
        let decoded = decode(bytes(data, len)?, &DecoderLimits::default());
        let doc = serde_json::json!({
            "tree": decoded.root.to_json(),
            "output_limit_exceeded": decoded.output_limit_exceeded,
        });
        give(out_json, doc.to_string())
    })
}
