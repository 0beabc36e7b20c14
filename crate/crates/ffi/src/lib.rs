//! C ABI over `cdnn`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`CdnnStatus`]; the message of the most recent failure on the calling
//! thread is available from [`cdnn_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};

use cdnn::perf::{self, PhaseShifterTech, ReadoutMode};
use cdnn::training::{self, FiconnConfig, ModelParams, TrainState};
use cdnn::unitary::{self, ComplexMatrix, MeshProgram};
use cdnn::{Error, ErrorCategory};
use num_complex::Complex64;
use serde::Deserialize;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdnnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Malformed request: bad sizes, layouts or enum values.
    InvalidArgument = 2,
    /// Unusable input data, for example a non-unitary matrix or bad JSON.
    Data = 3,
    /// A numerical procedure failed to converge.
    Convergence = 4,
    /// The caller's buffer is too small; the error message states the required length.
    BufferTooSmall = 5,
    /// Internal panic caught at the boundary.
    Internal = 6,
}

/// Weight phase shifter technology for the projected-system model.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdnnPhaseShifter {
    Thermal = 0,
    UndercutThermal = 1,
    Mems = 2,
}

/// How the output of a projected system is read.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CdnnReadout {
    Receiverless = 0,
    Intermediate = 1,
}

/// Programmed Clements mesh.
pub struct CdnnMesh(MeshProgram);

/// Trained network together with the hardware it was trained on.
pub struct CdnnModel {
    params: ModelParams,
    network: FiconnConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    bytes.push(0);
    LAST_ERROR.with(|e| *e.borrow_mut() = bytes);
}

fn fail(status: CdnnStatus, msg: impl Into<String>) -> CdnnStatus {
    set_error(msg);
    status
}

fn from_core(err: Error) -> CdnnStatus {
    let status = match err.category() {
        ErrorCategory::Usage => CdnnStatus::InvalidArgument,
        ErrorCategory::Data => CdnnStatus::Data,
        ErrorCategory::Convergence => CdnnStatus::Convergence,
    };
    fail(status, err.to_string())
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), CdnnStatus>) -> CdnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdnnStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => fail(CdnnStatus::Internal, "internal panic"),
    }
}

trait IntoStatus<T> {
    fn status(self) -> Result<T, CdnnStatus>;
}

impl<T> IntoStatus<T> for cdnn::Result<T> {
    fn status(self) -> Result<T, CdnnStatus> {
        self.map_err(from_core)
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), CdnnStatus> {
    if p.is_null() {
        Err(fail(CdnnStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], CdnnStatus> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], CdnnStatus> {
    non_null(p, name)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copies the last error message of this thread into `buf` (NUL terminated,
/// truncated to `len`). Returns the full message length including the NUL,
/// or 0 when no error has been recorded.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cdnn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 && !msg.is_empty() {
            let n = msg.len().min(len);
            std::ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n - 1) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cdnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Decomposes the `n`×`n` unitary given as row-major real and imaginary
/// parts into a mesh program.
///
/// # Safety
/// `re` and `im` must each point to `n*n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_decompose(n: usize, re: *const f64, im: *const f64, out: *mut *mut CdnnMesh) -> CdnnStatus {
    guard(|| {
        non_null(out, "out")?;
        if n == 0 {
            return Err(fail(CdnnStatus::InvalidArgument, "matrix size must be positive"));
        }
        let re = slice(re, n * n, "re")?;
        let im = slice(im, n * n, "im")?;
        let u = ComplexMatrix::from_fn(n, n, |r, c| Complex64::new(re[r * n + c], im[r * n + c]));
        let program = unitary::clements_decompose(&u).status()?;
        *out = Box::into_raw(Box::new(CdnnMesh(program)));
        Ok(())
    })
}

/// Mesh programmed to a Haar-random `n`×`n` unitary drawn from `seed`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_haar(n: usize, seed: u64, out: *mut *mut CdnnMesh) -> CdnnStatus {
    guard(|| {
        non_null(out, "out")?;
        if n == 0 {
            return Err(fail(CdnnStatus::InvalidArgument, "matrix size must be positive"));
        }
        let u = unitary::haar_random_unitary(n, seed).status()?;
        let program = unitary::clements_decompose(&u).status()?;
        *out = Box::into_raw(Box::new(CdnnMesh(program)));
        Ok(())
    })
}

/// Mesh built from heater phases in canonical order (`θ1`, `θ2` per MZI,
/// then the output phase screen).
///
/// # Safety
/// `phases` must point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_from_phases(n: usize, phases: *const f64, len: usize, out: *mut *mut CdnnMesh) -> CdnnStatus {
    guard(|| {
        non_null(out, "out")?;
        let phases = slice(phases, len, "phases")?;
        let program = MeshProgram::from_heater_phases(n, phases).status()?;
        *out = Box::into_raw(Box::new(CdnnMesh(program)));
        Ok(())
    })
}

/// Releases a mesh. Null is ignored.
///
/// # Safety
/// `mesh` must come from a `cdnn_mesh_*` constructor and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_free(mesh: *mut CdnnMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Number of modes, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_size(mesh: *const CdnnMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.size)
}

/// Number of heater phases, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_num_phases(mesh: *const CdnnMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.layout_sites().num_heaters())
}

/// Writes the heater phases in canonical order.
///
/// # Safety
/// `mesh` must be live; `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_phases(mesh: *const CdnnMesh, buf: *mut f64, len: usize) -> CdnnStatus {
    guard(|| {
        non_null(mesh, "mesh")?;
        let phases = (*mesh).0.heater_phases();
        if len < phases.len() {
            return Err(fail(CdnnStatus::BufferTooSmall, format!("need {} doubles", phases.len())));
        }
        slice_mut(buf, len, "buf")?[..phases.len()].copy_from_slice(&phases);
        Ok(())
    })
}

/// Writes the ideal transfer matrix as row-major real and imaginary parts.
///
/// # Safety
/// `mesh` must be live; `re` and `im` must each hold `n*n` doubles.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_unitary(mesh: *const CdnnMesh, re: *mut f64, im: *mut f64) -> CdnnStatus {
    guard(|| {
        non_null(mesh, "mesh")?;
        let u = unitary::mesh_reconstruct(&(*mesh).0).status()?;
        let n = u.nrows();
        let re = slice_mut(re, n * n, "re")?;
        let im = slice_mut(im, n * n, "im")?;
        for r in 0..n {
            for c in 0..n {
                re[r * n + c] = u[(r, c)].re;
                im[r * n + c] = u[(r, c)].im;
            }
        }
        Ok(())
    })
}

/// Fidelity between the mesh's ideal matrix and a target given row-major.
///
/// # Safety
/// `mesh` must be live; `re`, `im` must hold `n*n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cdnn_mesh_fidelity(mesh: *const CdnnMesh, re: *const f64, im: *const f64, out: *mut f64) -> CdnnStatus {
    guard(|| {
        non_null(mesh, "mesh")?;
        non_null(out, "out")?;
        let n = (*mesh).0.size;
        let re = slice(re, n * n, "re")?;
        let im = slice(im, n * n, "im")?;
        let target = ComplexMatrix::from_fn(n, n, |r, c| Complex64::new(re[r * n + c], im[r * n + c]));
        let u = unitary::mesh_reconstruct(&(*mesh).0).status()?;
        *out = unitary::fidelity(&target, &u).status()?;
        Ok(())
    })
}

#[derive(Deserialize)]
struct Artifact {
    network: FiconnConfig,
    state: TrainState,
}

/// Loads a model saved by `cdnn train` from a NUL-terminated JSON string.
///
/// # Safety
/// `json` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdnn_model_from_json(json: *const c_char, out: *mut *mut CdnnModel) -> CdnnStatus {
    guard(|| {
        non_null(json, "json")?;
        non_null(out, "out")?;
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| fail(CdnnStatus::Data, "model JSON is not UTF-8"))?;
        let a: Artifact = serde_json::from_str(text).map_err(|e| from_core(e.into()))?;
        // Round-trip through the core loader for its schema check.
        let state = TrainState::from_json(&serde_json::to_string(&a.state).map_err(|e| from_core(e.into()))?).status()?;
        a.network.validate().status()?;
        if state.params.size != a.network.size || state.params.layers != a.network.layers {
            return Err(fail(CdnnStatus::Data, "model and network shapes differ"));
        }
        *out = Box::into_raw(Box::new(CdnnModel { params: state.params, network: a.network }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from `cdnn_model_from_json` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn cdnn_model_free(model: *mut CdnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network width (number of inputs and output classes), or 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cdnn_model_size(model: *const CdnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.network.size)
}

/// Normalized output powers for one input vector of `len` features.
///
/// # Safety
/// `model` must be live; `x` must hold `len` doubles and `probs` `len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cdnn_model_forward(model: *const CdnnModel, x: *const f64, len: usize, probs: *mut f64) -> CdnnStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &*model;
        let x = slice(x, len, "x")?;
        let p = training::forward(x, &m.params, &m.network).status()?;
        slice_mut(probs, len, "probs")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Class index with the largest output power.
///
/// # Safety
/// As for [`cdnn_model_forward`]; `class_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdnn_model_predict(model: *const CdnnModel, x: *const f64, len: usize, class_out: *mut usize) -> CdnnStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(class_out, "class_out")?;
        let x = slice(x, len, "x")?;
        let p = training::forward(x, &(*model).params, &(*model).network).status()?;
        *class_out = training::argmax(&p);
        Ok(())
    })
}

/// Multiply-accumulate count of an `modes`-wide, `layers`-deep network.
#[no_mangle]
pub extern "C" fn cdnn_op_count(modes: u64, layers: u64) -> u64 {
    perf::op_count(modes, layers)
}

/// Streaming energy per operation (J) and throughput (ops/s) of a projected
/// system at the high-speed clock.
///
/// # Safety
/// `energy_per_op` and `ops_per_second` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cdnn_perf_projected(
    modes: u32,
    layers: u32,
    tech: CdnnPhaseShifter,
    readout: CdnnReadout,
    include_weight_dacs: bool,
    energy_per_op: *mut f64,
    ops_per_second: *mut f64,
) -> CdnnStatus {
    guard(|| {
        non_null(energy_per_op, "energy_per_op")?;
        non_null(ops_per_second, "ops_per_second")?;
        let tech = match tech {
            CdnnPhaseShifter::Thermal => PhaseShifterTech::Thermal,
            CdnnPhaseShifter::UndercutThermal => PhaseShifterTech::UndercutThermal,
            CdnnPhaseShifter::Mems => PhaseShifterTech::Mems,
        };
        let readout = match readout {
            CdnnReadout::Receiverless => ReadoutMode::Receiverless,
            CdnnReadout::Intermediate => ReadoutMode::Intermediate,
        };
        let spec = perf::projected_system(modes, layers, tech, readout, include_weight_dacs);
        *energy_per_op = perf::energy_per_op_streaming(&spec).status()?;
        *ops_per_second = perf::peak_throughput(&spec);
        Ok(())
    })
}
