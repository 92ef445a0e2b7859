//! C ABI over a trained atlas: load a checkpoint into an opaque handle,
//! evaluate the networks and the domain density, export meshes and transfer
//! points between shapes.
//!
//! Every fallible call returns an [`AfStatus`]; on failure the message is
//! available from [`af_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use atlasforge::eval::correspond_chart;
use atlasforge::geometry::{export_reconstruction, ExportError, GeometryError};
use atlasforge::network::{evaluate, evaluate_phi6, evaluate_psi};
use atlasforge::sampler::{default_threshold, extract_domain, triangulate_domain, SamplerError};
use atlasforge::trainer::{Checkpoint, TrainError};
use ndarray::Array2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfStatus {
    AfOk = 0,
    AfNullPointer = 1,
    AfInvalidArgument = 2,
    AfIo = 3,
    AfData = 4,
    AfNumerical = 5,
    AfPanic = 6,
}

/// A trained atlas collection. Owned by the caller; release with
/// [`af_atlas_free`].
pub struct AfAtlas {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (AfStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AfStatus::AfOk
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            AfStatus::AfPanic
        }
    }
}

fn data(e: impl std::fmt::Display) -> Failure {
    (AfStatus::AfData, e.to_string())
}

fn null(what: &str) -> Failure {
    (AfStatus::AfNullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    (AfStatus::AfInvalidArgument, msg.into())
}

fn from_geometry(e: GeometryError) -> Failure {
    match e {
        GeometryError::Io(..) => (AfStatus::AfIo, e.to_string()),
        other => data(other),
    }
}

fn from_sampler(e: SamplerError) -> Failure {
    match e {
        SamplerError::EmptyDomain { .. } | SamplerError::InvalidThreshold(_) | SamplerError::ResolutionTooSmall(_) => {
            invalid(e.to_string())
        }
        other => data(other),
    }
}

unsafe fn atlas_ref<'a>(atlas: *const AfAtlas) -> Result<&'a AfAtlas, Failure> {
    atlas.as_ref().ok_or_else(|| null("atlas"))
}

unsafe fn rows(ptr: *const f64, n: usize, cols: usize, what: &str) -> Result<Array2<f64>, Failure> {
    if n == 0 {
        return Err(invalid(format!("{what}: count must be at least 1")));
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    let data = std::slice::from_raw_parts(ptr, n * cols).to_vec();
    if data.iter().any(|v| !v.is_finite()) {
        return Err((AfStatus::AfNumerical, format!("{what} contains non-finite values")));
    }
    Ok(Array2::from_shape_vec((n, cols), data).expect("length matches"))
}

unsafe fn write_rows(out: *mut f64, values: &Array2<f64>, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    let dst = std::slice::from_raw_parts_mut(out, values.len());
    for (d, s) in dst.iter_mut().zip(values.iter()) {
        *d = *s;
    }
    Ok(())
}

impl AfAtlas {
    fn shape(&self, i: usize) -> Result<usize, Failure> {
        if i < self.checkpoint.atlas.num_shapes() {
            Ok(i)
        } else {
            Err(invalid(format!("shape index {i} is out of range")))
        }
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn af_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn af_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a training checkpoint into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_load(path: *const c_char, out: *mut *mut AfAtlas) -> AfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let checkpoint = Checkpoint::load(Path::new(path)).map_err(|e| match e {
            TrainError::Io(..) => (AfStatus::AfIo, e.to_string()),
            other => data(other),
        })?;
        *out = Box::into_raw(Box::new(AfAtlas { checkpoint }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `atlas` must come from [`af_atlas_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_free(atlas: *mut AfAtlas) {
    if !atlas.is_null() {
        drop(Box::from_raw(atlas));
    }
}

/// # Safety
/// `atlas` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_num_shapes(atlas: *const AfAtlas, out: *mut usize) -> AfStatus {
    guard(|| {
        let a = atlas_ref(atlas)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = a.checkpoint.atlas.num_shapes();
        Ok(())
    })
}

/// Index of the shape called `name`.
///
/// # Safety
/// `atlas` must be a live handle, `name` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_shape_index(atlas: *const AfAtlas, name: *const c_char, out: *mut usize) -> AfStatus {
    guard(|| {
        let a = atlas_ref(atlas)?;
        if name.is_null() {
            return Err(null("name"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(name).to_str().map_err(|_| invalid("name is not UTF-8"))?;
        let names = &a.checkpoint.atlas.shape_names;
        *out = names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| invalid(format!("unknown shape '{name}'")))?;
        Ok(())
    })
}

/// Evaluates ϕ for `shape` at `n` domain points (`uv`, 2n values) in the
/// normalized training frame. Writes 3n positions to `points` and, when
/// `normals` is not null, 3n unit normals (zero where the Jacobian is
/// degenerate).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_eval_phi(
    atlas: *const AfAtlas,
    shape: usize,
    uv: *const f64,
    n: usize,
    points: *mut f64,
    normals: *mut f64,
) -> AfStatus {
    guard(|| {
        let a = atlas_ref(atlas)?;
        let i = a.shape(shape)?;
        let x = rows(uv, n, 2, "uv")?;
        let at = &a.checkpoint.atlas;
        if normals.is_null() {
            let p = evaluate(&at.phi, at.phi_code(i), &x).map_err(data)?;
            write_rows(points, &p, "points")
        } else {
            let out = evaluate_phi6(&at.phi, at.phi_code(i), &x).map_err(data)?;
            write_rows(points, &out.points, "points")?;
            write_rows(normals, &out.unit_normals, "normals")
        }
    })
}

/// Evaluates the chart map ψ for `shape` at `n` points with unit normals
/// (3n values each, normalized frame). Writes 2n domain coordinates.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_eval_psi(
    atlas: *const AfAtlas,
    shape: usize,
    points: *const f64,
    normals: *const f64,
    n: usize,
    uv: *mut f64,
) -> AfStatus {
    guard(|| {
        let a = atlas_ref(atlas)?;
        let i = a.shape(shape)?;
        let at = &a.checkpoint.atlas;
        let psi = at.psi.as_ref().ok_or_else(|| data("this atlas was trained without a chart map"))?;
        let p = rows(points, n, 3, "points")?;
        let nr = rows(normals, n, 3, "normals")?;
        let alpha = at.alpha.get();
        let mut x6 = Array2::zeros((n, 6));
        for r in 0..n {
            let len = (0..3).map(|k| nr[[r, k]] * nr[[r, k]]).sum::<f64>().sqrt();
            if len < 1e-12 {
                return Err(invalid(format!("normal {r} has zero length")));
            }
            for k in 0..3 {
                x6[[r, k]] = p[[r, k]];
                x6[[r, 3 + k]] = alpha * nr[[r, k]] / len;
            }
        }
        let out = evaluate_psi(psi, at.psi_code(i), &x6, at.alpha).map_err(data)?;
        write_rows(uv, &out, "uv")
    })
}

/// Mixture density at `n` domain points (2n values); writes n values.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_density(atlas: *const AfAtlas, uv: *const f64, n: usize, out: *mut f64) -> AfStatus {
    guard(|| {
        let a = atlas_ref(atlas)?;
        let x = rows(uv, n, 2, "uv")?;
        let mix = &a.checkpoint.atlas.mixture;
        let d = Array2::from_shape_fn((n, 1), |(r, _)| mix.density([x[[r, 0]], x[[r, 1]]]));
        write_rows(out, &d, "out")
    })
}

/// Extracts the domain (threshold `tau`, or the default when `tau <= 0`;
/// `resolution` nodes per axis), pushes it through ϕ of `shape` and writes
/// an OBJ with UVs in the shape's original frame.
///
/// # Safety
/// `atlas` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_export_mesh(
    atlas: *const AfAtlas,
    shape: usize,
    tau: f64,
    resolution: usize,
    path: *const c_char,
) -> AfStatus {
    guard(|| {
        let a = atlas_ref(atlas)?;
        let i = a.shape(shape)?;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let at = &a.checkpoint.atlas;
        let tau = if tau > 0.0 { tau } else { default_threshold(&at.mixture) };
        let grid = extract_domain(&at.mixture, resolution, tau).map_err(from_sampler)?;
        let domain = triangulate_domain(&grid);
        export_reconstruction(&domain, &at.phi, at.phi_code(i), Some(&at.normalizations[i]), Path::new(path))
            .map_err(|e| match e {
                ExportError::Geometry(g) => from_geometry(g),
                ExportError::Network(n) => data(n),
            })?;
        Ok(())
    })
}

/// Transfers `n` points with normals (3n values each, original frame of
/// `source`) to `target` through its chart map: `q = ϕ_target(ψ_source(p))`.
/// Writes 3n values in the target's original frame.
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn af_atlas_correspond(
    atlas: *const AfAtlas,
    source: usize,
    target: usize,
    points: *const f64,
    normals: *const f64,
    n: usize,
    out: *mut f64,
) -> AfStatus {
    guard(|| {
        let a = atlas_ref(atlas)?;
        let (s, t) = (a.shape(source)?, a.shape(target)?);
        let p = rows(points, n, 3, "points")?;
        let nr = rows(normals, n, 3, "normals")?;
        let to_vec = |m: &Array2<f64>| -> Vec<[f64; 3]> { m.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect() };
        let q = correspond_chart(&a.checkpoint.atlas, s, t, &to_vec(&p), &to_vec(&nr)).map_err(data)?;
        let flat = Array2::from_shape_fn((n, 3), |(r, k)| q[r][k]);
        write_rows(out, &flat, "out")
    })
}
