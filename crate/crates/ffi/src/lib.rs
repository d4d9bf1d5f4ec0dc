//! C interface for driving avatars created by the `bilayer` tool.
//!
//! Every function returns a [`BlStatus`]; on failure a message for the
//! calling thread can be copied out with [`bl_last_error`]. Avatar handles
//! are immutable once loaded, so one handle may be driven from several
//! threads at the same time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bilayer::data::KeypointSet;
use bilayer::error::Error;
use bilayer::infer::AvatarState;
use bilayer::tensor::{tensor_to_rgb, to_vec_f64};

/// Result codes. The first four match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlStatus {
    Ok = 0,
    Other = 1,
    Config = 2,
    Numerical = 3,
    Io = 4,
    Format = 5,
    Shape = 6,
    NullArgument = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Opaque avatar handle.
pub struct BlAvatar {
    state: AvatarState,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: BlStatus, msg: impl Into<String>) -> BlStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn status_of(e: &Error) -> BlStatus {
    match e {
        Error::Config(_) => BlStatus::Config,
        Error::Numerical(_) => BlStatus::Numerical,
        Error::Io { .. } => BlStatus::Io,
        Error::Format(_) => BlStatus::Format,
        Error::Shape(_) => BlStatus::Shape,
        _ => BlStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), BlStatus>) -> BlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| e.borrow_mut().clear());
            BlStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(BlStatus::Panic, "internal panic"),
    }
}

fn check<T>(r: bilayer::error::Result<T>) -> Result<T, BlStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn avatar_ref<'a>(a: *const BlAvatar) -> Result<&'a BlAvatar, BlStatus> {
    // SAFETY: the caller passes a handle from `bl_avatar_load*` that was not freed
    unsafe { a.as_ref() }.ok_or_else(|| fail(BlStatus::NullArgument, "avatar handle is null"))
}

fn store(out: *mut *mut BlAvatar, state: AvatarState) {
    let h = Box::into_raw(Box::new(BlAvatar { state }));
    // SAFETY: `out` was checked for null by the caller
    unsafe { *out = h };
}

/// Load an avatar file. On success `*out` receives a handle that must be
/// released with [`bl_avatar_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_avatar_load(path: *const c_char, out: *mut *mut BlAvatar) -> BlStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(BlStatus::NullArgument, "path or output pointer is null"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(BlStatus::Config, "path is not valid UTF-8"))?;
        let state = check(AvatarState::load(Path::new(path)))?;
        store(out, state);
        Ok(())
    })
}

/// Load an avatar from an in-memory copy of its file.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_avatar_load_bytes(data: *const u8, len: usize, out: *mut *mut BlAvatar) -> BlStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err(fail(BlStatus::NullArgument, "data or output pointer is null"));
        }
        *out = ptr::null_mut();
        let bytes = std::slice::from_raw_parts(data, len);
        let state = check(AvatarState::from_bytes(bytes))?;
        store(out, state);
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `avatar` must come from `bl_avatar_load*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bl_avatar_free(avatar: *mut BlAvatar) {
    if !avatar.is_null() {
        drop(Box::from_raw(avatar));
    }
}

/// Frame side length and number of keypoints the avatar expects.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bl_avatar_info(avatar: *const BlAvatar, image_size: *mut u32, n_points: *mut u32) -> BlStatus {
    guard(|| {
        let a = avatar_ref(avatar)?;
        if image_size.is_null() || n_points.is_null() {
            return Err(fail(BlStatus::NullArgument, "output pointer is null"));
        }
        let m = &a.state.meta().model;
        *image_size = m.image_size as u32;
        *n_points = m.n_points as u32;
        Ok(())
    })
}

/// Multiply-accumulates of one driven frame, texture sampling excluded.
///
/// # Safety
/// `total` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bl_avatar_macs(avatar: *const BlAvatar, total: *mut u64) -> BlStatus {
    guard(|| {
        let a = avatar_ref(avatar)?;
        if total.is_null() {
            return Err(fail(BlStatus::NullArgument, "output pointer is null"));
        }
        *total = check(a.state.count_macs())?.total;
        Ok(())
    })
}

unsafe fn keypoints(points: *const f32, n_points: usize) -> Result<KeypointSet, BlStatus> {
    if points.is_null() {
        return Err(fail(BlStatus::NullArgument, "keypoints are null"));
    }
    let flat = std::slice::from_raw_parts(points, 2 * n_points);
    check(KeypointSet::new(flat.chunks(2).map(|c| [c[0], c[1]]).collect()))
}

/// Render the frame for `n_points` keypoints given as `x0, y0, x1, y1, ...`
/// in normalized `[0, 1]` image coordinates. Writes `size * size * 3` bytes
/// of row-major interleaved RGB.
///
/// # Safety
/// `points` must hold `2 * n_points` floats and `rgb` `rgb_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn bl_avatar_drive_rgb8(
    avatar: *const BlAvatar,
    points: *const f32,
    n_points: usize,
    rgb: *mut u8,
    rgb_len: usize,
) -> BlStatus {
    guard(|| {
        let a = avatar_ref(avatar)?;
        let kps = keypoints(points, n_points)?;
        if rgb.is_null() {
            return Err(fail(BlStatus::NullArgument, "output buffer is null"));
        }
        let frame = check(a.state.drive(&kps, false))?.frame;
        let img = check(tensor_to_rgb(&frame))?.into_raw();
        if rgb_len < img.len() {
            return Err(fail(BlStatus::BufferTooSmall, format!("need {} bytes", img.len())));
        }
        ptr::copy_nonoverlapping(img.as_ptr(), rgb, img.len());
        Ok(())
    })
}

/// Like [`bl_avatar_drive_rgb8`] but writes the unclamped `(3, size, size)`
/// planar float frame in `[-1, 1]`.
///
/// # Safety
/// `points` must hold `2 * n_points` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bl_avatar_drive_f32(
    avatar: *const BlAvatar,
    points: *const f32,
    n_points: usize,
    out: *mut f32,
    out_len: usize,
) -> BlStatus {
    guard(|| {
        let a = avatar_ref(avatar)?;
        let kps = keypoints(points, n_points)?;
        if out.is_null() {
            return Err(fail(BlStatus::NullArgument, "output buffer is null"));
        }
        let frame = check(a.state.drive(&kps, false))?.frame;
        let v = check(to_vec_f64(&frame))?;
        if out_len < v.len() {
            return Err(fail(BlStatus::BufferTooSmall, format!("need {} floats", v.len())));
        }
        for (i, x) in v.iter().enumerate() {
            *out.add(i) = *x as f32;
        }
        Ok(())
    })
}

/// Copy the calling thread's last error message, NUL-terminated and
/// truncated to `len - 1` bytes. Returns the full message length.
///
/// # Safety
/// `buf` must point to `len` writable bytes or be null.
#[no_mangle]
pub unsafe extern "C" fn bl_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}
