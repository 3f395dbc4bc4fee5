//! C ABI over the gsavatar library.
//!
//! Objects cross the boundary as opaque handles created by `*_load` or
//! `*_new` functions and released with the matching `*_free`. Every
//! fallible call returns a [`GsaStatus`]; on failure the message is
//! available from [`gsa_last_error`] on the same thread until the next call.
//! Panics never unwind into C; they surface as `GSA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use gsavatar::avatar::GaussianAvatar;
use gsavatar::bodymodel::io::PoseFile;
use gsavatar::bodymodel::BodyModel;
use gsavatar::pipeline::{
    evaluate, load_dataset, render_novel, synth, train, Region, SynthConfig, TrainConfig,
};
use gsavatar::rasterizer::Camera;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Malformed or inconsistent input: bad files, shapes, settings or text.
    InvalidInput = 2,
    /// Non-finite values or a collapsed optimization.
    Numerical = 3,
    /// Reading or writing a file failed.
    Io = 4,
    /// An output buffer is smaller than the image.
    BufferTooSmall = 5,
    /// An internal panic was caught.
    Panic = 6,
}

#[derive(Debug, thiserror::Error)]
enum FfiError {
    #[error(transparent)]
    Core(#[from] gsavatar::Error),
    #[error("argument `{0}` is null")]
    Null(&'static str),
    #[error("argument `{0}` is not valid UTF-8")]
    Utf8(&'static str),
    #[error("buffer holds {given} pixels but the image has {needed}")]
    Buffer { given: usize, needed: usize },
}

impl FfiError {
    fn status(&self) -> GsaStatus {
        use gsavatar::Error as E;
        match self {
            FfiError::Core(E::Numerical(_)) => GsaStatus::Numerical,
            FfiError::Core(E::Io { .. } | E::Image { .. }) => GsaStatus::Io,
            FfiError::Core(_) | FfiError::Utf8(_) => GsaStatus::InvalidInput,
            FfiError::Null(_) => GsaStatus::NullArgument,
            FfiError::Buffer { .. } => GsaStatus::BufferTooSmall,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let clean = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = clean);
}

/// Run `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), FfiError>) -> GsaStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GsaStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.to_string());
            e.status()
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            set_last_error(&format!("internal panic: {what}"));
            GsaStatus::Panic
        }
    }
}

fn path_arg(p: *const c_char, name: &'static str) -> Result<PathBuf, FfiError> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    // SAFETY: the caller passes a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    Ok(PathBuf::from(s.to_str().map_err(|_| FfiError::Utf8(name))?))
}

fn handle<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, FfiError> {
    // SAFETY: non-null handles come from this library and are still live.
    unsafe { p.as_ref() }.ok_or(FfiError::Null(name))
}

fn handle_mut<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, FfiError> {
    // SAFETY: as for `handle`, and the caller does not alias the handle.
    unsafe { p.as_mut() }.ok_or(FfiError::Null(name))
}

fn put<T>(out: *mut *mut T, name: &'static str, value: T) -> Result<(), FfiError> {
    if out.is_null() {
        return Err(FfiError::Null(name));
    }
    // SAFETY: `out` is a valid pointer to writable storage.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn free<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// A trained avatar together with the body model it articulates on.
pub struct GsaAvatar {
    avatar: GaussianAvatar,
    model: BodyModel,
}

/// Pinhole camera with extrinsics.
pub struct GsaCamera(Camera);

/// Body pose, shape and expression parameters of one frame.
pub struct GsaPose(PoseFile);

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gsa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn gsa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Write a synthetic cylinder-arm dataset with ground truth into `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gsa_synth(dir: *const c_char, train_frames: u32, test_frames: u32, size: u32, seed: u64) -> GsaStatus {
    guard(|| {
        let cfg = SynthConfig {
            train_frames: train_frames as usize,
            test_frames: test_frames as usize,
            width: size as usize,
            height: size as usize,
            seed,
            ..SynthConfig::default()
        };
        synth(&path_arg(dir, "dir")?, &cfg)?;
        Ok(())
    })
}

/// Load an avatar archive directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsa_avatar_load(dir: *const c_char, out: *mut *mut GsaAvatar) -> GsaStatus {
    guard(|| {
        let (avatar, model) = GaussianAvatar::load_archive(&path_arg(dir, "dir")?)?;
        put(out, "out", GsaAvatar { avatar, model })
    })
}

/// Write `avatar` as an archive directory.
///
/// # Safety
/// `avatar` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gsa_avatar_save(avatar: *const GsaAvatar, dir: *const c_char) -> GsaStatus {
    guard(|| {
        let a = handle(avatar, "avatar")?;
        a.avatar.save_archive(&path_arg(dir, "dir")?, &a.model)?;
        Ok(())
    })
}

/// Number of Gaussians; 0 for a null handle.
///
/// # Safety
/// `avatar` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gsa_avatar_num_gaussians(avatar: *const GsaAvatar) -> usize {
    unsafe { avatar.as_ref() }.map_or(0, |a| a.avatar.len())
}

/// # Safety
/// `avatar` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gsa_avatar_free(avatar: *mut GsaAvatar) {
    free(avatar)
}

/// Camera with identity extrinsics looking down +z.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gsa_camera_new(
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    out: *mut *mut GsaCamera,
) -> GsaStatus {
    guard(|| {
        let cam = Camera::new(fx, fy, cx, cy, width as usize, height as usize)?;
        put(out, "out", GsaCamera(cam))
    })
}

/// Load a camera JSON file such as a dataset's `camera.json`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsa_camera_load(path: *const c_char, out: *mut *mut GsaCamera) -> GsaStatus {
    guard(|| {
        let cam = Camera::load(&path_arg(path, "path")?)?;
        put(out, "out", GsaCamera(cam))
    })
}

/// Image size in pixels.
///
/// # Safety
/// `camera` must be a live handle; `width` and `height` writable or null.
#[no_mangle]
pub unsafe extern "C" fn gsa_camera_size(camera: *const GsaCamera, width: *mut u32, height: *mut u32) -> GsaStatus {
    guard(|| {
        let c = &handle(camera, "camera")?.0;
        // SAFETY: optional outputs are checked for null.
        unsafe {
            if let Some(w) = width.as_mut() {
                *w = c.width as u32;
            }
            if let Some(h) = height.as_mut() {
                *h = c.height as u32;
            }
        }
        Ok(())
    })
}

/// Orbit the camera by `angle` radians about its vertical axis through
/// the world point `pivot[0..3]`.
///
/// # Safety
/// `camera` must be a live handle and `pivot` point to three doubles.
#[no_mangle]
pub unsafe extern "C" fn gsa_camera_orbit(camera: *mut GsaCamera, pivot: *const f64, angle: f64) -> GsaStatus {
    guard(|| {
        let c = handle_mut(camera, "camera")?;
        if pivot.is_null() {
            return Err(FfiError::Null("pivot"));
        }
        // SAFETY: the caller passes three doubles.
        let p = unsafe { std::slice::from_raw_parts(pivot, 3) };
        c.0 = c.0.orbited(&[p[0], p[1], p[2]].into(), angle);
        Ok(())
    })
}

/// # Safety
/// `camera` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gsa_camera_free(camera: *mut GsaCamera) {
    free(camera)
}

/// Load a pose file (`poses/<id>.json` in a dataset).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gsa_pose_load(path: *const c_char, out: *mut *mut GsaPose) -> GsaStatus {
    guard(|| {
        let pose = PoseFile::load(&path_arg(path, "path")?)?;
        put(out, "out", GsaPose(pose))
    })
}

/// # Safety
/// `pose` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gsa_pose_free(pose: *mut GsaPose) {
    free(pose)
}

/// Render `avatar` in `pose` through `camera`.
///
/// Buffers are row-major and must hold `pixels >= width * height`
/// entries (`color` three per pixel, interleaved RGB). `depth` and
/// `alpha` may be null. `background` may be null for black.
///
/// # Safety
/// Handles must be live and buffers valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn gsa_render(
    avatar: *const GsaAvatar,
    pose: *const GsaPose,
    camera: *const GsaCamera,
    background: *const f64,
    pixels: usize,
    color: *mut f64,
    depth: *mut f64,
    alpha: *mut f64,
) -> GsaStatus {
    guard(|| {
        let a = handle(avatar, "avatar")?;
        let p = &handle(pose, "pose")?.0;
        let c = &handle(camera, "camera")?.0;
        if color.is_null() {
            return Err(FfiError::Null("color"));
        }
        let needed = c.width * c.height;
        if pixels < needed {
            return Err(FfiError::Buffer { given: pixels, needed });
        }
        let bg = if background.is_null() {
            [0.0; 3]
        } else {
            // SAFETY: the caller passes three doubles.
            let b = unsafe { std::slice::from_raw_parts(background, 3) };
            [b[0], b[1], b[2]]
        };
        let r = render_novel(&a.avatar, &a.model, p, c, bg)?;
        // SAFETY: buffer sizes were checked against `pixels` above.
        unsafe {
            let out = std::slice::from_raw_parts_mut(color, 3 * needed);
            for (dst, src) in out.iter_mut().zip(r.color.iter()) {
                *dst = *src;
            }
            if !depth.is_null() {
                let out = std::slice::from_raw_parts_mut(depth, needed);
                for (dst, src) in out.iter_mut().zip(r.depth.iter()) {
                    *dst = *src;
                }
            }
            if !alpha.is_null() {
                let out = std::slice::from_raw_parts_mut(alpha, needed);
                for (dst, src) in out.iter_mut().zip(r.alpha.iter()) {
                    *dst = *src;
                }
            }
        }
        Ok(())
    })
}

/// Train on the dataset in `data_dir`, writing logs and the archive to
/// `out_dir`. `config` is an optional flat `key = value` file. When `out`
/// is non-null it receives a handle to the trained avatar.
///
/// # Safety
/// Strings must be NUL-terminated (`config` may be null); `out` null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gsa_train(
    data_dir: *const c_char,
    out_dir: *const c_char,
    config: *const c_char,
    out: *mut *mut GsaAvatar,
) -> GsaStatus {
    guard(|| {
        let data = path_arg(data_dir, "data_dir")?;
        let out_path = path_arg(out_dir, "out_dir")?;
        let cfg = if config.is_null() {
            TrainConfig::default()
        } else {
            TrainConfig::load(&path_arg(config, "config")?)?
        };
        let model = BodyModel::load(&data.join("model.json"))?;
        let ds = load_dataset(&data, Some(&model))?;
        let outcome = train(&model, &ds, &cfg, Some(&out_path))?;
        if !out.is_null() {
            put(out, "out", GsaAvatar { avatar: outcome.avatar, model })?;
        }
        Ok(())
    })
}

/// Score `avatar` on the test frames of `data_dir` (the training frames if
/// there are none). Writes the per-frame table to `csv_path` when it is
/// non-null and the full-region means to `psnr` and `ssim` when non-null.
///
/// # Safety
/// `avatar` must be a live handle, strings NUL-terminated, outputs null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn gsa_evaluate(
    avatar: *const GsaAvatar,
    data_dir: *const c_char,
    csv_path: *const c_char,
    psnr: *mut f64,
    ssim: *mut f64,
) -> GsaStatus {
    guard(|| {
        let a = handle(avatar, "avatar")?;
        let ds = load_dataset(&path_arg(data_dir, "data_dir")?, Some(&a.model))?;
        let frames = if ds.test.is_empty() { &ds.train } else { &ds.test };
        let report = evaluate(&a.avatar, &a.model, frames, &ds.camera, [0.0; 3], None)?;
        if !csv_path.is_null() {
            report.write_csv(&path_arg(csv_path, "csv_path")?)?;
        }
        let (p, s) = report.mean(Region::Full).unwrap_or((f64::NAN, f64::NAN));
        // SAFETY: optional outputs are checked for null.
        unsafe {
            if let Some(o) = psnr.as_mut() {
                *o = p;
            }
            if let Some(o) = ssim.as_mut() {
                *o = s;
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(gsa_last_error()) }.to_string_lossy().into_owned()
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut out = ptr::null_mut();
        assert_eq!(unsafe { gsa_avatar_load(ptr::null(), &mut out) }, GsaStatus::NullArgument);
        assert!(last_error().contains("dir"));
        assert!(out.is_null());
        assert_eq!(unsafe { gsa_avatar_num_gaussians(ptr::null()) }, 0);
        unsafe { gsa_avatar_free(ptr::null_mut()) };
    }

    #[test]
    fn missing_files_map_to_status_codes() {
        let mut out = ptr::null_mut();
        let status = unsafe { gsa_pose_load(c("/nonexistent/pose.json").as_ptr(), &mut out) };
        assert_eq!(status, GsaStatus::Io);
        assert!(last_error().contains("/nonexistent/pose.json"));
        let mut cam = ptr::null_mut();
        assert_eq!(unsafe { gsa_camera_new(10.0, 10.0, 4.0, 4.0, 0, 8, &mut cam) }, GsaStatus::InvalidInput);
        assert!(cam.is_null());
    }

    #[test]
    fn render_through_handles_matches_the_library() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let d = c(root.to_str().unwrap());
        assert_eq!(unsafe { gsa_synth(d.as_ptr(), 1, 1, 24, 3) }, GsaStatus::Ok, "{}", last_error());
        assert_eq!(last_error(), "");

        let mut avatar = ptr::null_mut();
        let gt = c(root.join("ground_truth").to_str().unwrap());
        assert_eq!(unsafe { gsa_avatar_load(gt.as_ptr(), &mut avatar) }, GsaStatus::Ok);
        assert!(unsafe { gsa_avatar_num_gaussians(avatar) } > 0);
        let mut pose = ptr::null_mut();
        let pp = c(root.join("poses/000000.json").to_str().unwrap());
        assert_eq!(unsafe { gsa_pose_load(pp.as_ptr(), &mut pose) }, GsaStatus::Ok);
        let mut cam = ptr::null_mut();
        let cp = c(root.join("camera.json").to_str().unwrap());
        assert_eq!(unsafe { gsa_camera_load(cp.as_ptr(), &mut cam) }, GsaStatus::Ok, "{}", last_error());
        let (mut w, mut h) = (0u32, 0u32);
        assert_eq!(unsafe { gsa_camera_size(cam, &mut w, &mut h) }, GsaStatus::Ok);
        assert_eq!((w, h), (24, 24));

        let n = (w * h) as usize;
        let mut color = vec![0.0; 3 * n];
        let mut alpha = vec![0.0; n];
        let small = unsafe {
            gsa_render(avatar, pose, cam, ptr::null(), n - 1, color.as_mut_ptr(), ptr::null_mut(), alpha.as_mut_ptr())
        };
        assert_eq!(small, GsaStatus::BufferTooSmall);
        let status = unsafe {
            gsa_render(avatar, pose, cam, ptr::null(), n, color.as_mut_ptr(), ptr::null_mut(), alpha.as_mut_ptr())
        };
        assert_eq!(status, GsaStatus::Ok, "{}", last_error());

        let a = unsafe { &*avatar };
        let want = render_novel(&a.avatar, &a.model, &unsafe { &*pose }.0, &unsafe { &*cam }.0, [0.0; 3]).unwrap();
        assert_eq!(color, want.color.iter().copied().collect::<Vec<_>>());
        assert_eq!(alpha, want.alpha.iter().copied().collect::<Vec<_>>());
        assert!(alpha.iter().any(|v| *v > 0.5));

        let (mut psnr, mut ssim) = (0.0, 0.0);
        assert_eq!(unsafe { gsa_evaluate(avatar, d.as_ptr(), ptr::null(), &mut psnr, &mut ssim) }, GsaStatus::Ok);
        assert!(psnr > 40.0, "{psnr}");
        unsafe {
            gsa_pose_free(pose);
            gsa_camera_free(cam);
            gsa_avatar_free(avatar);
        }
    }

    #[test]
    fn train_returns_a_handle_and_writes_the_archive() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let out = dir.path().join("out");
        let cfg = dir.path().join("cfg.txt");
        std::fs::write(&cfg, "iterations = 2\nlbs_width = 8\npose_width = 4\nconf_width = 4\nsh_degree = 0\n").unwrap();
        let d = c(data.to_str().unwrap());
        assert_eq!(unsafe { gsa_synth(d.as_ptr(), 2, 0, 16, 0) }, GsaStatus::Ok);
        let mut avatar = ptr::null_mut();
        let o = c(out.to_str().unwrap());
        let cf = c(cfg.to_str().unwrap());
        assert_eq!(unsafe { gsa_train(d.as_ptr(), o.as_ptr(), cf.as_ptr(), &mut avatar) }, GsaStatus::Ok, "{}", last_error());
        assert!(out.join("avatar/manifest.json").is_file());
        let saved = c(dir.path().join("copy").to_str().unwrap());
        assert_eq!(unsafe { gsa_avatar_save(avatar, saved.as_ptr()) }, GsaStatus::Ok);
        unsafe { gsa_avatar_free(avatar) };

        std::fs::write(&cfg, "iterations = many\n").unwrap();
        assert_eq!(unsafe { gsa_train(d.as_ptr(), o.as_ptr(), cf.as_ptr(), ptr::null_mut()) }, GsaStatus::InvalidInput);
        assert!(last_error().contains("iterations"));
    }
}
