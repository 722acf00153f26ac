//! C ABI over `modernn`: dataset generation and I/O, checkpoint-backed
//! prediction, frame metrics and the A-distance probe.
//!
//! Every fallible function returns a [`ModernnStatus`]; on failure the
//! message is available from [`modernn_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use modernn::config::RunConfig;
use modernn::datagen::{generate_dataset, load_dataset, Dataset};
use modernn::diagnostics::{a_distance, ProbeConfig};
use modernn::metrics::{self, MetricsConfig};
use modernn::network::{ModeRnn, SequencePredictor};
use modernn::trainer::Checkpoint;
use modernn::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModernnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Contract = 4,
    Shape = 5,
    Format = 6,
    Io = 7,
    NonFinite = 8,
    Panic = 9,
}

/// Opaque dataset handle.
pub struct ModernnDataset {
    inner: Dataset,
}

/// Opaque model handle.
pub struct ModernnModel {
    inner: ModeRnn,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ModernnDatasetInfo {
    pub count: usize,
    pub seq_len: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct ModernnModelInfo {
    pub input_len: usize,
    pub pred_len: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub parameters: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ModernnStatus {
    match e {
        Error::Shape(_) => ModernnStatus::Shape,
        Error::Contract(_) => ModernnStatus::Contract,
        Error::Config { .. } => ModernnStatus::Config,
        Error::Format { .. } => ModernnStatus::Format,
        Error::Io { .. } => ModernnStatus::Io,
        Error::NonFinite { .. } => ModernnStatus::NonFinite,
    }
}

struct Fail(ModernnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ModernnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ModernnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ModernnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ModernnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            ModernnStatus::InvalidArgument,
            format!("{what} is not UTF-8"),
        )
    })
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn modernn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Generate `count` sequences from `key = value` config text (may be null
/// for defaults).
///
/// # Safety
/// `config_text` must be null or a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_dataset_generate(
    config_text: *const c_char,
    count: usize,
    out: *mut *mut ModernnDataset,
) -> ModernnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut run = RunConfig::default();
        if !config_text.is_null() {
            run.apply_text(str_arg(config_text, "config_text")?)?;
        }
        let data = generate_dataset(&run.data_spec(), count)?;
        *out = Box::into_raw(Box::new(ModernnDataset { inner: data }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_dataset_load(
    path: *const c_char,
    out: *mut *mut ModernnDataset,
) -> ModernnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let data = load_dataset(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(ModernnDataset { inner: data }));
        Ok(())
    })
}

/// # Safety
/// `data` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn modernn_dataset_save(
    data: *const ModernnDataset,
    path: *const c_char,
) -> ModernnStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        d.inner.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Number of sequences; 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn modernn_dataset_len(data: *const ModernnDataset) -> usize {
    data.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `data` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_dataset_info(
    data: *const ModernnDataset,
    out: *mut ModernnDatasetInfo,
) -> ModernnStatus {
    guard(|| {
        let d = &data.as_ref().ok_or_else(|| null("data"))?.inner;
        *out_arg(out, "out")? = ModernnDatasetInfo {
            count: d.len(),
            seq_len: d.seq_len,
            height: d.height,
            width: d.width,
            channels: d.channels,
        };
        Ok(())
    })
}

/// Copy sequence `index`: its mode label and `seq_len·H·W·C` raw pixels.
///
/// # Safety
/// `data` must be a live handle; `label` writable; `frames` writable for
/// `frames_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn modernn_dataset_sequence(
    data: *const ModernnDataset,
    index: usize,
    label: *mut u8,
    frames: *mut u8,
    frames_len: usize,
) -> ModernnStatus {
    guard(|| {
        let d = &data.as_ref().ok_or_else(|| null("data"))?.inner;
        let s = d.sequences.get(index).ok_or_else(|| {
            Fail(
                ModernnStatus::InvalidArgument,
                format!("index {index} out of range {}", d.len()),
            )
        })?;
        if frames_len != s.frames.len() {
            return Err(Fail(
                ModernnStatus::Shape,
                format!(
                    "frames buffer holds {frames_len} bytes, sequence has {}",
                    s.frames.len()
                ),
            ));
        }
        if frames.is_null() {
            return Err(null("frames"));
        }
        *out_arg(label, "label")? = s.label;
        std::ptr::copy_nonoverlapping(s.frames.as_ptr(), frames, frames_len);
        Ok(())
    })
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn modernn_dataset_free(data: *mut ModernnDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a valid C string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_model_load(
    path: *const c_char,
    out: *mut *mut ModernnModel,
) -> ModernnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ckpt = Checkpoint::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(ModernnModel {
            inner: ckpt.model()?,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_model_info(
    model: *const ModernnModel,
    out: *mut ModernnModelInfo,
) -> ModernnStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let c = &m.config;
        *out_arg(out, "out")? = ModernnModelInfo {
            input_len: c.input_len,
            pred_len: c.pred_len,
            channels: c.image_channels,
            height: c.image_height,
            width: c.image_width,
            parameters: m.params.count(),
        };
        Ok(())
    })
}

/// Predict the horizon of sequence `index` into `out`
/// (`pred_len·C·H·W` values in `[0, 1]`, frame-major).
///
/// # Safety
/// Handles must be live; `out` writable for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn modernn_model_predict(
    model: *const ModernnModel,
    data: *const ModernnDataset,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> ModernnStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let d = &data.as_ref().ok_or_else(|| null("data"))?.inner;
        if index >= d.len() {
            return Err(Fail(
                ModernnStatus::InvalidArgument,
                format!("index {index} out of range {}", d.len()),
            ));
        }
        let pred = m.predict(&d.batch(&[index])?)?;
        if out_len != pred.numel() {
            return Err(Fail(
                ModernnStatus::Shape,
                format!(
                    "output buffer holds {out_len} values, prediction has {}",
                    pred.numel()
                ),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::ptr::copy_nonoverlapping(pred.data().as_ptr(), out, out_len);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn modernn_model_free(model: *mut ModernnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Per-pixel mean squared error of two `n`-value buffers.
///
/// # Safety
/// `a` and `b` must be readable for `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_mse(
    a: *const f64,
    b: *const f64,
    n: usize,
    out: *mut f64,
) -> ModernnStatus {
    guard(|| {
        *out_arg(out, "out")? = metrics::mse(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?)?;
        Ok(())
    })
}

/// PSNR in dB; `+inf` for identical inputs.
///
/// # Safety
/// As for [`modernn_mse`].
#[no_mangle]
pub unsafe extern "C" fn modernn_psnr(
    a: *const f64,
    b: *const f64,
    n: usize,
    peak: f64,
    out: *mut f64,
) -> ModernnStatus {
    guard(|| {
        *out_arg(out, "out")? = metrics::psnr(slice_arg(a, n, "a")?, slice_arg(b, n, "b")?, peak)?;
        Ok(())
    })
}

/// Gaussian-window SSIM of two `h×w` images on a `0..=255` scale.
///
/// # Safety
/// `a` and `b` must be readable for `h·w` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_ssim(
    a: *const f64,
    b: *const f64,
    h: usize,
    w: usize,
    out: *mut f64,
) -> ModernnStatus {
    guard(|| {
        let n = h * w;
        *out_arg(out, "out")? = metrics::ssim(
            slice_arg(a, n, "a")?,
            slice_arg(b, n, "b")?,
            h,
            w,
            &MetricsConfig::default(),
        )?;
        Ok(())
    })
}

/// Critical success index at `threshold`. `degenerate` (may be null) is set
/// to 1 when neither map has an event, in which case the value is 1.0.
///
/// # Safety
/// `a`, `b` readable for `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn modernn_csi(
    pred: *const f64,
    target: *const f64,
    n: usize,
    threshold: f64,
    out: *mut f64,
    degenerate: *mut i32,
) -> ModernnStatus {
    guard(|| {
        let r = metrics::csi(
            slice_arg(pred, n, "pred")?,
            slice_arg(target, n, "target")?,
            threshold,
        )?;
        *out_arg(out, "out")? = r.value;
        if let Some(d) = degenerate.as_mut() {
            *d = i32::from(r.degenerate);
        }
        Ok(())
    })
}

/// A-distance between row-major feature matrices `a` (`na×dim`) and
/// `b` (`nb×dim`) with the default linear probe.
///
/// # Safety
/// `a`, `b` readable for `na·dim` and `nb·dim` doubles; `d_a` writable;
/// `epsilon` may be null.
#[no_mangle]
pub unsafe extern "C" fn modernn_a_distance(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    dim: usize,
    seed: u64,
    d_a: *mut f64,
    epsilon: *mut f64,
) -> ModernnStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail(
                ModernnStatus::InvalidArgument,
                "dim must be positive".into(),
            ));
        }
        let rows = |p, n, what| -> Result<Vec<Vec<f64>>, Fail> {
            Ok(slice_arg(p, n * dim, what)?
                .chunks(dim)
                .map(<[f64]>::to_vec)
                .collect())
        };
        let (ra, rb) = (rows(a, na, "a")?, rows(b, nb, "b")?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = a_distance(&ra, &rb, &ProbeConfig::default(), &mut rng)?;
        *out_arg(d_a, "d_a")? = r.d_a;
        if let Some(e) = epsilon.as_mut() {
            *e = r.epsilon;
        }
        Ok(())
    })
}
