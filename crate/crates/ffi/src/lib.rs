//! C interface to `mrrn-core`.
//!
//! Every function returns an [`MrrnStatus`]. On failure the message is kept
//! per thread and can be read with [`mrrn_last_error`]. Models are opaque
//! handles created by [`mrrn_model_new`] or [`mrrn_model_load`] and released
//! with [`mrrn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mrrn_core::arch::{build_model, encode_checkpoint, load_checkpoint, read_checkpoint_header, save_checkpoint, Model};
use mrrn_core::config::RunConfig;
use mrrn_core::kernels::BnMode;
use mrrn_core::metrics::label_counts;
use mrrn_core::phantom::{generate_phantom, PhantomParams};
use mrrn_core::train::argmax_labels;
use mrrn_core::{Error, Precision, Real, Shape, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrrnStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Bad configuration or argument value.
    InvalidArgument = 2,
    /// A caller buffer has the wrong length.
    BufferSize = 3,
    Io = 4,
    /// Corrupt or incompatible checkpoint.
    Decode = 5,
    /// The engine rejected the operation (shape mismatch, unpopulated batch-norm statistics, ...).
    Engine = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("no interior nul"));
}

struct Fail(MrrnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Config(_) | Error::Invalid(_) => MrrnStatus::InvalidArgument,
            Error::Io { .. } => MrrnStatus::Io,
            Error::Decode { .. } => MrrnStatus::Decode,
            _ => MrrnStatus::Engine,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MrrnStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MrrnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MrrnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            MrrnStatus::Internal
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(MrrnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

enum Inner {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// Opaque network handle.
pub struct MrrnModel {
    inner: Inner,
}

macro_rules! with_model {
    ($m:expr, $model:ident => $body:expr) => {
        match &mut $m.inner {
            Inner::F32($model) => $body,
            Inner::F64($model) => $body,
        }
    };
}

impl MrrnModel {
    fn config(&self) -> &mrrn_core::arch::ArchConfig {
        match &self.inner {
            Inner::F32(m) => m.config(),
            Inner::F64(m) => m.config(),
        }
    }
}

/// Last error message on this thread, or an empty string after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn mrrn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a network from run-config TOML text (an `[arch]` section and an
/// optional `precision`). An empty string gives the default configuration.
///
/// # Safety
/// `config` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_new(config: *const c_char, seed: u64, out: *mut *mut MrrnModel) -> MrrnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = RunConfig::parse(text(config, "config")?)?;
        let resolved = cfg.resolve()?;
        let inner = match resolved.precision {
            Precision::F32 => Inner::F32(build_model(&resolved.arch, seed)?),
            Precision::F64 => Inner::F64(build_model(&resolved.arch, seed)?),
        };
        *out = Box::into_raw(Box::new(MrrnModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_free(model: *mut MrrnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_param_count(model: *const MrrnModel, out: *mut u64) -> MrrnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = match &m.inner {
            Inner::F32(m) => m.count_params(),
            Inner::F64(m) => m.count_params(),
        };
        Ok(())
    })
}

/// Input side length and class count of the network.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_shape(model: *const MrrnModel, input_size: *mut usize, num_classes: *mut usize) -> MrrnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *input_size.as_mut().ok_or_else(|| null("input_size"))? = m.config().input_size;
        *num_classes.as_mut().ok_or_else(|| null("num_classes"))? = m.config().num_classes;
        Ok(())
    })
}

/// Selects batch statistics (`training` nonzero) or running statistics for
/// batch normalization. Forward passes in training mode update the running
/// statistics.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_set_training(model: *mut MrrnModel, training: bool) -> MrrnStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let mode = if training { BnMode::Train } else { BnMode::Eval };
        with_model!(m, model => model.set_mode(mode));
        Ok(())
    })
}

fn run_logits<T: Real>(model: &mut Model<T>, images: &[f32], n: usize) -> Result<Tensor<T>, Fail> {
    let s = model.config().input_size;
    let data = images.iter().map(|&v| T::of(v as f64)).collect();
    let x = Tensor::from_vec(Shape::new(n, 1, s, s), data)?;
    Ok(model.logits(&x)?)
}

fn expect_len(what: &str, got: usize, want: usize) -> Result<(), Fail> {
    if got != want {
        return Err(Fail(MrrnStatus::BufferSize, format!("{what} holds {got} values, expected {want}")));
    }
    Ok(())
}

/// Forward pass on `n` images of `S×S` floats, row-major. Writes `n·K·S·S`
/// logits in NCHW order.
///
/// # Safety
/// `images` must hold `images_len` floats and `logits` `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_forward(
    model: *mut MrrnModel,
    images: *const f32,
    images_len: usize,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> MrrnStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let (s, k) = (m.config().input_size, m.config().num_classes);
        expect_len("images", images_len, n * s * s)?;
        expect_len("logits", logits_len, n * k * s * s)?;
        let images = slice(images, images_len, "images")?;
        let out = slice_mut(logits, logits_len, "logits")?;
        with_model!(m, model => {
            let y = run_logits(model, images, n)?;
            for (o, v) in out.iter_mut().zip(y.data()) {
                *o = v.as_f64() as f32;
            }
        });
        Ok(())
    })
}

/// Per-pixel argmax labels for `n` images; `labels` receives `n·S·S` bytes.
///
/// # Safety
/// `images` must hold `images_len` floats and `labels` `labels_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_predict(
    model: *mut MrrnModel,
    images: *const f32,
    images_len: usize,
    n: usize,
    labels: *mut u8,
    labels_len: usize,
) -> MrrnStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let s = m.config().input_size;
        expect_len("images", images_len, n * s * s)?;
        expect_len("labels", labels_len, n * s * s)?;
        let images = slice(images, images_len, "images")?;
        let out = slice_mut(labels, labels_len, "labels")?;
        let mask = with_model!(m, model => argmax_labels(&run_logits(model, images, n)?));
        out.copy_from_slice(&mask.labels);
        Ok(())
    })
}

/// Writes the network to a checkpoint file.
///
/// # Safety
/// `model` must be valid and `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_save(model: *const MrrnModel, path: *const c_char) -> MrrnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = PathBuf::from(text(path, "path")?);
        match &m.inner {
            Inner::F32(m) => save_checkpoint(m, &path)?,
            Inner::F64(m) => save_checkpoint(m, &path)?,
        }
        Ok(())
    })
}

/// Reads a checkpoint in whichever precision it was written.
///
/// # Safety
/// `path` must be nul-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_load(path: *const c_char, out: *mut *mut MrrnModel) -> MrrnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(text(path, "path")?);
        let inner = match read_checkpoint_header(&path)?.precision {
            Precision::F32 => Inner::F32(load_checkpoint(&path)?),
            Precision::F64 => Inner::F64(load_checkpoint(&path)?),
        };
        *out = Box::into_raw(Box::new(MrrnModel { inner }));
        Ok(())
    })
}

/// Nonzero into `out` when both handles hold bit-identical checkpoints.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mrrn_model_equal(a: *const MrrnModel, b: *const MrrnModel, out: *mut bool) -> MrrnStatus {
    guard(|| {
        let (a, b) = (a.as_ref().ok_or_else(|| null("a"))?, b.as_ref().ok_or_else(|| null("b"))?);
        let bytes = |m: &MrrnModel| match &m.inner {
            Inner::F32(m) => encode_checkpoint(m),
            Inner::F64(m) => encode_checkpoint(m),
        };
        *out.as_mut().ok_or_else(|| null("out"))? = bytes(a) == bytes(b);
        Ok(())
    })
}

/// Dice coefficient of `label` between two label maps of `len` pixels.
/// Both empty gives 1, exactly one empty gives 0.
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mrrn_dsc(pred: *const u8, truth: *const u8, len: usize, label: u8, out: *mut f64) -> MrrnStatus {
    guard(|| {
        let (p, t) = (slice(pred, len, "pred")?, slice(truth, len, "truth")?);
        *out.as_mut().ok_or_else(|| null("out"))? = label_counts(p, t, label).dsc();
        Ok(())
    })
}

/// Generates one phantom slice with default geometry. `image` receives
/// `size·size` floats in [0, 1] and `mask` the matching labels 0..5.
///
/// # Safety
/// `image` and `mask` must each hold `size·size` elements.
#[no_mangle]
pub unsafe extern "C" fn mrrn_phantom_generate(size: usize, seed: u64, image: *mut f32, mask: *mut u8) -> MrrnStatus {
    guard(|| {
        let params = PhantomParams::with_size(size);
        params.validate()?;
        let n = size.checked_mul(size).ok_or_else(|| Fail(MrrnStatus::InvalidArgument, "size overflows".into()))?;
        let image = slice_mut(image, n, "image")?;
        let mask = slice_mut(mask, n, "mask")?;
        let s = generate_phantom(&params, seed)?;
        image.copy_from_slice(&s.image);
        mask.copy_from_slice(&s.mask);
        Ok(())
    })
}
