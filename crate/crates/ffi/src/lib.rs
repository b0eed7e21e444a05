//! C ABI over the `divseg` toolkit.
//!
//! Every fallible function returns a [`DsegStatus`]; on failure the message
//! is available from [`dseg_last_error`] on the same thread. Models are
//! opaque [`DsegModel`] handles released with [`dseg_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use divseg::divergence::{self, DivergenceKind, HolderExponents, ProbVector};
use divseg::model::{init_params, ArchConfig, ModalityMask, ModelParams, MODALITIES};
use divseg::segloss::{dsc_metric, LabelVolume, Region};
use divseg::volume::{self, Dtype};
use divseg::{checkpoint, phantom, Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Io = 5,
    Numeric = 6,
    Contract = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Divergence selector mirroring the core enum.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsegDivergence {
    Holder = 0,
    TotalVariation = 1,
    SquaredHellinger = 2,
    KullbackLeibler = 3,
    NeymanChi2 = 4,
    JensenShannon = 5,
}

impl From<DsegDivergence> for DivergenceKind {
    fn from(d: DsegDivergence) -> Self {
        match d {
            DsegDivergence::Holder => DivergenceKind::Holder,
            DsegDivergence::TotalVariation => DivergenceKind::TotalVariation,
            DsegDivergence::SquaredHellinger => DivergenceKind::SquaredHellinger,
            DsegDivergence::KullbackLeibler => DivergenceKind::KullbackLeibler,
            DsegDivergence::NeymanChi2 => DivergenceKind::NeymanChi2,
            DsegDivergence::JensenShannon => DivergenceKind::JensenShannon,
        }
    }
}

/// Evaluation region: WT = {1,2,3}, TC = {2,3}, ET = {3}.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DsegRegion {
    WholeTumor = 0,
    TumorCore = 1,
    EnhancingTumor = 2,
}

impl From<DsegRegion> for Region {
    fn from(r: DsegRegion) -> Self {
        match r {
            DsegRegion::WholeTumor => Region::WholeTumor,
            DsegRegion::TumorCore => Region::TumorCore,
            DsegRegion::EnhancingTumor => Region::EnhancingTumor,
        }
    }
}

/// Network shape. `channels` points to `levels` widths.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DsegArch {
    pub channels: *const usize,
    pub levels: usize,
    pub classes: usize,
    pub groups: usize,
}

/// Opaque model handle.
pub struct DsegModel {
    params: ModelParams,
}

enum FfiError {
    Null(&'static str),
    Arg(String),
    Small { needed: usize },
    Core(Error),
}

impl From<Error> for FfiError {
    fn from(e: Error) -> Self {
        FfiError::Core(e)
    }
}

type FfiResult<T> = std::result::Result<T, FfiError>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DsegStatus {
    match e {
        Error::InvalidShape(_) | Error::Domain { .. } => DsegStatus::InvalidArgument,
        Error::NonFinite { .. } | Error::Numeric(_) => DsegStatus::Numeric,
        Error::Config(_) => DsegStatus::Config,
        Error::Contract(_) => DsegStatus::Contract,
        Error::Parse(_) | Error::Json(_) => DsegStatus::Parse,
        Error::Io(_) => DsegStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> FfiResult<()>) -> DsegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            DsegStatus::Ok
        }
        Ok(Err(err)) => {
            let (status, msg) = match err {
                FfiError::Null(name) => (DsegStatus::NullPointer, format!("null pointer: {name}")),
                FfiError::Arg(m) => (DsegStatus::InvalidArgument, m),
                FfiError::Small { needed } => (
                    DsegStatus::BufferTooSmall,
                    format!("output buffer too small; {needed} elements needed"),
                ),
                FfiError::Core(e) => (status_of(&e), e.to_string()),
            };
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".to_string());
            DsegStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, name: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    // SAFETY: caller guarantees `p` points to `len` readable elements.
    Ok(unsafe { slice::from_raw_parts(p, len) })
}

unsafe fn slice_out<'a, T>(p: *mut T, len: usize, name: &'static str) -> FfiResult<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    // SAFETY: caller guarantees `p` points to `len` writable elements.
    Ok(unsafe { slice::from_raw_parts_mut(p, len) })
}

unsafe fn write_out<T>(p: *mut T, v: T, name: &'static str) -> FfiResult<()> {
    if p.is_null() {
        return Err(FfiError::Null(name));
    }
    // SAFETY: checked non-null; caller guarantees it is writable.
    unsafe { p.write(v) };
    Ok(())
}

unsafe fn path_in(p: *const c_char) -> FfiResult<PathBuf> {
    if p.is_null() {
        return Err(FfiError::Null("path"));
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(PathBuf::from)
        .map_err(|_| FfiError::Arg("path is not valid UTF-8".to_string()))
}

unsafe fn arch_in(arch: *const DsegArch) -> FfiResult<ArchConfig> {
    if arch.is_null() {
        return Err(FfiError::Null("arch"));
    }
    // SAFETY: checked non-null.
    let a = unsafe { &*arch };
    let channels = unsafe { slice_in(a.channels, a.levels, "arch.channels")? }.to_vec();
    let cfg = ArchConfig {
        channels,
        classes: a.classes,
        groups: a.groups,
    };
    cfg.validate()?;
    Ok(cfg)
}

unsafe fn model_ref<'a>(model: *const DsegModel) -> FfiResult<&'a DsegModel> {
    if model.is_null() {
        return Err(FfiError::Null("model"));
    }
    // SAFETY: caller passes a live handle from this library.
    Ok(unsafe { &*model })
}

fn prob(values: &[f64]) -> FfiResult<ProbVector> {
    Ok(ProbVector::new(values.to_vec())?)
}

fn voxels(dims: [usize; 3]) -> FfiResult<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| FfiError::Arg(format!("invalid dims {dims:?}")))
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[unsafe(no_mangle)]
pub extern "C" fn dseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[unsafe(no_mangle)]
pub extern "C" fn dseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Hölder pseudo-divergence of two probability vectors of length `n`.
///
/// # Safety
/// `p` and `q` must point to `n` readable doubles; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_hpd(p: *const f64, q: *const f64, n: usize, alpha: f64, out: *mut f64) -> DsegStatus {
    guard(|| unsafe {
        let p = prob(slice_in(p, n, "p")?)?;
        let q = prob(slice_in(q, n, "q")?)?;
        let e = HolderExponents::new(alpha)?;
        write_out(out, divergence::hpd(&p, &q, e)?, "out")
    })
}

/// Any supported divergence D(p : q). `alpha` is used only for Hölder.
///
/// # Safety
/// `p` and `q` must point to `n` readable doubles; `out` must be writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_divergence(
    kind: DsegDivergence,
    p: *const f64,
    q: *const f64,
    n: usize,
    alpha: f64,
    out: *mut f64,
) -> DsegStatus {
    guard(|| unsafe {
        let p = prob(slice_in(p, n, "p")?)?;
        let q = prob(slice_in(q, n, "q")?)?;
        let e = HolderExponents::new(alpha)?;
        write_out(out, divergence::divergence(kind.into(), &p, &q, e)?, "out")
    })
}

/// Dice similarity of two label maps of `n` voxels over `region`.
/// `both_empty` (optional) receives 1 when the region is absent from both.
///
/// # Safety
/// `pred` and `gt` must point to `n` readable bytes; `out` must be writable
/// and `both_empty` either NULL or writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_dsc(
    pred: *const u8,
    gt: *const u8,
    n: usize,
    region: DsegRegion,
    out: *mut f64,
    both_empty: *mut u8,
) -> DsegStatus {
    guard(|| unsafe {
        let pred = LabelVolume::new([1, 1, n], slice_in(pred, n, "pred")?.to_vec())?;
        let gt = LabelVolume::new([1, 1, n], slice_in(gt, n, "gt")?.to_vec())?;
        let s = dsc_metric(&pred, &gt, region.into())?;
        write_out(out, s.value, "out")?;
        if !both_empty.is_null() {
            both_empty.write(u8::from(s.both_empty));
        }
        Ok(())
    })
}

/// Synthesises one phantom. `volumes` receives the four modalities
/// back to back (Fl, T2, T1c, T1), each `d*h*w` voxels; `labels` receives
/// the class map.
///
/// # Safety
/// `volumes` must hold `4*d*h*w` doubles and `labels` `d*h*w` bytes.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_phantom(
    seed: u64,
    d: usize,
    h: usize,
    w: usize,
    volumes: *mut f64,
    labels: *mut u8,
) -> DsegStatus {
    guard(|| unsafe {
        let n = voxels([d, h, w])?;
        let vol_out = slice_out(volumes, MODALITIES * n, "volumes")?;
        let lab_out = slice_out(labels, n, "labels")?;
        let sample = phantom::generate_phantom(seed, [d, h, w])?;
        for (dst, v) in vol_out.chunks_mut(n).zip(&sample.volumes) {
            dst.copy_from_slice(v.data());
        }
        lab_out.copy_from_slice(sample.labels.data());
        Ok(())
    })
}

/// Reads a volume file into `out` (capacity `cap` doubles) and its
/// `[C, D, H, W]` extents into `dims`. With `out` NULL only `dims` is filled,
/// which lets the caller size the buffer.
///
/// # Safety
/// `path` must be a NUL-terminated string, `dims` must hold 4 writable
/// `size_t`, and `out` must be NULL or hold `cap` writable doubles.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_volume_read(
    path: *const c_char,
    out: *mut f64,
    cap: usize,
    dims: *mut usize,
) -> DsegStatus {
    guard(|| unsafe {
        let path = path_in(path)?;
        let dims = slice_out(dims, 4, "dims")?;
        let (t, _) = volume::read_volume(&path)?;
        let (c, d, h, w) = t.volume_dims()?;
        dims.copy_from_slice(&[c, d, h, w]);
        if out.is_null() {
            return Ok(());
        }
        if cap < t.numel() {
            return Err(FfiError::Small { needed: t.numel() });
        }
        slice_out(out, t.numel(), "out")?.copy_from_slice(t.data());
        Ok(())
    })
}

/// Writes a `[C, D, H, W]` float volume (stored as f32).
///
/// # Safety
/// `path` must be a NUL-terminated string, `dims` 4 readable `size_t`, and
/// `data` the product of `dims` readable doubles.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_volume_write(path: *const c_char, data: *const f64, dims: *const usize) -> DsegStatus {
    guard(|| unsafe {
        let path = path_in(path)?;
        let dims = slice_in(dims, 4, "dims")?;
        let n = voxels([dims[1], dims[2], dims[3]])?
            .checked_mul(dims[0])
            .filter(|&n| n > 0)
            .ok_or_else(|| FfiError::Arg("zero channels".to_string()))?;
        let t = Tensor::new(dims.to_vec(), slice_in(data, n, "data")?.to_vec())?;
        volume::write_volume(&path, &t, Dtype::F32)?;
        Ok(())
    })
}

/// Creates a freshly initialised model.
///
/// # Safety
/// `arch` must be a valid pointer and `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_model_new(arch: *const DsegArch, seed: u64, out: *mut *mut DsegModel) -> DsegStatus {
    guard(|| unsafe {
        let arch = arch_in(arch)?;
        let params = init_params(seed, &arch)?;
        write_out(out, Box::into_raw(Box::new(DsegModel { params })), "out")
    })
}

/// Loads a checkpoint. The architecture must match the one it was saved with.
///
/// # Safety
/// `path` must be a NUL-terminated string, `arch` valid and `out` writable.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_model_load(
    path: *const c_char,
    arch: *const DsegArch,
    out: *mut *mut DsegModel,
) -> DsegStatus {
    guard(|| unsafe {
        let path = path_in(path)?;
        let arch = arch_in(arch)?;
        let params = checkpoint::load(&path, &arch)?;
        write_out(out, Box::into_raw(Box::new(DsegModel { params })), "out")
    })
}

/// Saves a model checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_model_save(model: *const DsegModel, path: *const c_char) -> DsegStatus {
    guard(|| unsafe {
        let model = model_ref(model)?;
        let path = path_in(path)?;
        checkpoint::save(&path, &model.params)?;
        Ok(())
    })
}

/// Releases a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_model_free(model: *mut DsegModel) {
    if !model.is_null() {
        // SAFETY: handle came from Box::into_raw in this library.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of scalar parameters, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_model_param_count(model: *const DsegModel) -> usize {
    if model.is_null() {
        return 0;
    }
    // SAFETY: live handle.
    unsafe { &*model }.params.count()
}

/// Number of output classes, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[unsafe(no_mangle)]
pub unsafe extern "C" fn dseg_model_classes(model: *const DsegModel) -> usize {
    if model.is_null() {
        return 0;
    }
    // SAFETY: live handle.
    unsafe { &*model }.params.arch().classes
}

/// Runs the model on the modalities selected by `mask_bits` (bit 0 = Fl,
/// bit 1 = T2, bit 2 = T1c, bit 3 = T1). `volumes` holds all four
/// modalities back to back; masked-off ones are ignored and may hold
/// anything. `logits` receives `classes*d*h*w` values and `labels`
/// (optional) the per-voxel argmax.
///
/// # Safety
/// `volumes` must hold `4*d*h*w` readable doubles, `logits` `logits_len`
/// writable doubles, and `labels` be NULL or hold `d*h*w` writable bytes.
#[unsafe(no_mangle)]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dseg_model_predict(
    model: *const DsegModel,
    volumes: *const f64,
    d: usize,
    h: usize,
    w: usize,
    mask_bits: u8,
    logits: *mut f64,
    logits_len: usize,
    labels: *mut u8,
) -> DsegStatus {
    guard(|| unsafe {
        let model = model_ref(model)?;
        let n = voxels([d, h, w])?;
        let classes = model.params.arch().classes;
        if logits_len < classes * n {
            return Err(FfiError::Small { needed: classes * n });
        }
        let mask = ModalityMask::from_bits(mask_bits)?;
        let input = slice_in(volumes, MODALITIES * n, "volumes")?;
        let vols = input
            .chunks(n)
            .map(|c| Tensor::new(vec![1, d, h, w], c.to_vec()))
            .collect::<divseg::Result<Vec<_>>>()?;
        let out = model.params.predict(&vols, mask)?;
        slice_out(logits, classes * n, "logits")?.copy_from_slice(out.data());
        if !labels.is_null() {
            let argmax = LabelVolume::argmax(&out)?;
            slice_out(labels, n, "labels")?.copy_from_slice(argmax.data());
        }
        Ok(())
    })
}
