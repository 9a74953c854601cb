//! C interface to fliplab.
//!
//! Every fallible function returns an [`FlStatus`] and writes its result
//! through an out pointer. On failure a message is kept per thread and can be
//! read with [`fl_last_error`]. Handles are opaque; each `*_free` accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fliplab::data::Dataset;
use fliplab::defense::{secded_decode, SecdedWord};
use fliplab::fault::{apply_flipset, BitAddress, BitFlipSet};
use fliplab::model::QuantizedModel;
use fliplab::nn::{evaluate_accuracy, ExitSelector};
use fliplab::profile::ProfileConfig;
use fliplab::rl::{run_flipllm, RlConfig};
use fliplab::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Dimension = 5,
    Address = 6,
    Internal = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlDecodeStatus {
    Clean = 0,
    Corrected = 1,
    Uncorrectable = 2,
}

/// Attack settings; start from [`fl_attack_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct FlAttackParams {
    pub alpha: f64,
    /// Candidate share of the target layer, in percent.
    pub rate_percent: f64,
    pub episodes: usize,
    pub seed: u64,
    pub failure_threshold: f64,
    /// Evaluation rows to sample; 0 uses every row.
    pub eval_rows: usize,
}

pub struct FlModel(QuantizedModel);
pub struct FlDataset(Dataset);
pub struct FlFlipSet(BitFlipSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> FlStatus {
    match e {
        Error::Dimension(_) => FlStatus::Dimension,
        Error::Address(_) | Error::Lineage(_) => FlStatus::Address,
        Error::Io { .. } => FlStatus::Io,
        Error::Json(_) | Error::Csv(_) => FlStatus::Parse,
        Error::Internal(_) => FlStatus::Internal,
        _ => FlStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for `fl_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (FlStatus, String)>) -> FlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside fliplab");
            FlStatus::Panic
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (FlStatus, String)>;
}

impl<T> IntoFfi<T> for fliplab::Result<T> {
    fn ffi(self) -> Result<T, (FlStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (FlStatus, String) {
    (FlStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, (FlStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (FlStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (FlStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), (FlStatus, String)> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message of the last failed call on this thread, or null if none.
///
/// # Safety
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub unsafe extern "C" fn fl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a model JSON file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_model_load(path: *const c_char, out: *mut *mut FlModel) -> FlStatus {
    guard(|| {
        let m = QuantizedModel::load(text(path, "path")?).ffi()?;
        put(out, boxed(FlModel(m)), "out")
    })
}

/// Parses a model from a JSON string.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_model_from_json(json: *const c_char, out: *mut *mut FlModel) -> FlStatus {
    guard(|| {
        let m = QuantizedModel::from_json(text(json, "json")?).ffi()?;
        put(out, boxed(FlModel(m)), "out")
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_model_free(model: *mut FlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of layers, weighted or not.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_model_num_layers(model: *const FlModel, out: *mut usize) -> FlStatus {
    guard(|| put(out, borrow(model, "model")?.0.num_layers(), "out"))
}

/// Stored weight count of `layer`; 0 for layers without weights.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_model_layer_weights(model: *const FlModel, layer: usize, out: *mut usize) -> FlStatus {
    guard(|| {
        let m = &borrow(model, "model")?.0;
        let l = m
            .layer(layer)
            .ok_or_else(|| (FlStatus::Address, format!("layer {layer} outside a model of {}", m.num_layers())))?;
        put(out, l.weights.as_ref().map_or(0, |w| w.len()), "out")
    })
}

/// Stored int8 value of one weight.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_model_weight(model: *const FlModel, layer: usize, param: usize, out: *mut i8) -> FlStatus {
    guard(|| {
        let w = borrow(model, "model")?.0.weights(layer).ffi()?;
        let v = *w
            .values
            .get(param)
            .ok_or_else(|| (FlStatus::Address, format!("parameter {param} outside layer {layer}")))?;
        put(out, v, "out")
    })
}

/// Loads a CSV dataset (features then a label column). `num_classes` of 0
/// infers the class count from the labels.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_dataset_load_csv(
    path: *const c_char,
    num_classes: usize,
    out: *mut *mut FlDataset,
) -> FlStatus {
    guard(|| {
        let classes = (num_classes > 0).then_some(num_classes);
        let d = Dataset::load_csv(text(path, "path")?, classes).ffi()?;
        put(out, boxed(FlDataset(d)), "out")
    })
}

/// Copies `rows × dim` row-major inputs and `rows` labels into a dataset.
///
/// # Safety
/// `inputs` must point to `rows * dim` doubles and `labels` to `rows` values.
#[no_mangle]
pub unsafe extern "C" fn fl_dataset_from_rows(
    inputs: *const f64,
    labels: *const u32,
    rows: usize,
    dim: usize,
    num_classes: usize,
    out: *mut *mut FlDataset,
) -> FlStatus {
    guard(|| {
        if rows > 0 && (inputs.is_null() || labels.is_null()) {
            return Err(null("inputs or labels"));
        }
        let n = rows.checked_mul(dim).ok_or_else(|| (FlStatus::InvalidArgument, "rows * dim overflows".into()))?;
        let x = if n == 0 { vec![] } else { std::slice::from_raw_parts(inputs, n).to_vec() };
        let y = if rows == 0 { vec![] } else { std::slice::from_raw_parts(labels, rows).iter().map(|&v| v as usize).collect() };
        let d = Dataset::new(x, dim, y, num_classes).ffi()?;
        put(out, boxed(FlDataset(d)), "out")
    })
}

/// # Safety
/// `data` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_dataset_free(data: *mut FlDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Final-exit accuracy of `model` on `data`.
///
/// # Safety
/// Both handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_accuracy(model: *const FlModel, data: *const FlDataset, out: *mut f64) -> FlStatus {
    guard(|| {
        let acc = evaluate_accuracy(&borrow(model, "model")?.0, &borrow(data, "data")?.0, ExitSelector::Final).ffi()?;
        put(out, acc, "out")
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_flipset_new(out: *mut *mut FlFlipSet) -> FlStatus {
    guard(|| put(out, boxed(FlFlipSet(BitFlipSet::new())), "out"))
}

/// Adds one address; a duplicate is ignored. Addresses are checked against a
/// model only when the set is applied.
///
/// # Safety
/// `set` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fl_flipset_insert(set: *mut FlFlipSet, layer: usize, param: usize, bit: u8) -> FlStatus {
    guard(|| {
        let s = set.as_mut().ok_or_else(|| null("set"))?;
        if bit > 7 {
            return Err((FlStatus::Address, format!("bit {bit} outside 0..=7")));
        }
        s.0.insert(BitAddress { layer, param, bit });
        Ok(())
    })
}

/// # Safety
/// `set` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_flipset_len(set: *const FlFlipSet, out: *mut usize) -> FlStatus {
    guard(|| put(out, borrow(set, "set")?.0.len(), "out"))
}

/// The `index`-th address in canonical (layer, param, bit) order.
///
/// # Safety
/// `set` must be a live handle and the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn fl_flipset_get(
    set: *const FlFlipSet,
    index: usize,
    layer: *mut usize,
    param: *mut usize,
    bit: *mut u8,
) -> FlStatus {
    guard(|| {
        let s = &borrow(set, "set")?.0;
        let a = s
            .addresses()
            .get(index)
            .ok_or_else(|| (FlStatus::InvalidArgument, format!("index {index} outside a set of {}", s.len())))?;
        put(layer, a.layer, "layer")?;
        put(param, a.param, "param")?;
        put(bit, a.bit, "bit")
    })
}

/// # Safety
/// `set` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fl_flipset_free(set: *mut FlFlipSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Writes a new model equal to `model` with every bit in `set` flipped. The
/// input model is left untouched.
///
/// # Safety
/// Both handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fl_model_apply_flips(
    model: *const FlModel,
    set: *const FlFlipSet,
    out: *mut *mut FlModel,
) -> FlStatus {
    guard(|| {
        let (m, _) = apply_flipset(&borrow(model, "model")?.0, &borrow(set, "set")?.0).ffi()?;
        put(out, boxed(FlModel(m)), "out")
    })
}

/// Default attack settings.
#[no_mangle]
pub extern "C" fn fl_attack_params_default() -> FlAttackParams {
    let (p, r) = (ProfileConfig::default(), RlConfig::default());
    FlAttackParams {
        alpha: p.alpha,
        rate_percent: p.rate_percent,
        episodes: r.episodes,
        seed: r.rng_seed,
        failure_threshold: r.failure_threshold,
        eval_rows: p.eval_subset_size.unwrap_or(0),
    }
}

/// Profiles every layer, searches the most sensitive one and returns the
/// critical flip set. `final_accuracy` may be null.
///
/// # Safety
/// Handles must be live, `params` and `out` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fl_attack(
    model: *const FlModel,
    data: *const FlDataset,
    params: *const FlAttackParams,
    out: *mut *mut FlFlipSet,
    final_accuracy: *mut f64,
) -> FlStatus {
    guard(|| {
        let p = borrow(params, "params")?;
        let pcfg = ProfileConfig {
            alpha: p.alpha,
            rate_percent: p.rate_percent,
            eval_subset_seed: p.seed,
            eval_subset_size: (p.eval_rows > 0).then_some(p.eval_rows),
        };
        let rcfg = RlConfig {
            episodes: p.episodes,
            rng_seed: p.seed,
            failure_threshold: p.failure_threshold,
            ..RlConfig::default()
        };
        pcfg.validate().ffi()?;
        let o = run_flipllm(&borrow(model, "model")?.0, &borrow(data, "data")?.0, &pcfg, &rcfg).ffi()?;
        if !final_accuracy.is_null() {
            final_accuracy.write(o.final_accuracy);
        }
        put(out, boxed(FlFlipSet(o.flips)), "out")
    })
}

/// Check byte of the (72,64) SECDED code for `data`.
#[no_mangle]
pub extern "C" fn fl_secded_encode(data: u64) -> u8 {
    fliplab::defense::secded_encode(data).check
}

/// Decodes a stored word and check byte; single-bit errors are corrected.
///
/// # Safety
/// `out` and `status` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fl_secded_decode(data: u64, check: u8, out: *mut u64, status: *mut FlDecodeStatus) -> FlStatus {
    guard(|| {
        let (d, s) = secded_decode(SecdedWord { data, check });
        let s = match s {
            fliplab::defense::DecodeStatus::Clean => FlDecodeStatus::Clean,
            fliplab::defense::DecodeStatus::Corrected => FlDecodeStatus::Corrected,
            fliplab::defense::DecodeStatus::Uncorrectable => FlDecodeStatus::Uncorrectable,
        };
        put(out, d, "out")?;
        put(status, s, "status")
    })
}
