use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use fliplab_ffi::*;

/// Two-input, two-class identity model as JSON.
fn identity_json() -> String {
    use fliplab::model::{Layer, ModelMeta, QuantizedModel, QuantizedTensor};
    let w = QuantizedTensor::new(vec![1, 0, 0, 1], 1.0, vec![2, 2]).unwrap();
    QuantizedModel::new(vec![Layer::exit(w, vec![0.0, 0.0])], ModelMeta::default()).unwrap().to_json().unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(fl_last_error()).to_string_lossy().into_owned() }
}

fn identity() -> *mut FlModel {
    let json = CString::new(identity_json()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fl_model_from_json(json.as_ptr(), &mut m) }, FlStatus::Ok, "{}", last_error());
    m
}

fn dataset() -> *mut FlDataset {
    let x = [2.0, 1.0, 1.0, 3.0, 5.0, 0.0, 0.0, 1.0];
    let y = [0u32, 1, 0, 1];
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { fl_dataset_from_rows(x.as_ptr(), y.as_ptr(), 4, 2, 2, &mut d) }, FlStatus::Ok);
    d
}

#[test]
fn accuracy_and_flips_round_trip() {
    unsafe {
        let m = identity();
        let d = dataset();
        let mut acc = 0.0;
        assert_eq!(fl_accuracy(m, d, &mut acc), FlStatus::Ok);
        assert_eq!(acc, 1.0);

        let mut set = ptr::null_mut();
        assert_eq!(fl_flipset_new(&mut set), FlStatus::Ok);
        // 1 -> -127 on the diagonal swaps every prediction toward the other class.
        assert_eq!(fl_flipset_insert(set, 0, 3, 7), FlStatus::Ok);
        assert_eq!(fl_flipset_insert(set, 0, 0, 7), FlStatus::Ok);
        assert_eq!(fl_flipset_insert(set, 0, 0, 7), FlStatus::Ok);
        let mut n = 0;
        assert_eq!(fl_flipset_len(set, &mut n), FlStatus::Ok);
        assert_eq!(n, 2);
        let (mut l, mut p, mut b) = (9, 9, 9);
        assert_eq!(fl_flipset_get(set, 0, &mut l, &mut p, &mut b), FlStatus::Ok);
        assert_eq!((l, p, b), (0, 0, 7));

        let mut flipped = ptr::null_mut();
        assert_eq!(fl_model_apply_flips(m, set, &mut flipped), FlStatus::Ok);
        let mut w = 0i8;
        assert_eq!(fl_model_weight(flipped, 0, 0, &mut w), FlStatus::Ok);
        assert_eq!(w, -127);
        assert_eq!(fl_model_weight(m, 0, 0, &mut w), FlStatus::Ok);
        assert_eq!(w, 1);
        assert_eq!(fl_accuracy(flipped, d, &mut acc), FlStatus::Ok);
        assert_eq!(acc, 0.0);

        fl_model_free(flipped);
        fl_flipset_free(set);
        fl_dataset_free(d);
        fl_model_free(m);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut acc = 0.0;
        assert_eq!(fl_accuracy(ptr::null(), ptr::null(), &mut acc), FlStatus::NullPointer);
        assert!(last_error().contains("model"));

        let m = identity();
        let mut set = ptr::null_mut();
        fl_flipset_new(&mut set);
        assert_eq!(fl_flipset_insert(set, 0, 99, 7), FlStatus::Ok);
        let mut out = ptr::null_mut();
        assert_eq!(fl_model_apply_flips(m, set, &mut out), FlStatus::Address);
        assert!(out.is_null());
        assert_eq!(fl_flipset_insert(set, 0, 0, 8), FlStatus::Address);

        let bad = CString::new("{not json").unwrap();
        let mut m2 = ptr::null_mut();
        assert_eq!(fl_model_from_json(bad.as_ptr(), &mut m2), FlStatus::Parse);

        let x = [1.0, 2.0, 3.0];
        let mut d = ptr::null_mut();
        assert_eq!(fl_dataset_from_rows(x.as_ptr(), [0u32].as_ptr(), 1, 3, 2, &mut d), FlStatus::Ok);
        assert_eq!(fl_accuracy(m, d, &mut acc), FlStatus::Dimension);

        let missing = CString::new("/nonexistent/model.json").unwrap();
        assert_eq!(fl_model_load(missing.as_ptr(), &mut m2), FlStatus::Io);

        fl_dataset_free(d);
        fl_flipset_free(set);
        fl_model_free(m);
        fl_model_free(ptr::null_mut());
    }
}

#[test]
fn secded_corrects_single_and_flags_double() {
    let data = 0x0123_4567_89ab_cdefu64;
    let check = fl_secded_encode(data);
    let (mut out, mut st) = (0u64, FlDecodeStatus::Clean);
    unsafe {
        assert_eq!(fl_secded_decode(data, check, &mut out, &mut st), FlStatus::Ok);
        assert_eq!((out, st), (data, FlDecodeStatus::Clean));
        assert_eq!(fl_secded_decode(data ^ (1 << 40), check, &mut out, &mut st), FlStatus::Ok);
        assert_eq!((out, st), (data, FlDecodeStatus::Corrected));
        assert_eq!(fl_secded_decode(data ^ 0b11, check, &mut out, &mut st), FlStatus::Ok);
        assert_eq!(st, FlDecodeStatus::Uncorrectable);
    }
}

#[test]
fn attack_through_the_c_api() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fliplab::data::BlobSpec { samples: 600, dim: 16, informative: 4, ..Default::default() };
    let (train, eval) = spec.generate(2).unwrap().split_at(400);
    let arch = vec![
        fliplab::train::LayerSpec::Dense { units: 8, role: fliplab::model::Role::AttnQ },
        fliplab::train::LayerSpec::Relu,
        fliplab::train::LayerSpec::SoftmaxExit,
    ];
    let (model, _) = fliplab::train::train_reference(&arch, &train, 2, &Default::default()).unwrap();
    let mpath = dir.path().join("m.json");
    let dpath = dir.path().join("eval.csv");
    model.save(&mpath).unwrap();
    eval.save_csv(&dpath).unwrap();

    unsafe {
        let (mut m, mut d) = (ptr::null_mut(), ptr::null_mut());
        let mp = CString::new(mpath.to_str().unwrap()).unwrap();
        let dp = CString::new(dpath.to_str().unwrap()).unwrap();
        assert_eq!(fl_model_load(mp.as_ptr(), &mut m), FlStatus::Ok);
        assert_eq!(fl_dataset_load_csv(dp.as_ptr(), 4, &mut d), FlStatus::Ok);
        let mut layers = 0;
        fl_model_num_layers(m, &mut layers);
        assert_eq!(layers, 3);

        let mut params = fl_attack_params_default();
        params.episodes = 40;
        params.rate_percent = 25.0;
        let mut set = ptr::null_mut();
        let mut acc = 1.0;
        assert_eq!(fl_attack(m, d, &params, &mut set, &mut acc), FlStatus::Ok, "{}", last_error());
        let mut n = 0;
        fl_flipset_len(set, &mut n);
        assert!(n >= 1);

        let mut flipped = ptr::null_mut();
        assert_eq!(fl_model_apply_flips(m, set, &mut flipped), FlStatus::Ok);
        let mut check = 0.0;
        fl_accuracy(flipped, d, &mut check);
        assert_eq!(check, acc);

        params.alpha = 2.0;
        let mut none = ptr::null_mut();
        assert_eq!(fl_attack(m, d, &params, &mut none, ptr::null_mut()), FlStatus::InvalidArgument);

        fl_model_free(flipped);
        fl_flipset_free(set);
        fl_dataset_free(d);
        fl_model_free(m);
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/fliplab.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["fl_attack", "fl_last_error", "FL_STATUS_NULL_POINTER", "typedef struct FlModel FlModel"] {
        assert!(text.contains(name), "header lacks {name}");
    }
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() else {
        eprintln!("no C compiler; skipping the syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
