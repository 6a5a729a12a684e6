use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lprkit::imaging::{load_png, save_png, to_network_input, CropBox, Image};
use lprkit::lprnet::{LprNet, LprNetConfig, Widths};
use lprkit::CharSet;
use lprkit_ffi::*;

fn tiny_model(dir: &Path) -> (LprNet, PathBuf) {
    let mut cfg = LprNetConfig::new(CharSet::plates(), 11);
    cfg.widths = Widths::TINY;
    let net = LprNet::new(cfg).unwrap();
    let path = dir.join("tiny.lprb");
    net.save(&path).unwrap();
    (net, path)
}

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        lpr_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn model_round_trip_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (net, path) = tiny_model(dir.path());
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut model: *mut LprModel = ptr::null_mut();
    unsafe {
        assert_eq!(lpr_model_load(cpath.as_ptr(), &mut model), LprStatus::Ok);
        assert!(!model.is_null());
        let mut classes = 0usize;
        assert_eq!(lpr_model_num_classes(model, &mut classes), LprStatus::Ok);
        assert_eq!(classes, 37);

        let png = dir.path().join("p.png");
        save_png(&Image::filled(300, 80, [0.8, 0.7, 0.3]).unwrap(), &png).unwrap();
        // the PNG is 8-bit, so compare against what was actually stored
        let photo = load_png(&png).unwrap();
        let input = to_network_input(&photo, &CropBox::PLATE_ROI).unwrap();
        let expected = net.recognize(&input).unwrap().remove(0);

        let mut buf = vec![0 as c_char; 64];
        let mut needed = 0usize;
        let data = input.data();
        assert_eq!(
            lpr_model_recognize(model, data.as_ptr(), data.len(), buf.as_mut_ptr(), buf.len(), &mut needed),
            LprStatus::Ok
        );
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), expected);
        assert_eq!(needed, expected.len() + 1);

        let cpng = CString::new(png.to_str().unwrap()).unwrap();
        assert_eq!(lpr_model_recognize_png(model, cpng.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut needed), LprStatus::Ok);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_str().unwrap(), expected);

        assert_eq!(
            lpr_model_recognize(model, data.as_ptr(), 10, buf.as_mut_ptr(), buf.len(), ptr::null_mut()),
            LprStatus::InvalidArgument
        );
        assert!(last_error().contains("6768"));
        if !expected.is_empty() {
            assert_eq!(
                lpr_model_recognize(model, data.as_ptr(), data.len(), buf.as_mut_ptr(), 1, &mut needed),
                LprStatus::BufferTooSmall
            );
            assert_eq!(needed, expected.len() + 1);
        }
        lpr_model_free(model);
    }
}

#[test]
fn load_errors() {
    let missing = CString::new("/no/such/model.lprb").unwrap();
    let mut model: *mut LprModel = ptr::NonNull::dangling().as_ptr();
    unsafe {
        assert_eq!(lpr_model_load(missing.as_ptr(), &mut model), LprStatus::Io);
        assert!(model.is_null());
        assert!(last_error().contains("/no/such/model.lprb"));
        assert_eq!(lpr_model_load(ptr::null(), &mut model), LprStatus::NullPointer);
        assert_eq!(lpr_model_load(missing.as_ptr(), ptr::null_mut()), LprStatus::NullPointer);
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.lprb");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let cjunk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(lpr_model_load(cjunk.as_ptr(), &mut model), LprStatus::Checkpoint);
        lpr_model_free(ptr::null_mut());
    }
}

#[test]
fn levenshtein_and_evaluator() {
    let a = CString::new("kitten").unwrap();
    let b = CString::new("sitting").unwrap();
    let mut d = 0usize;
    unsafe {
        assert_eq!(lpr_levenshtein(a.as_ptr(), b.as_ptr(), &mut d), LprStatus::Ok);
        assert_eq!(d, 3);
        assert_eq!(lpr_levenshtein(a.as_ptr(), ptr::null(), &mut d), LprStatus::NullPointer);

        let ev = lpr_evaluator_new();
        let mut report = LprReport::default();
        assert_eq!(lpr_evaluator_report(ev, &mut report), LprStatus::Empty);
        for (gt, pred) in [("01BNU35", "01BNU35"), ("01BNU35", "01BNU3"), ("01BNU35", "O1BNU35"), ("38GVK61", "38GVK61")] {
            let (g, p) = (CString::new(gt).unwrap(), CString::new(pred).unwrap());
            assert_eq!(lpr_evaluator_add(ev, g.as_ptr(), p.as_ptr()), LprStatus::Ok);
        }
        assert_eq!(lpr_evaluator_report(ev, &mut report), LprStatus::Ok);
        assert_eq!((report.tp, report.tn1, report.tn2, report.n), (2, 1, 1, 4));
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.mean_levenshtein, 0.5);
        lpr_evaluator_free(ev);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/lprkit.h")
}

#[test]
fn header_declares_the_abi() {
    let text = std::fs::read_to_string(header()).unwrap();
    for sym in [
        "lpr_last_error",
        "lpr_model_load",
        "lpr_model_free",
        "lpr_model_num_classes",
        "lpr_model_recognize",
        "lpr_model_recognize_png",
        "lpr_levenshtein",
        "lpr_evaluator_new",
        "lpr_evaluator_add",
        "lpr_evaluator_report",
        "lpr_evaluator_free",
        "typedef struct LprModel LprModel",
        "LPR_STATUS_BUFFER_TOO_SMALL = 6",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
}

fn c_compiler() -> Option<&'static str> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

/// Compiles and runs a small C program against the static library.
#[test]
fn c_program_links_and_runs() {
    let Some(cc) = c_compiler() else {
        eprintln!("no C compiler, skipping");
        return;
    };
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("liblprkit_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built, skipping", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "lprkit.h"
int main(void) {
    size_t d = 0;
    if (lpr_levenshtein("38GVK61", "3BGVK6", &d) != LPR_STATUS_OK) return 1;
    LprEvaluator *ev = lpr_evaluator_new();
    lpr_evaluator_add(ev, "AB", "AB");
    lpr_evaluator_add(ev, "AB", "A");
    LprReport r;
    if (lpr_evaluator_report(ev, &r) != LPR_STATUS_OK) return 2;
    lpr_evaluator_free(ev);
    LprModel *m = NULL;
    LprStatus s = lpr_model_load("/no/such.lprb", &m);
    char msg[128];
    lpr_last_error(msg, sizeof msg);
    printf("%zu %zu %zu %d %s\n", d, r.tp, r.tn1, (int)s, m == NULL ? "null" : "set");
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let out = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "2 1 1 3 null");
}
