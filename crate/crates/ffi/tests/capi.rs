use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use conta_ffi::*;

fn last_error() -> String {
    let p = conta_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn example() -> *mut ContaScm {
    let mut scm = ptr::null_mut();
    assert_eq!(unsafe { conta_scm_confounded_example(&mut scm) }, ContaStatus::Ok);
    assert!(!scm.is_null());
    scm
}

#[test]
fn scm_queries_match_the_library() {
    let scm = example();
    let native = conta::scm::DiscreteScm::confounded_example();
    let mut cards = [0usize; 4];
    unsafe {
        assert_eq!(conta_scm_cards(scm, cards.as_mut_ptr()), ContaStatus::Ok);
        assert_eq!(cards, native.cards);
        let ny = cards[3];
        let mut buf = vec![0.0; ny];
        for x in 0..cards[1] {
            assert_eq!(conta_scm_observe(scm, x, buf.as_mut_ptr(), ny), ContaStatus::Ok);
            assert_eq!(buf, native.observe(x).unwrap().values());
            assert_eq!(conta_scm_intervene(scm, x, buf.as_mut_ptr(), ny), ContaStatus::Ok);
            assert_eq!(buf, native.intervene(x).unwrap().values());
            assert_eq!(conta_scm_backdoor(scm, x, buf.as_mut_ptr(), ny), ContaStatus::Ok);
            assert_eq!(buf, native.backdoor_adjust(x).unwrap().values());
        }
        let (mut gap, mut pass) = (f64::NAN, false);
        assert_eq!(conta_scm_verify_backdoor(scm, &mut gap, &mut pass), ContaStatus::Ok);
        assert!(pass && gap < 1e-10);
        let mut tv = 0.0;
        assert_eq!(conta_scm_confounding_gap(scm, &mut tv), ContaStatus::Ok);
        assert!(tv >= 0.1);
        conta_scm_free(scm);
    }
}

#[test]
fn json_round_trip_and_parse_errors() {
    let json = CString::new(conta::scm::DiscreteScm::confounded_example().to_json_string()).unwrap();
    let mut scm = ptr::null_mut();
    unsafe {
        assert_eq!(conta_scm_from_json(json.as_ptr(), &mut scm), ContaStatus::Ok);
        conta_scm_free(scm);
        let bad = CString::new("{\"cards\": [2]}").unwrap();
        let status = conta_scm_from_json(bad.as_ptr(), &mut scm);
        assert_eq!(status, ContaStatus::Json);
        assert!(scm.is_null());
        assert!(last_error().starts_with("E_JSON"));
    }
}

#[test]
fn small_buffer_and_null_pointer_are_reported() {
    let scm = example();
    let mut one = [0.0f64; 1];
    unsafe {
        assert_eq!(
            conta_scm_observe(scm, 0, one.as_mut_ptr(), 1),
            ContaStatus::BufferTooSmall
        );
        assert!(last_error().starts_with("E_BUFFER_TOO_SMALL"));
        assert_eq!(
            conta_scm_observe(ptr::null(), 0, one.as_mut_ptr(), 1),
            ContaStatus::NullPointer
        );
        assert_eq!(
            conta_scm_confounding_gap(scm, ptr::null_mut()),
            ContaStatus::NullPointer
        );
        let mut tv = 0.0;
        assert_eq!(conta_scm_confounding_gap(scm, &mut tv), ContaStatus::Ok);
        assert!(conta_last_error().is_null());
        conta_scm_free(scm);
        conta_scm_free(ptr::null_mut());
    }
}

#[test]
fn nwgm_gap_values() {
    let scores = [1.0, -1.0];
    let prior = [0.5, 0.5];
    let (mut e, mut a, mut g) = (0.0, 0.0, 0.0);
    unsafe {
        let s = conta_nwgm_gap(scores.as_ptr(), prior.as_ptr(), 2, &mut e, &mut a, &mut g);
        assert_eq!(s, ContaStatus::Ok);
    }
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    assert!((e - 0.5 * (sig(1.0) + sig(-1.0))).abs() < 1e-15);
    assert!((a - 0.5).abs() < 1e-15);
    assert!((g - (e - a).abs()).abs() < 1e-15);
    let bad_prior = [0.7, 0.7];
    unsafe {
        let s = conta_nwgm_gap(scores.as_ptr(), bad_prior.as_ptr(), 2, &mut e, &mut a, &mut g);
        assert_eq!(s, ContaStatus::Validation);
    }
}

#[test]
fn miou_over_raw_buffers() {
    // class 1 predicted on 2 pixels, 1 of which is right; background likewise
    let pred = [0u8, 1, 1, 0];
    let gt = [0u8, 1, 0, 255];
    let mut per = [0.0f64; 3];
    let mut mean = 0.0;
    unsafe {
        assert_eq!(
            conta_miou(pred.as_ptr(), gt.as_ptr(), 2, 2, 2, per.as_mut_ptr(), &mut mean),
            ContaStatus::Ok
        );
    }
    assert_eq!(per[0], 0.5);
    assert_eq!(per[1], 0.5);
    assert!(per[2].is_nan());
    assert_eq!(mean, 0.5);
    unsafe {
        assert_eq!(
            conta_miou(pred.as_ptr(), gt.as_ptr(), 2, 2, 2, ptr::null_mut(), &mut mean),
            ContaStatus::Ok
        );
        let bad = [0u8, 7, 0, 0];
        assert_ne!(
            conta_miou(bad.as_ptr(), gt.as_ptr(), 2, 2, 2, ptr::null_mut(), &mut mean),
            ContaStatus::Ok
        );
    }
}

#[test]
fn confounders_and_context_map() {
    // two 2x2 masks: class 1 on the left column, class 2 on the bottom row
    let masks = [1u8, 0, 1, 0, 0, 0, 2, 2];
    let labels = [1u8, 0, 0, 1];
    let mut conf = ptr::null_mut();
    unsafe {
        assert_eq!(
            conta_confounders_build(masks.as_ptr(), labels.as_ptr(), 2, 2, 2, 2, &mut conf),
            ContaStatus::Ok
        );
        let mut row = [0.0; 4];
        assert_eq!(conta_confounders_entry(conf, 0, row.as_mut_ptr(), 4), ContaStatus::Ok);
        assert_eq!(row, [1.0, 0.0, 1.0, 0.0]);
        assert_eq!(conta_confounders_entry(conf, 1, row.as_mut_ptr(), 4), ContaStatus::Ok);
        assert_eq!(row, [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(
            conta_confounders_entry(conf, 2, row.as_mut_ptr(), 4),
            ContaStatus::Validation
        );

        // zero projections give uniform attention: M = (c_1 + c_2) / n^2
        let w = [0.0; 8];
        let x_m = [1u8, 1, 0, 0];
        let mut map = [0.0; 4];
        assert_eq!(
            conta_context_map(conf, x_m.as_ptr(), w.as_ptr(), w.as_ptr(), map.as_mut_ptr(), 4),
            ContaStatus::Ok
        );
        assert_eq!(map, [0.25, 0.0, 0.5, 0.25]);
        conta_confounders_free(conf);
    }
}

#[test]
fn run_reports_config_and_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    std::fs::write(&cfg_path, "{\"rounds\": 0}").unwrap();
    let cfg = CString::new(cfg_path.to_str().unwrap()).unwrap();
    let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(conta_run(cfg.as_ptr(), out.as_ptr(), false), ContaStatus::Config);
        std::fs::write(&cfg_path, "{\"dataset\": \"/nonexistent/conta\"}").unwrap();
        assert_eq!(conta_run(cfg.as_ptr(), out.as_ptr(), false), ContaStatus::NotFound);
        assert!(last_error().starts_with("E_NOT_FOUND"));
        assert_eq!(conta_run(cfg.as_ptr(), ptr::null(), false), ContaStatus::NullPointer);
    }
}

#[test]
fn status_names_are_stable() {
    let name = |s| unsafe { CStr::from_ptr(conta_status_name(s)) }.to_str().unwrap();
    assert_eq!(name(ContaStatus::Ok), "OK");
    assert_eq!(name(ContaStatus::Shape), "E_SHAPE");
    assert_eq!(name(ContaStatus::Panic), "E_PANIC");
    assert_eq!(ContaStatus::from(&conta::Error::Eval("x".into())), ContaStatus::Eval);
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/conta.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in [
        "conta_last_error",
        "conta_status_name",
        "conta_scm_from_json",
        "conta_scm_free",
        "conta_scm_backdoor",
        "conta_nwgm_gap",
        "conta_miou",
        "conta_confounders_build",
        "conta_context_map",
        "conta_run",
        "CONTA_STATUS_PANIC = 19",
        "typedef struct ContaScm ContaScm",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"conta.h\"\n\
         int main(void) {\n\
           ContaScm *scm = NULL;\n\
           double out[2];\n\
           if (conta_scm_confounded_example(&scm) != CONTA_STATUS_OK) return 1;\n\
           ContaStatus s = conta_scm_backdoor(scm, 0, out, 2);\n\
           conta_scm_free(scm);\n\
           return s == CONTA_STATUS_OK ? 0 : (int)s;\n\
         }\n",
    )
    .unwrap();
    let Ok(status) = Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    else {
        eprintln!("no C compiler; skipped the compile check");
        return;
    };
    assert!(status.success(), "header does not compile as C");
}
