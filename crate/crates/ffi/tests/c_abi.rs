use std::ffi::{CStr, CString};
use std::ptr;

use lazypim_ffi::*;

fn data(name: &str) -> String {
    format!("{}/../core/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn fig3_trace_runs_through_the_c_abi() {
    unsafe {
        let cfg = lp_config_default();
        let key = CString::new("debug.validate=true").unwrap();
        assert_eq!(lp_config_set(cfg, key.as_ptr()), LpStatus::Ok);

        let path = CString::new(data("fig3-timeline.trc")).unwrap();
        let mut trace = ptr::null_mut();
        assert_eq!(lp_trace_load(path.as_ptr(), &mut trace), LpStatus::Ok);
        assert!(lp_trace_len(trace) > 0);

        let mut run = ptr::null_mut();
        assert_eq!(lp_run(cfg, trace, &mut run), LpStatus::Ok);
        assert!(lp_run_total_cycles(run) > 0);
        assert_eq!(lp_run_conflicts(run), 1);

        // Both writes to B survive the merge.
        let mut w = 0u64;
        assert_eq!(lp_run_read_word(run, 0x1000_0040, &mut w), LpStatus::Ok);
        assert_eq!(w, 0xb1);
        assert_eq!(lp_run_read_word(run, 0x1000_0048, &mut w), LpStatus::Ok);
        assert_eq!(w, 0xb2);

        let json = lp_run_report_json(run);
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        lp_string_free(json);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["protocol"], "lazypim");
        assert_eq!(v["metrics"]["total_cycles"].as_u64(), Some(lp_run_total_cycles(run)));

        lp_run_free(run);
        lp_trace_free(trace);
        lp_config_free(cfg);
    }
}

#[test]
fn generated_trace_matches_config_workload() {
    unsafe {
        let path = CString::new(data("no-sharing.toml")).unwrap();
        let mut cfg = ptr::null_mut();
        assert_eq!(lp_config_load(path.as_ptr(), &mut cfg), LpStatus::Ok);
        let mut generated = ptr::null_mut();
        assert_eq!(lp_trace_generate(cfg, &mut generated), LpStatus::Ok);
        let trc = CString::new(data("no-sharing.trc")).unwrap();
        let mut shipped = ptr::null_mut();
        assert_eq!(lp_trace_load(trc.as_ptr(), &mut shipped), LpStatus::Ok);
        assert_eq!(lp_trace_len(generated), lp_trace_len(shipped));
        lp_trace_free(generated);
        lp_trace_free(shipped);
        lp_config_free(cfg);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let bad = CString::new("0 Q 10").unwrap();
        let mut trace = ptr::null_mut();
        assert_eq!(lp_trace_parse(bad.as_ptr(), &mut trace), LpStatus::Parse);
        assert!(trace.is_null());
        let msg = CStr::from_ptr(lp_last_error()).to_str().unwrap();
        assert!(msg.contains("line 1"), "{msg}");

        let cfg = lp_config_default();
        let key = CString::new("signature.bits=1000").unwrap();
        assert_ne!(lp_config_set(cfg, key.as_ptr()), LpStatus::Ok);
        let toml = lp_config_to_toml(cfg);
        assert!(CStr::from_ptr(toml).to_str().unwrap().contains("bits = 2048"));
        lp_string_free(toml);
        lp_config_free(cfg);

        let missing = CString::new("/nonexistent/x.trc").unwrap();
        assert_eq!(lp_trace_load(missing.as_ptr(), &mut trace), LpStatus::Io);
    }
}

#[test]
fn header_declares_every_export() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let src = std::fs::read_to_string(format!("{dir}/src/lib.rs")).unwrap();
    let header = std::fs::read_to_string(format!("{dir}/include/lazypim.h")).unwrap();
    let names: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(names.len() > 15);
    for n in names {
        assert!(header.contains(&format!("{n}(")), "{n} missing from header");
    }
    assert!(header.contains("typedef struct LpRun LpRun;"));
}
