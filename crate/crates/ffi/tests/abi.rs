use std::ffi::{CStr, CString};
use std::ptr;

use deltaprint::ErrorCategory;
use deltaprint_ffi::*;

fn last_error() -> String {
    let p = dp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn status_codes_match_error_categories() {
    let pairs = [
        (DP_ERR_FORMAT, ErrorCategory::Format),
        (DP_ERR_PAIRING, ErrorCategory::Pairing),
        (DP_ERR_SHAPE, ErrorCategory::Shape),
        (DP_ERR_NUMERIC, ErrorCategory::Numeric),
        (DP_ERR_SCHEMA, ErrorCategory::Schema),
        (DP_ERR_PARAMETER, ErrorCategory::Parameter),
        (DP_ERR_POPULATION, ErrorCategory::Population),
        (DP_ERR_CLASS, ErrorCategory::Class),
        (DP_ERR_DEGENERATE, ErrorCategory::Degenerate),
        (DP_ERR_OPTIMIZATION, ErrorCategory::Optimization),
        (DP_ERR_STRATIFICATION, ErrorCategory::Stratification),
        (DP_ERR_COVERAGE, ErrorCategory::Coverage),
        (DP_ERR_PARSE, ErrorCategory::Parse),
        (DP_ERR_DEPENDENCY, ErrorCategory::Dependency),
        (DP_ERR_IO, ErrorCategory::Io),
    ];
    for (status, cat) in pairs {
        assert_eq!(status, cat.code());
        let name = unsafe { CStr::from_ptr(dp_status_name(status)) };
        assert_eq!(name.to_str().unwrap(), cat.name());
    }
    assert_eq!(unsafe { CStr::from_ptr(dp_status_name(DP_OK)) }.to_str().unwrap(), "ok");
    assert_eq!(unsafe { CStr::from_ptr(dp_status_name(99)) }.to_str().unwrap(), "unknown");
}

#[test]
fn header_declares_every_export() {
    let dir = env!("CARGO_MANIFEST_DIR");
    let src = std::fs::read_to_string(format!("{dir}/src/lib.rs")).unwrap();
    let header = std::fs::read_to_string(format!("{dir}/include/deltaprint.h")).unwrap();
    let mut n = 0;
    for line in src.lines() {
        let Some(rest) = line.split("extern \"C\" fn ").nth(1) else { continue };
        let name = rest.split('(').next().unwrap();
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
        n += 1;
    }
    assert!(n >= 20);
    for opaque in ["DpPopulation", "DpCentroid", "DpFeatureMatrix", "DpClassifier", "DpReport"] {
        assert!(header.contains(&format!("typedef struct {opaque} {opaque};")));
    }
    assert!(header.contains("#define DP_ERR_IO 24"));
}

#[test]
fn null_and_missing_inputs_report_categories() {
    let mut pop: *mut DpPopulation = ptr::null_mut();
    let status = unsafe { dp_population_load(ptr::null(), DP_SCALE_UNIT, &mut pop) };
    assert_eq!(status, DP_ERR_PARAMETER);
    assert!(last_error().contains("manifest_path"));
    assert!(pop.is_null());

    let path = CString::new("/nonexistent/manifest.json").unwrap();
    assert_eq!(unsafe { dp_population_load(path.as_ptr(), DP_SCALE_UNIT, &mut pop) }, DP_ERR_IO);
    assert!(last_error().contains("/nonexistent/manifest.json"));
    assert_eq!(unsafe { dp_population_load(path.as_ptr(), 7, &mut pop) }, DP_ERR_PARAMETER);

    let opts = dp_eval_options_default();
    let mut c: *mut DpCentroid = ptr::null_mut();
    assert_eq!(unsafe { dp_centroid_build(ptr::null(), &opts, 8, &mut c) }, DP_ERR_PARAMETER);
    assert_eq!(unsafe { dp_population_len(ptr::null()) }, 0);
    unsafe {
        dp_population_free(ptr::null_mut());
        dp_centroid_free(ptr::null_mut());
        dp_features_free(ptr::null_mut());
        dp_classifier_free(ptr::null_mut());
        dp_report_free(ptr::null_mut());
        dp_string_free(ptr::null_mut());
    }
}

#[test]
fn numeric_helpers() {
    let m = [3.0, 0.0, 0.0, 0.0, -4.0, 0.0];
    let mut s = [0.0; 2];
    assert_eq!(unsafe { dp_singular_values(m.as_ptr(), 2, 3, s.as_mut_ptr(), 2) }, DP_OK);
    assert!((s[0] - 4.0).abs() < 1e-12 && (s[1] - 3.0).abs() < 1e-12);
    assert_eq!(unsafe { dp_singular_values(m.as_ptr(), 2, 3, s.as_mut_ptr(), 3) }, DP_ERR_SHAPE);

    let scores = [0.1, 0.4, 0.35, 0.8];
    let labels = [0u8, 0, 1, 1];
    let mut auc = 0.0;
    assert_eq!(unsafe { dp_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut auc) }, DP_OK);
    assert_eq!(auc, 0.75);
    let one_class = [1u8; 4];
    assert_eq!(unsafe { dp_auc(scores.as_ptr(), one_class.as_ptr(), 4, &mut auc) }, DP_ERR_CLASS);
}

#[test]
fn synthetic_pipeline_through_handles() {
    unsafe {
        let mut pop: *mut DpPopulation = ptr::null_mut();
        assert_eq!(dp_population_synthetic(42, &mut pop), DP_OK);
        assert_eq!(dp_population_len(pop), 34);

        let mut opts = dp_eval_options_default();
        opts.n_bootstrap = 200;
        let mut centroid: *mut DpCentroid = ptr::null_mut();
        assert_eq!(dp_centroid_build(pop, &opts, 8, &mut centroid), DP_OK);

        let mut m: *mut DpFeatureMatrix = ptr::null_mut();
        assert_eq!(dp_features_extract(pop, centroid, 8, &mut m), DP_OK);
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(dp_features_shape(m, &mut rows, &mut cols), DP_OK);
        assert_eq!((rows, cols), (34, 16 * 22));
        let mut buf = vec![0.0; rows * cols];
        assert_eq!(dp_features_copy(m, buf.as_mut_ptr(), buf.len()), DP_OK);
        assert!(buf.iter().all(|x| x.is_finite()));
        assert_eq!(dp_features_copy(m, buf.as_mut_ptr(), 5), DP_ERR_SHAPE);
        let mut name = ptr::null_mut();
        assert_eq!(dp_features_column_name(m, 0, &mut name), DP_OK);
        assert!(CStr::from_ptr(name).to_str().unwrap().starts_with("0.q_proj."));
        dp_string_free(name);
        assert_eq!(dp_features_column_name(m, cols, &mut name), DP_ERR_PARAMETER);

        let mut clf: *mut DpClassifier = ptr::null_mut();
        assert_eq!(dp_classifier_train(m, &opts, &mut clf), DP_OK);
        let mut probs = vec![0.0; rows];
        assert_eq!(dp_classifier_predict(clf, m, probs.as_mut_ptr(), rows), DP_OK);
        assert!(probs.iter().all(|p| (0.0..=1.0).contains(p)));

        let mut report: *mut DpReport = ptr::null_mut();
        assert_eq!(dp_evaluate(m, &opts, &mut report), DP_OK);
        let (mut auc, mut lo, mut hi) = (0.0, 0.0, 0.0);
        assert_eq!(dp_report_binary_auc(report, &mut auc, &mut lo, &mut hi), DP_OK);
        assert_eq!((auc, lo, hi), (1.0, 1.0, 1.0));
        let mut json = ptr::null_mut();
        assert_eq!(dp_report_to_json(report, &mut json), DP_OK);
        let parsed: serde_json::Value = serde_json::from_str(CStr::from_ptr(json).to_str().unwrap()).unwrap();
        assert!(parsed["drift_probabilities"].as_object().unwrap().len() == 34);
        dp_string_free(json);

        dp_report_free(report);
        dp_classifier_free(clf);
        dp_features_free(m);
        dp_centroid_free(centroid);
        dp_population_free(pop);
    }
}
