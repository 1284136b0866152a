use vit_adapter_core::config::ModelConfig;
use vit_adapter_core::verify::{gradient_suite, MODULE_TOLERANCE, OP_TOLERANCE};

#[test]
fn every_case_passes_at_its_tolerance() {
    let cases = gradient_suite(&ModelConfig::preset("micro").unwrap(), 0).unwrap();
    for c in &cases {
        assert!(c.entries > 0, "{}", c.name);
        assert!(
            c.passed(),
            "{}: {:.3e} >= {:.0e}",
            c.name,
            c.max_rel_err,
            c.tolerance
        );
    }
    let names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
    for must in [
        "ms_deform_core",
        "deformable attention",
        "injector (deformable)",
        "spatial prior module",
        "full model",
    ] {
        assert!(names.contains(&must), "{must} missing");
    }
    assert!(cases.iter().any(|c| c.tolerance == OP_TOLERANCE));
    assert_eq!(cases.last().unwrap().tolerance, MODULE_TOLERANCE);
}
