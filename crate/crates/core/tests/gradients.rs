use sfmkit_core::suite::{case_names, run_grad_suite, CaseGroup, SuiteConfig};
use sfmkit_core::OpKind;

#[test]
fn standard_suite_passes() {
    let r = run_grad_suite(&SuiteConfig::default(), None).unwrap();
    for c in &r.cases {
        println!(
            "{:<28} {:>12.3e} (tol {:.0e}) seed {}",
            c.name, c.max_rel_error, c.tolerance, c.worst_seed
        );
    }
    assert!(r.passed());
    assert_eq!(r.cases.len(), case_names().len());
    for g in [CaseGroup::Op, CaseGroup::Loss, CaseGroup::Block] {
        assert!(r.cases.iter().any(|c| c.group == g));
    }
    let loss_tol = SuiteConfig::default().tolerance(CaseGroup::Loss);
    assert!(loss_tol <= 1e-6);
}

#[test]
fn every_faulty_backward_is_caught() {
    let cfg = SuiteConfig {
        seeds: 2,
        ..SuiteConfig::default()
    };
    for kind in OpKind::ALL.into_iter().filter(|k| *k != OpKind::Leaf) {
        let r = run_grad_suite(&cfg, Some(kind)).unwrap();
        assert!(!r.passed(), "flipping {kind} went unnoticed");
        let worst = r.worst().unwrap();
        assert!(worst.max_rel_error > worst.tolerance);
    }
}

#[test]
fn suite_is_deterministic() {
    let cfg = SuiteConfig {
        seeds: 1,
        ..SuiteConfig::default()
    };
    let a = run_grad_suite(&cfg, None).unwrap();
    let b = run_grad_suite(&cfg, None).unwrap();
    assert_eq!(a, b);
}
