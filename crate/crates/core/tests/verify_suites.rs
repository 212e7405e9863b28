use sst_core::autodiff::inject_vjp_fault;
use sst_core::verify::{gradcheck_suite, oracle_suite, GradcheckOptions, Precision, Subject};
use sst_core::OpKind;

fn primitives_only(seed: u64) -> GradcheckOptions {
    GradcheckOptions { seed, primitive_seeds: 3, blocks: false, ..GradcheckOptions::default() }
}

#[test]
fn default_gradcheck_passes() {
    let report = gradcheck_suite(&GradcheckOptions::default()).unwrap();
    println!("{report}");
    assert!(report.all_passed(), "{report}");
    for kind in OpKind::ALL {
        for p in ["f64", "f32"] {
            assert!(
                report.results.iter().any(|r| r.subject == Subject::Primitive(kind) && r.precision == p),
                "no {p} check covers {}",
                kind.name()
            );
        }
    }
    for block in ["ffn", "unmix", "spectral_ab", "spatial_ab", "loss_two_stages"] {
        assert!(report.results.iter().any(|r| r.name == block), "missing block {block}");
    }
}

#[test]
fn default_oracles_pass() {
    let report = oracle_suite(0, None).unwrap();
    println!("{report}");
    assert!(report.all_passed(), "{report}");
}

#[test]
fn injected_fault_fails_exactly_that_op() {
    for kind in OpKind::ALL {
        inject_vjp_fault(Some(kind));
        let report = gradcheck_suite(&GradcheckOptions { precisions: vec![Precision::F64], ..primitives_only(1) });
        inject_vjp_fault(None);
        let report = report.unwrap();
        assert_eq!(report.failing_ops(), vec![kind], "fault in {}:\n{report}", kind.name());
    }
}

#[test]
fn verdicts_do_not_depend_on_seed() {
    for seed in 0..5 {
        let g = gradcheck_suite(&primitives_only(seed)).unwrap();
        assert!(g.all_passed(), "seed {seed}:\n{g}");
        let o = oracle_suite(seed, None).unwrap();
        assert!(o.all_passed(), "seed {seed}:\n{o}");
    }
}
