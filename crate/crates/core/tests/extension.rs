use perfhom::extension::*;
use perfhom::pde::DiscreteFunction;
use perfhom::{build_domain_mesh, Error, HoleSpec, PerforatedCell, Rect};
use proptest::prelude::*;

fn holed(n: usize) -> PerforatedCell {
    PerforatedCell::new(vec![HoleSpec::square([0.0, 0.0], 0.25)], n, 0.1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn extension_keeps_fluid_values_and_obeys_maximum_principle(k in 2u32..5, seed in 0u64..1000, index in 0usize..30) {
        let eps = 0.5f64.powi(k as i32);
        let d = build_domain_mesh(&holed(8), eps, Rect::unit_square(), 8).unwrap();
        let ext = ExtensionOperator::new(&d).unwrap();
        prop_assert_eq!(ext.cached_shapes(), 1);
        let (_, u) = audit_sample(&d, seed, index);
        let pu = ext.extend(&u).unwrap();
        for (v, x) in d.mesh.vertices.iter().enumerate() {
            prop_assert!((pu.eval(*x).unwrap() - u.at_vertex(v)).abs() < 1e-13);
        }
        let lo = u.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = u.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(pu.values.iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn extension_is_linear(s in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let d = build_domain_mesh(&holed(8), 0.125, Rect::unit_square(), 8).unwrap();
        let ext = ExtensionOperator::new(&d).unwrap();
        let (_, u) = audit_sample(&d, s, 0);
        let (_, v) = audit_sample(&d, s, 1);
        let w: Vec<f64> = u.values.iter().zip(&v.values).map(|(x, y)| a * x + b * y).collect();
        let pw = ext.extend(&DiscreteFunction::new(d.mesh.clone(), w, "combo")).unwrap();
        let (pu, pv) = (ext.extend(&u).unwrap(), ext.extend(&v).unwrap());
        for k in 0..pw.values.len() {
            prop_assert!((pw.values[k] - a * pu.values[k] - b * pv.values[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn nonzero_trace_is_rejected() {
    let d = build_domain_mesh(&holed(8), 0.125, Rect::unit_square(), 8).unwrap();
    let ext = ExtensionOperator::new(&d).unwrap();
    let one = DiscreteFunction::from_fn(d.mesh.clone(), |_| 1.0, "one");
    assert!(matches!(ext.extend(&one), Err(Error::NonzeroTrace { .. })));
    assert!(ext.fill(&one).unwrap().values.iter().all(|v| (v - 1.0).abs() < 1e-13));
}

#[test]
fn foreign_mesh_is_rejected() {
    let d = build_domain_mesh(&holed(8), 0.125, Rect::unit_square(), 8).unwrap();
    let other = build_domain_mesh(&holed(8), 0.0625, Rect::unit_square(), 8).unwrap();
    let ext = ExtensionOperator::new(&d).unwrap();
    let u = DiscreteFunction::from_fn(other.mesh.clone(), |_| 0.0, "zero");
    assert!(matches!(ext.fill(&u), Err(Error::MeshMismatch)));
}

#[test]
fn poincare_constants_are_scale_stable() {
    let cell = holed(8);
    let reports: Vec<PoincareReport> = [0.125, 0.0625]
        .iter()
        .map(|&eps| poincare_check(&cell, eps, &[0.0625, 0.125], 2.0, 2.0, 6, 5).unwrap())
        .collect();
    let c: Vec<f64> = reports.iter().map(|r| r.max_normalized()).collect();
    assert!(c.iter().all(|v| v.is_finite() && *v > 0.0));
    assert!(c[0].max(c[1]) / c[0].min(c[1]) <= 2.0, "{c:?}");
}
