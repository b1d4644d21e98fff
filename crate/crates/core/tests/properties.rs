use std::sync::OnceLock;

use dynthick::field::{find_critical, Factor, Point, ScalarField, Term};
use dynthick::flow::{FlowConfig, GradientFlow};
use dynthick::homology::{attach_cell_check, betti_euler, build_complex, BettiVector};
use dynthick::retract::retract_point;
use dynthick::selector::{build_selector, s_reparam, SelectorComplex};
use dynthick::thickening::{build_block, ConleyBlock, Label};
use dynthick::Domain;
use proptest::prelude::*;

fn pt(v: &[f64]) -> Point {
    Point::from_column_slice(v)
}

fn model() -> &'static ScalarField {
    static F: OnceLock<ScalarField> = OnceLock::new();
    F.get_or_init(|| ScalarField::model(2, 1, 1.0, 2.0).unwrap())
}

fn torus() -> &'static ScalarField {
    static F: OnceLock<ScalarField> = OnceLock::new();
    F.get_or_init(|| ScalarField::torus().unwrap())
}

fn block() -> &'static ConleyBlock {
    static B: OnceLock<ConleyBlock> = OnceLock::new();
    B.get_or_init(|| {
        let cp = find_critical(model(), &pt(&[0.0, 0.0])).unwrap();
        build_block(model(), &cp, 1.0, 1.0).unwrap()
    })
}

fn selector() -> &'static SelectorComplex<'static> {
    static S: OnceLock<SelectorComplex<'static>> = OnceLock::new();
    S.get_or_init(|| build_selector(block(), 10_000).unwrap())
}

fn flow(f: &ScalarField) -> GradientFlow {
    GradientFlow::new(f.clone(), FlowConfig::for_tau(1.0)).unwrap()
}

/// Random polynomial/trigonometric field on the torus.
fn term_field(coefs: &[f64]) -> ScalarField {
    let terms = vec![
        Term::new(coefs[0], vec![Factor::Cos { axis: 0, freq: 1.0 }]),
        Term::new(coefs[1], vec![Factor::Sin { axis: 1, freq: 2.0 }]),
        Term::new(
            coefs[2],
            vec![Factor::Cos { axis: 0, freq: 1.0 }, Factor::Sin { axis: 1, freq: 1.0 }],
        ),
        Term::new(
            coefs[3],
            vec![Factor::Sin { axis: 0, freq: 3.0 }, Factor::Cos { axis: 1, freq: 2.0 }],
        ),
    ];
    ScalarField::from_terms("random", Domain::torus(2), terms).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn flow_group_law(u in -1.0f64..1.0, v in -1.0f64..1.0, s in -1.0f64..1.0, t in -1.0f64..1.0) {
        let fl = flow(model());
        let p = pt(&[u, v]);
        let a = fl.flow_map(&fl.flow_map(&p, t).unwrap(), s).unwrap();
        let b = fl.flow_map(&p, s + t).unwrap();
        prop_assert!((a - b).norm() <= 1e-7 * (1.0 + p.norm()));
    }

    #[test]
    fn flow_descends(x in 0.0f64..6.28, y in 0.0f64..6.28, s in 0.01f64..2.0) {
        let fl = flow(torus());
        let p = pt(&[x, y]);
        let q = fl.flow_map(&p, s).unwrap();
        prop_assert!(torus().value(&q) <= torus().value(&p) + 1e-12);
    }

    #[test]
    fn wrap_is_idempotent(x in -20.0f64..20.0, y in -20.0f64..20.0) {
        let d = torus().domain();
        let w = d.wrap(&pt(&[x, y]));
        prop_assert!(d.contains(&w));
        prop_assert_eq!(d.wrap(&w), w);
    }

    #[test]
    fn hessian_symmetric_and_gradient_consistent(
        c in prop::collection::vec(-2.0f64..2.0, 4),
        x in 0.0f64..6.28,
        y in 0.0f64..6.28,
    ) {
        let f = term_field(&c);
        let p = pt(&[x, y]);
        let h = f.hessian(&p);
        prop_assert!((&h - h.transpose()).amax() <= 1e-12);
        let g = f.gradient(&p);
        let step = 1e-6;
        for a in 0..2 {
            let mut e = p.clone();
            e[a] += step;
            let mut w = p.clone();
            w[a] -= step;
            let fd = (f.value(&e) - f.value(&w)) / (2.0 * step);
            prop_assert!((fd - g[a]).abs() <= 1e-6 * (1.0 + g[a].abs()));
        }
    }

    #[test]
    fn s_monotone_and_bounded(tau in 0.1f64..5.0, a in 0.0f64..50.0, b in 0.0f64..50.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        let s_lo = s_reparam(tau, tau + lo).unwrap();
        let s_hi = s_reparam(tau, tau + hi).unwrap();
        prop_assert!(s_lo < s_hi);
        prop_assert!(s_lo >= tau && s_hi < 2.0 * tau);
    }

    #[test]
    fn attach_check_accepts_exactly_one_cell(
        ranks in prop::collection::vec(0usize..4, 3),
        k in 0usize..3,
        raise in any::<bool>(),
    ) {
        let before = BettiVector::from_ranks(ranks.clone());
        let mut after = ranks.clone();
        if raise || k == 0 || after[k - 1] == 0 {
            after[k] += 1;
        } else {
            after[k - 1] -= 1;
        }
        let after = BettiVector::from_ranks(after);
        prop_assert!(attach_cell_check(&before, &after, k).passed);
        prop_assert!(!attach_cell_check(&before, &before, k).passed);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn euler_consistency_and_filtration(a in -1.6f64..1.6, b in -1.6f64..1.6, grid in 16usize..28) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ca = build_complex(torus(), lo, grid).unwrap();
        let cb = build_complex(torus(), hi, grid).unwrap();
        prop_assert!(ca.is_subcomplex_of(&cb));
        for cx in [&ca, &cb] {
            let betti = betti_euler(cx).unwrap();
            prop_assert_eq!(betti.euler_cells, betti.euler_betti);
        }
    }

    #[test]
    fn label_cocycle(u in 0.05f64..1.0, v in -1.2f64..1.2, s in 0.0f64..0.5) {
        let b = block();
        let p = pt(&[u, v]);
        prop_assume!(b.contains(&p).unwrap());
        let t = b.time_label(&p).unwrap().value();
        prop_assume!(t - s > b.tau());
        let q = b.flow().flow_map(&p, s).unwrap();
        let tq = b.label_unchecked(&q).unwrap().value();
        prop_assert!((tq - (t - s)).abs() <= 1e-7);
        let eps: f64 = 1.0;
        let closed = 0.5 * ((eps + (eps * eps + u * u * v * v).sqrt()) / (u * u)).ln();
        prop_assert!((t - closed).abs() <= 1e-6);
    }

    #[test]
    fn stable_axis_has_infinite_label(v in -1.3f64..1.3) {
        prop_assume!(v.abs() > 1e-3);
        let b = block();
        prop_assert_eq!(b.time_label(&pt(&[0.0, v])).unwrap(), Label::Infinite);
    }

    #[test]
    fn retraction_is_idempotent(idx in 0usize..1000, frac in 0.0f64..1.0) {
        let b = block();
        let e = &b.entrance()[idx % b.entrance().len()];
        let p = b.flow().flow_map(&e.point, frac * (e.label - b.tau())).unwrap();
        let r = retract_point(selector(), &p).unwrap();
        let rr = retract_point(selector(), &r).unwrap();
        prop_assert!((rr - &r).norm() <= 1e-5);
        prop_assert!(model().value(&r) <= model().value(&p) + 1e-9);
    }
}
