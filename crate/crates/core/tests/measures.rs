use martinlab::{make_measure, ExactMeasure, GroupElement, GroupSpec, Measure, MeasureSpec};
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

#[test]
fn exact_rational_powers_match_double_tables() {
    let g = GroupSpec::parse(&["Z^2", "Z"]).unwrap();
    let spec = MeasureSpec::Adapted { weights: vec![0.5, 0.5] };
    let exact: ExactMeasure = make_measure(&g, &spec).unwrap();
    let float: Measure = make_measure(&g, &spec).unwrap();
    let te = exact.convolution_powers(6, 6, false).unwrap();
    let tf = float.convolution_powers(6, 6, false).unwrap();
    for n in 0..=6 {
        assert_eq!(te.row_sum(n), BigRational::one());
        for x in te.window().elements() {
            let a = te.get(n, x).to_f64().unwrap();
            assert!((a - tf.get(n, x)).abs() < 1e-15, "n = {n}, x = {x}");
        }
    }
}

#[test]
fn srw_on_z_returns_are_central_binomials() {
    let g = GroupSpec::parse(&["Z"]).unwrap();
    let m: ExactMeasure = make_measure(&g, &MeasureSpec::Srw).unwrap();
    let t = m.convolution_powers(12, 12, false).unwrap();
    let mut binom = BigRational::one();
    for n in 0..6usize {
        if n > 0 {
            // C(2n, n) / 4^n from C(2n-2, n-1) / 4^(n-1)
            binom *= BigRational::new(((2 * n - 1) * 2 * n).into(), (n * n * 4).into());
        }
        assert_eq!(t.get(2 * n, &GroupElement::identity()), binom);
        assert!(t.get(2 * n + 1, &GroupElement::identity()).is_zero());
    }
}

#[test]
fn measures_are_symmetric_probability_vectors() {
    for (names, spec) in [
        (vec!["F2"], MeasureSpec::Srw),
        (vec!["Z", "Z"], MeasureSpec::LazySrw { alpha: 0.25 }),
        (vec!["Z^2"], MeasureSpec::UniformBall { radius: 2 }),
        (vec!["Z^4", "Z"], MeasureSpec::Adapted { weights: vec![0.3, 0.7] }),
    ] {
        let g = GroupSpec::parse(&names).unwrap();
        let m: Measure = make_measure(&g, &spec).unwrap();
        let total: f64 = m.support().iter().map(|(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-14);
        for (x, w) in m.support() {
            assert_eq!(m.mass(&x.inverse()), *w);
        }
    }
}

#[test]
fn invalid_measures_are_rejected() {
    let g = GroupSpec::parse(&["Z", "Z"]).unwrap();
    assert!(make_measure::<f64>(&g, &MeasureSpec::Adapted { weights: vec![1.0] }).is_err());
    assert!(make_measure::<f64>(&g, &MeasureSpec::LazySrw { alpha: 1.5 }).is_err());
}
