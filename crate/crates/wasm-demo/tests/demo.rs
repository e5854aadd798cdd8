use protoseg::data::DatasetSpec;
use protoseg_wasm::{mi_terms, orth_value, sample_views, Session};

#[test]
fn sample_views_are_rgba() {
    let spec = DatasetSpec::default();
    let (img, mask) = sample_views(&spec, 5).unwrap();
    assert_eq!(img.len(), 32 * 32 * 4);
    assert_eq!(mask.len(), img.len());
    assert!(img.chunks(4).all(|px| px[3] == 255 && px[0] == px[1] && px[1] == px[2]));
    assert!(sample_views(&spec, spec.num_images).is_err());
}

#[test]
fn mi_terms_reach_their_bounds() {
    let k = 6;
    let floor = -(k as f64).ln();
    let [mi, cond, marg, bound] = mi_terms(k, 1.0, 1.0).unwrap()[..] else {
        panic!()
    };
    assert!((mi - floor).abs() < 1e-9 && cond.abs() < 1e-9 && (marg + floor).abs() < 1e-9);
    assert_eq!(bound, floor);
    // Uniform predictions carry no information.
    assert!(mi_terms(k, 1.0, 0.0).unwrap()[0].abs() < 1e-9);
    // Confident but collapsed onto one prototype: also zero.
    assert!(mi_terms(k, 0.0, 1.0).unwrap()[0].abs() < 1e-9);
    assert!(mi_terms(1, 0.5, 0.5).is_err());
}

#[test]
fn orth_value_matches_closed_form() {
    // ‖WᵀW − I‖² = (|a|²−1)² + (|b|²−1)² + 2(|a||b|cos θ)².
    for (angle, na, nb) in [(90.0, 1.0, 1.0), (0.0, 1.0, 1.0), (60.0, 0.5, 1.5), (135.0, 2.0, 0.0)] {
        let c = f64::cos(f64::to_radians(angle));
        let want = (na * na - 1.0f64).powi(2) + (nb * nb - 1.0f64).powi(2) + 2.0 * (na * nb * c).powi(2);
        assert!(
            (orth_value(angle, na, nb).unwrap() - want).abs() < 1e-12,
            "{angle} {na} {nb}"
        );
    }
}

#[test]
fn session_runs_to_completion() {
    let mut s = Session::new("ours", 2, 1, 3).unwrap();
    let mut epochs = 0;
    while let Some(stats) = s.step().unwrap() {
        assert_eq!(stats.len(), 8);
        assert_eq!(stats[0], epochs as f64);
        epochs += 1;
    }
    assert_eq!(epochs, 3);
    let size = s.image_size();
    assert_eq!(s.panels(0).unwrap().len(), 4 * size * size * 4);
    assert!(s.panels(s.num_val()).is_err());
    assert_eq!(s.legend().len(), 2 * 2 * 3);
    assert!(Session::new("nope", 1, 1, 1).is_err());
}
