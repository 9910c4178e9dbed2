use brwlab::emptyball::{estimate_direct, estimate_f, FOptions, RegimeKind, ScalingRegime};
use brwlab::engine::Caps;
use brwlab::laws::{OffspringLaw, StepLaw};
use brwlab::maxdisp::{estimate_m_tail, estimate_mn_scaled};
use brwlab::spine::estimate_i_levels;

fn laws(o: &str, s: &str) -> (OffspringLaw, StepLaw) {
    (OffspringLaw::parse(o).unwrap(), StepLaw::parse(s).unwrap())
}

#[test]
fn empty_ball_estimates_ignore_worker_count() {
    let (off, step) = laws("binary", "gauss:d=2,eta2=1");
    let regime = ScalingRegime::new(RegimeKind::Diffusive, 25, &off, 2).unwrap();
    let r = [0.3, 0.6];
    let f = |w| estimate_f(&regime, &off, &step, &r, 5000, 3, w, &FOptions::default()).unwrap();
    assert_eq!(f(1), f(4));
    let d = |w| estimate_direct(&regime, &off, &step, &r, 4100, 3, w, 0.01, &Caps::default()).unwrap();
    assert_eq!(d(1), d(3));
}

#[test]
fn maxdisp_and_spine_ignore_worker_count() {
    let (off, step) = laws("binary", "gauss:d=1,eta2=1");
    let m = |w| estimate_m_tail(&off, &step, &[1.0, 3.0], 5000, 400, 11, w).unwrap();
    assert_eq!(m(1), m(5));
    let mn = |w| estimate_mn_scaled(&off, &step, 50, 1.0, 1.0, 5000, 11, w).unwrap();
    assert_eq!(mn(1), mn(2));
    let (off3, step3) = laws("binary", "gauss:d=3,eta2=1");
    let s = |w| {
        estimate_i_levels(&off3, &step3, 0.5, &[4, 8], 3000, 4, 11, w, &Caps::default())
            .unwrap()
            .iter()
            .map(|e| (e.i_hat, e.se, e.truncation_bound))
            .collect::<Vec<_>>()
    };
    assert_eq!(s(1), s(3));
}

#[test]
fn different_seeds_differ() {
    let (off, step) = laws("binary", "gauss:d=1,eta2=1");
    let a = estimate_m_tail(&off, &step, &[1.0], 5000, 400, 1, 1).unwrap();
    let b = estimate_m_tail(&off, &step, &[1.0], 5000, 400, 2, 1).unwrap();
    assert_ne!(a[0].p_hat, b[0].p_hat);
}
