use approx::assert_relative_eq;
use foid::acflow::{AcOptions, AcSolver};
use foid::harness::{builtin_case, Case};
use foid::inverter::{
    droop_equilibrium, droop_q, q_bounds, DroopCurve, DroopResult, InverterError, InverterSpec,
};
use foid::linflow::InjectionVector;
use proptest::prelude::*;

fn spec(p_av: f64, s: f64, pf: f64) -> InverterSpec {
    InverterSpec {
        bus: 7,
        p_av,
        s_rating: s,
        pf_min: pf,
        eta: 1.0,
    }
}

fn droop_at(case: &Case, pv: f64) -> DroopResult {
    droop_equilibrium(&case.net, &case.sens, &case.loads, &case.fleet(pv)).unwrap()
}

fn check_on_curve(case: &Case, d: &DroopResult, pv: f64) {
    let fleet = case.fleet(pv);
    for (h, s) in fleet.iter().enumerate() {
        let (pc, qc) = (d.p_c[h], d.q_c[h]);
        let out = s.p_av - pc;
        assert!(pc >= 0.0 && pc <= s.p_av, "household {h}: p_c {pc}");
        assert!(out * out + qc * qc <= s.s_rating * s.s_rating + 1e-9);
        assert!(qc.abs() <= s.tan_theta() * out + 1e-9);
        let curve = DroopCurve::for_inverter(s, pc, case.net.v_nom, case.net.v_max).unwrap();
        let v = d.profile.v_re[s.bus];
        assert!((qc - droop_q(&curve, v)).abs() < 1e-6, "household {h} off curve");
    }
    assert!(d.curve_residual < 1e-6);
}

#[test]
fn q_bounds_example() {
    let (lo, hi) = q_bounds(&spec(10.0, 11.0, 0.85), 0.0).unwrap();
    // min(√(121 − 100), 10·tan(acos 0.85)) = min(4.5826, 6.1974)
    assert_relative_eq!(hi, 4.58257569495584, max_relative = 1e-12);
    assert_eq!(lo, -hi);
    assert_relative_eq!(spec(10.0, 11.0, 0.85).tan_theta() * 10.0, 6.197443384031, max_relative = 1e-9);
}

#[test]
fn q_bounds_at_full_and_zero_output() {
    assert_eq!(q_bounds(&spec(10.0, 11.0, 0.85), 10.0).unwrap().1, 0.0);
    assert_eq!(q_bounds(&spec(0.0, 0.0, 0.85), 0.0).unwrap().1, 0.0);
    assert!(matches!(
        q_bounds(&spec(10.0, 11.0, 0.85), -1.0),
        Err(InverterError::CurtailmentOutOfRange { .. })
    ));
}

#[test]
fn power_factor_binds_at_low_output() {
    // at 2 kW output the rating allows √(121 − 4) but the power factor only 2·tanθ
    let s = spec(10.0, 11.0, 0.85);
    let (_, hi) = q_bounds(&s, 8.0).unwrap();
    assert_relative_eq!(hi, 2.0 * s.tan_theta(), max_relative = 1e-12);
}

#[test]
fn invalid_specs_rejected() {
    assert!(spec(10.0, 9.0, 0.85).validate().is_err());
    assert!(spec(10.0, 11.0, 0.0).validate().is_err());
    assert!(spec(-1.0, 11.0, 0.85).validate().is_err());
    assert!(spec(10.0, 11.0, 1.0).validate().is_ok());
    assert_relative_eq!(InverterSpec { eta: 0.8, ..spec(8.0, 8.8, 0.85) }.installed_capacity(), 10.0);
}

#[test]
fn droop_curve_examples() {
    let c = DroopCurve::new(1.0, 1.05, -4.5, 4.5).unwrap();
    assert_eq!(c.slope, -4.5 / (1.0 - 1.05));
    assert_eq!(droop_q(&c, 1.0), 0.0);
    assert_relative_eq!(droop_q(&c, 1.05), -4.5, max_relative = 1e-12);
    assert_relative_eq!(droop_q(&c, 0.95), 4.5, max_relative = 1e-12);
    assert_eq!(droop_q(&c, 1.2), -4.5);
    assert!(DroopCurve::new(1.0, 0.99, -1.0, 1.0).is_err());
    assert!(DroopCurve::new(1.0, 1.05, 1.0, 1.0).is_err());
}

#[test]
fn zero_pv_gives_zero_setpoints() {
    let case = builtin_case();
    let d = droop_at(&case, 0.0);
    assert!(d.converged);
    assert!(d.p_c.iter().chain(&d.q_c).all(|&v| v == 0.0));
}

#[test]
fn fleet_must_match_households() {
    let case = builtin_case();
    let mut fleet = case.fleet(4.0);
    fleet.pop();
    assert!(matches!(
        droop_equilibrium(&case.net, &case.sens, &case.loads, &fleet),
        Err(InverterError::FleetMismatch(_))
    ));
    let mut fleet = case.fleet(4.0);
    fleet[0].bus = 1;
    assert!(droop_equilibrium(&case.net, &case.sens, &case.loads, &fleet).is_err());
}

#[test]
fn reactive_support_suffices_below_onset() {
    let case = builtin_case();
    for i in 0..=8 {
        let pv = 0.8 * i as f64;
        if case.ratio(pv) > 4.6 {
            break;
        }
        let d = droop_at(&case, pv);
        assert!(d.converged);
        assert_eq!(d.total_curtailment(), 0.0, "pv {pv}");
    }
}

#[test]
fn equilibria_over_sweep() {
    let case = builtin_case();
    let ac = AcSolver::new(&case.net).unwrap();
    let mut last = 0.0;
    for i in 0..=15 {
        let pv = 0.8 * i as f64;
        let d = droop_at(&case, pv);
        assert!(d.converged, "pv {pv}: {:?}", d.diagnostics);
        check_on_curve(&case, &d, pv);
        for &b in &case.net.households() {
            assert!(d.profile.v_re[b] <= case.net.v_max + 1e-6);
        }
        assert!(d.total_curtailment() >= last - 1e-9, "pv {pv}");
        last = d.total_curtailment();

        let out: Vec<f64> = case.fleet(pv).iter().zip(&d.p_c).map(|(s, c)| s.p_av - c).collect();
        let inj = InjectionVector::from_households(&case.net, &case.sens, &case.loads, &out, &d.q_c).unwrap();
        let exact = ac.solve(&inj, &AcOptions::default()).unwrap();
        for &b in &case.net.households() {
            assert!(exact.profile.magnitude(b) <= case.net.v_max + 0.01, "pv {pv} bus {b}");
        }
    }
}

#[test]
fn distant_households_curtail_fully_at_high_ratio() {
    let case = builtin_case();
    let pv = case.pv_for_ratio(8.2);
    let d = droop_at(&case, pv);
    assert!(d.converged);
    check_on_curve(&case, &d, pv);
    let full: Vec<usize> = (0..12).filter(|&h| d.p_c[h] >= pv - 1e-3).map(|h| h + 1).collect();
    for h in 7..=12 {
        assert!(full.contains(&h), "household {h} not fully curtailed: {full:?}");
    }
    // independent numpy implementation of the same equilibrium rule
    assert_eq!(full, vec![5, 6, 7, 8, 9, 10, 11, 12]);
}

proptest! {
    #[test]
    fn q_bounds_respect_both_limits(p_av in 0.0..15.0f64, frac in 0.0..1.0f64, over in 1.0..1.5f64, pf in 0.5..1.0f64) {
        let s = spec(p_av, over * p_av, pf);
        let pc = frac * p_av;
        let (lo, hi) = q_bounds(&s, pc).unwrap();
        let out = p_av - pc;
        prop_assert_eq!(lo, -hi);
        prop_assert!(hi >= 0.0);
        prop_assert!(out * out + hi * hi <= s.s_rating * s.s_rating * (1.0 + 1e-12) + 1e-12);
        prop_assert!(hi <= s.tan_theta() * out + 1e-12);
        let either = (out * out + hi * hi - s.s_rating * s.s_rating).abs() < 1e-9 * (1.0 + s.s_rating * s.s_rating)
            || (hi - s.tan_theta() * out).abs() < 1e-9 * (1.0 + out);
        prop_assert!(either);
    }

    #[test]
    fn droop_output_is_clipped_and_monotone(q in 0.0..10.0f64, v1 in 0.9..1.1f64, v2 in 0.9..1.1f64) {
        let c = DroopCurve::new(1.0, 1.05, -q, q).unwrap();
        let (a, b) = (droop_q(&c, v1), droop_q(&c, v2));
        prop_assert!(a.abs() <= q && b.abs() <= q);
        if v1 <= v2 {
            prop_assert!(a >= b);
        }
    }
}
