use flowdas_core::dynamics::{simulate_dataset, DoubleWellParams, LorenzParams, ObservationOperator, System};
use flowdas_core::interpolant::InterpolantSchedule;
use flowdas_core::metrics::{rmse, w1_samples};
use flowdas_core::rng::RngStream;
use flowdas_core::{StateVector, Trajectory};
use proptest::prelude::*;

#[test]
fn rk4_converges_at_fourth_order() {
    let p = LorenzParams::default();
    let x0 = [1.0, 1.0, 20.0];
    let integrate = |h: f64, n: usize| (0..n).fold(x0, |x, _| p.rk4(x, h));
    let reference = integrate(1e-4, 5000);
    let err = |h: f64| {
        let x = integrate(h, (0.5 / h).round() as usize);
        x.iter()
            .zip(&reference)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let ratio = err(0.01) / err(0.005);
    assert!((12.0..20.0).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn double_well_is_bimodal() {
    let sys = System::DoubleWell(DoubleWellParams::default());
    let trajs = simulate_dataset(&sys, 400, 200, 0, RngStream::new(5)).unwrap();
    let last: Vec<f64> = trajs.iter().map(|t| t.states().last().unwrap()[0]).collect();
    let pos = last.iter().filter(|x| **x > 0.5).count() as f64 / last.len() as f64;
    let neg = last.iter().filter(|x| **x < -0.5).count() as f64 / last.len() as f64;
    assert!(pos > 0.35 && neg > 0.35, "well occupancy {pos} / {neg}");
    let near_wells = last.iter().filter(|x| (x.abs() - 1.0).abs() < 0.5).count();
    assert!(near_wells as f64 > 0.9 * last.len() as f64);
}

#[test]
fn lorenz_dataset_stays_on_attractor() {
    let sys = System::Lorenz63(LorenzParams::default());
    let trajs = simulate_dataset(&sys, 8, 500, 100, RngStream::new(1)).unwrap();
    for t in &trajs {
        for x in t.states() {
            assert!(x[0].abs() < 30.0 && x[1].abs() < 40.0 && (-5.0..60.0).contains(&x[2]));
        }
    }
}

fn scalar_traj(v: &[f64]) -> Trajectory {
    Trajectory::new(v.iter().map(|x| StateVector::new(vec![*x]).unwrap()).collect(), 1.0).unwrap()
}

proptest! {
    #[test]
    fn w1_is_a_metric_on_samples(
        a in prop::collection::vec(-10.0f64..10.0, 1..40),
        b in prop::collection::vec(-10.0f64..10.0, 1..40),
        shift in -5.0f64..5.0,
    ) {
        let ab = w1_samples(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - w1_samples(&b, &a).unwrap()).abs() <= 1e-12 * (1.0 + ab));
        prop_assert!(w1_samples(&a, &a).unwrap().abs() <= 1e-12);
        let moved: Vec<f64> = a.iter().map(|x| x + shift).collect();
        prop_assert!((w1_samples(&a, &moved).unwrap() - shift.abs()).abs() <= 1e-9);
    }

    #[test]
    fn rmse_of_constant_offset(v in prop::collection::vec(-5.0f64..5.0, 2..20), c in -3.0f64..3.0) {
        let t = scalar_traj(&v);
        let e = scalar_traj(&v.iter().map(|x| x + c).collect::<Vec<_>>());
        prop_assert!(rmse(std::slice::from_ref(&t), std::slice::from_ref(&t), 1).unwrap() == 0.0);
        prop_assert!((rmse(&[t], &[e], 1).unwrap() - c.abs()).abs() <= 1e-12);
    }

    #[test]
    fn interpolant_hits_both_endpoints(
        x0 in prop::collection::vec(-50.0f64..50.0, 3),
        x1 in prop::collection::vec(-50.0f64..50.0, 3),
        z in prop::collection::vec(-4.0f64..4.0, 3),
        eta in 0.1f64..3.0,
    ) {
        let sched = InterpolantSchedule::with_eta(eta);
        let (a, b) = (StateVector::new(x0.clone()).unwrap(), StateVector::new(x1.clone()).unwrap());
        let zs = StateVector::new(z).unwrap();
        let (i0, _) = sched.interpolate(0.0, &a, &b, &zs).unwrap();
        let (i1, _) = sched.interpolate(1.0, &a, &b, &zs).unwrap();
        prop_assert_eq!(i0.to_vec(), x0);
        prop_assert_eq!(i1.to_vec(), x1);
    }

    #[test]
    fn observation_operators_preserve_sign_and_order(x in -20.0f64..20.0, y in -20.0f64..20.0) {
        for op in [ObservationOperator::Identity, ObservationOperator::ArctanFirst, ObservationOperator::Cube] {
            let (fx, fy) = (op.apply(&[x])[0], op.apply(&[y])[0]);
            prop_assert_eq!(fx.signum(), x.signum());
            if x < y {
                prop_assert!(fx <= fy);
            }
        }
    }
}
