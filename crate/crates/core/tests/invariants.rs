use std::f64::consts::TAU;

use copmix::copulas::CopulaModel;
use copmix::datakit::sample_mixture;
use copmix::eval::{adjusted_rand, bic, misclassification};
use copmix::marginals::Marginal;
use copmix::mixture::{e_step, normalize_angle, rotate_to_component, Component, MixtureModel};
use copmix::spec::ModelSpec;
use proptest::prelude::*;

fn two_component(theta: f64, shift: f64, w: f64, omega: f64) -> MixtureModel {
    let n = |m: f64| vec![Marginal::normal(m, 1.0).unwrap(), Marginal::normal(m, 1.3).unwrap()];
    MixtureModel::new(
        vec![w, 1.0 - w],
        vec![
            Component::new(CopulaModel::clayton(theta).unwrap(), n(0.0), None)
                .unwrap()
                .with_angle(omega, true)
                .unwrap(),
            Component::new(CopulaModel::gumbel(1.0 + theta).unwrap(), n(shift), None).unwrap(),
        ],
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn angles_normalize_into_one_turn(x in -100.0f64..100.0) {
        let a = normalize_angle(x);
        prop_assert!(a > 0.0 && a <= TAU);
        let turns = (x - a) / TAU;
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn rotation_preserves_length_and_inverts(omega in -7.0f64..7.0, x in -5.0f64..5.0, y in -5.0f64..5.0) {
        let z = rotate_to_component(omega, [x, y]);
        prop_assert!((z[0].hypot(z[1]) - x.hypot(y)).abs() < 1e-12);
        let back = rotate_to_component(-omega, z);
        prop_assert!((back[0] - x).abs() < 1e-12 && (back[1] - y).abs() < 1e-12);
    }

    #[test]
    fn posterior_rows_sum_to_one(theta in 0.2f64..5.0, shift in -3.0f64..3.0, w in 0.05f64..0.95,
                                 omega in 0.0f64..TAU, seed in 0u64..1000) {
        let model = two_component(theta, shift, w, omega);
        let data = sample_mixture(&model, 40, seed).unwrap();
        for row in e_step(&model, &data).unwrap() {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn agreement_ignores_label_names(labels in proptest::collection::vec(1usize..4, 2..60),
                                     truth_seed in proptest::collection::vec(1usize..4, 60)) {
        let truth = &truth_seed[..labels.len()];
        let renamed: Vec<usize> = labels.iter().map(|&l| [0, 3, 1, 2][l]).collect();
        let a = adjusted_rand(&labels, truth).unwrap();
        let b = adjusted_rand(&renamed, truth).unwrap();
        prop_assert!((a - b).abs() < 1e-12 || (a.is_nan() && b.is_nan()));
        let ma = misclassification(&labels, truth).unwrap();
        let mb = misclassification(&renamed, truth).unwrap();
        prop_assert!((ma - mb).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ma));
    }

    #[test]
    fn bic_grows_with_parameters(ll in -1e4f64..1e4, q in 1usize..200, n in 2usize..5000) {
        prop_assert!(bic(ll, q + 1, n) > bic(ll, q, n));
        prop_assert!((bic(ll, q, n) - (-2.0 * ll + q as f64 * (n as f64).ln())).abs() < 1e-9 * (1.0 + ll.abs()));
    }

    #[test]
    fn spec_round_trips(theta in 0.2f64..5.0, shift in -3.0f64..3.0, w in 0.05f64..0.95, omega in 0.0f64..TAU) {
        let model = two_component(theta, shift, w, omega);
        let text = serde_json::to_string(&ModelSpec::from_model(&model)).unwrap();
        let spec: ModelSpec = serde_json::from_str(&text).unwrap();
        let back = spec.to_model().unwrap();
        prop_assert_eq!(back.weights(), model.weights());
        for (a, b) in back.components().iter().zip(model.components()) {
            prop_assert_eq!(a.copula(), b.copula());
            prop_assert_eq!(a.marginals(), b.marginals());
            // angles are written in degrees
            let (x, y) = (a.angle().map_or(0.0, |x| x.value), b.angle().map_or(0.0, |x| x.value));
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}
