use proptest::prelude::*;
use prudent_banker::mirror::{Regularizer, RegularizerKind, SimplexPoint};

fn kind() -> impl Strategy<Value = RegularizerKind> {
    prop_oneof![
        Just(RegularizerKind::NegativeEntropy),
        Just(RegularizerKind::TsallisHalf)
    ]
}

fn interior(arms: usize) -> impl Strategy<Value = SimplexPoint> {
    prop::collection::vec(1e-3f64..1.0, arms).prop_map(|w| SimplexPoint::from_weights(w).unwrap())
}

fn case() -> impl Strategy<Value = (RegularizerKind, usize, SimplexPoint, SimplexPoint)> {
    (kind(), 2usize..12).prop_flat_map(|(k, a)| (Just(k), Just(a), interior(a), interior(a)))
}

/// Independent evaluations of the two potentials.
fn potential(kind: RegularizerKind, x: &[f64]) -> f64 {
    match kind {
        RegularizerKind::NegativeEntropy => {
            x.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum()
        }
        RegularizerKind::TsallisHalf => -2.0 * x.iter().map(|v| v.sqrt()).sum::<f64>(),
    }
}

proptest! {
    #[test]
    fn conjugate_inverts_gradient((k, a, x, _) in case()) {
        let reg = Regularizer::new(k, a, 0.5 / a as f64).unwrap();
        let back = reg.conjugate(&reg.grad_psi(&x).unwrap()).unwrap();
        for (p, q) in x.as_slice().iter().zip(back.point.as_slice()) {
            prop_assert!((p - q).abs() <= 1e-8);
        }
    }

    #[test]
    fn conjugate_maximizes_the_dual_objective(
        (k, a, x, y) in case(),
        theta in prop::collection::vec(-20.0f64..20.0, 12),
    ) {
        let reg = Regularizer::new(k, a, 0.5 / a as f64).unwrap();
        let theta = &theta[..a];
        let best = reg.conjugate(theta).unwrap().point;
        let objective = |p: &[f64]| p.iter().zip(theta).map(|(u, v)| u * v).sum::<f64>() - potential(k, p);
        let top = objective(best.as_slice());
        prop_assert!(top >= objective(x.as_slice()) - 1e-9);
        prop_assert!(top >= objective(y.as_slice()) - 1e-9);
    }

    #[test]
    fn bregman_is_nonnegative_and_diameter_bounded((k, a, x, y) in case()) {
        let reg = Regularizer::new(k, a, 0.5 / a as f64).unwrap();
        let d = reg.bregman(&x, &y).unwrap();
        prop_assert!(d >= 0.0);
        let direct = potential(k, x.as_slice()) - potential(k, y.as_slice())
            - reg.grad_psi(&y).unwrap().iter().zip(x.as_slice().iter().zip(y.as_slice()))
                .map(|(g, (p, q))| g * (p - q)).sum::<f64>();
        prop_assert!((d - direct.max(0.0)).abs() <= 1e-8 * (1.0 + direct.abs()));
        let (c1, _) = reg.constants();
        prop_assert!(reg.bregman(&x, &reg.base_point()).unwrap() <= c1 + 1e-12);
        for v in 0..a {
            prop_assert!(reg.bregman(&SimplexPoint::vertex(a, v), &reg.base_point()).unwrap() <= c1 + 1e-12);
        }
    }

    #[test]
    fn mirror_step_lowers_played_coordinate((k, a, x, _) in case(), arm in 0usize..12, loss in 0.0f64..1.0) {
        let arm = arm % a;
        let reg = Regularizer::new(k, a, 0.5 / a as f64).unwrap();
        let dual = reg.dual_of(&x).unwrap();
        let mut estimate = vec![0.0; a];
        estimate[arm] = loss / x[arm];
        let z = reg.mirror_step(&dual, &estimate, 10.0).unwrap();
        prop_assert!(z.point[arm] <= x[arm] + 1e-12);
        let total: f64 = z.point.as_slice().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
