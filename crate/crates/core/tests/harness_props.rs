use proptest::prelude::*;
use prudent_banker::harness::{
    best_fixed_arm, compare, pseudo_loss, read_rows, run, ConfigBuilder, LearnerSettings,
    LearnerSpec,
};
use prudent_banker::mirror::SimplexPoint;
use prudent_banker::protocol::{DelayModel, Environment, EnvironmentConfig, LossModel, LossTable};

fn learner() -> impl Strategy<Value = LearnerSpec> {
    prop_oneof![
        Just(LearnerSpec::PrudentBanker),
        Just(LearnerSpec::BankerOmd),
        Just(LearnerSpec::ConservativeUcb),
        Just(LearnerSpec::SafeExp3Ix),
        Just(LearnerSpec::PlayComparator),
        (0usize..3).prop_map(LearnerSpec::PlayFixedArm),
    ]
}

fn delay_model() -> impl Strategy<Value = DelayModel> {
    prop_oneof![
        Just(DelayModel::None),
        (0.0f64..1.0).prop_map(|p| DelayModel::FixedOneStep { p }),
        (0.0f64..0.5, 0.1f64..0.9)
            .prop_map(|(p_active, q_geo)| DelayModel::Geometric { p_active, q_geo }),
        (0.0f64..0.3, 1.2f64..4.0).prop_map(|(p_active, shape)| DelayModel::Lomax {
            p_active,
            shape,
            scale: 2.0
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pseudo_loss_matches_summation(w in prop::collection::vec(0.01f64..1.0, 1..10), l in prop::collection::vec(0.0f64..1.0, 10)) {
        let p = SimplexPoint::from_weights(w.clone()).unwrap();
        let l = &l[..w.len()];
        let mut total = 0.0;
        for i in 0..w.len() {
            total += p[i] * l[i];
        }
        prop_assert!((pseudo_loss(&p, l).unwrap() - total).abs() <= 1e-12);
    }

    #[test]
    fn best_arm_matches_exhaustive_search(rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 5)) {
        let table = LossTable::from_rows(&rows).unwrap();
        let (arm, curve) = best_fixed_arm(&table);
        let sums: Vec<f64> = (0..4).map(|a| rows.iter().map(|r| r[a]).sum()).collect();
        for (a, s) in sums.iter().enumerate() {
            prop_assert!(sums[arm] <= *s + 1e-12);
            if a < arm {
                prop_assert!(sums[a] > sums[arm] - 1e-12);
            }
        }
        prop_assert!((curve[4] - sums[arm]).abs() <= 1e-12);
    }

    #[test]
    fn traces_are_consistent_and_round_trip(
        spec in learner(),
        delay in delay_model(),
        horizon in 1usize..300,
        seed in 0u64..1000,
    ) {
        let mut b = ConfigBuilder::new();
        b.set("horizon", &horizon.to_string()).unwrap()
            .set("arms", "3").unwrap()
            .set("blocks", &horizon.min(4).to_string()).unwrap()
            .set("seed", &seed.to_string()).unwrap()
            .set("learner", &spec.to_string()).unwrap();
        let mut config = b.build().unwrap();
        config.env.delay_model = delay;
        let traces = run(&config).unwrap();
        let trace = &traces[0];
        prop_assert_eq!(trace.rows.len(), horizon);
        let mut sum = 0.0;
        let mut prev = None;
        for (row, inc) in trace.rows.iter().zip(&trace.increments) {
            sum += inc;
            prop_assert_eq!(row.loss_b, sum);
            prop_assert_eq!(row.regret_best(), row.loss_b - row.loss_star);
            prop_assert_eq!(row.comparator_gap(), row.loss_b - row.loss_c);
            if let Some((b, s, c)) = prev {
                prop_assert!(row.loss_b >= b && row.loss_star >= s && row.loss_c >= c);
            }
            prev = Some((row.loss_b, row.loss_star, row.loss_c));
        }
        let csv = trace.csv_string().unwrap();
        prop_assert_eq!(&read_rows(csv.as_bytes()).unwrap(), &trace.rows);
        let again = run(&config).unwrap();
        prop_assert_eq!(csv, again[0].csv_string().unwrap());
        let arrived: usize = trace.rows.iter().map(|r| r.arrived).sum();
        prop_assert_eq!(arrived + trace.summary.discarded_feedback, horizon);
    }
}

#[test]
fn comparison_shares_one_environment() {
    let env = Environment::generate(&EnvironmentConfig {
        horizon: 500,
        arms: 4,
        loss_model: LossModel::BlockNonstationary { blocks: 5 },
        delay_model: DelayModel::Geometric {
            p_active: 0.2,
            q_geo: 0.3,
        },
        seed: 12,
    })
    .unwrap();
    let specs = [
        LearnerSpec::PrudentBanker,
        LearnerSpec::SafeExp3Ix,
        LearnerSpec::PlayComparator,
    ];
    let traces = compare(&env, &specs, &LearnerSettings::default(), false).unwrap();
    for t in &traces {
        assert_eq!(t.summary.realized_delay as u128, env.delays.total());
        assert_eq!(t.summary.seed, 12);
    }
    for i in 0..500 {
        assert_eq!(traces[0].rows[i].loss_star, traces[1].rows[i].loss_star);
        assert_eq!(traces[0].rows[i].loss_c, traces[2].rows[i].loss_c);
    }
    assert!(traces[2].rows.iter().all(|r| r.comparator_gap() == 0.0));
}
