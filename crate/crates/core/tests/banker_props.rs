use std::collections::BTreeMap;

use proptest::prelude::*;
use prudent_banker::banker::BankerOmd;
use prudent_banker::harness::{run_on, LearnerSettings, LearnerSpec, RunOptions};
use prudent_banker::mirror::{Regularizer, RegularizerKind};
use prudent_banker::numeric::sample_index;
use prudent_banker::protocol::{
    DelaySequence, Environment, FeedbackEvent, FeedbackQueue, LossTable, Round,
};

fn losses(horizon: usize, arms: usize, values: &[f64]) -> Vec<Vec<f64>> {
    (0..horizon)
        .map(|t| {
            (0..arms)
                .map(|a| values[(t * arms + a) % values.len()])
                .collect()
        })
        .collect()
}

fn kind() -> impl Strategy<Value = RegularizerKind> {
    prop_oneof![
        Just(RegularizerKind::NegativeEntropy),
        Just(RegularizerKind::TsallisHalf)
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Replays the greedy drain with an independent credit book.
    #[test]
    fn allocation_matches_a_greedy_credit_book(
        delays in prop::collection::vec(prop_oneof![Just(0u64), 0u64..6, 0u64..40], 20..150),
        values in prop::collection::vec(0.0f64..1.0, 1..30),
        arms in 2usize..6,
        k in kind(),
        tape in prop::collection::vec(0.0f64..1.0, 1..50),
    ) {
        let horizon = delays.len();
        let table = losses(horizon, arms, &values);
        let reg = Regularizer::new(k, arms, 0.5 / arms as f64).unwrap();
        let mut banker = BankerOmd::new(reg).unwrap();
        let mut queue = FeedbackQueue::new(horizon);
        let mut sigma = BTreeMap::new();
        let mut credit: BTreeMap<Round, f64> = BTreeMap::new();
        let mut borrowed = 0.0;
        for t in 1..=horizon {
            let p = banker.predict(t).unwrap();
            let r = &p.report;
            sigma.insert(t, r.sigma);

            let mut need = r.sigma;
            let mut expected = Vec::new();
            for (&u, c) in credit.iter_mut() {
                if need <= 0.0 {
                    break;
                }
                if *c <= 0.0 {
                    continue;
                }
                let take = c.min(need);
                *c -= take;
                need -= take;
                expected.push((u, take));
            }
            prop_assert_eq!(&r.allocation, &expected);
            prop_assert_eq!(r.borrow, need.max(0.0));
            let spent: f64 = r.allocation.iter().map(|a| a.1).sum();
            prop_assert!((spent + r.borrow - r.sigma).abs() <= 1e-9);
            prop_assert!(banker.ledger().min_credit() >= -1e-12);
            borrowed += r.borrow;
            prop_assert!((r.cumulative_borrow - borrowed).abs() <= 1e-9 * borrowed.max(1.0));

            let arm = sample_index(p.dual.point.as_slice(), tape[t % tape.len()]);
            banker.record_action(t, p.dual, arm).unwrap();
            queue.enqueue(FeedbackEvent {
                origin_round: t,
                arm,
                loss_value: table[t - 1][arm],
                arrival_round: t + delays[t - 1] as Round,
            }).unwrap();
            for e in queue.step(t).unwrap() {
                prop_assert!(banker.ingest(&e).unwrap().is_some());
                credit.insert(e.origin_round, sigma[&e.origin_round]);
            }
        }
    }

    /// Decisions up to round `t0` ignore the delays of feedback still missing at `t0`.
    #[test]
    fn decisions_do_not_depend_on_unarrived_delays(
        delays in prop::collection::vec(prop_oneof![Just(0u64), 0u64..8], 40..160),
        replacement in prop::collection::vec(0u64..50, 1..20),
        cut in 0.1f64..0.9,
        values in prop::collection::vec(0.0f64..1.0, 1..30),
    ) {
        let horizon = delays.len();
        let t0 = ((horizon as f64) * cut) as usize + 1;
        let mut altered = delays.clone();
        for u in 1..=t0 {
            // feedback of u is usable before t0 only if u + d_u < t0
            if u as u64 + delays[u - 1] >= t0 as u64 {
                let extra = replacement[u % replacement.len()];
                altered[u - 1] = (t0 - u) as u64 + extra;
            }
        }
        for u in t0 + 1..=horizon {
            altered[u - 1] = replacement[u % replacement.len()];
        }
        let table = LossTable::from_rows(&losses(horizon, 3, &values)).unwrap();
        let a = Environment::from_parts(table.clone(), DelaySequence::new(delays), 5).unwrap();
        let b = Environment::from_parts(table, DelaySequence::new(altered), 5).unwrap();
        for spec in [
            LearnerSpec::PrudentBanker,
            LearnerSpec::BankerOmd,
            LearnerSpec::ConservativeUcb,
            LearnerSpec::SafeExp3Ix,
        ] {
            let options = RunOptions { spec, settings: LearnerSettings { delta: Some(0.2), ..Default::default() }, diagnostics: false };
            let ta = run_on(&a, &options).unwrap();
            let tb = run_on(&b, &options).unwrap();
            prop_assert_eq!(&ta.increments[..t0], &tb.increments[..t0], "{}", spec);
            for (ra, rb) in ta.rows[..t0].iter().zip(&tb.rows[..t0]) {
                prop_assert_eq!((ra.stage, ra.phase, ra.alpha), (rb.stage, rb.phase, rb.alpha));
            }
        }
    }
}

#[test]
fn twenty_thousand_rounds_conserve_credit() {
    let config = prudent_banker::protocol::EnvironmentConfig {
        horizon: 20_000,
        arms: 10,
        loss_model: prudent_banker::protocol::LossModel::BlockNonstationary { blocks: 100 },
        delay_model: prudent_banker::protocol::DelayModel::Geometric {
            p_active: 0.03,
            q_geo: 0.4,
        },
        seed: 2,
    };
    let env = Environment::generate(&config).unwrap();
    for spec in [LearnerSpec::BankerOmd, LearnerSpec::PrudentBanker] {
        let trace = run_on(
            &env,
            &RunOptions {
                spec,
                settings: LearnerSettings::default(),
                diagnostics: true,
            },
        )
        .unwrap();
        let inv = trace.summary.invariants.unwrap();
        assert!(inv.max_conservation_residual <= 1e-9, "{spec}: {inv:?}");
        assert!(inv.min_credit >= -1e-12, "{spec}: {inv:?}");
        assert!(inv.max_borrow_identity_residual <= 1e-9, "{spec}: {inv:?}");
        assert!(inv.borrow_identity_checks > 0);
    }
}
