use proptest::prelude::*;
use prudent_banker::harness::{run_on, LearnerSettings, LearnerSpec, RunOptions, RunTrace};
use prudent_banker::mirror::{Regularizer, RegularizerKind, SimplexPoint};
use prudent_banker::protocol::{DelaySequence, Environment, LossTable};
use prudent_banker::prudent::{
    build_comparator, gap_statistic, next_delay_estimate, ThresholdFunctions,
};

fn run(losses: Vec<Vec<f64>>, delays: Vec<u64>, delta: f64) -> RunTrace {
    let env = Environment::from_parts(
        LossTable::from_rows(&losses).unwrap(),
        DelaySequence::new(delays),
        7,
    )
    .unwrap();
    let options = RunOptions {
        spec: LearnerSpec::PrudentBanker,
        settings: LearnerSettings {
            delta: Some(delta),
            ..LearnerSettings::default()
        },
        diagnostics: true,
    };
    run_on(&env, &options).unwrap()
}

/// Two arms with a clear gap, so soft restarts happen within a short horizon.
fn separated_losses(horizon: usize, noise: &[f64]) -> Vec<Vec<f64>> {
    (0..horizon)
        .map(|i| {
            let n = noise[i % noise.len()];
            vec![(0.85 + n).min(1.0), (0.1 + n).min(1.0)]
        })
        .collect()
}

fn ceil_log2(d: u64) -> usize {
    let mut k = 0;
    while (1u128 << k) < u128::from(d) {
        k += 1;
    }
    k
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gap_statistic_matches_maximization(
        g in prop::collection::vec(-50.0f64..50.0, 2..7),
        anchor in 0usize..6,
        weights in prop::collection::vec(0.0f64..1.0, 6),
    ) {
        let a = g.len();
        let xc = build_comparator(a, 1.0 / (2 * a) as f64, anchor % a).unwrap();
        let inner = |x: &[f64]| g.iter().zip(xc.as_slice()).zip(x).map(|((gi, ci), xi)| gi * (ci - xi)).sum::<f64>();
        let vertices = (0..a).map(|v| inner(SimplexPoint::vertex(a, v).as_slice())).fold(f64::NEG_INFINITY, f64::max);
        let closed = gap_statistic(&g, &xc);
        prop_assert!((closed - vertices).abs() <= 1e-9 * (1.0 + vertices.abs()));
        let w: Vec<f64> = weights[..a].iter().map(|v| v + 1e-3).collect();
        let interior = SimplexPoint::from_weights(w).unwrap();
        prop_assert!(closed >= inner(interior.as_slice()) - 1e-9);
    }

    #[test]
    fn thresholds_follow_their_formulas(d in 0u64..1_000_000, horizon in 1usize..100_000, arms in 2usize..50) {
        let reg = Regularizer::new(RegularizerKind::NegativeEntropy, arms, 1.0 / arms as f64).unwrap();
        let tf = ThresholdFunctions::new(horizon, &reg);
        let c = ((arms as f64).ln() * arms as f64).sqrt();
        let df = d as f64;
        let rhat = c * (3.0 * (horizon as f64).sqrt() + 7.0 * (2.0 * df * (df + 1.0).ln()).sqrt());
        prop_assert!((tf.rhat(d) - rhat).abs() <= 1e-9 * rhat);
        let xi = ((8.0 * df + 1.0).sqrt() - 1.0) * arms as f64;
        prop_assert!((tf.xi(d) - xi).abs() <= 1e-9 * (1.0 + xi));
        let e = next_delay_estimate(d.max(1));
        prop_assert!(e.is_power_of_two() && e >= d && e < 2 * d.max(1));
    }

    #[test]
    fn restarts_respect_the_doubling_and_count_bounds(
        delays in prop::collection::vec(prop_oneof![4 => Just(0u64), 1 => 1u64..30], 300..600),
        noise in prop::collection::vec(0.0f64..0.1, 1..20),
    ) {
        let horizon = delays.len();
        let total: u64 = delays.iter().sum();
        let trace = run(separated_losses(horizon, &noise), delays, 0.5);
        let s = &trace.summary;
        for h in &s.hard_restarts {
            let r = h.restart;
            prop_assert!(r.new_estimate < 2 * r.trigger);
            prop_assert!(r.new_estimate >= r.old_estimate);
            prop_assert!(r.trigger > r.old_estimate);
            prop_assert!(r.alpha_after <= r.alpha_before);
        }
        prop_assert!(s.stages <= ceil_log2(total) + 1, "{} stages, D = {}", s.stages, total);
        let inv = s.invariants.clone().unwrap();
        prop_assert!(inv.all_hold(), "{:?}", inv);
        prop_assert!(inv.missing_count_checks > 0);
    }

    #[test]
    fn aggression_only_grows_within_a_stage(
        delays in prop::collection::vec(prop_oneof![6 => Just(0u64), 1 => 1u64..4], 1500..2500),
        noise in prop::collection::vec(0.0f64..0.1, 1..20),
    ) {
        let trace = run(separated_losses(delays.len(), &noise), delays, 0.5);
        for w in trace.rows.windows(2) {
            if w[1].stage == w[0].stage {
                prop_assert!(w[1].alpha >= w[0].alpha);
                prop_assert!(w[1].phase >= w[0].phase);
            } else {
                prop_assert_eq!(w[1].stage, w[0].stage + 1);
                prop_assert_eq!(w[1].phase, 1);
            }
        }
    }
}

#[test]
fn zero_delay_run_keeps_a_single_stage_and_reaches_full_aggression() {
    let horizon = 50_000;
    let losses: Vec<Vec<f64>> = (0..horizon)
        .map(|i| {
            let n = [0.0, 0.05, 0.02][i % 3];
            vec![0.95 + n, n]
        })
        .collect();
    let trace = run(losses, vec![0; horizon], 0.5);
    assert_eq!(trace.summary.stages, 1);
    assert!(trace.rows.iter().all(|r| r.stage == 1));
    assert!(trace.rows.windows(2).all(|w| w[1].alpha >= w[0].alpha));
    let first_full = trace
        .rows
        .iter()
        .position(|r| r.alpha == 1.0)
        .expect("alpha reaches 1");
    assert!(trace.rows[first_full..].iter().all(|r| r.alpha == 1.0));
}

#[test]
fn early_delay_burst_gives_hard_then_soft_restarts() {
    let horizon = 15_000;
    let delays: Vec<u64> = (1..=horizon).map(|t| if t <= 40 { 6 } else { 0 }).collect();
    let trace = run(separated_losses(horizon, &[0.0, 0.05, 0.02]), delays, 0.5);
    let s = &trace.summary;
    assert!(!s.hard_restarts.is_empty());
    assert!(s.soft_restarts > 0);
    assert!(s.invariants.clone().unwrap().all_hold());
    for w in trace.rows.windows(2) {
        if w[1].stage == w[0].stage {
            assert!(w[1].alpha >= w[0].alpha);
        } else {
            assert_eq!(w[1].phase, 1);
            assert!(w[1].alpha <= w[0].alpha);
        }
    }
}
