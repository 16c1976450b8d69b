use proptest::prelude::*;
use prudent_banker::lowerbound::{
    check_buckets, corollary_delays, corollary_total_delay, greedy_buckets, hard_parameters,
    BucketDecomposition,
};
use prudent_banker::protocol::DelaySequence;

/// Non-increasing delays with `1 <= d_t <= T + 1 - t`.
fn admissible() -> impl Strategy<Value = Vec<u64>> {
    (1usize..80, prop::collection::vec(0.0f64..1.0, 80)).prop_map(|(horizon, u)| {
        let mut cap = horizon as u64;
        (1..=horizon)
            .map(|t| {
                cap = cap.min((horizon + 1 - t) as u64);
                let d = 1 + (u[t - 1] * cap as f64) as u64;
                cap = d.min(cap);
                cap
            })
            .collect()
    })
}

/// Boundaries by scanning forward from each bucket start.
fn oracle_boundaries(d: &[u64]) -> Vec<usize> {
    let horizon = d.len();
    let mut out = vec![1];
    let mut b = 1;
    while b <= horizon {
        b = (b..=horizon).map(|t| t + d[t - 1] as usize).min().unwrap();
        out.push(b);
    }
    out
}

fn exact_checks(d: &[u64], boundaries: &[usize]) -> (bool, bool, bool) {
    let lengths: Vec<u128> = boundaries
        .windows(2)
        .map(|w| (w[1] - w[0]) as u128)
        .collect();
    let inside = |m: usize| -> u128 {
        (boundaries[m]..boundaries[m + 1])
            .map(|t| u128::from(d[t - 1]))
            .sum()
    };
    let monotone = lengths.windows(2).all(|w| w[0] >= w[1]);
    let quadratic =
        (0..lengths.len().saturating_sub(1)).all(|m| lengths[m] * lengths[m] >= inside(m + 1));
    let suffix = (0..lengths.len()).all(|j| {
        let v: u128 = lengths[j..].iter().map(|l| l * l).sum();
        let outside: u128 = (j + 1..lengths.len()).map(inside).sum();
        v >= outside
    });
    (monotone, quadratic, suffix)
}

proptest! {
    #[test]
    fn greedy_buckets_satisfy_the_exact_inequalities(d in admissible()) {
        let seq = DelaySequence::new(d.clone());
        let buckets = greedy_buckets(&seq).unwrap();
        let expected = oracle_boundaries(&d);
        prop_assert_eq!(&buckets.boundaries, &expected);
        let (monotone, quadratic, suffix) = exact_checks(&d, &expected);
        prop_assert!(monotone && quadratic && suffix);
        let checks = check_buckets(&seq, &buckets);
        prop_assert!(checks.all(), "{:?}", checks);
        prop_assert_eq!(*buckets.boundaries.last().unwrap(), d.len() + 1);
    }

    #[test]
    fn non_greedy_partitions_fail_the_greedy_check(d in admissible()) {
        let seq = DelaySequence::new(d.clone());
        let greedy = greedy_buckets(&seq).unwrap();
        if greedy.count() >= 2 {
            // merge the first two buckets: no feedback of the merged block arrives exactly at its end
            let mut merged = greedy.boundaries.clone();
            merged.remove(1);
            let checks = check_buckets(&seq, &BucketDecomposition::from_boundaries(merged));
            prop_assert!(!checks.greedy_property);
        }
    }

    #[test]
    fn corollary_pattern_matches_closed_forms(q in 1u64..12, n in 1u64..40) {
        let d = corollary_delays(q, n).unwrap();
        prop_assert_eq!(d.horizon() as u64, (n + 1) * q);
        prop_assert_eq!(d.total(), corollary_total_delay(q, n));
        let b = greedy_buckets(&d).unwrap();
        prop_assert_eq!(b.count() as u64, n + 1);
        prop_assert!(b.lengths().iter().all(|&l| l == q));
        prop_assert!(check_buckets(&d, &b).all());
    }

    #[test]
    fn hard_parameters_stay_in_range(d in admissible(), arms in 2usize..8, frac in 0.05f64..1.0) {
        let lengths = greedy_buckets(&DelaySequence::new(d)).unwrap().lengths();
        let delta = frac / arms as f64;
        let v: u128 = lengths.iter().map(|&l| u128::from(l * l)).sum();
        match hard_parameters(&lengths, delta, arms) {
            Ok(p) => {
                prop_assert_eq!(p.v, v);
                let gamma = 1.0 / (32.0 * (lengths[0] as f64 * delta).sqrt());
                prop_assert!((p.gamma - gamma).abs() <= 1e-15 * gamma);
                for (e, &l) in p.eps.iter().zip(&lengths) {
                    prop_assert!((e - gamma * l as f64 / (v as f64).sqrt()).abs() <= 1e-15);
                    prop_assert!(*e <= 0.25 + 1e-12);
                }
            }
            Err(_) => prop_assert!(delta < lengths[0] as f64 / (64.0 * v as f64)),
        }
    }
}
