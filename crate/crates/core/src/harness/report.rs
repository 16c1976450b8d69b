use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::lowerbound::{
    batched_simulate, check_buckets, corollary_delays, corollary_total_delay, greedy_buckets,
    hard_parameters, make_hard_instance, safety_gap_probe, BucketChecks, HardParameters,
    ProbePolicy, ProbeReport, Sign,
};
use crate::mirror::{Regularizer, RegularizerKind};
use crate::protocol::{stream_rng, Round, Stream};
use crate::prudent::PrudentBanker;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BucketRow {
    pub index: usize,
    pub start: Round,
    pub end: Round,
    pub length: u64,
    pub delay_inside: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchedIdentity {
    pub seeds: usize,
    pub identical: usize,
    pub max_regret_difference: f64,
}

/// Lower-bound construction on the corollary delay pattern.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LowerBoundReport {
    pub q: u64,
    pub n: u64,
    pub horizon: usize,
    pub arms: usize,
    pub delta: f64,
    pub total_delay: u64,
    pub closed_form_total_delay: u64,
    pub buckets: Vec<BucketRow>,
    pub checks: BucketChecks,
    pub hard: HardParameters,
    pub batched: BatchedIdentity,
    pub probes: Vec<ProbeReport>,
}

/// Builds the report for delays `corollary_delays(q, n)`.
///
/// The batched identity runs Prudent-Banker on `identity_seeds` coupled
/// hard instances; each probe uses `trials` Monte-Carlo draws.
pub fn lowerbound_report(
    q: u64,
    n: u64,
    arms: usize,
    delta: f64,
    identity_seeds: u64,
    trials: usize,
    seed: u64,
) -> Result<LowerBoundReport> {
    let delays = corollary_delays(q, n)?;
    let horizon = delays.horizon();
    let buckets = greedy_buckets(&delays)?;
    let lengths = buckets.lengths();
    let rows = (1..=buckets.count())
        .map(|m| {
            let range = buckets.bucket(m);
            BucketRow {
                index: m,
                start: range.start,
                end: range.end - 1,
                length: lengths[m - 1],
                delay_inside: delays.window_total(range.start, range.end - 1) as u64,
            }
        })
        .collect();
    let hard = hard_parameters(&lengths, delta, arms)?;

    let mut identical = 0;
    let mut max_diff: f64 = 0.0;
    for s in 0..identity_seeds {
        let mut rng = stream_rng(seed.wrapping_add(s), Stream::Aux(0));
        let instance = make_hard_instance(&lengths, delta, arms, Sign::Plus, &mut rng)?;
        let tape: Vec<f64> = (0..horizon).map(|_| rng.random()).collect();
        let comparator = instance.comparator.clone();
        let make = || {
            let reg = Regularizer::new(RegularizerKind::NegativeEntropy, arms, delta)?;
            PrudentBanker::new(reg, horizon, comparator.clone())
        };
        let coupled =
            batched_simulate(make, &delays, 1, &instance.slot_losses, &tape, &comparator)?;
        identical += usize::from(coupled.identical());
        max_diff = max_diff.max((coupled.native_regret - coupled.batched_regret).abs());
    }

    let policies = [
        ProbePolicy::AlwaysArm(0),
        ProbePolicy::AlwaysArm(1),
        ProbePolicy::SampleComparator,
    ];
    let probes = policies
        .iter()
        .map(|&p| safety_gap_probe(&lengths, delta, arms, p, trials, seed))
        .collect::<Result<_>>()?;

    Ok(LowerBoundReport {
        q,
        n,
        horizon,
        arms,
        delta,
        total_delay: delays.total() as u64,
        closed_form_total_delay: corollary_total_delay(q, n) as u64,
        checks: check_buckets(&delays, &buckets),
        buckets: rows,
        hard,
        batched: BatchedIdentity {
            seeds: identity_seeds as usize,
            identical,
            max_regret_difference: max_diff,
        },
        probes,
    })
}
