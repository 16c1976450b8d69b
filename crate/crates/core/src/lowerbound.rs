//! Lower-bound constructions: greedy buckets, batched hard instances and
//! the simulation of a delayed learner by a batched one.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mirror::SimplexPoint;
use crate::numeric::{dot, sample_index};
use crate::protocol::{
    stream_rng, DelaySequence, FeedbackEvent, FeedbackQueue, Learner, LossTable, Round, Stream,
};

/// Partition of `1..=T` into buckets `[b_m, b_{m+1})`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketDecomposition {
    /// `b_1 < b_2 < ... < b_{M+1} = T + 1`.
    pub boundaries: Vec<Round>,
}

impl BucketDecomposition {
    /// Wraps explicit boundaries without checking the greedy property.
    pub fn from_boundaries(boundaries: Vec<Round>) -> Self {
        Self { boundaries }
    }

    pub fn count(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn lengths(&self) -> Vec<u64> {
        self.boundaries
            .windows(2)
            .map(|w| (w[1] - w[0]) as u64)
            .collect()
    }

    /// Rounds of bucket `m` (one-based).
    pub fn bucket(&self, m: usize) -> std::ops::Range<Round> {
        self.boundaries[m - 1]..self.boundaries[m]
    }

    /// `V_j = sum_{m >= j} L_m^2`.
    pub fn suffix_variance(&self, j: usize) -> u128 {
        self.lengths()[j - 1..]
            .iter()
            .map(|&l| u128::from(l) * u128::from(l))
            .sum()
    }
}

/// Checks that delays are positive, non-increasing and `d_t <= T + 1 - t`.
pub fn check_admissible(delays: &DelaySequence) -> Result<()> {
    let d = delays.as_slice();
    let horizon = d.len();
    if horizon == 0 {
        return Err(Error::Precondition("empty delay sequence".into()));
    }
    for (i, &dt) in d.iter().enumerate() {
        let t = i + 1;
        if dt == 0 {
            return Err(Error::Precondition(format!("d_{t} = 0, need d_t >= 1")));
        }
        if dt > (horizon + 1 - t) as u64 {
            return Err(Error::Precondition(format!(
                "d_{t} = {dt} exceeds T + 1 - t = {}",
                horizon + 1 - t
            )));
        }
        if i > 0 && dt > d[i - 1] {
            return Err(Error::Precondition(format!(
                "delays increase at round {t} ({} -> {dt})",
                d[i - 1]
            )));
        }
    }
    Ok(())
}

/// Greedy bucket decomposition `b_{m+1} = min_{t >= b_m} (t + d_t)`.
pub fn greedy_buckets(delays: &DelaySequence) -> Result<BucketDecomposition> {
    check_admissible(delays)?;
    let horizon = delays.horizon();
    // suffix minima of t + d_t
    let mut suffix_min = vec![u64::MAX; horizon + 2];
    for t in (1..=horizon).rev() {
        suffix_min[t] = suffix_min[t + 1].min(delays.arrival_round(t));
    }
    let mut boundaries = vec![1];
    let mut b = 1;
    while b <= horizon {
        b = suffix_min[b] as Round;
        boundaries.push(b);
    }
    Ok(BucketDecomposition { boundaries })
}

/// `d_t = min{q, T + 1 - t}` with `T = (N + 1) q`.
pub fn corollary_delays(q: u64, n: u64) -> Result<DelaySequence> {
    if q == 0 || n == 0 {
        return Err(Error::Precondition(format!(
            "need q, N >= 1 (got q = {q}, N = {n})"
        )));
    }
    let horizon = (n + 1) * q;
    Ok(DelaySequence::new(
        (1..=horizon).map(|t| q.min(horizon + 1 - t)).collect(),
    ))
}

/// Closed-form total delay `N q^2 + q (q + 1) / 2` of [`corollary_delays`].
pub fn corollary_total_delay(q: u64, n: u64) -> u128 {
    let (q, n) = (u128::from(q), u128::from(n));
    n * q * q + q * (q + 1) / 2
}

/// Results of the three exact bucket inequalities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BucketChecks {
    pub lengths_non_increasing: bool,
    /// `L_m^2 >= sum_{t in B_{m+1}} d_t` for every `m < M`.
    pub quadratic_dominance: bool,
    /// `V_j >= sum of d_t outside the first j buckets` for every `j`.
    pub suffix_dominance: bool,
    /// Every `t` in `B_m` has `t + d_t >= b_{m+1}`, with equality attained.
    pub greedy_property: bool,
}

impl BucketChecks {
    pub fn all(&self) -> bool {
        self.lengths_non_increasing
            && self.quadratic_dominance
            && self.suffix_dominance
            && self.greedy_property
    }
}

pub fn check_buckets(delays: &DelaySequence, buckets: &BucketDecomposition) -> BucketChecks {
    let lengths = buckets.lengths();
    let m_count = buckets.count();
    let bucket_delay =
        |m: usize| delays.window_total(buckets.boundaries[m - 1], buckets.boundaries[m] - 1);
    let lengths_non_increasing = lengths.windows(2).all(|w| w[0] >= w[1]);
    let quadratic_dominance = (1..m_count).all(|m| {
        let l = u128::from(lengths[m - 1]);
        l * l >= bucket_delay(m + 1)
    });
    let suffix_dominance = (1..=m_count).all(|j| {
        let outside: u128 = (j + 1..=m_count).map(bucket_delay).sum();
        buckets.suffix_variance(j) >= outside
    });
    let greedy_property = (1..=m_count).all(|m| {
        let next = buckets.boundaries[m] as u64;
        let range = buckets.bucket(m);
        range.clone().all(|t| delays.arrival_round(t) >= next)
            && range.clone().any(|t| delays.arrival_round(t) == next)
    });
    BucketChecks {
        lengths_non_increasing,
        quadratic_dominance,
        suffix_dominance,
        greedy_property,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Sign {
    Plus,
    Minus,
}

/// One of the two batched hard environments.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardInstance {
    pub arms: usize,
    pub lengths: Vec<u64>,
    pub delta: f64,
    pub gamma: f64,
    pub v: u128,
    /// Per-block bias `eps_m = gamma L_m / sqrt(V)` of arm index 1.
    pub eps: Vec<f64>,
    pub sign: Sign,
    pub comparator: SimplexPoint,
    /// Loss vectors per slot, blocks concatenated.
    pub slot_losses: Vec<Vec<f64>>,
}

/// Scalars of the hard-instance family, validated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardParameters {
    pub v: u128,
    pub gamma: f64,
    pub eps: Vec<f64>,
}

pub fn hard_parameters(lengths: &[u64], delta: f64, arms: usize) -> Result<HardParameters> {
    if arms < 2 {
        return Err(Error::Precondition("need A >= 2".into()));
    }
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(Error::Precondition("block lengths must be positive".into()));
    }
    if lengths.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Precondition(
            "block lengths must be non-increasing".into(),
        ));
    }
    if !(delta > 0.0) || delta > 1.0 / arms as f64 {
        return Err(Error::Precondition(format!(
            "delta <= 1/A fails: delta = {delta}, A = {arms}"
        )));
    }
    let v: u128 = lengths.iter().map(|&l| u128::from(l) * u128::from(l)).sum();
    let l1 = lengths[0] as f64;
    let bound = l1 / (64.0 * v as f64);
    if delta < bound {
        return Err(Error::Precondition(format!(
            "delta >= L_1 / (64 V) fails: {delta} < {bound}"
        )));
    }
    let gamma = 1.0 / (32.0 * (l1 * delta).sqrt());
    let root_v = (v as f64).sqrt();
    let eps: Vec<f64> = lengths.iter().map(|&l| gamma * l as f64 / root_v).collect();
    if let Some(e) = eps.iter().find(|&&e| e > 0.25 + 1e-12) {
        return Err(Error::Precondition(format!("eps_m <= 1/4 fails: {e}")));
    }
    Ok(HardParameters { v, gamma, eps })
}

/// Draws one batched hard environment.
///
/// Arm index 1 has Bernoulli losses with mean `1/2 +- eps_m` in block `m`;
/// every other arm has constant loss `1/2`.
pub fn make_hard_instance<R: Rng + ?Sized>(
    lengths: &[u64],
    delta: f64,
    arms: usize,
    sign: Sign,
    rng: &mut R,
) -> Result<HardInstance> {
    let params = hard_parameters(lengths, delta, arms)?;
    let mut comparator = vec![delta; arms];
    comparator[0] = 1.0 - (arms - 1) as f64 * delta;
    let comparator = SimplexPoint::from_weights(comparator)?;
    let mut slot_losses = Vec::new();
    for (&len, &e) in lengths.iter().zip(&params.eps) {
        let p = match sign {
            Sign::Plus => 0.5 + e,
            Sign::Minus => 0.5 - e,
        };
        for _ in 0..len {
            let mut row = vec![0.5; arms];
            row[1] = if rng.random::<f64>() < p { 1.0 } else { 0.0 };
            slot_losses.push(row);
        }
    }
    Ok(HardInstance {
        arms,
        lengths: lengths.to_vec(),
        delta,
        gamma: params.gamma,
        v: params.v,
        eps: params.eps,
        sign,
        comparator,
        slot_losses,
    })
}

/// Action sequences and regrets of the native and batched runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledTranscripts {
    pub native_actions: Vec<usize>,
    pub batched_actions: Vec<usize>,
    pub native_regret: f64,
    pub batched_regret: f64,
}

impl CoupledTranscripts {
    pub fn identical(&self) -> bool {
        self.native_actions == self.batched_actions && self.native_regret == self.batched_regret
    }
}

fn realized_regret(losses: &[Vec<f64>], actions: &[usize], comparator: &SimplexPoint) -> f64 {
    losses
        .iter()
        .zip(actions)
        .map(|(l, &a)| l[a] - dot(comparator.as_slice(), l))
        .sum()
}

/// Runs a fresh learner on the delayed instance: zero losses before `b_j`,
/// then the suffix block losses.
fn run_native<L: Learner>(
    learner: &mut L,
    delays: &DelaySequence,
    losses: &LossTable,
    tape: &[f64],
) -> Result<Vec<usize>> {
    let horizon = delays.horizon();
    let mut queue = FeedbackQueue::new(horizon);
    let mut actions = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let arm = learner.act(t, tape[t - 1]).map_err(|e| e.at_round(t))?.arm;
        actions.push(arm);
        queue.enqueue(FeedbackEvent {
            origin_round: t,
            arm,
            loss_value: losses.loss(t, arm),
            arrival_round: t + delays.delay(t) as Round,
        })?;
        let arrivals = queue.step(t)?;
        learner.observe(t, &arrivals).map_err(|e| e.at_round(t))?;
    }
    Ok(actions)
}

/// Runs a fresh learner through the batched wrapper.
///
/// Losses of a bucket are revealed only after its last slot; feedback is
/// then stored with availability `u + d_u + 1` and delivered at the end of
/// round `u + d_u`.
fn run_batched<L: Learner>(
    learner: &mut L,
    delays: &DelaySequence,
    buckets: &BucketDecomposition,
    j: usize,
    suffix_losses: &[Vec<f64>],
    tape: &[f64],
) -> Result<Vec<usize>> {
    let horizon = delays.horizon();
    let prefix_end = buckets.boundaries[j - 1];
    let mut store: Vec<Vec<FeedbackEvent>> = vec![Vec::new(); horizon + 2];
    let mut actions = Vec::with_capacity(horizon);
    let schedule = |store: &mut Vec<Vec<FeedbackEvent>>, u: Round, arm: usize, loss: f64| {
        let availability = u + delays.delay(u) as Round + 1;
        if availability <= horizon {
            store[availability].push(FeedbackEvent {
                origin_round: u,
                arm,
                loss_value: loss,
                arrival_round: availability - 1,
            });
        }
    };
    // the zero prefix is known in advance
    for t in 1..prefix_end {
        let arm = learner.act(t, tape[t - 1]).map_err(|e| e.at_round(t))?.arm;
        actions.push(arm);
        schedule(&mut store, t, arm, 0.0);
        let mut due = std::mem::take(&mut store[t + 1]);
        due.sort_by_key(|e| e.origin_round);
        learner.observe(t, &due).map_err(|e| e.at_round(t))?;
    }
    for m in j..=buckets.count() {
        let block = buckets.bucket(m);
        let mut block_actions = Vec::with_capacity(block.len());
        for t in block.clone() {
            let arm = learner.act(t, tape[t - 1]).map_err(|e| e.at_round(t))?.arm;
            block_actions.push((t, arm));
            actions.push(arm);
            // items of this bucket are unknown until it ends
            if let Some(u) = block.clone().find(|&u| u + delays.delay(u) as Round == t) {
                return Err(Error::SimulationIntegrity(format!(
                    "feedback of round {u} is due at the end of round {t}, inside its own bucket {m}"
                )));
            }
            let mut due = std::mem::take(&mut store[t + 1]);
            due.sort_by_key(|e| e.origin_round);
            learner.observe(t, &due).map_err(|e| e.at_round(t))?;
        }
        for (t, arm) in block_actions {
            schedule(&mut store, t, arm, suffix_losses[t - prefix_end][arm]);
        }
    }
    Ok(actions)
}

/// Runs a fresh learner natively and inside the batched wrapper with the
/// same action-noise tape.
pub fn batched_simulate<L, F>(
    make_learner: F,
    delays: &DelaySequence,
    j: usize,
    suffix_losses: &[Vec<f64>],
    tape: &[f64],
    comparator: &SimplexPoint,
) -> Result<CoupledTranscripts>
where
    L: Learner,
    F: Fn() -> Result<L>,
{
    let buckets = greedy_buckets(delays)?;
    batched_simulate_with_buckets(
        make_learner,
        delays,
        &buckets,
        j,
        suffix_losses,
        tape,
        comparator,
    )
}

/// As [`batched_simulate`] with caller-supplied buckets.
///
/// Buckets that violate the greedy property surface as a
/// simulation-integrity error.
pub fn batched_simulate_with_buckets<L, F>(
    make_learner: F,
    delays: &DelaySequence,
    buckets: &BucketDecomposition,
    j: usize,
    suffix_losses: &[Vec<f64>],
    tape: &[f64],
    comparator: &SimplexPoint,
) -> Result<CoupledTranscripts>
where
    L: Learner,
    F: Fn() -> Result<L>,
{
    let horizon = delays.horizon();
    if j == 0 || j > buckets.count() {
        return Err(Error::Precondition(format!(
            "suffix start {j} outside 1..={}",
            buckets.count()
        )));
    }
    let prefix_end = buckets.boundaries[j - 1];
    if suffix_losses.len() != horizon + 1 - prefix_end {
        return Err(Error::Precondition(format!(
            "{} suffix loss vectors for {} suffix rounds",
            suffix_losses.len(),
            horizon + 1 - prefix_end
        )));
    }
    if tape.len() != horizon {
        return Err(Error::Precondition(
            "action tape must cover the horizon".into(),
        ));
    }
    let arms = comparator.len();
    let mut rows = vec![vec![0.0; arms]; prefix_end - 1];
    rows.extend(suffix_losses.iter().cloned());
    let table = LossTable::from_rows(&rows)?;

    let native_actions = run_native(&mut make_learner()?, delays, &table, tape)?;
    let batched_actions = run_batched(
        &mut make_learner()?,
        delays,
        buckets,
        j,
        suffix_losses,
        tape,
    )?;
    Ok(CoupledTranscripts {
        native_regret: realized_regret(&rows, &native_actions, comparator),
        batched_regret: realized_regret(&rows, &batched_actions, comparator),
        native_actions,
        batched_actions,
    })
}

/// Non-adaptive batched policies for the safety-gap probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ProbePolicy {
    AlwaysArm(usize),
    /// Each slot draws an arm from the comparator.
    SampleComparator,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub policy: ProbePolicy,
    pub trials: usize,
    pub mean_w: f64,
    pub mean_regret: f64,
    /// `gamma sqrt(V) (mean W - delta)`.
    pub predicted_regret: f64,
    /// Standard error of the per-trial residual `R - gamma sqrt(V) (W - delta)`.
    pub residual_se: f64,
    pub residual_mean: f64,
    pub within_three_se: bool,
}

/// Monte-Carlo check of `R_+(x^c) = gamma sqrt(V) (E[W] - delta)` under the plus environment.
pub fn safety_gap_probe(
    lengths: &[u64],
    delta: f64,
    arms: usize,
    policy: ProbePolicy,
    trials: usize,
    seed: u64,
) -> Result<ProbeReport> {
    let params = hard_parameters(lengths, delta, arms)?;
    if let ProbePolicy::AlwaysArm(a) = policy {
        if a >= arms {
            return Err(Error::Config(format!(
                "arm {a} out of range for {arms} arms"
            )));
        }
    }
    if trials < 2 {
        return Err(Error::Config("need at least two trials".into()));
    }
    let scale = params.gamma * (params.v as f64).sqrt();
    let samples: Vec<Result<(f64, f64)>> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream_rng(seed, Stream::Aux(trial as u64));
            let inst = make_hard_instance(lengths, delta, arms, Sign::Plus, &mut rng)?;
            let mut weighted = 0u128;
            let mut slot = 0;
            let mut actions = Vec::with_capacity(inst.slot_losses.len());
            for &len in lengths {
                let mut n_m = 0u128;
                for _ in 0..len {
                    let arm = match policy {
                        ProbePolicy::AlwaysArm(a) => a,
                        ProbePolicy::SampleComparator => {
                            sample_index(inst.comparator.as_slice(), rng.random())
                        }
                    };
                    n_m += u128::from(arm == 1);
                    actions.push(arm);
                    slot += 1;
                }
                weighted += u128::from(len) * n_m;
            }
            debug_assert_eq!(slot, inst.slot_losses.len());
            let w = weighted as f64 / params.v as f64;
            let regret = realized_regret(&inst.slot_losses, &actions, &inst.comparator);
            Ok((w, regret))
        })
        .collect();
    let samples: Vec<(f64, f64)> = samples.into_iter().collect::<Result<_>>()?;
    let n = trials as f64;
    let mean_w = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_regret = samples.iter().map(|s| s.1).sum::<f64>() / n;
    let residuals: Vec<f64> = samples
        .iter()
        .map(|(w, r)| r - scale * (w - delta))
        .collect();
    let residual_mean = residuals.iter().sum::<f64>() / n;
    let var = residuals
        .iter()
        .map(|r| (r - residual_mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    let residual_se = (var / n).sqrt();
    Ok(ProbeReport {
        policy,
        trials,
        mean_w,
        mean_regret,
        predicted_regret: scale * (mean_w - delta),
        residual_se,
        residual_mean,
        within_three_se: residual_mean.abs() <= 3.0 * residual_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucket_examples() {
        let b = greedy_buckets(&DelaySequence::new(vec![1, 1, 1])).unwrap();
        assert_eq!(b.boundaries, vec![1, 2, 3, 4]);
        assert_eq!(b.lengths(), vec![1, 1, 1]);
        let b = greedy_buckets(&DelaySequence::new(vec![2, 2, 2, 2, 2, 1])).unwrap();
        assert_eq!(b.boundaries, vec![1, 3, 5, 7]);
    }

    #[test]
    fn inadmissible_delays_rejected() {
        for d in [vec![1, 2, 1], vec![3, 1], vec![0, 0], vec![2, 2]] {
            let err = greedy_buckets(&DelaySequence::new(d.clone()));
            assert!(matches!(err, Err(Error::Precondition(_))), "{d:?}");
        }
    }

    #[test]
    fn corollary_examples() {
        let d = corollary_delays(1, 3).unwrap();
        assert_eq!(d.as_slice(), &[1, 1, 1, 1]);
        assert_eq!(d.total(), 4);
        let d = corollary_delays(2, 2).unwrap();
        assert_eq!(d.total(), 11);
        assert_eq!(corollary_total_delay(2, 2), 11);
        for q in 1..6 {
            let b = greedy_buckets(&corollary_delays(q, 4).unwrap()).unwrap();
            assert!(b.lengths().iter().all(|&l| l == q));
        }
    }

    #[test]
    fn hard_instance_example() {
        let p = hard_parameters(&[2, 2, 2], 0.25, 2).unwrap();
        assert_eq!(p.v, 12);
        assert!((p.gamma - 1.0 / (32.0 * 0.5f64.sqrt())).abs() < 1e-15);
        assert!((p.gamma - 0.04419).abs() < 1e-5);
        assert!((p.eps[0] - 0.02552).abs() < 1e-5);
    }

    #[test]
    fn hard_instance_boundary_and_violations() {
        let lengths = [4, 2, 1];
        let v = 21.0;
        let boundary = 4.0 / (64.0 * v);
        assert!(hard_parameters(&lengths, boundary, 2).is_ok());
        let err = hard_parameters(&lengths, boundary * 0.999, 2).unwrap_err();
        assert!(err.to_string().contains("L_1 / (64 V)"));
        let err = hard_parameters(&[1], 0.6, 2).unwrap_err();
        assert!(err.to_string().contains("1/A"));
    }

    #[test]
    fn signs_differ_only_in_arm_two_mean() {
        let plus = make_hard_instance(
            &[3, 2],
            0.2,
            4,
            Sign::Plus,
            &mut stream_rng(1, Stream::Aux(0)),
        )
        .unwrap();
        let minus = make_hard_instance(
            &[3, 2],
            0.2,
            4,
            Sign::Minus,
            &mut stream_rng(1, Stream::Aux(0)),
        )
        .unwrap();
        assert_eq!(plus.eps, minus.eps);
        for (a, b) in plus.slot_losses.iter().zip(&minus.slot_losses) {
            assert_eq!(a[0], 0.5);
            assert_eq!(&a[2..], &b[2..]);
            assert!(a[1] == 0.0 || a[1] == 1.0);
        }
    }
}
