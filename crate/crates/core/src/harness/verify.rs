//! Invariant suites run by `prudent-bench verify`.
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::lowerbound::{check_buckets, corollary_delays, greedy_buckets};
use crate::mirror::{Regularizer, RegularizerKind, SimplexPoint};
use crate::numeric::{dot, sample_index};
use crate::protocol::{
    outstanding_counters, DelayModel, DelaySequence, Environment, EnvironmentConfig, LossModel,
};
use crate::prudent::{build_comparator, gap_statistic};

use super::config::{LearnerSettings, LearnerSpec};
use super::report::lowerbound_report;
use super::run::{run_on, RunOptions};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }
}

/// Problem sizes of the suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifySize {
    pub horizon: usize,
    pub arms: usize,
    pub seeds: u64,
    pub samples: usize,
}

impl VerifySize {
    pub const QUICK: VerifySize = VerifySize {
        horizon: 2_000,
        arms: 5,
        seeds: 2,
        samples: 200,
    };
    pub const FULL: VerifySize = VerifySize {
        horizon: 20_000,
        arms: 10,
        seeds: 5,
        samples: 1_000,
    };
}

fn geometric_env(size: VerifySize, seed: u64) -> Result<Environment> {
    Environment::generate(&EnvironmentConfig {
        horizon: size.horizon,
        arms: size.arms,
        loss_model: LossModel::BlockNonstationary {
            blocks: (size.horizon / 200).max(1),
        },
        delay_model: DelayModel::Geometric {
            p_active: 0.03,
            q_geo: 0.4,
        },
        seed,
    })
}

/// Runs Prudent-Banker with per-round checks on geometric-delay environments.
pub fn prudent_invariants(size: VerifySize) -> Result<SuiteOutcome> {
    let mut failures = Vec::new();
    let mut restarts = 0;
    for seed in 0..size.seeds {
        let env = geometric_env(size, seed)?;
        let trace = run_on(
            &env,
            &RunOptions {
                spec: LearnerSpec::PrudentBanker,
                settings: LearnerSettings::default(),
                diagnostics: true,
            },
        )?;
        restarts += trace.summary.hard_restarts.len();
        let inv = trace.summary.invariants.expect("diagnostics enabled");
        if !inv.all_hold() {
            failures.push(format!("seed {seed}: {inv:?}"));
        }
    }
    let detail = if failures.is_empty() {
        format!("{} seeds, {restarts} hard restarts", size.seeds)
    } else {
        failures.join("; ")
    };
    Ok(SuiteOutcome::new(
        "prudent-invariants",
        failures.is_empty(),
        detail,
    ))
}

/// Outstanding counts against the double-counting identity.
pub fn delay_mass(size: VerifySize) -> SuiteOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut bad = 0;
    for _ in 0..size.samples {
        let horizon = rng.random_range(1..=120usize);
        let delays = DelaySequence::new((0..horizon).map(|_| rng.random_range(0..=40)).collect());
        let (_, mass) = outstanding_counters(&delays, 1, horizon);
        let identity: u64 = (1..=horizon)
            .map(|r| delays.delay(r).min((horizon - r) as u64))
            .sum();
        if u128::from(mass) > delays.total() || mass != identity {
            bad += 1;
        }
    }
    SuiteOutcome::new(
        "delay-mass",
        bad == 0,
        format!("{} sequences, {bad} failures", size.samples),
    )
}

/// Conjugate-of-gradient round trip and the diameter bound.
pub fn mirror_round_trip(size: VerifySize) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    let mut diameter_ok = true;
    for kind in [
        RegularizerKind::NegativeEntropy,
        RegularizerKind::TsallisHalf,
    ] {
        let reg = Regularizer::new(kind, size.arms, 0.1 / size.arms as f64)?;
        let (c1, _) = reg.constants();
        for _ in 0..size.samples {
            let w: Vec<f64> = (0..size.arms)
                .map(|_| rng.random_range(0.01..1.0))
                .collect();
            let x = SimplexPoint::from_weights(w)?;
            let back = reg.conjugate(&reg.grad_psi(&x)?)?;
            for (a, b) in x.as_slice().iter().zip(back.point.as_slice()) {
                worst = worst.max((a - b).abs());
            }
            diameter_ok &= reg.bregman(&x, &reg.base_point())? <= c1 + 1e-12;
        }
    }
    Ok(SuiteOutcome::new(
        "mirror-round-trip",
        worst <= 1e-8 && diameter_ok,
        format!(
            "max error {worst:.2e}, diameter bound {}",
            if diameter_ok { "holds" } else { "violated" }
        ),
    ))
}

/// Closed-form gap statistic against enumeration of vertices.
pub fn gap_oracle(size: VerifySize) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut bad = 0;
    for _ in 0..size.samples {
        let arms = rng.random_range(2..=6usize);
        let xc = build_comparator(arms, 1.0 / (arms as f64 * 4.0), rng.random_range(0..arms))?;
        let g: Vec<f64> = (0..arms).map(|_| rng.random_range(0.0..100.0)).collect();
        let base = dot(&g, xc.as_slice());
        let brute = (0..arms)
            .map(|a| base - g[a])
            .fold(f64::NEG_INFINITY, f64::max);
        bad += usize::from(gap_statistic(&g, &xc) != brute);
    }
    Ok(SuiteOutcome::new(
        "gap-oracle",
        bad == 0,
        format!("{} vectors, {bad} mismatches", size.samples),
    ))
}

/// Monte-Carlo mean of the importance-weighted estimate.
pub fn estimator(size: VerifySize) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let arms = size.arms;
    let delta = 0.1 / arms as f64;
    let mut w: Vec<f64> = (0..arms).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut()
        .for_each(|v| *v = delta / 2.0 + (1.0 - arms as f64 * delta / 2.0) * *v / total);
    let x = SimplexPoint::new(w)?;
    let loss: Vec<f64> = (0..arms).map(|_| rng.random_range(0.0..1.0)).collect();
    let n = size.samples * 100;
    let mut sum = vec![0.0; arms];
    let mut sq = vec![0.0; arms];
    for _ in 0..n {
        let a = sample_index(x.as_slice(), rng.random());
        let v = loss[a] / x[a];
        sum[a] += v;
        sq[a] += v * v;
    }
    let mut worst: f64 = 0.0;
    for i in 0..arms {
        let mean = sum[i] / n as f64;
        let var = sq[i] / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        worst = worst.max((mean - loss[i]).abs() / se.max(f64::MIN_POSITIVE));
    }
    Ok(SuiteOutcome::new(
        "estimator",
        worst <= 3.0,
        format!("{n} draws, worst deviation {worst:.2} SE"),
    ))
}

/// Greedy-bucket inequalities on random admissible sequences.
pub fn buckets(size: VerifySize) -> Result<SuiteOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bad = 0;
    let mut checked = 0;
    for _ in 0..size.samples {
        let horizon = rng.random_range(1..=60usize);
        let mut delays = Vec::with_capacity(horizon);
        let mut cap = horizon as u64;
        for t in 1..=horizon as u64 {
            cap = cap.min(horizon as u64 + 1 - t);
            let d = rng.random_range(1..=cap);
            cap = d;
            delays.push(d);
        }
        let delays = DelaySequence::new(delays);
        if let Ok(b) = greedy_buckets(&delays) {
            checked += 1;
            bad += usize::from(!check_buckets(&delays, &b).all());
        }
    }
    for q in [1, 2, 5] {
        let delays = corollary_delays(q, 10)?;
        checked += 1;
        bad += usize::from(!check_buckets(&delays, &greedy_buckets(&delays)?).all());
    }
    Ok(SuiteOutcome::new(
        "buckets",
        bad == 0 && checked > 3,
        format!("{checked} sequences, {bad} failures"),
    ))
}

/// Batched identity and safety-gap probes on the smallest corollary instance.
pub fn lower_bound(_size: VerifySize) -> Result<SuiteOutcome> {
    let report = lowerbound_report(2, 2, 2, 0.25, 20, 100_000, 0)?;
    let probes_ok = report.probes.iter().all(|p| p.within_three_se);
    let passed =
        report.checks.all() && report.batched.identical == report.batched.seeds && probes_ok;
    Ok(SuiteOutcome::new(
        "lower-bound",
        passed,
        format!(
            "batched identical {}/{}, probes within 3 SE: {probes_ok}",
            report.batched.identical, report.batched.seeds
        ),
    ))
}

/// Two runs of the same configuration emit identical CSV.
pub fn determinism(size: VerifySize) -> Result<SuiteOutcome> {
    let env = geometric_env(size, 99)?;
    let options = RunOptions {
        spec: LearnerSpec::PrudentBanker,
        settings: LearnerSettings::default(),
        diagnostics: false,
    };
    let a = run_on(&env, &options)?.csv_string()?;
    let b = run_on(&env, &options)?.csv_string()?;
    Ok(SuiteOutcome::new(
        "determinism",
        a == b,
        format!("{} bytes", a.len()),
    ))
}

pub fn run_all(size: VerifySize) -> Result<Vec<SuiteOutcome>> {
    Ok(vec![
        prudent_invariants(size)?,
        delay_mass(size),
        mirror_round_trip(size)?,
        gap_oracle(size)?,
        estimator(size)?,
        buckets(size)?,
        lower_bound(size)?,
        determinism(size)?,
    ])
}
