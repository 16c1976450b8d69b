use rand::Rng;
use rayon::prelude::*;

use crate::banker::stability_check;
use crate::banker::BankerLearner;
use crate::baselines::{
    default_ucb_confidence, ConservativeUcb, FixedPolicy, SafeExp3Ix, SafetySpec,
};
use crate::error::{Error, Result};
use crate::mirror::{Regularizer, SimplexPoint};
use crate::numeric::dot;
use crate::protocol::{
    stream_rng, Action, Environment, FeedbackEvent, FeedbackQueue, Learner, LossTable, Round,
    Stream,
};
use crate::prudent::{build_comparator, PrudentBanker};

use super::config::{LearnerSettings, LearnerSpec, RunConfig};
use super::trace::{HardRestartLog, InvariantReport, RunSummary, RunTrace, TraceRow};

/// Expected loss `<p, l>` of a played distribution.
pub fn pseudo_loss(p: &SimplexPoint, loss_row: &[f64]) -> Result<f64> {
    if p.len() != loss_row.len() {
        return Err(Error::Domain(format!(
            "distribution over {} arms, loss row over {}",
            p.len(),
            loss_row.len()
        )));
    }
    Ok(dot(p.as_slice(), loss_row))
}

/// Hindsight-best arm (lowest index on ties) and its cumulative loss curve.
pub fn best_fixed_arm(table: &LossTable) -> (usize, Vec<f64>) {
    let sums = table.column_sums();
    let best = crate::numeric::argmin(&sums);
    let mut total = 0.0;
    let curve = (1..=table.horizon())
        .map(|t| {
            total += table.loss(t, best);
            total
        })
        .collect();
    (best, curve)
}

/// Hindsight quantities injected into the learners.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub anchor: usize,
    pub curve: Vec<f64>,
    /// `r0 = mean of 1 - l_{t,i*}`.
    pub default_reward: f64,
    pub delta: f64,
    pub comparator: SimplexPoint,
}

impl Oracle {
    pub fn compute(env: &Environment, settings: &LearnerSettings) -> Result<Self> {
        let arms = env.arms();
        let delta = settings.delta_for(arms);
        let (anchor, curve) = best_fixed_arm(&env.losses);
        let horizon = env.horizon();
        let default_reward = if horizon == 0 {
            1.0
        } else {
            1.0 - curve[horizon - 1] / horizon as f64
        };
        Ok(Self {
            comparator: build_comparator(arms, delta, anchor)?,
            anchor,
            curve,
            default_reward: default_reward.clamp(0.0, 1.0),
            delta,
        })
    }
}

/// Any of the runnable learners, kept concrete so the driver can inspect it.
#[derive(Debug, Clone)]
pub enum AnyLearner {
    Prudent(PrudentBanker),
    Banker(BankerLearner),
    Ucb(ConservativeUcb),
    Exp3(SafeExp3Ix),
    Fixed(FixedPolicy),
}

impl AnyLearner {
    pub fn build(
        spec: LearnerSpec,
        env: &Environment,
        settings: &LearnerSettings,
        oracle: &Oracle,
    ) -> Result<Self> {
        let arms = env.arms();
        let horizon = env.horizon();
        let regularizer = || Regularizer::new(settings.regularizer, arms, oracle.delta);
        let safety = SafetySpec {
            default_arm: oracle.anchor,
            default_reward: oracle.default_reward,
            alpha_safe: settings.alpha_safe,
        };
        Ok(match spec {
            LearnerSpec::PrudentBanker => AnyLearner::Prudent(PrudentBanker::new(
                regularizer()?,
                horizon,
                oracle.comparator.clone(),
            )?),
            LearnerSpec::BankerOmd => AnyLearner::Banker(BankerLearner::new(regularizer()?)?),
            LearnerSpec::ConservativeUcb => AnyLearner::Ucb(ConservativeUcb::new(
                arms,
                safety,
                settings
                    .ucb_confidence
                    .unwrap_or_else(|| default_ucb_confidence(horizon)),
            )?),
            LearnerSpec::SafeExp3Ix => AnyLearner::Exp3(SafeExp3Ix::new(arms, horizon, safety)?),
            LearnerSpec::PlayComparator => {
                AnyLearner::Fixed(FixedPolicy::comparator(oracle.comparator.clone()))
            }
            LearnerSpec::PlayFixedArm(i) => AnyLearner::Fixed(FixedPolicy::arm(arms, i)?),
        })
    }

    fn inner(&self) -> &dyn Learner {
        match self {
            AnyLearner::Prudent(l) => l,
            AnyLearner::Banker(l) => l,
            AnyLearner::Ucb(l) => l,
            AnyLearner::Exp3(l) => l,
            AnyLearner::Fixed(l) => l,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Learner {
        match self {
            AnyLearner::Prudent(l) => l,
            AnyLearner::Banker(l) => l,
            AnyLearner::Ucb(l) => l,
            AnyLearner::Exp3(l) => l,
            AnyLearner::Fixed(l) => l,
        }
    }
}

impl Learner for AnyLearner {
    fn name(&self) -> &'static str {
        self.inner().name()
    }
    fn act(&mut self, t: Round, uniform: f64) -> Result<Action> {
        self.inner_mut().act(t, uniform)
    }
    fn observe(&mut self, t: Round, arrivals: &[FeedbackEvent]) -> Result<()> {
        self.inner_mut().observe(t, arrivals)
    }
    fn alpha(&self) -> f64 {
        self.inner().alpha()
    }
    fn stage(&self) -> usize {
        self.inner().stage()
    }
    fn phase(&self) -> usize {
        self.inner().phase()
    }
}

/// Per-round invariant checks on the learner's internals.
struct Checker {
    report: InvariantReport,
    default_arm: usize,
}

impl Checker {
    fn new(default_arm: usize) -> Self {
        Self {
            default_arm,
            report: InvariantReport {
                min_credit: f64::INFINITY,
                stage_bound_holds: true,
                ..InvariantReport::default()
            },
        }
    }

    /// After `act(t)`.
    fn after_act(&mut self, learner: &AnyLearner, env: &Environment, t: Round) -> Result<()> {
        let r = &mut self.report;
        r.rounds_checked += 1;
        match learner {
            AnyLearner::Prudent(p) => {
                let diag = p.diagnostics();
                if let Some(h) = diag.hard_restart {
                    if !(h.new_estimate < 2 * h.trigger.max(1) && h.new_estimate >= h.old_estimate)
                    {
                        r.doubling_violations += 1;
                    }
                }
                if let Some(report) = &diag.allocation {
                    r.max_conservation_residual = r
                        .max_conservation_residual
                        .max(report.conservation_residual());
                    borrow_identity(r, p.banker());
                    if let Some(played) = p.last_played() {
                        let reg = p.banker().regularizer();
                        let (lhs, bound) =
                            stability_check(reg, played, report.sigma, env.losses.row(t))?;
                        let ratio = lhs / bound;
                        r.max_stability_ratio = r.max_stability_ratio.max(ratio);
                        if lhs > bound * (1.0 + 1e-9) {
                            r.stability_violations += 1;
                        }
                    }
                }
                r.min_credit = r.min_credit.min(p.banker().ledger().min_credit());
            }
            AnyLearner::Banker(b) => {
                if let Some(report) = b.banker().last_report() {
                    r.max_conservation_residual = r
                        .max_conservation_residual
                        .max(report.conservation_residual());
                }
                borrow_identity(r, b.banker());
                r.min_credit = r.min_credit.min(b.banker().ledger().min_credit());
            }
            AnyLearner::Ucb(u) => {
                if let Some(d) = u.last_decision() {
                    if d.played != self.default_arm && d.budget < d.required {
                        r.cucb_budget_violations += 1;
                    }
                }
            }
            AnyLearner::Exp3(_) | AnyLearner::Fixed(_) => {}
        }
        Ok(())
    }

    /// After `observe(t)`.
    fn after_observe(&mut self, learner: &AnyLearner, env: &Environment) {
        let r = &mut self.report;
        let ledger = match learner {
            AnyLearner::Prudent(p) => {
                let diag = p.diagnostics();
                if diag.alpha_played <= 0.5 {
                    r.max_cautious_estimate = r.max_cautious_estimate.max(diag.max_estimate);
                    if diag.max_estimate > 2.0 / p.banker().regularizer().delta() * (1.0 + 1e-12) {
                        r.estimate_bound_violations += 1;
                    }
                }
                if diag.soft_restart.is_some() {
                    return;
                }
                p.banker().ledger()
            }
            AnyLearner::Banker(b) => b.banker().ledger(),
            _ => return,
        };
        let mut m: u128 = 0;
        let mut mass: u128 = 0;
        for u in ledger.missing_rounds() {
            m += 1;
            mass += u128::from(env.delays.delay(u));
        }
        r.missing_count_checks += 1;
        if m * (m + 1) / 2 > mass {
            r.missing_count_violations += 1;
        }
    }

    fn finish(mut self, stages: usize, realized_delay: u128) -> InvariantReport {
        let bound = if realized_delay == 0 {
            1
        } else {
            (128 - (realized_delay - 1).leading_zeros()) as usize + 1
        };
        self.report.stage_bound_holds = stages <= bound;
        if self.report.min_credit == f64::INFINITY {
            self.report.min_credit = 0.0;
        }
        self.report
    }
}

/// Cumulative borrow identity, evaluated after the round's action is recorded.
fn borrow_identity(r: &mut InvariantReport, banker: &crate::banker::BankerOmd) {
    let Some(report) = banker.last_report() else {
        return;
    };
    if report.borrow <= 0.0 {
        return;
    }
    // the current round is already among the missing rounds here
    let expected = banker.ledger().missing_sigma();
    let residual = (report.cumulative_borrow - expected).abs() / expected.max(1.0);
    r.borrow_identity_checks += 1;
    r.max_borrow_identity_residual = r.max_borrow_identity_residual.max(residual);
}

/// Options of a single run on a realized environment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub spec: LearnerSpec,
    pub settings: LearnerSettings,
    pub diagnostics: bool,
}

/// Runs one learner on a realized environment.
///
/// Actions draw from the learner's own stream of `env.config.seed`, so
/// learners compared on the same environment do not perturb each other.
pub fn run_on(env: &Environment, options: &RunOptions) -> Result<RunTrace> {
    let oracle = Oracle::compute(env, &options.settings)?;
    let mut learner = AnyLearner::build(options.spec, env, &options.settings, &oracle)?;
    run_learner(
        env,
        &mut learner,
        options.spec,
        &oracle,
        options.diagnostics,
    )
}

/// Drives a built learner through the round loop.
pub fn run_learner(
    env: &Environment,
    learner: &mut AnyLearner,
    spec: LearnerSpec,
    oracle: &Oracle,
    diagnostics: bool,
) -> Result<RunTrace> {
    let horizon = env.horizon();
    let seed = env.config.seed;
    let mut rng = stream_rng(seed, Stream::Actions(spec.stream_tag()));
    let mut queue = FeedbackQueue::new(horizon);
    let mut checker = diagnostics.then(|| Checker::new(oracle.anchor));
    let mut rows = Vec::with_capacity(horizon);
    let mut increments = Vec::with_capacity(horizon);
    let mut hard_restarts = Vec::new();
    let (mut loss_b, mut loss_c) = (0.0, 0.0);
    let mut phases = 1;

    for t in 1..=horizon {
        let uniform: f64 = rng.random();
        let action = learner.act(t, uniform).map_err(|e| e.at_round(t))?;
        if let AnyLearner::Prudent(p) = &*learner {
            if let Some(h) = p.diagnostics().hard_restart {
                phases += 1;
                hard_restarts.push(HardRestartLog {
                    restart: h,
                    window_delay: u64::try_from(env.delays.window_total(h.stage_start, t))
                        .unwrap_or(u64::MAX),
                });
            }
        }
        if let Some(c) = checker.as_mut() {
            c.after_act(learner, env, t).map_err(|e| e.at_round(t))?;
        }
        let (stage, phase, alpha) = (learner.stage(), learner.phase(), learner.alpha());

        let row = env.losses.row(t);
        let increment = pseudo_loss(&action.distribution, row).map_err(|e| e.at_round(t))?;
        loss_b += increment;
        loss_c += dot(oracle.comparator.as_slice(), row);

        queue
            .enqueue(FeedbackEvent {
                origin_round: t,
                arm: action.arm,
                loss_value: env.losses.loss(t, action.arm),
                arrival_round: t + env.delays.delay(t) as Round,
            })
            .map_err(|e| e.at_round(t))?;
        let arrivals = queue.step(t).map_err(|e| e.at_round(t))?;
        learner.observe(t, &arrivals).map_err(|e| e.at_round(t))?;
        if let AnyLearner::Prudent(p) = &*learner {
            if p.diagnostics().soft_restart.is_some() {
                phases += 1;
            }
        }
        if let Some(c) = checker.as_mut() {
            c.after_observe(learner, env);
        }

        increments.push(increment);
        rows.push(TraceRow {
            t,
            stage,
            phase,
            alpha,
            loss_b,
            loss_star: oracle.curve[t - 1],
            loss_c,
            arrived: arrivals.len(),
        });
    }

    let realized = env.delays.total();
    let (stages, soft_restarts) = match &*learner {
        AnyLearner::Prudent(p) => (p.state().stage, p.soft_restarts().len()),
        _ => (1, 0),
    };
    let last = rows.last().copied();
    let summary = RunSummary {
        learner: spec.to_string(),
        seed,
        horizon,
        arms: env.arms(),
        delay_model: env.config.delay_model.label().to_string(),
        realized_delay: u64::try_from(realized).unwrap_or(u64::MAX),
        stages,
        phases,
        soft_restarts,
        hard_restarts,
        final_loss_b: loss_b,
        final_loss_star: last.map_or(0.0, |r| r.loss_star),
        final_loss_c: loss_c,
        final_regret_best: last.map_or(0.0, |r| r.regret_best()),
        final_comparator_gap: last.map_or(0.0, |r| r.comparator_gap()),
        anchor_arm: oracle.anchor,
        default_reward: oracle.default_reward,
        delta: oracle.delta,
        comparator_oracle: true,
        discarded_feedback: queue.discarded(),
        invariants: checker.map(|c| c.finish(stages, realized)),
    };
    Ok(RunTrace {
        rows,
        increments,
        summary,
    })
}

/// Runs the configured learner once per seed, in parallel.
pub fn run(config: &RunConfig) -> Result<Vec<RunTrace>> {
    config.validate()?;
    let options = RunOptions {
        spec: config.learner,
        settings: config.settings,
        diagnostics: config.diagnostics,
    };
    config
        .seeds
        .par_iter()
        .map(|&seed| {
            let env = Environment::generate(&config.env_for_seed(seed))?;
            run_on(&env, &options)
        })
        .collect()
}

/// Runs several learners on one shared environment, in parallel.
pub fn compare(
    env: &Environment,
    learners: &[LearnerSpec],
    settings: &LearnerSettings,
    diagnostics: bool,
) -> Result<Vec<RunTrace>> {
    learners
        .par_iter()
        .map(|&spec| {
            run_on(
                env,
                &RunOptions {
                    spec,
                    settings: *settings,
                    diagnostics,
                },
            )
        })
        .collect()
}

/// Every learner on every seed; environments are generated once per seed.
pub fn sweep(config: &RunConfig, learners: &[LearnerSpec]) -> Result<Vec<RunTrace>> {
    config.validate()?;
    let per_seed: Vec<Vec<RunTrace>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let env = Environment::generate(&config.env_for_seed(seed))?;
            compare(&env, learners, &config.settings, config.diagnostics)
        })
        .collect::<Result<_>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}
