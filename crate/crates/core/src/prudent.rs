//! Prudent-Banker: Banker-OMD mixed with a safe comparator.
//!
//! Two restart mechanisms sit on top of the base learner. A hard restart
//! opens a new stage when the delay observed in the stage exceeds the
//! current estimate `D_hat`; a soft restart opens a new phase with doubled
//! aggression when arrived data certify that the comparator is beaten.

use serde::{Deserialize, Serialize};

use crate::banker::{AllocationReport, BankerOmd};
use crate::error::{Error, Result};
use crate::mirror::{DualPoint, Regularizer, SimplexPoint};
use crate::numeric::{dot, sample_index, CompensatedVec};
use crate::protocol::{Action, FeedbackEvent, Learner, Round};

/// Delay-calibrated thresholds of one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdFunctions {
    pub horizon: usize,
    pub c1: f64,
    pub c2: f64,
    pub delta: f64,
}

impl ThresholdFunctions {
    pub fn new(horizon: usize, reg: &Regularizer) -> Self {
        let (c1, c2) = reg.constants();
        Self {
            horizon,
            c1,
            c2,
            delta: reg.delta(),
        }
    }

    /// Regret budget `R_hat(D)`.
    pub fn rhat(&self, d: u64) -> f64 {
        let d = d as f64;
        let log_term = if d == 0.0 {
            0.0
        } else {
            (2.0 * d * (d + 1.0).ln()).sqrt()
        };
        (self.c1 * self.c2).sqrt() * (3.0 * (self.horizon as f64).sqrt() + 7.0 * log_term)
    }

    /// Missing-feedback slack `xi_hat(D)`.
    pub fn xi(&self, d: u64) -> f64 {
        ((8.0 * d as f64 + 1.0).sqrt() - 1.0) / self.delta
    }

    /// Soft-restart threshold `2 R_hat(D) + xi_hat(D)`.
    pub fn restart_threshold(&self, d: u64) -> f64 {
        2.0 * self.rhat(d) + self.xi(d)
    }

    /// Aggression of phase `k` under estimate `d`.
    pub fn alpha(&self, phase: usize, d: u64) -> f64 {
        let scale = 2f64.powi(phase as i32 - 1);
        (scale / self.rhat(d)).min(1.0)
    }
}

/// `max over the simplex of <g, xc - x>`, attained at the arm minimizing `g`.
pub fn gap_statistic(g: &[f64], comparator: &SimplexPoint) -> f64 {
    let min = g.iter().copied().fold(f64::INFINITY, f64::min);
    dot(g, comparator.as_slice()) - min
}

/// Comparator with mass `1 - (A-1) delta` on `anchor` and `delta` elsewhere.
pub fn build_comparator(arms: usize, delta: f64, anchor: usize) -> Result<SimplexPoint> {
    if arms == 0 || anchor >= arms {
        return Err(Error::Config(format!(
            "anchor arm {anchor} out of range for {arms} arms"
        )));
    }
    if !(delta > 0.0) || delta > 1.0 / arms as f64 + 1e-15 {
        return Err(Error::Config(format!(
            "delta = {delta} must lie in (0, 1/{arms}]"
        )));
    }
    let mut p = vec![delta; arms];
    p[anchor] = 1.0 - (arms - 1) as f64 * delta;
    SimplexPoint::new(p)
}

/// Smallest power of two that is at least `trigger`.
pub fn next_delay_estimate(trigger: u64) -> u64 {
    trigger.max(1).next_power_of_two()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardRestart {
    pub round: Round,
    /// Stage delay statistic that fired the restart.
    pub trigger: u64,
    pub old_estimate: u64,
    pub new_estimate: u64,
    /// First round of the stage that ended.
    pub stage_start: Round,
    pub alpha_before: f64,
    pub alpha_after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftRestart {
    pub round: Round,
    pub gap: f64,
    pub threshold: f64,
    pub alpha_before: f64,
    pub alpha_after: f64,
}

/// Stage and phase bookkeeping.
#[derive(Debug, Clone)]
pub struct StagePhaseState {
    pub stage: usize,
    pub delay_estimate: u64,
    pub phase: usize,
    pub stage_start: Round,
    pub phase_start: Round,
    pub alpha: f64,
    /// Delays of arrived feedback originating in the current stage.
    pub stage_delay: u64,
    gap: CompensatedVec,
    pub comparator: SimplexPoint,
}

impl StagePhaseState {
    pub fn new(tf: &ThresholdFunctions, comparator: SimplexPoint) -> Self {
        Self {
            stage: 1,
            delay_estimate: 1,
            phase: 1,
            stage_start: 1,
            phase_start: 1,
            alpha: tf.alpha(1, 1),
            stage_delay: 0,
            gap: CompensatedVec::zeros(comparator.len()),
            comparator,
        }
    }

    /// Arrived loss-estimate sum of the phase.
    pub fn gap_vector(&self) -> Vec<f64> {
        self.gap.to_vec()
    }

    pub fn gap(&self) -> f64 {
        gap_statistic(&self.gap.to_vec(), &self.comparator)
    }

    /// Records the delay of an arrival and, when it belongs to the phase, its estimate.
    pub fn absorb(&mut self, event: &FeedbackEvent, estimate: Option<f64>) {
        if event.origin_round >= self.stage_start {
            self.stage_delay += event.delay();
        }
        if let Some(value) = estimate {
            self.gap.add_at(event.arm, value);
        }
    }

    /// Opens a new stage at `t + 1` if the stage delay exceeds the estimate.
    pub fn check_hard_restart(&mut self, tf: &ThresholdFunctions, t: Round) -> Option<HardRestart> {
        if self.stage_delay <= self.delay_estimate {
            return None;
        }
        let old_estimate = self.delay_estimate;
        let alpha_before = self.alpha;
        let stage_start = self.stage_start;
        let trigger = self.stage_delay;
        self.stage += 1;
        self.delay_estimate = next_delay_estimate(trigger);
        self.phase = 1;
        self.stage_start = t + 1;
        self.phase_start = t + 1;
        self.alpha = tf.alpha(1, self.delay_estimate);
        self.stage_delay = 0;
        self.gap = CompensatedVec::zeros(self.comparator.len());
        Some(HardRestart {
            round: t,
            trigger,
            old_estimate,
            new_estimate: self.delay_estimate,
            stage_start,
            alpha_before,
            alpha_after: self.alpha,
        })
    }

    /// Opens a new phase at `t + 1` if the gap exceeds the threshold and `alpha < 1`.
    pub fn check_soft_restart(&mut self, tf: &ThresholdFunctions, t: Round) -> Option<SoftRestart> {
        if self.alpha >= 1.0 {
            return None;
        }
        let gap = self.gap();
        let threshold = tf.restart_threshold(self.delay_estimate);
        if gap <= threshold {
            return None;
        }
        let alpha_before = self.alpha;
        self.phase += 1;
        self.alpha = tf.alpha(self.phase, self.delay_estimate);
        self.phase_start = t + 1;
        self.gap = CompensatedVec::zeros(self.comparator.len());
        Some(SoftRestart {
            round: t,
            gap,
            threshold,
            alpha_before,
            alpha_after: self.alpha,
        })
    }
}

/// Facts about the most recent round, for invariant checks.
#[derive(Debug, Clone, Default)]
pub struct RoundDiagnostics {
    pub round: Round,
    pub hard_restart: Option<HardRestart>,
    pub soft_restart: Option<SoftRestart>,
    pub allocation: Option<AllocationReport>,
    /// Gap statistic after ingesting the round's arrivals.
    pub gap: f64,
    pub threshold: f64,
    /// Largest loss-estimate coordinate produced this round.
    pub max_estimate: f64,
    /// Aggression of the phase whose rounds produced this round's estimates.
    pub alpha_played: f64,
}

/// The Prudent-Banker learner.
#[derive(Debug, Clone)]
pub struct PrudentBanker {
    tf: ThresholdFunctions,
    banker: BankerOmd,
    state: StagePhaseState,
    played: Option<DualPoint>,
    diagnostics: RoundDiagnostics,
    hard_restarts: Vec<HardRestart>,
    soft_restarts: Vec<SoftRestart>,
}

impl PrudentBanker {
    pub fn new(reg: Regularizer, horizon: usize, comparator: SimplexPoint) -> Result<Self> {
        if comparator.len() != reg.arms() {
            return Err(Error::Config(
                "comparator length differs from the arm count".into(),
            ));
        }
        if comparator.min() < reg.delta() - 1e-15 {
            return Err(Error::Config(format!(
                "comparator puts {} < delta = {} on some arm",
                comparator.min(),
                reg.delta()
            )));
        }
        let tf = ThresholdFunctions::new(horizon, &reg);
        Ok(Self {
            state: StagePhaseState::new(&tf, comparator),
            banker: BankerOmd::new(reg)?,
            tf,
            played: None,
            diagnostics: RoundDiagnostics::default(),
            hard_restarts: Vec::new(),
            soft_restarts: Vec::new(),
        })
    }

    pub fn thresholds(&self) -> &ThresholdFunctions {
        &self.tf
    }

    pub fn state(&self) -> &StagePhaseState {
        &self.state
    }

    pub fn banker(&self) -> &BankerOmd {
        &self.banker
    }

    pub fn diagnostics(&self) -> &RoundDiagnostics {
        &self.diagnostics
    }

    /// Played point of the most recent round with its gradient.
    pub fn last_played(&self) -> Option<&DualPoint> {
        self.played.as_ref()
    }

    pub fn hard_restarts(&self) -> &[HardRestart] {
        &self.hard_restarts
    }

    pub fn soft_restarts(&self) -> &[SoftRestart] {
        &self.soft_restarts
    }
}

impl Learner for PrudentBanker {
    fn name(&self) -> &'static str {
        "prudent-banker"
    }

    fn act(&mut self, t: Round, uniform: f64) -> Result<Action> {
        self.diagnostics = RoundDiagnostics {
            round: t,
            ..RoundDiagnostics::default()
        };
        let reg = *self.banker.regularizer();
        let restart = self.state.check_hard_restart(&self.tf, t);
        let prediction = if let Some(r) = restart {
            self.banker.reset(t + 1);
            self.hard_restarts.push(r);
            self.diagnostics.hard_restart = Some(r);
            None
        } else {
            Some(self.banker.predict(t)?)
        };
        let alpha = self.state.alpha;
        let (hat, report) = match prediction {
            Some(p) => (p.dual, Some(p.report)),
            None => (reg.base_dual(), None),
        };
        let played = if alpha >= 1.0 {
            hat
        } else {
            let x = SimplexPoint::mix(alpha, &hat.point, &self.state.comparator);
            reg.dual_of(&x)?
        };
        let arm = sample_index(played.point.as_slice(), uniform);
        let distribution = played.point.clone();
        if report.is_some() {
            self.banker.record_action(t, played.clone(), arm)?;
        }
        self.diagnostics.allocation = report;
        self.played = Some(played);
        Ok(Action { distribution, arm })
    }

    fn observe(&mut self, t: Round, arrivals: &[FeedbackEvent]) -> Result<()> {
        let mut max_estimate: f64 = 0.0;
        for event in arrivals {
            let estimate = self.banker.ingest(event)?;
            if let Some(v) = estimate {
                max_estimate = max_estimate.max(v);
            }
            self.state.absorb(event, estimate);
        }
        self.diagnostics.max_estimate = max_estimate;
        self.diagnostics.alpha_played = self.state.alpha;
        self.diagnostics.gap = self.state.gap();
        self.diagnostics.threshold = self.tf.restart_threshold(self.state.delay_estimate);
        if let Some(r) = self.state.check_soft_restart(&self.tf, t) {
            self.banker.reset(t + 1);
            self.soft_restarts.push(r);
            self.diagnostics.soft_restart = Some(r);
        }
        Ok(())
    }

    fn alpha(&self) -> f64 {
        self.state.alpha
    }

    fn stage(&self) -> usize {
        self.state.stage
    }

    fn phase(&self) -> usize {
        self.state.phase
    }
}
