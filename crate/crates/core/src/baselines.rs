//! Comparison learners: Conservative-UCB, Safe-EXP3-IX and fixed policies.
//!
//! The conservative learners use zero-based time internally, so round `t`
//! of the game is time `t - 1` in their budget formulas.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::mirror::SimplexPoint;
use crate::numeric::{argmax, sample_index, CompensatedSum};
use crate::protocol::{Action, FeedbackEvent, Learner, Round};

pub use crate::banker::BankerLearner;

/// Parameters shared by the conservative baselines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafetySpec {
    pub default_arm: usize,
    /// Known mean reward of the default arm.
    pub default_reward: f64,
    pub alpha_safe: f64,
}

impl SafetySpec {
    fn validate(&self, arms: usize) -> Result<()> {
        if self.default_arm >= arms {
            return Err(Error::Config(format!(
                "default arm {} out of range for {arms} arms",
                self.default_arm
            )));
        }
        if !(0.0..=1.0).contains(&self.default_reward) {
            return Err(Error::Config(format!(
                "r0 = {} outside [0, 1]",
                self.default_reward
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha_safe) {
            return Err(Error::Config(format!(
                "alpha_safe = {} outside [0, 1]",
                self.alpha_safe
            )));
        }
        Ok(())
    }

    /// `(1 - alpha_safe)(t0 + 1) r0`.
    fn required(&self, t0: usize) -> f64 {
        (1.0 - self.alpha_safe) * (t0 + 1) as f64 * self.default_reward
    }
}

/// Default UCB confidence level `1 / max(T, 2)`.
pub fn default_ucb_confidence(horizon: usize) -> f64 {
    1.0 / horizon.max(2) as f64
}

/// Budget test outcome of one Conservative-UCB round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CucbDecision {
    pub candidate: usize,
    /// Pessimistic budget including the candidate.
    pub budget: f64,
    pub required: f64,
    pub played: usize,
}

/// Conservative-UCB with delayed observations.
#[derive(Debug, Clone)]
pub struct ConservativeUcb {
    safety: SafetySpec,
    confidence: f64,
    observed: Vec<u64>,
    reward_sums: Vec<f64>,
    played: Vec<u64>,
    last: Option<CucbDecision>,
}

impl ConservativeUcb {
    pub fn new(arms: usize, safety: SafetySpec, confidence: f64) -> Result<Self> {
        safety.validate(arms)?;
        if !(confidence > 0.0 && confidence < 1.0) {
            return Err(Error::Config(format!(
                "delta_ucb = {confidence} outside (0, 1)"
            )));
        }
        Ok(Self {
            safety,
            confidence,
            observed: vec![0; arms],
            reward_sums: vec![0.0; arms],
            played: vec![0; arms],
            last: None,
        })
    }

    pub fn last_decision(&self) -> Option<&CucbDecision> {
        self.last.as_ref()
    }

    /// Per-arm `(LCB, UCB)` at zero-based time `t0`.
    pub fn bounds(&self, t0: usize) -> Vec<(f64, f64)> {
        let arms = self.observed.len();
        let a = arms as f64;
        let level = (2.0 * a * ((t0 + 1) as f64).powi(2) / self.confidence)
            .max(3.0)
            .ln();
        (0..arms)
            .map(|i| {
                if i == self.safety.default_arm {
                    return (self.safety.default_reward, self.safety.default_reward);
                }
                let n = self.observed[i];
                if n == 0 {
                    return (0.0, 1.0);
                }
                let mean = self.reward_sums[i] / n as f64;
                let radius = (2.0 * level / n as f64).sqrt();
                ((mean - radius).max(0.0), (mean + radius).min(1.0))
            })
            .collect()
    }

    /// Chooses the arm at zero-based time `t0`.
    pub fn decide(&self, t0: usize) -> CucbDecision {
        let bounds = self.bounds(t0);
        let ucb: Vec<f64> = bounds.iter().map(|b| b.1).collect();
        let candidate = argmax(&ucb);
        let past: f64 = self
            .played
            .iter()
            .zip(&bounds)
            .map(|(&n, b)| n as f64 * b.0)
            .sum();
        let budget = past + bounds[candidate].0;
        let required = self.safety.required(t0);
        let played = if budget >= required {
            candidate
        } else {
            self.safety.default_arm
        };
        CucbDecision {
            candidate,
            budget,
            required,
            played,
        }
    }
}

impl Learner for ConservativeUcb {
    fn name(&self) -> &'static str {
        "conservative-ucb"
    }

    fn act(&mut self, t: Round, _uniform: f64) -> Result<Action> {
        let decision = self.decide(t - 1);
        self.played[decision.played] += 1;
        self.last = Some(decision);
        Ok(Action {
            distribution: SimplexPoint::vertex(self.played.len(), decision.played),
            arm: decision.played,
        })
    }

    fn observe(&mut self, _t: Round, arrivals: &[FeedbackEvent]) -> Result<()> {
        for e in arrivals {
            self.observed[e.arm] += 1;
            self.reward_sums[e.arm] += 1.0 - e.loss_value;
        }
        Ok(())
    }
}

/// Learning rate `min(1/2, sqrt(ln A / (A T)))`.
pub fn exp3ix_learning_rate(arms: usize, horizon: usize) -> f64 {
    let a = arms as f64;
    (a.ln() / (a * horizon as f64)).sqrt().min(0.5)
}

/// EXP3-IX wrapped in a conservative reward budget.
#[derive(Debug, Clone)]
pub struct SafeExp3Ix {
    safety: SafetySpec,
    eta: f64,
    gamma: f64,
    log_weights: Vec<f64>,
    budget: CompensatedSum,
    /// `(arm, q_s(arm), base learner acted)` of rounds awaiting feedback.
    pending: HashMap<Round, (usize, f64, bool)>,
    base_acted: bool,
}

impl SafeExp3Ix {
    pub fn new(arms: usize, horizon: usize, safety: SafetySpec) -> Result<Self> {
        safety.validate(arms)?;
        let eta = exp3ix_learning_rate(arms, horizon);
        Ok(Self {
            safety,
            eta,
            gamma: eta / 2.0,
            log_weights: vec![0.0; arms],
            budget: CompensatedSum::new(),
            pending: HashMap::new(),
            base_acted: false,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn budget(&self) -> f64 {
        self.budget.value()
    }

    /// Whether the base learner chose the most recent action.
    pub fn base_acted(&self) -> bool {
        self.base_acted
    }

    /// Base distribution `q_t`.
    pub fn distribution(&self) -> SimplexPoint {
        let max = self
            .log_weights
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - max).exp()).collect();
        SimplexPoint::from_weights(w).expect("the largest weight is one")
    }

    /// Implicit-exploration estimate `loss / (q + gamma)`.
    pub fn estimate(&self, loss: f64, q: f64) -> f64 {
        loss / (q + self.gamma)
    }

    /// Applies one arrived loss of a base-learner round.
    pub fn update(&mut self, arm: usize, loss: f64, q: f64) {
        self.log_weights[arm] -= self.eta * self.estimate(loss, q);
    }
}

impl Learner for SafeExp3Ix {
    fn name(&self) -> &'static str {
        "safe-exp3ix"
    }

    fn act(&mut self, t: Round, uniform: f64) -> Result<Action> {
        let t0 = t - 1;
        let arms = self.log_weights.len();
        self.base_acted = self.budget.value() >= self.safety.required(t0);
        let (distribution, arm) = if self.base_acted {
            let q = self.distribution();
            let arm = sample_index(q.as_slice(), uniform);
            self.pending.insert(t, (arm, q[arm], true));
            (q, arm)
        } else {
            let arm = self.safety.default_arm;
            self.pending.insert(t, (arm, 1.0, false));
            (SimplexPoint::vertex(arms, arm), arm)
        };
        if arm == self.safety.default_arm {
            self.budget.add(self.safety.default_reward);
        }
        Ok(Action { distribution, arm })
    }

    fn observe(&mut self, _t: Round, arrivals: &[FeedbackEvent]) -> Result<()> {
        for e in arrivals {
            let (arm, q, base) = self.pending.remove(&e.origin_round).ok_or_else(|| {
                Error::Protocol(format!("unexpected feedback for round {}", e.origin_round))
            })?;
            if arm != e.arm {
                return Err(Error::Protocol(format!(
                    "feedback for round {} names arm {}, played {arm}",
                    e.origin_round, e.arm
                )));
            }
            if arm != self.safety.default_arm {
                self.budget.add(1.0 - e.loss_value);
            }
            if base {
                self.update(arm, e.loss_value, q);
            }
        }
        Ok(())
    }
}

/// Always plays a fixed distribution (the comparator, for instance).
#[derive(Debug, Clone)]
pub struct FixedPolicy {
    name: &'static str,
    distribution: SimplexPoint,
}

impl FixedPolicy {
    pub fn comparator(distribution: SimplexPoint) -> Self {
        Self {
            name: "play-comparator",
            distribution,
        }
    }

    pub fn arm(arms: usize, arm: usize) -> Result<Self> {
        if arm >= arms {
            return Err(Error::Config(format!(
                "arm {arm} out of range for {arms} arms"
            )));
        }
        Ok(Self {
            name: "play-fixed-arm",
            distribution: SimplexPoint::vertex(arms, arm),
        })
    }
}

impl Learner for FixedPolicy {
    fn name(&self) -> &'static str {
        self.name
    }

    fn act(&mut self, _t: Round, uniform: f64) -> Result<Action> {
        Ok(Action {
            arm: sample_index(self.distribution.as_slice(), uniform),
            distribution: self.distribution.clone(),
        })
    }

    fn observe(&mut self, _t: Round, _arrivals: &[FeedbackEvent]) -> Result<()> {
        Ok(())
    }
}
