//! Banker-OMD: online mirror descent with per-round step-size credits.
//!
//! Every round `t` opens a credit `v_t = sigma_t`. To predict at round `t`
//! the learner spends credits of rounds whose feedback has arrived, oldest
//! first, and borrows the remainder `b_t` from the base point.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mirror::{DualPoint, Regularizer, SimplexPoint};
use crate::numeric::{sample_index, CompensatedSum};
use crate::protocol::{Action, FeedbackEvent, Learner, Round};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundStatus {
    PendingAction,
    Missing,
    Arrived,
}

/// Ledger entry of one round.
///
/// Dual points are kept only while they can still be used: the played point
/// until its feedback arrives, and `z_u` while the round has credit left.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: Round,
    pub status: RoundStatus,
    pub sigma: f64,
    pub credit: f64,
    pub arm: Option<usize>,
    /// `x_u(A_u)`, stored at action time.
    pub played_prob: Option<f64>,
    /// Nonzero coordinate of the loss estimate, at `arm`.
    pub estimate: Option<f64>,
    played: Option<DualPoint>,
    z: Option<DualPoint>,
}

impl RoundRecord {
    pub fn z(&self) -> Option<&DualPoint> {
        self.z.as_ref()
    }

    /// Full loss-estimate vector of an arrived round.
    pub fn estimate_vector(&self, arms: usize) -> Option<Vec<f64>> {
        let value = self.estimate?;
        let mut v = vec![0.0; arms];
        v[self.arm?] = value;
        Some(v)
    }
}

/// Per-round accounting facts, kept for invariant checks.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationReport {
    pub round: Round,
    pub sigma: f64,
    pub allocation: Vec<(Round, f64)>,
    pub borrow: f64,
    pub cumulative_borrow: f64,
    pub outstanding: u64,
    pub delay_mass: u64,
}

impl AllocationReport {
    /// `|sum allocations + borrow - sigma|`.
    pub fn conservation_residual(&self) -> f64 {
        let spent: f64 = self.allocation.iter().map(|(_, s)| s).sum();
        (spent + self.borrow - self.sigma).abs()
    }
}

/// Records of the current phase plus the cumulative borrow.
#[derive(Debug, Clone)]
pub struct BankerLedger {
    phase_start: Round,
    records: Vec<RoundRecord>,
    donors: BTreeSet<Round>,
    missing: BTreeSet<Round>,
    cumulative_borrow: CompensatedSum,
    delay_mass: u64,
}

impl BankerLedger {
    pub fn new(phase_start: Round) -> Self {
        Self {
            phase_start,
            records: Vec::new(),
            donors: BTreeSet::new(),
            missing: BTreeSet::new(),
            cumulative_borrow: CompensatedSum::new(),
            delay_mass: 0,
        }
    }

    pub fn phase_start(&self) -> Round {
        self.phase_start
    }

    pub fn cumulative_borrow(&self) -> f64 {
        self.cumulative_borrow.value()
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.records
    }

    pub fn record(&self, u: Round) -> Option<&RoundRecord> {
        u.checked_sub(self.phase_start)
            .and_then(|i| self.records.get(i))
    }

    fn record_mut(&mut self, u: Round) -> Option<&mut RoundRecord> {
        u.checked_sub(self.phase_start)
            .and_then(|i| self.records.get_mut(i))
    }

    /// Rounds of the phase whose feedback has not arrived yet.
    pub fn missing_rounds(&self) -> impl Iterator<Item = Round> + '_ {
        self.missing.iter().copied()
    }

    /// `sum of sigma_u` over missing rounds.
    pub fn missing_sigma(&self) -> f64 {
        self.missing
            .iter()
            .map(|&u| self.record(u).map_or(0.0, |r| r.sigma))
            .sum()
    }

    /// Smallest remaining credit in the phase.
    pub fn min_credit(&self) -> f64 {
        self.records
            .iter()
            .map(|r| r.credit)
            .fold(f64::INFINITY, f64::min)
    }

    /// Opens the record of round `t` and drains arrived credits into it.
    ///
    /// Returns the allocation `(u, sigma_{t,u})` in increasing round order
    /// and the residual borrow `b_t`.
    pub fn allocate(&mut self, t: Round, sigma: f64) -> Result<(Vec<(Round, f64)>, f64)> {
        let expected = self.phase_start + self.records.len();
        if t != expected {
            return Err(Error::Protocol(format!(
                "ledger expected round {expected}, got {t}"
            )));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Numerical(format!("step size {sigma} at round {t}")));
        }
        let mut borrow = sigma;
        let mut allocation = Vec::new();
        let mut exhausted = Vec::new();
        for &u in &self.donors {
            if borrow <= 0.0 {
                break;
            }
            let rec = &mut self.records[u - self.phase_start];
            let take = rec.credit.min(borrow);
            rec.credit -= take;
            borrow -= take;
            allocation.push((u, take));
            if rec.credit <= 0.0 {
                exhausted.push(u);
            }
        }
        for u in exhausted {
            self.donors.remove(&u);
        }
        let borrow = borrow.max(0.0);
        self.cumulative_borrow.add(borrow);
        self.records.push(RoundRecord {
            round: t,
            status: RoundStatus::PendingAction,
            sigma,
            credit: sigma,
            arm: None,
            played_prob: None,
            estimate: None,
            played: None,
            z: None,
        });
        Ok((allocation, borrow))
    }

    /// Drops `z_u` of rounds whose credit is spent.
    fn release_spent(&mut self, allocation: &[(Round, f64)]) {
        for &(u, _) in allocation {
            if !self.donors.contains(&u) {
                if let Some(rec) = self.record_mut(u) {
                    rec.z = None;
                }
            }
        }
    }

    /// Writes a per-round table of the phase.
    pub fn write_snapshot<W: Write>(&self, out: W) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            round: Round,
            status: RoundStatus,
            sigma: f64,
            credit: f64,
            arm: Option<usize>,
            played_prob: Option<f64>,
            estimate: Option<f64>,
        }
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(Row {
                round: r.round,
                status: r.status,
                sigma: r.sigma,
                credit: r.credit,
                arm: r.arm,
                played_prob: r.played_prob,
                estimate: r.estimate,
            })
            .map_err(|e| Error::Invariant(format!("snapshot serialization: {e}")))?;
        }
        w.flush().map_err(|e| Error::io("<snapshot>", e))
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_snapshot(std::io::BufWriter::new(file))
    }
}

/// Step size of round `t` given the phase's outstanding count and delay mass.
pub fn step_size(
    reg: &Regularizer,
    t: Round,
    phase_start: Round,
    outstanding: u64,
    mass: u64,
) -> f64 {
    let (c1, c2) = reg.constants();
    let elapsed = (t - phase_start + 1) as f64;
    let delay_term = if outstanding == 0 {
        0.0
    } else {
        let m = mass as f64;
        outstanding as f64 * ((m + 1.0).ln() / m).sqrt()
    };
    (c2 / c1).sqrt() / (1.0 / elapsed.sqrt() + delay_term)
}

/// Prediction of one round.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub dual: DualPoint,
    pub report: AllocationReport,
}

/// The Banker-OMD base learner.
#[derive(Debug, Clone)]
pub struct BankerOmd {
    reg: Regularizer,
    base: DualPoint,
    ledger: BankerLedger,
    last_report: Option<AllocationReport>,
}

impl BankerOmd {
    pub fn new(reg: Regularizer) -> Result<Self> {
        if reg.arms() < 2 {
            return Err(Error::Config("Banker-OMD needs at least two arms".into()));
        }
        Ok(Self {
            base: reg.base_dual(),
            reg,
            ledger: BankerLedger::new(1),
            last_report: None,
        })
    }

    pub fn regularizer(&self) -> &Regularizer {
        &self.reg
    }

    pub fn ledger(&self) -> &BankerLedger {
        &self.ledger
    }

    pub fn last_report(&self) -> Option<&AllocationReport> {
        self.last_report.as_ref()
    }

    /// Discards all state; the next phase starts at `phase_start`.
    pub fn reset(&mut self, phase_start: Round) {
        self.ledger = BankerLedger::new(phase_start);
        self.last_report = None;
    }

    /// Computes the step size, spends credits and returns the prediction.
    pub fn predict(&mut self, t: Round) -> Result<Prediction> {
        let ledger = &mut self.ledger;
        if t < ledger.phase_start {
            return Err(Error::Protocol(format!(
                "round {t} precedes the phase start {}",
                ledger.phase_start
            )));
        }
        // feedback of every earlier phase round is either arrived or missing here
        let outstanding = ledger.missing.len() as u64;
        ledger.delay_mass += outstanding;
        let mass = ledger.delay_mass;
        let sigma = step_size(&self.reg, t, ledger.phase_start, outstanding, mass);
        let (allocation, borrow) = ledger.allocate(t, sigma)?;

        let arms = self.reg.arms();
        let mut theta = vec![0.0; arms];
        for &(u, weight) in &allocation {
            let z = ledger
                .record(u)
                .and_then(RoundRecord::z)
                .ok_or_else(|| Error::Invariant(format!("donor round {u} has no update point")))?;
            for (th, g) in theta.iter_mut().zip(&z.grad) {
                *th += weight / sigma * g;
            }
        }
        for (th, g) in theta.iter_mut().zip(&self.base.grad) {
            *th += borrow / sigma * g;
        }
        ledger.release_spent(&allocation);
        let dual = if allocation.is_empty() {
            self.base.clone()
        } else {
            self.reg.conjugate(&theta)?
        };
        let report = AllocationReport {
            round: t,
            sigma,
            allocation,
            borrow,
            cumulative_borrow: ledger.cumulative_borrow(),
            outstanding,
            delay_mass: mass,
        };
        self.last_report = Some(report.clone());
        Ok(Prediction { dual, report })
    }

    /// Stores the played point and arm of round `t`.
    pub fn record_action(&mut self, t: Round, played: DualPoint, arm: usize) -> Result<()> {
        let rec = self
            .ledger
            .record_mut(t)
            .filter(|r| r.status == RoundStatus::PendingAction)
            .ok_or_else(|| Error::Protocol(format!("no pending prediction for round {t}")))?;
        rec.played_prob = Some(played.point[arm]);
        rec.arm = Some(arm);
        rec.played = Some(played);
        rec.status = RoundStatus::Missing;
        self.ledger.missing.insert(t);
        Ok(())
    }

    /// Applies one arrived observation.
    ///
    /// Feedback from before the phase start is ignored and `Ok(None)` is
    /// returned; otherwise the loss estimate coordinate is returned.
    pub fn ingest(&mut self, event: &FeedbackEvent) -> Result<Option<f64>> {
        let u = event.origin_round;
        if u < self.ledger.phase_start {
            return Ok(None);
        }
        let reg = self.reg;
        let rec = self
            .ledger
            .record_mut(u)
            .filter(|r| r.status == RoundStatus::Missing)
            .ok_or_else(|| Error::Protocol(format!("unexpected feedback for round {u}")))?;
        if rec.arm != Some(event.arm) {
            return Err(Error::Protocol(format!(
                "feedback for round {u} names arm {}, played {:?}",
                event.arm, rec.arm
            )));
        }
        let prob = rec.played_prob.unwrap_or(0.0);
        if !(prob > 0.0) {
            return Err(Error::Protocol(format!(
                "played arm {} of round {u} had probability zero",
                event.arm
            )));
        }
        let value = event.loss_value / prob;
        let played = rec
            .played
            .take()
            .expect("missing rounds keep their played point");
        let z = if value == 0.0 {
            played
        } else {
            let mut estimate = vec![0.0; reg.arms()];
            estimate[event.arm] = value;
            reg.mirror_step(&played, &estimate, rec.sigma)?
        };
        rec.z = Some(z);
        rec.estimate = Some(value);
        rec.status = RoundStatus::Arrived;
        self.ledger.missing.remove(&u);
        self.ledger.donors.insert(u);
        Ok(Some(value))
    }
}

/// Expected local-norm term `E[sigma D(x, z~)]` over arms drawn from `x`.
///
/// `z~` is one mirror step from `x` with the importance-weighted estimate of
/// `loss_row`. Returns the expectation and the bound `C2 / sigma`.
pub fn stability_check(
    reg: &Regularizer,
    x: &DualPoint,
    sigma: f64,
    loss_row: &[f64],
) -> Result<(f64, f64)> {
    let mut expectation = 0.0;
    for (arm, &p) in x.point.as_slice().iter().enumerate() {
        if p <= 0.0 || loss_row[arm] == 0.0 {
            continue;
        }
        let mut estimate = vec![0.0; reg.arms()];
        estimate[arm] = loss_row[arm] / p;
        let z = reg.mirror_step(x, &estimate, sigma)?;
        expectation += p * sigma * reg.bregman_dual(&x.point, &z);
    }
    Ok((expectation, reg.constants().1 / sigma))
}

/// Checks `B_t = sigma_t + sum of sigma_u over missing u < t` when `b_t > 0`.
///
/// Must be called right after `predict(t)` and before `record_action`.
pub fn borrow_identity_residual(banker: &BankerOmd) -> Option<f64> {
    let report = banker.last_report()?;
    if report.borrow <= 0.0 {
        return None;
    }
    let expected = report.sigma + banker.ledger().missing_sigma();
    Some((report.cumulative_borrow - expected).abs() / expected.max(1.0))
}

/// Banker-OMD played directly, without a safety mixture.
#[derive(Debug, Clone)]
pub struct BankerLearner {
    inner: BankerOmd,
}

impl BankerLearner {
    pub fn new(reg: Regularizer) -> Result<Self> {
        Ok(Self {
            inner: BankerOmd::new(reg)?,
        })
    }

    pub fn banker(&self) -> &BankerOmd {
        &self.inner
    }
}

impl Learner for BankerLearner {
    fn name(&self) -> &'static str {
        "banker-omd"
    }

    fn act(&mut self, t: Round, uniform: f64) -> Result<Action> {
        let prediction = self.inner.predict(t)?;
        let arm = sample_index(prediction.dual.point.as_slice(), uniform);
        let distribution: SimplexPoint = prediction.dual.point.clone();
        self.inner.record_action(t, prediction.dual, arm)?;
        Ok(Action { distribution, arm })
    }

    fn observe(&mut self, _t: Round, arrivals: &[FeedbackEvent]) -> Result<()> {
        for e in arrivals {
            self.inner.ingest(e)?;
        }
        Ok(())
    }
}
