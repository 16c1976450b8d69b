//! The delayed adversarial bandit game.
//!
//! Rounds are numbered from 1. Feedback generated at round `u` with delay
//! `d_u` arrives at the end of round `u + d_u` and is usable from round
//! `u + d_u + 1` on. Loss tables are oblivious: they are generated in full
//! before any learner acts and never change afterwards.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mirror::SimplexPoint;

/// One-based round index.
pub type Round = usize;

/// Horizon x arms matrix of losses in `[0, 1]`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossTable {
    horizon: usize,
    arms: usize,
    losses: Vec<f64>,
}

impl LossTable {
    pub fn new(horizon: usize, arms: usize, losses: Vec<f64>) -> Result<Self> {
        if arms == 0 {
            return Err(Error::Config("loss table needs at least one arm".into()));
        }
        if losses.len() != horizon * arms {
            return Err(Error::Config(format!(
                "loss table has {} entries, expected {horizon} x {arms}",
                losses.len()
            )));
        }
        if let Some(pos) = losses.iter().position(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config(format!(
                "loss at round {}, arm {} is {} (outside [0, 1])",
                pos / arms + 1,
                pos % arms,
                losses[pos]
            )));
        }
        Ok(Self {
            horizon,
            arms,
            losses,
        })
    }

    /// Builds a table from per-round rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let arms = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != arms) {
            return Err(Error::Config("ragged loss rows".into()));
        }
        Self::new(rows.len(), arms, rows.concat())
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    /// Loss vector of round `t`.
    pub fn row(&self, t: Round) -> &[f64] {
        assert!(
            t >= 1 && t <= self.horizon,
            "round {t} outside 1..={}",
            self.horizon
        );
        &self.losses[(t - 1) * self.arms..t * self.arms]
    }

    pub fn loss(&self, t: Round, arm: usize) -> f64 {
        self.row(t)[arm]
    }

    /// Cumulative loss of each arm over the whole horizon.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.arms];
        for row in self.losses.chunks_exact(self.arms) {
            for (s, l) in sums.iter_mut().zip(row) {
                *s += l;
            }
        }
        sums
    }
}

/// Per-round nonnegative delays.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelaySequence {
    delays: Vec<u64>,
}

impl DelaySequence {
    pub fn new(delays: Vec<u64>) -> Self {
        Self { delays }
    }

    pub fn zeros(horizon: usize) -> Self {
        Self::new(vec![0; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.delays.len()
    }

    /// Delay of round `t` (one-based).
    pub fn delay(&self, t: Round) -> u64 {
        self.delays[t - 1]
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.delays
    }

    /// Exact total delay `D`.
    pub fn total(&self) -> u128 {
        self.delays.iter().map(|&d| u128::from(d)).sum()
    }

    /// Exact total delay over rounds `from..=to`.
    pub fn window_total(&self, from: Round, to: Round) -> u128 {
        if from > to {
            return 0;
        }
        self.delays[from - 1..to]
            .iter()
            .map(|&d| u128::from(d))
            .sum()
    }

    pub fn arrival_round(&self, t: Round) -> u64 {
        t as u64 + self.delay(t)
    }
}

/// The observation `(A_u, loss)` of round `u`, delivered at `arrival_round`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub origin_round: Round,
    pub arm: usize,
    pub loss_value: f64,
    pub arrival_round: Round,
}

impl FeedbackEvent {
    /// Realized delay of the event, observable at arrival.
    pub fn delay(&self) -> u64 {
        (self.arrival_round - self.origin_round) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossModel {
    /// Piecewise-stationary truncated-normal losses over `blocks` segments.
    BlockNonstationary {
        blocks: usize,
    },
    Custom {
        table: LossTable,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelayModel {
    None,
    /// `d_t = 1` with probability `p`, else 0.
    FixedOneStep {
        p: f64,
    },
    /// With probability `p_active`, `d_t ~ Geom(q_geo)` on `{1, 2, ...}`, else 0.
    Geometric {
        p_active: f64,
        q_geo: f64,
    },
    /// With probability `p_active`, `d_t = 1 + floor(Z)` with `Z ~ Lomax(shape, scale)`, else 0.
    Lomax {
        p_active: f64,
        shape: f64,
        scale: f64,
    },
    Explicit {
        delays: Vec<u64>,
    },
}

impl DelayModel {
    pub fn label(&self) -> &'static str {
        match self {
            DelayModel::None => "none",
            DelayModel::FixedOneStep { .. } => "fixed",
            DelayModel::Geometric { .. } => "geometric",
            DelayModel::Lomax { .. } => "lomax",
            DelayModel::Explicit { .. } => "explicit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    pub horizon: usize,
    pub arms: usize,
    pub loss_model: LossModel,
    pub delay_model: DelayModel,
    pub seed: u64,
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {p} is not a probability")))
    }
}

impl EnvironmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if self.arms == 0 {
            return Err(Error::Config("need at least one arm".into()));
        }
        match &self.loss_model {
            LossModel::BlockNonstationary { blocks } => {
                if *blocks == 0 || *blocks > self.horizon {
                    return Err(Error::Config(format!(
                        "blocks = {blocks} must lie in 1..={}",
                        self.horizon
                    )));
                }
            }
            LossModel::Custom { table } => {
                if table.horizon() != self.horizon || table.arms() != self.arms {
                    return Err(Error::Config(format!(
                        "custom table is {} x {}, config says {} x {}",
                        table.horizon(),
                        table.arms(),
                        self.horizon,
                        self.arms
                    )));
                }
            }
        }
        match &self.delay_model {
            DelayModel::None => {}
            DelayModel::FixedOneStep { p } => check_probability("p", *p)?,
            DelayModel::Geometric { p_active, q_geo } => {
                check_probability("p_active", *p_active)?;
                check_probability("q_geo", *q_geo)?;
                if *q_geo == 0.0 {
                    return Err(Error::Config("q_geo must be positive".into()));
                }
            }
            DelayModel::Lomax {
                p_active,
                shape,
                scale,
            } => {
                check_probability("p_active", *p_active)?;
                if !(*shape > 0.0) || !shape.is_finite() {
                    return Err(Error::Config(format!("shape = {shape} must be positive")));
                }
                if !(*scale > 0.0) || !scale.is_finite() {
                    return Err(Error::Config(format!("scale = {scale} must be positive")));
                }
            }
            DelayModel::Explicit { delays } => {
                if delays.len() != self.horizon {
                    return Err(Error::Config(format!(
                        "explicit delay sequence has length {}, horizon is {}",
                        delays.len(),
                        self.horizon
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Named random streams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Losses,
    Delays,
    /// Action sampling of one learner, keyed by a learner tag.
    Actions(u64),
    /// Free-form auxiliary stream (Monte-Carlo probes and the like).
    Aux(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Losses => 1,
            Stream::Delays => 2,
            Stream::Actions(tag) => 0x100 + tag,
            Stream::Aux(tag) => 0x1_0000_0000 + tag,
        }
    }
}

/// Independent ChaCha stream for one component of a run.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// One-based block of round `t` when `horizon` rounds are split into `blocks`.
pub fn block_index(t: Round, horizon: usize, blocks: usize) -> usize {
    let per_block = horizon / blocks + 1;
    1 + ((t - 1) / per_block).min(blocks - 1)
}

const TRUNCATION_ATTEMPTS: usize = 100;

fn truncated_normal<R: Rng + ?Sized>(normal: &Normal<f64>, rng: &mut R) -> f64 {
    let mut draw = 0.0;
    for _ in 0..TRUNCATION_ATTEMPTS {
        draw = normal.sample(rng);
        if (0.0..=1.0).contains(&draw) {
            return draw;
        }
    }
    draw.clamp(0.0, 1.0)
}

/// Block-nonstationary truncated-normal loss table.
///
/// Each (arm, block) pair gets a mean `~ U(0, 1)` and a standard deviation
/// `~ U(0.1, 0.2)`; losses are normal draws truncated to `[0, 1]`.
pub fn generate_block_losses<R: Rng + ?Sized>(
    config: &EnvironmentConfig,
    rng: &mut R,
) -> Result<LossTable> {
    config.validate()?;
    let blocks = match &config.loss_model {
        LossModel::BlockNonstationary { blocks } => *blocks,
        LossModel::Custom { table } => return Ok(table.clone()),
    };
    let arms = config.arms;
    let mut params = Vec::with_capacity(blocks * arms);
    for _ in 0..blocks {
        for _ in 0..arms {
            let mean: f64 = rng.random_range(0.0..1.0);
            let sd: f64 = rng.random_range(0.1..0.2);
            params.push(Normal::new(mean, sd).map_err(|e| Error::Numerical(e.to_string()))?);
        }
    }
    let mut losses = Vec::with_capacity(config.horizon * arms);
    for t in 1..=config.horizon {
        let b = block_index(t, config.horizon, blocks) - 1;
        for normal in &params[b * arms..(b + 1) * arms] {
            losses.push(truncated_normal(normal, rng));
        }
    }
    LossTable::new(config.horizon, arms, losses)
}

/// Largest delay a heavy-tailed draw is allowed to take.
const MAX_DELAY: f64 = 1e15;

/// Draws the delay sequence of a run.
pub fn sample_delays<R: Rng + ?Sized>(
    config: &EnvironmentConfig,
    rng: &mut R,
) -> Result<DelaySequence> {
    config.validate()?;
    let horizon = config.horizon;
    let delays = match &config.delay_model {
        DelayModel::None => vec![0; horizon],
        DelayModel::FixedOneStep { p } => (0..horizon)
            .map(|_| u64::from(rng.random_bool(*p)))
            .collect(),
        DelayModel::Geometric { p_active, q_geo } => {
            let geom = Geometric::new(*q_geo).map_err(|e| Error::Config(e.to_string()))?;
            (0..horizon)
                .map(|_| {
                    if rng.random_bool(*p_active) {
                        // rand_distr counts failures before the first success
                        1 + geom.sample(rng)
                    } else {
                        0
                    }
                })
                .collect()
        }
        DelayModel::Lomax {
            p_active,
            shape,
            scale,
        } => (0..horizon)
            .map(|_| {
                if rng.random_bool(*p_active) {
                    let u: f64 = rng.random();
                    let z = scale * ((1.0 - u).powf(-1.0 / shape) - 1.0);
                    1 + z.min(MAX_DELAY).floor() as u64
                } else {
                    0
                }
            })
            .collect(),
        DelayModel::Explicit { delays } => delays.clone(),
    };
    Ok(DelaySequence::new(delays))
}

/// A realized environment: loss table plus delay sequence, shared read-only by runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub config: EnvironmentConfig,
    pub losses: LossTable,
    pub delays: DelaySequence,
}

impl Environment {
    /// Generates losses and delays from independent streams of `config.seed`.
    pub fn generate(config: &EnvironmentConfig) -> Result<Self> {
        config.validate()?;
        let losses = generate_block_losses(config, &mut stream_rng(config.seed, Stream::Losses))?;
        let delays = sample_delays(config, &mut stream_rng(config.seed, Stream::Delays))?;
        Ok(Self {
            config: config.clone(),
            losses,
            delays,
        })
    }

    /// Assembles an environment from an explicit table and delays.
    pub fn from_parts(losses: LossTable, delays: DelaySequence, seed: u64) -> Result<Self> {
        if delays.horizon() != losses.horizon() {
            return Err(Error::Config(format!(
                "delay sequence has length {}, loss table horizon is {}",
                delays.horizon(),
                losses.horizon()
            )));
        }
        let config = EnvironmentConfig {
            horizon: losses.horizon(),
            arms: losses.arms(),
            loss_model: LossModel::Custom {
                table: losses.clone(),
            },
            delay_model: DelayModel::Explicit {
                delays: delays.as_slice().to_vec(),
            },
            seed,
        };
        Ok(Self {
            config,
            losses,
            delays,
        })
    }

    pub fn horizon(&self) -> usize {
        self.losses.horizon()
    }

    pub fn arms(&self) -> usize {
        self.losses.arms()
    }

    /// Writes a JSON dump (config, table, delays, seed) for exact replay.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let env: Environment =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Format {
                path: path.into(),
                message: e.to_string(),
            })?;
        // re-validate so a hand-edited dump cannot smuggle in bad losses
        let losses = LossTable::new(env.losses.horizon, env.losses.arms, env.losses.losses)?;
        let env = Environment { losses, ..env };
        if env.delays.horizon() != env.losses.horizon() {
            return Err(Error::Format {
                path: path.into(),
                message: "delay and loss horizons differ".into(),
            });
        }
        Ok(env)
    }
}

/// Pending feedback of one run, delivered once at its arrival round.
#[derive(Debug, Clone)]
pub struct FeedbackQueue {
    horizon: usize,
    pending: BTreeMap<Round, Vec<FeedbackEvent>>,
    last_step: Round,
    discarded: usize,
}

impl FeedbackQueue {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            pending: BTreeMap::new(),
            last_step: 0,
            discarded: 0,
        }
    }

    /// Schedules an event. Events arriving after the horizon are dropped.
    pub fn enqueue(&mut self, event: FeedbackEvent) -> Result<()> {
        if event.arrival_round < event.origin_round {
            return Err(Error::Protocol(format!(
                "event from round {} arrives earlier, at {}",
                event.origin_round, event.arrival_round
            )));
        }
        if event.arrival_round <= self.last_step {
            return Err(Error::Protocol(format!(
                "event arriving at round {} enqueued after that round was stepped",
                event.arrival_round
            )));
        }
        if event.arrival_round > self.horizon {
            self.discarded += 1;
            return Ok(());
        }
        self.pending
            .entry(event.arrival_round)
            .or_default()
            .push(event);
        Ok(())
    }

    /// Events arriving at the end of round `t`, in origin-round order.
    pub fn step(&mut self, t: Round) -> Result<Vec<FeedbackEvent>> {
        if t != self.last_step + 1 {
            return Err(Error::Protocol(format!(
                "queue stepped at round {t} after round {}",
                self.last_step
            )));
        }
        self.last_step = t;
        let mut events = self.pending.remove(&t).unwrap_or_default();
        events.sort_by_key(|e| e.origin_round);
        Ok(events)
    }

    pub fn in_flight(&self) -> usize {
        self.pending.values().map(Vec::len).sum()
    }

    /// Number of events dropped because they arrive after the horizon.
    pub fn discarded(&self) -> usize {
        self.discarded
    }
}

/// Outstanding count and delay mass of a phase at round `t`.
///
/// The outstanding count at round `u` is the number of rounds `tau` in
/// `phase_start..u` whose feedback is still missing at the start of `u`
/// (`tau + d_tau >= u`). The delay mass is the running sum of outstanding
/// counts from `phase_start` through `t`.
///
/// # Panics
/// If `phase_start > t` or `t` exceeds the horizon.
pub fn outstanding_counters(delays: &DelaySequence, phase_start: Round, t: Round) -> (u64, u64) {
    assert!(
        phase_start >= 1 && phase_start <= t,
        "need 1 <= phase_start <= t"
    );
    assert!(t <= delays.horizon(), "round {t} beyond horizon");
    let count_at = |u: Round| -> u64 {
        (phase_start..u)
            .filter(|&tau| delays.arrival_round(tau) >= u as u64)
            .count() as u64
    };
    let mut mass = 0;
    let mut current = 0;
    for u in phase_start..=t {
        current = count_at(u);
        mass += current;
    }
    (current, mass)
}

/// Played distribution and sampled arm of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub distribution: SimplexPoint,
    pub arm: usize,
}

/// Round-loop contract shared by every learner.
///
/// Per round the driver calls `act(t, u)` with one uniform draw `u` from the
/// learner's action stream, then `observe(t, events)` with the feedback that
/// arrived at the end of round `t` (possibly none).
pub trait Learner {
    fn name(&self) -> &'static str;

    fn act(&mut self, t: Round, uniform: f64) -> Result<Action>;

    fn observe(&mut self, t: Round, arrivals: &[FeedbackEvent]) -> Result<()>;

    /// Aggression weight on the learned component; 1 when not applicable.
    fn alpha(&self) -> f64 {
        1.0
    }

    fn stage(&self) -> usize {
        1
    }

    fn phase(&self) -> usize {
        1
    }
}

impl<L: Learner + ?Sized> Learner for Box<L> {
    fn name(&self) -> &'static str {
        (**self).name()
    }
    fn act(&mut self, t: Round, uniform: f64) -> Result<Action> {
        (**self).act(t, uniform)
    }
    fn observe(&mut self, t: Round, arrivals: &[FeedbackEvent]) -> Result<()> {
        (**self).observe(t, arrivals)
    }
    fn alpha(&self) -> f64 {
        (**self).alpha()
    }
    fn stage(&self) -> usize {
        (**self).stage()
    }
    fn phase(&self) -> usize {
        (**self).phase()
    }
}
