use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mirror::RegularizerKind;
use crate::protocol::{DelayModel, EnvironmentConfig, LossModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Desk,
    Paper,
}

impl Scale {
    /// Default `(T, A, B)`.
    pub fn defaults(self) -> (usize, usize, usize) {
        match self {
            Scale::Desk => (20_000, 10, 100),
            Scale::Paper => (50_000, 100, 500),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!(
                "unknown scale `{other}` (desk|paper)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerSpec {
    PrudentBanker,
    BankerOmd,
    ConservativeUcb,
    SafeExp3Ix,
    PlayComparator,
    PlayFixedArm(usize),
}

impl LearnerSpec {
    /// Key of the learner's action-sampling stream.
    pub fn stream_tag(self) -> u64 {
        match self {
            LearnerSpec::PrudentBanker => 1,
            LearnerSpec::BankerOmd => 2,
            LearnerSpec::ConservativeUcb => 3,
            LearnerSpec::SafeExp3Ix => 4,
            LearnerSpec::PlayComparator => 5,
            LearnerSpec::PlayFixedArm(i) => 1_000 + i as u64,
        }
    }

    /// Fixed arms accept `play-fixed-arm` as a placeholder for the best arm.
    pub fn all_primary() -> [LearnerSpec; 4] {
        [
            LearnerSpec::PrudentBanker,
            LearnerSpec::BankerOmd,
            LearnerSpec::ConservativeUcb,
            LearnerSpec::SafeExp3Ix,
        ]
    }
}

impl fmt::Display for LearnerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LearnerSpec::PrudentBanker => f.write_str("prudent-banker"),
            LearnerSpec::BankerOmd => f.write_str("banker-omd"),
            LearnerSpec::ConservativeUcb => f.write_str("conservative-ucb"),
            LearnerSpec::SafeExp3Ix => f.write_str("safe-exp3ix"),
            LearnerSpec::PlayComparator => f.write_str("play-comparator"),
            LearnerSpec::PlayFixedArm(i) => write!(f, "play-fixed-arm({i})"),
        }
    }
}

impl FromStr for LearnerSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s
            .strip_prefix("play-fixed-arm(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let arm = inner
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad arm index in `{s}`")))?;
            return Ok(LearnerSpec::PlayFixedArm(arm));
        }
        match s {
            "prudent-banker" => Ok(LearnerSpec::PrudentBanker),
            "banker-omd" => Ok(LearnerSpec::BankerOmd),
            "conservative-ucb" => Ok(LearnerSpec::ConservativeUcb),
            "safe-exp3ix" => Ok(LearnerSpec::SafeExp3Ix),
            "play-comparator" => Ok(LearnerSpec::PlayComparator),
            other => Err(Error::Config(format!(
                "unknown learner `{other}` (prudent-banker|banker-omd|conservative-ucb|safe-exp3ix|play-comparator|play-fixed-arm(i))"
            ))),
        }
    }
}

/// Learner-side parameters of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LearnerSettings {
    pub regularizer: RegularizerKind,
    /// Comparator margin; `None` means `0.1 / A`.
    pub delta: Option<f64>,
    pub alpha_safe: f64,
    /// Conservative-UCB confidence; `None` means `1 / max(T, 2)`.
    pub ucb_confidence: Option<f64>,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        Self {
            regularizer: RegularizerKind::NegativeEntropy,
            delta: None,
            alpha_safe: 0.1,
            ucb_confidence: None,
        }
    }
}

impl LearnerSettings {
    pub fn delta_for(&self, arms: usize) -> f64 {
        self.delta.unwrap_or(0.1 / arms as f64)
    }
}

/// Everything needed to reproduce a set of runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub env: EnvironmentConfig,
    pub learner: LearnerSpec,
    pub settings: LearnerSettings,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    /// Evaluate invariant checks every round (slower).
    pub diagnostics: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        let arms = self.env.arms;
        let delta = self.settings.delta_for(arms);
        if !(delta > 0.0) || delta > 1.0 / arms as f64 + 1e-15 {
            return Err(Error::Config(format!(
                "delta = {delta} must lie in (0, 1/{arms}]"
            )));
        }
        if !(0.0..=1.0).contains(&self.settings.alpha_safe) {
            return Err(Error::Config("alpha_safe must lie in [0, 1]".into()));
        }
        if let LearnerSpec::PlayFixedArm(i) = self.learner {
            if i >= arms {
                return Err(Error::Config(format!(
                    "fixed arm {i} out of range for {arms} arms"
                )));
            }
        }
        Ok(())
    }

    /// Environment config with the seed replaced.
    pub fn env_for_seed(&self, seed: u64) -> EnvironmentConfig {
        EnvironmentConfig {
            seed,
            ..self.env.clone()
        }
    }
}

/// Accumulates `key = value` settings from files and command-line flags.
#[derive(Debug, Clone, Default)]
pub struct ConfigBuilder {
    scale: Option<Scale>,
    horizon: Option<usize>,
    arms: Option<usize>,
    blocks: Option<usize>,
    delay: Option<String>,
    p: Option<f64>,
    p_active: Option<f64>,
    q_geo: Option<f64>,
    shape: Option<f64>,
    lomax_scale: Option<f64>,
    delays: Option<Vec<u64>>,
    learner: Option<LearnerSpec>,
    regularizer: Option<RegularizerKind>,
    delta: Option<f64>,
    alpha_safe: Option<f64>,
    ucb_confidence: Option<f64>,
    seeds: Option<Vec<u64>>,
    output: Option<PathBuf>,
    diagnostics: Option<bool>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for `{key}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<u64>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

/// Seeds as a list `1,2,3` or a range `1..=5`.
fn parse_seeds(value: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = value.split_once("..=") {
        let (a, b): (u64, u64) = (parse("seeds", a)?, parse("seeds", b)?);
        return Ok((a..=b).collect());
    }
    parse_list("seeds", value)
}

impl ConfigBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one setting; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<&mut Self> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "scale" => self.scale = Some(v.parse()?),
            "horizon" | "t" => self.horizon = Some(parse(&key, v)?),
            "arms" | "a" => self.arms = Some(parse(&key, v)?),
            "blocks" | "b" => self.blocks = Some(parse(&key, v)?),
            "delay" | "delay_model" => self.delay = Some(v.to_string()),
            "p" => self.p = Some(parse(&key, v)?),
            "p_active" => self.p_active = Some(parse(&key, v)?),
            "q_geo" => self.q_geo = Some(parse(&key, v)?),
            "shape" => self.shape = Some(parse(&key, v)?),
            "lomax_scale" => self.lomax_scale = Some(parse(&key, v)?),
            "delays" => self.delays = Some(parse_list(&key, v)?),
            "learner" => self.learner = Some(v.parse()?),
            "regularizer" => self.regularizer = Some(v.parse()?),
            "delta" => self.delta = Some(parse(&key, v)?),
            "alpha_safe" => self.alpha_safe = Some(parse(&key, v)?),
            "delta_ucb" | "ucb_confidence" => self.ucb_confidence = Some(parse(&key, v)?),
            "seed" | "seeds" => self.seeds = Some(parse_seeds(v)?),
            "out" | "output" => self.output = Some(PathBuf::from(v)),
            "diagnostics" => self.diagnostics = Some(parse(&key, v)?),
            other => return Err(Error::Config(format!("unknown setting `{other}`"))),
        }
        Ok(self)
    }

    /// Reads a flat `key = value` file; `#` starts a comment.
    pub fn load_file(&mut self, path: &Path) -> Result<&mut Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: path.into(),
                message: format!("line {}: expected `key = value`", i + 1),
            })?;
            self.set(k, v).map_err(|e| Error::Format {
                path: path.into(),
                message: format!("line {}: {e}", i + 1),
            })?;
        }
        Ok(self)
    }

    fn delay_model(&self) -> Result<DelayModel> {
        let name = self.delay.as_deref().unwrap_or(if self.delays.is_some() {
            "explicit"
        } else {
            "none"
        });
        Ok(match name {
            "none" => DelayModel::None,
            "fixed" | "fixed-one-step" => DelayModel::FixedOneStep {
                p: self.p.unwrap_or(0.03),
            },
            "geometric" => DelayModel::Geometric {
                p_active: self.p_active.unwrap_or(0.03),
                q_geo: self.q_geo.unwrap_or(0.4),
            },
            "lomax" | "pareto" => DelayModel::Lomax {
                p_active: self.p_active.unwrap_or(0.03),
                shape: self.shape.unwrap_or(2.5),
                scale: self.lomax_scale.unwrap_or(1.0),
            },
            "explicit" => DelayModel::Explicit {
                delays: self
                    .delays
                    .clone()
                    .ok_or_else(|| Error::Config("explicit delay model needs `delays`".into()))?,
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown delay model `{other}` (none|fixed|geometric|lomax|explicit)"
                )))
            }
        })
    }

    pub fn build(&self) -> Result<RunConfig> {
        let (t, a, b) = self.scale.unwrap_or(Scale::Desk).defaults();
        let horizon = self.horizon.unwrap_or(t);
        let seeds = self.seeds.clone().unwrap_or_else(|| vec![0]);
        let config = RunConfig {
            env: EnvironmentConfig {
                horizon,
                arms: self.arms.unwrap_or(a),
                loss_model: LossModel::BlockNonstationary {
                    blocks: self.blocks.unwrap_or(b.min(horizon.max(1))),
                },
                delay_model: self.delay_model()?,
                seed: seeds[0],
            },
            learner: self.learner.unwrap_or(LearnerSpec::PrudentBanker),
            settings: LearnerSettings {
                regularizer: self.regularizer.unwrap_or(RegularizerKind::NegativeEntropy),
                delta: self.delta,
                alpha_safe: self.alpha_safe.unwrap_or(0.1),
                ucb_confidence: self.ucb_confidence,
            },
            seeds,
            output: self.output.clone(),
            diagnostics: self.diagnostics.unwrap_or(false),
        };
        config.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learner_spec_round_trips() {
        for s in [
            LearnerSpec::PrudentBanker,
            LearnerSpec::BankerOmd,
            LearnerSpec::ConservativeUcb,
            LearnerSpec::SafeExp3Ix,
            LearnerSpec::PlayComparator,
            LearnerSpec::PlayFixedArm(3),
        ] {
            assert_eq!(s.to_string().parse::<LearnerSpec>().unwrap(), s);
        }
        assert!("ucb".parse::<LearnerSpec>().is_err());
    }

    #[test]
    fn builder_defaults_and_overrides() {
        let c = ConfigBuilder::new().build().unwrap();
        assert_eq!((c.env.horizon, c.env.arms), (20_000, 10));
        assert_eq!(
            c.env.loss_model,
            LossModel::BlockNonstationary { blocks: 100 }
        );
        assert_eq!(c.settings.delta_for(10), 0.01);

        let mut b = ConfigBuilder::new();
        b.set("scale", "paper").unwrap();
        b.set("delay", "geometric").unwrap();
        b.set("seeds", "3..=5").unwrap();
        let c = b.build().unwrap();
        assert_eq!((c.env.horizon, c.env.arms), (50_000, 100));
        assert_eq!(c.seeds, vec![3, 4, 5]);
        assert_eq!(
            c.env.delay_model,
            DelayModel::Geometric {
                p_active: 0.03,
                q_geo: 0.4
            }
        );
    }

    #[test]
    fn config_file_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# small run\nhorizon = 50\narms=3\nblocks = 5\ndelay = lomax  # heavy tail\nlearner = safe-exp3ix\nseeds = 1, 2\n",
        )
        .unwrap();
        let c = ConfigBuilder::new()
            .load_file(&path)
            .unwrap()
            .build()
            .unwrap();
        assert_eq!(c.env.horizon, 50);
        assert_eq!(c.learner, LearnerSpec::SafeExp3Ix);
        assert_eq!(c.seeds, vec![1, 2]);

        std::fs::write(&path, "horizon 50\n").unwrap();
        assert!(matches!(
            ConfigBuilder::new().load_file(&path),
            Err(Error::Format { .. })
        ));
        std::fs::write(&path, "colour = red\n").unwrap();
        assert!(ConfigBuilder::new().load_file(&path).is_err());
    }

    #[test]
    fn invalid_settings_rejected() {
        let mut b = ConfigBuilder::new();
        b.set("arms", "4").unwrap().set("delta", "0.5").unwrap();
        assert!(b.build().is_err());
        let mut b = ConfigBuilder::new();
        b.set("horizon", "10").unwrap().set("blocks", "11").unwrap();
        assert!(b.build().is_err());
    }
}
