use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::Round;
use crate::prudent::HardRestart;

pub const CSV_HEADER: &str = "t,stage,phase,alpha,loss_B,loss_star,loss_c,arrived";

/// One round of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: Round,
    pub stage: usize,
    pub phase: usize,
    /// Aggression in force when the round was played.
    pub alpha: f64,
    /// Cumulative pseudo-loss of the learner.
    #[serde(rename = "loss_B")]
    pub loss_b: f64,
    /// Cumulative loss of the best fixed arm in hindsight.
    pub loss_star: f64,
    /// Cumulative pseudo-loss of the comparator.
    pub loss_c: f64,
    /// Feedback items delivered at the end of the round.
    pub arrived: usize,
}

impl TraceRow {
    /// `R_B*(t) = L_B(t) - L*(t)`.
    pub fn regret_best(&self) -> f64 {
        self.loss_b - self.loss_star
    }

    /// `L_B(t) - L_c(t)`.
    pub fn comparator_gap(&self) -> f64 {
        self.loss_b - self.loss_c
    }
}

/// A hard restart together with the unobservable window delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardRestartLog {
    #[serde(flatten)]
    pub restart: HardRestart,
    /// Sum of all realized delays `d_r` over the ended stage, arrived or not.
    pub window_delay: u64,
}

/// Worst-case values of the per-round invariant checks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InvariantReport {
    pub rounds_checked: usize,
    pub max_conservation_residual: f64,
    pub min_credit: f64,
    pub max_borrow_identity_residual: f64,
    pub borrow_identity_checks: usize,
    /// Largest `E[sigma D] / (C2 / sigma)` seen.
    pub max_stability_ratio: f64,
    pub stability_violations: usize,
    pub doubling_violations: usize,
    pub stage_bound_holds: bool,
    pub missing_count_checks: usize,
    pub missing_count_violations: usize,
    /// Largest importance weight produced while `alpha <= 1/2`.
    pub max_cautious_estimate: f64,
    pub estimate_bound_violations: usize,
    pub cucb_budget_violations: usize,
}

impl InvariantReport {
    pub fn all_hold(&self) -> bool {
        self.max_conservation_residual <= 1e-9
            && self.min_credit >= -1e-12
            && self.max_borrow_identity_residual <= 1e-9
            && self.stability_violations == 0
            && self.doubling_violations == 0
            && self.stage_bound_holds
            && self.missing_count_violations == 0
            && self.estimate_bound_violations == 0
            && self.cucb_budget_violations == 0
    }
}

/// Run-level facts written next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub learner: String,
    pub seed: u64,
    pub horizon: usize,
    pub arms: usize,
    pub delay_model: String,
    pub realized_delay: u64,
    pub stages: usize,
    /// Phases over all stages.
    pub phases: usize,
    pub soft_restarts: usize,
    pub hard_restarts: Vec<HardRestartLog>,
    pub final_loss_b: f64,
    pub final_loss_star: f64,
    pub final_loss_c: f64,
    pub final_regret_best: f64,
    pub final_comparator_gap: f64,
    pub anchor_arm: usize,
    pub default_reward: f64,
    pub delta: f64,
    /// The anchor arm and `r0` were computed in hindsight from the loss table.
    pub comparator_oracle: bool,
    pub discarded_feedback: usize,
    pub invariants: Option<InvariantReport>,
}

/// Rows, pseudo-loss increments and summary of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// `<p_t, l_t>` per round.
    pub increments: Vec<f64>,
    pub summary: RunSummary,
}

impl RunTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(&self.rows, out)
    }

    pub fn csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Invariant(e.to_string()))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_csv(&mut out).map_err(|e| with_path(e, path))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.save_csv(&dir.join(format!("{stem}.csv")))?;
        self.save_summary(&dir.join(format!("{stem}.json")))
    }

    /// Default file stem `<learner>-seed<seed>`.
    pub fn stem(&self) -> String {
        let learner: String = self
            .summary
            .learner
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        format!(
            "{}-seed{}",
            learner.trim_end_matches('_'),
            self.summary.seed
        )
    }
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { message, .. } => Error::Format {
            path: path.into(),
            message,
        },
        other => other,
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format {
        path: Default::default(),
        message: e.to_string(),
    }
}

/// Writes the header and one line per row.
pub fn write_rows<W: Write>(rows: &[TraceRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}").map_err(|e| Error::io(Path::new("<stream>"), e))?;
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    for row in rows {
        writer.serialize(row).map_err(csv_error)?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(Path::new("<stream>"), e))
}

/// Parses a trace CSV, checking the header.
pub fn read_rows<R: Read>(input: R) -> Result<Vec<TraceRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader
        .headers()
        .map_err(csv_error)?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != CSV_HEADER {
        return Err(Error::Format {
            path: Default::default(),
            message: format!("unexpected header `{header}`"),
        });
    }
    reader.deserialize().map(|r| r.map_err(csv_error)).collect()
}

pub fn load_rows(path: &Path) -> Result<Vec<TraceRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_rows(std::io::BufReader::new(file)).map_err(|e| with_path(e, path))
}

pub fn load_summary(path: &Path) -> Result<RunSummary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{run_on, LearnerSettings, LearnerSpec, RunOptions};
    use crate::protocol::{DelayModel, Environment, EnvironmentConfig, LossModel};

    fn env(horizon: usize) -> Environment {
        Environment::generate(&EnvironmentConfig {
            horizon,
            arms: 3,
            loss_model: LossModel::BlockNonstationary {
                blocks: horizon.clamp(1, 3),
            },
            delay_model: DelayModel::FixedOneStep { p: 0.5 },
            seed: 4,
        })
        .unwrap()
    }

    fn trace(horizon: usize) -> RunTrace {
        let options = RunOptions {
            spec: LearnerSpec::PrudentBanker,
            settings: LearnerSettings::default(),
            diagnostics: false,
        };
        run_on(&env(horizon), &options).unwrap()
    }

    #[test]
    fn empty_horizon_gives_header_only() {
        let rows: Vec<TraceRow> = Vec::new();
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn toy_run_rows_match_increments() {
        let t = trace(3);
        let csv = t.csv_string().unwrap();
        assert_eq!(csv.lines().count(), 4);
        let mut total = 0.0;
        for (row, inc) in t.rows.iter().zip(&t.increments) {
            total += inc;
            assert_eq!(row.loss_b, total);
        }
    }

    #[test]
    fn csv_and_summary_round_trip() {
        let t = trace(300);
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path(), &t.stem()).unwrap();
        let rows = load_rows(&dir.path().join("prudent-banker-seed4.csv")).unwrap();
        assert_eq!(rows, t.rows);
        let summary = load_summary(&dir.path().join("prudent-banker-seed4.json")).unwrap();
        assert_eq!(summary, t.summary);
    }

    #[test]
    fn bad_header_and_missing_file_are_reported() {
        assert!(read_rows("a,b\n1,2\n".as_bytes()).is_err());
        let err = load_rows(Path::new("/nonexistent/trace.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/trace.csv"));
    }
}
